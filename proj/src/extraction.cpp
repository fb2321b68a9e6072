#include "xlab/extraction.hpp"

#include <chrono>

namespace xlab {

bool QueryBudget::try_reserve(std::size_t samples) {
  std::size_t current = used_.load();
  do {
    if (limit_ && (current > *limit_ || samples > *limit_ - current)) return false;
  } while (!used_.compare_exchange_weak(current, current + samples));
  return true;
}

std::optional<std::size_t> QueryBudget::remaining() const {
  if (!limit_) return std::nullopt;
  return *limit_ - std::min(*limit_, used_.load());
}

LocalOracle::LocalOracle(Model model, std::optional<std::size_t> budget, std::string id)
    : model_(std::move(model)), budget_(budget), id_(std::move(id)) {
  if (budget && *budget == 0) throw Error(Errc::invalid_argument, "oracle budget must be >= 1");
}

Tensor<float> LocalOracle::query(const Tensor<float>& batch) {
  if (batch.rank() != 4) throw Error(Errc::shape_mismatch, "oracle query must be N×C×H×W, got " + to_string(batch.shape()));
  if (!budget_.try_reserve(batch.dim(0))) {
    throw Error(Errc::budget_exhausted, "oracle '" + id_ + "' budget exhausted after " +
                                            std::to_string(budget_.used()) + " samples");
  }
  return predict_proba(model_, batch);
}

TransferSet build_transferset(Oracle& oracle, const LabeledDataset& pool, std::size_t budget, std::uint64_t seed,
                              std::size_t query_batch) {
  if (budget == 0) throw Error(Errc::invalid_argument, "budget must be >= 1");
  if (query_batch == 0) throw Error(Errc::invalid_argument, "query batch must be >= 1");
  if (budget > pool.size()) {
    throw Error(Errc::budget_exceeds_pool, "budget " + std::to_string(budget) + " exceeds pool '" + pool.name +
                                               "' of " + std::to_string(pool.size()));
  }
  if (const auto left = oracle.budget_remaining(); left && *left < budget) {
    throw Error(Errc::budget_exhausted, "oracle has " + std::to_string(*left) + " queries left, need " +
                                            std::to_string(budget));
  }
  std::vector<std::size_t> order = permutation(pool.size(), seed);
  order.resize(budget);

  TransferSet set;
  set.inputs = gather_rows(pool.inputs, order);
  std::size_t k = 0;
  std::vector<float> probs;
  for (std::size_t begin = 0; begin < budget; begin += query_batch) {
    const std::size_t end = std::min(budget, begin + query_batch);
    const Tensor<float> rows = oracle.query(slice_rows(set.inputs, begin, end));
    if (rows.rank() != 2 || rows.dim(0) != end - begin || (k != 0 && rows.dim(1) != k)) {
      throw Error(Errc::malformed_response, "oracle returned " + to_string(rows.shape()) + " for " +
                                                std::to_string(end - begin) + " queries");
    }
    k = rows.dim(1);
    probs.insert(probs.end(), rows.data().begin(), rows.data().end());
  }
  set.soft_labels = Tensor<float>({budget, k}, std::move(probs));
  set.provenance = {oracle.id(), pool.name, seed, budget};
  set.validate();
  return set;
}

void ExtractionConfig::validate() const {
  if (budget == 0) throw Error(Errc::invalid_argument, "extraction budget must be >= 1");
  if (query_batch == 0) throw Error(Errc::invalid_argument, "query batch must be >= 1");
  surrogate_spec.validate();
  train_config.validate();
}

namespace {

TrainResult fit_surrogate(const ExtractionConfig& config, const TransferSet& transferset) {
  TrainConfig tc = config.train_config;
  tc.label_mode = LabelMode::soft;
  TrainResult result = train(build_model(config.surrogate_spec, tc.seed), transferset, tc);
  const TransferProvenance& p = transferset.provenance;
  result.model.meta().provenance = "surrogate oracle=" + p.oracle_id + " pool=" + p.pool_id +
                                   " budget=" + std::to_string(p.budget) + " seed=" + std::to_string(p.seed);
  return result;
}

}  // namespace

Model train_surrogate(const ExtractionConfig& config, const TransferSet& transferset) {
  config.validate();
  return fit_surrogate(config, transferset).model;
}

ExtractionResult extract(Oracle& oracle, const LabeledDataset& pool, const ExtractionConfig& config) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  TransferSet set = build_transferset(oracle, pool, config.budget, config.seed, config.query_batch);
  TrainResult trained = fit_surrogate(config, set);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {std::move(trained.model), std::move(set), std::move(trained.history), seconds};
}

}  // namespace xlab
