#pragma once

#include <atomic>
#include <cstdint>
#include <optional>
#include <string>

#include "xlab/dataset.hpp"
#include "xlab/model.hpp"
#include "xlab/trainer.hpp"
#include "xlab/transferset.hpp"

namespace xlab {

// Sample-counted query budget. Reservations are all-or-nothing, so a
// rejected request spends nothing.
class QueryBudget {
 public:
  explicit QueryBudget(std::optional<std::size_t> limit = std::nullopt) : limit_(limit) {}

  bool try_reserve(std::size_t samples);
  std::size_t used() const { return used_.load(); }
  std::optional<std::size_t> limit() const { return limit_; }
  std::optional<std::size_t> remaining() const;

 private:
  std::optional<std::size_t> limit_;
  std::atomic<std::size_t> used_{0};
};

// The only view an attacker has of the victim: inputs in, probability rows out.
class Oracle {
 public:
  virtual ~Oracle() = default;
  // batch is N×C×H×W; returns N×K rows summing to 1.
  virtual Tensor<float> query(const Tensor<float>& batch) = 0;
  virtual std::optional<std::size_t> budget_remaining() const = 0;
  virtual std::size_t queries_used() const = 0;
  virtual std::string id() const = 0;
};

// In-process oracle around a model copy. Safe for concurrent queries.
class LocalOracle final : public Oracle {
 public:
  explicit LocalOracle(Model model, std::optional<std::size_t> budget = std::nullopt, std::string id = "local");

  Tensor<float> query(const Tensor<float>& batch) override;
  std::optional<std::size_t> budget_remaining() const override { return budget_.remaining(); }
  std::size_t queries_used() const override { return budget_.used(); }
  std::string id() const override { return id_; }

 private:
  Model model_;
  QueryBudget budget_;
  std::string id_;
};

// Draws `budget` pool rows uniformly without replacement (seeded), discards
// the pool labels and stores the oracle's rows untouched.
TransferSet build_transferset(Oracle& oracle, const LabeledDataset& pool, std::size_t budget, std::uint64_t seed,
                              std::size_t query_batch = 64);

struct ExtractionConfig {
  std::size_t budget = 1000;
  ModelSpec surrogate_spec;
  TrainConfig train_config;  // label_mode is forced to soft
  std::uint64_t seed = 0;    // transfer-set sampling
  std::size_t query_batch = 64;

  void validate() const;
};

Model train_surrogate(const ExtractionConfig& config, const TransferSet& transferset);

struct ExtractionResult {
  Model surrogate;
  TransferSet transferset;
  TrainHistory history;
  double seconds = 0.0;
};

ExtractionResult extract(Oracle& oracle, const LabeledDataset& pool, const ExtractionConfig& config);

}  // namespace xlab
