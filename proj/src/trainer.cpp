#include "xlab/trainer.hpp"

#include <cmath>
#include <numeric>

#include "xlab/seeding.hpp"

namespace xlab {

void TrainConfig::validate() const {
  if (!(initial_lr > 0.0)) throw Error(Errc::invalid_argument, "initial_lr must be > 0");
  if (!(decay_factor > 0.0 && decay_factor <= 1.0)) throw Error(Errc::invalid_argument, "decay_factor must lie in (0, 1]");
  if (decay_every == 0) throw Error(Errc::invalid_argument, "decay_every must be >= 1");
  if (max_epochs == 0) throw Error(Errc::invalid_argument, "max_epochs must be >= 1");
  if (batch_size == 0) throw Error(Errc::invalid_argument, "batch_size must be >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw Error(Errc::invalid_argument, "momentum must lie in [0, 1)");
}

double lr_at(const TrainConfig& config, std::size_t epoch) {
  return config.initial_lr * std::pow(config.decay_factor, static_cast<double>(epoch / config.decay_every));
}

void SgdMomentum::step(std::vector<Param>& params, const Gradients<float>& grads, double lr) {
  if (velocity_.empty()) {
    for (const Param& p : params) velocity_.emplace_back(p.value.shape());
  }
  const float mu = static_cast<float>(momentum_);
  const float rate = static_cast<float>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto it = grads.find(params[i].name);
    if (it == grads.end()) continue;
    velocity_[i].array() = mu * velocity_[i].array() + it->second.array();
    params[i].value.array() -= rate * velocity_[i].array();
  }
}

namespace {

TrainResult run_sgd(Model model, const Tensor<float>& inputs, const Tensor<float>& targets,
                    const std::vector<int>* hard_labels, const TrainConfig& config, const LabeledDataset* monitor,
                    const EpochHook& before_epoch) {
  config.validate();
  const auto& in = model.spec().input_shape;
  if (inputs.rank() != 4 || inputs.dim(1) != in[0] || inputs.dim(2) != in[1] || inputs.dim(3) != in[2]) {
    throw Error(Errc::shape_mismatch, "training inputs " + to_string(inputs.shape()) + " do not match model '" +
                                          model.spec().name + "'");
  }
  if (targets.rank() != 2 || targets.dim(0) != inputs.dim(0) || targets.dim(1) != model.spec().num_classes) {
    throw Error(Errc::shape_mismatch, "training targets " + to_string(targets.shape()) + " do not match model '" +
                                          model.spec().name + "'");
  }
  if (monitor && monitor->role != DatasetRole::heldout_test) {
    throw Error(Errc::invalid_argument, "monitor set must be a heldout-test dataset");
  }

  const std::size_t n = inputs.dim(0);
  SgdMomentum optimizer(config.momentum);
  TrainHistory history;
  for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    if (before_epoch) before_epoch(epoch, model);
    const double lr = lr_at(config, epoch);
    const std::vector<std::size_t> order = permutation(n, derive_seed({config.seed, epoch, 0x5ffe}));
    double loss_sum = 0.0;
    std::size_t correct = 0;
    std::size_t step = 0;
    for (std::size_t begin = 0; begin < n; begin += config.batch_size, ++step) {
      const std::size_t end = std::min(n, begin + config.batch_size);
      const std::span<const std::size_t> rows(order.data() + begin, end - begin);
      const Tensor<float> x = gather_rows(inputs, rows);
      const Tensor<float> t = gather_rows(targets, rows);

      auto cg = build_classifier_graph<float>(model.spec(), rows.size(),
                                              {.param_grad = true, .with_loss = true, .training = true});
      cg.graph.set_seed(derive_seed({config.seed, epoch, step, 0xd50f}));
      Bindings<float> bindings;
      std::vector<Tensor<float>> storage;
      model.bind(bindings, storage);
      bindings.insert_or_assign("input", std::cref(x));
      bindings.insert_or_assign("target", std::cref(t));
      double loss = 0.0;
      try {
        loss = cg.graph.forward(bindings, *cg.loss).item();
      } catch (const Error& e) {
        if (e.code() != Errc::non_finite) throw;
        throw Error(Errc::non_finite, "training diverged in epoch " + std::to_string(epoch) + ": " + e.what());
      }
      if (!std::isfinite(loss)) {
        throw Error(Errc::non_finite, "non-finite loss in epoch " + std::to_string(epoch));
      }
      loss_sum += loss * static_cast<double>(rows.size());

      const Tensor<float>& lp = cg.graph.value(cg.log_probs);
      const std::vector<int> predicted = argmax_rows(lp);
      const std::vector<int> soft_truth = hard_labels ? std::vector<int>{} : argmax_rows(t);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const int truth = hard_labels ? (*hard_labels)[rows[i]] : soft_truth[i];
        correct += predicted[i] == truth;
      }

      Gradients<float> grads = cg.graph.backward(*cg.loss);
      optimizer.step(model.params(), grads, lr);
    }
    EpochRecord record;
    record.epoch = epoch;
    record.lr = lr;
    record.mean_loss = loss_sum / static_cast<double>(n);
    record.train_accuracy = static_cast<double>(correct) / static_cast<double>(n);
    if (monitor) record.heldout_accuracy = evaluate_accuracy(model, *monitor);
    history.epochs.push_back(record);
  }
  for (const Param& p : model.params()) {
    if (!p.value.all_finite()) throw Error(Errc::non_finite, "parameter '" + p.name + "' diverged");
  }
  model.meta().epochs = config.max_epochs;
  model.meta().final_lr = lr_at(config, config.max_epochs - 1);
  return {std::move(model), std::move(history)};
}

}  // namespace

TrainResult train(Model model, const LabeledDataset& dataset, const TrainConfig& config, const LabeledDataset* monitor) {
  return train(std::move(model), dataset, config, monitor, EpochHook{});
}

TrainResult train(Model model, const LabeledDataset& dataset, const TrainConfig& config, const LabeledDataset* monitor,
                  const EpochHook& before_epoch) {
  if (config.label_mode != LabelMode::hard) {
    throw Error(Errc::invalid_argument, "soft label mode needs a transfer set");
  }
  if (dataset.role == DatasetRole::heldout_test) {
    throw Error(Errc::heldout_misuse, "refusing to train on heldout dataset '" + dataset.name + "'");
  }
  if (dataset.size() == 0) throw Error(Errc::empty_input, "training set is empty");
  if (dataset.num_classes != model.spec().num_classes) {
    throw Error(Errc::shape_mismatch, "dataset has " + std::to_string(dataset.num_classes) + " classes, model " +
                                          std::to_string(model.spec().num_classes));
  }
  const Tensor<float> targets = one_hot(dataset.labels, dataset.num_classes);
  TrainResult result = run_sgd(std::move(model), dataset.inputs, targets, &dataset.labels, config, monitor, before_epoch);
  result.model.meta().dataset_id = dataset.name;
  return result;
}

TrainResult train(Model model, const TransferSet& transferset, const TrainConfig& config, const LabeledDataset* monitor) {
  if (config.label_mode != LabelMode::soft) {
    throw Error(Errc::invalid_argument, "hard label mode needs a labeled dataset");
  }
  if (transferset.size() == 0) throw Error(Errc::empty_input, "transfer set is empty");
  transferset.validate();
  TrainResult result = run_sgd(std::move(model), transferset.inputs, transferset.soft_labels, nullptr, config, monitor, EpochHook{});
  result.model.meta().dataset_id = transferset.provenance.pool_id;
  return result;
}

Tensor<float> predict_proba_batched(const Model& model, const Tensor<float>& inputs, std::size_t batch) {
  const std::size_t n = inputs.dim(0);
  Tensor<float> out({n, model.spec().num_classes});
  const std::size_t k = model.spec().num_classes;
  for (std::size_t begin = 0; begin < n; begin += batch) {
    const std::size_t end = std::min(n, begin + batch);
    const Tensor<float> probs = predict_proba(model, slice_rows(inputs, begin, end));
    std::copy(probs.data().begin(), probs.data().end(), out.raw() + begin * k);
  }
  return out;
}

std::vector<int> predict_labels_batched(const Model& model, const Tensor<float>& inputs, std::size_t batch) {
  return argmax_rows(predict_proba_batched(model, inputs, batch));
}

double evaluate_accuracy(const Model& model, const LabeledDataset& dataset) {
  if (dataset.size() == 0) throw Error(Errc::empty_input, "cannot score an empty dataset");
  const std::vector<int> predicted = predict_labels_batched(model, dataset.inputs);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) correct += predicted[i] == dataset.labels[i];
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

}  // namespace xlab
