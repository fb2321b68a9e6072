#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "xlab/dataset.hpp"
#include "xlab/model.hpp"
#include "xlab/transferset.hpp"

namespace xlab {

enum class LabelMode { hard, soft };

struct TrainConfig {
  double initial_lr = 0.01;
  double decay_factor = 0.1;
  std::size_t decay_every = 15;
  std::size_t max_epochs = 30;
  std::size_t batch_size = 64;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  LabelMode label_mode = LabelMode::hard;

  void validate() const;
};

// initial_lr · decay_factor^floor(epoch / decay_every)
double lr_at(const TrainConfig& config, std::size_t epoch);

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double mean_loss = 0.0;
  double train_accuracy = 0.0;
  std::optional<double> heldout_accuracy;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
};

struct TrainResult {
  Model model;
  TrainHistory history;
};

// Heavy-ball SGD: v ← μ·v + g, θ ← θ − lr·v.
class SgdMomentum {
 public:
  explicit SgdMomentum(double momentum) : momentum_(momentum) {}
  void step(std::vector<Param>& params, const Gradients<float>& grads, double lr);

 private:
  double momentum_;
  std::vector<Tensor<float>> velocity_;
};

// Hard labels are one-hot encoded and share the soft-target loss.
// `monitor`, when given, is scored after every epoch but never trained on.
TrainResult train(Model model, const LabeledDataset& dataset, const TrainConfig& config,
                  const LabeledDataset* monitor = nullptr);

// Called before every epoch with the model as it stands; may rewrite the
// inputs of the dataset being trained on (shape and labels stay fixed).
using EpochHook = std::function<void(std::size_t epoch, const Model& model)>;
TrainResult train(Model model, const LabeledDataset& dataset, const TrainConfig& config,
                  const LabeledDataset* monitor, const EpochHook& before_epoch);
TrainResult train(Model model, const TransferSet& transferset, const TrainConfig& config,
                  const LabeledDataset* monitor = nullptr);

double evaluate_accuracy(const Model& model, const LabeledDataset& dataset);

// Batched predict_label / predict_proba over a whole input tensor.
std::vector<int> predict_labels_batched(const Model& model, const Tensor<float>& inputs, std::size_t batch = 256);
Tensor<float> predict_proba_batched(const Model& model, const Tensor<float>& inputs, std::size_t batch = 256);

}  // namespace xlab
