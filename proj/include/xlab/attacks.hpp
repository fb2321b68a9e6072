#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>

#include "xlab/dataset.hpp"
#include "xlab/model.hpp"
#include "xlab/trainer.hpp"

namespace xlab {

enum class Technique { fgsm, pgd };

std::string_view to_string(Technique technique);
Technique parse_technique(std::string_view name);

// L∞ attack settings. Inputs are assumed to live in [0, 1].
struct AttackConfig {
  Technique technique = Technique::fgsm;
  double epsilon = 0.1;
  std::size_t steps = 10;             // pgd
  std::optional<double> step_size;    // pgd; defaults to 2.5·ε/steps
  bool random_start = false;          // pgd
  std::optional<std::uint64_t> seed;  // required with random_start

  double alpha() const { return step_size.value_or(2.5 * epsilon / static_cast<double>(steps)); }
  void validate() const;

  // Step size equal to ε, as the iterated update is usually written.
  static AttackConfig paper_literal_pgd(double epsilon, std::size_t steps);
};

// x + ε·sign(∇ₓL) clamped to [0, 1]; sign(0) = 0.
Tensor<float> fgsm(const Model& model, const Tensor<float>& x, std::span<const int> labels, double epsilon);

// Iterated signed steps, each projected onto the ε-ball around x and [0, 1].
Tensor<float> pgd(const Model& model, const Tensor<float>& x, std::span<const int> labels, const AttackConfig& config);

Tensor<float> perturb(const Model& model, const Tensor<float>& x, std::span<const int> labels,
                      const AttackConfig& config);

struct AdversarialSet {
  LabeledDataset data;
  Technique technique = Technique::fgsm;
  double epsilon = 0.0;
};

AdversarialSet craft_adversarial_set(const Model& model, const LabeledDataset& dataset, const AttackConfig& config,
                                     std::size_t batch_size = 250);

// Adversarial copies of every training example are appended to the
// originals, labelled with the original ground truth. The copies are first
// crafted against the converged natural model. With refresh_every = 0 they
// stay fixed (static augmentation); otherwise they are re-crafted against the
// model being retrained at every refresh_every-th epoch.
struct AdvTrainConfig {
  AttackConfig attack;
  std::size_t refresh_every = 0;
};

struct AdvTrainResult {
  Model natural;
  Model robust;
  TrainHistory natural_history;
  TrainHistory robust_history;
  std::size_t augmented_size = 0;
};

// Natural training, crafting against the converged natural model, then
// retraining a freshly initialized model on the doubled set.
Model adversarial_train(const ModelSpec& spec, const LabeledDataset& dataset, const AdvTrainConfig& adv_config,
                        const TrainConfig& train_config);
AdvTrainResult adversarial_train_detailed(const ModelSpec& spec, const LabeledDataset& dataset,
                                          const AdvTrainConfig& adv_config, const TrainConfig& train_config);
// Same pipeline when the natural model already exists.
TrainResult adversarial_retrain(const Model& natural, const LabeledDataset& dataset, const AdvTrainConfig& adv_config,
                                const TrainConfig& train_config);

}  // namespace xlab
