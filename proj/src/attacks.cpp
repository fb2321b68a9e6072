#include "xlab/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "xlab/seeding.hpp"

namespace xlab {

std::string_view to_string(Technique technique) {
  return technique == Technique::fgsm ? "fgsm" : "pgd";
}

Technique parse_technique(std::string_view name) {
  if (name == "fgsm") return Technique::fgsm;
  if (name == "pgd") return Technique::pgd;
  throw Error(Errc::invalid_argument, "unknown attack technique '" + std::string(name) + "'");
}

namespace {

void check_epsilon(double epsilon) {
  if (!(epsilon >= 0.0 && epsilon <= 0.5)) {
    throw Error(Errc::invalid_argument, "epsilon " + std::to_string(epsilon) + " outside [0, 0.5]");
  }
}

float sign(float v) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); }

Tensor<float> loss_gradient(const Model& model, const Tensor<float>& x, std::span<const int> labels) {
  if (x.rank() != 4 || labels.size() != x.dim(0)) {
    throw Error(Errc::shape_mismatch, "attack batch " + to_string(x.shape()) + " with " +
                                          std::to_string(labels.size()) + " labels");
  }
  return input_gradient(model, x, one_hot(labels, model.spec().num_classes));
}

}  // namespace

void AttackConfig::validate() const {
  check_epsilon(epsilon);
  if (technique == Technique::pgd) {
    if (steps == 0) throw Error(Errc::invalid_argument, "pgd needs at least one step");
    if (!(alpha() > 0.0) && epsilon > 0.0) throw Error(Errc::invalid_argument, "pgd step size must be > 0");
    if (step_size && !(*step_size > 0.0)) throw Error(Errc::invalid_argument, "pgd step size must be > 0");
    if (random_start && !seed) throw Error(Errc::invalid_argument, "pgd random start requires a seed");
  }
}

AttackConfig AttackConfig::paper_literal_pgd(double epsilon, std::size_t steps) {
  AttackConfig c;
  c.technique = Technique::pgd;
  c.epsilon = epsilon;
  c.steps = steps;
  c.step_size = epsilon;
  return c;
}

Tensor<float> fgsm(const Model& model, const Tensor<float>& x, std::span<const int> labels, double epsilon) {
  check_epsilon(epsilon);
  if (epsilon == 0.0) return x;
  const Tensor<float> grad = loss_gradient(model, x, labels);
  const float eps = static_cast<float>(epsilon);
  Tensor<float> out = x;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::clamp(x[i] + eps * sign(grad[i]), 0.0f, 1.0f);
  }
  return out;
}

Tensor<float> pgd(const Model& model, const Tensor<float>& x, std::span<const int> labels, const AttackConfig& config) {
  config.validate();
  if (config.technique != Technique::pgd) throw Error(Errc::invalid_argument, "pgd() called with a non-pgd config");
  if (config.epsilon == 0.0) return x;
  const float eps = static_cast<float>(config.epsilon);
  const float alpha = static_cast<float>(config.alpha());
  // x - ε and x + ε bound every iterate, intersected with [0, 1].
  auto project = [&](Tensor<float>& current) {
    for (std::size_t i = 0; i < current.size(); ++i) {
      const float lo = x[i] - eps;
      const float hi = x[i] + eps;
      current[i] = std::clamp(std::clamp(current[i], lo, hi), 0.0f, 1.0f);
    }
  };
  Tensor<float> current = x;
  if (config.random_start) {
    std::mt19937_64 rng(*config.seed);
    std::uniform_real_distribution<float> start(-eps, eps);
    for (float& v : current.data()) v += start(rng);
    project(current);
  }
  for (std::size_t t = 0; t < config.steps; ++t) {
    const Tensor<float> grad = loss_gradient(model, current, labels);
    for (std::size_t i = 0; i < current.size(); ++i) current[i] += alpha * sign(grad[i]);
    project(current);
  }
  return current;
}

Tensor<float> perturb(const Model& model, const Tensor<float>& x, std::span<const int> labels,
                      const AttackConfig& config) {
  config.validate();
  return config.technique == Technique::fgsm ? fgsm(model, x, labels, config.epsilon) : pgd(model, x, labels, config);
}

AdversarialSet craft_adversarial_set(const Model& model, const LabeledDataset& dataset, const AttackConfig& config,
                                     std::size_t batch_size) {
  config.validate();
  if (dataset.role == DatasetRole::adversary_pool) {
    throw Error(Errc::invalid_argument, "adversarial sets are crafted from victim-train or heldout-test data");
  }
  if (dataset.size() == 0) throw Error(Errc::empty_input, "cannot craft from an empty dataset");
  AdversarialSet out;
  out.technique = config.technique;
  out.epsilon = config.epsilon;
  std::ostringstream name;
  name << dataset.name << "-adv-" << to_string(config.technique) << '-' << config.epsilon;
  out.data.name = name.str();
  out.data.role = dataset.role;
  out.data.num_classes = dataset.num_classes;
  out.data.labels = dataset.labels;
  out.data.inputs = Tensor<float>(dataset.inputs.shape());
  const std::size_t n = dataset.size();
  const std::size_t row = dataset.inputs.size() / n;
  for (std::size_t begin = 0, index = 0; begin < n; begin += batch_size, ++index) {
    const std::size_t end = std::min(n, begin + batch_size);
    AttackConfig batch_config = config;
    if (config.random_start) batch_config.seed = derive_seed({*config.seed, index});
    const Tensor<float> adv =
        perturb(model, slice_rows(dataset.inputs, begin, end),
                std::span<const int>(dataset.labels).subspan(begin, end - begin), batch_config);
    std::copy(adv.data().begin(), adv.data().end(), out.data.inputs.raw() + begin * row);
  }
  return out;
}

TrainResult adversarial_retrain(const Model& natural, const LabeledDataset& dataset, const AdvTrainConfig& adv_config,
                                const TrainConfig& train_config) {
  const AdversarialSet adv = craft_adversarial_set(natural, dataset, adv_config.attack);
  LabeledDataset augmented;
  augmented.name = dataset.name + "+" + adv.data.name;
  augmented.role = DatasetRole::victim_train;
  augmented.num_classes = dataset.num_classes;
  augmented.inputs = concat_rows(dataset.inputs, adv.data.inputs);
  augmented.labels = dataset.labels;
  augmented.labels.insert(augmented.labels.end(), adv.data.labels.begin(), adv.data.labels.end());

  const std::size_t n = dataset.size();
  const std::size_t row = dataset.inputs.size() / n;
  EpochHook refresh;
  if (adv_config.refresh_every > 0) {
    refresh = [&](std::size_t epoch, const Model& current) {
      if (epoch == 0 || epoch % adv_config.refresh_every != 0) return;
      AttackConfig attack = adv_config.attack;
      if (attack.random_start) attack.seed = derive_seed({*attack.seed, epoch});
      const AdversarialSet fresh = craft_adversarial_set(current, dataset, attack);
      std::copy(fresh.data.inputs.data().begin(), fresh.data.inputs.data().end(), augmented.inputs.raw() + n * row);
    };
  }
  TrainResult result =
      train(build_model(natural.spec(), train_config.seed), augmented, train_config, nullptr, refresh);
  TrainingMeta& meta = result.model.meta();
  meta.adversarial = true;
  meta.technique = std::string(to_string(adv_config.attack.technique));
  meta.epsilon = adv_config.attack.epsilon;
  return result;
}

AdvTrainResult adversarial_train_detailed(const ModelSpec& spec, const LabeledDataset& dataset,
                                          const AdvTrainConfig& adv_config, const TrainConfig& train_config) {
  adv_config.attack.validate();
  TrainResult natural = train(build_model(spec, train_config.seed), dataset, train_config);
  TrainResult robust = adversarial_retrain(natural.model, dataset, adv_config, train_config);
  const std::size_t augmented = 2 * dataset.size();
  return {std::move(natural.model), std::move(robust.model), std::move(natural.history),
          std::move(robust.history), augmented};
}

Model adversarial_train(const ModelSpec& spec, const LabeledDataset& dataset, const AdvTrainConfig& adv_config,
                        const TrainConfig& train_config) {
  return adversarial_train_detailed(spec, dataset, adv_config, train_config).robust;
}

}  // namespace xlab
