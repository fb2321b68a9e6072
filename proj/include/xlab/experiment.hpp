#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "xlab/attacks.hpp"
#include "xlab/dataset.hpp"
#include "xlab/metrics.hpp"
#include "xlab/trainer.hpp"

namespace xlab {

// Desk defaults: near-binary templates so that a natural victim is both
// accurate and easy to evade; the pool uses many unrelated templates.
inline SynthConfig desk_victim_synth() {
  SynthConfig s;
  s.num_classes = 10;
  s.template_seed = 100;
  s.noise = 0.15;
  s.contrast = 0.4;
  s.sharpness = 6.0;
  s.blobs = 6;
  return s;
}

inline SynthConfig desk_pool_synth() {
  SynthConfig s = desk_victim_synth();
  s.num_classes = 400;
  s.template_seed = 777;
  return s;
}

inline TrainConfig desk_victim_train() {
  TrainConfig t;
  t.initial_lr = 0.01;
  t.max_epochs = 20;
  t.decay_every = 10;
  return t;
}

inline TrainConfig desk_surrogate_train() {
  TrainConfig t;
  t.initial_lr = 0.05;
  t.batch_size = 32;
  t.max_epochs = 60;
  t.decay_every = 20;
  return t;
}

// Synthetic sources draw their sample noise from the run seed; templates
// come from synth.template_seed. IDX sources are read as they are.
struct VictimDataConfig {
  std::string source = "synthetic";  // synthetic | idx
  SynthConfig synth = desk_victim_synth();
  std::size_t train_per_class = 500;
  std::size_t test_per_class = 100;
  std::filesystem::path train_images, train_labels, test_images, test_labels;
};

struct PoolConfig {
  std::string source = "synthetic";  // synthetic | idx
  SynthConfig synth = desk_pool_synth();  // num_classes is the number of pool templates
  std::size_t size = 8000;
  std::filesystem::path images, labels;
};

struct AdvMatrix {
  std::vector<Technique> techniques{Technique::fgsm, Technique::pgd};
  std::vector<double> epsilons{0.05, 0.1};
  std::size_t pgd_steps = 3;
  std::size_t refresh_every = 1;
};

struct ExtractionMatrix {
  std::vector<std::size_t> budgets{250, 500, 1000, 2000, 4000};
  std::string surrogate_family = "mlp-wide";
  TrainConfig train = desk_surrogate_train();
  std::size_t query_batch = 64;
  std::string oracle = "local";  // local | service (loopback HTTP per victim)
};

struct MetricsConfig {
  std::vector<Technique> techniques{Technique::fgsm, Technique::pgd};
  std::vector<double> epsilons{0.01, 0.03, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3};
  std::size_t pgd_steps = 10;
  bool transfer = true;  // also score surrogates on examples crafted against their victim
};

struct ExperimentConfig {
  std::string id = "desk_default";
  std::filesystem::path output_dir = "out";
  std::vector<std::uint64_t> seeds{1, 2, 3};
  VictimDataConfig victim_data;
  PoolConfig pool;
  std::string victim_family = "cnn-small";
  TrainConfig victim_train = desk_victim_train();
  AdvMatrix adversarial;
  ExtractionMatrix extraction;
  MetricsConfig metrics;

  // Throws config_error naming the offending field path.
  void validate() const;
  std::filesystem::path root() const { return output_dir / id; }
};

// JSON text; unknown keys and type errors throw config_error with the field path.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
// Canonical JSON with every field spelled out.
std::string config_to_json(const ExperimentConfig& config);

std::string sha256_hex(const std::string& bytes);

struct VictimSummary {
  std::string id;  // natural | adv-<tech>-<eps>
  std::optional<Technique> technique;
  double epsilon = 0.0;
  std::uint64_t seed = 0;
  double test_acc = 0.0;
  AdvGrid grid;
  double train_seconds = 0.0;
};

struct Datasets {
  LabeledDataset train;
  LabeledDataset test;
  LabeledDataset pool;
};

Datasets make_datasets(const ExperimentConfig& config, std::uint64_t seed);

struct ExperimentOutput {
  std::vector<VictimSummary> victims;
  std::vector<ExtractionReport> reports;
  std::size_t stages_run = 0;
  std::size_t stages_skipped = 0;
};

// Runs every seed, resuming from <root>/<seed>/manifest.json, and writes
// <root>/reports.csv, <root>/victims.csv and <root>/reports.json.
ExperimentOutput run_experiment(const ExperimentConfig& config, std::ostream* progress = nullptr);

// Columns: victim_type, technique, epsilon, seed, test_acc, adv_<tech>_<eps>...
std::string victims_to_csv(const std::vector<VictimSummary>& victims);
std::vector<VictimSummary> victims_from_csv(const std::string& text);

struct TrendCheck {
  std::string name;
  std::string description;
  bool passed = false;
  double measured = 0.0;
  double threshold = 0.0;
  std::string detail;
};

struct TrendVerdict {
  std::vector<TrendCheck> checks;
  bool passed() const;
  std::string to_json() const;
};

inline constexpr double kTrendEpsilon = 0.1;
inline constexpr double kMonotoneSlack = 0.02;
inline constexpr double kRobustnessGain = 0.20;

// T1 budget monotonicity of median agreement per victim (single drops of
// at most kMonotoneSlack tolerated); T2 pooled median agreement of
// adversarial-victim surrogates at the smallest budget >= natural; T3 pooled
// median PGD accuracy at ε = 0.1 of adversarial-victim surrogates > natural;
// T4 median PGD accuracy at ε = 0.1 of the PGD-trained victims exceeds the
// natural victim by kRobustnessGain.
TrendVerdict evaluate_trends(const std::vector<ExtractionReport>& reports, const std::vector<VictimSummary>& victims);

// Reads <root>/reports.csv and <root>/victims.csv; needs at least 3 seeds.
TrendVerdict run_trends(const ExperimentConfig& config);

}  // namespace xlab
