#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xlab/attacks.hpp"
#include "xlab/dataset.hpp"
#include "xlab/model.hpp"

namespace xlab {

// Fraction of positions where the two label sequences match.
double accuracy(std::span<const int> predicted, std::span<const int> truth);

// Fraction of inputs on which both models predict the same label; ground
// truth is ignored.
double agreement(const Model& surrogate, const Model& victim, const LabeledDataset& testset);

enum class GridMode { white_box, transfer };

std::string_view to_string(GridMode mode);

// Accuracy under attack for every (technique, ε) pair.
struct AdvGrid {
  GridMode mode = GridMode::white_box;
  std::vector<Technique> techniques;
  std::vector<double> epsilons;
  std::vector<std::vector<double>> values;  // [technique][epsilon]

  double at(Technique technique, double epsilon) const;
};

// Settings shared by every cell; technique and ε are overwritten per cell.
struct GridSettings {
  std::vector<Technique> techniques{Technique::fgsm, Technique::pgd};
  std::vector<double> epsilons;
  AttackConfig attack;
};

// Examples are crafted against `model` itself.
AdvGrid adv_accuracy_grid(const Model& model, const LabeledDataset& testset, const GridSettings& settings);

// Examples crafted against `source` once per cell, then scored on each target.
std::vector<AdvGrid> transfer_accuracy_grids(const Model& source, std::span<const Model* const> targets,
                                             const LabeledDataset& testset, const GridSettings& settings);

// One surrogate row: a victim extracted at one budget under one seed.
struct ExtractionReport {
  std::string victim_id;
  std::optional<Technique> technique;  // empty for the natural victim
  double epsilon = 0.0;
  std::size_t budget = 0;
  std::uint64_t seed = 0;
  double test_acc = 0.0;
  double agreement = 0.0;
  std::optional<AdvGrid> grid;           // white-box against the surrogate
  std::optional<AdvGrid> transfer_grid;  // crafted against the victim
  double seconds = 0.0;

  bool natural() const { return !technique.has_value(); }
  std::string victim_type() const { return natural() ? "natural" : "adversarial"; }
  std::string technique_name() const { return technique ? std::string(to_string(*technique)) : "none"; }
  void validate() const;
};

struct GainRow {
  std::optional<Technique> technique;
  double epsilon = 0.0;
  std::size_t budget = 0;
  double accuracy_gain = 0.0;
  double agreement_gain = 0.0;
  // Smallest B'/B at which the adversarial victim's surrogate meets the
  // natural baseline at B; empty when no measured budget up to B gets there.
  std::optional<double> accuracy_parity;
  std::optional<double> agreement_parity;
};

struct GainTable {
  std::vector<GainRow> rows;

  const GainRow& at(Technique technique, double epsilon, std::size_t budget) const;
};

// Medians over seeds per (victim, budget), then ratios against the natural
// victim at the same budget. Parity interpolates linearly between measured
// budgets and never extrapolates.
GainTable extraction_gains(std::span<const ExtractionReport> reports);

// Smallest budget at which the piecewise-linear curve through `points`
// (sorted by budget) reaches `target`, searching no further than `limit`.
std::optional<double> parity_budget(std::span<const std::pair<double, double>> points, double target, double limit);

double median(std::vector<double> values);

// CSV columns: victim_type, technique, epsilon, budget, seed, test_acc,
// agreement, adv_<tech>_<eps>..., xfer_<tech>_<eps>...
std::string reports_to_csv(std::span<const ExtractionReport> reports);
std::vector<ExtractionReport> reports_from_csv(const std::string& text);
std::vector<ExtractionReport> read_reports_csv(const std::filesystem::path& path);

std::string format_epsilon(double epsilon);

}  // namespace xlab
