#include "xlab/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "xlab/binary_io.hpp"

namespace xlab {

double accuracy(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) {
    throw Error(Errc::shape_mismatch, "accuracy over " + std::to_string(predicted.size()) + " predictions and " +
                                          std::to_string(truth.size()) + " labels");
  }
  if (predicted.empty()) throw Error(Errc::empty_input, "accuracy of an empty sequence");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) hits += predicted[i] == truth[i];
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

double agreement(const Model& surrogate, const Model& victim, const LabeledDataset& testset) {
  const auto& a = surrogate.spec().input_shape;
  const auto& b = victim.spec().input_shape;
  if (a != b || testset.input_shape() != a) {
    throw Error(Errc::shape_mismatch, "agreement needs both models to accept the test inputs " +
                                          to_string(testset.inputs.shape()));
  }
  return accuracy(predict_labels_batched(surrogate, testset.inputs), predict_labels_batched(victim, testset.inputs));
}

std::string_view to_string(GridMode mode) { return mode == GridMode::white_box ? "white_box" : "transfer"; }

double AdvGrid::at(Technique technique, double epsilon) const {
  const auto t = std::find(techniques.begin(), techniques.end(), technique);
  const auto e = std::find(epsilons.begin(), epsilons.end(), epsilon);
  if (t == techniques.end() || e == epsilons.end()) {
    throw Error(Errc::invalid_argument, "grid has no cell " + std::string(to_string(technique)) + " at " +
                                            format_epsilon(epsilon));
  }
  return values[static_cast<std::size_t>(t - techniques.begin())][static_cast<std::size_t>(e - epsilons.begin())];
}

namespace {

void check_settings(const GridSettings& settings) {
  if (settings.epsilons.empty()) throw Error(Errc::invalid_argument, "epsilon grid is empty");
  if (settings.techniques.empty()) throw Error(Errc::invalid_argument, "technique list is empty");
}

AttackConfig cell_config(const GridSettings& settings, Technique technique, double epsilon) {
  AttackConfig c = settings.attack;
  c.technique = technique;
  c.epsilon = epsilon;
  return c;
}

AdvGrid empty_grid(const GridSettings& settings, GridMode mode) {
  AdvGrid grid;
  grid.mode = mode;
  grid.techniques = settings.techniques;
  grid.epsilons = settings.epsilons;
  grid.values.assign(settings.techniques.size(), std::vector<double>(settings.epsilons.size(), 0.0));
  return grid;
}

}  // namespace

AdvGrid adv_accuracy_grid(const Model& model, const LabeledDataset& testset, const GridSettings& settings) {
  check_settings(settings);
  AdvGrid grid = empty_grid(settings, GridMode::white_box);
  for (std::size_t t = 0; t < settings.techniques.size(); ++t) {
    for (std::size_t e = 0; e < settings.epsilons.size(); ++e) {
      const AdversarialSet adv =
          craft_adversarial_set(model, testset, cell_config(settings, settings.techniques[t], settings.epsilons[e]));
      grid.values[t][e] = evaluate_accuracy(model, adv.data);
    }
  }
  return grid;
}

std::vector<AdvGrid> transfer_accuracy_grids(const Model& source, std::span<const Model* const> targets,
                                             const LabeledDataset& testset, const GridSettings& settings) {
  check_settings(settings);
  std::vector<AdvGrid> grids(targets.size(), empty_grid(settings, GridMode::transfer));
  for (std::size_t t = 0; t < settings.techniques.size(); ++t) {
    for (std::size_t e = 0; e < settings.epsilons.size(); ++e) {
      const AdversarialSet adv =
          craft_adversarial_set(source, testset, cell_config(settings, settings.techniques[t], settings.epsilons[e]));
      for (std::size_t m = 0; m < targets.size(); ++m) grids[m].values[t][e] = evaluate_accuracy(*targets[m], adv.data);
    }
  }
  return grids;
}

void ExtractionReport::validate() const {
  auto rate = [&](double v, const char* what) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw Error(Errc::invalid_argument, std::string(what) + " " + std::to_string(v) + " outside [0, 1] for victim '" +
                                              victim_id + "'");
    }
  };
  rate(test_acc, "test_acc");
  rate(agreement, "agreement");
  for (const auto* g : {&grid, &transfer_grid}) {
    if (!*g) continue;
    for (const auto& row : (*g)->values) {
      for (double v : row) rate(v, "adversarial accuracy");
    }
  }
}

double median(std::vector<double> values) {
  if (values.empty()) throw Error(Errc::empty_input, "median of nothing");
  std::sort(values.begin(), values.end());
  const std::size_t mid = values.size() / 2;
  return values.size() % 2 ? values[mid] : 0.5 * (values[mid - 1] + values[mid]);
}

std::optional<double> parity_budget(std::span<const std::pair<double, double>> points, double target, double limit) {
  if (points.empty() || points.front().first > limit) return std::nullopt;
  if (points.front().second >= target) return points.front().first;
  for (std::size_t i = 0; i + 1 < points.size() && points[i + 1].first <= limit; ++i) {
    const auto [b0, v0] = points[i];
    const auto [b1, v1] = points[i + 1];
    if (v1 >= target) return b0 + (target - v0) / (v1 - v0) * (b1 - b0);
  }
  return std::nullopt;
}

const GainRow& GainTable::at(Technique technique, double epsilon, std::size_t budget) const {
  for (const GainRow& r : rows) {
    if (r.technique == technique && r.epsilon == epsilon && r.budget == budget) return r;
  }
  throw Error(Errc::invalid_argument, "no gain row for " + std::string(to_string(technique)) + " ε=" +
                                          format_epsilon(epsilon) + " B=" + std::to_string(budget));
}

GainTable extraction_gains(std::span<const ExtractionReport> reports) {
  struct Cell {
    std::vector<double> acc;
    std::vector<double> agr;
  };
  using VictimKey = std::pair<int, double>;  // technique (-1 natural), ε
  std::map<VictimKey, std::map<std::size_t, Cell>> cells;
  for (const ExtractionReport& r : reports) {
    r.validate();
    const VictimKey key{r.technique ? static_cast<int>(*r.technique) : -1, r.natural() ? 0.0 : r.epsilon};
    Cell& c = cells[key][r.budget];
    c.acc.push_back(r.test_acc);
    c.agr.push_back(r.agreement);
  }
  const auto natural = cells.find({-1, 0.0});
  if (natural == cells.end()) throw Error(Errc::missing_baseline, "no natural-victim reports");

  GainTable table;
  for (const auto& [key, by_budget] : cells) {
    if (key.first < 0) continue;
    std::vector<std::pair<double, double>> acc_curve, agr_curve;
    for (const auto& [budget, cell] : by_budget) {
      acc_curve.emplace_back(static_cast<double>(budget), median(cell.acc));
      agr_curve.emplace_back(static_cast<double>(budget), median(cell.agr));
    }
    std::size_t i = 0;
    for (const auto& [budget, cell] : by_budget) {
      const auto base = natural->second.find(budget);
      if (base == natural->second.end()) {
        throw Error(Errc::missing_baseline, "no natural-victim report at budget " + std::to_string(budget));
      }
      const double nat_acc = median(base->second.acc);
      const double nat_agr = median(base->second.agr);
      if (!(nat_acc > 0.0 && nat_agr > 0.0)) {
        throw Error(Errc::missing_baseline, "natural baseline is zero at budget " + std::to_string(budget));
      }
      GainRow row;
      row.technique = static_cast<Technique>(key.first);
      row.epsilon = key.second;
      row.budget = budget;
      row.accuracy_gain = acc_curve[i].second / nat_acc;
      row.agreement_gain = agr_curve[i].second / nat_agr;
      const double b = static_cast<double>(budget);
      if (auto p = parity_budget(acc_curve, nat_acc, b)) row.accuracy_parity = *p / b;
      if (auto p = parity_budget(agr_curve, nat_agr, b)) row.agreement_parity = *p / b;
      table.rows.push_back(row);
      ++i;
    }
  }
  return table;
}

std::string format_epsilon(double epsilon) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", epsilon);
  return buf;
}

namespace {

std::string fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::vector<std::string> grid_columns(const AdvGrid& grid, const char* prefix) {
  std::vector<std::string> names;
  for (Technique t : grid.techniques) {
    for (double e : grid.epsilons) names.push_back(std::string(prefix) + std::string(to_string(t)) + "_" + format_epsilon(e));
  }
  return names;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::stringstream in(line);
  std::string field;
  while (std::getline(in, field, sep)) out.push_back(field);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

double parse_double(const std::string& text, const std::string& what) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw Error(Errc::corrupt_file, "bad number '" + text + "' in column " + what);
  }
  return v;
}

const char* const kFixedColumns[] = {"victim_type", "technique", "epsilon", "budget", "seed", "test_acc", "agreement"};

}  // namespace

std::string reports_to_csv(std::span<const ExtractionReport> reports) {
  std::vector<std::string> header(std::begin(kFixedColumns), std::end(kFixedColumns));
  std::vector<std::string> adv_cols, xfer_cols;
  if (!reports.empty()) {
    if (reports.front().grid) adv_cols = grid_columns(*reports.front().grid, "adv_");
    if (reports.front().transfer_grid) xfer_cols = grid_columns(*reports.front().transfer_grid, "xfer_");
  }
  header.insert(header.end(), adv_cols.begin(), adv_cols.end());
  header.insert(header.end(), xfer_cols.begin(), xfer_cols.end());

  std::string out;
  for (std::size_t i = 0; i < header.size(); ++i) out += (i ? "," : "") + header[i];
  out += '\n';
  for (const ExtractionReport& r : reports) {
    r.validate();
    const bool same_adv = r.grid ? grid_columns(*r.grid, "adv_") == adv_cols : adv_cols.empty();
    const bool same_xfer = r.transfer_grid ? grid_columns(*r.transfer_grid, "xfer_") == xfer_cols : xfer_cols.empty();
    if (!same_adv || !same_xfer) throw Error(Errc::invalid_argument, "reports disagree on grid columns");
    out += r.victim_type() + "," + r.technique_name() + "," + format_epsilon(r.epsilon) + "," +
           std::to_string(r.budget) + "," + std::to_string(r.seed) + "," + fixed(r.test_acc) + "," +
           fixed(r.agreement);
    for (const auto* g : {&r.grid, &r.transfer_grid}) {
      if (!*g) continue;
      for (const auto& row : (*g)->values) {
        for (double v : row) out += "," + fixed(v);
      }
    }
    out += '\n';
  }
  return out;
}

std::vector<ExtractionReport> reports_from_csv(const std::string& text) {
  std::stringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw Error(Errc::corrupt_file, "report CSV has no header");
  const std::vector<std::string> header = split(line, ',');
  const std::size_t fixed_count = std::size(kFixedColumns);
  if (header.size() < fixed_count || !std::equal(std::begin(kFixedColumns), std::end(kFixedColumns), header.begin())) {
    throw Error(Errc::corrupt_file, "report CSV header must start with " + std::string(kFixedColumns[0]) + ",...," +
                                        kFixedColumns[fixed_count - 1]);
  }
  // Grid columns: <prefix>_<technique>_<epsilon>.
  struct GridColumn {
    bool transfer;
    Technique technique;
    double epsilon;
  };
  std::vector<GridColumn> grid_cols;
  GridSettings adv_shape, xfer_shape;
  for (std::size_t c = fixed_count; c < header.size(); ++c) {
    const std::vector<std::string> parts = split(header[c], '_');
    if (parts.size() != 3 || (parts[0] != "adv" && parts[0] != "xfer")) {
      throw Error(Errc::corrupt_file, "unknown report column '" + header[c] + "'");
    }
    grid_cols.push_back({parts[0] == "xfer", parse_technique(parts[1]), parse_double(parts[2], header[c])});
  }
  // Technique and ε orderings follow the header.
  adv_shape.techniques.clear();
  xfer_shape.techniques.clear();
  for (const GridColumn& col : grid_cols) {
    GridSettings& shape = col.transfer ? xfer_shape : adv_shape;
    if (std::find(shape.techniques.begin(), shape.techniques.end(), col.technique) == shape.techniques.end()) {
      shape.techniques.push_back(col.technique);
    }
    if (std::find(shape.epsilons.begin(), shape.epsilons.end(), col.epsilon) == shape.epsilons.end()) {
      shape.epsilons.push_back(col.epsilon);
    }
  }
  if (adv_shape.techniques.size() * adv_shape.epsilons.size() + xfer_shape.techniques.size() * xfer_shape.epsilons.size() !=
      grid_cols.size()) {
    throw Error(Errc::corrupt_file, "grid columns do not form a full technique × epsilon table");
  }

  std::vector<ExtractionReport> reports;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::vector<std::string> f = split(line, ',');
    if (f.size() != header.size()) {
      throw Error(Errc::corrupt_file, "report CSV line " + std::to_string(line_no) + " has " +
                                          std::to_string(f.size()) + " fields, header has " +
                                          std::to_string(header.size()));
    }
    ExtractionReport r;
    if (f[0] != "natural" && f[0] != "adversarial") {
      throw Error(Errc::corrupt_file, "unknown victim_type '" + f[0] + "' on line " + std::to_string(line_no));
    }
    if (f[1] != "none") r.technique = parse_technique(f[1]);
    if ((f[0] == "natural") != !r.technique) {
      throw Error(Errc::corrupt_file, "victim_type and technique disagree on line " + std::to_string(line_no));
    }
    r.epsilon = parse_double(f[2], "epsilon");
    r.budget = static_cast<std::size_t>(parse_double(f[3], "budget"));
    r.seed = static_cast<std::uint64_t>(parse_double(f[4], "seed"));
    r.test_acc = parse_double(f[5], "test_acc");
    r.agreement = parse_double(f[6], "agreement");
    r.victim_id = r.natural() ? "natural" : "adv-" + f[1] + "-" + f[2];
    if (!adv_shape.epsilons.empty()) r.grid = empty_grid(adv_shape, GridMode::white_box);
    if (!xfer_shape.epsilons.empty()) r.transfer_grid = empty_grid(xfer_shape, GridMode::transfer);
    for (std::size_t c = 0; c < grid_cols.size(); ++c) {
      const GridColumn& col = grid_cols[c];
      const GridSettings& shape = col.transfer ? xfer_shape : adv_shape;
      AdvGrid& g = col.transfer ? *r.transfer_grid : *r.grid;
      const auto t = std::find(shape.techniques.begin(), shape.techniques.end(), col.technique) - shape.techniques.begin();
      const auto e = std::find(shape.epsilons.begin(), shape.epsilons.end(), col.epsilon) - shape.epsilons.begin();
      g.values[static_cast<std::size_t>(t)][static_cast<std::size_t>(e)] =
          parse_double(f[fixed_count + c], header[fixed_count + c]);
    }
    r.validate();
    reports.push_back(std::move(r));
  }
  return reports;
}

std::vector<ExtractionReport> read_reports_csv(const std::filesystem::path& path) {
  return reports_from_csv(io::read_file(path.string()));
}

}  // namespace xlab
