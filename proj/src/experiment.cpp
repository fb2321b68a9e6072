#include "xlab/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include <openssl/evp.h>

#include <json.hpp>

#include "xlab/binary_io.hpp"
#include "xlab/extraction.hpp"
#include "xlab/oracle_service.hpp"
#include "xlab/seeding.hpp"

namespace xlab {

using json = nlohmann::ordered_json;
using ordered = nlohmann::ordered_json;

// ---- config ----

namespace {

[[noreturn]] void config_fail(const std::string& path, const std::string& message) {
  throw Error(Errc::config_error, path + ": " + message);
}

// Reads keys from one JSON object and rejects any it was not asked about.
class Fields {
 public:
  Fields(const json& object, std::string path) : object_(object), path_(std::move(path)) {
    if (!object_.is_object()) config_fail(path_, "must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!object_.contains(key)) return;
    try {
      out = object_.at(key).get<T>();
    } catch (const json::exception& e) {
      config_fail(at(key), std::string("wrong type (") + e.what() + ")");
    }
  }

  void path(const char* key, std::filesystem::path& out) {
    std::string text = out.string();
    get(key, text);
    out = text;
  }

  void techniques(const char* key, std::vector<Technique>& out) {
    std::vector<std::string> names;
    for (Technique t : out) names.emplace_back(to_string(t));
    get(key, names);
    out.clear();
    for (const std::string& n : names) {
      try {
        out.push_back(parse_technique(n));
      } catch (const Error&) {
        config_fail(at(key), "unknown technique '" + n + "'");
      }
    }
  }

  // Nested object; an absent key yields an empty object so defaults stand.
  Fields sub(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Fields(object_.contains(key) ? object_.at(key) : empty, at(key));
  }

  void finish() const {
    for (const auto& [key, value] : object_.items()) {
      if (!seen_.count(key)) config_fail(at(key.c_str()), "unknown key");
    }
  }

  std::string at(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  const json& object_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_synth(Fields f, SynthConfig& s) {
  f.get("num_classes", s.num_classes);
  f.get("side", s.side);
  f.get("channels", s.channels);
  f.get("template_seed", s.template_seed);
  f.get("noise", s.noise);
  f.get("contrast", s.contrast);
  f.get("sharpness", s.sharpness);
  f.get("blobs", s.blobs);
  f.finish();
}

void read_train(Fields f, TrainConfig& t) {
  f.get("initial_lr", t.initial_lr);
  f.get("decay_factor", t.decay_factor);
  f.get("decay_every", t.decay_every);
  f.get("max_epochs", t.max_epochs);
  f.get("batch_size", t.batch_size);
  f.get("momentum", t.momentum);
  f.finish();
}

ordered synth_json(const SynthConfig& s) {
  return {{"num_classes", s.num_classes}, {"side", s.side},         {"channels", s.channels},
          {"template_seed", s.template_seed}, {"noise", s.noise}, {"contrast", s.contrast},
          {"sharpness", s.sharpness},     {"blobs", s.blobs}};
}

ordered train_json(const TrainConfig& t) {
  return {{"initial_lr", t.initial_lr}, {"decay_factor", t.decay_factor}, {"decay_every", t.decay_every},
          {"max_epochs", t.max_epochs}, {"batch_size", t.batch_size},     {"momentum", t.momentum}};
}

std::vector<std::string> technique_names(const std::vector<Technique>& ts) {
  std::vector<std::string> out;
  for (Technique t : ts) out.emplace_back(to_string(t));
  return out;
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(Errc::config_error, std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  Fields f(root, "");
  f.get("id", c.id);
  f.path("output_dir", c.output_dir);
  f.get("seeds", c.seeds);
  {
    Fields v = f.sub("victim_data");
    v.get("source", c.victim_data.source);
    v.get("train_per_class", c.victim_data.train_per_class);
    v.get("test_per_class", c.victim_data.test_per_class);
    v.path("train_images", c.victim_data.train_images);
    v.path("train_labels", c.victim_data.train_labels);
    v.path("test_images", c.victim_data.test_images);
    v.path("test_labels", c.victim_data.test_labels);
    read_synth(v.sub("synthetic"), c.victim_data.synth);
    v.finish();
  }
  {
    Fields p = f.sub("adversary_pool");
    p.get("source", c.pool.source);
    p.get("size", c.pool.size);
    p.path("images", c.pool.images);
    p.path("labels", c.pool.labels);
    read_synth(p.sub("synthetic"), c.pool.synth);
    p.finish();
  }
  {
    Fields v = f.sub("victim");
    v.get("family", c.victim_family);
    read_train(v.sub("train"), c.victim_train);
    v.finish();
  }
  {
    Fields a = f.sub("adversarial_training");
    a.techniques("techniques", c.adversarial.techniques);
    a.get("epsilons", c.adversarial.epsilons);
    a.get("pgd_steps", c.adversarial.pgd_steps);
    a.get("refresh_every", c.adversarial.refresh_every);
    a.finish();
  }
  {
    Fields e = f.sub("extraction");
    e.get("budgets", c.extraction.budgets);
    e.get("surrogate_family", c.extraction.surrogate_family);
    e.get("query_batch", c.extraction.query_batch);
    e.get("oracle", c.extraction.oracle);
    read_train(e.sub("train"), c.extraction.train);
    e.finish();
  }
  {
    Fields m = f.sub("metrics");
    m.techniques("techniques", c.metrics.techniques);
    m.get("epsilons", c.metrics.epsilons);
    m.get("pgd_steps", c.metrics.pgd_steps);
    m.get("transfer", c.metrics.transfer);
    m.finish();
  }
  f.finish();
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error(Errc::config_error, "config file " + path.string() + " not found");
  return parse_config(io::read_file(path.string()));
}

std::string config_to_json(const ExperimentConfig& c) {
  ordered root;
  root["id"] = c.id;
  root["output_dir"] = c.output_dir.string();
  root["seeds"] = c.seeds;
  root["victim_data"] = {{"source", c.victim_data.source},
                         {"train_per_class", c.victim_data.train_per_class},
                         {"test_per_class", c.victim_data.test_per_class},
                         {"train_images", c.victim_data.train_images.string()},
                         {"train_labels", c.victim_data.train_labels.string()},
                         {"test_images", c.victim_data.test_images.string()},
                         {"test_labels", c.victim_data.test_labels.string()},
                         {"synthetic", synth_json(c.victim_data.synth)}};
  root["adversary_pool"] = {{"source", c.pool.source},
                            {"size", c.pool.size},
                            {"images", c.pool.images.string()},
                            {"labels", c.pool.labels.string()},
                            {"synthetic", synth_json(c.pool.synth)}};
  root["victim"] = {{"family", c.victim_family}, {"train", train_json(c.victim_train)}};
  root["adversarial_training"] = {{"techniques", technique_names(c.adversarial.techniques)},
                                  {"epsilons", c.adversarial.epsilons},
                                  {"pgd_steps", c.adversarial.pgd_steps},
                                  {"refresh_every", c.adversarial.refresh_every}};
  root["extraction"] = {{"budgets", c.extraction.budgets},
                        {"surrogate_family", c.extraction.surrogate_family},
                        {"query_batch", c.extraction.query_batch},
                        {"oracle", c.extraction.oracle},
                        {"train", train_json(c.extraction.train)}};
  root["metrics"] = {{"techniques", technique_names(c.metrics.techniques)},
                     {"epsilons", c.metrics.epsilons},
                     {"pgd_steps", c.metrics.pgd_steps},
                     {"transfer", c.metrics.transfer}};
  return root.dump(2) + "\n";
}

void ExperimentConfig::validate() const {
  auto check = [](bool ok, const std::string& path, const std::string& message) {
    if (!ok) config_fail(path, message);
  };
  auto checked = [](const std::string& path, auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      config_fail(path, e.what());
    }
  };
  check(!id.empty() && id.find('/') == std::string::npos, "id", "must be a nonempty name without '/'");
  check(!seeds.empty(), "seeds", "must not be empty");
  check(std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() == seeds.size(), "seeds", "must be distinct");

  check(victim_data.source == "synthetic" || victim_data.source == "idx", "victim_data.source",
        "must be 'synthetic' or 'idx'");
  if (victim_data.source == "synthetic") {
    check(victim_data.train_per_class >= 1, "victim_data.train_per_class", "must be >= 1");
    check(victim_data.test_per_class >= 1, "victim_data.test_per_class", "must be >= 1");
    checked("victim_data.synthetic", [&] { victim_data.synth.validate(); });
  } else {
    check(!victim_data.train_images.empty() && !victim_data.train_labels.empty() &&
              !victim_data.test_images.empty() && !victim_data.test_labels.empty(),
          "victim_data", "idx source needs train_images, train_labels, test_images and test_labels");
  }
  check(pool.source == "synthetic" || pool.source == "idx", "adversary_pool.source", "must be 'synthetic' or 'idx'");
  if (pool.source == "synthetic") {
    check(pool.size >= pool.synth.num_classes && pool.synth.num_classes >= 1 && pool.size % pool.synth.num_classes == 0,
          "adversary_pool.size", "must be a positive multiple of adversary_pool.synthetic.num_classes");
    checked("adversary_pool.synthetic", [&] { pool.synth.validate(); });
    if (victim_data.source == "synthetic") {
      check(pool.synth.side == victim_data.synth.side && pool.synth.channels == victim_data.synth.channels,
            "adversary_pool.synthetic", "image shape must match the victim data");
    }
  } else {
    check(!pool.images.empty() && !pool.labels.empty(), "adversary_pool", "idx source needs images and labels");
  }

  check(victim_family == "cnn-small" || victim_family == "mlp-wide", "victim.family", "unknown model family");
  checked("victim.train", [&] { victim_train.validate(); });

  check(!adversarial.epsilons.empty() || adversarial.techniques.empty(), "adversarial_training.epsilons",
        "must not be empty when techniques are listed");
  for (std::size_t i = 0; i < adversarial.epsilons.size(); ++i) {
    const double e = adversarial.epsilons[i];
    check(e > 0.0 && e <= 0.5, "adversarial_training.epsilons[" + std::to_string(i) + "]", "must lie in (0, 0.5]");
  }
  check(std::set<double>(adversarial.epsilons.begin(), adversarial.epsilons.end()).size() == adversarial.epsilons.size(),
        "adversarial_training.epsilons", "must be distinct");
  check(std::set<Technique>(adversarial.techniques.begin(), adversarial.techniques.end()).size() ==
            adversarial.techniques.size(),
        "adversarial_training.techniques", "must be distinct");
  check(adversarial.pgd_steps >= 1, "adversarial_training.pgd_steps", "must be >= 1");

  check(!extraction.budgets.empty(), "extraction.budgets", "must not be empty");
  for (std::size_t i = 0; i < extraction.budgets.size(); ++i) {
    check(extraction.budgets[i] >= 1, "extraction.budgets[" + std::to_string(i) + "]", "must be >= 1");
    if (i > 0) {
      check(extraction.budgets[i] > extraction.budgets[i - 1], "extraction.budgets",
            "must be sorted ascending without repeats");
    }
  }
  if (pool.source == "synthetic") {
    check(extraction.budgets.back() <= pool.size, "extraction.budgets", "largest budget exceeds the adversary pool");
  }
  check(extraction.surrogate_family == "cnn-small" || extraction.surrogate_family == "mlp-wide",
        "extraction.surrogate_family", "unknown model family");
  check(extraction.oracle == "local" || extraction.oracle == "service", "extraction.oracle",
        "must be 'local' or 'service'");
  check(extraction.query_batch >= 1, "extraction.query_batch", "must be >= 1");
  checked("extraction.train", [&] { extraction.train.validate(); });

  check(!metrics.techniques.empty(), "metrics.techniques", "must not be empty");
  check(!metrics.epsilons.empty(), "metrics.epsilons", "must not be empty");
  for (std::size_t i = 0; i < metrics.epsilons.size(); ++i) {
    const double e = metrics.epsilons[i];
    check(e > 0.0 && e <= 0.5, "metrics.epsilons[" + std::to_string(i) + "]", "must lie in (0, 0.5]");
  }
  check(metrics.pgd_steps >= 1, "metrics.pgd_steps", "must be >= 1");
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &length, EVP_sha256(), nullptr) != 1) {
    throw Error(Errc::io_error, "sha256 failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < length; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

// ---- data ----

Datasets make_datasets(const ExperimentConfig& config, std::uint64_t seed) {
  Datasets d;
  const VictimDataConfig& v = config.victim_data;
  if (v.source == "synthetic") {
    SynthConfig s = v.synth;
    s.samples_per_class = v.train_per_class;
    s.seed = derive_seed({seed, 0xda7a, 1});
    d.train = synth_generate(s, DatasetRole::victim_train, "synth-train");
    s.samples_per_class = v.test_per_class;
    s.seed = derive_seed({seed, 0xda7a, 2});
    d.test = synth_generate(s, DatasetRole::heldout_test, "synth-test");
  } else {
    d.train = load_idx(v.train_images, v.train_labels, v.synth.num_classes, DatasetRole::victim_train, "idx-train");
    d.test = load_idx(v.test_images, v.test_labels, v.synth.num_classes, DatasetRole::heldout_test, "idx-test");
  }
  const PoolConfig& p = config.pool;
  if (p.source == "synthetic") {
    SynthConfig s = p.synth;
    s.samples_per_class = p.size / s.num_classes;
    s.seed = derive_seed({seed, 0xda7a, 3});
    d.pool = synth_generate(s, DatasetRole::adversary_pool, "synth-pool");
  } else {
    d.pool = load_idx(p.images, p.labels, 10, DatasetRole::adversary_pool, "idx-pool");
  }
  if (d.pool.input_shape() != d.train.input_shape()) {
    throw Error(Errc::config_error, "adversary pool images do not match the victim input shape");
  }
  return d;
}

// ---- victims CSV ----

namespace {

std::string fixed6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string victim_id(const std::optional<Technique>& technique, double epsilon) {
  return technique ? "adv-" + std::string(to_string(*technique)) + "-" + format_epsilon(epsilon) : "natural";
}

ExtractionReport as_report(const VictimSummary& v) {
  ExtractionReport r;
  r.victim_id = v.id;
  r.technique = v.technique;
  r.epsilon = v.epsilon;
  r.seed = v.seed;
  r.test_acc = v.test_acc;
  r.agreement = 1.0;
  r.grid = v.grid;
  return r;
}

}  // namespace

std::string victims_to_csv(const std::vector<VictimSummary>& victims) {
  // Same layout as the surrogate report minus budget and agreement.
  std::vector<ExtractionReport> rows;
  for (const VictimSummary& v : victims) rows.push_back(as_report(v));
  std::stringstream in(reports_to_csv(rows));
  std::string out, line;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream fields(line);
    std::string field;
    while (std::getline(fields, field, ',')) f.push_back(field);
    f.erase(f.begin() + 6);  // agreement
    f.erase(f.begin() + 3);  // budget
    for (std::size_t i = 0; i < f.size(); ++i) out += (i ? "," : "") + f[i];
    out += '\n';
  }
  return out;
}

std::vector<VictimSummary> victims_from_csv(const std::string& text) {
  std::stringstream in(text);
  std::string rebuilt, line;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream fields(line);
    std::string field;
    while (std::getline(fields, field, ',')) f.push_back(field);
    if (f.size() < 5) throw Error(Errc::corrupt_file, "victims CSV line has too few fields");
    f.insert(f.begin() + 3, header ? "budget" : "0");
    f.insert(f.begin() + 6, header ? "agreement" : "1");
    header = false;
    for (std::size_t i = 0; i < f.size(); ++i) rebuilt += (i ? "," : "") + f[i];
    rebuilt += '\n';
  }
  std::vector<VictimSummary> out;
  for (const ExtractionReport& r : reports_from_csv(rebuilt)) {
    VictimSummary v;
    v.technique = r.technique;
    v.epsilon = r.epsilon;
    v.id = victim_id(r.technique, r.epsilon);
    v.seed = r.seed;
    v.test_acc = r.test_acc;
    if (r.grid) v.grid = *r.grid;
    out.push_back(std::move(v));
  }
  return out;
}

// ---- JSON helpers ----

namespace {

ordered grid_json(const AdvGrid& g) {
  ordered cells = ordered::object();
  for (std::size_t t = 0; t < g.techniques.size(); ++t) {
    ordered row = ordered::object();
    for (std::size_t e = 0; e < g.epsilons.size(); ++e) row[format_epsilon(g.epsilons[e])] = g.values[t][e];
    cells[std::string(to_string(g.techniques[t]))] = row;
  }
  return {{"mode", to_string(g.mode)}, {"epsilons", g.epsilons}, {"accuracy", cells}};
}

AdvGrid grid_from_json(const json& j) {
  AdvGrid g;
  g.mode = j.at("mode").get<std::string>() == "transfer" ? GridMode::transfer : GridMode::white_box;
  g.epsilons = j.at("epsilons").get<std::vector<double>>();
  for (const auto& [name, row] : j.at("accuracy").items()) {
    g.techniques.push_back(parse_technique(name));
    std::vector<double> values;
    for (double e : g.epsilons) values.push_back(row.at(format_epsilon(e)).get<double>());
    g.values.push_back(std::move(values));
  }
  return g;
}

ordered victim_json(const VictimSummary& v) {
  return {{"id", v.id},
          {"technique", v.technique ? json(std::string(to_string(*v.technique))) : json(nullptr)},
          {"epsilon", v.epsilon},
          {"seed", v.seed},
          {"test_acc", v.test_acc},
          {"grid", grid_json(v.grid)},
          {"train_seconds", v.train_seconds}};
}

VictimSummary victim_from_json(const json& j) {
  VictimSummary v;
  v.id = j.at("id").get<std::string>();
  if (!j.at("technique").is_null()) v.technique = parse_technique(j.at("technique").get<std::string>());
  v.epsilon = j.at("epsilon").get<double>();
  v.seed = j.at("seed").get<std::uint64_t>();
  v.test_acc = j.at("test_acc").get<double>();
  v.grid = grid_from_json(j.at("grid"));
  v.train_seconds = j.at("train_seconds").get<double>();
  return v;
}

ordered report_json(const ExtractionReport& r) {
  ordered j = {{"victim_id", r.victim_id},
               {"victim_type", r.victim_type()},
               {"technique", r.technique_name()},
               {"epsilon", r.epsilon},
               {"budget", r.budget},
               {"seed", r.seed},
               {"test_acc", r.test_acc},
               {"agreement", r.agreement},
               {"seconds", r.seconds}};
  if (r.grid) j["grid"] = grid_json(*r.grid);
  if (r.transfer_grid) j["transfer_grid"] = grid_json(*r.transfer_grid);
  return j;
}

ExtractionReport report_from_json(const json& j) {
  ExtractionReport r;
  r.victim_id = j.at("victim_id").get<std::string>();
  const std::string technique = j.at("technique").get<std::string>();
  if (technique != "none") r.technique = parse_technique(technique);
  r.epsilon = j.at("epsilon").get<double>();
  r.budget = j.at("budget").get<std::size_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.test_acc = j.at("test_acc").get<double>();
  r.agreement = j.at("agreement").get<double>();
  r.seconds = j.at("seconds").get<double>();
  if (j.contains("grid")) r.grid = grid_from_json(j.at("grid"));
  if (j.contains("transfer_grid")) r.transfer_grid = grid_from_json(j.at("transfer_grid"));
  return r;
}

void write_atomically(const std::filesystem::path& path, const std::string& bytes) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  io::write_file(tmp.string(), bytes);
  std::filesystem::rename(tmp, path);
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

// Per-seed stage ledger. A stage counts as done only when its recorded
// checkpoint still hashes to the recorded digest.
class Manifest {
 public:
  Manifest(std::filesystem::path dir, std::string config_hash) : dir_(std::move(dir)) {
    const auto path = dir_ / "manifest.json";
    if (std::filesystem::exists(path)) {
      try {
        data_ = json::parse(io::read_file(path.string()));
      } catch (const json::exception&) {
        data_ = json::object();
      }
    }
    if (!data_.is_object() || data_.value("config_sha256", "") != config_hash) {
      data_ = {{"config_sha256", config_hash}, {"stages", json::object()}};
    }
  }

  const json* done(const std::string& stage) const {
    const json& stages = data_.at("stages");
    if (!stages.contains(stage)) return nullptr;
    const json& s = stages.at(stage);
    if (s.value("status", "") != "done") return nullptr;
    if (s.contains("checkpoint")) {
      const auto file = dir_ / s.at("checkpoint").get<std::string>();
      if (!std::filesystem::exists(file)) return nullptr;
      if (sha256_hex(io::read_file(file.string())) != s.at("sha256").get<std::string>()) return nullptr;
    }
    return &s;
  }

  void record(const std::string& stage, json entry) {
    entry["status"] = "done";
    data_["stages"][stage] = std::move(entry);
    save();
  }

  void fail(const std::string& stage, const std::string& error) {
    data_["stages"][stage] = {{"status", "failed"}, {"error", error}};
    save();
  }

  json checkpoint_entry(const Model& model, const std::string& name) const {
    const std::string bytes = encode_checkpoint(model);
    const std::string rel = "checkpoints/" + name + ".xlab";
    std::filesystem::create_directories(dir_ / "checkpoints");
    write_atomically(dir_ / rel, bytes);
    return {{"checkpoint", rel}, {"sha256", sha256_hex(bytes)}};
  }

  Model load(const json& stage) const {
    return decode_checkpoint(io::read_file((dir_ / stage.at("checkpoint").get<std::string>()).string()));
  }

 private:
  void save() const {
    std::filesystem::create_directories(dir_);
    write_atomically(dir_ / "manifest.json", data_.dump(2) + "\n");
  }

  std::filesystem::path dir_;
  json data_;
};

struct VictimPlan {
  std::string id;
  std::optional<Technique> technique;
  double epsilon = 0.0;
};

std::vector<VictimPlan> victim_plans(const ExperimentConfig& config) {
  std::vector<VictimPlan> plans{{"natural", std::nullopt, 0.0}};
  for (Technique t : config.adversarial.techniques) {
    for (double e : config.adversarial.epsilons) plans.push_back({victim_id(t, e), t, e});
  }
  return plans;
}

GridSettings grid_settings(const MetricsConfig& m) {
  GridSettings s;
  s.techniques = m.techniques;
  s.epsilons = m.epsilons;
  s.attack.steps = m.pgd_steps;
  return s;
}

class SeedRun {
 public:
  SeedRun(const ExperimentConfig& config, std::uint64_t seed, const std::string& config_hash, std::ostream* progress,
          ExperimentOutput& out)
      : config_(config),
        seed_(seed),
        dir_(config.root() / std::to_string(seed)),
        manifest_(dir_, config_hash),
        progress_(progress),
        out_(out) {}

  void run() {
    const Datasets data = make_datasets(config_, seed_);
    const auto shape = data.train.input_shape();
    const std::size_t k = data.train.num_classes;
    victim_spec_ = model_family(config_.victim_family, shape, k);
    surrogate_spec_ = model_family(config_.extraction.surrogate_family, shape, k);
    if (config_.extraction.budgets.back() > data.pool.size()) {
      throw Error(Errc::budget_exceeds_pool, "largest budget exceeds the adversary pool");
    }
    TrainConfig victim_tc = config_.victim_train;
    victim_tc.seed = derive_seed({seed_, 0x71c7});

    std::optional<Model> natural;
    for (const VictimPlan& plan : victim_plans(config_)) {
      Model victim = victim_stage(plan, data, victim_tc, natural);
      if (!plan.technique) natural = victim;
      std::vector<Model> surrogates;
      for (std::size_t budget : config_.extraction.budgets) {
        surrogates.push_back(surrogate_stage(plan, victim, data, budget));
      }
      report_stage(plan, victim, surrogates, data);
    }
  }

 private:
  template <typename Fn>
  auto stage(const std::string& name, Fn&& fn) {
    try {
      return fn();
    } catch (const std::exception& e) {
      manifest_.fail(name, e.what());
      throw;
    }
  }

  void say(const std::string& line) {
    if (progress_) *progress_ << "[seed " << seed_ << "] " << line << std::endl;
  }

  Model victim_stage(const VictimPlan& plan, const Datasets& data, const TrainConfig& tc,
                     const std::optional<Model>& natural) {
    const std::string name = "victim/" + plan.id;
    if (const json* s = manifest_.done(name)) {
      ++out_.stages_skipped;
      out_.victims.push_back(victim_from_json(s->at("summary")));
      say(name + " (cached)");
      return manifest_.load(*s);
    }
    return stage(name, [&] {
      say(name + " training");
      const auto start = std::chrono::steady_clock::now();
      std::optional<Model> model;
      if (!plan.technique) {
        model = train(build_model(victim_spec_, tc.seed), data.train, tc).model;
      } else {
        AdvTrainConfig atc;
        atc.attack.technique = *plan.technique;
        atc.attack.epsilon = plan.epsilon;
        atc.attack.steps = config_.adversarial.pgd_steps;
        atc.refresh_every = config_.adversarial.refresh_every;
        model = adversarial_retrain(*natural, data.train, atc, tc).model;
      }
      VictimSummary summary;
      summary.id = plan.id;
      summary.technique = plan.technique;
      summary.epsilon = plan.epsilon;
      summary.seed = seed_;
      summary.train_seconds = seconds_since(start);
      summary.test_acc = evaluate_accuracy(*model, data.test);
      summary.grid = adv_accuracy_grid(*model, data.test, grid_settings(config_.metrics));
      json entry = manifest_.checkpoint_entry(*model, plan.id);
      entry["summary"] = victim_json(summary);
      manifest_.record(name, std::move(entry));
      ++out_.stages_run;
      say(name + " done: test_acc " + fixed6(summary.test_acc) + " in " + fixed6(summary.train_seconds) + " s");
      out_.victims.push_back(std::move(summary));
      return std::move(*model);
    });
  }

  Model surrogate_stage(const VictimPlan& plan, const Model& victim, const Datasets& data, std::size_t budget) {
    const std::string name = "surrogate/" + plan.id + "/" + std::to_string(budget);
    if (const json* s = manifest_.done(name)) {
      ++out_.stages_skipped;
      seconds_[name] = s->at("seconds").get<double>();
      return manifest_.load(*s);
    }
    return stage(name, [&] {
      ExtractionConfig ec;
      ec.budget = budget;
      ec.surrogate_spec = surrogate_spec_;
      ec.train_config = config_.extraction.train;
      ec.train_config.seed = derive_seed({seed_, 0x5a66, budget});
      ec.seed = derive_seed({seed_, 0x5a3b, budget});
      ec.query_batch = config_.extraction.query_batch;

      ExtractionResult result = [&] {
        if (config_.extraction.oracle == "service") {
          ServiceConfig sc;
          sc.port = 0;
          sc.budget = budget;
          sc.max_batch = std::max<std::size_t>(ec.query_batch, 1);
          OracleService service(victim, sc);
          const int port = service.start();
          RemoteOracle oracle("http://127.0.0.1:" + std::to_string(port), "experiment");
          return extract(oracle, data.pool, ec);
        }
        LocalOracle oracle(victim, budget, plan.id);
        return extract(oracle, data.pool, ec);
      }();
      json entry = manifest_.checkpoint_entry(result.surrogate, "surrogate-" + plan.id + "-" + std::to_string(budget));
      entry["seconds"] = result.seconds;
      seconds_[name] = result.seconds;
      manifest_.record(name, std::move(entry));
      ++out_.stages_run;
      say(name + " done in " + fixed6(result.seconds) + " s");
      return std::move(result.surrogate);
    });
  }

  void report_stage(const VictimPlan& plan, const Model& victim, const std::vector<Model>& surrogates,
                    const Datasets& data) {
    const std::string name = "reports/" + plan.id;
    if (const json* s = manifest_.done(name)) {
      ++out_.stages_skipped;
      for (const json& r : s->at("reports")) out_.reports.push_back(report_from_json(r));
      return;
    }
    stage(name, [&] {
      const GridSettings settings = grid_settings(config_.metrics);
      std::vector<AdvGrid> transfer;
      if (config_.metrics.transfer) {
        std::vector<const Model*> targets;
        for (const Model& m : surrogates) targets.push_back(&m);
        transfer = transfer_accuracy_grids(victim, targets, data.test, settings);
      }
      json rows = json::array();
      for (std::size_t i = 0; i < surrogates.size(); ++i) {
        const std::size_t budget = config_.extraction.budgets[i];
        ExtractionReport r;
        r.victim_id = plan.id;
        r.technique = plan.technique;
        r.epsilon = plan.epsilon;
        r.budget = budget;
        r.seed = seed_;
        r.test_acc = evaluate_accuracy(surrogates[i], data.test);
        r.agreement = agreement(surrogates[i], victim, data.test);
        r.grid = adv_accuracy_grid(surrogates[i], data.test, settings);
        if (config_.metrics.transfer) r.transfer_grid = transfer[i];
        r.seconds = seconds_["surrogate/" + plan.id + "/" + std::to_string(budget)];
        r.validate();
        rows.push_back(report_json(r));
        out_.reports.push_back(std::move(r));
      }
      manifest_.record(name, {{"reports", rows}});
      ++out_.stages_run;
      say(name + " done");
      return 0;
    });
  }

  const ExperimentConfig& config_;
  std::uint64_t seed_;
  std::filesystem::path dir_;
  Manifest manifest_;
  std::ostream* progress_;
  ExperimentOutput& out_;
  ModelSpec victim_spec_;
  ModelSpec surrogate_spec_;
  std::map<std::string, double> seconds_;
};

}  // namespace

ExperimentOutput run_experiment(const ExperimentConfig& config, std::ostream* progress) {
  config.validate();
  // The output location does not change results, so it stays out of the hash.
  ExperimentConfig hashed = config;
  hashed.output_dir = "";
  hashed.seeds.clear();
  const std::string config_hash = sha256_hex(config_to_json(hashed));

  ExperimentOutput out;
  std::filesystem::create_directories(config.root());
  for (std::uint64_t seed : config.seeds) SeedRun(config, seed, config_hash, progress, out).run();

  const auto root = config.root();
  write_atomically(root / "reports.csv", reports_to_csv(out.reports));
  write_atomically(root / "victims.csv", victims_to_csv(out.victims));
  ordered doc;
  doc["schema_version"] = 1;
  doc["experiment"] = config.id;
  doc["config_sha256"] = config_hash;
  doc["config"] = ordered::parse(config_to_json(config));
  doc["victims"] = ordered::array();
  for (const VictimSummary& v : out.victims) doc["victims"].push_back(victim_json(v));
  doc["reports"] = ordered::array();
  for (const ExtractionReport& r : out.reports) doc["reports"].push_back(report_json(r));
  ordered gains = ordered::array();
  std::vector<GainRow> gain_rows;
  if (!config.adversarial.techniques.empty()) {
    // A degenerate baseline leaves the ratios undefined; the raw reports stay useful.
    try {
      gain_rows = extraction_gains(out.reports).rows;
    } catch (const Error& e) {
      if (e.code() != Errc::missing_baseline) throw;
      doc["gains_error"] = e.what();
    }
    for (const GainRow& g : gain_rows) {
      gains.push_back({{"technique", to_string(*g.technique)},
                       {"epsilon", g.epsilon},
                       {"budget", g.budget},
                       {"accuracy_gain", g.accuracy_gain},
                       {"agreement_gain", g.agreement_gain},
                       {"accuracy_parity", g.accuracy_parity ? json(*g.accuracy_parity) : json(nullptr)},
                       {"agreement_parity", g.agreement_parity ? json(*g.agreement_parity) : json(nullptr)}});
    }
  }
  doc["gains"] = gains;
  write_atomically(root / "reports.json", doc.dump(2) + "\n");
  return out;
}

// ---- trends ----

bool TrendVerdict::passed() const {
  return !checks.empty() && std::all_of(checks.begin(), checks.end(), [](const TrendCheck& c) { return c.passed; });
}

std::string TrendVerdict::to_json() const {
  ordered doc;
  doc["passed"] = passed();
  doc["checks"] = ordered::array();
  for (const TrendCheck& c : checks) {
    doc["checks"].push_back({{"name", c.name},
                             {"description", c.description},
                             {"passed", c.passed},
                             {"measured", c.measured},
                             {"threshold", c.threshold},
                             {"detail", c.detail}});
  }
  return doc.dump(2) + "\n";
}

TrendVerdict evaluate_trends(const std::vector<ExtractionReport>& reports, const std::vector<VictimSummary>& victims) {
  std::set<std::uint64_t> seeds;
  for (const ExtractionReport& r : reports) seeds.insert(r.seed);
  if (seeds.size() < 3) {
    throw Error(Errc::insufficient_data, "trend checks need reports for at least 3 seeds, found " +
                                             std::to_string(seeds.size()));
  }
  std::map<std::string, std::map<std::size_t, std::vector<double>>> agreement_by;  // victim -> budget -> values
  for (const ExtractionReport& r : reports) agreement_by[r.victim_id][r.budget].push_back(r.agreement);
  if (!agreement_by.count("natural")) throw Error(Errc::missing_baseline, "no natural-victim reports");

  TrendVerdict verdict;

  {
    TrendCheck c{"T1", "median agreement is non-decreasing in budget for every victim", true, 0.0,
                 -kMonotoneSlack, ""};
    double worst = 0.0;
    for (const auto& [victim, by_budget] : agreement_by) {
      std::optional<double> previous;
      for (const auto& [budget, values] : by_budget) {
        const double m = median(values);
        if (previous) {
          const double step = m - *previous;
          worst = std::min(worst, step);
          if (step < -kMonotoneSlack) {
            c.passed = false;
            c.detail += victim + " drops " + fixed6(-step) + " at B=" + std::to_string(budget) + "; ";
          }
        }
        previous = m;
      }
    }
    c.measured = worst;
    verdict.checks.push_back(c);
  }

  const std::size_t smallest = agreement_by.at("natural").begin()->first;
  {
    std::vector<double> adv, nat;
    for (const ExtractionReport& r : reports) {
      if (r.budget != smallest) continue;
      (r.natural() ? nat : adv).push_back(r.agreement);
    }
    TrendCheck c{"T2", "adversarial victims' surrogate agreement at the smallest budget >= natural (median)", false,
                 0.0, 0.0, ""};
    if (adv.empty() || nat.empty()) {
      c.detail = "no adversarial or natural reports at B=" + std::to_string(smallest);
    } else {
      const double a = median(adv), n = median(nat);
      c.measured = a - n;
      c.passed = a >= n;
      c.detail = "B=" + std::to_string(smallest) + " adversarial " + fixed6(a) + " natural " + fixed6(n);
    }
    verdict.checks.push_back(c);
  }

  {
    std::vector<double> adv, nat;
    for (const ExtractionReport& r : reports) {
      if (!r.grid) continue;
      (r.natural() ? nat : adv).push_back(r.grid->at(Technique::pgd, kTrendEpsilon));
    }
    TrendCheck c{"T3", "surrogates of adversarial victims have higher PGD accuracy at eps 0.1 (median)", false, 0.0,
                 0.0, ""};
    if (adv.empty() || nat.empty()) {
      c.detail = "reports carry no white-box grid";
    } else {
      const double a = median(adv), n = median(nat);
      c.measured = a - n;
      c.passed = a > n;
      c.detail = "adversarial " + fixed6(a) + " natural " + fixed6(n);
    }
    verdict.checks.push_back(c);
  }

  {
    std::vector<double> adv, nat;
    for (const VictimSummary& v : victims) {
      const double acc = v.grid.at(Technique::pgd, kTrendEpsilon);
      if (!v.technique) nat.push_back(acc);
      else if (*v.technique == Technique::pgd && v.epsilon == kTrendEpsilon) adv.push_back(acc);
    }
    TrendCheck c{"T4", "PGD training at eps 0.1 raises victim PGD accuracy at eps 0.1 (median)", false, 0.0,
                 kRobustnessGain, ""};
    if (adv.empty() || nat.empty()) {
      c.detail = "needs natural and pgd eps=0.1 victims";
    } else {
      const double a = median(adv), n = median(nat);
      c.measured = a - n;
      c.passed = a - n >= kRobustnessGain;
      c.detail = "pgd-trained " + fixed6(a) + " natural " + fixed6(n);
    }
    verdict.checks.push_back(c);
  }
  return verdict;
}

TrendVerdict run_trends(const ExperimentConfig& config) {
  const auto root = config.root();
  const auto reports_path = root / "reports.csv";
  const auto victims_path = root / "victims.csv";
  if (!std::filesystem::exists(reports_path) || !std::filesystem::exists(victims_path)) {
    throw Error(Errc::insufficient_data, "no experiment outputs under " + root.string() + "; run the experiment first");
  }
  const TrendVerdict verdict = evaluate_trends(read_reports_csv(reports_path),
                                               victims_from_csv(io::read_file(victims_path.string())));
  write_atomically(root / "trends.json", verdict.to_json());
  return verdict;
}

}  // namespace xlab
