// Command-line front end. Every subcommand prints one JSON document on
// success; failures print {"error", "message"} to stderr and exit nonzero.

#include <csignal>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "xlab/attacks.hpp"
#include "xlab/experiment.hpp"
#include "xlab/extraction.hpp"
#include "xlab/metrics.hpp"
#include "xlab/oracle_service.hpp"
#include "xlab/runtime.hpp"
#include "xlab/seeding.hpp"
#include "xlab/transferset.hpp"

namespace {

using json = nlohmann::ordered_json;
using namespace xlab;

struct Common {
  std::string config;
  std::uint64_t seed = 1;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Experiment config (JSON); built-in defaults when omitted");
  cmd->add_option("--seed", c.seed, "Run seed");
  cmd->add_option("--out", c.out, "Output path");
}

ExperimentConfig config_of(const Common& c) {
  return c.config.empty() ? ExperimentConfig{} : load_config(c.config);
}

std::string need_out(const Common& c, const char* what) {
  if (c.out.empty()) throw Error(Errc::invalid_argument, std::string("--out is required (") + what + ")");
  return c.out;
}

TrainConfig victim_train_config(const ExperimentConfig& config, std::uint64_t seed) {
  TrainConfig tc = config.victim_train;
  tc.seed = derive_seed({seed, 0x71c7});
  return tc;
}

json grid_to_json(const AdvGrid& g) {
  json cells = json::object();
  for (std::size_t t = 0; t < g.techniques.size(); ++t) {
    json row = json::object();
    for (std::size_t e = 0; e < g.epsilons.size(); ++e) row[format_epsilon(g.epsilons[e])] = g.values[t][e];
    cells[std::string(to_string(g.techniques[t]))] = row;
  }
  return cells;
}

GridSettings grid_of(const ExperimentConfig& config) {
  GridSettings s;
  s.techniques = config.metrics.techniques;
  s.epsilons = config.metrics.epsilons;
  s.attack.steps = config.metrics.pgd_steps;
  return s;
}

void emit(const json& doc) { std::cout << doc.dump(2) << std::endl; }

}  // namespace

int main(int argc, char** argv) {
  xlab::configure_allocator();
  CLI::App app{"Adversarial-training versus model-extraction laboratory"};
  app.require_subcommand(1);

  Common common;

  auto* train_cmd = app.add_subcommand("train", "Train the natural victim");
  add_common(train_cmd, common);

  auto* adv_cmd = app.add_subcommand("advtrain", "Train an adversarially trained victim");
  add_common(adv_cmd, common);
  std::string technique = "pgd";
  double epsilon = 0.1;
  std::string natural_path;
  adv_cmd->add_option("--technique", technique, "fgsm or pgd");
  adv_cmd->add_option("--epsilon", epsilon, "L-infinity radius");
  adv_cmd->add_option("--natural", natural_path, "Reuse this natural checkpoint instead of training one");

  auto* attack_cmd = app.add_subcommand("attack", "Craft adversarial test examples against a checkpoint");
  add_common(attack_cmd, common);
  std::string checkpoint;
  std::size_t steps = 10;
  attack_cmd->add_option("--checkpoint", checkpoint, "Model to attack")->required();
  attack_cmd->add_option("--technique", technique, "fgsm or pgd");
  attack_cmd->add_option("--epsilon", epsilon, "L-infinity radius");
  attack_cmd->add_option("--steps", steps, "PGD iterations");

  auto* extract_cmd = app.add_subcommand("extract", "Extract a surrogate through an oracle");
  add_common(extract_cmd, common);
  std::string oracle_url;
  std::size_t budget = 1000;
  std::string transferset_dir;
  extract_cmd->add_option("--budget", budget, "Queried samples");
  auto* url_opt = extract_cmd->add_option("--oracle-url", oracle_url, "Remote oracle, e.g. http://127.0.0.1:8080");
  extract_cmd->add_option("--checkpoint", checkpoint, "Local victim checkpoint")->excludes(url_opt);
  extract_cmd->add_option("--transferset", transferset_dir, "Also store the transfer set in this directory");

  auto* serve_cmd = app.add_subcommand("serve", "Serve a checkpoint over HTTP");
  add_common(serve_cmd, common);
  ServiceConfig service;
  std::string bind = "127.0.0.1:8080";
  std::size_t service_budget = 0;
  std::string log_path;
  serve_cmd->add_option("--checkpoint", checkpoint, "Victim checkpoint")->required();
  serve_cmd->add_option("--bind", bind, "host:port (port 0 picks one)");
  serve_cmd->add_option("--budget", service_budget, "Query budget in samples (0 = unlimited)");
  serve_cmd->add_option("--max-batch", service.max_batch, "Largest accepted batch");
  serve_cmd->add_option("--log", log_path, "JSON-lines query log");

  auto* eval_cmd = app.add_subcommand("evaluate", "Score a checkpoint on the heldout set");
  add_common(eval_cmd, common);
  std::string victim_path;
  eval_cmd->add_option("--checkpoint", checkpoint, "Model to score")->required();
  eval_cmd->add_option("--victim", victim_path, "Victim checkpoint for agreement and transfer grids");

  auto* run_cmd = app.add_subcommand("run", "Run the full experiment");
  add_common(run_cmd, common);
  bool quiet = false;
  run_cmd->add_flag("--quiet", quiet, "No progress lines on stderr");

  auto* trends_cmd = app.add_subcommand("trends", "Check trend criteria on experiment outputs");
  add_common(trends_cmd, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << json{{"error", "usage"}, {"message", e.what()}}.dump() << std::endl;
    return 64;
  }

  try {
    if (*train_cmd) {
      const ExperimentConfig config = config_of(common);
      const Datasets data = make_datasets(config, common.seed);
      const TrainConfig tc = victim_train_config(config, common.seed);
      const ModelSpec spec = model_family(config.victim_family, data.train.input_shape(), data.train.num_classes);
      TrainResult result = train(build_model(spec, tc.seed), data.train, tc);
      const std::string out = need_out(common, "checkpoint path");
      save_checkpoint(result.model, out);
      emit({{"checkpoint", out},
            {"model", spec.name},
            {"epochs", tc.max_epochs},
            {"final_loss", result.history.epochs.back().mean_loss},
            {"test_acc", evaluate_accuracy(result.model, data.test)}});
    } else if (*adv_cmd) {
      const ExperimentConfig config = config_of(common);
      const Datasets data = make_datasets(config, common.seed);
      const TrainConfig tc = victim_train_config(config, common.seed);
      const ModelSpec spec = model_family(config.victim_family, data.train.input_shape(), data.train.num_classes);
      const Model natural = natural_path.empty() ? train(build_model(spec, tc.seed), data.train, tc).model
                                                 : load_checkpoint(natural_path);
      AdvTrainConfig atc;
      atc.attack.technique = parse_technique(technique);
      atc.attack.epsilon = epsilon;
      atc.attack.steps = config.adversarial.pgd_steps;
      atc.refresh_every = config.adversarial.refresh_every;
      TrainResult robust = adversarial_retrain(natural, data.train, atc, tc);
      const std::string out = need_out(common, "checkpoint path");
      save_checkpoint(robust.model, out);
      emit({{"checkpoint", out},
            {"technique", technique},
            {"epsilon", epsilon},
            {"test_acc", evaluate_accuracy(robust.model, data.test)},
            {"natural_test_acc", evaluate_accuracy(natural, data.test)}});
    } else if (*attack_cmd) {
      const ExperimentConfig config = config_of(common);
      const Datasets data = make_datasets(config, common.seed);
      const Model model = load_checkpoint(checkpoint);
      AttackConfig ac;
      ac.technique = parse_technique(technique);
      ac.epsilon = epsilon;
      ac.steps = steps;
      const AdversarialSet adv = craft_adversarial_set(model, data.test, ac);
      json doc = {{"technique", technique},
                  {"epsilon", epsilon},
                  {"clean_acc", evaluate_accuracy(model, data.test)},
                  {"adversarial_acc", evaluate_accuracy(model, adv.data)}};
      if (!common.out.empty()) {
        // Stored as a transfer-set-shaped bundle: inputs plus one-hot truth.
        TransferSet bundle{adv.data.inputs, one_hot(adv.data.labels, adv.data.num_classes),
                           {checkpoint, adv.data.name, common.seed, adv.data.size()}};
        save_transferset(bundle, common.out);
        doc["out"] = common.out;
      }
      emit(doc);
    } else if (*extract_cmd) {
      const ExperimentConfig config = config_of(common);
      const Datasets data = make_datasets(config, common.seed);
      std::unique_ptr<Oracle> oracle;
      if (!oracle_url.empty()) {
        oracle = std::make_unique<RemoteOracle>(oracle_url, "cli");
      } else if (!checkpoint.empty()) {
        oracle = std::make_unique<LocalOracle>(load_checkpoint(checkpoint), std::nullopt, checkpoint);
      } else {
        throw Error(Errc::invalid_argument, "extract needs --oracle-url or --checkpoint");
      }
      ExtractionConfig ec;
      ec.budget = budget;
      ec.surrogate_spec =
          model_family(config.extraction.surrogate_family, data.pool.input_shape(), data.train.num_classes);
      ec.train_config = config.extraction.train;
      ec.train_config.seed = derive_seed({common.seed, 0x5a66, budget});
      ec.seed = derive_seed({common.seed, 0x5a3b, budget});
      ec.query_batch = config.extraction.query_batch;
      ExtractionResult result = extract(*oracle, data.pool, ec);
      const std::string out = need_out(common, "surrogate checkpoint path");
      save_checkpoint(result.surrogate, out);
      if (!transferset_dir.empty()) save_transferset(result.transferset, transferset_dir);
      emit({{"checkpoint", out},
            {"budget", budget},
            {"rows", result.transferset.size()},
            {"oracle", oracle->id()},
            {"surrogate_test_acc", evaluate_accuracy(result.surrogate, data.test)},
            {"seconds", result.seconds}});
    } else if (*serve_cmd) {
      const auto colon = bind.rfind(':');
      if (colon == std::string::npos) throw Error(Errc::invalid_argument, "--bind must be host:port");
      service.host = bind.substr(0, colon);
      service.port = std::stoi(bind.substr(colon + 1));
      service.checkpoint = checkpoint;
      if (service_budget > 0) service.budget = service_budget;
      if (!log_path.empty()) service.log = log_path;
      auto server = OracleService::from_config(service);
      const int port = server->start();
      std::cout << json{{"status", "serving"}, {"host", service.host}, {"port", port}}.dump() << std::endl;
      sigset_t signals;
      sigemptyset(&signals);
      sigaddset(&signals, SIGINT);
      sigaddset(&signals, SIGTERM);
      pthread_sigmask(SIG_BLOCK, &signals, nullptr);
      int received = 0;
      sigwait(&signals, &received);
      server->stop();
      emit({{"status", "stopped"}, {"queries_used", server->queries_used()}});
    } else if (*eval_cmd) {
      const ExperimentConfig config = config_of(common);
      const Datasets data = make_datasets(config, common.seed);
      const Model model = load_checkpoint(checkpoint);
      json doc = {{"checkpoint", checkpoint},
                  {"test_acc", evaluate_accuracy(model, data.test)},
                  {"grid", grid_to_json(adv_accuracy_grid(model, data.test, grid_of(config)))}};
      if (!victim_path.empty()) {
        const Model victim = load_checkpoint(victim_path);
        const Model* targets[] = {&model};
        doc["agreement"] = agreement(model, victim, data.test);
        doc["transfer_grid"] = grid_to_json(transfer_accuracy_grids(victim, targets, data.test, grid_of(config))[0]);
      }
      emit(doc);
    } else if (*run_cmd) {
      ExperimentConfig config = config_of(common);
      if (!common.out.empty()) config.output_dir = common.out;
      if (run_cmd->count("--seed")) config.seeds = {common.seed};
      const ExperimentOutput out = run_experiment(config, quiet ? nullptr : &std::cerr);
      emit({{"experiment", config.id},
            {"root", config.root().string()},
            {"reports", out.reports.size()},
            {"victims", out.victims.size()},
            {"stages_run", out.stages_run},
            {"stages_skipped", out.stages_skipped}});
    } else if (*trends_cmd) {
      ExperimentConfig config = config_of(common);
      if (!common.out.empty()) config.output_dir = common.out;
      const TrendVerdict verdict = run_trends(config);
      std::cout << verdict.to_json();
      return verdict.passed() ? 0 : 1;
    }
  } catch (const Error& e) {
    std::cerr << json{{"error", to_string(e.code())}, {"message", e.what()}}.dump() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "internal"}, {"message", e.what()}}.dump() << std::endl;
    return 3;
  }
  return 0;
}
