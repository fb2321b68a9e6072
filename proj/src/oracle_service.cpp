#include "xlab/oracle_service.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <thread>

#include <httplib.h>
#include <json.hpp>

namespace xlab {

using nlohmann::json;

std::string format_float(float value) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(value));
  return buf;
}

void ServiceConfig::validate() const {
  if (max_batch == 0) throw Error(Errc::config_error, "max_batch must be >= 1");
  if (budget && *budget == 0) throw Error(Errc::config_error, "budget must be >= 1 when set");
  if (port < 0 || port > 65535) throw Error(Errc::config_error, "port " + std::to_string(port) + " out of range");
}

namespace {

std::string error_body(std::string_view code, const std::string& message, const json& extra = json::object()) {
  json body = {{"error", code}, {"message", message}};
  body.update(extra);
  return body.dump();
}

json remaining_json(const QueryBudget& budget) {
  const auto left = budget.remaining();
  return left ? json(*left) : json(nullptr);
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count();
  const std::time_t secs = static_cast<std::time_t>(ms / 1000);
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[96];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1, tm.tm_mday,
                tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms % 1000));
  return buf;
}

}  // namespace

struct OracleService::Impl {
  Model model;
  ServiceConfig config;
  QueryBudget budget;
  std::mutex accounting;  // budget reservation and log order move together
  std::ofstream log;
  httplib::Server server;
  std::thread worker;

  Impl(Model m, ServiceConfig c) : model(std::move(m)), config(std::move(c)), budget(config.budget) {
    config.validate();
    if (config.log) {
      log.open(*config.log, std::ios::app);
      if (!log) throw Error(Errc::io_error, "cannot open query log " + config.log->string());
    }
    routes();
  }

  void routes() {
    server.Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) {
      const auto& in = model.spec().input_shape;
      const json body = {{"status", "ok"},
                         {"model_name", model.spec().name},
                         {"num_classes", model.spec().num_classes},
                         {"input_shape", {in[0], in[1], in[2]}}};
      res.set_content(body.dump(), "application/json");
    });
    server.Get("/v1/stats", [this](const httplib::Request&, httplib::Response& res) {
      const json body = {{"queries_used", budget.used()}, {"budget_remaining", remaining_json(budget)}};
      res.set_content(body.dump(), "application/json");
    });
    server.Post("/v1/predict",
                [this](const httplib::Request& req, httplib::Response& res) { predict(req, res); });
  }

  void predict(const httplib::Request& req, httplib::Response& res) {
    const auto& in = model.spec().input_shape;
    const std::size_t row = in[0] * in[1] * in[2];
    std::vector<float> values;
    std::size_t n = 0;
    try {
      const json body = json::parse(req.body);
      const auto shape = body.at("shape").get<std::vector<std::size_t>>();
      if (shape.size() != 3 || shape[0] != in[0] || shape[1] != in[1] || shape[2] != in[2]) {
        res.status = 400;
        res.set_content(error_body("shape_mismatch", "shape must be [" + std::to_string(in[0]) + "," +
                                                         std::to_string(in[1]) + "," + std::to_string(in[2]) + "]"),
                        "application/json");
        return;
      }
      const json& inputs = body.at("inputs");
      if (!inputs.is_array() || inputs.empty()) throw std::invalid_argument("inputs must be a nonempty array");
      n = inputs.size();
      if (n > config.max_batch) {
        res.status = 413;
        res.set_content(error_body("batch_too_large", "batch of " + std::to_string(n) + " exceeds " +
                                                          std::to_string(config.max_batch),
                                   {{"max_batch", config.max_batch}}),
                        "application/json");
        return;
      }
      values.reserve(n * row);
      for (const json& r : inputs) {
        if (!r.is_array() || r.size() != row) {
          throw std::invalid_argument("every input row needs " + std::to_string(row) + " numbers");
        }
        for (const json& v : r) {
          const double d = v.get<double>();
          if (!std::isfinite(d)) throw std::invalid_argument("inputs must be finite");
          values.push_back(static_cast<float>(d));
        }
      }
    } catch (const std::exception& e) {
      res.status = 400;
      res.set_content(error_body("malformed", e.what()), "application/json");
      return;
    }

    std::size_t used = 0;
    json left;
    {
      std::lock_guard lock(accounting);
      if (!budget.try_reserve(n)) {
        res.status = 429;
        res.set_content(error_body("budget_exhausted", "query budget exhausted", {{"queries_used", budget.used()}}),
                        "application/json");
        return;
      }
      used = budget.used();
      left = remaining_json(budget);
      if (log.is_open()) {
        const std::string client = req.has_header("X-Client-Id") ? req.get_header_value("X-Client-Id") : "";
        const json record = {{"timestamp", utc_timestamp()}, {"batch_size", n}, {"cumulative", used}, {"client", client}};
        log << record.dump() << '\n' << std::flush;
      }
    }

    const Tensor<float> probs = predict_proba(model, Tensor<float>({n, in[0], in[1], in[2]}, std::move(values)));
    const std::size_t k = probs.dim(1);
    std::string out = "{\"probs\":[";
    for (std::size_t r = 0; r < n; ++r) {
      out += r ? ",[" : "[";
      for (std::size_t c = 0; c < k; ++c) {
        if (c) out += ',';
        out += format_float(probs[r * k + c]);
      }
      out += ']';
    }
    out += "],\"queries_used\":" + std::to_string(used) + ",\"budget_remaining\":" + left.dump() + "}";
    res.set_content(out, "application/json");
  }

  int bind() {
    const int port = config.port == 0 ? server.bind_to_any_port(config.host)
                                      : (server.bind_to_port(config.host, config.port) ? config.port : -1);
    if (port < 0) {
      throw Error(Errc::io_error, "cannot bind " + config.host + ":" + std::to_string(config.port));
    }
    return port;
  }
};

OracleService::OracleService(Model model, ServiceConfig config)
    : impl_(std::make_unique<Impl>(std::move(model), std::move(config))) {}

OracleService::~OracleService() { stop(); }

std::unique_ptr<OracleService> OracleService::from_config(const ServiceConfig& config) {
  config.validate();
  return std::make_unique<OracleService>(load_checkpoint(config.checkpoint.string()), config);
}

int OracleService::start() {
  const int port = impl_->bind();
  impl_->worker = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return port;
}

void OracleService::run() {
  impl_->bind();
  impl_->server.listen_after_bind();
}

void OracleService::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->worker.joinable()) impl_->worker.join();
}

std::size_t OracleService::queries_used() const { return impl_->budget.used(); }

const ServiceConfig& OracleService::config() const { return impl_->config; }

// ---- client ----

namespace {

json get_json(const std::string& url, const std::string& path) {
  httplib::Client client(url);
  client.set_connection_timeout(5);
  client.set_read_timeout(60);
  const auto res = client.Get(path);
  if (!res) throw Error(Errc::transport_error, "GET " + url + path + " failed: " + httplib::to_string(res.error()));
  if (res->status != 200) {
    throw Error(Errc::transport_error, "GET " + url + path + " returned HTTP " + std::to_string(res->status));
  }
  try {
    return json::parse(res->body);
  } catch (const json::exception& e) {
    throw Error(Errc::malformed_response, "GET " + path + ": " + e.what());
  }
}

}  // namespace

RemoteOracle::RemoteOracle(std::string url, std::string client_id)
    : url_(std::move(url)), client_id_(std::move(client_id)) {
  while (!url_.empty() && url_.back() == '/') url_.pop_back();
}

RemoteOracle::~RemoteOracle() = default;

Tensor<float> RemoteOracle::query(const Tensor<float>& batch) {
  if (batch.rank() != 4) throw Error(Errc::shape_mismatch, "oracle query must be N×C×H×W, got " + to_string(batch.shape()));
  const std::size_t n = batch.dim(0);
  const std::size_t row = batch.size() / n;
  std::string body = "{\"shape\":[" + std::to_string(batch.dim(1)) + "," + std::to_string(batch.dim(2)) + "," +
                     std::to_string(batch.dim(3)) + "],\"inputs\":[";
  for (std::size_t r = 0; r < n; ++r) {
    body += r ? ",[" : "[";
    for (std::size_t c = 0; c < row; ++c) {
      if (c) body += ',';
      body += format_float(batch[r * row + c]);
    }
    body += ']';
  }
  body += "]}";

  httplib::Client client(url_);
  client.set_connection_timeout(5);
  client.set_read_timeout(120);
  const httplib::Headers headers = {{"X-Client-Id", client_id_}};
  const auto res = client.Post("/v1/predict", headers, body, "application/json");
  if (!res) throw Error(Errc::transport_error, "POST " + url_ + "/v1/predict failed: " + httplib::to_string(res.error()));

  json reply;
  try {
    reply = json::parse(res->body);
  } catch (const json::exception& e) {
    throw Error(Errc::malformed_response, std::string("predict reply: ") + e.what());
  }
  const std::string message = reply.is_object() ? reply.value("message", std::string()) : std::string();
  switch (res->status) {
    case 200:
      break;
    case 413:
      throw Error(Errc::batch_too_large, "service rejected batch: " + message);
    case 429:
      throw Error(Errc::budget_exhausted, "service budget exhausted: " + message);
    case 400:
      throw Error(Errc::invalid_argument, "service rejected request: " + message);
    default:
      throw Error(Errc::transport_error, "predict returned HTTP " + std::to_string(res->status));
  }

  try {
    const json& probs = reply.at("probs");
    if (!probs.is_array() || probs.size() != n || probs.empty() || !probs[0].is_array() || probs[0].empty()) {
      throw Error(Errc::malformed_response, "predict reply has " + std::to_string(probs.size()) + " rows for " +
                                                std::to_string(n) + " inputs");
    }
    const std::size_t k = probs[0].size();
    Tensor<float> out({n, k});
    for (std::size_t r = 0; r < n; ++r) {
      if (!probs[r].is_array() || probs[r].size() != k) throw Error(Errc::malformed_response, "ragged probability rows");
      double mass = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        const float p = static_cast<float>(probs[r][c].get<double>());
        if (!(p >= 0.0f)) throw Error(Errc::malformed_response, "negative probability in reply");
        out[r * k + c] = p;
        mass += p;
      }
      if (std::abs(mass - 1.0) > 1e-5) throw Error(Errc::malformed_response, "reply row does not sum to 1");
    }
    return out;
  } catch (const json::exception& e) {
    throw Error(Errc::malformed_response, std::string("predict reply: ") + e.what());
  }
}

std::optional<std::size_t> RemoteOracle::budget_remaining() const {
  const json stats = get_json(url_, "/v1/stats");
  try {
    const json& left = stats.at("budget_remaining");
    if (left.is_null()) return std::nullopt;
    return left.get<std::size_t>();
  } catch (const json::exception& e) {
    throw Error(Errc::malformed_response, std::string("stats reply: ") + e.what());
  }
}

std::size_t RemoteOracle::queries_used() const {
  try {
    return get_json(url_, "/v1/stats").at("queries_used").get<std::size_t>();
  } catch (const json::exception& e) {
    throw Error(Errc::malformed_response, std::string("stats reply: ") + e.what());
  }
}

RemoteOracle::Health RemoteOracle::health() const {
  const json h = get_json(url_, "/v1/health");
  try {
    Health out;
    out.model_name = h.at("model_name").get<std::string>();
    out.num_classes = h.at("num_classes").get<std::size_t>();
    const auto shape = h.at("input_shape").get<std::vector<std::size_t>>();
    if (shape.size() != 3) throw Error(Errc::malformed_response, "health input_shape must have 3 entries");
    out.input_shape = {shape[0], shape[1], shape[2]};
    return out;
  } catch (const json::exception& e) {
    throw Error(Errc::malformed_response, std::string("health reply: ") + e.what());
  }
}

}  // namespace xlab
