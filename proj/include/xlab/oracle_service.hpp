#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "xlab/extraction.hpp"
#include "xlab/model.hpp"

namespace xlab {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  std::filesystem::path checkpoint;
  std::optional<std::size_t> budget;  // samples
  std::size_t max_batch = 256;
  std::optional<std::filesystem::path> log;  // JSON lines, one per served request

  void validate() const;
};

// HTTP front for a victim model:
//   GET  /v1/health   -> {status, model_name, num_classes, input_shape}
//   POST /v1/predict  {inputs: [[...]...], shape: [C,H,W]}
//                     -> 200 {probs, queries_used, budget_remaining}
//                        400 malformed | 413 batch too large | 429 budget exhausted
//   GET  /v1/stats    -> {queries_used, budget_remaining}
// Only probabilities leave the process. The X-Client-Id header, when present,
// is copied into the query log.
class OracleService {
 public:
  OracleService(Model model, ServiceConfig config);
  ~OracleService();
  OracleService(const OracleService&) = delete;
  OracleService& operator=(const OracleService&) = delete;

  // Loads config.checkpoint.
  static std::unique_ptr<OracleService> from_config(const ServiceConfig& config);

  // Binds and serves on a background thread; returns the bound port.
  int start();
  // Binds and serves on the calling thread until stop().
  void run();
  void stop();

  std::size_t queries_used() const;
  const ServiceConfig& config() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Oracle backed by a running service.
class RemoteOracle final : public Oracle {
 public:
  // url like "http://127.0.0.1:8080".
  explicit RemoteOracle(std::string url, std::string client_id = "remote");
  ~RemoteOracle() override;

  Tensor<float> query(const Tensor<float>& batch) override;
  std::optional<std::size_t> budget_remaining() const override;
  std::size_t queries_used() const override;
  std::string id() const override { return url_; }

  struct Health {
    std::string model_name;
    std::size_t num_classes = 0;
    std::array<std::size_t, 3> input_shape{};
  };
  Health health() const;

 private:
  std::string url_;
  std::string client_id_;
};

// Decimal rendering with 9 significant digits; exact for 32-bit floats.
std::string format_float(float value);

}  // namespace xlab
