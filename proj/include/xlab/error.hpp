#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace xlab {

// Machine-readable error categories. The CLI and the oracle service report
// these names verbatim.
enum class Errc {
  shape_mismatch,
  unbound_leaf,
  invalid_state,
  invalid_argument,
  invalid_spec,
  unknown_layer,
  corrupt_file,
  unsupported_version,
  bad_magic,
  count_mismatch,
  truncated_payload,
  io_error,
  non_finite,
  not_normalized,
  empty_input,
  heldout_misuse,
  budget_exhausted,
  budget_exceeds_pool,
  batch_too_large,
  transport_error,
  malformed_response,
  config_error,
  missing_baseline,
  insufficient_data,
};

constexpr std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::shape_mismatch: return "shape_mismatch";
    case Errc::unbound_leaf: return "unbound_leaf";
    case Errc::invalid_state: return "invalid_state";
    case Errc::invalid_argument: return "invalid_argument";
    case Errc::invalid_spec: return "invalid_spec";
    case Errc::unknown_layer: return "unknown_layer";
    case Errc::corrupt_file: return "corrupt_file";
    case Errc::unsupported_version: return "unsupported_version";
    case Errc::bad_magic: return "bad_magic";
    case Errc::count_mismatch: return "count_mismatch";
    case Errc::truncated_payload: return "truncated_payload";
    case Errc::io_error: return "io_error";
    case Errc::non_finite: return "non_finite";
    case Errc::not_normalized: return "not_normalized";
    case Errc::empty_input: return "empty_input";
    case Errc::heldout_misuse: return "heldout_misuse";
    case Errc::budget_exhausted: return "budget_exhausted";
    case Errc::budget_exceeds_pool: return "budget_exceeds_pool";
    case Errc::batch_too_large: return "batch_too_large";
    case Errc::transport_error: return "transport_error";
    case Errc::malformed_response: return "malformed_response";
    case Errc::config_error: return "config_error";
    case Errc::missing_baseline: return "missing_baseline";
    case Errc::insufficient_data: return "insufficient_data";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace xlab
