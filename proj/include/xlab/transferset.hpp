#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "xlab/tensor.hpp"

namespace xlab {

struct TransferProvenance {
  std::string oracle_id;
  std::string pool_id;
  std::uint64_t seed = 0;
  std::size_t budget = 0;

  bool operator==(const TransferProvenance&) const = default;
};

// Adversary inputs paired with the oracle's probability rows.
struct TransferSet {
  Tensor<float> inputs;       // B×C×H×W
  Tensor<float> soft_labels;  // B×K
  TransferProvenance provenance;

  std::size_t size() const { return inputs.rank() == 4 ? inputs.dim(0) : 0; }
  void validate() const;
};

// Stored as <dir>/manifest.json plus <dir>/tensors.bin (checkpoint record
// encoding for "inputs" and "soft_labels").
void save_transferset(const TransferSet& set, const std::filesystem::path& dir);
TransferSet load_transferset(const std::filesystem::path& dir);

}  // namespace xlab
