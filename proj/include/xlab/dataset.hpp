#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "xlab/tensor.hpp"

namespace xlab {

enum class DatasetRole { victim_train, adversary_pool, heldout_test };

std::string_view to_string(DatasetRole role);

// Inputs are N×C×H×W in [0, 1]; labels in [0, num_classes).
struct LabeledDataset {
  Tensor<float> inputs;
  std::vector<int> labels;
  std::size_t num_classes = 0;
  std::string name;
  DatasetRole role = DatasetRole::victim_train;

  std::size_t size() const { return labels.size(); }
  std::array<std::size_t, 3> input_shape() const { return {inputs.dim(1), inputs.dim(2), inputs.dim(3)}; }

  // Throws when any invariant above is broken.
  void validate() const;
};

// IDX container: big-endian u32 magic (0x803 images, 0x801 labels), u32
// count, and for images u32 rows, u32 cols; then unsigned bytes.
LabeledDataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                        std::size_t num_classes = 10, DatasetRole role = DatasetRole::victim_train,
                        std::string name = "idx");

// Class-template images: each class owns a smooth random pattern drawn from
// `template_seed`; samples add uniform noise of amplitude `noise` and clamp
// to [0, 1].
struct SynthConfig {
  std::size_t num_classes = 10;
  std::size_t samples_per_class = 100;
  std::size_t side = 16;
  std::size_t channels = 1;
  std::uint64_t seed = 0;
  std::uint64_t template_seed = 0;
  double noise = 0.2;
  double contrast = 0.5;
  double sharpness = 2.0;  // tanh gain; large values give near-binary templates
  std::size_t blobs = 4;

  void validate() const;
};

LabeledDataset synth_generate(const SynthConfig& config, DatasetRole role = DatasetRole::victim_train,
                              std::string name = "synth");

struct Batch {
  Tensor<float> inputs;
  std::vector<int> labels;
  std::vector<std::size_t> indices;
};

// Without a shuffle seed the original order is kept; the last batch may be short.
std::vector<Batch> batches(const LabeledDataset& dataset, std::size_t batch_size,
                           std::optional<std::uint64_t> shuffle_seed = std::nullopt);

// Deterministic permutation of [0, n).
std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed);

}  // namespace xlab
