#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "xlab/graph.hpp"

namespace xlab {

enum class LayerKind { dense, conv, relu, maxpool, dropout, flatten };

struct Layer {
  LayerKind kind = LayerKind::relu;
  std::size_t units = 0;    // dense
  std::size_t filters = 0;  // conv
  std::size_t kernel = 0;   // conv
  std::size_t stride = 1;   // conv
  std::size_t pad = 0;      // conv
  std::size_t size = 0;     // maxpool
  double rate = 0.0;        // dropout

  static Layer dense(std::size_t units) { return {.kind = LayerKind::dense, .units = units}; }
  static Layer conv(std::size_t filters, std::size_t kernel, std::size_t stride = 1, std::size_t pad = 0) {
    return {.kind = LayerKind::conv, .filters = filters, .kernel = kernel, .stride = stride, .pad = pad};
  }
  static Layer maxpool(std::size_t size) { return {.kind = LayerKind::maxpool, .size = size}; }
  static Layer dropout(double rate) { return {.kind = LayerKind::dropout, .rate = rate}; }
  static Layer relu() { return {.kind = LayerKind::relu}; }
  static Layer flatten() { return {.kind = LayerKind::flatten}; }

  bool operator==(const Layer&) const = default;
};

struct ParamShape {
  std::string name;
  Shape shape;
  std::size_t fan_in = 0;
};

// Architecture description. Text form, one directive per line:
//
//   name cnn-small
//   input 1 16 16
//   classes 10
//   conv 8 3 1 0
//   relu
//   maxpool 2
//   flatten
//   dense 64
//   dropout 0.25
//   dense 10
struct ModelSpec {
  std::string name;
  std::array<std::size_t, 3> input_shape{1, 1, 1};
  std::vector<Layer> layers;
  std::size_t num_classes = 0;

  // Throws Errc::invalid_spec naming the first failing layer.
  void validate() const;
  std::vector<ParamShape> param_shapes() const;
  std::size_t param_count() const;

  std::string to_text() const;
  static ModelSpec parse(std::string_view text);

  bool operator==(const ModelSpec&) const = default;
};

// Victim family: two conv blocks, pooling, dropout, dense head.
ModelSpec cnn_small(std::array<std::size_t, 3> input_shape, std::size_t num_classes);
// Surrogate family: two hidden dense layers.
ModelSpec mlp_wide(std::array<std::size_t, 3> input_shape, std::size_t num_classes);
// Resolves "cnn-small" / "mlp-wide".
ModelSpec model_family(std::string_view family, std::array<std::size_t, 3> input_shape, std::size_t num_classes);

struct Param {
  std::string name;
  Tensor<float> value;
};

struct TrainingMeta {
  std::size_t epochs = 0;
  double final_lr = 0.0;
  std::string dataset_id;
  bool adversarial = false;
  std::string technique;  // "fgsm" / "pgd" when adversarial
  double epsilon = 0.0;
  std::string provenance;

  bool operator==(const TrainingMeta&) const = default;
};

class Model {
 public:
  Model(ModelSpec spec, std::vector<Param> params, std::uint64_t seed);

  const ModelSpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<Param>& params() const { return params_; }
  std::vector<Param>& params() { return params_; }
  const Tensor<float>& param(std::string_view name) const;
  Tensor<float>& param(std::string_view name);

  TrainingMeta& meta() { return meta_; }
  const TrainingMeta& meta() const { return meta_; }

  template <typename Scalar>
  void bind(Bindings<Scalar>& bindings, std::vector<Tensor<Scalar>>& storage) const;

 private:
  ModelSpec spec_;
  std::vector<Param> params_;
  std::uint64_t seed_ = 0;
  TrainingMeta meta_;
};

// Parameters drawn Kaiming-uniform on fan-in, biases zero.
Model build_model(const ModelSpec& spec, std::uint64_t seed);

// A classifier graph over a batch. Leaves: "input" (B×C×H×W), "target"
// (B×K, when with_loss) and one leaf per parameter.
template <typename Scalar>
struct ClassifierGraph {
  Graph<Scalar> graph;
  NodeId input = 0;
  NodeId logits = 0;
  NodeId log_probs = 0;
  std::optional<NodeId> target;
  std::optional<NodeId> loss;
};

struct GraphOptions {
  bool input_grad = false;
  bool param_grad = false;
  bool with_loss = false;
  bool training = false;
};

template <typename Scalar>
ClassifierGraph<Scalar> build_classifier_graph(const ModelSpec& spec, std::size_t batch, const GraphOptions& options);

// Evaluation-mode class probabilities, one row per input.
Tensor<float> predict_proba(const Model& model, const Tensor<float>& batch);
std::vector<int> predict_label(const Model& model, const Tensor<float>& batch);
std::vector<int> argmax_rows(const Tensor<float>& probs);

// Loss gradient with respect to the input batch (evaluation mode). `targets`
// holds one probability row per input.
Tensor<float> input_gradient(const Model& model, const Tensor<float>& batch, const Tensor<float>& targets);

Tensor<float> one_hot(std::span<const int> labels, std::size_t num_classes);

// Checkpoint layout (little-endian): "XLAB", u32 version, u32 + spec text,
// u32 + metadata text, u32 parameter count, then per parameter: u32 + name,
// u32 rank, rank × u32 extents, f32 payload.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);
std::string encode_checkpoint(const Model& model);
Model decode_checkpoint(std::string_view bytes);

}  // namespace xlab
