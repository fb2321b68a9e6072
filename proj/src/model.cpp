#include "xlab/model.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "xlab/binary_io.hpp"

namespace xlab {

namespace {

std::string layer_label(std::size_t index, const Layer& layer) {
  static constexpr const char* names[] = {"dense", "conv", "relu", "maxpool", "dropout", "flatten"};
  return "layer " + std::to_string(index) + " (" + names[static_cast<int>(layer.kind)] + ")";
}

std::string param_prefix(std::size_t index) {
  std::string digits = std::to_string(index);
  if (digits.size() < 2) digits.insert(0, "0");
  return "l" + digits;
}

// Walks the shape chain; `visit` sees each parametrized layer.
template <typename Visit>
Shape walk_shapes(const ModelSpec& spec, Visit&& visit) {
  Shape shape{spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]};
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const Layer& l = spec.layers[i];
    auto fail = [&](const std::string& why) { throw Error(Errc::invalid_spec, layer_label(i, l) + ": " + why); };
    switch (l.kind) {
      case LayerKind::dense: {
        if (shape.size() != 1) fail("dense needs a flat input, got " + to_string(shape) + "; add flatten");
        if (l.units == 0) fail("units must be >= 1");
        visit(i, ParamShape{param_prefix(i) + ".weight", {shape[0], l.units}, shape[0]});
        visit(i, ParamShape{param_prefix(i) + ".bias", {l.units}, shape[0]});
        shape = {l.units};
        break;
      }
      case LayerKind::conv: {
        if (shape.size() != 3) fail("conv needs a C×H×W input, got " + to_string(shape));
        if (l.filters == 0 || l.kernel == 0 || l.stride == 0) fail("filters, kernel and stride must be >= 1");
        if (l.kernel > shape[1] + 2 * l.pad || l.kernel > shape[2] + 2 * l.pad) {
          fail("kernel " + std::to_string(l.kernel) + " larger than padded input " + to_string(shape));
        }
        const std::size_t fan_in = shape[0] * l.kernel * l.kernel;
        visit(i, ParamShape{param_prefix(i) + ".weight", {l.filters, shape[0], l.kernel, l.kernel}, fan_in});
        visit(i, ParamShape{param_prefix(i) + ".bias", {l.filters}, fan_in});
        shape = {l.filters, (shape[1] + 2 * l.pad - l.kernel) / l.stride + 1,
                 (shape[2] + 2 * l.pad - l.kernel) / l.stride + 1};
        break;
      }
      case LayerKind::maxpool:
        if (shape.size() != 3) fail("maxpool needs a C×H×W input, got " + to_string(shape));
        if (l.size == 0 || l.size > shape[1] || l.size > shape[2]) fail("window does not fit " + to_string(shape));
        shape = {shape[0], shape[1] / l.size, shape[2] / l.size};
        break;
      case LayerKind::flatten:
        shape = {numel(shape)};
        break;
      case LayerKind::relu:
        break;
      case LayerKind::dropout:
        if (!(l.rate >= 0.0 && l.rate < 1.0)) fail("rate must lie in [0, 1)");
        break;
    }
  }
  return shape;
}

}  // namespace

void ModelSpec::validate() const {
  if (name.empty()) throw Error(Errc::invalid_spec, "model name is empty");
  if (num_classes < 2) throw Error(Errc::invalid_spec, "num_classes must be >= 2");
  for (std::size_t e : input_shape) {
    if (e == 0) throw Error(Errc::invalid_spec, "input shape has a zero extent");
  }
  if (layers.empty()) throw Error(Errc::invalid_spec, "no layers");
  const Shape out = walk_shapes(*this, [](std::size_t, const ParamShape&) {});
  if (out != Shape{num_classes}) {
    throw Error(Errc::invalid_spec, layer_label(layers.size() - 1, layers.back()) + ": final output " +
                                        to_string(out) + " is not " + std::to_string(num_classes) + " logits");
  }
}

std::vector<ParamShape> ModelSpec::param_shapes() const {
  validate();
  std::vector<ParamShape> out;
  walk_shapes(*this, [&](std::size_t, const ParamShape& p) { out.push_back(p); });
  return out;
}

std::size_t ModelSpec::param_count() const {
  std::size_t total = 0;
  for (const ParamShape& p : param_shapes()) total += numel(p.shape);
  return total;
}

std::string ModelSpec::to_text() const {
  std::ostringstream os;
  os << "name " << name << '\n';
  os << "input " << input_shape[0] << ' ' << input_shape[1] << ' ' << input_shape[2] << '\n';
  os << "classes " << num_classes << '\n';
  for (const Layer& l : layers) {
    switch (l.kind) {
      case LayerKind::dense: os << "dense " << l.units; break;
      case LayerKind::conv: os << "conv " << l.filters << ' ' << l.kernel << ' ' << l.stride << ' ' << l.pad; break;
      case LayerKind::relu: os << "relu"; break;
      case LayerKind::maxpool: os << "maxpool " << l.size; break;
      case LayerKind::dropout: os << "dropout " << l.rate; break;
      case LayerKind::flatten: os << "flatten"; break;
    }
    os << '\n';
  }
  return os.str();
}

ModelSpec ModelSpec::parse(std::string_view text) {
  ModelSpec spec;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string word;
    if (!(ls >> word) || word.front() == '#') continue;
    auto bad = [&](const std::string& why) {
      return Error(Errc::invalid_spec, "spec line " + std::to_string(line_no) + ": " + why);
    };
    if (word == "name") {
      ls >> spec.name;
    } else if (word == "input") {
      ls >> spec.input_shape[0] >> spec.input_shape[1] >> spec.input_shape[2];
    } else if (word == "classes") {
      ls >> spec.num_classes;
    } else if (word == "dense") {
      Layer l = Layer::dense(0);
      ls >> l.units;
      spec.layers.push_back(l);
    } else if (word == "conv") {
      Layer l = Layer::conv(0, 0);
      ls >> l.filters >> l.kernel;
      if (!(ls >> l.stride)) l.stride = 1, ls.clear();
      if (!(ls >> l.pad)) l.pad = 0, ls.clear();
      spec.layers.push_back(l);
    } else if (word == "relu") {
      spec.layers.push_back(Layer::relu());
    } else if (word == "maxpool") {
      Layer l = Layer::maxpool(0);
      ls >> l.size;
      spec.layers.push_back(l);
    } else if (word == "dropout") {
      Layer l = Layer::dropout(0.0);
      ls >> l.rate;
      spec.layers.push_back(l);
    } else if (word == "flatten") {
      spec.layers.push_back(Layer::flatten());
    } else {
      throw Error(Errc::unknown_layer, "spec line " + std::to_string(line_no) + ": unknown directive '" + word + "'");
    }
    if (ls.fail()) throw bad("malformed arguments for '" + word + "'");
  }
  spec.validate();
  return spec;
}

ModelSpec cnn_small(std::array<std::size_t, 3> input_shape, std::size_t num_classes) {
  return ModelSpec{"cnn-small",
                   input_shape,
                   {Layer::conv(8, 3), Layer::relu(), Layer::maxpool(2), Layer::conv(16, 3), Layer::relu(),
                    Layer::maxpool(2), Layer::flatten(), Layer::dense(64), Layer::relu(), Layer::dropout(0.25),
                    Layer::dense(num_classes)},
                   num_classes};
}

ModelSpec mlp_wide(std::array<std::size_t, 3> input_shape, std::size_t num_classes) {
  return ModelSpec{"mlp-wide",
                   input_shape,
                   {Layer::flatten(), Layer::dense(256), Layer::relu(), Layer::dense(128), Layer::relu(),
                    Layer::dense(num_classes)},
                   num_classes};
}

ModelSpec model_family(std::string_view family, std::array<std::size_t, 3> input_shape, std::size_t num_classes) {
  if (family == "cnn-small") return cnn_small(input_shape, num_classes);
  if (family == "mlp-wide") return mlp_wide(input_shape, num_classes);
  throw Error(Errc::invalid_spec, "unknown model family '" + std::string(family) + "'");
}

Model::Model(ModelSpec spec, std::vector<Param> params, std::uint64_t seed)
    : spec_(std::move(spec)), params_(std::move(params)), seed_(seed) {
  const std::vector<ParamShape> expected = spec_.param_shapes();
  if (expected.size() != params_.size()) {
    throw Error(Errc::shape_mismatch, "model '" + spec_.name + "' expects " + std::to_string(expected.size()) +
                                          " parameters, got " + std::to_string(params_.size()));
  }
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (params_[i].name != expected[i].name || params_[i].value.shape() != expected[i].shape) {
      throw Error(Errc::shape_mismatch, "parameter '" + params_[i].name + "' " +
                                            to_string(params_[i].value.shape()) + " does not match '" +
                                            expected[i].name + "' " + to_string(expected[i].shape));
    }
    if (!params_[i].value.all_finite()) {
      throw Error(Errc::non_finite, "parameter '" + params_[i].name + "' has non-finite values");
    }
  }
}

const Tensor<float>& Model::param(std::string_view name) const {
  for (const Param& p : params_) {
    if (p.name == name) return p.value;
  }
  throw Error(Errc::invalid_argument, "no parameter '" + std::string(name) + "'");
}

Tensor<float>& Model::param(std::string_view name) {
  return const_cast<Tensor<float>&>(std::as_const(*this).param(name));
}

template <typename Scalar>
void Model::bind(Bindings<Scalar>& bindings, std::vector<Tensor<Scalar>>& storage) const {
  if constexpr (std::is_same_v<Scalar, float>) {
    for (const Param& p : params_) bindings.insert_or_assign(p.name, std::cref(p.value));
  } else {
    storage.clear();
    storage.reserve(params_.size());
    for (const Param& p : params_) {
      storage.push_back(p.value.template cast<Scalar>());
      bindings.insert_or_assign(p.name, std::cref(storage.back()));
    }
  }
}

template void Model::bind(Bindings<float>&, std::vector<Tensor<float>>&) const;
template void Model::bind(Bindings<double>&, std::vector<Tensor<double>>&) const;

Model build_model(const ModelSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Param> params;
  for (const ParamShape& p : spec.param_shapes()) {
    Tensor<float> value(p.shape);
    if (p.shape.size() > 1) {
      const double bound = std::sqrt(6.0 / static_cast<double>(p.fan_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (float& v : value.data()) v = static_cast<float>(dist(rng));
    }
    params.push_back({p.name, std::move(value)});
  }
  return Model(spec, std::move(params), seed);
}

template <typename Scalar>
ClassifierGraph<Scalar> build_classifier_graph(const ModelSpec& spec, std::size_t batch, const GraphOptions& options) {
  spec.validate();
  ClassifierGraph<Scalar> out;
  Graph<Scalar>& g = out.graph;
  g.set_training(options.training);
  out.input = g.leaf("input", {batch, spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]},
                     options.input_grad);
  NodeId x = out.input;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const Layer& l = spec.layers[i];
    const std::string prefix = param_prefix(i);
    switch (l.kind) {
      case LayerKind::dense: {
        const Shape& s = g.shape(x);
        const NodeId w = g.leaf(prefix + ".weight", {s[1], l.units}, options.param_grad);
        const NodeId b = g.leaf(prefix + ".bias", {l.units}, options.param_grad);
        x = g.add(g.matmul(x, w), b);
        break;
      }
      case LayerKind::conv: {
        const Shape& s = g.shape(x);
        const NodeId w = g.leaf(prefix + ".weight", {l.filters, s[1], l.kernel, l.kernel}, options.param_grad);
        const NodeId b = g.leaf(prefix + ".bias", {l.filters}, options.param_grad);
        x = g.add(g.conv2d(x, w, l.stride, l.pad), b);
        break;
      }
      case LayerKind::relu: x = g.relu(x); break;
      case LayerKind::maxpool: x = g.maxpool2d(x, l.size); break;
      case LayerKind::flatten: x = g.flatten(x); break;
      case LayerKind::dropout: x = g.dropout(x, l.rate); break;
    }
  }
  out.logits = x;
  out.log_probs = g.log_softmax(x);
  if (options.with_loss) {
    out.target = g.leaf("target", {batch, spec.num_classes});
    out.loss = g.cross_entropy(out.log_probs, *out.target);
  }
  return out;
}

template ClassifierGraph<float> build_classifier_graph(const ModelSpec&, std::size_t, const GraphOptions&);
template ClassifierGraph<double> build_classifier_graph(const ModelSpec&, std::size_t, const GraphOptions&);

namespace {

void check_batch(const Model& model, const Tensor<float>& batch) {
  const auto& in = model.spec().input_shape;
  if (batch.rank() != 4 || batch.dim(1) != in[0] || batch.dim(2) != in[1] || batch.dim(3) != in[2]) {
    throw Error(Errc::shape_mismatch, "batch " + to_string(batch.shape()) + " does not match model input " +
                                          to_string(Shape{in[0], in[1], in[2]}));
  }
}

}  // namespace

Tensor<float> predict_proba(const Model& model, const Tensor<float>& batch) {
  check_batch(model, batch);
  auto cg = build_classifier_graph<float>(model.spec(), batch.dim(0), {});
  Bindings<float> bindings;
  std::vector<Tensor<float>> storage;
  model.bind(bindings, storage);
  bindings.insert_or_assign("input", std::cref(batch));
  const Tensor<float>& logits = cg.graph.forward(bindings, cg.logits);
  const std::size_t k = model.spec().num_classes;
  Tensor<float> probs(logits.shape());
  for (std::size_t r = 0; r < batch.dim(0); ++r) {
    const float* src = logits.raw() + r * k;
    const double peak = *std::max_element(src, src + k);
    std::vector<double> e(k);
    double total = 0.0;
    for (std::size_t c = 0; c < k; ++c) total += e[c] = std::exp(static_cast<double>(src[c]) - peak);
    for (std::size_t c = 0; c < k; ++c) probs[r * k + c] = static_cast<float>(e[c] / total);
  }
  return probs;
}

std::vector<int> argmax_rows(const Tensor<float>& probs) {
  const std::size_t k = probs.shape().back();
  const std::size_t rows = probs.size() / k;
  std::vector<int> labels(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = probs.raw() + r * k;
    labels[r] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return labels;
}

std::vector<int> predict_label(const Model& model, const Tensor<float>& batch) {
  return argmax_rows(predict_proba(model, batch));
}

Tensor<float> input_gradient(const Model& model, const Tensor<float>& batch, const Tensor<float>& targets) {
  check_batch(model, batch);
  auto cg = build_classifier_graph<float>(model.spec(), batch.dim(0), {.input_grad = true, .with_loss = true});
  Bindings<float> bindings;
  std::vector<Tensor<float>> storage;
  model.bind(bindings, storage);
  bindings.insert_or_assign("input", std::cref(batch));
  bindings.insert_or_assign("target", std::cref(targets));
  cg.graph.forward(bindings, *cg.loss);
  return cg.graph.backward(*cg.loss).at("input");
}

Tensor<float> one_hot(std::span<const int> labels, std::size_t num_classes) {
  if (labels.empty()) throw Error(Errc::empty_input, "one_hot of no labels");
  Tensor<float> out({labels.size(), num_classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw Error(Errc::invalid_argument, "label " + std::to_string(labels[i]) + " outside [0, " +
                                              std::to_string(num_classes) + ")");
    }
    out[i * num_classes + static_cast<std::size_t>(labels[i])] = 1.0f;
  }
  return out;
}

namespace {

std::string clean(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

std::string encode_meta(const TrainingMeta& m, std::uint64_t seed) {
  std::ostringstream os;
  os.precision(17);
  os << "seed=" << seed << '\n'
     << "epochs=" << m.epochs << '\n'
     << "final_lr=" << m.final_lr << '\n'
     << "dataset_id=" << clean(m.dataset_id) << '\n'
     << "adversarial=" << (m.adversarial ? 1 : 0) << '\n'
     << "technique=" << clean(m.technique) << '\n'
     << "epsilon=" << m.epsilon << '\n'
     << "provenance=" << clean(m.provenance) << '\n';
  return os.str();
}

TrainingMeta decode_meta(const std::string& text, std::uint64_t& seed) {
  TrainingMeta m;
  std::istringstream in(text);
  std::string line;
  try {
    while (std::getline(in, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = line.substr(0, eq);
      const std::string value = line.substr(eq + 1);
      if (key == "seed") seed = std::stoull(value);
      else if (key == "epochs") m.epochs = std::stoul(value);
      else if (key == "final_lr") m.final_lr = std::stod(value);
      else if (key == "dataset_id") m.dataset_id = value;
      else if (key == "adversarial") m.adversarial = value == "1";
      else if (key == "technique") m.technique = value;
      else if (key == "epsilon") m.epsilon = std::stod(value);
      else if (key == "provenance") m.provenance = value;
    }
  } catch (const std::logic_error&) {
    throw Error(Errc::corrupt_file, "malformed checkpoint metadata line '" + line + "'");
  }
  return m;
}

}  // namespace

std::string encode_checkpoint(const Model& model) {
  std::string out = "XLAB";
  io::put_u32(out, kCheckpointVersion);
  io::put_text(out, model.spec().to_text());
  io::put_text(out, encode_meta(model.meta(), model.seed()));
  io::put_u32(out, static_cast<std::uint32_t>(model.params().size()));
  for (const Param& p : model.params()) io::put_tensor(out, p.name, p.value);
  return out;
}

Model decode_checkpoint(std::string_view bytes) {
  io::Reader in(bytes);
  if (bytes.size() < 8 || in.take(4) != "XLAB") throw Error(Errc::corrupt_file, "missing XLAB magic");
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) {
    throw Error(Errc::unsupported_version, "checkpoint version " + std::to_string(version) + " (supported: " +
                                               std::to_string(kCheckpointVersion) + ")");
  }
  ModelSpec spec = ModelSpec::parse(in.text());
  std::uint64_t seed = 0;
  TrainingMeta meta = decode_meta(in.text(), seed);
  const std::uint32_t count = in.u32();
  std::vector<Param> params;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, value] = in.tensor();
    params.push_back({std::move(name), std::move(value)});
  }
  if (in.remaining() != 0) throw Error(Errc::corrupt_file, "trailing bytes after parameter records");
  Model model(std::move(spec), std::move(params), seed);
  model.meta() = std::move(meta);
  return model;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  io::write_file(path.string(), encode_checkpoint(model));
}

Model load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(io::read_file(path.string())); }

namespace io {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io_error, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, std::string_view bytes) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::io_error, "cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(Errc::io_error, "short write to '" + path + "'");
}

}  // namespace io

}  // namespace xlab
