#include "xlab/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include "xlab/binary_io.hpp"

namespace xlab {

std::string_view to_string(DatasetRole role) {
  switch (role) {
    case DatasetRole::victim_train: return "victim-train";
    case DatasetRole::adversary_pool: return "adversary-pool";
    case DatasetRole::heldout_test: return "heldout-test";
  }
  return "unknown";
}

void LabeledDataset::validate() const {
  if (inputs.rank() != 4) throw Error(Errc::shape_mismatch, "dataset inputs must be N×C×H×W");
  if (inputs.dim(0) != labels.size()) {
    throw Error(Errc::count_mismatch, std::to_string(inputs.dim(0)) + " inputs but " +
                                          std::to_string(labels.size()) + " labels");
  }
  for (int label : labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= num_classes) {
      throw Error(Errc::invalid_argument, "label " + std::to_string(label) + " outside [0, " +
                                              std::to_string(num_classes) + ")");
    }
  }
  if ((inputs.array() < 0.0f).any() || (inputs.array() > 1.0f).any()) {
    throw Error(Errc::invalid_argument, "dataset '" + name + "' has inputs outside [0, 1]");
  }
}

namespace {

std::uint32_t big_endian(std::string_view bytes) {
  return (static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[0])) << 24) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[1])) << 16) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[2])) << 8) |
         static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[3]));
}

struct IdxHeader {
  std::vector<std::uint32_t> dims;
  std::string_view payload;
};

IdxHeader read_idx(std::string_view bytes, std::uint32_t magic, std::size_t ndims, const std::string& path) {
  if (bytes.size() < 4) throw Error(Errc::truncated_payload, "'" + path + "' is shorter than an IDX header");
  const std::uint32_t found = big_endian(bytes.substr(0, 4));
  if (found != magic) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "magic 0x%08X, expected 0x%08X", found, magic);
    throw Error(Errc::bad_magic, "'" + path + "' has " + buf);
  }
  if (bytes.size() < 4 + 4 * ndims) throw Error(Errc::truncated_payload, "'" + path + "' header is truncated");
  IdxHeader h;
  std::size_t expected = 1;
  for (std::size_t i = 0; i < ndims; ++i) {
    h.dims.push_back(big_endian(bytes.substr(4 + 4 * i, 4)));
    expected *= h.dims.back();
  }
  h.payload = bytes.substr(4 + 4 * ndims);
  if (h.payload.size() < expected) {
    throw Error(Errc::truncated_payload, "'" + path + "' holds " + std::to_string(h.payload.size()) +
                                             " payload bytes, expected " + std::to_string(expected));
  }
  h.payload = h.payload.substr(0, expected);
  return h;
}

}  // namespace

LabeledDataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                        std::size_t num_classes, DatasetRole role, std::string name) {
  const std::string image_bytes = io::read_file(images.string());
  const std::string label_bytes = io::read_file(labels.string());
  const IdxHeader ih = read_idx(image_bytes, 0x00000803, 3, images.string());
  const IdxHeader lh = read_idx(label_bytes, 0x00000801, 1, labels.string());
  if (ih.dims[0] != lh.dims[0]) {
    throw Error(Errc::count_mismatch, std::to_string(ih.dims[0]) + " images but " + std::to_string(lh.dims[0]) +
                                          " labels");
  }
  if (ih.dims[0] == 0 || ih.dims[1] == 0 || ih.dims[2] == 0) {
    throw Error(Errc::empty_input, "'" + images.string() + "' holds no pixels");
  }
  LabeledDataset ds;
  ds.name = std::move(name);
  ds.role = role;
  ds.num_classes = num_classes;
  ds.inputs = Tensor<float>({ih.dims[0], 1, ih.dims[1], ih.dims[2]});
  for (std::size_t i = 0; i < ds.inputs.size(); ++i) {
    ds.inputs[i] = static_cast<float>(static_cast<unsigned char>(ih.payload[i])) / 255.0f;
  }
  ds.labels.reserve(lh.dims[0]);
  for (char c : lh.payload) ds.labels.push_back(static_cast<unsigned char>(c));
  ds.validate();
  return ds;
}

void SynthConfig::validate() const {
  if (num_classes < 2) throw Error(Errc::invalid_argument, "synth: num_classes must be >= 2");
  if (samples_per_class == 0) throw Error(Errc::invalid_argument, "synth: samples_per_class must be >= 1");
  if (side < 2 || channels == 0) throw Error(Errc::invalid_argument, "synth: bad image geometry");
  if (!(noise >= 0.0 && noise < 0.5)) throw Error(Errc::invalid_argument, "synth: noise must lie in [0, 0.5)");
  if (!(contrast > 0.0 && contrast <= 0.5)) throw Error(Errc::invalid_argument, "synth: contrast must lie in (0, 0.5]");
  if (!(sharpness > 0.0)) throw Error(Errc::invalid_argument, "synth: sharpness must be > 0");
  if (blobs == 0) throw Error(Errc::invalid_argument, "synth: blobs must be >= 1");
}

LabeledDataset synth_generate(const SynthConfig& config, DatasetRole role, std::string name) {
  config.validate();
  const std::size_t plane = config.side * config.side;
  const std::size_t dim = config.channels * plane;

  std::mt19937_64 template_rng(config.template_seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::vector<double>> templates(config.num_classes, std::vector<double>(dim, 0.0));
  const double side = static_cast<double>(config.side);
  for (auto& tmpl : templates) {
    for (std::size_t c = 0; c < config.channels; ++c) {
      std::vector<double> field(plane, 0.0);
      for (std::size_t b = 0; b < config.blobs; ++b) {
        const double cx = unit(template_rng) * side;
        const double cy = unit(template_rng) * side;
        const double width = side * (0.12 + 0.18 * unit(template_rng));
        const double amp = 2.0 * unit(template_rng) - 1.0;
        for (std::size_t y = 0; y < config.side; ++y) {
          for (std::size_t x = 0; x < config.side; ++x) {
            const double dx = static_cast<double>(x) - cx;
            const double dy = static_cast<double>(y) - cy;
            field[y * config.side + x] += amp * std::exp(-(dx * dx + dy * dy) / (2.0 * width * width));
          }
        }
      }
      for (std::size_t p = 0; p < plane; ++p) tmpl[c * plane + p] = 0.5 + config.contrast * std::tanh(config.sharpness * field[p]);
    }
  }

  LabeledDataset ds;
  ds.name = std::move(name);
  ds.role = role;
  ds.num_classes = config.num_classes;
  const std::size_t n = config.num_classes * config.samples_per_class;
  ds.inputs = Tensor<float>({n, config.channels, config.side, config.side});
  ds.labels.resize(n);
  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> jitter(-config.noise, config.noise);
  // Interleaved class order: sample i belongs to class i % K.
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i % config.num_classes;
    ds.labels[i] = static_cast<int>(k);
    float* dst = ds.inputs.raw() + i * dim;
    for (std::size_t p = 0; p < dim; ++p) {
      const double v = config.noise > 0.0 ? templates[k][p] + jitter(rng) : templates[k][p];
      dst[p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  ds.validate();
  return ds;
}

std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

std::vector<Batch> batches(const LabeledDataset& dataset, std::size_t batch_size,
                           std::optional<std::uint64_t> shuffle_seed) {
  if (batch_size == 0) throw Error(Errc::invalid_argument, "batch_size must be >= 1");
  std::vector<std::size_t> order;
  if (shuffle_seed) {
    order = permutation(dataset.size(), *shuffle_seed);
  } else {
    order.resize(dataset.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
  }
  std::vector<Batch> out;
  for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
    const std::size_t end = std::min(order.size(), begin + batch_size);
    Batch b;
    b.indices.assign(order.begin() + static_cast<std::ptrdiff_t>(begin), order.begin() + static_cast<std::ptrdiff_t>(end));
    b.inputs = gather_rows(dataset.inputs, std::span<const std::size_t>(b.indices));
    for (std::size_t i : b.indices) b.labels.push_back(dataset.labels[i]);
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace xlab
