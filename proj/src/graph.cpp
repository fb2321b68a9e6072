#include "xlab/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace xlab {

std::string_view to_string(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::matmul: return "matmul";
    case OpKind::conv2d: return "conv2d";
    case OpKind::maxpool2d: return "maxpool2d";
    case OpKind::relu: return "relu";
    case OpKind::flatten: return "flatten";
    case OpKind::dropout: return "dropout";
    case OpKind::log_softmax: return "log_softmax";
    case OpKind::cross_entropy: return "cross_entropy";
    case OpKind::sum: return "sum";
    case OpKind::scale: return "scale";
  }
  return "unknown";
}

namespace {

struct ConvDims {
  std::size_t n, c, h, w, k, kh, kw, oh, ow;
};

ConvDims conv_dims(const Shape& in, const Shape& ker, std::size_t stride, std::size_t pad) {
  const bool batched = in.size() == 4;
  ConvDims d{};
  d.n = batched ? in[0] : 1;
  d.c = in[in.size() - 3];
  d.h = in[in.size() - 2];
  d.w = in[in.size() - 1];
  d.k = ker[0];
  d.kh = ker[2];
  d.kw = ker[3];
  d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
  d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
  return d;
}

// Splits a shape into (outer, channels, inner) around axis 1 for bias broadcast.
std::pair<std::size_t, std::size_t> broadcast_split(const Shape& s) {
  std::size_t inner = 1;
  for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
  return {s[0], inner};
}

}  // namespace

template <typename Scalar>
typename Graph<Scalar>::Node& Graph<Scalar>::node(NodeId id) {
  if (id >= nodes_.size()) throw Error(Errc::invalid_argument, "unknown node id " + std::to_string(id));
  return nodes_[id];
}

template <typename Scalar>
const typename Graph<Scalar>::Node& Graph<Scalar>::node(NodeId id) const {
  if (id >= nodes_.size()) throw Error(Errc::invalid_argument, "unknown node id " + std::to_string(id));
  return nodes_[id];
}

template <typename Scalar>
std::string Graph<Scalar>::describe(NodeId id) const {
  const Node& n = nodes_[id];
  std::string out = "node #" + std::to_string(id) + " (" + std::string(to_string(n.kind));
  if (!n.name.empty()) out += " '" + n.name + "'";
  return out + ")";
}

template <typename Scalar>
NodeId Graph<Scalar>::push(Node n) {
  if (n.kind != OpKind::leaf) {
    n.requires_grad = std::any_of(n.inputs.begin(), n.inputs.end(),
                                  [&](NodeId i) { return nodes_[i].requires_grad; });
  }
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

template <typename Scalar>
NodeId Graph<Scalar>::leaf(std::string name, Shape shape, bool requires_grad) {
  for (const Node& n : nodes_) {
    if (n.kind == OpKind::leaf && n.name == name) {
      throw Error(Errc::invalid_argument, "duplicate leaf name '" + name + "'");
    }
  }
  if (numel(shape) == 0) throw Error(Errc::shape_mismatch, "leaf '" + name + "' has a zero extent");
  Node n;
  n.kind = OpKind::leaf;
  n.name = std::move(name);
  n.shape = std::move(shape);
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::add(NodeId a, NodeId b) {
  const Shape& sa = node(a).shape;
  const Shape& sb = node(b).shape;
  const bool broadcast = sb.size() == 1 && sa.size() >= 2 && sa[1] == sb[0];
  if (sa != sb && !broadcast) {
    throw Error(Errc::shape_mismatch, "add of " + to_string(sa) + " and " + to_string(sb) + " at node #" +
                                          std::to_string(nodes_.size()));
  }
  Node n;
  n.kind = OpKind::add;
  n.inputs = {a, b};
  n.shape = sa;
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::sub(NodeId a, NodeId b) {
  if (node(a).shape != node(b).shape) {
    throw Error(Errc::shape_mismatch, "sub of " + to_string(node(a).shape) + " and " +
                                          to_string(node(b).shape) + " at node #" +
                                          std::to_string(nodes_.size()));
  }
  Node n;
  n.kind = OpKind::sub;
  n.inputs = {a, b};
  n.shape = node(a).shape;
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::mul(NodeId a, NodeId b) {
  if (node(a).shape != node(b).shape) {
    throw Error(Errc::shape_mismatch, "mul of " + to_string(node(a).shape) + " and " +
                                          to_string(node(b).shape) + " at node #" +
                                          std::to_string(nodes_.size()));
  }
  Node n;
  n.kind = OpKind::mul;
  n.inputs = {a, b};
  n.shape = node(a).shape;
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::matmul(NodeId a, NodeId b) {
  const Shape& sa = node(a).shape;
  const Shape& sb = node(b).shape;
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    throw Error(Errc::shape_mismatch, "matmul of " + to_string(sa) + " by " + to_string(sb) + " at node #" +
                                          std::to_string(nodes_.size()));
  }
  Node n;
  n.kind = OpKind::matmul;
  n.inputs = {a, b};
  n.shape = {sa[0], sb[1]};
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::conv2d(NodeId input, NodeId kernels, std::size_t stride, std::size_t padding) {
  const Shape& si = node(input).shape;
  const Shape& sk = node(kernels).shape;
  const std::string where = " at node #" + std::to_string(nodes_.size());
  if ((si.size() != 3 && si.size() != 4) || sk.size() != 4) {
    throw Error(Errc::shape_mismatch, "conv2d of " + to_string(si) + " with kernels " + to_string(sk) + where);
  }
  if (stride == 0) throw Error(Errc::invalid_argument, "conv2d stride must be >= 1" + where);
  const std::size_t c = si[si.size() - 3], h = si[si.size() - 2], w = si[si.size() - 1];
  if (sk[1] != c) {
    throw Error(Errc::shape_mismatch, "conv2d kernel channels " + std::to_string(sk[1]) + " != input channels " +
                                          std::to_string(c) + where);
  }
  if (sk[2] > h + 2 * padding || sk[3] > w + 2 * padding) {
    throw Error(Errc::shape_mismatch,
                "conv2d kernel " + to_string(sk) + " larger than padded input " + to_string(si) + where);
  }
  const ConvDims d = conv_dims(si, sk, stride, padding);
  Node n;
  n.kind = OpKind::conv2d;
  n.inputs = {input, kernels};
  n.stride = stride;
  n.padding = padding;
  n.shape = si.size() == 4 ? Shape{d.n, d.k, d.oh, d.ow} : Shape{d.k, d.oh, d.ow};
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::maxpool2d(NodeId input, std::size_t size) {
  const Shape& si = node(input).shape;
  const std::string where = " at node #" + std::to_string(nodes_.size());
  if (si.size() != 3 && si.size() != 4) throw Error(Errc::shape_mismatch, "maxpool2d of " + to_string(si) + where);
  if (size == 0) throw Error(Errc::invalid_argument, "maxpool2d window must be >= 1" + where);
  const std::size_t h = si[si.size() - 2], w = si[si.size() - 1];
  if (size > h || size > w) {
    throw Error(Errc::shape_mismatch, "maxpool2d window " + std::to_string(size) + " larger than " + to_string(si) + where);
  }
  Node n;
  n.kind = OpKind::maxpool2d;
  n.inputs = {input};
  n.window = size;
  n.shape = si;
  n.shape[si.size() - 2] = h / size;
  n.shape[si.size() - 1] = w / size;
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::relu(NodeId x) {
  Node n;
  n.kind = OpKind::relu;
  n.inputs = {x};
  n.shape = node(x).shape;
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::flatten(NodeId x) {
  const Shape& s = node(x).shape;
  if (s.empty()) throw Error(Errc::shape_mismatch, "flatten of a scalar at node #" + std::to_string(nodes_.size()));
  Node n;
  n.kind = OpKind::flatten;
  n.inputs = {x};
  n.shape = {s[0], numel(s) / s[0]};
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::dropout(NodeId x, double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw Error(Errc::invalid_argument, "dropout rate must lie in [0, 1) at node #" + std::to_string(nodes_.size()));
  }
  Node n;
  n.kind = OpKind::dropout;
  n.inputs = {x};
  n.factor = rate;
  n.shape = node(x).shape;
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::log_softmax(NodeId x) {
  const Shape& s = node(x).shape;
  if (s.size() != 1 && s.size() != 2) {
    throw Error(Errc::shape_mismatch, "log_softmax of " + to_string(s) + " at node #" + std::to_string(nodes_.size()));
  }
  Node n;
  n.kind = OpKind::log_softmax;
  n.inputs = {x};
  n.shape = s;
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::cross_entropy(NodeId log_probs, NodeId targets) {
  const Shape& sl = node(log_probs).shape;
  const Shape& st = node(targets).shape;
  if (sl != st || (sl.size() != 1 && sl.size() != 2)) {
    throw Error(Errc::shape_mismatch, "cross_entropy of " + to_string(sl) + " against targets " + to_string(st) +
                                          " at node #" + std::to_string(nodes_.size()));
  }
  Node n;
  n.kind = OpKind::cross_entropy;
  n.inputs = {log_probs, targets};
  n.shape = {};
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::sum(NodeId x) {
  Node n;
  n.kind = OpKind::sum;
  n.inputs = {x};
  n.shape = {};
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::scale(NodeId x, double factor) {
  Node n;
  n.kind = OpKind::scale;
  n.inputs = {x};
  n.factor = factor;
  n.shape = node(x).shape;
  return push(std::move(n));
}

template <typename Scalar>
const Tensor<Scalar>& Graph<Scalar>::value(NodeId id) const {
  if (!forwarded_) throw Error(Errc::invalid_state, "value() before forward()");
  return node(id).value;
}

template <typename Scalar>
std::vector<std::string> Graph<Scalar>::leaf_names(bool grad_only) const {
  std::vector<std::string> names;
  for (const Node& n : nodes_) {
    if (n.kind == OpKind::leaf && (!grad_only || n.requires_grad)) names.push_back(n.name);
  }
  return names;
}

template <typename Scalar>
void Graph<Scalar>::reset() {
  for (Node& n : nodes_) {
    n.value = TensorT();
    n.grad = TensorT();
    n.has_grad = false;
    n.indices.clear();
    n.mask.clear();
    n.columns.resize(0, 0);
  }
  forwarded_ = false;
  backwarded_ = false;
}

template <typename Scalar>
const Tensor<Scalar>& Graph<Scalar>::forward(const Bindings<Scalar>& bindings, NodeId output) {
  if (forwarded_) throw Error(Errc::invalid_state, "graph already executed; reset() before reuse");
  node(output);
  std::vector<char> needed(nodes_.size(), 0);
  needed[output] = 1;
  for (NodeId id = output + 1; id-- > 0;) {
    if (!needed[id]) continue;
    for (NodeId in : nodes_[id].inputs) needed[in] = 1;
  }
  for (NodeId id = 0; id <= output; ++id) {
    if (needed[id]) eval(id, bindings);
  }
  forwarded_ = true;
  // Non-finite values propagate through every op, so checking the output suffices.
  if (!nodes_[output].value.all_finite()) {
    throw Error(Errc::non_finite, describe(output) + " produced a non-finite value");
  }
  return nodes_[output].value;
}

template <typename Scalar>
void Graph<Scalar>::eval(NodeId id, const Bindings<Scalar>& bindings) {
  Node& n = nodes_[id];
  auto in = [&](std::size_t i) -> const TensorT& { return nodes_[n.inputs[i]].value; };
  switch (n.kind) {
    case OpKind::leaf: {
      auto it = bindings.find(n.name);
      if (it == bindings.end()) throw Error(Errc::unbound_leaf, "no binding for leaf '" + n.name + "'");
      const TensorT& bound = it->second.get();
      if (bound.shape() != n.shape) {
        throw Error(Errc::shape_mismatch, describe(id) + " expects " + to_string(n.shape) + ", bound " +
                                              to_string(bound.shape()));
      }
      n.value = bound;
      break;
    }
    case OpKind::add: {
      const TensorT& a = in(0);
      const TensorT& b = in(1);
      n.value = a;
      if (a.shape() == b.shape()) {
        n.value.array() += b.array();
      } else {
        auto [outer, inner] = broadcast_split(a.shape());
        const std::size_t ch = b.size();
        Scalar* out = n.value.raw();
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t c = 0; c < ch; ++c) {
            Scalar* p = out + (o * ch + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) p[i] += b[c];
          }
        }
      }
      break;
    }
    case OpKind::sub:
      n.value = in(0);
      n.value.array() -= in(1).array();
      break;
    case OpKind::mul:
      n.value = in(0);
      n.value.array() *= in(1).array();
      break;
    case OpKind::matmul: {
      n.value = TensorT(n.shape);
      n.value.matrix() =
          (in(0).matrix().template cast<double>() * in(1).matrix().template cast<double>()).template cast<Scalar>();
      break;
    }
    case OpKind::conv2d: {
      const TensorT& x = in(0);
      const TensorT& k = in(1);
      const ConvDims d = conv_dims(x.shape(), k.shape(), n.stride, n.padding);
      const std::size_t patch = d.c * d.kh * d.kw;
      const std::size_t spatial = d.oh * d.ow;
      n.columns.resize(static_cast<Eigen::Index>(patch), static_cast<Eigen::Index>(d.n * spatial));
      if (n.padding > 0) n.columns.setZero();
      const long pad = static_cast<long>(n.padding);
      for (std::size_t b = 0; b < d.n; ++b) {
        for (std::size_t c = 0; c < d.c; ++c) {
          const Scalar* plane = x.raw() + (b * d.c + c) * d.h * d.w;
          for (std::size_t i = 0; i < d.kh; ++i) {
            for (std::size_t j = 0; j < d.kw; ++j) {
              const Eigen::Index row = static_cast<Eigen::Index>((c * d.kh + i) * d.kw + j);
              for (std::size_t oy = 0; oy < d.oh; ++oy) {
                const long y = static_cast<long>(oy * n.stride + i) - pad;
                if (y < 0 || y >= static_cast<long>(d.h)) continue;
                for (std::size_t ox = 0; ox < d.ow; ++ox) {
                  const long xx = static_cast<long>(ox * n.stride + j) - pad;
                  if (xx < 0 || xx >= static_cast<long>(d.w)) continue;
                  n.columns(row, static_cast<Eigen::Index>(b * spatial + oy * d.ow + ox)) =
                      plane[static_cast<std::size_t>(y) * d.w + static_cast<std::size_t>(xx)];
                }
              }
            }
          }
        }
      }
      const auto kmat = Eigen::Map<const RowMatrix<Scalar>>(k.raw(), static_cast<Eigen::Index>(d.k),
                                                            static_cast<Eigen::Index>(patch));
      const RowMatrix<double> result = kmat.template cast<double>() * n.columns;
      n.value = TensorT(n.shape);
      for (std::size_t b = 0; b < d.n; ++b) {
        for (std::size_t kk = 0; kk < d.k; ++kk) {
          Scalar* dst = n.value.raw() + (b * d.k + kk) * spatial;
          const double* src = result.data() + kk * d.n * spatial + b * spatial;
          for (std::size_t p = 0; p < spatial; ++p) dst[p] = static_cast<Scalar>(src[p]);
        }
      }
      break;
    }
    case OpKind::maxpool2d: {
      const TensorT& x = in(0);
      const Shape& s = x.shape();
      const std::size_t h = s[s.size() - 2], w = s[s.size() - 1];
      const std::size_t oh = n.shape[s.size() - 2], ow = n.shape[s.size() - 1];
      const std::size_t planes = x.size() / (h * w);
      n.value = TensorT(n.shape);
      n.indices.assign(n.value.size(), 0);
      for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
          for (std::size_t ox = 0; ox < ow; ++ox) {
            std::size_t best = p * h * w + oy * n.window * w + ox * n.window;
            for (std::size_t i = 0; i < n.window; ++i) {
              for (std::size_t j = 0; j < n.window; ++j) {
                const std::size_t at = p * h * w + (oy * n.window + i) * w + ox * n.window + j;
                if (x[at] > x[best]) best = at;
              }
            }
            const std::size_t out = (p * oh + oy) * ow + ox;
            n.indices[out] = best;
            n.value[out] = x[best];
          }
        }
      }
      break;
    }
    case OpKind::relu:
      n.value = in(0);
      n.value.array() = n.value.array().max(Scalar(0));
      break;
    case OpKind::flatten:
      n.value = in(0).reshaped(n.shape);
      break;
    case OpKind::dropout: {
      n.value = in(0);
      n.mask.clear();
      if (training_ && n.factor > 0.0) {
        const double keep = 1.0 - n.factor;
        std::mt19937_64 rng(seed_ ^ (0x9E3779B97F4A7C15ULL * (id + 1)));
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        n.mask.resize(n.value.size());
        for (Scalar& m : n.mask) m = unit(rng) < keep ? static_cast<Scalar>(1.0 / keep) : Scalar(0);
        for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] *= n.mask[i];
      }
      break;
    }
    case OpKind::log_softmax: {
      const TensorT& x = in(0);
      n.value = TensorT(n.shape);
      const std::size_t cols = n.shape.back();
      const std::size_t rows = x.size() / cols;
      for (std::size_t r = 0; r < rows; ++r) {
        const Scalar* src = x.raw() + r * cols;
        Scalar* dst = n.value.raw() + r * cols;
        const double peak = *std::max_element(src, src + cols);
        double total = 0.0;
        for (std::size_t c = 0; c < cols; ++c) total += std::exp(static_cast<double>(src[c]) - peak);
        const double log_total = std::log(total) + peak;
        for (std::size_t c = 0; c < cols; ++c) dst[c] = static_cast<Scalar>(src[c] - log_total);
      }
      break;
    }
    case OpKind::cross_entropy: {
      const TensorT& lp = in(0);
      const TensorT& t = in(1);
      const std::size_t cols = lp.shape().back();
      const std::size_t rows = lp.size() / cols;
      double loss = 0.0;
      for (std::size_t r = 0; r < rows; ++r) {
        double mass = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
          const double target = t[r * cols + c];
          if (target < 0.0) {
            throw Error(Errc::not_normalized, describe(id) + ": negative target in row " + std::to_string(r));
          }
          mass += target;
          if (target != 0.0) loss -= target * lp[r * cols + c];
        }
        if (std::abs(mass - 1.0) > 1e-5) {
          throw Error(Errc::not_normalized,
                      describe(id) + ": target row " + std::to_string(r) + " sums to " + std::to_string(mass));
        }
      }
      n.value = TensorT::scalar(static_cast<Scalar>(loss / static_cast<double>(rows)));
      break;
    }
    case OpKind::sum:
      n.value = TensorT::scalar(static_cast<Scalar>(in(0).array().template cast<double>().sum()));
      break;
    case OpKind::scale:
      n.value = in(0);
      n.value.array() *= static_cast<Scalar>(n.factor);
      break;
  }
}

template <typename Scalar>
void Graph<Scalar>::accumulate(NodeId id, TensorT&& grad) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = std::move(grad);
    n.has_grad = true;
  } else {
    n.grad.array() += grad.array();
  }
}

template <typename Scalar>
std::vector<Tensor<Scalar>> Graph<Scalar>::grad_rule(NodeId id, const TensorT& g) {
  if (auto it = overrides_.find(nodes_[id].kind); it != overrides_.end()) return it->second(*this, id, g);
  Node& n = nodes_[id];
  auto in = [&](std::size_t i) -> const TensorT& { return nodes_[n.inputs[i]].value; };
  auto wants = [&](std::size_t i) { return nodes_[n.inputs[i]].requires_grad; };
  std::vector<TensorT> out(n.inputs.size());
  switch (n.kind) {
    case OpKind::leaf:
      break;
    case OpKind::add: {
      if (wants(0)) out[0] = g;
      if (wants(1)) {
        const TensorT& b = in(1);
        if (b.shape() == g.shape()) {
          out[1] = g;
        } else {
          auto [outer, inner] = broadcast_split(g.shape());
          const std::size_t ch = b.size();
          std::vector<double> acc(ch, 0.0);
          for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t c = 0; c < ch; ++c) {
              const Scalar* p = g.raw() + (o * ch + c) * inner;
              for (std::size_t i = 0; i < inner; ++i) acc[c] += p[i];
            }
          }
          out[1] = TensorT(b.shape(), std::vector<Scalar>(acc.begin(), acc.end()));
        }
      }
      break;
    }
    case OpKind::sub:
      if (wants(0)) out[0] = g;
      if (wants(1)) {
        out[1] = g;
        out[1].array() = -out[1].array();
      }
      break;
    case OpKind::mul:
      if (wants(0)) {
        out[0] = g;
        out[0].array() *= in(1).array();
      }
      if (wants(1)) {
        out[1] = g;
        out[1].array() *= in(0).array();
      }
      break;
    case OpKind::matmul: {
      const RowMatrix<double> gd = g.matrix().template cast<double>();
      if (wants(0)) {
        out[0] = TensorT(in(0).shape());
        out[0].matrix() = (gd * in(1).matrix().template cast<double>().transpose()).template cast<Scalar>();
      }
      if (wants(1)) {
        out[1] = TensorT(in(1).shape());
        out[1].matrix() = (in(0).matrix().template cast<double>().transpose() * gd).template cast<Scalar>();
      }
      break;
    }
    case OpKind::conv2d: {
      const TensorT& x = in(0);
      const TensorT& k = in(1);
      const ConvDims d = conv_dims(x.shape(), k.shape(), n.stride, n.padding);
      const std::size_t patch = d.c * d.kh * d.kw;
      const std::size_t spatial = d.oh * d.ow;
      RowMatrix<double> upstream(static_cast<Eigen::Index>(d.k), static_cast<Eigen::Index>(d.n * spatial));
      for (std::size_t b = 0; b < d.n; ++b) {
        for (std::size_t kk = 0; kk < d.k; ++kk) {
          const Scalar* src = g.raw() + (b * d.k + kk) * spatial;
          double* dst = upstream.data() + kk * d.n * spatial + b * spatial;
          for (std::size_t p = 0; p < spatial; ++p) dst[p] = src[p];
        }
      }
      if (wants(1)) {
        out[1] = TensorT(k.shape());
        const RowMatrix<double> dk = upstream * n.columns.transpose();
        for (std::size_t i = 0; i < out[1].size(); ++i) out[1][i] = static_cast<Scalar>(dk.data()[i]);
      }
      if (wants(0)) {
        const auto kmat = Eigen::Map<const RowMatrix<Scalar>>(k.raw(), static_cast<Eigen::Index>(d.k),
                                                              static_cast<Eigen::Index>(patch));
        const RowMatrix<double> dcols = kmat.template cast<double>().transpose() * upstream;
        std::vector<double> dx(x.size(), 0.0);
        const long pad = static_cast<long>(n.padding);
        for (std::size_t b = 0; b < d.n; ++b) {
          for (std::size_t c = 0; c < d.c; ++c) {
            double* plane = dx.data() + (b * d.c + c) * d.h * d.w;
            for (std::size_t i = 0; i < d.kh; ++i) {
              for (std::size_t j = 0; j < d.kw; ++j) {
                const Eigen::Index row = static_cast<Eigen::Index>((c * d.kh + i) * d.kw + j);
                for (std::size_t oy = 0; oy < d.oh; ++oy) {
                  const long y = static_cast<long>(oy * n.stride + i) - pad;
                  if (y < 0 || y >= static_cast<long>(d.h)) continue;
                  for (std::size_t ox = 0; ox < d.ow; ++ox) {
                    const long xx = static_cast<long>(ox * n.stride + j) - pad;
                    if (xx < 0 || xx >= static_cast<long>(d.w)) continue;
                    plane[static_cast<std::size_t>(y) * d.w + static_cast<std::size_t>(xx)] +=
                        dcols(row, static_cast<Eigen::Index>(b * spatial + oy * d.ow + ox));
                  }
                }
              }
            }
          }
        }
        out[0] = TensorT(x.shape(), std::vector<Scalar>(dx.begin(), dx.end()));
      }
      break;
    }
    case OpKind::maxpool2d:
      if (wants(0)) {
        out[0] = TensorT(in(0).shape());
        for (std::size_t i = 0; i < g.size(); ++i) out[0][n.indices[i]] += g[i];
      }
      break;
    case OpKind::relu:
      if (wants(0)) {
        out[0] = g;
        out[0].array() = (in(0).array() > Scalar(0)).select(g.array(), Scalar(0));
      }
      break;
    case OpKind::flatten:
      if (wants(0)) out[0] = g.reshaped(in(0).shape());
      break;
    case OpKind::dropout:
      if (wants(0)) {
        out[0] = g;
        if (!n.mask.empty()) {
          for (std::size_t i = 0; i < g.size(); ++i) out[0][i] *= n.mask[i];
        }
      }
      break;
    case OpKind::log_softmax:
      if (wants(0)) {
        out[0] = TensorT(g.shape());
        const std::size_t cols = n.shape.back();
        const std::size_t rows = g.size() / cols;
        for (std::size_t r = 0; r < rows; ++r) {
          double total = 0.0;
          for (std::size_t c = 0; c < cols; ++c) total += g[r * cols + c];
          for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t at = r * cols + c;
            out[0][at] = static_cast<Scalar>(g[at] - std::exp(static_cast<double>(n.value[at])) * total);
          }
        }
      }
      break;
    case OpKind::cross_entropy: {
      const std::size_t cols = in(0).shape().back();
      const double rows = static_cast<double>(in(0).size() / cols);
      const double upstream = static_cast<double>(g.item());
      if (wants(0)) {
        out[0] = in(1);
        out[0].array() *= static_cast<Scalar>(-upstream / rows);
      }
      if (wants(1)) {
        out[1] = in(0);
        out[1].array() *= static_cast<Scalar>(-upstream / rows);
      }
      break;
    }
    case OpKind::sum:
      if (wants(0)) out[0] = TensorT(in(0).shape(), g.item());
      break;
    case OpKind::scale:
      if (wants(0)) {
        out[0] = g;
        out[0].array() *= static_cast<Scalar>(n.factor);
      }
      break;
  }
  return out;
}

template <typename Scalar>
Gradients<Scalar> Graph<Scalar>::backward(NodeId output) {
  if (!forwarded_) throw Error(Errc::invalid_state, "backward() before forward()");
  if (backwarded_) throw Error(Errc::invalid_state, "backward() already ran; reset() before reuse");
  Node& out = node(output);
  if (out.value.size() != 1) {
    throw Error(Errc::shape_mismatch, "backward() needs a scalar output, got " + to_string(out.shape));
  }
  backwarded_ = true;
  accumulate(output, TensorT(out.shape, Scalar(1)));
  for (NodeId id = output + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.has_grad || !n.requires_grad || n.kind == OpKind::leaf) continue;
    std::vector<TensorT> grads = grad_rule(id, n.grad);
    for (std::size_t i = 0; i < n.inputs.size(); ++i) {
      const NodeId src = nodes_[id].inputs[i];
      if (!nodes_[src].requires_grad) continue;
      if (grads[i].shape() != nodes_[src].shape) {
        throw Error(Errc::shape_mismatch, describe(id) + " gradient rule returned " + to_string(grads[i].shape()) +
                                              " for input of shape " + to_string(nodes_[src].shape));
      }
      accumulate(src, std::move(grads[i]));
    }
  }
  Gradients<Scalar> result;
  for (Node& n : nodes_) {
    if (n.kind != OpKind::leaf || !n.requires_grad) continue;
    result.emplace(n.name, n.has_grad ? n.grad : TensorT(n.shape));
  }
  return result;
}

template class Graph<float>;
template class Graph<double>;

template <typename Scalar>
CheckReport gradient_check(Graph<Scalar>& graph, const Bindings<Scalar>& bindings, NodeId output, double tol,
                           double step) {
  graph.reset();
  graph.forward(bindings, output);
  const Gradients<Scalar> analytic = graph.backward(output);

  std::map<std::string, Tensor<Scalar>, std::less<>> probes;
  Bindings<Scalar> probe_bindings = bindings;
  for (const auto& [name, grad] : analytic) {
    probes.emplace(name, bindings.at(name).get());
  }
  for (auto& [name, tensor] : probes) probe_bindings.insert_or_assign(name, std::cref(tensor));

  auto evaluate = [&]() {
    graph.reset();
    return static_cast<double>(graph.forward(probe_bindings, output).item());
  };

  CheckReport report;
  for (auto& [name, tensor] : probes) {
    LeafCheck leaf{name};
    const Tensor<Scalar>& grad = analytic.at(name);
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const Scalar original = tensor[i];
      tensor[i] = static_cast<Scalar>(original + step);
      const double up = evaluate();
      tensor[i] = static_cast<Scalar>(original - step);
      const double down = evaluate();
      tensor[i] = original;
      const double numeric = (up - down) / (2.0 * step);
      const double exact = grad[i];
      const double abs_err = std::abs(exact - numeric);
      const double rel_err = abs_err / std::max({std::abs(exact), std::abs(numeric), 1.0});
      leaf.max_abs_error = std::max(leaf.max_abs_error, abs_err);
      leaf.max_rel_error = std::max(leaf.max_rel_error, rel_err);
    }
    report.max_rel_error = std::max(report.max_rel_error, leaf.max_rel_error);
    report.leaves.push_back(std::move(leaf));
  }
  graph.reset();
  report.passed = report.max_rel_error < tol;
  return report;
}

template CheckReport gradient_check(Graph<float>&, const Bindings<float>&, NodeId, double, double);
template CheckReport gradient_check(Graph<double>&, const Bindings<double>&, NodeId, double, double);

}  // namespace xlab
