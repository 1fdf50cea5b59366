#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "beamsight/error.hpp"
#include "beamsight/parallel.hpp"
#include "beamsight/random.hpp"
#include "beamsight/tensor.hpp"

namespace beamsight {

enum class OpKind {
  leaf,
  conv2d,
  affine,
  batch_norm,
  relu,
  max_pool2,
  global_avg_pool,
  dropout,
  add,
  softmax_xent,
};

inline const char* to_string(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::conv2d: return "conv2d";
    case OpKind::affine: return "affine";
    case OpKind::batch_norm: return "batch_norm";
    case OpKind::relu: return "relu";
    case OpKind::max_pool2: return "max_pool2";
    case OpKind::global_avg_pool: return "global_avg_pool";
    case OpKind::dropout: return "dropout";
    case OpKind::add: return "add";
    case OpKind::softmax_xent: return "softmax_xent";
  }
  return "unknown";
}

enum class Mode { train, eval };

using NodeId = std::size_t;

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

/// Running statistics owned by the model; train-mode batch_norm updates them in place.
template <typename T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;

  explicit BatchNormStats(std::size_t channels = 1)
      : running_mean(Shape{channels}, T{0}), running_var(Shape{channels}, T{1}) {}
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Result of a reverse sweep. Nodes the output does not depend on report zeros.
template <typename T>
class Gradients {
 public:
  Gradients(std::vector<std::optional<Tensor<T>>> grads, std::vector<Shape> shapes)
      : grads_(std::move(grads)), shapes_(std::move(shapes)) {}

  bool connected(NodeId id) const { return id < grads_.size() && grads_[id].has_value(); }

  Tensor<T> of(NodeId id) const {
    if (id >= shapes_.size()) fail(ErrorKind::ShapeMismatch, "unknown node " + std::to_string(id));
    if (grads_[id]) return *grads_[id];
    return Tensor<T>(shapes_[id]);
  }

  const Tensor<T>* find(NodeId id) const { return connected(id) ? &*grads_[id] : nullptr; }

 private:
  std::vector<std::optional<Tensor<T>>> grads_;
  std::vector<Shape> shapes_;
};

/// Append-only record of forward operations with reverse-mode differentiation.
/// Nodes are stored in creation order, which is a valid topological order.
template <typename T>
class Graph {
 public:
  using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  NodeId leaf(Tensor<T> value, bool requires_grad) {
    check_finite(value, OpKind::leaf);
    Node node;
    node.kind = OpKind::leaf;
    node.requires_grad = requires_grad;
    node.value = std::move(value);
    return push(std::move(node));
  }
  NodeId input(Tensor<T> value, bool requires_grad = false) { return leaf(std::move(value), requires_grad); }
  NodeId parameter(Tensor<T> value, bool trainable = true) { return leaf(std::move(value), trainable); }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Tensor<T>& value(NodeId id) const { return node(id).value; }
  OpKind kind(NodeId id) const { return node(id).kind; }
  const std::vector<NodeId>& inputs(NodeId id) const { return node(id).inputs; }
  bool requires_grad(NodeId id) const { return node(id).requires_grad; }

  // x: N×C×H×W, w: O×C×KH×KW. Zero padding, no bias.
  NodeId conv2d(NodeId x_id, NodeId w_id, Conv2dParams params = {}) {
    const Tensor<T>& x = value(x_id);
    const Tensor<T>& w = value(w_id);
    if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1) || params.stride < 1)
      fail(ErrorKind::ShapeMismatch,
           "conv2d expects NCHW input and OIHW kernel with matching channels, got " + shape_string(x.shape()) +
               " and " + shape_string(w.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (h + 2 * params.pad < kh || wd + 2 * params.pad < kw)
      fail(ErrorKind::ShapeMismatch, "conv2d kernel larger than padded input");
    const std::size_t ho = (h + 2 * params.pad - kh) / params.stride + 1;
    const std::size_t wo = (wd + 2 * params.pad - kw) / params.stride + 1;
    const std::size_t plane = ho * wo;
    const std::size_t k = c * kh * kw;

    Node out;
    out.kind = OpKind::conv2d;
    out.inputs = {x_id, w_id};
    out.conv = params;
    out.value = Tensor<T>(Shape{n, o, ho, wo}, uninitialized);
    // Per-sample column buffers; one GEMM per sample keeps every output row
    // independent of its position in the batch. Columns are retained only when
    // the kernel gradient will be needed.
    const bool keep_cols = value_requires_grad(w_id);
    if (keep_cols) out.saved = Tensor<T>(Shape{n, k, plane}, uninitialized);
    const T* xs = x.data();
    const ConstMatrixMap wmat(w.data(), o, k);
    parallel_for(0, n, [&](std::size_t b) {
      thread_local std::vector<T> scratch;
      T* col;
      if (keep_cols) {
        col = out.saved.data() + b * k * plane;
      } else {
        if (scratch.size() < k * plane) scratch.resize(k * plane);
        col = scratch.data();
      }
      im2col(xs + b * c * h * wd, c, h, wd, kh, kw, params, ho, wo, col);
      MatrixMap(out.value.data() + b * o * plane, o, plane).noalias() = wmat * ConstMatrixMap(col, k, plane);
    });
    return finish(std::move(out));
  }

  // x: N×F, w: F×O, b: O.
  NodeId affine(NodeId x_id, NodeId w_id, NodeId b_id) {
    const Tensor<T>& x = value(x_id);
    const Tensor<T>& w = value(w_id);
    const Tensor<T>& b = value(b_id);
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0) || b.size() != w.dim(1))
      fail(ErrorKind::ShapeMismatch, "affine expects N×F input, F×O weight, O bias, got " +
                                         shape_string(x.shape()) + ", " + shape_string(w.shape()) + ", " +
                                         shape_string(b.shape()));
    const std::size_t n = x.dim(0), f = x.dim(1), o = w.dim(1);
    Node out;
    out.kind = OpKind::affine;
    out.inputs = {x_id, w_id, b_id};
    out.value = Tensor<T>(Shape{n, o});
    const ConstMatrixMap wmat(w.data(), f, o);
    for (std::size_t i = 0; i < n; ++i) {
      MatrixMap y(out.value.data() + i * o, 1, o);
      y.noalias() = ConstMatrixMap(x.data() + i * f, 1, f) * wmat;
      for (std::size_t j = 0; j < o; ++j) y(0, j) += b[j];
    }
    return finish(std::move(out));
  }

  // Per-channel normalization of N×C×H×W or N×F input.
  NodeId batch_norm(NodeId x_id, NodeId gamma_id, NodeId beta_id, BatchNormStats<T>& stats, Mode mode) {
    const Tensor<T>& x = value(x_id);
    const Tensor<T>& gamma = value(gamma_id);
    const Tensor<T>& beta = value(beta_id);
    if (x.rank() != 4 && x.rank() != 2)
      fail(ErrorKind::ShapeMismatch, "batch_norm expects rank 2 or 4 input, got " + shape_string(x.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1);
    const std::size_t plane = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
    if (gamma.size() != c || beta.size() != c || stats.running_mean.size() != c || stats.running_var.size() != c)
      fail(ErrorKind::ShapeMismatch, "batch_norm parameter extent does not match channel count");
    const std::size_t count = n * plane;

    Node out;
    out.kind = OpKind::batch_norm;
    out.inputs = {x_id, gamma_id, beta_id};
    out.mode = mode;
    // The normalized input is only needed for the scale gradient or the train-mode input gradient.
    const bool keep_xhat = mode == Mode::train || nodes_[gamma_id].requires_grad;
    out.value = Tensor<T>(x.shape(), uninitialized);
    if (keep_xhat) out.saved = Tensor<T>(x.shape(), uninitialized);
    out.saved2 = Tensor<T>(Shape{c});   // inverse standard deviation
    const T* xs = x.data();
    T* xhat = keep_xhat ? out.saved.data() : nullptr;
    T* ys = out.value.data();
    parallel_for(0, c, [&](std::size_t ch) {
      T mean, invstd;
      if (mode == Mode::train) {
        double sum = 0.0;
        for (std::size_t b = 0; b < n; ++b) {
          const T* p = xs + (b * c + ch) * plane;
          for (std::size_t i = 0; i < plane; ++i) sum += p[i];
        }
        const double m = sum / static_cast<double>(count);
        double sq = 0.0;
        for (std::size_t b = 0; b < n; ++b) {
          const T* p = xs + (b * c + ch) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            const double d = p[i] - m;
            sq += d * d;
          }
        }
        const double var = sq / static_cast<double>(count);
        mean = static_cast<T>(m);
        invstd = static_cast<T>(1.0 / std::sqrt(var + kBatchNormEps));
        const double unbiased = count > 1 ? var * static_cast<double>(count) / static_cast<double>(count - 1) : var;
        stats.running_mean[ch] =
            static_cast<T>((1.0 - kBatchNormMomentum) * stats.running_mean[ch] + kBatchNormMomentum * m);
        stats.running_var[ch] =
            static_cast<T>((1.0 - kBatchNormMomentum) * stats.running_var[ch] + kBatchNormMomentum * unbiased);
      } else {
        mean = stats.running_mean[ch];
        invstd = static_cast<T>(1.0 / std::sqrt(static_cast<double>(stats.running_var[ch]) + kBatchNormEps));
      }
      out.saved2[ch] = invstd;
      const T g = gamma[ch], bt = beta[ch];
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t off = (b * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const T xn = (xs[off + i] - mean) * invstd;
          if (xhat) xhat[off + i] = xn;
          ys[off + i] = g * xn + bt;
        }
      }
    });
    return finish(std::move(out));
  }

  NodeId relu(NodeId x_id) {
    const Tensor<T>& x = value(x_id);
    Node out;
    out.kind = OpKind::relu;
    out.inputs = {x_id};
    out.value = Tensor<T>(x.shape(), uninitialized);
    const T* xs = x.data();
    T* ys = out.value.data();
    for (std::size_t i = 0; i < x.size(); ++i) ys[i] = xs[i] > T{0} ? xs[i] : T{0};
    return finish(std::move(out));
  }

  // 2×2 window, stride 2; an odd trailing row/column is dropped.
  NodeId max_pool2(NodeId x_id) {
    const Tensor<T>& x = value(x_id);
    if (x.rank() != 4 || x.dim(2) < 2 || x.dim(3) < 2)
      fail(ErrorKind::ShapeMismatch, "max_pool2 expects NCHW input with H, W >= 2, got " + shape_string(x.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t ho = h / 2, wo = w / 2;
    Node out;
    out.kind = OpKind::max_pool2;
    out.inputs = {x_id};
    out.value = Tensor<T>(Shape{n, c, ho, wo}, uninitialized);
    out.indices.resize(out.value.size());
    const T* xs = x.data();
    T* ys = out.value.data();
    parallel_for(0, n * c, [&](std::size_t nc) {
      const std::size_t in_off = nc * h * w;
      const std::size_t out_off = nc * ho * wo;
      for (std::size_t oh = 0; oh < ho; ++oh)
        for (std::size_t ow = 0; ow < wo; ++ow) {
          std::size_t best = in_off + (2 * oh) * w + 2 * ow;
          for (std::size_t di = 0; di < 2; ++di)
            for (std::size_t dj = 0; dj < 2; ++dj) {
              const std::size_t idx = in_off + (2 * oh + di) * w + 2 * ow + dj;
              if (xs[idx] > xs[best]) best = idx;
            }
          ys[out_off + oh * wo + ow] = xs[best];
          out.indices[out_off + oh * wo + ow] = static_cast<std::uint32_t>(best);
        }
    }, 8);
    return finish(std::move(out));
  }

  // N×C×H×W -> N×C
  NodeId global_avg_pool(NodeId x_id) {
    const Tensor<T>& x = value(x_id);
    if (x.rank() != 4) fail(ErrorKind::ShapeMismatch, "global_avg_pool expects NCHW input");
    const std::size_t nc = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
    Node out;
    out.kind = OpKind::global_avg_pool;
    out.inputs = {x_id};
    out.value = Tensor<T>(Shape{x.dim(0), x.dim(1)});
    for (std::size_t i = 0; i < nc; ++i) {
      double sum = 0.0;
      for (std::size_t p = 0; p < plane; ++p) sum += x[i * plane + p];
      out.value[i] = static_cast<T>(sum / static_cast<double>(plane));
    }
    return finish(std::move(out));
  }

  /// Inverted dropout: elements survive with probability 1 - drop_p and are
  /// scaled by 1 / (1 - drop_p). Identity in eval mode.
  NodeId dropout(NodeId x_id, double drop_p, Mode mode, RandomStream stream) {
    if (!(drop_p >= 0.0 && drop_p < 1.0)) fail(ErrorKind::InvalidConfig, "dropout probability must lie in [0, 1)");
    const Tensor<T>& x = value(x_id);
    Node out;
    out.kind = OpKind::dropout;
    out.inputs = {x_id};
    out.mode = mode;
    out.value = x;
    if (mode == Mode::train && drop_p > 0.0) {
      const double keep = 1.0 - drop_p;
      const T scale = static_cast<T>(1.0 / keep);
      out.saved = Tensor<T>(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) {
        const T m = stream.uniform() < keep ? scale : T{0};
        out.saved[i] = m;
        out.value[i] = x[i] * m;
      }
    }
    return finish(std::move(out));
  }

  NodeId add(NodeId a_id, NodeId b_id) {
    const Tensor<T>& a = value(a_id);
    const Tensor<T>& b = value(b_id);
    a.require_same_shape(b, "add");
    Node out;
    out.kind = OpKind::add;
    out.inputs = {a_id, b_id};
    out.value = Tensor<T>(a.shape(), uninitialized);
    for (std::size_t i = 0; i < a.size(); ++i) out.value[i] = a[i] + b[i];
    return finish(std::move(out));
  }

  /// Mean softmax cross-entropy over the rows of an N×K logit matrix. Output shape [1].
  NodeId softmax_xent(NodeId logits_id, std::vector<int> labels) {
    const Tensor<T>& z = value(logits_id);
    if (z.rank() != 2 || labels.size() != z.dim(0))
      fail(ErrorKind::ShapeMismatch, "softmax_xent expects N×K logits and N labels");
    const std::size_t n = z.dim(0), k = z.dim(1);
    for (int l : labels)
      if (l < 0 || static_cast<std::size_t>(l) >= k)
        fail(ErrorKind::ShapeMismatch, "label " + std::to_string(l) + " outside " + std::to_string(k) + " classes");
    Node out;
    out.kind = OpKind::softmax_xent;
    out.inputs = {logits_id};
    out.saved = Tensor<T>(z.shape());
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const T* row = z.data() + i * k;
      const T mx = *std::max_element(row, row + k);
      double denom = 0.0;
      for (std::size_t j = 0; j < k; ++j) denom += std::exp(static_cast<double>(row[j] - mx));
      for (std::size_t j = 0; j < k; ++j)
        out.saved[i * k + j] = static_cast<T>(std::exp(static_cast<double>(row[j] - mx)) / denom);
      loss += std::log(denom) - static_cast<double>(row[labels[i]] - mx);
    }
    out.labels = std::move(labels);
    out.value = Tensor<T>(Shape{1}, static_cast<T>(loss / static_cast<double>(n)));
    return finish(std::move(out));
  }

  /// Softmax probabilities saved by a softmax_xent node.
  const Tensor<T>& probabilities(NodeId xent_id) const {
    const Node& nd = node(xent_id);
    if (nd.kind != OpKind::softmax_xent) fail(ErrorKind::ShapeMismatch, "node is not softmax_xent");
    return nd.saved;
  }

  /// Gradient of a single-element output with respect to every node.
  Gradients<T> backward(NodeId output) const {
    const Tensor<T>& v = value(output);
    if (v.size() != 1) fail(ErrorKind::NotScalar, "backward requires a single-element output, got " + shape_string(v.shape()));
    return backward(output, Tensor<T>(v.shape(), T{1}));
  }

  /// Vector-Jacobian product: propagates `seed` (shaped like the output) backwards.
  Gradients<T> backward(NodeId output, const Tensor<T>& seed) const {
    node(output).value.require_same_shape(seed, "backward seed");
    std::vector<std::optional<Tensor<T>>> grads(nodes_.size());
    if (node(output).requires_grad) grads[output] = seed;
    for (std::size_t id = output + 1; id-- > 0;) {
      const Node& nd = nodes_[id];
      if (!grads[id] || nd.kind == OpKind::leaf) continue;
      backward_node(nd, *grads[id], grads);
      // interior gradients are released once consumed; leaves and the output keep theirs
      if (id != output) grads[id].reset();
    }
    std::vector<Shape> shapes;
    shapes.reserve(nodes_.size());
    for (const Node& nd : nodes_) shapes.push_back(nd.value.shape());
    return Gradients<T>(std::move(grads), std::move(shapes));
  }

 private:
  struct Node {
    OpKind kind = OpKind::leaf;
    std::vector<NodeId> inputs;
    Tensor<T> value;
    bool requires_grad = false;
    Tensor<T> saved;
    Tensor<T> saved2;
    std::vector<std::uint32_t> indices;
    std::vector<int> labels;
    Conv2dParams conv;
    Mode mode = Mode::eval;
  };

  const Node& node(NodeId id) const {
    if (id >= nodes_.size()) fail(ErrorKind::ShapeMismatch, "unknown node " + std::to_string(id));
    return nodes_[id];
  }

  NodeId push(Node node) {
    nodes_.push_back(std::move(node));
    return nodes_.size() - 1;
  }

  static void check_finite(const Tensor<T>& t, OpKind kind) {
    if (!t.all_finite()) fail(ErrorKind::NonFinite, std::string("non-finite value produced by ") + to_string(kind));
  }

  NodeId finish(Node node) {
    check_finite(node.value, node.kind);
    node.requires_grad = std::any_of(node.inputs.begin(), node.inputs.end(),
                                     [&](NodeId i) { return nodes_[i].requires_grad; });
    return push(std::move(node));
  }

  void accumulate(std::vector<std::optional<Tensor<T>>>& grads, NodeId id, Tensor<T>&& g) const {
    if (!nodes_[id].requires_grad) return;
    if (grads[id])
      *grads[id] += g;
    else
      grads[id] = std::move(g);
  }

  bool wants(NodeId id) const { return nodes_[id].requires_grad; }
  bool value_requires_grad(NodeId id) const { return nodes_[id].requires_grad; }

  void backward_node(const Node& nd, const Tensor<T>& gy, std::vector<std::optional<Tensor<T>>>& grads) const {
    switch (nd.kind) {
      case OpKind::leaf: return;
      case OpKind::conv2d: return backward_conv(nd, gy, grads);
      case OpKind::affine: {
        const Tensor<T>& x = value(nd.inputs[0]);
        const Tensor<T>& w = value(nd.inputs[1]);
        const std::size_t n = x.dim(0), f = x.dim(1), o = w.dim(1);
        ConstMatrixMap dy(gy.data(), n, o);
        if (wants(nd.inputs[0])) {
          Tensor<T> gx(x.shape());
          const ConstMatrixMap wmat(w.data(), f, o);
          for (std::size_t i = 0; i < n; ++i)
            MatrixMap(gx.data() + i * f, 1, f).noalias() = ConstMatrixMap(gy.data() + i * o, 1, o) * wmat.transpose();
          accumulate(grads, nd.inputs[0], std::move(gx));
        }
        if (wants(nd.inputs[1])) {
          Tensor<T> gw(w.shape());
          MatrixMap(gw.data(), f, o).noalias() = ConstMatrixMap(x.data(), n, f).transpose() * dy;
          accumulate(grads, nd.inputs[1], std::move(gw));
        }
        if (wants(nd.inputs[2])) {
          Tensor<T> gb(value(nd.inputs[2]).shape());
          for (std::size_t j = 0; j < o; ++j) {
            T s{0};
            for (std::size_t i = 0; i < n; ++i) s += dy(i, j);
            gb[j] = s;
          }
          accumulate(grads, nd.inputs[2], std::move(gb));
        }
        return;
      }
      case OpKind::batch_norm: return backward_batch_norm(nd, gy, grads);
      case OpKind::relu: {
        if (!wants(nd.inputs[0])) return;
        Tensor<T> gx(gy.shape());
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] = nd.value[i] > T{0} ? gy[i] : T{0};
        accumulate(grads, nd.inputs[0], std::move(gx));
        return;
      }
      case OpKind::max_pool2: {
        if (!wants(nd.inputs[0])) return;
        Tensor<T> gx(value(nd.inputs[0]).shape());
        for (std::size_t i = 0; i < gy.size(); ++i) gx[nd.indices[i]] += gy[i];
        accumulate(grads, nd.inputs[0], std::move(gx));
        return;
      }
      case OpKind::global_avg_pool: {
        if (!wants(nd.inputs[0])) return;
        const Tensor<T>& x = value(nd.inputs[0]);
        const std::size_t plane = x.dim(2) * x.dim(3);
        Tensor<T> gx(x.shape());
        const T inv = T{1} / static_cast<T>(plane);
        for (std::size_t i = 0; i < gy.size(); ++i)
          std::fill_n(gx.data() + i * plane, plane, gy[i] * inv);
        accumulate(grads, nd.inputs[0], std::move(gx));
        return;
      }
      case OpKind::dropout: {
        if (!wants(nd.inputs[0])) return;
        Tensor<T> gx = gy;
        if (!nd.saved.empty())
          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= nd.saved[i];
        accumulate(grads, nd.inputs[0], std::move(gx));
        return;
      }
      case OpKind::add: {
        if (wants(nd.inputs[0])) accumulate(grads, nd.inputs[0], Tensor<T>(gy));
        if (wants(nd.inputs[1])) accumulate(grads, nd.inputs[1], Tensor<T>(gy));
        return;
      }
      case OpKind::softmax_xent: {
        if (!wants(nd.inputs[0])) return;
        const std::size_t n = nd.saved.dim(0), k = nd.saved.dim(1);
        Tensor<T> gz = nd.saved;
        const T scale = gy[0] / static_cast<T>(n);
        for (std::size_t i = 0; i < n; ++i) {
          gz[i * k + static_cast<std::size_t>(nd.labels[i])] -= T{1};
          for (std::size_t j = 0; j < k; ++j) gz[i * k + j] *= scale;
        }
        accumulate(grads, nd.inputs[0], std::move(gz));
        return;
      }
    }
  }

  void backward_conv(const Node& nd, const Tensor<T>& gy, std::vector<std::optional<Tensor<T>>>& grads) const {
    const Tensor<T>& x = value(nd.inputs[0]);
    const Tensor<T>& w = value(nd.inputs[1]);
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const std::size_t ho = gy.dim(2), wo = gy.dim(3), plane = ho * wo;
    const std::size_t k = c * kh * kw;
    const bool want_x = wants(nd.inputs[0]);
    const bool want_w = wants(nd.inputs[1]);
    if (!want_x && !want_w) return;

    const ConstMatrixMap wmat(w.data(), o, k);
    std::vector<RowMatrix> partial_w(want_w ? n : 0);
    Tensor<T> gx(want_x ? x.shape() : Shape{1});
    parallel_for(0, n, [&](std::size_t b) {
      const ConstMatrixMap dy(gy.data() + b * o * plane, o, plane);
      const ConstMatrixMap col(nd.saved.data() + b * k * plane, k, plane);
      if (want_w) partial_w[b].noalias() = dy * col.transpose();
      if (want_x) {
        RowMatrix dcol(k, plane);
        dcol.noalias() = wmat.transpose() * dy;
        col2im(dcol.data(), c, h, wd, kh, kw, nd.conv, ho, wo, gx.data() + b * c * h * wd);
      }
    });
    if (want_w) {
      Tensor<T> gw(w.shape());
      MatrixMap acc(gw.data(), o, k);
      for (std::size_t b = 0; b < n; ++b) acc += partial_w[b];  // fixed reduction order
      accumulate(grads, nd.inputs[1], std::move(gw));
    }
    if (want_x) accumulate(grads, nd.inputs[0], std::move(gx));
  }

  static void im2col(const T* x, std::size_t c, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
                     Conv2dParams p, std::size_t ho, std::size_t wo, T* col) {
    const std::size_t plane = ho * wo;
    const auto pad = static_cast<std::ptrdiff_t>(p.pad);
    const auto stride = static_cast<std::ptrdiff_t>(p.stride);
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t ki = 0; ki < kh; ++ki)
        for (std::size_t kj = 0; kj < kw; ++kj) {
          T* row = col + ((ci * kh + ki) * kw + kj) * plane;
          const T* src = x + ci * h * w;
          // output columns whose input column lies inside the image
          const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kj) - pad;
          std::ptrdiff_t lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
          std::ptrdiff_t hi = (static_cast<std::ptrdiff_t>(w) - 1 - off) / stride + 1;
          lo = std::min<std::ptrdiff_t>(lo, static_cast<std::ptrdiff_t>(wo));
          hi = std::clamp<std::ptrdiff_t>(hi, lo, static_cast<std::ptrdiff_t>(wo));
          for (std::size_t oh = 0; oh < ho; ++oh) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh) * stride + static_cast<std::ptrdiff_t>(ki) - pad;
            T* dst = row + oh * wo;
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) {
              std::fill(dst, dst + wo, T{0});
              continue;
            }
            const T* line = src + ih * static_cast<std::ptrdiff_t>(w) + off;
            std::fill(dst, dst + lo, T{0});
            if (stride == 1) {
              std::copy(line + lo, line + hi, dst + lo);
            } else {
              for (std::ptrdiff_t ow = lo; ow < hi; ++ow) dst[ow] = line[ow * stride];
            }
            std::fill(dst + hi, dst + wo, T{0});
          }
        }
  }

  static void col2im(const T* col, std::size_t c, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
                     Conv2dParams p, std::size_t ho, std::size_t wo, T* dx) {
    const std::size_t plane = ho * wo;
    const auto pad = static_cast<std::ptrdiff_t>(p.pad);
    const auto stride = static_cast<std::ptrdiff_t>(p.stride);
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t ki = 0; ki < kh; ++ki)
        for (std::size_t kj = 0; kj < kw; ++kj) {
          const T* row = col + ((ci * kh + ki) * kw + kj) * plane;
          T* dst = dx + ci * h * w;
          const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kj) - pad;
          std::ptrdiff_t lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
          std::ptrdiff_t hi = (static_cast<std::ptrdiff_t>(w) - 1 - off) / stride + 1;
          lo = std::min<std::ptrdiff_t>(lo, static_cast<std::ptrdiff_t>(wo));
          hi = std::clamp<std::ptrdiff_t>(hi, lo, static_cast<std::ptrdiff_t>(wo));
          for (std::size_t oh = 0; oh < ho; ++oh) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh) * stride + static_cast<std::ptrdiff_t>(ki) - pad;
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
            T* line = dst + ih * static_cast<std::ptrdiff_t>(w) + off;
            const T* src = row + oh * wo;
            if (stride == 1) {
              for (std::ptrdiff_t ow = lo; ow < hi; ++ow) line[ow] += src[ow];
            } else {
              for (std::ptrdiff_t ow = lo; ow < hi; ++ow) line[ow * stride] += src[ow];
            }
          }
        }
  }

  void backward_batch_norm(const Node& nd, const Tensor<T>& gy,
                           std::vector<std::optional<Tensor<T>>>& grads) const {
    const Tensor<T>& x = value(nd.inputs[0]);
    const Tensor<T>& gamma = value(nd.inputs[1]);
    const std::size_t n = x.dim(0), c = x.dim(1);
    const std::size_t plane = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
    const double count = static_cast<double>(n * plane);
    const bool want_x = wants(nd.inputs[0]);
    const bool want_sums = nd.mode == Mode::train || wants(nd.inputs[1]) || wants(nd.inputs[2]);
    const T* xhat = nd.saved.shape() == x.shape() ? nd.saved.data() : nullptr;
    Tensor<T> gx(want_x ? x.shape() : Shape{1}, uninitialized);
    Tensor<T> gg(Shape{c}), gb(Shape{c});
    parallel_for(0, c, [&](std::size_t ch) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::size_t b = 0; b < n && want_sums; ++b) {
        const std::size_t off = (b * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          sum_dy += gy[off + i];
          if (xhat) sum_dy_xhat += static_cast<double>(gy[off + i]) * xhat[off + i];
        }
      }
      gg[ch] = static_cast<T>(sum_dy_xhat);
      gb[ch] = static_cast<T>(sum_dy);
      if (!want_x) return;
      const double g = gamma[ch];
      const double invstd = nd.saved2[ch];
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t off = (b * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          if (nd.mode == Mode::train) {
            const double dxhat = g * gy[off + i];
            gx[off + i] = static_cast<T>(invstd / count *
                                         (count * dxhat - g * sum_dy - xhat[off + i] * g * sum_dy_xhat));
          } else {
            gx[off + i] = static_cast<T>(g * invstd * gy[off + i]);
          }
        }
      }
    });
    if (want_x) accumulate(grads, nd.inputs[0], std::move(gx));
    if (want_sums) {
      accumulate(grads, nd.inputs[1], std::move(gg));
      accumulate(grads, nd.inputs[2], std::move(gb));
    }
  }

  std::deque<Node> nodes_;  // stable references across appends
};

/// Row-wise softmax of an N×K matrix.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  if (logits.rank() != 2) fail(ErrorKind::ShapeMismatch, "softmax_rows expects a matrix");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  Tensor<T> out(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits.data() + i * k;
    const T mx = *std::max_element(row, row + k);
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(static_cast<double>(row[j] - mx));
    for (std::size_t j = 0; j < k; ++j)
      out[i * k + j] = static_cast<T>(std::exp(static_cast<double>(row[j] - mx)) / denom);
  }
  return out;
}

}  // namespace beamsight
