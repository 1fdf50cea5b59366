#pragma once

// Finite-difference oracle for the reverse-mode engine. Shared by the unit
// tests, the acceptance suite and `beamsight selftest`. It only ever reads
// forward values; gradients it compares against come from Graph::backward.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "beamsight/graph.hpp"
#include "beamsight/random.hpp"
#include "beamsight/resnet.hpp"

namespace beamsight::testing {

/// Builds a graph from leaf values and returns the node to differentiate.
using GraphBuilder = std::function<NodeId(Graph<double>&, const std::vector<Tensor<double>>&, std::vector<NodeId>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Compares the analytic vector-Jacobian product of the built output against
/// central differences of <seed, output> for every leaf element (or a sampled
/// subset of at most `max_coords` per leaf).
inline GradCheckResult check_gradients(const GraphBuilder& build, std::vector<Tensor<double>> leaves,
                                       std::uint64_t seed, double h = 1e-5, std::size_t max_coords = 0) {
  Graph<double> g;
  std::vector<NodeId> leaf_ids;
  const NodeId out = build(g, leaves, leaf_ids);
  RandomStream rng = keyed_stream(seed, hash_label("gradcheck-seed"));
  Tensor<double> seed_vec(g.value(out).shape());
  for (auto& v : seed_vec.storage()) v = g.value(out).size() == 1 ? 1.0 : rng.uniform(-1.0, 1.0);
  const Gradients<double> grads = g.backward(out, seed_vec);

  auto objective = [&](const std::vector<Tensor<double>>& vals) {
    Graph<double> g2;
    std::vector<NodeId> ids;
    const NodeId o = build(g2, vals, ids);
    double s = 0.0;
    for (std::size_t i = 0; i < seed_vec.size(); ++i) s += seed_vec[i] * g2.value(o)[i];
    return s;
  };

  GradCheckResult result;
  RandomStream pick = keyed_stream(seed, hash_label("gradcheck-pick"));
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    if (!g.requires_grad(leaf_ids[li])) continue;
    const Tensor<double> analytic = grads.of(leaf_ids[li]);
    std::vector<std::size_t> coords(leaves[li].size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (max_coords && coords.size() > max_coords) {
      for (std::size_t i = 0; i < max_coords; ++i) std::swap(coords[i], coords[i + pick.below(coords.size() - i)]);
      coords.resize(max_coords);
    }
    for (std::size_t idx : coords) {
      auto plus = leaves, minus = leaves;
      plus[li][idx] += h;
      minus[li][idx] -= h;
      const double numeric = (objective(plus) - objective(minus)) / (2.0 * h);
      const double a = analytic[idx];
      result.max_rel_error = std::max(result.max_rel_error, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
      ++result.checked;
    }
  }
  return result;
}

inline Tensor<double> random_tensor(Shape shape, RandomStream& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

/// Values bounded away from zero, so ReLU kinks sit outside the difference stencil.
inline Tensor<double> away_from_zero(Shape shape, RandomStream& rng) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.storage()) {
    const double mag = rng.uniform(0.05, 1.0);
    v = rng.bernoulli(0.5) ? mag : -mag;
  }
  return t;
}

struct OpCheckSummary {
  OpKind kind;
  std::size_t instances = 0;
  std::size_t passed = 0;
  double worst = 0.0;
};

/// Runs `instances` randomized checks for one op kind.
inline OpCheckSummary check_op(OpKind kind, std::size_t instances, std::uint64_t seed, double tol = 1e-4) {
  OpCheckSummary summary{kind};
  for (std::size_t inst = 0; inst < instances; ++inst) {
    RandomStream rng = keyed_stream(seed, static_cast<std::uint64_t>(kind), inst);
    std::vector<Tensor<double>> leaves;
    GraphBuilder build;
    switch (kind) {
      case OpKind::leaf:
        return summary;
      case OpKind::conv2d: {
        const std::size_t n = 1 + rng.below(2), c = 1 + rng.below(3), o = 1 + rng.below(3);
        const std::size_t k = 1 + rng.below(3), stride = 1 + rng.below(2), pad = rng.below(2);
        const std::size_t h = k + 1 + rng.below(4), w = k + 1 + rng.below(4);
        leaves = {random_tensor({n, c, h, w}, rng), random_tensor({o, c, k, k}, rng)};
        build = [=](Graph<double>& g, const auto& v, auto& ids) {
          ids = {g.input(v[0], true), g.parameter(v[1])};
          return g.conv2d(ids[0], ids[1], {stride, pad});
        };
        break;
      }
      case OpKind::affine: {
        const std::size_t n = 1 + rng.below(3), f = 1 + rng.below(5), o = 1 + rng.below(4);
        leaves = {random_tensor({n, f}, rng), random_tensor({f, o}, rng), random_tensor({o}, rng)};
        build = [](Graph<double>& g, const auto& v, auto& ids) {
          ids = {g.input(v[0], true), g.parameter(v[1]), g.parameter(v[2])};
          return g.affine(ids[0], ids[1], ids[2]);
        };
        break;
      }
      case OpKind::batch_norm: {
        const bool rank4 = inst % 2 == 0;
        const Mode mode = inst % 4 < 2 ? Mode::train : Mode::eval;
        const std::size_t n = 2 + rng.below(2), c = 1 + rng.below(3);
        Shape xs = rank4 ? Shape{n, c, 1 + rng.below(3), 1 + rng.below(3)} : Shape{n + 1, c};
        leaves = {random_tensor(xs, rng), random_tensor({c}, rng, 0.5, 1.5), random_tensor({c}, rng)};
        BatchNormStats<double> stats(c);
        for (std::size_t i = 0; i < c; ++i) {
          stats.running_mean[i] = rng.uniform(-0.5, 0.5);
          stats.running_var[i] = rng.uniform(0.5, 2.0);
        }
        build = [=](Graph<double>& g, const auto& v, auto& ids) {
          BatchNormStats<double> local = stats;
          ids = {g.input(v[0], true), g.parameter(v[1]), g.parameter(v[2])};
          return g.batch_norm(ids[0], ids[1], ids[2], local, mode);
        };
        break;
      }
      case OpKind::relu: {
        leaves = {away_from_zero({1 + rng.below(3), 1 + rng.below(6)}, rng)};
        build = [](Graph<double>& g, const auto& v, auto& ids) {
          ids = {g.input(v[0], true)};
          return g.relu(ids[0]);
        };
        break;
      }
      case OpKind::max_pool2: {
        const std::size_t n = 1 + rng.below(2), c = 1 + rng.below(2);
        const std::size_t h = 2 + rng.below(4), w = 2 + rng.below(4);
        // Distinct values on a coarse lattice keep window maxima separated by far more than h.
        Tensor<double> x({n, c, h, w});
        std::vector<double> lattice(x.size());
        for (std::size_t i = 0; i < lattice.size(); ++i) lattice[i] = 0.01 * static_cast<double>(i);
        for (std::size_t i = lattice.size(); i > 1; --i) std::swap(lattice[i - 1], lattice[rng.below(i)]);
        x.storage().assign(lattice.begin(), lattice.end());
        leaves = {x};
        build = [](Graph<double>& g, const auto& v, auto& ids) {
          ids = {g.input(v[0], true)};
          return g.max_pool2(ids[0]);
        };
        break;
      }
      case OpKind::global_avg_pool: {
        leaves = {random_tensor({1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(4), 1 + rng.below(4)}, rng)};
        build = [](Graph<double>& g, const auto& v, auto& ids) {
          ids = {g.input(v[0], true)};
          return g.global_avg_pool(ids[0]);
        };
        break;
      }
      case OpKind::dropout: {
        const double p = rng.uniform(0.1, 0.7);
        const Mode mode = inst % 3 == 2 ? Mode::eval : Mode::train;
        const RandomStream mask_stream = rng.split("mask");
        leaves = {random_tensor({1 + rng.below(3), 1 + rng.below(8)}, rng)};
        build = [=](Graph<double>& g, const auto& v, auto& ids) {
          ids = {g.input(v[0], true)};
          return g.dropout(ids[0], p, mode, mask_stream);
        };
        break;
      }
      case OpKind::add: {
        const Shape s{1 + rng.below(3), 1 + rng.below(5)};
        leaves = {random_tensor(s, rng), random_tensor(s, rng)};
        build = [](Graph<double>& g, const auto& v, auto& ids) {
          ids = {g.input(v[0], true), g.input(v[1], true)};
          // fan-out: the first operand feeds both sides of the sum
          return g.add(g.add(ids[0], ids[1]), ids[0]);
        };
        break;
      }
      case OpKind::softmax_xent: {
        const std::size_t n = 1 + rng.below(4), k = 2 + rng.below(4);
        std::vector<int> labels(n);
        for (auto& l : labels) l = static_cast<int>(rng.below(k));
        leaves = {random_tensor({n, k}, rng, -3.0, 3.0)};
        build = [=](Graph<double>& g, const auto& v, auto& ids) {
          ids = {g.input(v[0], true)};
          return g.softmax_xent(ids[0], labels);
        };
        break;
      }
    }
    const GradCheckResult r = check_gradients(build, leaves, seed + inst);
    ++summary.instances;
    if (r.max_rel_error < tol) ++summary.passed;
    summary.worst = std::max(summary.worst, r.max_rel_error);
  }
  return summary;
}

inline const std::vector<OpKind>& differentiable_ops() {
  static const std::vector<OpKind> ops = {OpKind::conv2d,    OpKind::affine,          OpKind::batch_norm,
                                          OpKind::relu,      OpKind::max_pool2,       OpKind::global_avg_pool,
                                          OpKind::dropout,   OpKind::add,             OpKind::softmax_xent};
  return ops;
}

/// Whole-network check: a tiny residual classifier in train mode with dropout,
/// differentiated end to end through softmax cross-entropy. Checks a sample of
/// input and parameter coordinates.
inline GradCheckResult check_small_network(std::uint64_t seed, std::size_t coords_per_leaf = 6) {
  ModelConfig cfg;
  cfg.input_size = 16;
  cfg.stem_channels = 2;
  cfg.blocks_per_stage = {1, 1};
  cfg.num_classes = 3;
  cfg.dropout_p = 0.3;
  Model<double> model = build_model<double>(cfg, seed);
  RandomStream rng = keyed_stream(seed, hash_label("network"));
  std::vector<Tensor<double>> leaves{random_tensor({3, 1, 16, 16}, rng, 0.0, 1.0)};
  for (const auto& p : model.params()) leaves.push_back(p.value);
  const std::vector<int> labels{0, 2, 1};
  const RandomStream drop = rng.split("dropout");
  GraphBuilder build = [&](Graph<double>& g, const std::vector<Tensor<double>>& v, std::vector<NodeId>& ids) {
    Model<double> m = model;
    for (std::size_t i = 0; i < m.params().size(); ++i) m.params()[i].value = v[i + 1];
    ForwardOptions opt;
    opt.mode = Mode::train;
    opt.dropout_stream = drop;
    opt.input_grad = true;
    ForwardPass<double> pass = m.forward(g, v[0], opt);
    ids.clear();
    ids.push_back(pass.input);
    ids.insert(ids.end(), pass.params.begin(), pass.params.end());
    return g.softmax_xent(pass.logits, labels);
  };
  return check_gradients(build, leaves, seed, 1e-5, coords_per_leaf);
}

}  // namespace beamsight::testing
