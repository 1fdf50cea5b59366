#pragma once

#include <cmath>
#include <cstddef>
#include <cstring>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "beamsight/error.hpp"
#include "beamsight/graph.hpp"
#include "beamsight/random.hpp"
#include "beamsight/tensor.hpp"

namespace beamsight {

/// Residual classifier shape. Stem: 3×3 stride-2 conv, batch norm, ReLU, 2×2
/// max pool. Each stage doubles the channel count and halves the resolution;
/// its first block carries a 1×1 stride-2 projection shortcut.
struct ModelConfig {
  std::size_t input_channels = 1;
  std::size_t input_size = 224;
  std::size_t stem_channels = 16;
  std::vector<std::size_t> blocks_per_stage = {2, 2, 2};
  std::size_t num_classes = 2;
  double dropout_p = 0.5;

  std::size_t head_features() const { return stem_channels << blocks_per_stage.size(); }
  /// Total downsampling between input and the pooled feature map.
  std::size_t reduction() const { return std::size_t{4} << blocks_per_stage.size(); }
  std::size_t feature_map_size() const { return input_size / reduction(); }

  void validate() const {
    auto bad = [](const std::string& what) { fail(ErrorKind::InvalidConfig, what); };
    if (input_channels < 1) bad("input_channels must be positive");
    if (stem_channels < 1) bad("stem_channels must be positive");
    if (blocks_per_stage.empty()) bad("at least one stage is required");
    for (std::size_t b : blocks_per_stage)
      if (b < 1) bad("every stage needs at least one block");
    if (num_classes < 2) bad("num_classes must be at least 2");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) bad("dropout_p must lie in [0, 1)");
    if (input_size < reduction() || input_size % reduction() != 0)
      bad("input_size must be a positive multiple of " + std::to_string(reduction()));
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"input_channels", c.input_channels}, {"input_size", c.input_size},
                     {"stem_channels", c.stem_channels},   {"blocks_per_stage", c.blocks_per_stage},
                     {"num_classes", c.num_classes},       {"dropout_p", c.dropout_p}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.input_channels = j.value("input_channels", d.input_channels);
  c.input_size = j.value("input_size", d.input_size);
  c.stem_channels = j.value("stem_channels", d.stem_channels);
  c.blocks_per_stage = j.value("blocks_per_stage", d.blocks_per_stage);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.dropout_p = j.value("dropout_p", d.dropout_p);
}

enum class FreezePolicy { head_only, none };

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool frozen = false;
};

template <typename T>
struct NamedBatchNorm {
  std::string name;
  BatchNormStats<T> stats;
};

struct ForwardOptions {
  Mode mode = Mode::eval;
  RandomStream dropout_stream{};
  bool param_grads = true;
  /// Input node requires a gradient (attribution).
  bool input_grad = false;
};

template <typename T>
struct ForwardPass {
  NodeId input = 0;
  NodeId features = 0;
  NodeId logits = 0;
  /// Graph node for every parameter, in manifest order.
  std::vector<NodeId> params;
};

template <typename T>
class Model {
 public:
  /// Parameters shaped for `config`, all zero; batch-norm scales are 1.
  static Model zeros(const ModelConfig& config) {
    config.validate();
    Model m;
    m.config_ = config;
    m.layout();
    return m;
  }

  const ModelConfig& config() const noexcept { return config_; }
  Mode mode() const noexcept { return mode_; }
  void set_mode(Mode mode) noexcept { mode_ = mode; }

  std::vector<Parameter<T>>& params() noexcept { return params_; }
  const std::vector<Parameter<T>>& params() const noexcept { return params_; }
  std::vector<NamedBatchNorm<T>>& batch_norms() noexcept { return bns_; }
  const std::vector<NamedBatchNorm<T>>& batch_norms() const noexcept { return bns_; }

  const Parameter<T>& param(const std::string& name) const { return params_.at(index_of(name)); }
  Parameter<T>& param(const std::string& name) { return params_.at(index_of(name)); }

  static bool is_head(const std::string& name) { return name.rfind("head.", 0) == 0; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }
  std::size_t trainable_parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (!p.frozen) n += p.value.size();
    return n;
  }

  void apply_freeze_policy(FreezePolicy policy) {
    for (auto& p : params_) p.frozen = policy == FreezePolicy::head_only && !is_head(p.name);
  }

  /// Replaces the classification head with a freshly initialized one.
  void reset_head(std::size_t num_classes, std::uint64_t seed) {
    ModelConfig c = config_;
    c.num_classes = num_classes;
    c.validate();
    config_ = c;
    const std::size_t d = config_.head_features();
    const RandomStream root = keyed_stream(seed, hash_label("head"));
    for (auto& p : params_) {
      if (p.name == "head.weight") p.value = he_normal(Shape{d, num_classes}, d, root.split("weight"));
      if (p.name == "head.bias") p.value = Tensor<T>(Shape{num_classes});
      if (is_head(p.name)) p.frozen = false;
    }
  }

  template <typename U>
  Model<U> cast() const {
    Model<U> out = Model<U>::zeros(config_);
    out.set_mode(mode_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      out.params()[i].value = params_[i].value.template cast<U>();
      out.params()[i].frozen = params_[i].frozen;
    }
    for (std::size_t i = 0; i < bns_.size(); ++i) {
      out.batch_norms()[i].stats.running_mean = bns_[i].stats.running_mean.template cast<U>();
      out.batch_norms()[i].stats.running_var = bns_[i].stats.running_var.template cast<U>();
    }
    return out;
  }

  /// Records the network on `g`. Train mode updates batch-norm running
  /// statistics, except for layers whose parameters are all frozen: those run
  /// with running statistics so a frozen backbone stays untouched.
  ForwardPass<T> forward(Graph<T>& g, Tensor<T> batch, const ForwardOptions& opt) {
    return forward_impl(g, std::move(batch), opt, &bns_);
  }

  /// Eval-mode forward that never mutates the model; safe to call concurrently.
  ForwardPass<T> forward_eval(Graph<T>& g, Tensor<T> batch, const ForwardOptions& opt) const {
    ForwardOptions o = opt;
    o.mode = Mode::eval;
    return const_cast<Model*>(this)->forward_impl(g, std::move(batch), o, nullptr);
  }

  Tensor<T> classify(const Tensor<T>& batch, RandomStream dropout_stream = {}) {
    if (mode_ == Mode::eval) return std::as_const(*this).classify(batch);
    Graph<T> g;
    ForwardOptions opt;
    opt.mode = mode_;
    opt.dropout_stream = dropout_stream;
    opt.param_grads = false;
    return g.value(forward(g, batch, opt).logits);
  }

  Tensor<T> classify(const Tensor<T>& batch) const {
    Graph<T> g;
    ForwardOptions opt;
    opt.param_grads = false;
    return g.value(forward_eval(g, batch, opt).logits);
  }

 private:
  template <typename U>
  friend class Model;

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) fail(ErrorKind::InvalidConfig, "unknown parameter " + name);
    return it->second;
  }

  void add_param(const std::string& name, Shape shape, T fill = T{0}) {
    index_[name] = params_.size();
    params_.push_back({name, Tensor<T>(std::move(shape), fill), false});
  }

  void add_bn(const std::string& name, std::size_t channels) {
    add_param(name + ".gamma", Shape{channels}, T{1});
    add_param(name + ".beta", Shape{channels}, T{0});
    bn_index_[name] = bns_.size();
    bns_.push_back({name, BatchNormStats<T>(channels)});
  }

  void layout() {
    const std::size_t stem = config_.stem_channels;
    add_param("stem.conv.weight", Shape{stem, config_.input_channels, 3, 3});
    add_bn("stem.bn", stem);
    std::size_t in = stem;
    for (std::size_t s = 0; s < config_.blocks_per_stage.size(); ++s) {
      const std::size_t out = in * 2;
      for (std::size_t b = 0; b < config_.blocks_per_stage[s]; ++b) {
        const std::string p = block_name(s, b);
        const std::size_t cin = b == 0 ? in : out;
        add_param(p + ".conv1.weight", Shape{out, cin, 3, 3});
        add_bn(p + ".bn1", out);
        add_param(p + ".conv2.weight", Shape{out, out, 3, 3});
        add_bn(p + ".bn2", out);
        if (b == 0) {
          add_param(p + ".proj.weight", Shape{out, cin, 1, 1});
          add_bn(p + ".proj_bn", out);
        }
      }
      in = out;
    }
    add_param("head.weight", Shape{config_.head_features(), config_.num_classes});
    add_param("head.bias", Shape{config_.num_classes});
  }

  static std::string block_name(std::size_t stage, std::size_t block) {
    return "stage" + std::to_string(stage + 1) + ".block" + std::to_string(block);
  }

  static Tensor<T> he_normal(Shape shape, std::size_t fan_in, RandomStream stream) {
    Tensor<T> t(std::move(shape));
    const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : t.storage()) v = static_cast<T>(stream.normal(0.0, sd));
    return t;
  }

  ForwardPass<T> forward_impl(Graph<T>& g, Tensor<T> batch, const ForwardOptions& opt,
                              std::vector<NamedBatchNorm<T>>* mutable_bns);

  ModelConfig config_;
  Mode mode_ = Mode::eval;
  std::vector<Parameter<T>> params_;
  std::vector<NamedBatchNorm<T>> bns_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, std::size_t> bn_index_;

 public:
  /// He-style fan-in scaling for every weight tensor; biases and batch-norm
  /// shifts stay 0, batch-norm scales stay 1.
  void initialize(std::uint64_t seed) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      const bool weight = p.name.size() > 7 && p.name.compare(p.name.size() - 7, 7, ".weight") == 0;
      if (!weight) continue;
      const Shape& s = p.value.shape();
      const std::size_t fan_in = s.size() == 4 ? s[1] * s[2] * s[3] : s[0];
      p.value = he_normal(s, fan_in, keyed_stream(seed, hash_label(p.name)));
    }
  }

};

template <typename T>
ForwardPass<T> Model<T>::forward_impl(Graph<T>& g, Tensor<T> batch, const ForwardOptions& opt,
                                    std::vector<NamedBatchNorm<T>>* mutable_bns) {
  const ModelConfig& c = config_;
  if (batch.rank() != 4 || batch.dim(1) != c.input_channels || batch.dim(2) != c.input_size ||
      batch.dim(3) != c.input_size)
    fail(ErrorKind::ShapeMismatch, "classifier expects N×" + std::to_string(c.input_channels) + "×" +
                                       std::to_string(c.input_size) + "×" + std::to_string(c.input_size) +
                                       " input, got " + shape_string(batch.shape()));
  ForwardPass<T> pass;
  pass.input = g.input(std::move(batch), opt.input_grad);
  pass.params.reserve(params_.size());
  for (const auto& p : params_) pass.params.push_back(g.parameter(p.value, opt.param_grads && !p.frozen));
  auto pid = [&](const std::string& name) { return pass.params[index_of(name)]; };

  auto bn = [&](NodeId x, const std::string& name) {
    const NodeId gamma = pid(name + ".gamma"), beta = pid(name + ".beta");
    const bool frozen = params_[index_of(name + ".gamma")].frozen && params_[index_of(name + ".beta")].frozen;
    const Mode m = (opt.mode == Mode::train && !frozen && mutable_bns) ? Mode::train : Mode::eval;
    auto& stats = bns_[bn_index_.at(name)].stats;
    return g.batch_norm(x, gamma, beta, stats, m);
  };

  NodeId x = g.conv2d(pass.input, pid("stem.conv.weight"), {2, 1});
  x = g.relu(bn(x, "stem.bn"));
  x = g.max_pool2(x);
  for (std::size_t s = 0; s < c.blocks_per_stage.size(); ++s) {
    for (std::size_t b = 0; b < c.blocks_per_stage[s]; ++b) {
      const std::string p = block_name(s, b);
      const std::size_t stride = b == 0 ? 2 : 1;
      NodeId y = g.conv2d(x, pid(p + ".conv1.weight"), {stride, 1});
      y = g.relu(bn(y, p + ".bn1"));
      y = g.conv2d(y, pid(p + ".conv2.weight"), {1, 1});
      y = bn(y, p + ".bn2");
      NodeId shortcut = x;
      if (b == 0) shortcut = bn(g.conv2d(x, pid(p + ".proj.weight"), {2, 0}), p + ".proj_bn");
      x = g.relu(g.add(y, shortcut));
    }
  }
  pass.features = g.global_avg_pool(x);
  const NodeId dropped = g.dropout(pass.features, c.dropout_p, opt.mode, opt.dropout_stream);
  pass.logits = g.affine(dropped, pid("head.weight"), pid("head.bias"));
  return pass;
}

/// He-initialized model; identical output for identical (config, seed).
template <typename T = float>
Model<T> build_model(const ModelConfig& config, std::uint64_t seed) {
  Model<T> m = Model<T>::zeros(config);
  m.initialize(seed);
  return m;
}

/// Byte-level equality of two tensors (distinguishes -0 from +0 and NaN payloads).
template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

}  // namespace beamsight
