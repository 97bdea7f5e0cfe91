#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mhformer/blocks.hpp"
#include "mhformer/config.hpp"

namespace mhf {

enum class ParamKind { weight, bias, ln_gain, ln_bias, embedding };

struct ParamSpec {
  std::string name;
  Shape shape;
  ParamKind kind;
  bool optional = false;  // per-hypothesis decoding heads
};

namespace detail {

inline std::string hyp(std::size_t m) { return "h" + std::to_string(m + 1); }
inline std::string layer(std::size_t l) { return "layer" + std::to_string(l + 1); }

inline void add_ln(std::vector<ParamSpec>& out, const std::string& p, std::size_t d) {
  out.push_back({p + ".gain", {d}, ParamKind::ln_gain});
  out.push_back({p + ".bias", {d}, ParamKind::ln_bias});
}

inline void add_attention(std::vector<ParamSpec>& out, const std::string& p, std::size_t d) {
  for (const char* n : {"q", "k", "v", "o"}) {
    out.push_back({p + ".w_" + n, {d, d}, ParamKind::weight});
    out.push_back({p + ".b_" + n, {d}, ParamKind::bias});
  }
}

inline void add_mlp(std::vector<ParamSpec>& out, const std::string& p, std::size_t d,
                    std::size_t hidden) {
  out.push_back({p + ".w1", {d, hidden}, ParamKind::weight});
  out.push_back({p + ".b1", {hidden}, ParamKind::bias});
  out.push_back({p + ".w2", {hidden, d}, ParamKind::weight});
  out.push_back({p + ".b2", {d}, ParamKind::bias});
}

}  // namespace detail

/// Every parameter of the model in a fixed order, with dotted names such as
/// `mhg.h2.layer3.attn.w_q`. Hypothesis and layer indices are 1-based.
inline std::vector<ParamSpec> parameter_layout(const ModelConfig& c) {
  using namespace detail;
  std::vector<ParamSpec> out;
  const std::size_t T = c.spatial_tokens(), N = c.N, C = c.C, CM = c.C * c.M;
  for (std::size_t m = 0; m < c.M; ++m) {
    const std::string p = "mhg." + hyp(m);
    add_ln(out, p + ".ln_in", N);
    out.push_back({p + ".pos", {T, N}, ParamKind::embedding});
    for (std::size_t l = 0; l < c.L1; ++l) {
      const std::string q = p + "." + layer(l);
      add_ln(out, q + ".ln1", N);
      add_attention(out, q + ".attn", N);
      add_ln(out, q + ".ln2", N);
      add_mlp(out, q + ".mlp", N, c.spatial_hidden());
    }
    add_ln(out, p + ".ln_out", N);
  }
  for (std::size_t m = 0; m < c.M; ++m) {
    const std::string p = "embed." + hyp(m);
    out.push_back({p + ".w", {T, C}, ParamKind::weight});
    out.push_back({p + ".b", {C}, ParamKind::bias});
    out.push_back({p + ".pos", {N, C}, ParamKind::embedding});
  }
  for (const char* stage : {"shr", "chi"}) {
    const std::size_t layers = std::string(stage) == "shr" ? c.L2 : c.L3;
    for (std::size_t l = 0; l < layers; ++l) {
      const std::string p = std::string(stage) + "." + layer(l);
      for (std::size_t m = 0; m < c.M; ++m) {
        add_ln(out, p + "." + hyp(m) + ".ln", C);
        add_attention(out, p + "." + hyp(m) + ".attn", C);
      }
      add_ln(out, p + ".mix.ln", CM);
      add_mlp(out, p + ".mix.mlp", CM, c.mixing_hidden());
    }
  }
  out.push_back({"head.w", {CM, 3 * c.J}, ParamKind::weight});
  out.push_back({"head.b", {3 * c.J}, ParamKind::bias});
  if (c.hypothesis_heads) {
    for (std::size_t m = 0; m < c.M; ++m) {
      out.push_back({"hyp_head." + hyp(m) + ".w", {C, 3 * c.J}, ParamKind::weight, true});
      out.push_back({"hyp_head." + hyp(m) + ".b", {3 * c.J}, ParamKind::bias, true});
    }
  }
  return out;
}

/// Named parameter store. Entries keep insertion order; tensors are shared
/// handles, so block views returned below alias the stored parameters.
template <typename T>
class ModelParams {
 public:
  void add(const std::string& name, Tensor<T> t) {
    if (index_.count(name)) throw ValidationError("duplicate parameter '" + name + "'");
    index_[name] = entries_.size();
    entries_.emplace_back(name, std::move(t));
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const Tensor<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("missing parameter '" + name + "'");
    return entries_[it->second].second;
  }
  Tensor<T>& at(const std::string& name) {
    return const_cast<Tensor<T>&>(std::as_const(*this).at(name));
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Tensor<T>>>& entries() { return entries_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.numel();
    return n;
  }

  void set_requires_grad(bool on) {
    for (auto& [_, t] : entries_) t.set_requires_grad(on);
  }
  void zero_grad() {
    for (auto& [_, t] : entries_) t.clear_grad();
  }

  ModelParams clone() const {
    ModelParams p;
    for (const auto& [n, t] : entries_) p.add(n, t.clone());
    return p;
  }

  LayerNormWeights<T> layer_norm(const std::string& p) const {
    return {at(p + ".gain"), at(p + ".bias")};
  }
  AttentionWeights<T> attention(const std::string& p, std::size_t heads) const {
    return {at(p + ".w_q"), at(p + ".b_q"), at(p + ".w_k"), at(p + ".b_k"),
            at(p + ".w_v"), at(p + ".b_v"), at(p + ".w_o"), at(p + ".b_o"), heads};
  }
  MlpWeights<T> mlp(const std::string& p) const {
    return {at(p + ".w1"), at(p + ".b1"), at(p + ".w2"), at(p + ".b2")};
  }
  EncoderLayerWeights<T> encoder_layer(const std::string& p, std::size_t heads) const {
    return {layer_norm(p + ".ln1"), layer_norm(p + ".ln2"), attention(p + ".attn", heads),
            mlp(p + ".mlp")};
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Normal(0, std) truncated to ±2 std by rejection.
template <typename T>
void fill_truncated_normal(Tensor<T>& t, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& v : t.data()) {
    double z;
    do z = nd(rng);
    while (std::abs(z) > 2.0);
    v = T(z * std);
  }
}

/// Weights and embeddings ~ truncated normal (std 0.02), biases 0, LayerNorm
/// gain 1 and bias 0.
template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ModelParams<T> p;
  for (const auto& s : parameter_layout(cfg)) {
    Tensor<T> t(s.shape);
    switch (s.kind) {
      case ParamKind::weight:
      case ParamKind::embedding: fill_truncated_normal(t, 0.02, rng); break;
      case ParamKind::ln_gain: std::fill(t.data().begin(), t.data().end(), T(1)); break;
      default: break;
    }
    p.add(s.name, std::move(t));
  }
  return p;
}

/// Every parameter zero, LayerNorm gains included.
template <typename T>
ModelParams<T> zero_params(const ModelConfig& cfg) {
  ModelParams<T> p;
  for (const auto& s : parameter_layout(cfg)) p.add(s.name, Tensor<T>(s.shape));
  return p;
}

// Throws unless `p` holds exactly the layout of `cfg` with matching shapes.
template <typename T>
void check_params(const ModelParams<T>& p, const ModelConfig& cfg) {
  const auto layout = parameter_layout(cfg);
  if (layout.size() != p.size())
    throw ValidationError("parameter set has " + std::to_string(p.size()) + " tensors, config " +
                          "expects " + std::to_string(layout.size()));
  for (const auto& s : layout)
    if (p.at(s.name).shape() != s.shape)
      throw ShapeError("parameter '" + s.name + "' has shape " + shape_str(p.at(s.name).shape()) +
                       ", expected " + shape_str(s.shape));
}

}  // namespace mhf
