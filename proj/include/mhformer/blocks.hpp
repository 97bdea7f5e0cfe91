#pragma once

// Transformer building blocks: multi-head self-attention, the three-source
// multi-head cross-attention, the two-layer GELU MLP and the pre-norm
// residual encoder layer.

#include <random>

#include "mhformer/ops.hpp"

namespace mhf {

template <typename T>
struct LayerNormWeights {
  Tensor<T> gain, bias;
};

template <typename T>
struct AttentionWeights {
  Tensor<T> w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
  std::size_t heads = 1;

  std::size_t dim() const { return w_q.dim(0); }
};

template <typename T>
struct MlpWeights {
  Tensor<T> w1, b1, w2, b2;
};

template <typename T>
struct EncoderLayerWeights {
  LayerNormWeights<T> ln1, ln2;
  AttentionWeights<T> attn;
  MlpWeights<T> mlp;
};

// Per-call settings shared by the blocks.
struct BlockContext {
  std::size_t tokens = 0;  // tokens per stacked sample; 0 = single sample
  double ln_eps = 1e-5;
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;
  std::function<void(std::size_t, std::size_t, std::span<const double>, std::size_t)> probe;
};

template <typename T>
Tensor<T> apply_layer_norm(const Tensor<T>& x, const LayerNormWeights<T>& ln, double eps) {
  return layer_norm(x, ln.gain, ln.bias, T(eps));
}

namespace detail {

template <typename T>
void check_attention_weights(const AttentionWeights<T>& w, std::size_t d) {
  if (w.heads == 0 || d % w.heads != 0)
    throw ShapeError("attention: " + std::to_string(w.heads) + " heads do not divide dim " +
                     std::to_string(d));
  for (const auto* m : {&w.w_q, &w.w_k, &w.w_v, &w.w_o})
    if (m->shape() != Shape{d, d})
      throw ShapeError("attention projection " + shape_str(m->shape()) + " for dim " +
                       std::to_string(d));
}

template <typename T>
Tensor<T> attend(const Tensor<T>& q_src, const Tensor<T>& k_src, const Tensor<T>& v_src,
                 const AttentionWeights<T>& w, const BlockContext& ctx) {
  detail::require_rank2(q_src, "attention block");
  if (k_src.shape() != q_src.shape() || v_src.shape() != q_src.shape())
    throw ShapeError("cross-attention sources differ in shape: " + shape_str(q_src.shape()) +
                     ", " + shape_str(k_src.shape()) + ", " + shape_str(v_src.shape()));
  check_attention_weights(w, q_src.dim(1));
  const Tensor<T> q = linear(q_src, w.w_q, w.b_q);
  const Tensor<T> k = linear(k_src, w.w_k, w.b_k);
  const Tensor<T> v = linear(v_src, w.w_v, w.b_v);
  AttentionSpec spec;
  spec.heads = w.heads;
  spec.tokens = ctx.tokens;
  spec.dropout = ctx.dropout;
  spec.rng = ctx.rng;
  spec.probe = ctx.probe;
  return linear(attention(q, k, v, spec), w.w_o, w.b_o);
}

}  // namespace detail

/// Multi-head self-attention: Q, K and V all projected from x.
template <typename T>
Tensor<T> msa(const Tensor<T>& x, const AttentionWeights<T>& w, const BlockContext& ctx = {}) {
  return detail::attend(x, x, x, w, ctx);
}

/// Multi-head cross-attention with queries, keys and values projected from
/// three different sources.
template <typename T>
Tensor<T> mca(const Tensor<T>& q_src, const Tensor<T>& k_src, const Tensor<T>& v_src,
              const AttentionWeights<T>& w, const BlockContext& ctx = {}) {
  return detail::attend(q_src, k_src, v_src, w, ctx);
}

/// GELU(x·W1 + b1)·W2 + b2.
template <typename T>
Tensor<T> mlp(const Tensor<T>& x, const MlpWeights<T>& w) {
  return linear(gelu(linear(x, w.w1, w.b1)), w.w2, w.b2);
}

/// Pre-norm residual layer: y = x + MSA(LN(x)); out = y + MLP(LN(y)).
template <typename T>
Tensor<T> encoder_layer(const Tensor<T>& x, const EncoderLayerWeights<T>& w,
                        const BlockContext& ctx = {}) {
  const Tensor<T> y = add(x, msa(apply_layer_norm(x, w.ln1, ctx.ln_eps), w.attn, ctx));
  return add(y, mlp(apply_layer_norm(y, w.ln2, ctx.ln_eps), w.mlp));
}

}  // namespace mhf
