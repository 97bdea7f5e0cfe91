#pragma once

// The three-stage multi-hypothesis lifting network.
//
// All stages work on stacked 2-D tensors: a batch of B windows is laid out
// as B consecutive row blocks, so a spatial hypothesis is [B·2J × N] and a
// temporal one [B·N × C]. With B = 1 these are exactly the per-window
// matrices: (J·2)×N in the spatial domain and N×C in the temporal domain.

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mhformer/blocks.hpp"
#include "mhformer/params.hpp"

namespace mhf {

template <typename T>
using HypothesisSet = std::vector<Tensor<T>>;

struct AttentionMap {
  std::string stage;  // "mhg" or "shr"
  std::size_t hypothesis = 0;
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t n = 0;
  std::vector<double> rows;  // n×n row-major
};

// Collects attention probabilities of the first sample in the batch.
struct AttentionRecorder {
  bool all_layers = false;
  std::vector<AttentionMap> maps;

  bool wants(std::size_t layer) const { return all_layers || layer == 0; }
  auto probe(std::string stage, std::size_t hypothesis, std::size_t layer) {
    return [this, stage = std::move(stage), hypothesis, layer](
               std::size_t sample, std::size_t head, std::span<const double> p, std::size_t n) {
      if (sample != 0) return;
      maps.push_back({stage, hypothesis, layer, head, n, std::vector<double>(p.begin(), p.end())});
    };
  }
};

struct ForwardOptions {
  bool training = false;            // enables attention dropout
  std::mt19937_64* rng = nullptr;   // dropout source when training
  AttentionRecorder* recorder = nullptr;
};

namespace detail {

inline BlockContext block_context(const ModelConfig& cfg, const ForwardOptions& opt,
                                  std::size_t tokens) {
  BlockContext ctx;
  ctx.tokens = tokens;
  ctx.ln_eps = cfg.ln_eps;
  if (opt.training && cfg.dropout > 0) {
    ctx.dropout = cfg.dropout;
    ctx.rng = opt.rng;
  }
  return ctx;
}

template <typename T>
std::size_t batch_of(const Tensor<T>& x, std::size_t trailing_rank, const char* what) {
  if (x.rank() == trailing_rank) return 1;
  if (x.rank() == trailing_rank + 1) return x.dim(0);
  throw ShapeError(std::string(what) + ": unexpected rank for " + shape_str(x.shape()));
}

template <typename T>
void check_hypotheses(const HypothesisSet<T>& h, const ModelConfig& cfg, std::size_t cols,
                      const char* what) {
  if (h.size() != cfg.M)
    throw ShapeError(std::string(what) + ": expected " + std::to_string(cfg.M) +
                     " hypotheses, got " + std::to_string(h.size()));
  for (const auto& t : h)
    if (t.rank() != 2 || t.dim(1) != cols || t.shape() != h[0].shape())
      throw ShapeError(std::string(what) + ": hypothesis shape " + shape_str(t.shape()));
}

}  // namespace detail

/// Number of windows in a [B,N,J,2] (or unbatched [N,J,2]) input.
template <typename T>
std::size_t input_batch(const Tensor<T>& x2d, const ModelConfig& cfg) {
  const std::size_t B = detail::batch_of(x2d, 3, "model input");
  const Shape tail(x2d.shape().end() - 3, x2d.shape().end());
  if (tail != Shape{cfg.N, cfg.J, 2})
    throw ShapeError("model input " + shape_str(x2d.shape()) + " does not match N=" +
                     std::to_string(cfg.N) + ", J=" + std::to_string(cfg.J));
  return B;
}

/// Multi-hypothesis generation: M cascaded spatial encoder stacks over the
/// (J·2)×N joint-coordinate matrix. Stack m reads the raw input for m = 1
/// (or always, with parallel_mhg) and the previous stack's output otherwise.
template <typename T>
HypothesisSet<T> mhg_forward(const Tensor<T>& x2d, const ModelParams<T>& params,
                             const ModelConfig& cfg, const ForwardOptions& opt = {}) {
  const std::size_t B = input_batch(x2d, cfg);
  const std::size_t tokens = cfg.spatial_tokens();
  // [B,N,J,2] → [B·N × 2J] → per-window transpose → [B·2J × N]
  const Tensor<T> xbar = block_transpose(reshape(x2d, {B * cfg.N, tokens}), B);

  HypothesisSet<T> out;
  Tensor<T> input = xbar;
  for (std::size_t m = 0; m < cfg.M; ++m) {
    if (m > 0 && !cfg.parallel_mhg) input = out.back();
    const std::string p = "mhg." + detail::hyp(m);
    Tensor<T> h = add_tiled(apply_layer_norm(input, params.layer_norm(p + ".ln_in"), cfg.ln_eps),
                            params.at(p + ".pos"));
    for (std::size_t l = 0; l < cfg.L1; ++l) {
      BlockContext ctx = detail::block_context(cfg, opt, tokens);
      if (opt.recorder && opt.recorder->wants(l)) ctx.probe = opt.recorder->probe("mhg", m, l);
      h = encoder_layer(h, params.encoder_layer(p + "." + detail::layer(l), cfg.h_s), ctx);
    }
    out.push_back(add(input, apply_layer_norm(h, params.layer_norm(p + ".ln_out"), cfg.ln_eps)));
  }
  return out;
}

/// Transposes each spatial hypothesis to frames × joint-coordinates, embeds
/// it to C channels and adds the temporal position embedding.
template <typename T>
HypothesisSet<T> temporal_embed(const HypothesisSet<T>& h, const ModelParams<T>& params,
                                const ModelConfig& cfg) {
  detail::check_hypotheses(h, cfg, cfg.N, "temporal_embed");
  const std::size_t B = h[0].dim(0) / cfg.spatial_tokens();
  HypothesisSet<T> out;
  for (std::size_t m = 0; m < cfg.M; ++m) {
    const std::string p = "embed." + detail::hyp(m);
    const Tensor<T> frames = block_transpose(h[m], B);
    out.push_back(add_tiled(linear(frames, params.at(p + ".w"), params.at(p + ".b")),
                            params.at(p + ".pos")));
  }
  return out;
}

namespace detail {

template <typename T>
Tensor<T> mix_hypotheses(const HypothesisSet<T>& z, const ModelParams<T>& params,
                         const std::string& p, const ModelConfig& cfg) {
  const Tensor<T> merged = concat_last(z);
  return add(merged, mlp(apply_layer_norm(merged, params.layer_norm(p + ".mix.ln"), cfg.ln_eps),
                         params.mlp(p + ".mix.mlp")));
}

}  // namespace detail

/// Self-hypothesis refinement: per-hypothesis self-attention, then the
/// hypothesis-mixing MLP over the channel concatenation, split back into M.
template <typename T>
HypothesisSet<T> shr_forward(const HypothesisSet<T>& z, const ModelParams<T>& params,
                             const ModelConfig& cfg, const ForwardOptions& opt = {}) {
  detail::check_hypotheses(z, cfg, cfg.C, "shr_forward");
  HypothesisSet<T> cur = z;
  for (std::size_t l = 0; l < cfg.L2; ++l) {
    const std::string p = "shr." + detail::layer(l);
    HypothesisSet<T> attended;
    for (std::size_t m = 0; m < cfg.M; ++m) {
      const std::string q = p + "." + detail::hyp(m);
      BlockContext ctx = detail::block_context(cfg, opt, cfg.N);
      if (opt.recorder && opt.recorder->wants(l)) ctx.probe = opt.recorder->probe("shr", m, l);
      attended.push_back(add(
          cur[m],
          msa(apply_layer_norm(cur[m], params.layer_norm(q + ".ln"), cfg.ln_eps),
              params.attention(q + ".attn", cfg.h_t), ctx)));
    }
    cur = split_last(detail::mix_hypotheses(attended, params, p, cfg), cfg.M);
  }
  return cur;
}

/// Cross-hypothesis interaction. Block m takes queries from hypothesis
/// query_source(m), keys from key_source(m) and values from m itself. The
/// last layer keeps the merged [B·N × C·M] representation.
template <typename T>
Tensor<T> chi_forward(const HypothesisSet<T>& z, const ModelParams<T>& params,
                      const ModelConfig& cfg, const ForwardOptions& opt = {}) {
  detail::check_hypotheses(z, cfg, cfg.C, "chi_forward");
  if (cfg.L3 > 0 && cfg.M != 3 && !cfg.any_m)
    throw ValidationError("cross-hypothesis interaction needs M == 3 unless any_m is set");
  HypothesisSet<T> cur = z;
  for (std::size_t l = 0; l < cfg.L3; ++l) {
    const std::string p = "chi." + detail::layer(l);
    HypothesisSet<T> normed;
    for (std::size_t m = 0; m < cfg.M; ++m)
      normed.push_back(apply_layer_norm(
          cur[m], params.layer_norm(p + "." + detail::hyp(m) + ".ln"), cfg.ln_eps));
    HypothesisSet<T> attended;
    for (std::size_t m = 0; m < cfg.M; ++m) {
      const BlockContext ctx = detail::block_context(cfg, opt, cfg.N);
      attended.push_back(add(cur[m], mca(normed[cfg.query_source(m)], normed[cfg.key_source(m)],
                                         normed[m],
                                         params.attention(p + "." + detail::hyp(m) + ".attn",
                                                          cfg.h_t),
                                         ctx)));
    }
    Tensor<T> merged = detail::mix_hypotheses(attended, params, p, cfg);
    if (l + 1 == cfg.L3) return merged;
    cur = split_last(merged, cfg.M);
  }
  return concat_last(cur);
}

template <typename T>
struct Regression {
  Tensor<T> seq;     // [B, N, J, 3]
  Tensor<T> center;  // [B, J, 3], frame floor(N/2) of seq
};

/// Per-frame linear head C·M → 3J; the centre frame is read off the sequence.
template <typename T>
Regression<T> regress(const Tensor<T>& zfinal, const ModelParams<T>& params,
                      const ModelConfig& cfg) {
  detail::require_rank2(zfinal, "regress");
  if (zfinal.dim(1) != cfg.C * cfg.M || zfinal.dim(0) % cfg.N != 0)
    throw ShapeError("regress input " + shape_str(zfinal.shape()) + " does not match config");
  const std::size_t B = zfinal.dim(0) / cfg.N;
  const Tensor<T> flat = linear(zfinal, params.at("head.w"), params.at("head.b"));
  Regression<T> r;
  r.seq = reshape(flat, {B, cfg.N, cfg.J, 3});
  r.center = Tensor<T>({B, cfg.J, 3});
  const std::size_t frame = 3 * cfg.J;
  for (std::size_t b = 0; b < B; ++b)
    std::copy_n(r.seq.data().data() + (b * cfg.N + cfg.center()) * frame, frame,
                r.center.data().data() + b * frame);
  return r;
}

template <typename T>
struct ForwardResult {
  Tensor<T> seq;     // [B, N, J, 3]
  Tensor<T> center;  // [B, J, 3]
  HypothesisSet<T> refined;  // SHR outputs, input to hypothesis_decode
};

template <typename T>
ForwardResult<T> forward(const Tensor<T>& x2d, const ModelParams<T>& params,
                         const ModelConfig& cfg, const ForwardOptions& opt = {}) {
  const HypothesisSet<T> spatial = mhg_forward(x2d, params, cfg, opt);
  const HypothesisSet<T> embedded = temporal_embed(spatial, params, cfg);
  HypothesisSet<T> refined = shr_forward(embedded, params, cfg, opt);
  const Tensor<T> merged = chi_forward(refined, params, cfg, opt);
  Regression<T> r = regress(merged, params, cfg);
  return {std::move(r.seq), std::move(r.center), std::move(refined)};
}

/// Decodes each refined hypothesis with its own head C → 3J.
/// Returns M tensors [B, N, J, 3].
template <typename T>
std::vector<Tensor<T>> hypothesis_decode(const HypothesisSet<T>& z, const ModelParams<T>& params,
                                         const ModelConfig& cfg) {
  detail::check_hypotheses(z, cfg, cfg.C, "hypothesis_decode");
  if (!params.contains("hyp_head.h1.w"))
    throw ValidationError("checkpoint has no per-hypothesis heads");
  const std::size_t B = z[0].dim(0) / cfg.N;
  std::vector<Tensor<T>> out;
  for (std::size_t m = 0; m < cfg.M; ++m) {
    const std::string p = "hyp_head." + detail::hyp(m);
    out.push_back(reshape(linear(z[m], params.at(p + ".w"), params.at(p + ".b")),
                          {B, cfg.N, cfg.J, 3}));
  }
  return out;
}

/// First-layer attention maps of the MHG stacks (2J×2J, h_s heads) and SHR
/// blocks (N×N, h_t heads) for the first window of x2d.
template <typename T>
std::vector<AttentionMap> export_attention(const Tensor<T>& x2d, const ModelParams<T>& params,
                                           const ModelConfig& cfg, bool all_layers = false) {
  AttentionRecorder rec;
  rec.all_layers = all_layers;
  ForwardOptions opt;
  opt.recorder = &rec;
  forward(x2d, params, cfg, opt);
  return std::move(rec.maps);
}

inline json attention_maps_json(const std::vector<AttentionMap>& maps) {
  json arr = json::array();
  for (const auto& a : maps) {
    json rows = json::array();
    for (std::size_t i = 0; i < a.n; ++i)
      rows.push_back(std::vector<double>(a.rows.begin() + i * a.n, a.rows.begin() + (i + 1) * a.n));
    arr.push_back({{"stage", a.stage},
                   {"hypothesis", a.hypothesis + 1},
                   {"layer", a.layer + 1},
                   {"head", a.head + 1},
                   {"shape", {a.n, a.n}},
                   {"rows", std::move(rows)}});
  }
  return arr;
}

}  // namespace mhf
