#pragma once

#include <cstdint>

#include "mhformer/params.hpp"

namespace mhf {

/// Scalars in the parameter set for `cfg`, per-hypothesis heads excluded.
inline std::uint64_t count_params(const ModelConfig& cfg) {
  std::uint64_t n = 0;
  for (const auto& s : parameter_layout(cfg))
    if (!s.optional) n += shape_numel(s.shape);
  return n;
}

/// Analytic FLOPs (2 per multiply-accumulate) of one forward pass over one
/// window: every linear map plus the QKᵀ and AV products of each attention.
/// Normalization, softmax and activations are not counted.
inline std::uint64_t estimate_flops(const ModelConfig& cfg) {
  using u64 = std::uint64_t;
  const u64 M = cfg.M, N = cfg.N, C = cfg.C, T = cfg.spatial_tokens(), J = cfg.J;
  auto linear = [](u64 rows, u64 in, u64 out) { return 2 * rows * in * out; };
  auto attention = [&](u64 tokens, u64 dim) {
    return 4 * linear(tokens, dim, dim) + 2 * (2 * tokens * tokens * dim);
  };
  auto mlp = [&](u64 tokens, u64 dim, u64 hidden) {
    return linear(tokens, dim, hidden) + linear(tokens, hidden, dim);
  };
  const u64 spatial_layer = attention(T, N) + mlp(T, N, cfg.spatial_hidden());
  const u64 temporal_layer = M * attention(N, C) + mlp(N, C * M, cfg.mixing_hidden());
  return M * cfg.L1 * spatial_layer + M * linear(N, T, C) +
         (cfg.L2 + cfg.L3) * temporal_layer + linear(N, C * M, 3 * J);
}

}  // namespace mhf
