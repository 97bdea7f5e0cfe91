#pragma once

// Finite-difference checks of every differentiable op, block and model
// stage, in float64.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mhformer/grad_check.hpp"
#include "mhformer/model.hpp"
#include "mhformer/training.hpp"

namespace mhf {

struct BlockCheck {
  std::string name;
  double max_rel_error = 0;
  double tolerance = 0;
  std::size_t coordinates = 0;
  bool pass() const { return max_rel_error < tolerance; }
};

namespace detail {

class SuiteRng {
 public:
  explicit SuiteRng(std::uint64_t seed) : rng_(seed) {}
  Tensor<double> tensor(Shape s, double scale = 1.0) {
    std::normal_distribution<double> nd(0.0, scale);
    Tensor<double> t(std::move(s));
    for (auto& v : t.data()) v = nd(rng_);
    return t;
  }

 private:
  std::mt19937_64 rng_;
};

// Weighted sum with fixed random weights: a smooth scalar read-out of any tensor.
struct Readout {
  SuiteRng* rng;
  std::vector<Tensor<double>> weights;
  std::size_t next = 0;
  Tensor<double> operator()(const Tensor<double>& y) {
    if (next == weights.size()) weights.push_back(rng->tensor(y.shape()));
    const Tensor<double>& w = weights[next++];
    return sum(mul(y, w));
  }
  void reset() { next = 0; }
};

inline ModelParams<double> rebuild(const std::vector<std::string>& names,
                                   const ModelParams<double>& base,
                                   const std::vector<Tensor<double>>& in, std::size_t first) {
  ModelParams<double> p;
  std::size_t i = first;
  for (const auto& [name, t] : base.entries()) {
    const bool varied = std::find(names.begin(), names.end(), name) != names.end();
    p.add(name, varied ? in[i++] : t);
  }
  return p;
}

}  // namespace detail

/// Runs every check. Linear maps use `linear_tol`, everything else `tol`.
/// `cfg` supplies the model dimensions (the tiny config by default).
inline std::vector<BlockCheck> run_gradcheck_suite(const ModelConfig& cfg_in, std::uint64_t seed,
                                                   double tol = 1e-4, double linear_tol = 1e-6) {
  ModelConfig cfg = cfg_in;
  cfg.dtype = DType::float64;
  cfg.dropout = 0.0;
  cfg.validate();
  using Fn = ScalarFn<double>;
  using Vec = std::vector<Tensor<double>>;
  const double eps = 1e-6;
  detail::SuiteRng rng(seed);
  std::vector<BlockCheck> out;
  auto check = [&](const std::string& name, const Fn& f, Vec in, double limit) {
    const auto r = grad_check_detailed<double>(f, std::move(in), eps);
    out.push_back({name, r.max_rel_error, limit, r.coordinates});
  };
  auto readout = std::make_shared<detail::Readout>(detail::Readout{&rng, {}, 0});
  auto with_readout = [readout](std::function<Tensor<double>(const Vec&)> g) -> Fn {
    return [readout, g](const Vec& in) {
      readout->reset();
      return (*readout)(g(in));
    };
  };
  // Each check gets fresh read-out weights.
  auto fresh = [&] { readout->weights.clear(); };

  fresh();
  check("matmul", with_readout([](const Vec& in) { return matmul(in[0], in[1]); }),
        {rng.tensor({3, 4}), rng.tensor({4, 5})}, linear_tol);
  fresh();
  check("linear", with_readout([](const Vec& in) { return linear(in[0], in[1], in[2]); }),
        {rng.tensor({4, 3}), rng.tensor({3, 5}), rng.tensor({5})}, linear_tol);
  fresh();
  check("elementwise", with_readout([](const Vec& in) {
          return scale(mul(sub(add(in[0], in[1]), in[1]), in[1]), 0.5);
        }),
        {rng.tensor({3, 4}), rng.tensor({3, 4})}, tol);
  fresh();
  check("reshape_ops", with_readout([](const Vec& in) {
          const Tensor<double> t = block_transpose(add_tiled(in[0], in[1]), 2);
          const auto parts = split_last(transpose(t), 2);
          return reshape(concat_last(Vec{parts[1], slice_last(parts[0], 0, 2)}), {5, 3});
        }),
        {rng.tensor({6, 3}), rng.tensor({3, 3})}, tol);
  fresh();
  check("layer_norm",
        with_readout([](const Vec& in) { return layer_norm(in[0], in[1], in[2], 1e-5); }),
        {rng.tensor({4, 6}), rng.tensor({6}), rng.tensor({6})}, tol);
  fresh();
  check("softmax", with_readout([](const Vec& in) { return softmax_rows(in[0]); }),
        {rng.tensor({3, 5})}, tol);
  fresh();
  check("gelu", with_readout([](const Vec& in) { return gelu(in[0]); }), {rng.tensor({3, 5})},
        tol);
  fresh();
  check("attention", with_readout([](const Vec& in) {
          AttentionSpec s;
          s.heads = 2;
          s.tokens = 3;
          return attention(in[0], in[1], in[2], s);
        }),
        {rng.tensor({6, 4}), rng.tensor({6, 4}), rng.tensor({6, 4})}, tol);
  fresh();
  check("pose_loss",
        [](const Vec& in) { return pose_loss(in[0], in[1], true, false); },
        {rng.tensor({2, 3, 2, 3}), rng.tensor({2, 3, 2, 3})}, tol);

  const std::size_t d = cfg.C, n = cfg.N;
  auto attn_inputs = [&](std::size_t dim) {
    return Vec{rng.tensor({dim, dim}, 0.3), rng.tensor({dim}, 0.1), rng.tensor({dim, dim}, 0.3),
               rng.tensor({dim}, 0.1),      rng.tensor({dim, dim}, 0.3), rng.tensor({dim}, 0.1),
               rng.tensor({dim, dim}, 0.3), rng.tensor({dim}, 0.1)};
  };
  auto attn_weights = [](const Vec& in, std::size_t at, std::size_t heads) {
    return AttentionWeights<double>{in[at],     in[at + 1], in[at + 2], in[at + 3],
                                    in[at + 4], in[at + 5], in[at + 6], in[at + 7], heads};
  };
  {
    fresh();
    Vec in{rng.tensor({2 * n, d})};
    for (auto& t : attn_inputs(d)) in.push_back(t);
    check("msa", with_readout([&, n](const Vec& v) {
            BlockContext ctx;
            ctx.tokens = n;
            return msa(v[0], attn_weights(v, 1, cfg.h_t), ctx);
          }),
          in, tol);
  }
  {
    fresh();
    Vec in{rng.tensor({2 * n, d}), rng.tensor({2 * n, d}), rng.tensor({2 * n, d})};
    for (auto& t : attn_inputs(d)) in.push_back(t);
    check("mca", with_readout([&, n](const Vec& v) {
            BlockContext ctx;
            ctx.tokens = n;
            return mca(v[0], v[1], v[2], attn_weights(v, 3, cfg.h_t), ctx);
          }),
          in, tol);
  }
  {
    fresh();
    const std::size_t h = cfg.hidden(d);
    check("mlp", with_readout([](const Vec& v) {
            return mlp(v[0], MlpWeights<double>{v[1], v[2], v[3], v[4]});
          }),
          {rng.tensor({5, d}), rng.tensor({d, h}, 0.3), rng.tensor({h}, 0.1),
           rng.tensor({h, d}, 0.3), rng.tensor({d}, 0.1)},
          tol);
  }
  {
    fresh();
    const std::size_t T = cfg.spatial_tokens(), h = cfg.spatial_hidden();
    Vec in{rng.tensor({2 * T, n}), rng.tensor({n}, 0.3), rng.tensor({n}, 0.1),
           rng.tensor({n}, 0.3), rng.tensor({n}, 0.1)};
    for (auto& t : attn_inputs(n)) in.push_back(t);
    for (auto& t : Vec{rng.tensor({n, h}, 0.3), rng.tensor({h}, 0.1), rng.tensor({h, n}, 0.3),
                       rng.tensor({n}, 0.1)})
      in.push_back(t);
    check("encoder_layer", with_readout([&, T](const Vec& v) {
            EncoderLayerWeights<double> w{{v[1], v[2]},
                                          {v[3], v[4]},
                                          attn_weights(v, 5, cfg.h_s),
                                          {v[13], v[14], v[15], v[16]}};
            BlockContext ctx;
            ctx.tokens = T;
            return encoder_layer(v[0], w, ctx);
          }),
          in, tol);
  }

  // Model stages, differentiated w.r.t. their input and their own parameters.
  // Parameters are drawn with a larger spread than the default init so that
  // every path carries signal.
  ModelParams<double> base = init_params<double>(cfg, seed);
  {
    std::mt19937_64 prng(seed ^ 0x5eedULL);
    std::normal_distribution<double> nd(0.0, 0.2);
    for (auto& [name, t] : base.entries())
      for (auto& v : t.data()) v += nd(prng);
  }
  auto names_with = [&](std::initializer_list<const char*> prefixes) {
    std::vector<std::string> names;
    for (const auto& [name, _] : base.entries())
      for (const char* p : prefixes)
        if (name.rfind(p, 0) == 0) names.push_back(name);
    return names;
  };
  auto stage = [&](const std::string& label, std::initializer_list<const char*> prefixes,
                   Vec inputs, std::function<Tensor<double>(const Vec&, const ModelParams<double>&)>
                                   body) {
    fresh();
    const auto names = names_with(prefixes);
    const std::size_t first = inputs.size();
    for (const auto& nm : names) inputs.push_back(base.at(nm).clone());
    check(label, with_readout([names, first, body, &base](const Vec& in) {
            return body(in, detail::rebuild(names, base, in, first));
          }),
          std::move(inputs), tol);
  };
  const std::size_t B = 2, T = cfg.spatial_tokens(), M = cfg.M;
  auto hyps = [&](std::size_t rows, std::size_t cols) {
    Vec v;
    for (std::size_t m = 0; m < M; ++m) v.push_back(rng.tensor({rows, cols}));
    return v;
  };

  stage("mhg", {"mhg."}, {rng.tensor({B, n, cfg.J, 2})},
        [&](const Vec& in, const ModelParams<double>& p) {
          return concat_last(mhg_forward(in[0], p, cfg));
        });
  stage("temporal_embed", {"embed."}, hyps(B * T, n),
        [&](const Vec& in, const ModelParams<double>& p) {
          return concat_last(temporal_embed(Vec(in.begin(), in.begin() + M), p, cfg));
        });
  if (cfg.L2 > 0)
    stage("shr", {"shr."}, hyps(B * n, d), [&](const Vec& in, const ModelParams<double>& p) {
      return concat_last(shr_forward(Vec(in.begin(), in.begin() + M), p, cfg));
    });
  if (cfg.L3 > 0)
    stage("chi", {"chi."}, hyps(B * n, d), [&](const Vec& in, const ModelParams<double>& p) {
      return chi_forward(Vec(in.begin(), in.begin() + M), p, cfg);
    });
  stage("regression_head", {"head."}, {rng.tensor({B * n, d * M})},
        [&](const Vec& in, const ModelParams<double>& p) { return regress(in[0], p, cfg).seq; });
  {
    // Full model through the training loss, against a fixed target.
    fresh();
    const auto names = names_with({""});
    Vec inputs{rng.tensor({B, n, cfg.J, 2})};
    for (const auto& nm : names) inputs.push_back(base.at(nm).clone());
    const Tensor<double> target = rng.tensor({B, n, cfg.J, 3});
    check("full_model",
          [names, target, &base, &cfg](const Vec& in) {
            const auto p = detail::rebuild(names, base, in, 1);
            return pose_loss(forward(in[0], p, cfg).seq, target, true, false);
          },
          std::move(inputs), tol);
  }
  return out;
}

}  // namespace mhf
