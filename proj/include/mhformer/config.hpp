#pragma once

#include <cmath>
#include <cstdint>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "mhformer/error.hpp"
#include "mhformer/tensor.hpp"

namespace mhf {

using json = nlohmann::json;

// Which hypotheses feed the queries and keys of cross-attention block m.
// cyclic: m1 = m+1, m2 = m+2; reverse: m1 = m−1, m2 = m−2 (mod M).
enum class CrossRoles { cyclic, reverse };

struct ModelConfig {
  std::size_t M = 3;   // hypotheses
  std::size_t N = 27;  // frames per window (odd)
  std::size_t J = 17;  // joints
  std::size_t C = 512; // temporal embedding dim
  std::size_t L1 = 4;  // encoder layers per MHG stack
  std::size_t L2 = 2;  // SHR layers
  std::size_t L3 = 1;  // CHI layers
  std::size_t h_s = 9; // spatial heads (must divide N)
  std::size_t h_t = 8; // temporal heads (must divide C)
  double mlp_ratio = 2.0;
  double ln_eps = 1e-5;
  double dropout = 0.0;  // attention-probability dropout
  DType dtype = DType::float32;
  bool parallel_mhg = false;  // every MHG stack reads the raw input
  CrossRoles cross_roles = CrossRoles::cyclic;
  bool any_m = false;             // allow CHI with M != 3
  bool hypothesis_heads = false;  // per-hypothesis decoding heads

  std::size_t spatial_tokens() const { return 2 * J; }
  std::size_t center() const { return N / 2; }
  std::size_t hidden(std::size_t d) const {
    return static_cast<std::size_t>(std::llround(mlp_ratio * double(d)));
  }
  std::size_t spatial_hidden() const { return hidden(N); }
  // The hypothesis-mixing MLP widens C (not C·M) by the ratio.
  std::size_t mixing_hidden() const { return hidden(C); }

  std::size_t query_source(std::size_t m) const {
    return cross_roles == CrossRoles::cyclic ? (m + 1) % M : (m + M - 1) % M;
  }
  std::size_t key_source(std::size_t m) const {
    return cross_roles == CrossRoles::cyclic ? (m + 2) % M : (m + 2 * M - 2) % M;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ValidationError("model config: " + m); };
    if (M < 1) fail("M must be >= 1");
    if (N < 1 || N % 2 == 0) fail("N must be odd and >= 1, got " + std::to_string(N));
    if (J < 1) fail("J must be >= 1");
    if (C < 1) fail("C must be >= 1");
    if (h_s < 1 || N % h_s != 0)
      fail("spatial heads " + std::to_string(h_s) + " must divide N=" + std::to_string(N));
    if (h_t < 1 || C % h_t != 0)
      fail("temporal heads " + std::to_string(h_t) + " must divide C=" + std::to_string(C));
    if (!(mlp_ratio > 0)) fail("mlp_ratio must be positive");
    for (std::size_t d : {N, C})
      if (std::abs(mlp_ratio * double(d) - double(hidden(d))) > 1e-9 || hidden(d) < 1)
        fail("mlp_ratio * " + std::to_string(d) + " is not a positive integer");
    if (!(ln_eps > 0)) fail("ln_eps must be positive");
    if (dropout < 0 || dropout >= 1) fail("dropout must lie in [0, 1)");
    if (L3 > 0 && M != 3 && !any_m)
      fail("cross-hypothesis interaction needs M == 3 unless any_m is set (M=" +
           std::to_string(M) + ")");
  }
};

struct TrainConfig {
  double base_lr = 1e-3;
  double epoch_decay = 0.95;  // applied after every epoch
  double step_decay = 0.5;    // applied after every `step_every` epochs
  std::size_t step_every = 5;
  std::size_t epochs = 1;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  double flip_prob = 0.5;
  bool normalize = true;       // divide the loss by B·N·J
  bool squared_loss = false;   // ablation: squared per-joint norm
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double hypothesis_aux_weight = 0.0;  // trains per-hypothesis heads only

  void validate() const {
    auto fail = [](const std::string& m) { throw ValidationError("train config: " + m); };
    if (!(base_lr >= 0)) fail("base_lr must be >= 0");
    if (!(epoch_decay > 0 && epoch_decay <= 1)) fail("epoch_decay must lie in (0, 1]");
    if (!(step_decay > 0 && step_decay <= 1)) fail("step_decay must lie in (0, 1]");
    if (step_every < 1) fail("step_every must be >= 1");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (flip_prob < 0 || flip_prob > 1) fail("flip_prob must lie in [0, 1]");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) fail("betas must lie in [0, 1)");
    if (!(adam_eps > 0)) fail("adam_eps must be positive");
    if (hypothesis_aux_weight < 0) fail("hypothesis_aux_weight must be >= 0");
  }
};

namespace detail {

template <typename V>
void read_field(const json& j, const char* key, V& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<V>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("field '") + key + "': " + e.what(), key);
  }
}

inline void reject_unknown(const json& j, const std::set<std::string>& known, const char* what) {
  if (!j.is_object()) throw ParseError(std::string(what) + " must be a JSON object", what);
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      throw ParseError(std::string("unknown ") + what + " field '" + it.key() + "'", it.key());
}

}  // namespace detail

inline void to_json(json& j, const ModelConfig& c) {
  j = json{{"M", c.M},
           {"N", c.N},
           {"J", c.J},
           {"C", c.C},
           {"L1", c.L1},
           {"L2", c.L2},
           {"L3", c.L3},
           {"h_s", c.h_s},
           {"h_t", c.h_t},
           {"mlp_ratio", c.mlp_ratio},
           {"ln_eps", c.ln_eps},
           {"dropout", c.dropout},
           {"dtype", std::string(dtype_name(c.dtype))},
           {"parallel_mhg", c.parallel_mhg},
           {"cross_roles", c.cross_roles == CrossRoles::cyclic ? "cyclic" : "reverse"},
           {"any_m", c.any_m},
           {"hypothesis_heads", c.hypothesis_heads}};
}

inline void from_json(const json& j, ModelConfig& c) {
  detail::reject_unknown(j,
                         {"M", "N", "J", "C", "L1", "L2", "L3", "h_s", "h_t", "mlp_ratio",
                          "ln_eps", "dropout", "dtype", "parallel_mhg", "cross_roles", "any_m",
                          "hypothesis_heads"},
                         "model");
  using detail::read_field;
  read_field(j, "M", c.M);
  read_field(j, "N", c.N);
  read_field(j, "J", c.J);
  read_field(j, "C", c.C);
  read_field(j, "L1", c.L1);
  read_field(j, "L2", c.L2);
  read_field(j, "L3", c.L3);
  read_field(j, "h_s", c.h_s);
  read_field(j, "h_t", c.h_t);
  read_field(j, "mlp_ratio", c.mlp_ratio);
  read_field(j, "ln_eps", c.ln_eps);
  read_field(j, "dropout", c.dropout);
  std::string s;
  read_field(j, "dtype", s);
  if (!s.empty()) c.dtype = parse_dtype(s);
  read_field(j, "parallel_mhg", c.parallel_mhg);
  s.clear();
  read_field(j, "cross_roles", s);
  if (s == "cyclic") c.cross_roles = CrossRoles::cyclic;
  else if (s == "reverse") c.cross_roles = CrossRoles::reverse;
  else if (!s.empty()) throw ParseError("cross_roles must be 'cyclic' or 'reverse'", "cross_roles");
  read_field(j, "any_m", c.any_m);
  read_field(j, "hypothesis_heads", c.hypothesis_heads);
}

inline void to_json(json& j, const TrainConfig& c) {
  j = json{{"base_lr", c.base_lr},
           {"epoch_decay", c.epoch_decay},
           {"step_decay", c.step_decay},
           {"step_every", c.step_every},
           {"epochs", c.epochs},
           {"batch_size", c.batch_size},
           {"seed", c.seed},
           {"flip_prob", c.flip_prob},
           {"normalize", c.normalize},
           {"squared_loss", c.squared_loss},
           {"beta1", c.beta1},
           {"beta2", c.beta2},
           {"adam_eps", c.adam_eps},
           {"hypothesis_aux_weight", c.hypothesis_aux_weight}};
}

inline void from_json(const json& j, TrainConfig& c) {
  detail::reject_unknown(j,
                         {"base_lr", "epoch_decay", "step_decay", "step_every", "epochs",
                          "batch_size", "seed", "flip_prob", "normalize", "squared_loss",
                          "beta1", "beta2", "adam_eps", "hypothesis_aux_weight"},
                         "train");
  using detail::read_field;
  read_field(j, "base_lr", c.base_lr);
  read_field(j, "epoch_decay", c.epoch_decay);
  read_field(j, "step_decay", c.step_decay);
  read_field(j, "step_every", c.step_every);
  read_field(j, "epochs", c.epochs);
  read_field(j, "batch_size", c.batch_size);
  read_field(j, "seed", c.seed);
  read_field(j, "flip_prob", c.flip_prob);
  read_field(j, "normalize", c.normalize);
  read_field(j, "squared_loss", c.squared_loss);
  read_field(j, "beta1", c.beta1);
  read_field(j, "beta2", c.beta2);
  read_field(j, "adam_eps", c.adam_eps);
  read_field(j, "hypothesis_aux_weight", c.hypothesis_aux_weight);
}

// The tiny configuration used by gradient checks and fast tests.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.M = 3;
  c.N = 9;
  c.J = 2;
  c.C = 8;
  c.L1 = c.L2 = c.L3 = 1;
  c.h_s = 3;
  c.h_t = 2;
  c.dtype = DType::float64;
  return c;
}

}  // namespace mhf
