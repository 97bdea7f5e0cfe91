#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "mhformer/model.hpp"
#include "mhformer/skeleton.hpp"
#include "mhformer/windows.hpp"

namespace mhf {

/// Σ over batch, frames and joints of the per-joint Euclidean distance
/// (or its square). With `normalize` the sum is divided by B·N·J.
template <typename T>
Tensor<T> pose_loss(const Tensor<T>& pred, const Tensor<T>& gt, bool normalize = true,
                    bool squared = false) {
  if (pred.shape() != gt.shape())
    throw ShapeError("pose_loss shape mismatch " + shape_str(pred.shape()) + " vs " +
                     shape_str(gt.shape()));
  if (pred.shape().back() != 3) throw ShapeError("pose_loss expects trailing extent 3");
  Tensor<T> s = row_distance_sum(pred, gt, squared);
  if (!normalize) return s;
  return scale(s, T(1) / T(pred.numel() / 3));
}

inline double lr_at(std::size_t epoch, const TrainConfig& tc) {
  return tc.base_lr * std::pow(tc.epoch_decay, double(epoch)) *
         std::pow(tc.step_decay, double(epoch / tc.step_every));
}

template <typename T>
struct Moments {
  Tensor<T> m, v, vmax;
};

/// Adam with the running maximum of the second moment in the denominator.
template <typename T>
class Amsgrad {
 public:
  Amsgrad() = default;
  Amsgrad(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  std::uint64_t steps() const { return steps_; }
  void set_steps(std::uint64_t s) { steps_ = s; }
  void configure(double beta1, double beta2, double eps) {
    beta1_ = beta1;
    beta2_ = beta2;
    eps_ = eps;
  }
  double beta1() const { return beta1_; }
  double beta2() const { return beta2_; }
  double eps() const { return eps_; }
  const std::map<std::string, Moments<T>>& moments() const { return state_; }
  std::map<std::string, Moments<T>>& moments() { return state_; }

  /// Updates every parameter that holds a gradient. If any gradient is not
  /// finite nothing changes and NumericalError is thrown.
  void step(ModelParams<T>& params, double lr) {
    for (const auto& [name, p] : params.entries()) {
      if (!p.has_grad()) continue;
      for (T g : p.grad_data())
        if (!std::isfinite(double(g)))
          throw NumericalError("non-finite gradient in '" + name + "'; step rejected");
    }
    ++steps_;
    const double bc1 = 1.0 - std::pow(beta1_, double(steps_));
    const double bc2 = 1.0 - std::pow(beta2_, double(steps_));
    const double step_size = lr / bc1, root_bc2 = std::sqrt(bc2);
    for (auto& [name, p] : params.entries()) {
      if (!p.has_grad()) continue;
      auto it = state_.find(name);
      if (it == state_.end())
        it = state_.emplace(name, Moments<T>{Tensor<T>(p.shape()), Tensor<T>(p.shape()),
                                              Tensor<T>(p.shape())})
                 .first;
      Moments<T>& s = it->second;
      if (s.m.shape() != p.shape())
        throw ShapeError("optimizer state for '" + name + "' does not match the parameter");
      auto g = p.grad_data();
      auto theta = p.data();
      auto m = s.m.data(), v = s.v.data(), vmax = s.vmax.data();
      for (std::size_t i = 0; i < theta.size(); ++i) {
        m[i] = T(beta1_ * m[i] + (1 - beta1_) * g[i]);
        v[i] = T(beta2_ * v[i] + (1 - beta2_) * double(g[i]) * g[i]);
        vmax[i] = std::max(vmax[i], v[i]);
        const double denom = std::sqrt(double(vmax[i])) / root_bc2 + eps_;
        theta[i] = T(theta[i] - step_size * m[i] / denom);
      }
    }
  }

 private:
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::uint64_t steps_ = 0;
  std::map<std::string, Moments<T>> state_;
};

/// Mirror in place: negate x and swap left/right joints. `data` holds
/// `groups` blocks of J joints with `dims` coordinates each.
template <typename V>
void hflip_inplace(V* data, std::size_t groups, std::size_t J, std::size_t dims,
                   const std::vector<std::size_t>& perm) {
  if (perm.size() != J) throw ValidationError("hflip: pair table does not match joint count");
  std::vector<V> tmp(J * dims);
  for (std::size_t g = 0; g < groups; ++g) {
    V* p = data + g * J * dims;
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t k = 0; k < dims; ++k)
        tmp[perm[j] * dims + k] = k == 0 ? -p[j * dims + k] : p[j * dims + k];
    std::copy(tmp.begin(), tmp.end(), p);
  }
}

/// Flip of a [..., J, 2|3] tensor (not differentiated).
template <typename T>
Tensor<T> hflip(const Tensor<T>& x, const Skeleton& sk) {
  if (x.rank() < 2) throw ShapeError("hflip expects [..., J, dims]");
  const std::size_t dims = x.shape().back(), J = x.dim(x.rank() - 2);
  if (J != sk.joints()) throw ValidationError("hflip: skeleton has a different joint count");
  Tensor<T> out = x.detach();
  hflip_inplace(out.data().data(), x.numel() / (J * dims), J, dims, sk.flip_permutation());
  return out;
}

inline PoseSequence hflip(const PoseSequence& seq) {
  PoseSequence out = seq;
  hflip_inplace(out.coords.data(), out.frames, out.joints, std::size_t(out.dims),
                seq.skeleton.flip_permutation());
  return out;
}

template <typename T>
Tensor<T> batch_tensor(const WindowSet& w, const std::vector<std::size_t>& idx, bool targets) {
  const std::size_t dims = targets ? 3 : 2, per = w.N * w.J * dims;
  std::vector<T> buf(idx.size() * per);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const double* src = targets ? w.y_window(idx[b]) : w.x_window(idx[b]);
    for (std::size_t i = 0; i < per; ++i) buf[b * per + i] = T(src[i]);
  }
  return Tensor<T>({idx.size(), w.N, w.J, dims}, std::move(buf));
}

template <typename T>
struct TrainState {
  ModelParams<T> params;
  Amsgrad<T> optim;
  std::size_t epoch = 0;  // completed epochs
  double last_loss = std::nan("");
};

struct StepRecord {
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  double lr = 0;
  double loss = 0;  // pose loss; auxiliary head terms excluded
};

struct TrainHistory {
  std::vector<StepRecord> steps;
  std::vector<double> epoch_loss;  // mean step loss per epoch, in run order

  std::string csv(bool header = true) const {
    std::string s = header ? "epoch,step,lr,loss\n" : "";
    char line[128];
    for (const auto& r : steps) {
      std::snprintf(line, sizeof line, "%zu,%llu,%.10g,%.10g\n", r.epoch,
                    static_cast<unsigned long long>(r.step), r.lr, r.loss);
      s += line;
    }
    return s;
  }
};

inline std::mt19937_64 epoch_rng(std::uint64_t seed, std::size_t epoch) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(epoch),
                    std::uint32_t(0x6d686663u)};
  return std::mt19937_64(seq);
}

template <typename T>
using EpochCallback =
    std::function<void(const TrainState<T>&, const TrainHistory&, double epoch_mean_loss)>;

/// Runs epochs state.epoch … tc.epochs−1. Each epoch shuffles the windows,
/// flips (input and target together) with probability flip_prob and steps
/// Amsgrad once per batch at the epoch's learning rate. Everything random
/// comes from a generator seeded by (seed, epoch), so a resumed run matches
/// an uninterrupted one.
template <typename T>
TrainHistory train(TrainState<T>& st, const ModelConfig& cfg, const TrainConfig& tc,
                   const WindowSet& data, const Skeleton& sk,
                   const EpochCallback<T>& on_epoch = {}) {
  cfg.validate();
  tc.validate();
  check_params(st.params, cfg);
  if (!data.has_targets()) throw ValidationError("training windows carry no 3D targets");
  if (data.size() == 0) throw ValidationError("no training windows");
  if (data.N != cfg.N || data.J != cfg.J)
    throw ValidationError("training windows are N=" + std::to_string(data.N) + ", J=" +
                          std::to_string(data.J) + " but the model expects N=" +
                          std::to_string(cfg.N) + ", J=" + std::to_string(cfg.J));
  if (sk.joints() != cfg.J) throw ValidationError("skeleton joint count does not match the model");
  const bool aux = tc.hypothesis_aux_weight > 0 && cfg.hypothesis_heads;

  TrainHistory hist;
  st.optim.configure(tc.beta1, tc.beta2, tc.adam_eps);
  st.params.set_requires_grad(true);
  for (std::size_t epoch = st.epoch; epoch < tc.epochs; ++epoch) {
    std::mt19937_64 rng = epoch_rng(tc.seed, epoch);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t(0));
    std::shuffle(order.begin(), order.end(), rng);
    const double lr = lr_at(epoch, tc);
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    double epoch_sum = 0;
    std::size_t batches = 0;
    for (std::size_t begin = 0, b = 0; begin < order.size(); begin += tc.batch_size, ++b) {
      const std::vector<std::size_t> idx(order.begin() + begin,
                                         order.begin() + std::min(order.size(), begin + tc.batch_size));
      Tensor<T> x = batch_tensor<T>(data, idx, false);
      Tensor<T> y = batch_tensor<T>(data, idx, true);
      const std::size_t xs = cfg.N * cfg.J * 2, ys = cfg.N * cfg.J * 3;
      const auto perm = sk.flip_permutation();
      for (std::size_t i = 0; i < idx.size(); ++i)
        if (coin(rng) < tc.flip_prob) {
          hflip_inplace(x.data().data() + i * xs, cfg.N, cfg.J, 2, perm);
          hflip_inplace(y.data().data() + i * ys, cfg.N, cfg.J, 3, perm);
        }
      double loss_value;
      try {
        st.params.zero_grad();
        GradTape<T> tape;
        ForwardOptions opt;
        opt.training = true;
        opt.rng = &rng;
        ForwardResult<T> fr = forward(x, st.params, cfg, opt);
        Tensor<T> loss = pose_loss(fr.seq, y, tc.normalize, tc.squared_loss);
        loss_value = double(loss.item());
        if (aux) {
          HypothesisSet<T> detached;
          for (const auto& z : fr.refined) detached.push_back(z.detach());
          for (const auto& h : hypothesis_decode(detached, st.params, cfg))
            loss = add(loss, scale(pose_loss(h, y, tc.normalize, tc.squared_loss),
                                   T(tc.hypothesis_aux_weight)));
        }
        if (!std::isfinite(double(loss.item()))) throw NumericalError("loss is not finite");
        tape.backward(loss);
        st.optim.step(st.params, lr);
      } catch (const NumericalError& e) {
        st.params.zero_grad();
        throw NumericalError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(b) + ": " + e.what());
      }
      hist.steps.push_back({epoch, st.optim.steps(), lr, loss_value});
      epoch_sum += loss_value;
      ++batches;
    }
    st.params.zero_grad();
    const double mean = epoch_sum / double(batches);
    hist.epoch_loss.push_back(mean);
    st.epoch = epoch + 1;
    st.last_loss = mean;
    if (on_epoch) on_epoch(st, hist, mean);
  }
  st.params.zero_grad();
  st.params.set_requires_grad(false);
  return hist;
}

/// Centre-frame predictions for a batch of windows, [B, J, 3].
template <typename T>
Tensor<T> predict(const Tensor<T>& x, const ModelParams<T>& params, const ModelConfig& cfg) {
  return forward(x, params, cfg).center;
}

/// Mean of pred(x) and the un-flipped prediction for hflip(x).
template <typename T>
Tensor<T> test_time_flip(const Tensor<T>& x, const ModelParams<T>& params, const ModelConfig& cfg,
                         const Skeleton& sk) {
  const Tensor<T> a = predict(x, params, cfg);
  const Tensor<T> b = hflip(predict(hflip(x, sk), params, cfg), sk);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = T(0.5) * (a[i] + b[i]);
  return out;
}

/// Centre-frame pose of every window (root-relative metres), count × J × 3.
template <typename T>
std::vector<double> predict_windows(const ModelParams<T>& params, const ModelConfig& cfg,
                                    const WindowSet& w, const Skeleton& sk, bool flip = false,
                                    std::size_t batch = 64) {
  if (w.N != cfg.N || w.J != cfg.J)
    throw ValidationError("windows (N=" + std::to_string(w.N) + ", J=" + std::to_string(w.J) +
                          ") do not match the model (N=" + std::to_string(cfg.N) + ", J=" +
                          std::to_string(cfg.J) + ")");
  std::vector<double> out;
  out.reserve(w.size() * cfg.J * 3);
  for (std::size_t begin = 0; begin < w.size(); begin += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = begin; i < std::min(w.size(), begin + batch); ++i) idx.push_back(i);
    const Tensor<T> x = batch_tensor<T>(w, idx, false);
    const Tensor<T> c = flip ? test_time_flip(x, params, cfg, sk) : predict(x, params, cfg);
    for (T v : c.data()) out.push_back(double(v));
  }
  return out;
}

/// Centre-frame pose of every window from each hypothesis head, M × (count × J × 3).
template <typename T>
std::vector<std::vector<double>> predict_hypotheses(const ModelParams<T>& params,
                                                    const ModelConfig& cfg, const WindowSet& w,
                                                    std::size_t batch = 64) {
  std::vector<std::vector<double>> out(cfg.M);
  const std::size_t frame = cfg.J * 3;
  for (std::size_t begin = 0; begin < w.size(); begin += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = begin; i < std::min(w.size(), begin + batch); ++i) idx.push_back(i);
    const Tensor<T> x = batch_tensor<T>(w, idx, false);
    const auto hyps = hypothesis_decode(forward(x, params, cfg).refined, params, cfg);
    for (std::size_t m = 0; m < cfg.M; ++m)
      for (std::size_t b = 0; b < idx.size(); ++b) {
        const T* p = hyps[m].data().data() + (b * cfg.N + cfg.center()) * frame;
        out[m].insert(out[m].end(), p, p + frame);
      }
  }
  return out;
}

}  // namespace mhf
