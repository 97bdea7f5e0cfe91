#include <cmath>
#include <limits>
#include <random>

#include <Eigen/Geometry>
#include <gtest/gtest.h>

#include "data_fixture.hpp"
#include "mhformer/training.hpp"
#include "test_util.hpp"

using namespace mhf;
using testutil::random_tensor;

namespace {

ModelConfig toy_model() {
  auto c = tiny_config();
  c.J = 5;
  return c;
}

TrainConfig quick_train(std::size_t epochs = 2) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 4;
  t.seed = 42;
  return t;
}

const WindowSet& toy_data() {
  static const WindowSet w = testutil::synthetic_windows(toy_skeleton(), 12, 9, 3);
  return w;
}

bool same_params(const ModelParams<double>& a, const ModelParams<double>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a.entries()[i].first != b.entries()[i].first ||
        !bit_equal(a.entries()[i].second, b.entries()[i].second))
      return false;
  return true;
}

}  // namespace

TEST(Loss, PythagoreanTriple) {
  Tensor<double> pred({1, 1, 1, 3}), gt({1, 1, 1, 3});
  gt[0] = 3;
  gt[1] = 4;
  EXPECT_EQ(pose_loss(pred, gt).item(), 5.0);
  EXPECT_EQ(pose_loss(pred, gt, true, true).item(), 25.0);
}

TEST(Loss, MatchesDirectSum) {
  std::mt19937_64 rng(1);
  const auto p = random_tensor({2, 3, 4, 3}, rng), g = random_tensor({2, 3, 4, 3}, rng);
  double s = 0;
  for (std::size_t r = 0; r < 24; ++r)
    s += std::hypot(p[3 * r] - g[3 * r], p[3 * r + 1] - g[3 * r + 1], p[3 * r + 2] - g[3 * r + 2]);
  EXPECT_NEAR(pose_loss(p, g, false).item(), s, 1e-12);
  EXPECT_NEAR(pose_loss(p, g, true).item(), s / 24, 1e-13);
  EXPECT_THROW(pose_loss(p, random_tensor({2, 3, 4, 2}, rng)), ShapeError);
}

TEST(Loss, GradientIsFiniteAtZeroDistance) {
  std::mt19937_64 rng(2);
  auto p = random_tensor({1, 2, 2, 3}, rng);
  const auto g = p.clone();
  p.set_requires_grad();
  GradTape<double> tape;
  tape.backward(pose_loss(p, g));
  const auto grad = p.grad();
  for (double v : grad.data()) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_LT(std::abs(v), 1e-6);
  }
}

TEST(Loss, InvariantToBatchOrderAndRotation) {
  std::mt19937_64 rng(3);
  const auto p = random_tensor({3, 2, 4, 3}, rng), g = random_tensor({3, 2, 4, 3}, rng);
  const std::size_t per = 2 * 4 * 3;
  Tensor<double> pp(p.shape()), gp(g.shape()), pr(p.shape()), gr(g.shape());
  const std::size_t order[] = {2, 0, 1};
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t i = 0; i < per; ++i) {
      pp[b * per + i] = p[order[b] * per + i];
      gp[b * per + i] = g[order[b] * per + i];
    }
  EXPECT_NEAR(pose_loss(pp, gp).item(), pose_loss(p, g).item(), 1e-14);
  const Eigen::Matrix3d R =
      Eigen::AngleAxisd(0.7, Eigen::Vector3d(1, 2, 3).normalized()).toRotationMatrix();
  for (std::size_t r = 0; r < p.numel() / 3; ++r) {
    const Eigen::Vector3d a = R * Eigen::Vector3d(p[3 * r], p[3 * r + 1], p[3 * r + 2]);
    const Eigen::Vector3d b = R * Eigen::Vector3d(g[3 * r], g[3 * r + 1], g[3 * r + 2]);
    for (int k = 0; k < 3; ++k) {
      pr[3 * r + k] = a[k];
      gr[3 * r + k] = b[k];
    }
  }
  EXPECT_NEAR(pose_loss(pr, gr).item(), pose_loss(p, g).item(), 1e-12);
}

TEST(Schedule, DecaysPerEpochAndStep) {
  TrainConfig t;
  EXPECT_DOUBLE_EQ(lr_at(0, t), 0.001);
  EXPECT_DOUBLE_EQ(lr_at(1, t), 0.00095);
  EXPECT_DOUBLE_EQ(lr_at(4, t), 0.001 * std::pow(0.95, 4));
  EXPECT_DOUBLE_EQ(lr_at(5, t), 0.001 * std::pow(0.95, 5) * 0.5);
  EXPECT_DOUBLE_EQ(lr_at(10, t), 0.001 * std::pow(0.95, 10) * 0.25);
}

namespace {

// Runs `steps` optimizer steps on a single tensor whose gradient is `grads[s]`.
std::vector<double> run_amsgrad(const std::vector<std::vector<double>>& grads, double lr,
                                Amsgrad<double>& opt, std::vector<double> theta) {
  ModelParams<double> p;
  p.add("w", Tensor<double>({theta.size()}, theta));
  for (const auto& g : grads) {
    p.zero_grad();
    auto& w = p.at("w");
    w.set_requires_grad();
    GradTape<double> tape;
    tape.backward(sum(mul(w, Tensor<double>({g.size()}, g))));
    opt.step(p, lr);
  }
  return {p.at("w").data().begin(), p.at("w").data().end()};
}

}  // namespace

TEST(Amsgrad, FirstStepHandValue) {
  Amsgrad<double> opt;
  const auto out = run_amsgrad({{1.0}}, 0.001, opt, {0.5});
  EXPECT_NEAR(out[0] - 0.5, -0.001 / (1 + 1e-8), 1e-16);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(Amsgrad, MatchesScalarReference) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  std::vector<std::vector<double>> grads(25, std::vector<double>(3));
  for (auto& g : grads)
    for (auto& v : g) v = nd(rng) * (1 + 4 * std::abs(nd(rng)));
  const std::vector<double> start{0.1, -0.2, 0.3};
  Amsgrad<double> opt(0.8, 0.99, 1e-6);
  const auto got = run_amsgrad(grads, 0.01, opt, start);
  for (std::size_t i = 0; i < 3; ++i) {
    double th = start[i], m = 0, v = 0, vh = 0;
    for (std::size_t t = 1; t <= grads.size(); ++t) {
      const double g = grads[t - 1][i];
      m = 0.8 * m + 0.2 * g;
      v = 0.99 * v + 0.01 * g * g;
      vh = std::max(vh, v);
      const double bc1 = 1 - std::pow(0.8, double(t)), bc2 = 1 - std::pow(0.99, double(t));
      th -= 0.01 / bc1 * m / (std::sqrt(vh) / std::sqrt(bc2) + 1e-6);
    }
    EXPECT_NEAR(got[i], th, 1e-14);
  }
}

TEST(Amsgrad, MaxSecondMomentNeverDecreases) {
  ModelParams<double> p;
  p.add("w", Tensor<double>({1}, 0.0));
  Amsgrad<double> opt;
  double prev = 0;
  for (double g : {5.0, 0.1, 0.1, 3.0, 0.0, 0.01}) {
    p.zero_grad();
    auto& w = p.at("w");
    w.set_requires_grad();
    GradTape<double> tape;
    tape.backward(sum(mul(w, Tensor<double>({1}, g))));
    opt.step(p, 0.001);
    const double vmax = opt.moments().at("w").vmax[0];
    EXPECT_GE(vmax, prev);
    EXPECT_GE(vmax, opt.moments().at("w").v[0]);
    prev = vmax;
  }
}

TEST(Amsgrad, ZeroGradientFirstStepIsNoOp) {
  Amsgrad<double> opt;
  const auto out = run_amsgrad({{0.0, 0.0}}, 0.1, opt, {1.5, -2.0});
  EXPECT_EQ(out[0], 1.5);
  EXPECT_EQ(out[1], -2.0);
}

TEST(Amsgrad, SkipsParametersWithoutGradients) {
  ModelParams<double> p;
  p.add("a", Tensor<double>({1}, 1.0));
  p.add("b", Tensor<double>({1}, 1.0));
  p.at("a").set_requires_grad();
  {
    GradTape<double> tape;
    tape.backward(sum(p.at("a")));
  }
  Amsgrad<double> opt;
  opt.step(p, 0.1);
  EXPECT_NE(p.at("a")[0], 1.0);
  EXPECT_EQ(p.at("b")[0], 1.0);
  EXPECT_EQ(opt.moments().count("b"), 0u);
}

TEST(Amsgrad, RejectsNonFiniteGradient) {
  ModelParams<double> p;
  p.add("w", Tensor<double>({2}, 1.0));
  p.at("w").set_requires_grad();
  {
    GradTape<double> tape;
    tape.backward(sum(p.at("w")));
  }
  p.at("w").grad_data()[1] = std::numeric_limits<double>::quiet_NaN();
  Amsgrad<double> opt;
  EXPECT_THROW(opt.step(p, 0.1), NumericalError);
  EXPECT_EQ(p.at("w")[0], 1.0);
  EXPECT_EQ(opt.steps(), 0u);
}

TEST(Flip, IsAnInvolution) {
  const auto sk = h36m_skeleton();
  std::mt19937_64 rng(5);
  const auto x = random_tensor({2, 3, 17, 3}, rng);
  EXPECT_TRUE(bit_equal(hflip(hflip(x, sk), sk), x));
  const auto y = random_tensor({4, 17, 2}, rng);
  EXPECT_TRUE(bit_equal(hflip(hflip(y, sk), sk), y));
}

TEST(Flip, MirrorsAndSwapsPairs) {
  const auto sk = h36m_skeleton();
  std::mt19937_64 rng(6);
  const auto x = random_tensor({17, 3}, rng);
  const auto f = hflip(x, sk);
  const auto perm = sk.flip_permutation();
  for (std::size_t j = 0; j < 17; ++j) {
    EXPECT_EQ(f.at(perm[j], 0), -x.at(j, 0));
    EXPECT_EQ(f.at(perm[j], 1), x.at(j, 1));
    EXPECT_EQ(f.at(perm[j], 2), x.at(j, 2));
  }
  // Midline joints stay in place.
  for (std::size_t j : {0, 7, 8, 9, 10}) EXPECT_EQ(perm[j], j);
  EXPECT_EQ(perm[1], 4u);
  EXPECT_EQ(perm[16], 13u);
}

TEST(Flip, PoseSequenceFlip) {
  const auto seq = synth_generate(toy_skeleton(), 4, 7);
  const auto f = hflip(seq);
  EXPECT_EQ(f.at(2, 1, 0), -seq.at(2, 2, 0));
  EXPECT_EQ(hflip(f).coords, seq.coords);
}

TEST(Train, ZeroLearningRateLeavesParametersUnchanged) {
  const auto cfg = toy_model();
  auto tc = quick_train(2);
  tc.base_lr = 0;
  TrainState<double> st{init_params<double>(cfg, 1), {}, 0, 0};
  const auto before = st.params.clone();
  const auto hist = train(st, cfg, tc, toy_data(), toy_skeleton());
  EXPECT_TRUE(same_params(st.params, before));
  EXPECT_EQ(hist.steps.size(), 2 * 3u);
  EXPECT_EQ(st.epoch, 2u);
}

TEST(Train, DeterministicForFixedSeed) {
  const auto cfg = toy_model();
  const auto tc = quick_train(2);
  TrainState<double> a{init_params<double>(cfg, 1), {}, 0, 0};
  TrainState<double> b{init_params<double>(cfg, 1), {}, 0, 0};
  const auto ha = train(a, cfg, tc, toy_data(), toy_skeleton());
  const auto hb = train(b, cfg, tc, toy_data(), toy_skeleton());
  EXPECT_TRUE(same_params(a.params, b.params));
  EXPECT_EQ(ha.csv(), hb.csv());
  auto tc2 = tc;
  tc2.seed = 43;
  TrainState<double> c{init_params<double>(cfg, 1), {}, 0, 0};
  train(c, cfg, tc2, toy_data(), toy_skeleton());
  EXPECT_FALSE(same_params(a.params, c.params));
}

TEST(Train, ResumedRunMatchesUninterrupted) {
  const auto cfg = toy_model();
  auto tc = quick_train(3);
  TrainState<double> full{init_params<double>(cfg, 1), {}, 0, 0};
  const auto hf = train(full, cfg, tc, toy_data(), toy_skeleton());

  TrainState<double> part{init_params<double>(cfg, 1), {}, 0, 0};
  tc.epochs = 1;
  const auto h1 = train(part, cfg, tc, toy_data(), toy_skeleton());
  tc.epochs = 3;
  const auto h2 = train(part, cfg, tc, toy_data(), toy_skeleton());
  EXPECT_TRUE(same_params(full.params, part.params));
  EXPECT_EQ(h1.csv() + h2.csv(false), hf.csv());
}

TEST(Train, LossDecreasesOnSmallSet) {
  const auto cfg = toy_model();
  auto tc = quick_train(15);
  tc.flip_prob = 0;
  TrainState<double> st{init_params<double>(cfg, 1), {}, 0, 0};
  const auto h = train(st, cfg, tc, toy_data(), toy_skeleton());
  EXPECT_LT(h.epoch_loss.back(), 0.7 * h.epoch_loss.front());
}

TEST(Train, CallbackSeesEveryEpoch) {
  const auto cfg = toy_model();
  const auto tc = quick_train(3);
  TrainState<double> st{init_params<double>(cfg, 1), {}, 0, 0};
  std::vector<std::size_t> seen;
  train<double>(st, cfg, tc, toy_data(), toy_skeleton(),
                [&](const TrainState<double>& s, const TrainHistory&, double mean) {
                  seen.push_back(s.epoch);
                  EXPECT_EQ(s.last_loss, mean);
                });
  EXPECT_EQ(seen, (std::vector<std::size_t>{1, 2, 3}));
}

TEST(Train, NonFiniteDataReportsWhere) {
  const auto cfg = toy_model();
  auto data = toy_data();
  for (auto& v : data.x) v = std::numeric_limits<double>::quiet_NaN();
  TrainState<double> st{init_params<double>(cfg, 1), {}, 0, 0};
  try {
    train(st, cfg, quick_train(1), data, toy_skeleton());
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 0, batch 0"), std::string::npos) << e.what();
  }
}

TEST(Train, RejectsMismatchedData) {
  auto cfg = toy_model();
  TrainState<double> st{init_params<double>(cfg, 1), {}, 0, 0};
  auto no_targets = toy_data();
  no_targets.y.clear();
  EXPECT_THROW(train(st, cfg, quick_train(1), no_targets, toy_skeleton()), ValidationError);
  const auto wide = testutil::synthetic_windows(toy_skeleton(), 12, 11, 3);
  EXPECT_THROW(train(st, cfg, quick_train(1), wide, toy_skeleton()), ValidationError);
}

TEST(Train, AuxiliaryLossTrainsOnlyHypothesisHeads) {
  auto cfg = toy_model();
  cfg.hypothesis_heads = true;
  auto tc = quick_train(1);
  TrainState<double> a{init_params<double>(cfg, 1), {}, 0, 0};
  TrainState<double> b{init_params<double>(cfg, 1), {}, 0, 0};
  const auto ha = train(a, cfg, tc, toy_data(), toy_skeleton());
  tc.hypothesis_aux_weight = 1.0;
  const auto hb = train(b, cfg, tc, toy_data(), toy_skeleton());
  EXPECT_EQ(ha.csv(), hb.csv());
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    const auto& [name, t] = a.params.entries()[i];
    const bool head = name.rfind("hyp_head.", 0) == 0;
    EXPECT_EQ(bit_equal(t, b.params.entries()[i].second), !head) << name;
  }
}

TEST(Inference, FlipAveragingIsEquivariant) {
  const auto cfg = toy_model();
  const auto sk = toy_skeleton();
  auto p = init_params<double>(cfg, 8);
  std::mt19937_64 rng(9);
  for (auto& [_, t] : p.entries()) testutil::jitter(t, rng, 0.2);
  const auto x = random_tensor({2, cfg.N, cfg.J, 2}, rng);
  const auto a = hflip(test_time_flip(x, p, cfg, sk), sk);
  const auto b = test_time_flip(hflip(x, sk), p, cfg, sk);
  EXPECT_TRUE(bit_equal(a, b));
}

TEST(Inference, WindowPredictionsMatchBatchedForward) {
  const auto cfg = toy_model();
  const auto p = init_params<double>(cfg, 10);
  const auto& w = toy_data();
  const auto flat = predict_windows(p, cfg, w, toy_skeleton(), false, 5);
  ASSERT_EQ(flat.size(), w.size() * cfg.J * 3);
  std::vector<std::size_t> idx(w.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto c = predict(batch_tensor<double>(w, idx, false), p, cfg);
  for (std::size_t i = 0; i < flat.size(); ++i) EXPECT_NEAR(flat[i], c[i], 1e-14);
}

TEST(Inference, EpochGeneratorDependsOnSeedAndEpoch) {
  auto a = epoch_rng(1, 0), b = epoch_rng(1, 0), c = epoch_rng(1, 1), d = epoch_rng(2, 0);
  const auto va = a();
  EXPECT_EQ(va, b());
  EXPECT_NE(va, c());
  EXPECT_NE(va, d());
}
