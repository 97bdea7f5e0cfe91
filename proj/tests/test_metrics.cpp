#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <random>

#include <Eigen/Geometry>
#include <gtest/gtest.h>

#include "mhformer/metrics.hpp"

using namespace mhf;

namespace {

Pose3 random_pose(std::mt19937_64& rng, std::size_t J = 17, double scale = 300.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Pose3 p(J, 3);
  for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = nd(rng);
  return p;
}

Eigen::Matrix3d random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  const Eigen::Vector3d axis(nd(rng), nd(rng), nd(rng));
  std::uniform_real_distribution<double> ang(-M_PI, M_PI);
  return Eigen::AngleAxisd(ang(rng), axis.normalized()).toRotationMatrix();
}

Pose3 similarity(const Pose3& x, double s, const Eigen::Matrix3d& R, const Eigen::RowVector3d& t) {
  Pose3 out = s * x * R.transpose();
  out.rowwise() += t;
  return out;
}

using Vec7 = std::array<double, 7>;

// Plain Nelder–Mead with the standard coefficients.
Vec7 nelder_mead(const std::function<double(const Vec7&)>& f, Vec7 x0, double step, int iters) {
  std::array<Vec7, 8> s;
  std::array<double, 8> fs;
  for (int i = 0; i < 8; ++i) {
    s[i] = x0;
    if (i > 0) s[i][i - 1] += step;
    fs[i] = f(s[i]);
  }
  for (int it = 0; it < iters; ++it) {
    std::array<int, 8> idx;
    for (int i = 0; i < 8; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](int a, int b) { return fs[a] < fs[b]; });
    std::array<Vec7, 8> s2;
    std::array<double, 8> f2;
    for (int i = 0; i < 8; ++i) {
      s2[i] = s[idx[i]];
      f2[i] = fs[idx[i]];
    }
    s = s2;
    fs = f2;
    Vec7 c{};
    for (int i = 0; i < 7; ++i)
      for (int k = 0; k < 7; ++k) c[k] += s[i][k] / 7.0;
    auto along = [&](double a) {
      Vec7 p;
      for (int k = 0; k < 7; ++k) p[k] = c[k] + a * (s[7][k] - c[k]);
      return p;
    };
    const Vec7 r = along(-1.0);
    const double fr = f(r);
    if (fr < fs[0]) {
      const Vec7 e = along(-2.0);
      const double fe = f(e);
      if (fe < fr) {
        s[7] = e;
        fs[7] = fe;
      } else {
        s[7] = r;
        fs[7] = fr;
      }
    } else if (fr < fs[6]) {
      s[7] = r;
      fs[7] = fr;
    } else {
      const Vec7 k = fr < fs[7] ? along(-0.5) : along(0.5);
      const double fk = f(k);
      if (fk < std::min(fr, fs[7])) {
        s[7] = k;
        fs[7] = fk;
      } else {
        for (int i = 1; i < 8; ++i) {
          for (int q = 0; q < 7; ++q) s[i][q] = s[0][q] + 0.5 * (s[i][q] - s[0][q]);
          fs[i] = f(s[i]);
        }
      }
    }
  }
  return *std::min_element(s.begin(), s.end(),
                           [&](const Vec7& a, const Vec7& b) { return f(a) < f(b); });
}

Pose3 apply_params(const Pose3& x, const Vec7& v) {
  const Eigen::Vector3d w(v[0], v[1], v[2]);
  const double ang = w.norm();
  const Eigen::Matrix3d R = ang > 0 ? Eigen::AngleAxisd(ang, w / ang).toRotationMatrix()
                                    : Eigen::Matrix3d::Identity();
  return similarity(x, std::exp(v[3]), R, Eigen::RowVector3d(v[4], v[5], v[6]));
}

// Least-squares similarity fit found by direct search, restarted until stable.
double searched_alignment_error(const Pose3& pred, const Pose3& gt) {
  auto f = [&](const Vec7& v) { return (apply_params(pred, v) - gt).squaredNorm(); };
  Vec7 best{};
  double fbest = f(best);
  std::mt19937_64 rng(0);
  std::normal_distribution<double> nd;
  for (int start = 0; start < 12; ++start) {
    Vec7 x0{};
    for (int k = 0; k < 3; ++k) x0[k] = 1.5 * nd(rng);
    for (int k = 4; k < 7; ++k) x0[k] = (gt.col(k - 4).mean() - pred.col(k - 4).mean());
    Vec7 x = x0;
    for (int round = 0; round < 6; ++round)
      x = nelder_mead(f, x, round == 0 ? 0.5 : 0.01 / (round * round), 1500);
    if (f(x) < fbest) {
      best = x;
      fbest = f(x);
    }
  }
  return mpjpe(apply_params(pred, best), gt);
}

}  // namespace

TEST(Metrics, PythagoreanTriple) {
  Pose3 a = Pose3::Zero(1, 3), b = Pose3::Zero(1, 3);
  b << 3, 4, 0;
  EXPECT_EQ(mpjpe(a, b), 5.0);
}

TEST(Metrics, MpjpeIsAMetric) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 100; ++i) {
    const Pose3 a = random_pose(rng), b = random_pose(rng), c = random_pose(rng);
    EXPECT_EQ(mpjpe(a, a), 0.0);
    EXPECT_DOUBLE_EQ(mpjpe(a, b), mpjpe(b, a));
    EXPECT_LE(mpjpe(a, c), mpjpe(a, b) + mpjpe(b, c) + 1e-9);
  }
}

TEST(Metrics, MpjpeIsInvariantToCommonRigidMotion) {
  std::mt19937_64 rng(2);
  const Pose3 a = random_pose(rng), b = random_pose(rng);
  const Eigen::Matrix3d R = random_rotation(rng);
  const Eigen::RowVector3d t(100, -50, 2000);
  EXPECT_NEAR(mpjpe(similarity(a, 1, R, t), similarity(b, 1, R, t)), mpjpe(a, b), 1e-9);
}

TEST(Metrics, ProcrustesRecoversSimilarityTransform) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 50; ++i) {
    const Pose3 gt = random_pose(rng);
    std::uniform_real_distribution<double> sc(0.2, 5.0);
    const Pose3 pred =
        similarity(gt, sc(rng), random_rotation(rng), Eigen::RowVector3d(1e3, -2e3, 5e2) * sc(rng));
    EXPECT_LT(p_mpjpe(pred, gt), 1e-6);
  }
}

TEST(Metrics, ProcrustesOfIdentityIsIdentity) {
  std::mt19937_64 rng(4);
  const Pose3 gt = random_pose(rng);
  EXPECT_LT((procrustes_align(gt, gt) - gt).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Metrics, ProcrustesUsesProperRotations) {
  std::mt19937_64 rng(5);
  const Pose3 gt = random_pose(rng);
  Pose3 mirrored = gt;
  mirrored.col(0) *= -1;
  const Pose3 aligned = procrustes_align(mirrored, gt);
  // A reflection cannot be undone, so some error must remain.
  EXPECT_GT(mpjpe(aligned, gt), 1.0);
  const Eigen::RowVector3d mp = mirrored.colwise().mean(), mg = gt.colwise().mean();
  const Pose3 X = mirrored.rowwise() - mp, Y = aligned.rowwise() - mg;
  const Eigen::Matrix3d fit = X.colPivHouseholderQr().solve(Y);
  EXPECT_GT(fit.determinant(), 0.0);
}

TEST(Metrics, ProcrustesMatchesDirectSearch) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 3; ++trial) {
    const Pose3 gt = random_pose(rng, 10);
    Pose3 pred = similarity(gt, 0.7, random_rotation(rng), Eigen::RowVector3d(30, 40, -20));
    pred += random_pose(rng, 10, 60.0);
    const double closed = p_mpjpe(pred, gt);
    const double searched = searched_alignment_error(pred, gt);
    EXPECT_NEAR(closed, searched, 1e-6 * closed) << "trial " << trial;
  }
}

TEST(Metrics, AlignedErrorNeverExceedsRawError) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 1000; ++i) {
    const Pose3 gt = random_pose(rng), pred = random_pose(rng);
    EXPECT_LE(p_mpjpe(pred, gt), mpjpe(pred, gt) + 1e-9);
  }
}

TEST(Metrics, ProcrustesDegenerateInputs) {
  std::mt19937_64 rng(8);
  const Pose3 gt = random_pose(rng, 5);
  const Pose3 collapsed = Pose3::Constant(5, 3, 7.0);
  const Pose3 out = procrustes_align(collapsed, gt);
  for (Eigen::Index j = 0; j < 5; ++j)
    EXPECT_LT((out.row(j) - gt.colwise().mean()).norm(), 1e-9);
  EXPECT_THROW(procrustes_align(gt, collapsed), ValidationError);
  EXPECT_THROW(procrustes_align(Pose3::Zero(2, 3), Pose3::Ones(2, 3)), ValidationError);
  EXPECT_THROW(procrustes_align(gt, random_pose(rng, 4)), ShapeError);
}

TEST(Metrics, PckCountsStrictlyBelowThreshold) {
  Pose3 gt = Pose3::Zero(4, 3), pred = Pose3::Zero(4, 3);
  pred(0, 0) = 10;
  pred(1, 0) = 150;
  pred(2, 0) = 149.999;
  pred(3, 0) = 400;
  EXPECT_DOUBLE_EQ(pck({pred}, {gt}, 150.0), 50.0);
  EXPECT_DOUBLE_EQ(pck({pred}, {gt}, 1000.0), 100.0);
  EXPECT_DOUBLE_EQ(pck({pred}, {gt}, 5.0), 0.0);
  EXPECT_THROW(pck({}, {}, 150.0), ValidationError);
}

TEST(Metrics, PckIsMonotoneInThreshold) {
  std::mt19937_64 rng(9);
  std::vector<Pose3> preds, gts;
  for (int i = 0; i < 20; ++i) {
    gts.push_back(random_pose(rng));
    preds.push_back(gts.back() + random_pose(rng, 17, 80.0));
  }
  double prev = -1;
  for (double t = 0; t <= 400; t += 7.5) {
    const double v = pck(preds, gts, t);
    EXPECT_GE(v, prev);
    prev = v;
  }
}

TEST(Metrics, AucAveragesTheGrid) {
  const auto grid = default_auc_grid();
  ASSERT_EQ(grid.size(), 30u);
  EXPECT_EQ(grid.front(), 5.0);
  EXPECT_EQ(grid.back(), 150.0);
  Pose3 gt = Pose3::Zero(1, 3), pred = Pose3::Zero(1, 3);
  pred(0, 2) = 52;  // below thresholds 55..150: 20 of 30
  EXPECT_NEAR(auc({pred}, {gt}), 100.0 * 20 / 30, 1e-12);
  EXPECT_DOUBLE_EQ(auc({gt}, {gt}), 100.0);
  EXPECT_THROW(auc({pred}, {gt}, {}), ValidationError);
}

TEST(Metrics, EvaluationReport) {
  std::mt19937_64 rng(10);
  std::vector<Pose3> preds, gts;
  double raw = 0;
  for (int i = 0; i < 5; ++i) {
    gts.push_back(random_pose(rng));
    preds.push_back(gts.back() + random_pose(rng, 17, 20.0));
    raw += mpjpe(preds.back(), gts.back());
  }
  const auto r = evaluate_poses(preds, gts);
  EXPECT_EQ(r.count, 5u);
  EXPECT_NEAR(r.mpjpe_mm, raw / 5, 1e-9);
  EXPECT_LE(r.p_mpjpe_mm, r.mpjpe_mm);
  const auto j = r.to_json();
  EXPECT_EQ(j["config"]["pck_threshold_mm"], 150.0);
  EXPECT_EQ(j["config"]["auc_thresholds_mm"].size(), 30u);
  EXPECT_THROW(evaluate_poses(preds, {}), ShapeError);
}
