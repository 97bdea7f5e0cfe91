#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "mhformer/error.hpp"

namespace mhf {

/// J × 3 pose, one joint per row.
using Pose3 = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

inline Pose3 pose_from(const double* p, std::size_t J) {
  return Eigen::Map<const Pose3>(p, Eigen::Index(J), 3);
}

struct PoseError {
  std::vector<double> per_joint;
  double mean = 0.0;
};

inline void check_pair(const Pose3& a, const Pose3& b, const char* what) {
  if (a.rows() != b.rows())
    throw ShapeError(std::string(what) + ": joint counts differ (" + std::to_string(a.rows()) +
                     " vs " + std::to_string(b.rows()) + ")");
  if (a.rows() == 0) throw ShapeError(std::string(what) + ": empty pose");
}

inline PoseError pose_error(const Pose3& pred, const Pose3& gt) {
  check_pair(pred, gt, "pose_error");
  PoseError e;
  double s = 0;
  for (Eigen::Index j = 0; j < pred.rows(); ++j) {
    e.per_joint.push_back((pred.row(j) - gt.row(j)).norm());
    s += e.per_joint.back();
  }
  e.mean = s / double(pred.rows());
  return e;
}

inline double mpjpe(const Pose3& pred, const Pose3& gt) { return pose_error(pred, gt).mean; }

/// Optimal similarity alignment of pred onto gt (least squares), restricted
/// to proper rotations.
inline Pose3 procrustes_align(const Pose3& pred, const Pose3& gt) {
  check_pair(pred, gt, "procrustes_align");
  if (pred.rows() < 3) throw ValidationError("procrustes_align needs at least 3 joints");
  const Eigen::RowVector3d mp = pred.colwise().mean(), mg = gt.colwise().mean();
  const Pose3 X = pred.rowwise() - mp, Y = gt.rowwise() - mg;
  const double y2 = Y.squaredNorm(), x2 = X.squaredNorm();
  if (!(y2 > 0)) throw ValidationError("procrustes_align: ground truth joints coincide");
  Pose3 out(pred.rows(), 3);
  if (!(x2 > 0)) {
    out.rowwise() = mg;
    return out;
  }
  const Eigen::Matrix3d H = X.transpose() * Y;
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Matrix3d U = svd.matrixU(), V = svd.matrixV();
  Eigen::Vector3d d(1, 1, (V * U.transpose()).determinant() < 0 ? -1 : 1);
  const Eigen::Matrix3d R = V * d.asDiagonal() * U.transpose();  // y ≈ s·R·x
  const double s = svd.singularValues().dot(d) / x2;
  out = (s * X * R.transpose()).rowwise() + mg;
  return out;
}

inline double p_mpjpe(const Pose3& pred, const Pose3& gt) {
  return mpjpe(procrustes_align(pred, gt), gt);
}

namespace detail {
inline void check_sets(const std::vector<Pose3>& preds, const std::vector<Pose3>& gts,
                       const char* what) {
  if (preds.empty()) throw ValidationError(std::string(what) + ": no poses");
  if (preds.size() != gts.size())
    throw ShapeError(std::string(what) + ": prediction and ground-truth counts differ");
}
}  // namespace detail

/// Percentage of joints whose error is strictly below the threshold (mm).
inline double pck(const std::vector<Pose3>& preds, const std::vector<Pose3>& gts,
                  double threshold_mm = 150.0) {
  detail::check_sets(preds, gts, "pck");
  std::size_t hit = 0, total = 0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    for (double e : pose_error(preds[i], gts[i]).per_joint) {
      hit += e < threshold_mm;
      ++total;
    }
  return 100.0 * double(hit) / double(total);
}

inline std::vector<double> default_auc_grid() {
  std::vector<double> g;
  for (int t = 5; t <= 150; t += 5) g.push_back(t);
  return g;
}

inline double auc(const std::vector<Pose3>& preds, const std::vector<Pose3>& gts,
                  const std::vector<double>& thresholds = default_auc_grid()) {
  if (thresholds.empty()) throw ValidationError("auc: empty threshold grid");
  double s = 0;
  for (double t : thresholds) s += pck(preds, gts, t);
  return s / double(thresholds.size());
}

struct EvalReport {
  std::size_t count = 0;
  double mpjpe_mm = 0, p_mpjpe_mm = 0, pck150 = 0, auc = 0;
  nlohmann::json config;

  nlohmann::json to_json() const {
    return {{"count", count},   {"mpjpe_mm", mpjpe_mm}, {"p_mpjpe_mm", p_mpjpe_mm},
            {"pck150", pck150}, {"auc", auc},           {"config", config}};
  }
};

/// Per-pose metrics averaged over the set. Poses in millimetres.
inline EvalReport evaluate_poses(const std::vector<Pose3>& preds, const std::vector<Pose3>& gts) {
  detail::check_sets(preds, gts, "evaluate");
  EvalReport r;
  r.count = preds.size();
  for (std::size_t i = 0; i < preds.size(); ++i) {
    r.mpjpe_mm += mpjpe(preds[i], gts[i]);
    r.p_mpjpe_mm += preds[i].rows() >= 3 ? p_mpjpe(preds[i], gts[i]) : mpjpe(preds[i], gts[i]);
  }
  r.mpjpe_mm /= double(r.count);
  r.p_mpjpe_mm /= double(r.count);
  r.pck150 = pck(preds, gts, 150.0);
  r.auc = auc(preds, gts);
  std::vector<double> grid = default_auc_grid();
  r.config = {{"auc_thresholds_mm", grid}, {"pck_threshold_mm", 150.0}};
  return r;
}

}  // namespace mhf
