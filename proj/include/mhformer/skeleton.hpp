#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "mhformer/error.hpp"

namespace mhf {

/// Joint tree with left/right pairing.
///
/// Joint 0 is the root and is its own parent; every other joint's parent has
/// a smaller index. bone_lengths_mm[j] is the length of the bone from j to
/// its parent (0 for the root). rest_dirs and motion_range_rad only drive
/// synthetic motion and are not serialized.
struct Skeleton {
  std::vector<std::string> names;
  std::vector<std::size_t> parents;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (left, right)
  std::vector<double> bone_lengths_mm;
  std::vector<std::array<double, 3>> rest_dirs;
  std::vector<double> motion_range_rad;

  std::size_t joints() const { return names.size(); }

  void validate() const {
    const std::size_t J = names.size();
    auto fail = [](const std::string& m) { throw ValidationError("skeleton: " + m); };
    if (J == 0) fail("no joints");
    if (parents.size() != J || bone_lengths_mm.size() != J)
      fail("names, parents and bone_lengths_mm must have equal length");
    if (parents[0] != 0) fail("joint 0 must be the root (its own parent)");
    for (std::size_t j = 1; j < J; ++j) {
      if (parents[j] >= j)
        fail("parent of joint " + std::to_string(j) + " must precede it");
      if (!(bone_lengths_mm[j] > 0)) fail("bone length of joint " + std::to_string(j) + " <= 0");
    }
    std::vector<int> seen(J, 0);
    for (auto [l, r] : pairs) {
      if (l >= J || r >= J) fail("pair index out of range");
      if (l == r) fail("joint " + std::to_string(l) + " paired with itself");
      if (seen[l]++ || seen[r]++) fail("joint appears in more than one pair");
    }
    if (!rest_dirs.empty() && rest_dirs.size() != J) fail("rest_dirs length mismatch");
    if (!motion_range_rad.empty() && motion_range_rad.size() != J)
      fail("motion_range_rad length mismatch");
  }

  // perm[j] is j's mirror partner, or j itself for midline joints.
  std::vector<std::size_t> flip_permutation() const {
    std::vector<std::size_t> perm(joints());
    for (std::size_t j = 0; j < perm.size(); ++j) perm[j] = j;
    for (auto [l, r] : pairs) {
      perm[l] = r;
      perm[r] = l;
    }
    return perm;
  }

  bool same_structure(const Skeleton& o) const {
    return names == o.names && parents == o.parents && pairs == o.pairs;
  }
};

/// 17-joint Human3.6M joint set (hip-rooted) with adult bone lengths.
inline Skeleton h36m_skeleton() {
  Skeleton s;
  s.names = {"hip",       "r_hip",      "r_knee",  "r_ankle", "l_hip",    "l_knee",
             "l_ankle",   "spine",      "thorax",  "neck",    "head",     "l_shoulder",
             "l_elbow",   "l_wrist",    "r_shoulder", "r_elbow", "r_wrist"};
  s.parents = {0, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15};
  s.pairs = {{4, 1}, {5, 2}, {6, 3}, {11, 14}, {12, 15}, {13, 16}};
  s.bone_lengths_mm = {0, 132, 442, 454, 132, 442, 454, 233, 257, 121, 115,
                       151, 278, 251, 151, 278, 251};
  // World frame: x toward the subject's left, y up, z forward.
  s.rest_dirs = {{0, 1, 0},  {-1, 0, 0}, {0, -1, 0}, {0, -1, 0}, {1, 0, 0},  {0, -1, 0},
                 {0, -1, 0}, {0, 1, 0},  {0, 1, 0},  {0, 0.958, 0.287}, {0, 1, 0},
                 {1, 0, 0},  {0, -1, 0}, {0, -1, 0}, {-1, 0, 0}, {0, -1, 0}, {0, -1, 0}};
  s.motion_range_rad = {0,   0.15, 0.6, 0.7, 0.15, 0.6, 0.7, 0.2, 0.2,
                        0.3, 0.2,  0.3, 0.9, 0.7,  0.3, 0.9, 0.7};
  return s;
}

/// Five joints: root, two legs, spine and head. For fast tests.
inline Skeleton toy_skeleton() {
  Skeleton s;
  s.names = {"root", "l_leg", "r_leg", "spine", "head"};
  s.parents = {0, 0, 0, 0, 3};
  s.pairs = {{1, 2}};
  s.bone_lengths_mm = {0, 800, 800, 500, 250};
  s.rest_dirs = {{0, 1, 0}, {0.2, -1, 0}, {-0.2, -1, 0}, {0, 1, 0}, {0, 1, 0}};
  s.motion_range_rad = {0, 0.6, 0.6, 0.3, 0.4};
  return s;
}

inline Skeleton skeleton_by_name(const std::string& name) {
  if (name == "h36m" || name == "h36m17") return h36m_skeleton();
  if (name == "toy" || name == "toy5") return toy_skeleton();
  throw ValidationError("unknown skeleton '" + name + "' (expected h36m or toy)");
}

}  // namespace mhf
