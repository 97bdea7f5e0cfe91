#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <type_traits>

#include <Eigen/Geometry>

#include "mhformer/pose.hpp"

namespace mhf {

struct CameraModel {
  double fx = 1145.0, fy = 1145.0;
  double cx = 500.0, cy = 500.0;
  double width = 1000.0, height = 1000.0;
  // x_cam = R · x_world + t (row-major R).
  std::array<double, 9> R{1, 0, 0, 0, -1, 0, 0, 0, -1};
  std::array<double, 3> t{0, 900, 5000};

  void validate() const {
    if (!(fx > 0 && fy > 0)) throw ValidationError("camera focal lengths must be positive");
    if (!(width > 0 && height > 0)) throw ValidationError("camera image size must be positive");
  }

  std::array<double, 3> to_camera(const double* p) const {
    std::array<double, 3> c;
    for (int r = 0; r < 3; ++r)
      c[r] = R[3 * r] * p[0] + R[3 * r + 1] * p[1] + R[3 * r + 2] * p[2] + t[r];
    return c;
  }
};

// The default camera looks at a subject standing near the world origin from
// 5 m away; the hip lands near the principal point.
inline CameraModel default_camera() { return {}; }

inline nlohmann::json camera_to_json(const CameraModel& c) {
  return {{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy},
          {"width", c.width}, {"height", c.height}, {"R", c.R}, {"t", c.t}};
}

inline CameraModel camera_from_json(const nlohmann::json& j) {
  CameraModel c;
  if (!j.is_object()) throw ParseError("camera must be a JSON object", "camera");
  const std::set<std::string> known{"fx", "fy", "cx", "cy", "width", "height", "R", "t"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      throw ParseError("unknown camera field '" + it.key() + "'", it.key());
  auto read = [&](const char* k, auto& out) {
    if (auto it = j.find(k); it != j.end()) out = detail::get_as<std::decay_t<decltype(out)>>(*it, k);
  };
  read("fx", c.fx);
  read("fy", c.fy);
  read("cx", c.cx);
  read("cy", c.cy);
  read("width", c.width);
  read("height", c.height);
  read("R", c.R);
  read("t", c.t);
  c.validate();
  return c;
}

struct MotionParams {
  double amplitude = 1.0;        // scales every joint rotation and the root path
  double fps = 50.0;
  double travel_mm = 600.0;      // root excursion in the ground plane
  double turn_rad = 0.8;         // root yaw excursion
  double min_hz = 0.1, max_hz = 0.8;
};

namespace detail {

struct Sinusoid {
  double amp, hz, phase;
  double operator()(double t) const { return amp * std::sin(2 * M_PI * hz * t + phase); }
};

struct SinusoidMix {
  std::array<Sinusoid, 2> parts;
  double operator()(double t) const { return parts[0](t) + parts[1](t); }
};

inline SinusoidMix draw_mix(std::mt19937_64& rng, const MotionParams& mp) {
  std::uniform_real_distribution<double> amp(0.25, 0.5), hz(mp.min_hz, mp.max_hz),
      ph(0.0, 2 * M_PI);
  SinusoidMix s;
  for (auto& p : s.parts) {
    p.amp = amp(rng);
    p.hz = hz(rng);
    p.phase = ph(rng);
  }
  return s;
}

}  // namespace detail

/// Synthetic motion in world millimetres (y up). Each non-root joint rotates
/// its bone about three axes by sinusoid mixtures within its motion range;
/// the root follows a smooth ground-plane path with yaw and slight bounce.
/// Positions come from forward kinematics, so bone lengths hold exactly.
inline PoseSequence synth_generate(const Skeleton& sk, std::size_t frames, std::uint64_t seed,
                                   const MotionParams& mp = {}) {
  sk.validate();
  if (frames < 1) throw ValidationError("synth: frames must be >= 1");
  if (sk.rest_dirs.size() != sk.joints())
    throw ValidationError("synth: skeleton has no rest pose directions");
  if (mp.amplitude < 0) throw ValidationError("synth: amplitude must be >= 0");
  const std::size_t J = sk.joints();
  std::mt19937_64 rng(seed);

  std::vector<std::array<detail::SinusoidMix, 3>> joint_mix(J);
  for (auto& axes : joint_mix)
    for (auto& a : axes) a = detail::draw_mix(rng, mp);
  std::array<detail::SinusoidMix, 4> root_mix;  // x, z, yaw, bounce
  for (auto& a : root_mix) a = detail::draw_mix(rng, mp);

  // Standing height: deepest point below the root in the rest pose.
  std::vector<Eigen::Vector3d> rest(J, Eigen::Vector3d::Zero());
  double lowest = 0;
  for (std::size_t j = 1; j < J; ++j) {
    Eigen::Vector3d d(sk.rest_dirs[j][0], sk.rest_dirs[j][1], sk.rest_dirs[j][2]);
    rest[j] = rest[sk.parents[j]] + d.normalized() * sk.bone_lengths_mm[j];
    lowest = std::min(lowest, rest[j].y());
  }

  PoseSequence seq(3, frames, sk);
  seq.fps = mp.fps;
  seq.provenance = "synthetic";
  const double a = mp.amplitude;
  std::vector<Eigen::Matrix3d> G(J);
  std::vector<Eigen::Vector3d> P(J);
  for (std::size_t f = 0; f < frames; ++f) {
    const double t = double(f) / mp.fps;
    G[0] = Eigen::AngleAxisd(a * mp.turn_rad * root_mix[2](t), Eigen::Vector3d::UnitY())
               .toRotationMatrix();
    P[0] = Eigen::Vector3d(a * mp.travel_mm * root_mix[0](t),
                           -lowest + a * 20.0 * root_mix[3](t),
                           a * mp.travel_mm * root_mix[1](t));
    for (std::size_t j = 1; j < J; ++j) {
      const double range = sk.motion_range_rad.empty() ? 0.5 : sk.motion_range_rad[j];
      const Eigen::Matrix3d local =
          (Eigen::AngleAxisd(a * range * joint_mix[j][0](t), Eigen::Vector3d::UnitX()) *
           Eigen::AngleAxisd(a * range * 0.5 * joint_mix[j][1](t), Eigen::Vector3d::UnitY()) *
           Eigen::AngleAxisd(a * range * 0.5 * joint_mix[j][2](t), Eigen::Vector3d::UnitZ()))
              .toRotationMatrix();
      const std::size_t p = sk.parents[j];
      G[j] = G[p] * local;
      Eigen::Vector3d d(sk.rest_dirs[j][0], sk.rest_dirs[j][1], sk.rest_dirs[j][2]);
      P[j] = P[p] + G[j] * (d.normalized() * sk.bone_lengths_mm[j]);
    }
    for (std::size_t j = 0; j < J; ++j)
      for (int k = 0; k < 3; ++k) seq.at(f, j, k) = P[j][k];
  }
  return seq;
}

/// World → camera frame (mm).
inline PoseSequence to_camera_frame(const PoseSequence& world, const CameraModel& cam) {
  if (world.dims != 3) throw ValidationError("to_camera_frame needs a 3D sequence");
  PoseSequence out = world;
  for (std::size_t f = 0; f < world.frames; ++f)
    for (std::size_t j = 0; j < world.joints; ++j) {
      const auto c = cam.to_camera(&world.coords[(f * world.joints + j) * 3]);
      for (int k = 0; k < 3; ++k) out.at(f, j, k) = c[k];
    }
  return out;
}

/// Pinhole projection of world points to pixels.
inline PoseSequence project(const PoseSequence& world, const CameraModel& cam) {
  if (world.dims != 3) throw ValidationError("project needs a 3D sequence");
  cam.validate();
  PoseSequence out(2, world.frames, world.skeleton);
  out.fps = world.fps;
  out.provenance = world.provenance;
  out.image_size = std::array<double, 2>{cam.width, cam.height};
  for (std::size_t f = 0; f < world.frames; ++f)
    for (std::size_t j = 0; j < world.joints; ++j) {
      const auto c = cam.to_camera(&world.coords[(f * world.joints + j) * 3]);
      if (!(c[2] > 0))
        throw ValidationError("project: joint " + std::to_string(j) + " of frame " +
                              std::to_string(f) + " is at or behind the camera plane");
      out.at(f, j, 0) = cam.fx * c[0] / c[2] + cam.cx;
      out.at(f, j, 1) = cam.fy * c[1] / c[2] + cam.cy;
    }
  return out;
}

/// Camera-frame point at depth z for pixel (u, v).
inline std::array<double, 3> back_project(const CameraModel& cam, double u, double v, double z) {
  return {(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z};
}

inline PoseSequence add_noise(const PoseSequence& seq, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0)) throw ValidationError("noise sigma must be >= 0");
  PoseSequence out = seq;
  if (sigma == 0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, sigma);
  for (auto& v : out.coords) v += nd(rng);
  return out;
}

}  // namespace mhf
