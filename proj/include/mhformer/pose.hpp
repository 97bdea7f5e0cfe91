#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mhformer/error.hpp"
#include "mhformer/skeleton.hpp"

namespace mhf {

/// F frames of J joints with 2 (image) or 3 (metric, mm) coordinates each,
/// stored frame-major: coords[(f·J + j)·dims + k].
struct PoseSequence {
  int dims = 3;
  std::size_t frames = 0;
  std::size_t joints = 0;
  std::vector<double> coords;
  double fps = 50.0;
  Skeleton skeleton;
  std::string provenance = "synthetic";
  // Pixel image size [w, h] for 2D sequences in pixel units; absent when
  // coordinates are already normalized.
  std::optional<std::array<double, 2>> image_size;

  PoseSequence() = default;
  PoseSequence(int d, std::size_t f, Skeleton s)
      : dims(d), frames(f), joints(s.joints()), coords(f * s.joints() * d, 0.0),
        skeleton(std::move(s)) {}

  double& at(std::size_t f, std::size_t j, std::size_t k) {
    return coords[(f * joints + j) * dims + k];
  }
  double at(std::size_t f, std::size_t j, std::size_t k) const {
    return coords[(f * joints + j) * dims + k];
  }
  const double* frame(std::size_t f) const { return coords.data() + f * joints * dims; }

  void validate() const {
    if (dims != 2 && dims != 3) throw ValidationError("pose dims must be 2 or 3");
    if (frames < 1) throw ValidationError("pose sequence needs at least one frame");
    skeleton.validate();
    if (joints != skeleton.joints())
      throw ValidationError("pose sequence has " + std::to_string(joints) +
                            " joints but its skeleton has " + std::to_string(skeleton.joints()));
    if (coords.size() != frames * joints * std::size_t(dims))
      throw ShapeError("pose coordinate buffer has the wrong length");
    for (std::size_t i = 0; i < coords.size(); ++i)
      if (!std::isfinite(coords[i]))
        throw NumericalError("non-finite coordinate at frame " +
                             std::to_string(i / (joints * dims)));
    if (!(fps > 0)) throw ValidationError("fps must be positive");
  }
};

namespace detail {

inline const nlohmann::json& require(const nlohmann::json& j, const char* key,
                                     const std::string& where = {}) {
  auto it = j.find(key);
  if (it == j.end()) {
    const std::string path = where.empty() ? key : where + "." + key;
    throw ParseError("pose JSON: missing field '" + path + "'", path);
  }
  return *it;
}

template <typename V>
V get_as(const nlohmann::json& j, const std::string& field) {
  try {
    return j.get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("pose JSON: field '" + field + "': " + e.what(), field);
  }
}

}  // namespace detail

inline nlohmann::json skeleton_to_json(const Skeleton& s) {
  nlohmann::json pairs = nlohmann::json::array();
  for (auto [l, r] : s.pairs) pairs.push_back({l, r});
  return {{"names", s.names},
          {"parents", s.parents},
          {"pairs", pairs},
          {"bone_lengths_mm", s.bone_lengths_mm}};
}

inline Skeleton skeleton_from_json(const nlohmann::json& j) {
  using detail::get_as;
  using detail::require;
  if (!j.is_object()) throw ParseError("pose JSON: 'skeleton' must be an object", "skeleton");
  Skeleton s;
  s.names = get_as<std::vector<std::string>>(require(j, "names", "skeleton"), "skeleton.names");
  s.parents =
      get_as<std::vector<std::size_t>>(require(j, "parents", "skeleton"), "skeleton.parents");
  for (const auto& p : get_as<std::vector<std::array<std::size_t, 2>>>(
           require(j, "pairs", "skeleton"), "skeleton.pairs"))
    s.pairs.emplace_back(p[0], p[1]);
  s.bone_lengths_mm = get_as<std::vector<double>>(require(j, "bone_lengths_mm", "skeleton"),
                                                  "skeleton.bone_lengths_mm");
  // Builtin skeletons regain their motion metadata.
  for (const Skeleton& b : {h36m_skeleton(), toy_skeleton()})
    if (b.same_structure(s)) {
      s.rest_dirs = b.rest_dirs;
      s.motion_range_rad = b.motion_range_rad;
    }
  try {
    s.validate();
  } catch (const ValidationError& e) {
    throw ParseError(std::string("pose JSON: ") + e.what(), "skeleton");
  }
  return s;
}

inline nlohmann::json pose_to_json(const PoseSequence& seq) {
  seq.validate();
  nlohmann::json frames = nlohmann::json::array();
  for (std::size_t f = 0; f < seq.frames; ++f) {
    nlohmann::json joints = nlohmann::json::array();
    for (std::size_t j = 0; j < seq.joints; ++j) {
      nlohmann::json p = nlohmann::json::array();
      for (int k = 0; k < seq.dims; ++k) p.push_back(seq.at(f, j, k));
      joints.push_back(std::move(p));
    }
    frames.push_back(std::move(joints));
  }
  nlohmann::json j = {{"version", 1},
                      {"fps", seq.fps},
                      {"skeleton", skeleton_to_json(seq.skeleton)},
                      {"dims", seq.dims},
                      {"frames", std::move(frames)},
                      {"provenance", seq.provenance}};
  if (seq.image_size) j["image_size"] = *seq.image_size;
  return j;
}

inline PoseSequence pose_from_json(const nlohmann::json& j) {
  using detail::get_as;
  using detail::require;
  if (!j.is_object()) throw ParseError("pose JSON: document must be an object");
  const int version = get_as<int>(require(j, "version"), "version");
  if (version != 1)
    throw ParseError("pose JSON: unsupported version " + std::to_string(version), "version");
  PoseSequence seq;
  seq.fps = get_as<double>(require(j, "fps"), "fps");
  seq.skeleton = skeleton_from_json(require(j, "skeleton"));
  seq.joints = seq.skeleton.joints();
  seq.dims = get_as<int>(require(j, "dims"), "dims");
  if (seq.dims != 2 && seq.dims != 3) throw ParseError("pose JSON: dims must be 2 or 3", "dims");
  seq.provenance = get_as<std::string>(require(j, "provenance"), "provenance");
  if (auto it = j.find("image_size"); it != j.end())
    seq.image_size = get_as<std::array<double, 2>>(*it, "image_size");

  const auto& frames = require(j, "frames");
  if (!frames.is_array() || frames.empty())
    throw ParseError("pose JSON: 'frames' must be a non-empty array", "frames");
  seq.frames = frames.size();
  seq.coords.reserve(seq.frames * seq.joints * seq.dims);
  for (std::size_t f = 0; f < seq.frames; ++f) {
    const auto& fr = frames[f];
    if (!fr.is_array() || fr.size() != seq.joints)
      throw ParseError("pose JSON: frame " + std::to_string(f) + " has " +
                           std::to_string(fr.is_array() ? fr.size() : 0) +
                           " joints, skeleton has " + std::to_string(seq.joints),
                       "frames");
    for (const auto& p : fr) {
      if (!p.is_array() || p.size() != std::size_t(seq.dims))
        throw ParseError("pose JSON: frame " + std::to_string(f) + " has a point without " +
                             std::to_string(seq.dims) + " coordinates",
                         "frames");
      for (const auto& v : p) {
        if (!v.is_number())
          throw ParseError("pose JSON: non-numeric coordinate in frame " + std::to_string(f),
                           "frames");
        const double d = v.get<double>();
        if (!std::isfinite(d))
          throw ParseError("pose JSON: non-finite coordinate in frame " + std::to_string(f),
                           "frames");
        seq.coords.push_back(d);
      }
    }
  }
  if (!(seq.fps > 0)) throw ParseError("pose JSON: fps must be positive", "fps");
  return seq;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + path + "'");
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline nlohmann::json parse_json_text(const std::string& text, const std::string& path) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("'" + path + "' is not valid JSON: " + e.what());
  }
}

// Doubles are written with round-trip precision, so save→load is exact.
inline void save_pose_json(const PoseSequence& seq, const std::string& path) {
  write_text_file(path, pose_to_json(seq).dump() + "\n");
}

inline PoseSequence load_pose_json(const std::string& path) {
  return pose_from_json(parse_json_text(read_text_file(path), path));
}

}  // namespace mhf
