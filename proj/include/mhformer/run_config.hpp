#pragma once

#include <string>

#include "mhformer/config.hpp"
#include "mhformer/pose.hpp"

namespace mhf {

/// A run configuration file: {"model": {...}, "train": {...}}, both optional.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

inline RunConfig run_config_from_json(const json& j) {
  detail::reject_unknown(j, {"model", "train"}, "config");
  RunConfig rc;
  if (auto it = j.find("model"); it != j.end()) it->get_to(rc.model);
  if (auto it = j.find("train"); it != j.end()) it->get_to(rc.train);
  return rc;
}

inline json run_config_to_json(const RunConfig& rc) {
  return {{"model", rc.model}, {"train", rc.train}};
}

inline RunConfig load_run_config(const std::string& path) {
  return run_config_from_json(parse_json_text(read_text_file(path), path));
}

}  // namespace mhf
