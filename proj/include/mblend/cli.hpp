#pragma once

#include "mblend/evaluation.hpp"
#include "mblend/trainer.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace mblend::cli {

struct MotionSource {
  std::string path;
  std::string identity;
  std::optional<std::pair<int, int>> trim;  // [start, end) after resampling
};

struct ExperimentConfig {
  std::vector<MotionSource> motions;
  std::string joint_keep_list;  // empty: keep every joint
  std::optional<std::vector<std::string>> foot_joints;  // config: names or a name-list path
  double fps = 30.0;
  int frames = 0;  // 0: shortest motion after trimming
  ContactConfig contacts;
  TrainConfig train;
  EvalOptions eval;
  std::string output_dir = "runs/experiment";
  std::uint64_t seed = 0;

  nlohmann::json raw;  // resolved configuration with overrides applied
};

// Applies `key.path=value` overrides; values are parsed as JSON when possible
// and taken as strings otherwise.
void apply_override(nlohmann::json& config, const std::string& assignment);

// Relative paths are resolved against `base_dir`.
ExperimentConfig parse_config(const nlohmann::json& json, const std::filesystem::path& base_dir);
ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {});

std::string config_hash(const nlohmann::json& config);

struct PreparedData {
  Skeleton skeleton;
  std::vector<MotionTensor> tensors;
  std::vector<std::string> identities;
};

// parse -> select joints -> resample -> trim -> assign feet -> encode.
PreparedData prepare_motions(const ExperimentConfig& config);

// Entry point of the command-line tool; returns the process exit status.
int run(int argc, char** argv);

}  // namespace mblend::cli
