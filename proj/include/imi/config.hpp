#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "imi/env.hpp"
#include "imi/learner.hpp"
#include "imi/trajectory.hpp"

namespace imi {

struct PipelineConfig {
  int iterations = 2;
  int eval_episodes = 64;
  std::size_t eval_envs = 16;
  // Refinement of generated references before they are promoted.
  bool trim_generated = true;
  double auto_start_vx = 0.5;     // m/s; first kept frame, <= 0 keeps frame 0
  double landing_keep = 0.3;      // s kept after touchdown
  bool allow_unsuccessful = false;
  // Flip-up boxes: edge at the reference's flight apex x.
  double box_low = 0.1;
  double box_high = 0.3;
  double window = 0.5;            // s either side of the apex for landing metrics

  void validate() const;
};

struct ExperimentConfig {
  EnvConfig env;
  PpoConfig ppo;
  PolicyConfig policy;
  PipelineConfig pipeline;
  FlipParams synth;
  std::uint64_t seed = 1;
  std::size_t num_envs = 256;
  std::string out_dir = "runs/default";

  void validate() const;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::json config_to_json(const ExperimentConfig& cfg);
// Starts from the defaults, overrides whatever the document sets; unknown keys
// and wrong types raise ConfigError naming the JSON path.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::string& path);

// Hex FNV-1a of the canonical JSON dump.
std::string config_hash(const ExperimentConfig& cfg);

// smoke: 8 envs / 20 updates, desk: 256 / 2000, paper: 4096 / 15000 with the
// larger networks.
void apply_profile(ExperimentConfig& cfg, const std::string& profile);

}  // namespace imi
