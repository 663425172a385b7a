#pragma once

#include <cstdint>
#include <string>

#include "bita/model.hpp"

namespace bita {

struct ScheduleConfig {
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 0;
  double lr_start = 0.0;
  double lr_peak = 0.0;
  double lr_min = 0.0;

  void validate() const;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

struct StageConfig {
  ScheduleConfig schedule;
};

// Full run configuration. The file format is flat `key = value` lines with
// '#' comments; unknown keys are rejected. BITA_SEED in the environment
// overrides the configured seed.
struct RunConfig {
  ModelConfig model;
  std::size_t batch_size = 16;
  AdamWConfig adamw;
  double grad_clip = 0.0;  // 0 disables clipping
  bool augment = false;
  StageConfig stage1, stage2, finetune;

  static RunConfig desk_defaults();
};

RunConfig parse_config_file(const std::string& path);
RunConfig parse_config_text(const std::string& text, const std::string& origin);

// canonical serialization; its CRC32 is the config hash logged on every run
std::string config_to_text(const RunConfig& cfg);
std::string config_hash(const RunConfig& cfg);

}  // namespace bita
