#pragma once

// Checkpoint container: "EVFC", u32 format version, u64 header length, JSON
// header (kind, model config, tensor index, training state), then raw
// little-endian float32 blobs in index order.

#include "evflow/model.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace evflow {

inline constexpr int kCheckpointVersion = 1;

struct TrainState
{
  long step = 0;           // optimizer steps taken
  int phase = 0;           // index into the schedule
  int epoch = 0;           // epoch within the phase
  long cursor = 0;         // samples consumed within the epoch
  long adam_steps = 0;
  std::vector<Tensor<float>> adam_m, adam_v;
  double last_loss = 0;
  std::string run_config;  // resolved training config, key = value text
  int sensor_height = 0;   // training data size; 0 when unknown
  int sensor_width = 0;
};

struct Checkpoint
{
  std::string kind = "network"; // network | oracle
  ModelConfig config;
  ParameterSet<float> params;
  std::optional<TrainState> train;
};

std::string model_config_json(const ModelConfig &cfg);
ModelConfig model_config_from_json(const std::string &text);

void save_checkpoint(const std::filesystem::path &path, const FlowModel<float> &model,
                     const TrainState *state = nullptr);
/// A checkpoint whose estimator returns the ground truth; for harness checks.
void save_oracle_checkpoint(const std::filesystem::path &path, const ModelConfig &cfg);
Checkpoint load_checkpoint(const std::filesystem::path &path);

/// Model with the checkpoint's config and parameter values (matched by name and shape).
FlowModel<float> model_from_checkpoint(const Checkpoint &ckpt);

} // namespace evflow
