#pragma once

#include "evflow/checkpoint.hpp"
#include "evflow/dataset.hpp"
#include "evflow/training.hpp"

#include <chrono>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace evflow {

struct StepLog
{
  long step = 0;
  std::string phase;
  double loss = 0;
  double lr = 0;
  int seq_len = 0;
  double wallclock = 0; // seconds since the run started
};

struct RunOptions
{
  TrainConfig train; // gamma, iters, crop, flip, clipping, batch size, seed, warp options
  std::vector<TrainingPhase> phases;
  /// checkpoint.bin, checkpoint_<phase>.bin and metrics.csv go here; empty disables files.
  std::filesystem::path out_dir;
  long checkpoint_every = 0; // steps; 0 saves at epoch ends only
  long max_steps = -1;       // stop (and checkpoint) after this many total steps
  /// Decay each phase's rate linearly towards zero over its steps; constant otherwise.
  bool linear_decay = false;
  std::string run_config;    // stored in checkpoints
  std::function<void(const StepLog &)> on_step;
};

/// Phased training over a split. Shuffling and augmentation draw from
/// generators seeded by (seed, phase, epoch) and (seed, step), so a resumed run
/// continues exactly where the saved one stopped.
class Trainer
{
public:
  Trainer(FlowModel<float> &model, const std::vector<SequenceData> &split, RunOptions options);

  void resume(const TrainState &state);
  /// Runs the remaining schedule and returns the state after the last step.
  TrainState run();

  const TrainState &state() const { return state_; }
  const std::vector<GridCache> &caches() const { return caches_; }
  /// Config used by a phase.
  TrainConfig phase_config(const TrainingPhase &phase) const;

private:
  void save(const std::filesystem::path &path);
  void log_step(const StepLog &log);

  FlowModel<float> &model_;
  const std::vector<SequenceData> &split_;
  RunOptions options_;
  std::vector<GridCache> caches_;
  Adam<float> adam_;
  TrainState state_;
  std::chrono::steady_clock::time_point start_;
};

/// Deterministic permutation of [0, n).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int phase, int epoch);

} // namespace evflow
