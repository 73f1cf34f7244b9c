#pragma once

// Implementations behind the evflow subcommands. Each command writes one
// manifest.json into every directory it creates.

#include "evflow/checkpoint.hpp"
#include "evflow/dataset.hpp"
#include "evflow/evaluation.hpp"
#include "evflow/synthetic.hpp"
#include "evflow/trainer.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace evflow {

std::string code_version();

struct RunManifest
{
  std::string command;
  std::string config;                        // resolved key = value text
  std::map<std::string, std::uint64_t> seeds;
  std::map<std::string, std::string> inputs; // role -> path
  std::vector<std::string> outputs;
  std::map<std::string, std::string> notes;
  double wallclock = 0; // seconds

  void write(const std::filesystem::path &dir) const;
};

/// Relative paths that do not exist are looked up under $EVFLOW_DATA_ROOT; an
/// empty path means the root itself.
std::filesystem::path resolve_data_path(const std::filesystem::path &p);

/// One sequence rendered from a scene: events over [0, duration] and analytic
/// ground truth for every frame window.
SequenceData synthesize_sequence(const SceneSpec &spec, const std::string &name);

// ---- synth -----------------------------------------------------------------

/// Split spec: scene keys plus `sequences` (count) and `velocity_jitter`
/// (px/s, uniform per axis, drawn per sequence from the seed).
struct SplitSpec
{
  SceneSpec scene;
  int sequences = 1;
  double velocity_jitter = 0;

  static SplitSpec from_kv(const KeyValues &kv);
  KeyValues to_kv() const;
  /// Scene of sequence i: texture seed seed + i, jittered velocity.
  SceneSpec sequence_scene(int i) const;
};

struct SynthOptions
{
  std::filesystem::path spec;
  std::filesystem::path out;
  std::optional<std::uint64_t> seed;
};

/// One sequence goes straight into `out`; several go into out/seq_XXX.
std::vector<std::filesystem::path> cmd_synth(const SynthOptions &options, std::ostream &log);

// ---- gtgen -----------------------------------------------------------------

struct GtgenOptions
{
  std::filesystem::path disparity_dir; // disparity_XXXXXX.png + timestamps.txt (one t_us per line)
  std::filesystem::path calibration;
  std::filesystem::path trajectory;
  Timestamp dt = 0; // microseconds
  std::filesystem::path out;
  std::optional<double> consistency; // forward-backward threshold, px
};

std::string disparity_file_name(std::size_t index);

/// forward_/backward_XXXXXX.png and .flo per disparity map, timestamps.txt
/// ("t_i dt" per line) and the manifest. Interpolated poses are logged.
void cmd_gtgen(const GtgenOptions &options, std::ostream &log);

// ---- train -----------------------------------------------------------------

struct TrainCommandOptions
{
  std::filesystem::path config;
  std::optional<std::filesystem::path> data;
  std::optional<std::filesystem::path> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> resume;
  std::optional<long> max_steps;
  std::function<void(const StepLog &)> on_step;
};

/// Fully resolved training run.
struct TrainPlan
{
  ModelConfig model;
  RunOptions run;
  std::filesystem::path data;
  std::string preset;
  std::optional<std::filesystem::path> resume;
  KeyValues resolved;
};

/// Parses a training config; unknown keys are rejected with their line.
TrainPlan plan_training(const TrainCommandOptions &options);
/// Keys accepted in training configs.
const std::vector<std::string> &train_config_keys();

TrainState cmd_train(const TrainCommandOptions &options, std::ostream &log);

// ---- eval ------------------------------------------------------------------

struct EvalCommandOptions
{
  std::filesystem::path checkpoint;
  std::optional<std::filesystem::path> ws_checkpoint; // trained with warm starts
  std::optional<std::filesystem::path> data;
  std::string warmstart = "off"; // off | eval | train-eval
  int iterations = 12;
  EvalMode mode = EvalMode::Dense;
  bool ablation = false;
  std::filesystem::path out;
};

/// The five ablation rows: no WS@12, eval WS@12, train+eval WS@12, eval WS@100, train+eval WS@100.
std::vector<ProtocolRow> cmd_eval(const EvalCommandOptions &options, std::ostream &log);

// ---- viz -------------------------------------------------------------------

struct VizCommandOptions
{
  std::filesystem::path flow;
  std::filesystem::path out;
  double max_magnitude = 0; // <= 0 normalizes per image
};

void cmd_viz(const VizCommandOptions &options, std::ostream &log);

} // namespace evflow
