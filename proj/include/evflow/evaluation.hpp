#pragma once

#include "evflow/dataset.hpp"
#include "evflow/events.hpp"
#include "evflow/flow.hpp"
#include "evflow/model.hpp"
#include "evflow/warmstart.hpp"

#include <array>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace evflow {

enum class EvalMode { Dense, Sparse };
std::string to_string(EvalMode m);
EvalMode parse_eval_mode(const std::string &s);

using EvalMask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Mean end-point error over gt.valid (and mask, when given). Empty set -> empty error.
template <typename Scalar>
double epe(const FlowField<Scalar> &pred, const FlowField<Scalar> &gt, const EvalMask *mask = nullptr);

/// Percentage of evaluated pixels with error strictly greater than n pixels.
template <typename Scalar>
double npe(const FlowField<Scalar> &pred, const FlowField<Scalar> &gt, double n, const EvalMask *mask = nullptr);

inline constexpr std::array<int, 3> kNpeThresholds{1, 2, 3};

struct MetricReport
{
  std::string name;
  double epe = 0;
  std::array<double, 3> npe{}; // thresholds 1, 2, 3 px
  long valid_pixel_count = 0;
  EvalMode mode = EvalMode::Dense;
  int frames = 0;
};

/// Running sums, so aggregates weight every valid pixel equally.
struct MetricAccumulator
{
  double error_sum = 0;
  std::array<long, 3> above{};
  long count = 0;
  int frames = 0;

  template <typename Scalar>
  void add(const FlowField<Scalar> &pred, const FlowField<Scalar> &gt, const EvalMask *mask = nullptr);
  void merge(const MetricAccumulator &o);
  /// Throws an empty error when nothing was accumulated.
  MetricReport report(const std::string &name, EvalMode mode) const;
};

/// gt validity intersected with pixels that saw at least one event.
EvalMask sparse_mask(const EvalMask &gt_valid, const EventSequence &events);

struct MagnitudeTable
{
  std::vector<double> percentiles; // index p-1 holds percentile p, p = 1..99
  bool normalized = false;          // values in % of image width
  long samples = 0;

  double at(int p) const { return percentiles.at(std::size_t(p - 1)); }
};

/// Linear-interpolated percentiles of flow magnitude over all valid pixels.
template <typename Scalar>
MagnitudeTable magnitude_cdf(const std::vector<FlowField<Scalar>> &gts, bool normalize_by_width);

struct EstimateRequest
{
  const VoxelGrid<float> *prev = nullptr;
  const VoxelGrid<float> *next = nullptr;
  const FlowField<float> *init = nullptr; // tagged resolution; nullptr = zero start
  int iterations = 12;
  const FlowField<float> *gt = nullptr;   // only the oracle reads it
};

struct EstimateResult
{
  FlowField<float> flow;  // full resolution
  FlowField<float> state; // what a warm start carries to the next frame
};

class FlowEstimator
{
public:
  virtual ~FlowEstimator() = default;
  virtual EstimateResult estimate(const EstimateRequest &req) const = 0;
  virtual std::string kind() const = 0;
};

class ModelEstimator : public FlowEstimator
{
public:
  /// full_resolution_state: warm start from the full-resolution prediction instead of the 1/8 state.
  explicit ModelEstimator(const FlowModel<float> &model, bool full_resolution_state = false)
    : model_(model), full_(full_resolution_state)
  {
  }
  EstimateResult estimate(const EstimateRequest &req) const override;
  std::string kind() const override { return "network"; }

private:
  const FlowModel<float> &model_;
  bool full_;
};

/// Returns the ground truth; used to check the harness itself.
class OracleEstimator : public FlowEstimator
{
public:
  EstimateResult estimate(const EstimateRequest &req) const override;
  std::string kind() const override { return "oracle"; }
};

struct EvalProtocol
{
  bool warm_start = false;
  int iterations = 12;
  EvalMode mode = EvalMode::Dense;
  WarpOptions warp;
};

struct SequenceEvaluation
{
  std::vector<MetricReport> sequences;
  MetricReport aggregate;
  int skipped_frames = 0;
  std::vector<std::string> log;
};

/// Sequential protocol: the warm start chain runs across the frames of a
/// sequence and restarts at every sequence start and every gap.
SequenceEvaluation evaluate_sequences(const FlowEstimator &estimator, const std::vector<SequenceData> &split,
                                      const std::vector<GridCache> &caches, const EvalProtocol &protocol);

/// Named protocol row of an ablation table.
struct ProtocolRow
{
  std::string label;      // e.g. "train+eval WS"
  std::string warmstart;  // off | eval | train-eval
  int iterations = 12;
  SequenceEvaluation result;
};

std::string format_report_table(const std::vector<ProtocolRow> &rows, EvalMode mode);
/// JSON document with protocol fields, per-sequence and aggregate metrics.
std::string report_json(const std::vector<ProtocolRow> &rows, EvalMode mode, const std::string &checkpoint);

} // namespace evflow
