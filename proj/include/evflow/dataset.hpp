#pragma once

// On-disk sequences: events.bin, flow_XXXXXX.png (one per ground-truth frame),
// timestamps.txt ("t_start t_end" per frame, in order) and manifest.json.
// A split directory is either one sequence or a directory of sequence directories.

#include "evflow/events.hpp"
#include "evflow/flow.hpp"
#include "evflow/training.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace evflow {

struct GtFrame
{
  Timestamp t_start = 0;
  Timestamp t_end = 0;
  std::optional<FlowField<float>> flow; // empty when the file is missing
};

struct SequenceData
{
  std::string name;
  EventSequence events;
  std::vector<GtFrame> frames;

  SensorSize sensor() const { return events.sensor; }
};

std::string flow_file_name(std::size_t index);

void save_sequence(const std::filesystem::path &dir, const SequenceData &seq);
/// Missing flow files leave the frame without ground truth (logged by callers).
SequenceData load_sequence(const std::filesystem::path &dir);
bool is_sequence_dir(const std::filesystem::path &dir);
/// Sequences sorted by directory name.
std::vector<SequenceData> load_split(const std::filesystem::path &dir);

/// Voxel grids of every frame window [t_start, t_end) and of the equally long
/// window before it. Events exactly at a window end belong to the next window.
class GridCache
{
public:
  GridCache() = default;
  GridCache(const SequenceData &seq, const VoxelOptions &options);

  /// Grid before frame i (from E_i) and grid of frame i (E_{i+1}).
  const VoxelGrid<float> &prev(std::size_t frame) const { return prev_[frame]; }
  const VoxelGrid<float> &next(std::size_t frame) const { return next_[frame]; }
  /// Frames i-1 and i abut with equal windows, so a warm start from frame i-1 is meaningful.
  bool continues(std::size_t frame) const { return frame > 0 && contiguous_[frame]; }
  std::size_t frames() const { return next_.size(); }

private:
  std::vector<VoxelGrid<float>> prev_, next_;
  std::vector<bool> contiguous_;
};

/// Sample of `seq_len` consecutive frames starting at `first`; every frame must carry ground truth.
TrainSample<float> make_sample(const SequenceData &seq, const GridCache &cache, std::size_t first, int seq_len);

struct SampleRef
{
  std::size_t sequence = 0;
  std::size_t first = 0;
};

/// Every run of seq_len contiguous frames with ground truth, stride 1.
std::vector<SampleRef> enumerate_samples(const std::vector<SequenceData> &split, const std::vector<GridCache> &caches,
                                         int seq_len);

} // namespace evflow
