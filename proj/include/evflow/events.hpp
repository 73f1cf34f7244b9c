#pragma once

#include "evflow/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

namespace evflow {

using Timestamp = std::int64_t; // microseconds

struct SensorSize
{
  int height = 0;
  int width = 0;

  bool operator==(const SensorSize &) const = default;
};

struct Event
{
  std::uint16_t x = 0;
  std::uint16_t y = 0;
  Timestamp t = 0;
  std::int8_t p = 1; // +1 or -1

  bool operator==(const Event &) const = default;
};

/// Time-ordered events inside the closed window [t_start, t_end].
struct EventSequence
{
  std::vector<Event> events;
  Timestamp t_start = 0;
  Timestamp t_end = 0;
  SensorSize sensor;

  /// Throws a data error on unsorted timestamps, bad polarity, out-of-sensor
  /// coordinates or events outside the window.
  void validate() const;
  std::size_t size() const { return events.size(); }
};

/// Splits around t_i into [t_i - dt, t_i) and [t_i, t_i + dt].
std::pair<EventSequence, EventSequence> slice_window(const EventSequence &stream, Timestamp t_i, Timestamp dt);

/// Events restricted to [t0, t1] (closed), sharing the stream's sensor.
EventSequence restrict_window(const EventSequence &stream, Timestamp t0, Timestamp t1);

template <typename Scalar>
struct VoxelGrid
{
  Tensor<Scalar> data; // bins (x2 when polarity is split) x H x W
  int bins = 0;
  Timestamp t_start = 0;
  Timestamp t_end = 0;
};

struct VoxelOptions
{
  int bins = 15;
  /// Positive events go to channels [0, bins), negative ones to [bins, 2*bins).
  bool split_polarity = false;
};

/// Signed polarity accumulation with linear interpolation between the two
/// temporal bins nearest to the normalized timestamp. A zero-length window
/// maps everything to bin 0.
template <typename Scalar = float>
VoxelGrid<Scalar> build_voxel_grid(const EventSequence &seq, const VoxelOptions &options);

inline VoxelGrid<float> build_voxel_grid(const EventSequence &seq, int bins)
{
  return build_voxel_grid<float>(seq, VoxelOptions{bins, false});
}

// File formats. Binary: "EVT1", u16 height, u16 width, u64 count, then packed
// little-endian records (u16 x, u16 y, i64 t, i8 p). Text: "t x y p" per line,
// '#' comments, optional "# sensor <height> <width>" line.
void write_event_file(const std::filesystem::path &path, const EventSequence &seq);
EventSequence read_event_file(const std::filesystem::path &path);
void write_event_text(const std::filesystem::path &path, const EventSequence &seq);
EventSequence read_event_text(const std::filesystem::path &path);

extern template VoxelGrid<float> build_voxel_grid<float>(const EventSequence &, const VoxelOptions &);
extern template VoxelGrid<double> build_voxel_grid<double>(const EventSequence &, const VoxelOptions &);

} // namespace evflow
