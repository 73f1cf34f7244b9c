#include "evflow/dataset.hpp"

#include "evflow/error.hpp"
#include "evflow/flow_io.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace evflow {

namespace fs = std::filesystem;

std::string flow_file_name(std::size_t index)
{
  char buf[32];
  std::snprintf(buf, sizeof buf, "flow_%06zu.png", index);
  return buf;
}

void save_sequence(const fs::path &dir, const SequenceData &seq)
{
  fs::create_directories(dir);
  write_event_file(dir / "events.bin", seq.events);
  std::ofstream ts(dir / "timestamps.txt");
  if (!ts) { throw data_error("cannot write " + (dir / "timestamps.txt").string()); }
  ts << "# window " << seq.events.t_start << " " << seq.events.t_end << "\n";
  for (std::size_t i = 0; i < seq.frames.size(); ++i) {
    const GtFrame &f = seq.frames[i];
    ts << f.t_start << " " << f.t_end << "\n";
    if (f.flow) { write_flow_png(dir / flow_file_name(i), f.flow->cast<double>()); }
  }
}

bool is_sequence_dir(const fs::path &dir)
{
  return fs::is_regular_file(dir / "events.bin") && fs::is_regular_file(dir / "timestamps.txt");
}

SequenceData load_sequence(const fs::path &dir)
{
  if (!is_sequence_dir(dir)) {
    throw data_error(dir.string() + " is not a sequence directory (needs events.bin and timestamps.txt)");
  }
  SequenceData seq;
  seq.name = dir.filename().string();
  if (seq.name.empty()) { seq.name = dir.parent_path().filename().string(); }
  seq.events = read_event_file(dir / "events.bin");
  std::ifstream ts(dir / "timestamps.txt");
  std::string line;
  int n = 0;
  bool have_window = false;
  Timestamp w0 = 0, w1 = 0;
  while (std::getline(ts, line)) {
    ++n;
    std::istringstream ls(line);
    std::string first;
    if (!(ls >> first)) { continue; }
    if (first[0] == '#') {
      std::string key;
      if (ls >> key && key == "window" && ls >> w0 >> w1) { have_window = true; }
      continue;
    }
    GtFrame f;
    std::istringstream fl(line);
    if (!(fl >> f.t_start >> f.t_end) || f.t_end < f.t_start) {
      throw data_error((dir / "timestamps.txt").string() + ":" + std::to_string(n) + ": expected 't_start t_end'");
    }
    seq.frames.push_back(std::move(f));
  }
  for (std::size_t i = 0; i < seq.frames.size(); ++i) {
    const fs::path p = dir / flow_file_name(i);
    if (!fs::exists(p)) { continue; }
    FlowField<double> flow = read_flow_png(p);
    if (flow.height() != seq.events.sensor.height || flow.width() != seq.events.sensor.width) {
      throw data_error(p.string() + ": flow size differs from the event sensor size");
    }
    seq.frames[i].flow = flow.cast<float>();
  }
  if (have_window) {
    if (!seq.events.events.empty() && (seq.events.events.front().t < w0 || seq.events.events.back().t > w1)) {
      throw data_error(dir.string() + ": events fall outside the recorded window");
    }
    seq.events.t_start = w0;
    seq.events.t_end = w1;
  }
  return seq;
}

std::vector<SequenceData> load_split(const fs::path &dir)
{
  if (!fs::is_directory(dir)) { throw data_error("dataset directory " + dir.string() + " does not exist"); }
  if (is_sequence_dir(dir)) { return {load_sequence(dir)}; }
  std::vector<fs::path> subs;
  for (const auto &e : fs::directory_iterator(dir)) {
    if (e.is_directory() && is_sequence_dir(e.path())) { subs.push_back(e.path()); }
  }
  std::sort(subs.begin(), subs.end());
  if (subs.empty()) { throw data_error(dir.string() + " contains no sequence directories"); }
  std::vector<SequenceData> out;
  for (const auto &s : subs) { out.push_back(load_sequence(s)); }
  return out;
}

namespace {

VoxelGrid<float> window_grid(const EventSequence &events, Timestamp t0, Timestamp t1, const VoxelOptions &opt)
{
  if (t0 < events.t_start || t1 > events.t_end) {
    throw data_error("event stream covers [" + std::to_string(events.t_start) + ", " + std::to_string(events.t_end) +
                     "] but the window [" + std::to_string(t0) + ", " + std::to_string(t1) + "] is needed");
  }
  EventSequence w{{}, t0, t1, events.sensor};
  auto lo = std::lower_bound(events.events.begin(), events.events.end(), t0,
                             [](const Event &e, Timestamp v) { return e.t < v; });
  auto hi = std::lower_bound(lo, events.events.end(), t1, [](const Event &e, Timestamp v) { return e.t < v; });
  // The very last window of a stream also keeps events sitting on its end.
  if (t1 == events.t_end) { hi = events.events.end(); }
  w.events.assign(lo, hi);
  return build_voxel_grid<float>(w, opt);
}

} // namespace

GridCache::GridCache(const SequenceData &seq, const VoxelOptions &options)
{
  const auto &fr = seq.frames;
  contiguous_.assign(fr.size(), false);
  for (std::size_t i = 0; i < fr.size(); ++i) {
    const Timestamp d = fr[i].t_end - fr[i].t_start;
    if (i > 0) { contiguous_[i] = fr[i].t_start == fr[i - 1].t_end && d == fr[i - 1].t_end - fr[i - 1].t_start; }
    prev_.push_back(contiguous_[i] ? next_.back() : window_grid(seq.events, fr[i].t_start - d, fr[i].t_start, options));
    next_.push_back(window_grid(seq.events, fr[i].t_start, fr[i].t_end, options));
  }
}

TrainSample<float> make_sample(const SequenceData &seq, const GridCache &cache, std::size_t first, int seq_len)
{
  if (seq_len < 1 || first + seq_len > seq.frames.size()) {
    throw validation_error("sample window outside sequence " + seq.name);
  }
  TrainSample<float> s;
  s.grids.push_back(cache.prev(first));
  for (int k = 0; k < seq_len; ++k) {
    const auto &f = seq.frames[first + k];
    if (!f.flow) { throw data_error("sequence " + seq.name + ": frame " + std::to_string(first + k) + " has no ground truth"); }
    s.grids.push_back(cache.next(first + k));
    s.gts.push_back(*f.flow);
  }
  return s;
}

std::vector<SampleRef> enumerate_samples(const std::vector<SequenceData> &split, const std::vector<GridCache> &caches,
                                         int seq_len)
{
  std::vector<SampleRef> out;
  for (std::size_t s = 0; s < split.size(); ++s) {
    const auto &fr = split[s].frames;
    for (std::size_t i = 0; i + seq_len <= fr.size(); ++i) {
      bool ok = true;
      for (int k = 0; k < seq_len && ok; ++k) {
        ok = fr[i + k].flow.has_value() && (k == 0 || caches[s].continues(i + k));
      }
      if (ok) { out.push_back({s, i}); }
    }
  }
  return out;
}

} // namespace evflow
