#include "evflow/events.hpp"

#include "evflow/error.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace evflow {

void EventSequence::validate() const
{
  for (std::size_t i = 0; i < events.size(); ++i) {
    const Event &e = events[i];
    if (e.p != 1 && e.p != -1) { throw data_error("event " + std::to_string(i) + ": polarity must be +1 or -1"); }
    if (e.x >= sensor.width || e.y >= sensor.height) {
      throw data_error("event " + std::to_string(i) + ": pixel (" + std::to_string(e.x) + ", " + std::to_string(e.y) +
                       ") outside sensor");
    }
    if (e.t < t_start || e.t > t_end) { throw data_error("event " + std::to_string(i) + ": timestamp outside window"); }
    if (i > 0 && e.t < events[i - 1].t) { throw data_error("event " + std::to_string(i) + ": timestamps not sorted"); }
  }
}

namespace {

auto lower(const std::vector<Event> &ev, Timestamp t)
{
  return std::lower_bound(ev.begin(), ev.end(), t, [](const Event &e, Timestamp v) { return e.t < v; });
}

auto upper(const std::vector<Event> &ev, Timestamp t)
{
  return std::upper_bound(ev.begin(), ev.end(), t, [](Timestamp v, const Event &e) { return v < e.t; });
}

} // namespace

std::pair<EventSequence, EventSequence> slice_window(const EventSequence &stream, Timestamp t_i, Timestamp dt)
{
  if (dt < 0) { throw validation_error("slice_window: negative duration"); }
  const Timestamp lo = t_i - dt, hi = t_i + dt;
  if (lo < stream.t_start || hi > stream.t_end) {
    const Timestamp miss_lo = lo < stream.t_start ? lo : stream.t_end;
    const Timestamp miss_hi = lo < stream.t_start ? stream.t_start : hi;
    throw data_error("slice_window: stream covers [" + std::to_string(stream.t_start) + ", " +
                     std::to_string(stream.t_end) + "], missing [" + std::to_string(miss_lo) + ", " +
                     std::to_string(miss_hi) + "]");
  }
  EventSequence before{{}, lo, t_i, stream.sensor};
  EventSequence after{{}, t_i, hi, stream.sensor};
  const auto a = lower(stream.events, lo);
  const auto mid = lower(stream.events, t_i);
  const auto b = upper(stream.events, hi);
  before.events.assign(a, mid);
  after.events.assign(mid, b);
  return {std::move(before), std::move(after)};
}

EventSequence restrict_window(const EventSequence &stream, Timestamp t0, Timestamp t1)
{
  EventSequence out{{}, t0, t1, stream.sensor};
  out.events.assign(lower(stream.events, t0), upper(stream.events, t1));
  return out;
}

template <typename Scalar>
VoxelGrid<Scalar> build_voxel_grid(const EventSequence &seq, const VoxelOptions &options)
{
  const int bins = options.bins;
  if (bins < 1) { throw validation_error("voxel grid needs at least one temporal bin"); }
  const int h = seq.sensor.height, w = seq.sensor.width;
  const int channels = options.split_polarity ? 2 * bins : bins;
  Tensor<double> acc(channels, h, w);
  const double span = double(seq.t_end - seq.t_start);
  for (std::size_t i = 0; i < seq.events.size(); ++i) {
    const Event &e = seq.events[i];
    if (e.t < seq.t_start || e.t > seq.t_end) {
      throw data_error("build_voxel_grid: event " + std::to_string(i) + " at t=" + std::to_string(e.t) +
                       " outside window");
    }
    if (e.x >= w || e.y >= h) { throw data_error("build_voxel_grid: event outside sensor"); }
    const int base = (options.split_polarity && e.p < 0) ? bins : 0;
    const double tau = span > 0 ? double(e.t - seq.t_start) / span * (bins - 1) : 0.0;
    const int b0 = std::min(int(std::floor(tau)), bins - 1);
    const double frac = tau - b0;
    acc(base + b0, e.y, e.x) += e.p * (1.0 - frac);
    if (frac > 0 && b0 + 1 < bins) { acc(base + b0 + 1, e.y, e.x) += e.p * frac; }
  }
  VoxelGrid<Scalar> grid;
  grid.data = acc.cast<Scalar>();
  grid.bins = bins;
  grid.t_start = seq.t_start;
  grid.t_end = seq.t_end;
  return grid;
}

template VoxelGrid<float> build_voxel_grid<float>(const EventSequence &, const VoxelOptions &);
template VoxelGrid<double> build_voxel_grid<double>(const EventSequence &, const VoxelOptions &);

namespace {

template <typename T>
void put_le(std::ostream &os, T v)
{
  std::array<unsigned char, sizeof(T)> b;
  using U = std::make_unsigned_t<T>;
  U u = static_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) { b[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xff); }
  os.write(reinterpret_cast<const char *>(b.data()), b.size());
}

template <typename T>
T get_le(const unsigned char *p)
{
  using U = std::make_unsigned_t<T>;
  U u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) { u |= U(p[i]) << (8 * i); }
  return static_cast<T>(u);
}

constexpr std::size_t kRecordSize = 13;

} // namespace

void write_event_file(const std::filesystem::path &path, const EventSequence &seq)
{
  std::ofstream os(path, std::ios::binary);
  if (!os) { throw data_error("cannot write " + path.string()); }
  os.write("EVT1", 4);
  put_le<std::uint16_t>(os, std::uint16_t(seq.sensor.height));
  put_le<std::uint16_t>(os, std::uint16_t(seq.sensor.width));
  put_le<std::uint64_t>(os, std::uint64_t(seq.events.size()));
  for (const Event &e : seq.events) {
    put_le<std::uint16_t>(os, e.x);
    put_le<std::uint16_t>(os, e.y);
    put_le<std::int64_t>(os, e.t);
    put_le<std::int8_t>(os, e.p);
  }
  if (!os) { throw data_error("short write to " + path.string()); }
}

EventSequence read_event_file(const std::filesystem::path &path)
{
  std::ifstream is(path, std::ios::binary);
  if (!is) { throw data_error("cannot open " + path.string()); }
  std::array<unsigned char, 16> header{};
  is.read(reinterpret_cast<char *>(header.data()), header.size());
  if (is.gcount() != 16 || std::memcmp(header.data(), "EVT1", 4) != 0) {
    throw data_error(path.string() + ": not an EVT1 event file");
  }
  EventSequence seq;
  seq.sensor.height = get_le<std::uint16_t>(header.data() + 4);
  seq.sensor.width = get_le<std::uint16_t>(header.data() + 6);
  const auto count = get_le<std::uint64_t>(header.data() + 8);
  std::vector<unsigned char> body(count * kRecordSize);
  is.read(reinterpret_cast<char *>(body.data()), std::streamsize(body.size()));
  if (std::size_t(is.gcount()) != body.size()) { throw data_error(path.string() + ": truncated event records"); }
  seq.events.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const unsigned char *r = body.data() + i * kRecordSize;
    seq.events[i] = Event{get_le<std::uint16_t>(r), get_le<std::uint16_t>(r + 2), get_le<std::int64_t>(r + 4),
                          get_le<std::int8_t>(r + 12)};
  }
  if (!seq.events.empty()) {
    seq.t_start = seq.events.front().t;
    seq.t_end = seq.events.back().t;
  }
  seq.validate();
  return seq;
}

void write_event_text(const std::filesystem::path &path, const EventSequence &seq)
{
  std::ofstream os(path);
  if (!os) { throw data_error("cannot write " + path.string()); }
  os << "# sensor " << seq.sensor.height << ' ' << seq.sensor.width << '\n';
  for (const Event &e : seq.events) { os << e.t << ' ' << e.x << ' ' << e.y << ' ' << int(e.p) << '\n'; }
}

EventSequence read_event_text(const std::filesystem::path &path)
{
  std::ifstream is(path);
  if (!is) { throw data_error("cannot open " + path.string()); }
  EventSequence seq;
  bool have_sensor = false;
  int max_x = -1, max_y = -1;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string first;
    if (!(ls >> first)) { continue; }
    if (first[0] == '#') {
      std::string key;
      if (ls >> key && key == "sensor" && ls >> seq.sensor.height >> seq.sensor.width) { have_sensor = true; }
      continue;
    }
    long long t = 0;
    int x = 0, y = 0, p = 0;
    std::istringstream full(line);
    if (!(full >> t >> x >> y >> p) || x < 0 || y < 0 || x > 65535 || y > 65535) {
      throw data_error(path.string() + ":" + std::to_string(lineno) + ": expected 't x y p'");
    }
    seq.events.push_back(Event{std::uint16_t(x), std::uint16_t(y), Timestamp(t), std::int8_t(p)});
    max_x = std::max(max_x, x);
    max_y = std::max(max_y, y);
  }
  if (!have_sensor) { seq.sensor = {max_y + 1, max_x + 1}; }
  if (!seq.events.empty()) {
    seq.t_start = seq.events.front().t;
    seq.t_end = seq.events.back().t;
  }
  seq.validate();
  return seq;
}

} // namespace evflow
