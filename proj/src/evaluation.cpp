#include "evflow/evaluation.hpp"

#include "evflow/error.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace evflow {

std::string to_string(EvalMode m) { return m == EvalMode::Dense ? "dense" : "sparse"; }

EvalMode parse_eval_mode(const std::string &s)
{
  if (s == "dense") { return EvalMode::Dense; }
  if (s == "sparse") { return EvalMode::Sparse; }
  throw validation_error("unknown evaluation mode '" + s + "' (expected dense or sparse)");
}

namespace {

template <typename Scalar>
void check_shapes(const FlowField<Scalar> &pred, const FlowField<Scalar> &gt, const EvalMask *mask)
{
  if (pred.height() != gt.height() || pred.width() != gt.width() || pred.resolution != gt.resolution) {
    throw validation_error("prediction and ground truth differ in resolution");
  }
  if (mask && (mask->rows() != gt.height() || mask->cols() != gt.width())) {
    throw validation_error("evaluation mask differs in size from the ground truth");
  }
}

template <typename Scalar>
bool counted(const FlowField<Scalar> &gt, const EvalMask *mask, int y, int x)
{
  return gt.valid(y, x) && (!mask || (*mask)(y, x));
}

template <typename Scalar>
double error_at(const FlowField<Scalar> &pred, const FlowField<Scalar> &gt, int y, int x)
{
  return std::hypot(double(pred.u(y, x)) - double(gt.u(y, x)), double(pred.v(y, x)) - double(gt.v(y, x)));
}

} // namespace

template <typename Scalar>
void MetricAccumulator::add(const FlowField<Scalar> &pred, const FlowField<Scalar> &gt, const EvalMask *mask)
{
  check_shapes(pred, gt, mask);
  std::vector<double> errors;
  for (int y = 0; y < gt.height(); ++y) {
    for (int x = 0; x < gt.width(); ++x) {
      if (!counted(gt, mask, y, x)) { continue; }
      const double e = error_at(pred, gt, y, x);
      if (!std::isfinite(e)) {
        throw numeric_error("non-finite flow error at pixel (" + std::to_string(x) + ", " + std::to_string(y) + ")");
      }
      errors.push_back(e);
      for (std::size_t k = 0; k < kNpeThresholds.size(); ++k) { above[k] += e > kNpeThresholds[k]; }
    }
  }
  // Summing in sorted order makes the result independent of pixel order (flips, crops).
  std::sort(errors.begin(), errors.end());
  double sum = 0;
  for (double e : errors) { sum += e; }
  error_sum += sum;
  count += long(errors.size());
  ++frames;
}

void MetricAccumulator::merge(const MetricAccumulator &o)
{
  error_sum += o.error_sum;
  for (std::size_t k = 0; k < above.size(); ++k) { above[k] += o.above[k]; }
  count += o.count;
  frames += o.frames;
}

MetricReport MetricAccumulator::report(const std::string &name, EvalMode mode) const
{
  if (count == 0) { throw empty_error("empty evaluation: no valid pixels for '" + name + "'"); }
  MetricReport r;
  r.name = name;
  r.mode = mode;
  r.epe = error_sum / double(count);
  for (std::size_t k = 0; k < above.size(); ++k) { r.npe[k] = 100.0 * double(above[k]) / double(count); }
  r.valid_pixel_count = count;
  r.frames = frames;
  return r;
}

template <typename Scalar>
double epe(const FlowField<Scalar> &pred, const FlowField<Scalar> &gt, const EvalMask *mask)
{
  MetricAccumulator acc;
  acc.add(pred, gt, mask);
  return acc.report("epe", EvalMode::Dense).epe;
}

template <typename Scalar>
double npe(const FlowField<Scalar> &pred, const FlowField<Scalar> &gt, double n, const EvalMask *mask)
{
  check_shapes(pred, gt, mask);
  long above = 0, count = 0;
  for (int y = 0; y < gt.height(); ++y) {
    for (int x = 0; x < gt.width(); ++x) {
      if (!counted(gt, mask, y, x)) { continue; }
      above += error_at(pred, gt, y, x) > n;
      ++count;
    }
  }
  if (count == 0) { throw empty_error("empty evaluation: no valid pixels"); }
  return 100.0 * double(above) / double(count);
}

EvalMask sparse_mask(const EvalMask &gt_valid, const EventSequence &events)
{
  if (gt_valid.rows() != events.sensor.height || gt_valid.cols() != events.sensor.width) {
    throw validation_error("sparse_mask: sensor size differs from the ground truth");
  }
  EvalMask hit = EvalMask::Constant(gt_valid.rows(), gt_valid.cols(), false);
  for (const Event &e : events.events) { hit(e.y, e.x) = true; }
  return hit && gt_valid;
}

template <typename Scalar>
MagnitudeTable magnitude_cdf(const std::vector<FlowField<Scalar>> &gts, bool normalize_by_width)
{
  std::vector<double> mags;
  for (const auto &g : gts) {
    for (int y = 0; y < g.height(); ++y) {
      for (int x = 0; x < g.width(); ++x) {
        if (!g.valid(y, x)) { continue; }
        double m = std::hypot(double(g.u(y, x)), double(g.v(y, x)));
        if (normalize_by_width) { m = 100.0 * m / g.width(); }
        mags.push_back(m);
      }
    }
  }
  if (mags.empty()) { throw empty_error("magnitude distribution over zero valid pixels"); }
  std::sort(mags.begin(), mags.end());
  MagnitudeTable t;
  t.normalized = normalize_by_width;
  t.samples = long(mags.size());
  const double n = double(mags.size());
  for (int p = 1; p <= 99; ++p) {
    const double pos = p / 100.0 * (n - 1);
    const std::size_t lo = std::size_t(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, mags.size() - 1);
    const double f = pos - double(lo);
    t.percentiles.push_back(mags[lo] + f * (mags[hi] - mags[lo]));
  }
  return t;
}

EstimateResult ModelEstimator::estimate(const EstimateRequest &req) const
{
  const FlowEstimate<float> est = model_.estimate(*req.prev, *req.next, req.init, req.iterations);
  EstimateResult r;
  r.flow = est.predictions.back();
  r.state = full_ ? est.predictions.back() : est.final_low;
  return r;
}

EstimateResult OracleEstimator::estimate(const EstimateRequest &req) const
{
  EstimateResult r;
  const int h = req.next->data.height, w = req.next->data.width;
  r.flow = req.gt ? *req.gt : FlowField<float>(h, w);
  r.state = r.flow;
  return r;
}

SequenceEvaluation evaluate_sequences(const FlowEstimator &estimator, const std::vector<SequenceData> &split,
                                      const std::vector<GridCache> &caches, const EvalProtocol &protocol)
{
  if (caches.size() != split.size()) { throw validation_error("one grid cache per sequence is required"); }
  if (protocol.iterations < 1) { throw validation_error("iterations must be >= 1"); }
  SequenceEvaluation out;
  MetricAccumulator total;
  for (std::size_t s = 0; s < split.size(); ++s) {
    const SequenceData &seq = split[s];
    MetricAccumulator acc;
    std::optional<FlowField<float>> state;
    for (std::size_t i = 0; i < seq.frames.size(); ++i) {
      if (!caches[s].continues(i)) { state.reset(); }
      std::optional<FlowField<float>> init;
      if (protocol.warm_start && state) { init = forward_warp_flow(*state, protocol.warp); }
      const GtFrame &frame = seq.frames[i];
      EstimateRequest req;
      req.prev = &caches[s].prev(i);
      req.next = &caches[s].next(i);
      req.init = init ? &*init : nullptr;
      req.iterations = protocol.iterations;
      req.gt = frame.flow ? &*frame.flow : nullptr;
      EstimateResult res = estimator.estimate(req);
      state = std::move(res.state);
      if (!frame.flow) {
        ++out.skipped_frames;
        out.log.push_back("sequence " + seq.name + ": frame " + std::to_string(i) + " has no ground truth, skipped");
        continue;
      }
      if (protocol.mode == EvalMode::Sparse) {
        const EvalMask m = sparse_mask(frame.flow->valid, restrict_window(seq.events, frame.t_start, frame.t_end));
        acc.add(res.flow, *frame.flow, &m);
      } else {
        acc.add(res.flow, *frame.flow);
      }
    }
    out.sequences.push_back(acc.report(seq.name, protocol.mode));
    total.merge(acc);
  }
  out.aggregate = total.report("aggregate", protocol.mode);
  return out;
}

std::string format_report_table(const std::vector<ProtocolRow> &rows, EvalMode mode)
{
  std::ostringstream o;
  o << "# mode " << to_string(mode) << "; aggregate weighted by valid pixels; NPE counts errors > N px\n";
  o << std::left << std::setw(18) << "protocol" << std::setw(8) << "iters" << std::setw(12) << "EPE" << std::setw(10)
    << "1PE%" << std::setw(10) << "2PE%" << std::setw(10) << "3PE%" << "pixels\n";
  o << std::fixed;
  for (const auto &r : rows) {
    const MetricReport &a = r.result.aggregate;
    o << std::setw(18) << r.label << std::setw(8) << r.iterations << std::setw(12) << std::setprecision(4) << a.epe
      << std::setw(10) << std::setprecision(2) << a.npe[0] << std::setw(10) << a.npe[1] << std::setw(10) << a.npe[2]
      << a.valid_pixel_count << "\n";
  }
  for (const auto &r : rows) {
    for (const auto &s : r.result.sequences) {
      o << "  " << std::setw(16) << r.label << std::setw(8) << r.iterations << std::setw(12) << std::setprecision(4)
        << s.epe << std::setw(10) << std::setprecision(2) << s.npe[0] << std::setw(10) << s.npe[1] << std::setw(10)
        << s.npe[2] << s.valid_pixel_count << "  " << s.name << "\n";
    }
  }
  return o.str();
}

std::string report_json(const std::vector<ProtocolRow> &rows, EvalMode mode, const std::string &checkpoint)
{
  using nlohmann::json;
  auto metrics = [](const MetricReport &m) {
    return json{{"name", m.name},         {"epe", m.epe},       {"npe1", m.npe[0]}, {"npe2", m.npe[1]},
                {"npe3", m.npe[2]},       {"valid_pixels", m.valid_pixel_count}, {"frames", m.frames}};
  };
  json doc;
  doc["checkpoint"] = checkpoint;
  doc["mode"] = to_string(mode);
  doc["aggregation"] = "valid-pixel weighted";
  doc["npe_rule"] = "error > N px";
  doc["rows"] = json::array();
  for (const auto &r : rows) {
    json row{{"protocol", r.label}, {"warmstart", r.warmstart}, {"iters", r.iterations},
             {"mode", to_string(mode)}, {"skipped_frames", r.result.skipped_frames}};
    row["aggregate"] = metrics(r.result.aggregate);
    row["sequences"] = json::array();
    for (const auto &s : r.result.sequences) { row["sequences"].push_back(metrics(s)); }
    doc["rows"].push_back(row);
  }
  return doc.dump(2);
}

#define EVFLOW_INSTANTIATE_EVAL(S)                                                                       \
  template double epe(const FlowField<S> &, const FlowField<S> &, const EvalMask *);                     \
  template double npe(const FlowField<S> &, const FlowField<S> &, double, const EvalMask *);             \
  template void MetricAccumulator::add(const FlowField<S> &, const FlowField<S> &, const EvalMask *);    \
  template MagnitudeTable magnitude_cdf(const std::vector<FlowField<S>> &, bool);

EVFLOW_INSTANTIATE_EVAL(float)
EVFLOW_INSTANTIATE_EVAL(double)

} // namespace evflow
