#include "evflow/commands.hpp"

#include "evflow/error.hpp"
#include "evflow/flow_io.hpp"
#include "evflow/geometry.hpp"
#include "evflow/viz.hpp"

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <memory>
#include <random>
#include <set>
#include <sstream>

#ifndef EVFLOW_VERSION
#define EVFLOW_VERSION "unknown"
#endif

namespace evflow {

namespace fs = std::filesystem;
using nlohmann::json;

std::string code_version() { return EVFLOW_VERSION; }

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v)
{
  std::ostringstream o;
  o.precision(17);
  o << v;
  return o.str();
}

void write_text(const fs::path &path, const std::string &text)
{
  std::ofstream out(path);
  if (!out) { throw data_error("cannot write " + path.string()); }
  out << text;
  if (!out) { throw data_error("write failed for " + path.string()); }
}

std::string numbered(const char *prefix, std::size_t i, const char *ext)
{
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%06zu%s", prefix, i, ext);
  return buf;
}

std::vector<std::string> split_list(const std::string &s)
{
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    if (b == std::string::npos) { continue; }
    out.push_back(item.substr(b, item.find_last_not_of(" \t") - b + 1));
  }
  return out;
}

} // namespace

void RunManifest::write(const fs::path &dir) const
{
  json j;
  j["command"] = command;
  j["config"] = config;
  j["seeds"] = seeds;
  j["inputs"] = inputs;
  j["outputs"] = outputs;
  if (!notes.empty()) { j["notes"] = notes; }
  j["code_version"] = code_version();
  j["wallclock_seconds"] = wallclock;
  write_text(dir / "manifest.json", j.dump(2) + "\n");
}

fs::path resolve_data_path(const fs::path &p)
{
  const char *root = std::getenv("EVFLOW_DATA_ROOT");
  if (p.empty()) {
    if (!root || !*root) { throw validation_error("no data directory given and EVFLOW_DATA_ROOT is not set"); }
    return fs::path(root);
  }
  if (p.is_relative() && !fs::exists(p) && root && *root) { return fs::path(root) / p; }
  return p;
}

SequenceData synthesize_sequence(const SceneSpec &spec, const std::string &name)
{
  spec.validate();
  SequenceData seq;
  seq.name = name;
  seq.events = generate_events(spec);
  const Timestamp dt = spec.gt_dt_us();
  for (Timestamp t : spec.frame_starts()) {
    GtFrame f;
    f.t_start = t;
    f.t_end = t + dt;
    f.flow = analytic_flow(spec, double(t) * 1e-6, double(dt) * 1e-6).cast<float>();
    seq.frames.push_back(std::move(f));
  }
  if (seq.frames.empty()) {
    throw validation_error("scene spec: field 'duration' leaves no ground-truth frame (needs at least 2 gt_dt)");
  }
  return seq;
}

// ---- synth -----------------------------------------------------------------

SplitSpec SplitSpec::from_kv(const KeyValues &kv)
{
  std::set<std::string> known(scene_spec_keys().begin(), scene_spec_keys().end());
  known.insert({"sequences", "velocity_jitter"});
  kv.reject_unknown(known);
  SplitSpec s;
  s.scene = SceneSpec::from_kv(kv);
  s.sequences = int(kv.get_int("sequences", 1));
  s.velocity_jitter = kv.get_double("velocity_jitter", 0);
  if (s.sequences < 1) { throw validation_error(kv.source() + ": field 'sequences' must be >= 1"); }
  if (!(s.velocity_jitter >= 0)) { throw validation_error(kv.source() + ": field 'velocity_jitter' must be >= 0"); }
  try {
    s.scene.validate();
  } catch (const Error &e) {
    throw Error(e.kind(), kv.source() + ": " + e.what());
  }
  return s;
}

KeyValues SplitSpec::to_kv() const
{
  KeyValues kv = scene.to_kv();
  kv.set("sequences", std::to_string(sequences));
  kv.set("velocity_jitter", fmt(velocity_jitter));
  return kv;
}

SceneSpec SplitSpec::sequence_scene(int i) const
{
  SceneSpec s = scene;
  s.seed = scene.seed + std::uint64_t(i);
  if (velocity_jitter > 0) {
    std::mt19937_64 rng(scene.seed * 1000003ULL + std::uint64_t(i));
    std::uniform_real_distribution<double> d(-velocity_jitter, velocity_jitter);
    s.motion.vx += d(rng);
    s.motion.vy += d(rng);
  }
  return s;
}

std::vector<fs::path> cmd_synth(const SynthOptions &options, std::ostream &log)
{
  const auto t0 = Clock::now();
  SplitSpec split = SplitSpec::from_kv(KeyValues::load(options.spec));
  if (options.seed) { split.scene.seed = *options.seed; }
  fs::create_directories(options.out);
  std::vector<fs::path> dirs;
  for (int i = 0; i < split.sequences; ++i) {
    const SceneSpec scene = split.sequence_scene(i);
    char name[32];
    std::snprintf(name, sizeof name, "seq_%03d", i);
    const fs::path dir = split.sequences == 1 ? options.out : options.out / name;
    const auto ts = Clock::now();
    SequenceData seq = synthesize_sequence(scene, name);
    save_sequence(dir, seq);
    log << "synth: " << dir.string() << ": " << seq.events.size() << " events, " << seq.frames.size()
        << " flow frames, v = (" << scene.motion.vx << ", " << scene.motion.vy << ") px/s\n";
    if (split.sequences > 1) {
      RunManifest m;
      m.command = "synth";
      m.config = scene.to_kv().to_string();
      m.seeds["scene"] = scene.seed;
      m.inputs["spec"] = options.spec.string();
      m.outputs = {"events.bin", "timestamps.txt"};
      for (std::size_t k = 0; k < seq.frames.size(); ++k) { m.outputs.push_back(flow_file_name(k)); }
      m.wallclock = seconds_since(ts);
      m.write(dir);
    }
    dirs.push_back(dir);
  }
  RunManifest m;
  m.command = "synth";
  m.config = split.to_kv().to_string();
  m.seeds["scene"] = split.scene.seed;
  m.inputs["spec"] = options.spec.string();
  if (split.sequences == 1) {
    m.outputs = {"events.bin", "timestamps.txt"};
    const auto n = split.scene.frame_starts().size();
    for (std::size_t k = 0; k < n; ++k) { m.outputs.push_back(flow_file_name(k)); }
  } else {
    for (const auto &d : dirs) { m.outputs.push_back(d.filename().string()); }
  }
  m.wallclock = seconds_since(t0);
  m.write(options.out);
  return dirs;
}

// ---- gtgen -----------------------------------------------------------------

std::string disparity_file_name(std::size_t index) { return numbered("disparity", index, ".png"); }

void cmd_gtgen(const GtgenOptions &options, std::ostream &log)
{
  const auto t0 = Clock::now();
  if (options.dt <= 0) { throw validation_error("--dt must be a positive number of microseconds"); }
  if (options.consistency && !(*options.consistency > 0)) {
    throw validation_error("--consistency threshold must be positive");
  }
  const CameraModel cam = read_calibration(options.calibration);
  const PoseTrajectory traj = read_trajectory(options.trajectory);

  std::vector<Timestamp> times;
  {
    const fs::path tpath = options.disparity_dir / "timestamps.txt";
    std::ifstream in(tpath);
    if (!in) { throw data_error("cannot open " + tpath.string()); }
    std::string line;
    int n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (const auto h = line.find('#'); h != std::string::npos) { line.resize(h); }
      if (line.find_first_not_of(" \t\r") == std::string::npos) { continue; }
      std::istringstream ls(line);
      long long t = 0;
      if (!(ls >> t)) { throw data_error(tpath.string() + ":" + std::to_string(n) + ": expected a timestamp"); }
      times.push_back(Timestamp(t));
    }
    if (times.empty()) { throw data_error(tpath.string() + " lists no disparity maps"); }
  }

  fs::create_directories(options.out);
  std::vector<FlowPair> pairs;
  std::vector<DisparityMap> disps;
  for (std::size_t i = 0; i < times.size(); ++i) {
    DisparityMap disp = read_disparity_png(options.disparity_dir / disparity_file_name(i));
    if (disp.height() != cam.height || disp.width() != cam.width) {
      throw data_error(disparity_file_name(i) + " is " + std::to_string(disp.width()) + "x" +
                       std::to_string(disp.height()) + ", calibration says " + std::to_string(cam.width) + "x" +
                       std::to_string(cam.height));
    }
    const Timestamp t = times[i];
    for (Timestamp tq : {t, t + options.dt, t - options.dt}) {
      if (traj.covers(tq) && !traj.has_sample(tq)) {
        log << "gtgen: no pose at t = " << tq << " us; interpolating between the nearest poses\n";
      }
    }
    if (std::find(times.begin(), times.end(), t + options.dt) == times.end()) {
      log << "gtgen: dt " << options.dt << " us does not land on a disparity timestamp from t = " << t << "\n";
    }
    GeometryStats stats;
    pairs.push_back(flow_pair_at_rate(disp, cam, traj, t, options.dt, &stats));
    disps.push_back(std::move(disp));
    if (stats.degenerate_depth > 0 || stats.out_of_frame > 0) {
      log << "gtgen: frame " << i << ": " << stats.degenerate_depth << " degenerate-depth and " << stats.out_of_frame
          << " out-of-frame pixels marked invalid\n";
    }
  }

  RunManifest m;
  m.command = "gtgen";
  std::ostringstream cfg;
  cfg << "dt = " << options.dt << "\n";
  if (options.consistency) { cfg << "consistency = " << fmt(*options.consistency) << "\n"; }
  m.config = cfg.str();
  m.inputs = {{"disparity", options.disparity_dir.string()},
              {"calibration", options.calibration.string()},
              {"trajectory", options.trajectory.string()}};

  std::ostringstream ts;
  ts << "# t_i dt (microseconds); forward covers [t_i, t_i + dt], backward [t_i, t_i - dt]\n";
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    FlowField<double> forward = pairs[i].forward;
    if (options.consistency) {
      // The backward flow of the map taken at t_i + dt closes the loop.
      const auto j = std::find(times.begin(), times.end(), times[i] + options.dt);
      if (j != times.end()) {
        const long before = forward.valid_count();
        forward = consistency_filter(forward, pairs[std::size_t(j - times.begin())].backward, *options.consistency);
        log << "gtgen: frame " << i << ": consistency check removed " << before - forward.valid_count()
            << " pixels\n";
      } else {
        log << "gtgen: frame " << i << ": no disparity map at t_i + dt, consistency check skipped\n";
      }
    }
    write_flow_png(options.out / numbered("forward", i, ".png"), forward);
    write_flo(options.out / numbered("forward", i, ".flo"), forward);
    write_flow_png(options.out / numbered("backward", i, ".png"), pairs[i].backward);
    write_flo(options.out / numbered("backward", i, ".flo"), pairs[i].backward);
    for (const char *k : {"forward", "backward"}) {
      m.outputs.push_back(numbered(k, i, ".png"));
      m.outputs.push_back(numbered(k, i, ".flo"));
    }
    ts << times[i] << " " << options.dt << "\n";
  }
  write_text(options.out / "timestamps.txt", ts.str());
  m.outputs.push_back("timestamps.txt");
  m.wallclock = seconds_since(t0);
  m.write(options.out);
  log << "gtgen: wrote " << pairs.size() << " forward/backward pairs to " << options.out.string() << "\n";
}

// ---- train -----------------------------------------------------------------

const std::vector<std::string> &train_config_keys()
{
  static const std::vector<std::string> keys{
    "data", "out", "seed", "resume", "max_steps", "checkpoint_every",
    "preset", "phases", "epoch_scale", "lr", "lr_decay", "epochs", "seq_len", "warm_seq_len", "warmstart",
    "gamma", "iters", "crop_height", "crop_width", "hflip_prob", "clip_norm", "batch_size",
    "warm_full_resolution", "warp_epsilon", "warp_detach_coordinates",
    "model", "model_seed", "voxel_bins", "split_polarity", "feature_dim", "hidden_dim", "context_dim",
    "pyramid_levels", "lookup_radius", "upsample", "encoder_base", "motion_dim", "detach_iteration_flow"};
  return keys;
}

TrainPlan plan_training(const TrainCommandOptions &options)
{
  KeyValues kv = KeyValues::load(options.config);
  std::set<std::string> known(train_config_keys().begin(), train_config_keys().end());
  std::set<std::string> phase_keys;
  for (const auto &[key, e] : kv.entries()) {
    if (key.rfind("epochs.", 0) == 0 || key.rfind("lr.", 0) == 0) { phase_keys.insert(key); }
  }
  known.insert(phase_keys.begin(), phase_keys.end());
  kv.reject_unknown(known);

  if (options.data) { kv.set("data", options.data->string()); }
  if (options.out) { kv.set("out", options.out->string()); }
  if (options.seed) { kv.set("seed", std::to_string(*options.seed)); }
  if (options.resume) { kv.set("resume", options.resume->string()); }
  if (options.max_steps) { kv.set("max_steps", std::to_string(*options.max_steps)); }

  TrainPlan plan;
  const std::string model_preset = kv.get_string("model", "default");
  if (model_preset == "desk") {
    plan.model = ModelConfig::desk();
  } else if (model_preset != "default") {
    throw validation_error(kv.source() + ": field 'model' must be default or desk, got '" + model_preset + "'");
  }
  ModelConfig &mc = plan.model;
  mc.voxel_bins = int(kv.get_int("voxel_bins", mc.voxel_bins));
  mc.split_polarity = kv.get_bool("split_polarity", mc.split_polarity);
  mc.feature_dim = int(kv.get_int("feature_dim", mc.feature_dim));
  mc.hidden_dim = int(kv.get_int("hidden_dim", mc.hidden_dim));
  mc.context_dim = int(kv.get_int("context_dim", mc.context_dim));
  mc.pyramid_levels = int(kv.get_int("pyramid_levels", mc.pyramid_levels));
  mc.lookup_radius = int(kv.get_int("lookup_radius", mc.lookup_radius));
  mc.encoder_base = int(kv.get_int("encoder_base", mc.encoder_base));
  mc.motion_dim = int(kv.get_int("motion_dim", mc.motion_dim));
  mc.detach_iteration_flow = kv.get_bool("detach_iteration_flow", mc.detach_iteration_flow);
  if (kv.has("upsample")) { mc.upsample = parse_upsample_mode(kv.get_string("upsample", "")); }

  TrainConfig &tc = plan.run.train;
  tc.gamma = kv.get_double("gamma", tc.gamma);
  tc.iters = int(kv.get_int("iters", tc.iters));
  mc.iterations = tc.iters;
  tc.crop_height = int(kv.get_int("crop_height", tc.crop_height));
  tc.crop_width = int(kv.get_int("crop_width", tc.crop_width));
  tc.hflip_prob = kv.get_double("hflip_prob", tc.hflip_prob);
  tc.clip_norm = kv.get_double("clip_norm", tc.clip_norm);
  tc.batch_size = int(kv.get_int("batch_size", tc.batch_size));
  tc.seed = std::uint64_t(kv.get_int("seed", 0));
  tc.warm_full_resolution = kv.get_bool("warm_full_resolution", tc.warm_full_resolution);
  tc.warp.epsilon = kv.get_double("warp_epsilon", tc.warp.epsilon);
  tc.warp.detach_coordinates = kv.get_bool("warp_detach_coordinates", tc.warp.detach_coordinates);
  try {
    mc.validate();
  } catch (const Error &e) {
    throw Error(e.kind(), kv.source() + ": " + e.what());
  }

  plan.preset = kv.get_string("preset", "dsec");
  const double scale = kv.get_double("epoch_scale", 1.0);
  const std::optional<double> lr = kv.has("lr") ? std::optional<double>(kv.get_double("lr", 0)) : std::nullopt;
  std::vector<TrainingPhase> phases;
  if (plan.preset == "single") {
    TrainingPhase p;
    p.name = "train";
    p.lr = lr.value_or(1e-4);
    p.seq_len = int(kv.get_int("seq_len", 1));
    p.warm_start = kv.get_bool("warmstart", false);
    p.epochs = std::max(1, int(std::lround(scale * double(kv.get_int("epochs", 40)))));
    phases.push_back(p);
  } else {
    if (kv.has("epochs")) { throw validation_error(kv.source() + ": field 'epochs' only applies to preset single"); }
    try {
      phases = schedule(plan.preset, scale, lr);
    } catch (const Error &e) {
      throw Error(e.kind(), kv.source() + ": field 'preset': " + e.what());
    }
  }
  if (kv.has("phases")) {
    std::vector<TrainingPhase> picked;
    for (const auto &name : split_list(kv.get_string("phases", ""))) {
      const auto it = std::find_if(phases.begin(), phases.end(), [&](const auto &p) { return p.name == name; });
      if (it == phases.end()) {
        throw validation_error(kv.source() + ": field 'phases' names unknown phase '" + name + "'");
      }
      picked.push_back(*it);
    }
    if (picked.empty()) { throw validation_error(kv.source() + ": field 'phases' is empty"); }
    phases = picked;
  }
  for (auto &p : phases) {
    if (plan.preset != "single") {
      if (p.warm_start && kv.has("warm_seq_len")) { p.seq_len = int(kv.get_int("warm_seq_len", p.seq_len)); }
      if (!p.warm_start && kv.has("seq_len")) { p.seq_len = int(kv.get_int("seq_len", p.seq_len)); }
      if (kv.has("warmstart") && !kv.get_bool("warmstart", true)) { p.warm_start = false; }
    }
    if (kv.has("epochs." + p.name)) { p.epochs = int(kv.get_int("epochs." + p.name, p.epochs)); }
    if (kv.has("lr." + p.name)) { p.lr = kv.get_double("lr." + p.name, p.lr); }
    if (p.epochs < 1 || p.seq_len < 1 || !(p.lr > 0)) {
      throw validation_error(kv.source() + ": phase '" + p.name + "' needs epochs >= 1, seq_len >= 1 and lr > 0");
    }
  }
  for (const auto &key : phase_keys) {
    const std::string name = key.substr(key.find('.') + 1);
    if (std::none_of(phases.begin(), phases.end(), [&](const auto &p) { return p.name == name; })) {
      throw validation_error(kv.source() + ": field '" + key + "' names a phase not in the schedule");
    }
  }
  plan.run.phases = phases;
  const std::string decay = kv.get_string("lr_decay", "constant");
  if (decay != "constant" && decay != "linear") {
    throw validation_error(kv.source() + ": field 'lr_decay' must be constant or linear, got '" + decay + "'");
  }
  plan.run.linear_decay = decay == "linear";
  plan.run.checkpoint_every = long(kv.get_int("checkpoint_every", 0));
  plan.run.max_steps = long(kv.get_int("max_steps", -1));
  plan.run.out_dir = kv.get_string("out", "");
  if (plan.run.out_dir.empty()) { throw validation_error(kv.source() + ": no output directory (field 'out' or --out)"); }
  plan.data = resolve_data_path(kv.get_string("data", ""));
  if (kv.has("resume")) { plan.resume = fs::path(kv.get_string("resume", "")); }

  // Validate the per-phase configs up front.
  TrainConfig probe = tc;
  for (const auto &p : phases) {
    probe.seq_len = p.seq_len;
    probe.lr = p.lr;
    probe.epochs = p.epochs;
    probe.warmstart_in_training = p.warm_start;
    try {
      probe.validate();
    } catch (const Error &e) {
      throw Error(e.kind(), kv.source() + ": " + e.what());
    }
  }
  kv.set("model_seed", std::to_string(kv.get_int("model_seed", kv.get_int("seed", 0))));
  plan.resolved = kv;
  plan.run.run_config = kv.to_string();
  return plan;
}

TrainState cmd_train(const TrainCommandOptions &options, std::ostream &log)
{
  const auto t0 = Clock::now();
  TrainPlan plan = plan_training(options);
  const auto split = load_split(plan.data);
  for (const auto &s : split) {
    if (!(s.sensor() == split.front().sensor())) {
      throw data_error("training split mixes sensor sizes (" + s.name + ")");
    }
  }
  std::optional<Checkpoint> resumed;
  FlowModel<float> model(plan.model, std::uint64_t(plan.resolved.get_int("model_seed", 0)));
  if (plan.resume) {
    resumed = load_checkpoint(*plan.resume);
    if (!resumed->train) { throw data_error(plan.resume->string() + " carries no training state to resume"); }
    if (!(resumed->config == plan.model)) {
      throw validation_error(plan.resume->string() + ": model config differs from the training config");
    }
    model = model_from_checkpoint(*resumed);
  }
  RunOptions run = plan.run;
  run.on_step = [&](const StepLog &s) {
    if (options.on_step) { options.on_step(s); }
    if (s.step % 100 == 0) {
      log << "train: step " << s.step << " phase " << s.phase << " loss " << s.loss << " (" << std::fixed
          << std::setprecision(1) << s.wallclock << " s)\n"
          << std::defaultfloat << std::setprecision(6);
    }
  };
  Trainer trainer(model, split, run);
  if (resumed) {
    trainer.resume(*resumed->train);
    log << "train: resuming at step " << resumed->train->step << " (phase " << resumed->train->phase << ", epoch "
        << resumed->train->epoch << ")\n";
  }
  const TrainState state = trainer.run();

  RunManifest m;
  m.command = "train";
  m.config = plan.run.run_config;
  m.seeds["train"] = plan.run.train.seed;
  m.seeds["model"] = std::uint64_t(plan.resolved.get_int("model_seed", 0));
  m.inputs["config"] = options.config.string();
  m.inputs["data"] = plan.data.string();
  if (plan.resume) { m.inputs["resume"] = plan.resume->string(); }
  m.outputs = {"checkpoint.bin", "metrics.csv"};
  std::string warm;
  for (const auto &p : plan.run.phases) {
    m.outputs.push_back("checkpoint_" + p.name + ".bin");
    if (p.warm_start) { warm += (warm.empty() ? "" : ",") + p.name; }
  }
  m.notes["protocol"] = warm.empty() ? "cold-start" : "warm-start";
  if (!warm.empty()) { m.notes["warm_start_phases"] = warm; }
  m.notes["final_step"] = std::to_string(state.step);
  m.notes["final_loss"] = fmt(state.last_loss);
  m.wallclock = seconds_since(t0);
  m.write(plan.run.out_dir);
  log << "train: finished at step " << state.step << ", loss " << state.last_loss << ", "
      << (warm.empty() ? "cold-start" : "warm-start") << " protocol\n";
  return state;
}

// ---- eval ------------------------------------------------------------------

namespace {

struct LoadedEstimator
{
  Checkpoint ckpt;
  std::unique_ptr<FlowModel<float>> model; // owned here so moves keep the estimator's reference valid
  std::unique_ptr<FlowEstimator> estimator;
};

LoadedEstimator load_estimator(const fs::path &path, const std::vector<SequenceData> &split)
{
  LoadedEstimator le;
  le.ckpt = load_checkpoint(path);
  if (le.ckpt.train && le.ckpt.train->sensor_height > 0) {
    const SensorSize trained{le.ckpt.train->sensor_height, le.ckpt.train->sensor_width};
    for (const auto &s : split) {
      if (!(s.sensor() == trained)) {
        throw validation_error("incompatible resolution: " + path.string() + " was trained on " +
                               std::to_string(trained.width) + "x" + std::to_string(trained.height) +
                               ", sequence " + s.name + " is " + std::to_string(s.sensor().width) + "x" +
                               std::to_string(s.sensor().height));
      }
    }
  }
  if (le.ckpt.kind == "oracle") {
    le.estimator = std::make_unique<OracleEstimator>();
  } else {
    bool full = false;
    if (le.ckpt.train && !le.ckpt.train->run_config.empty()) {
      full = KeyValues::parse(le.ckpt.train->run_config, path.string()).get_bool("warm_full_resolution", false);
    }
    le.model = std::make_unique<FlowModel<float>>(model_from_checkpoint(le.ckpt));
    le.estimator = std::make_unique<ModelEstimator>(*le.model, full);
  }
  return le;
}

} // namespace

std::vector<ProtocolRow> cmd_eval(const EvalCommandOptions &options, std::ostream &log)
{
  const auto t0 = Clock::now();
  if (options.iterations < 1) { throw validation_error("--iters must be >= 1"); }
  if (options.warmstart != "off" && options.warmstart != "eval" && options.warmstart != "train-eval") {
    throw validation_error("--warmstart must be off, eval or train-eval, got '" + options.warmstart + "'");
  }
  if (options.out.empty()) { throw validation_error("--out is required"); }
  const fs::path data = resolve_data_path(options.data.value_or(fs::path()));
  const auto split = load_split(data);

  // Both checkpoints are checked against the data before any inference.
  LoadedEstimator base = load_estimator(options.checkpoint, split);
  std::optional<LoadedEstimator> ws;
  const bool need_ws = options.ablation || options.warmstart == "train-eval";
  if (need_ws && options.ws_checkpoint) {
    ws.emplace(load_estimator(*options.ws_checkpoint, split));
  } else if (need_ws) {
    log << "eval: no --ws-checkpoint given; train+eval WS rows use " << options.checkpoint.string() << "\n";
  }
  if (base.ckpt.config.voxel_bins != (ws ? ws->ckpt.config.voxel_bins : base.ckpt.config.voxel_bins) ||
      base.ckpt.config.split_polarity != (ws ? ws->ckpt.config.split_polarity : base.ckpt.config.split_polarity)) {
    throw validation_error("the two checkpoints use different voxel grid layouts");
  }
  const ModelConfig &mc = base.ckpt.config;
  std::vector<GridCache> caches;
  for (const auto &s : split) { caches.emplace_back(s, VoxelOptions{mc.voxel_bins, mc.split_polarity}); }

  struct Job
  {
    std::string label, warmstart;
    int iters;
    const FlowEstimator *est;
  };
  const FlowEstimator *plain = base.estimator.get();
  const FlowEstimator *trained_ws = ws ? ws->estimator.get() : plain;
  std::vector<Job> jobs;
  if (options.ablation) {
    jobs = {{"no WS", "off", 12, plain},
            {"eval WS", "eval", 12, plain},
            {"train+eval WS", "train-eval", 12, trained_ws},
            {"eval WS", "eval", 100, plain},
            {"train+eval WS", "train-eval", 100, trained_ws}};
  } else if (options.warmstart == "off") {
    jobs = {{"no WS", "off", options.iterations, plain}};
  } else if (options.warmstart == "eval") {
    jobs = {{"eval WS", "eval", options.iterations, plain}};
  } else {
    jobs = {{"train+eval WS", "train-eval", options.iterations, trained_ws}};
  }

  std::vector<ProtocolRow> rows;
  for (const Job &j : jobs) {
    EvalProtocol p;
    p.warm_start = j.warmstart != "off";
    p.iterations = j.iters;
    p.mode = options.mode;
    const auto ts = Clock::now();
    ProtocolRow row{j.label, j.warmstart, j.iters, evaluate_sequences(*j.est, split, caches, p)};
    for (const auto &line : row.result.log) { log << "eval: " << line << "\n"; }
    log << "eval: " << j.label << " @" << j.iters << ": EPE " << row.result.aggregate.epe << " (" << std::fixed
        << std::setprecision(1) << seconds_since(ts) << " s)\n"
        << std::defaultfloat << std::setprecision(6);
    rows.push_back(std::move(row));
  }

  fs::create_directories(options.out);
  write_text(options.out / "report.txt", format_report_table(rows, options.mode));
  write_text(options.out / "report.json", report_json(rows, options.mode, options.checkpoint.string()) + "\n");

  RunManifest m;
  m.command = "eval";
  std::ostringstream cfg;
  cfg << "warmstart = " << options.warmstart << "\niters = " << options.iterations << "\nmode = "
      << to_string(options.mode) << "\nablation = " << (options.ablation ? "true" : "false") << "\n";
  m.config = cfg.str();
  m.inputs["checkpoint"] = options.checkpoint.string();
  if (options.ws_checkpoint) { m.inputs["ws_checkpoint"] = options.ws_checkpoint->string(); }
  m.inputs["data"] = data.string();
  m.outputs = {"report.txt", "report.json"};
  m.wallclock = seconds_since(t0);
  m.write(options.out);
  return rows;
}

// ---- viz -------------------------------------------------------------------

void cmd_viz(const VizCommandOptions &options, std::ostream &log)
{
  const FlowField<double> flow = read_flow(options.flow);
  double scale = 0;
  const auto rgb = flow_to_rgb(flow, VizOptions{options.max_magnitude}, &scale);
  if (options.out.has_parent_path()) { fs::create_directories(options.out.parent_path()); }
  write_rgb_png(options.out, flow.height(), flow.width(), rgb);
  log << "viz: " << options.out.string() << " (" << flow.width() << "x" << flow.height() << ", full saturation at "
      << scale << " px)\n";
}

} // namespace evflow
