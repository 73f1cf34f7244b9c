#include "evflow/commands.hpp"
#include "evflow/error.hpp"

#include "CLI11.hpp"

#include <iostream>

using namespace evflow;

int main(int argc, char **argv)
{
  CLI::App app{"Event-camera optical flow: synthetic data, ground truth, training and evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", code_version());

  SynthOptions synth;
  std::uint64_t synth_seed = 0;
  auto *s = app.add_subcommand("synth", "Render a synthetic event sequence (or split) with exact flow");
  s->add_option("spec", synth.spec, "scene spec (key = value)")->required()->check(CLI::ExistingFile);
  s->add_option("--out", synth.out, "output directory")->required();
  auto *synth_seed_opt = s->add_option("--seed", synth_seed, "override the scene seed");

  GtgenOptions gt;
  double consistency = 0;
  auto *g = app.add_subcommand("gtgen", "Ground-truth flow from disparity, calibration and poses");
  g->add_option("--disparity", gt.disparity_dir, "directory with disparity_XXXXXX.png and timestamps.txt")
    ->required()
    ->check(CLI::ExistingDirectory);
  g->add_option("--calib", gt.calibration, "calibration file")->required()->check(CLI::ExistingFile);
  g->add_option("--trajectory", gt.trajectory, "pose file")->required()->check(CLI::ExistingFile);
  g->add_option("--dt", gt.dt, "flow interval in microseconds")->required();
  g->add_option("--out", gt.out, "output directory")->required();
  auto *cons_opt = g->add_option("--consistency", consistency, "forward-backward consistency threshold in px");

  TrainCommandOptions train;
  std::string train_data, train_out, train_resume;
  std::uint64_t train_seed = 0;
  long train_steps = 0;
  auto *t = app.add_subcommand("train", "Train a model from a config file");
  t->add_option("--config", train.config, "training config (key = value)")->required()->check(CLI::ExistingFile);
  auto *td = t->add_option("--data", train_data, "training split (default: config 'data' or $EVFLOW_DATA_ROOT)");
  auto *to = t->add_option("--out", train_out, "run directory");
  auto *ts = t->add_option("--seed", train_seed, "seed for initialization, shuffling and augmentation");
  auto *tr = t->add_option("--resume", train_resume, "checkpoint to resume from")->check(CLI::ExistingFile);
  auto *tm = t->add_option("--max-steps", train_steps, "stop after this many optimizer steps");

  EvalCommandOptions ev;
  std::string eval_data, eval_ws, eval_mode = "dense";
  auto *e = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  e->add_option("--checkpoint", ev.checkpoint, "checkpoint")->required()->check(CLI::ExistingFile);
  auto *ews = e->add_option("--ws-checkpoint", eval_ws, "checkpoint trained with warm starts (train+eval WS rows)")
                ->check(CLI::ExistingFile);
  auto *ed = e->add_option("--data", eval_data, "evaluation split (default: $EVFLOW_DATA_ROOT)");
  e->add_option("--warmstart", ev.warmstart, "off, eval or train-eval")
    ->check(CLI::IsMember({"off", "eval", "train-eval"}))
    ->default_str("off");
  e->add_option("--iters", ev.iterations, "refinement iterations per timestep")->default_str("12");
  e->add_option("--mode", eval_mode, "dense or sparse")->check(CLI::IsMember({"dense", "sparse"}))->default_str("dense");
  e->add_flag("--ablation", ev.ablation, "run the five ablation protocols");
  e->add_option("--out", ev.out, "report directory")->required();

  VizCommandOptions viz;
  auto *v = app.add_subcommand("viz", "Color-wheel image of a flow file");
  v->add_option("--flow", viz.flow, "flow file (.png or .flo)")->required()->check(CLI::ExistingFile);
  v->add_option("--out", viz.out, "output PNG")->required();
  v->add_option("--max-mag", viz.max_magnitude, "magnitude at full saturation (default: per-image maximum)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp &err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp &err) {
    return app.exit(err);
  } catch (const CLI::CallForVersion &err) {
    return app.exit(err);
  } catch (const CLI::ParseError &err) {
    app.exit(err);
    return exit_code(ErrorKind::Validation);
  }

  try {
    if (s->parsed()) {
      if (*synth_seed_opt) { synth.seed = synth_seed; }
      cmd_synth(synth, std::cout);
    } else if (g->parsed()) {
      if (*cons_opt) { gt.consistency = consistency; }
      cmd_gtgen(gt, std::cout);
    } else if (t->parsed()) {
      if (*td) { train.data = train_data; }
      if (*to) { train.out = train_out; }
      if (*ts) { train.seed = train_seed; }
      if (*tr) { train.resume = train_resume; }
      if (*tm) { train.max_steps = train_steps; }
      cmd_train(train, std::cout);
    } else if (e->parsed()) {
      if (*ews) { ev.ws_checkpoint = eval_ws; }
      if (*ed) { ev.data = eval_data; }
      ev.mode = parse_eval_mode(eval_mode);
      const auto rows = cmd_eval(ev, std::cout);
      std::cout << format_report_table(rows, ev.mode);
    } else if (v->parsed()) {
      cmd_viz(viz, std::cout);
    }
  } catch (const Error &err) {
    std::cerr << "error: " << err.what() << "\n";
    return exit_code(err.kind());
  } catch (const std::filesystem::filesystem_error &err) {
    std::cerr << "error: " << err.what() << "\n";
    return exit_code(ErrorKind::Data);
  }
  return 0;
}
