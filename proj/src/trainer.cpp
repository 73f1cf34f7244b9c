#include "evflow/trainer.hpp"

#include "evflow/error.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

namespace evflow {

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b)
{
  // splitmix64 finalizer over the combined words
  std::uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

} // namespace

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int phase, int epoch)
{
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::mt19937_64 rng(mix(mix(seed, std::uint64_t(phase) + 1), std::uint64_t(epoch) + 1));
  // Fisher-Yates with explicit index draws; std::shuffle is not specified across library versions.
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = std::size_t(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

Trainer::Trainer(FlowModel<float> &model, const std::vector<SequenceData> &split, RunOptions options)
  : model_(model), split_(split), options_(std::move(options)), adam_(model.parameters())
{
  options_.train.validate();
  if (options_.phases.empty()) { throw validation_error("training schedule has no phases"); }
  const ModelConfig &mc = model.config();
  const VoxelOptions vo{mc.voxel_bins, mc.split_polarity};
  for (const auto &seq : split_) { caches_.emplace_back(seq, vo); }
  state_.run_config = options_.run_config;
  if (!split_.empty()) {
    state_.sensor_height = split_.front().sensor().height;
    state_.sensor_width = split_.front().sensor().width;
  }
}

void Trainer::resume(const TrainState &state)
{
  if (state.adam_m.size() != std::size_t(model_.parameters().size())) {
    throw validation_error("resume state does not match the model parameters");
  }
  const int h = state_.sensor_height, w = state_.sensor_width;
  state_ = state;
  state_.run_config = options_.run_config;
  state_.sensor_height = h;
  state_.sensor_width = w;
  adam_.first_moments() = state.adam_m;
  adam_.second_moments() = state.adam_v;
  adam_.set_steps(state.adam_steps);
}

TrainConfig Trainer::phase_config(const TrainingPhase &phase) const
{
  TrainConfig cfg = options_.train;
  cfg.seq_len = phase.seq_len;
  cfg.warmstart_in_training = phase.warm_start;
  cfg.lr = phase.lr;
  cfg.epochs = phase.epochs;
  if (phase.full_resolution) { cfg.crop_height = cfg.crop_width = 0; }
  return cfg;
}

void Trainer::save(const std::filesystem::path &path)
{
  state_.adam_m = adam_.first_moments();
  state_.adam_v = adam_.second_moments();
  state_.adam_steps = adam_.steps();
  save_checkpoint(path, model_, &state_);
}

void Trainer::log_step(const StepLog &log)
{
  if (!options_.out_dir.empty()) {
    const auto path = options_.out_dir / "metrics.csv";
    const bool fresh = !std::filesystem::exists(path);
    std::ofstream out(path, std::ios::app);
    if (!out) { throw data_error("cannot append to " + path.string()); }
    if (fresh) { out << "step,phase,loss,lr,seq_len,wallclock\n"; }
    out << log.step << "," << log.phase << "," << std::setprecision(9) << log.loss << "," << log.lr << ","
        << log.seq_len << "," << std::setprecision(6) << log.wallclock << "\n";
  }
  if (options_.on_step) { options_.on_step(log); }
}

TrainState Trainer::run()
{
  start_ = std::chrono::steady_clock::now();
  if (!options_.out_dir.empty()) { std::filesystem::create_directories(options_.out_dir); }
  auto &params = model_.parameters();
  for (; state_.phase < int(options_.phases.size()); ++state_.phase) {
    const TrainingPhase &phase = options_.phases[state_.phase];
    const TrainConfig cfg = phase_config(phase);
    const auto samples = enumerate_samples(split_, caches_, cfg.seq_len);
    if (samples.empty()) {
      throw data_error("phase '" + phase.name + "': no run of " + std::to_string(cfg.seq_len) +
                       " contiguous ground-truth frames in the training split");
    }
    const long steps_per_epoch = (long(samples.size()) + cfg.batch_size - 1) / cfg.batch_size;
    const long phase_steps = steps_per_epoch * phase.epochs;
    for (; state_.epoch < phase.epochs; ++state_.epoch) {
      const auto order = epoch_order(samples.size(), cfg.seed, state_.phase, state_.epoch);
      while (state_.cursor < long(order.size())) {
        const long batch = std::min<long>(cfg.batch_size, long(order.size()) - state_.cursor);
        Gradients<float> grads;
        double loss = 0;
        for (long b = 0; b < batch; ++b) {
          const SampleRef ref = samples[order[std::size_t(state_.cursor + b)]];
          std::mt19937_64 rng(mix(cfg.seed, std::uint64_t(state_.step) * 64 + std::uint64_t(b)));
          const TrainSample<float> sample =
            augment(make_sample(split_[ref.sequence], caches_[ref.sequence], ref.first, cfg.seq_len), cfg, rng);
          StepResult<float> r;
          try {
            r = train_sequence_step(model_, sample, cfg);
          } catch (const Error &e) {
            if (e.kind() != ErrorKind::Numeric) { throw; }
            throw numeric_error("step " + std::to_string(state_.step) + " (phase " + phase.name + ", sequence " +
                                split_[ref.sequence].name + ", frame " + std::to_string(ref.first) + "): " + e.what());
          }
          loss += r.loss;
          if (grads.empty()) {
            grads = std::move(r.grads);
          } else {
            for (std::size_t i = 0; i < grads.size(); ++i) { grads[i].data += r.grads[i].data; }
          }
        }
        if (batch > 1) {
          for (auto &g : grads) { g.data /= float(batch); }
        }
        loss /= double(batch);
        clip_gradients(grads, float(cfg.clip_norm));
        double lr = cfg.lr;
        if (options_.linear_decay) {
          const long k = state_.epoch * steps_per_epoch + state_.cursor / cfg.batch_size;
          lr *= 1.0 - double(k) / double(phase_steps);
        }
        adam_.step(params, grads, lr);
        state_.cursor += batch;
        ++state_.step;
        state_.last_loss = loss;
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        log_step({state_.step, phase.name, loss, lr, cfg.seq_len, wall});
        const bool stop = options_.max_steps >= 0 && state_.step >= options_.max_steps;
        if (!options_.out_dir.empty() &&
            (stop || (options_.checkpoint_every > 0 && state_.step % options_.checkpoint_every == 0))) {
          save(options_.out_dir / "checkpoint.bin");
        }
        if (stop) {
          state_.adam_m = adam_.first_moments();
          state_.adam_v = adam_.second_moments();
          state_.adam_steps = adam_.steps();
          return state_;
        }
      }
      state_.cursor = 0;
      if (!options_.out_dir.empty()) {
        // Epoch boundary: the saved position is the start of the next epoch.
        ++state_.epoch;
        save(options_.out_dir / "checkpoint.bin");
        --state_.epoch;
      }
    }
    state_.epoch = 0;
    if (!options_.out_dir.empty()) {
      ++state_.phase;
      save(options_.out_dir / "checkpoint.bin");
      save(options_.out_dir / ("checkpoint_" + phase.name + ".bin"));
      --state_.phase;
    }
  }
  state_.adam_m = adam_.first_moments();
  state_.adam_v = adam_.second_moments();
  state_.adam_steps = adam_.steps();
  return state_;
}

} // namespace evflow
