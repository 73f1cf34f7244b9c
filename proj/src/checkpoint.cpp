#include "evflow/checkpoint.hpp"

#include "evflow/error.hpp"

#include "json.hpp"

#include <cstring>
#include <fstream>

namespace evflow {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'E', 'V', 'F', 'C'};

json config_to_json(const ModelConfig &c)
{
  return json{{"voxel_bins", c.voxel_bins},         {"split_polarity", c.split_polarity},
              {"feature_dim", c.feature_dim},       {"hidden_dim", c.hidden_dim},
              {"context_dim", c.context_dim},       {"pyramid_levels", c.pyramid_levels},
              {"lookup_radius", c.lookup_radius},   {"iterations", c.iterations},
              {"upsample", to_string(c.upsample)},  {"encoder_base", c.encoder_base},
              {"motion_dim", c.motion_dim},         {"detach_iteration_flow", c.detach_iteration_flow}};
}

ModelConfig config_from_json(const json &j)
{
  ModelConfig c;
  try {
    c.voxel_bins = j.at("voxel_bins");
    c.split_polarity = j.at("split_polarity");
    c.feature_dim = j.at("feature_dim");
    c.hidden_dim = j.at("hidden_dim");
    c.context_dim = j.at("context_dim");
    c.pyramid_levels = j.at("pyramid_levels");
    c.lookup_radius = j.at("lookup_radius");
    c.iterations = j.at("iterations");
    c.upsample = parse_upsample_mode(j.at("upsample").get<std::string>());
    c.encoder_base = j.at("encoder_base");
    c.motion_dim = j.at("motion_dim");
    c.detach_iteration_flow = j.value("detach_iteration_flow", false);
  } catch (const json::exception &e) {
    throw data_error(std::string("checkpoint model config: ") + e.what());
  }
  c.validate();
  return c;
}

struct Blob
{
  std::string name;
  std::vector<int> shape;
  const Tensor<float> *tensor;
};

void write_file(const std::filesystem::path &path, json header, const std::vector<Blob> &blobs)
{
  json index = json::array();
  std::uint64_t offset = 0;
  for (const Blob &b : blobs) {
    const auto &t = *b.tensor;
    index.push_back({{"name", b.name},
                     {"shape", b.shape},
                     {"dims", {t.channels, t.height, t.width}},
                     {"offset", offset},
                     {"count", std::uint64_t(t.size())}});
    offset += std::uint64_t(t.size());
  }
  header["tensors"] = index;
  header["version"] = kCheckpointVersion;
  const std::string text = header.dump();
  // Write to a sibling file first so an interrupted save never clobbers a good checkpoint.
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) { throw data_error("cannot write " + tmp); }
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t len = text.size();
    out.write(kMagic, 4);
    out.write(reinterpret_cast<const char *>(&version), 4);
    out.write(reinterpret_cast<const char *>(&len), 8);
    out.write(text.data(), std::streamsize(text.size()));
    for (const Blob &b : blobs) {
      out.write(reinterpret_cast<const char *>(b.tensor->data.data()), std::streamsize(b.tensor->size() * sizeof(float)));
    }
    if (!out) { throw data_error("write failed for " + tmp); }
  }
  std::filesystem::rename(tmp, path);
}

} // namespace

std::string model_config_json(const ModelConfig &cfg) { return config_to_json(cfg).dump(); }

ModelConfig model_config_from_json(const std::string &text)
{
  try {
    return config_from_json(json::parse(text));
  } catch (const json::parse_error &e) {
    throw data_error(std::string("model config: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path &path, const FlowModel<float> &model, const TrainState *state)
{
  json header;
  header["kind"] = "network";
  header["config"] = config_to_json(model.config());
  std::vector<Blob> blobs;
  for (const auto &p : model.parameters()) { blobs.push_back({p.name, p.shape, &p.value}); }
  if (state) {
    header["train"] = {{"step", state->step},         {"phase", state->phase},
                       {"epoch", state->epoch},       {"cursor", state->cursor},
                       {"adam_steps", state->adam_steps}, {"last_loss", state->last_loss},
                       {"run_config", state->run_config}, {"sensor", {state->sensor_height, state->sensor_width}}};
    const auto &ps = model.parameters();
    if (state->adam_m.size() != std::size_t(ps.size()) || state->adam_v.size() != std::size_t(ps.size())) {
      throw validation_error("optimizer state does not match the parameters");
    }
    for (int i = 0; i < ps.size(); ++i) { blobs.push_back({"adam.m." + ps[i].name, ps[i].shape, &state->adam_m[i]}); }
    for (int i = 0; i < ps.size(); ++i) { blobs.push_back({"adam.v." + ps[i].name, ps[i].shape, &state->adam_v[i]}); }
  }
  write_file(path, header, blobs);
}

void save_oracle_checkpoint(const std::filesystem::path &path, const ModelConfig &cfg)
{
  json header;
  header["kind"] = "oracle";
  header["config"] = config_to_json(cfg);
  write_file(path, header, {});
}

Checkpoint load_checkpoint(const std::filesystem::path &path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in) { throw data_error("cannot open checkpoint " + path.string()); }
  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char *>(&version), 4);
  in.read(reinterpret_cast<char *>(&len), 8);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) { throw data_error(path.string() + " is not a checkpoint"); }
  if (version != std::uint32_t(kCheckpointVersion)) {
    throw data_error(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  if (len > (1u << 28)) { throw data_error(path.string() + ": corrupt checkpoint header"); }
  std::string text(len, '\0');
  in.read(text.data(), std::streamsize(len));
  if (!in) { throw data_error(path.string() + ": truncated checkpoint header"); }
  json header;
  try {
    header = json::parse(text);
  } catch (const json::parse_error &e) {
    throw data_error(path.string() + ": corrupt checkpoint header: " + e.what());
  }
  Checkpoint ck;
  ck.kind = header.value("kind", "network");
  ck.config = config_from_json(header.at("config"));
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  try {
    for (const auto &t : header.at("tensors")) {
      const auto dims = t.at("dims").get<std::vector<int>>();
      const auto count = t.at("count").get<std::uint64_t>();
      if (dims.size() != 3 || std::uint64_t(dims[0]) * dims[1] * dims[2] != count) {
        throw data_error(path.string() + ": inconsistent tensor entry " + t.at("name").get<std::string>());
      }
      Tensor<float> v(dims[0], dims[1], dims[2]);
      in.read(reinterpret_cast<char *>(v.data.data()), std::streamsize(count * sizeof(float)));
      if (!in) { throw data_error(path.string() + ": truncated tensor data"); }
      const std::string name = t.at("name");
      if (name.rfind("adam.", 0) == 0) {
        tensors.emplace_back(name, std::move(v));
      } else {
        ck.params.add(name, t.at("shape").get<std::vector<int>>(), std::move(v));
      }
    }
  } catch (const json::exception &e) {
    throw data_error(path.string() + ": corrupt tensor index: " + e.what());
  }
  if (header.contains("train")) {
    const auto &tr = header["train"];
    TrainState st;
    st.step = tr.value("step", 0L);
    st.phase = tr.value("phase", 0);
    st.epoch = tr.value("epoch", 0);
    st.cursor = tr.value("cursor", 0L);
    st.adam_steps = tr.value("adam_steps", 0L);
    st.last_loss = tr.value("last_loss", 0.0);
    st.run_config = tr.value("run_config", std::string());
    if (tr.contains("sensor") && tr["sensor"].size() == 2) {
      st.sensor_height = tr["sensor"][0];
      st.sensor_width = tr["sensor"][1];
    }
    for (const auto &p : ck.params) {
      for (const auto &[name, v] : tensors) {
        if (name == "adam.m." + p.name) { st.adam_m.push_back(v); }
      }
      for (const auto &[name, v] : tensors) {
        if (name == "adam.v." + p.name) { st.adam_v.push_back(v); }
      }
    }
    if (st.adam_m.size() != std::size_t(ck.params.size()) || st.adam_v.size() != std::size_t(ck.params.size())) {
      throw data_error(path.string() + ": optimizer state incomplete");
    }
    ck.train = std::move(st);
  }
  return ck;
}

FlowModel<float> model_from_checkpoint(const Checkpoint &ckpt)
{
  if (ckpt.kind != "network") { throw validation_error("checkpoint of kind '" + ckpt.kind + "' holds no network"); }
  FlowModel<float> model(ckpt.config, 0);
  auto &ps = model.parameters();
  if (ps.size() != ckpt.params.size()) {
    throw data_error("checkpoint has " + std::to_string(ckpt.params.size()) + " parameters, model expects " +
                     std::to_string(ps.size()));
  }
  for (auto &p : ps) {
    const int j = ckpt.params.find(p.name);
    if (j < 0) { throw data_error("checkpoint lacks parameter " + p.name); }
    const auto &src = ckpt.params[j].value;
    if (!src.same_shape(p.value)) {
      throw data_error("checkpoint parameter " + p.name + " has shape " + src.shape_string() + ", expected " +
                       p.value.shape_string());
    }
    p.value = src;
  }
  return model;
}

} // namespace evflow
