#include "rtpp/checkpoint.hpp"

#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

namespace rtpp::train {
namespace {

using ordered_json = nlohmann::ordered_json;
using json = nlohmann::json;

std::string shape_text(std::size_t r, std::size_t c) { return "[" + std::to_string(r) + "," + std::to_string(c) + "]"; }

}  // namespace

std::string checkpoint_json(const model::ModelParams& params, const DataConfig& data) {
  ordered_json doc;
  doc["format_version"] = kCheckpointFormatVersion;
  ordered_json cfg;
  cfg["H"] = params.config.hidden;
  cfg["H_p"] = params.config.mlp_hidden;
  cfg["w_t_mode"] = model::to_string(params.config.slope);
  cfg["latent_mode"] = model::to_string(params.config.latent);
  cfg["gap_mode"] = eventlog::to_string(data.gap_mode);
  cfg["session_threshold_hours"] = data.session_threshold_hours;
  doc["config"] = std::move(cfg);
  ordered_json ps = ordered_json::object();
  const auto& names = model::ModelParams::names();
  const auto ts = params.tensors();
  for (std::size_t i = 0; i < model::ModelParams::kCount; ++i) {
    ordered_json p;
    p["shape"] = {ts[i]->rows(), ts[i]->cols()};
    p["data"] = ts[i]->values();
    ps[std::string(names[i])] = std::move(p);
  }
  doc["params"] = std::move(ps);
  return doc.dump() + "\n";
}

Checkpoint parse_checkpoint(const std::string& text, const std::optional<model::ModelConfig>& expected) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw CheckpointCorruptError(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  Checkpoint ck;
  try {
    const int version = doc.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion)
      throw CheckpointVersionError("unsupported checkpoint format_version " + std::to_string(version) +
                                   " (supported: " + std::to_string(kCheckpointFormatVersion) + ")");
    const auto& cfg = doc.at("config");
    model::ModelConfig mc;
    mc.hidden = cfg.at("H").get<std::size_t>();
    mc.mlp_hidden = cfg.at("H_p").get<std::size_t>();
    mc.slope = model::parse_slope_mode(cfg.at("w_t_mode").get<std::string>());
    mc.latent = model::parse_latent_mode(cfg.value("latent_mode", std::string("full")));
    ck.data.gap_mode = eventlog::parse_gap_mode(cfg.at("gap_mode").get<std::string>());
    ck.data.session_threshold_hours = cfg.at("session_threshold_hours").get<double>();
    if (mc.hidden < 1 || mc.mlp_hidden < 1) throw CheckpointShapeError("checkpoint sizes must be >= 1");
    if (expected && (expected->hidden != mc.hidden || expected->mlp_hidden != mc.mlp_hidden))
      throw CheckpointShapeError("checkpoint has H=" + std::to_string(mc.hidden) + ", H_p=" +
                                 std::to_string(mc.mlp_hidden) + " but H=" + std::to_string(expected->hidden) +
                                 ", H_p=" + std::to_string(expected->mlp_hidden) + " was expected");
    ck.params = model::ModelParams::zeros(mc);
    const auto shapes = model::ModelParams::shapes(mc);
    const auto& names = model::ModelParams::names();
    auto ts = ck.params.tensors();
    const auto& ps = doc.at("params");
    for (std::size_t i = 0; i < model::ModelParams::kCount; ++i) {
      const std::string name(names[i]);
      if (!ps.contains(name)) throw CheckpointCorruptError("checkpoint is missing parameter '" + name + "'");
      const auto& p = ps.at(name);
      const auto shape = p.at("shape").get<std::vector<std::size_t>>();
      if (shape.size() != 2 || shape[0] != shapes[i].first || shape[1] != shapes[i].second)
        throw CheckpointShapeError("parameter '" + name + "' has the wrong shape; expected " +
                                   shape_text(shapes[i].first, shapes[i].second));
      auto data = p.at("data").get<std::vector<double>>();
      if (data.size() != shape[0] * shape[1])
        throw CheckpointShapeError("parameter '" + name + "' data length does not match its shape");
      *ts[i] = Tensor(shape[0], shape[1], std::move(data));
    }
  } catch (const json::exception& e) {
    throw CheckpointCorruptError(std::string("malformed checkpoint: ") + e.what());
  }
  return ck;
}

void save_checkpoint(const model::ModelParams& params, const DataConfig& data, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out << checkpoint_json(params, data);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::optional<model::ModelConfig>& expected) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str(), expected);
}

}  // namespace rtpp::train
