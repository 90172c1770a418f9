#include "canet/config.hpp"

#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <map>

#include <json.hpp>

#include "canet/error.hpp"

namespace canet {

namespace {

using nlohmann::json;
using Setter = std::function<void(const json&)>;

template <typename U>
Setter unsigned_field(const std::string& path, U& target) {
  return [&target, path](const json& v) {
    if (!v.is_number_unsigned()) throw ConfigError(path + " must be a non-negative integer");
    const auto x = v.get<std::uint64_t>();
    if (x > std::numeric_limits<U>::max()) throw ConfigError(path + " is out of range");
    target = static_cast<U>(x);
  };
}

Setter number_field(const std::string& path, double& target) {
  return [&target, path](const json& v) {
    if (!v.is_number()) throw ConfigError(path + " must be a number");
    target = v.get<double>();
  };
}

Setter string_field(const std::string& path, std::function<void(std::string_view)> apply) {
  return [apply, path](const json& v) {
    if (!v.is_string()) throw ConfigError(path + " must be a string");
    apply(v.get<std::string>());
  };
}

void apply_object(const json& obj, const std::string& path, const std::map<std::string, Setter>& fields) {
  if (!obj.is_object()) throw ConfigError((path.empty() ? "config" : path) + " must be an object");
  for (const auto& [key, value] : obj.items()) {
    const auto full = path.empty() ? key : path + "." + key;
    const auto it = fields.find(key);
    if (it == fields.end()) throw ConfigError("unknown config key '" + full + "'");
    it->second(value);
  }
}

}  // namespace

CandidateActivation parse_activation(std::string_view name) {
  if (name == "relu") return CandidateActivation::relu;
  if (name == "tanh") return CandidateActivation::tanh;
  throw ConfigError("unknown activation '" + std::string(name) + "' (expected relu or tanh)");
}

ExperimentConfig ExperimentConfig::desk() {
  ExperimentConfig c;
  c.synth.subjects = 6;
  c.synth.samples_per_subject = 300;
  c.synth.pitch_range_deg = 20.0;
  c.synth.yaw_range_deg = 20.0;
  c.synth.noise = 0.0;
  c.synth.geometry = data::Geometry{56, 56, 3, 18, 30};
  c.model.width_scale = 0.125;
  c.train.epochs = 30;
  c.sync();
  return c;
}

void ExperimentConfig::sync() {
  synth.seed = seed;
  train.seed = seed;
  model.face_height = synth.geometry.face_height;
  model.face_width = synth.geometry.face_width;
  model.eye_height = synth.geometry.eye_height;
  model.eye_width = synth.geometry.eye_width;
}

void ExperimentConfig::validate() const {
  synth.validate();
  train.validate();
  if (!(model.width_scale > 0.0 && model.width_scale <= 1.0)) throw ConfigError("model.width_scale must lie in (0, 1]");
  model.face_spec().validate();
  model.eye_spec().validate();
}

ExperimentConfig parse_config(std::string_view json_text, ExperimentConfig base) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("malformed config JSON: ") + e.what());
  }
  auto& c = base;
  auto& s = c.synth;
  auto& g = c.synth.geometry;
  auto& m = c.model;
  auto& t = c.train;

  const std::map<std::string, Setter> synth_fields{
      {"subjects", unsigned_field("synth.subjects", s.subjects)},
      {"samples_per_subject", unsigned_field("synth.samples_per_subject", s.samples_per_subject)},
      {"pitch_range_deg", number_field("synth.pitch_range_deg", s.pitch_range_deg)},
      {"yaw_range_deg", number_field("synth.yaw_range_deg", s.yaw_range_deg)},
      {"noise", number_field("synth.noise", s.noise)},
      {"face_height", unsigned_field("synth.face_height", g.face_height)},
      {"face_width", unsigned_field("synth.face_width", g.face_width)},
      {"eye_height", unsigned_field("synth.eye_height", g.eye_height)},
      {"eye_width", unsigned_field("synth.eye_width", g.eye_width)},
      {"iris_radius_min", number_field("synth.iris_radius_min", s.iris_radius_min)},
      {"iris_radius_max", number_field("synth.iris_radius_max", s.iris_radius_max)},
      {"sclera_min", number_field("synth.sclera_min", s.sclera_min)},
      {"sclera_max", number_field("synth.sclera_max", s.sclera_max)},
      {"aperture_min", number_field("synth.aperture_min", s.aperture_min)},
      {"aperture_max", number_field("synth.aperture_max", s.aperture_max)},
  };
  const std::map<std::string, Setter> model_fields{
      {"variant", string_field("model.variant", [&](std::string_view v) { m.kind = parse_variant(v); })},
      {"width_scale", number_field("model.width_scale", m.width_scale)},
      {"activation", string_field("model.activation", [&](std::string_view v) { m.activation = parse_activation(v); })},
      {"z_bias", number_field("model.z_bias", m.z_bias)},
  };
  const std::map<std::string, Setter> train_fields{
      {"epochs", unsigned_field("train.epochs", t.epochs)},
      {"batch_size", unsigned_field("train.batch_size", t.batch_size)},
      {"learning_rate", number_field("train.learning_rate", t.learning_rate)},
      {"optimizer", string_field("train.optimizer", [&](std::string_view v) { t.optimizer = training::parse_optimizer(v); })},
      {"adam_beta1", number_field("train.adam_beta1", t.adam_beta1)},
      {"adam_beta2", number_field("train.adam_beta2", t.adam_beta2)},
      {"adam_eps", number_field("train.adam_eps", t.adam_eps)},
      {"sgd_momentum", number_field("train.sgd_momentum", t.sgd_momentum)},
      {"alpha", number_field("train.alpha", t.loss.alpha)},
      {"beta", number_field("train.beta", t.loss.beta)},
  };
  const std::map<std::string, Setter> top{
      {"seed", unsigned_field("seed", c.seed)},
      {"hold_out", unsigned_field("hold_out", c.hold_out)},
      {"synth", [&](const json& v) { apply_object(v, "synth", synth_fields); }},
      {"model", [&](const json& v) { apply_object(v, "model", model_fields); }},
      {"train", [&](const json& v) { apply_object(v, "train", train_fields); }},
  };
  apply_object(root, "", top);
  c.sync();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_config(text, std::move(base));
}

}  // namespace canet
