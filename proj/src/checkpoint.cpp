#include "canet/checkpoint.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include "canet/error.hpp"
#include "canet/serialize.hpp"

namespace canet {

namespace {

constexpr std::string_view kMetaPrefix = "meta/";

std::size_t parse_size(const std::string& text, const std::string& what) {
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size() || v == 0) {
    throw FormatError("checkpoint metadata: bad " + what + " '" + text + "'");
  }
  return v;
}

std::pair<std::size_t, std::size_t> parse_extent(const std::string& text, const std::string& what) {
  const auto x = text.find('x');
  if (x == std::string::npos) throw FormatError("checkpoint metadata: bad " + what + " '" + text + "'");
  return {parse_size(text.substr(0, x), what), parse_size(text.substr(x + 1), what)};
}

}  // namespace

std::string checkpoint_metadata(const ModelConfig& c) {
  char scale[40];
  std::snprintf(scale, sizeof scale, "%.17g", c.width_scale);
  std::ostringstream s;
  s << kMetaPrefix << "variant=" << to_string(c.kind) << ";scale=" << scale << ";face=" << c.face_height << 'x'
    << c.face_width << ";eye=" << c.eye_height << 'x' << c.eye_width
    << ";activation=" << (c.activation == CandidateActivation::relu ? "relu" : "tanh");
  return s.str();
}

ModelConfig parse_checkpoint_metadata(const std::string& name) {
  if (name.rfind(kMetaPrefix, 0) != 0) throw FormatError("checkpoint has no metadata entry (found '" + name + "')");
  std::map<std::string, std::string> fields;
  std::istringstream in(name.substr(kMetaPrefix.size()));
  std::string item;
  while (std::getline(in, item, ';')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint metadata: malformed field '" + item + "'");
    fields[item.substr(0, eq)] = item.substr(eq + 1);
  }
  for (const char* key : {"variant", "scale", "face", "eye", "activation"}) {
    if (!fields.count(key)) throw FormatError(std::string("checkpoint metadata: missing field '") + key + "'");
  }
  ModelConfig c;
  try {
    c.kind = parse_variant(fields["variant"]);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  }
  char* end = nullptr;
  c.width_scale = std::strtod(fields["scale"].c_str(), &end);
  if (*end != '\0' || !(c.width_scale > 0.0)) throw FormatError("checkpoint metadata: bad scale '" + fields["scale"] + "'");
  std::tie(c.face_height, c.face_width) = parse_extent(fields["face"], "face extent");
  std::tie(c.eye_height, c.eye_width) = parse_extent(fields["eye"], "eye extent");
  if (fields["activation"] == "relu") c.activation = CandidateActivation::relu;
  else if (fields["activation"] == "tanh") c.activation = CandidateActivation::tanh;
  else throw FormatError("checkpoint metadata: bad activation '" + fields["activation"] + "'");
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const GazeModel<float>& model) {
  std::vector<NamedTensor<float>> entries;
  entries.push_back({checkpoint_metadata(model.config()), Tensor<float>::scalar(0.0f)});
  for (const auto& p : model.parameters()) entries.push_back({p.name, p.tensor});
  io::save_weights(path, entries);
}

std::unique_ptr<GazeModel<float>> load_checkpoint(const std::filesystem::path& path) {
  const auto entries = io::load_weights(path);
  if (entries.empty()) throw FormatError("checkpoint " + path.string() + " is empty");
  auto model = std::make_unique<GazeModel<float>>(parse_checkpoint_metadata(entries.front().name), 0);

  std::map<std::string, const Tensor<float>*> stored;
  for (std::size_t i = 1; i < entries.size(); ++i) {
    if (!stored.emplace(entries[i].name, &entries[i].tensor).second) {
      throw FormatError("checkpoint has duplicate tensor '" + entries[i].name + "'");
    }
  }
  std::set<std::string> used;
  for (auto& p : model->parameters()) {
    const auto it = stored.find(p.name);
    if (it == stored.end()) throw FormatError("checkpoint is missing tensor '" + p.name + "'");
    if (it->second->shape() != p.tensor.shape()) {
      throw FormatError("checkpoint tensor '" + p.name + "' has shape " + shape_to_string(it->second->shape()) +
                        ", model expects " + shape_to_string(p.tensor.shape()));
    }
    const auto src = it->second->data();
    std::copy(src.begin(), src.end(), p.tensor.mutable_data().begin());
    used.insert(p.name);
  }
  if (used.size() != stored.size()) {
    for (const auto& [name, t] : stored) {
      if (!used.count(name)) throw FormatError("checkpoint has unexpected tensor '" + name + "'");
    }
  }
  return model;
}

}  // namespace canet
