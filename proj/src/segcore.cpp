#include <cstring>
#include <fstream>
#include <sstream>

#include "llavaseg/hash.hpp"
#include "llavaseg/segcore/checkpoint.hpp"
#include "llavaseg/segcore/model.hpp"

namespace llavaseg::seg {

using nlohmann::json;

std::string to_string(ScaleSelection s) { return s == ScaleSelection::all ? "all" : "deepest"; }

ScaleSelection parse_scale_selection(const std::string& name) {
  if (name == "all") return ScaleSelection::all;
  if (name == "deepest") return ScaleSelection::deepest;
  throw ConfigError("unknown scale selection '" + name + "' (expected all or deepest)");
}

void ModelConfig::validate() const {
  if (patch <= 0 || levels <= 0 || d_llm <= 0 || d_vis <= 0 || d_hidden <= 0 || heads <= 0 || up_channels <= 0 ||
      encoder_blocks < 0 || decoder_depth < 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_vis % heads != 0) throw ConfigError("d_vis must be divisible by heads");
  if (image_size % (patch << (levels - 1)) != 0) {
    throw ConfigError("image_size must be divisible by the deepest stride");
  }
}

std::vector<int> ModelConfig::adapter_levels() const {
  if (scales == ScaleSelection::deepest) return {levels - 1};
  std::vector<int> out;
  for (int l = 0; l < levels; ++l) out.push_back(l);
  return out;
}

json config_to_json(const ModelConfig& c) {
  return {{"image_size", c.image_size},       {"patch", c.patch},
          {"levels", c.levels},               {"d_llm", c.d_llm},
          {"d_vis", c.d_vis},                 {"d_hidden", c.d_hidden},
          {"heads", c.heads},                 {"encoder_blocks", c.encoder_blocks},
          {"encoder_positional", c.encoder_positional}, {"decoder_depth", c.decoder_depth},
          {"up_channels", c.up_channels},     {"scales", to_string(c.scales)},
          {"seed", c.seed}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  try {
    c.image_size = j.at("image_size");
    c.patch = j.at("patch");
    c.levels = j.at("levels");
    c.d_llm = j.at("d_llm");
    c.d_vis = j.at("d_vis");
    c.d_hidden = j.at("d_hidden");
    c.heads = j.at("heads");
    c.encoder_blocks = j.at("encoder_blocks");
    c.encoder_positional = j.at("encoder_positional");
    c.decoder_depth = j.at("decoder_depth");
    c.up_channels = j.at("up_channels");
    c.scales = parse_scale_selection(j.at("scales"));
    c.seed = j.at("seed");
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {
constexpr char kMagic[] = "LLAVASEG-CKPT\n";
}

const Checkpoint::Array* Checkpoint::find(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return &a;
  return nullptr;
}

void Checkpoint::save(const std::string& path) const {
  json header{{"version", version}, {"meta", meta}, {"arrays", json::array()}};
  std::size_t offset = 0;
  for (const auto& a : arrays) {
    header["arrays"].push_back({{"name", a.name},
                                {"rows", a.values.rows()},
                                {"cols", a.values.cols()},
                                {"trainable", a.trainable},
                                {"group", a.group},
                                {"offset", offset}});
    offset += static_cast<std::size_t>(a.values.size());
  }
  std::string bytes = kMagic;
  bytes += header.dump();
  bytes.push_back('\n');
  const std::size_t base = bytes.size();
  bytes.resize(base + offset * sizeof(double));
  std::size_t pos = base;
  for (const auto& a : arrays) {
    const std::size_t n = static_cast<std::size_t>(a.values.size()) * sizeof(double);
    if (n > 0) std::memcpy(bytes.data() + pos, a.values.data(), n);
    pos += n;
  }
  try {
    write_file_atomic(path, bytes);
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("writing checkpoint failed: ") + e.what());
  }
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const Error& e) {
    throw CheckpointError(e.what());
  }
  const std::size_t magic_len = std::strlen(kMagic);
  if (bytes.compare(0, magic_len, kMagic) != 0) throw CheckpointError(path + " is not a checkpoint file");
  const auto header_end = bytes.find('\n', magic_len);
  if (header_end == std::string::npos) throw CheckpointError(path + ": truncated header");
  Checkpoint ck;
  try {
    const json header = json::parse(bytes.substr(magic_len, header_end - magic_len));
    if (!header.contains("version")) throw CheckpointError(path + ": missing version field");
    ck.version = header.at("version");
    if (ck.version != kVersion) throw CheckpointError(path + ": unsupported version " + std::to_string(ck.version));
    ck.meta = header.at("meta");
    const std::size_t base = header_end + 1;
    for (const auto& a : header.at("arrays")) {
      Array arr;
      arr.name = a.at("name");
      arr.trainable = a.at("trainable");
      arr.group = a.value("group", "model");
      const Eigen::Index rows = a.at("rows"), cols = a.at("cols");
      const std::size_t offset = a.at("offset");
      const std::size_t start = base + offset * sizeof(double);
      const std::size_t n = static_cast<std::size_t>(rows * cols) * sizeof(double);
      if (start + n > bytes.size()) throw CheckpointError(path + ": payload truncated at " + arr.name);
      arr.values.resize(rows, cols);
      if (n > 0) std::memcpy(arr.values.data(), bytes.data() + start, n);
      ck.arrays.push_back(std::move(arr));
    }
  } catch (const json::exception& e) {
    throw CheckpointError(path + ": malformed header: " + e.what());
  }
  return ck;
}

}  // namespace llavaseg::seg
