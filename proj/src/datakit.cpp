#include "llavaseg/datakit.hpp"

#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "llavaseg/hash.hpp"

namespace llavaseg::data {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- mask codec -----------------------------------------------------------

RleMask encode_mask(const BinaryMask& mask) {
  RleMask rle{static_cast<int>(mask.rows()), static_cast<int>(mask.cols()), {}};
  std::uint8_t current = 0;
  std::uint32_t run = 0;
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    const std::uint8_t v = mask.data()[i] != 0 ? 1 : 0;  // RowMajor storage: row-major pixel order
    if (v != current) {
      rle.counts.push_back(run);
      run = 0;
      current = v;
    }
    ++run;
  }
  rle.counts.push_back(run);
  return rle;
}

BinaryMask decode_mask(const RleMask& rle) {
  if (rle.height < 0 || rle.width < 0) throw CodecError("negative mask dimensions");
  const std::uint64_t total = std::accumulate(rle.counts.begin(), rle.counts.end(), std::uint64_t{0});
  const std::uint64_t expected = static_cast<std::uint64_t>(rle.height) * static_cast<std::uint64_t>(rle.width);
  if (total != expected) {
    throw CodecError("run lengths sum to " + std::to_string(total) + " but the mask has " + std::to_string(expected) +
                     " pixels");
  }
  BinaryMask mask(rle.height, rle.width);
  std::size_t pos = 0;
  std::uint8_t value = 0;
  for (std::uint32_t run : rle.counts) {
    std::fill_n(mask.data() + pos, run, value);
    pos += run;
    value ^= 1;
  }
  return mask;
}

// ---- images ---------------------------------------------------------------

namespace {

struct PnmHeader {
  std::string magic;
  int width = 0, height = 0, maxval = 0;
  std::size_t data_offset = 0;
};

PnmHeader parse_pnm_header(std::string_view bytes) {
  PnmHeader h;
  std::size_t pos = 0;
  auto next_token = [&]() {
    for (;;) {
      while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return std::string(bytes.substr(start, pos - start));
  };
  h.magic = next_token();
  try {
    h.width = std::stoi(next_token());
    h.height = std::stoi(next_token());
    h.maxval = std::stoi(next_token());
  } catch (const std::exception&) {
    throw CodecError("malformed PNM header");
  }
  h.data_offset = pos + 1;  // single whitespace byte after maxval
  if (h.maxval != 255) throw CodecError("only 8-bit PNM files are supported");
  if (h.width <= 0 || h.height <= 0) throw CodecError("PNM image has non-positive size");
  return h;
}

}  // namespace

RgbImage decode_ppm(std::string_view bytes) {
  const PnmHeader h = parse_pnm_header(bytes);
  if (h.magic != "P6") throw CodecError("expected a binary PPM (P6) image");
  const std::size_t n = static_cast<std::size_t>(h.width) * h.height * 3;
  if (h.data_offset + n > bytes.size()) throw CodecError("PPM pixel data is truncated");
  RgbImage img{h.height, h.width, {}};
  img.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(h.data_offset),
                  bytes.begin() + static_cast<std::ptrdiff_t>(h.data_offset + n));
  return img;
}

RgbImage read_ppm(const std::string& path) { return decode_ppm(read_file(path)); }

std::string encode_ppm(const RgbImage& image) {
  std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(image.data.data()), image.data.size());
  return out;
}

void write_ppm(const std::string& path, const RgbImage& image) { write_file_atomic(path, encode_ppm(image)); }

BinaryMask read_pgm_mask(const std::string& path) {
  const std::string bytes = read_file(path);
  const PnmHeader h = parse_pnm_header(bytes);
  if (h.magic != "P5") throw CodecError("expected a binary PGM (P5) mask");
  const std::size_t n = static_cast<std::size_t>(h.width) * h.height;
  if (h.data_offset + n > bytes.size()) throw CodecError("PGM pixel data is truncated");
  BinaryMask m(h.height, h.width);
  for (std::size_t i = 0; i < n; ++i) m.data()[i] = bytes[h.data_offset + i] != 0 ? 1 : 0;
  return m;
}

void write_pgm_mask(const std::string& path, const BinaryMask& mask) {
  std::string out = "P5\n" + std::to_string(mask.cols()) + " " + std::to_string(mask.rows()) + "\n255\n";
  for (Eigen::Index i = 0; i < mask.size(); ++i) out.push_back(mask.data()[i] != 0 ? static_cast<char>(255) : '\0');
  write_file_atomic(path, out);
}

RgbImage overlay(const RgbImage& image, const BinaryMask& mask, std::array<std::uint8_t, 3> colour, double alpha) {
  if (mask.rows() != image.height || mask.cols() != image.width) throw ShapeError("overlay mask size mismatch");
  RgbImage out = image;
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      if (mask(y, x) == 0) continue;
      for (int c = 0; c < 3; ++c) {
        out.at(y, x, c) = static_cast<std::uint8_t>(std::lround((1.0 - alpha) * image.at(y, x, c) + alpha * colour[c]));
      }
    }
  return out;
}

// ---- manifests ------------------------------------------------------------

std::string to_string(Category c) {
  switch (c) {
    case Category::semantic: return "semantic";
    case Category::referring: return "referring";
    case Category::reasoning: return "reasoning";
  }
  return "?";
}

Category parse_category(std::string_view name) {
  if (name == "semantic") return Category::semantic;
  if (name == "referring") return Category::referring;
  if (name == "reasoning") return Category::reasoning;
  throw InvalidInput("unknown category '" + std::string(name) + "'");
}

void SampleRecord::validate() const {
  if (sample_id.empty()) throw InvalidInput("record without sample_id");
  if (image_path.empty()) throw InvalidInput(sample_id + ": record without image");
  if (!mask_rle && mask_path.empty()) throw InvalidInput(sample_id + ": record without mask");
  if (category == Category::reasoning && query.empty()) {
    throw InvalidInput(sample_id + ": reasoning records need a query");
  }
  if (category != Category::reasoning && phrase.empty()) {
    throw InvalidInput(sample_id + ": " + to_string(category) + " records need a phrase");
  }
}

BinaryMask SampleRecord::load_mask() const {
  if (mask_rle) return decode_mask(*mask_rle);
  return read_pgm_mask(mask_path);
}

namespace {

std::string resolve(const std::string& base_dir, const std::string& p) {
  if (p.empty() || fs::path(p).is_absolute() || base_dir.empty()) return p;
  return (fs::path(base_dir) / p).string();
}

std::string relativize(const std::string& base_dir, const std::string& p) {
  if (p.empty() || base_dir.empty()) return p;
  return fs::path(p).lexically_relative(base_dir).string();
}

}  // namespace

std::string record_to_json_line(const SampleRecord& r, const std::string& base_dir) {
  json j{{"sample_id", r.sample_id},
         {"image", relativize(base_dir, r.image_path)},
         {"image_id", r.image_id},
         {"category", to_string(r.category)}};
  if (r.mask_rle) {
    j["mask"] = {{"rle", {{"height", r.mask_rle->height}, {"width", r.mask_rle->width}, {"counts", r.mask_rle->counts}}}};
  } else {
    j["mask"] = {{"bitmap", relativize(base_dir, r.mask_path)}};
  }
  if (!r.phrase.empty()) j["phrase"] = r.phrase;
  if (!r.query.empty()) j["query"] = r.query;
  if (!r.description.empty()) j["description"] = r.description;
  if (!r.references.empty()) j["references"] = r.references;
  return j.dump();
}

Manifest Manifest::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path);
  const std::string base = fs::path(path).parent_path().string();
  Manifest m;
  m.path = path;
  std::set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    SampleRecord r;
    try {
      const json j = json::parse(line);
      r.sample_id = j.at("sample_id");
      r.image_path = resolve(base, j.at("image"));
      r.image_id = j.value("image_id", std::string(j.at("image")));
      r.category = parse_category(j.at("category").get<std::string>());
      const auto& mask = j.at("mask");
      if (mask.contains("rle")) {
        const auto& rle = mask.at("rle");
        r.mask_rle = RleMask{rle.at("height"), rle.at("width"), rle.at("counts").get<std::vector<std::uint32_t>>()};
      } else {
        r.mask_path = resolve(base, mask.at("bitmap"));
      }
      r.phrase = j.value("phrase", "");
      r.query = j.value("query", "");
      r.description = j.value("description", "");
      r.references = j.value("references", std::vector<std::string>{});
    } catch (const json::exception& e) {
      throw InvalidInput(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    r.validate();
    if (!ids.insert(r.sample_id).second) throw InvalidInput(path + ": duplicate sample_id " + r.sample_id);
    m.records.push_back(std::move(r));
  }
  return m;
}

void Manifest::save(const std::string& out_path) const {
  const std::string base = fs::path(out_path).parent_path().string();
  std::string text;
  for (const auto& r : records) text += record_to_json_line(r, base) + "\n";
  write_file_atomic(out_path, text);
}

std::vector<std::size_t> Manifest::indices_of(Category c) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].category == c) out.push_back(i);
  return out;
}

// ---- step-1 simulation ----------------------------------------------------

namespace {

std::size_t count_occurrences(std::string_view text, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = text.find(needle); pos != std::string_view::npos; pos = text.find(needle, pos + needle.size())) ++n;
  return n;
}

std::string fill_phrase(const std::string& form, const std::string& phrase) {
  std::string out = form;
  const auto pos = out.find("[PHRASE]");
  out.replace(pos, 8, phrase);
  // Capitalize when the phrase opens the sentence.
  if (pos == 0 && !out.empty()) out[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(out[0])));
  return out;
}

}  // namespace

void QaTemplate::validate() const {
  if (count_occurrences(question, "[PHRASE]") != 1 || count_occurrences(answer, "[PHRASE]") != 1) {
    throw ConfigError("Q-A template '" + template_id + "' must contain [PHRASE] exactly once in each form");
  }
}

std::vector<QaTemplate> default_qa_templates() {
  return {
      {"qa-region", "What is [PHRASE]'s region in this image?", "It is [PHRASE]."},
      {"qa-segment", "Can you segment [PHRASE] in this image?", "Sure, it is [PHRASE]."},
      {"qa-where", "Where is [PHRASE] in this picture?", "[PHRASE] is shown in the picture."},
      {"qa-find", "Please find [PHRASE] in this image.", "I found [PHRASE]."},
      {"qa-which", "Which region shows [PHRASE]?", "The region shows [PHRASE]."},
      {"qa-part", "What part of the image is [PHRASE]?", "That part is [PHRASE]."},
      {"qa-point", "Please point out [PHRASE] in this image.", "Here is [PHRASE]."},
      {"qa-locate", "Could you locate [PHRASE] in the picture?", "Yes, it is [PHRASE]."},
  };
}

QaPair instantiate(const QaTemplate& t, const std::string& phrase) {
  t.validate();
  return {fill_phrase(t.question, phrase), fill_phrase(t.answer, phrase), t.template_id};
}

QaPair simulate_step1(const SampleRecord& record, const std::vector<QaTemplate>& registry, std::mt19937_64& rng) {
  if (registry.empty()) throw ConfigError("Q-A template registry is empty");
  if (record.category == Category::reasoning) {
    throw InvalidInput(record.sample_id + ": reasoning records carry a real query; step 1 is not simulated");
  }
  return instantiate(registry[uniform_index(rng, registry.size())], record.phrase);
}

// ---- sampling -------------------------------------------------------------

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0); }

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return std::min(n - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)));
}

MixtureSampler::MixtureSampler(std::vector<std::size_t> category_sizes, std::vector<double> weights,
                               std::uint64_t seed)
    : sizes_(std::move(category_sizes)), weights_(std::move(weights)), rng_(seed) {
  if (sizes_.size() != weights_.size()) throw ConfigError("one weight per category is required");
  double total = 0.0;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    if (!(weights_[i] >= 0.0) || !std::isfinite(weights_[i])) throw ConfigError("weights must be non-negative");
    if (weights_[i] > 0.0 && sizes_[i] == 0) {
      throw ConfigError("category " + std::to_string(i) + " has positive weight but no samples");
    }
    total += weights_[i];
    cumulative_.push_back(total);
  }
  if (total <= 0.0) throw ConfigError("at least one weight must be positive");
  for (auto& c : cumulative_) c /= total;
}

SampleRef MixtureSampler::next() {
  const double u = uniform01(rng_);
  std::size_t cat = 0;
  while (cat + 1 < cumulative_.size() && (u >= cumulative_[cat] || weights_[cat] == 0.0)) ++cat;
  return {cat, uniform_index(rng_, sizes_[cat])};
}

std::string MixtureSampler::state() const {
  std::ostringstream ss;
  ss << rng_;
  return ss.str();
}

void MixtureSampler::restore(const std::string& state) {
  std::istringstream ss(state);
  ss >> rng_;
  if (!ss) throw ConfigError("invalid sampler state");
}

// ---- leakage check --------------------------------------------------------

SplitReport validate_split_ids(const std::vector<std::string>& train_ids, const std::vector<std::string>& eval_ids) {
  const std::set<std::string> train(train_ids.begin(), train_ids.end());
  std::set<std::string> overlap;
  for (const auto& id : eval_ids)
    if (train.contains(id)) overlap.insert(id);
  return {{overlap.begin(), overlap.end()}};
}

SplitReport validate_split(const std::vector<Manifest>& train, const std::vector<Manifest>& eval) {
  std::vector<std::string> a, b;
  for (const auto& m : train)
    for (const auto& r : m.records) a.push_back(r.image_id);
  for (const auto& m : eval)
    for (const auto& r : m.records) b.push_back(r.image_id);
  return validate_split_ids(a, b);
}

}  // namespace llavaseg::data
