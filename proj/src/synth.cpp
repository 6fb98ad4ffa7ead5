// Synthetic attribute benchmark: coloured shapes on textured backgrounds where
// the target's name alone is ambiguous and its attributes disambiguate it.

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <map>

#include "llavaseg/backend.hpp"
#include "llavaseg/datakit.hpp"
#include "llavaseg/hash.hpp"
#include "llavaseg/orchestrator.hpp"

namespace llavaseg::data {

namespace fs = std::filesystem;

namespace {

const std::map<std::string, std::array<std::uint8_t, 3>>& known_colours() {
  static const std::map<std::string, std::array<std::uint8_t, 3>> m = {
      {"red", {220, 40, 40}},    {"green", {40, 180, 60}},  {"blue", {40, 80, 220}},
      {"yellow", {230, 210, 40}}, {"purple", {150, 60, 190}}, {"orange", {240, 140, 30}},
      {"white", {240, 240, 240}}, {"black", {20, 20, 20}},   {"cyan", {40, 210, 210}},
  };
  return m;
}

// Everyday things sharing a colour, used to phrase indirect queries.
std::string colour_association(const std::string& colour) {
  static const std::map<std::string, std::string> m = {
      {"red", "a ripe tomato"},   {"green", "fresh grass"},   {"blue", "a clear sky"},
      {"yellow", "a banana"},     {"purple", "a grape"},      {"orange", "a pumpkin"},
      {"white", "fresh snow"},    {"black", "charcoal"},      {"cyan", "tropical water"},
  };
  const auto it = m.find(colour);
  return it != m.end() ? it->second : "something " + colour;
}

std::string shape_adjective(const std::string& shape) {
  if (shape == "circle") return "round";
  if (shape == "square") return "four-sided";
  if (shape == "triangle") return "three-cornered";
  return shape + "-shaped";
}

struct Shape {
  std::string kind;
  std::string colour;
  int cx = 0, cy = 0, r = 0;
};

bool covers(const Shape& s, int x, int y) {
  const double dx = x - s.cx, dy = y - s.cy, r = s.r;
  if (s.kind == "square") return std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r;
  if (s.kind == "triangle") {
    // Upward triangle, apex at cy - r, base at cy + 0.8 r.
    const double top = -r, bottom = 0.8 * r;
    if (dy < top || dy > bottom) return false;
    const double half = r * (dy - top) / (bottom - top);
    return std::abs(dx) <= half;
  }
  return dx * dx + dy * dy <= r * r;
}

std::uint8_t clamp_u8(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

RgbImage textured_background(int size, std::mt19937_64& rng) {
  RgbImage img{size, size, std::vector<std::uint8_t>(static_cast<std::size_t>(size) * size * 3)};
  const double base = 90.0 + 60.0 * uniform01(rng);
  const double fx = 0.2 + 0.6 * uniform01(rng), fy = 0.2 + 0.6 * uniform01(rng);
  const double phase = 6.283185307179586 * uniform01(rng);
  const std::array<double, 3> tint = {uniform01(rng) * 12 - 6, uniform01(rng) * 12 - 6, uniform01(rng) * 12 - 6};
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double v = base + 14.0 * std::sin(fx * x + fy * y + phase);
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = clamp_u8(v + tint[c] + 20.0 * (uniform01(rng) - 0.5));
    }
  return img;
}

void paint(RgbImage& img, const Shape& s, std::mt19937_64& rng, BinaryMask* mask) {
  const auto colour = known_colours().at(s.colour);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      if (!covers(s, x, y)) continue;
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = clamp_u8(colour[c] + 16.0 * (uniform01(rng) - 0.5));
      if (mask != nullptr) (*mask)(y, x) = 1;
    }
}

std::string relation(const Shape& target, const Shape& other) {
  const int dx = target.cx - other.cx, dy = target.cy - other.cy;
  const std::string ref = "the other " + other.kind;
  if (std::abs(dx) >= std::abs(dy)) return dx < 0 ? "to the left of " + ref : "to the right of " + ref;
  return dy < 0 ? "above " + ref : "below " + ref;
}

// What the mock model says at each step about one image.
struct Script {
  std::string step1;      // reasoning answer
  std::string target;     // step-2 reply
  std::string attribute;  // step-3 reply
};

// Identifies the pending step from the last user turn of a rendered history.
enum class Ask { step1, target, attribute, merged };

Ask classify(std::string_view history) {
  const auto pos = history.rfind("USER: ");
  const std::string_view last = pos == std::string_view::npos ? history : history.substr(pos);
  if (last.find("Follow these guidelines strictly") != std::string_view::npos) return Ask::merged;
  if (last.find("The target is:") != std::string_view::npos) return Ask::attribute;
  if (last.find("identify the distinct physical objects") != std::string_view::npos) return Ask::target;
  return Ask::step1;
}

CallbackBackend::Responder scripted_responder(std::map<std::string, Script> by_digest) {
  return [scripts = std::move(by_digest)](std::string_view image, std::string_view history) -> std::string {
    const auto it = scripts.find(image_digest(image));
    if (it == scripts.end()) throw BackendError("synthetic responder: unknown image", false);
    const Script& s = it->second;
    switch (classify(history)) {
      case Ask::step1: return s.step1;
      case Ask::target: return s.target;
      case Ask::attribute: return s.attribute;
      case Ask::merged: return s.target + " " + s.attribute;
    }
    return {};
  };
}

// Runs every chain the pipeline may request for `image` through `recorder`.
void exercise_chains(const RecordingBackend& recorder, std::string_view image, const SampleRecord& r) {
  for (const ChainMode mode : {ChainMode::merged, ChainMode::separate}) {
    ChainConfig cfg;
    cfg.mode = mode;
    if (r.category == Category::reasoning) {
      run_chain(image, r.query, recorder, cfg);
    } else {
      // Step 1 is simulated from a template chosen at cache time; cover them all.
      for (const auto& t : default_qa_templates()) {
        const QaPair qa = instantiate(t, r.phrase);
        run_chain_from_step1(image, qa.question, qa.answer, recorder, cfg);
      }
    }
  }
}

void write_descriptor(const std::string& path, const std::string& script_name, int width) {
  BackendDescriptor d;
  d.kind = BackendDescriptor::Kind::scripted;
  d.script_path = script_name;
  d.embedding_width = width;
  write_file_atomic(path, d.to_json() + "\n");
}

}  // namespace

std::vector<std::array<std::uint8_t, 3>> palette_for(const std::vector<std::string>& colors) {
  std::vector<std::array<std::uint8_t, 3>> out;
  for (const auto& c : colors) {
    const auto it = known_colours().find(c);
    if (it == known_colours().end()) throw ConfigError("no palette entry for colour '" + c + "'");
    out.push_back(it->second);
  }
  return out;
}

SynthSummary make_synthetic(const SynthConfig& config, const std::string& out_dir) {
  if (config.count <= 0) throw ConfigError("sample count must be positive");
  if (config.image_size < 32) throw ConfigError("synthetic images need at least 32 pixels per side");
  if (config.colors.size() < 2 || config.shapes.size() < 2) throw ConfigError("need at least two colours and shapes");
  if (config.referring_fraction < 0.0 || config.referring_fraction > 1.0) {
    throw ConfigError("referring_fraction must lie in [0, 1]");
  }
  palette_for(config.colors);  // validates the vocabulary

  fs::create_directories(fs::path(out_dir) / "images");
  std::mt19937_64 rng(config.seed);
  const int size = config.image_size;
  const int r_min = std::max(4, size / 9), r_max = std::max(r_min + 1, size / 6);

  Manifest manifest;
  std::map<std::string, Script> scripts;
  std::vector<std::pair<SampleRecord, std::string>> rendered;  // record, image bytes

  for (int i = 0; i < config.count; ++i) {
    auto pick = [&](const std::vector<std::string>& v) { return v[uniform_index(rng, v.size())]; };
    Shape target{pick(config.shapes), pick(config.colors)};
    Shape distractor{target.kind, target.colour};
    const bool same_colour = uniform01(rng) < 0.5;
    while (!same_colour && distractor.colour == target.colour) distractor.colour = pick(config.colors);
    std::vector<Shape> shapes = {target, distractor};
    if (uniform01(rng) < 0.5) {
      Shape extra{pick(config.shapes), pick(config.colors)};
      while (extra.kind == target.kind) extra.kind = pick(config.shapes);
      shapes.push_back(extra);
    }
    // Rejection-sample non-overlapping placements.
    for (int attempt = 0;; ++attempt) {
      if (attempt > 1000) throw ConfigError("could not place shapes; image too small");
      bool ok = true;
      for (std::size_t k = 0; k < shapes.size() && ok; ++k) {
        auto& s = shapes[k];
        s.r = r_min + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(r_max - r_min + 1)));
        s.cx = s.r + 1 + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(size - 2 * s.r - 2)));
        s.cy = s.r + 1 + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(size - 2 * s.r - 2)));
        for (std::size_t j = 0; j < k && ok; ++j) {
          const double d = std::hypot(s.cx - shapes[j].cx, s.cy - shapes[j].cy);
          ok = d > s.r + shapes[j].r + 3;
        }
      }
      if (ok) break;
    }
    target = shapes[0];
    distractor = shapes[1];

    RgbImage img = textured_background(size, rng);
    BinaryMask mask = BinaryMask::Zero(size, size);
    for (std::size_t k = shapes.size(); k-- > 0;) paint(img, shapes[k], rng, k == 0 ? &mask : nullptr);

    const std::string rel = relation(target, distractor);
    const std::string colour_phrase = same_colour ? "" : target.colour + " ";
    SampleRecord r;
    r.sample_id = config.prefix + "-" + std::to_string(i);
    r.image_path = (fs::path(out_dir) / "images" / (r.sample_id + ".ppm")).string();
    r.image_id = r.sample_id;
    r.mask_rle = encode_mask(mask);
    r.category = uniform01(rng) < config.referring_fraction ? Category::referring : Category::reasoning;
    r.description = "the " + target.colour + " " + target.kind + " " + rel;
    if (r.category == Category::referring) {
      r.phrase = "the " + colour_phrase + target.kind + (same_colour ? " " + rel : "");
    } else {
      r.query = "the " + shape_adjective(target.kind) + " thing whose colour is like " +
                colour_association(target.colour) + (same_colour ? " and that sits " + rel : "");
    }
    Script s;
    s.step1 = "It is the " + target.kind + ". Its colour is like " + colour_association(target.colour) + ".";
    s.target = "The user wants the " + target.kind + " from the image.";
    s.attribute = "The " + target.kind + " can be discriminated by its " + target.colour + " color. It is " + rel + ".";
    r.references = {s.attribute, "The " + target.colour + " " + target.kind + " is " + rel + "."};

    const std::string bytes = encode_ppm(img);
    scripts[image_digest(bytes)] = s;
    write_file_atomic(r.image_path, bytes);
    rendered.emplace_back(r, bytes);
    manifest.records.push_back(std::move(r));
  }

  const CallbackBackend responder(scripted_responder(std::move(scripts)), config.embedding_width);
  const RecordingBackend recorder(responder);
  for (const auto& [record, bytes] : rendered) exercise_chains(recorder, bytes, record);

  SynthSummary summary;
  summary.manifest_path = (fs::path(out_dir) / "manifest.jsonl").string();
  summary.script_path = (fs::path(out_dir) / "script.jsonl").string();
  summary.backend_path = (fs::path(out_dir) / "backend.json").string();
  summary.samples = manifest.records.size();
  manifest.save(summary.manifest_path);
  write_script(summary.script_path, recorder.entries(), false);
  write_descriptor(summary.backend_path, "script.jsonl", config.embedding_width);
  return summary;
}

SynthSplit make_synthetic_split(const SynthConfig& config, int eval_count, const std::string& out_dir) {
  if (eval_count <= 0) throw ConfigError("eval_count must be positive");
  SynthConfig train = config;
  train.prefix = config.prefix + "-train";
  SynthConfig eval = config;
  eval.count = eval_count;
  eval.seed = config.seed ^ 0x9e3779b97f4a7c15ULL;
  eval.prefix = config.prefix + "-eval";
  const SynthSummary a = make_synthetic(train, (fs::path(out_dir) / "train").string());
  const SynthSummary b = make_synthetic(eval, (fs::path(out_dir) / "eval").string());

  // One script answers for both halves, so a single backend serves training and evaluation.
  SynthSplit split;
  split.train_manifest = a.manifest_path;
  split.eval_manifest = b.manifest_path;
  split.script_path = (fs::path(out_dir) / "script.jsonl").string();
  split.backend_path = (fs::path(out_dir) / "backend.json").string();
  write_file_atomic(split.script_path, read_file(a.script_path) + read_file(b.script_path));
  write_descriptor(split.backend_path, "script.jsonl", config.embedding_width);
  return split;
}

DemoBundle make_demo_bundle(const std::string& out_dir, int embedding_width) {
  fs::create_directories(out_dir);
  constexpr int size = 64;
  std::mt19937_64 rng(7);
  RgbImage img{size, size, std::vector<std::uint8_t>(size * size * 3)};
  BinaryMask fire = BinaryMask::Zero(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double n = 10.0 * (uniform01(rng) - 0.5);
      // Dark ground, a ring of grey stones, flames in the middle.
      std::array<double, 3> px = {40 + y * 0.4 + n, 32 + y * 0.3 + n, 25 + n};
      const double dx = x - 32.0, dy = y - 40.0;
      const double ring = std::hypot(dx, dy * 1.6);
      if (ring >= 17.0 && ring <= 22.0) px = {128 + n, 126 + n, 122 + n};
      const double fy = y - 20.0;  // flame rises above the pit centre
      const double half = fy < 0 ? 0.0 : std::min(12.0, 3.0 + 0.45 * fy);
      if (fy >= 0 && y <= 42 && std::abs(x - 32.0) <= half) {
        px = {245 + n / 2, 120 + 2.0 * fy + n, 20 + n};
        fire(y, x) = 1;
      }
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = clamp_u8(px[c]);
    }
  DemoBundle b;
  b.query = "hot";
  b.image_path = (fs::path(out_dir) / "fire_pit.ppm").string();
  b.mask_path = (fs::path(out_dir) / "fire_pit_mask.pgm").string();
  b.backend_path = (fs::path(out_dir) / "backend.json").string();
  const std::string bytes = encode_ppm(img);
  write_file_atomic(b.image_path, bytes);
  write_pgm_mask(b.mask_path, fire);

  Script s;
  s.step1 = "It is fire in the fire pit. The fire is hot and gives off heat and light.";
  s.target = "The user wants the fire from the image.";
  s.attribute =
      "The fire can be discriminated by its bright orange color and flickering shape. It is located in the center "
      "of the fire pit, surrounded by gray stones.";
  const CallbackBackend responder(scripted_responder({{image_digest(bytes), s}}), embedding_width);
  const RecordingBackend recorder(responder);
  SampleRecord r;
  r.category = Category::reasoning;
  r.query = b.query;
  exercise_chains(recorder, bytes, r);
  write_script((fs::path(out_dir) / "script.jsonl").string(), recorder.entries(), false);
  write_descriptor(b.backend_path, "script.jsonl", embedding_width);
  return b;
}

}  // namespace llavaseg::data
