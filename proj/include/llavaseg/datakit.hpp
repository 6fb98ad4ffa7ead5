#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "llavaseg/error.hpp"

namespace llavaseg::data {

using BinaryMask = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ---- mask codec -----------------------------------------------------------

/// Run-length encoding over row-major pixels; the first run counts zeros
/// (and may be 0), runs then alternate.
struct RleMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint32_t> counts;
  bool operator==(const RleMask&) const = default;
};

RleMask encode_mask(const BinaryMask& mask);
BinaryMask decode_mask(const RleMask& rle);

// ---- images ---------------------------------------------------------------

/// 8-bit interleaved RGB, row-major.
struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  std::uint8_t& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
};

/// Binary PPM (P6) / PGM (P5), maxval 255.
RgbImage read_ppm(const std::string& path);
RgbImage decode_ppm(std::string_view bytes);
std::string encode_ppm(const RgbImage& image);
void write_ppm(const std::string& path, const RgbImage& image);
BinaryMask read_pgm_mask(const std::string& path);
void write_pgm_mask(const std::string& path, const BinaryMask& mask);

/// Alpha-blends `mask` over `image` in the given colour.
RgbImage overlay(const RgbImage& image, const BinaryMask& mask, std::array<std::uint8_t, 3> colour = {255, 0, 0},
                 double alpha = 0.5);

// ---- manifests ------------------------------------------------------------

enum class Category { semantic, referring, reasoning };
std::string to_string(Category c);
Category parse_category(std::string_view name);

struct SampleRecord {
  std::string sample_id;
  std::string image_path;  // resolved against the manifest directory
  std::string image_id;    // identity used for leakage checks; defaults to the image path
  std::optional<RleMask> mask_rle;
  std::string mask_path;   // external PGM bitmap when mask_rle is absent
  Category category = Category::referring;
  std::string phrase;       // semantic / referring
  std::string query;        // reasoning
  std::string description;  // optional long target description
  std::vector<std::string> references;  // optional reference answers for text metrics

  /// Throws InvalidInput if the payload does not fit the category.
  void validate() const;
  BinaryMask load_mask() const;
};

struct Manifest {
  std::string path;
  std::vector<SampleRecord> records;

  static Manifest load(const std::string& path);
  void save(const std::string& path) const;
  std::vector<std::size_t> indices_of(Category c) const;
};

/// One JSON object per line. Relative paths are kept relative on write.
std::string record_to_json_line(const SampleRecord& record, const std::string& base_dir);

// ---- step-1 simulation ----------------------------------------------------

struct QaTemplate {
  std::string template_id;
  std::string question;  // contains [PHRASE] once
  std::string answer;    // contains [PHRASE] once
  void validate() const;
};

std::vector<QaTemplate> default_qa_templates();

struct QaPair {
  std::string question;
  std::string answer;
  std::string template_id;
};

QaPair instantiate(const QaTemplate& t, const std::string& phrase);

/// Uniform draw from `registry` using `rng`; only for non-reasoning records.
QaPair simulate_step1(const SampleRecord& record, const std::vector<QaTemplate>& registry, std::mt19937_64& rng);

// ---- sampling -------------------------------------------------------------

/// Uniform double in [0, 1) from the top 53 bits of the engine.
double uniform01(std::mt19937_64& rng);
std::size_t uniform_index(std::mt19937_64& rng, std::size_t n);

struct SampleRef {
  std::size_t category = 0;  // index into the per-category lists
  std::size_t sample = 0;    // index into that category's list
  bool operator==(const SampleRef&) const = default;
};

/// Infinite stream: category by weight, then a sample uniformly within it.
class MixtureSampler {
 public:
  MixtureSampler(std::vector<std::size_t> category_sizes, std::vector<double> weights, std::uint64_t seed);

  SampleRef next();
  std::string state() const;
  void restore(const std::string& state);
  const std::vector<double>& weights() const { return weights_; }

 private:
  std::vector<std::size_t> sizes_;
  std::vector<double> weights_;
  std::vector<double> cumulative_;
  std::mt19937_64 rng_;
};

// ---- leakage check --------------------------------------------------------

struct SplitReport {
  std::vector<std::string> overlapping_image_ids;  // sorted
  bool clean() const { return overlapping_image_ids.empty(); }
};

SplitReport validate_split(const std::vector<Manifest>& train, const std::vector<Manifest>& eval);
SplitReport validate_split_ids(const std::vector<std::string>& train_ids, const std::vector<std::string>& eval_ids);

// ---- synthetic data -------------------------------------------------------

struct SynthConfig {
  int count = 100;
  int image_size = 64;
  std::uint64_t seed = 0;
  double referring_fraction = 0.3;
  std::vector<std::string> colors = {"red", "green", "blue", "yellow", "purple"};
  std::vector<std::string> shapes = {"circle", "square", "triangle"};
  int embedding_width = 64;
  std::string prefix = "synth";
};

struct SynthSummary {
  std::string manifest_path;
  std::string backend_path;
  std::string script_path;
  std::size_t samples = 0;
};

/// Writes images, a manifest, a scripted-backend script covering both chain
/// modes, and a backend descriptor into `out_dir`.
SynthSummary make_synthetic(const SynthConfig& config, const std::string& out_dir);

struct SynthSplit {
  std::string train_manifest;
  std::string eval_manifest;
  std::string script_path;
  std::string backend_path;
};

/// Disjoint train/ and eval/ sets (different seeds and id prefixes) with one
/// shared script and backend descriptor at the top of `out_dir`.
SynthSplit make_synthetic_split(const SynthConfig& config, int eval_count, const std::string& out_dir);

struct DemoBundle {
  std::string image_path;
  std::string mask_path;
  std::string backend_path;
  std::string query;
};

/// Fire-pit scene with a scripted conversation whose target is "the fire".
DemoBundle make_demo_bundle(const std::string& out_dir, int embedding_width = 64);

std::vector<std::array<std::uint8_t, 3>> palette_for(const std::vector<std::string>& colors);

}  // namespace llavaseg::data
