#pragma once

#include <json.hpp>

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "llavaseg/backend.hpp"
#include "llavaseg/datakit.hpp"
#include "llavaseg/metrics.hpp"
#include "llavaseg/orchestrator.hpp"
#include "llavaseg/segcore/checkpoint.hpp"
#include "llavaseg/training.hpp"

namespace llavaseg::app {

/// Which chain output feeds the segmentation model.
enum class PromptInput {
  reason,  // step-1 answer only
  target,  // target-name span
  full,    // target span followed by the attribute spans
};

std::string to_string(PromptInput p);
PromptInput parse_prompt_input(const std::string& name);

seg::ImageTensor<double> image_tensor(const data::RgbImage& image);
seg::Mat<double> mask_to_target(const data::BinaryMask& mask);
data::BinaryMask logits_to_mask(const seg::Mat<double>& logits);

// ---- trace cache ----------------------------------------------------------

/// One sample's chain output with the raw embedding rows the model consumes.
struct CachedSample {
  std::string sample_id;
  CoTTrace trace;
  EmbeddingMatrix reason;
  EmbeddingMatrix target;
  EmbeddingMatrix attributes;

  EmbeddingMatrix prompt(PromptInput input) const;
  std::string to_json() const;
  static CachedSample from_json(const std::string& text);
};

struct CacheOptions {
  ChainConfig chain;
  int concurrency = 4;
  std::uint64_t seed = 0;  // Q-A template draws for simulated step 1
  std::vector<data::QaTemplate> qa_templates = data::default_qa_templates();
};

struct CacheReport {
  std::size_t complete = 0;  // records present after the run
  std::size_t written = 0;   // records produced by this run
  std::size_t skipped = 0;   // records already complete
  std::size_t backend_calls = 0;
  std::vector<std::pair<std::string, std::string>> failures;  // sample id, message
};

/// Runs the chain for every manifest record lacking a complete cache entry.
/// Failures are collected (and written to failures.json); the rest of the
/// cache is still produced, so a rerun resumes where this one stopped.
CacheReport cache_traces(const data::Manifest& manifest, const MllmBackend& backend, const std::string& dir,
                         const CacheOptions& options = {});

std::string cache_path(const std::string& dir, const std::string& sample_id);
CachedSample load_cached(const std::string& dir, const std::string& sample_id);
/// SHA-256 over the cached records, ignoring wall-clock latencies.
std::string cache_digest(const std::string& dir);

// ---- model inputs ---------------------------------------------------------

/// Manifest samples with their frozen-encoder pyramids, target masks and
/// cached chain outputs. Each image is encoded once.
struct EncodedSet {
  std::vector<const data::SampleRecord*> records;
  std::vector<std::shared_ptr<const seg::FeaturePyramid<double>>> pyramids;
  std::vector<seg::Mat<double>> targets;
  std::vector<CachedSample> cached;
  std::size_t size() const { return records.size(); }
};

EncodedSet encode_set(const data::Manifest& manifest, const std::string& cache_dir,
                      const seg::SegModel<double>& model, int threads = 0);

/// Training view grouped by category (semantic, referring, reasoning).
train::Dataset to_dataset(const EncodedSet& set, PromptInput input, int d_llm);

// ---- evaluation -----------------------------------------------------------

struct SampleEval {
  std::string sample_id;
  metrics::Overlap overlap;
  bool has_text = false;
  double rouge_l = 0.0;
  double cider = 0.0;
};

struct EvalReport {
  std::vector<SampleEval> rows;
  double giou = 0.0;
  double ciou = 0.0;
  bool has_text = false;
  double rouge_l = 0.0;
  double cider = 0.0;

  /// Per-sample rows then an aggregate block; column order is fixed.
  std::string to_tsv() const;
};

/// Mask metrics from the model; text metrics compare the chain's attribute
/// description with the record's references, where present.
EvalReport evaluate(const seg::SegModel<double>& model, const EncodedSet& set, PromptInput input, int threads = 0);

// ---- inference ------------------------------------------------------------

struct InferResult {
  CoTTrace trace;
  seg::Mat<double> logits;
  data::BinaryMask mask;
};

InferResult infer(const seg::SegModel<double>& model, PromptInput input, const std::string& image_bytes,
                  const std::string& query, const MllmBackend& backend, const ChainConfig& chain = {});

// ---- ablation -------------------------------------------------------------

enum class AblationSuite { prompt_steps, scales };
std::string to_string(AblationSuite s);
AblationSuite parse_ablation_suite(const std::string& name);

struct AblationConfig {
  AblationSuite suite = AblationSuite::prompt_steps;
  std::string train_manifest;
  std::string eval_manifest;
  std::string train_cache;
  std::string eval_cache;
  seg::ModelConfig model;
  train::TrainConfig train;
  std::string out_dir;
  int threads = 0;
};

struct ArmResult {
  std::string name;
  PromptInput input = PromptInput::full;
  seg::ScaleSelection scales = seg::ScaleSelection::all;
  double giou = 0.0;
  double ciou = 0.0;
  double final_loss = 0.0;
};

struct AblationReport {
  AblationSuite suite = AblationSuite::prompt_steps;
  std::uint64_t seed = 0;
  std::vector<ArmResult> arms;
  nlohmann::json to_json() const;
  const ArmResult& arm(const std::string& name) const;
};

/// Reference values from the full-scale study, carried in report footers.
nlohmann::json reference_values(AblationSuite suite);

AblationReport run_ablation(const AblationConfig& config);

// ---- run bookkeeping ------------------------------------------------------

/// Writes run_manifest.json: command, config snapshot, seed and a git-style
/// blob hash of every input file.
void write_run_manifest(const std::string& out_dir, const std::string& command, const nlohmann::json& config,
                        std::uint64_t seed, const std::vector<std::string>& inputs);

}  // namespace llavaseg::app
