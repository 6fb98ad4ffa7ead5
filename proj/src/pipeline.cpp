#include "llavaseg/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

#include "llavaseg/hash.hpp"

namespace llavaseg::app {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(PromptInput p) {
  switch (p) {
    case PromptInput::reason: return "reason";
    case PromptInput::target: return "target";
    case PromptInput::full: return "full";
  }
  return "?";
}

PromptInput parse_prompt_input(const std::string& name) {
  if (name == "reason") return PromptInput::reason;
  if (name == "target") return PromptInput::target;
  if (name == "full") return PromptInput::full;
  throw ConfigError("unknown prompt input '" + name + "' (expected reason, target or full)");
}

seg::ImageTensor<double> image_tensor(const data::RgbImage& image) {
  seg::ImageTensor<double> t{image.height, image.width, seg::Mat<double>(image.height * image.width, 3)};
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c) t.pixels(y * image.width + x, c) = image.at(y, x, c) / 127.5 - 1.0;
  return t;
}

seg::Mat<double> mask_to_target(const data::BinaryMask& mask) {
  return (mask.array() != 0).cast<double>().matrix();
}

data::BinaryMask logits_to_mask(const seg::Mat<double>& logits) { return seg::threshold_mask(logits); }

// ---- trace cache ----------------------------------------------------------

namespace {

json matrix_to_json(const EmbeddingMatrix& m) {
  // float32 little-endian, row-major; base64 keeps the cache compact and exact.
  std::string raw(static_cast<std::size_t>(m.size()) * sizeof(float), '\0');
  if (m.size() > 0) std::memcpy(raw.data(), m.data(), raw.size());
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", base64_encode(raw)}};
}

EmbeddingMatrix matrix_from_json(const json& j) {
  const Eigen::Index rows = j.at("rows"), cols = j.at("cols");
  const std::string raw = base64_decode(j.at("data").get<std::string>());
  if (raw.size() != static_cast<std::size_t>(rows * cols) * sizeof(float)) {
    throw InvalidInput("cached embedding payload has the wrong size");
  }
  EmbeddingMatrix m(rows, cols);
  if (m.size() > 0) std::memcpy(m.data(), raw.data(), raw.size());
  return m;
}

CachedSample extract(std::string sample_id, CoTTrace trace) {
  CachedSample c;
  c.sample_id = std::move(sample_id);
  c.reason = trace.reason_result.embeddings;
  c.target = slice_embeddings(trace.span_source, {trace.target_token_span});
  c.attributes = slice_embeddings(trace.span_source, trace.attribute_token_spans);
  c.trace = std::move(trace);
  return c;
}

/// Counts calls into the wrapped backend.
class CountingBackend final : public MllmBackend {
 public:
  explicit CountingBackend(const MllmBackend& inner) : inner_(inner) {}
  GenerationResult generate(std::string_view image, std::string_view history) const override {
    ++calls_;
    return inner_.generate(image, history);
  }
  int embedding_width() const override { return inner_.embedding_width(); }
  std::size_t calls() const { return calls_.load(); }

 private:
  const MllmBackend& inner_;
  mutable std::atomic<std::size_t> calls_{0};
};

std::string safe_file_name(const std::string& id) {
  std::string out;
  for (char c : id) out.push_back(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.' ? c : '_');
  if (out != id) out += "-" + sha256_hex(id).substr(0, 8);
  return out;
}

bool is_complete(const std::string& path) {
  if (!fs::exists(path)) return false;
  try {
    const json j = json::parse(read_file(path));
    return j.value("complete", false);
  } catch (const std::exception&) {
    return false;
  }
}

}  // namespace

EmbeddingMatrix CachedSample::prompt(PromptInput input) const {
  switch (input) {
    case PromptInput::reason: return reason;
    case PromptInput::target: return target;
    case PromptInput::full: {
      EmbeddingMatrix m(target.rows() + attributes.rows(), std::max(target.cols(), attributes.cols()));
      if (target.rows() > 0) m.topRows(target.rows()) = target;
      if (attributes.rows() > 0) m.bottomRows(attributes.rows()) = attributes;
      return m;
    }
  }
  return {};
}

std::string CachedSample::to_json() const {
  json j{{"sample_id", sample_id},
         {"complete", true},
         {"trace", json::parse(trace.to_json_line())},
         {"embeddings",
          {{"reason", matrix_to_json(reason)},
           {"target", matrix_to_json(target)},
           {"attributes", matrix_to_json(attributes)}}}};
  return j.dump();
}

CachedSample CachedSample::from_json(const std::string& text) {
  CachedSample c;
  try {
    const json j = json::parse(text);
    if (!j.value("complete", false)) throw InvalidInput("cache record is incomplete");
    c.sample_id = j.at("sample_id");
    c.trace = CoTTrace::from_json_line(j.at("trace").dump());
    const auto& e = j.at("embeddings");
    c.reason = matrix_from_json(e.at("reason"));
    c.target = matrix_from_json(e.at("target"));
    c.attributes = matrix_from_json(e.at("attributes"));
  } catch (const json::exception& ex) {
    throw InvalidInput(std::string("malformed cache record: ") + ex.what());
  }
  return c;
}

std::string cache_path(const std::string& dir, const std::string& sample_id) {
  return (fs::path(dir) / (safe_file_name(sample_id) + ".json")).string();
}

CachedSample load_cached(const std::string& dir, const std::string& sample_id) {
  const std::string path = cache_path(dir, sample_id);
  if (!fs::exists(path)) throw IoError("no cached trace for " + sample_id + " in " + dir);
  return CachedSample::from_json(read_file(path));
}

CacheReport cache_traces(const data::Manifest& manifest, const MllmBackend& backend, const std::string& dir,
                         const CacheOptions& options) {
  if (options.concurrency <= 0) throw ConfigError("cache concurrency must be positive");
  fs::create_directories(dir);
  const CountingBackend counted(backend);
  CacheReport report;
  std::mutex mu;
  std::atomic<std::size_t> next{0};

  auto work = [&] {
    for (;;) {
      const std::size_t i = next++;
      if (i >= manifest.records.size()) return;
      const auto& r = manifest.records[i];
      const std::string path = cache_path(dir, r.sample_id);
      if (is_complete(path)) {
        std::lock_guard lock(mu);
        ++report.skipped;
        continue;
      }
      try {
        const std::string image = read_file(r.image_path);
        CoTTrace trace;
        if (r.category == data::Category::reasoning) {
          trace = run_chain(image, r.query, counted, options.chain);
        } else {
          // Per-sample stream so the draw does not depend on scheduling.
          std::mt19937_64 rng(options.seed ^ fnv1a64(r.sample_id));
          const auto qa = data::simulate_step1(r, options.qa_templates, rng);
          trace = run_chain_from_step1(image, qa.question, qa.answer, counted, options.chain);
        }
        write_file_atomic(path, extract(r.sample_id, std::move(trace)).to_json());
        std::lock_guard lock(mu);
        ++report.written;
      } catch (const std::exception& e) {
        std::lock_guard lock(mu);
        report.failures.emplace_back(r.sample_id, e.what());
      }
    }
  };
  const int workers = std::min<int>(options.concurrency, static_cast<int>(std::max<std::size_t>(1, manifest.records.size())));
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) pool.emplace_back(work);
  for (auto& t : pool) t.join();

  std::sort(report.failures.begin(), report.failures.end());
  report.complete = report.written + report.skipped;
  report.backend_calls = counted.calls();
  const std::string failure_path = (fs::path(dir) / "failures.json").string();
  if (!report.failures.empty()) {
    json f = json::array();
    for (const auto& [id, msg] : report.failures) f.push_back({{"sample_id", id}, {"error", msg}});
    write_file_atomic(failure_path, f.dump(2) + "\n");
  } else if (fs::exists(failure_path)) {
    fs::remove(failure_path);
  }
  return report;
}

std::string cache_digest(const std::string& dir) {
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (entry.is_regular_file() && entry.path().extension() == ".json" && name != "failures.json") {
      files.push_back(name);
    }
  }
  std::sort(files.begin(), files.end());
  std::string material;
  for (const auto& name : files) {
    json j = json::parse(read_file((fs::path(dir) / name).string()));
    if (j.contains("trace")) j["trace"].erase("step_latency_ms");
    material += name + "\n" + j.dump() + "\n";
  }
  return sha256_hex(material);
}

// ---- model inputs ---------------------------------------------------------

EncodedSet encode_set(const data::Manifest& manifest, const std::string& cache_dir,
                      const seg::SegModel<double>& model, int threads) {
  EncodedSet set;
  const std::size_t n = manifest.records.size();
  set.records.resize(n);
  set.pyramids.resize(n);
  set.targets.resize(n);
  set.cached.resize(n);
  train::detail::parallel_for(n, threads, [&](std::size_t i) {
    const auto& r = manifest.records[i];
    const data::RgbImage img = data::read_ppm(r.image_path);
    const data::BinaryMask mask = r.load_mask();
    if (mask.rows() != img.height || mask.cols() != img.width) {
      throw InvalidInput(r.sample_id + ": mask size does not match the image");
    }
    set.records[i] = &r;
    set.pyramids[i] = std::make_shared<const seg::FeaturePyramid<double>>(model.encode_image(image_tensor(img)));
    set.targets[i] = mask_to_target(mask);
    set.cached[i] = load_cached(cache_dir, r.sample_id);
  });
  return set;
}

train::Dataset to_dataset(const EncodedSet& set, PromptInput input, int d_llm) {
  train::Dataset data;
  data.categories.resize(3);
  for (std::size_t i = 0; i < set.size(); ++i) {
    const EmbeddingMatrix e = set.cached[i].prompt(input);
    if (e.rows() == 0) throw InvalidPrompt(set.records[i]->sample_id + ": empty prompt for input " + to_string(input));
    if (e.cols() != d_llm) throw ShapeError(set.records[i]->sample_id + ": cached embedding width does not match d_llm");
    train::TrainSample<double> s{set.records[i]->sample_id, set.pyramids[i], e.cast<double>(), set.targets[i]};
    data.categories[static_cast<std::size_t>(set.records[i]->category)].push_back(std::move(s));
  }
  return data;
}

// ---- evaluation -----------------------------------------------------------

EvalReport evaluate(const seg::SegModel<double>& model, const EncodedSet& set, PromptInput input, int threads) {
  if (set.size() == 0) throw InvalidInput("evaluation set is empty");
  EvalReport rep;
  rep.rows.resize(set.size());
  train::detail::parallel_for(set.size(), threads, [&](std::size_t i) {
    const auto prompt = model.project_embeddings(set.cached[i].prompt(input).cast<double>());
    const auto logits = model.forward_encoded(*set.pyramids[i], prompt);
    const data::BinaryMask gt = (set.targets[i].array() > 0.5).cast<std::uint8_t>();
    rep.rows[i].sample_id = set.records[i]->sample_id;
    rep.rows[i].overlap = metrics::overlap(logits_to_mask(logits), gt);
  });

  std::vector<metrics::Overlap> overlaps;
  std::vector<std::string> hyps;
  std::vector<std::vector<std::string>> refs;
  std::vector<std::size_t> text_rows;
  for (std::size_t i = 0; i < set.size(); ++i) {
    overlaps.push_back(rep.rows[i].overlap);
    const auto& r = *set.records[i];
    if (r.references.empty()) continue;
    auto& row = rep.rows[i];
    row.has_text = true;
    row.rouge_l = metrics::rouge_l(set.cached[i].trace.attributes, r.references).value;
    hyps.push_back(set.cached[i].trace.attributes);
    refs.push_back(r.references);
    text_rows.push_back(i);
  }
  rep.giou = metrics::giou(overlaps);
  rep.ciou = metrics::ciou(overlaps);
  if (!hyps.empty()) {
    const auto c = metrics::cider(hyps, refs);
    double rouge = 0.0;
    for (std::size_t k = 0; k < text_rows.size(); ++k) {
      rep.rows[text_rows[k]].cider = c.per_item[k];
      rouge += rep.rows[text_rows[k]].rouge_l;
    }
    rep.has_text = true;
    rep.cider = c.corpus;
    rep.rouge_l = rouge / static_cast<double>(text_rows.size());
  }
  return rep;
}

std::string EvalReport::to_tsv() const {
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  std::string out = "sample_id\tiou\trouge_l\tcider\n";
  for (const auto& r : rows) {
    out += r.sample_id + "\t" + num(r.overlap.iou()) + "\t" + (r.has_text ? num(r.rouge_l) : "NA") + "\t" +
           (r.has_text ? num(r.cider) : "NA") + "\n";
  }
  out += "\n# aggregate\n";
  out += "gIoU\t" + num(giou) + "\n";
  out += "cIoU\t" + num(ciou) + "\n";
  out += "ROUGE-L\t" + (has_text ? num(rouge_l) : "NA") + "\n";
  out += "CIDEr\t" + (has_text ? num(cider) : "NA") + "\n";
  return out;
}

// ---- inference ------------------------------------------------------------

InferResult infer(const seg::SegModel<double>& model, PromptInput input, const std::string& image_bytes,
                  const std::string& query, const MllmBackend& backend, const ChainConfig& chain) {
  const data::RgbImage img = data::decode_ppm(image_bytes);
  InferResult out;
  out.trace = run_chain(image_bytes, query, backend, chain);
  const CachedSample c = extract("", out.trace);
  const auto prompt = model.project_embeddings(c.prompt(input).cast<double>());
  out.logits = model.forward(image_tensor(img), prompt);
  out.mask = logits_to_mask(out.logits);
  return out;
}

// ---- ablation -------------------------------------------------------------

std::string to_string(AblationSuite s) { return s == AblationSuite::prompt_steps ? "prompt-steps" : "scales"; }

AblationSuite parse_ablation_suite(const std::string& name) {
  if (name == "prompt-steps") return AblationSuite::prompt_steps;
  if (name == "scales") return AblationSuite::scales;
  throw ConfigError("unknown ablation suite '" + name + "' (expected prompt-steps or scales)");
}

json reference_values(AblationSuite suite) {
  if (suite == AblationSuite::prompt_steps) {
    return {{"source", "full-scale study, prompt ablation"},
            {"arms",
             {{"step1-only", {{"giou", 36.7}, {"ciou", 31.4}}},
              {"steps-1+2", {{"giou", 50.2}, {"ciou", 43.8}}},
              {"full-chain", {{"giou", 54.8}, {"ciou", 49.9}}}}}};
  }
  return {{"source", "full-scale study, multi-scale ablation"},
          {"arms",
           {{"single-scale", {{"giou", 55.4}, {"ciou", 52.5}}}, {"multi-scale", {{"giou", 59.1}, {"ciou", 52.8}}}}}};
}

json AblationReport::to_json() const {
  json j{{"suite", app::to_string(suite)}, {"seed", seed}, {"arms", json::array()}};
  for (const auto& a : arms) {
    j["arms"].push_back({{"name", a.name},
                         {"prompt_input", app::to_string(a.input)},
                         {"scales", seg::to_string(a.scales)},
                         {"seed", seed},
                         {"giou", a.giou},
                         {"ciou", a.ciou},
                         {"final_loss", a.final_loss}});
  }
  j["reference"] = reference_values(suite);
  return j;
}

const ArmResult& AblationReport::arm(const std::string& name) const {
  for (const auto& a : arms)
    if (a.name == name) return a;
  throw InvalidInput("no ablation arm named " + name);
}

AblationReport run_ablation(const AblationConfig& cfg) {
  struct Arm {
    std::string name;
    PromptInput input;
    seg::ScaleSelection scales;
  };
  std::vector<Arm> arms;
  if (cfg.suite == AblationSuite::prompt_steps) {
    arms = {{"step1-only", PromptInput::reason, seg::ScaleSelection::all},
            {"steps-1+2", PromptInput::target, seg::ScaleSelection::all},
            {"full-chain", PromptInput::full, seg::ScaleSelection::all}};
  } else {
    arms = {{"single-scale", PromptInput::full, seg::ScaleSelection::deepest},
            {"multi-scale", PromptInput::full, seg::ScaleSelection::all}};
  }
  const data::Manifest train_m = data::Manifest::load(cfg.train_manifest);
  const data::Manifest eval_m = data::Manifest::load(cfg.eval_manifest);
  const auto leak = data::validate_split({train_m}, {eval_m});
  if (!leak.clean()) throw InvalidInput("train/eval overlap: " + leak.overlapping_image_ids.front());

  // The frozen encoder does not depend on the scale selection, so every arm
  // shares one set of pyramids.
  const seg::SegModel<double> base(cfg.model);
  const EncodedSet train_set = encode_set(train_m, cfg.train_cache, base, cfg.threads);
  const EncodedSet eval_set = encode_set(eval_m, cfg.eval_cache, base, cfg.threads);

  AblationReport report;
  report.suite = cfg.suite;
  report.seed = cfg.train.seed;
  for (const auto& arm : arms) {
    seg::ModelConfig mc = cfg.model;
    mc.scales = arm.scales;
    seg::SegModel<double> model(mc);
    train::TrainConfig tc = cfg.train;
    tc.threads = cfg.threads;
    train::FitOptions fo;
    fo.out_dir = (fs::path(cfg.out_dir) / arm.name).string();
    fo.extra_meta = {{"prompt_input", to_string(arm.input)}, {"arm", arm.name}};
    const auto fit = train::fit(tc, model, to_dataset(train_set, arm.input, mc.d_llm), fo);
    const EvalReport ev = evaluate(model, eval_set, arm.input, cfg.threads);
    write_file_atomic((fs::path(fo.out_dir) / "eval.tsv").string(), ev.to_tsv());
    report.arms.push_back({arm.name, arm.input, arm.scales, ev.giou, ev.ciou,
                           fit.losses.empty() ? 0.0 : fit.losses.back().total});
  }
  return report;
}

// ---- run bookkeeping ------------------------------------------------------

void write_run_manifest(const std::string& out_dir, const std::string& command, const json& config,
                        std::uint64_t seed, const std::vector<std::string>& inputs) {
  fs::create_directories(out_dir);
  json hashes = json::object();
  for (const auto& p : inputs) {
    if (p.empty()) continue;
    if (fs::is_regular_file(p)) hashes[p] = git_blob_sha1(read_file(p));
  }
  const json j{{"command", command}, {"config", config}, {"seed", seed}, {"inputs", hashes}};
  write_file_atomic((fs::path(out_dir) / "run_manifest.json").string(), j.dump(2) + "\n");
}

}  // namespace llavaseg::app
