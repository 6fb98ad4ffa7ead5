// Command-line entry points: make-synth, cache-traces, train, eval, infer, ablate.
//
// Exit codes: 0 success, 1 usage, 2 chain/backend failure, 3 model/data failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "llavaseg/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace llavaseg;

namespace {

constexpr int kUsage = 1;
constexpr int kChainFailure = 2;
constexpr int kModelFailure = 3;

struct Common {
  std::string manifest, checkpoint, backend, templates, out, cache;
  std::string scales = "all";
  std::string mode = "merged";
  std::uint64_t seed = 0;
  int threads = 0;
};

struct TrainFlags {
  int iterations = 500;
  int batch_size = 8;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  int checkpoint_every = 0;
  bool freeze_projection = false;
  std::string input = "full";
  std::string resume;
  int image_size = 64, patch = 8, d_vis = 128, d_hidden = 256, heads = 4, up_channels = 16;
};

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw CLI::ValidationError("--" + what + " is required");
  if (!fs::exists(path)) throw IoError(what + " not found: " + path);
}

ChainConfig chain_config(const Common& c) {
  ChainConfig cfg;
  cfg.mode = parse_chain_mode(c.mode);
  if (!c.templates.empty()) cfg.templates = TemplateSet::load(c.templates);
  return cfg;
}

std::unique_ptr<MllmBackend> open_backend(const std::string& path) {
  return make_backend(BackendDescriptor::load(path));
}

/// Uses --cache if given, otherwise fills <out>/cache from --backend.
std::string ensure_cache(const Common& c, const data::Manifest& manifest, const std::string& out_dir) {
  if (!c.cache.empty()) return c.cache;
  require_file(c.backend, "backend");
  const std::string dir = (fs::path(out_dir) / "cache").string();
  app::CacheOptions opts;
  opts.chain = chain_config(c);
  opts.seed = c.seed;
  const auto backend = open_backend(c.backend);
  const auto rep = app::cache_traces(manifest, *backend, dir, opts);
  if (!rep.failures.empty()) {
    throw ChainError(std::to_string(rep.failures.size()) + " samples failed; first: " + rep.failures.front().first +
                         ": " + rep.failures.front().second,
                     0, {});
  }
  return dir;
}

int cached_width(const std::string& cache_dir, const data::Manifest& m) {
  if (m.records.empty()) throw InvalidInput("manifest is empty");
  return static_cast<int>(app::load_cached(cache_dir, m.records.front().sample_id).target.cols());
}

seg::ModelConfig model_config(const TrainFlags& t, const Common& c, int d_llm) {
  seg::ModelConfig mc;
  mc.image_size = t.image_size;
  mc.patch = t.patch;
  mc.d_vis = t.d_vis;
  mc.d_hidden = t.d_hidden;
  mc.heads = t.heads;
  mc.up_channels = t.up_channels;
  mc.d_llm = d_llm;
  mc.scales = seg::parse_scale_selection(c.scales);
  mc.seed = c.seed;
  mc.validate();
  return mc;
}

train::TrainConfig train_config(const TrainFlags& t, const Common& c) {
  train::TrainConfig tc;
  tc.learning_rate = t.lr;
  tc.weight_decay = t.weight_decay;
  tc.batch_size = t.batch_size;
  tc.total_iterations = t.iterations;
  tc.checkpoint_every = t.checkpoint_every;
  tc.seed = c.seed;
  tc.train_projection = !t.freeze_projection;
  tc.threads = c.threads;
  tc.validate();
  return tc;
}

void add_common(CLI::App* app, Common& c, bool model_flags) {
  app->add_option("--out", c.out, "Output directory")->required();
  app->add_option("--seed", c.seed, "Random seed");
  app->add_option("--threads", c.threads, "Worker threads (0: all cores)");
  if (model_flags) {
    app->add_option("--scales", c.scales, "Adapter placement")->check(CLI::IsMember({"all", "deepest"}));
  }
}

void add_chain(CLI::App* app, Common& c) {
  app->add_option("--backend", c.backend, "Backend descriptor (JSON)");
  app->add_option("--templates", c.templates, "Prompt template file");
  app->add_option("--mode", c.mode, "Steps 2-3 prompting")->check(CLI::IsMember({"merged", "separate"}));
}

void add_train(CLI::App* app, TrainFlags& t) {
  app->add_option("--iterations", t.iterations, "Optimizer steps");
  app->add_option("--batch-size", t.batch_size, "Samples per step");
  app->add_option("--lr", t.lr, "Learning rate");
  app->add_option("--weight-decay", t.weight_decay, "Decoupled weight decay");
  app->add_option("--checkpoint-every", t.checkpoint_every, "Checkpoint period (0: final only)");
  app->add_flag("--freeze-projection", t.freeze_projection, "Keep the projection MLP frozen");
  app->add_option("--input", t.input, "Prompt input")->check(CLI::IsMember({"reason", "target", "full"}));
  app->add_option("--image-size", t.image_size, "Model input size");
  app->add_option("--patch", t.patch, "Patch size");
  app->add_option("--d-vis", t.d_vis, "Visual width");
  app->add_option("--d-hidden", t.d_hidden, "Hidden width");
  app->add_option("--heads", t.heads, "Attention heads");
  app->add_option("--up-channels", t.up_channels, "Per-pixel decoder channels");
}

json common_json(const Common& c) {
  return {{"manifest", c.manifest}, {"checkpoint", c.checkpoint}, {"backend", c.backend},
          {"templates", c.templates}, {"cache", c.cache},         {"scales", c.scales},
          {"mode", c.mode},           {"out", c.out}};
}

json train_json(const TrainFlags& t) {
  return {{"iterations", t.iterations}, {"batch_size", t.batch_size}, {"lr", t.lr},
          {"weight_decay", t.weight_decay}, {"checkpoint_every", t.checkpoint_every},
          {"freeze_projection", t.freeze_projection}, {"input", t.input}, {"resume", t.resume}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App cli{"Attribute-prompted reasoning segmentation"};
  cli.require_subcommand(1);

  Common c;
  TrainFlags t;
  data::SynthConfig synth;
  bool demo = false;
  std::string image, query, eval_manifest, suite = "prompt-steps";
  int concurrency = 4;
  int eval_count = 0;

  auto* make_synth = cli.add_subcommand("make-synth", "Write a synthetic attribute benchmark");
  add_common(make_synth, c, false);
  make_synth->add_option("--count", synth.count, "Number of samples");
  make_synth->add_option("--image-size", synth.image_size, "Image side in pixels");
  make_synth->add_option("--colors", synth.colors, "Colour vocabulary");
  make_synth->add_option("--shapes", synth.shapes, "Shape vocabulary");
  make_synth->add_option("--referring-fraction", synth.referring_fraction, "Share of referring samples");
  make_synth->add_option("--embedding-width", synth.embedding_width, "Mock embedding width");
  make_synth->add_option("--prefix", synth.prefix, "Sample id prefix");
  make_synth->add_option("--eval-count", eval_count, "Also write a disjoint eval set of this size");
  make_synth->add_flag("--demo", demo, "Write the fire-pit demo bundle instead");

  auto* cache_cmd = cli.add_subcommand("cache-traces", "Run the prompting chain and cache embeddings");
  add_common(cache_cmd, c, false);
  add_chain(cache_cmd, c);
  cache_cmd->add_option("--manifest", c.manifest, "Sample manifest")->required();
  cache_cmd->add_option("--concurrency", concurrency, "Concurrent backend requests");

  auto* train_cmd = cli.add_subcommand("train", "Train adapters, decoder and projection");
  add_common(train_cmd, c, true);
  add_chain(train_cmd, c);
  add_train(train_cmd, t);
  train_cmd->add_option("--manifest", c.manifest, "Training manifest")->required();
  train_cmd->add_option("--cache", c.cache, "Trace cache directory");
  train_cmd->add_option("--resume", t.resume, "Resume from a training checkpoint");

  auto* eval_cmd = cli.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(eval_cmd, c, false);
  add_chain(eval_cmd, c);
  eval_cmd->add_option("--manifest", c.manifest, "Evaluation manifest")->required();
  eval_cmd->add_option("--checkpoint", c.checkpoint, "Model checkpoint")->required();
  eval_cmd->add_option("--cache", c.cache, "Trace cache directory");

  auto* infer_cmd = cli.add_subcommand("infer", "Segment one image from a query");
  add_common(infer_cmd, c, false);
  add_chain(infer_cmd, c);
  infer_cmd->add_option("--image", image, "Input image (binary PPM)")->required();
  infer_cmd->add_option("--query", query, "User query")->required();
  infer_cmd->add_option("--checkpoint", c.checkpoint, "Model checkpoint")->required();

  auto* ablate_cmd = cli.add_subcommand("ablate", "Train and compare ablation arms");
  add_common(ablate_cmd, c, false);
  add_chain(ablate_cmd, c);
  add_train(ablate_cmd, t);
  ablate_cmd->add_option("--suite", suite, "Ablation suite")->check(CLI::IsMember({"prompt-steps", "scales"}));
  ablate_cmd->add_option("--manifest", c.manifest, "Training manifest")->required();
  ablate_cmd->add_option("--eval-manifest", eval_manifest, "Evaluation manifest")->required();

  try {
    cli.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = cli.exit(e);
    return rc == 0 ? 0 : kUsage;
  }

  try {
    if (make_synth->parsed()) {
      synth.seed = c.seed;
      json cfg = {{"count", synth.count}, {"image_size", synth.image_size}, {"colors", synth.colors},
                  {"shapes", synth.shapes}, {"referring_fraction", synth.referring_fraction},
                  {"embedding_width", synth.embedding_width}, {"demo", demo}, {"eval_count", eval_count}};
      app::write_run_manifest(c.out, "make-synth", cfg, c.seed, {});
      if (demo) {
        const auto b = data::make_demo_bundle(c.out, synth.embedding_width);
        std::cout << "demo image " << b.image_path << "\nbackend " << b.backend_path << "\nquery " << b.query << "\n";
      } else if (eval_count > 0) {
        const auto s = data::make_synthetic_split(synth, eval_count, c.out);
        std::cout << "train " << s.train_manifest << "\neval " << s.eval_manifest << "\nbackend " << s.backend_path
                  << "\n";
      } else {
        const auto s = data::make_synthetic(synth, c.out);
        std::cout << s.samples << " samples\nmanifest " << s.manifest_path << "\nbackend " << s.backend_path << "\n";
      }
      return 0;
    }

    if (cache_cmd->parsed()) {
      require_file(c.manifest, "manifest");
      require_file(c.backend, "backend");
      const auto manifest = data::Manifest::load(c.manifest);
      app::write_run_manifest(c.out, "cache-traces", common_json(c), c.seed, {c.manifest, c.backend, c.templates});
      app::CacheOptions opts;
      opts.chain = chain_config(c);
      opts.concurrency = concurrency;
      opts.seed = c.seed;
      const auto backend = open_backend(c.backend);
      const auto rep = app::cache_traces(manifest, *backend, c.out, opts);
      std::cout << "complete " << rep.complete << " written " << rep.written << " skipped " << rep.skipped
                << " backend_calls " << rep.backend_calls << " failures " << rep.failures.size() << "\n"
                << "digest " << app::cache_digest(c.out) << "\n";
      for (const auto& [id, msg] : rep.failures) std::cerr << "failed " << id << ": " << msg << "\n";
      return rep.failures.empty() ? 0 : kChainFailure;
    }

    if (train_cmd->parsed()) {
      require_file(c.manifest, "manifest");
      if (!t.resume.empty()) require_file(t.resume, "resume");
      const auto manifest = data::Manifest::load(c.manifest);
      app::write_run_manifest(c.out, "train", {{"common", common_json(c)}, {"train", train_json(t)}}, c.seed,
                              {c.manifest, c.backend, c.templates, t.resume});
      const std::string cache = ensure_cache(c, manifest, c.out);
      const auto input = app::parse_prompt_input(t.input);
      seg::SegModel<double> model(model_config(t, c, cached_width(cache, manifest)));
      const auto set = app::encode_set(manifest, cache, model, c.threads);
      train::FitOptions fo;
      fo.out_dir = c.out;
      fo.resume_from = t.resume;
      fo.extra_meta = {{"prompt_input", t.input}};
      const auto tc = train_config(t, c);
      const auto res = train::fit(tc, model, app::to_dataset(set, input, model.config().d_llm), fo);
      const auto ev = app::evaluate(model, set, input, c.threads);
      std::cout << "iterations " << res.last_iteration << " final_loss "
                << (res.losses.empty() ? 0.0 : res.losses.back().total) << " train_gIoU " << ev.giou
                << "\ncheckpoint " << res.checkpoint_path << "\n";
      return 0;
    }

    if (eval_cmd->parsed()) {
      require_file(c.manifest, "manifest");
      require_file(c.checkpoint, "checkpoint");
      const auto ck = seg::Checkpoint::load(c.checkpoint);
      const auto model = seg::model_from_checkpoint<double>(ck);
      const auto manifest = data::Manifest::load(c.manifest);
      app::write_run_manifest(c.out, "eval", common_json(c), c.seed, {c.manifest, c.checkpoint, c.backend});
      const std::string cache = ensure_cache(c, manifest, c.out);
      const auto input = app::parse_prompt_input(ck.meta.value("prompt_input", std::string("full")));
      const auto set = app::encode_set(manifest, cache, model, c.threads);
      const auto rep = app::evaluate(model, set, input, c.threads);
      write_file_atomic((fs::path(c.out) / "report.tsv").string(), rep.to_tsv());
      std::cout << "gIoU " << rep.giou << " cIoU " << rep.ciou << "\n";
      return 0;
    }

    if (infer_cmd->parsed()) {
      // Validate every input before producing any output.
      require_file(c.checkpoint, "checkpoint");
      require_file(image, "image");
      require_file(c.backend, "backend");
      const auto ck = seg::Checkpoint::load(c.checkpoint);
      const auto model = seg::model_from_checkpoint<double>(ck);
      const auto input = app::parse_prompt_input(ck.meta.value("prompt_input", std::string("full")));
      const auto backend = open_backend(c.backend);
      const auto chain = chain_config(c);
      const std::string bytes = read_file(image);
      app::write_run_manifest(c.out, "infer", {{"common", common_json(c)}, {"query", query}, {"image", image}},
                              c.seed, {image, c.checkpoint, c.backend, c.templates});
      const std::string trace_path = (fs::path(c.out) / "trace.jsonl").string();
      app::InferResult res;
      try {
        res = app::infer(model, input, bytes, query, *backend, chain);
      } catch (const ChainError& e) {
        write_file_atomic(trace_path, e.partial_trace().to_json_line() + "\n");
        throw;
      }
      write_file_atomic(trace_path, res.trace.to_json_line() + "\n");
      data::write_pgm_mask((fs::path(c.out) / "mask.pgm").string(), res.mask);
      data::write_ppm((fs::path(c.out) / "overlay.ppm").string(), data::overlay(data::decode_ppm(bytes), res.mask));
      std::cout << "target " << res.trace.target << "\nattributes " << res.trace.attributes << "\nmask "
                << (fs::path(c.out) / "mask.pgm").string() << "\n";
      return 0;
    }

    if (ablate_cmd->parsed()) {
      require_file(c.manifest, "manifest");
      require_file(eval_manifest, "eval-manifest");
      require_file(c.backend, "backend");
      app::write_run_manifest(c.out, "ablate",
                              {{"common", common_json(c)}, {"train", train_json(t)}, {"suite", suite},
                               {"eval_manifest", eval_manifest}},
                              c.seed, {c.manifest, eval_manifest, c.backend, c.templates});
      const auto train_m = data::Manifest::load(c.manifest);
      const auto eval_m = data::Manifest::load(eval_manifest);
      app::AblationConfig ac;
      ac.suite = app::parse_ablation_suite(suite);
      ac.train_manifest = c.manifest;
      ac.eval_manifest = eval_manifest;
      ac.train_cache = ensure_cache(c, train_m, (fs::path(c.out) / "train").string());
      ac.eval_cache = ensure_cache(c, eval_m, (fs::path(c.out) / "eval").string());
      ac.model = model_config(t, c, cached_width(ac.train_cache, train_m));
      ac.train = train_config(t, c);
      ac.out_dir = c.out;
      ac.threads = c.threads;
      const auto rep = app::run_ablation(ac);
      write_file_atomic((fs::path(c.out) / "ablation.json").string(), rep.to_json().dump(2) + "\n");
      for (const auto& a : rep.arms) std::cout << a.name << "\tgIoU " << a.giou << "\tcIoU " << a.ciou << "\n";
      return 0;
    }
  } catch (const CLI::ValidationError& e) {
    std::cerr << "usage: " << e.what() << "\n";
    return kUsage;
  } catch (const Error& e) {
    std::cerr << "error [" << e.kind() << "]: " << e.what() << "\n";
    const std::string& k = e.kind();
    const bool chain = k == "chain" || k == "backend" || k == "script-miss" || k == "parse" || k == "render";
    return chain ? kChainFailure : kModelFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kModelFailure;
  }
  return kUsage;
}
