#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "llavaseg/hash.hpp"
#include "llavaseg/pipeline.hpp"
#include "support.hpp"

using namespace llavaseg;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string(LLAVASEG_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

seg::ModelConfig small_model(int d_llm) {
  seg::ModelConfig c;
  c.image_size = 64;
  c.patch = 8;
  c.d_llm = d_llm;
  c.d_vis = 16;
  c.d_hidden = 32;
  c.heads = 2;
  c.up_channels = 4;
  c.seed = 5;
  return c;
}

std::string save_checkpoint(const seg::SegModel<double>& m, const std::string& path) {
  seg::Checkpoint ck = seg::make_checkpoint(m, train::freeze_policy(m));
  ck.meta["prompt_input"] = "full";
  ck.save(path);
  return path;
}

std::string slurp(const std::string& path) { return read_file(path); }

}  // namespace

TEST_CASE("trace caching is idempotent and reproducible") {
  const auto dir = testsupport::scratch_dir("cache");
  data::SynthConfig sc;
  sc.count = 8;
  sc.seed = 3;
  const auto s = data::make_synthetic(sc, dir + "/synth");
  const auto manifest = data::Manifest::load(s.manifest_path);
  const auto backend = make_backend(BackendDescriptor::load(s.backend_path));

  app::CacheOptions opts;
  opts.seed = 4;
  const auto first = app::cache_traces(manifest, *backend, dir + "/c1", opts);
  CHECK(first.failures.empty());
  CHECK(first.written == 8);
  CHECK(first.complete == 8);
  const std::string digest = app::cache_digest(dir + "/c1");

  const auto again = app::cache_traces(manifest, *backend, dir + "/c1", opts);
  CHECK(again.written == 0);
  CHECK(again.skipped == 8);
  CHECK(again.backend_calls == 0);
  CHECK(app::cache_digest(dir + "/c1") == digest);

  opts.concurrency = 1;
  app::cache_traces(manifest, *backend, dir + "/c2", opts);
  CHECK(app::cache_digest(dir + "/c2") == digest);

  const auto cached = app::load_cached(dir + "/c1", manifest.records[0].sample_id);
  CHECK(cached.sample_id == manifest.records[0].sample_id);
  CHECK(cached.target.rows() > 0);
  CHECK(cached.prompt(app::PromptInput::full).rows() == cached.target.rows() + cached.attributes.rows());
  const auto back = app::CachedSample::from_json(cached.to_json());
  CHECK(back.attributes == cached.attributes);
}

TEST_CASE("cache failures are collected and the rest still completes") {
  const auto dir = testsupport::scratch_dir("cache-fail");
  data::SynthConfig sc;
  sc.count = 4;
  const auto s = data::make_synthetic(sc, dir + "/synth");
  auto manifest = data::Manifest::load(s.manifest_path);
  // A record whose image the script has never seen.
  data::SampleRecord stray = manifest.records[0];
  stray.sample_id = "stray";
  stray.image_path = dir + "/stray.ppm";
  stray.image_id = "stray";
  data::RgbImage img{8, 8, std::vector<std::uint8_t>(8 * 8 * 3, 7)};
  data::write_ppm(stray.image_path, img);
  manifest.records.push_back(stray);
  const auto backend = make_backend(BackendDescriptor::load(s.backend_path));
  const auto rep = app::cache_traces(manifest, *backend, dir + "/c", {});
  REQUIRE(rep.failures.size() == 1);
  CHECK(rep.failures[0].first == "stray");
  CHECK(rep.complete == 4);
  CHECK(fs::exists(dir + "/c/failures.json"));
}

TEST_CASE("evaluation report has fixed columns and an aggregate block") {
  const auto dir = testsupport::scratch_dir("eval");
  data::SynthConfig sc;
  sc.count = 6;
  const auto s = data::make_synthetic(sc, dir + "/synth");
  const auto manifest = data::Manifest::load(s.manifest_path);
  const auto backend = make_backend(BackendDescriptor::load(s.backend_path));
  app::cache_traces(manifest, *backend, dir + "/c", {});
  seg::SegModel<double> model(small_model(64));
  const auto set = app::encode_set(manifest, dir + "/c", model, 1);
  const auto rep = app::evaluate(model, set, app::PromptInput::full, 1);
  CHECK(rep.rows.size() == 6);
  const std::string tsv = rep.to_tsv();
  std::istringstream in(tsv);
  std::string line;
  std::getline(in, line);
  CHECK(line == "sample_id\tiou\trouge_l\tcider");
  CHECK(tsv.find("# aggregate") != std::string::npos);
  CHECK(tsv.find("gIoU\t") != std::string::npos);
  CHECK(tsv.find("cIoU\t") != std::string::npos);
  CHECK(rep.has_text);
  CHECK(rep.giou >= 0.0);
  CHECK(rep.giou <= 1.0);
}

TEST_CASE("the demo query resolves to the fire and writes a mask and overlay") {
  const auto dir = testsupport::scratch_dir("demo");
  const auto b = data::make_demo_bundle(dir + "/demo");
  seg::SegModel<double> model(small_model(64));
  const auto ckpt = save_checkpoint(model, dir + "/model.ckpt");

  const std::string args = "infer --image " + b.image_path + " --query " + b.query + " --checkpoint " + ckpt +
                           " --backend " + b.backend_path;
  REQUIRE(run_cli(args + " --out " + dir + "/o1") == 0);
  const auto trace = CoTTrace::from_json_line(slurp(dir + "/o1/trace.jsonl"));
  CHECK(trace.target == "the fire");
  CHECK(trace.attributes.find("orange") != std::string::npos);
  const auto mask = data::read_pgm_mask(dir + "/o1/mask.pgm");
  CHECK(mask.rows() == 64);
  CHECK(data::read_ppm(dir + "/o1/overlay.ppm").width == 64);
  CHECK(fs::exists(dir + "/o1/run_manifest.json"));

  // Same inputs and seed give byte-identical outputs.
  REQUIRE(run_cli(args + " --out " + dir + "/o2") == 0);
  CHECK(slurp(dir + "/o1/mask.pgm") == slurp(dir + "/o2/mask.pgm"));
  CHECK(slurp(dir + "/o1/overlay.ppm") == slurp(dir + "/o2/overlay.ppm"));

  // An unscripted query is a chain failure (exit 2) that still leaves the partial trace.
  CHECK(run_cli("infer --image " + b.image_path + " --query cold --checkpoint " + ckpt + " --backend " +
                b.backend_path + " --out " + dir + "/o3") == 2);
  CHECK(fs::exists(dir + "/o3/trace.jsonl"));
}

TEST_CASE("CLI exit codes and no outputs on bad inputs") {
  const auto dir = testsupport::scratch_dir("cli");
  const auto b = data::make_demo_bundle(dir + "/demo");
  CHECK(run_cli("infer --image " + b.image_path + " --query hot --checkpoint " + dir + "/missing.ckpt --backend " +
                b.backend_path + " --out " + dir + "/o") == 3);
  CHECK_FALSE(fs::exists(dir + "/o"));
  CHECK(run_cli("infer --query hot --out " + dir + "/o") == 1);
  CHECK_FALSE(fs::exists(dir + "/o"));
  CHECK(run_cli("frobnicate") == 1);
}

TEST_CASE("run manifest records inputs by content hash") {
  const auto dir = testsupport::scratch_dir("runmanifest");
  std::ofstream(dir + "/in.txt") << "hello\n";
  app::write_run_manifest(dir + "/out", "test", {{"k", 1}}, 42, {dir + "/in.txt", ""});
  const auto j = nlohmann::json::parse(slurp(dir + "/out/run_manifest.json"));
  CHECK(j.at("command") == "test");
  CHECK(j.at("seed") == 42);
  CHECK(j.at("config").at("k") == 1);
  // git hash-object of "hello\n".
  CHECK(j.at("inputs").at(dir + "/in.txt") == "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST_CASE("ablation harness trains each arm and reports against reference values") {
  const auto dir = testsupport::scratch_dir("ablate");
  data::SynthConfig sc;
  sc.count = 6;
  const auto split = data::make_synthetic_split(sc, 3, dir + "/synth");
  const auto backend = make_backend(BackendDescriptor::load(split.backend_path));
  app::cache_traces(data::Manifest::load(split.train_manifest), *backend, dir + "/tc", {});
  app::cache_traces(data::Manifest::load(split.eval_manifest), *backend, dir + "/ec", {});

  app::AblationConfig ac;
  ac.suite = app::AblationSuite::scales;
  ac.train_manifest = split.train_manifest;
  ac.eval_manifest = split.eval_manifest;
  ac.train_cache = dir + "/tc";
  ac.eval_cache = dir + "/ec";
  ac.model = small_model(64);
  ac.train.total_iterations = 2;
  ac.train.batch_size = 2;
  ac.out_dir = dir + "/out";
  const auto rep = app::run_ablation(ac);
  REQUIRE(rep.arms.size() == 2);
  CHECK(rep.arm("single-scale").scales == seg::ScaleSelection::deepest);
  CHECK(rep.arm("multi-scale").scales == seg::ScaleSelection::all);
  const auto j = rep.to_json();
  CHECK(j.at("suite") == "scales");
  CHECK(j.at("arms").size() == 2);
  CHECK(j.at("reference").at("arms").at("multi-scale").at("giou") == 59.1);
  CHECK(fs::exists(dir + "/out/single-scale/eval.tsv"));

  // Leakage between the splits is refused.
  ac.eval_manifest = split.train_manifest;
  ac.eval_cache = dir + "/tc";
  CHECK_THROWS_AS(app::run_ablation(ac), InvalidInput);
}
