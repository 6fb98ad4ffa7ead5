// Acceptance run: one PASS/FAIL line per criterion, each with its wall time
// checked against the budget. Exit status is the number of failed criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "llavaseg/metrics.hpp"
#include "llavaseg/pipeline.hpp"
#include "metric_oracles.hpp"
#include "support.hpp"

using namespace llavaseg;
using seg::Mat;
using testsupport::random_matrix;

namespace {

// Collects failed sub-checks; a criterion passes when the list is empty.
struct Checks {
  std::vector<std::string> failed;
  std::ostringstream notes;
  void expect(bool ok, const std::string& what) {
    if (!ok) failed.push_back(what);
  }
};

using Params = std::map<std::string, Mat<double>>;

Params snapshot(const seg::SegModel<double>& m) {
  Params out;
  m.for_each_parameter([&](const std::string& n, const Mat<double>& p) { out[n] = p; });
  return out;
}

bool encoder_unchanged(const Params& before, const Params& after) {
  for (const auto& [n, p] : before) {
    if (n.starts_with("encoder.") && !(after.at(n).array() == p.array()).all()) return false;
  }
  return true;
}

std::vector<std::string> stripped_log(const std::string& path) {
  std::ifstream in(path);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l.substr(0, l.find("\"wall_ms\"")));
  return out;
}

// ---- 1: metric oracles -----------------------------------------------------

void metric_oracles(Checks& c) {
  std::mt19937_64 rng(2024);
  int mismatches = 0;
  for (int t = 0; t < 1000; ++t) {
    const auto [a, b] = oracle::random_mask_pair(rng);
    const auto [inter, uni] = oracle::pixel_counts(a, b);
    const metrics::Overlap o = metrics::overlap(a, b);
    const double expect = uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    if (o.intersection != inter || o.union_ != uni || metrics::iou(a, b) != expect) ++mismatches;
  }
  c.expect(mismatches == 0, std::to_string(mismatches) + " of 1000 pairs disagree with pixel counting");

  const std::vector<metrics::Overlap> batch{{2, 6}, {1, 1}};
  c.expect(std::abs(metrics::giou(batch) - 2.0 / 3.0) < 1e-9, "worked batch gIoU");
  c.expect(std::abs(metrics::ciou(batch) - 3.0 / 7.0) < 1e-9, "worked batch cIoU");

  const double rouge = metrics::rouge_l("a c d", "a b c d").value;
  c.expect(std::abs(rouge - 0.8356) < 1e-4, "ROUGE-L worked case");

  const std::vector<std::string> same{"a red circle on the left", "the green square above it", "a small blue triangle"};
  std::vector<std::vector<std::string>> same_refs;
  for (const auto& h : same) same_refs.push_back({h});
  c.expect(std::abs(metrics::cider(same, same_refs).corpus - 10.0) < 1e-6, "CIDEr identical captions");

  const std::vector<std::string> hyp{"the fire is bright orange", "a grey stone ring around the fire",
                                     "two dogs play on grass"};
  const std::vector<std::vector<std::string>> refs{
      {"the fire is orange and bright", "bright orange fire in the pit"},
      {"grey stones ring the fire", "a ring of grey stones"},
      {"two dogs playing on the grass", "dogs play in a field", "the dogs run on grass"}};
  const auto got = metrics::cider(hyp, refs);
  const auto expect = oracle::cider_brute_force(hyp, refs);
  double worst = 0.0;
  for (std::size_t i = 0; i < hyp.size(); ++i) worst = std::max(worst, std::abs(got.per_item[i] - expect[i]));
  c.expect(worst < 1e-6, "CIDEr toy corpus vs brute force");
  c.notes << "rouge_l=" << rouge << " cider_max_dev=" << worst;
}

// ---- 2: adapter identity at init ----------------------------------------------

void adapter_identity(Checks& c) {
  const seg::SegModel<double> model(seg::ModelConfig{});
  const auto& adapters = model.head().adapters;
  std::mt19937_64 rng(77);
  int not_identity = 0;
  double worst_row = 0.0;
  for (int t = 0; t < 100; ++t) {
    const auto& lam = adapters[static_cast<std::size_t>(t) % adapters.size()];
    const int side = 1 + static_cast<int>(rng() % 8);
    const int k = 1 + static_cast<int>(rng() % 6);
    const seg::FeatureMap<double> v{side, side, random_matrix(side * side, lam.width(), rng(), 3.0)};
    const seg::TextEmbedding<double> e{random_matrix(k, lam.width(), rng(), 3.0)};
    typename seg::LanguageAwareModule<double>::Cache cache;
    const auto out = lam.forward(v, e, &cache);
    if (!(out.tokens.array() == v.tokens.array()).all()) ++not_identity;
    for (const auto& p : cache.attn.probs) {
      worst_row = std::max(worst_row, (p.rowwise().sum().array() - 1.0).abs().maxCoeff());
    }
  }
  c.expect(not_identity == 0, std::to_string(not_identity) + " of 100 outputs differ from V");
  c.expect(worst_row <= 1e-6, "attention row sum off by " + std::to_string(worst_row));
  c.notes << "adapters=" << adapters.size() << " max_row_sum_dev=" << worst_row;
}

// ---- 3: gradient correctness --------------------------------------------------

void gradients(Checks& c) {
  const auto cfg = testsupport::toy_config();  // maps 8x8, 4x4, 2x2
  seg::SegModel<double> model(cfg);
  testsupport::randomize_head(model, 17);
  const auto pyramid = model.encode_image(testsupport::random_image(cfg.image_size, 4));
  const Mat<double> raw = random_matrix(3, cfg.d_llm, 5);  // k = 3
  const Mat<double> target =
      (random_matrix(cfg.image_size, cfg.image_size, 6).array() > 0.3).cast<double>().matrix();
  train::TrainConfig tc;
  c.expect(tc.lambda_bce == 1.0 && tc.lambda_dice == 0.5, "loss weights are not 1 / 0.5");

  auto loss_at = [&](const Mat<double>& e) {
    seg::ForwardCache<double> fc;
    return train::compute_loss(model.forward_train(pyramid, e, fc), target, tc).total;
  };
  seg::ForwardCache<double> cache;
  Mat<double> dlogits;
  train::compute_loss(model.forward_train(pyramid, raw, cache), target, tc, &dlogits);
  auto grad = model.zero_gradients();
  const Mat<double> draw = model.backward(cache, dlogits, grad);

  const double h = 1e-5;
  Mat<double> fd_raw(raw.rows(), raw.cols());
  for (Eigen::Index i = 0; i < raw.size(); ++i) {
    Mat<double> p = raw, m = raw;
    p.data()[i] += h;
    m.data()[i] -= h;
    fd_raw.data()[i] = (loss_at(p) - loss_at(m)) / (2 * h);
  }
  double worst = testsupport::relative_error(draw, fd_raw);
  std::string worst_name = "input embeddings";

  std::map<std::string, Mat<double>*> analytic;
  seg::ModelHead<double>::visit(grad, "", [&](const std::string& n, Mat<double>& m) { analytic[n] = &m; });
  int tensors = 0;
  bool saw[3] = {false, false, false};
  seg::ModelHead<double>::visit(model.head(), "", [&](const std::string& name, Mat<double>& param) {
    Mat<double> fd(param.rows(), param.cols());
    for (Eigen::Index i = 0; i < param.size(); ++i) {
      const double keep = param.data()[i];
      param.data()[i] = keep + h;
      const double lp = loss_at(raw);
      param.data()[i] = keep - h;
      const double lm = loss_at(raw);
      param.data()[i] = keep;
      fd.data()[i] = (lp - lm) / (2 * h);
    }
    ++tensors;
    saw[0] |= name.starts_with("projection.");
    saw[1] |= name.starts_with("adapters.");
    saw[2] |= name.starts_with("decoder.");
    if (name.ends_with(".k.bias")) {
      // Softmax ignores a shift shared by all keys: the exact gradient is zero.
      c.expect(analytic.at(name)->norm() < 1e-10 && fd.norm() < 1e-8, name + " key bias gradient not zero");
      return;
    }
    const double err = testsupport::relative_error(*analytic.at(name), fd);
    if (err > worst) {
      worst = err;
      worst_name = name;
    }
  });
  c.expect(worst <= 1e-4, "relative error " + std::to_string(worst) + " at " + worst_name);
  c.expect(saw[0] && saw[1] && saw[2], "projection, adapters and decoder not all covered");
  c.expect(static_cast<std::size_t>(tensors) == analytic.size(), "parameter/gradient sets differ");
  c.notes << "tensors=" << tensors << " max_rel_err=" << worst << " (" << worst_name << ")";
}

// ---- 4: overfit smoke test ----------------------------------------------------

void overfit(Checks& c, const std::string& root) {
  data::SynthConfig sc;
  sc.count = 10;
  sc.seed = 21;
  const auto synth = data::make_synthetic(sc, root + "/synth");
  const auto manifest = data::Manifest::load(synth.manifest_path);
  const auto backend = make_backend(BackendDescriptor::load(synth.backend_path));
  const auto cached = app::cache_traces(manifest, *backend, root + "/cache", {});
  c.expect(cached.failures.empty(), "trace caching failed");

  seg::ModelConfig mc;  // default sizes
  mc.d_llm = backend->embedding_width();
  seg::SegModel<double> model(mc);
  const Params before = snapshot(model);
  const auto set = app::encode_set(manifest, root + "/cache", model);
  const auto dataset = app::to_dataset(set, app::PromptInput::full, mc.d_llm);

  train::TrainConfig tc;
  tc.total_iterations = 500;
  tc.seed = 1;
  train::FitOptions fo;
  fo.out_dir = root + "/train";
  const auto fit = train::fit(tc, model, dataset, fo);
  const auto report = app::evaluate(model, set, app::PromptInput::full);
  c.expect(fit.last_iteration == 500, "did not run 500 iterations");
  c.expect(report.giou > 0.95, "train gIoU " + std::to_string(report.giou) + " <= 0.95");
  c.expect(encoder_unchanged(before, snapshot(model)), "encoder parameters changed");
  c.notes << "train_giou=" << report.giou << " final_loss=" << fit.losses.back().total;
}

// ---- 5: ablation directions --------------------------------------------------

// Required improvement of the richer arm over the poorer one, in gIoU (0-1 scale).
constexpr double kMargin = 0.01;

void ablation(Checks& c, const std::string& root) {
  data::SynthConfig sc;
  sc.count = 500;
  sc.seed = 1;
  const auto split = data::make_synthetic_split(sc, 100, root + "/synth");
  const auto backend = make_backend(BackendDescriptor::load(split.backend_path));
  const auto tr = app::cache_traces(data::Manifest::load(split.train_manifest), *backend, root + "/train-cache", {});
  const auto ev = app::cache_traces(data::Manifest::load(split.eval_manifest), *backend, root + "/eval-cache", {});
  c.expect(tr.failures.empty() && ev.failures.empty(), "trace caching failed");

  app::AblationConfig ac;
  ac.train_manifest = split.train_manifest;
  ac.eval_manifest = split.eval_manifest;
  ac.train_cache = root + "/train-cache";
  ac.eval_cache = root + "/eval-cache";
  ac.model.d_llm = backend->embedding_width();
  ac.train.total_iterations = 600;
  ac.train.seed = 1;

  ac.suite = app::AblationSuite::prompt_steps;
  ac.out_dir = root + "/prompt-steps";
  const auto steps = app::run_ablation(ac);
  ac.suite = app::AblationSuite::scales;
  ac.out_dir = root + "/scales";
  const auto scales = app::run_ablation(ac);

  // "Name-only" is checked both ways: the target-name arm and the step-1 arm.
  const double full = steps.arm("full-chain").giou, name = steps.arm("steps-1+2").giou;
  const double step1 = steps.arm("step1-only").giou;
  const double multi = scales.arm("multi-scale").giou, single = scales.arm("single-scale").giou;
  c.expect(full >= name + kMargin, "full-chain does not beat the target-name arm by the margin");
  c.expect(full >= step1 + kMargin, "full-chain does not beat the step-1 arm by the margin");
  c.expect(multi >= single + kMargin, "multi-scale does not beat single-scale by the margin");
  c.notes << "step1-only=" << step1 << " target-name=" << name << " full-chain=" << full << " (diff "
          << full - step1 << " / " << full - name << "); single-scale=" << single << " multi-scale=" << multi << " (diff "
          << multi - single << ")";
}

// ---- 6: determinism and resume ------------------------------------------------

void determinism(Checks& c, const std::string& root) {
  data::SynthConfig sc;
  sc.count = 12;
  sc.seed = 8;
  const auto synth = data::make_synthetic(sc, root + "/synth");
  const auto manifest = data::Manifest::load(synth.manifest_path);
  const auto backend = make_backend(BackendDescriptor::load(synth.backend_path));

  app::CacheOptions co;
  co.seed = 3;
  app::cache_traces(manifest, *backend, root + "/c1", co);
  const std::string digest = app::cache_digest(root + "/c1");
  const auto again = app::cache_traces(manifest, *backend, root + "/c1", co);
  c.expect(again.written == 0 && again.backend_calls == 0 && app::cache_digest(root + "/c1") == digest,
           "re-caching rewrote records");
  co.concurrency = 1;
  app::cache_traces(manifest, *backend, root + "/c2", co);
  c.expect(app::cache_digest(root + "/c2") == digest, "fresh cache differs");

  seg::ModelConfig mc;
  mc.d_llm = backend->embedding_width();
  const seg::SegModel<double> base(mc);
  const auto set = app::encode_set(manifest, root + "/c1", base);
  const auto dataset = app::to_dataset(set, app::PromptInput::full, mc.d_llm);
  train::TrainConfig tc;
  tc.total_iterations = 20;
  tc.seed = 5;

  auto run = [&](const std::string& dir, int stop_after, const std::string& resume, seg::SegModel<double>& m) {
    train::FitOptions fo;
    fo.out_dir = root + "/" + dir;
    fo.stop_after = stop_after;
    fo.resume_from = resume;
    return train::fit(tc, m, dataset, fo);
  };
  seg::SegModel<double> a = base, b = base, part = base, resumed(mc);
  const auto ra = run("a", -1, "", a);
  const auto rb = run("b", -1, "", b);
  c.expect(stripped_log(ra.loss_log_path) == stripped_log(rb.loss_log_path), "same seed, different loss logs");

  const auto first = run("part", 8, "", part);
  const auto second = run("part", -1, first.checkpoint_path, resumed);
  c.expect(second.losses.size() == 12, "resumed run did not finish the schedule");
  c.expect(stripped_log(second.loss_log_path) == stripped_log(ra.loss_log_path), "resumed loss log differs");
  c.expect(snapshot(resumed) == snapshot(a), "resumed parameters differ");
  c.notes << "log_lines=" << stripped_log(ra.loss_log_path).size() << " cache_digest=" << digest.substr(0, 12);
}

// ---- 7: data integrity --------------------------------------------------------

void data_integrity(Checks& c) {
  std::mt19937_64 rng(9);
  int bad = 0;
  for (int t = 0; t < 1000; ++t) {
    const data::BinaryMask m = oracle::random_mask_pair(rng).first;
    if (data::decode_mask(data::encode_mask(m)) != m) ++bad;
  }
  c.expect(bad == 0, std::to_string(bad) + " of 1000 masks fail to round-trip");

  std::vector<std::string> train, eval;
  for (int i = 0; i < 500; ++i) train.push_back("train-" + std::to_string(i));
  for (int i = 0; i < 100; ++i) eval.push_back("eval-" + std::to_string(i));
  c.expect(data::validate_split_ids(train, eval).clean(), "clean split flagged");
  eval.push_back(train[137]);
  const auto r = data::validate_split_ids(train, eval);
  c.expect(r.overlapping_image_ids == std::vector<std::string>{"train-137"}, "planted leak not reported");
}

struct Criterion {
  int number;
  std::string title;
  double budget_s;
  std::function<void(Checks&, const std::string&)> run;
};

}  // namespace

int main() {
  const auto scratch = std::filesystem::temp_directory_path() / ("llavaseg-acceptance-" + std::to_string(::getpid()));
  std::filesystem::remove_all(scratch);

  const std::vector<Criterion> criteria{
      {1, "metric oracles", 10, [](Checks& c, const std::string&) { metric_oracles(c); }},
      {2, "adapter identity at init", 5, [](Checks& c, const std::string&) { adapter_identity(c); }},
      {3, "gradient correctness", 60, [](Checks& c, const std::string&) { gradients(c); }},
      {4, "overfit smoke test", 600, overfit},
      {5, "ablation directions", 1800, ablation},
      {6, "determinism and resume", 300, determinism},
      {7, "data integrity", 10, [](Checks& c, const std::string&) { data_integrity(c); }},
  };

  int failures = 0;
  for (const auto& cr : criteria) {
    Checks checks;
    const auto dir = (scratch / std::to_string(cr.number)).string();
    std::filesystem::create_directories(dir);
    const auto t0 = std::chrono::steady_clock::now();
    try {
      cr.run(checks, dir);
    } catch (const std::exception& e) {
      checks.failed.push_back(std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs > cr.budget_s) checks.failed.push_back("over the " + std::to_string(static_cast<int>(cr.budget_s)) + " s budget");
    const bool ok = checks.failed.empty();
    failures += ok ? 0 : 1;
    std::printf("%s criterion %d: %s [%.1f s / %.0f s] %s\n", ok ? "PASS" : "FAIL", cr.number, cr.title.c_str(), secs,
                cr.budget_s, checks.notes.str().c_str());
    for (const auto& f : checks.failed) std::printf("    - %s\n", f.c_str());
    std::fflush(stdout);
  }
  std::filesystem::remove_all(scratch);
  return failures;
}
