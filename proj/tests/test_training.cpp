#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <fstream>
#include <map>

#include "llavaseg/metrics.hpp"
#include "llavaseg/segcore/checkpoint.hpp"
#include "llavaseg/training.hpp"
#include "support.hpp"

using namespace llavaseg;
using namespace llavaseg::train;
using testsupport::random_matrix;

namespace {

std::map<std::string, Mat<double>> snapshot(const seg::SegModel<double>& m) {
  std::map<std::string, Mat<double>> out;
  m.for_each_parameter([&](const std::string& n, const Mat<double>& p) { out[n] = p; });
  return out;
}

Mat<double> constant(int r, int c, double v) { return Mat<double>::Constant(r, c, v); }

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("BCE at zero logits is ln 2 and matches a per-pixel loop") {
  const Mat<double> zeros = constant(4, 4, 0.0);
  Mat<double> t = constant(4, 4, 0.0);
  t.topRows(2).setOnes();
  CHECK(bce_loss(zeros, t) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  const Mat<double> x = random_matrix(5, 7, 3, 4.0);
  Mat<double> y = (random_matrix(5, 7, 4).array() > 0.0).cast<double>();
  double ref = 0.0;
  for (int i = 0; i < x.size(); ++i) {
    const double p = sigmoid(x.data()[i]);
    ref -= y.data()[i] * std::log(p) + (1.0 - y.data()[i]) * std::log(1.0 - p);
  }
  ref /= static_cast<double>(x.size());
  Mat<double> g;
  CHECK(bce_loss(x, y, &g) == doctest::Approx(ref).epsilon(1e-10));
  for (int i = 0; i < x.size(); ++i) CHECK(g.data()[i] == doctest::Approx((sigmoid(x.data()[i]) - y.data()[i]) / 35.0));
  // Large logits stay finite in logit form.
  Mat<double> big = constant(2, 2, 800.0);
  CHECK(std::isfinite(bce_loss(big, constant(2, 2, 0.0))));
}

TEST_CASE("DICE values and gradient") {
  const Mat<double> t = Mat<double>::Ones(3, 3);
  // Confident and right: loss near 0. Confident and wrong: near 1 - 1/10.
  CHECK(dice_loss(constant(3, 3, 40.0), t, 1.0) == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(dice_loss(constant(3, 3, -40.0), t, 1.0) == doctest::Approx(1.0 - 1.0 / 10.0).epsilon(1e-9));
  // Both empty: smoothing makes the loss 0.
  CHECK(dice_loss(constant(3, 3, -40.0), constant(3, 3, 0.0), 1.0) ==
        doctest::Approx(0.0).epsilon(1e-9));

  const Mat<double> x = random_matrix(4, 4, 9);
  Mat<double> y = (random_matrix(4, 4, 10).array() > 0.0).cast<double>();
  Mat<double> g;
  dice_loss(x, y, 1.0, &g);
  const double h = 1e-6;
  for (int i = 0; i < x.size(); ++i) {
    Mat<double> xp = x, xm = x;
    xp.data()[i] += h;
    xm.data()[i] -= h;
    const double fd = (dice_loss(xp, y, 1.0) - dice_loss(xm, y, 1.0)) / (2 * h);
    CHECK(g.data()[i] == doctest::Approx(fd).epsilon(1e-6));
  }
  CHECK_THROWS_AS(dice_loss(x, constant(3, 4, 0.0), 1.0), ShapeError);
}

TEST_CASE("combined loss weights BCE by 1 and DICE by 0.5") {
  const TrainConfig cfg;
  CHECK(cfg.lambda_bce == 1.0);
  CHECK(cfg.lambda_dice == 0.5);
  const Mat<double> x = random_matrix(6, 6, 1);
  const Mat<double> y = (random_matrix(6, 6, 2).array() > 0.0).cast<double>();
  const LossRecord r = compute_loss(x, y, cfg);
  CHECK(r.total == doctest::Approx(bce_loss(x, y) + 0.5 * dice_loss(x, y, 1.0)).epsilon(1e-14));
  CHECK(r.bce == doctest::Approx(bce_loss(x, y)));
  CHECK(r.dice == doctest::Approx(dice_loss(x, y, 1.0)));
}

TEST_CASE("freeze policy") {
  seg::SegModel<double> m(testsupport::toy_config());
  const auto with = freeze_policy(m, true);
  const auto without = freeze_policy(m, false);
  for (const auto& n : with) CHECK_FALSE(n.starts_with("encoder."));
  CHECK(std::any_of(with.begin(), with.end(), [](const std::string& n) { return n.starts_with("projection."); }));
  CHECK(std::none_of(without.begin(), without.end(), [](const std::string& n) { return n.starts_with("projection."); }));
  CHECK(std::any_of(with.begin(), with.end(), [](const std::string& n) { return n.starts_with("adapters."); }));
  CHECK(std::any_of(with.begin(), with.end(), [](const std::string& n) { return n.starts_with("decoder."); }));
  auto bad = with;
  bad.insert(m.parameter_names().front());
  REQUIRE(m.parameter_names().front().starts_with("encoder."));
  CHECK_THROWS_AS(check_trainable(bad), PolicyViolation);
}

TEST_CASE("AdamW follows the closed-form recurrence for five steps") {
  TrainConfig cfg;
  cfg.learning_rate = 0.01;
  cfg.weight_decay = 0.001;
  const std::vector<double> grads{0.5, -1.0, 2.0, 0.1, -0.3};
  AdamW<double> opt;
  Mat<double> p = constant(1, 1, 1.5);
  double theta = 1.5, m = 0.0, v = 0.0;
  for (int t = 1; t <= 5; ++t) {
    const double g = grads[t - 1];
    opt.begin_step();
    opt.update("w", p, constant(1, 1, g), cfg);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1.0 - std::pow(0.9, t)), vh = v / (1.0 - std::pow(0.999, t));
    theta = theta - 0.01 * mh / (std::sqrt(vh) + 1e-8) - 0.001 * theta;
    CHECK(p(0, 0) == doctest::Approx(theta).epsilon(1e-12));
  }
}

TEST_CASE("zero learning rate and decay leave the model bit-identical") {
  seg::SegModel<double> m(testsupport::toy_config());
  testsupport::randomize_head(m, 4);
  const auto before = snapshot(m);
  auto samples = testsupport::toy_samples(m, 2, 1);
  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.weight_decay = 0.0;
  cfg.threads = 1;
  AdamW<double> opt;
  std::vector<const TrainSample<double>*> batch{&samples[0], &samples[1]};
  train_step(m, batch, opt, freeze_policy(m), cfg);
  const auto after = snapshot(m);
  for (const auto& [n, p] : before) CHECK(after.at(n) == p);
}

TEST_CASE("batch gradient does not depend on the thread count") {
  seg::SegModel<double> m(testsupport::toy_config());
  testsupport::randomize_head(m, 2);
  auto samples = testsupport::toy_samples(m, 4, 3);
  std::vector<const TrainSample<double>*> batch;
  for (const auto& s : samples) batch.push_back(&s);
  TrainConfig one, four;
  one.threads = 1;
  four.threads = 4;
  seg::ModelHead<double> g1, g4;
  const auto l1 = batch_gradient(m, batch, one, g1);
  const auto l4 = batch_gradient(m, batch, four, g4);
  CHECK(l1.total == l4.total);
  std::vector<Mat<double>> a, b;
  seg::ModelHead<double>::visit(g1, "", [&](const std::string&, const Mat<double>& x) { a.push_back(x); });
  seg::ModelHead<double>::visit(g4, "", [&](const std::string&, const Mat<double>& x) { b.push_back(x); });
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("non-finite losses raise a divergence error naming the sample") {
  seg::SegModel<double> m(testsupport::toy_config());
  auto samples = testsupport::toy_samples(m, 2, 5);
  samples[1].target(0, 0) = std::numeric_limits<double>::quiet_NaN();
  const auto before = snapshot(m);
  AdamW<double> opt;
  TrainConfig cfg;
  std::vector<const TrainSample<double>*> batch{&samples[0], &samples[1]};
  try {
    train_step(m, batch, opt, freeze_policy(m), cfg);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.batch_ids() == std::vector<std::string>{"toy-1"});
  }
  CHECK(opt.step == 0);
  for (const auto& [n, p] : snapshot(m)) CHECK(p == before.at(n));
}

TEST_CASE("overfitting one toy sample reaches IoU above 0.99 and leaves the encoder untouched") {
  seg::SegModel<double> m(testsupport::toy_config());
  const auto before = snapshot(m);
  Dataset data;
  data.categories = {testsupport::toy_samples(m, 1, 7)};
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 1;
  cfg.total_iterations = 1000;
  cfg.threads = 1;
  FitOptions opts;
  opts.out_dir = testsupport::scratch_dir("overfit");
  const FitResult r = fit(cfg, m, data, opts);
  CHECK(r.last_iteration == 1000);
  const auto& s = data.categories[0][0];
  const Mat<double> logits = m.forward_encoded(*s.pyramid, m.project_embeddings(s.embeddings));
  data::BinaryMask pred = (logits.array() > 0.0).cast<std::uint8_t>();
  data::BinaryMask gt = s.target.cast<std::uint8_t>();
  CHECK(metrics::iou(pred, gt) > 0.99);
  const auto after = snapshot(m);
  for (const auto& [n, p] : before) {
    if (n.starts_with("encoder.")) CHECK(after.at(n) == p);
  }
}

TEST_CASE("resume continues the identical loss sequence") {
  const auto cfg_model = testsupport::toy_config(11);
  seg::SegModel<double> base(cfg_model);
  Dataset data;
  data.categories = {testsupport::toy_samples(base, 3, 1), testsupport::toy_samples(base, 2, 2)};
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 2;
  cfg.total_iterations = 12;
  cfg.seed = 99;

  seg::SegModel<double> full = base;
  FitOptions o1;
  o1.out_dir = testsupport::scratch_dir("resume-full");
  const FitResult straight = fit(cfg, full, data, o1);

  seg::SegModel<double> part = base;
  FitOptions o2;
  o2.out_dir = testsupport::scratch_dir("resume-part");
  o2.stop_after = 5;
  const FitResult first = fit(cfg, part, data, o2);
  CHECK(first.last_iteration == 5);

  seg::SegModel<double> resumed(cfg_model);
  FitOptions o3;
  o3.out_dir = o2.out_dir;
  o3.resume_from = first.checkpoint_path;
  const FitResult second = fit(cfg, resumed, data, o3);
  REQUIRE(second.losses.size() == 7);
  for (std::size_t i = 0; i < 7; ++i) CHECK(second.losses[i].total == straight.losses[i + 5].total);
  for (const auto& [n, p] : snapshot(full)) CHECK(snapshot(resumed).at(n) == p);

  // The log of the interrupted run, once resumed, equals the straight run's apart from wall time.
  auto strip = [](const std::string& path) {
    std::ifstream in(path);
    std::vector<std::string> out;
    for (std::string l; std::getline(in, l);) out.push_back(l.substr(0, l.find("\"wall_ms\"")));
    return out;
  };
  CHECK(strip(straight.loss_log_path) == strip(second.loss_log_path));
}

TEST_CASE("zero iterations save the initialization") {
  seg::SegModel<double> m(testsupport::toy_config());
  const auto before = snapshot(m);
  Dataset data;
  data.categories = {testsupport::toy_samples(m, 1, 3)};
  TrainConfig cfg;
  cfg.total_iterations = 0;
  FitOptions o;
  o.out_dir = testsupport::scratch_dir("zero");
  const FitResult r = fit(cfg, m, data, o);
  CHECK(r.losses.empty());
  const auto loaded = seg::model_from_checkpoint<double>(seg::Checkpoint::load(r.checkpoint_path));
  for (const auto& [n, p] : snapshot(loaded)) CHECK(p == before.at(n));
}

TEST_CASE("config validation") {
  TrainConfig c;
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.beta1 = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.learning_rate = 2e-4;
  CHECK(TrainConfig::from_json(c.to_json()).learning_rate == 2e-4);
}
