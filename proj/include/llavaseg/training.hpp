#pragma once

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "llavaseg/datakit.hpp"
#include "llavaseg/segcore/checkpoint.hpp"
#include "llavaseg/segcore/model.hpp"

namespace llavaseg::train {

using seg::Mat;

struct TrainConfig {
  double learning_rate = 1e-4;
  double weight_decay = 1e-4;
  double lambda_bce = 1.0;
  double lambda_dice = 0.5;
  double dice_smooth = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int batch_size = 8;  // 160 at full scale
  int total_iterations = 500;
  int checkpoint_every = 0;  // 0: only the final checkpoint
  std::uint64_t seed = 0;
  bool train_projection = true;
  int threads = 0;  // 0: hardware concurrency

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// ---- losses ---------------------------------------------------------------

namespace detail {
template <typename Scalar>
void check_same_shape(const Mat<Scalar>& a, const Mat<Scalar>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("logit map " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " does not match target " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}
}  // namespace detail

/// Mean per-pixel BCE in logit form: max(x,0) - x*y + log(1 + exp(-|x|)).
template <typename Scalar>
Scalar bce_loss(const Mat<Scalar>& logits, const Mat<Scalar>& target, Mat<Scalar>* grad = nullptr) {
  detail::check_same_shape(logits, target);
  const auto x = logits.array();
  const auto y = target.array();
  const Scalar n = static_cast<Scalar>(logits.size());
  const Scalar loss = (x.max(Scalar(0)) - x * y + (Scalar(1) + (-x.abs()).exp()).log()).sum() / n;
  if (grad != nullptr) *grad = ((seg::sigmoid(logits).eval().array() - y) / n).matrix();
  return loss;
}

/// 1 - (2 Σ σ(x) y + s) / (Σ σ(x) + Σ y + s).
template <typename Scalar>
Scalar dice_loss(const Mat<Scalar>& logits, const Mat<Scalar>& target, Scalar smooth, Mat<Scalar>* grad = nullptr) {
  detail::check_same_shape(logits, target);
  const Mat<Scalar> p = seg::sigmoid(logits);
  const Scalar inter = (p.array() * target.array()).sum();
  const Scalar num = Scalar(2) * inter + smooth;
  const Scalar den = p.sum() + target.sum() + smooth;
  if (grad != nullptr) {
    // d/dp = -(2 y den - num) / den^2, then through the sigmoid.
    const auto dp = -(Scalar(2) * target.array() * den - num) / (den * den);
    *grad = (dp * p.array() * (Scalar(1) - p.array())).matrix();
  }
  return Scalar(1) - num / den;
}

struct LossRecord {
  double total = 0.0;
  double bce = 0.0;
  double dice = 0.0;
};

template <typename Scalar>
LossRecord compute_loss(const Mat<Scalar>& logits, const Mat<Scalar>& target, const TrainConfig& cfg,
                        Mat<Scalar>* grad = nullptr) {
  Mat<Scalar> gb, gd;
  const Scalar b = bce_loss(logits, target, grad != nullptr ? &gb : nullptr);
  const Scalar d = dice_loss(logits, target, static_cast<Scalar>(cfg.dice_smooth), grad != nullptr ? &gd : nullptr);
  if (grad != nullptr) {
    *grad = static_cast<Scalar>(cfg.lambda_bce) * gb + static_cast<Scalar>(cfg.lambda_dice) * gd;
  }
  const double bd = static_cast<double>(b), dd = static_cast<double>(d);
  return {cfg.lambda_bce * bd + cfg.lambda_dice * dd, bd, dd};
}

// ---- freeze policy --------------------------------------------------------

/// Throws PolicyViolation if any encoder parameter is marked trainable.
void check_trainable(const std::set<std::string>& trainable);

/// Trainable set: adapters, decoder, and (optionally) the projection MLP.
template <typename Scalar>
std::set<std::string> freeze_policy(const seg::SegModel<Scalar>& model, bool train_projection = true) {
  std::set<std::string> out;
  model.for_each_parameter([&](const std::string& name, const auto&) {
    const bool head = name.starts_with("adapters.") || name.starts_with("decoder.") ||
                      (train_projection && name.starts_with("projection."));
    if (head) out.insert(name);
  });
  check_trainable(out);
  return out;
}

// ---- optimizer ------------------------------------------------------------

/// Adam moments with weight decay decoupled from the gradient:
///   m = b1 m + (1-b1) g;  v = b2 v + (1-b2) g^2
///   θ ← θ - lr · m̂ / (sqrt(v̂) + eps) - wd · θ   (wd is not scaled by lr)
template <typename Scalar>
struct AdamW {
  struct Moments {
    Mat<Scalar> m, v;
  };
  std::map<std::string, Moments> state;
  long step = 0;

  void begin_step() { ++step; }

  void update(const std::string& name, Mat<Scalar>& param, const Mat<Scalar>& grad, const TrainConfig& cfg) {
    auto& s = state[name];
    if (s.m.size() == 0) {
      s.m = Mat<Scalar>::Zero(param.rows(), param.cols());
      s.v = Mat<Scalar>::Zero(param.rows(), param.cols());
    }
    const Scalar b1 = static_cast<Scalar>(cfg.beta1), b2 = static_cast<Scalar>(cfg.beta2);
    s.m = b1 * s.m + (Scalar(1) - b1) * grad;
    s.v = b2 * s.v + (Scalar(1) - b2) * grad.cwiseAbs2();
    const Scalar c1 = Scalar(1) - std::pow(b1, static_cast<Scalar>(step));
    const Scalar c2 = Scalar(1) - std::pow(b2, static_cast<Scalar>(step));
    const Scalar lr = static_cast<Scalar>(cfg.learning_rate), wd = static_cast<Scalar>(cfg.weight_decay);
    const Scalar eps = static_cast<Scalar>(cfg.eps);
    // Decay uses the pre-update value. With lr = 0 and wd = 0 `param` stays
    // bit-identical.
    const Mat<Scalar> decay = wd * param;
    if (lr != Scalar(0)) {
      param.array() -= lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + eps);
    }
    if (wd != Scalar(0)) param -= decay;
  }
};

// ---- one step -------------------------------------------------------------

template <typename Scalar>
struct TrainSample {
  std::string sample_id;
  std::shared_ptr<const seg::FeaturePyramid<Scalar>> pyramid;  // frozen encoder output
  Mat<Scalar> embeddings;                                      // raw k x d_llm
  Mat<Scalar> target;                                          // H x W in {0, 1}
};

namespace detail {

template <class Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  const std::size_t workers =
      std::min<std::size_t>(n, threads > 0 ? static_cast<std::size_t>(threads)
                                           : std::max(1u, std::thread::hardware_concurrency()));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

/// Mean loss and head gradient over a batch. Per-sample gradients are summed
/// in batch order, so the result does not depend on the thread count.
template <typename Scalar>
LossRecord batch_gradient(const seg::SegModel<Scalar>& model, const std::vector<const TrainSample<Scalar>*>& batch,
                          const TrainConfig& cfg, seg::ModelHead<Scalar>& grad, std::vector<LossRecord>* per_sample = nullptr) {
  if (batch.empty()) throw InvalidInput("empty batch");
  std::vector<seg::ModelHead<Scalar>> grads(batch.size());
  std::vector<LossRecord> losses(batch.size());
  detail::parallel_for(batch.size(), cfg.threads, [&](std::size_t i) {
    const auto& s = *batch[i];
    seg::ForwardCache<Scalar> cache;
    const Mat<Scalar> logits = model.forward_train(*s.pyramid, s.embeddings, cache);
    Mat<Scalar> dlogits;
    losses[i] = compute_loss(logits, s.target, cfg, &dlogits);
    grads[i] = model.zero_gradients();
    model.backward(cache, dlogits, grads[i]);
  });
  grad = model.zero_gradients();
  const Scalar inv = Scalar(1) / static_cast<Scalar>(batch.size());
  std::vector<Mat<Scalar>*> dst;
  seg::ModelHead<Scalar>::visit(grad, "", [&](const std::string&, Mat<Scalar>& m) { dst.push_back(&m); });
  LossRecord mean;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    std::size_t k = 0;
    seg::ModelHead<Scalar>::visit(grads[i], "", [&](const std::string&, Mat<Scalar>& m) { *dst[k++] += inv * m; });
    mean.total += losses[i].total / static_cast<double>(batch.size());
    mean.bce += losses[i].bce / static_cast<double>(batch.size());
    mean.dice += losses[i].dice / static_cast<double>(batch.size());
  }
  if (per_sample != nullptr) *per_sample = losses;
  return mean;
}

/// One optimizer step on the trainable head parameters. Throws
/// DivergenceError, leaving the model untouched, if the loss is not finite.
template <typename Scalar>
LossRecord train_step(seg::SegModel<Scalar>& model, const std::vector<const TrainSample<Scalar>*>& batch,
                      AdamW<Scalar>& opt, const std::set<std::string>& trainable, const TrainConfig& cfg) {
  check_trainable(trainable);
  seg::ModelHead<Scalar> grad;
  std::vector<LossRecord> per_sample;
  const LossRecord rec = batch_gradient(model, batch, cfg, grad, &per_sample);
  if (!std::isfinite(rec.total)) {
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < batch.size(); ++i)
      if (!std::isfinite(per_sample[i].total)) ids.push_back(batch[i]->sample_id);
    if (ids.empty())
      for (const auto* s : batch) ids.push_back(s->sample_id);
    throw DivergenceError("non-finite training loss", ids);
  }
  std::map<std::string, const Mat<Scalar>*> by_name;
  seg::ModelHead<Scalar>::visit(grad, "", [&](const std::string& n, const Mat<Scalar>& m) { by_name[n] = &m; });
  for (const auto& [n, g] : by_name) {
    if (!g->allFinite()) throw DivergenceError("non-finite gradient for " + n, {});
  }
  opt.begin_step();
  seg::ModelHead<Scalar>::visit(model.head(), "", [&](const std::string& n, Mat<Scalar>& p) {
    if (trainable.contains(n)) opt.update(n, p, *by_name.at(n), cfg);
  });
  return rec;
}

// ---- training loop --------------------------------------------------------

/// Samples grouped by category, in the order the mixture sampler indexes them.
struct Dataset {
  std::vector<std::vector<TrainSample<double>>> categories;
  std::vector<double> weights;
};

struct FitOptions {
  std::string out_dir;           // checkpoints and loss log
  std::string resume_from;       // checkpoint written by a previous fit
  int stop_after = -1;           // stop early after this iteration (interrupt simulation)
  nlohmann::json extra_meta = nlohmann::json::object();
  std::function<void(int, const LossRecord&)> on_step;
};

struct FitResult {
  std::vector<LossRecord> losses;  // this run only
  int last_iteration = 0;
  std::string checkpoint_path;
  std::string loss_log_path;
};

/// Runs `cfg.total_iterations` optimizer steps, drawing batches from a mixture
/// sampler seeded with `cfg.seed`. Checkpoints carry optimizer moments and the
/// sampler state, so a resumed run continues the same loss sequence.
FitResult fit(const TrainConfig& cfg, seg::SegModel<double>& model, const Dataset& data, const FitOptions& options);

std::string loss_log_line(int iteration, const LossRecord& rec, double lr, double wall_ms);

seg::Checkpoint training_checkpoint(const seg::SegModel<double>& model, const std::set<std::string>& trainable,
                                    const AdamW<double>& opt, int iteration, const std::string& sampler_state,
                                    const TrainConfig& cfg, const nlohmann::json& extra_meta);

}  // namespace llavaseg::train
