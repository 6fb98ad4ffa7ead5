#include "llavaseg/training.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace llavaseg::train {

namespace fs = std::filesystem;
using nlohmann::json;

void TrainConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string(name) + " must be positive and finite");
  };
  auto non_negative = [](double v, const char* name) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(std::string(name) + " must be non-negative and finite");
  };
  non_negative(learning_rate, "learning_rate");
  non_negative(weight_decay, "weight_decay");
  non_negative(lambda_bce, "lambda_bce");
  non_negative(lambda_dice, "lambda_dice");
  positive(dice_smooth, "dice_smooth");
  positive(eps, "eps");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (total_iterations < 0) throw ConfigError("total_iterations must be non-negative");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
}

json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate},   {"weight_decay", weight_decay}, {"lambda_bce", lambda_bce},
          {"lambda_dice", lambda_dice},       {"dice_smooth", dice_smooth},   {"beta1", beta1},
          {"beta2", beta2},                   {"eps", eps},                   {"batch_size", batch_size},
          {"total_iterations", total_iterations}, {"checkpoint_every", checkpoint_every}, {"seed", seed},
          {"train_projection", train_projection}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.lambda_bce = j.value("lambda_bce", c.lambda_bce);
  c.lambda_dice = j.value("lambda_dice", c.lambda_dice);
  c.dice_smooth = j.value("dice_smooth", c.dice_smooth);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.total_iterations = j.value("total_iterations", c.total_iterations);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.seed = j.value("seed", c.seed);
  c.train_projection = j.value("train_projection", c.train_projection);
  c.validate();
  return c;
}

void check_trainable(const std::set<std::string>& trainable) {
  for (const auto& name : trainable) {
    if (name.starts_with("encoder.")) {
      throw PolicyViolation("encoder parameter '" + name + "' must stay frozen");
    }
  }
}

std::string loss_log_line(int iteration, const LossRecord& rec, double lr, double wall_ms) {
  json j{{"iteration", iteration}, {"total", rec.total}, {"bce", rec.bce},
         {"dice", rec.dice},       {"lr", lr},           {"wall_ms", wall_ms}};
  return j.dump();
}

seg::Checkpoint training_checkpoint(const seg::SegModel<double>& model, const std::set<std::string>& trainable,
                                    const AdamW<double>& opt, int iteration, const std::string& sampler_state,
                                    const TrainConfig& cfg, const json& extra_meta) {
  seg::Checkpoint ck = seg::make_checkpoint(model, trainable);
  for (const auto& [k, v] : extra_meta.items()) ck.meta[k] = v;
  ck.meta["iteration"] = iteration;
  ck.meta["adam_step"] = opt.step;
  ck.meta["sampler_state"] = sampler_state;
  ck.meta["train_config"] = cfg.to_json();
  for (const auto& [name, mom] : opt.state) {
    ck.arrays.push_back({"m/" + name, mom.m, false, "optimizer"});
    ck.arrays.push_back({"v/" + name, mom.v, false, "optimizer"});
  }
  return ck;
}

namespace {

std::vector<double> effective_weights(const Dataset& data) {
  if (!data.weights.empty()) return data.weights;
  // Uniform over non-empty categories.
  std::vector<double> w;
  for (const auto& c : data.categories) w.push_back(c.empty() ? 0.0 : 1.0);
  return w;
}

std::string checkpoint_name(int iteration) {
  std::ostringstream ss;
  ss << "checkpoint-" << std::setw(6) << std::setfill('0') << iteration << ".ckpt";
  return ss.str();
}

}  // namespace

FitResult fit(const TrainConfig& cfg, seg::SegModel<double>& model, const Dataset& data, const FitOptions& options) {
  cfg.validate();
  if (options.out_dir.empty()) throw ConfigError("fit needs an output directory");
  fs::create_directories(options.out_dir);

  std::vector<std::size_t> sizes;
  for (const auto& c : data.categories) sizes.push_back(c.size());
  data::MixtureSampler sampler(sizes, effective_weights(data), cfg.seed);
  AdamW<double> opt;
  int start = 0;

  if (!options.resume_from.empty()) {
    const seg::Checkpoint ck = seg::Checkpoint::load(options.resume_from);
    model = seg::model_from_checkpoint<double>(ck);
    try {
      start = ck.meta.at("iteration");
      opt.step = ck.meta.at("adam_step");
      sampler.restore(ck.meta.at("sampler_state"));
    } catch (const json::exception& e) {
      throw CheckpointError(options.resume_from + " lacks training state: " + e.what());
    }
    for (const auto& a : ck.arrays) {
      if (a.group != "optimizer") continue;
      const bool first = a.name.starts_with("m/");
      auto& mom = opt.state[a.name.substr(2)];
      (first ? mom.m : mom.v) = a.values;
    }
  }
  const std::set<std::string> trainable = freeze_policy(model, cfg.train_projection);

  FitResult result;
  result.loss_log_path = (fs::path(options.out_dir) / "loss_log.jsonl").string();
  std::ofstream log(result.loss_log_path, options.resume_from.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw IoError("cannot open loss log " + result.loss_log_path);

  auto save = [&](int iteration, const std::string& name) {
    const auto path = (fs::path(options.out_dir) / name).string();
    training_checkpoint(model, trainable, opt, iteration, sampler.state(), cfg, options.extra_meta).save(path);
    return path;
  };

  int it = start;
  while (it < cfg.total_iterations) {
    ++it;
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<const TrainSample<double>*> batch;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const auto ref = sampler.next();
      batch.push_back(&data.categories[ref.category][ref.sample]);
    }
    const LossRecord rec = train_step(model, batch, opt, trainable, cfg);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    log << loss_log_line(it, rec, cfg.learning_rate, ms) << '\n';
    log.flush();
    result.losses.push_back(rec);
    if (options.on_step) options.on_step(it, rec);
    if (cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0) save(it, checkpoint_name(it));
    if (options.stop_after >= 0 && it >= options.stop_after) break;
  }
  result.last_iteration = it;
  result.checkpoint_path = save(it, "model.ckpt");
  return result;
}

}  // namespace llavaseg::train
