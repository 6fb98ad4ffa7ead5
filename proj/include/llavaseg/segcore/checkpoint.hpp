#pragma once

#include <json.hpp>

#include <map>
#include <set>
#include <string>
#include <vector>

#include "llavaseg/segcore/model.hpp"

namespace llavaseg::seg {

nlohmann::json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

/// Single-file container of named double-precision arrays with a JSON
/// manifest. Layout: magic line, one JSON header line, raw little-endian
/// float64 payload (column-major per array).
struct Checkpoint {
  static constexpr int kVersion = 1;

  struct Array {
    std::string name;
    Mat<double> values;
    bool trainable = false;
    std::string group = "model";  // "model" or "optimizer"
  };

  int version = kVersion;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<Array> arrays;

  const Array* find(const std::string& name) const;
  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

template <typename Scalar>
Checkpoint make_checkpoint(const SegModel<Scalar>& model, const std::set<std::string>& trainable) {
  Checkpoint ck;
  ck.meta["config"] = config_to_json(model.config());
  model.for_each_parameter([&](const std::string& name, const Mat<Scalar>& m) {
    ck.arrays.push_back({name, m.template cast<double>(), trainable.contains(name), "model"});
  });
  return ck;
}

template <typename Scalar>
SegModel<Scalar> model_from_checkpoint(const Checkpoint& ck) {
  if (!ck.meta.contains("config")) throw CheckpointError("checkpoint has no model config");
  SegModel<Scalar> model(config_from_json(ck.meta.at("config")));
  model.for_each_parameter([&](const std::string& name, Mat<Scalar>& m) {
    const auto* a = ck.find(name);
    if (a == nullptr) throw CheckpointError("checkpoint lacks parameter " + name);
    if (a->values.rows() != m.rows() || a->values.cols() != m.cols()) {
      throw CheckpointError("parameter " + name + " has shape " + std::to_string(a->values.rows()) + "x" +
                            std::to_string(a->values.cols()) + ", model expects " + std::to_string(m.rows()) + "x" +
                            std::to_string(m.cols()));
    }
    m = a->values.template cast<Scalar>();
  });
  return model;
}

}  // namespace llavaseg::seg
