#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "llavaseg/segcore/adapter.hpp"
#include "llavaseg/segcore/decoder.hpp"
#include "llavaseg/segcore/encoder.hpp"

namespace llavaseg::seg {

/// Which pyramid levels host a language-aware module.
enum class ScaleSelection { all, deepest };

std::string to_string(ScaleSelection s);
ScaleSelection parse_scale_selection(const std::string& name);

struct ModelConfig {
  int image_size = 64;
  int patch = 8;
  int levels = 3;  // strides patch, 2*patch, 4*patch
  int d_llm = 64;
  int d_vis = 128;
  int d_hidden = 256;
  int heads = 4;
  int encoder_blocks = 1;
  bool encoder_positional = true;
  int decoder_depth = 1;
  int up_channels = 16;
  ScaleSelection scales = ScaleSelection::all;
  std::uint64_t seed = 0;

  void validate() const;
  std::vector<int> adapter_levels() const;
};

/// Trainable part of the model: projection MLP, adapters and mask decoder.
template <typename Scalar>
struct ModelHead {
  Mlp<Scalar> projection;
  std::vector<int> adapter_levels;  // pyramid level index of each adapter
  std::vector<LanguageAwareModule<Scalar>> adapters;
  MaskDecoder<Scalar> decoder;

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    Mlp<Scalar>::visit(self.projection, prefix + "projection.", f);
    for (std::size_t i = 0; i < self.adapters.size(); ++i) {
      LanguageAwareModule<Scalar>::visit(self.adapters[i],
                                         prefix + "adapters." + std::to_string(self.adapter_levels[i]) + ".", f);
    }
    MaskDecoder<Scalar>::visit(self.decoder, prefix + "decoder.", f);
  }
};

/// Intermediate values of one training forward pass.
template <typename Scalar>
struct ForwardCache {
  Mat<Scalar> raw;
  typename Mlp<Scalar>::Cache projection;
  TextEmbedding<Scalar> prompt;
  const FeaturePyramid<Scalar>* pyramid = nullptr;
  std::vector<typename LanguageAwareModule<Scalar>::Cache> adapters;
  FeaturePyramid<Scalar> fused;
  typename MaskDecoder<Scalar>::Cache decoder;
};

/// Promptable segmentation model: frozen patch encoder, trainable head.
template <typename Scalar>
class SegModel {
 public:
  SegModel() = default;
  explicit SegModel(const ModelConfig& config) : config_(config) {
    config.validate();
    encoder_ = PatchEncoder<Scalar>::init(config.patch, config.levels, config.d_vis, config.heads, config.d_hidden,
                                          config.encoder_blocks, config.encoder_positional, config.seed);
    head_.projection = Mlp<Scalar>::init(config.d_llm, config.d_hidden, config.d_vis, config.seed, "projection");
    head_.adapter_levels = config.adapter_levels();
    for (int level : head_.adapter_levels) {
      head_.adapters.push_back(LanguageAwareModule<Scalar>::init(config.d_vis, config.heads, config.d_hidden,
                                                                 config.seed, "adapters." + std::to_string(level)));
    }
    head_.decoder = MaskDecoder<Scalar>::init(config.d_vis, config.heads, config.d_hidden, config.levels,
                                              config.decoder_depth, config.patch, config.up_channels, config.seed);
  }

  const ModelConfig& config() const { return config_; }
  PatchEncoder<Scalar>& encoder() { return encoder_; }
  const PatchEncoder<Scalar>& encoder() const { return encoder_; }
  ModelHead<Scalar>& head() { return head_; }
  const ModelHead<Scalar>& head() const { return head_; }

  FeaturePyramid<Scalar> encode_image(const ImageTensor<Scalar>& image) const { return encoder_.encode(image); }

  TextEmbedding<Scalar> project_embeddings(const Mat<Scalar>& raw,
                                           typename Mlp<Scalar>::Cache* cache = nullptr) const {
    if (raw.cols() != config_.d_llm) {
      throw ShapeError("embedding width " + std::to_string(raw.cols()) + " does not match d_llm " +
                       std::to_string(config_.d_llm));
    }
    if (!raw.allFinite()) throw InvalidInput("token embeddings contain non-finite values");
    return {head_.projection.forward(raw, cache)};
  }

  /// Applies each adapter at its level; other levels pass through.
  FeaturePyramid<Scalar> multi_scale_inject(
      const FeaturePyramid<Scalar>& pyramid, const TextEmbedding<Scalar>& prompt,
      std::vector<typename LanguageAwareModule<Scalar>::Cache>* caches = nullptr) const {
    for (int level : head_.adapter_levels) {
      if (level < 0 || level >= static_cast<int>(pyramid.levels.size())) {
        throw ConfigError("adapter for level " + std::to_string(level) + " but the pyramid has " +
                          std::to_string(pyramid.levels.size()) + " levels");
      }
    }
    if (head_.adapters.size() != head_.adapter_levels.size()) throw ConfigError("adapter/level count mismatch");
    FeaturePyramid<Scalar> fused = pyramid;
    if (caches != nullptr) caches->resize(head_.adapters.size());
    for (std::size_t i = 0; i < head_.adapters.size(); ++i) {
      auto& lvl = fused.levels[static_cast<std::size_t>(head_.adapter_levels[i])];
      lvl.map = head_.adapters[i].forward(lvl.map, prompt, caches != nullptr ? &(*caches)[i] : nullptr);
    }
    return fused;
  }

  Mat<Scalar> decode_mask(const FeaturePyramid<Scalar>& fused, const TextEmbedding<Scalar>& prompt) const {
    typename MaskDecoder<Scalar>::Cache cache;
    return head_.decoder.forward(fused, prompt, cache);
  }

  /// Mask logits for an image and projected prompt.
  Mat<Scalar> forward(const ImageTensor<Scalar>& image, const TextEmbedding<Scalar>& prompt) const {
    return forward_encoded(encode_image(image), prompt);
  }

  Mat<Scalar> forward_encoded(const FeaturePyramid<Scalar>& pyramid, const TextEmbedding<Scalar>& prompt) const {
    if (prompt.size() == 0) throw InvalidPrompt("empty prompt");
    return decode_mask(multi_scale_inject(pyramid, prompt), prompt);
  }

  /// Training forward from raw token embeddings against a cached pyramid.
  Mat<Scalar> forward_train(const FeaturePyramid<Scalar>& pyramid, const Mat<Scalar>& raw,
                            ForwardCache<Scalar>& cache) const {
    cache.raw = raw;
    cache.pyramid = &pyramid;
    cache.prompt = project_embeddings(raw, &cache.projection);
    if (cache.prompt.size() == 0) throw InvalidPrompt("empty prompt");
    cache.fused = multi_scale_inject(pyramid, cache.prompt, &cache.adapters);
    return head_.decoder.forward(cache.fused, cache.prompt, cache.decoder);
  }

  /// Accumulates d(loss)/d(head parameters) into `grad`; returns d/draw.
  Mat<Scalar> backward(const ForwardCache<Scalar>& cache, const Mat<Scalar>& dlogits, ModelHead<Scalar>& grad) const {
    auto dec = head_.decoder.backward(cache.decoder, dlogits, grad.decoder);
    Mat<Scalar> dprompt = std::move(dec.prompt);
    for (std::size_t i = 0; i < head_.adapters.size(); ++i) {
      const auto level = static_cast<std::size_t>(head_.adapter_levels[i]);
      dprompt += head_.adapters[i].backward(cache.pyramid->levels[level].map, cache.prompt, cache.adapters[i],
                                            dec.levels[level], grad.adapters[i]);
    }
    return head_.projection.backward(cache.raw, cache.projection, dprompt, grad.projection);
  }

  ModelHead<Scalar> zero_gradients() const { return zeros_like(head_); }

  /// Every parameter with its qualified name ("encoder.", "projection.",
  /// "adapters.<level>.", "decoder." prefixes).
  template <class F>
  void for_each_parameter(F&& f) {
    PatchEncoder<Scalar>::visit(encoder_, "encoder.", f);
    ModelHead<Scalar>::visit(head_, "", f);
  }
  template <class F>
  void for_each_parameter(F&& f) const {
    PatchEncoder<Scalar>::visit(encoder_, "encoder.", f);
    ModelHead<Scalar>::visit(head_, "", f);
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> names;
    for_each_parameter([&](const std::string& n, const auto&) { names.push_back(n); });
    return names;
  }

  template <typename Other>
  SegModel<Other> cast() const {
    SegModel<Other> out(config_);
    std::map<std::string, const Mat<Scalar>*> mine;
    for_each_parameter([&](const std::string& n, const Mat<Scalar>& m) { mine[n] = &m; });
    out.for_each_parameter([&](const std::string& n, Mat<Other>& m) { m = mine.at(n)->template cast<Other>(); });
    return out;
  }

 private:
  ModelConfig config_;
  PatchEncoder<Scalar> encoder_;
  ModelHead<Scalar> head_;
};

/// Sigmoid threshold used for reported binary masks.
inline constexpr double kMaskThreshold = 0.5;

template <typename Scalar>
Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> threshold_mask(const Mat<Scalar>& logits) {
  // sigmoid(x) > 0.5  <=>  x > 0
  return (logits.array() > Scalar(0)).template cast<std::uint8_t>();
}

}  // namespace llavaseg::seg
