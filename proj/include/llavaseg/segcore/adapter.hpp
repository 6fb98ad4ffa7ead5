#pragma once

#include <string>

#include "llavaseg/segcore/layers.hpp"

namespace llavaseg::seg {

/// Language-aware module: visual tokens attend to prompt tokens, a
/// feed-forward layer refines the result, and the output projection is added
/// back onto the visual features. The output projection starts at zero, so a
/// fresh module is the identity.
template <typename Scalar>
struct LanguageAwareModule {
  LayerNorm<Scalar> ln_query;
  Linear<Scalar> q, k, v;
  LayerNorm<Scalar> ln_ffn;
  Mlp<Scalar> ffn;
  Linear<Scalar> out;
  int heads = 4;

  struct Cache {
    typename LayerNorm<Scalar>::Cache ln_query;
    Mat<Scalar> normed, qp, kp, vp, attended, ffn_in;
    AttentionCache<Scalar> attn;
    typename LayerNorm<Scalar>::Cache ln_ffn;
    typename Mlp<Scalar>::Cache ffn;
    Mat<Scalar> fused;  // attended + ffn(...)
  };

  static LanguageAwareModule init(int d, int heads, int hidden, std::uint64_t seed, const std::string& name) {
    if (d % heads != 0) throw ConfigError("feature width must be divisible by the head count");
    return {LayerNorm<Scalar>::init(d),
            Linear<Scalar>::init(d, d, seed, name + ".q"),
            Linear<Scalar>::init(d, d, seed, name + ".k"),
            Linear<Scalar>::init(d, d, seed, name + ".v"),
            LayerNorm<Scalar>::init(d),
            Mlp<Scalar>::init(d, hidden, d, seed, name + ".ffn"),
            Linear<Scalar>::zeros(d, d),
            heads};
  }

  int width() const { return q.in_features(); }

  FeatureMap<Scalar> forward(const FeatureMap<Scalar>& visual, const TextEmbedding<Scalar>& prompt,
                             Cache* cache = nullptr) const {
    if (visual.channels() != width() || prompt.rows.cols() != width()) {
      throw ShapeError("adapter width " + std::to_string(width()) + " does not match visual width " +
                       std::to_string(visual.channels()) + " / prompt width " + std::to_string(prompt.rows.cols()));
    }
    // No prompt tokens: nothing to inject.
    if (prompt.size() == 0) return visual;
    Cache local;
    Cache& c = cache != nullptr ? *cache : local;
    c.normed = ln_query.forward(visual.tokens, &c.ln_query);
    c.qp = q.forward(c.normed);
    c.kp = k.forward(prompt.rows);
    c.vp = v.forward(prompt.rows);
    c.attended = attention(c.qp, c.kp, c.vp, heads, &c.attn);
    c.ffn_in = ln_ffn.forward(c.attended, &c.ln_ffn);
    c.fused = c.attended + ffn.forward(c.ffn_in, &c.ffn);
    FeatureMap<Scalar> result = visual;
    result.tokens += out.forward(c.fused);
    return result;
  }

  /// Accumulates parameter gradients and returns d/dprompt. The visual input
  /// comes from the frozen encoder, so its gradient is not formed.
  Mat<Scalar> backward(const FeatureMap<Scalar>& visual, const TextEmbedding<Scalar>& prompt, const Cache& c,
                       const Mat<Scalar>& dresult, LanguageAwareModule& grad) const {
    if (prompt.size() == 0) return Mat<Scalar>::Zero(0, width());
    Mat<Scalar> dfused = out.backward(c.fused, dresult, grad.out);
    Mat<Scalar> dattended = dfused;
    const Mat<Scalar> dffn_in = ffn.backward(c.ffn_in, c.ffn, dfused, grad.ffn);
    dattended += ln_ffn.backward(dffn_in, c.ln_ffn, grad.ln_ffn);
    Mat<Scalar> dqp, dkp, dvp;
    attention_backward(c.qp, c.kp, c.vp, heads, c.attn, dattended, dqp, dkp, dvp);
    const Mat<Scalar> dnormed = q.backward(c.normed, dqp, grad.q);
    ln_query.backward(dnormed, c.ln_query, grad.ln_query);
    (void)visual;
    Mat<Scalar> dprompt = k.backward(prompt.rows, dkp, grad.k);
    dprompt += v.backward(prompt.rows, dvp, grad.v);
    return dprompt;
  }

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    LayerNorm<Scalar>::visit(self.ln_query, prefix + "ln_query.", f);
    Linear<Scalar>::visit(self.q, prefix + "q.", f);
    Linear<Scalar>::visit(self.k, prefix + "k.", f);
    Linear<Scalar>::visit(self.v, prefix + "v.", f);
    LayerNorm<Scalar>::visit(self.ln_ffn, prefix + "ln_ffn.", f);
    Mlp<Scalar>::visit(self.ffn, prefix + "ffn.", f);
    Linear<Scalar>::visit(self.out, prefix + "out.", f);
  }
};

}  // namespace llavaseg::seg
