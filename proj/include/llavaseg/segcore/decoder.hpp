#pragma once

#include <string>
#include <vector>

#include "llavaseg/segcore/layers.hpp"

namespace llavaseg::seg {

/// Prompt tokens attend to themselves and to the image, pass an MLP, then the
/// image tokens attend back to the prompt tokens.
template <typename Scalar>
struct TwoWayBlock {
  MultiHeadAttention<Scalar> self_attn;
  LayerNorm<Scalar> ln1;
  MultiHeadAttention<Scalar> prompt_to_image;
  LayerNorm<Scalar> ln2;
  Mlp<Scalar> mlp;
  LayerNorm<Scalar> ln3;
  MultiHeadAttention<Scalar> image_to_prompt;
  LayerNorm<Scalar> ln4;

  struct Cache {
    Mat<Scalar> prompt_in, image_in, t1, t2, t3;
    typename MultiHeadAttention<Scalar>::Cache self_attn, p2i, i2p;
    typename LayerNorm<Scalar>::Cache ln1, ln2, ln3, ln4;
    typename Mlp<Scalar>::Cache mlp;
  };

  static TwoWayBlock init(int d, int heads, int hidden, std::uint64_t seed, const std::string& name) {
    return {MultiHeadAttention<Scalar>::init(d, heads, seed, name + ".self_attn"),
            LayerNorm<Scalar>::init(d),
            MultiHeadAttention<Scalar>::init(d, heads, seed, name + ".prompt_to_image"),
            LayerNorm<Scalar>::init(d),
            Mlp<Scalar>::init(d, hidden, d, seed, name + ".mlp"),
            LayerNorm<Scalar>::init(d),
            MultiHeadAttention<Scalar>::init(d, heads, seed, name + ".image_to_prompt"),
            LayerNorm<Scalar>::init(d)};
  }

  std::pair<Mat<Scalar>, Mat<Scalar>> forward(const Mat<Scalar>& prompt, const Mat<Scalar>& image, Cache& c) const {
    c.prompt_in = prompt;
    c.image_in = image;
    c.t1 = ln1.forward(prompt + self_attn.forward(prompt, prompt, &c.self_attn), &c.ln1);
    c.t2 = ln2.forward(c.t1 + prompt_to_image.forward(c.t1, image, &c.p2i), &c.ln2);
    c.t3 = ln3.forward(c.t2 + mlp.forward(c.t2, &c.mlp), &c.ln3);
    Mat<Scalar> image_out = ln4.forward(image + image_to_prompt.forward(image, c.t3, &c.i2p), &c.ln4);
    return {c.t3, std::move(image_out)};
  }

  /// Returns (d/dprompt, d/dimage).
  std::pair<Mat<Scalar>, Mat<Scalar>> backward(const Cache& c, const Mat<Scalar>& dprompt_out,
                                               const Mat<Scalar>& dimage_out, TwoWayBlock& g) const {
    const Mat<Scalar> dpre4 = ln4.backward(dimage_out, c.ln4, g.ln4);
    Mat<Scalar> dimage = dpre4;
    auto [di2p_q, di2p_kv] = image_to_prompt.backward(c.image_in, c.t3, c.i2p, dpre4, g.image_to_prompt);
    dimage += di2p_q;
    const Mat<Scalar> dt3 = dprompt_out + di2p_kv;

    const Mat<Scalar> dpre3 = ln3.backward(dt3, c.ln3, g.ln3);
    const Mat<Scalar> dt2 = dpre3 + mlp.backward(c.t2, c.mlp, dpre3, g.mlp);

    const Mat<Scalar> dpre2 = ln2.backward(dt2, c.ln2, g.ln2);
    auto [dp2i_q, dp2i_kv] = prompt_to_image.backward(c.t1, c.image_in, c.p2i, dpre2, g.prompt_to_image);
    dimage += dp2i_kv;
    const Mat<Scalar> dt1 = dpre2 + dp2i_q;

    const Mat<Scalar> dpre1 = ln1.backward(dt1, c.ln1, g.ln1);
    auto [dsa_q, dsa_kv] = self_attn.backward(c.prompt_in, c.prompt_in, c.self_attn, dpre1, g.self_attn);
    Mat<Scalar> dprompt = dpre1 + dsa_q + dsa_kv;
    return {std::move(dprompt), std::move(dimage)};
  }

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    MultiHeadAttention<Scalar>::visit(self.self_attn, prefix + "self_attn.", f);
    LayerNorm<Scalar>::visit(self.ln1, prefix + "ln1.", f);
    MultiHeadAttention<Scalar>::visit(self.prompt_to_image, prefix + "prompt_to_image.", f);
    LayerNorm<Scalar>::visit(self.ln2, prefix + "ln2.", f);
    Mlp<Scalar>::visit(self.mlp, prefix + "mlp.", f);
    LayerNorm<Scalar>::visit(self.ln3, prefix + "ln3.", f);
    MultiHeadAttention<Scalar>::visit(self.image_to_prompt, prefix + "image_to_prompt.", f);
    LayerNorm<Scalar>::visit(self.ln4, prefix + "ln4.", f);
  }
};

/// Two-way attention over the deepest fused level, then a top-down path that
/// upsamples and adds lateral projections of the shallower levels. The
/// stride-`patch` grid is unfolded to pixels (sub-pixel projection), joined
/// with a per-pixel projection of the input colours, and scored against a
/// vector generated from the pooled prompt tokens.
template <typename Scalar>
struct MaskDecoder {
  std::vector<TwoWayBlock<Scalar>> blocks;
  MultiHeadAttention<Scalar> final_attn;
  LayerNorm<Scalar> ln_final;
  std::vector<Linear<Scalar>> laterals;  // laterals[l] projects fused level l (l < levels-1)
  Linear<Scalar> subpixel;               // d -> patch*patch*up_channels
  Linear<Scalar> pixel;                  // rgb -> up_channels
  Mlp<Scalar> hyper;                     // pooled prompt -> up_channels
  Mat<Scalar> out_bias;                  // 1 x 1
  int patch = 8;
  int up_channels = 16;

  struct Cache {
    std::vector<typename TwoWayBlock<Scalar>::Cache> blocks;
    Mat<Scalar> t_last, x_last;
    typename MultiHeadAttention<Scalar>::Cache final_attn;
    typename LayerNorm<Scalar>::Cache ln_final;
    Mat<Scalar> prompt_out, pooled, hvec;
    typename Mlp<Scalar>::Cache hyper;
    std::vector<Mat<Scalar>> lateral_in;
    std::vector<std::pair<int, int>> level_dims;
    Mat<Scalar> u0, g0, pix_pre, pix;
    int height = 0, width = 0;
    Mat<Scalar> rgb;
  };

  static MaskDecoder init(int d, int heads, int hidden, int levels, int depth, int patch, int up_channels,
                          std::uint64_t seed) {
    MaskDecoder m;
    for (int b = 0; b < depth; ++b) {
      m.blocks.push_back(TwoWayBlock<Scalar>::init(d, heads, hidden, seed, "decoder.blocks." + std::to_string(b)));
    }
    m.final_attn = MultiHeadAttention<Scalar>::init(d, heads, seed, "decoder.final_attn");
    m.ln_final = LayerNorm<Scalar>::init(d);
    for (int l = 0; l + 1 < levels; ++l) {
      m.laterals.push_back(Linear<Scalar>::init(d, d, seed, "decoder.laterals." + std::to_string(l)));
    }
    m.subpixel = Linear<Scalar>::init(d, patch * patch * up_channels, seed, "decoder.subpixel");
    m.pixel = Linear<Scalar>::init(3, up_channels, seed, "decoder.pixel", 3.0);
    m.hyper = Mlp<Scalar>::init(d, d, up_channels, seed, "decoder.hyper");
    m.out_bias = Mat<Scalar>::Zero(1, 1);
    m.patch = patch;
    m.up_channels = up_channels;
    return m;
  }

  /// Logits at input resolution (height x width).
  Mat<Scalar> forward(const FeaturePyramid<Scalar>& fused, const TextEmbedding<Scalar>& prompt, Cache& c) const {
    if (prompt.size() == 0) throw InvalidPrompt("mask decoder needs at least one prompt token");
    const std::size_t levels = fused.levels.size();
    if (levels != laterals.size() + 1) throw ConfigError("decoder was built for a different pyramid depth");
    const auto& deepest = fused.levels.back().map;

    c.blocks.resize(blocks.size());
    Mat<Scalar> t = prompt.rows;
    Mat<Scalar> x = deepest.tokens;
    for (std::size_t b = 0; b < blocks.size(); ++b) std::tie(t, x) = blocks[b].forward(t, x, c.blocks[b]);
    c.t_last = t;
    c.x_last = x;
    c.prompt_out = ln_final.forward(t + final_attn.forward(t, x, &c.final_attn), &c.ln_final);

    c.level_dims.clear();
    for (const auto& lvl : fused.levels) c.level_dims.emplace_back(lvl.map.height, lvl.map.width);
    c.lateral_in.resize(laterals.size());
    Mat<Scalar> u = x;
    for (int l = static_cast<int>(levels) - 2; l >= 0; --l) {
      const auto [h, w] = c.level_dims[static_cast<std::size_t>(l + 1)];
      c.lateral_in[static_cast<std::size_t>(l)] = fused.levels[static_cast<std::size_t>(l)].map.tokens;
      u = upsample2(u, h, w) + laterals[static_cast<std::size_t>(l)].forward(c.lateral_in[static_cast<std::size_t>(l)]);
    }
    c.u0 = u;
    c.g0 = gelu(u);

    const auto [h0, w0] = c.level_dims.front();
    c.height = h0 * patch;
    c.width = w0 * patch;
    if (fused.pixels.height != c.height || fused.pixels.width != c.width) {
      throw ShapeError("pyramid pixels do not match the finest level");
    }
    c.rgb = fused.pixels.pixels;
    c.pix_pre = unfold(subpixel.forward(c.g0), w0) + pixel.forward(c.rgb);
    c.pix = gelu(c.pix_pre);

    c.pooled = c.prompt_out.colwise().mean();
    c.hvec = hyper.forward(c.pooled, &c.hyper);
    Mat<Scalar> flat = (c.pix * c.hvec.transpose()).array() + out_bias(0, 0);
    Mat<Scalar> logits(c.height, c.width);
    for (int y = 0; y < c.height; ++y)
      for (int x2 = 0; x2 < c.width; ++x2) logits(y, x2) = flat(y * c.width + x2, 0);
    return logits;
  }

  struct Gradients {
    Mat<Scalar> prompt;               // d/dprompt tokens
    std::vector<Mat<Scalar>> levels;  // d/dfused level tokens
  };

  Gradients backward(const Cache& c, const Mat<Scalar>& dlogits, MaskDecoder& g) const {
    const int n = c.height * c.width;
    Mat<Scalar> dflat(n, 1);
    for (int y = 0; y < c.height; ++y)
      for (int x = 0; x < c.width; ++x) dflat(y * c.width + x, 0) = dlogits(y, x);
    g.out_bias(0, 0) += dflat.sum();
    const Mat<Scalar> dhvec = dflat.transpose() * c.pix;
    const Mat<Scalar> dpix = dflat * c.hvec;

    const Mat<Scalar> dpooled = hyper.backward(c.pooled, c.hyper, dhvec, g.hyper);
    Mat<Scalar> dprompt_out =
        Mat<Scalar>::Ones(c.prompt_out.rows(), 1) * (dpooled / static_cast<Scalar>(c.prompt_out.rows()));

    const Mat<Scalar> dpix_pre = dpix.cwiseProduct(gelu_grad(c.pix_pre));
    pixel.backward(c.rgb, dpix_pre, g.pixel);
    const auto [h0, w0] = c.level_dims.front();
    const Mat<Scalar> dsub = fold(dpix_pre, h0, w0);
    const Mat<Scalar> dg0 = subpixel.backward(c.g0, dsub, g.subpixel);
    Mat<Scalar> du = dg0.cwiseProduct(gelu_grad(c.u0));

    Gradients out;
    out.levels.resize(c.level_dims.size());
    for (std::size_t l = 0; l + 1 < c.level_dims.size(); ++l) {
      out.levels[l] = laterals[l].backward(c.lateral_in[l], du, g.laterals[l]);
      const auto [h, w] = c.level_dims[l + 1];
      du = upsample2_backward(du, h, w);
    }
    Mat<Scalar> dx = du;

    const Mat<Scalar> dpre = ln_final.backward(dprompt_out, c.ln_final, g.ln_final);
    auto [dq, dkv] = final_attn.backward(c.t_last, c.x_last, c.final_attn, dpre, g.final_attn);
    Mat<Scalar> dt = dpre + dq;
    dx += dkv;
    for (std::size_t b = blocks.size(); b-- > 0;) std::tie(dt, dx) = blocks[b].backward(c.blocks[b], dt, dx, g.blocks[b]);
    out.prompt = std::move(dt);
    out.levels.back() = std::move(dx);
    return out;
  }

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    for (std::size_t b = 0; b < self.blocks.size(); ++b) {
      TwoWayBlock<Scalar>::visit(self.blocks[b], prefix + "blocks." + std::to_string(b) + ".", f);
    }
    MultiHeadAttention<Scalar>::visit(self.final_attn, prefix + "final_attn.", f);
    LayerNorm<Scalar>::visit(self.ln_final, prefix + "ln_final.", f);
    for (std::size_t l = 0; l < self.laterals.size(); ++l) {
      Linear<Scalar>::visit(self.laterals[l], prefix + "laterals." + std::to_string(l) + ".", f);
    }
    Linear<Scalar>::visit(self.subpixel, prefix + "subpixel.", f);
    Linear<Scalar>::visit(self.pixel, prefix + "pixel.", f);
    Mlp<Scalar>::visit(self.hyper, prefix + "hyper.", f);
    f(prefix + "out_bias", self.out_bias);
  }

 private:
  /// (tokens x patch*patch*C) -> (pixels x C).
  Mat<Scalar> unfold(const Mat<Scalar>& sub, int w0) const {
    const int h0 = static_cast<int>(sub.rows()) / w0;
    const int width = w0 * patch;
    Mat<Scalar> out(h0 * patch * width, up_channels);
    for (int ty = 0; ty < h0; ++ty)
      for (int tx = 0; tx < w0; ++tx)
        for (int sy = 0; sy < patch; ++sy)
          for (int sx = 0; sx < patch; ++sx)
            out.row((ty * patch + sy) * width + tx * patch + sx) =
                sub.block(ty * w0 + tx, (sy * patch + sx) * up_channels, 1, up_channels);
    return out;
  }

  Mat<Scalar> fold(const Mat<Scalar>& pix, int h0, int w0) const {
    const int width = w0 * patch;
    Mat<Scalar> out(h0 * w0, patch * patch * up_channels);
    for (int ty = 0; ty < h0; ++ty)
      for (int tx = 0; tx < w0; ++tx)
        for (int sy = 0; sy < patch; ++sy)
          for (int sx = 0; sx < patch; ++sx)
            out.block(ty * w0 + tx, (sy * patch + sx) * up_channels, 1, up_channels) =
                pix.row((ty * patch + sy) * width + tx * patch + sx);
    return out;
  }
};

}  // namespace llavaseg::seg
