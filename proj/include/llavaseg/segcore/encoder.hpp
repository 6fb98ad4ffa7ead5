#pragma once

#include <string>
#include <vector>

#include "llavaseg/segcore/layers.hpp"

namespace llavaseg::seg {

/// Pre-norm transformer block over a token grid.
template <typename Scalar>
struct EncoderBlock {
  LayerNorm<Scalar> ln1;
  MultiHeadAttention<Scalar> attn;
  LayerNorm<Scalar> ln2;
  Mlp<Scalar> mlp;

  static EncoderBlock init(int d, int heads, int hidden, std::uint64_t seed, const std::string& name) {
    return {LayerNorm<Scalar>::init(d), MultiHeadAttention<Scalar>::init(d, heads, seed, name + ".attn"),
            LayerNorm<Scalar>::init(d), Mlp<Scalar>::init(d, hidden, d, seed, name + ".mlp")};
  }

  Mat<Scalar> forward(Mat<Scalar> x) const {
    const Mat<Scalar> n1 = ln1.forward(x);
    x += attn.forward(n1, n1);
    x += mlp.forward(ln2.forward(x));
    return x;
  }

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    LayerNorm<Scalar>::visit(self.ln1, prefix + "ln1.", f);
    MultiHeadAttention<Scalar>::visit(self.attn, prefix + "attn.", f);
    LayerNorm<Scalar>::visit(self.ln2, prefix + "ln2.", f);
    Mlp<Scalar>::visit(self.mlp, prefix + "mlp.", f);
  }
};

template <typename Scalar>
struct EncoderStage {
  Linear<Scalar> merge;  // 2x2 token merge (4d -> d); empty on the first stage
  std::vector<EncoderBlock<Scalar>> blocks;
};

/// Desk-scale patch transformer. Stage 0 embeds patch x patch pixel blocks;
/// each later stage merges 2x2 tokens, doubling the stride.
template <typename Scalar>
struct PatchEncoder {
  int patch = 8;
  bool positional = true;
  Linear<Scalar> patch_embed;
  std::vector<EncoderStage<Scalar>> stages;

  static PatchEncoder init(int patch, int levels, int d, int heads, int hidden, int blocks, bool positional,
                           std::uint64_t seed) {
    PatchEncoder e;
    e.patch = patch;
    e.positional = positional;
    e.patch_embed = Linear<Scalar>::init(patch * patch * 3, d, seed, "encoder.patch_embed");
    for (int l = 0; l < levels; ++l) {
      EncoderStage<Scalar> s;
      const std::string name = "encoder.stages." + std::to_string(l);
      s.merge = l == 0 ? Linear<Scalar>{} : Linear<Scalar>::init(4 * d, d, seed, name + ".merge");
      for (int b = 0; b < blocks; ++b) {
        s.blocks.push_back(EncoderBlock<Scalar>::init(d, heads, hidden, seed, name + ".blocks." + std::to_string(b)));
      }
      e.stages.push_back(std::move(s));
    }
    return e;
  }

  int levels() const { return static_cast<int>(stages.size()); }
  int deepest_stride() const { return patch << (levels() - 1); }

  FeaturePyramid<Scalar> encode(const ImageTensor<Scalar>& image) const {
    const int stride = deepest_stride();
    if (image.height <= 0 || image.width <= 0 || image.height % stride != 0 || image.width % stride != 0) {
      throw ShapeError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                       " is not divisible by the deepest stride " + std::to_string(stride));
    }
    if (image.pixels.rows() != static_cast<Eigen::Index>(image.height) * image.width || image.pixels.cols() != 3) {
      throw ShapeError("image tensor must be (height*width) x 3");
    }
    FeaturePyramid<Scalar> out;
    out.pixels = image;
    int h = image.height / patch;
    int w = image.width / patch;
    Mat<Scalar> patches(h * w, patch * patch * 3);
    for (int ty = 0; ty < h; ++ty)
      for (int tx = 0; tx < w; ++tx)
        for (int sy = 0; sy < patch; ++sy)
          for (int sx = 0; sx < patch; ++sx) {
            const int pix = (ty * patch + sy) * image.width + tx * patch + sx;
            for (int c = 0; c < 3; ++c) patches(ty * w + tx, (sy * patch + sx) * 3 + c) = image.pixels(pix, c);
          }
    Mat<Scalar> tokens = patch_embed.forward(patches);
    for (int l = 0; l < levels(); ++l) {
      if (l > 0) {
        const int h2 = h / 2, w2 = w / 2;
        const Eigen::Index d = tokens.cols();
        Mat<Scalar> merged(h2 * w2, 4 * d);
        for (int y = 0; y < h2; ++y)
          for (int x = 0; x < w2; ++x) {
            const int row = y * w2 + x;
            merged.block(row, 0, 1, d) = tokens.row((2 * y) * w + 2 * x);
            merged.block(row, d, 1, d) = tokens.row((2 * y) * w + 2 * x + 1);
            merged.block(row, 2 * d, 1, d) = tokens.row((2 * y + 1) * w + 2 * x);
            merged.block(row, 3 * d, 1, d) = tokens.row((2 * y + 1) * w + 2 * x + 1);
          }
        tokens = stages[static_cast<std::size_t>(l)].merge.forward(merged);
        h = h2;
        w = w2;
      }
      if (positional) tokens += positional_encoding_2d<Scalar>(h, w, static_cast<int>(tokens.cols()));
      for (const auto& block : stages[static_cast<std::size_t>(l)].blocks) tokens = block.forward(std::move(tokens));
      out.levels.push_back({patch << l, {h, w, tokens}});
    }
    return out;
  }

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    Linear<Scalar>::visit(self.patch_embed, prefix + "patch_embed.", f);
    for (std::size_t l = 0; l < self.stages.size(); ++l) {
      const std::string p = prefix + "stages." + std::to_string(l) + ".";
      if (l > 0) Linear<Scalar>::visit(self.stages[l].merge, p + "merge.", f);
      for (std::size_t b = 0; b < self.stages[l].blocks.size(); ++b) {
        EncoderBlock<Scalar>::visit(self.stages[l].blocks[b], p + "blocks." + std::to_string(b) + ".", f);
      }
    }
  }
};

}  // namespace llavaseg::seg
