#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "llavaseg/segcore/model.hpp"
#include "llavaseg/training.hpp"

namespace testsupport {

using llavaseg::seg::Mat;

// 16x16 input, strides 2/4/8: maps of 8x8, 4x4 and 2x2 tokens.
inline llavaseg::seg::ModelConfig toy_config(std::uint64_t seed = 3) {
  llavaseg::seg::ModelConfig c;
  c.image_size = 16;
  c.patch = 2;
  c.levels = 3;
  c.d_llm = 6;
  c.d_vis = 8;
  c.d_hidden = 12;
  c.heads = 2;
  c.up_channels = 3;
  c.seed = seed;
  return c;
}

inline Mat<double> random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 g(seed);
  std::normal_distribution<double> n(0.0, scale);
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(g);
  return m;
}

inline llavaseg::seg::ImageTensor<double> random_image(int size, std::uint64_t seed) {
  return {size, size, random_matrix(size * size, 3, seed)};
}

/// Every head parameter perturbed away from its initial value so that no
/// gradient path is switched off (zero-initialized projections included).
template <typename Model>
void randomize_head(Model& model, std::uint64_t seed, double scale = 0.3) {
  std::uint64_t k = seed;
  llavaseg::seg::ModelHead<double>::visit(model.head(), "", [&](const std::string&, Mat<double>& m) {
    m += random_matrix(m.rows(), m.cols(), ++k, scale);
  });
}

inline double relative_error(const Mat<double>& a, const Mat<double>& b) {
  const double denom = std::max({a.norm(), b.norm(), 1e-12});
  return (a - b).norm() / denom;
}

/// Toy samples: random image, random prompt rows, and a square target whose
/// position depends on the sample so that prompts matter.
inline std::vector<llavaseg::train::TrainSample<double>> toy_samples(const llavaseg::seg::SegModel<double>& model,
                                                                    int n, std::uint64_t seed) {
  const auto& cfg = model.config();
  std::vector<llavaseg::train::TrainSample<double>> out;
  for (int i = 0; i < n; ++i) {
    llavaseg::train::TrainSample<double> s;
    s.sample_id = "toy-" + std::to_string(i);
    s.pyramid = std::make_shared<const llavaseg::seg::FeaturePyramid<double>>(
        model.encode_image(random_image(cfg.image_size, seed * 1000 + static_cast<std::uint64_t>(i))));
    s.embeddings = random_matrix(3, cfg.d_llm, seed * 1000 + 500 + static_cast<std::uint64_t>(i));
    s.target = Mat<double>::Zero(cfg.image_size, cfg.image_size);
    const int side = cfg.image_size / 2;
    const int off = (i % 2) * (cfg.image_size - side);
    s.target.block(off, off, side, side).setOnes();
    out.push_back(std::move(s));
  }
  return out;
}

/// Fresh scratch directory under the build tree.
inline std::string scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("llavaseg-test-" + name + "-" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

}  // namespace testsupport
