#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include "llavaseg/error.hpp"
#include "llavaseg/hash.hpp"

namespace llavaseg::seg {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using ColVec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Image as (height*width) x 3, pixel (y, x) on row y*width + x.
template <typename Scalar>
struct ImageTensor {
  int height = 0;
  int width = 0;
  Mat<Scalar> pixels;

  template <typename Other>
  ImageTensor<Other> cast() const {
    return {height, width, pixels.template cast<Other>()};
  }
};

/// Token grid, (height*width) x channels in row-major spatial order.
template <typename Scalar>
struct FeatureMap {
  int height = 0;
  int width = 0;
  Mat<Scalar> tokens;
  int channels() const { return static_cast<int>(tokens.cols()); }
};

template <typename Scalar>
struct PyramidLevel {
  int stride = 0;  // scale id: pixels per token edge
  FeatureMap<Scalar> map;
};

/// Encoder output. Levels are ordered shallow to deep; `pixels` is the
/// stride-1 input kept for the decoder's finest lateral connection.
template <typename Scalar>
struct FeaturePyramid {
  std::vector<PyramidLevel<Scalar>> levels;
  ImageTensor<Scalar> pixels;
};

/// Projected prompt tokens, k x d_vis.
template <typename Scalar>
struct TextEmbedding {
  Mat<Scalar> rows;
  Eigen::Index size() const { return rows.rows(); }
};

/// Portable N(0,1) stream: Box-Muller over mt19937_64.
class NormalStream {
 public:
  explicit NormalStream(std::uint64_t seed) : gen_(seed) {}
  double operator()() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double r = std::sqrt(-2.0 * std::log(uniform()));
    const double theta = 2.0 * std::numbers::pi * uniform();
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }
  double uniform() { return (static_cast<double>(gen_() >> 11) + 0.5) * (1.0 / 9007199254740992.0); }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

template <typename Scalar>
Mat<Scalar> random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, std::uint64_t seed) {
  NormalStream n(seed);
  Mat<Scalar> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(stddev * n());
  return m;
}

/// Per-parameter seed so initialization does not depend on construction order.
inline std::uint64_t param_seed(std::uint64_t seed, const std::string& name) {
  return seed ^ (fnv1a64(name) * 0x9E3779B97F4A7C15ULL);
}

template <typename Scalar>
  requires std::is_floating_point_v<Scalar>
inline Scalar gelu(Scalar x) {
  constexpr Scalar c = static_cast<Scalar>(0.7978845608028654);  // sqrt(2/pi)
  const Scalar inner = c * (x + static_cast<Scalar>(0.044715) * x * x * x);
  return static_cast<Scalar>(0.5) * x * (Scalar(1) + std::tanh(inner));
}

template <typename Scalar>
  requires std::is_floating_point_v<Scalar>
inline Scalar gelu_grad(Scalar x) {
  constexpr Scalar c = static_cast<Scalar>(0.7978845608028654);
  const Scalar x2 = x * x;
  const Scalar t = std::tanh(c * (x + static_cast<Scalar>(0.044715) * x2 * x));
  return static_cast<Scalar>(0.5) * (Scalar(1) + t) +
         static_cast<Scalar>(0.5) * x * (Scalar(1) - t * t) * c * (Scalar(1) + static_cast<Scalar>(3 * 0.044715) * x2);
}

template <typename Derived>
auto gelu(const Eigen::MatrixBase<Derived>& x) {
  using S = typename Derived::Scalar;
  return x.unaryExpr([](S v) { return gelu(v); });
}

template <typename Derived>
auto gelu_grad(const Eigen::MatrixBase<Derived>& x) {
  using S = typename Derived::Scalar;
  return x.unaryExpr([](S v) { return gelu_grad(v); });
}

template <typename Scalar>
  requires std::is_floating_point_v<Scalar>
inline Scalar sigmoid(Scalar x) {
  if (x >= 0) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

template <typename Derived>
auto sigmoid(const Eigen::MatrixBase<Derived>& x) {
  using S = typename Derived::Scalar;
  return x.unaryExpr([](S v) { return sigmoid(v); });
}

/// 2-D sinusoidal encoding: first half of the channels encodes the row, the
/// second half the column.
template <typename Scalar>
Mat<Scalar> positional_encoding_2d(int height, int width, int channels) {
  Mat<Scalar> pe = Mat<Scalar>::Zero(height * width, channels);
  const int half = channels / 2;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const int row = y * width + x;
      for (int axis = 0; axis < 2; ++axis) {
        const double pos = axis == 0 ? y : x;
        for (int i = 0; i + 1 < half; i += 2) {
          const double freq = std::pow(10000.0, -static_cast<double>(i) / half);
          pe(row, axis * half + i) = static_cast<Scalar>(std::sin(pos * freq));
          pe(row, axis * half + i + 1) = static_cast<Scalar>(std::cos(pos * freq));
        }
      }
    }
  }
  return pe;
}

/// Nearest-neighbour 2x upsampling of a token grid.
template <typename Scalar>
Mat<Scalar> upsample2(const Mat<Scalar>& tokens, int height, int width) {
  Mat<Scalar> out(4 * height * width, tokens.cols());
  const int w2 = 2 * width;
  for (int y = 0; y < 2 * height; ++y)
    for (int x = 0; x < w2; ++x) out.row(y * w2 + x) = tokens.row((y / 2) * width + x / 2);
  return out;
}

/// Adjoint of upsample2: sums each 2x2 block of gradients.
template <typename Scalar>
Mat<Scalar> upsample2_backward(const Mat<Scalar>& grad, int height, int width) {
  Mat<Scalar> out = Mat<Scalar>::Zero(height * width, grad.cols());
  const int w2 = 2 * width;
  for (int y = 0; y < 2 * height; ++y)
    for (int x = 0; x < w2; ++x) out.row((y / 2) * width + x / 2) += grad.row(y * w2 + x);
  return out;
}

}  // namespace llavaseg::seg
