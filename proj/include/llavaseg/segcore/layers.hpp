#pragma once

#include <string>
#include <vector>

#include "llavaseg/segcore/tensor.hpp"

namespace llavaseg::seg {

// Each parameter struct exposes `visit(self, prefix, f)` calling
// f(name, matrix) for every parameter in a fixed order. `Self` may be const.
// Gradients use the same struct type as the parameters they belong to.

template <typename Scalar>
struct Linear {
  Mat<Scalar> weight;  // in x out
  Mat<Scalar> bias;    // 1 x out

  static Linear init(int in, int out, std::uint64_t seed, const std::string& name, double gain = 1.0) {
    return {random_normal<Scalar>(in, out, gain / std::sqrt(static_cast<double>(in)), param_seed(seed, name)),
            Mat<Scalar>::Zero(1, out)};
  }
  static Linear zeros(int in, int out) { return {Mat<Scalar>::Zero(in, out), Mat<Scalar>::Zero(1, out)}; }

  int in_features() const { return static_cast<int>(weight.rows()); }
  int out_features() const { return static_cast<int>(weight.cols()); }

  Mat<Scalar> forward(const Mat<Scalar>& x) const {
    if (x.cols() != weight.rows()) {
      throw ShapeError("linear layer expects width " + std::to_string(weight.rows()) + ", got " +
                       std::to_string(x.cols()));
    }
    Mat<Scalar> y = x * weight;
    y.rowwise() += bias.row(0);
    return y;
  }

  /// Accumulates parameter gradients into `grad`; returns d/dx.
  Mat<Scalar> backward(const Mat<Scalar>& x, const Mat<Scalar>& dy, Linear& grad) const {
    grad.weight.noalias() += x.transpose() * dy;
    grad.bias += dy.colwise().sum();
    return dy * weight.transpose();
  }

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "weight", self.weight);
    f(prefix + "bias", self.bias);
  }
};

template <typename Scalar>
struct LayerNorm {
  Mat<Scalar> gamma;  // 1 x d
  Mat<Scalar> beta;   // 1 x d

  static constexpr double kEps = 1e-5;

  struct Cache {
    Mat<Scalar> xhat;
    ColVec<Scalar> rstd;
  };

  static LayerNorm init(int d) { return {Mat<Scalar>::Ones(1, d), Mat<Scalar>::Zero(1, d)}; }

  Mat<Scalar> forward(const Mat<Scalar>& x, Cache* cache = nullptr) const {
    const Eigen::Index d = x.cols();
    ColVec<Scalar> mean = x.rowwise().mean();
    Mat<Scalar> centered = x.colwise() - mean;
    ColVec<Scalar> var = centered.array().square().rowwise().sum() / static_cast<Scalar>(d);
    ColVec<Scalar> rstd = (var.array() + static_cast<Scalar>(kEps)).rsqrt();
    Mat<Scalar> xhat = centered.array().colwise() * rstd.array();
    Mat<Scalar> y = (xhat.array().rowwise() * gamma.row(0).array()).rowwise() + beta.row(0).array();
    if (cache != nullptr) {
      cache->xhat = std::move(xhat);
      cache->rstd = std::move(rstd);
    }
    return y;
  }

  Mat<Scalar> backward(const Mat<Scalar>& dy, const Cache& c, LayerNorm& grad) const {
    grad.gamma += dy.cwiseProduct(c.xhat).colwise().sum();
    grad.beta += dy.colwise().sum();
    Mat<Scalar> dxhat = dy.array().rowwise() * gamma.row(0).array();
    const ColVec<Scalar> mean_d = dxhat.rowwise().mean();
    const ColVec<Scalar> mean_dx = dxhat.cwiseProduct(c.xhat).rowwise().mean();
    Mat<Scalar> dx = dxhat.colwise() - mean_d;
    dx.array() -= c.xhat.array().colwise() * mean_dx.array();
    return dx.array().colwise() * c.rstd.array();
  }

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "gamma", self.gamma);
    f(prefix + "beta", self.beta);
  }
};

/// Softmax attention weights per head (queries x keys).
template <typename Scalar>
struct AttentionCache {
  std::vector<Mat<Scalar>> probs;
};

/// Scaled dot-product attention split over `heads` column groups.
template <typename Scalar>
Mat<Scalar> attention(const Mat<Scalar>& q, const Mat<Scalar>& k, const Mat<Scalar>& v, int heads,
                      AttentionCache<Scalar>* cache = nullptr) {
  if (q.cols() != k.cols() || k.rows() != v.rows() || q.cols() % heads != 0 || v.cols() % heads != 0) {
    throw ShapeError("attention operand shapes do not agree");
  }
  const Eigen::Index dh = q.cols() / heads;
  const Eigen::Index dv = v.cols() / heads;
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  Mat<Scalar> out(q.rows(), v.cols());
  if (cache != nullptr) cache->probs.resize(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Mat<Scalar> s = (q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose()) * scale;
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
      const Scalar m = s.row(r).maxCoeff();
      s.row(r) = (s.row(r).array() - m).exp();
      s.row(r) /= s.row(r).sum();
    }
    out.middleCols(h * dv, dv).noalias() = s * v.middleCols(h * dv, dv);
    if (cache != nullptr) cache->probs[static_cast<std::size_t>(h)] = std::move(s);
  }
  return out;
}

template <typename Scalar>
void attention_backward(const Mat<Scalar>& q, const Mat<Scalar>& k, const Mat<Scalar>& v, int heads,
                        const AttentionCache<Scalar>& cache, const Mat<Scalar>& dout, Mat<Scalar>& dq,
                        Mat<Scalar>& dk, Mat<Scalar>& dv) {
  const Eigen::Index dh = q.cols() / heads;
  const Eigen::Index dvh = v.cols() / heads;
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  dq.setZero(q.rows(), q.cols());
  dk.setZero(k.rows(), k.cols());
  dv.setZero(v.rows(), v.cols());
  for (int h = 0; h < heads; ++h) {
    const Mat<Scalar>& p = cache.probs[static_cast<std::size_t>(h)];
    const auto dout_h = dout.middleCols(h * dvh, dvh);
    dv.middleCols(h * dvh, dvh).noalias() = p.transpose() * dout_h;
    Mat<Scalar> dp = dout_h * v.middleCols(h * dvh, dvh).transpose();
    const ColVec<Scalar> row_dot = dp.cwiseProduct(p).rowwise().sum();
    Mat<Scalar> ds = p.cwiseProduct(dp.colwise() - row_dot) * scale;
    dq.middleCols(h * dh, dh).noalias() = ds * k.middleCols(h * dh, dh);
    dk.middleCols(h * dh, dh).noalias() = ds.transpose() * q.middleCols(h * dh, dh);
  }
}

/// Multi-head attention with input and output projections.
template <typename Scalar>
struct MultiHeadAttention {
  Linear<Scalar> q, k, v, o;
  int heads = 1;

  struct Cache {
    Mat<Scalar> qp, kp, vp, attended;
    AttentionCache<Scalar> attn;
  };

  static MultiHeadAttention init(int d, int heads, std::uint64_t seed, const std::string& name) {
    return {Linear<Scalar>::init(d, d, seed, name + ".q"), Linear<Scalar>::init(d, d, seed, name + ".k"),
            Linear<Scalar>::init(d, d, seed, name + ".v"), Linear<Scalar>::init(d, d, seed, name + ".o"), heads};
  }

  Mat<Scalar> forward(const Mat<Scalar>& xq, const Mat<Scalar>& xkv, Cache* cache = nullptr) const {
    Cache local;
    Cache& c = cache != nullptr ? *cache : local;
    c.qp = q.forward(xq);
    c.kp = k.forward(xkv);
    c.vp = v.forward(xkv);
    c.attended = attention(c.qp, c.kp, c.vp, heads, &c.attn);
    return o.forward(c.attended);
  }

  /// Returns (d/dxq, d/dxkv).
  std::pair<Mat<Scalar>, Mat<Scalar>> backward(const Mat<Scalar>& xq, const Mat<Scalar>& xkv, const Cache& c,
                                               const Mat<Scalar>& dy, MultiHeadAttention& grad) const {
    const Mat<Scalar> dattended = o.backward(c.attended, dy, grad.o);
    Mat<Scalar> dqp, dkp, dvp;
    attention_backward(c.qp, c.kp, c.vp, heads, c.attn, dattended, dqp, dkp, dvp);
    Mat<Scalar> dxq = q.backward(xq, dqp, grad.q);
    Mat<Scalar> dxkv = k.backward(xkv, dkp, grad.k);
    dxkv += v.backward(xkv, dvp, grad.v);
    return {std::move(dxq), std::move(dxkv)};
  }

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    Linear<Scalar>::visit(self.q, prefix + "q.", f);
    Linear<Scalar>::visit(self.k, prefix + "k.", f);
    Linear<Scalar>::visit(self.v, prefix + "v.", f);
    Linear<Scalar>::visit(self.o, prefix + "o.", f);
  }
};

enum class Activation { gelu, identity };

/// Two linear layers with an activation between them.
template <typename Scalar>
struct Mlp {
  Linear<Scalar> fc1, fc2;
  Activation activation = Activation::gelu;

  struct Cache {
    Mat<Scalar> pre, hidden;
  };

  static Mlp init(int in, int hidden, int out, std::uint64_t seed, const std::string& name) {
    return {Linear<Scalar>::init(in, hidden, seed, name + ".fc1"), Linear<Scalar>::init(hidden, out, seed, name + ".fc2"),
            Activation::gelu};
  }

  Mat<Scalar> forward(const Mat<Scalar>& x, Cache* cache = nullptr) const {
    Cache local;
    Cache& c = cache != nullptr ? *cache : local;
    c.pre = fc1.forward(x);
    c.hidden = activation == Activation::gelu ? Mat<Scalar>(gelu(c.pre)) : c.pre;
    return fc2.forward(c.hidden);
  }

  Mat<Scalar> backward(const Mat<Scalar>& x, const Cache& c, const Mat<Scalar>& dy, Mlp& grad) const {
    Mat<Scalar> dh = fc2.backward(c.hidden, dy, grad.fc2);
    if (activation == Activation::gelu) dh = dh.cwiseProduct(gelu_grad(c.pre));
    return fc1.backward(x, dh, grad.fc1);
  }

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    Linear<Scalar>::visit(self.fc1, prefix + "fc1.", f);
    Linear<Scalar>::visit(self.fc2, prefix + "fc2.", f);
  }
};

/// Copy of `params` with every matrix zeroed; used as a gradient buffer.
template <typename T>
T zeros_like(const T& params) {
  T out = params;
  T::visit(out, "", [](const std::string&, auto& m) { m.setZero(); });
  return out;
}

}  // namespace llavaseg::seg
