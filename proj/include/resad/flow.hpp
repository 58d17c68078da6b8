#pragma once

// Per-level Real-NVP style density estimator over C-dimensional features.
//
// Each coupling layer k maps u -> v as
//   u      = Q_k x                      (fixed orthogonal mixing)
//   x1, x2 = u[:c1], u[c1:]             (c1 = ceil(C/2))
//   r, t   = MLP([x1, pos])              (Linear -> ReLU -> Linear)
//   s      = (2a/pi) atan(r / a)         (soft clamp, |s| < a)
//   v      = [x1, x2 * exp(s) + t]
// and contributes sum(s) to log|det J|. A frozen per-channel scale follows
// the last layer. The base density is N(0, I).

#include <cmath>
#include <numbers>
#include <random>
#include <span>
#include <vector>

#include "resad/ndiff.hpp"

namespace resad::flow {

template <typename Scalar>
inline constexpr Scalar kLog2Pi = Scalar(1.8378770664093454835606594728112);

/// Fixed sinusoidal embedding, one row per position in (h, w) row-major
/// order. Channel 2i is sin(h / 10000^(4i/P)), channel 2i+1 is
/// cos(w / 10000^(4i/P)).
template <typename Scalar>
MatrixX<Scalar> pos_embed(Eigen::Index height, Eigen::Index width, Eigen::Index dim) {
  if (dim % 2 != 0) nd::fail("pos_embed: dimension must be even");
  if (height <= 0 || width <= 0 || dim < 0) nd::fail("pos_embed: invalid dimensions");
  MatrixX<Scalar> out(height * width, dim);
  for (Eigen::Index h = 0; h < height; ++h) {
    for (Eigen::Index w = 0; w < width; ++w) {
      for (Eigen::Index i = 0; i < dim / 2; ++i) {
        const double freq = std::pow(10000.0, -4.0 * double(i) / double(dim));
        out(h * width + w, 2 * i) = Scalar(std::sin(double(h) * freq));
        out(h * width + w, 2 * i + 1) = Scalar(std::cos(double(w) * freq));
      }
    }
  }
  return out;
}

/// Orthogonal factor of the QR decomposition of a seeded Gaussian matrix.
template <typename Scalar>
MatrixX<Scalar> random_orthogonal(Eigen::Index n, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd a(n, n);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = g(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ();
  return q.cast<Scalar>();
}

template <typename Scalar>
struct Coupling {
  MatrixX<Scalar> mix;  // Q, C x C, frozen
  nd::Param<Scalar> w1;  // (c1 + P) x hidden
  nd::Param<Scalar> b1;  // 1 x hidden
  nd::Param<Scalar> w2;  // hidden x 2*c2, zero at init
  nd::Param<Scalar> b2;  // 1 x 2*c2
};

struct FlowShape {
  Eigen::Index channels = 0;
  int n_layers = 8;
  Eigen::Index hidden = 0;  // 0 selects 2 * channels
  Eigen::Index pos_dim = 256;
  double clamp = 1.9;
};

template <typename Scalar>
class FlowLevel {
 public:
  struct LayerCache {
    MatrixX<Scalar> x1;
    MatrixX<Scalar> hidden_pre;
    MatrixX<Scalar> hidden;
    MatrixX<Scalar> raw_scale;
    MatrixX<Scalar> scale;
    MatrixX<Scalar> shift;
    MatrixX<Scalar> x2;
  };
  struct Cache {
    std::vector<LayerCache> layers;
    MatrixX<Scalar> pos;
  };

  FlowLevel() = default;

  static FlowLevel init(const FlowShape& shape, std::mt19937_64& rng) {
    if (shape.channels < 1 || shape.n_layers < 1 || shape.pos_dim < 0 || shape.hidden < 0 || !(shape.clamp > 0))
      nd::fail("init_flow: invalid dimensions");
    FlowLevel f;
    f.channels_ = shape.channels;
    f.split_ = (shape.channels + 1) / 2;
    f.pos_dim_ = shape.pos_dim;
    f.hidden_ = shape.hidden > 0 ? shape.hidden : 2 * shape.channels;
    f.clamp_ = Scalar(shape.clamp);
    f.out_scale_ = RowVectorX<Scalar>::Ones(shape.channels);
    const Eigen::Index in = f.split_ + f.pos_dim_;
    const Eigen::Index c2 = f.channels_ - f.split_;
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const double bound = 1.0 / std::sqrt(double(in));
    for (int k = 0; k < shape.n_layers; ++k) {
      Coupling<Scalar> c;
      c.mix = random_orthogonal<Scalar>(shape.channels, rng);
      MatrixX<Scalar> w1(in, f.hidden_);
      for (Eigen::Index i = 0; i < w1.size(); ++i) w1.data()[i] = Scalar(bound * u(rng));
      c.w1 = {"flow.w1", std::move(w1)};
      c.b1 = {"flow.b1", MatrixX<Scalar>::Zero(1, f.hidden_)};
      c.w2 = {"flow.w2", MatrixX<Scalar>::Zero(f.hidden_, 2 * c2)};
      c.b2 = {"flow.b2", MatrixX<Scalar>::Zero(1, 2 * c2)};
      f.layers_.push_back(std::move(c));
    }
    return f;
  }

  Eigen::Index channels() const { return channels_; }
  Eigen::Index pos_dim() const { return pos_dim_; }
  Eigen::Index hidden() const { return hidden_; }
  Eigen::Index split() const { return split_; }
  Scalar clamp() const { return clamp_; }
  std::size_t num_layers() const { return layers_.size(); }
  const std::vector<Coupling<Scalar>>& layers() const { return layers_; }
  std::vector<Coupling<Scalar>>& layers() { return layers_; }
  const RowVectorX<Scalar>& output_scale() const { return out_scale_; }
  void set_output_scale(RowVectorX<Scalar> s) {
    if (s.size() != channels_ || (s.array() == Scalar(0)).any()) nd::fail("flow: invalid output scale");
    out_scale_ = std::move(s);
  }

  /// Rebuilds a level from stored parts (deserialization).
  static FlowLevel assemble(Eigen::Index channels, Eigen::Index pos_dim, Eigen::Index hidden, Scalar clamp,
                            std::vector<Coupling<Scalar>> layers, RowVectorX<Scalar> out_scale) {
    FlowLevel f;
    f.channels_ = channels;
    f.split_ = (channels + 1) / 2;
    f.pos_dim_ = pos_dim;
    f.hidden_ = hidden;
    f.clamp_ = clamp;
    f.layers_ = std::move(layers);
    f.out_scale_ = std::move(out_scale);
    return f;
  }

  /// Trainable parameters in a fixed order (Q and the output scale are frozen).
  std::vector<nd::Param<Scalar>*> params() {
    std::vector<nd::Param<Scalar>*> out;
    for (auto& c : layers_) out.insert(out.end(), {&c.w1, &c.b1, &c.w2, &c.b2});
    return out;
  }

  /// Batched forward: X is N x C, pos is R x P with R dividing N; row i of X
  /// sees embedding row i mod R, so a batch of images shares one grid.
  /// Returns Z and fills logdet (N).
  MatrixX<Scalar> forward(const MatrixX<Scalar>& x, const MatrixX<Scalar>& pos, VectorX<Scalar>& logdet,
                          Cache* cache = nullptr) const {
    check(x, pos);
    const Eigen::Index n = x.rows();
    const Eigen::Index c2 = channels_ - split_;
    logdet.setZero(n);
    if (cache) {
      cache->layers.assign(layers_.size(), {});
      cache->pos = pos;
    }
    MatrixX<Scalar> cur = x;
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      const auto& layer = layers_[k];
      MatrixX<Scalar> u = cur * layer.mix.transpose();
      if (c2 > 0) {
        LayerCache lc;
        subnet(layer, u.leftCols(split_), pos, lc);
        const MatrixX<Scalar> x2 = u.rightCols(c2);
        u.rightCols(c2) = x2.cwiseProduct(lc.scale.array().exp().matrix()) + lc.shift;
        logdet += lc.scale.rowwise().sum();
        if (cache) {
          lc.x2 = x2;
          cache->layers[k] = std::move(lc);
        }
      }
      cur = std::move(u);
    }
    cur.array().rowwise() *= out_scale_.array();
    logdet.array() += out_scale_.array().abs().log().sum();
    return cur;
  }

  /// Gradients of a loss w.r.t. Z and logdet, pushed into w1/b1/w2/b2.
  /// Returns d(loss)/dX.
  MatrixX<Scalar> backward(const Cache& cache, const MatrixX<Scalar>& grad_z, const VectorX<Scalar>& grad_logdet) {
    const Eigen::Index c2 = channels_ - split_;
    MatrixX<Scalar> g = grad_z.array().rowwise() * out_scale_.array();
    for (std::size_t kk = layers_.size(); kk-- > 0;) {
      auto& layer = layers_[kk];
      if (c2 > 0) {
        const LayerCache& lc = cache.layers[kk];
        const MatrixX<Scalar> g2 = g.rightCols(c2);
        const MatrixX<Scalar> es = lc.scale.array().exp().matrix();
        MatrixX<Scalar> g_s = g2.cwiseProduct(lc.x2).cwiseProduct(es);
        g_s.colwise() += grad_logdet;
        // ds/dr = (2/pi) / (1 + (r/a)^2)
        const MatrixX<Scalar> ds =
            (Scalar(2) / std::numbers::pi_v<Scalar>) / (Scalar(1) + (lc.raw_scale.array() / clamp_).square());
        MatrixX<Scalar> g_out(g.rows(), 2 * c2);
        g_out.leftCols(c2) = g_s.cwiseProduct(ds);
        g_out.rightCols(c2) = g2;
        const auto g2nd = nd::affine_backward<Scalar>(lc.hidden, layer.w2.value, g_out);
        layer.w2.grad += g2nd.W;
        layer.b2.grad.row(0) += g2nd.b;
        const MatrixX<Scalar> g_hidden = nd::relu_backward<Scalar>(lc.hidden_pre, g2nd.x);
        layer.w1.grad.topRows(split_) += lc.x1.transpose() * g_hidden;
        if (pos_dim_ > 0) {
          const Eigen::Index r = cache.pos.rows();
          MatrixX<Scalar> per_pos = MatrixX<Scalar>::Zero(r, hidden_);
          for (Eigen::Index b = 0; b < g_hidden.rows(); b += r) per_pos += g_hidden.middleRows(b, r);
          layer.w1.grad.bottomRows(pos_dim_) += cache.pos.transpose() * per_pos;
        }
        layer.b1.grad.row(0) += g_hidden.colwise().sum();
        g.leftCols(split_) += g_hidden * layer.w1.value.topRows(split_).transpose();
        g.rightCols(c2) = g2.cwiseProduct(es);
      }
      g = g * layer.mix;
    }
    return g;
  }

  /// Exact algebraic inverse of `forward`.
  MatrixX<Scalar> inverse(const MatrixX<Scalar>& z, const MatrixX<Scalar>& pos) const {
    check(z, pos);
    const Eigen::Index c2 = channels_ - split_;
    MatrixX<Scalar> cur = z.array().rowwise() / out_scale_.array();
    for (std::size_t kk = layers_.size(); kk-- > 0;) {
      const auto& layer = layers_[kk];
      if (c2 > 0) {
        LayerCache lc;
        subnet(layer, cur.leftCols(split_), pos, lc);
        const MatrixX<Scalar> shifted = cur.rightCols(c2) - lc.shift;
        cur.rightCols(c2) = shifted.cwiseProduct((-lc.scale).array().exp().matrix());
      }
      cur = cur * layer.mix;
    }
    return cur;
  }

  /// log p(x) = log N(z; 0, I) + log|det J|, one value per row.
  VectorX<Scalar> log_prob(const MatrixX<Scalar>& x, const MatrixX<Scalar>& pos) const {
    VectorX<Scalar> logdet;
    const MatrixX<Scalar> z = forward(x, pos, logdet);
    return base_log_prob(z) + logdet;
  }

  static VectorX<Scalar> base_log_prob(const MatrixX<Scalar>& z) {
    return (-Scalar(0.5) * z.rowwise().squaredNorm()).array() - Scalar(0.5) * Scalar(z.cols()) * kLog2Pi<Scalar>;
  }

 private:
  void check(const MatrixX<Scalar>& x, const MatrixX<Scalar>& pos) const {
    if (x.cols() != channels_) nd::fail("flow: feature dimension mismatch");
    if (pos.cols() != pos_dim_) nd::fail("flow: positional embedding mismatch");
    if (pos_dim_ > 0 && (pos.rows() == 0 || x.rows() % pos.rows() != 0))
      nd::fail("flow: positional embedding rows must divide the batch");
  }

  template <typename Derived>
  void subnet(const Coupling<Scalar>& layer, const Eigen::MatrixBase<Derived>& x1, const MatrixX<Scalar>& pos,
              LayerCache& lc) const {
    const Eigen::Index c2 = channels_ - split_;
    lc.x1 = x1;
    lc.hidden_pre = lc.x1 * layer.w1.value.topRows(split_);
    if (pos_dim_ > 0) {
      const MatrixX<Scalar> pw = pos * layer.w1.value.bottomRows(pos_dim_);
      for (Eigen::Index b = 0; b < lc.hidden_pre.rows(); b += pw.rows()) lc.hidden_pre.middleRows(b, pw.rows()) += pw;
    }
    lc.hidden_pre.rowwise() += layer.b1.value.row(0);
    lc.hidden = nd::relu<Scalar>(lc.hidden_pre);
    const MatrixX<Scalar> out = nd::affine<Scalar>(lc.hidden, layer.w2.value, layer.b2.value.row(0));
    lc.raw_scale = out.leftCols(c2);
    lc.scale = ((Scalar(2) * clamp_ / std::numbers::pi_v<Scalar>) * (lc.raw_scale.array() / clamp_).atan()).matrix();
    lc.shift = out.rightCols(c2);
  }

  Eigen::Index channels_ = 0;
  Eigen::Index split_ = 0;
  Eigen::Index pos_dim_ = 0;
  Eigen::Index hidden_ = 0;
  Scalar clamp_ = Scalar(1.9);
  std::vector<Coupling<Scalar>> layers_;
  RowVectorX<Scalar> out_scale_;
};

}  // namespace resad::flow
