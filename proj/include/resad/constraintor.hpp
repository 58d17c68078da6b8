#pragma once

#include <random>
#include <span>
#include <vector>

#include "resad/ndiff.hpp"

namespace resad::constraintor {

/// One level's 1x1 conv + batch norm + ReLU. Maps an N x C block of residual
/// features to an N x C block of non-negative constrained features.
template <typename Scalar>
struct LevelNet {
  nd::Param<Scalar> weight;  // C x C
  nd::Param<Scalar> bias;    // 1 x C
  nd::Param<Scalar> gamma;   // 1 x C
  nd::Param<Scalar> beta;    // 1 x C
  nd::BatchNormState<Scalar> bn;

  struct Cache {
    MatrixX<Scalar> input;
    MatrixX<Scalar> pre_bn;
    MatrixX<Scalar> pre_relu;
    nd::BatchNormCache<Scalar> bn;
  };

  Eigen::Index channels() const { return weight.value.rows(); }

  /// Uniform(-1/sqrt(C), 1/sqrt(C)) conv weights and bias, unit gamma, zero beta.
  static LevelNet init(Eigen::Index channels, std::mt19937_64& rng, Scalar bn_momentum = Scalar(0.1)) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const Scalar bound = Scalar(1) / std::sqrt(Scalar(channels));
    MatrixX<Scalar> W(channels, channels);
    for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = bound * Scalar(u(rng));
    MatrixX<Scalar> b(1, channels);
    for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = bound * Scalar(u(rng));
    LevelNet net;
    net.weight = {"constraintor.weight", std::move(W)};
    net.bias = {"constraintor.bias", std::move(b)};
    net.gamma = {"constraintor.bn.gamma", MatrixX<Scalar>::Ones(1, channels)};
    net.beta = {"constraintor.bn.beta", MatrixX<Scalar>::Zero(1, channels)};
    net.bn = nd::BatchNormState<Scalar>::init(channels, bn_momentum);
    return net;
  }

  MatrixX<Scalar> forward(const MatrixX<Scalar>& x, nd::Mode mode, Cache* cache = nullptr) {
    if (x.cols() != channels()) nd::fail("constraintor: channel mismatch");
    MatrixX<Scalar> a = nd::affine<Scalar>(x, weight.value, bias.value.row(0));
    nd::BatchNormCache<Scalar> bn_cache;
    MatrixX<Scalar> n = nd::batch_norm<Scalar>(a, gamma.value.row(0), beta.value.row(0), mode, bn,
                                               cache ? &bn_cache : nullptr);
    MatrixX<Scalar> y = nd::relu<Scalar>(n);
    if (cache) *cache = {x, std::move(a), std::move(n), std::move(bn_cache)};
    return y;
  }

  /// Eval-mode forward that leaves the running statistics untouched.
  MatrixX<Scalar> apply(const MatrixX<Scalar>& x) const {
    auto copy = bn;
    return forward_with_state(x, copy);
  }

  /// Accumulates parameter gradients; returns the gradient w.r.t. the input.
  MatrixX<Scalar> backward(const Cache& cache, const MatrixX<Scalar>& gy) {
    const MatrixX<Scalar> g_n = nd::relu_backward<Scalar>(cache.pre_relu, gy);
    const auto g_bn = nd::batch_norm_backward<Scalar>(cache.bn, gamma.value.row(0), g_n);
    gamma.grad.row(0) += g_bn.gamma;
    beta.grad.row(0) += g_bn.beta;
    const auto g_aff = nd::affine_backward<Scalar>(cache.input, weight.value, g_bn.x);
    weight.grad += g_aff.W;
    bias.grad.row(0) += g_aff.b;
    return g_aff.x;
  }

  std::vector<nd::Param<Scalar>*> params() { return {&weight, &bias, &gamma, &beta}; }

 private:
  MatrixX<Scalar> forward_with_state(const MatrixX<Scalar>& x, nd::BatchNormState<Scalar>& state) const {
    if (x.cols() != channels()) nd::fail("constraintor: channel mismatch");
    const MatrixX<Scalar> a = nd::affine<Scalar>(x, weight.value, bias.value.row(0));
    return nd::relu<Scalar>(
        nd::batch_norm<Scalar>(a, gamma.value.row(0), beta.value.row(0), nd::Mode::Eval, state));
  }
};

struct OccOptions {
  /// Use sqrt(||x'||^2 + 1) - 1 instead of sqrt(||x'|| + 1) - 1.
  bool squared_norm = false;
  /// Keep the ||x' - x|| term on abnormal positions.
  bool abnormal_term = true;
};

/// Sum over rows of the abnormal-invariant OCC terms, multiplied by `scale`.
/// `constrained` and `initial` are N x C, `labels` has N entries in {0, 1}.
/// If `grad` is non-null it receives d(loss)/d(constrained); the initial
/// residuals are constants.
template <typename Scalar>
Scalar occ_level_loss(const MatrixX<Scalar>& constrained, const MatrixX<Scalar>& initial,
                      std::span<const std::uint8_t> labels, Scalar scale, const OccOptions& opt,
                      MatrixX<Scalar>* grad = nullptr) {
  const Eigen::Index n = constrained.rows();
  if (initial.rows() != n || initial.cols() != constrained.cols() || Eigen::Index(labels.size()) != n)
    nd::fail("occ_loss: dimension mismatch");
  if (grad) grad->setZero(n, constrained.cols());
  Scalar total = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const std::uint8_t y = labels[std::size_t(i)];
    if (y > 1) nd::fail("occ_loss: label outside {0,1}");
    if (y == 0) {
      const auto row = constrained.row(i);
      const Scalar sq = row.squaredNorm();
      if (opt.squared_norm) {
        const Scalar root = std::sqrt(sq + Scalar(1));
        total += root - Scalar(1);
        if (grad) grad->row(i) = scale * row / root;
      } else {
        const Scalar norm = std::sqrt(sq);
        const Scalar root = std::sqrt(norm + Scalar(1));
        total += root - Scalar(1);
        if (grad && norm > Scalar(0)) grad->row(i) = scale * row / (Scalar(2) * root * norm);
      }
    } else if (opt.abnormal_term) {
      const RowVectorX<Scalar> diff = constrained.row(i) - initial.row(i);
      const Scalar norm = diff.norm();
      total += norm;
      if (grad && norm > Scalar(0)) grad->row(i) = scale * diff / norm;
    }
  }
  return scale * total;
}

/// Loss over a whole image: (1/L) sum_l (1/(H_l W_l)) sum_positions terms.
/// `grads`, when given, is resized to one N_l x C_l block per level.
template <typename Scalar>
Scalar occ_loss(std::span<const MatrixX<Scalar>> constrained, std::span<const MatrixX<Scalar>> initial,
                std::span<const std::vector<std::uint8_t>> labels, const OccOptions& opt = {},
                std::vector<MatrixX<Scalar>>* grads = nullptr) {
  const std::size_t L = constrained.size();
  if (L == 0 || initial.size() != L || labels.size() != L) nd::fail("occ_loss: level count mismatch");
  if (grads) grads->assign(L, MatrixX<Scalar>());
  Scalar total = 0;
  for (std::size_t l = 0; l < L; ++l) {
    const Scalar scale = Scalar(1) / (Scalar(L) * Scalar(constrained[l].rows()));
    total += occ_level_loss<Scalar>(constrained[l], initial[l], labels[l], scale, opt,
                                    grads ? &(*grads)[l] : nullptr);
  }
  return total;
}

}  // namespace resad::constraintor
