#pragma once

// Small hand-differentiated numerical core. Every op comes as a forward
// function plus an explicit backward that returns exact gradients; there is
// no tape. A 1x1 convolution over an H x W x C map is `affine` applied to the
// (H*W) x C flattening.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "resad/types.hpp"

namespace resad::nd {

[[noreturn]] inline void fail(const std::string& what) { throw Error("ndiff", what); }

template <typename Scalar>
struct Param {
  std::string name;
  MatrixX<Scalar> value;
  MatrixX<Scalar> grad;

  Param() = default;
  Param(std::string n, MatrixX<Scalar> v)
      : name(std::move(n)), value(std::move(v)), grad(MatrixX<Scalar>::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

// ---------------------------------------------------------------------------
// affine: y = x W + b

template <typename Scalar>
MatrixX<Scalar> affine(const MatrixX<Scalar>& x, const MatrixX<Scalar>& W, const RowVectorX<Scalar>& b) {
  if (x.cols() != W.rows() || b.size() != W.cols()) fail("affine: shape mismatch");
  MatrixX<Scalar> y = x * W;
  y.rowwise() += b;
  return y;
}

template <typename Scalar>
struct AffineGrads {
  MatrixX<Scalar> x;
  MatrixX<Scalar> W;
  RowVectorX<Scalar> b;
};

template <typename Scalar>
AffineGrads<Scalar> affine_backward(const MatrixX<Scalar>& x, const MatrixX<Scalar>& W, const MatrixX<Scalar>& gy) {
  if (gy.rows() != x.rows() || gy.cols() != W.cols()) fail("affine_backward: shape mismatch");
  return {gy * W.transpose(), x.transpose() * gy, gy.colwise().sum()};
}

// ---------------------------------------------------------------------------
// relu; the subgradient at 0 is 0.

template <typename Scalar>
MatrixX<Scalar> relu(const MatrixX<Scalar>& x) {
  return x.cwiseMax(Scalar(0));
}

template <typename Scalar>
MatrixX<Scalar> relu_backward(const MatrixX<Scalar>& x, const MatrixX<Scalar>& gy) {
  return (x.array() > Scalar(0)).select(gy, Scalar(0));
}

// ---------------------------------------------------------------------------
// batch normalization over rows (positions), per column (channel).

enum class Mode { Train, Eval };

template <typename Scalar>
struct BatchNormState {
  RowVectorX<Scalar> running_mean;
  RowVectorX<Scalar> running_var;
  Scalar momentum = Scalar(0.1);
  Scalar eps = Scalar(1e-5);

  static BatchNormState init(Eigen::Index channels, Scalar momentum = Scalar(0.1), Scalar eps = Scalar(1e-5)) {
    return {RowVectorX<Scalar>::Zero(channels), RowVectorX<Scalar>::Ones(channels), momentum, eps};
  }
};

/// Saved forward quantities needed by the backward pass.
template <typename Scalar>
struct BatchNormCache {
  Mode mode = Mode::Eval;
  MatrixX<Scalar> x_hat;
  RowVectorX<Scalar> inv_std;
};

/// Train mode normalizes with the biased batch variance and folds the
/// unbiased variance into the running estimate.
template <typename Scalar>
MatrixX<Scalar> batch_norm(const MatrixX<Scalar>& x, const RowVectorX<Scalar>& gamma,
                           const RowVectorX<Scalar>& beta, Mode mode, BatchNormState<Scalar>& state,
                           BatchNormCache<Scalar>* cache = nullptr) {
  const Eigen::Index n = x.rows();
  if (gamma.size() != x.cols() || beta.size() != x.cols()) fail("batch_norm: shape mismatch");
  if (!(state.eps > Scalar(0))) fail("batch_norm: eps must be positive");
  RowVectorX<Scalar> mean, var;
  if (mode == Mode::Train) {
    if (n < 2) fail("batch_norm: train mode needs at least 2 rows");
    mean = x.colwise().mean();
    var = (x.rowwise() - mean).array().square().colwise().sum().matrix() / Scalar(n);
    const Scalar m = state.momentum;
    state.running_mean = (Scalar(1) - m) * state.running_mean + m * mean;
    state.running_var = (Scalar(1) - m) * state.running_var + m * var * (Scalar(n) / Scalar(n - 1));
  } else {
    if (state.running_mean.size() != x.cols()) fail("batch_norm: running stats shape mismatch");
    mean = state.running_mean;
    var = state.running_var;
  }
  const RowVectorX<Scalar> inv_std = (var.array() + state.eps).rsqrt().matrix();
  MatrixX<Scalar> x_hat = (x.rowwise() - mean).array().rowwise() * inv_std.array();
  MatrixX<Scalar> y = x_hat.array().rowwise() * gamma.array();
  y.rowwise() += beta;
  if (cache) *cache = {mode, std::move(x_hat), inv_std};
  return y;
}

template <typename Scalar>
struct BatchNormGrads {
  MatrixX<Scalar> x;
  RowVectorX<Scalar> gamma;
  RowVectorX<Scalar> beta;
};

template <typename Scalar>
BatchNormGrads<Scalar> batch_norm_backward(const BatchNormCache<Scalar>& cache, const RowVectorX<Scalar>& gamma,
                                           const MatrixX<Scalar>& gy) {
  const Eigen::Index n = gy.rows();
  BatchNormGrads<Scalar> g;
  g.beta = gy.colwise().sum();
  g.gamma = gy.cwiseProduct(cache.x_hat).colwise().sum();
  const MatrixX<Scalar> g_hat = gy.array().rowwise() * gamma.array();
  if (cache.mode == Mode::Eval) {
    g.x = g_hat.array().rowwise() * cache.inv_std.array();
    return g;
  }
  const RowVectorX<Scalar> sum_g = g_hat.colwise().sum();
  const RowVectorX<Scalar> sum_gx = g_hat.cwiseProduct(cache.x_hat).colwise().sum();
  MatrixX<Scalar> t = Scalar(n) * g_hat;
  t.rowwise() -= sum_g;
  t -= (cache.x_hat.array().rowwise() * sum_gx.array()).matrix();
  g.x = (t.array().rowwise() * (cache.inv_std.array() / Scalar(n))).matrix();
  return g;
}

// ---------------------------------------------------------------------------
// Adam with decoupled weight decay.

template <typename Scalar>
struct AdamState {
  Scalar lr = Scalar(1e-5);
  Scalar beta1 = Scalar(0.9);
  Scalar beta2 = Scalar(0.999);
  Scalar eps = Scalar(1e-8);
  Scalar weight_decay = Scalar(0);
  long step = 0;
  std::vector<MatrixX<Scalar>> m;
  std::vector<MatrixX<Scalar>> v;
};

/// One update of every parameter; gradients are left for the caller to zero.
template <typename Scalar>
void adam_step(std::span<Param<Scalar>* const> params, AdamState<Scalar>& state) {
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.push_back(MatrixX<Scalar>::Zero(p->value.rows(), p->value.cols()));
      state.v.push_back(MatrixX<Scalar>::Zero(p->value.rows(), p->value.cols()));
    }
  }
  if (state.m.size() != params.size()) fail("adam_step: parameter list changed");
  for (const auto* p : params)
    if (!p->grad.allFinite()) fail("adam_step: non-finite gradient in " + p->name);

  ++state.step;
  const Scalar bc1 = Scalar(1) - std::pow(state.beta1, Scalar(state.step));
  const Scalar bc2 = Scalar(1) - std::pow(state.beta2, Scalar(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    if (state.weight_decay != Scalar(0)) p.value -= state.lr * state.weight_decay * p.value;
    state.m[i] = state.beta1 * state.m[i] + (Scalar(1) - state.beta1) * p.grad;
    state.v[i] = state.beta2 * state.v[i] + (Scalar(1) - state.beta2) * p.grad.cwiseAbs2();
    const auto m_hat = state.m[i].array() / bc1;
    const auto v_hat = state.v[i].array() / bc2;
    p.value.array() -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
  }
}

template <typename Scalar>
void adam_step(std::vector<Param<Scalar>*>& params, AdamState<Scalar>& state) {
  adam_step(std::span<Param<Scalar>* const>(params.data(), params.size()), state);
}

// ---------------------------------------------------------------------------

/// Central differences of `f` around `x`, compared elementwise with the
/// analytic gradient. Returns max |a - n| / max(|a|, |n|, 1e-8).
template <typename Scalar, typename F>
Scalar finite_diff_check(F&& f, const MatrixX<Scalar>& x, const MatrixX<Scalar>& analytic, Scalar eps) {
  if (analytic.rows() != x.rows() || analytic.cols() != x.cols()) fail("finite_diff_check: shape mismatch");
  MatrixX<Scalar> probe = x;
  Scalar worst = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const Scalar orig = probe(i, j);
      probe(i, j) = orig + eps;
      const Scalar up = f(probe);
      probe(i, j) = orig - eps;
      const Scalar down = f(probe);
      probe(i, j) = orig;
      const Scalar numeric = (up - down) / (Scalar(2) * eps);
      const Scalar a = analytic(i, j);
      const Scalar denom = std::max({std::abs(a), std::abs(numeric), Scalar(1e-8)});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace resad::nd
