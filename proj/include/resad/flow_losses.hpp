#pragma once

#include <algorithm>
#include <span>
#include <vector>

#include "resad/flow.hpp"

namespace resad::flow {

/// Negative log-likelihood averaged per level, then over levels:
/// (1/L) sum_l (1/N_l) sum_i [ C_l/2 log 2pi + z_i.z_i/2 - logdet_i ].
/// Gradients w.r.t. each level's Z and logdet are written when requested.
template <typename Scalar>
Scalar ml_loss(std::span<const MatrixX<Scalar>> z, std::span<const VectorX<Scalar>> logdet,
               std::vector<MatrixX<Scalar>>* grad_z = nullptr, std::vector<VectorX<Scalar>>* grad_logdet = nullptr) {
  const std::size_t L = z.size();
  if (L == 0 || logdet.size() != L) nd::fail("ml_loss: empty batch");
  if (grad_z) grad_z->assign(L, {});
  if (grad_logdet) grad_logdet->assign(L, {});
  Scalar total = 0;
  for (std::size_t l = 0; l < L; ++l) {
    const Eigen::Index n = z[l].rows();
    if (n == 0 || logdet[l].size() != n) nd::fail("ml_loss: empty batch");
    const Scalar scale = Scalar(1) / (Scalar(L) * Scalar(n));
    const Scalar c = Scalar(z[l].cols());
    const Scalar sum = Scalar(n) * c / Scalar(2) * kLog2Pi<Scalar> + Scalar(0.5) * z[l].squaredNorm() - logdet[l].sum();
    total += scale * sum;
    if (grad_z) (*grad_z)[l] = scale * z[l];
    if (grad_logdet) (*grad_logdet)[l] = VectorX<Scalar>::Constant(n, -scale);
  }
  return total;
}

/// Boundary-guided semi-push-pull loss:
///   sum_normal |min(logp - b_n, 0)| + sum_abnormal |max(logp - b_n + tau, 0)|.
/// `grad`, when given, receives d(loss)/d(logp); 0 at the kinks.
template <typename Scalar>
Scalar bgspp_loss(std::span<const Scalar> logps, std::span<const std::uint8_t> labels, Scalar b_n, Scalar tau,
                  std::vector<Scalar>* grad = nullptr) {
  if (logps.size() != labels.size()) nd::fail("bgspp_loss: length mismatch");
  if (!(tau > Scalar(0))) nd::fail("bgspp_loss: tau must be positive");
  if (grad) grad->assign(logps.size(), Scalar(0));
  Scalar total = 0;
  for (std::size_t i = 0; i < logps.size(); ++i) {
    if (labels[i] > 1) nd::fail("bgspp_loss: label outside {0,1}");
    if (labels[i] == 0) {
      const Scalar d = logps[i] - b_n;
      if (d < Scalar(0)) {
        total -= d;
        if (grad) (*grad)[i] = Scalar(-1);
      }
    } else {
      const Scalar d = logps[i] - b_n + tau;
      if (d > Scalar(0)) {
        total += d;
        if (grad) (*grad)[i] = Scalar(1);
      }
    }
  }
  return total;
}

/// Linearly interpolated q-quantile of the normal log-likelihoods; used as
/// the normal boundary and treated as a constant.
template <typename Scalar>
Scalar compute_bn(std::span<const Scalar> normal_logps, Scalar q) {
  if (normal_logps.empty()) nd::fail("compute_bn: no normal log-likelihoods");
  if (q < Scalar(0) || q > Scalar(1)) nd::fail("compute_bn: quantile outside [0,1]");
  std::vector<Scalar> v(normal_logps.begin(), normal_logps.end());
  std::sort(v.begin(), v.end());
  const Scalar pos = q * Scalar(v.size() - 1);
  const std::size_t lo = std::size_t(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const Scalar frac = pos - Scalar(lo);
  return v[lo] + frac * (v[hi] - v[lo]);
}

}  // namespace resad::flow
