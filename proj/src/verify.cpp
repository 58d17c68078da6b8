#include "resad/verify.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>

#include "resad/constraintor.hpp"
#include "resad/flow_losses.hpp"
#include "resad/scoring.hpp"

namespace resad::verify {
namespace {

using M = MatrixX<double>;
using V = VectorX<double>;
using R = RowVectorX<double>;

M gaussian(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> g(0.0, sd);
  M m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

/// Finite-difference check of one parameter against its accumulated grad.
double check_param(nd::Param<double>& p, const std::function<double()>& loss, double eps) {
  const M saved = p.value;
  const double err = nd::finite_diff_check<double>(
      [&](const M& probe) {
        p.value = probe;
        return loss();
      },
      saved, p.grad, eps);
  p.value = saved;
  return err;
}

Check make(std::string name, double worst, double threshold, std::string detail = {}) {
  return {std::move(name), worst < threshold, worst, threshold, std::move(detail)};
}

}  // namespace

double brute_force_auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  std::int64_t twice = 0, pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!labels[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j]) continue;
      ++pairs;
      if (scores[i] > scores[j]) twice += 2;
      else if (scores[i] == scores[j]) twice += 1;
    }
  }
  return double(twice) / (2.0 * double(pairs));
}

double numerical_logdet(const flow::FlowLevel<double>& f, const R& x, const R& pos, double eps) {
  const Eigen::Index c = x.size();
  M jac(c, c);
  V ld;
  for (Eigen::Index j = 0; j < c; ++j) {
    M up = x, down = x;
    up(0, j) += eps;
    down(0, j) -= eps;
    const M zu = f.forward(up, pos, ld);
    const M zd = f.forward(down, pos, ld);
    jac.col(j) = ((zu - zd) / (2 * eps)).transpose();
  }
  Eigen::FullPivLU<Eigen::MatrixXd> lu(jac);
  double out = 0;
  const Eigen::MatrixXd u = lu.matrixLU().triangularView<Eigen::Upper>();
  for (Eigen::Index i = 0; i < c; ++i) out += std::log(std::abs(u(i, i)));
  return out;
}

void randomize(flow::FlowLevel<double>& f, std::mt19937_64& rng, double scale) {
  for (auto* p : f.params()) p->value = gaussian(p->value.rows(), p->value.cols(), rng, scale);
}

flow::FlowLevel<double> random_flow(Eigen::Index channels, Eigen::Index pos_dim, std::mt19937_64& rng, int n_layers,
                                    double scale) {
  auto f = flow::FlowLevel<double>::init({channels, n_layers, 0, pos_dim, 1.9}, rng);
  randomize(f, rng, scale);
  return f;
}

Check flow_inverse(int trials, std::span<const int> channels, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  double worst = 0;
  for (int c : channels) {
    for (int t = 0; t < trials; ++t) {
      const auto f = random_flow(c, 4, rng, 8, 0.3);
      const M x = gaussian(1, c, rng, 2.0);
      const M pos = gaussian(1, 4, rng);
      V ld;
      const M back = f.inverse(f.forward(x, pos, ld), pos);
      worst = std::max(worst, (back - x).norm() / std::max(x.norm(), 1e-12));
    }
  }
  return make("flow inverse(forward(x)) = x", worst, 1e-5, "relative L2 error");
}

Check flow_logdet(int trials, std::span<const int> channels, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  double worst = 0;
  for (int c : channels) {
    for (int t = 0; t < trials; ++t) {
      const auto f = random_flow(c, 4, rng, 8, 0.3);
      const R x = gaussian(1, c, rng);
      const R pos = gaussian(1, 4, rng);
      V ld;
      f.forward(x, pos, ld);
      const double num = numerical_logdet(f, x, pos);
      worst = std::max(worst, std::abs(ld[0] - num) / std::max({std::abs(ld[0]), std::abs(num), 1e-8}));
    }
  }
  return make("flow analytic logdet = numerical Jacobian logdet", worst, 1e-3, "relative error");
}

Check grad_affine(int instances, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  double worst = 0;
  for (int k = 0; k < instances; ++k) {
    M x = gaussian(3, 4, rng), W = gaussian(4, 5, rng);
    R b = gaussian(1, 5, rng);
    const M r = gaussian(3, 5, rng);
    const auto g = nd::affine_backward<double>(x, W, r);
    auto loss = [&] { return nd::affine<double>(x, W, b).cwiseProduct(r).sum(); };
    worst = std::max(worst, nd::finite_diff_check<double>([&](const M& p) { M s = x; x = p; double v = loss(); x = s; return v; }, x, g.x, 1e-4));
    worst = std::max(worst, nd::finite_diff_check<double>([&](const M& p) { M s = W; W = p; double v = loss(); W = s; return v; }, W, g.W, 1e-4));
    worst = std::max(worst, nd::finite_diff_check<double>([&](const M& p) { R s = b; b = p; double v = loss(); b = s; return v; }, M(b), M(g.b), 1e-4));
  }
  return make("affine gradients", worst, 1e-4);
}

Check grad_batch_norm(int instances, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  double worst = 0;
  for (int k = 0; k < instances; ++k) {
    M x = gaussian(4, 3, rng);
    R gamma = gaussian(1, 3, rng), beta = gaussian(1, 3, rng);
    const M r = gaussian(4, 3, rng);
    const auto state0 = nd::BatchNormState<double>::init(3);
    auto loss = [&] {
      auto st = state0;
      return nd::batch_norm<double>(x, gamma, beta, nd::Mode::Train, st).cwiseProduct(r).sum();
    };
    auto st = state0;
    nd::BatchNormCache<double> cache;
    nd::batch_norm<double>(x, gamma, beta, nd::Mode::Train, st, &cache);
    const auto g = nd::batch_norm_backward<double>(cache, gamma, r);
    worst = std::max(worst, nd::finite_diff_check<double>([&](const M& p) { M s = x; x = p; double v = loss(); x = s; return v; }, x, g.x, 1e-4));
    worst = std::max(worst, nd::finite_diff_check<double>([&](const M& p) { R s = gamma; gamma = p; double v = loss(); gamma = s; return v; }, M(gamma), M(g.gamma), 1e-4));
    worst = std::max(worst, nd::finite_diff_check<double>([&](const M& p) { R s = beta; beta = p; double v = loss(); beta = s; return v; }, M(beta), M(g.beta), 1e-4));
  }
  return make("batch_norm gradients (train mode)", worst, 1e-4);
}

Check grad_relu(int instances, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  double worst = 0;
  for (int k = 0; k < instances; ++k) {
    M x = gaussian(4, 5, rng);
    for (Eigen::Index i = 0; i < x.size(); ++i)  // keep away from the kink
      if (std::abs(x.data()[i]) < 1e-2) x.data()[i] = 0.5;
    const M r = gaussian(4, 5, rng);
    const M g = nd::relu_backward<double>(x, r);
    worst = std::max(worst, nd::finite_diff_check<double>(
                                [&](const M& p) { return nd::relu<double>(p).cwiseProduct(r).sum(); }, x, g, 1e-4));
  }
  return make("relu gradients (away from 0)", worst, 1e-4);
}

Check grad_occ(int instances, bool squared_norm, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  double worst = 0;
  const constraintor::OccOptions opt{squared_norm, true};
  for (int k = 0; k < instances; ++k) {
    const M xc = gaussian(6, 4, rng).cwiseAbs();
    const M x0 = gaussian(6, 4, rng);
    const std::vector<std::uint8_t> y{0, 1, 0, 1, 1, 0};
    M g;
    constraintor::occ_level_loss<double>(xc, x0, y, 1.0 / 6, opt, &g);
    worst = std::max(worst, nd::finite_diff_check<double>(
                                [&](const M& p) { return constraintor::occ_level_loss<double>(p, x0, y, 1.0 / 6, opt); },
                                xc, g, 1e-4));
  }
  return make(squared_norm ? "OCC loss gradients (squared-norm variant)" : "OCC loss gradients (both terms)", worst,
              1e-4);
}

Check grad_constraintor(int instances, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  double worst = 0;
  for (int k = 0; k < instances; ++k) {
    for (const nd::Mode mode : {nd::Mode::Train, nd::Mode::Eval}) {
      auto net = constraintor::LevelNet<double>::init(4, rng);
      net.gamma.value = gaussian(1, 4, rng).cwiseAbs().array() + 0.5;
      net.beta.value = gaussian(1, 4, rng, 0.5);
      net.bn.running_mean = gaussian(1, 4, rng, 0.3);
      net.bn.running_var = gaussian(1, 4, rng).cwiseAbs().array() + 0.5;
      M x = gaussian(8, 4, rng);
      const M x0 = gaussian(8, 4, rng);
      const std::vector<std::uint8_t> y{0, 0, 1, 0, 1, 0, 0, 1};
      const auto bn0 = net.bn;
      auto loss = [&] {
        net.bn = bn0;
        const M out = net.forward(x, mode);
        return constraintor::occ_level_loss<double>(out, x0, y, 1.0 / 8, {});
      };
      net.bn = bn0;
      constraintor::LevelNet<double>::Cache cache;
      const M out = net.forward(x, mode, &cache);
      M g_out;
      constraintor::occ_level_loss<double>(out, x0, y, 1.0 / 8, {}, &g_out);
      const M gx = net.backward(cache, g_out);
      for (auto* p : net.params()) {
        // Batch statistics cancel a per-channel bias exactly.
        if (mode == nd::Mode::Train && p == &net.bias) {
          worst = std::max(worst, p->grad.cwiseAbs().maxCoeff() > 1e-12 ? 1.0 : 0.0);
          continue;
        }
        worst = std::max(worst, check_param(*p, loss, 1e-6));
      }
      worst = std::max(worst, nd::finite_diff_check<double>([&](const M& p) { M s = x; x = p; double v = loss(); x = s; return v; }, x, gx, 1e-6));
    }
  }
  return make("constraintor + OCC loss parameter gradients", worst, 1e-4);
}

namespace {

// Gradient check of a scalar loss of the flow output through every trainable
// parameter and the input.
template <typename Loss, typename Grad>
double flow_chain_check(flow::FlowLevel<double>& f, M& x, const M& pos, Loss&& loss_of, Grad&& grads_of) {
  for (auto* p : f.params()) p->zero_grad();
  typename flow::FlowLevel<double>::Cache cache;
  V ld;
  const M z = f.forward(x, pos, ld, &cache);
  M gz;
  V gld;
  grads_of(z, ld, gz, gld);
  const M gx = f.backward(cache, gz, gld);
  auto loss = [&] {
    V l;
    const M zz = f.forward(x, pos, l);
    return loss_of(zz, l);
  };
  double worst = 0;
  for (auto* p : f.params()) worst = std::max(worst, check_param(*p, loss, 1e-5));
  worst = std::max(worst, nd::finite_diff_check<double>([&](const M& p) { M s = x; x = p; double v = loss(); x = s; return v; }, x, gx, 1e-5));
  return worst;
}

}  // namespace

Check grad_ml(int instances, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  double worst = 0;
  for (int k = 0; k < instances; ++k) {
    auto f = random_flow(4, 4, rng, 3, 0.4);
    M x = gaussian(5, 4, rng);
    const M pos = gaussian(5, 4, rng);
    auto loss_of = [](const M& z, const V& ld) {
      const std::vector<M> zs{z};
      const std::vector<V> lds{ld};
      return flow::ml_loss<double>(zs, lds);
    };
    auto grads_of = [](const M& z, const V& ld, M& gz, V& gld) {
      const std::vector<M> zs{z};
      const std::vector<V> lds{ld};
      std::vector<M> a;
      std::vector<V> b;
      flow::ml_loss<double>(zs, lds, &a, &b);
      gz = a[0];
      gld = b[0];
    };
    worst = std::max(worst, flow_chain_check(f, x, pos, loss_of, grads_of));
  }
  return make("ML loss gradients through the flow", worst, 1e-4);
}

Check grad_bgspp(int instances, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  double worst = 0;
  const double tau = 0.1;
  for (int k = 0; k < instances; ++k) {
    // Direct: d loss / d logp away from the kinks.
    const double b_n = -4.0;
    M lp = gaussian(1, 10, rng, 2.0).array() + b_n;
    std::vector<std::uint8_t> y(10);
    for (int i = 0; i < 10; ++i) {
      y[std::size_t(i)] = std::uint8_t(i % 3 == 0);
      double& v = lp(0, i);
      if (std::abs(v - b_n) < 1e-3 || std::abs(v - b_n + tau) < 1e-3) v += 0.01;
    }
    std::vector<double> g;
    flow::bgspp_loss<double>(std::span<const double>(lp.data(), 10), y, b_n, tau, &g);
    const M gm = Eigen::Map<const M>(g.data(), 1, 10);
    worst = std::max(worst, nd::finite_diff_check<double>(
                                [&](const M& p) { return flow::bgspp_loss<double>(std::span<const double>(p.data(), 10), y, b_n, tau); },
                                lp, gm, 1e-4));

    // Through the flow, with the boundary set from the initial batch.
    auto f = random_flow(4, 4, rng, 3, 0.4);
    M x = gaussian(8, 4, rng, 1.5);
    const M pos = gaussian(8, 4, rng);
    const std::vector<std::uint8_t> yl{0, 0, 1, 0, 1, 0, 1, 0};
    const V base = f.log_prob(x, pos);
    std::vector<double> normals;
    for (int i = 0; i < 8; ++i)
      if (!yl[std::size_t(i)]) normals.push_back(base[i]);
    const double bound = flow::compute_bn<double>(normals, 0.5) + 0.123;
    auto loss_of = [&](const M& z, const V& ld) {
      const V logp = flow::FlowLevel<double>::base_log_prob(z) + ld;
      return flow::bgspp_loss<double>(std::span<const double>(logp.data(), 8), yl, bound, tau);
    };
    auto grads_of = [&](const M& z, const V& ld, M& gz, V& gld) {
      const V logp = flow::FlowLevel<double>::base_log_prob(z) + ld;
      std::vector<double> gg;
      flow::bgspp_loss<double>(std::span<const double>(logp.data(), 8), yl, bound, tau, &gg);
      gld = Eigen::Map<const V>(gg.data(), 8);
      gz = -(gld.asDiagonal() * z);
    };
    worst = std::max(worst, flow_chain_check(f, x, pos, loss_of, grads_of));
  }
  return make("BG-SPP loss gradients (non-kink points)", worst, 1e-4);
}

Check closed_form_log_prob() {
  std::mt19937_64 rng(7);
  double worst = 0;
  for (int c : {1, 2, 3, 8}) {
    const auto f = flow::FlowLevel<double>::init({c, 8, 0, 4, 1.9}, rng);
    const V lp = f.log_prob(M::Zero(1, c), M::Zero(1, 4));
    worst = std::max(worst, std::abs(lp[0] + 0.5 * c * std::log(2 * std::numbers::pi)));
  }
  return make("identity flow log_prob(0) = -(C/2) log 2pi", worst, 1e-9, "absolute error");
}

Check closed_form_score() {
  const double s = scoring::feature_score(R::Zero(2), 0.0);
  return make("score(z=0, logdet=0, C=2) = 1 - 1/(2pi)", std::abs(s - (1 - 1 / (2 * std::numbers::pi))), 1e-9,
              "absolute error");
}

Check density_normalization(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto f = random_flow(2, 2, rng, 8, 0.2);
  const int n = 241;
  const double step = 12.0 / (n - 1);
  M pts(n * n, 2);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) pts.row(i * n + j) << -6 + i * step, -6 + j * step;
  M pos(n * n, 2);
  pos.col(0).setConstant(std::sin(3.0));
  pos.col(1).setConstant(std::cos(5.0));
  const V lp = f.log_prob(pts, pos);
  double total = 0;
  for (int i = 0; i < n; ++i) {
    const double wi = (i == 0 || i == n - 1) ? 0.5 : 1.0;
    for (int j = 0; j < n; ++j) {
      const double wj = (j == 0 || j == n - 1) ? 0.5 : 1.0;
      total += wi * wj * std::exp(lp[i * n + j]);
    }
  }
  total *= step * step;
  Check c = make("density integrates to 1 over [-6,6]^2", std::abs(total - 1), 0.02);
  c.detail = "integral = " + std::to_string(total);
  return c;
}

Check auroc_oracle(int instances, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  int mismatches = 0;
  for (int k = 0; k < instances; ++k) {
    const int n = std::uniform_int_distribution<int>(2, 1000)(rng);
    std::vector<double> s(static_cast<std::size_t>(n));
    std::vector<std::uint8_t> y(static_cast<std::size_t>(n));
    const bool discrete = k % 2 == 0;
    std::uniform_int_distribution<int> level(0, 9);
    std::normal_distribution<double> g;
    std::bernoulli_distribution coin(0.3);
    for (int i = 0; i < n; ++i) {
      y[std::size_t(i)] = coin(rng);
      s[std::size_t(i)] = discrete ? level(rng) / 10.0 : g(rng) + 0.8 * y[std::size_t(i)];
    }
    y[0] = 0;
    y[1] = 1;
    if (scoring::auroc(s, y) != brute_force_auroc(s, y)) ++mismatches;
  }
  return make("sorted AUROC == brute-force AUROC", double(mismatches), 0.5,
              std::to_string(instances) + " instances, exact equality");
}

std::vector<Check> run_all(int instances, int flow_trials) {
  const std::vector<int> inv_channels{2, 4, 8, 16};
  const std::vector<int> det_channels{2, 4, 8};
  return {flow_inverse(flow_trials, inv_channels, 1),
          flow_logdet(std::max(1, flow_trials / 10), det_channels, 2),
          grad_affine(instances, 3),
          grad_batch_norm(instances, 4),
          grad_relu(instances, 5),
          grad_occ(instances, false, 6),
          grad_occ(instances, true, 7),
          grad_constraintor(instances, 8),
          grad_ml(instances, 9),
          grad_bgspp(instances, 10),
          closed_form_log_prob(),
          closed_form_score(),
          density_normalization(11),
          auroc_oracle(200, 12)};
}

}  // namespace resad::verify
