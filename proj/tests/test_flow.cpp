#include <numbers>
#include <random>
#include <set>
#include <vector>

#include "doctest.h"

#include "resad/flow_losses.hpp"
#include "resad/verify.hpp"

using namespace resad;
using flow::FlowLevel;
using flow::FlowShape;

namespace {

Mat random_mat(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double sigma = 1.0) {
  std::normal_distribution<double> g(0.0, sigma);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

double rel_err(const Mat& a, const Mat& b) { return (a - b).norm() / std::max(b.norm(), 1e-12); }

}  // namespace

TEST_SUITE("flow") {

TEST_CASE("positional embedding values") {
  const Mat p = flow::pos_embed<Real>(7, 7, 16);
  CHECK(p.rows() == 49);
  CHECK(p.cols() == 16);
  for (Eigen::Index i = 0; i < 8; ++i) {
    CHECK(p(0, 2 * i) == 0.0);
    CHECK(p(0, 2 * i + 1) == 1.0);
  }
  CHECK(p.cwiseAbs().maxCoeff() <= 1.0);
  std::set<std::vector<double>> distinct;
  for (Eigen::Index r = 0; r < p.rows(); ++r) distinct.insert(std::vector<double>(p.row(r).begin(), p.row(r).end()));
  CHECK(distinct.size() == 49);
  CHECK_THROWS_AS(flow::pos_embed<Real>(2, 2, 3), Error);
}

TEST_CASE("fresh flow: orthogonal mixes, identity couplings") {
  std::mt19937_64 rng(1);
  const auto f = FlowLevel<Real>::init({5, 8, 0, 4, 1.9}, rng);
  CHECK(f.hidden() == 10);
  CHECK(f.split() == 3);
  Mat composed = Mat::Identity(5, 5);
  for (const auto& layer : f.layers()) {
    CHECK((layer.mix.transpose() * layer.mix - Mat::Identity(5, 5)).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(layer.w2.value.cwiseAbs().maxCoeff() == 0.0);
    composed = layer.mix * composed;
  }
  const Mat x = random_mat(6, 5, rng), pos = random_mat(6, 4, rng);
  Vec ld;
  const Mat z = f.forward(x, pos, ld);
  CHECK(ld.cwiseAbs().maxCoeff() == 0.0);
  CHECK(rel_err(z, x * composed.transpose()) < 1e-12);
  CHECK(rel_err(f.inverse(x, pos), x * composed) < 1e-12);
}

TEST_CASE("same seed gives identical flows") {
  std::mt19937_64 r1(5), r2(5);
  const auto a = FlowLevel<Real>::init({4, 3, 0, 6, 1.9}, r1);
  const auto b = FlowLevel<Real>::init({4, 3, 0, 6, 1.9}, r2);
  for (std::size_t k = 0; k < a.num_layers(); ++k) {
    CHECK(a.layers()[k].mix == b.layers()[k].mix);
    CHECK(a.layers()[k].w1.value == b.layers()[k].w1.value);
  }
}

TEST_CASE("inverse undoes forward for random weights") {
  std::mt19937_64 rng(2);
  for (int c : {1, 2, 3, 4, 8, 16}) {
    auto f = verify::random_flow(c, 4, rng, 8, 0.3);
    for (int t = 0; t < 100; ++t) {
      const Mat x = random_mat(1, c, rng), pos = random_mat(1, 4, rng);
      Vec ld;
      CHECK(rel_err(f.inverse(f.forward(x, pos, ld), pos), x) < 1e-5);
      const Mat z = random_mat(1, c, rng);
      CHECK(rel_err(f.forward(f.inverse(z, pos), pos, ld), z) < 1e-5);
    }
  }
}

TEST_CASE("logdet matches the numerical Jacobian at C=4") {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 20; ++t) {
    auto f = verify::random_flow(4, 4, rng, 4, 0.3);
    const Mat x = random_mat(1, 4, rng), pos = random_mat(1, 4, rng);
    Vec ld;
    f.forward(x, pos, ld);
    const double num = verify::numerical_logdet(f, x.row(0), pos.row(0));
    CHECK(std::abs(ld[0] - num) / std::max(std::abs(num), 1.0) < 1e-3);
  }
}

TEST_CASE("identity flow log-likelihood at the origin") {
  std::mt19937_64 rng(4);
  const auto f2 = FlowLevel<Real>::init({2, 8, 0, 0, 1.9}, rng);
  const Mat none(1, 0);
  CHECK(f2.log_prob(Mat::Zero(1, 2), none)[0] == doctest::Approx(-1.837877).epsilon(1e-6));
  const auto f1 = FlowLevel<Real>::init({1, 8, 0, 0, 1.9}, rng);
  CHECK(f1.log_prob(Mat::Zero(1, 1), none)[0] == doctest::Approx(-0.918939).epsilon(1e-6));
}

TEST_CASE("appending an orthogonal map leaves log_prob unchanged") {
  std::mt19937_64 rng(5);
  auto f = verify::random_flow(4, 2, rng, 4, 0.3);
  auto layers = f.layers();
  auto extra = layers.back();
  extra.mix = flow::random_orthogonal<Real>(4, rng);
  extra.w2.value.setZero();
  extra.b2.value.setZero();
  layers.push_back(extra);
  const auto g = FlowLevel<Real>::assemble(4, 2, f.hidden(), f.clamp(), layers, f.output_scale());
  const Mat x = random_mat(10, 4, rng), pos = random_mat(10, 2, rng);
  CHECK((f.log_prob(x, pos) - g.log_prob(x, pos)).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("output scale contributes its log-determinant") {
  std::mt19937_64 rng(6);
  auto f = FlowLevel<Real>::init({3, 2, 0, 0, 1.9}, rng);
  RowVectorX<Real> s(3);
  s << 2, 0.5, -3;
  f.set_output_scale(s);
  Vec ld;
  f.forward(random_mat(2, 3, rng), Mat(2, 0), ld);
  CHECK(ld[0] == doctest::Approx(std::log(3.0)));
  CHECK_THROWS_AS(f.set_output_scale(RowVectorX<Real>::Zero(3)), Error);
}

TEST_CASE("shared positional grid equals explicit tiling") {
  std::mt19937_64 rng(7);
  auto f = verify::random_flow(4, 6, rng, 3, 0.3);
  const Mat grid = random_mat(5, 6, rng);
  Mat tiled(15, 6);
  for (int b = 0; b < 3; ++b) tiled.middleRows(b * 5, 5) = grid;
  const Mat x = random_mat(15, 4, rng), gz = random_mat(15, 4, rng);
  const Vec gld = random_mat(15, 1, rng).col(0);

  Vec ld_a, ld_b;
  FlowLevel<Real>::Cache ca, cb;
  auto fa = f, fb = f;
  const Mat za = fa.forward(x, grid, ld_a, &ca);
  const Mat zb = fb.forward(x, tiled, ld_b, &cb);
  CHECK(rel_err(za, zb) < 1e-12);
  CHECK((ld_a - ld_b).cwiseAbs().maxCoeff() < 1e-12);
  for (auto* p : fa.params()) p->zero_grad();
  for (auto* p : fb.params()) p->zero_grad();
  const Mat gxa = fa.backward(ca, gz, gld);
  const Mat gxb = fb.backward(cb, gz, gld);
  CHECK(rel_err(gxa, gxb) < 1e-12);
  const auto pa = fa.params(), pb = fb.params();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(rel_err(pa[i]->grad, pb[i]->grad) < 1e-12);
  CHECK_THROWS_AS(f.forward(random_mat(7, 4, rng), grid, ld_a), Error);
  CHECK_THROWS_AS(f.forward(random_mat(5, 3, rng), grid, ld_a), Error);
}

TEST_CASE("maximum-likelihood loss values") {
  const std::vector<Mat> z{Mat::Zero(1, 2)};
  const std::vector<Vec> ld{Vec::Zero(1)};
  CHECK(flow::ml_loss<Real>(z, ld) == doctest::Approx(1.837877).epsilon(1e-6));

  std::mt19937_64 rng(8);
  auto f = verify::random_flow(3, 2, rng, 4, 0.3);
  const Mat x = random_mat(9, 3, rng), pos = random_mat(9, 2, rng);
  Vec logdet;
  const std::vector<Mat> zz{f.forward(x, pos, logdet)};
  const std::vector<Vec> lds{logdet};
  CHECK(flow::ml_loss<Real>(zz, lds) == doctest::Approx(-f.log_prob(x, pos).mean()).epsilon(1e-12));
}

TEST_CASE("maximum-likelihood gradients match finite differences") {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 20; ++t) {
    const std::vector<Mat> z{random_mat(3, 4, rng), random_mat(2, 2, rng)};
    const std::vector<Vec> ld{random_mat(3, 1, rng).col(0), random_mat(2, 1, rng).col(0)};
    std::vector<Mat> gz;
    std::vector<Vec> gld;
    flow::ml_loss<Real>(z, ld, &gz, &gld);
    auto via_z = [&](const Mat& p) {
      const std::vector<Mat> zz{p, z[1]};
      return flow::ml_loss<Real>(zz, ld);
    };
    CHECK(nd::finite_diff_check<Real>(via_z, z[0], gz[0], 1e-5) < 1e-4);
    auto via_ld = [&](const Mat& p) {
      const std::vector<Vec> l2{ld[0], p.col(0)};
      return flow::ml_loss<Real>(z, l2);
    };
    CHECK(nd::finite_diff_check<Real>(via_ld, Mat(ld[1]), Mat(gld[1]), 1e-5) < 1e-4);
  }
}

TEST_CASE("semi-push-pull loss examples") {
  const double bn = -2.0, tau = 0.1;
  auto one = [&](double logp, std::uint8_t y) {
    const std::vector<double> l{logp};
    const std::vector<std::uint8_t> lab{y};
    return flow::bgspp_loss<double>(l, lab, bn, tau);
  };
  CHECK(one(bn + 0.3, 0) == 0.0);
  CHECK(one(bn, 0) == 0.0);
  CHECK(one(bn - 0.5, 0) == doctest::Approx(0.5));
  CHECK(one(bn - tau, 1) == 0.0);
  CHECK(one(bn, 1) == doctest::Approx(tau));
  CHECK(one(bn - 1.0, 1) == 0.0);
  const std::vector<double> l{0.0};
  const std::vector<std::uint8_t> lab{2};
  CHECK_THROWS_AS(flow::bgspp_loss<double>(l, lab, bn, tau), Error);
  const std::vector<std::uint8_t> ok{0};
  CHECK_THROWS_AS(flow::bgspp_loss<double>(l, ok, bn, 0.0), Error);
}

TEST_CASE("semi-push-pull loss monotonicity and gradient") {
  std::mt19937_64 rng(10);
  std::normal_distribution<double> g(0.0, 2.0);
  std::bernoulli_distribution coin(0.5);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> l(6);
    std::vector<std::uint8_t> y(6);
    for (std::size_t i = 0; i < 6; ++i) {
      l[i] = g(rng);
      y[i] = coin(rng);
    }
    std::vector<double> grad;
    const double base = flow::bgspp_loss<double>(l, y, 0.3, 0.1, &grad);
    for (std::size_t i = 0; i < 6; ++i) {
      auto up = l;
      up[i] += 0.25;
      const double after = flow::bgspp_loss<double>(up, y, 0.3, 0.1);
      if (y[i] == 0) CHECK(after <= base);
      else CHECK(after >= base);
      const double h = 1e-6;
      auto a = l, b = l;
      a[i] += h;
      b[i] -= h;
      const double num = (flow::bgspp_loss<double>(a, y, 0.3, 0.1) - flow::bgspp_loss<double>(b, y, 0.3, 0.1)) / (2 * h);
      CHECK(grad[i] == doctest::Approx(num).epsilon(1e-6));
    }
  }
}

TEST_CASE("normal boundary quantile") {
  const std::vector<double> v{3, 0, 2, 1};
  CHECK(flow::compute_bn<double>(v, 0.5) == doctest::Approx(1.5));
  CHECK(flow::compute_bn<double>(v, 0.0) == 0.0);
  CHECK(flow::compute_bn<double>(v, 1.0) == 3.0);
  const std::vector<double> c(5, -4.25);
  for (double q : {0.0, 0.05, 0.7, 1.0}) CHECK(flow::compute_bn<double>(c, q) == -4.25);
  CHECK_THROWS_AS(flow::compute_bn<double>(std::vector<double>{}, 0.5), Error);
  CHECK_THROWS_AS(flow::compute_bn<double>(v, 1.5), Error);
}

}  // TEST_SUITE
