#include "resad/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "resad/flow.hpp"

namespace resad::scoring {
namespace {
[[noreturn]] void fail(const std::string& what) { throw Error("scoring", what); }

struct Tap {
  Eigen::Index lo, hi;
  Real frac;
};

std::vector<Tap> taps(Eigen::Index source, Eigen::Index target) {
  std::vector<Tap> out(static_cast<std::size_t>(target));
  const Real ratio = Real(source) / Real(target);
  for (Eigen::Index i = 0; i < target; ++i) {
    Real x = (Real(i) + Real(0.5)) * ratio - Real(0.5);
    x = std::clamp(x, Real(0), Real(source - 1));
    const Eigen::Index lo = Eigen::Index(std::floor(x));
    out[std::size_t(i)] = {lo, std::min(lo + 1, source - 1), x - Real(lo)};
  }
  return out;
}
}  // namespace

Real score_from_log_prob(Real log_prob) { return Real(1) - std::exp(log_prob); }

Real feature_score(const Eigen::Ref<const RowVectorX<Real>>& z, Real logdet) {
  const Real log_prob = -Real(0.5) * Real(z.size()) * flow::kLog2Pi<Real> - Real(0.5) * z.squaredNorm() + logdet;
  return score_from_log_prob(log_prob);
}

Mat upsample_bilinear(const Mat& map, Eigen::Index height, Eigen::Index width) {
  if (map.size() == 0) fail("upsample of an empty map");
  if (height < map.rows() || width < map.cols()) fail("upsample target smaller than source");
  const auto ty = taps(map.rows(), height);
  const auto tx = taps(map.cols(), width);
  Mat out(height, width);
  for (Eigen::Index i = 0; i < height; ++i) {
    const Tap& a = ty[std::size_t(i)];
    for (Eigen::Index j = 0; j < width; ++j) {
      const Tap& b = tx[std::size_t(j)];
      const Real top = map(a.lo, b.lo) + b.frac * (map(a.lo, b.hi) - map(a.lo, b.lo));
      const Real bottom = map(a.hi, b.lo) + b.frac * (map(a.hi, b.hi) - map(a.hi, b.lo));
      out(i, j) = top + a.frac * (bottom - top);
    }
  }
  return out;
}

Mat aggregate_levels(std::span<const Mat> maps) {
  if (maps.empty()) fail("no level maps to aggregate");
  Mat out = maps.front();
  for (std::size_t l = 1; l < maps.size(); ++l) {
    if (maps[l].rows() != out.rows() || maps[l].cols() != out.cols()) fail("level maps differ in size");
    out += maps[l];
  }
  return out;
}

Real image_score(const Mat& map) {
  if (map.size() == 0) fail("image score of an empty map");
  return map.maxCoeff();
}

double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) fail("auroc: length mismatch");
  const std::size_t n = scores.size();
  std::int64_t n_pos = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] > 1) fail("auroc: label outside {0,1}");
    if (std::isnan(scores[i])) fail("auroc: NaN score");
    n_pos += labels[i];
  }
  const std::int64_t n_neg = std::int64_t(n) - n_pos;
  if (n_pos == 0 || n_neg == 0) fail("auroc: both classes are required");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Twice the midrank (1-based) keeps everything integral.
  std::int64_t rank_sum2 = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const std::int64_t midrank2 = std::int64_t(i + 1) + std::int64_t(j);
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]]) rank_sum2 += midrank2;
    i = j;
  }
  const std::int64_t u2 = rank_sum2 - n_pos * (n_pos + 1);
  return double(u2) / (2.0 * double(n_pos) * double(n_neg));
}

}  // namespace resad::scoring
