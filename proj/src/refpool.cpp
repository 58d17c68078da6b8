#include "resad/refpool.hpp"

#include <cmath>
#include <limits>

namespace resad::refpool {
namespace {
[[noreturn]] void fail(const std::string& what) { throw Error("refpool", what); }
}  // namespace

Mat level_matrix(const featio::FeatureMap& map) { return map.positions().cast<Real>(); }

ReferencePool ReferencePool::build(std::span<const featio::FeatureStack> stacks,
                                   std::span<const std::string> image_ids) {
  if (stacks.empty()) fail("reference pool needs at least one stack");
  if (!image_ids.empty() && image_ids.size() != stacks.size()) fail("image id count mismatch");

  ReferencePool pool;
  pool.dims_ = stacks.front().dims();
  pool.num_images_ = stacks.size();
  for (const auto& s : stacks)
    if (s.dims() != pool.dims_) fail("reference stacks have mismatched dimensions");

  const std::size_t n_levels = pool.dims_.size();
  pool.levels_.resize(n_levels);
  pool.provenance_.resize(n_levels);
  for (std::size_t l = 0; l < n_levels; ++l) {
    const auto& d = pool.dims_[l];
    const Eigen::Index per_image = Eigen::Index(d.positions());
    Mat& m = pool.levels_[l];
    m.resize(per_image * Eigen::Index(stacks.size()), d.channels);
    auto& prov = pool.provenance_[l];
    prov.reserve(std::size_t(m.rows()));
    for (std::size_t i = 0; i < stacks.size(); ++i) {
      m.middleRows(Eigen::Index(i) * per_image, per_image) = level_matrix(stacks[i].levels[l]);
      const std::string id = image_ids.empty() ? "#" + std::to_string(i) : image_ids[i];
      for (std::uint32_t h = 0; h < d.height; ++h)
        for (std::uint32_t w = 0; w < d.width; ++w) prov.push_back({id, h, w});
    }
  }
  return pool;
}

Match nearest(const Mat& pool_level, const Eigen::Ref<const RowVectorX<Real>>& query) {
  if (pool_level.rows() == 0) fail("empty pool level");
  if (query.size() != pool_level.cols()) fail("query dimension does not match pool");
  const Eigen::Index dim = pool_level.cols();
  Match best;
  Real best_sq = std::numeric_limits<Real>::infinity();
  for (Eigen::Index i = 0; i < pool_level.rows(); ++i) {
    const Real* p = pool_level.row(i).data();
    Real sq = 0;
    for (Eigen::Index c = 0; c < dim; ++c) {
      const Real d = p[c] - query[c];
      sq += d * d;
    }
    if (sq < best_sq) {
      best_sq = sq;
      best.index = i;
    }
  }
  best.distance = std::sqrt(best_sq);
  return best;
}

Match nearest(const ReferencePool& pool, std::size_t level, const Eigen::Ref<const RowVectorX<Real>>& query) {
  if (level >= pool.num_levels()) fail("level out of range");
  return nearest(pool.level(level), query);
}

ResidualStack to_residual(const featio::FeatureStack& stack, const ReferencePool& pool) {
  if (stack.dims() != pool.dims()) fail("feature stack does not match pool dimensions");
  ResidualStack out;
  out.dims = pool.dims();
  out.levels.resize(stack.levels.size());
  out.matched.resize(stack.levels.size());
  for (std::size_t l = 0; l < stack.levels.size(); ++l) {
    const Mat x = level_matrix(stack.levels[l]);
    const Mat& p = pool.level(l);
    Mat& r = out.levels[l];
    r.resize(x.rows(), x.cols());
    auto& idx = out.matched[l];
    idx.resize(std::size_t(x.rows()));
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const Match m = nearest(p, x.row(i));
      idx[std::size_t(i)] = m.index;
      r.row(i) = x.row(i) - p.row(m.index);
    }
  }
  return out;
}

}  // namespace resad::refpool
