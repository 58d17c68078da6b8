#pragma once

#include <span>
#include <string>
#include <vector>

#include "resad/featio.hpp"
#include "resad/types.hpp"

namespace resad::refpool {

struct Provenance {
  std::string image_id;
  std::uint32_t h = 0;
  std::uint32_t w = 0;
};

/// Per-level flat set of reference vectors gathered from K-shot normal
/// images. Immutable once built.
class ReferencePool {
 public:
  /// Every position feature of every stack, flattened per level.
  /// `image_ids` may be empty, in which case provenance ids are "#<index>".
  static ReferencePool build(std::span<const featio::FeatureStack> stacks,
                             std::span<const std::string> image_ids = {});

  std::size_t num_levels() const { return levels_.size(); }
  std::size_t num_images() const { return num_images_; }
  const Mat& level(std::size_t l) const { return levels_.at(l); }
  const std::vector<featio::LevelDims>& dims() const { return dims_; }
  const Provenance& provenance(std::size_t l, Eigen::Index index) const { return provenance_.at(l).at(index); }

 private:
  std::vector<Mat> levels_;
  std::vector<std::vector<Provenance>> provenance_;
  std::vector<featio::LevelDims> dims_;
  std::size_t num_images_ = 0;
};

struct Match {
  Eigen::Index index = -1;
  Real distance = 0;
};

/// Exact L2 nearest neighbour; ties go to the lowest pool index.
Match nearest(const Mat& pool_level, const Eigen::Ref<const RowVectorX<Real>>& query);
Match nearest(const ReferencePool& pool, std::size_t level, const Eigen::Ref<const RowVectorX<Real>>& query);

/// Residual features for one image: (H_l*W_l) x C_l per level.
struct ResidualStack {
  std::vector<Mat> levels;
  std::vector<std::vector<Eigen::Index>> matched;
  std::vector<featio::LevelDims> dims;
};

/// x - nearest(pool, x) at every level and position.
ResidualStack to_residual(const featio::FeatureStack& stack, const ReferencePool& pool);

/// Features of one level as a (H*W) x C matrix in working precision.
Mat level_matrix(const featio::FeatureMap& map);

}  // namespace resad::refpool
