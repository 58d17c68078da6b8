#pragma once

#include <span>
#include <vector>

#include "resad/types.hpp"

namespace resad::scoring {

/// 1 - exp(log N(z; 0, I) + logdet). Negative when the density exceeds 1;
/// kept as is since every consumer is rank based.
Real feature_score(const Eigen::Ref<const RowVectorX<Real>>& z, Real logdet);
/// Same score from a precomputed log-likelihood.
Real score_from_log_prob(Real log_prob);

/// Bilinear resize with half-pixel centers (align_corners = false), edge
/// samples clamped. Target must be at least as large as the source.
Mat upsample_bilinear(const Mat& map, Eigen::Index height, Eigen::Index width);

/// Elementwise sum of equally sized maps.
Mat aggregate_levels(std::span<const Mat> maps);

/// Maximum of a non-empty map.
Real image_score(const Mat& map);

struct AnomalyMap {
  Mat map;
  Real image_score = 0;
  std::vector<Mat> level_maps;  // per-level scores at feature resolution
};

/// Area under the ROC curve via the rank-sum statistic with midranks for
/// ties: P(s+ > s-) + P(s+ = s-)/2. Labels must contain both classes.
double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels);

}  // namespace resad::scoring
