#pragma once
// Statistics over synthetic fixtures shared by the unit and acceptance suites.

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "resad/pipeline.hpp"
#include "resad/scoring.hpp"
#include "resad/synth.hpp"

namespace resad::test {

/// A fixture small enough to train in well under a second.
inline synth::SynthConfig small_synth_config() {
  synth::SynthConfig c;
  c.n_known_classes = 2;
  c.n_unknown_classes = 1;
  c.images_per_class = 12;
  c.levels = {{4, 4, 4}, {2, 2, 6}};
  c.image_height = 16;
  c.image_width = 16;
  c.defect_area_fraction = 0.1;
  c.k_ref = 2;
  return c;
}

inline TrainConfig small_train_config() {
  TrainConfig c;
  c.epochs = 4;
  c.batch_images = 8;
  c.lr = 1e-3;
  c.lr_drop_epochs = {3};
  c.pos_dim = 4;
  c.n_flow_layers = 2;
  c.k_ref = 2;
  return c;
}

/// Normal images of every class, split into K pool images and the rest.
struct ClassImages {
  std::vector<Sample> pool;
  std::vector<Sample> rest;
};

inline std::map<std::string, ClassImages> normal_images(const std::vector<const featio::Manifest*>& manifests,
                                                        std::size_t k) {
  std::map<std::string, ClassImages> out;
  for (const auto* m : manifests) {
    for (const auto& e : m->entries) {
      if (e.label != featio::Label::Normal) continue;
      auto& c = out[e.class_name];
      (c.pool.size() < k ? c.pool : c.rest).push_back(load_sample(*m, e));
    }
  }
  return out;
}

inline double mean_pairwise_distance(const std::vector<RowVectorX<Real>>& centroids) {
  double sum = 0;
  int n = 0;
  for (std::size_t i = 0; i < centroids.size(); ++i)
    for (std::size_t j = i + 1; j < centroids.size(); ++j, ++n) sum += (centroids[i] - centroids[j]).norm();
  return n ? sum / n : 0.0;
}

/// Per level: mean pairwise distance between class centroids of the initial
/// normal features and of their residuals against a K-shot pool.
struct CentroidStats {
  std::vector<double> initial;
  std::vector<double> residual;

  double worst_ratio() const {
    double r = 0;
    for (std::size_t l = 0; l < initial.size(); ++l) r = std::max(r, residual[l] / initial[l]);
    return r;
  }
};

inline CentroidStats centroid_stats(const std::map<std::string, ClassImages>& classes) {
  CentroidStats out;
  const std::size_t L = classes.begin()->second.rest.front().features.levels.size();
  for (std::size_t l = 0; l < L; ++l) {
    std::vector<RowVectorX<Real>> init_c, res_c;
    for (const auto& [name, imgs] : classes) {
      std::vector<const Sample*> refs;
      for (const auto& s : imgs.pool) refs.push_back(&s);
      const auto pool = build_class_pool(refs);
      RowVectorX<Real> a = RowVectorX<Real>::Zero(pool.level(l).cols()), b = a;
      Eigen::Index n = 0;
      for (const auto& s : imgs.rest) {
        const Mat x = refpool::level_matrix(s.features.levels[l]);
        a += x.colwise().sum();
        b += refpool::to_residual(s.features, pool).levels[l].colwise().sum();
        n += x.rows();
      }
      init_c.push_back(a / Real(n));
      res_c.push_back(b / Real(n));
    }
    out.initial.push_back(mean_pairwise_distance(init_c));
    out.residual.push_back(mean_pairwise_distance(res_c));
  }
  return out;
}

/// Image AUROC per test class of the model-free detector "largest residual
/// norm at the finest level".
inline std::map<std::string, double> trivial_detector_auroc(const featio::Manifest& test, int k) {
  std::map<std::string, double> out;
  std::map<std::string, std::pair<std::vector<double>, std::vector<std::uint8_t>>> acc;
  for (const auto& e : test.entries) {
    if (e.split != featio::Split::Test) continue;
    std::vector<Sample> refs;
    for (const auto* r : reference_entries(test, e.class_name, k)) refs.push_back(load_sample(test, *r));
    std::vector<const Sample*> ptrs;
    for (const auto& s : refs) ptrs.push_back(&s);
    const Sample s = load_sample(test, e);
    const auto res = refpool::to_residual(s.features, build_class_pool(ptrs));
    acc[e.class_name].first.push_back(res.levels[0].rowwise().norm().maxCoeff());
    acc[e.class_name].second.push_back(s.mask && s.mask->any() ? 1 : 0);
  }
  for (const auto& [name, sy] : acc) out[name] = scoring::auroc(sy.first, sy.second);
  return out;
}

}  // namespace resad::test
