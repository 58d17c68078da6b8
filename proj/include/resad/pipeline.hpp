#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "resad/featio.hpp"
#include "resad/model.hpp"
#include "resad/refpool.hpp"
#include "resad/scoring.hpp"

namespace resad {

/// A manifest entry with its features and (for abnormal entries) mask loaded.
struct Sample {
  featio::ManifestEntry entry;
  featio::FeatureStack features;
  std::optional<featio::PixelMask> mask;
};

Sample load_sample(const featio::Manifest& manifest, const featio::ManifestEntry& entry);

struct EpochStats {
  int epoch = 0;
  double lr = 0;
  double occ = 0;    // mean over batches
  double ml = 0;     // mean over batches
  double bgspp = 0;  // mean over batches, already divided by the position count
};

struct TrainResult {
  ModelArtifact model;
  std::vector<EpochStats> history;
};

/// Joint training over all classes in `samples`. Each step converts the batch
/// to residuals against freshly drawn same-class references, updates the
/// constraintor with the OCC loss, then updates the flow on the detached
/// constrained features with ML + lambda * BG-SPP.
TrainResult train(const std::vector<Sample>& samples, const TrainConfig& config);
TrainResult train(const featio::Manifest& manifest, const TrainConfig& config);

/// Builds a reference pool from one class's reference images.
refpool::ReferencePool build_class_pool(const std::vector<const Sample*>& references);

/// Scores one image. Never mutates the model.
scoring::AnomalyMap infer(const ModelArtifact& model, const featio::FeatureStack& stack,
                          const refpool::ReferencePool& pool, std::uint32_t image_height, std::uint32_t image_width);

struct ClassMetrics {
  std::string class_name;
  std::size_t n_images = 0;
  double image_auroc = 0;
  double pixel_auroc = 0;
};

struct MetricsReport {
  std::vector<ClassMetrics> classes;
  double mean_image_auroc = 0;
  double mean_pixel_auroc = 0;

  /// Header "class,n_images,image_auroc,pixel_auroc", one row per class, then
  /// a final "mean" row with macro averages.
  std::string to_csv() const;
};

/// Per class: pool from the first k_ref reference entries, then every test
/// entry is scored. Image labels come from masks, pixel labels from mask
/// pixels.
MetricsReport evaluate(const ModelArtifact& model, const featio::Manifest& manifest);

/// Reference entries of `class_name`, limited to `k` (manifest order).
std::vector<const featio::ManifestEntry*> reference_entries(const featio::Manifest& manifest,
                                                            const std::string& class_name, int k);

}  // namespace resad
