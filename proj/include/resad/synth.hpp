#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "resad/featio.hpp"

namespace resad::synth {

/// Multi-class synthetic feature datasets. Each class has its own mean
/// vector per level; normal images are a smooth sinusoidal field around that
/// mean plus per-position Gaussian noise, abnormal images additionally shift a
/// rectangular region along a random direction.
struct SynthConfig {
  int n_known_classes = 3;
  int n_unknown_classes = 2;
  int images_per_class = 40;
  double abnormal_fraction = 0.25;
  std::vector<featio::LevelDims> levels{{16, 16, 8}, {8, 8, 16}};
  double class_sep = 6.0;
  double anomaly_shift = 3.0;
  double defect_area_fraction = 0.05;
  double noise_sigma = 0.5;
  std::uint64_t seed = 42;

  int k_ref = 4;                   // reference images per unseen class
  std::uint32_t image_height = 64;
  std::uint32_t image_width = 64;
  double field_amplitude = 1.0;    // amplitude of the smooth spatial modulation

  void validate() const;
  std::string to_json() const;
  static SynthConfig from_json(const std::string& text);
  static SynthConfig load(const std::filesystem::path& path);
};

struct SynthOutput {
  std::filesystem::path train_manifest;  // known classes, split "train"
  std::filesystem::path test_manifest;   // unseen classes, splits "reference" + "test"
  std::vector<std::string> known_classes;
  std::vector<std::string> unknown_classes;
};

/// Writes features/, masks/, train_manifest.json and test_manifest.json
/// under `out_dir`. Byte-identical for equal configs.
SynthOutput generate(const SynthConfig& config, const std::filesystem::path& out_dir);

}  // namespace resad::synth
