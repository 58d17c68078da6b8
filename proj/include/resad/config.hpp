#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace resad {

/// How the constraintor participates in training and inference.
enum class OccMode {
  Full,        // pseudo-Huber pull on normals + abnormal-invariant term
  NormalOnly,  // pseudo-Huber term only
  Off,         // constraintor bypassed; residuals go straight to the flow
};

std::string to_string(OccMode m);
OccMode occ_mode_from_string(const std::string& s);

/// Log-likelihood fed to the per-position score at inference.
enum class ScoreScale {
  Raw,         // log p as is
  PerChannel,  // log p / C_l, keeps levels of different width commensurate
};

std::string to_string(ScoreScale s);
ScoreScale score_scale_from_string(const std::string& s);

struct TrainConfig {
  int epochs = 100;
  int batch_images = 32;
  double lr = 1e-5;
  std::vector<int> lr_drop_epochs{70, 90};
  double lr_drop_factor = 0.1;
  double weight_decay = 5e-4;
  int n_flow_layers = 8;
  int pos_dim = 256;
  double tau = 0.1;
  double lambda_bgspp = 1.0;
  double bn_quantile = 0.05;
  int k_ref = 4;
  std::uint64_t seed = 42;
  bool occ_squared_norm = false;

  int flow_hidden = 0;  // 0 means 2 * C_l
  double clamp_alpha = 1.9;
  double bn_momentum = 0.1;
  OccMode occ_mode = OccMode::Full;
  ScoreScale score_scale = ScoreScale::Raw;
  std::vector<std::string> train_splits{"train"};

  /// Throws resad::Error("config", ...) on invalid values.
  void validate() const;
  /// Learning rate in effect during 1-based `epoch`.
  double lr_at_epoch(int epoch) const;

  std::string to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static TrainConfig from_json(const std::string& text);
  static TrainConfig load(const std::filesystem::path& path);
};

}  // namespace resad
