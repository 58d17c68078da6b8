#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "resad/config.hpp"
#include "resad/constraintor.hpp"
#include "resad/featio.hpp"
#include "resad/flow.hpp"

namespace resad {

/// Everything needed to score a new class given its reference images.
struct ModelArtifact {
  TrainConfig config;
  std::vector<featio::LevelDims> level_dims;
  std::vector<constraintor::LevelNet<Real>> constraintors;
  std::vector<flow::FlowLevel<Real>> flows;

  /// Throws if a feature stack does not match the trained level dims.
  void check_compatible(const std::vector<featio::LevelDims>& dims) const;
};

inline constexpr char kModelMagic[8] = {'R', 'E', 'S', 'A', 'D', 'M', 'D', 'L'};
inline constexpr std::uint32_t kModelVersion = 1;

/// Versioned little-endian encoding; parameters are stored as f64 so a
/// loaded model reproduces the in-memory one bit for bit.
std::string serialize_model(const ModelArtifact& model);
ModelArtifact deserialize_model(const std::string& bytes);

void save_model(const ModelArtifact& model, const std::filesystem::path& path);
ModelArtifact load_model(const std::filesystem::path& path);

/// FNV-1a over the serialized bytes.
std::uint64_t fingerprint(const ModelArtifact& model);

}  // namespace resad
