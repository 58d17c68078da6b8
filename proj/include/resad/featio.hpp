#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "resad/types.hpp"

namespace resad::featio {

struct LevelDims {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t channels = 0;

  std::size_t positions() const { return std::size_t(height) * width; }
  std::size_t size() const { return positions() * channels; }
  bool operator==(const LevelDims&) const = default;
};

/// One level of a feature stack, stored row-major in (h, w, c) order.
struct FeatureMap {
  LevelDims dims;
  std::vector<float> data;

  /// (H*W) x C view, one row per position.
  Eigen::Map<const MatrixX<float>> positions() const {
    return {data.data(), Eigen::Index(dims.positions()), Eigen::Index(dims.channels)};
  }
  bool operator==(const FeatureMap&) const = default;
};

struct FeatureStack {
  std::vector<FeatureMap> levels;

  std::vector<LevelDims> dims() const;
  bool operator==(const FeatureStack&) const = default;
};

/// Throws featio error if the stack breaks an invariant (L >= 1, positive
/// dims, payload size, finite values).
void validate(const FeatureStack& stack);

inline constexpr char kFeatureMagic[8] = {'R', 'E', 'S', 'A', 'D', 'F', 'T', '1'};

void write_feature_stack(const FeatureStack& stack, const std::filesystem::path& path);
FeatureStack read_feature_stack(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Manifests

enum class Split { Train, Test, Reference };
enum class Label { Normal, Abnormal };

std::string to_string(Split s);
std::string to_string(Label l);

struct ManifestEntry {
  std::string image_id;
  std::string class_name;
  Split split = Split::Train;
  Label label = Label::Normal;
  std::string feature_path;
  std::optional<std::string> mask_path;
  std::uint32_t image_height = 0;
  std::uint32_t image_width = 0;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  /// Directory relative paths are resolved against.
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const std::string& relative) const { return base_dir / relative; }
  const ManifestEntry& find(const std::string& image_id) const;
};

/// Parses and validates a manifest JSON array. Duplicate ids, abnormal
/// train/test entries without a mask, abnormal reference entries and unknown
/// tokens are rejected.
Manifest load_manifest(const std::filesystem::path& path);
Manifest parse_manifest(const std::string& json_text, std::filesystem::path base_dir = {});
void save_manifest(const Manifest& manifest, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Masks

struct PixelMask {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::vector<std::uint8_t> data;  // 0 or 1, row-major

  std::uint8_t at(std::uint32_t h, std::uint32_t w) const { return data[std::size_t(h) * width + w]; }
  bool any() const;
  static PixelMask zeros(std::uint32_t height, std::uint32_t width);
};

/// Binary P5 PGM; every nonzero pixel becomes 1.
PixelMask read_mask_pgm(const std::filesystem::path& path);
/// Writes 0 / 255.
void write_mask_pgm(const PixelMask& mask, const std::filesystem::path& path);
void write_gray_pgm(std::uint32_t height, std::uint32_t width, const std::vector<std::uint8_t>& pixels,
                    const std::filesystem::path& path);

/// Max-pool downsampling: a target cell is 1 iff any source pixel whose
/// center lies in the cell's rectangle is 1.
PixelMask downsample_mask(const PixelMask& mask, std::uint32_t target_height, std::uint32_t target_width);

/// Per-level position labels, one flat (H_l * W_l) vector per level.
using LevelLabels = std::vector<std::vector<std::uint8_t>>;

LevelLabels level_labels(const PixelMask& mask, const std::vector<LevelDims>& dims);
LevelLabels zero_labels(const std::vector<LevelDims>& dims);

}  // namespace resad::featio
