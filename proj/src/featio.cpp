#include "resad/featio.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "json.hpp"

namespace resad::featio {
namespace {

using json = nlohmann::json;

[[noreturn]] void fail(const std::string& what) { throw Error("featio", what); }

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(const std::string& in, std::size_t& pos) {
  if (pos + 4 > in.size()) fail("truncated header");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(in[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void dump(const std::string& bytes, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail("cannot open " + path.string() + " for writing");
  os.write(bytes.data(), std::streamsize(bytes.size()));
  if (!os) fail("write failed: " + path.string());
}

}  // namespace

std::vector<LevelDims> FeatureStack::dims() const {
  std::vector<LevelDims> out;
  out.reserve(levels.size());
  for (const auto& l : levels) out.push_back(l.dims);
  return out;
}

void validate(const FeatureStack& stack) {
  if (stack.levels.empty()) fail("feature stack has no levels");
  for (std::size_t l = 0; l < stack.levels.size(); ++l) {
    const auto& m = stack.levels[l];
    if (m.dims.height == 0 || m.dims.width == 0 || m.dims.channels == 0)
      fail("zero dimension at level " + std::to_string(l));
    if (m.data.size() != m.dims.size()) fail("payload size mismatch at level " + std::to_string(l));
    for (float v : m.data)
      if (!std::isfinite(v)) fail("non-finite value at level " + std::to_string(l));
  }
}

void write_feature_stack(const FeatureStack& stack, const std::filesystem::path& path) {
  validate(stack);
  std::string out(kFeatureMagic, kFeatureMagic + 8);
  put_u32(out, std::uint32_t(stack.levels.size()));
  for (const auto& m : stack.levels) {
    put_u32(out, m.dims.height);
    put_u32(out, m.dims.width);
    put_u32(out, m.dims.channels);
  }
  for (const auto& m : stack.levels)
    for (float v : m.data) put_u32(out, std::bit_cast<std::uint32_t>(v));
  dump(out, path);
}

FeatureStack read_feature_stack(const std::filesystem::path& path) {
  const std::string in = slurp(path);
  if (in.size() < 8 || !std::equal(kFeatureMagic, kFeatureMagic + 8, in.begin()))
    fail("bad magic in " + path.string());
  std::size_t pos = 8;
  const std::uint32_t n_levels = get_u32(in, pos);
  if (n_levels == 0) fail("feature stack has no levels");
  FeatureStack stack;
  stack.levels.resize(n_levels);
  std::size_t total = 0;
  for (auto& m : stack.levels) {
    m.dims.height = get_u32(in, pos);
    m.dims.width = get_u32(in, pos);
    m.dims.channels = get_u32(in, pos);
    if (m.dims.height == 0 || m.dims.width == 0 || m.dims.channels == 0) fail("zero dimension");
    total += m.dims.size();
  }
  if (in.size() - pos < total * 4) fail("truncated payload in " + path.string());
  if (in.size() - pos > total * 4) fail("trailing bytes in " + path.string());
  for (auto& m : stack.levels) {
    m.data.resize(m.dims.size());
    for (float& v : m.data) v = std::bit_cast<float>(get_u32(in, pos));
  }
  validate(stack);
  return stack;
}

// ---------------------------------------------------------------------------

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Test: return "test";
    case Split::Reference: return "reference";
  }
  return {};
}

std::string to_string(Label l) { return l == Label::Normal ? "normal" : "abnormal"; }

const ManifestEntry& Manifest::find(const std::string& image_id) const {
  for (const auto& e : entries)
    if (e.image_id == image_id) return e;
  fail("unknown image_id '" + image_id + "'");
}

Manifest parse_manifest(const std::string& json_text, std::filesystem::path base_dir) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    fail(std::string("manifest is not valid JSON: ") + e.what());
  }
  if (!doc.is_array()) fail("manifest must be a JSON array");

  Manifest manifest;
  manifest.base_dir = std::move(base_dir);
  std::set<std::string> seen;
  for (const auto& obj : doc) {
    ManifestEntry e;
    try {
      e.image_id = obj.at("image_id").get<std::string>();
      e.class_name = obj.at("class_name").get<std::string>();
      const auto split = obj.at("split").get<std::string>();
      if (split == "train") e.split = Split::Train;
      else if (split == "test") e.split = Split::Test;
      else if (split == "reference") e.split = Split::Reference;
      else fail("unknown split token '" + split + "'");
      const auto label = obj.at("label").get<std::string>();
      if (label == "normal") e.label = Label::Normal;
      else if (label == "abnormal") e.label = Label::Abnormal;
      else fail("unknown label token '" + label + "'");
      e.feature_path = obj.at("feature_path").get<std::string>();
      if (obj.contains("mask_path") && !obj.at("mask_path").is_null())
        e.mask_path = obj.at("mask_path").get<std::string>();
      const auto& size = obj.at("image_size");
      if (!size.is_array() || size.size() != 2) fail("image_size must be [H, W]");
      e.image_height = size[0].get<std::uint32_t>();
      e.image_width = size[1].get<std::uint32_t>();
    } catch (const json::exception& ex) {
      fail(std::string("manifest schema violation: ") + ex.what());
    }
    if (e.image_height == 0 || e.image_width == 0) fail("image_size must be positive for " + e.image_id);
    if (!seen.insert(e.image_id).second) fail("duplicate image_id '" + e.image_id + "'");
    if (e.split == Split::Reference && e.label == Label::Abnormal)
      fail("reference entry '" + e.image_id + "' must be normal");
    if (e.label == Label::Abnormal && !e.mask_path)
      fail("abnormal entry '" + e.image_id + "' has no mask_path");
    manifest.entries.push_back(std::move(e));
  }
  return manifest;
}

Manifest load_manifest(const std::filesystem::path& path) {
  return parse_manifest(slurp(path), path.parent_path());
}

void save_manifest(const Manifest& manifest, const std::filesystem::path& path) {
  json doc = json::array();
  for (const auto& e : manifest.entries) {
    json obj;
    obj["image_id"] = e.image_id;
    obj["class_name"] = e.class_name;
    obj["split"] = to_string(e.split);
    obj["label"] = to_string(e.label);
    obj["feature_path"] = e.feature_path;
    obj["mask_path"] = e.mask_path ? json(*e.mask_path) : json(nullptr);
    obj["image_size"] = {e.image_height, e.image_width};
    doc.push_back(std::move(obj));
  }
  dump(doc.dump(1) + "\n", path);
}

// ---------------------------------------------------------------------------

bool PixelMask::any() const {
  for (auto v : data)
    if (v) return true;
  return false;
}

PixelMask PixelMask::zeros(std::uint32_t height, std::uint32_t width) {
  return {height, width, std::vector<std::uint8_t>(std::size_t(height) * width, 0)};
}

namespace {

// Reads the next whitespace/comment separated header token of a PNM file.
std::string pnm_token(const std::string& in, std::size_t& pos) {
  for (;;) {
    while (pos < in.size() && std::isspace(static_cast<unsigned char>(in[pos]))) ++pos;
    if (pos < in.size() && in[pos] == '#') {
      while (pos < in.size() && in[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  const std::size_t start = pos;
  while (pos < in.size() && !std::isspace(static_cast<unsigned char>(in[pos]))) ++pos;
  if (start == pos) fail("truncated PGM header");
  return in.substr(start, pos - start);
}

}  // namespace

PixelMask read_mask_pgm(const std::filesystem::path& path) {
  const std::string in = slurp(path);
  std::size_t pos = 0;
  if (pnm_token(in, pos) != "P5") fail("mask is not a binary PGM (P5): " + path.string());
  PixelMask mask;
  try {
    mask.width = std::uint32_t(std::stoul(pnm_token(in, pos)));
    mask.height = std::uint32_t(std::stoul(pnm_token(in, pos)));
    if (std::stoul(pnm_token(in, pos)) > 255) fail("only 8-bit PGM masks are supported");
  } catch (const std::logic_error&) {
    fail("malformed PGM header: " + path.string());
  }
  ++pos;  // single whitespace byte before the raster
  const std::size_t n = std::size_t(mask.height) * mask.width;
  if (n == 0) fail("empty mask: " + path.string());
  if (in.size() < pos + n) fail("truncated PGM raster: " + path.string());
  mask.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) mask.data[i] = in[pos + i] != 0 ? 1 : 0;
  return mask;
}

void write_gray_pgm(std::uint32_t height, std::uint32_t width, const std::vector<std::uint8_t>& pixels,
                    const std::filesystem::path& path) {
  if (pixels.size() != std::size_t(height) * width) fail("PGM raster size mismatch");
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out.append(pixels.begin(), pixels.end());
  dump(out, path);
}

void write_mask_pgm(const PixelMask& mask, const std::filesystem::path& path) {
  std::vector<std::uint8_t> px(mask.data.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = mask.data[i] ? 255 : 0;
  write_gray_pgm(mask.height, mask.width, px, path);
}

PixelMask downsample_mask(const PixelMask& mask, std::uint32_t target_height, std::uint32_t target_width) {
  if (target_height == 0 || target_width == 0) fail("downsample target must be positive");
  if (target_height > mask.height || target_width > mask.width)
    fail("downsample target larger than mask");
  // Pixel i (center i + 0.5) lies in cell floor((2i + 1) * T / (2 * S)).
  auto cell = [](std::uint64_t i, std::uint64_t target, std::uint64_t source) {
    return std::uint32_t((2 * i + 1) * target / (2 * source));
  };
  PixelMask out = PixelMask::zeros(target_height, target_width);
  for (std::uint32_t h = 0; h < mask.height; ++h) {
    const std::uint32_t ch = cell(h, target_height, mask.height);
    for (std::uint32_t w = 0; w < mask.width; ++w)
      if (mask.at(h, w)) out.data[std::size_t(ch) * target_width + cell(w, target_width, mask.width)] = 1;
  }
  return out;
}

LevelLabels level_labels(const PixelMask& mask, const std::vector<LevelDims>& dims) {
  LevelLabels out;
  for (const auto& d : dims) out.push_back(downsample_mask(mask, d.height, d.width).data);
  return out;
}

LevelLabels zero_labels(const std::vector<LevelDims>& dims) {
  LevelLabels out;
  for (const auto& d : dims) out.emplace_back(d.positions(), 0);
  return out;
}

}  // namespace resad::featio
