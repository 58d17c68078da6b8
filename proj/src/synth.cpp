#include "resad/synth.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>

#include "json.hpp"
#include "resad/flow.hpp"
#include "resad/types.hpp"

namespace resad::synth {
namespace {

using json = nlohmann::json;

[[noreturn]] void fail(const std::string& what) { throw Error("synth", what); }

struct LevelField {
  Eigen::VectorXd mean;
  Eigen::VectorXd dir_h, dir_w;
  double freq_h = 1, freq_w = 1, phase_h = 0, phase_w = 0;
};

Eigen::VectorXd random_unit(Eigen::Index n, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = g(rng);
  return v.normalized();
}

std::mt19937_64 image_rng(std::uint64_t seed, int cls, int image) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(cls), std::uint32_t(image)};
  return std::mt19937_64(seq);
}

struct Generated {
  featio::FeatureStack features;
  featio::PixelMask mask;
};

Generated make_image(const SynthConfig& cfg, const std::vector<LevelField>& fields, bool abnormal,
                     std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
  std::uniform_real_distribution<double> jitter(-0.1, 0.1);
  Generated g;
  g.mask = featio::PixelMask::zeros(cfg.image_height, cfg.image_width);

  if (abnormal) {
    // Rectangle on the finest level grid, then scaled to pixels.
    const auto& d0 = cfg.levels.front();
    const int area = std::max(1, int(std::lround(cfg.defect_area_fraction * double(d0.positions()))));
    const int min_h = std::max(1, (area + int(d0.width) - 1) / int(d0.width));
    const int max_h = std::min(int(d0.height), area);
    const int rh = std::uniform_int_distribution<int>(min_h, std::max(min_h, max_h))(rng);
    const int rw = std::clamp(int(std::lround(double(area) / rh)), 1, int(d0.width));
    const int y0 = std::uniform_int_distribution<int>(0, int(d0.height) - rh)(rng);
    const int x0 = std::uniform_int_distribution<int>(0, int(d0.width) - rw)(rng);
    const auto py = [&](int cell) { return std::uint32_t(std::uint64_t(cell) * cfg.image_height / d0.height); };
    const auto px = [&](int cell) { return std::uint32_t(std::uint64_t(cell) * cfg.image_width / d0.width); };
    for (std::uint32_t y = py(y0); y < py(y0 + rh); ++y)
      for (std::uint32_t x = px(x0); x < px(x0 + rw); ++x) g.mask.data[std::size_t(y) * cfg.image_width + x] = 1;
  }

  for (std::size_t l = 0; l < cfg.levels.size(); ++l) {
    const auto& d = cfg.levels[l];
    const LevelField& f = fields[l];
    const double jh = jitter(rng), jw = jitter(rng);
    featio::FeatureMap map{d, std::vector<float>(d.size())};
    std::vector<std::uint8_t> defect;
    Eigen::VectorXd shift;
    if (abnormal) {
      defect = featio::downsample_mask(g.mask, d.height, d.width).data;
      shift = cfg.anomaly_shift * random_unit(d.channels, rng);
    }
    for (std::uint32_t h = 0; h < d.height; ++h) {
      for (std::uint32_t w = 0; w < d.width; ++w) {
        const double mh = std::sin(2 * std::numbers::pi * (f.freq_h * h / d.height + f.phase_h + jh));
        const double mw = std::cos(2 * std::numbers::pi * (f.freq_w * w / d.width + f.phase_w + jw));
        Eigen::VectorXd v = f.mean + cfg.field_amplitude * (mh * f.dir_h + mw * f.dir_w);
        const std::size_t p = std::size_t(h) * d.width + w;
        if (abnormal && defect[p]) v += shift;
        for (std::uint32_t c = 0; c < d.channels; ++c) map.data[p * d.channels + c] = float(v[c] + noise(rng));
      }
    }
    g.features.levels.push_back(std::move(map));
  }
  return g;
}

}  // namespace

void SynthConfig::validate() const {
  if (n_known_classes < 1 || n_unknown_classes < 0) fail("class counts must be positive");
  if (images_per_class < 2) fail("images_per_class must be >= 2");
  if (abnormal_fraction < 0 || abnormal_fraction >= 1) fail("abnormal_fraction must lie in [0, 1)");
  if (levels.empty()) fail("at least one level is required");
  for (const auto& d : levels)
    if (d.height == 0 || d.width == 0 || d.channels == 0) fail("level dimensions must be positive");
  if (!(class_sep > 0)) fail("class_sep must be positive");
  if (!(noise_sigma >= 0)) fail("noise_sigma must be >= 0");
  if (!(anomaly_shift > 2 * noise_sigma)) fail("anomaly_shift must exceed 2 * noise_sigma");
  if (!(defect_area_fraction > 0 && defect_area_fraction <= 1)) fail("defect_area_fraction must lie in (0, 1]");
  if (k_ref < 1) fail("k_ref must be >= 1");
  if (n_unknown_classes > 0 && images_per_class <= k_ref) fail("images_per_class must exceed k_ref");
  const auto& d0 = levels.front();
  if (image_height < d0.height || image_width < d0.width) fail("image size smaller than the finest level");
  for (const auto& d : levels)
    if (d.height > d0.height || d.width > d0.width) fail("the first level must be the finest");
  const int n_classes = n_known_classes + n_unknown_classes;
  for (const auto& d : levels)
    if (std::uint32_t(n_classes) > d.channels)
      fail("infeasible geometry: " + std::to_string(n_classes) + " classes need at least that many channels");
}

std::string SynthConfig::to_json() const {
  json j;
  j["n_known_classes"] = n_known_classes;
  j["n_unknown_classes"] = n_unknown_classes;
  j["images_per_class"] = images_per_class;
  j["abnormal_fraction"] = abnormal_fraction;
  json lv = json::array();
  for (const auto& d : levels) lv.push_back({d.height, d.width, d.channels});
  j["levels"] = lv;
  j["class_sep"] = class_sep;
  j["anomaly_shift"] = anomaly_shift;
  j["defect_area_fraction"] = defect_area_fraction;
  j["noise_sigma"] = noise_sigma;
  j["seed"] = seed;
  j["k_ref"] = k_ref;
  j["image_size"] = {image_height, image_width};
  j["field_amplitude"] = field_amplitude;
  return j.dump(2);
}

SynthConfig SynthConfig::from_json(const std::string& text) {
  SynthConfig c;
  try {
    const json j = json::parse(text);
    if (!j.is_object()) fail("synth config must be a JSON object");
    for (const auto& [key, value] : j.items()) {
      if (key == "n_known_classes") c.n_known_classes = value.get<int>();
      else if (key == "n_unknown_classes") c.n_unknown_classes = value.get<int>();
      else if (key == "images_per_class") c.images_per_class = value.get<int>();
      else if (key == "abnormal_fraction") c.abnormal_fraction = value.get<double>();
      else if (key == "class_sep") c.class_sep = value.get<double>();
      else if (key == "anomaly_shift") c.anomaly_shift = value.get<double>();
      else if (key == "defect_area_fraction") c.defect_area_fraction = value.get<double>();
      else if (key == "noise_sigma") c.noise_sigma = value.get<double>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "k_ref") c.k_ref = value.get<int>();
      else if (key == "field_amplitude") c.field_amplitude = value.get<double>();
      else if (key == "image_size") {
        c.image_height = value.at(0).get<std::uint32_t>();
        c.image_width = value.at(1).get<std::uint32_t>();
      } else if (key == "levels") {
        c.levels.clear();
        for (const auto& d : value)
          c.levels.push_back({d.at(0).get<std::uint32_t>(), d.at(1).get<std::uint32_t>(), d.at(2).get<std::uint32_t>()});
      } else {
        fail("unknown synth config key '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    fail(std::string("invalid synth config: ") + e.what());
  }
  c.validate();
  return c;
}

SynthConfig SynthConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) fail("cannot open synth config " + path.string());
  return from_json(std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()));
}

SynthOutput generate(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "features");
  fs::create_directories(out_dir / "masks");

  const int n_classes = cfg.n_known_classes + cfg.n_unknown_classes;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // Class means sit on scaled orthonormal directions, so every pair is
  // exactly class_sep apart.
  std::vector<std::vector<LevelField>> fields(static_cast<std::size_t>(n_classes));
  for (const auto& d : cfg.levels) {
    const Eigen::MatrixXd q = flow::random_orthogonal<double>(d.channels, rng);
    for (int c = 0; c < n_classes; ++c) {
      LevelField f;
      f.mean = cfg.class_sep / std::sqrt(2.0) * q.col(c);
      f.dir_h = random_unit(d.channels, rng);
      f.dir_w = random_unit(d.channels, rng);
      f.freq_h = 0.5 + unit(rng);
      f.freq_w = 0.5 + unit(rng);
      f.phase_h = unit(rng);
      f.phase_w = unit(rng);
      fields[std::size_t(c)].push_back(std::move(f));
    }
  }

  SynthOutput out;
  featio::Manifest train, test;
  for (int c = 0; c < n_classes; ++c) {
    const bool known = c < cfg.n_known_classes;
    const std::string name = known ? "known" + std::to_string(c) : "unseen" + std::to_string(c - cfg.n_known_classes);
    (known ? out.known_classes : out.unknown_classes).push_back(name);
    const int n_ref = known ? 0 : cfg.k_ref;
    const int n_scored = cfg.images_per_class - n_ref;
    const int n_abnormal = int(std::lround(cfg.abnormal_fraction * n_scored));
    for (int i = 0; i < cfg.images_per_class; ++i) {
      // References first, then normals, then abnormal images.
      const bool is_ref = i < n_ref;
      const bool abnormal = i >= cfg.images_per_class - n_abnormal;
      auto irng = image_rng(cfg.seed, c, i);
      const Generated g = make_image(cfg, fields[std::size_t(c)], abnormal, irng);

      char idbuf[32];
      std::snprintf(idbuf, sizeof idbuf, "_%03d", i);
      featio::ManifestEntry e;
      e.image_id = name + idbuf;
      e.class_name = name;
      e.split = known ? featio::Split::Train : (is_ref ? featio::Split::Reference : featio::Split::Test);
      e.label = abnormal ? featio::Label::Abnormal : featio::Label::Normal;
      e.feature_path = "features/" + e.image_id + ".rft";
      e.image_height = cfg.image_height;
      e.image_width = cfg.image_width;
      featio::write_feature_stack(g.features, out_dir / e.feature_path);
      if (abnormal) {
        e.mask_path = "masks/" + e.image_id + ".pgm";
        featio::write_mask_pgm(g.mask, out_dir / *e.mask_path);
      }
      (known ? train : test).entries.push_back(std::move(e));
    }
  }
  out.train_manifest = out_dir / "train_manifest.json";
  out.test_manifest = out_dir / "test_manifest.json";
  featio::save_manifest(train, out.train_manifest);
  featio::save_manifest(test, out.test_manifest);
  return out;
}

}  // namespace resad::synth
