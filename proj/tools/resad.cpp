// resad: train, score and evaluate residual-feature anomaly detectors.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "resad/pipeline.hpp"
#include "resad/synth.hpp"
#include "resad/verify.hpp"

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw resad::Error("io", "cannot open " + path.string() + " for writing");
  os << text;
}

void export_map(const resad::scoring::AnomalyMap& amap, const fs::path& path) {
  const auto& m = amap.map;
  if (path.extension() == ".pgm") {
    // Scores are clamped at 0 for display, then min-max normalized.
    const resad::Mat shown = m.cwiseMax(0.0);
    const double lo = shown.minCoeff(), hi = shown.maxCoeff();
    std::vector<std::uint8_t> px(std::size_t(m.size()));
    for (Eigen::Index i = 0; i < m.size(); ++i)
      px[std::size_t(i)] = hi > lo ? std::uint8_t(std::lround(255.0 * (shown.data()[i] - lo) / (hi - lo))) : 0;
    resad::featio::write_gray_pgm(std::uint32_t(m.rows()), std::uint32_t(m.cols()), px, path);
  } else if (path.extension() == ".rft") {
    resad::featio::FeatureMap fm{{std::uint32_t(m.rows()), std::uint32_t(m.cols()), 1}, {}};
    fm.data.resize(std::size_t(m.size()));
    for (Eigen::Index i = 0; i < m.size(); ++i) fm.data[std::size_t(i)] = float(m.data()[i]);
    resad::featio::write_feature_stack({{fm}}, path);
  } else {
    throw resad::Error("cli", "--out-map must end in .pgm or .rft");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Class-generalizable anomaly detection on residual features"};
  app.require_subcommand(1);

  fs::path manifest, config, out, model, out_map, report, out_dir;
  std::string image_id;

  auto* train = app.add_subcommand("train", "Train a model on the training splits of a manifest");
  train->add_option("--manifest", manifest, "Manifest JSON")->required();
  train->add_option("--config", config, "TrainConfig JSON");
  train->add_option("--out", out, "Output model file")->required();

  auto* infer = app.add_subcommand("infer", "Score one image of a manifest");
  infer->add_option("--model", model)->required();
  infer->add_option("--manifest", manifest)->required();
  infer->add_option("--image-id", image_id)->required();
  infer->add_option("--out-map", out_map, "Anomaly map output (.pgm or .rft)")->required();

  auto* eval = app.add_subcommand("eval", "Image/pixel AUROC per class of the test split");
  eval->add_option("--model", model)->required();
  eval->add_option("--manifest", manifest)->required();
  eval->add_option("--report", report, "CSV report path")->required();

  auto* synth = app.add_subcommand("synth", "Generate a synthetic multi-class feature dataset");
  synth->add_option("--config", config, "SynthConfig JSON");
  synth->add_option("--out-dir", out_dir)->required();

  auto* check = app.add_subcommand("check", "Run the numerical self-test suite");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      const auto cfg = config.empty() ? resad::TrainConfig{} : resad::TrainConfig::load(config);
      const auto result = resad::train(resad::featio::load_manifest(manifest), cfg);
      for (const auto& e : result.history)
        std::printf("epoch %d lr %.3g occ %.6f ml %.6f bgspp %.6f\n", e.epoch, e.lr, e.occ, e.ml, e.bgspp);
      resad::save_model(result.model, out);
    } else if (*infer) {
      const auto m = resad::load_model(model);
      const auto mf = resad::featio::load_manifest(manifest);
      const auto& entry = mf.find(image_id);
      const auto refs = resad::reference_entries(mf, entry.class_name, m.config.k_ref);
      if (refs.empty()) throw resad::Error("infer", "class '" + entry.class_name + "' has no reference entries");
      std::vector<resad::Sample> ref_samples;
      for (const auto* e : refs) ref_samples.push_back(resad::load_sample(mf, *e));
      std::vector<const resad::Sample*> ptrs;
      for (const auto& s : ref_samples) ptrs.push_back(&s);
      const auto sample = resad::load_sample(mf, entry);
      const auto amap = resad::infer(m, sample.features, resad::build_class_pool(ptrs), entry.image_height,
                                     entry.image_width);
      export_map(amap, out_map);
      std::printf("%s %.9g\n", image_id.c_str(), amap.image_score);
    } else if (*eval) {
      const auto rep = resad::evaluate(resad::load_model(model), resad::featio::load_manifest(manifest));
      const std::string csv = rep.to_csv();
      write_text(report, csv);
      std::fputs(csv.c_str(), stdout);
    } else if (*synth) {
      const auto cfg = config.empty() ? resad::synth::SynthConfig{} : resad::synth::SynthConfig::load(config);
      const auto res = resad::synth::generate(cfg, out_dir);
      std::printf("train_manifest %s\ntest_manifest %s\n", res.train_manifest.c_str(), res.test_manifest.c_str());
    } else if (*check) {
      bool ok = true;
      for (const auto& c : resad::verify::run_all()) {
        std::printf("%s  %-52s value=%.3g threshold=%.3g %s\n", c.pass ? "PASS" : "FAIL", c.name.c_str(), c.value,
                    c.threshold, c.detail.c_str());
        ok = ok && c.pass;
      }
      return ok ? 0 : 1;
    }
  } catch (const resad::Error& e) {
    std::fprintf(stderr, "error kind=%s message=\"%s\"\n", e.kind().c_str(), e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error kind=internal message=\"%s\"\n", e.what());
    return 1;
  }
  return 0;
}
