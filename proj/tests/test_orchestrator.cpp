#include <algorithm>
#include <random>

#include "doctest.h"

#include "fixture.hpp"
#include "resad/config.hpp"
#include "resad/model.hpp"
#include "resad/pipeline.hpp"
#include "support.hpp"

using namespace resad;
using doctest::Contains;

namespace {

// One small fixture shared by the cases below; generated on first use.
struct Fixture {
  test::TempDir dir;
  synth::SynthOutput out;
  featio::Manifest train_manifest, test_manifest;
  std::vector<Sample> train_samples;

  Fixture() {
    out = synth::generate(test::small_synth_config(), dir.path());
    train_manifest = featio::load_manifest(out.train_manifest);
    test_manifest = featio::load_manifest(out.test_manifest);
    for (const auto& e : train_manifest.entries) train_samples.push_back(load_sample(train_manifest, e));
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

const ModelArtifact& trained() {
  static const ModelArtifact m = train(fixture().train_samples, test::small_train_config()).model;
  return m;
}

refpool::ReferencePool pool_for(const featio::Manifest& m, const std::string& cls, int k,
                                std::vector<Sample>* keep = nullptr) {
  std::vector<Sample> refs;
  for (const auto* e : reference_entries(m, cls, k)) refs.push_back(load_sample(m, *e));
  std::vector<const Sample*> ptrs;
  for (const auto& s : refs) ptrs.push_back(&s);
  auto pool = build_class_pool(ptrs);
  if (keep) *keep = std::move(refs);
  return pool;
}

bool same_params(std::vector<nd::Param<Real>*> a, std::vector<nd::Param<Real>*> b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i]->value != b[i]->value) return false;
  return true;
}

}  // namespace

TEST_SUITE("config") {

TEST_CASE("defaults are valid and follow the published schedule") {
  const TrainConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.epochs == 100);
  CHECK(c.batch_images == 32);
  CHECK(c.n_flow_layers == 8);
  CHECK(c.pos_dim == 256);
  CHECK(c.seed == 42);
  CHECK(c.score_scale == ScoreScale::Raw);
  for (int e = 1; e <= 70; ++e) CHECK(c.lr_at_epoch(e) == doctest::Approx(1e-5));
  for (int e = 71; e <= 90; ++e) CHECK(c.lr_at_epoch(e) == doctest::Approx(1e-6));
  for (int e = 91; e <= 100; ++e) CHECK(c.lr_at_epoch(e) == doctest::Approx(1e-7));
}

TEST_CASE("json round trip and validation") {
  TrainConfig c;
  c.epochs = 12;
  c.lr_drop_epochs = {5, 9};
  c.occ_mode = OccMode::NormalOnly;
  c.score_scale = ScoreScale::PerChannel;
  c.train_splits = {"train", "test"};
  const TrainConfig back = TrainConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.occ_mode == OccMode::NormalOnly);

  CHECK_THROWS_WITH_AS(TrainConfig::from_json(R"({"epochs": 30})"), Contains("lr_drop_epochs"), Error);
  CHECK_THROWS_AS(TrainConfig::from_json(R"({"epochs": 10, "lr_drop_epochs": [5, 5]})"), Error);
  CHECK_THROWS_AS(TrainConfig::from_json(R"({"pos_dim": 7})"), Error);
  CHECK_THROWS_AS(TrainConfig::from_json(R"({"lr": 0})"), Error);
  CHECK_THROWS_AS(TrainConfig::from_json(R"({"bn_quantile": 1.5})"), Error);
  CHECK_THROWS_WITH_AS(TrainConfig::from_json(R"({"learning_rate": 1})"), Contains("unknown"), Error);
  CHECK_THROWS_AS(TrainConfig::from_json(R"({"occ_mode": "sometimes"})"), Error);
  CHECK_THROWS_AS(TrainConfig::from_json(R"({"score_scale": "log"})"), Error);
  CHECK_THROWS_AS(TrainConfig::from_json(R"({"train_splits": ["reference"]})"), Error);
  CHECK_THROWS_AS(TrainConfig::from_json("[1]"), Error);
}

}  // TEST_SUITE

TEST_SUITE("model") {

TEST_CASE("save, load, save is byte-identical") {
  test::TempDir dir;
  save_model(trained(), dir / "a.bin");
  const auto loaded = load_model(dir / "a.bin");
  save_model(loaded, dir / "b.bin");
  CHECK(test::slurp(dir / "a.bin") == test::slurp(dir / "b.bin"));
  CHECK(fingerprint(loaded) == fingerprint(trained()));
}

TEST_CASE("corrupt model files are rejected") {
  const std::string good = serialize_model(trained());
  std::string bad = good;
  bad[8] ^= 0x01;
  CHECK_THROWS_WITH_AS(deserialize_model(bad), Contains("version"), Error);
  bad = good;
  bad[0] = 'X';
  CHECK_THROWS_WITH_AS(deserialize_model(bad), Contains("magic"), Error);
  CHECK_THROWS_WITH_AS(deserialize_model(good.substr(0, good.size() - 5)), Contains("truncated"), Error);
  CHECK_THROWS_WITH_AS(deserialize_model(good + "z"), Contains("trailing"), Error);
}

TEST_CASE("inference is unchanged by a save and load") {
  test::TempDir dir;
  auto& fx = fixture();
  save_model(trained(), dir / "m.bin");
  const auto loaded = load_model(dir / "m.bin");
  const auto cls = fx.out.unknown_classes.front();
  const auto pool = pool_for(fx.test_manifest, cls, 2);
  for (const auto& e : fx.test_manifest.entries) {
    if (e.split != featio::Split::Test) continue;
    const auto s = load_sample(fx.test_manifest, e);
    const auto a = infer(trained(), s.features, pool, e.image_height, e.image_width);
    const auto b = infer(loaded, s.features, pool, e.image_height, e.image_width);
    CHECK(a.map == b.map);
    CHECK(a.image_score == b.image_score);
  }
}

}  // TEST_SUITE

TEST_SUITE("orchestrator") {

TEST_CASE("training is deterministic and lowers the likelihood loss") {
  const auto cfg = test::small_train_config();
  const auto a = train(fixture().train_samples, cfg);
  const auto b = train(fixture().train_samples, cfg);
  CHECK(serialize_model(a.model) == serialize_model(b.model));
  REQUIRE(a.history.size() == std::size_t(cfg.epochs));
  CHECK(a.history.back().ml < a.history.front().ml);
  CHECK(a.history[0].lr == cfg.lr);
  CHECK(a.history.back().lr == doctest::Approx(cfg.lr * cfg.lr_drop_factor));

  auto other = cfg;
  other.seed = 43;
  CHECK(serialize_model(train(fixture().train_samples, other).model) != serialize_model(a.model));
}

TEST_CASE("gradient barrier between constraintor and flow") {
  auto cfg = test::small_train_config();
  // Semi-push-pull terms must never reach the constraintor.
  auto with = cfg, without = cfg;
  without.lambda_bgspp = 0;
  with.lambda_bgspp = 5;
  with.tau = 0.7;
  auto a = train(fixture().train_samples, with).model;
  auto b = train(fixture().train_samples, without).model;
  for (std::size_t l = 0; l < a.constraintors.size(); ++l)
    CHECK(same_params(a.constraintors[l].params(), b.constraintors[l].params()));
  bool flows_differ = false;
  for (std::size_t l = 0; l < a.flows.size(); ++l) flows_differ |= !same_params(a.flows[l].params(), b.flows[l].params());
  CHECK(flows_differ);

  // The OCC objective must never reach the flow: a single step sees the same
  // constrained features whichever OCC variant is active.
  auto one_step = cfg;
  one_step.epochs = 1;
  one_step.lr_drop_epochs = {};
  one_step.batch_images = 1000;
  auto full = one_step, pull_only = one_step;
  pull_only.occ_mode = OccMode::NormalOnly;
  pull_only.occ_squared_norm = true;
  auto f = train(fixture().train_samples, full).model;
  auto p = train(fixture().train_samples, pull_only).model;
  for (std::size_t l = 0; l < f.flows.size(); ++l) CHECK(same_params(f.flows[l].params(), p.flows[l].params()));
  bool constraintors_differ = false;
  for (std::size_t l = 0; l < f.constraintors.size(); ++l)
    constraintors_differ |= !same_params(f.constraintors[l].params(), p.constraintors[l].params());
  CHECK(constraintors_differ);
}

TEST_CASE("without abnormal images and with lambda 0 the push-pull term vanishes") {
  std::vector<Sample> normals;
  for (const auto& s : fixture().train_samples)
    if (s.entry.label == featio::Label::Normal) normals.push_back(s);
  auto cfg = test::small_train_config();
  cfg.lambda_bgspp = 0;
  const auto r = train(normals, cfg);
  for (const auto& h : r.history) CHECK(h.bgspp == 0.0);
}

TEST_CASE("occ off leaves the constraintor untouched") {
  auto cfg = test::small_train_config();
  cfg.occ_mode = OccMode::Off;
  auto a = train(fixture().train_samples, cfg);
  auto init = cfg;
  init.epochs = 1;
  init.lr_drop_epochs = {};
  auto b = train(fixture().train_samples, init);
  for (std::size_t l = 0; l < a.model.constraintors.size(); ++l)
    CHECK(same_params(a.model.constraintors[l].params(), b.model.constraintors[l].params()));
  for (const auto& h : a.history) CHECK(h.occ == 0.0);
}

TEST_CASE("training errors") {
  std::vector<Sample> abnormal_only;
  for (const auto& s : fixture().train_samples)
    if (s.entry.label == featio::Label::Abnormal) abnormal_only.push_back(s);
  CHECK_THROWS_WITH_AS(train(abnormal_only, test::small_train_config()), Contains("no normal"), Error);
  auto cfg = test::small_train_config();
  cfg.train_splits = {"test"};
  CHECK_THROWS_AS(train(fixture().train_manifest, cfg), Error);
}

TEST_CASE("inference: dims, determinism, purity and the pool-member floor") {
  auto& fx = fixture();
  const auto cls = fx.out.unknown_classes.front();
  std::vector<Sample> refs;
  const auto pool = pool_for(fx.test_manifest, cls, 2, &refs);
  const auto before = fingerprint(trained());
  const auto& member = refs.front();
  const auto floor = infer(trained(), member.features, pool, 16, 16);
  CHECK(floor.map.rows() == 16);
  CHECK(floor.map.cols() == 16);
  CHECK(floor.level_maps.size() == 2);
  for (const auto& e : fx.test_manifest.entries) {
    if (e.split != featio::Split::Test) continue;
    const auto s = load_sample(fx.test_manifest, e);
    const auto a = infer(trained(), s.features, pool, e.image_height, e.image_width);
    const auto b = infer(trained(), s.features, pool, e.image_height, e.image_width);
    CHECK(a.map == b.map);
    CHECK(a.image_score == a.map.maxCoeff());
    CHECK(floor.image_score <= a.image_score);
  }
  CHECK(fingerprint(trained()) == before);

  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(infer(trained(), test::random_stack({{4, 4, 5}, {2, 2, 6}}, rng), pool, 16, 16), Error);
}

TEST_CASE("evaluation report") {
  auto& fx = fixture();
  const auto before = fingerprint(trained());
  const auto report = evaluate(trained(), fx.test_manifest);
  CHECK(fingerprint(trained()) == before);
  REQUIRE(report.classes.size() == fx.out.unknown_classes.size());
  CHECK(report.classes[0].class_name == fx.out.unknown_classes[0]);
  CHECK(report.classes[0].n_images == 10);
  const std::string csv = report.to_csv();
  CHECK(csv.rfind("class,n_images,image_auroc,pixel_auroc\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == std::ptrdiff_t(report.classes.size() + 2));
  CHECK(csv.find("\nmean,10,") != std::string::npos);
}

TEST_CASE("a model that scores everything alike has image AUROC one half") {
  auto flat = trained();
  for (auto& c : flat.constraintors) {
    c.gamma.value.setZero();
    c.beta.value.setZero();
  }
  const auto report = evaluate(flat, fixture().test_manifest);
  CHECK(report.classes[0].image_auroc == 0.5);
}

TEST_CASE("per-channel score scale keeps the ranking within a level") {
  auto& fx = fixture();
  auto scaled = trained();
  scaled.config.score_scale = ScoreScale::PerChannel;
  const auto pool = pool_for(fx.test_manifest, fx.out.unknown_classes.front(), 2);
  const auto& e = fx.test_manifest.entries.back();
  const auto s = load_sample(fx.test_manifest, e);
  const auto raw = infer(trained(), s.features, pool, 16, 16);
  const auto per = infer(scaled, s.features, pool, 16, 16);
  for (std::size_t l = 0; l < raw.level_maps.size(); ++l) {
    const Mat& a = raw.level_maps[l];
    const Mat& b = per.level_maps[l];
    for (Eigen::Index i = 0; i < a.size(); ++i)
      for (Eigen::Index j = 0; j < a.size(); ++j)
        if (a.data()[i] < a.data()[j]) CHECK(b.data()[i] <= b.data()[j]);
  }
}

}  // TEST_SUITE
