#include "resad/config.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <set>

#include "json.hpp"
#include "resad/types.hpp"

namespace resad {
namespace {

using json = nlohmann::json;

[[noreturn]] void fail(const std::string& what) { throw Error("config", what); }

const std::set<std::string> kKeys = {
    "epochs",         "batch_images",   "lr",          "lr_drop_epochs", "lr_drop_factor", "weight_decay",
    "n_flow_layers",  "pos_dim",        "tau",         "lambda_bgspp",   "bn_quantile",    "k_ref",
    "seed",           "occ_squared_norm", "flow_hidden", "clamp_alpha",  "bn_momentum",    "occ_mode",
    "score_scale",    "train_splits"};

}  // namespace

std::string to_string(OccMode m) {
  switch (m) {
    case OccMode::Full: return "full";
    case OccMode::NormalOnly: return "normal_only";
    case OccMode::Off: return "off";
  }
  return {};
}

OccMode occ_mode_from_string(const std::string& s) {
  if (s == "full") return OccMode::Full;
  if (s == "normal_only") return OccMode::NormalOnly;
  if (s == "off") return OccMode::Off;
  fail("unknown occ_mode '" + s + "'");
}

std::string to_string(ScoreScale s) { return s == ScoreScale::Raw ? "raw" : "per_channel"; }

ScoreScale score_scale_from_string(const std::string& s) {
  if (s == "raw") return ScoreScale::Raw;
  if (s == "per_channel") return ScoreScale::PerChannel;
  fail("unknown score_scale '" + s + "'");
}

void TrainConfig::validate() const {
  if (epochs < 1) fail("epochs must be >= 1");
  if (batch_images < 1) fail("batch_images must be >= 1");
  if (!(lr > 0)) fail("lr must be positive");
  for (std::size_t i = 0; i < lr_drop_epochs.size(); ++i) {
    if (lr_drop_epochs[i] < 1 || lr_drop_epochs[i] >= epochs) fail("lr_drop_epochs must lie in [1, epochs)");
    if (i > 0 && lr_drop_epochs[i] <= lr_drop_epochs[i - 1]) fail("lr_drop_epochs must be strictly increasing");
  }
  if (!(lr_drop_factor > 0)) fail("lr_drop_factor must be positive");
  if (weight_decay < 0) fail("weight_decay must be >= 0");
  if (n_flow_layers < 1) fail("n_flow_layers must be >= 1");
  if (pos_dim < 0 || pos_dim % 2 != 0) fail("pos_dim must be even and >= 0");
  if (!(tau > 0)) fail("tau must be positive");
  if (lambda_bgspp < 0) fail("lambda_bgspp must be >= 0");
  if (!(bn_quantile > 0 && bn_quantile < 1)) fail("bn_quantile must lie in (0, 1)");
  if (k_ref < 1) fail("k_ref must be >= 1");
  if (flow_hidden < 0) fail("flow_hidden must be >= 0");
  if (!(clamp_alpha > 0)) fail("clamp_alpha must be positive");
  if (!(bn_momentum >= 0 && bn_momentum <= 1)) fail("bn_momentum must lie in [0, 1]");
  if (train_splits.empty()) fail("train_splits must not be empty");
  for (const auto& s : train_splits)
    if (s != "train" && s != "test") fail("train_splits entries must be 'train' or 'test'");
}

double TrainConfig::lr_at_epoch(int epoch) const {
  double out = lr;
  for (int drop : lr_drop_epochs)
    if (epoch > drop) out *= lr_drop_factor;
  return out;
}

std::string TrainConfig::to_json() const {
  json j;
  j["epochs"] = epochs;
  j["batch_images"] = batch_images;
  j["lr"] = lr;
  j["lr_drop_epochs"] = lr_drop_epochs;
  j["lr_drop_factor"] = lr_drop_factor;
  j["weight_decay"] = weight_decay;
  j["n_flow_layers"] = n_flow_layers;
  j["pos_dim"] = pos_dim;
  j["tau"] = tau;
  j["lambda_bgspp"] = lambda_bgspp;
  j["bn_quantile"] = bn_quantile;
  j["k_ref"] = k_ref;
  j["seed"] = seed;
  j["occ_squared_norm"] = occ_squared_norm;
  j["flow_hidden"] = flow_hidden;
  j["clamp_alpha"] = clamp_alpha;
  j["bn_momentum"] = bn_momentum;
  j["occ_mode"] = to_string(occ_mode);
  j["score_scale"] = to_string(score_scale);
  j["train_splits"] = train_splits;
  return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  TrainConfig c;
  try {
    const json j = json::parse(text);
    if (!j.is_object()) fail("config must be a JSON object");
    for (const auto& [key, value] : j.items())
      if (!kKeys.count(key)) fail("unknown config key '" + key + "'");
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
    };
    get("epochs", c.epochs);
    get("batch_images", c.batch_images);
    get("lr", c.lr);
    get("lr_drop_epochs", c.lr_drop_epochs);
    get("lr_drop_factor", c.lr_drop_factor);
    get("weight_decay", c.weight_decay);
    get("n_flow_layers", c.n_flow_layers);
    get("pos_dim", c.pos_dim);
    get("tau", c.tau);
    get("lambda_bgspp", c.lambda_bgspp);
    get("bn_quantile", c.bn_quantile);
    get("k_ref", c.k_ref);
    get("seed", c.seed);
    get("occ_squared_norm", c.occ_squared_norm);
    get("flow_hidden", c.flow_hidden);
    get("clamp_alpha", c.clamp_alpha);
    get("bn_momentum", c.bn_momentum);
    get("train_splits", c.train_splits);
    if (j.contains("occ_mode")) c.occ_mode = occ_mode_from_string(j.at("occ_mode").get<std::string>());
    if (j.contains("score_scale")) c.score_scale = score_scale_from_string(j.at("score_scale").get<std::string>());
  } catch (const json::exception& e) {
    fail(std::string("invalid config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) fail("cannot open config " + path.string());
  return from_json(std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()));
}

}  // namespace resad
