#include "resad/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <random>

#include "resad/flow_losses.hpp"

namespace resad {
namespace {

[[noreturn]] void fail(const std::string& kind, const std::string& what) { throw Error(kind, what); }

std::vector<Mat> level_positional_embeddings(const ModelArtifact& model) {
  std::vector<Mat> out;
  for (std::size_t l = 0; l < model.level_dims.size(); ++l)
    out.push_back(flow::pos_embed<Real>(model.level_dims[l].height, model.level_dims[l].width,
                                        model.flows[l].pos_dim()));
  return out;
}

bool in_train_splits(const featio::ManifestEntry& e, const TrainConfig& cfg) {
  const std::string s = featio::to_string(e.split);
  return std::find(cfg.train_splits.begin(), cfg.train_splits.end(), s) != cfg.train_splits.end();
}

}  // namespace

Sample load_sample(const featio::Manifest& manifest, const featio::ManifestEntry& entry) {
  Sample s{entry, featio::read_feature_stack(manifest.resolve(entry.feature_path)), std::nullopt};
  if (entry.mask_path) {
    s.mask = featio::read_mask_pgm(manifest.resolve(*entry.mask_path));
    if (s.mask->height != entry.image_height || s.mask->width != entry.image_width)
      fail("featio", "mask of '" + entry.image_id + "' does not match image_size");
  }
  return s;
}

refpool::ReferencePool build_class_pool(const std::vector<const Sample*>& references) {
  std::vector<featio::FeatureStack> stacks;
  std::vector<std::string> ids;
  for (const Sample* s : references) {
    stacks.push_back(s->features);
    ids.push_back(s->entry.image_id);
  }
  return refpool::ReferencePool::build(stacks, ids);
}

// ---------------------------------------------------------------------------

TrainResult train(const std::vector<Sample>& samples, const TrainConfig& cfg) {
  cfg.validate();

  std::vector<const Sample*> data;
  for (const auto& s : samples)
    if (in_train_splits(s.entry, cfg)) data.push_back(&s);
  std::map<std::string, std::vector<std::size_t>> normals_by_class;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (data[i]->entry.label == featio::Label::Normal) normals_by_class[data[i]->entry.class_name].push_back(i);
  if (normals_by_class.empty()) fail("train", "no normal training data");

  const auto dims = data.front()->features.dims();
  const std::size_t L = dims.size();
  std::vector<featio::LevelLabels> labels;
  for (const Sample* s : data) {
    if (s->features.dims() != dims) fail("train", "feature dimensions differ for '" + s->entry.image_id + "'");
    labels.push_back(s->mask ? featio::level_labels(*s->mask, dims) : featio::zero_labels(dims));
  }

  std::mt19937_64 rng(cfg.seed);
  ModelArtifact model;
  model.config = cfg;
  model.level_dims = dims;
  for (const auto& d : dims)
    model.constraintors.push_back(constraintor::LevelNet<Real>::init(d.channels, rng, cfg.bn_momentum));
  for (const auto& d : dims) {
    flow::FlowShape shape{d.channels, cfg.n_flow_layers, cfg.flow_hidden, cfg.pos_dim, cfg.clamp_alpha};
    model.flows.push_back(flow::FlowLevel<Real>::init(shape, rng));
  }
  const std::vector<Mat> pos = level_positional_embeddings(model);

  std::vector<nd::Param<Real>*> c_params, f_params;
  for (auto& c : model.constraintors)
    for (auto* p : c.params()) c_params.push_back(p);
  for (auto& f : model.flows)
    for (auto* p : f.params()) f_params.push_back(p);
  nd::AdamState<Real> c_adam, f_adam;
  c_adam.weight_decay = f_adam.weight_decay = cfg.weight_decay;

  const constraintor::OccOptions occ_opt{cfg.occ_squared_norm, cfg.occ_mode == OccMode::Full};
  const bool use_constraintor = cfg.occ_mode != OccMode::Off;

  TrainResult result;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t(0));

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    c_adam.lr = f_adam.lr = cfg.lr_at_epoch(epoch);
    std::shuffle(order.begin(), order.end(), rng);
    EpochStats stats{epoch, c_adam.lr, 0, 0, 0};
    int n_batches = 0;

    for (std::size_t start = 0; start < order.size(); start += std::size_t(cfg.batch_images)) {
      const std::size_t stop = std::min(order.size(), start + std::size_t(cfg.batch_images));
      const Eigen::Index B = Eigen::Index(stop - start);

      // Residuals against randomly drawn same-class normal references.
      std::vector<refpool::ResidualStack> residuals;
      for (std::size_t b = start; b < stop; ++b) {
        const std::size_t idx = order[b];
        const Sample& s = *data[idx];
        std::vector<std::size_t> candidates;
        for (std::size_t j : normals_by_class[s.entry.class_name])
          if (j != idx) candidates.push_back(j);
        if (candidates.empty())
          fail("train", "class '" + s.entry.class_name + "' has no other normal image to use as reference");
        std::vector<std::size_t> picked;
        std::sample(candidates.begin(), candidates.end(), std::back_inserter(picked), cfg.k_ref, rng);
        std::vector<const Sample*> refs;
        for (std::size_t j : picked) refs.push_back(data[j]);
        residuals.push_back(refpool::to_residual(s.features, build_class_pool(refs)));
      }

      std::vector<Mat> constrained(L), latents(L);
      std::vector<Vec> logdets(L);
      std::vector<std::vector<std::uint8_t>> batch_labels(L);
      std::vector<flow::FlowLevel<Real>::Cache> flow_caches(L);
      double occ = 0;
      for (std::size_t l = 0; l < L; ++l) {
        const Eigen::Index n_pos = Eigen::Index(dims[l].positions());
        Mat x(B * n_pos, dims[l].channels);
        for (Eigen::Index b = 0; b < B; ++b) {
          x.middleRows(b * n_pos, n_pos) = residuals[std::size_t(b)].levels[l];
          const auto& y = labels[order[start + std::size_t(b)]][l];
          batch_labels[l].insert(batch_labels[l].end(), y.begin(), y.end());
        }
        if (use_constraintor) {
          constraintor::LevelNet<Real>::Cache cache;
          constrained[l] = model.constraintors[l].forward(x, nd::Mode::Train, &cache);
          Mat grad;
          const Real scale = Real(1) / (Real(L) * Real(x.rows()));
          occ += constraintor::occ_level_loss<Real>(constrained[l], x, batch_labels[l], scale, occ_opt, &grad);
          model.constraintors[l].backward(cache, grad);
        } else {
          constrained[l] = std::move(x);
        }
        // Flow sees the constrained features as constants.
        latents[l] = model.flows[l].forward(constrained[l], pos[l], logdets[l], &flow_caches[l]);
      }

      std::vector<Mat> grad_z;
      std::vector<Vec> grad_ld;
      const double ml = flow::ml_loss<Real>(latents, logdets, &grad_z, &grad_ld);
      double bgspp = 0;
      if (cfg.lambda_bgspp > 0) {
        for (std::size_t l = 0; l < L; ++l) {
          const Vec logp = flow::FlowLevel<Real>::base_log_prob(latents[l]) + logdets[l];
          std::vector<Real> lp(logp.data(), logp.data() + logp.size());
          std::vector<Real> normal_lp;
          for (std::size_t i = 0; i < lp.size(); ++i)
            if (batch_labels[l][i] == 0) normal_lp.push_back(lp[i]);
          if (normal_lp.empty()) continue;
          const Real b_n = flow::compute_bn<Real>(normal_lp, cfg.bn_quantile);
          std::vector<Real> g;
          const Real weight = cfg.lambda_bgspp / (Real(L) * Real(lp.size()));
          bgspp += weight * flow::bgspp_loss<Real>(lp, batch_labels[l], b_n, cfg.tau, &g);
          // d logp / dz = -z, d logp / d logdet = 1
          const Eigen::Map<const Vec> gv(g.data(), Eigen::Index(g.size()));
          grad_z[l] -= ((weight * gv).asDiagonal() * latents[l]);
          grad_ld[l] += weight * gv;
        }
      }
      for (std::size_t l = 0; l < L; ++l) model.flows[l].backward(flow_caches[l], grad_z[l], grad_ld[l]);

      if (!std::isfinite(occ) || !std::isfinite(ml) || !std::isfinite(bgspp))
        fail("train", "non-finite loss at epoch " + std::to_string(epoch) + " batch " + std::to_string(n_batches + 1));
      if (use_constraintor) nd::adam_step<Real>(c_params, c_adam);
      nd::adam_step<Real>(f_params, f_adam);
      for (auto* p : c_params) p->zero_grad();
      for (auto* p : f_params) p->zero_grad();

      stats.occ += occ;
      stats.ml += ml;
      stats.bgspp += bgspp;
      ++n_batches;
    }
    stats.occ /= n_batches;
    stats.ml /= n_batches;
    stats.bgspp /= n_batches;
    result.history.push_back(stats);
  }
  result.model = std::move(model);
  return result;
}

TrainResult train(const featio::Manifest& manifest, const TrainConfig& cfg) {
  cfg.validate();
  std::vector<Sample> samples;
  for (const auto& e : manifest.entries)
    if (in_train_splits(e, cfg)) samples.push_back(load_sample(manifest, e));
  if (samples.empty()) fail("train", "manifest has no entries in the training splits");
  return train(samples, cfg);
}

// ---------------------------------------------------------------------------

scoring::AnomalyMap infer(const ModelArtifact& model, const featio::FeatureStack& stack,
                          const refpool::ReferencePool& pool, std::uint32_t image_height, std::uint32_t image_width) {
  model.check_compatible(stack.dims());
  const refpool::ResidualStack residual = refpool::to_residual(stack, pool);
  const std::vector<Mat> pos = level_positional_embeddings(model);
  scoring::AnomalyMap out;
  std::vector<Mat> upsampled;
  for (std::size_t l = 0; l < model.level_dims.size(); ++l) {
    const auto& d = model.level_dims[l];
    const Mat x = model.config.occ_mode == OccMode::Off ? residual.levels[l]
                                                       : model.constraintors[l].apply(residual.levels[l]);
    Vec logp = model.flows[l].log_prob(x, pos[l]);
    if (model.config.score_scale == ScoreScale::PerChannel) logp /= Real(d.channels);
    Mat level_map(d.height, d.width);
    for (Eigen::Index i = 0; i < logp.size(); ++i) level_map.data()[i] = scoring::score_from_log_prob(logp[i]);
    upsampled.push_back(scoring::upsample_bilinear(level_map, image_height, image_width));
    out.level_maps.push_back(std::move(level_map));
  }
  out.map = scoring::aggregate_levels(upsampled);
  out.image_score = scoring::image_score(out.map);
  return out;
}

// ---------------------------------------------------------------------------

std::vector<const featio::ManifestEntry*> reference_entries(const featio::Manifest& manifest,
                                                            const std::string& class_name, int k) {
  std::vector<const featio::ManifestEntry*> out;
  for (const auto& e : manifest.entries)
    if (e.split == featio::Split::Reference && e.class_name == class_name && int(out.size()) < k) out.push_back(&e);
  return out;
}

MetricsReport evaluate(const ModelArtifact& model, const featio::Manifest& manifest) {
  std::vector<std::string> classes;
  for (const auto& e : manifest.entries)
    if (e.split == featio::Split::Test && std::find(classes.begin(), classes.end(), e.class_name) == classes.end())
      classes.push_back(e.class_name);
  if (classes.empty()) fail("eval", "manifest has no test entries");

  MetricsReport report;
  for (const auto& cls : classes) {
    const auto ref_entries = reference_entries(manifest, cls, model.config.k_ref);
    if (ref_entries.empty()) fail("eval", "class '" + cls + "' has no reference entries");
    std::vector<Sample> refs;
    for (const auto* e : ref_entries) refs.push_back(load_sample(manifest, *e));
    std::vector<const Sample*> ref_ptrs;
    for (const auto& s : refs) {
      model.check_compatible(s.features.dims());
      ref_ptrs.push_back(&s);
    }
    const refpool::ReferencePool pool = build_class_pool(ref_ptrs);

    std::vector<double> image_scores, pixel_scores;
    std::vector<std::uint8_t> image_labels, pixel_labels;
    for (const auto& e : manifest.entries) {
      if (e.split != featio::Split::Test || e.class_name != cls) continue;
      const Sample s = load_sample(manifest, e);
      const auto amap = infer(model, s.features, pool, e.image_height, e.image_width);
      image_scores.push_back(amap.image_score);
      image_labels.push_back(s.mask && s.mask->any() ? 1 : 0);
      pixel_scores.insert(pixel_scores.end(), amap.map.data(), amap.map.data() + amap.map.size());
      if (s.mask) pixel_labels.insert(pixel_labels.end(), s.mask->data.begin(), s.mask->data.end());
      else pixel_labels.insert(pixel_labels.end(), std::size_t(amap.map.size()), 0);
    }
    const bool has_pos = std::count(image_labels.begin(), image_labels.end(), 1) > 0;
    const bool has_neg = std::count(image_labels.begin(), image_labels.end(), 0) > 0;
    if (!has_pos || !has_neg) fail("eval", "class '" + cls + "' needs both normal and abnormal test images");
    ClassMetrics m{cls, image_scores.size(), scoring::auroc(image_scores, image_labels),
                   scoring::auroc(pixel_scores, pixel_labels)};
    report.classes.push_back(m);
  }
  for (const auto& m : report.classes) {
    report.mean_image_auroc += m.image_auroc;
    report.mean_pixel_auroc += m.pixel_auroc;
  }
  report.mean_image_auroc /= double(report.classes.size());
  report.mean_pixel_auroc /= double(report.classes.size());
  return report;
}

std::string MetricsReport::to_csv() const {
  std::string out = "class,n_images,image_auroc,pixel_auroc\n";
  char buf[128];
  std::size_t total = 0;
  for (const auto& m : classes) {
    std::snprintf(buf, sizeof buf, ",%zu,%.6f,%.6f\n", m.n_images, m.image_auroc, m.pixel_auroc);
    out += m.class_name + buf;
    total += m.n_images;
  }
  std::snprintf(buf, sizeof buf, "mean,%zu,%.6f,%.6f\n", total, mean_image_auroc, mean_pixel_auroc);
  out += buf;
  return out;
}

}  // namespace resad
