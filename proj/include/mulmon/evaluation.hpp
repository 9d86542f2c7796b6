#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mulmon/forest.hpp"
#include "mulmon/hungarian.hpp"
#include "mulmon/inference.hpp"
#include "mulmon/scene_data.hpp"

namespace mulmon {

// ---- segmentation matching ----

struct MatchedSegmentation {
  std::vector<int> gt_objects;        // evaluated GT indices, in order
  std::vector<int> assignment;        // matched slot per GT object (-1: none)
  std::vector<double> per_object_iou;
  double miou = 0;
};

double iou(const Tensor<int32_t>& pred, const Tensor<uint8_t>& gt, int32_t slot,
           int32_t gt_object);

// One-to-one registration of GT objects to predicted slots maximizing total
// IoU (exact injective assignment), then the mean IoU over GT objects.
// GT objects are the mask values present in this view; background (0) is
// included unless include_background is false.
MatchedSegmentation miou_matched(const Tensor<int32_t>& pred_hard_masks,
                                 const Tensor<uint8_t>& gt_masks, int64_t n_slots,
                                 bool include_background = true);

// Root of the mean squared error over all pixels and channels.
double rmse(const Tensor<float>& pred, const Tensor<float>& gt);

// ---- DCI disentanglement ----

struct DCIReport {
  double disentanglement = 0;
  double completeness = 0;
  double informativeness = 0;
  Tensor<double> importance;            // [D_used, F_used]
  std::vector<double> factor_errors;    // per used factor, NRMSE on held-out rows
  std::vector<int> used_factors;        // factor columns that had variance
};

// Eastwood-Williams scores from per-factor random-forest regressors:
// disentanglement/completeness from importance-matrix entropies,
// informativeness = 1 - NRMSE on a held-out split. Zero-variance factors are
// excluded with a warning.
DCIReport dci_scores(const Tensor<double>& representations, const Tensor<double>& factors,
                     int n_trees = 100, uint64_t seed = 0);

// ---- model-based protocols ----

template <class S>
RenderedScene<S> predict_novel_view(const MulMonParams<S>& params, const ModelConfig& cfg,
                                    const LatentSlots<S>& lambda, const Tensor<S>& v,
                                    bool mean_latent = true,
                                    const Tensor<S>* noise = nullptr) {
  Tensor<S> z = lambda.mean;
  if (!mean_latent) {
    MULMON_CHECK(noise != nullptr, "predict_novel_view: sampling needs noise");
    z = sample(lambda, *noise);
  }
  return render_latent(params, z, v, cfg.H, cfg.W);
}

// Pixel-wise empirical variance over posterior-sample predictions at the
// given query viewpoints, averaged over pixels, channels, and queries.
// Mean over pixels/channels of the per-pixel empirical variance across a
// set of renders; symmetric in the sample order.
template <class S>
double mean_pixel_variance(const std::vector<Tensor<S>>& imgs) {
  MULMON_CHECK(imgs.size() >= 2, "mean_pixel_variance: need >= 2 samples");
  int64_t n = imgs[0].numel();
  size_t n_samples = imgs.size();
  double var_sum = 0;
  for (int64_t i = 0; i < n; ++i) {
    double mean = 0;
    for (const auto& im : imgs) mean += im.v[i];
    mean /= n_samples;
    double var = 0;
    for (const auto& im : imgs) var += (im.v[i] - mean) * (im.v[i] - mean);
    var_sum += var / (n_samples - 1);
  }
  return var_sum / static_cast<double>(n);
}

template <class S>
double predictive_uncertainty(const MulMonParams<S>& params, const ModelConfig& cfg,
                              const LatentSlots<S>& lambda,
                              const std::vector<Tensor<S>>& query_viewpoints,
                              int n_samples, const Rng& rng) {
  MULMON_CHECK(n_samples >= 2, "predictive_uncertainty: need >= 2 samples");
  MULMON_CHECK(!query_viewpoints.empty(), "predictive_uncertainty: no query viewpoints");
  double acc = 0;
  for (const Tensor<S>& v : query_viewpoints) {
    std::vector<Tensor<S>> imgs;
    imgs.reserve(n_samples);
    for (int s = 0; s < n_samples; ++s) {
      Rng r = rng.stream("uncertainty-sample", s);
      Tensor<S> eps(Shape{cfg.K, cfg.D});
      for (auto& e : eps.v) e = static_cast<S>(r.normal());
      Tensor<S> z = sample(lambda, eps);
      imgs.push_back(render_latent(params, z, v, cfg.H, cfg.W).image);
    }
    acc += mean_pixel_variance(imgs);
  }
  return acc / static_cast<double>(query_viewpoints.size());
}

// z = posterior mean everywhere except slot k, dim d swept over `values`,
// rendered at a fixed viewpoint.
template <class S>
std::vector<RenderedScene<S>> latent_traversal(const MulMonParams<S>& params,
                                               const ModelConfig& cfg,
                                               const LatentSlots<S>& lambda, int64_t k,
                                               int64_t d, const std::vector<double>& values,
                                               const Tensor<S>& v) {
  MULMON_CHECK(k >= 0 && k < lambda.K(), "latent_traversal: slot ", k, " out of range");
  MULMON_CHECK(d >= 0 && d < lambda.D(), "latent_traversal: dim ", d, " out of range");
  std::vector<RenderedScene<S>> frames;
  frames.reserve(values.size());
  for (double val : values) {
    Tensor<S> z = lambda.mean;
    z.at(k, d) = static_cast<S>(val);
    frames.push_back(render_latent(params, z, v, cfg.H, cfg.W));
  }
  return frames;
}

// ---- dataset-level protocol helpers ----

struct SceneEvalConfig {
  int64_t observe_T = 5;       // observed prefix length
  int64_t max_observe_T = 5;   // queries are the ordering's tail beyond this
  int n_samples = 10;          // posterior draws for uncertainty
  uint64_t seed = 0;           // view-ordering seed
};

template <class S>
struct SceneEvalResult {
  LatentSlots<S> lambda;
  std::vector<int> ordering;       // permuted view indices
  std::vector<int> observed;       // first observe_T of the ordering
  std::vector<int> queries;        // tail beyond max_observe_T
};

// Observes a seed-shuffled prefix of the scene's views and returns the
// posterior plus the fixed query tail (identical across different T so
// sweeps stay comparable).
template <class S>
SceneEvalResult<S> observe_scene(const MulMonParams<S>& params, const ModelConfig& cfg,
                                 const SceneRecord& scene, const SceneEvalConfig& ec) {
  int64_t T_total = static_cast<int64_t>(scene.views.size());
  MULMON_CHECK(ec.observe_T >= 1 && ec.observe_T <= ec.max_observe_T,
               "observe_scene: bad observe_T");
  MULMON_CHECK(ec.max_observe_T < T_total, "observe_scene: no views left for queries");
  SceneEvalResult<S> res;
  res.ordering.resize(T_total);
  std::iota(res.ordering.begin(), res.ordering.end(), 0);
  Rng r = Rng(ec.seed).stream("view-order");
  r.shuffle(res.ordering.begin(), res.ordering.end());
  res.observed.assign(res.ordering.begin(), res.ordering.begin() + ec.observe_T);
  res.queries.assign(res.ordering.begin() + ec.max_observe_T, res.ordering.end());

  std::vector<ViewRef> views;
  for (int idx : res.observed)
    views.push_back(ViewRef{&scene.views[idx].image, &scene.views[idx].viewpoint.vector});
  auto noise = make_noise_fn<S>(Rng(ec.seed).stream("eval-noise"), cfg.K, cfg.D);
  res.lambda = observe_sequence(params, cfg, views, noise).lambda;
  return res;
}

}  // namespace mulmon
