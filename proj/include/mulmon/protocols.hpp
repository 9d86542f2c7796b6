#pragma once

#include <numeric>

#include "mulmon/evaluation.hpp"
#include "mulmon/training.hpp"

namespace mulmon {

// Dataset-level evaluation protocols. Scenes are observed under seeded view
// orderings; metrics for every prefix length T come from one online pass
// (lambda snapshots after each observed view), with the query tail fixed so
// different T stay comparable.

template <class S>
struct ScenePrefixEval {
  std::vector<int> ordering;
  std::vector<int> observed;              // first T_max of the ordering
  std::vector<int> queries;               // the tail
  std::vector<LatentSlots<S>> lambda_at;  // posterior after 1..T_max views
};

template <class S>
ScenePrefixEval<S> observe_prefixes(const MulMonParams<S>& params, const ModelConfig& cfg,
                                    const SceneRecord& scene, int64_t T_max,
                                    uint64_t seed) {
  int64_t T_total = static_cast<int64_t>(scene.views.size());
  MULMON_CHECK(T_max >= 1 && T_max < T_total, "observe_prefixes: bad T_max");
  ScenePrefixEval<S> res;
  res.ordering.resize(T_total);
  std::iota(res.ordering.begin(), res.ordering.end(), 0);
  Rng r = Rng(seed).stream("view-order");
  r.shuffle(res.ordering.begin(), res.ordering.end());
  res.observed.assign(res.ordering.begin(), res.ordering.begin() + T_max);
  res.queries.assign(res.ordering.begin() + T_max, res.ordering.end());

  std::vector<ViewRef> views;
  for (int idx : res.observed)
    views.push_back(ViewRef{&scene.views[idx].image, &scene.views[idx].viewpoint.vector});
  auto noise = make_noise_fn<S>(Rng(seed).stream("eval-noise"), cfg.K, cfg.D);
  auto obs = observe_sequence(params, cfg, views, noise, /*keep_traces=*/true);
  for (const auto& trace : obs.traces) res.lambda_at.push_back(trace.lambdas.back());
  return res;
}

struct SegMetrics {
  double obs_miou = 0;   // matched mIoU reconstructing the observed views
  double pred_miou = 0;  // matched mIoU at the held-out query views
  double rmse = 0;       // novel-view prediction error over the queries
};

// Metrics for the posterior after T observed views (mean-latent renders).
template <class S>
SegMetrics seg_metrics_at(const MulMonParams<S>& params, const ModelConfig& cfg,
                          const SceneRecord& scene, const ScenePrefixEval<S>& pre,
                          int64_t T, bool include_background = true) {
  MULMON_CHECK(T >= 1 && T <= static_cast<int64_t>(pre.lambda_at.size()),
               "seg_metrics_at: T out of range");
  const LatentSlots<S>& lambda = pre.lambda_at[T - 1];
  SegMetrics out;
  for (int64_t t = 0; t < T; ++t) {
    const ViewObservation& view = scene.views[pre.observed[t]];
    auto rendered = predict_novel_view(params, cfg, lambda,
                                       view.viewpoint.vector.cast<S>());
    out.obs_miou += miou_matched(rendered.hard_masks, *view.gt_masks, cfg.K,
                                 include_background).miou / T;
  }
  for (int q : pre.queries) {
    const ViewObservation& view = scene.views[q];
    auto rendered = predict_novel_view(params, cfg, lambda,
                                       view.viewpoint.vector.cast<S>());
    out.pred_miou += miou_matched(rendered.hard_masks, *view.gt_masks, cfg.K,
                                  include_background).miou / pre.queries.size();
    out.rmse += rmse(rendered.image.template cast<float>(), view.image) /
                pre.queries.size();
  }
  return out;
}

// Section-5.4 protocol point: draw n samples from the posterior after T
// views, render the query tail, take the pixel-wise empirical variance.
template <class S>
double uncertainty_at(const MulMonParams<S>& params, const ModelConfig& cfg,
                      const SceneRecord& scene, const ScenePrefixEval<S>& pre,
                      int64_t T, int n_samples, uint64_t seed) {
  std::vector<Tensor<S>> query_vps;
  for (int q : pre.queries)
    query_vps.push_back(scene.views[q].viewpoint.vector.cast<S>());
  return predictive_uncertainty(params, cfg, pre.lambda_at[T - 1], query_vps, n_samples,
                                Rng(seed).stream("uncertainty"));
}

struct MeanSd {
  double mean = 0, sd = 0;
};

inline MeanSd mean_sd(const std::vector<double>& xs) {
  MeanSd out;
  if (xs.empty()) return out;
  for (double x : xs) out.mean += x;
  out.mean /= xs.size();
  for (double x : xs) out.sd += (x - out.mean) * (x - out.mean);
  out.sd = xs.size() > 1 ? std::sqrt(out.sd / (xs.size() - 1)) : 0.0;
  return out;
}

// ---- dataset-level aggregates ----

struct DatasetEvalConfig {
  int64_t observe_T = 5;
  int64_t max_observe_T = 5;
  int n_seeds = 5;       // seeded view orderings
  int n_samples = 10;    // posterior draws for uncertainty
  int64_t max_scenes = 0;  // 0 = all
  bool include_background = true;
  uint64_t seed = 0;
  std::vector<int64_t> uncertainty_T;  // empty = every prefix 1..max_observe_T
};

template <class S>
struct DatasetEvalResult {
  MeanSd obs_miou, pred_miou, rmse;            // across seeds (scene-mean per seed)
  std::vector<double> obs_miou_per_seed, pred_miou_per_seed, rmse_per_seed;
  std::vector<std::vector<double>> uncertainty_by_T;  // [T_max][scene] seed-avg
  std::vector<double> uncertainty_curve;       // dataset mean per T
};

template <class S>
DatasetEvalResult<S> evaluate_dataset(const MulMonParams<S>& params,
                                      const ModelConfig& cfg,
                                      const std::vector<SceneRecord>& scenes,
                                      const DatasetEvalConfig& ec,
                                      bool with_uncertainty = true) {
  int64_t n = ec.max_scenes > 0
                  ? std::min<int64_t>(ec.max_scenes, scenes.size())
                  : static_cast<int64_t>(scenes.size());
  MULMON_CHECK(n >= 1, "evaluate_dataset: no scenes");
  int64_t T_max = ec.max_observe_T;

  struct PerSeed {
    std::vector<double> obs, pred, rms;
  };
  std::vector<PerSeed> per_seed(ec.n_seeds);
  for (auto& p : per_seed) {
    p.obs.resize(n);
    p.pred.resize(n);
    p.rms.resize(n);
  }
  std::vector<int64_t> unc_T = ec.uncertainty_T;
  if (unc_T.empty())
    for (int64_t T = 1; T <= T_max; ++T) unc_T.push_back(T);
  std::vector<std::vector<std::vector<double>>> unc(
      T_max, std::vector<std::vector<double>>(n, std::vector<double>(ec.n_seeds)));

  parallel_for(static_cast<size_t>(n) * ec.n_seeds, [&](size_t job) {
    int64_t si = static_cast<int64_t>(job) / ec.n_seeds;
    int sd = static_cast<int>(job % ec.n_seeds);
    uint64_t order_seed = Rng(ec.seed).stream("eval-order", si, sd).next_u64();
    auto pre = observe_prefixes(params, cfg, scenes[si], T_max, order_seed);
    auto m = seg_metrics_at(params, cfg, scenes[si], pre, ec.observe_T,
                            ec.include_background);
    per_seed[sd].obs[si] = m.obs_miou;
    per_seed[sd].pred[si] = m.pred_miou;
    per_seed[sd].rms[si] = m.rmse;
    if (with_uncertainty)
      for (int64_t T : unc_T)
        unc[T - 1][si][sd] =
            uncertainty_at(params, cfg, scenes[si], pre, T, ec.n_samples, order_seed);
  });

  DatasetEvalResult<S> out;
  for (const auto& p : per_seed) {
    out.obs_miou_per_seed.push_back(mean_sd(p.obs).mean);
    out.pred_miou_per_seed.push_back(mean_sd(p.pred).mean);
    out.rmse_per_seed.push_back(mean_sd(p.rms).mean);
  }
  out.obs_miou = mean_sd(out.obs_miou_per_seed);
  out.pred_miou = mean_sd(out.pred_miou_per_seed);
  out.rmse = mean_sd(out.rmse_per_seed);
  if (with_uncertainty) {
    out.uncertainty_by_T.resize(T_max);
    out.uncertainty_curve.assign(T_max, 0.0);
    for (int64_t T : unc_T) {
      out.uncertainty_by_T[T - 1].resize(n);
      for (int64_t si = 0; si < n; ++si)
        out.uncertainty_by_T[T - 1][si] = mean_sd(unc[T - 1][si]).mean;
      out.uncertainty_curve[T - 1] = mean_sd(out.uncertainty_by_T[T - 1]).mean;
    }
  }
  return out;
}

// RMSE with T observed views, per T in a grid; dataset means over seeds.
template <class S>
std::vector<SegMetrics> metrics_vs_T(const MulMonParams<S>& params,
                                     const ModelConfig& cfg,
                                     const std::vector<SceneRecord>& scenes,
                                     const std::vector<int64_t>& T_grid,
                                     const DatasetEvalConfig& ec) {
  int64_t n = ec.max_scenes > 0
                  ? std::min<int64_t>(ec.max_scenes, scenes.size())
                  : static_cast<int64_t>(scenes.size());
  int64_t T_max = *std::max_element(T_grid.begin(), T_grid.end());
  std::vector<std::vector<SegMetrics>> acc(T_grid.size());
  for (auto& a : acc) a.resize(n * ec.n_seeds);
  parallel_for(static_cast<size_t>(n) * ec.n_seeds, [&](size_t job) {
    int64_t si = static_cast<int64_t>(job) / ec.n_seeds;
    int sd = static_cast<int>(job % ec.n_seeds);
    uint64_t order_seed = Rng(ec.seed).stream("eval-order", si, sd).next_u64();
    auto pre = observe_prefixes(params, cfg, scenes[si], T_max, order_seed);
    for (size_t gi = 0; gi < T_grid.size(); ++gi)
      acc[gi][job] = seg_metrics_at(params, cfg, scenes[si], pre, T_grid[gi],
                                    ec.include_background);
  });
  std::vector<SegMetrics> out(T_grid.size());
  for (size_t gi = 0; gi < T_grid.size(); ++gi) {
    for (const auto& m : acc[gi]) {
      out[gi].obs_miou += m.obs_miou / acc[gi].size();
      out[gi].pred_miou += m.pred_miou / acc[gi].size();
      out[gi].rmse += m.rmse / acc[gi].size();
    }
  }
  return out;
}

// ---- DCI data extraction ----

// One row per matched foreground object per observed view: representation =
// the posterior mean of the slot registered to that object, factors = the
// scene's ground-truth generative factors.
template <class S>
void extract_object_representations(const MulMonParams<S>& params,
                                    const ModelConfig& cfg,
                                    const std::vector<SceneRecord>& scenes,
                                    int64_t observe_T, uint64_t seed,
                                    int64_t max_rows, Tensor<double>& reps,
                                    Tensor<double>& factors) {
  std::vector<std::vector<double>> rep_rows, fac_rows;
  std::mutex mu;
  parallel_for(scenes.size(), [&](size_t si) {
    const SceneRecord& scene = scenes[si];
    uint64_t order_seed = Rng(seed).stream("dci-order", si).next_u64();
    auto pre = observe_prefixes(params, cfg, scene, observe_T, order_seed);
    const LatentSlots<S>& lambda = pre.lambda_at[observe_T - 1];
    for (int64_t t = 0; t < observe_T; ++t) {
      const ViewObservation& view = scene.views[pre.observed[t]];
      auto rendered =
          predict_novel_view(params, cfg, lambda, view.viewpoint.vector.cast<S>());
      auto match = miou_matched(rendered.hard_masks, *view.gt_masks, cfg.K, true);
      for (size_t oi = 0; oi < match.gt_objects.size(); ++oi) {
        int obj = match.gt_objects[oi];
        if (obj == 0 || match.assignment[oi] < 0) continue;  // foreground only
        std::vector<double> rep(cfg.D), fac(scene.factors.shape[1]);
        for (int64_t d = 0; d < cfg.D; ++d)
          rep[d] = lambda.mean.at(match.assignment[oi], d);
        for (int64_t f = 0; f < scene.factors.shape[1]; ++f)
          fac[f] = scene.factors.at(obj, f);
        std::lock_guard<std::mutex> lk(mu);
        rep_rows.push_back(std::move(rep));
        fac_rows.push_back(std::move(fac));
      }
    }
  });
  MULMON_CHECK_DATA(!rep_rows.empty(), "no matched foreground objects for DCI");
  int64_t rows = static_cast<int64_t>(rep_rows.size());
  if (max_rows > 0 && rows > max_rows) rows = max_rows;
  reps = Tensor<double>(Shape{rows, cfg.D});
  factors = Tensor<double>(Shape{rows, static_cast<int64_t>(fac_rows[0].size())});
  for (int64_t i = 0; i < rows; ++i) {
    std::copy(rep_rows[i].begin(), rep_rows[i].end(), reps.data() + i * cfg.D);
    std::copy(fac_rows[i].begin(), fac_rows[i].end(),
              factors.data() + i * factors.shape[1]);
  }
}

// ---- ablation sweeps ----

enum class AblationKind { T, K, AlphaIG };

struct SweepRow {
  double x = 0;
  std::map<std::string, double> metrics;
};

template <class S>
std::vector<SweepRow> sweep_T(const MulMonParams<S>& params, const ModelConfig& cfg,
                              const std::vector<SceneRecord>& scenes,
                              const std::vector<int64_t>& grid,
                              const DatasetEvalConfig& ec) {
  auto ms = metrics_vs_T(params, cfg, scenes, grid, ec);
  std::vector<SweepRow> rows;
  for (size_t i = 0; i < grid.size(); ++i) {
    SweepRow r;
    r.x = static_cast<double>(grid[i]);
    r.metrics["obs_miou"] = ms[i].obs_miou;
    r.metrics["pred_miou"] = ms[i].pred_miou;
    r.metrics["rmse"] = ms[i].rmse;
    rows.push_back(std::move(r));
  }
  return rows;
}

// Slot weights are shared, so a checkpoint runs at any K; scenes with more
// objects than slots degrade but still evaluate.
template <class S>
std::vector<SweepRow> sweep_K(const MulMonParams<S>& params, const ModelConfig& cfg,
                              const std::vector<SceneRecord>& scenes,
                              const std::vector<int64_t>& grid,
                              const DatasetEvalConfig& ec) {
  std::vector<SweepRow> rows;
  for (int64_t K : grid) {
    ModelConfig run_cfg = cfg;
    run_cfg.K = K;
    auto res = evaluate_dataset(params, run_cfg, scenes, ec, /*with_uncertainty=*/false);
    SweepRow r;
    r.x = static_cast<double>(K);
    r.metrics["obs_miou"] = res.obs_miou.mean;
    r.metrics["pred_miou"] = res.pred_miou.mean;
    r.metrics["rmse"] = res.rmse.mean;
    rows.push_back(std::move(r));
  }
  return rows;
}

// Relative uncertainty reduction between two observation counts; the scene
// learning rate measure of the alpha_IG study.
template <class S>
double uncertainty_reduction_rate(const MulMonParams<S>& params, const ModelConfig& cfg,
                                  const std::vector<SceneRecord>& scenes,
                                  int64_t T_lo, int64_t T_hi,
                                  const DatasetEvalConfig& ec_in) {
  DatasetEvalConfig ec = ec_in;
  ec.uncertainty_T = {T_lo, T_hi};
  auto res = evaluate_dataset(params, cfg, scenes, ec, /*with_uncertainty=*/true);
  double u_lo = res.uncertainty_curve[T_lo - 1];
  double u_hi = res.uncertainty_curve[T_hi - 1];
  return u_lo > 0 ? (u_lo - u_hi) / u_lo : 0.0;
}

}  // namespace mulmon
