#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <type_traits>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>

#include "mulmon/inference.hpp"
#include "mulmon/scene_data.hpp"

namespace mulmon {

// ---- view partitioning ----

struct ViewPartition {
  std::vector<int> observed;  // the set T, in observation order
  std::vector<int> query;     // the set Q
};

// n ~ U(1, min(5, T_total - 1)) observed views; membership and order are a
// uniform random shuffle. Q is never empty.
inline ViewPartition partition_views(int64_t n_views, Rng& rng) {
  MULMON_CHECK(n_views >= 2, "partition_views: need at least 2 views, got ", n_views);
  int64_t n_max = std::min<int64_t>(5, n_views - 1);
  int64_t n = rng.uniform_int(1, n_max);
  std::vector<int> idx(n_views);
  std::iota(idx.begin(), idx.end(), 0);
  rng.shuffle(idx.begin(), idx.end());
  ViewPartition p;
  p.observed.assign(idx.begin(), idx.begin() + n);
  p.query.assign(idx.begin() + n, idx.end());
  return p;
}

// ---- losses ----

struct LossBreakdown {
  double observed_nll = 0;  // (1/|T|) sum_t sum_l w_l NLL^(l)
  double query_nll = 0;     // (1/|Q|) sum_q NLL_q
  double ig_term = 0;       // (1/|T|) sum_t sum_{l>=1} w_l KL^(l)
  double alpha_ig = 1.0;
  double total = 0;         // observed_nll + query_nll + alpha_ig * ig_term

  bool decomposition_exact(double tol = 1e-9) const {
    return std::abs(total - (observed_nll + query_nll + alpha_ig * ig_term)) <=
           tol * std::max(1.0, std::abs(total));
  }
};

// Mean negative mixture log-likelihood over queries at their viewpoints,
// with a fresh z draw from lambda_final per query. Empty Q returns 0.
template <class S>
Var query_loss(Tape<S>& t, const TapeParams<S>& tp, const ModelConfig& cfg,
               const TapeLatent<S>& lambda_final,
               const std::vector<ViewRef>& queries,
               const std::type_identity_t<std::function<Tensor<S>(int64_t q)>>& noise) {
  if (queries.empty()) {
    std::cerr << "[mulmon] warning: empty query set, query loss = 0\n";
    return t.scalar_constant(S(0));
  }
  Var acc;
  for (size_t qi = 0; qi < queries.size(); ++qi) {
    Tensor<S> x = queries[qi].image->template cast<S>();
    Tensor<S> v = queries[qi].viewpoint->template cast<S>();
    Var z = sample_var(t, lambda_final, noise(static_cast<int64_t>(qi)));
    Var zt = view_transform(t, tp, z, v);
    auto dec = decode(t, tp, zt, cfg.H, cfg.W);
    auto mix = mixture_log_likelihood_vars(t, t.constant(x), dec, cfg.sigma2);
    Var nll = t.scale(mix.ll, S(-1));
    acc = acc.valid() ? t.add(acc, nll) : nll;
  }
  return t.scale(acc, S(1.0 / queries.size()));
}

// KL between consecutive posteriors; the IG approximation of Eq. 5 and the
// same machinery as the inner-loop regularizer.
template <class S>
double information_gain(const LatentSlots<S>& lambda_post,
                        const LatentSlots<S>& lambda_prior) {
  return kl_gaussian(lambda_post, lambda_prior);
}

template <class S>
struct ElboResult {
  Var total;  // scalar minimization target, -ELBO
  LossBreakdown breakdown;
  LatentSlots<S> lambda_final;
};

// SingleSampleELBO: outer loop over the observed set accumulating the
// triangularly weighted inner losses, then viewpoint-queried prediction
// over Q. The scalar is a minimization target (negated ELBO).
template <class S>
ElboResult<S> elbo_single_scene(Tape<S>& t, const TapeParams<S>& tp,
                                const ModelConfig& cfg,
                                const std::vector<ViewRef>& views,
                                const ViewPartition& part, const Rng& noise_base,
                                std::type_identity_t<AuxReplay<S>*> replay = nullptr,
                                const std::string& scene_label = "") {
  MULMON_CHECK(views.size() >= 2, "elbo_single_scene: need >= 2 views");
  MULMON_CHECK(!part.observed.empty(), "elbo_single_scene: empty observed set");

  TapeLatent<S> lambda;
  {
    auto prior = init_prior<S>(cfg.K, cfg.D);
    lambda.mean = t.constant(prior.mean);
    lambda.raw_scale = t.constant(prior.raw_scale);
  }
  RefineState<S> state = zero_refine_state(t, cfg.K);

  Var obs_nll, ig;
  try {
    for (size_t ti = 0; ti < part.observed.size(); ++ti) {
      const ViewRef& view = views[part.observed[ti]];
      auto vc = make_view_constants(t, cfg, view.image->template cast<S>(),
                                    view.viewpoint->template cast<S>());
      auto noise = [&, ti](int64_t l) {
        Rng r = noise_base.stream("noise-inner", ti, static_cast<uint64_t>(l));
        Tensor<S> eps(Shape{cfg.K, cfg.D});
        for (auto& e : eps.v) e = static_cast<S>(r.normal());
        return eps;
      };
      auto r = inner_loop(t, tp, cfg, lambda, state, vc, noise, replay,
                          static_cast<int64_t>(ti));
      lambda = r.lambda;
      state = r.state;
      obs_nll = obs_nll.valid() ? t.add(obs_nll, r.weighted_nll) : r.weighted_nll;
      ig = ig.valid() ? t.add(ig, r.weighted_kl) : r.weighted_kl;
    }
  } catch (const NumericError& e) {
    throw NumericError(detail::format_msg("scene '", scene_label, "': ", e.what()));
  }
  S inv_T = S(1.0 / part.observed.size());
  obs_nll = t.scale(obs_nll, inv_T);
  ig = t.scale(ig, inv_T);

  std::vector<ViewRef> queries;
  for (int qi : part.query) queries.push_back(views[qi]);
  auto qnoise = [&](int64_t qi) {
    Rng r = noise_base.stream("noise-query", static_cast<uint64_t>(qi));
    Tensor<S> eps(Shape{cfg.K, cfg.D});
    for (auto& e : eps.v) e = static_cast<S>(r.normal());
    return eps;
  };
  Var qnll = query_loss(t, tp, cfg, lambda, queries, qnoise);

  ElboResult<S> res;
  res.total = t.add(t.add(obs_nll, t.scale(ig, S(cfg.alpha_ig))), qnll);
  res.breakdown.observed_nll = t.scalar(obs_nll);
  res.breakdown.ig_term = t.scalar(ig);
  res.breakdown.query_nll = t.scalar(qnll);
  res.breakdown.alpha_ig = cfg.alpha_ig;
  res.breakdown.total = t.scalar(res.total);
  if (!std::isfinite(res.breakdown.total))
    throw NumericError(detail::format_msg("scene '", scene_label,
                                          "': non-finite total loss"));
  res.lambda_final =
      LatentSlots<S>(t.val(lambda.mean), t.val(lambda.raw_scale));
  return res;
}

// ---- optimizer ----

// max{0.1 eta0 + 0.9 eta0 (1 - s/6e5), 0.1 eta0}, factored so that s=0
// returns eta0 bitwise and the clamp is exact
inline double lr_schedule(int64_t step, double eta0) {
  MULMON_CHECK(step >= 0, "lr_schedule: negative step");
  double factor = 0.1 + 0.9 * (1.0 - static_cast<double>(step) / 6e5);
  return eta0 * std::max(factor, 0.1);
}

template <class S>
class Adam {
 public:
  Adam(MulMonParams<S>& params, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {
    params.for_each([&](const char*, Tensor<S>& p) {
      m_.emplace_back(p.shape);
      v_.emplace_back(p.shape);
    });
  }

  // grads in for_each order; updates params in place
  void step(MulMonParams<S>& params, const std::vector<Tensor<S>>& grads, double lr) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, t_);
    double bc2 = 1.0 - std::pow(beta2_, t_);
    size_t i = 0;
    params.for_each([&](const char*, Tensor<S>& p) {
      const Tensor<S>& g = grads[i];
      Tensor<S>& m = m_[i];
      Tensor<S>& v = v_[i];
      for (size_t j = 0; j < p.v.size(); ++j) {
        double gj = g.v[j];
        m.v[j] = static_cast<S>(beta1_ * m.v[j] + (1.0 - beta1_) * gj);
        v.v[j] = static_cast<S>(beta2_ * v.v[j] + (1.0 - beta2_) * gj * gj);
        double mh = m.v[j] / bc1, vh = v.v[j] / bc2;
        p.v[j] -= static_cast<S>(lr * mh / (std::sqrt(vh) + eps_));
      }
      ++i;
    });
  }

  int64_t steps_taken() const { return t_; }

  void to_arrays(ArrayFile& f, const MulMonParams<S>& params) const {
    size_t i = 0;
    params.for_each([&](const char* name, const Tensor<S>&) {
      f.put(std::string("adam.m.") + name, m_[i]);
      f.put(std::string("adam.v.") + name, v_[i]);
      ++i;
    });
    f.put_scalar("adam.t", t_);
  }
  void from_arrays(const ArrayFile& f, const MulMonParams<S>& params) {
    size_t i = 0;
    params.for_each([&](const char* name, const Tensor<S>&) {
      m_[i] = f.get_f32(std::string("adam.m.") + name).template cast<S>();
      v_[i] = f.get_f32(std::string("adam.v.") + name).template cast<S>();
      ++i;
    });
    t_ = f.get_scalar_i64("adam.t");
  }

 private:
  double beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<Tensor<S>> m_, v_;
};

// ---- training loop ----

struct TrainConfig {
  ModelConfig model;
  std::string dataset_dir;
  std::string out_dir;
  int64_t batch_size = 8;
  int64_t total_steps = 300000;
  double lr0 = 3e-4;
  double grad_clip = 5.0;  // global norm; 0 disables
  uint64_t seed = 0;
  int64_t ckpt_every = 2000;
  int64_t log_every = 1;
  std::string resume;       // checkpoint path, optional
  std::string config_echo;  // effective config JSON, stored in checkpoints
};

struct StepRecord {
  int64_t step;
  LossBreakdown loss;
  double lr;
  double seconds;
};

inline std::string checkpoint_name(int64_t step) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "ckpt_%08lld.bin", static_cast<long long>(step));
  return buf;
}

template <class S>
void save_checkpoint(const std::string& path, const MulMonParams<S>& params,
                     const Adam<S>* adam, int64_t step, uint64_t seed,
                     const std::string& config_json) {
  ArrayFile f;
  params_to_arrays(params, f);
  if (adam) adam->to_arrays(f, params);
  f.put_scalar("step", step);
  f.put_scalar("seed", static_cast<int64_t>(seed));
  f.put_string("config", config_json);
  f.save(path);
}

// Deterministic epoch shuffling: scene order for epoch e is a pure function
// of (seed, e), so any step's batch can be reconstructed independently.
inline std::vector<int> epoch_order(uint64_t seed, int64_t epoch, int64_t n) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng r = Rng(seed).stream("epoch", static_cast<uint64_t>(epoch));
  r.shuffle(idx.begin(), idx.end());
  return idx;
}

template <class S>
std::vector<Tensor<S>> scene_gradients(const MulMonParams<S>& params,
                                       const ModelConfig& cfg,
                                       const SceneRecord& scene, const Rng& scene_rng,
                                       LossBreakdown* breakdown) {
  std::vector<ViewRef> views;
  for (const auto& v : scene.views)
    views.push_back(ViewRef{&v.image, &v.viewpoint.vector});
  Rng part_rng = scene_rng.stream("partition");
  ViewPartition part = partition_views(static_cast<int64_t>(views.size()), part_rng);

  Tape<S> tape;
  auto tp = TapeParams<S>::bind(tape, params, true);
  auto res = elbo_single_scene(tape, tp, cfg, views, part, scene_rng.stream("noise"),
                               nullptr, scene.scene_id);
  if (breakdown) *breakdown = res.breakdown;
  tape.backward(res.total);
  std::vector<Tensor<S>> grads;
  grads.reserve(tp.all().size());
  for (Var p : tp.all()) grads.push_back(tape.grad_or_zero(p));
  return grads;
}

// Adaptive-moment training over mini-batches (Adam, Table-style schedule on
// eta only). Scene gradients are computed in parallel workers and reduced in
// batch order, so runs are reproducible for a fixed worker count.
template <class S>
void train(const TrainConfig& tc,
           const std::function<void(const StepRecord&)>& on_step = {}) {
  namespace fs = std::filesystem;
  tc.model.validate();
  MULMON_CHECK(tc.batch_size >= 1 && tc.total_steps >= 1, "train: bad config");

  DatasetManifest manifest = load_manifest(tc.dataset_dir);
  MULMON_CHECK(manifest.H == tc.model.H && manifest.W == tc.model.W,
               "dataset is ", manifest.H, "x", manifest.W, " but model wants ",
               tc.model.H, "x", tc.model.W);
  int64_t n_scenes = manifest.train_scenes;
  MULMON_CHECK(n_scenes >= 1, "train: empty train split");
  MULMON_CHECK(tc.batch_size <= n_scenes, "train: batch size ", tc.batch_size,
               " exceeds train split of ", n_scenes);
  std::vector<SceneRecord> scenes(n_scenes);
  parallel_for(n_scenes, [&](size_t i) {
    scenes[i] = load_scene(tc.dataset_dir, "train", i, manifest);
  });

  MulMonParams<S> params(tc.model);
  params.init(Rng(tc.seed).stream("model-init"));
  Adam<S> adam(params);
  int64_t start_step = 0;
  if (!tc.resume.empty()) {
    ArrayFile f = ArrayFile::load(tc.resume);
    params_from_arrays(params, f);
    adam.from_arrays(f, params);
    start_step = f.get_scalar_i64("step");
  }

  fs::create_directories(tc.out_dir);
  std::ofstream metrics(fs::path(tc.out_dir) / "metrics.jsonl", std::ios::app);

  size_t n_params = 0;
  params.for_each([&](const char*, const Tensor<S>&) { ++n_params; });

  for (int64_t step = start_step; step < tc.total_steps; ++step) {
    auto t0 = std::chrono::steady_clock::now();
    // batch indices from the deterministic epoch shuffle
    std::vector<int> batch(tc.batch_size);
    {
      int64_t cursor = step * tc.batch_size;
      int64_t epoch = cursor / n_scenes;
      int64_t off = cursor % n_scenes;
      std::vector<int> order = epoch_order(tc.seed, epoch, n_scenes);
      for (int64_t b = 0; b < tc.batch_size; ++b) {
        if (off + b >= n_scenes) {
          if (off != 0 || b != 0) {
            order = epoch_order(tc.seed, ++epoch, n_scenes);
            off = -b;  // restart at the head of the reshuffled order
          }
        }
        batch[b] = order[off + b];
      }
    }

    std::vector<std::vector<Tensor<S>>> batch_grads(tc.batch_size);
    std::vector<LossBreakdown> batch_loss(tc.batch_size);
    parallel_for(tc.batch_size, [&](size_t b) {
      Rng scene_rng = Rng(tc.seed).stream("scene-step", static_cast<uint64_t>(step),
                                          static_cast<uint64_t>(b));
      batch_grads[b] = scene_gradients(params, tc.model, scenes[batch[b]], scene_rng,
                                       &batch_loss[b]);
    });

    // reduce in batch order, mean over the batch
    std::vector<Tensor<S>> grads = std::move(batch_grads[0]);
    for (int64_t b = 1; b < tc.batch_size; ++b)
      for (size_t i = 0; i < grads.size(); ++i)
        for (size_t j = 0; j < grads[i].v.size(); ++j)
          grads[i].v[j] += batch_grads[b][i].v[j];
    S inv_b = S(1.0 / tc.batch_size);
    for (auto& g : grads)
      for (auto& e : g.v) e *= inv_b;

    if (tc.grad_clip > 0) {
      double sq = 0;
      for (const auto& g : grads)
        for (S e : g.v) sq += double(e) * double(e);
      double norm = std::sqrt(sq);
      if (norm > tc.grad_clip) {
        S scale = S(tc.grad_clip / norm);
        for (auto& g : grads)
          for (auto& e : g.v) e *= scale;
      }
    }

    double lr = lr_schedule(step, tc.lr0);
    adam.step(params, grads, lr);

    LossBreakdown mean_loss;
    mean_loss.alpha_ig = tc.model.alpha_ig;
    for (const auto& l : batch_loss) {
      mean_loss.observed_nll += l.observed_nll / tc.batch_size;
      mean_loss.query_nll += l.query_nll / tc.batch_size;
      mean_loss.ig_term += l.ig_term / tc.batch_size;
      mean_loss.total += l.total / tc.batch_size;
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (tc.log_every > 0 && (step % tc.log_every == 0 || step + 1 == tc.total_steps)) {
      metrics << "{\"step\":" << step << ",\"total\":" << mean_loss.total
              << ",\"observed_nll\":" << mean_loss.observed_nll
              << ",\"query_nll\":" << mean_loss.query_nll
              << ",\"ig\":" << mean_loss.ig_term << ",\"lr\":" << lr
              << ",\"seconds\":" << secs << "}\n";
      metrics.flush();
    }
    if (on_step) on_step(StepRecord{step, mean_loss, lr, secs});

    bool last = step + 1 == tc.total_steps;
    if (last || (tc.ckpt_every > 0 && (step + 1) % tc.ckpt_every == 0)) {
      // numbered snapshots carry parameters only; the resumable optimizer
      // state lives in ckpt_latest and ckpt_final
      std::string name = last ? "ckpt_final.bin" : checkpoint_name(step + 1);
      save_checkpoint((fs::path(tc.out_dir) / name).string(), params,
                      last ? &adam : nullptr, step + 1, tc.seed, tc.config_echo);
      save_checkpoint((fs::path(tc.out_dir) / "ckpt_latest.bin").string(), params,
                      &adam, step + 1, tc.seed, tc.config_echo);
    }
  }
}

}  // namespace mulmon
