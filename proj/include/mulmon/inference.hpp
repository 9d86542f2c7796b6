#pragma once

#include <functional>
#include <type_traits>
#include <vector>

#include "mulmon/model.hpp"

namespace mulmon {

// Iterative amortized inference: L refinement iterations per view (inner
// loop), each view's posterior feeding the next view as its prior (outer
// loop). Everything is slot-parallel with shared weights.

template <class S>
using NoiseFn = std::function<Tensor<S>(int64_t l)>;  // [K,D] standard normal draw

template <class S>
struct RefineState {
  Var h, c;  // [K, 128] recurrent cell state
};

template <class S>
RefineState<S> zero_refine_state(Tape<S>& t, int64_t K) {
  return RefineState<S>{t.constant(Tensor<S>(Shape{K, kRefineHidden})),
                        t.constant(Tensor<S>(Shape{K, kRefineHidden}))};
}

// One captured set of stop-gradiented aux channels (post layer-norm).
template <class S>
struct AuxDetached {
  Tensor<S> grad_mu;      // [K,3,H,W]
  Tensor<S> grad_mask;    // [K,1,H,W]
  Tensor<S> grad_lambda;  // [K,2D]
};

// Capture/replay of the detached channels. The finite-difference oracle
// replays the nominal-parameter values so that the differenced function is
// exactly the one whose gradient the tape computes (stop-gradient semantics).
template <class S>
struct AuxReplay {
  bool replaying = false;
  std::vector<AuxDetached<S>> records;
  size_t cursor = 0;

  void reset_cursor() { cursor = 0; }
};

// Per-slot layer norm over each row's trailing elements, in place.
template <class S>
void layer_norm_rows(Tensor<S>& x, int64_t rows, double eps = 1e-5) {
  int64_t n = x.numel() / rows;
  for (int64_t r = 0; r < rows; ++r) {
    S* row = x.data() + r * n;
    double mean = 0;
    for (int64_t i = 0; i < n; ++i) mean += row[i];
    mean /= double(n);
    double var = 0;
    for (int64_t i = 0; i < n; ++i) var += (row[i] - mean) * (row[i] - mean);
    var /= double(n);
    double inv = 1.0 / std::sqrt(var + eps);
    for (int64_t i = 0; i < n; ++i) row[i] = static_cast<S>((row[i] - mean) * inv);
  }
}

template <class S>
struct AuxiliaryInputs {
  Var spatial;  // [K, 17, H, W]
  Var vector;   // [K, 4D + J]
};

// Constant per-view tensors reused across inner-loop iterations.
template <class S>
struct ViewConstants {
  Var x;        // [3,H,W]
  Var x_tiled;  // [K,3,H,W]
  Var coords;   // [K,2,H,W]
  Tensor<S> v;  // [J]
  Tensor<S> v_tiled;  // [K,J]
};

template <class S>
ViewConstants<S> make_view_constants(Tape<S>& t, const ModelConfig& cfg,
                                     const Tensor<S>& x, const Tensor<S>& v) {
  MULMON_CHECK(x.shape == Shape({3, cfg.H, cfg.W}), "view image shape ",
               x.shape.str(), " does not match model ", cfg.H, "x", cfg.W);
  MULMON_CHECK(v.numel() == cfg.J, "viewpoint dim ", v.numel(), " != model J=", cfg.J);
  ViewConstants<S> vc;
  vc.x = t.constant(x);
  Tensor<S> tiled(Shape{cfg.K, 3, cfg.H, cfg.W});
  for (int64_t k = 0; k < cfg.K; ++k)
    std::copy(x.v.begin(), x.v.end(), tiled.v.begin() + k * x.numel());
  vc.x_tiled = t.constant(std::move(tiled));
  vc.coords = t.constant(coord_channels<S>(cfg.K, cfg.H, cfg.W));
  vc.v = v;
  vc.v_tiled = Tensor<S>(Shape{cfg.K, cfg.J});
  for (int64_t k = 0; k < cfg.K; ++k)
    for (int64_t j = 0; j < cfg.J; ++j) vc.v_tiled.at(k, j) = v.v[j];
  return vc;
}

// a(.): assembles the 17-channel spatial stack and the 4D+J vector input.
// Gradient-derived channels arrive pre-detached (plain tensors); the
// likelihood-derived channels stay on the tape and are layer-normalized there.
template <class S>
AuxiliaryInputs<S> auxiliary_inputs(Tape<S>& t, const ModelConfig& cfg,
                                    const ViewConstants<S>& vc,
                                    const TapeLatent<S>& lambda,
                                    const DecodeVars<S>& dec,
                                    const MixtureVars<S>& mix,
                                    const AuxDetached<S>& grads) {
  int64_t K = cfg.K, H = cfg.H, W = cfg.W;
  Var mask = t.reshape(t.exp_(mix.log_m), Shape{K, 1, H, W});
  Var ll_ch = t.layer_norm_spatial(t.tile_hw_to_slots(mix.ll_pix, K));
  Var loo_ch;
  if (K >= 2) {
    loo_ch = t.layer_norm_spatial(
        t.reshape(t.logsumexp_exclude_slots(mix.scores), Shape{K, 1, H, W}));
  } else {
    // leave-one-out is undefined for a single slot
    loo_ch = t.constant(Tensor<S>(Shape{K, 1, H, W}));
  }
  Var spatial = t.concat_channels({
      vc.x_tiled,                                            // image, 3
      dec.rgb,                                               // slot means, 3
      t.constant(grads.grad_mu),                             // d(loss)/d(means), 3
      mask,                                                  // soft mask, 1
      dec.logits,                                            // mask logits, 1
      t.constant(grads.grad_mask),                           // d(loss)/d(mask), 1
      ll_ch,                                                 // mixture ll, 1
      loo_ch,                                                // leave-one-out ll, 1
      vc.coords,                                             // coords, 2
      t.reshape(mix.se, Shape{K, 1, H, W}),                  // squared error, 1
  });
  MULMON_CHECK(t.val(spatial).shape[1] == kAuxChannels,
               "auxiliary stack must have exactly 17 channels");
  Var vec = t.concat_cols({lambda.mean, lambda.raw_scale, t.constant(grads.grad_lambda),
                           t.constant(vc.v_tiled)});
  return AuxiliaryInputs<S>{spatial, vec};
}

// f_phi: conv encoder over the aux stack, two fully connected layers, the
// vector concat, an LSTM cell, and the linear head emitting delta-lambda.
template <class S>
std::pair<Var, RefineState<S>> refine_step(Tape<S>& t, const TapeParams<S>& tp,
                                           const AuxiliaryInputs<S>& aux,
                                           const RefineState<S>& state) {
  const auto& A = t.val(aux.spatial);
  int64_t K = A.shape[0], H = A.shape[2], W = A.shape[3];
  Var h = t.relu(t.conv3x3(aux.spatial, tp.ref_W[0], tp.ref_b[0]));
  h = t.relu(t.conv3x3(h, tp.ref_W[1], tp.ref_b[1]));
  h = t.relu(t.conv3x3(h, tp.ref_W[2], tp.ref_b[2]));
  h = t.relu(t.conv3x3(h, tp.ref_W[3], tp.ref_b[3]));
  Var flat = t.reshape(h, Shape{K, 64 * H * W});
  Var f1 = t.relu(t.linear(flat, tp.ref_fc1_W, tp.ref_fc1_b));
  Var f2 = t.linear(f1, tp.ref_fc2_W, tp.ref_fc2_b);
  Var inp = t.concat_cols({f2, aux.vector});

  Var gates = t.linear(t.concat_cols({inp, state.h}), tp.ref_lstm_W, tp.ref_lstm_b);
  int64_t Hd = kRefineHidden;
  Var gi = t.sigmoid(t.slice_cols(gates, 0, Hd));
  Var gf = t.sigmoid(t.slice_cols(gates, Hd, 2 * Hd));
  Var gg = t.tanh_(t.slice_cols(gates, 2 * Hd, 3 * Hd));
  Var go = t.sigmoid(t.slice_cols(gates, 3 * Hd, 4 * Hd));
  Var c_new = t.add(t.mul(gf, state.c), t.mul(gi, gg));
  Var h_new = t.mul(go, t.tanh_(c_new));
  Var delta = t.linear(h_new, tp.ref_head_W, tp.ref_head_b);
  return {delta, RefineState<S>{h_new, c_new}};
}

template <class S>
struct InnerLoopTrace {
  std::vector<LatentSlots<S>> lambdas;  // length L+1, includes the initial
  std::vector<double> nll;              // per-iteration -log p(x|z,v)
  std::vector<double> kl;               // per-iteration KL (0 at l=0)
  double weighted_loss = 0;
};

template <class S>
struct InnerLoopResult {
  TapeLatent<S> lambda;   // lambda^t after L updates
  RefineState<S> state;
  Var weighted_nll;       // sum_l w_l nll_l
  Var weighted_kl;        // sum_l w_l kl_l (l >= 1 terms)
  Var weighted_loss;      // weighted_nll + alpha * weighted_kl
  InnerLoopTrace<S> trace;
};

// Triangular iteration weight (2l+2)/(L^2+L); sums to 1 over l = 0..L-1.
inline double inner_weight(int64_t l, int64_t L) {
  return double(2 * l + 2) / double(L * L + L);
}

// One view's inner loop: L iterations of sample -> decode -> likelihood ->
// refine. KL at every l >= 1 is against lambda_prior (the previous view's
// posterior), not the previous iteration.
template <class S>
InnerLoopResult<S> inner_loop(Tape<S>& t, const TapeParams<S>& tp,
                              const ModelConfig& cfg, const TapeLatent<S>& lambda_prior,
                              const RefineState<S>& state_in,
                              const ViewConstants<S>& vc,
                              const std::type_identity_t<NoiseFn<S>>& noise,
                              std::type_identity_t<AuxReplay<S>*> replay,
                              int64_t view_index) {
  MULMON_CHECK(cfg.L >= 1, "inner_loop: L must be >= 1");
  InnerLoopResult<S> res;
  TapeLatent<S> lambda = lambda_prior;
  RefineState<S> state = state_in;

  res.trace.lambdas.push_back(
      LatentSlots<S>(t.val(lambda.mean), t.val(lambda.raw_scale)));

  Var wn, wk;  // weighted accumulators
  for (int64_t l = 0; l < cfg.L; ++l) {
    Tensor<S> eps = noise(l);
    MULMON_CHECK(eps.shape == Shape({cfg.K, cfg.D}), "inner_loop: noise shape ",
                 eps.shape.str(), " != [K,D]");
    Var z = sample_var(t, lambda, eps);
    Var zt = view_transform(t, tp, z, vc.v);
    auto dec = decode(t, tp, zt, cfg.H, cfg.W);
    auto mix = mixture_log_likelihood_vars(t, vc.x, dec, cfg.sigma2);
    Var nll = t.scale(mix.ll, S(-1));
    Var loss_l = nll;
    Var kl;
    if (l >= 1) {
      kl = kl_var(t, lambda, lambda_prior);
      loss_l = t.add(nll, t.scale(kl, S(cfg.alpha_ig)));
    }
    double loss_val = t.scalar(loss_l);
    if (!std::isfinite(loss_val))
      throw NumericError(detail::format_msg(
          "inner loop: non-finite loss at view ", view_index, ", iteration ", l));

    // stop-gradiented auxiliary channels
    AuxDetached<S> det;
    if (replay && replay->replaying) {
      MULMON_CHECK(replay->cursor < replay->records.size(),
                   "aux replay exhausted at view ", view_index, ", iteration ", l);
      det = replay->records[replay->cursor++];
    } else {
      auto grads = t.grads_of(loss_l, {dec.rgb, lambda.mean, lambda.raw_scale});
      det.grad_mu = std::move(grads[0]);
      layer_norm_rows(det.grad_mu, cfg.K);
      // d(loss)/d(m_k) holding other masks fixed: -exp(logN_k - ll_pix)
      det.grad_mask = Tensor<S>(Shape{cfg.K, 1, cfg.H, cfg.W});
      {
        const auto& scores = t.val(mix.scores);
        const auto& log_m = t.val(mix.log_m);
        const auto& ll_pix = t.val(mix.ll_pix);
        int64_t HW = cfg.H * cfg.W;
        for (int64_t k = 0; k < cfg.K; ++k)
          for (int64_t p = 0; p < HW; ++p)
            det.grad_mask.v[k * HW + p] = -std::exp(
                scores.v[k * HW + p] - log_m.v[k * HW + p] - ll_pix.v[p]);
      }
      layer_norm_rows(det.grad_mask, cfg.K);
      det.grad_lambda = Tensor<S>(Shape{cfg.K, 2 * cfg.D});
      for (int64_t k = 0; k < cfg.K; ++k)
        for (int64_t d = 0; d < cfg.D; ++d) {
          det.grad_lambda.at(k, d) = grads[1].at(k, d);
          det.grad_lambda.at(k, cfg.D + d) = grads[2].at(k, d);
        }
      layer_norm_rows(det.grad_lambda, cfg.K);
      if (replay) replay->records.push_back(det);
    }

    auto aux = auxiliary_inputs(t, cfg, vc, lambda, dec, mix, det);
    auto [delta, new_state] = refine_step(t, tp, aux, state);
    state = new_state;
    lambda.mean = t.add(lambda.mean, t.slice_cols(delta, 0, cfg.D));
    lambda.raw_scale = t.add(lambda.raw_scale, t.slice_cols(delta, cfg.D, 2 * cfg.D));

    double w = inner_weight(l, cfg.L);
    Var wnl = t.scale(nll, S(w));
    wn = wn.valid() ? t.add(wn, wnl) : wnl;
    if (l >= 1) {
      Var wkl = t.scale(kl, S(w));
      wk = wk.valid() ? t.add(wk, wkl) : wkl;
    }
    res.trace.nll.push_back(t.scalar(nll));
    res.trace.kl.push_back(l >= 1 ? t.scalar(kl) : 0.0);
    res.trace.lambdas.push_back(
        LatentSlots<S>(t.val(lambda.mean), t.val(lambda.raw_scale)));
  }
  if (!wk.valid()) wk = t.scalar_constant(S(0));  // L == 1: no KL terms
  res.lambda = lambda;
  res.state = state;
  res.weighted_nll = wn;
  res.weighted_kl = wk;
  res.weighted_loss = t.add(wn, t.scale(wk, S(cfg.alpha_ig)));
  res.trace.weighted_loss = t.scalar(res.weighted_loss);
  return res;
}

// ---- evaluation-time outer loop ----

struct ViewRef {
  const Tensor<float>* image;
  const Tensor<float>* viewpoint;
};

template <class S>
struct ObserveResult {
  LatentSlots<S> lambda;                 // lambda^T
  Tensor<S> hidden_h, hidden_c;          // recurrent state after the last view
  std::vector<InnerLoopTrace<S>> traces;
};

// lambda^0 = N(0, I); lambda^t = inner_loop(lambda^{t-1}, x^t, v^t). A fresh
// tape per view keeps the memory footprint independent of T. noise(t, l)
// supplies the reparametrization draws.
template <class S>
ObserveResult<S> observe_sequence(
    const MulMonParams<S>& params, const ModelConfig& cfg,
    const std::vector<ViewRef>& views,
    const std::type_identity_t<std::function<Tensor<S>(int64_t t, int64_t l)>>& noise,
    bool keep_traces = false) {
  MULMON_CHECK(!views.empty(), "observe_sequence: need at least one view");
  ObserveResult<S> res;
  LatentSlots<S> lambda = init_prior<S>(cfg.K, cfg.D);
  Tensor<S> h(Shape{cfg.K, kRefineHidden}), c(Shape{cfg.K, kRefineHidden});
  for (size_t t_idx = 0; t_idx < views.size(); ++t_idx) {
    Tape<S> tape;
    auto tp = TapeParams<S>::bind(tape, params, false);
    TapeLatent<S> lam{tape.leaf(lambda.mean, true), tape.leaf(lambda.raw_scale, true)};
    RefineState<S> st{tape.constant(h), tape.constant(c)};
    auto vc = make_view_constants(tape, cfg, views[t_idx].image->template cast<S>(),
                                  views[t_idx].viewpoint->template cast<S>());
    auto r = inner_loop(tape, tp, cfg, lam, st, vc,
                        [&](int64_t l) { return noise(static_cast<int64_t>(t_idx), l); },
                        nullptr, static_cast<int64_t>(t_idx));
    lambda = LatentSlots<S>(tape.val(r.lambda.mean), tape.val(r.lambda.raw_scale));
    h = tape.val(r.state.h);
    c = tape.val(r.state.c);
    if (keep_traces) res.traces.push_back(std::move(r.trace));
  }
  res.lambda = std::move(lambda);
  res.hidden_h = std::move(h);
  res.hidden_c = std::move(c);
  return res;
}

// Standard-normal [K,D] noise stream: (seed, "noise-inner", t, l).
template <class S>
std::function<Tensor<S>(int64_t, int64_t)> make_noise_fn(const Rng& base, int64_t K,
                                                         int64_t D) {
  return [base, K, D](int64_t t, int64_t l) {
    Rng r = base.stream("noise-inner", static_cast<uint64_t>(t),
                        static_cast<uint64_t>(l));
    Tensor<S> eps(Shape{K, D});
    for (auto& e : eps.v) e = static_cast<S>(r.normal());
    return eps;
  };
}

}  // namespace mulmon
