#pragma once

#include <string>
#include <vector>

#include "mulmon/array_io.hpp"
#include "mulmon/latent.hpp"
#include "mulmon/rng.hpp"
#include "mulmon/tape.hpp"

namespace mulmon {

struct ModelConfig {
  int64_t K = 5;   // object slots
  int64_t D = 16;  // z_dims
  int64_t J = 3;   // viewpoint dims
  int64_t H = 64, W = 64;
  int64_t L = 4;   // inner-loop iterations
  double sigma2 = 0.01;
  double alpha_ig = 1.0;

  void validate() const {
    MULMON_CHECK(K >= 1 && D >= 1 && J >= 1 && L >= 1, "model config: bad sizes");
    MULMON_CHECK(H >= 4 && W >= 4, "model config: image too small");
    MULMON_CHECK(sigma2 > 0, "model config: sigma2 must be > 0, got ", sigma2);
  }
};

constexpr int64_t kAuxChannels = 17;
constexpr int64_t kRefineHidden = 128;
constexpr int64_t kRefineFc1 = 256;
constexpr int64_t kViewTransformHidden = 512;
constexpr int64_t kDecoderChannels = 32;

template <class S>
struct Dense {
  Tensor<S> W;  // [out, in]
  Tensor<S> b;  // [out]
  Dense() = default;
  Dense(int64_t out, int64_t in) : W(Shape{out, in}), b(Shape{out}) {}
};

template <class S>
struct Conv {
  Tensor<S> W;  // [out, in, 3, 3]
  Tensor<S> b;  // [out]
  Conv() = default;
  Conv(int64_t out, int64_t in) : W(Shape{out, in, 3, 3}), b(Shape{out}) {}
};

// All slot-shared weights of the three networks. Weights are K-agnostic:
// every map runs slot-parallel with shared parameters.
template <class S>
struct MulMonParams {
  ModelConfig cfg;

  Dense<S> t1_fc1, t1_fc2;                      // theta1, (D+J) -> 512 -> D
  Conv<S> dec_c1, dec_c2, dec_c3, dec_c4, dec_c5;  // theta2, broadcast grid -> 4ch
  Conv<S> ref_c1, ref_c2, ref_c3, ref_c4;       // phi conv encoder
  Dense<S> ref_fc1, ref_fc2;                    // flatten -> 256 -> 128
  Dense<S> ref_lstm;                            // gates: [4*128, in+128]
  Dense<S> ref_head;                            // [2D, 128]

  explicit MulMonParams(const ModelConfig& c) : cfg(c) {
    cfg.validate();
    t1_fc1 = Dense<S>(kViewTransformHidden, c.D + c.J);
    t1_fc2 = Dense<S>(c.D, kViewTransformHidden);
    dec_c1 = Conv<S>(kDecoderChannels, c.D + 2);
    dec_c2 = Conv<S>(kDecoderChannels, kDecoderChannels);
    dec_c3 = Conv<S>(kDecoderChannels, kDecoderChannels);
    dec_c4 = Conv<S>(kDecoderChannels, kDecoderChannels);
    dec_c5 = Conv<S>(4, kDecoderChannels);
    ref_c1 = Conv<S>(32, kAuxChannels);
    ref_c2 = Conv<S>(32, 32);
    ref_c3 = Conv<S>(64, 32);
    ref_c4 = Conv<S>(64, 64);
    ref_fc1 = Dense<S>(kRefineFc1, 64 * c.H * c.W);
    ref_fc2 = Dense<S>(kRefineHidden, kRefineFc1);
    int64_t lstm_in = kRefineHidden + 4 * c.D + c.J;
    ref_lstm = Dense<S>(4 * kRefineHidden, lstm_in + kRefineHidden);
    ref_head = Dense<S>(2 * c.D, kRefineHidden);
  }

  // Visits every tensor as ("group.layer.tensor", Tensor&). Group prefixes
  // theta1/theta2/phi drive serialization, the optimizer, and grad checks.
  template <class F>
  void for_each(F&& f) {
    f("theta1.fc1.W", t1_fc1.W);   f("theta1.fc1.b", t1_fc1.b);
    f("theta1.fc2.W", t1_fc2.W);   f("theta1.fc2.b", t1_fc2.b);
    f("theta2.c1.W", dec_c1.W);    f("theta2.c1.b", dec_c1.b);
    f("theta2.c2.W", dec_c2.W);    f("theta2.c2.b", dec_c2.b);
    f("theta2.c3.W", dec_c3.W);    f("theta2.c3.b", dec_c3.b);
    f("theta2.c4.W", dec_c4.W);    f("theta2.c4.b", dec_c4.b);
    f("theta2.c5.W", dec_c5.W);    f("theta2.c5.b", dec_c5.b);
    f("phi.c1.W", ref_c1.W);       f("phi.c1.b", ref_c1.b);
    f("phi.c2.W", ref_c2.W);       f("phi.c2.b", ref_c2.b);
    f("phi.c3.W", ref_c3.W);       f("phi.c3.b", ref_c3.b);
    f("phi.c4.W", ref_c4.W);       f("phi.c4.b", ref_c4.b);
    f("phi.fc1.W", ref_fc1.W);     f("phi.fc1.b", ref_fc1.b);
    f("phi.fc2.W", ref_fc2.W);     f("phi.fc2.b", ref_fc2.b);
    f("phi.lstm.W", ref_lstm.W);   f("phi.lstm.b", ref_lstm.b);
    f("phi.head.W", ref_head.W);   f("phi.head.b", ref_head.b);
  }
  template <class F>
  void for_each(F&& f) const {
    const_cast<MulMonParams*>(this)->for_each(
        [&](const char* n, Tensor<S>& t) { f(n, static_cast<const Tensor<S>&>(t)); });
  }

  // Uniform(+-1/sqrt(fan_in)) weights, zero biases.
  void init(Rng rng) {
    for_each([&](const char* name, Tensor<S>& t) {
      Rng r = rng.stream(name);
      if (t.shape.ndim == 1) {
        std::fill(t.v.begin(), t.v.end(), S(0));
        return;
      }
      int64_t fan_in = t.numel() / t.shape[0];
      double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (auto& e : t.v) e = static_cast<S>(r.uniform(-bound, bound));
    });
  }

  int64_t total_params() const {
    int64_t n = 0;
    for_each([&](const char*, const Tensor<S>& t) { n += t.numel(); });
    return n;
  }
};

// ---- checkpoint serialization ----

template <class S>
void params_to_arrays(const MulMonParams<S>& p, ArrayFile& f) {
  p.for_each([&](const char* name, const Tensor<S>& t) {
    f.put(std::string("param.") + name, t);
  });
}

template <class S>
void params_from_arrays(MulMonParams<S>& p, const ArrayFile& f) {
  p.for_each([&](const char* name, const Tensor<S>& t) {
    auto& mt = const_cast<Tensor<S>&>(t);
    std::string key = std::string("param.") + name;
    Tensor<S> loaded;
    const auto& e = f.entry(key);
    if (e.dtype == ArrayFile::DType::F32)
      loaded = f.get_f32(key).template cast<S>();
    else
      loaded = f.get_f64(key).template cast<S>();
    MULMON_CHECK_DATA(loaded.shape == mt.shape, "checkpoint param '", name,
                      "' has shape ", loaded.shape.str(), ", model wants ",
                      mt.shape.str());
    mt = std::move(loaded);
  });
}

// ---- tape bindings ----

template <class S>
struct TapeParams {
  Var t1_fc1_W, t1_fc1_b, t1_fc2_W, t1_fc2_b;
  Var dec_W[5], dec_b[5];
  Var ref_W[4], ref_b[4];
  Var ref_fc1_W, ref_fc1_b, ref_fc2_W, ref_fc2_b;
  Var ref_lstm_W, ref_lstm_b, ref_head_W, ref_head_b;

  // Rendering only touches theta1/theta2; skipping the refinement net's
  // weights (the flatten layer dominates the parameter count) keeps
  // evaluation-time tapes cheap to set up.
  static TapeParams bind_generative(Tape<S>& t, const MulMonParams<S>& p) {
    TapeParams tp;
    tp.t1_fc1_W = t.leaf(p.t1_fc1.W, false);
    tp.t1_fc1_b = t.leaf(p.t1_fc1.b, false);
    tp.t1_fc2_W = t.leaf(p.t1_fc2.W, false);
    tp.t1_fc2_b = t.leaf(p.t1_fc2.b, false);
    const Conv<S>* convs[5] = {&p.dec_c1, &p.dec_c2, &p.dec_c3, &p.dec_c4, &p.dec_c5};
    for (int c = 0; c < 5; ++c) {
      tp.dec_W[c] = t.leaf(convs[c]->W, false);
      tp.dec_b[c] = t.leaf(convs[c]->b, false);
    }
    return tp;
  }

  // Leaf order matches MulMonParams::for_each; all() is used to read
  // gradients back out in the same order.
  static TapeParams bind(Tape<S>& t, const MulMonParams<S>& p, bool trainable) {
    TapeParams tp;
    std::vector<Var> vars;
    p.for_each([&](const char*, const Tensor<S>& ten) {
      vars.push_back(t.leaf(ten, trainable));
    });
    size_t i = 0;
    auto next = [&]() { return vars[i++]; };
    tp.t1_fc1_W = next(); tp.t1_fc1_b = next();
    tp.t1_fc2_W = next(); tp.t1_fc2_b = next();
    for (int c = 0; c < 5; ++c) { tp.dec_W[c] = next(); tp.dec_b[c] = next(); }
    for (int c = 0; c < 4; ++c) { tp.ref_W[c] = next(); tp.ref_b[c] = next(); }
    tp.ref_fc1_W = next(); tp.ref_fc1_b = next();
    tp.ref_fc2_W = next(); tp.ref_fc2_b = next();
    tp.ref_lstm_W = next(); tp.ref_lstm_b = next();
    tp.ref_head_W = next(); tp.ref_head_b = next();
    tp.all_ = vars;
    return tp;
  }

  const std::vector<Var>& all() const { return all_; }

 private:
  std::vector<Var> all_;
};

// ---- generative path ----

// Coordinate channels spanning [-1,1]^2, tiled per slot: [K, 2, H, W].
template <class S>
Tensor<S> coord_channels(int64_t K, int64_t H, int64_t W) {
  Tensor<S> out(Shape{K, 2, H, W});
  for (int64_t k = 0; k < K; ++k)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        out.at(k, 0, y, x) = H > 1 ? S(-1) + S(2) * S(y) / S(H - 1) : S(0);
        out.at(k, 1, y, x) = W > 1 ? S(-1) + S(2) * S(x) / S(W - 1) : S(0);
      }
  return out;
}

// f_theta1: each slot mapped by the same (D+J) -> 512 -> D network with the
// viewpoint concatenated. No cross-slot mixing.
template <class S>
Var view_transform(Tape<S>& t, const TapeParams<S>& tp, Var z, const Tensor<S>& v) {
  const auto& Z = t.val(z);
  MULMON_CHECK(Z.shape.ndim == 2, "view_transform wants z [K,D]");
  int64_t K = Z.shape[0], J = v.numel();
  Tensor<S> vt(Shape{K, J});
  for (int64_t k = 0; k < K; ++k)
    for (int64_t j = 0; j < J; ++j) vt.at(k, j) = v.v[j];
  Var zin = t.concat_cols({z, t.constant(vt)});
  Var h = t.relu(t.linear(zin, tp.t1_fc1_W, tp.t1_fc1_b));
  return t.linear(h, tp.t1_fc2_W, tp.t1_fc2_b);
}

template <class S>
struct DecodeVars {
  Var rgb;     // [K, 3, H, W] means mu_xk
  Var logits;  // [K, 1, H, W] mask logits m_hat_k
};

// g_theta2: spatial broadcast of each slot vector, two coordinate channels,
// four 3x3/stride-1 conv layers and a linear 4-channel head.
template <class S>
DecodeVars<S> decode(Tape<S>& t, const TapeParams<S>& tp, Var zt, int64_t H, int64_t W) {
  const auto& Z = t.val(zt);
  MULMON_CHECK(Z.shape.ndim == 2, "decode wants z~ [K,D]");
  int64_t K = Z.shape[0];
  Var grid = t.broadcast_to_grid(zt, H, W);
  Var coords = t.constant(coord_channels<S>(K, H, W));
  Var h = t.concat_channels({grid, coords});
  h = t.relu(t.conv3x3(h, tp.dec_W[0], tp.dec_b[0]));
  h = t.relu(t.conv3x3(h, tp.dec_W[1], tp.dec_b[1]));
  h = t.relu(t.conv3x3(h, tp.dec_W[2], tp.dec_b[2]));
  h = t.relu(t.conv3x3(h, tp.dec_W[3], tp.dec_b[3]));
  Var out = t.conv3x3(h, tp.dec_W[4], tp.dec_b[4]);
  return DecodeVars<S>{t.slice_channels(out, 0, 3), t.slice_channels(out, 3, 4)};
}

template <class S>
struct MixtureVars {
  Var log_m;   // [K,H,W] log softmax of mask logits
  Var se;      // [K,H,W] squared error summed over channels
  Var scores;  // [K,H,W] log m + log N
  Var ll_pix;  // [H,W] per-pixel mixture log-likelihood
  Var ll;      // scalar: log p(x | z, v)
};

// Spatial Gaussian mixture log-likelihood, evaluated with log-sum-exp:
// per pixel i, log sum_k softmax_k(m_hat)_ik N(x_i; mu_xk,i, sigma2 I).
template <class S>
MixtureVars<S> mixture_log_likelihood_vars(Tape<S>& t, Var x, const DecodeVars<S>& dec,
                                           double sigma2) {
  MULMON_CHECK(sigma2 > 0, "mixture likelihood: sigma2 must be > 0, got ", sigma2);
  // copy dims out before creating nodes: val() references are invalidated
  // by tape growth
  Shape xs = t.val(x).shape;
  Shape rs = t.val(dec.rgb).shape;
  MULMON_CHECK(xs.ndim == 3, "mixture likelihood wants image [C,H,W]");
  int64_t C = xs[0], H = xs[1], W = xs[2], K = rs[0];
  MULMON_CHECK(rs[1] == C && rs[2] == H && rs[3] == W,
               "mixture likelihood: decoder/image shape mismatch");
  MixtureVars<S> mv;
  Var diff = t.sub_image(dec.rgb, x);
  mv.se = t.sum_channels(t.square(diff));
  S inv = S(-0.5 / sigma2);
  S c0 = S(-0.5 * C * std::log(2.0 * M_PI * sigma2));
  Var log_n = t.affine(mv.se, inv, c0);
  Var logits3 = t.reshape(dec.logits, Shape{K, H, W});
  mv.log_m = t.log_softmax_slots(logits3);
  mv.scores = t.add(mv.log_m, log_n);
  mv.ll_pix = t.logsumexp_slots(mv.scores);
  mv.ll = t.sum_all(mv.ll_pix);
  return mv;
}

// x = sum_k softmax_k(m_hat_k) . mu_xk
template <class S>
Var compose_image_var(Tape<S>& t, const DecodeVars<S>& dec) {
  Shape ls = t.val(dec.logits).shape;
  Var logits3 = t.reshape(dec.logits, Shape{ls[0], ls[2], ls[3]});
  Var m = t.exp_(t.log_softmax_slots(logits3));
  return t.mix_slots(dec.rgb, m);
}

template <class S>
Var soft_masks_var(Tape<S>& t, const DecodeVars<S>& dec) {
  Shape ls = t.val(dec.logits).shape;
  Var logits3 = t.reshape(dec.logits, Shape{ls[0], ls[2], ls[3]});
  return t.exp_(t.log_softmax_slots(logits3));
}

// x_k = sigmoid(m_hat_k) . mu_xk; slots stay independent so occluded regions
// can be imputed.
template <class S>
Var component_images_var(Tape<S>& t, const DecodeVars<S>& dec) {
  Shape ls = t.val(dec.logits).shape;
  Var logits3 = t.reshape(dec.logits, Shape{ls[0], ls[2], ls[3]});
  return t.gate_slots(dec.rgb, t.sigmoid(logits3));
}

// argmax over slots per pixel; ties to the lowest slot index
template <class S>
Tensor<int32_t> hard_masks(const Tensor<S>& soft_or_logits) {
  MULMON_CHECK(soft_or_logits.shape.ndim == 3, "hard_masks wants [K,H,W]");
  int64_t K = soft_or_logits.shape[0];
  int64_t HW = soft_or_logits.shape[1] * soft_or_logits.shape[2];
  Tensor<int32_t> out(Shape{soft_or_logits.shape[1], soft_or_logits.shape[2]});
  for (int64_t p = 0; p < HW; ++p) {
    int32_t best = 0;
    S bv = soft_or_logits.v[p];
    for (int64_t k = 1; k < K; ++k) {
      S v = soft_or_logits.v[k * HW + p];
      if (v > bv) {
        bv = v;
        best = static_cast<int32_t>(k);
      }
    }
    out.v[p] = best;
  }
  return out;
}

// Decoded scene bundle used by the eval/CLI paths.
template <class S>
struct RenderedScene {
  Tensor<S> image;             // [3,H,W]
  Tensor<S> soft_masks;        // [K,H,W]
  Tensor<int32_t> hard_masks;  // [H,W]
  Tensor<S> components;        // [K,3,H,W]
};

// Renders latent z at viewpoint v (pure function of params/z/v).
template <class S>
RenderedScene<S> render_latent(const MulMonParams<S>& params, const Tensor<S>& z,
                               const Tensor<S>& v, int64_t H, int64_t W) {
  Tape<S> t;
  auto tp = TapeParams<S>::bind_generative(t, params);
  Var zv = t.constant(z);
  Var zt = view_transform(t, tp, zv, v);
  auto dec = decode(t, tp, zt, H, W);
  RenderedScene<S> out;
  out.image = t.val(compose_image_var(t, dec));
  out.soft_masks = t.val(soft_masks_var(t, dec));
  out.hard_masks = hard_masks(out.soft_masks);
  out.components = t.val(component_images_var(t, dec));
  return out;
}

// Appendix-style random scene: z_k ~ N(0, I) via the supplied noise.
template <class S>
RenderedScene<S> generate_random_scene(const MulMonParams<S>& params, const Tensor<S>& v,
                                       const Tensor<S>& noise, int64_t H, int64_t W) {
  return render_latent(params, noise, v, H, W);
}

}  // namespace mulmon
