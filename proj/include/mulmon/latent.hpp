#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mulmon/array_io.hpp"
#include "mulmon/tape.hpp"
#include "mulmon/tensor.hpp"

namespace mulmon {

// sigma = softplus(raw_scale) + kSigmaEps keeps the posterior scale strictly
// positive while leaving the refinement updates unconstrained.
constexpr double kSigmaEps = 1e-5;

template <class S>
S inv_softplus(S y) {
  // inverse of log(1 + e^x); y must be > 0
  if (y > S(30)) return y;
  return y + std::log1p(-std::exp(-y));
}

// Slot-structured diagonal Gaussian posterior lambda = {(mu_k, sigma_k)}.
// Value-semantic; immutable by convention once built.
template <class S>
struct LatentSlots {
  Tensor<S> mean;       // [K, D]
  Tensor<S> raw_scale;  // [K, D]

  LatentSlots() = default;
  LatentSlots(Tensor<S> m, Tensor<S> r) : mean(std::move(m)), raw_scale(std::move(r)) {
    MULMON_CHECK(mean.shape == raw_scale.shape && mean.shape.ndim == 2,
                 "LatentSlots wants matching [K,D] mean/raw_scale");
  }

  int64_t K() const { return mean.shape[0]; }
  int64_t D() const { return mean.shape[1]; }

  Tensor<S> sigma() const {
    Tensor<S> s = raw_scale;
    for (auto& e : s.v) e = Tape<S>::stable_softplus(e) + S(kSigmaEps);
    return s;
  }
};

// lambda_k <- (mu_k = 0, sigma_k = 1) for every slot.
template <class S>
LatentSlots<S> init_prior(int64_t K, int64_t D) {
  MULMON_CHECK(K >= 1 && D >= 1, "init_prior wants K,D >= 1");
  Tensor<S> mean(Shape{K, D});
  Tensor<S> raw(Shape{K, D}, inv_softplus(S(1) - S(kSigmaEps)));
  return LatentSlots<S>(std::move(mean), std::move(raw));
}

// Reparametrized draw z = mu + sigma .* noise.
template <class S>
Tensor<S> sample(const LatentSlots<S>& slots, const Tensor<S>& noise) {
  MULMON_CHECK(noise.shape == slots.mean.shape, "sample: noise shape ",
               noise.shape.str(), " != ", slots.mean.shape.str());
  Tensor<S> z = slots.mean;
  Tensor<S> sig = slots.sigma();
  for (size_t i = 0; i < z.v.size(); ++i) z.v[i] += sig.v[i] * noise.v[i];
  return z;
}

// Closed-form KL between diagonal Gaussians, summed over slots and dims.
template <class S>
double kl_gaussian(const LatentSlots<S>& q, const LatentSlots<S>& p) {
  MULMON_CHECK(q.mean.shape == p.mean.shape, "kl_gaussian: shape mismatch");
  Tensor<S> sq = q.sigma(), sp = p.sigma();
  double kl = 0;
  for (size_t i = 0; i < sq.v.size(); ++i) {
    double sqi = sq.v[i], spi = sp.v[i];
    double d = double(q.mean.v[i]) - double(p.mean.v[i]);
    kl += std::log(spi) - std::log(sqi) + (sqi * sqi + d * d) / (2.0 * spi * spi) - 0.5;
  }
  return kl;
}

template <class S>
LatentSlots<S> permute_slots(const LatentSlots<S>& slots, const std::vector<int>& perm) {
  int64_t K = slots.K(), D = slots.D();
  MULMON_CHECK(static_cast<int64_t>(perm.size()) == K, "permute_slots: bad size");
  std::vector<bool> seen(K, false);
  for (int p : perm) {
    MULMON_CHECK(p >= 0 && p < K && !seen[p], "permute_slots: not a permutation");
    seen[p] = true;
  }
  LatentSlots<S> out(Tensor<S>(slots.mean.shape), Tensor<S>(slots.raw_scale.shape));
  for (int64_t k = 0; k < K; ++k)
    for (int64_t d = 0; d < D; ++d) {
      out.mean.at(k, d) = slots.mean.at(perm[k], d);
      out.raw_scale.at(k, d) = slots.raw_scale.at(perm[k], d);
    }
  return out;
}

template <class S>
Tensor<S> permute_rows(const Tensor<S>& x, const std::vector<int>& perm) {
  MULMON_CHECK(x.shape.ndim >= 2 && static_cast<int64_t>(perm.size()) == x.shape[0],
               "permute_rows: bad perm size");
  Tensor<S> out(x.shape);
  int64_t row = x.numel() / x.shape[0];
  for (size_t k = 0; k < perm.size(); ++k)
    std::copy(x.v.begin() + perm[k] * row, x.v.begin() + (perm[k] + 1) * row,
              out.v.begin() + static_cast<int64_t>(k) * row);
  return out;
}

// ---- serialization (same array container as scene data) ----

template <class S>
void latent_to_arrays(const LatentSlots<S>& slots, ArrayFile& f,
                      const std::string& prefix = "lambda") {
  f.put(prefix + ".mean", slots.mean);
  f.put(prefix + ".raw_scale", slots.raw_scale);
}

template <class S>
LatentSlots<S> latent_from_arrays(const ArrayFile& f,
                                  const std::string& prefix = "lambda") {
  const auto& e = f.entry(prefix + ".mean");
  if (e.dtype == ArrayFile::DType::F32)
    return LatentSlots<S>(f.get_f32(prefix + ".mean").template cast<S>(),
                          f.get_f32(prefix + ".raw_scale").template cast<S>());
  return LatentSlots<S>(f.get_f64(prefix + ".mean").template cast<S>(),
                        f.get_f64(prefix + ".raw_scale").template cast<S>());
}

// ---- tape-side posterior ----

template <class S>
struct TapeLatent {
  Var mean;       // [K, D]
  Var raw_scale;  // [K, D]
};

template <class S>
Var sigma_var(Tape<S>& t, Var raw_scale) {
  return t.affine(t.softplus(raw_scale), S(1), S(kSigmaEps));
}

template <class S>
Var sample_var(Tape<S>& t, const TapeLatent<S>& lat, const Tensor<S>& noise) {
  Var sig = sigma_var(t, lat.raw_scale);
  return t.add(lat.mean, t.mul(sig, t.constant(noise)));
}

// KL[(mu_q, sigma_q) || (mu_p, sigma_p)] as a scalar node; both sides stay
// differentiable (the outer-loop prior is itself a learned quantity).
template <class S>
Var kl_var(Tape<S>& t, const TapeLatent<S>& q, const TapeLatent<S>& p) {
  Var sq = sigma_var(t, q.raw_scale);
  Var sp = sigma_var(t, p.raw_scale);
  Var d2 = t.square(t.sub(q.mean, p.mean));
  Var num = t.add(t.square(sq), d2);
  Var den = t.scale(t.square(sp), S(2));
  Var term = t.affine(t.div(num, den), S(1), S(-0.5));
  Var logs = t.sub(t.log_(sp), t.log_(sq));
  return t.sum_all(t.add(logs, term));
}

}  // namespace mulmon
