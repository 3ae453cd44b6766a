#pragma once

#include <cstddef>
#include <limits>
#include <utility>
#include <vector>

#include "cdface/autodiff.hpp"
#include "cdface/common.hpp"
#include "cdface/geometry.hpp"
#include "cdface/tensor.hpp"

namespace cdface {

/// Term weights for the lip/upper totals, plus the closure threshold.
/// Defaults follow the BIWI-scale preset; vocaset_weights() gives the other
/// published preset.
struct LossWeights {
  double lambda_div_lip = 0.2;
  double lambda_div_upper = 0.2;
  double lambda_rec_lip = 10.0;
  double lambda_rec_upper = 10.0;
  double lambda_reg = 20.0;
  double epsilon = 0.01;
};

inline LossWeights biwi_weights() { return LossWeights{}; }

inline LossWeights vocaset_weights() {
  return LossWeights{0.02, 0.02, 1.0, 1.0, 1.0, 0.005};
}

inline void validate(const LossWeights& w) {
  require(w.lambda_div_lip >= 0 && w.lambda_div_upper >= 0 &&
              w.lambda_rec_lip >= 0 && w.lambda_rec_upper >= 0 &&
              w.lambda_reg >= 0,
          "loss weights must be nonnegative");
  require(w.epsilon > 0, "closure threshold must be positive");
}

namespace detail {

template <class T>
void check_sample_shapes(const std::vector<Tensor<T>>& samples) {
  require(!samples.empty(), "loss: empty sample set");
  for (const auto& s : samples)
    require(s.same_shape(samples[0]), "loss: sample shape mismatch");
}

template <class T>
T row_distance(const Tensor<T>& a, const Tensor<T>& b, std::size_t t) {
  return frame_distance<T>(a.row(t), b.row(t));
}

}  // namespace detail

// ---- pure (value) forms ----

/// Negated sum over frames of the minimum pairwise sample distance; always
/// <= 0. Pushing samples apart makes it more negative.
template <class T>
T diversity_loss(const std::vector<Tensor<T>>& samples) {
  detail::check_sample_shapes(samples);
  const std::size_t n = samples.size();
  require(n >= 2, "diversity_loss: needs at least two samples");
  T total{};
  for (std::size_t t = 0; t < samples[0].rows(); ++t) {
    T best = std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        best = std::min(best, detail::row_distance(samples[i], samples[j], t));
    total += best;
  }
  return -total;
}

/// Sum over frames of the distance to the closest sample; the winning sample
/// may change frame to frame.
template <class T>
T min_reconstruction_loss(const std::vector<Tensor<T>>& samples,
                          const Tensor<T>& gt) {
  detail::check_sample_shapes(samples);
  require(samples[0].same_shape(gt), "min_reconstruction: gt shape mismatch");
  T total{};
  for (std::size_t t = 0; t < gt.rows(); ++t) {
    T best = std::numeric_limits<T>::infinity();
    for (const auto& s : samples)
      best = std::min(best, detail::row_distance(s, gt, t));
    total += best;
  }
  return total;
}

/// Whole-sequence variant: one winner for the entire clip.
template <class T>
T min_reconstruction_loss_sequence(const std::vector<Tensor<T>>& samples,
                                   const Tensor<T>& gt) {
  detail::check_sample_shapes(samples);
  require(samples[0].same_shape(gt), "min_reconstruction: gt shape mismatch");
  T best = std::numeric_limits<T>::infinity();
  for (const auto& s : samples) {
    T total{};
    for (std::size_t t = 0; t < gt.rows(); ++t)
      total += detail::row_distance(s, gt, t);
    best = std::min(best, total);
  }
  return best;
}

template <class T>
std::vector<Tensor<T>> mask_scaled(const std::vector<Tensor<T>>& samples,
                                   const ClosureMask& mask) {
  require(mask.size() == samples[0].rows(),
          "mask length disagrees with frame count");
  std::vector<Tensor<T>> out = samples;
  for (auto& s : out)
    for (std::size_t t = 0; t < s.rows(); ++t)
      if (!mask.open(t))
        for (std::size_t c = 0; c < s.cols(); ++c) s(t, c) = T(0);
  return out;
}

/// Diversity over mask-scaled lip predictions: closed frames contribute
/// nothing, so diversification never reopens a closure.
template <class T>
T lip_diversity_loss(const std::vector<Tensor<T>>& samples,
                     const ClosureMask& mask) {
  detail::check_sample_shapes(samples);
  return diversity_loss(mask_scaled(samples, mask));
}

/// Min-of-N reconstruction plus a closure term charging EVERY sample on
/// closed frames (mean over samples).
template <class T>
T lip_reconstruction_loss(const std::vector<Tensor<T>>& samples,
                          const Tensor<T>& gt, const ClosureMask& mask) {
  detail::check_sample_shapes(samples);
  require(mask.size() == gt.rows(), "mask length disagrees with frame count");
  T closure{};
  for (const auto& s : samples)
    for (std::size_t t = 0; t < gt.rows(); ++t)
      if (!mask.open(t)) closure += detail::row_distance(s, gt, t);
  return min_reconstruction_loss(samples, gt) +
         closure / static_cast<T>(samples.size());
}

/// Upper-face losses summed over the lip parents' sample sets.
template <class T>
std::pair<T, T> upper_losses(const std::vector<std::vector<Tensor<T>>>& sets,
                             const Tensor<T>& gt) {
  require(!sets.empty(), "upper_losses: no sample sets");
  T div{}, rec{};
  for (const auto& set : sets) {
    div += diversity_loss(set);
    rec += min_reconstruction_loss(set, gt);
  }
  return {div, rec};
}

/// Unsquared distance from each predicted code row to its quantized target;
/// the caller quantizes, so gradients can never reach codebook tokens.
template <class T>
T code_regularizer(const std::vector<Tensor<T>>& pred_codes,
                   const std::vector<Tensor<T>>& quantized_targets) {
  require(pred_codes.size() == quantized_targets.size(),
          "code_regularizer: sample count mismatch");
  T total{};
  for (std::size_t n = 0; n < pred_codes.size(); ++n) {
    require(pred_codes[n].same_shape(quantized_targets[n]),
            "code_regularizer: shape mismatch");
    for (std::size_t t = 0; t < pred_codes[n].rows(); ++t)
      total += detail::row_distance(pred_codes[n], quantized_targets[n], t);
  }
  return total;
}

template <class T>
struct LossBreakdown {
  T div_lip{}, rec_lip{}, reg_lip{};
  T div_upper{}, rec_upper{}, reg_upper{};
  T total_lip{}, total_upper{};
};

template <class T>
LossBreakdown<T> total_losses(T div_lip, T rec_lip, T reg_lip, T div_upper,
                              T rec_upper, T reg_upper, const LossWeights& w) {
  LossBreakdown<T> b;
  b.div_lip = div_lip;
  b.rec_lip = rec_lip;
  b.reg_lip = reg_lip;
  b.div_upper = div_upper;
  b.rec_upper = rec_upper;
  b.reg_upper = reg_upper;
  b.total_lip = static_cast<T>(w.lambda_div_lip) * div_lip +
                static_cast<T>(w.lambda_rec_lip) * rec_lip +
                static_cast<T>(w.lambda_reg) * reg_lip;
  b.total_upper = static_cast<T>(w.lambda_div_upper) * div_upper +
                  static_cast<T>(w.lambda_rec_upper) * rec_upper +
                  static_cast<T>(w.lambda_reg) * reg_upper;
  return b;
}

// ---- graph (autodiff) forms ----
//
// Frame selection (which pair / which sample wins the min) is decided from
// values and baked into constant row weights, so the subgradient flows only
// through the winning term; ties go to the first candidate in lexicographic
// order, keeping training deterministic.

template <class T>
ad::Var<T> diversity_loss(const std::vector<ad::Var<T>>& samples) {
  require(samples.size() >= 2, "diversity_loss: needs at least two samples");
  const std::size_t frames = samples[0]->value.rows();
  std::vector<ad::Var<T>> pair_norms;
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (std::size_t j = i + 1; j < samples.size(); ++j) {
      require(samples[j]->value.same_shape(samples[i]->value),
              "diversity_loss: sample shape mismatch");
      pair_norms.push_back(ad::rows_norm(ad::sub(samples[i], samples[j])));
    }
  std::vector<std::size_t> winner(frames, 0);
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t p = 1; p < pair_norms.size(); ++p)
      if (pair_norms[p]->value(t, 0) < pair_norms[winner[t]]->value(t, 0))
        winner[t] = p;
  ad::Var<T> total;
  for (std::size_t p = 0; p < pair_norms.size(); ++p) {
    std::vector<T> w(frames, T(0));
    bool used = false;
    for (std::size_t t = 0; t < frames; ++t)
      if (winner[t] == p) w[t] = T(1), used = true;
    if (!used) continue;
    ad::Var<T> part = ad::sum_all(ad::mul_rows(pair_norms[p], std::move(w)));
    total = total ? ad::add(total, part) : part;
  }
  return ad::scale(total, T(-1));
}

template <class T>
ad::Var<T> min_reconstruction_loss(const std::vector<ad::Var<T>>& samples,
                                   const Tensor<T>& gt) {
  require(!samples.empty(), "min_reconstruction: empty sample set");
  const std::size_t frames = gt.rows();
  const ad::Var<T> gt_c = ad::constant(gt);
  std::vector<ad::Var<T>> norms;
  norms.reserve(samples.size());
  for (const auto& s : samples) {
    require(s->value.same_shape(gt), "min_reconstruction: gt shape mismatch");
    norms.push_back(ad::rows_norm(ad::sub(s, gt_c)));
  }
  std::vector<std::size_t> winner(frames, 0);
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t i = 1; i < norms.size(); ++i)
      if (norms[i]->value(t, 0) < norms[winner[t]]->value(t, 0)) winner[t] = i;
  ad::Var<T> total;
  for (std::size_t i = 0; i < norms.size(); ++i) {
    std::vector<T> w(frames, T(0));
    bool used = false;
    for (std::size_t t = 0; t < frames; ++t)
      if (winner[t] == i) w[t] = T(1), used = true;
    if (!used) continue;
    ad::Var<T> part = ad::sum_all(ad::mul_rows(norms[i], std::move(w)));
    total = total ? ad::add(total, part) : part;
  }
  return total;
}

template <class T>
ad::Var<T> min_reconstruction_loss_sequence(
    const std::vector<ad::Var<T>>& samples, const Tensor<T>& gt) {
  require(!samples.empty(), "min_reconstruction: empty sample set");
  const ad::Var<T> gt_c = ad::constant(gt);
  std::size_t winner = 0;
  T best = std::numeric_limits<T>::infinity();
  std::vector<ad::Var<T>> norms;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    norms.push_back(ad::rows_norm(ad::sub(samples[i], gt_c)));
    T total{};
    for (std::size_t t = 0; t < gt.rows(); ++t) total += norms[i]->value(t, 0);
    if (total < best) best = total, winner = i;
  }
  return ad::sum_all(norms[winner]);
}

template <class T>
std::vector<T> mask_row_weights(const ClosureMask& mask, bool invert = false) {
  std::vector<T> w(mask.size());
  for (std::size_t t = 0; t < mask.size(); ++t)
    w[t] = (mask.open(t) != invert) ? T(1) : T(0);
  return w;
}

template <class T>
ad::Var<T> lip_diversity_loss(const std::vector<ad::Var<T>>& samples,
                              const ClosureMask& mask) {
  require(!samples.empty() && mask.size() == samples[0]->value.rows(),
          "lip_diversity: mask length disagrees with frame count");
  std::vector<ad::Var<T>> scaled;
  scaled.reserve(samples.size());
  for (const auto& s : samples)
    scaled.push_back(ad::mul_rows(s, mask_row_weights<T>(mask)));
  return diversity_loss(scaled);
}

template <class T>
ad::Var<T> lip_reconstruction_loss(const std::vector<ad::Var<T>>& samples,
                                   const Tensor<T>& gt,
                                   const ClosureMask& mask) {
  require(!samples.empty() && mask.size() == gt.rows(),
          "lip_reconstruction: mask length disagrees with frame count");
  const ad::Var<T> gt_c = ad::constant(gt);
  const std::vector<T> closed = mask_row_weights<T>(mask, /*invert=*/true);
  ad::Var<T> closure;
  for (const auto& s : samples) {
    ad::Var<T> term =
        ad::sum_all(ad::rows_norm(ad::mul_rows(ad::sub(s, gt_c), closed)));
    closure = closure ? ad::add(closure, term) : term;
  }
  return ad::add(min_reconstruction_loss(samples, gt),
                 ad::scale(closure, T(1) / static_cast<T>(samples.size())));
}

template <class T>
std::pair<ad::Var<T>, ad::Var<T>> upper_losses(
    const std::vector<std::vector<ad::Var<T>>>& sets, const Tensor<T>& gt) {
  require(!sets.empty(), "upper_losses: no sample sets");
  ad::Var<T> div, rec;
  for (const auto& set : sets) {
    ad::Var<T> d = diversity_loss(set);
    ad::Var<T> r = min_reconstruction_loss(set, gt);
    div = div ? ad::add(div, d) : d;
    rec = rec ? ad::add(rec, r) : r;
  }
  return {div, rec};
}

template <class T>
ad::Var<T> code_regularizer(const std::vector<ad::Var<T>>& pred_codes,
                            const std::vector<Tensor<T>>& quantized_targets) {
  require(pred_codes.size() == quantized_targets.size(),
          "code_regularizer: sample count mismatch");
  ad::Var<T> total;
  for (std::size_t n = 0; n < pred_codes.size(); ++n) {
    require(pred_codes[n]->value.same_shape(quantized_targets[n]),
            "code_regularizer: shape mismatch");
    ad::Var<T> term = ad::sum_all(ad::rows_norm(
        ad::sub(pred_codes[n], ad::constant(quantized_targets[n]))));
    total = total ? ad::add(total, term) : term;
  }
  return total;
}

}  // namespace cdface
