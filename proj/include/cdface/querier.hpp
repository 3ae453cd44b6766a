#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "cdface/autodiff.hpp"
#include "cdface/codebook.hpp"
#include "cdface/common.hpp"
#include "cdface/geometry.hpp"
#include "cdface/nn.hpp"
#include "cdface/rng.hpp"
#include "cdface/tensor.hpp"

namespace cdface {

struct QuerierConfig {
  std::size_t n_samples = 1;  // independent output heads over a shared trunk
  std::size_t code_dim = 0;   // width of one prior code (h*d)
  std::size_t motion_dim = 0; // own-region frame width (history input)
  std::size_t audio_dim = 0;
  std::size_t lip_dim = 0;    // nonzero adds a cross-attention stream over
                              // strictly past lip motion
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t depth = 2;
  std::size_t ffn_mult = 4;
  std::size_t num_styles = 1;
};

inline void validate(const QuerierConfig& cfg) {
  require(cfg.n_samples >= 1, "querier: need at least one output head");
  require(cfg.code_dim > 0 && cfg.motion_dim > 0 && cfg.audio_dim > 0,
          "querier: zero stream width");
  require(cfg.d_model > 0 && cfg.heads > 0 && cfg.depth > 0 &&
              cfg.ffn_mult > 0 && cfg.num_styles > 0,
          "querier: bad architecture size");
  require(cfg.d_model % cfg.heads == 0, "querier: heads must divide d_model");
}

/// Autoregressive code-query model for one face region. A shared pre-LN
/// transformer trunk runs causal self-attention over the motion history
/// (learned start token at slot 0, committed frames behind it), optionally
/// cross-attends strictly past lip motion, then cross-attends the aligned
/// audio under a causal mask; n_samples independent linear heads read codes
/// off the trunk, so diversity is head-parallel and deterministic. A learned
/// per-subject style row is added to every position.
template <typename T>
class CodeQuerier {
  using Var = ad::Var<T>;

 public:
  CodeQuerier(nn::ParamStore<T>& ps, const std::string& path,
              const QuerierConfig& cfg, Rng& rng)
      : cfg_(cfg) {
    validate(cfg);
    start_ = ps.create(path + ".start",
                       nn::xavier_uniform<T>(1, cfg.d_model, rng));
    style_table_ = ps.create(
        path + ".style", nn::xavier_uniform<T>(cfg.num_styles, cfg.d_model, rng));
    hist_in_ = nn::Linear<T>(ps, path + ".hist_in", cfg.motion_dim,
                             cfg.d_model, rng);
    audio_in_ = nn::Linear<T>(ps, path + ".audio_in", cfg.audio_dim,
                              cfg.d_model, rng);
    if (cfg.lip_dim > 0) {
      lip_start_ = ps.create(path + ".lip_start",
                             nn::xavier_uniform<T>(1, cfg.d_model, rng));
      lip_in_ = nn::Linear<T>(ps, path + ".lip_in", cfg.lip_dim, cfg.d_model,
                              rng);
    }
    for (std::size_t d = 0; d < cfg.depth; ++d) {
      const std::string blk = path + ".blk" + std::to_string(d);
      self_.emplace_back(ps, blk + ".self", cfg.d_model, cfg.heads, rng);
      if (cfg.lip_dim > 0)
        lipx_.emplace_back(ps, blk + ".lipx", cfg.d_model, cfg.heads, rng);
      audiox_.emplace_back(ps, blk + ".audiox", cfg.d_model, cfg.heads, rng);
      ffn_.emplace_back(ps, blk + ".ffn", cfg.d_model,
                        cfg.ffn_mult * cfg.d_model, rng);
    }
    ln_ = nn::LayerNorm<T>(ps, path + ".ln", cfg.d_model);
    for (std::size_t n = 0; n < cfg.n_samples; ++n)
      heads_.emplace_back(ps, path + ".head" + std::to_string(n), cfg.d_model,
                          cfg.code_dim, rng);
  }

  const QuerierConfig& config() const { return cfg_; }

  /// One forward pass over a single history stream. `history` holds
  /// committed frames 0..steps-2 (possibly none); the output has steps rows,
  /// row t being the trunk state for predicting frame t. `audio` is the full
  /// aligned track: the causal mask keeps position t on rows <= t, so a
  /// prefix pass equals the corresponding rows of a full pass. When the
  /// model has a lip stream, `lip_history` must hold the parent's frames
  /// 0..steps-2; position t sees only lip frames < t.
  Var trunk(const Tensor<T>& history, const Tensor<T>& audio,
            const Tensor<T>* lip_history, std::size_t style_index) const {
    const std::size_t steps = history.rows() + 1;
    require(style_index < cfg_.num_styles, "querier: unknown style index");
    require(audio.cols() == cfg_.audio_dim, "querier: audio width mismatch");
    require(audio.rows() >= steps, "querier: audio shorter than history");
    require((cfg_.lip_dim > 0) == (lip_history != nullptr),
            "querier: lip conditioning presence mismatch");
    if (history.rows() > 0)
      require(history.cols() == cfg_.motion_dim,
              "querier: history width mismatch");

    Var x = start_;
    if (history.rows() > 0)
      x = ad::concat_rows(
          std::vector<Var>{start_, hist_in_(ad::constant(history))});
    x = ad::add(x, ad::constant(nn::sinusoidal_positions<T>(steps, cfg_.d_model)));
    x = ad::add_rowvec(x, ad::gather_rows(style_table_, {style_index}));

    const Var audio_tokens = nn::add_positional(audio_in_(ad::constant(audio)));
    const ad::AttnMask self_mask = ad::AttnMask::causal(steps, steps);
    const ad::AttnMask audio_mask = ad::AttnMask::causal(steps, audio.rows());

    Var lip_tokens;
    ad::AttnMask lip_mask;
    if (cfg_.lip_dim > 0) {
      require(lip_history->rows() + 1 == steps,
              "querier: lip history length mismatch");
      require(lip_history->cols() == cfg_.lip_dim,
              "querier: lip history width mismatch");
      Var lt = lip_start_;
      if (lip_history->rows() > 0)
        lt = ad::concat_rows(
            std::vector<Var>{lip_start_, lip_in_(ad::constant(*lip_history))});
      lip_tokens = nn::add_positional(lt);
      // Slot s holds lip frame s-1, so attending slots <= t means frames < t.
      lip_mask = ad::AttnMask::causal(steps, steps);
    }

    for (std::size_t d = 0; d < cfg_.depth; ++d) {
      x = self_[d].self(x, &self_mask);
      if (cfg_.lip_dim > 0) x = lipx_[d](x, lip_tokens, &lip_mask);
      x = audiox_[d](x, audio_tokens, &audio_mask);
      x = ffn_[d](x);
    }
    return ln_(x);
  }

  /// Code sequence of head i over a trunk output: steps x code_dim.
  Var head(std::size_t i, const Var& trunk_out) const {
    require(i < cfg_.n_samples, "querier: head index out of range");
    return heads_[i](trunk_out);
  }

 private:
  QuerierConfig cfg_;
  Var start_, style_table_, lip_start_;
  nn::Linear<T> hist_in_, audio_in_, lip_in_;
  std::vector<nn::AttentionSublayer<T>> self_, lipx_, audiox_;
  std::vector<nn::FeedForwardSublayer<T>> ffn_;
  nn::LayerNorm<T> ln_;
  std::vector<nn::Linear<T>> heads_;
};

namespace detail {

template <typename T>
Tensor<T> take_rows(const Tensor<T>& x, std::size_t n) {
  Tensor<T> out(n, x.cols());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = x(r, c);
  return out;
}

}  // namespace detail

/// One autoregressive step for every head: sample i keeps its own history
/// and reads head i off its own trunk pass. Returns the step-t code of each
/// head, t being the shared history length.
template <typename T>
std::vector<Tensor<T>> query_step(const CodeQuerier<T>& model,
                                  const std::vector<Tensor<T>>& histories,
                                  const Tensor<T>* lip_history,
                                  const Tensor<T>& audio,
                                  std::size_t style_index) {
  require(histories.size() == model.config().n_samples,
          "query_step: one history per head required");
  const std::size_t len = histories[0].rows();
  for (const auto& h : histories)
    require(h.rows() == len, "query_step: history lengths differ");
  if (lip_history != nullptr)
    require(lip_history->rows() == len,
            "query_step: lip history length mismatch");
  std::vector<Tensor<T>> codes;
  for (std::size_t i = 0; i < histories.size(); ++i) {
    const ad::Var<T> out =
        model.head(i, model.trunk(histories[i], audio, lip_history, style_index));
    Tensor<T> row(1, out->value.cols());
    for (std::size_t c = 0; c < row.cols(); ++c) row(0, c) = out->value(len, c);
    codes.push_back(std::move(row));
  }
  return codes;
}

/// Full autoregressive generation of one region stream: at each step run the
/// trunk over the committed history, read the step-t code of the given head,
/// decode the code prefix through the frozen prior, and commit frame t. The
/// prior's causal context makes the prefix decode equal the full decode.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> generate_stream(
    const CodeQuerier<T>& model, const RegionPrior<T>& prior, std::size_t head,
    const Tensor<T>& audio, std::size_t style_index, std::size_t steps,
    const Tensor<T>* lip_track) {
  require(steps >= 1, "generate_stream: need at least one step");
  Tensor<T> codes(steps, model.config().code_dim);
  Tensor<T> motion(steps, model.config().motion_dim);
  for (std::size_t t = 0; t < steps; ++t) {
    const Tensor<T> history = detail::take_rows(motion, t);
    Tensor<T> lip_prefix;
    const Tensor<T>* lip_ptr = nullptr;
    if (lip_track != nullptr) {
      lip_prefix = detail::take_rows(*lip_track, t);
      lip_ptr = &lip_prefix;
    }
    const ad::Var<T> out =
        model.head(head, model.trunk(history, audio, lip_ptr, style_index));
    for (std::size_t c = 0; c < codes.cols(); ++c)
      codes(t, c) = out->value(t, c);
    const ad::Var<T> decoded =
        prior.decode(ad::constant(detail::take_rows(codes, t + 1)));
    for (std::size_t c = 0; c < motion.cols(); ++c)
      motion(t, c) = decoded->value(t, c);
  }
  return {std::move(codes), std::move(motion)};
}

/// N^l * N^u full-face samples: face (i, j) merges lip stream i with the
/// upper stream of head j conditioned on that lip stream. In control mode a
/// single lip stream (head 0) is shared, so the lip region of every output
/// is bit-identical while upper variants differ.
template <typename T>
struct RolloutResult {
  std::vector<MotionSequence<T>> faces;
  std::vector<Tensor<T>> lip_codes;    // per lip stream
  std::vector<Tensor<T>> lip_motions;  // per lip stream, T x 3|lip|
  std::vector<Tensor<T>> upper_codes;  // per face
  std::vector<Tensor<T>> upper_motions;
  std::vector<std::pair<std::size_t, std::size_t>> lineage;  // face -> (i, j)
};

template <typename T>
RolloutResult<T> rollout(const CodeQuerier<T>& lip_model,
                         const RegionPrior<T>& lip_prior,
                         const CodeQuerier<T>& upper_model,
                         const RegionPrior<T>& upper_prior,
                         const Tensor<T>& audio, std::size_t style_index,
                         std::size_t steps, const RegionPartition& part,
                         double fps, const std::string& subject_id,
                         bool control_mode = false) {
  require(steps >= 1, "rollout: need at least one frame");
  require(audio.rows() == steps,
          "rollout: aligned audio length must equal the requested frames");
  require(lip_model.config().lip_dim == 0,
          "rollout: lip model must not itself take lip conditioning");
  require(upper_model.config().lip_dim == lip_model.config().motion_dim,
          "rollout: upper model lip stream width mismatch");

  RolloutResult<T> result;
  const std::size_t n_lip = control_mode ? 1 : lip_model.config().n_samples;
  for (std::size_t i = 0; i < n_lip; ++i) {
    auto [codes, motion] =
        generate_stream(lip_model, lip_prior, i, audio, style_index, steps,
                        static_cast<const Tensor<T>*>(nullptr));
    result.lip_codes.push_back(std::move(codes));
    result.lip_motions.push_back(std::move(motion));
  }
  const std::size_t n_upper = upper_model.config().n_samples;
  for (std::size_t i = 0; i < n_lip; ++i) {
    for (std::size_t j = 0; j < n_upper; ++j) {
      auto [codes, motion] =
          generate_stream(upper_model, upper_prior, j, audio, style_index,
                          steps, &result.lip_motions[i]);
      MotionSequence<T> lip_view{result.lip_motions[i], fps, subject_id};
      MotionSequence<T> upper_view{motion, fps, subject_id};
      result.faces.push_back(merge_regions(lip_view, upper_view, part));
      result.upper_codes.push_back(std::move(codes));
      result.upper_motions.push_back(std::move(motion));
      result.lineage.emplace_back(i, j);
    }
  }
  return result;
}

/// Training-time forward with ground-truth histories. Every lip head shares
/// one trunk pass (histories are identical under teacher forcing), and the
/// upper trunk also runs once because its lip conditioning is the ground
/// truth, not a sampled lip stream: the N^u upper predictions are reused for
/// every lip parent. Decodes run through the (frozen) priors so gradients
/// flow back to the querier through the decoder.
template <typename T>
struct TeacherForcedOutput {
  std::vector<ad::Var<T>> lip_codes;     // N^l, T x code_dim
  std::vector<ad::Var<T>> lip_motions;   // N^l, T x 3|lip|
  std::vector<ad::Var<T>> upper_codes;   // N^u
  std::vector<ad::Var<T>> upper_motions; // N^u
};

template <typename T>
TeacherForcedOutput<T> teacher_forced_forward(
    const CodeQuerier<T>& lip_model, const RegionPrior<T>& lip_prior,
    const CodeQuerier<T>& upper_model, const RegionPrior<T>& upper_prior,
    const Tensor<T>& gt_lip, const Tensor<T>& gt_upper, const Tensor<T>& audio,
    std::size_t style_index) {
  const std::size_t frames = gt_lip.rows();
  require(frames >= 1, "teacher forcing: empty ground truth");
  require(gt_upper.rows() == frames,
          "teacher forcing: region frame counts disagree");
  require(audio.rows() == frames,
          "teacher forcing: audio not aligned to motion");

  const Tensor<T> lip_hist = detail::take_rows(gt_lip, frames - 1);
  const Tensor<T> upper_hist = detail::take_rows(gt_upper, frames - 1);

  TeacherForcedOutput<T> out;
  const ad::Var<T> lip_trunk =
      lip_model.trunk(lip_hist, audio, nullptr, style_index);
  for (std::size_t i = 0; i < lip_model.config().n_samples; ++i) {
    out.lip_codes.push_back(lip_model.head(i, lip_trunk));
    out.lip_motions.push_back(lip_prior.decode(out.lip_codes.back()));
  }
  const ad::Var<T> upper_trunk =
      upper_model.trunk(upper_hist, audio, &lip_hist, style_index);
  for (std::size_t j = 0; j < upper_model.config().n_samples; ++j) {
    out.upper_codes.push_back(upper_model.head(j, upper_trunk));
    out.upper_motions.push_back(upper_prior.decode(out.upper_codes.back()));
  }
  return out;
}

}  // namespace cdface
