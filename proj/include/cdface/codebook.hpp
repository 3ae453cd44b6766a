#pragma once

#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "cdface/autodiff.hpp"
#include "cdface/common.hpp"
#include "cdface/nn.hpp"
#include "cdface/rng.hpp"
#include "cdface/tensor.hpp"

namespace cdface {

/// Trainable token bank for one region; rows are the discrete motion
/// building blocks.
template <class T>
struct Codebook {
  ad::Var<T> tokens;  // K x d
  std::string region_tag;

  std::size_t size() const { return tokens->value.rows(); }
  std::size_t dim() const { return tokens->value.cols(); }
};

template <class T>
struct QuantizedFrame {
  Tensor<T> embeddings;                 // h x d, rows are exact token rows
  std::vector<std::size_t> token_ids;   // length h
};

/// Nearest token per embedding row under Euclidean distance; ties take the
/// lowest token id so quantization is deterministic.
template <class T>
QuantizedFrame<T> quantize(const Tensor<T>& z, const Tensor<T>& tokens) {
  require(tokens.rows() >= 1, "quantize: empty codebook");
  require(z.cols() == tokens.cols(), "quantize: embedding width mismatch");
  QuantizedFrame<T> out{Tensor<T>(z.rows(), z.cols()),
                        std::vector<std::size_t>(z.rows())};
  for (std::size_t r = 0; r < z.rows(); ++r) {
    std::size_t best = 0;
    T best_d = std::numeric_limits<T>::infinity();
    for (std::size_t k = 0; k < tokens.rows(); ++k) {
      T acc{};
      for (std::size_t c = 0; c < z.cols(); ++c) {
        const T d = z(r, c) - tokens(k, c);
        acc += d * d;
      }
      if (acc < best_d) {
        best_d = acc;
        best = k;
      }
    }
    out.token_ids[r] = best;
    for (std::size_t c = 0; c < z.cols(); ++c)
      out.embeddings(r, c) = tokens(best, c);
  }
  return out;
}

template <class T>
QuantizedFrame<T> quantize(const Tensor<T>& z, const Codebook<T>& cb) {
  return quantize(z, cb.tokens->value);
}

/// The three summands of the VQ training objective, as plain values. The
/// codebook and commitment terms are numerically equal; they differ only in
/// which side the gradient reaches (see vq_training_graph).
template <class T>
struct VqLossTerms {
  T reconstruction{}, codebook{}, commitment{};
  T total() const { return reconstruction + codebook + commitment; }
};

template <class T>
VqLossTerms<T> vq_loss(const Tensor<T>& x, const Tensor<T>& xhat,
                       const Tensor<T>& z, const Tensor<T>& q) {
  require(x.same_shape(xhat), "vq_loss: reconstruction shape mismatch");
  require(z.same_shape(q), "vq_loss: latent shape mismatch");
  VqLossTerms<T> terms;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T d = x.data()[i] - xhat.data()[i];
    terms.reconstruction += d * d;
  }
  for (std::size_t i = 0; i < z.size(); ++i) {
    const T d = z.data()[i] - q.data()[i];
    terms.codebook += d * d;
  }
  terms.commitment = terms.codebook;
  return terms;
}

struct PriorConfig {
  std::size_t frame_dim = 0;  // 3 * region vertex count
  std::size_t K = 256;
  std::size_t d = 64;
  std::size_t h = 1;  // embeddings per frame
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t depth = 2;
  std::size_t ffn_mult = 4;
  // Causal temporal context keeps prefix decoding identical to full-sequence
  // decoding, which the autoregressive rollout relies on.
  bool causal_context = true;

  std::size_t code_dim() const { return h * d; }
};

/// Per-region motion prior: frame-wise linear embeddings around a small
/// self-attention stack on each side of the quantization bottleneck.
template <class T>
class RegionPrior {
 public:
  RegionPrior(nn::ParamStore<T>& ps, const std::string& path, PriorConfig cfg,
              std::string region_tag, Rng& rng)
      : cfg_(cfg) {
    require(cfg.frame_dim > 0 && cfg.K > 0 && cfg.d > 0 && cfg.h > 0,
            "prior config: dimensions must be positive");
    Tensor<T> init(cfg.K, cfg.d);
    const double lim = 1.0 / static_cast<double>(cfg.K);
    fill_uniform(init, -lim, lim, rng);
    codebook_ = Codebook<T>{ps.create(path + ".codebook", std::move(init)),
                            std::move(region_tag)};
    enc_in_ = nn::Linear<T>(ps, path + ".enc.in", cfg.frame_dim, cfg.d_model,
                            rng);
    dec_in_ = nn::Linear<T>(ps, path + ".dec.in", cfg.code_dim(), cfg.d_model,
                            rng);
    for (std::size_t i = 0; i < cfg.depth; ++i) {
      const std::string blk = ".blk" + std::to_string(i);
      enc_attn_.emplace_back(ps, path + ".enc" + blk + ".attn", cfg.d_model,
                             cfg.heads, rng);
      enc_ffn_.emplace_back(ps, path + ".enc" + blk + ".ffn", cfg.d_model,
                            cfg.d_model * cfg.ffn_mult, rng);
      dec_attn_.emplace_back(ps, path + ".dec" + blk + ".attn", cfg.d_model,
                             cfg.heads, rng);
      dec_ffn_.emplace_back(ps, path + ".dec" + blk + ".ffn", cfg.d_model,
                            cfg.d_model * cfg.ffn_mult, rng);
    }
    enc_ln_ = nn::LayerNorm<T>(ps, path + ".enc.ln", cfg.d_model);
    dec_ln_ = nn::LayerNorm<T>(ps, path + ".dec.ln", cfg.d_model);
    enc_out_ = nn::Linear<T>(ps, path + ".enc.out", cfg.d_model,
                             cfg.code_dim(), rng);
    dec_out_ = nn::Linear<T>(ps, path + ".dec.out", cfg.d_model, cfg.frame_dim,
                             rng);
  }

  /// Region frames (T x frame_dim) -> continuous codes (T x h*d).
  ad::Var<T> encode(const ad::Var<T>& frames) const {
    require(frames->value.cols() == cfg_.frame_dim,
            "prior encode: frame width mismatch");
    return enc_out_(run_stack(enc_in_(frames), enc_attn_, enc_ffn_, enc_ln_));
  }

  /// Codes (T x h*d) -> region frames (T x frame_dim).
  ad::Var<T> decode(const ad::Var<T>& codes) const {
    require(codes->value.cols() == cfg_.code_dim(),
            "prior decode: code width mismatch");
    return dec_out_(run_stack(dec_in_(codes), dec_attn_, dec_ffn_, dec_ln_));
  }

  /// Nearest-token replacement for every h-slice of every frame row.
  /// Returns the quantized sequence and token ids in (frame, slice) order.
  std::pair<Tensor<T>, std::vector<std::size_t>> quantize_sequence(
      const Tensor<T>& codes) const {
    require(codes.cols() == cfg_.code_dim(),
            "quantize_sequence: code width mismatch");
    Tensor<T> q(codes.rows(), codes.cols());
    std::vector<std::size_t> ids;
    ids.reserve(codes.rows() * cfg_.h);
    for (std::size_t t = 0; t < codes.rows(); ++t) {
      Tensor<T> frame(cfg_.h, cfg_.d);
      for (std::size_t i = 0; i < frame.size(); ++i)
        frame.data()[i] = codes(t, i);
      QuantizedFrame<T> qf = quantize(frame, codebook_);
      for (std::size_t i = 0; i < frame.size(); ++i)
        q(t, i) = qf.embeddings.data()[i];
      ids.insert(ids.end(), qf.token_ids.begin(), qf.token_ids.end());
    }
    return {std::move(q), std::move(ids)};
  }

  struct QuantizeNodes {
    ad::Var<T> tokens;            // gathered codebook rows (T x h*d)
    ad::Var<T> straight_through;  // z + sg(q - z)
    std::vector<std::size_t> ids;
  };

  /// Builds the quantization nodes around continuous codes z. The gathered
  /// token node carries gradients into the codebook; the straight-through
  /// node forwards decoder gradients to the encoder unchanged.
  QuantizeNodes quantize_nodes(const ad::Var<T>& z) const {
    auto [q_value, ids] = quantize_sequence(z->value);
    (void)q_value;  // the gather below reproduces it from the token rows
    ad::Var<T> gathered = ad::reshape(
        ad::gather_rows(codebook_.tokens, ids), z->value.rows(),
        cfg_.code_dim());
    ad::Var<T> st = ad::add(z, ad::stop_grad(ad::sub(gathered, z)));
    return {gathered, st, std::move(ids)};
  }

  struct VqGraph {
    ad::Var<T> loss, reconstruction, codebook_term, commitment, xhat;
    std::vector<std::size_t> ids;
  };

  /// Full training graph for one sequence: reconstruction pushes decoder
  /// gradients straight through quantization into the encoder; the codebook
  /// term reaches only token rows; the commitment term only the encoder.
  VqGraph vq_training_graph(const Tensor<T>& frames) const {
    ad::Var<T> x = ad::constant(frames);
    ad::Var<T> z = encode(x);
    QuantizeNodes qn = quantize_nodes(z);
    ad::Var<T> xhat = decode(qn.straight_through);
    ad::Var<T> rec = ad::sum_squares(ad::sub(xhat, x));
    ad::Var<T> cb = ad::sum_squares(ad::sub(ad::stop_grad(z), qn.tokens));
    ad::Var<T> commit = ad::sum_squares(ad::sub(z, ad::stop_grad(qn.tokens)));
    ad::Var<T> loss = ad::add(rec, ad::add(cb, commit));
    return {loss, rec, cb, commit, xhat, std::move(qn.ids)};
  }

  /// Inference reconstruction: encode, hard-quantize, decode. Values only.
  Tensor<T> reconstruct(const Tensor<T>& frames) const {
    ad::Var<T> z = encode(ad::constant(frames));
    auto [q, ids] = quantize_sequence(z->value);
    (void)ids;
    return decode(ad::constant(q))->value;
  }

  const PriorConfig& config() const { return cfg_; }
  const Codebook<T>& codebook() const { return codebook_; }

 private:
  ad::Var<T> run_stack(ad::Var<T> x,
                       const std::vector<nn::AttentionSublayer<T>>& attn,
                       const std::vector<nn::FeedForwardSublayer<T>>& ffn,
                       const nn::LayerNorm<T>& ln) const {
    x = nn::add_positional(x);
    ad::AttnMask mask;
    if (cfg_.causal_context)
      mask = ad::AttnMask::causal(x->value.rows(), x->value.rows());
    for (std::size_t i = 0; i < attn.size(); ++i) {
      x = attn[i].self(x, cfg_.causal_context ? &mask : nullptr);
      x = ffn[i](x);
    }
    return ln(x);
  }

  PriorConfig cfg_;
  Codebook<T> codebook_;
  nn::Linear<T> enc_in_, enc_out_, dec_in_, dec_out_;
  std::vector<nn::AttentionSublayer<T>> enc_attn_, dec_attn_;
  std::vector<nn::FeedForwardSublayer<T>> enc_ffn_, dec_ffn_;
  nn::LayerNorm<T> enc_ln_, dec_ln_;
};

}  // namespace cdface
