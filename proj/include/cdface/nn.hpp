#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cdface/autodiff.hpp"
#include "cdface/rng.hpp"
#include "cdface/tensor.hpp"

namespace cdface::nn {

using ad::AttnMask;
using ad::Var;

/// Ordered registry of named parameters. Insertion order is the canonical
/// order for checkpoints, optimizers and content hashes.
template <class T>
class ParamStore {
 public:
  Var<T> create(const std::string& name, Tensor<T> init) {
    require(index_.find(name) == index_.end(),
            "ParamStore: duplicate parameter " + name);
    Var<T> p = ad::make_param(std::move(init));
    index_[name] = items_.size();
    items_.emplace_back(name, p);
    return p;
  }

  const std::vector<std::pair<std::string, Var<T>>>& items() const {
    return items_;
  }

  Var<T> at(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), "ParamStore: unknown parameter " + name);
    return items_[it->second].second;
  }

  bool contains(const std::string& name) const {
    return index_.find(name) != index_.end();
  }

  void set_trainable(bool trainable) {
    for (auto& [name, p] : items_) p->requires_grad = trainable;
  }

  void zero_grads() {
    for (auto& [name, p] : items_) p->clear_grad();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : items_) n += p->value.size();
    return n;
  }

  /// FNV-1a over all parameter bytes in registration order; used to prove
  /// frozen modules stay untouched.
  std::uint64_t content_hash() const {
    Fnv1a h;
    for (const auto& [name, p] : items_) {
      h.update(name.data(), name.size());
      h.update(p->value.data(), p->value.size() * sizeof(T));
    }
    return h.digest();
  }

 private:
  std::vector<std::pair<std::string, Var<T>>> items_;
  std::map<std::string, std::size_t> index_;
};

template <class T>
Tensor<T> xavier_uniform(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor<T> t(rows, cols);
  const double s = std::sqrt(6.0 / static_cast<double>(rows + cols));
  fill_uniform(t, -s, s, rng);
  return t;
}

/// y = x W + b with W (in x out), b (1 x out).
template <class T>
struct Linear {
  Var<T> w, b;

  Linear() = default;
  Linear(ParamStore<T>& ps, const std::string& path, std::size_t in,
         std::size_t out, Rng& rng)
      : w(ps.create(path + ".w", xavier_uniform<T>(in, out, rng))),
        b(ps.create(path + ".b", Tensor<T>(1, out))) {}

  Var<T> operator()(const Var<T>& x) const {
    return ad::add_rowvec(ad::matmul(x, w), b);
  }
};

template <class T>
struct LayerNorm {
  Var<T> gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParamStore<T>& ps, const std::string& path, std::size_t dim)
      : gamma(ps.create(path + ".gamma", Tensor<T>(1, dim, T(1)))),
        beta(ps.create(path + ".beta", Tensor<T>(1, dim))) {}

  Var<T> operator()(const Var<T>& x) const {
    return ad::layer_norm(x, gamma, beta);
  }
};

/// Multi-head attention; key and value come from the same stream.
template <class T>
struct MultiheadAttention {
  Linear<T> wq, wk, wv, wo;
  std::size_t heads = 1;
  std::size_t head_dim = 0;

  MultiheadAttention() = default;
  MultiheadAttention(ParamStore<T>& ps, const std::string& path,
                     std::size_t dim, std::size_t n_heads, Rng& rng)
      : wq(ps, path + ".wq", dim, dim, rng),
        wk(ps, path + ".wk", dim, dim, rng),
        wv(ps, path + ".wv", dim, dim, rng),
        wo(ps, path + ".wo", dim, dim, rng),
        heads(n_heads),
        head_dim(dim / n_heads) {
    require(dim % n_heads == 0, "attention: dim must divide by head count");
  }

  Var<T> operator()(const Var<T>& query_in, const Var<T>& kv_in,
                    const AttnMask* mask = nullptr) const {
    const Var<T> q = wq(query_in);
    const Var<T> k = wk(kv_in);
    const Var<T> v = wv(kv_in);
    const T inv_scale = T(1) / static_cast<T>(std::sqrt(double(head_dim)));
    std::vector<Var<T>> ctx;
    ctx.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      const Var<T> qh = ad::slice_cols(q, h * head_dim, head_dim);
      const Var<T> kh = ad::slice_cols(k, h * head_dim, head_dim);
      const Var<T> vh = ad::slice_cols(v, h * head_dim, head_dim);
      Var<T> scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_scale);
      Var<T> probs = ad::softmax_rows(scores, mask);
      ctx.push_back(ad::matmul(probs, vh));
    }
    return wo(ad::concat_cols(ctx));
  }
};

template <class T>
struct FeedForward {
  Linear<T> expand, contract;

  FeedForward() = default;
  FeedForward(ParamStore<T>& ps, const std::string& path, std::size_t dim,
              std::size_t hidden, Rng& rng)
      : expand(ps, path + ".expand", dim, hidden, rng),
        contract(ps, path + ".contract", hidden, dim, rng) {}

  Var<T> operator()(const Var<T>& x) const {
    return contract(ad::gelu(expand(x)));
  }
};

/// Pre-norm residual attention sublayer: x + attn(ln(x), kv).
template <class T>
struct AttentionSublayer {
  LayerNorm<T> ln;
  MultiheadAttention<T> attn;

  AttentionSublayer() = default;
  AttentionSublayer(ParamStore<T>& ps, const std::string& path,
                    std::size_t dim, std::size_t heads, Rng& rng)
      : ln(ps, path + ".ln", dim), attn(ps, path + ".attn", dim, heads, rng) {}

  Var<T> operator()(const Var<T>& x, const Var<T>& kv,
                    const AttnMask* mask = nullptr) const {
    return ad::add(x, attn(ln(x), kv, mask));
  }

  /// Self-attention form: the normalized stream is both query and key/value.
  Var<T> self(const Var<T>& x, const AttnMask* mask = nullptr) const {
    const Var<T> normed = ln(x);
    return ad::add(x, attn.operator()(normed, normed, mask));
  }
};

template <class T>
struct FeedForwardSublayer {
  LayerNorm<T> ln;
  FeedForward<T> ff;

  FeedForwardSublayer() = default;
  FeedForwardSublayer(ParamStore<T>& ps, const std::string& path,
                      std::size_t dim, std::size_t hidden, Rng& rng)
      : ln(ps, path + ".ln", dim), ff(ps, path + ".ff", dim, hidden, rng) {}

  Var<T> operator()(const Var<T>& x) const { return ad::add(x, ff(ln(x))); }
};

/// Classic sinusoidal positional table, rows 0..n-1.
template <class T>
Tensor<T> sinusoidal_positions(std::size_t n, std::size_t dim) {
  Tensor<T> pe(n, dim);
  for (std::size_t pos = 0; pos < n; ++pos) {
    for (std::size_t i = 0; i < dim; i += 2) {
      const double freq =
          std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(dim));
      pe(pos, i) = static_cast<T>(std::sin(pos * freq));
      if (i + 1 < dim) pe(pos, i + 1) = static_cast<T>(std::cos(pos * freq));
    }
  }
  return pe;
}

template <class T>
Var<T> add_positional(const Var<T>& x) {
  return ad::add(x, ad::constant(sinusoidal_positions<T>(x->value.rows(),
                                                         x->value.cols())));
}

}  // namespace cdface::nn
