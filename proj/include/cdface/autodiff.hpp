#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cdface/common.hpp"
#include "cdface/tensor.hpp"

namespace cdface::ad {

/// Reverse-mode autodiff over Tensor<T>. Graphs are built per forward pass
/// (define-by-run); backward() walks the graph once in reverse topological
/// order. Single-threaded by construction, so gradient accumulation order is
/// fixed and runs are bit-reproducible.
template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;

  Tensor<T>& grad_ref() {
    if (grad.empty()) grad = Tensor<T>(value.rows(), value.cols());
    return grad;
  }
  void clear_grad() { grad = Tensor<T>(); }
};

template <class T>
using Var = std::shared_ptr<Node<T>>;

template <class T>
Var<T> constant(Tensor<T> v) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(v);
  return n;
}

/// Leaf with requires_grad set; optimizers own these.
template <class T>
Var<T> make_param(Tensor<T> v) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(v);
  n->requires_grad = true;
  return n;
}

template <class T>
Var<T> make_node(Tensor<T> value, std::vector<Var<T>> inputs,
                 std::function<void(Node<T>&)> bw) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->inputs = std::move(inputs);
  for (const auto& in : n->inputs)
    if (in->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->backward_fn = std::move(bw);
  return n;
}

/// Accumulates gradients of a scalar root into every reachable node that
/// requires them.
template <class T>
void backward(const Var<T>& root) {
  require(root->value.rows() == 1 && root->value.cols() == 1,
          "backward: root must be a scalar");
  if (!root->requires_grad) return;

  // Iterative post-order DFS; reversed, consumers precede producers.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->inputs.size()) {
      Node<T>* next = node->inputs[idx++].get();
      if (next->requires_grad && seen.insert(next).second)
        stack.emplace_back(next, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_ref()(0, 0) = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

// ---- primitive ops ----

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require(a->value.same_shape(b->value), "add: shape mismatch");
  Tensor<T> out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b->value.data()[i];
  return make_node<T>(std::move(out), {a, b}, [](Node<T>& n) {
    for (int k = 0; k < 2; ++k) {
      auto& in = n.inputs[k];
      if (!in->requires_grad) continue;
      Tensor<T>& g = in->grad_ref();
      for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] += n.grad.data()[i];
    }
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require(a->value.same_shape(b->value), "sub: shape mismatch");
  Tensor<T> out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= b->value.data()[i];
  return make_node<T>(std::move(out), {a, b}, [](Node<T>& n) {
    if (n.inputs[0]->requires_grad) {
      Tensor<T>& g = n.inputs[0]->grad_ref();
      for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] += n.grad.data()[i];
    }
    if (n.inputs[1]->requires_grad) {
      Tensor<T>& g = n.inputs[1]->grad_ref();
      for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] -= n.grad.data()[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a->value;
  for (T& v : out) v *= s;
  return make_node<T>(std::move(out), {a}, [s](Node<T>& n) {
    Tensor<T>& g = n.inputs[0]->grad_ref();
    for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] += s * n.grad.data()[i];
  });
}

/// Adds a 1 x n row vector to every row of x.
template <class T>
Var<T> add_rowvec(const Var<T>& x, const Var<T>& v) {
  require(v->value.rows() == 1 && v->value.cols() == x->value.cols(),
          "add_rowvec: v must be 1 x cols(x)");
  Tensor<T> out = x->value;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += v->value(0, c);
  return make_node<T>(std::move(out), {x, v}, [](Node<T>& n) {
    if (n.inputs[0]->requires_grad) {
      Tensor<T>& g = n.inputs[0]->grad_ref();
      for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] += n.grad.data()[i];
    }
    if (n.inputs[1]->requires_grad) {
      Tensor<T>& g = n.inputs[1]->grad_ref();
      for (std::size_t r = 0; r < n.grad.rows(); ++r)
        for (std::size_t c = 0; c < n.grad.cols(); ++c) g(0, c) += n.grad(r, c);
    }
  });
}

/// Scales row t of x by the constant weight w[t].
template <class T>
Var<T> mul_rows(const Var<T>& x, std::vector<T> w) {
  require(w.size() == x->value.rows(), "mul_rows: weight length mismatch");
  Tensor<T> out = x->value;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) *= w[r];
  return make_node<T>(std::move(out), {x}, [w = std::move(w)](Node<T>& n) {
    Tensor<T>& g = n.inputs[0]->grad_ref();
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) g(r, c) += w[r] * n.grad(r, c);
  });
}

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  Tensor<T> out = cdface::matmul(a->value, b->value);
  return make_node<T>(std::move(out), {a, b}, [](Node<T>& n) {
    const Tensor<T>& g = n.grad;
    if (n.inputs[0]->requires_grad) {
      Tensor<T> da = matmul_tb(g, n.inputs[1]->value);
      Tensor<T>& acc = n.inputs[0]->grad_ref();
      for (std::size_t i = 0; i < acc.size(); ++i) acc.data()[i] += da.data()[i];
    }
    if (n.inputs[1]->requires_grad) {
      Tensor<T> db = matmul_ta(n.inputs[0]->value, g);
      Tensor<T>& acc = n.inputs[1]->grad_ref();
      for (std::size_t i = 0; i < acc.size(); ++i) acc.data()[i] += db.data()[i];
    }
  });
}

template <class T>
Var<T> transpose(const Var<T>& a) {
  Tensor<T> out(a->value.cols(), a->value.rows());
  for (std::size_t r = 0; r < a->value.rows(); ++r)
    for (std::size_t c = 0; c < a->value.cols(); ++c) out(c, r) = a->value(r, c);
  return make_node<T>(std::move(out), {a}, [](Node<T>& n) {
    Tensor<T>& g = n.inputs[0]->grad_ref();
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) g(r, c) += n.grad(c, r);
  });
}

template <class T>
Var<T> slice_rows(const Var<T>& a, std::size_t r0, std::size_t count) {
  require(r0 + count <= a->value.rows(), "slice_rows: out of range");
  Tensor<T> out(count, a->value.cols());
  for (std::size_t r = 0; r < count; ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) = a->value(r0 + r, c);
  return make_node<T>(std::move(out), {a}, [r0](Node<T>& n) {
    Tensor<T>& g = n.inputs[0]->grad_ref();
    for (std::size_t r = 0; r < n.grad.rows(); ++r)
      for (std::size_t c = 0; c < n.grad.cols(); ++c) g(r0 + r, c) += n.grad(r, c);
  });
}

template <class T>
Var<T> slice_cols(const Var<T>& a, std::size_t c0, std::size_t count) {
  require(c0 + count <= a->value.cols(), "slice_cols: out of range");
  Tensor<T> out(a->value.rows(), count);
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < count; ++c) out(r, c) = a->value(r, c0 + c);
  return make_node<T>(std::move(out), {a}, [c0](Node<T>& n) {
    Tensor<T>& g = n.inputs[0]->grad_ref();
    for (std::size_t r = 0; r < n.grad.rows(); ++r)
      for (std::size_t c = 0; c < n.grad.cols(); ++c) g(r, c0 + c) += n.grad(r, c);
  });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), "concat_rows: empty list");
  const std::size_t cols = parts[0]->value.cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require(p->value.cols() == cols, "concat_rows: column mismatch");
    rows += p->value.rows();
  }
  Tensor<T> out(rows, cols);
  std::size_t r = 0;
  for (const auto& p : parts)
    for (std::size_t pr = 0; pr < p->value.rows(); ++pr, ++r)
      for (std::size_t c = 0; c < cols; ++c) out(r, c) = p->value(pr, c);
  return make_node<T>(std::move(out), parts, [](Node<T>& n) {
    std::size_t r = 0;
    for (auto& in : n.inputs) {
      const std::size_t nr = in->value.rows();
      if (in->requires_grad) {
        Tensor<T>& g = in->grad_ref();
        for (std::size_t pr = 0; pr < nr; ++pr)
          for (std::size_t c = 0; c < g.cols(); ++c)
            g(pr, c) += n.grad(r + pr, c);
      }
      r += nr;
    }
  });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), "concat_cols: empty list");
  const std::size_t rows = parts[0]->value.rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    require(p->value.rows() == rows, "concat_cols: row mismatch");
    cols += p->value.cols();
  }
  Tensor<T> out(rows, cols);
  std::size_t c0 = 0;
  for (const auto& p : parts) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < p->value.cols(); ++c)
        out(r, c0 + c) = p->value(r, c);
    c0 += p->value.cols();
  }
  return make_node<T>(std::move(out), parts, [](Node<T>& n) {
    std::size_t c0 = 0;
    for (auto& in : n.inputs) {
      const std::size_t nc = in->value.cols();
      if (in->requires_grad) {
        Tensor<T>& g = in->grad_ref();
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < nc; ++c) g(r, c) += n.grad(r, c0 + c);
      }
      c0 += nc;
    }
  });
}

/// Selects rows of a parameter matrix; backward scatter-adds (embedding
/// lookups, codebook token gathers).
template <class T>
Var<T> gather_rows(const Var<T>& a, std::vector<std::size_t> ids) {
  for (std::size_t id : ids)
    require(id < a->value.rows(), "gather_rows: index out of range");
  Tensor<T> out(ids.size(), a->value.cols());
  for (std::size_t r = 0; r < ids.size(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) = a->value(ids[r], c);
  return make_node<T>(std::move(out), {a}, [ids = std::move(ids)](Node<T>& n) {
    Tensor<T>& g = n.inputs[0]->grad_ref();
    for (std::size_t r = 0; r < ids.size(); ++r)
      for (std::size_t c = 0; c < n.grad.cols(); ++c)
        g(ids[r], c) += n.grad(r, c);
  });
}

/// Identity on the value, cuts the gradient path.
template <class T>
Var<T> stop_grad(const Var<T>& a) {
  return constant(a->value);
}

/// Attention mask: allow(r, c) says whether query row r may attend key row c.
struct AttnMask {
  std::size_t rows = 0, cols = 0;
  std::vector<std::uint8_t> allow;

  bool at(std::size_t r, std::size_t c) const { return allow[r * cols + c] != 0; }

  /// Row r attends columns c with c <= r + offset.
  static AttnMask causal(std::size_t rows, std::size_t cols,
                         std::ptrdiff_t offset = 0) {
    AttnMask m;
    m.rows = rows;
    m.cols = cols;
    m.allow.assign(rows * cols, 0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c)
        if (static_cast<std::ptrdiff_t>(c) <=
            static_cast<std::ptrdiff_t>(r) + offset)
          m.allow[r * m.cols + c] = 1;
    return m;
  }
};

/// Row-wise softmax restricted to unmasked entries; a fully masked row
/// yields zeros.
template <class T>
Var<T> softmax_rows(const Var<T>& x, const AttnMask* mask = nullptr) {
  if (mask)
    require(mask->rows == x->value.rows() && mask->cols == x->value.cols(),
            "softmax_rows: mask shape mismatch");
  const std::size_t rows = x->value.rows(), cols = x->value.cols();
  Tensor<T> out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    T maxv = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t c = 0; c < cols; ++c) {
      if (mask && !mask->at(r, c)) continue;
      any = true;
      maxv = std::max(maxv, x->value(r, c));
    }
    if (!any) continue;
    T denom{};
    for (std::size_t c = 0; c < cols; ++c) {
      if (mask && !mask->at(r, c)) continue;
      const T e = std::exp(x->value(r, c) - maxv);
      out(r, c) = e;
      denom += e;
    }
    for (std::size_t c = 0; c < cols; ++c) out(r, c) /= denom;
  }
  Tensor<T> saved = out;
  return make_node<T>(std::move(out), {x}, [saved = std::move(saved)](Node<T>& n) {
    Tensor<T>& g = n.inputs[0]->grad_ref();
    for (std::size_t r = 0; r < g.rows(); ++r) {
      T dot{};
      for (std::size_t c = 0; c < g.cols(); ++c)
        dot += n.grad(r, c) * saved(r, c);
      for (std::size_t c = 0; c < g.cols(); ++c)
        g(r, c) += saved(r, c) * (n.grad(r, c) - dot);
    }
  });
}

/// Row-wise layer normalization with affine parameters (1 x cols each).
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  T eps = T(1e-5)) {
  const std::size_t rows = x->value.rows(), cols = x->value.cols();
  require(gamma->value.rows() == 1 && gamma->value.cols() == cols &&
              beta->value.rows() == 1 && beta->value.cols() == cols,
          "layer_norm: affine parameter shape mismatch");
  Tensor<T> xhat(rows, cols);
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T mean{};
    for (std::size_t c = 0; c < cols; ++c) mean += x->value(r, c);
    mean /= static_cast<T>(cols);
    T var{};
    for (std::size_t c = 0; c < cols; ++c) {
      const T d = x->value(r, c) - mean;
      var += d * d;
    }
    var /= static_cast<T>(cols);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c)
      xhat(r, c) = (x->value(r, c) - mean) * inv_std[r];
  }
  Tensor<T> out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      out(r, c) = xhat(r, c) * gamma->value(0, c) + beta->value(0, c);
  return make_node<T>(
      std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& n) {
        const std::size_t rows = n.grad.rows(), cols = n.grad.cols();
        const Tensor<T>& gm = n.inputs[1]->value;
        if (n.inputs[1]->requires_grad) {
          Tensor<T>& gg = n.inputs[1]->grad_ref();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c)
              gg(0, c) += n.grad(r, c) * xhat(r, c);
        }
        if (n.inputs[2]->requires_grad) {
          Tensor<T>& gb = n.inputs[2]->grad_ref();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gb(0, c) += n.grad(r, c);
        }
        if (n.inputs[0]->requires_grad) {
          Tensor<T>& gx = n.inputs[0]->grad_ref();
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_d{}, mean_dx{};
            for (std::size_t c = 0; c < cols; ++c) {
              const T dxh = n.grad(r, c) * gm(0, c);
              mean_d += dxh;
              mean_dx += dxh * xhat(r, c);
            }
            mean_d /= static_cast<T>(cols);
            mean_dx /= static_cast<T>(cols);
            for (std::size_t c = 0; c < cols; ++c) {
              const T dxh = n.grad(r, c) * gm(0, c);
              gx(r, c) += inv_std[r] * (dxh - mean_d - xhat(r, c) * mean_dx);
            }
          }
        }
      });
}

/// GELU, tanh approximation (smooth, so finite-difference checks stay clean).
template <class T>
Var<T> gelu(const Var<T>& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  Tensor<T> out = x->value;
  for (T& v : out) {
    const double u = static_cast<double>(v);
    v = static_cast<T>(0.5 * u * (1.0 + std::tanh(kC * (u + kA * u * u * u))));
  }
  return make_node<T>(std::move(out), {x}, [](Node<T>& n) {
    Tensor<T>& g = n.inputs[0]->grad_ref();
    const Tensor<T>& xin = n.inputs[0]->value;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double u = static_cast<double>(xin.data()[i]);
      const double th = std::tanh(kC * (u + kA * u * u * u));
      const double sech2 = 1.0 - th * th;
      const double d =
          0.5 * (1.0 + th) + 0.5 * u * sech2 * kC * (1.0 + 3.0 * kA * u * u);
      g.data()[i] += static_cast<T>(d) * n.grad.data()[i];
    }
  });
}

/// Reinterprets the buffer with a new shape; row-major layout is preserved.
template <class T>
Var<T> reshape(const Var<T>& a, std::size_t rows, std::size_t cols) {
  require(rows * cols == a->value.size(), "reshape: element count mismatch");
  Tensor<T> out(rows, cols);
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data()[i] = a->value.data()[i];
  return make_node<T>(std::move(out), {a}, [](Node<T>& n) {
    Tensor<T>& g = n.inputs[0]->grad_ref();
    for (std::size_t i = 0; i < g.size(); ++i)
      g.data()[i] += n.grad.data()[i];
  });
}

/// Euclidean norm of every row, as a (rows x 1) column. Zero rows get a zero
/// subgradient.
template <class T>
Var<T> rows_norm(const Var<T>& x) {
  const std::size_t rows = x->value.rows(), cols = x->value.cols();
  Tensor<T> out(rows, 1);
  for (std::size_t r = 0; r < rows; ++r) {
    T acc{};
    for (std::size_t c = 0; c < cols; ++c) {
      const T v = x->value(r, c);
      acc += v * v;
    }
    out(r, 0) = std::sqrt(acc);
  }
  Tensor<T> saved = out;
  return make_node<T>(std::move(out), {x}, [saved = std::move(saved)](Node<T>& n) {
    Tensor<T>& g = n.inputs[0]->grad_ref();
    const Tensor<T>& xv = n.inputs[0]->value;
    for (std::size_t r = 0; r < g.rows(); ++r) {
      if (saved(r, 0) == T(0)) continue;
      const T up = n.grad(r, 0) / saved(r, 0);
      for (std::size_t c = 0; c < g.cols(); ++c) g(r, c) += up * xv(r, c);
    }
  });
}

template <class T>
Var<T> sum_all(const Var<T>& x) {
  T acc{};
  for (const T& v : x->value) acc += v;
  Tensor<T> out(1, 1, acc);
  return make_node<T>(std::move(out), {x}, [](Node<T>& n) {
    Tensor<T>& g = n.inputs[0]->grad_ref();
    const T up = n.grad(0, 0);
    for (T& v : g) v += up;
  });
}

/// Sum of squared entries, as a scalar node.
template <class T>
Var<T> sum_squares(const Var<T>& x) {
  T acc{};
  for (const T& v : x->value) acc += v * v;
  Tensor<T> out(1, 1, acc);
  return make_node<T>(std::move(out), {x}, [](Node<T>& n) {
    Tensor<T>& g = n.inputs[0]->grad_ref();
    const T up = n.grad(0, 0);
    const Tensor<T>& xv = n.inputs[0]->value;
    for (std::size_t i = 0; i < g.size(); ++i)
      g.data()[i] += T(2) * up * xv.data()[i];
  });
}

}  // namespace cdface::ad
