#pragma once

// Dense tensor engine with reverse-mode autodiff over a per-forward tape.
// Tensors are immutable once created; gradients live in the tape so that
// independent tapes can run concurrently over shared parameters.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "vct/kernels.hpp"

namespace vct {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int e : s) {
    if (e <= 0) throw std::invalid_argument("tensor extents must be positive");
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (std::size_t i = 0; i < s.size(); ++i)
    r += (i ? "x" : "") + std::to_string(s[i]);
  return r + "]";
}

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  bool requires_grad = false;
};

template <class T>
using Ptr = std::shared_ptr<Node<T>>;

template <class T>
Ptr<T> tensor(Shape shape, std::vector<T> value) {
  if (numel(shape) != value.size())
    throw ShapeError("tensor: data length " + std::to_string(value.size()) +
                     " does not match shape " + shape_str(shape));
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  return n;
}

template <class T>
Ptr<T> zeros(Shape shape) {
  auto n = std::make_shared<Node<T>>();
  n->value.assign(numel(shape), T(0));
  n->shape = std::move(shape);
  return n;
}

template <class T>
bool all_finite(const Node<T>& t) {
  for (T v : t.value)
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

// Records forward ops and owns all gradient buffers for one backward pass.
template <class T>
class Tape {
 public:
  void record(std::function<void(Tape<T>&)> fn) {
    ops_.push_back(std::move(fn));
  }

  std::vector<T>& grad(const Ptr<T>& t) {
    auto it = grads_.find(t.get());
    if (it == grads_.end())
      it = grads_.emplace(t.get(), std::vector<T>(t->value.size(), T(0)))
               .first;
    return it->second;
  }

  bool has_grad(const Ptr<T>& t) const { return grads_.count(t.get()) > 0; }

  const std::vector<T>* find_grad(const Ptr<T>& t) const {
    auto it = grads_.find(t.get());
    return it == grads_.end() ? nullptr : &it->second;
  }

  void backward(const Ptr<T>& loss) {
    if (loss->value.size() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got " +
                                  shape_str(loss->shape));
    grad(loss)[0] += T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)(*this);
  }

  std::size_t size() const { return ops_.size(); }

 private:
  std::vector<std::function<void(Tape<T>&)>> ops_;
  std::unordered_map<const Node<T>*, std::vector<T>> grads_;
};

namespace detail {

template <class T>
Ptr<T> make_out(Shape shape, bool requires_grad) {
  auto n = zeros<T>(std::move(shape));
  n->requires_grad = requires_grad;
  return n;
}

template <class T>
void check_same_shape(const Ptr<T>& a, const Ptr<T>& b, const char* op) {
  if (a->shape != b->shape)
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a->shape) + " vs " + shape_str(b->shape));
}

}  // namespace detail

// ---- elementwise ----

template <class T>
Ptr<T> add(Tape<T>& tape, const Ptr<T>& a, const Ptr<T>& b) {
  detail::check_same_shape(a, b, "add");
  auto out = detail::make_out<T>(a->shape, a->requires_grad || b->requires_grad);
  for (std::size_t i = 0; i < out->value.size(); ++i)
    out->value[i] = a->value[i] + b->value[i];
  if (out->requires_grad)
    tape.record([a, b, out](Tape<T>& tp) {
      if (!tp.has_grad(out)) return;
      const auto& gy = tp.grad(out);
      if (a->requires_grad) {
        auto& ga = tp.grad(a);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
      }
      if (b->requires_grad) {
        auto& gb = tp.grad(b);
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i];
      }
    });
  return out;
}

template <class T>
Ptr<T> sub(Tape<T>& tape, const Ptr<T>& a, const Ptr<T>& b) {
  detail::check_same_shape(a, b, "sub");
  auto out = detail::make_out<T>(a->shape, a->requires_grad || b->requires_grad);
  for (std::size_t i = 0; i < out->value.size(); ++i)
    out->value[i] = a->value[i] - b->value[i];
  if (out->requires_grad)
    tape.record([a, b, out](Tape<T>& tp) {
      if (!tp.has_grad(out)) return;
      const auto& gy = tp.grad(out);
      if (a->requires_grad) {
        auto& ga = tp.grad(a);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
      }
      if (b->requires_grad) {
        auto& gb = tp.grad(b);
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] -= gy[i];
      }
    });
  return out;
}

template <class T>
Ptr<T> mul(Tape<T>& tape, const Ptr<T>& a, const Ptr<T>& b) {
  detail::check_same_shape(a, b, "mul");
  auto out = detail::make_out<T>(a->shape, a->requires_grad || b->requires_grad);
  for (std::size_t i = 0; i < out->value.size(); ++i)
    out->value[i] = a->value[i] * b->value[i];
  if (out->requires_grad)
    tape.record([a, b, out](Tape<T>& tp) {
      if (!tp.has_grad(out)) return;
      const auto& gy = tp.grad(out);
      if (a->requires_grad) {
        auto& ga = tp.grad(a);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * b->value[i];
      }
      if (b->requires_grad) {
        auto& gb = tp.grad(b);
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * a->value[i];
      }
    });
  return out;
}

template <class T>
Ptr<T> scale(Tape<T>& tape, const Ptr<T>& a, T s) {
  auto out = detail::make_out<T>(a->shape, a->requires_grad);
  for (std::size_t i = 0; i < out->value.size(); ++i)
    out->value[i] = a->value[i] * s;
  if (out->requires_grad)
    tape.record([a, out, s](Tape<T>& tp) {
      if (!tp.has_grad(out)) return;
      const auto& gy = tp.grad(out);
      auto& ga = tp.grad(a);
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * s;
    });
  return out;
}

template <class T>
Ptr<T> abs_elem(Tape<T>& tape, const Ptr<T>& a) {
  auto out = detail::make_out<T>(a->shape, a->requires_grad);
  for (std::size_t i = 0; i < out->value.size(); ++i)
    out->value[i] = std::abs(a->value[i]);
  if (out->requires_grad)
    tape.record([a, out](Tape<T>& tp) {
      if (!tp.has_grad(out)) return;
      const auto& gy = tp.grad(out);
      auto& ga = tp.grad(a);
      // subgradient 0 at ties
      for (std::size_t i = 0; i < gy.size(); ++i) {
        const T v = a->value[i];
        ga[i] += gy[i] * (v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)));
      }
    });
  return out;
}

template <class T>
Ptr<T> relu(Tape<T>& tape, const Ptr<T>& a) {
  auto out = detail::make_out<T>(a->shape, a->requires_grad);
  for (std::size_t i = 0; i < out->value.size(); ++i)
    out->value[i] = a->value[i] > T(0) ? a->value[i] : T(0);
  if (out->requires_grad)
    tape.record([a, out](Tape<T>& tp) {
      if (!tp.has_grad(out)) return;
      const auto& gy = tp.grad(out);
      auto& ga = tp.grad(a);
      for (std::size_t i = 0; i < gy.size(); ++i)
        ga[i] += a->value[i] > T(0) ? gy[i] : T(0);
    });
  return out;
}

// Exact erf-based GELU: x * Phi(x).
template <class T>
Ptr<T> gelu(Tape<T>& tape, const Ptr<T>& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  auto out = detail::make_out<T>(a->shape, a->requires_grad);
  for (std::size_t i = 0; i < out->value.size(); ++i) {
    const double x = static_cast<double>(a->value[i]);
    out->value[i] = static_cast<T>(x * 0.5 * (1.0 + std::erf(x * inv_sqrt2)));
  }
  if (out->requires_grad)
    tape.record([a, out](Tape<T>& tp) {
      if (!tp.has_grad(out)) return;
      const auto& gy = tp.grad(out);
      auto& ga = tp.grad(a);
      for (std::size_t i = 0; i < gy.size(); ++i) {
        const double x = static_cast<double>(a->value[i]);
        const double phi = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        ga[i] += gy[i] * static_cast<T>(phi + x * pdf);
      }
    });
  return out;
}

template <class T>
Ptr<T> sigmoid(Tape<T>& tape, const Ptr<T>& a) {
  auto out = detail::make_out<T>(a->shape, a->requires_grad);
  for (std::size_t i = 0; i < out->value.size(); ++i) {
    const double x = static_cast<double>(a->value[i]);
    out->value[i] = static_cast<T>(1.0 / (1.0 + std::exp(-x)));
  }
  if (out->requires_grad)
    tape.record([a, out](Tape<T>& tp) {
      if (!tp.has_grad(out)) return;
      const auto& gy = tp.grad(out);
      auto& ga = tp.grad(a);
      for (std::size_t i = 0; i < gy.size(); ++i) {
        const T y = out->value[i];
        ga[i] += gy[i] * y * (T(1) - y);
      }
    });
  return out;
}

// log(max(x, floor)); floor guards the post-softmax loss path.
template <class T>
Ptr<T> log_clamped(Tape<T>& tape, const Ptr<T>& a, T floor) {
  auto out = detail::make_out<T>(a->shape, a->requires_grad);
  for (std::size_t i = 0; i < out->value.size(); ++i)
    out->value[i] = std::log(std::max(a->value[i], floor));
  if (out->requires_grad)
    tape.record([a, out, floor](Tape<T>& tp) {
      if (!tp.has_grad(out)) return;
      const auto& gy = tp.grad(out);
      auto& ga = tp.grad(a);
      for (std::size_t i = 0; i < gy.size(); ++i)
        if (a->value[i] > floor) ga[i] += gy[i] / a->value[i];
    });
  return out;
}

// ---- reductions ----

template <class T>
Ptr<T> sum(Tape<T>& tape, const Ptr<T>& a) {
  auto out = detail::make_out<T>({1}, a->requires_grad);
  T s = T(0);
  for (T v : a->value) s += v;
  out->value[0] = s;
  if (out->requires_grad)
    tape.record([a, out](Tape<T>& tp) {
      if (!tp.has_grad(out)) return;
      const T gy = tp.grad(out)[0];
      auto& ga = tp.grad(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy;
    });
  return out;
}

template <class T>
Ptr<T> mean(Tape<T>& tape, const Ptr<T>& a) {
  auto s = sum(tape, a);
  return scale(tape, s, T(1) / static_cast<T>(a->value.size()));
}

// ---- shape ops ----

template <class T>
Ptr<T> reshape(Tape<T>& tape, const Ptr<T>& a, Shape shape) {
  if (numel(shape) != a->value.size())
    throw ShapeError("reshape: element count mismatch");
  auto out = detail::make_out<T>(std::move(shape), a->requires_grad);
  out->value = a->value;
  if (out->requires_grad)
    tape.record([a, out](Tape<T>& tp) {
      if (!tp.has_grad(out)) return;
      const auto& gy = tp.grad(out);
      auto& ga = tp.grad(a);
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
    });
  return out;
}

template <class T>
Ptr<T> gather_rows(Tape<T>& tape, const Ptr<T>& a,
                   const std::vector<int>& indices) {
  if (a->shape.size() != 2) throw ShapeError("gather_rows: expected 2-D input");
  const int cols = a->shape[1];
  auto out = detail::make_out<T>({static_cast<int>(indices.size()), cols},
                                 a->requires_grad);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const int src = indices[r];
    if (src < 0 || src >= a->shape[0])
      throw std::out_of_range("gather_rows: index out of range");
    std::copy_n(a->value.begin() + static_cast<std::size_t>(src) * cols, cols,
                out->value.begin() + r * cols);
  }
  if (out->requires_grad)
    tape.record([a, out, indices](Tape<T>& tp) {
      if (!tp.has_grad(out)) return;
      const auto& gy = tp.grad(out);
      auto& ga = tp.grad(a);
      const int cols = a->shape[1];
      for (std::size_t r = 0; r < indices.size(); ++r)
        for (int c = 0; c < cols; ++c)
          ga[static_cast<std::size_t>(indices[r]) * cols + c] +=
              gy[r * cols + c];
    });
  return out;
}

template <class T>
Ptr<T> concat_rows(Tape<T>& tape, const Ptr<T>& a, const Ptr<T>& b) {
  if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[1])
    throw ShapeError("concat_rows: incompatible shapes");
  const int cols = a->shape[1];
  auto out = detail::make_out<T>({a->shape[0] + b->shape[0], cols},
                                 a->requires_grad || b->requires_grad);
  std::copy(a->value.begin(), a->value.end(), out->value.begin());
  std::copy(b->value.begin(), b->value.end(),
            out->value.begin() + a->value.size());
  if (out->requires_grad)
    tape.record([a, b, out](Tape<T>& tp) {
      if (!tp.has_grad(out)) return;
      const auto& gy = tp.grad(out);
      if (a->requires_grad) {
        auto& ga = tp.grad(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i];
      }
      if (b->requires_grad) {
        auto& gb = tp.grad(b);
        const std::size_t off = a->value.size();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[off + i];
      }
    });
  return out;
}

template <class T>
Ptr<T> slice_rows(Tape<T>& tape, const Ptr<T>& a, int r0, int r1) {
  if (a->shape.size() != 2 || r0 < 0 || r1 > a->shape[0] || r0 >= r1)
    throw ShapeError("slice_rows: bad range");
  const int cols = a->shape[1];
  auto out = detail::make_out<T>({r1 - r0, cols}, a->requires_grad);
  std::copy(a->value.begin() + static_cast<std::size_t>(r0) * cols,
            a->value.begin() + static_cast<std::size_t>(r1) * cols,
            out->value.begin());
  if (out->requires_grad)
    tape.record([a, out, r0, cols](Tape<T>& tp) {
      if (!tp.has_grad(out)) return;
      const auto& gy = tp.grad(out);
      auto& ga = tp.grad(a);
      const std::size_t off = static_cast<std::size_t>(r0) * cols;
      for (std::size_t i = 0; i < gy.size(); ++i) ga[off + i] += gy[i];
    });
  return out;
}

template <class T>
Ptr<T> slice_cols(Tape<T>& tape, const Ptr<T>& a, int c0, int c1) {
  if (a->shape.size() != 2 || c0 < 0 || c1 > a->shape[1] || c0 >= c1)
    throw ShapeError("slice_cols: bad range");
  const int rows = a->shape[0], cols = a->shape[1], nc = c1 - c0;
  auto out = detail::make_out<T>({rows, nc}, a->requires_grad);
  for (int r = 0; r < rows; ++r)
    std::copy_n(a->value.begin() + static_cast<std::size_t>(r) * cols + c0, nc,
                out->value.begin() + static_cast<std::size_t>(r) * nc);
  if (out->requires_grad)
    tape.record([a, out, c0, nc](Tape<T>& tp) {
      if (!tp.has_grad(out)) return;
      const auto& gy = tp.grad(out);
      auto& ga = tp.grad(a);
      const int rows = a->shape[0], cols = a->shape[1];
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < nc; ++c)
          ga[static_cast<std::size_t>(r) * cols + c0 + c] +=
              gy[static_cast<std::size_t>(r) * nc + c];
    });
  return out;
}

template <class T>
Ptr<T> concat_cols(Tape<T>& tape, const std::vector<Ptr<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const int rows = parts[0]->shape[0];
  int total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p->shape.size() != 2 || p->shape[0] != rows)
      throw ShapeError("concat_cols: row mismatch");
    total += p->shape[1];
    rg = rg || p->requires_grad;
  }
  auto out = detail::make_out<T>({rows, total}, rg);
  int off = 0;
  for (const auto& p : parts) {
    const int pc = p->shape[1];
    for (int r = 0; r < rows; ++r)
      std::copy_n(p->value.begin() + static_cast<std::size_t>(r) * pc, pc,
                  out->value.begin() + static_cast<std::size_t>(r) * total +
                      off);
    off += pc;
  }
  if (rg)
    tape.record([parts, out, total](Tape<T>& tp) {
      if (!tp.has_grad(out)) return;
      const auto& gy = tp.grad(out);
      const int rows = out->shape[0];
      int off = 0;
      for (const auto& p : parts) {
        const int pc = p->shape[1];
        if (p->requires_grad) {
          auto& gp = tp.grad(p);
          for (int r = 0; r < rows; ++r)
            for (int c = 0; c < pc; ++c)
              gp[static_cast<std::size_t>(r) * pc + c] +=
                  gy[static_cast<std::size_t>(r) * total + off + c];
        }
        off += pc;
      }
    });
  return out;
}

// ---- linear algebra ----

template <class T>
Ptr<T> matmul(Tape<T>& tape, const Ptr<T>& a, const Ptr<T>& b) {
  if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0])
    throw ShapeError("matmul: incompatible shapes " + shape_str(a->shape) +
                     " and " + shape_str(b->shape));
  const int m = a->shape[0], k = a->shape[1], n = b->shape[1];
  auto out = detail::make_out<T>({m, n}, a->requires_grad || b->requires_grad);
  kernels::matmul(a->value.data(), b->value.data(), out->value.data(), m, k, n);
  if (out->requires_grad)
    tape.record([a, b, out, m, k, n](Tape<T>& tp) {
      if (!tp.has_grad(out)) return;
      const auto& gy = tp.grad(out);
      if (a->requires_grad)
        kernels::matmul_nt_acc(gy.data(), b->value.data(), tp.grad(a).data(),
                               m, n, k);
      if (b->requires_grad)
        kernels::matmul_tn_acc(a->value.data(), gy.data(), tp.grad(b).data(),
                               m, k, n);
    });
  return out;
}

// a[m x k] * b[n x k]^T, the QK^T form.
template <class T>
Ptr<T> matmul_nt(Tape<T>& tape, const Ptr<T>& a, const Ptr<T>& b) {
  if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[1])
    throw ShapeError("matmul_nt: incompatible shapes");
  const int m = a->shape[0], k = a->shape[1], n = b->shape[0];
  auto out = detail::make_out<T>({m, n}, a->requires_grad || b->requires_grad);
  kernels::matmul_nt_acc(a->value.data(), b->value.data(), out->value.data(),
                         m, k, n);
  if (out->requires_grad)
    tape.record([a, b, out, m, k, n](Tape<T>& tp) {
      if (!tp.has_grad(out)) return;
      const auto& gy = tp.grad(out);
      // da[m x k] += gy[m x n] * b[n x k]; db[n x k] += gy^T * a
      if (a->requires_grad)
        kernels::matmul_nn_acc(gy.data(), b->value.data(), tp.grad(a).data(),
                               m, n, k);
      if (b->requires_grad)
        kernels::matmul_tn_acc(gy.data(), a->value.data(), tp.grad(b).data(),
                               m, n, k);
    });
  return out;
}

// Broadcast row vector b[n] across rows of a[m x n].
template <class T>
Ptr<T> add_rowvec(Tape<T>& tape, const Ptr<T>& a, const Ptr<T>& b) {
  if (a->shape.size() != 2 || b->value.size() !=
                                  static_cast<std::size_t>(a->shape[1]))
    throw ShapeError("add_rowvec: incompatible shapes");
  const int m = a->shape[0], n = a->shape[1];
  auto out = detail::make_out<T>(a->shape, a->requires_grad || b->requires_grad);
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < n; ++c)
      out->value[static_cast<std::size_t>(r) * n + c] =
          a->value[static_cast<std::size_t>(r) * n + c] + b->value[c];
  if (out->requires_grad)
    tape.record([a, b, out, m, n](Tape<T>& tp) {
      if (!tp.has_grad(out)) return;
      const auto& gy = tp.grad(out);
      if (a->requires_grad) {
        auto& ga = tp.grad(a);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
      }
      if (b->requires_grad) {
        auto& gb = tp.grad(b);
        for (int r = 0; r < m; ++r)
          for (int c = 0; c < n; ++c)
            gb[c] += gy[static_cast<std::size_t>(r) * n + c];
      }
    });
  return out;
}

// ---- normalization / softmax ----

template <class T>
Ptr<T> softmax_rows(Tape<T>& tape, const Ptr<T>& a) {
  if (a->shape.size() != 2) throw ShapeError("softmax_rows: expected 2-D");
  const int m = a->shape[0], n = a->shape[1];
  auto out = detail::make_out<T>(a->shape, a->requires_grad);
  for (int r = 0; r < m; ++r) {
    const T* x = a->value.data() + static_cast<std::size_t>(r) * n;
    T* y = out->value.data() + static_cast<std::size_t>(r) * n;
    T mx = x[0];
    for (int c = 1; c < n; ++c) mx = std::max(mx, x[c]);
    T s = T(0);
    for (int c = 0; c < n; ++c) {
      y[c] = std::exp(x[c] - mx);
      s += y[c];
    }
    for (int c = 0; c < n; ++c) y[c] /= s;
  }
  if (out->requires_grad)
    tape.record([a, out, m, n](Tape<T>& tp) {
      if (!tp.has_grad(out)) return;
      const auto& gy = tp.grad(out);
      auto& ga = tp.grad(a);
      for (int r = 0; r < m; ++r) {
        const T* y = out->value.data() + static_cast<std::size_t>(r) * n;
        const T* g = gy.data() + static_cast<std::size_t>(r) * n;
        T dot = T(0);
        for (int c = 0; c < n; ++c) dot += y[c] * g[c];
        T* d = ga.data() + static_cast<std::size_t>(r) * n;
        for (int c = 0; c < n; ++c) d[c] += y[c] * (g[c] - dot);
      }
    });
  return out;
}

// Normalizes over the last axis; gamma/beta have length C.
template <class T>
Ptr<T> layer_norm(Tape<T>& tape, const Ptr<T>& a, const Ptr<T>& gamma,
                  const Ptr<T>& beta, T eps) {
  if (a->shape.empty()) throw ShapeError("layer_norm: scalar input");
  const int c = a->shape.back();
  if (gamma->value.size() != static_cast<std::size_t>(c) ||
      beta->value.size() != static_cast<std::size_t>(c))
    throw ShapeError("layer_norm: gamma/beta must match last extent");
  const std::size_t rows = a->value.size() / c;
  auto out = detail::make_out<T>(
      a->shape,
      a->requires_grad || gamma->requires_grad || beta->requires_grad);
  std::vector<T> inv_std(rows), mu(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = a->value.data() + r * c;
    T m = T(0);
    for (int i = 0; i < c; ++i) m += x[i];
    m /= static_cast<T>(c);
    T var = T(0);
    for (int i = 0; i < c; ++i) var += (x[i] - m) * (x[i] - m);
    var /= static_cast<T>(c);
    mu[r] = m;
    inv_std[r] = T(1) / std::sqrt(var + eps);
    T* y = out->value.data() + r * c;
    for (int i = 0; i < c; ++i)
      y[i] = gamma->value[i] * (x[i] - m) * inv_std[r] + beta->value[i];
  }
  if (out->requires_grad)
    tape.record([a, gamma, beta, out, mu, inv_std, c, rows](Tape<T>& tp) {
      if (!tp.has_grad(out)) return;
      const auto& gy = tp.grad(out);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* x = a->value.data() + r * c;
        const T* g = gy.data() + r * c;
        const T is = inv_std[r], m = mu[r];
        if (gamma->requires_grad) {
          auto& gg = tp.grad(gamma);
          for (int i = 0; i < c; ++i) gg[i] += g[i] * (x[i] - m) * is;
        }
        if (beta->requires_grad) {
          auto& gb = tp.grad(beta);
          for (int i = 0; i < c; ++i) gb[i] += g[i];
        }
        if (a->requires_grad) {
          auto& ga = tp.grad(a);
          T s1 = T(0), s2 = T(0);
          for (int i = 0; i < c; ++i) {
            const T gi = g[i] * gamma->value[i];
            s1 += gi;
            s2 += gi * (x[i] - m) * is;
          }
          s1 /= static_cast<T>(c);
          s2 /= static_cast<T>(c);
          T* d = ga.data() + r * c;
          for (int i = 0; i < c; ++i) {
            const T gi = g[i] * gamma->value[i];
            const T xh = (x[i] - m) * is;
            d[i] += (gi - s1 - xh * s2) * is;
          }
        }
      }
    });
  return out;
}

// ---- spatial ops (HWC layout) ----

template <class T>
Ptr<T> conv2d(Tape<T>& tape, const Ptr<T>& x, const Ptr<T>& w, const Ptr<T>& b,
              int stride, int pad) {
  if (x->shape.size() != 3 || w->shape.size() != 4)
    throw ShapeError("conv2d: expected HWC input and khkwCiCo weights");
  const int h = x->shape[0], wd = x->shape[1], ci = x->shape[2];
  const int kh = w->shape[0], kw = w->shape[1], co = w->shape[3];
  if (w->shape[2] != ci) throw ShapeError("conv2d: channel mismatch");
  if (kh % 2 == 0 || kw % 2 == 0)
    throw ShapeError("conv2d: kernel extents must be odd");
  if ((h + 2 * pad - kh) % stride != 0 || (wd + 2 * pad - kw) % stride != 0)
    throw ShapeError("conv2d: non-integral output extent");
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wd + 2 * pad - kw) / stride + 1;
  if (b && b->value.size() != static_cast<std::size_t>(co))
    throw ShapeError("conv2d: bias length mismatch");
  const bool rg = x->requires_grad || w->requires_grad ||
                  (b && b->requires_grad);
  auto out = detail::make_out<T>({ho, wo, co}, rg);
  kernels::conv2d(x->value.data(), w->value.data(),
                  b ? b->value.data() : nullptr, out->value.data(), h, wd, ci,
                  kh, kw, co, stride, pad, ho, wo);
  if (rg)
    tape.record([x, w, b, out, h, wd, ci, kh, kw, co, stride, pad, ho,
                 wo](Tape<T>& tp) {
      if (!tp.has_grad(out)) return;
      const auto& gy = tp.grad(out);
      if (x->requires_grad)
        kernels::conv2d_backward_input(gy.data(), w->value.data(),
                                       tp.grad(x).data(), h, wd, ci, kh, kw,
                                       co, stride, pad, ho, wo);
      if (w->requires_grad || (b && b->requires_grad))
        kernels::conv2d_backward_weights(
            x->value.data(), gy.data(),
            w->requires_grad ? tp.grad(w).data() : nullptr,
            (b && b->requires_grad) ? tp.grad(b).data() : nullptr, h, wd, ci,
            kh, kw, co, stride, pad, ho, wo);
    });
  return out;
}

// Bilinear upsampling, align-corners=false.
template <class T>
Ptr<T> upsample_bilinear(Tape<T>& tape, const Ptr<T>& x, int factor) {
  if (x->shape.size() != 3) throw ShapeError("upsample_bilinear: expected HWC");
  if (factor < 1)
    throw std::invalid_argument("upsample_bilinear: factor must be >= 1");
  const int h = x->shape[0], w = x->shape[1], c = x->shape[2];
  const int oh = h * factor, ow = w * factor;
  auto out = detail::make_out<T>({oh, ow, c}, x->requires_grad);
  auto src_coord = [factor](int o) {
    return (static_cast<double>(o) + 0.5) / factor - 0.5;
  };
  auto corners = [](double s, int extent, int& lo, int& hi, double& frac) {
    if (s <= 0.0) {
      lo = hi = 0;
      frac = 0.0;
    } else if (s >= extent - 1) {
      lo = hi = extent - 1;
      frac = 0.0;
    } else {
      lo = static_cast<int>(std::floor(s));
      hi = lo + 1;
      frac = s - lo;
    }
  };
  for (int oy = 0; oy < oh; ++oy) {
    int y0, y1;
    double fy;
    corners(src_coord(oy), h, y0, y1, fy);
    for (int ox = 0; ox < ow; ++ox) {
      int x0, x1;
      double fx;
      corners(src_coord(ox), w, x0, x1, fx);
      T* o = out->value.data() + (static_cast<std::size_t>(oy) * ow + ox) * c;
      const T* p00 = x->value.data() + (static_cast<std::size_t>(y0) * w + x0) * c;
      const T* p01 = x->value.data() + (static_cast<std::size_t>(y0) * w + x1) * c;
      const T* p10 = x->value.data() + (static_cast<std::size_t>(y1) * w + x0) * c;
      const T* p11 = x->value.data() + (static_cast<std::size_t>(y1) * w + x1) * c;
      for (int ch = 0; ch < c; ++ch)
        o[ch] = static_cast<T>((1 - fy) * ((1 - fx) * p00[ch] + fx * p01[ch]) +
                               fy * ((1 - fx) * p10[ch] + fx * p11[ch]));
    }
  }
  if (out->requires_grad)
    tape.record([x, out, h, w, c, oh, ow, src_coord, corners](Tape<T>& tp) {
      if (!tp.has_grad(out)) return;
      const auto& gy = tp.grad(out);
      auto& gx = tp.grad(x);
      for (int oy = 0; oy < oh; ++oy) {
        int y0, y1;
        double fy;
        corners(src_coord(oy), h, y0, y1, fy);
        for (int ox = 0; ox < ow; ++ox) {
          int x0, x1;
          double fx;
          corners(src_coord(ox), w, x0, x1, fx);
          const T* g =
              gy.data() + (static_cast<std::size_t>(oy) * ow + ox) * c;
          for (int ch = 0; ch < c; ++ch) {
            gx[(static_cast<std::size_t>(y0) * w + x0) * c + ch] +=
                static_cast<T>((1 - fy) * (1 - fx)) * g[ch];
            gx[(static_cast<std::size_t>(y0) * w + x1) * c + ch] +=
                static_cast<T>((1 - fy) * fx) * g[ch];
            gx[(static_cast<std::size_t>(y1) * w + x0) * c + ch] +=
                static_cast<T>(fy * (1 - fx)) * g[ch];
            gx[(static_cast<std::size_t>(y1) * w + x1) * c + ch] +=
                static_cast<T>(fy * fx) * g[ch];
          }
        }
      }
    });
  return out;
}

// 2x2 mean pooling, stride 2; extents must be even.
template <class T>
Ptr<T> avg_pool2(Tape<T>& tape, const Ptr<T>& x) {
  if (x->shape.size() != 3) throw ShapeError("avg_pool2: expected HWC");
  const int h = x->shape[0], w = x->shape[1], c = x->shape[2];
  if (h % 2 != 0 || w % 2 != 0)
    throw ShapeError("avg_pool2: extents must be even, got " +
                     shape_str(x->shape));
  const int oh = h / 2, ow = w / 2;
  auto out = detail::make_out<T>({oh, ow, c}, x->requires_grad);
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox) {
      T* o = out->value.data() + (static_cast<std::size_t>(oy) * ow + ox) * c;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const T* p = x->value.data() +
                       (static_cast<std::size_t>(2 * oy + dy) * w + 2 * ox +
                        dx) * c;
          for (int ch = 0; ch < c; ++ch) o[ch] += p[ch] * T(0.25);
        }
    }
  if (out->requires_grad)
    tape.record([x, out, w, c, oh, ow](Tape<T>& tp) {
      if (!tp.has_grad(out)) return;
      const auto& gy = tp.grad(out);
      auto& gx = tp.grad(x);
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          const T* g =
              gy.data() + (static_cast<std::size_t>(oy) * ow + ox) * c;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              T* p = gx.data() +
                     (static_cast<std::size_t>(2 * oy + dy) * w + 2 * ox +
                      dx) * c;
              for (int ch = 0; ch < c; ++ch) p[ch] += g[ch] * T(0.25);
            }
        }
    });
  return out;
}

// ---- sparse matrix (constant coefficients) ----

template <class T>
struct SparseMatrix {
  int n = 0;
  std::vector<int> row_ptr;  // size n+1
  std::vector<int> col;
  std::vector<T> val;
};

// y = S * h with S constant; grad dh += S^T * dy (S symmetric in our use).
template <class T>
Ptr<T> spmm(Tape<T>& tape, const SparseMatrix<T>& s, const Ptr<T>& h) {
  if (h->shape.size() != 2 || h->shape[0] != s.n)
    throw ShapeError("spmm: row count mismatch");
  const int c = h->shape[1];
  auto out = detail::make_out<T>({s.n, c}, h->requires_grad);
  for (int i = 0; i < s.n; ++i) {
    T* y = out->value.data() + static_cast<std::size_t>(i) * c;
    for (int e = s.row_ptr[i]; e < s.row_ptr[i + 1]; ++e) {
      const T w = s.val[e];
      const T* hr = h->value.data() + static_cast<std::size_t>(s.col[e]) * c;
      for (int j = 0; j < c; ++j) y[j] += w * hr[j];
    }
  }
  if (out->requires_grad)
    tape.record([s, h, out, c](Tape<T>& tp) {
      if (!tp.has_grad(out)) return;
      const auto& gy = tp.grad(out);
      auto& gh = tp.grad(h);
      for (int i = 0; i < s.n; ++i) {
        const T* g = gy.data() + static_cast<std::size_t>(i) * c;
        for (int e = s.row_ptr[i]; e < s.row_ptr[i + 1]; ++e) {
          const T w = s.val[e];
          T* d = gh.data() + static_cast<std::size_t>(s.col[e]) * c;
          for (int j = 0; j < c; ++j) d[j] += w * g[j];
        }
      }
    });
  return out;
}

}  // namespace vct
