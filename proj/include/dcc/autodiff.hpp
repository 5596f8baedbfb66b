#pragma once

// Minimal tape-based reverse-mode differentiation over dcc::Matrix.
//
// Every op evaluates eagerly and, when any input requires a gradient, records
// a closure that pushes the output gradient back into its inputs. Nodes live
// in a std::deque owned by the Tape so their addresses stay stable; a Var is a
// non-owning handle and must not outlive its Tape. Constant operands captured
// by pointer (frozen weights) must outlive the Tape as well.

#include <deque>
#include <functional>
#include <limits>
#include <vector>

#include "dcc/tensor.hpp"

namespace dcc::ad {

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::function<void(const Matrix&)> backward;
};

inline void accumulate(Node* n, const Matrix& g) {
  if (!n->requires_grad) return;
  if (n->grad.empty()) {
    n->grad = g;
    return;
  }
  for (std::size_t i = 0; i < g.data.size(); ++i) n->grad.data[i] += g.data[i];
}

class Tape;

class Var {
 public:
  Var() = default;
  Var(Node* n, Tape* t) : node_(n), tape_(t) {}

  const Matrix& value() const { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  std::size_t rows() const { return node_->value.rows; }
  std::size_t cols() const { return node_->value.cols; }
  double scalar() const { return node_->value.data.at(0); }
  Node* node() const { return node_; }
  Tape& tape() const { return *tape_; }
  explicit operator bool() const { return node_ != nullptr; }

 private:
  Node* node_ = nullptr;
  Tape* tape_ = nullptr;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix m) { return record(std::move(m), false, {}); }
  Var parameter(Matrix m) { return record(std::move(m), true, {}); }

  Var record(Matrix value, bool requires_grad, std::function<void(const Matrix&)> backward) {
    Node& n = nodes_.emplace_back();
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(backward);
    return Var(&n, this);
  }

  // Seeds d(root)/d(root) = 1 and sweeps the tape in reverse creation order.
  void backward(const Var& root) {
    if (root.value().size() != 1) throw std::invalid_argument("backward: root must be a scalar");
    if (!root.requires_grad()) return;
    root.node()->grad = Matrix(1, 1, 1.0);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->requires_grad && it->backward && !it->grad.empty()) it->backward(it->grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  std::deque<Node> nodes_;
};

namespace detail {
inline bool any_grad(std::initializer_list<Var> vs) {
  for (const auto& v : vs)
    if (v.requires_grad()) return true;
  return false;
}
}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  Matrix out = dcc::matmul(a.value(), b.value());
  Node* na = a.node();
  Node* nb = b.node();
  return a.tape().record(std::move(out), detail::any_grad({a, b}), [na, nb](const Matrix& g) {
    if (na->requires_grad) accumulate(na, matmul_nt(g, nb->value));
    if (nb->requires_grad) accumulate(nb, matmul_tn(na->value, g));
  });
}

// a * b^T
inline Var matmul_nt(const Var& a, const Var& b) {
  Matrix out = dcc::matmul_nt(a.value(), b.value());
  Node* na = a.node();
  Node* nb = b.node();
  return a.tape().record(std::move(out), detail::any_grad({a, b}), [na, nb](const Matrix& g) {
    if (na->requires_grad) accumulate(na, dcc::matmul(g, nb->value));
    if (nb->requires_grad) accumulate(nb, matmul_tn(g, na->value));
  });
}

// x * W (+ bias row) with frozen W and bias.
inline Var linear(const Var& x, const Matrix& w, const Matrix* bias = nullptr) {
  Matrix out = dcc::matmul(x.value(), w);
  if (bias != nullptr) {
    if (bias->cols != out.cols) throw std::invalid_argument("linear: bias width mismatch");
    for (std::size_t i = 0; i < out.rows; ++i)
      for (std::size_t j = 0; j < out.cols; ++j) out(i, j) += bias->data[j];
  }
  Node* nx = x.node();
  const Matrix* pw = &w;
  return x.tape().record(std::move(out), x.requires_grad(),
                         [nx, pw](const Matrix& g) { accumulate(nx, matmul_nt(g, *pw)); });
}

inline Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.value().data[i];
  Node* na = a.node();
  Node* nb = b.node();
  return a.tape().record(std::move(out), detail::any_grad({a, b}), [na, nb](const Matrix& g) {
    accumulate(na, g);
    accumulate(nb, g);
  });
}

inline Var sub(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.value().data[i];
  Node* na = a.node();
  Node* nb = b.node();
  return a.tape().record(std::move(out), detail::any_grad({a, b}), [na, nb](const Matrix& g) {
    accumulate(na, g);
    if (nb->requires_grad) {
      Matrix neg = g;
      for (auto& v : neg.data) v = -v;
      accumulate(nb, neg);
    }
  });
}

// alpha * x + c, with c a frozen matrix of the same shape (or empty for none).
inline Var affine(const Var& x, double alpha, const Matrix* c = nullptr) {
  Matrix out = x.value();
  for (auto& v : out.data) v *= alpha;
  if (c != nullptr) {
    require_same_shape(out, *c, "affine");
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += c->data[i];
  }
  Node* nx = x.node();
  return x.tape().record(std::move(out), x.requires_grad(), [nx, alpha](const Matrix& g) {
    Matrix s = g;
    for (auto& v : s.data) v *= alpha;
    accumulate(nx, s);
  });
}

inline Var scale(const Var& x, double alpha) { return affine(x, alpha); }

// alpha * x + beta for scalars and tensors alike.
inline Var shift(const Var& x, double alpha, double beta) {
  Matrix out = x.value();
  for (auto& v : out.data) v = alpha * v + beta;
  Node* nx = x.node();
  return x.tape().record(std::move(out), x.requires_grad(), [nx, alpha](const Matrix& g) {
    Matrix s = g;
    for (auto& v : s.data) v *= alpha;
    accumulate(nx, s);
  });
}

// Adds a 1 x C row to every row of x.
inline Var add_row(const Var& x, const Var& r) {
  if (r.rows() != 1 || r.cols() != x.cols()) throw std::invalid_argument("add_row: shape mismatch");
  Matrix out = x.value();
  for (std::size_t i = 0; i < out.rows; ++i)
    for (std::size_t j = 0; j < out.cols; ++j) out(i, j) += r.value().data[j];
  Node* nx = x.node();
  Node* nr = r.node();
  return x.tape().record(std::move(out), detail::any_grad({x, r}), [nx, nr](const Matrix& g) {
    accumulate(nx, g);
    if (nr->requires_grad) {
      Matrix s(1, g.cols);
      for (std::size_t i = 0; i < g.rows; ++i)
        for (std::size_t j = 0; j < g.cols; ++j) s.data[j] += g(i, j);
      accumulate(nr, s);
    }
  });
}

inline Var silu(const Var& x) {
  Matrix out = x.value();
  for (auto& v : out.data) v = v / (1.0 + std::exp(-v));
  Node* nx = x.node();
  return x.tape().record(std::move(out), x.requires_grad(), [nx](const Matrix& g) {
    Matrix d = g;
    for (std::size_t i = 0; i < d.data.size(); ++i) {
      const double v = nx->value.data[i];
      const double sg = 1.0 / (1.0 + std::exp(-v));
      d.data[i] *= sg * (1.0 + v * (1.0 - sg));
    }
    accumulate(nx, d);
  });
}

// Row-wise layer normalisation with optional frozen affine parameters.
inline Var layer_norm(const Var& x, const Matrix* gamma = nullptr, const Matrix* beta = nullptr,
                      double eps = 1e-5) {
  const Matrix& in = x.value();
  const std::size_t n = in.cols;
  Matrix xhat(in.rows, n);
  std::vector<double> inv_std(in.rows);
  for (std::size_t i = 0; i < in.rows; ++i) {
    auto r = in.row(i);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) xhat(i, j) = (r[j] - mean) * inv_std[i];
  }
  Matrix out = xhat;
  if (gamma != nullptr || beta != nullptr) {
    for (std::size_t i = 0; i < out.rows; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double v = xhat(i, j);
        if (gamma != nullptr) v *= gamma->data[j];
        if (beta != nullptr) v += beta->data[j];
        out(i, j) = v;
      }
  }
  Node* nx = x.node();
  return x.tape().record(
      std::move(out), x.requires_grad(),
      [nx, xhat = std::move(xhat), inv_std = std::move(inv_std), gamma](const Matrix& g) {
        const std::size_t cols = g.cols;
        Matrix d(g.rows, cols);
        for (std::size_t i = 0; i < g.rows; ++i) {
          double mean_dx = 0.0;
          double mean_dx_xhat = 0.0;
          std::vector<double> dxhat(cols);
          for (std::size_t j = 0; j < cols; ++j) {
            dxhat[j] = g(i, j) * (gamma != nullptr ? gamma->data[j] : 1.0);
            mean_dx += dxhat[j];
            mean_dx_xhat += dxhat[j] * xhat(i, j);
          }
          mean_dx /= static_cast<double>(cols);
          mean_dx_xhat /= static_cast<double>(cols);
          for (std::size_t j = 0; j < cols; ++j)
            d(i, j) = inv_std[i] * (dxhat[j] - mean_dx - xhat(i, j) * mean_dx_xhat);
        }
        accumulate(nx, d);
      });
}

// Row-wise softmax; with `causal`, entry (i, j) for j > i is excluded.
inline Var softmax_rows(const Var& x, bool causal = false) {
  const Matrix& in = x.value();
  Matrix out(in.rows, in.cols);
  for (std::size_t i = 0; i < in.rows; ++i) {
    const std::size_t limit = causal ? std::min(i + 1, in.cols) : in.cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < limit; ++j) mx = std::max(mx, in(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < limit; ++j) {
      out(i, j) = std::exp(in(i, j) - mx);
      sum += out(i, j);
    }
    for (std::size_t j = 0; j < limit; ++j) out(i, j) /= sum;
  }
  Node* nx = x.node();
  Tape& tape = x.tape();
  Var result = tape.record(std::move(out), x.requires_grad(), {});
  if (x.requires_grad()) {
    Node* ny = result.node();
    ny->backward = [nx, ny](const Matrix& g) {
      const Matrix& y = ny->value;
      Matrix d(g.rows, g.cols);
      for (std::size_t i = 0; i < g.rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < g.cols; ++j) s += g(i, j) * y(i, j);
        for (std::size_t j = 0; j < g.cols; ++j) d(i, j) = y(i, j) * (g(i, j) - s);
      }
      accumulate(nx, d);
    };
  }
  return result;
}

inline Var slice_cols(const Var& x, std::size_t begin, std::size_t end) {
  if (begin > end || end > x.cols()) throw std::invalid_argument("slice_cols: bad range");
  const Matrix& in = x.value();
  Matrix out(in.rows, end - begin);
  for (std::size_t i = 0; i < in.rows; ++i)
    for (std::size_t j = begin; j < end; ++j) out(i, j - begin) = in(i, j);
  Node* nx = x.node();
  const std::size_t total = in.cols;
  return x.tape().record(std::move(out), x.requires_grad(),
                         [nx, begin, total](const Matrix& g) {
                           Matrix d(g.rows, total);
                           for (std::size_t i = 0; i < g.rows; ++i)
                             for (std::size_t j = 0; j < g.cols; ++j) d(i, begin + j) = g(i, j);
                           accumulate(nx, d);
                         });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  bool grad = false;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
    grad = grad || p.requires_grad();
  }
  Matrix out(rows, cols);
  std::vector<Node*> nodes;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out(i, off + j) = p.value()(i, j);
    nodes.push_back(p.node());
    offsets.push_back(off);
    off += p.cols();
  }
  return parts.front().tape().record(
      std::move(out), grad, [nodes = std::move(nodes), offsets = std::move(offsets)](const Matrix& g) {
        for (std::size_t k = 0; k < nodes.size(); ++k) {
          if (!nodes[k]->requires_grad) continue;
          const std::size_t w = nodes[k]->value.cols;
          Matrix d(g.rows, w);
          for (std::size_t i = 0; i < g.rows; ++i)
            for (std::size_t j = 0; j < w; ++j) d(i, j) = g(i, offsets[k] + j);
          accumulate(nodes[k], d);
        }
      });
}

inline Var row(const Var& x, std::size_t r) {
  if (r >= x.rows()) throw std::out_of_range("row: index out of range");
  Matrix out = Matrix::row_vector(x.value().row(r));
  Node* nx = x.node();
  const std::size_t rows = x.rows();
  return x.tape().record(std::move(out), x.requires_grad(), [nx, r, rows](const Matrix& g) {
    Matrix d(rows, g.cols);
    std::copy(g.data.begin(), g.data.end(), d.row(r).begin());
    accumulate(nx, d);
  });
}

// Copy of `base` with row `r` replaced by the 1 x C row `v`.
inline Var replace_row(const Var& base, std::size_t r, const Var& v) {
  if (r >= base.rows() || v.rows() != 1 || v.cols() != base.cols())
    throw std::invalid_argument("replace_row: shape mismatch");
  Matrix out = base.value();
  std::copy(v.value().data.begin(), v.value().data.end(), out.row(r).begin());
  Node* nb = base.node();
  Node* nv = v.node();
  return base.tape().record(std::move(out), detail::any_grad({base, v}), [nb, nv, r](const Matrix& g) {
    if (nv->requires_grad) accumulate(nv, Matrix::row_vector(g.row(r)));
    if (nb->requires_grad) {
      Matrix d = g;
      for (auto& e : d.row(r)) e = 0.0;
      accumulate(nb, d);
    }
  });
}

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data) s += v;
  Node* nx = x.node();
  const std::size_t rows = x.rows();
  const std::size_t cols = x.cols();
  return x.tape().record(Matrix(1, 1, s), x.requires_grad(),
                         [nx, rows, cols](const Matrix& g) { accumulate(nx, Matrix(rows, cols, g.data[0])); });
}

// Weighted sum of scalar vars.
inline Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights) {
  if (terms.empty() || terms.size() != weights.size())
    throw std::invalid_argument("weighted_sum: size mismatch");
  double s = 0.0;
  bool grad = false;
  std::vector<Node*> nodes;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    s += weights[i] * terms[i].scalar();
    grad = grad || terms[i].requires_grad();
    nodes.push_back(terms[i].node());
  }
  return terms.front().tape().record(Matrix(1, 1, s), grad,
                                     [nodes = std::move(nodes), weights](const Matrix& g) {
                                       for (std::size_t i = 0; i < nodes.size(); ++i)
                                         accumulate(nodes[i], Matrix(1, 1, weights[i] * g.data[0]));
                                     });
}

// ||x - target||^2 for a frozen target.
inline Var squared_distance(const Var& x, const Matrix& target) {
  require_same_shape(x.value(), target, "squared_distance");
  double s = 0.0;
  for (std::size_t i = 0; i < target.data.size(); ++i) {
    const double d = x.value().data[i] - target.data[i];
    s += d * d;
  }
  Node* nx = x.node();
  Matrix tgt = target;
  return x.tape().record(Matrix(1, 1, s), x.requires_grad(), [nx, tgt = std::move(tgt)](const Matrix& g) {
    Matrix d(tgt.rows, tgt.cols);
    for (std::size_t i = 0; i < d.data.size(); ++i) d.data[i] = 2.0 * (nx->value.data[i] - tgt.data[i]) * g.data[0];
    accumulate(nx, d);
  });
}

// Cosine similarity between two 1 x d rows; zero norm is an error.
inline Var cosine(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "cosine");
  const auto av = a.value().data;
  const auto bv = b.value().data;
  const double aa = dot(av, av);
  const double bb = dot(bv, bv);
  if (aa == 0.0 || bb == 0.0) throw std::domain_error("cosine similarity of a zero-norm vector");
  const double na = std::sqrt(aa);
  const double nb = std::sqrt(bb);
  const double c = cosine_from_sums(dot(av, bv), aa, bb);
  Node* pa = a.node();
  Node* pb = b.node();
  return a.tape().record(Matrix(1, 1, c), detail::any_grad({a, b}),
                         [pa, pb, na, nb, c](const Matrix& g) {
                           const auto& x = pa->value;
                           const auto& y = pb->value;
                           if (pa->requires_grad) {
                             Matrix d(1, x.cols);
                             for (std::size_t i = 0; i < x.cols; ++i)
                               d.data[i] = g.data[0] * (y.data[i] / (na * nb) - c * x.data[i] / (na * na));
                             accumulate(pa, d);
                           }
                           if (pb->requires_grad) {
                             Matrix d(1, y.cols);
                             for (std::size_t i = 0; i < y.cols; ++i)
                               d.data[i] = g.data[0] * (x.data[i] / (na * nb) - c * y.data[i] / (nb * nb));
                             accumulate(pb, d);
                           }
                         });
}

inline Var avg_pool2(const Var& x) {
  Matrix out = dcc::avg_pool2(x.value());
  Node* nx = x.node();
  return x.tape().record(std::move(out), x.requires_grad(), [nx](const Matrix& g) {
    Matrix d = dcc::upsample2(g);
    for (auto& v : d.data) v *= 0.25;
    accumulate(nx, d);
  });
}

inline Var upsample2(const Var& x) {
  Matrix out = dcc::upsample2(x.value());
  Node* nx = x.node();
  return x.tape().record(std::move(out), x.requires_grad(), [nx](const Matrix& g) {
    Matrix d = dcc::avg_pool2(g);
    for (auto& v : d.data) v *= 4.0;
    accumulate(nx, d);
  });
}

}  // namespace dcc::ad
