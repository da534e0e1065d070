#include "moh/numcore/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

namespace moh::nc {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape) + " vs " +
                         to_string(b.shape));
  }
}

template <typename T>
Tape<T>& tape_of(Var<T> a) {
  if (!a.valid()) throw std::logic_error("operation on an unbound variable");
  return *a.tape;
}

// Unary elementwise op with derivative expressed through (x, y).
template <typename T, typename F, typename D>
Var<T> unary(Var<T> a, F f, D dfdx) {
  Tape<T>& tape = tape_of(a);
  const Tensor<T>& x = a.value();
  Tensor<T> y(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return tape.record(std::move(y), {a}, [a, dfdx](Tape<T>& t, int self) {
    const auto& x = t.value(a);
    const auto& y = t.value(self);
    const auto& gy = t.grad(self);
    auto& gx = t.grad(a);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * dfdx(x[i], y[i]);
  });
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape("add", a.value(), b.value());
  Tensor<T> y = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  return tape_of(a).record(std::move(y), {a, b}, [a, b](Tape<T>& t, int self) {
    const auto& gy = t.grad(self);
    for (Var<T> v : {a, b}) {
      if (!t.requires_grad(v)) continue;
      auto& g = t.grad(v);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
    }
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape("sub", a.value(), b.value());
  Tensor<T> y = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  return tape_of(a).record(std::move(y), {a, b}, [a, b](Tape<T>& t, int self) {
    const auto& gy = t.grad(self);
    if (t.requires_grad(a)) {
      auto& g = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
    }
    if (t.requires_grad(b)) {
      auto& g = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= gy[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape("mul", a.value(), b.value());
  Tensor<T> y = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  return tape_of(a).record(std::move(y), {a, b}, [a, b](Tape<T>& t, int self) {
    const auto& gy = t.grad(self);
    if (t.requires_grad(a)) {
      const auto& bv = t.value(b);
      auto& g = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      const auto& av = t.value(a);
      auto& g = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  return unary(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> add_row(Var<T> x, Var<T> row) {
  const auto& xv = x.value();
  const auto& rv = row.value();
  if (rv.size() != xv.cols()) {
    throw DimensionError("add_row: row of shape " + to_string(rv.shape) +
                         " does not broadcast over " + to_string(xv.shape));
  }
  Tensor<T> y = xv;
  const std::size_t c = xv.cols();
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t j = 0; j < c; ++j) y[r * c + j] += rv[j];
  return tape_of(x).record(std::move(y), {x, row}, [x, row, c](Tape<T>& t, int self) {
    const auto& gy = t.grad(self);
    if (t.requires_grad(x)) {
      auto& g = t.grad(x);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
    }
    if (t.requires_grad(row)) {
      auto& g = t.grad(row);
      for (std::size_t i = 0; i < gy.size(); ++i) g[i % c] += gy[i];
    }
  });
}

template <typename T>
Var<T> square(Var<T> a) {
  return unary(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Var<T> abs(Var<T> a) {
  return unary(
      a, [](T x) { return std::abs(x); },
      [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Var<T> log(Var<T> a) {
  return unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Var<T> exp(Var<T> a) {
  return unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> gelu(Var<T> a) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k = T(0.044715);
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const Tensor<T>& xv = a.value();
  const Eigen::Map<const Arr> x(xv.data.data(), xv.size());
  auto th = std::make_shared<Arr>((c * (x + k * x.cube())).tanh());
  Tensor<T> y(xv.shape);
  Eigen::Map<Arr>(y.data.data(), y.size()) = T(0.5) * x * (T(1) + *th);
  return tape_of(a).record(std::move(y), {a}, [a, th](Tape<T>& t, int self) {
    const auto& xv = t.value(a);
    const Eigen::Map<const Arr> x(xv.data.data(), xv.size());
    const Eigen::Map<const Arr> gy(t.grad(self).data(), xv.size());
    Eigen::Map<Arr> gx(t.grad(a).data(), xv.size());
    const Arr du = T(0.7978845608028654) * (T(1) + T(3) * T(0.044715) * x.square());
    gx += gy * (T(0.5) * (T(1) + *th) + T(0.5) * x * (T(1) - th->square()) * du);
  });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  if (numel(shape) != a.value().size()) {
    throw DimensionError("reshape: cannot view " + to_string(a.value().shape) + " as " +
                         to_string(shape));
  }
  Tensor<T> y(std::move(shape), a.value().data);
  return tape_of(a).record(std::move(y), {a}, [a](Tape<T>& t, int self) {
    const auto& gy = t.grad(self);
    auto& g = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  const auto& x = a.value();
  T s = T(0);
  for (T v : x.data) s += v;
  return tape_of(a).record(Tensor<T>::scalar(s), {a}, [a](Tape<T>& t, int self) {
    const T gy = t.grad(self)[0];
    auto& g = t.grad(a);
    for (auto& v : g) v += gy;
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(n));
}

template <typename T>
Var<T> weighted_sum(Var<T> a, const Tensor<T>& w) {
  const auto& x = a.value();
  if (w.size() != x.size()) {
    throw DimensionError("weighted_sum: weights " + to_string(w.shape) + " vs values " +
                         to_string(x.shape));
  }
  T s = T(0);
  for (std::size_t i = 0; i < x.size(); ++i) s += w[i] * x[i];
  return tape_of(a).record(Tensor<T>::scalar(s), {a}, [a, w](Tape<T>& t, int self) {
    const T gy = t.grad(self)[0];
    auto& g = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy * w[i];
  });
}

template <typename T>
Var<T> grouped_weighted_sum(Var<T> a, const Tensor<T>& w, std::span<const int> group,
                            std::size_t groups) {
  const auto& x = a.value();
  if (w.size() != x.size() || group.size() != x.size()) {
    throw DimensionError("grouped_weighted_sum: weights " + to_string(w.shape) + " / groups " +
                         std::to_string(group.size()) + " vs values " + to_string(x.shape));
  }
  Tensor<T> y(Shape{groups});
  for (std::size_t i = 0; i < x.size(); ++i)
    if (group[i] >= 0) y[static_cast<std::size_t>(group[i])] += w[i] * x[i];
  std::vector<int> gid(group.begin(), group.end());
  return tape_of(a).record(std::move(y), {a}, [a, w, gid](Tape<T>& t, int self) {
    const auto& gy = t.grad(self);
    auto& g = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (gid[i] >= 0) g[i] += gy[static_cast<std::size_t>(gid[i])] * w[i];
  });
}

template <typename T>
Var<T> linear_combination(std::span<const Var<T>> terms, std::span<const T> coeffs) {
  if (terms.empty() || terms.size() != coeffs.size()) {
    throw DimensionError("linear_combination: term/coefficient count mismatch");
  }
  T s = T(0);
  for (std::size_t i = 0; i < terms.size(); ++i) s += coeffs[i] * terms[i].value().item();
  std::vector<Var<T>> ts(terms.begin(), terms.end());
  std::vector<T> cs(coeffs.begin(), coeffs.end());
  return tape_of(terms[0]).record(Tensor<T>::scalar(s), terms, [ts, cs](Tape<T>& t, int self) {
    const T gy = t.grad(self)[0];
    for (std::size_t i = 0; i < ts.size(); ++i)
      if (t.requires_grad(ts[i])) t.grad(ts[i])[0] += gy * cs[i];
  });
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (bv.shape.size() != 2 || av.cols() != bv.shape[0]) {
    throw DimensionError("matmul: inner dimensions disagree for " + to_string(av.shape) + " x " +
                         to_string(bv.shape));
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.shape[1];
  Shape out_shape = av.shape;
  out_shape.back() = n;
  Tensor<T> y(out_shape);
  MapMat<T>(y.data.data(), m, n).noalias() =
      CMapMat<T>(av.data.data(), m, k) * CMapMat<T>(bv.data.data(), k, n);
  return tape_of(a).record(std::move(y), {a, b}, [a, b, m, k, n](Tape<T>& t, int self) {
    CMapMat<T> gy(t.grad(self).data(), m, n);
    if (t.requires_grad(a)) {
      MapMat<T>(t.grad(a).data(), m, k).noalias() +=
          gy * CMapMat<T>(t.value(b).data.data(), k, n).transpose();
    }
    if (t.requires_grad(b)) {
      MapMat<T>(t.grad(b).data(), k, n).noalias() +=
          CMapMat<T>(t.value(a).data.data(), m, k).transpose() * gy;
    }
  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  if (wv.shape.size() != 2 || xv.cols() != wv.shape[0]) {
    throw DimensionError("linear: input " + to_string(xv.shape) + " does not match weight " +
                         to_string(wv.shape));
  }
  const std::size_t m = xv.rows(), k = xv.cols(), n = wv.shape[1];
  const bool has_bias = b.valid();
  if (has_bias && b.value().size() != n) {
    throw DimensionError("linear: bias " + to_string(b.value().shape) + " vs weight " +
                         to_string(wv.shape));
  }
  Shape out_shape = xv.shape;
  out_shape.back() = n;
  Tensor<T> y(out_shape);
  MapMat<T> ym(y.data.data(), m, n);
  ym.noalias() = CMapMat<T>(xv.data.data(), m, k) * CMapMat<T>(wv.data.data(), k, n);
  if (has_bias) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bm(b.value().data.data(), n);
    ym.rowwise() += bm;
  }
  std::vector<Var<T>> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  return tape_of(x).record(
      std::move(y), std::span<const Var<T>>(inputs),
      [x, w, b, has_bias, m, k, n](Tape<T>& t, int self) {
        CMapMat<T> gy(t.grad(self).data(), m, n);
        if (t.requires_grad(x)) {
          MapMat<T>(t.grad(x).data(), m, k).noalias() +=
              gy * CMapMat<T>(t.value(w).data.data(), k, n).transpose();
        }
        if (t.requires_grad(w)) {
          MapMat<T>(t.grad(w).data(), k, n).noalias() +=
              CMapMat<T>(t.value(x).data.data(), m, k).transpose() * gy;
        }
        if (has_bias && t.requires_grad(b)) {
          Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(t.grad(b).data(), n) +=
              gy.colwise().sum();
        }
      });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  const auto& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  if (gamma.value().size() != c || beta.value().size() != c) {
    throw DimensionError("layer_norm: affine params do not match " + to_string(xv.shape));
  }
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  Tensor<T> y(xv.shape);
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto inv_std = std::make_shared<std::vector<T>>(r);
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = xv.data.data() + i * c;
    T mu = T(0);
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<T>(c);
    T var = T(0);
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(c);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const T h = (row[j] - mu) * is;
      (*xhat)[i * c + j] = h;
      y[i * c + j] = gv[j] * h + bv[j];
    }
  }
  return tape_of(x).record(
      std::move(y), {x, gamma, beta}, [x, gamma, beta, xhat, inv_std, r, c](Tape<T>& t, int self) {
        const auto& gy = t.grad(self);
        const auto& gv = t.value(gamma);
        if (t.requires_grad(gamma)) {
          auto& gg = t.grad(gamma);
          for (std::size_t i = 0; i < r * c; ++i) gg[i % c] += gy[i] * (*xhat)[i];
        }
        if (t.requires_grad(beta)) {
          auto& gb = t.grad(beta);
          for (std::size_t i = 0; i < r * c; ++i) gb[i % c] += gy[i];
        }
        if (t.requires_grad(x)) {
          auto& gx = t.grad(x);
          for (std::size_t i = 0; i < r; ++i) {
            T m1 = T(0), m2 = T(0);
            for (std::size_t j = 0; j < c; ++j) {
              const T dh = gy[i * c + j] * gv[j];
              m1 += dh;
              m2 += dh * (*xhat)[i * c + j];
            }
            m1 /= static_cast<T>(c);
            m2 /= static_cast<T>(c);
            for (std::size_t j = 0; j < c; ++j) {
              const T dh = gy[i * c + j] * gv[j];
              gx[i * c + j] += (*inv_std)[i] * (dh - m1 - (*xhat)[i * c + j] * m2);
            }
          }
        }
      });
}

template <typename T>
Var<T> softmax(Var<T> x) {
  const auto& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  Tensor<T> y(xv.shape);
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = xv.data.data() + i * c;
    T mx = *std::max_element(row, row + c);
    T s = T(0);
    for (std::size_t j = 0; j < c; ++j) s += (y[i * c + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] /= s;
  }
  return tape_of(x).record(std::move(y), {x}, [x, r, c](Tape<T>& t, int self) {
    const auto& y = t.value(self);
    const auto& gy = t.grad(self);
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < r; ++i) {
      T dot = T(0);
      for (std::size_t j = 0; j < c; ++j) dot += gy[i * c + j] * y[i * c + j];
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += y[i * c + j] * (gy[i * c + j] - dot);
    }
  });
}

template <typename T>
Var<T> log_softmax(Var<T> x) {
  const auto& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  Tensor<T> y(xv.shape);
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = xv.data.data() + i * c;
    T mx = *std::max_element(row, row + c);
    T s = T(0);
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = row[j] - lse;
  }
  return tape_of(x).record(std::move(y), {x}, [x, r, c](Tape<T>& t, int self) {
    const auto& y = t.value(self);
    const auto& gy = t.grad(self);
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < r; ++i) {
      T s = T(0);
      for (std::size_t j = 0; j < c; ++j) s += gy[i * c + j];
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += gy[i * c + j] - std::exp(y[i * c + j]) * s;
    }
  });
}

template <typename T>
Var<T> normalize_rows(Var<T> x) {
  const auto& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  Tensor<T> y(xv.shape);
  auto sums = std::make_shared<std::vector<T>>(r);
  for (std::size_t i = 0; i < r; ++i) {
    T s = T(0);
    for (std::size_t j = 0; j < c; ++j) s += xv[i * c + j];
    if (!(s > T(0))) throw std::domain_error("normalize_rows: non-positive row sum");
    (*sums)[i] = s;
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = xv[i * c + j] / s;
  }
  return tape_of(x).record(std::move(y), {x}, [x, sums, r, c](Tape<T>& t, int self) {
    const auto& y = t.value(self);
    const auto& gy = t.grad(self);
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < r; ++i) {
      T dot = T(0);
      for (std::size_t j = 0; j < c; ++j) dot += gy[i * c + j] * y[i * c + j];
      const T s = (*sums)[i];
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += (gy[i * c + j] - dot) / s;
    }
  });
}

template <typename T>
Var<T> masked_softmax(Var<T> logits, const Tensor<std::uint8_t>& mask, std::size_t axis) {
  const auto& xv = logits.value();
  if (mask.shape != xv.shape) {
    throw DimensionError("masked_softmax: mask " + to_string(mask.shape) + " vs logits " +
                         to_string(xv.shape));
  }
  if (axis >= xv.shape.size()) {
    throw DimensionError("masked_softmax: axis " + std::to_string(axis) + " out of range for " +
                         to_string(xv.shape));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= xv.shape[d];
  for (std::size_t d = axis + 1; d < xv.shape.size(); ++d) inner *= xv.shape[d];
  const std::size_t n = xv.shape[axis];

  Tensor<T> y(xv.shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = T(0);
      bool any = false;
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t idx = base + j * inner;
        if (!mask[idx]) continue;
        mx = any ? std::max(mx, xv[idx]) : xv[idx];
        any = true;
      }
      if (!any) throw std::domain_error("masked_softmax: slice has no valid entry");
      T s = T(0);
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t idx = base + j * inner;
        if (mask[idx]) s += (y[idx] = std::exp(xv[idx] - mx));
      }
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t idx = base + j * inner;
        if (mask[idx]) y[idx] /= s;
      }
    }
  }
  return tape_of(logits).record(
      std::move(y), {logits}, [logits, mask, outer, inner, n](Tape<T>& t, int self) {
        const auto& y = t.value(self);
        const auto& gy = t.grad(self);
        auto& gx = t.grad(logits);
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            T dot = T(0);
            for (std::size_t j = 0; j < n; ++j) {
              const std::size_t idx = base + j * inner;
              if (mask[idx]) dot += gy[idx] * y[idx];
            }
            for (std::size_t j = 0; j < n; ++j) {
              const std::size_t idx = base + j * inner;
              if (mask[idx]) gx[idx] += y[idx] * (gy[idx] - dot);
            }
          }
        }
      });
}

template <typename T>
Var<T> take(Var<T> x, std::vector<std::size_t> index, Shape out_shape) {
  const auto& xv = x.value();
  if (numel(out_shape) != index.size()) {
    throw DimensionError("take: " + std::to_string(index.size()) + " indices for output shape " +
                         to_string(out_shape));
  }
  Tensor<T> y(std::move(out_shape));
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= xv.size()) throw DimensionError("take: index out of range for " + to_string(xv.shape));
    y[i] = xv[index[i]];
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(index));
  return tape_of(x).record(std::move(y), {x}, [x, idx](Tape<T>& t, int self) {
    const auto& gy = t.grad(self);
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < idx->size(); ++i) gx[(*idx)[i]] += gy[i];
  });
}

template <typename T>
Var<T> gather_rows(Var<T> x, std::vector<int> rows) {
  const auto& xv = x.value();
  const std::size_t c = xv.cols(), r = xv.rows();
  Tensor<T> y(Shape{rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] == -1) continue;
    if (rows[i] < 0 || static_cast<std::size_t>(rows[i]) >= r) {
      throw DimensionError("gather_rows: row " + std::to_string(rows[i]) + " out of range for " +
                           to_string(xv.shape));
    }
    std::copy_n(xv.data.data() + rows[i] * c, c, y.data.data() + i * c);
  }
  auto idx = std::make_shared<std::vector<int>>(std::move(rows));
  return tape_of(x).record(std::move(y), {x}, [x, idx, c](Tape<T>& t, int self) {
    const auto& gy = t.grad(self);
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < idx->size(); ++i) {
      if ((*idx)[i] < 0) continue;
      T* dst = gx.data() + (*idx)[i] * c;
      const T* src = gy.data() + i * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = parts[0].value().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.value().cols() != c) {
      throw DimensionError("concat_rows: column mismatch " + to_string(parts[0].value().shape) +
                           " vs " + to_string(p.value().shape));
    }
    total += p.value().rows();
  }
  Tensor<T> y(Shape{total, c});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data.begin(), p.value().data.end(), y.data.begin() + off);
    off += p.value().size();
  }
  std::vector<Var<T>> ps(parts.begin(), parts.end());
  return tape_of(parts[0]).record(std::move(y), parts, [ps](Tape<T>& t, int self) {
    const auto& gy = t.grad(self);
    std::size_t off = 0;
    for (const auto& p : ps) {
      const std::size_t n = t.value(p).size();
      if (t.requires_grad(p)) {
        auto& g = t.grad(p);
        for (std::size_t i = 0; i < n; ++i) g[i] += gy[off + i];
      }
      off += n;
    }
  });
}

template <typename T>
Var<T> mix_rows(Var<T> w, Var<T> x) {
  const auto& wv = w.value();
  const auto& xv = x.value();
  const std::size_t r = wv.rows(), n = wv.cols(), d = xv.cols();
  if (xv.rows() != r * n) {
    throw DimensionError("mix_rows: weights " + to_string(wv.shape) + " vs values " +
                         to_string(xv.shape));
  }
  Tensor<T> y(Shape{r, d});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t h = 0; h < n; ++h) {
      const T a = wv[i * n + h];
      const T* src = xv.data.data() + (i * n + h) * d;
      for (std::size_t j = 0; j < d; ++j) y[i * d + j] += a * src[j];
    }
  return tape_of(w).record(std::move(y), {w, x}, [w, x, r, n, d](Tape<T>& t, int self) {
    const auto& gy = t.grad(self);
    if (t.requires_grad(w)) {
      const auto& xv = t.value(x);
      auto& gw = t.grad(w);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t h = 0; h < n; ++h) {
          T dot = T(0);
          const T* src = xv.data.data() + (i * n + h) * d;
          for (std::size_t j = 0; j < d; ++j) dot += gy[i * d + j] * src[j];
          gw[i * n + h] += dot;
        }
    }
    if (t.requires_grad(x)) {
      const auto& wv = t.value(w);
      auto& gx = t.grad(x);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t h = 0; h < n; ++h) {
          const T a = wv[i * n + h];
          T* dst = gx.data() + (i * n + h) * d;
          for (std::size_t j = 0; j < d; ++j) dst[j] += a * gy[i * d + j];
        }
    }
  });
}

// ---------------------------------------------------------------------------
// Attention

namespace {

template <typename T>
bool is_blocked(T v) {
  return v <= blocked_value<T>() / T(2);
}

// Forward for one group/head. Q rows are gathered into qg, etc. Returns the
// probability matrix (rows of invalid queries are zero).
template <typename T>
void attend_forward(const RowMat<T>& qg, const RowMat<T>& kg, const RowMat<T>& vg,
                    const AttentionMask<T>* mask, T inv_sqrt_d, RowMat<T>& probs, RowMat<T>& out) {
  const Eigen::Index lq = qg.rows(), lk = kg.rows();
  probs.noalias() = qg.lazyProduct(kg.transpose()) * inv_sqrt_d;
  for (Eigen::Index i = 0; i < lq; ++i) {
    const bool valid = !mask || mask->query_valid.empty() || mask->query_valid[i];
    if (!valid) {
      probs.row(i).setZero();
      continue;
    }
    bool any = false;
    if (mask) {
      for (Eigen::Index j = 0; j < lk; ++j) {
        const T add = mask->additive[i * lk + j];
        probs(i, j) += add;
        if (!is_blocked(add)) any = true;
      }
      if (!any) throw std::domain_error("attention: query row " + std::to_string(i) + " is fully blocked");
    }
    const T mx = probs.row(i).maxCoeff();
    T s = T(0);
    for (Eigen::Index j = 0; j < lk; ++j) s += (probs(i, j) = std::exp(probs(i, j) - mx));
    probs.row(i) /= s;
  }
  out.noalias() = probs.lazyProduct(vg);
}

template <typename T>
void check_mask(const AttentionMask<T>& m, std::size_t lq, std::size_t lk) {
  if (m.queries != lq || m.keys != lk || m.additive.size() != lq * lk ||
      (!m.query_valid.empty() && m.query_valid.size() != lq)) {
    throw DimensionError("attention: mask [" + std::to_string(m.queries) + " x " +
                         std::to_string(m.keys) + "] does not match group [" + std::to_string(lq) +
                         " x " + std::to_string(lk) + "]");
  }
}

}  // namespace

template <typename T>
Var<T> multi_head_attention(Var<T> q, Var<T> k, Var<T> v,
                            std::shared_ptr<const AttentionLayout<T>> layout, std::size_t heads) {
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  const std::size_t d = qv.cols();
  if (kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows()) {
    throw DimensionError("attention: q " + to_string(qv.shape) + ", k " + to_string(kv.shape) +
                         ", v " + to_string(vv.shape) + " are incompatible");
  }
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(dh));
  for (const auto& g : layout->groups) {
    if (g.mask >= 0) check_mask(layout->masks.at(g.mask), g.query_rows.size(), g.key_rows.size());
    for (int r : g.query_rows)
      if (r < 0 || static_cast<std::size_t>(r) >= qv.rows()) throw DimensionError("attention: query row out of range");
    for (int r : g.key_rows)
      if (r < 0 || static_cast<std::size_t>(r) >= kv.rows()) throw DimensionError("attention: key row out of range");
  }

  Tensor<T> y(Shape{qv.rows(), d});
  auto saved = std::make_shared<std::vector<RowMat<T>>>();
  saved->reserve(layout->groups.size() * heads);
  RowMat<T> qg, kg, vg, out;
  for (const auto& g : layout->groups) {
    const AttentionMask<T>* mask = g.mask >= 0 ? &layout->masks[g.mask] : nullptr;
    const Eigen::Index lq = g.query_rows.size(), lk = g.key_rows.size();
    for (std::size_t h = 0; h < heads; ++h) {
      qg.resize(lq, dh);
      kg.resize(lk, dh);
      vg.resize(lk, dh);
      for (Eigen::Index i = 0; i < lq; ++i)
        qg.row(i) = CMapMat<T>(qv.data.data() + g.query_rows[i] * d + h * dh, 1, dh);
      for (Eigen::Index j = 0; j < lk; ++j) {
        kg.row(j) = CMapMat<T>(kv.data.data() + g.key_rows[j] * d + h * dh, 1, dh);
        vg.row(j) = CMapMat<T>(vv.data.data() + g.key_rows[j] * d + h * dh, 1, dh);
      }
      RowMat<T> probs(lq, lk);
      attend_forward(qg, kg, vg, mask, inv_sqrt_d, probs, out);
      for (Eigen::Index i = 0; i < lq; ++i)
        MapMat<T>(y.data.data() + g.query_rows[i] * d + h * dh, 1, dh) += out.row(i);
      if (q.tape->recording()) saved->push_back(std::move(probs));
    }
  }

  return tape_of(q).record(
      std::move(y), {q, k, v}, [q, k, v, layout, saved, heads, d, dh, inv_sqrt_d](Tape<T>& t, int self) {
        const auto& gy = t.grad(self);
        const auto& qv = t.value(q);
        const auto& kv = t.value(k);
        const auto& vv = t.value(v);
        const bool need_q = t.requires_grad(q), need_k = t.requires_grad(k), need_v = t.requires_grad(v);
        T* gq = need_q ? t.grad(q).data() : nullptr;
        T* gk = need_k ? t.grad(k).data() : nullptr;
        T* gv = need_v ? t.grad(v).data() : nullptr;
        RowMat<T> qg, kg, vg, dout, dp, ds, tmp;
        std::size_t slot = 0;
        for (const auto& g : layout->groups) {
          const Eigen::Index lq = g.query_rows.size(), lk = g.key_rows.size();
          for (std::size_t h = 0; h < heads; ++h, ++slot) {
            const RowMat<T>& p = (*saved)[slot];
            qg.resize(lq, dh);
            kg.resize(lk, dh);
            vg.resize(lk, dh);
            dout.resize(lq, dh);
            for (Eigen::Index i = 0; i < lq; ++i) {
              qg.row(i) = CMapMat<T>(qv.data.data() + g.query_rows[i] * d + h * dh, 1, dh);
              dout.row(i) = CMapMat<T>(gy.data() + g.query_rows[i] * d + h * dh, 1, dh);
            }
            for (Eigen::Index j = 0; j < lk; ++j) {
              kg.row(j) = CMapMat<T>(kv.data.data() + g.key_rows[j] * d + h * dh, 1, dh);
              vg.row(j) = CMapMat<T>(vv.data.data() + g.key_rows[j] * d + h * dh, 1, dh);
            }
            if (gv) {
              tmp.noalias() = p.transpose().lazyProduct(dout);
              for (Eigen::Index j = 0; j < lk; ++j)
                MapMat<T>(gv + g.key_rows[j] * d + h * dh, 1, dh) += tmp.row(j);
            }
            if (!gq && !gk) continue;
            dp.noalias() = dout.lazyProduct(vg.transpose());
            ds.resize(lq, lk);
            for (Eigen::Index i = 0; i < lq; ++i) {
              const T dot = (dp.row(i).array() * p.row(i).array()).sum();
              ds.row(i) = (p.row(i).array() * (dp.row(i).array() - dot)) * inv_sqrt_d;
            }
            if (gq) {
              tmp.noalias() = ds.lazyProduct(kg);
              for (Eigen::Index i = 0; i < lq; ++i)
                MapMat<T>(gq + g.query_rows[i] * d + h * dh, 1, dh) += tmp.row(i);
            }
            if (gk) {
              tmp.noalias() = ds.transpose().lazyProduct(qg);
              for (Eigen::Index j = 0; j < lk; ++j)
                MapMat<T>(gk + g.key_rows[j] * d + h * dh, 1, dh) += tmp.row(j);
            }
          }
        }
      });
}

template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, const Tensor<T>& additive_mask) {
  const std::size_t lq = q.value().rows(), lk = k.value().rows();
  if (additive_mask.size() != lq * lk) {
    throw DimensionError("attention: mask " + to_string(additive_mask.shape) + " vs q " +
                         to_string(q.value().shape) + ", k " + to_string(k.value().shape));
  }
  auto layout = std::make_shared<AttentionLayout<T>>();
  AttentionGroup g;
  g.query_rows.resize(lq);
  g.key_rows.resize(lk);
  std::iota(g.query_rows.begin(), g.query_rows.end(), 0);
  std::iota(g.key_rows.begin(), g.key_rows.end(), 0);
  g.mask = 0;
  AttentionMask<T> m;
  m.queries = lq;
  m.keys = lk;
  m.additive.assign(additive_mask.data.begin(), additive_mask.data.end());
  layout->masks.push_back(std::move(m));
  layout->groups.push_back(std::move(g));
  return multi_head_attention(q, k, v, std::shared_ptr<const AttentionLayout<T>>(layout), 1);
}

#define MOH_INSTANTIATE_OPS(T)                                                                    \
  template Var<T> add<T>(Var<T>, Var<T>);                                                         \
  template Var<T> sub<T>(Var<T>, Var<T>);                                                         \
  template Var<T> mul<T>(Var<T>, Var<T>);                                                         \
  template Var<T> scale<T>(Var<T>, T);                                                            \
  template Var<T> add_row<T>(Var<T>, Var<T>);                                                     \
  template Var<T> square<T>(Var<T>);                                                              \
  template Var<T> abs<T>(Var<T>);                                                                 \
  template Var<T> log<T>(Var<T>);                                                                 \
  template Var<T> exp<T>(Var<T>);                                                                 \
  template Var<T> gelu<T>(Var<T>);                                                                \
  template Var<T> reshape<T>(Var<T>, Shape);                                                      \
  template Var<T> sum<T>(Var<T>);                                                                 \
  template Var<T> mean<T>(Var<T>);                                                                \
  template Var<T> weighted_sum<T>(Var<T>, const Tensor<T>&);                                      \
  template Var<T> grouped_weighted_sum<T>(Var<T>, const Tensor<T>&, std::span<const int>,         \
                                          std::size_t);                                           \
  template Var<T> linear_combination<T>(std::span<const Var<T>>, std::span<const T>);            \
  template Var<T> matmul<T>(Var<T>, Var<T>);                                                      \
  template Var<T> linear<T>(Var<T>, Var<T>, Var<T>);                                              \
  template Var<T> layer_norm<T>(Var<T>, Var<T>, Var<T>, T);                                       \
  template Var<T> softmax<T>(Var<T>);                                                             \
  template Var<T> log_softmax<T>(Var<T>);                                                         \
  template Var<T> normalize_rows<T>(Var<T>);                                                      \
  template Var<T> masked_softmax<T>(Var<T>, const Tensor<std::uint8_t>&, std::size_t);           \
  template Var<T> take<T>(Var<T>, std::vector<std::size_t>, Shape);                               \
  template Var<T> gather_rows<T>(Var<T>, std::vector<int>);                                       \
  template Var<T> concat_rows<T>(std::span<const Var<T>>);                                        \
  template Var<T> mix_rows<T>(Var<T>, Var<T>);                                                    \
  template Var<T> attention<T>(Var<T>, Var<T>, Var<T>, const Tensor<T>&);                         \
  template Var<T> multi_head_attention<T>(Var<T>, Var<T>, Var<T>,                                 \
                                          std::shared_ptr<const AttentionLayout<T>>, std::size_t);

MOH_INSTANTIATE_OPS(float)
MOH_INSTANTIATE_OPS(double)

}  // namespace moh::nc
