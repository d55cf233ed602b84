#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lrc/error.hpp"

namespace lrc {

// Dense row-major matrix. The universal numeric carrier of the library.
template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("matrix data length " + std::to_string(data_.size()) +
                           " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  static Matrix from_rows(const std::vector<std::vector<T>>& rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.front().size();
    Matrix m(r, c);
    for (std::size_t i = 0; i < r; ++i) {
      if (rows[i].size() != c) throw DimensionError("ragged row list");
      std::copy(rows[i].begin(), rows[i].end(), m.row(i).begin());
    }
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  std::span<T> flat() noexcept { return data_; }
  std::span<const T> flat() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Matrix<U> cast() const {
    Matrix<U> out(rows_, cols_);
    std::transform(data_.begin(), data_.end(), out.flat().begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

template <typename T>
Matrix<T> transpose(const Matrix<T>& a) {
  Matrix<T> t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                         " * " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  Matrix<T> c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const T aik = a(i, k);
      if (aik == T(0)) continue;
      auto brow = b.row(k);
      for (std::size_t j = 0; j < out.size(); ++j) out[j] += aik * brow[j];
    }
  }
  return c;
}

template <typename T>
std::vector<T> matvec(const Matrix<T>& a, std::span<const T> x) {
  if (a.cols() != x.size()) throw DimensionError("matvec: dimension mismatch");
  std::vector<T> y(a.rows(), T(0));
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = a.row(i);
    T acc = 0;
    for (std::size_t j = 0; j < r.size(); ++j) acc += r[j] * x[j];
    y[i] = acc;
  }
  return y;
}

template <typename T>
double frobenius_norm(const Matrix<T>& a) {
  long double acc = 0;
  for (T v : a.flat()) acc += static_cast<long double>(v) * v;
  return static_cast<double>(std::sqrt(acc));
}

template <typename T>
double frobenius_distance(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("frobenius_distance");
  long double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const long double d = static_cast<long double>(a.flat()[i]) - b.flat()[i];
    acc += d * d;
  }
  return static_cast<double>(std::sqrt(acc));
}

template <typename T>
bool all_finite(std::span<const T> v) {
  return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition (cyclic Jacobi) and thin SVD.
// ---------------------------------------------------------------------------

struct EigenResult {
  std::vector<double> values;  // non-increasing
  Matrix<double> vectors;      // column i pairs with values[i]
};

struct SvdResult {
  Matrix<double> u;            // rows x r
  std::vector<double> singular_values;
  Matrix<double> v;            // cols x r
};

namespace detail {

// Largest-magnitude component of each column made positive. Near-ties within
// 1e-9 relative resolve to the lowest index so that rounding cannot flip signs.
inline void fix_column_signs(Matrix<double>& vecs, std::size_t ncols) {
  for (std::size_t c = 0; c < ncols; ++c) {
    double max_mag = 0;
    for (std::size_t r = 0; r < vecs.rows(); ++r) max_mag = std::max(max_mag, std::abs(vecs(r, c)));
    if (max_mag == 0) continue;
    for (std::size_t r = 0; r < vecs.rows(); ++r) {
      if (std::abs(vecs(r, c)) >= max_mag * (1.0 - 1e-9)) {
        if (vecs(r, c) < 0) {
          for (std::size_t q = 0; q < vecs.rows(); ++q) vecs(q, c) = -vecs(q, c);
        }
        break;
      }
    }
  }
}

inline std::vector<std::size_t> descending_order(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  return idx;
}

}  // namespace detail

inline EigenResult sym_eigen(const Matrix<double>& input) {
  if (input.rows() != input.cols()) {
    throw DimensionError("sym_eigen: matrix is " + std::to_string(input.rows()) + "x" +
                         std::to_string(input.cols()) + ", expected square");
  }
  if (!all_finite(input.flat())) throw NumericError("sym_eigen: non-finite entry");

  const std::size_t n = input.rows();
  Matrix<double> a(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a(i, j) = 0.5 * (input(i, j) + input(j, i));
  Matrix<double> v = Matrix<double>::identity(n);

  const double norm = frobenius_norm(a);
  constexpr int kMaxSweeps = 100;
  for (int sweep = 0; sweep < kMaxSweeps && norm > 0; ++sweep) {
    double off = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) off += a(i, j) * a(i, j);
    if (std::sqrt(off) < 1e-12 * norm) break;

    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        // A <- J^T A J, rotating rows/cols p and q.
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<double> diag(n);
  for (std::size_t i = 0; i < n; ++i) diag[i] = a(i, i);
  const auto order = detail::descending_order(diag);

  EigenResult out{std::vector<double>(n), Matrix<double>(n, n)};
  for (std::size_t c = 0; c < n; ++c) {
    out.values[c] = diag[order[c]];
    for (std::size_t r = 0; r < n; ++r) out.vectors(r, c) = v(r, order[c]);
  }
  detail::fix_column_signs(out.vectors, n);
  return out;
}

namespace detail {

// Thin SVD for rows >= cols via the Gram matrix M^T M.
inline SvdResult svd_tall(const Matrix<double>& m) {
  const std::size_t rows = m.rows();
  const std::size_t cols = m.cols();
  Matrix<double> gram(cols, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    auto mr = m.row(r);
    for (std::size_t i = 0; i < cols; ++i) {
      const double mi = mr[i];
      if (mi == 0.0) continue;
      auto g = gram.row(i);
      for (std::size_t j = i; j < cols; ++j) g[j] += mi * mr[j];
    }
  }
  for (std::size_t i = 0; i < cols; ++i)
    for (std::size_t j = 0; j < i; ++j) gram(i, j) = gram(j, i);

  EigenResult eig = sym_eigen(gram);

  // sigma_i = ||M v_i|| is more accurate than sqrt(lambda_i) for small values.
  Matrix<double> mv = matmul(m, eig.vectors);
  std::vector<double> sigma(cols);
  for (std::size_t c = 0; c < cols; ++c) {
    long double acc = 0;
    for (std::size_t r = 0; r < rows; ++r) acc += static_cast<long double>(mv(r, c)) * mv(r, c);
    sigma[c] = static_cast<double>(std::sqrt(acc));
  }
  const auto order = descending_order(sigma);

  SvdResult out{Matrix<double>(rows, cols), std::vector<double>(cols), Matrix<double>(cols, cols)};
  const double smax = cols == 0 ? 0.0 : sigma[order[0]];
  for (std::size_t c = 0; c < cols; ++c) {
    const std::size_t src = order[c];
    out.singular_values[c] = sigma[src];
    for (std::size_t r = 0; r < cols; ++r) out.v(r, c) = eig.vectors(r, src);
  }

  // Left vectors: normalized M v_i, re-orthogonalized (modified Gram-Schmidt, two
  // passes). Columns with negligible sigma are completed from canonical vectors.
  const double tiny = smax * 1e-14;
  std::size_t next_canonical = 0;
  for (std::size_t c = 0; c < cols; ++c) {
    std::vector<double> col(rows, 0.0);
    const bool from_data = out.singular_values[c] > tiny && out.singular_values[c] > 0;
    if (from_data) {
      const std::size_t src = order[c];
      for (std::size_t r = 0; r < rows; ++r) col[r] = mv(r, src) / out.singular_values[c];
    }
    auto orthogonalize = [&](std::vector<double>& x) {
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t p = 0; p < c; ++p) {
          double dot = 0;
          for (std::size_t r = 0; r < rows; ++r) dot += out.u(r, p) * x[r];
          for (std::size_t r = 0; r < rows; ++r) x[r] -= dot * out.u(r, p);
        }
      }
      double nrm = 0;
      for (double xv : x) nrm += xv * xv;
      return std::sqrt(nrm);
    };
    double nrm = from_data ? orthogonalize(col) : 0.0;
    if (!from_data) {
      while (next_canonical < rows) {
        std::fill(col.begin(), col.end(), 0.0);
        col[next_canonical++] = 1.0;
        nrm = orthogonalize(col);
        if (nrm > 0.5) break;
      }
    }
    for (std::size_t r = 0; r < rows; ++r) out.u(r, c) = col[r] / nrm;
  }
  return out;
}

}  // namespace detail

inline SvdResult svd_thin(const Matrix<double>& m) {
  if (!all_finite(m.flat())) throw NumericError("svd_thin: non-finite entry");
  // v carries the sign convention (eigenvectors of the Gram matrix); u follows.
  if (m.rows() >= m.cols()) return detail::svd_tall(m);
  SvdResult t = detail::svd_tall(transpose(m));
  SvdResult out{std::move(t.v), std::move(t.singular_values), std::move(t.u)};
  // Sign convention on v (right vectors); u follows.
  for (std::size_t c = 0; c < out.singular_values.size(); ++c) {
    double max_mag = 0;
    for (std::size_t r = 0; r < out.v.rows(); ++r) max_mag = std::max(max_mag, std::abs(out.v(r, c)));
    for (std::size_t r = 0; r < out.v.rows(); ++r) {
      if (std::abs(out.v(r, c)) >= max_mag * (1.0 - 1e-9)) {
        if (out.v(r, c) < 0) {
          for (std::size_t q = 0; q < out.v.rows(); ++q) out.v(q, c) = -out.v(q, c);
          for (std::size_t q = 0; q < out.u.rows(); ++q) out.u(q, c) = -out.u(q, c);
        }
        break;
      }
    }
  }
  return out;
}

struct LowRankFactors {
  Matrix<double> left;   // d1 x k, U_k S_k^{1/2}
  Matrix<double> right;  // k x d2, S_k^{1/2} V_k^T
};

inline LowRankFactors low_rank_factors_svd(const Matrix<double>& m, std::size_t k) {
  const std::size_t full = std::min(m.rows(), m.cols());
  if (k < 1 || k > full) {
    throw RankError("low_rank_factors_svd: rank " + std::to_string(k) + " outside [1, " +
                    std::to_string(full) + "]");
  }
  const SvdResult svd = svd_thin(m);
  LowRankFactors f{Matrix<double>(m.rows(), k), Matrix<double>(k, m.cols())};
  for (std::size_t c = 0; c < k; ++c) {
    const double root = std::sqrt(svd.singular_values[c]);
    for (std::size_t r = 0; r < m.rows(); ++r) f.left(r, c) = svd.u(r, c) * root;
    for (std::size_t j = 0; j < m.cols(); ++j) f.right(c, j) = root * svd.v(j, c);
  }
  return f;
}

// ---------------------------------------------------------------------------
// Batched kernels used by the model. All loops run over contiguous rows so that
// the compiler can vectorize without reassociating reductions; results are
// therefore bit-reproducible for a given build.
// ---------------------------------------------------------------------------
namespace kernels {

// out(n x o) = x(n x i) * w_t(i x o) + bias
template <typename T>
void affine(const Matrix<T>& x, const Matrix<T>& w_t, std::span<const T> bias, Matrix<T>& out) {
  const std::size_t n = x.rows();
  const std::size_t in = w_t.rows();
  const std::size_t o = w_t.cols();
  out = Matrix<T>(n, o);
  for (std::size_t s = 0; s < n; ++s) {
    T* dst = out.row(s).data();
    for (std::size_t j = 0; j < o; ++j) dst[j] = bias.empty() ? T(0) : bias[j];
    const T* xs = x.row(s).data();
    for (std::size_t k = 0; k < in; ++k) {
      const T a = xs[k];
      if (a == T(0)) continue;
      const T* wr = w_t.row(k).data();
      for (std::size_t j = 0; j < o; ++j) dst[j] += a * wr[j];
    }
  }
}

// grad_x(n x i) = grad_out(n x o) * w(o x i)
template <typename T>
void backprop_input(const Matrix<T>& grad_out, const Matrix<T>& w, Matrix<T>& grad_x) {
  const std::size_t n = grad_out.rows();
  const std::size_t o = w.rows();
  const std::size_t in = w.cols();
  grad_x = Matrix<T>(n, in);
  for (std::size_t s = 0; s < n; ++s) {
    T* dst = grad_x.row(s).data();
    const T* g = grad_out.row(s).data();
    for (std::size_t k = 0; k < o; ++k) {
      const T a = g[k];
      if (a == T(0)) continue;
      const T* wr = w.row(k).data();
      for (std::size_t j = 0; j < in; ++j) dst[j] += a * wr[j];
    }
  }
}

// grad_w(o x i) += grad_out^T(o x n) * x(n x i); grad_b += column sums of grad_out
template <typename T>
void accumulate_weight_grad(const Matrix<T>& grad_out, const Matrix<T>& x, Matrix<T>& grad_w,
                            std::span<T> grad_b) {
  const std::size_t n = grad_out.rows();
  const std::size_t o = grad_out.cols();
  const std::size_t in = x.cols();
  for (std::size_t s = 0; s < n; ++s) {
    const T* g = grad_out.row(s).data();
    const T* xs = x.row(s).data();
    for (std::size_t k = 0; k < o; ++k) {
      const T a = g[k];
      if (a == T(0)) continue;
      T* dst = grad_w.row(k).data();
      for (std::size_t j = 0; j < in; ++j) dst[j] += a * xs[j];
      if (!grad_b.empty()) grad_b[k] += a;
    }
  }
}

}  // namespace kernels

}  // namespace lrc
