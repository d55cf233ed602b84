#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "lrc/error.hpp"
#include "lrc/linalg.hpp"

namespace lrc {

// One TT-core of a reshaped matrix, shape (rank_in, rows, cols, rank_out),
// stored row-major with rank_out varying fastest.
template <typename T>
struct TTCore {
  std::size_t rank_in = 1;
  std::size_t rows = 1;
  std::size_t cols = 1;
  std::size_t rank_out = 1;
  std::vector<T> data;

  std::size_t index(std::size_t a, std::size_t i, std::size_t j, std::size_t b) const noexcept {
    return ((a * rows + i) * cols + j) * rank_out + b;
  }
  T& at(std::size_t a, std::size_t i, std::size_t j, std::size_t b) noexcept { return data[index(a, i, j, b)]; }
  T at(std::size_t a, std::size_t i, std::size_t j, std::size_t b) const noexcept { return data[index(a, i, j, b)]; }
};

template <typename T>
struct TTCores {
  std::vector<TTCore<T>> cores;
  std::vector<std::size_t> row_factors;
  std::vector<std::size_t> col_factors;
  std::vector<std::size_t> ranks;  // r_0 .. r_k, r_0 = r_k = 1
  std::size_t rows = 0;            // unpadded matrix shape
  std::size_t cols = 0;

  std::size_t padded_rows() const {
    return std::accumulate(row_factors.begin(), row_factors.end(), std::size_t{1}, std::multiplies<>());
  }
  std::size_t padded_cols() const {
    return std::accumulate(col_factors.begin(), col_factors.end(), std::size_t{1}, std::multiplies<>());
  }
  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& c : cores) n += c.data.size();
    return n;
  }

  template <typename U>
  TTCores<U> cast() const {
    TTCores<U> out;
    out.row_factors = row_factors;
    out.col_factors = col_factors;
    out.ranks = ranks;
    out.rows = rows;
    out.cols = cols;
    for (const auto& c : cores) {
      TTCore<U> d{c.rank_in, c.rows, c.cols, c.rank_out, std::vector<U>(c.data.size())};
      for (std::size_t i = 0; i < c.data.size(); ++i) d.data[i] = static_cast<U>(c.data[i]);
      out.cores.push_back(std::move(d));
    }
    return out;
  }
};

inline constexpr std::size_t kUnboundedRank = std::numeric_limits<std::size_t>::max();

// TT-SVD sweep over a matrix reshaped into (m_1 n_1) x ... x (m_k n_k). The
// matrix is zero-padded up to the factor products. Bond ranks are
// min(max_rank, numerical rank) where singular values below 1e-13 of the
// leading one are dropped; an all-zero matrix yields rank-1 zero cores.
inline TTCores<double> tt_decompose_matrix(const Matrix<double>& m, const std::vector<std::size_t>& row_factors,
                                           const std::vector<std::size_t>& col_factors, std::size_t max_rank) {
  if (row_factors.empty() || col_factors.empty()) throw ShapeError("tt_decompose_matrix: empty factor list");
  if (row_factors.size() != col_factors.size()) {
    throw ShapeError("tt_decompose_matrix: row and column factor lists differ in length");
  }
  if (max_rank < 1) throw RankError("tt_decompose_matrix: max_rank must be >= 1");
  for (std::size_t f : row_factors)
    if (f == 0) throw ShapeError("tt_decompose_matrix: zero row factor");
  for (std::size_t f : col_factors)
    if (f == 0) throw ShapeError("tt_decompose_matrix: zero column factor");
  if (!all_finite(m.flat())) throw NumericError("tt_decompose_matrix: non-finite entry");

  TTCores<double> tt;
  tt.row_factors = row_factors;
  tt.col_factors = col_factors;
  tt.rows = m.rows();
  tt.cols = m.cols();
  const std::size_t prow = tt.padded_rows();
  const std::size_t pcol = tt.padded_cols();
  if (prow < m.rows() || pcol < m.cols()) {
    throw ShapeError("tt_decompose_matrix: factor products " + std::to_string(prow) + "x" + std::to_string(pcol) +
                     " smaller than matrix " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
  const std::size_t k = row_factors.size();

  // Interleave row and column digits: tensor index (i1 j1)(i2 j2)...(ik jk).
  std::vector<double> tensor(prow * pcol, 0.0);
  std::vector<std::size_t> idigits(k), jdigits(k);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    std::size_t rem = i;
    for (std::size_t p = k; p-- > 0;) {
      idigits[p] = rem % row_factors[p];
      rem /= row_factors[p];
    }
    for (std::size_t j = 0; j < m.cols(); ++j) {
      std::size_t remj = j;
      for (std::size_t p = k; p-- > 0;) {
        jdigits[p] = remj % col_factors[p];
        remj /= col_factors[p];
      }
      std::size_t lin = 0;
      for (std::size_t p = 0; p < k; ++p) lin = lin * (row_factors[p] * col_factors[p]) + idigits[p] * col_factors[p] + jdigits[p];
      tensor[lin] = m(i, j);
    }
  }

  auto zero_cores = [&] {
    tt.cores.clear();
    tt.ranks.assign(k + 1, 1);
    for (std::size_t p = 0; p < k; ++p) {
      tt.cores.push_back(TTCore<double>{1, row_factors[p], col_factors[p], 1,
                                        std::vector<double>(row_factors[p] * col_factors[p], 0.0)});
    }
    return tt;
  };

  tt.ranks.assign(1, 1);
  std::size_t rank_prev = 1;
  std::size_t rest = prow * pcol;
  Matrix<double> carry(1, rest, std::move(tensor));
  for (std::size_t p = 0; p + 1 < k; ++p) {
    const std::size_t mode = row_factors[p] * col_factors[p];
    rest /= mode;
    Matrix<double> unfold(rank_prev * mode, rest, std::move(carry.storage()));
    const SvdResult svd = svd_thin(unfold);
    const double lead = svd.singular_values.empty() ? 0.0 : svd.singular_values[0];
    if (lead == 0.0) return zero_cores();
    std::size_t numerical = 0;
    for (double s : svd.singular_values)
      if (s > 1e-13 * lead) ++numerical;
    const std::size_t r = std::max<std::size_t>(1, std::min(max_rank, numerical));

    TTCore<double> core{rank_prev, row_factors[p], col_factors[p], r, std::vector<double>(rank_prev * mode * r)};
    for (std::size_t row = 0; row < rank_prev * mode; ++row)
      for (std::size_t b = 0; b < r; ++b) core.data[row * r + b] = svd.u(row, b);
    tt.cores.push_back(std::move(core));

    carry = Matrix<double>(r, rest);
    for (std::size_t b = 0; b < r; ++b)
      for (std::size_t c = 0; c < rest; ++c) carry(b, c) = svd.singular_values[b] * svd.v(c, b);
    tt.ranks.push_back(r);
    rank_prev = r;
  }
  const std::size_t last_mode = row_factors[k - 1] * col_factors[k - 1];
  if (k == 1 && frobenius_norm(carry) == 0.0) return zero_cores();
  TTCore<double> last{rank_prev, row_factors[k - 1], col_factors[k - 1], 1, std::move(carry.storage())};
  last.data.resize(rank_prev * last_mode);
  tt.cores.push_back(std::move(last));
  tt.ranks.push_back(1);
  return tt;
}

// Reusable scratch for row contraction.
struct TTWorkspace {
  std::vector<double> acc;
  std::vector<double> next;
  std::vector<std::size_t> digits;
};

// Contracts the cores for one row of the reconstructed (padded) matrix and writes
// the first `out.size()` columns.
template <typename T>
void tt_reconstruct_row_into(const TTCores<T>& tt, std::size_t row_index, std::span<T> out, TTWorkspace& ws) {
  const std::size_t k = tt.cores.size();
  if (row_index >= tt.padded_rows()) {
    throw DataError("tt_reconstruct_row: row " + std::to_string(row_index) + " outside padded range " +
                    std::to_string(tt.padded_rows()));
  }
  ws.digits.resize(k);
  std::size_t rem = row_index;
  for (std::size_t p = k; p-- > 0;) {
    ws.digits[p] = rem % tt.row_factors[p];
    rem /= tt.row_factors[p];
  }
  // acc has shape (prefix columns, rank).
  ws.acc.assign(1, 1.0);
  std::size_t width = 1;
  std::size_t rank = 1;
  for (std::size_t p = 0; p < k; ++p) {
    const TTCore<T>& core = tt.cores[p];
    const std::size_t i = ws.digits[p];
    const std::size_t nc = core.cols;
    const std::size_t rout = core.rank_out;
    ws.next.assign(width * nc * rout, 0.0);
    for (std::size_t w = 0; w < width; ++w) {
      for (std::size_t a = 0; a < rank; ++a) {
        const double lhs = ws.acc[w * rank + a];
        if (lhs == 0.0) continue;
        const T* slice = core.data.data() + core.index(a, i, 0, 0);
        double* dst = ws.next.data() + w * nc * rout;
        for (std::size_t jb = 0; jb < nc * rout; ++jb) dst[jb] += lhs * static_cast<double>(slice[jb]);
      }
    }
    ws.acc.swap(ws.next);
    width *= nc;
    rank = rout;
  }
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = static_cast<T>(ws.acc[j]);
}

template <typename T>
std::vector<T> tt_reconstruct_row(const TTCores<T>& tt, std::size_t row_index) {
  std::vector<T> out(tt.cols);
  TTWorkspace ws;
  tt_reconstruct_row_into(tt, row_index, std::span<T>(out), ws);
  return out;
}

template <typename T>
Matrix<T> tt_reconstruct(const TTCores<T>& tt) {
  Matrix<T> out(tt.rows, tt.cols);
  TTWorkspace ws;
  for (std::size_t r = 0; r < tt.rows; ++r) tt_reconstruct_row_into(tt, r, out.row(r), ws);
  return out;
}

// Accumulates d(row)/d(core) * grad_row into core_grads for one looked-up row.
// core_grads must mirror tt.cores in shape.
template <typename T>
void tt_row_backward(const TTCores<T>& tt, std::size_t row_index, std::span<const T> grad_row,
                     std::vector<TTCore<T>>& core_grads) {
  const std::size_t k = tt.cores.size();
  std::vector<std::size_t> digits(k);
  std::size_t rem = row_index;
  for (std::size_t p = k; p-- > 0;) {
    digits[p] = rem % tt.row_factors[p];
    rem /= tt.row_factors[p];
  }
  // Padded gradient over all padded columns (padding columns receive zero).
  const std::size_t pcols = tt.padded_cols();
  std::vector<double> g(pcols, 0.0);
  for (std::size_t j = 0; j < grad_row.size(); ++j) g[j] = grad_row[j];

  // left[p]: (prod n_<p) x r_p ; right[p]: r_p x (prod n_>=p)
  std::vector<std::vector<double>> left(k + 1), right(k + 1);
  std::vector<std::size_t> lw(k + 1, 1), rw(k + 1, 1);
  left[0] = {1.0};
  for (std::size_t p = 0; p < k; ++p) {
    const TTCore<T>& c = tt.cores[p];
    lw[p + 1] = lw[p] * c.cols;
    left[p + 1].assign(lw[p + 1] * c.rank_out, 0.0);
    for (std::size_t w = 0; w < lw[p]; ++w)
      for (std::size_t a = 0; a < c.rank_in; ++a) {
        const double l = left[p][w * c.rank_in + a];
        if (l == 0.0) continue;
        for (std::size_t j = 0; j < c.cols; ++j)
          for (std::size_t b = 0; b < c.rank_out; ++b)
            left[p + 1][(w * c.cols + j) * c.rank_out + b] += l * c.at(a, digits[p], j, b);
      }
  }
  right[k] = {1.0};
  for (std::size_t p = k; p-- > 0;) {
    const TTCore<T>& c = tt.cores[p];
    rw[p] = c.cols * rw[p + 1];
    right[p].assign(c.rank_in * rw[p], 0.0);
    for (std::size_t a = 0; a < c.rank_in; ++a)
      for (std::size_t j = 0; j < c.cols; ++j)
        for (std::size_t b = 0; b < c.rank_out; ++b) {
          const double cv = c.at(a, digits[p], j, b);
          if (cv == 0.0) continue;
          for (std::size_t w = 0; w < rw[p + 1]; ++w)
            right[p][a * rw[p] + j * rw[p + 1] + w] += cv * right[p + 1][b * rw[p + 1] + w];
        }
  }
  // column index = prefix * (n_p * suffix) + j * suffix + suffix_index
  for (std::size_t p = 0; p < k; ++p) {
    const TTCore<T>& c = tt.cores[p];
    TTCore<T>& gc = core_grads[p];
    for (std::size_t pre = 0; pre < lw[p]; ++pre)
      for (std::size_t j = 0; j < c.cols; ++j)
        for (std::size_t suf = 0; suf < rw[p + 1]; ++suf) {
          const double gv = g[(pre * c.cols + j) * rw[p + 1] + suf];
          if (gv == 0.0) continue;
          for (std::size_t a = 0; a < c.rank_in; ++a) {
            const double l = left[p][pre * c.rank_in + a] * gv;
            if (l == 0.0) continue;
            for (std::size_t b = 0; b < c.rank_out; ++b)
              gc.at(a, digits[p], j, b) += static_cast<T>(l * right[p + 1][b * rw[p + 1] + suf]);
          }
        }
  }
}

// Splits n into `parts` factors whose product is >= n, preferring an exact
// factorization with the smallest maximal factor (ties go to the larger
// minimal factor); falls back to near-equal
// padded factors when n has no balanced divisors.
inline std::vector<std::size_t> tt_auto_factors(std::size_t n, std::size_t parts) {
  if (parts == 0) throw ShapeError("tt_auto_factors: zero parts");
  if (n == 0) throw ShapeError("tt_auto_factors: zero extent");
  std::size_t root = 1;
  while (true) {
    std::size_t prod = 1;
    for (std::size_t p = 0; p < parts; ++p) prod *= root;
    if (prod >= n) break;
    ++root;
  }
  std::vector<std::size_t> best;
  std::size_t best_max = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> cur;
  std::function<void(std::size_t, std::size_t, std::size_t)> search = [&](std::size_t remaining, std::size_t left,
                                                                          std::size_t min_factor) {
    if (left == 1) {
      if (remaining < min_factor) return;
      cur.push_back(remaining);
      const std::size_t mx = *std::max_element(cur.begin(), cur.end());
      if (mx < best_max || (mx == best_max && cur.front() > best.front())) {
        best_max = mx;
        best = cur;
      }
      cur.pop_back();
      return;
    }
    for (std::size_t f = min_factor; f <= remaining; ++f) {
      if (f > best_max) break;
      if (remaining % f != 0) continue;
      cur.push_back(f);
      search(remaining / f, left - 1, f);
      cur.pop_back();
      if (f == remaining) break;
    }
  };
  // Unit factors only when n is too small to avoid them.
  search(n, parts, n >= (std::size_t{1} << parts) ? 2 : 1);
  if (!best.empty() && best_max <= 2 * root) return best;

  std::vector<std::size_t> padded(parts, root);
  std::size_t prod = 1;
  for (std::size_t p = 0; p + 1 < parts; ++p) prod *= root;
  padded.back() = (n + prod - 1) / prod;
  std::sort(padded.begin(), padded.end());
  return padded;
}

}  // namespace lrc
