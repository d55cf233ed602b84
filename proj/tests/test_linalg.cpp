#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <numeric>

#include "support.hpp"

using namespace lrc;
using lrc::testing::random_matrix;

namespace {

Eigen::MatrixXd to_eigen(const Matrix<double>& m) {
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) e(i, j) = m(i, j);
  return e;
}

Matrix<double> from_eigen(const Eigen::MatrixXd& e) {
  Matrix<double> m(e.rows(), e.cols());
  for (Eigen::Index i = 0; i < e.rows(); ++i)
    for (Eigen::Index j = 0; j < e.cols(); ++j) m(i, j) = e(i, j);
  return m;
}

double trace(const Matrix<double>& a) {
  double t = 0;
  for (std::size_t i = 0; i < a.rows(); ++i) t += a(i, i);
  return t;
}

double orthonormality_defect(const Matrix<double>& q) {
  const auto g = matmul(transpose(q), q);
  double d = 0;
  for (std::size_t i = 0; i < g.rows(); ++i)
    for (std::size_t j = 0; j < g.cols(); ++j) d = std::max(d, std::abs(g(i, j) - (i == j ? 1.0 : 0.0)));
  return d;
}

Matrix<double> svd_product(const SvdResult& s) {
  Matrix<double> us = s.u;
  for (std::size_t i = 0; i < us.rows(); ++i)
    for (std::size_t j = 0; j < us.cols(); ++j) us(i, j) *= s.singular_values[j];
  return matmul(us, transpose(s.v));
}

}  // namespace

// ---- sym_eigen --------------------------------------------------------------

TEST(SymEigen, TwoByTwoCovariance) {
  const auto a = Matrix<double>::from_rows({{0.25, -0.25}, {-0.25, 0.25}});
  const auto e = sym_eigen(a);
  // Characteristic polynomial l^2 - 0.5 l = 0.
  EXPECT_NEAR(e.values[0], 0.5, 1e-14);
  EXPECT_NEAR(e.values[1], 0.0, 1e-14);
  const double r = 1.0 / std::sqrt(2.0);
  // Tie in magnitude resolves to the lower index, which is made positive.
  EXPECT_NEAR(e.vectors(0, 0), r, 1e-12);
  EXPECT_NEAR(e.vectors(1, 0), -r, 1e-12);
}

TEST(SymEigen, CharacteristicPolynomialOracle2x2) {
  Rng rng(11);
  for (int c = 0; c < 50; ++c) {
    const double a = uniform(rng, -3, 3), b = uniform(rng, -3, 3), d = uniform(rng, -3, 3);
    const double tr = a + d, det = a * d - b * b;
    const double disc = std::sqrt(tr * tr / 4 - det);
    const auto e = sym_eigen(Matrix<double>::from_rows({{a, b}, {b, d}}));
    EXPECT_NEAR(e.values[0], tr / 2 + disc, 1e-10);
    EXPECT_NEAR(e.values[1], tr / 2 - disc, 1e-10);
  }
}

TEST(SymEigen, IdentityKeepsOriginalOrder) {
  const auto e = sym_eigen(Matrix<double>::identity(3));
  EXPECT_EQ(e.values, (std::vector<double>{1, 1, 1}));
  EXPECT_EQ(e.vectors, Matrix<double>::identity(3));
}

TEST(SymEigen, Diagonal) {
  const auto e = sym_eigen(Matrix<double>::from_rows({{5, 0, 0}, {0, 2, 0}, {0, 0, 0}}));
  EXPECT_EQ(e.values, (std::vector<double>{5, 2, 0}));
  EXPECT_EQ(e.vectors, Matrix<double>::identity(3));
}

TEST(SymEigen, DiagonalOutOfOrderIsSortedDescending) {
  const auto e = sym_eigen(Matrix<double>::from_rows({{1, 0, 0}, {0, 7, 0}, {0, 0, 3}}));
  EXPECT_EQ(e.values, (std::vector<double>{7, 3, 1}));
  EXPECT_EQ(e.vectors(1, 0), 1.0);
  EXPECT_EQ(e.vectors(2, 1), 1.0);
  EXPECT_EQ(e.vectors(0, 2), 1.0);
}

TEST(SymEigen, Errors) {
  EXPECT_THROW(sym_eigen(Matrix<double>(2, 3)), DimensionError);
  auto bad = Matrix<double>::identity(2);
  bad(0, 1) = NAN;
  EXPECT_THROW(sym_eigen(bad), NumericError);
}

TEST(SymEigenProperty, RandomPsdAgainstEigen) {
  Rng rng(1234);
  for (int c = 0; c < 60; ++c) {
    const std::size_t n = lrc::testing::random_size(rng, 1, 14);
    const auto a = lrc::testing::random_psd(n, rng);
    const auto e = sym_eigen(a);
    SCOPED_TRACE("case " + std::to_string(c) + " n=" + std::to_string(n));
    const double norm = frobenius_norm(a);
    double sum = 0;
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_GE(e.values[i], -1e-9);
      if (i > 0) {
        EXPECT_LE(e.values[i], e.values[i - 1]);
      }
      sum += e.values[i];
    }
    EXPECT_LE(lrc::testing::relative_error(sum, trace(a)), 1e-8);
    EXPECT_LE(orthonormality_defect(e.vectors), 1e-8);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> v(n);
      for (std::size_t r = 0; r < n; ++r) v[r] = e.vectors(r, i);
      const auto av = matvec(a, std::span<const double>(v));
      for (std::size_t r = 0; r < n; ++r) EXPECT_NEAR(av[r], e.values[i] * v[r], 1e-6 * norm);
      // Sign convention: the largest-magnitude component is positive.
      std::size_t arg = 0;
      for (std::size_t r = 1; r < n; ++r)
        if (std::abs(v[r]) > std::abs(v[arg]) * (1 + 1e-9)) arg = r;
      EXPECT_GT(v[arg], 0.0);
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> oracle(to_eigen(a));
    for (std::size_t i = 0; i < n; ++i)
      EXPECT_NEAR(e.values[i], oracle.eigenvalues()(static_cast<Eigen::Index>(n - 1 - i)), 1e-9 * std::max(1.0, norm));
  }
}

TEST(SymEigenProperty, Deterministic) {
  Rng rng(5);
  const auto a = lrc::testing::random_psd(9, rng);
  const auto x = sym_eigen(a), y = sym_eigen(a);
  EXPECT_EQ(x.values, y.values);
  EXPECT_EQ(x.vectors, y.vectors);
}

// ---- svd_thin ---------------------------------------------------------------

TEST(SvdThin, Diagonal) {
  const auto s = svd_thin(Matrix<double>::from_rows({{3, 0}, {0, 1}}));
  EXPECT_EQ(s.singular_values, (std::vector<double>{3, 1}));
  EXPECT_LE(lrc::testing::max_abs_diff(s.u, Matrix<double>::identity(2)), 1e-15);
  EXPECT_LE(lrc::testing::max_abs_diff(s.v, Matrix<double>::identity(2)), 1e-15);
}

TEST(SvdThin, RankOneOuterProduct) {
  const auto a = Matrix<double>::from_rows({{1}, {2}, {2}});
  const auto b = Matrix<double>::from_rows({{3, 4}});
  const auto s = svd_thin(matmul(a, b));
  ASSERT_EQ(s.singular_values.size(), 2u);
  EXPECT_NEAR(s.singular_values[0], 3.0 * 5.0, 1e-12);
  EXPECT_NEAR(s.singular_values[1], 0.0, 1e-7);
}

TEST(SvdThin, Random4x3Reconstructs) {
  Rng rng(7);
  const auto m = random_matrix(4, 3, rng);
  const auto s = svd_thin(m);
  EXPECT_EQ(s.singular_values.size(), 3u);
  EXPECT_LE(frobenius_distance(m, svd_product(s)), 1e-8 * frobenius_norm(m));
}

TEST(SvdThin, NonFiniteIsNumericError) {
  auto m = Matrix<double>(2, 2, 1.0);
  m(1, 1) = INFINITY;
  EXPECT_THROW(svd_thin(m), NumericError);
}

TEST(SvdProperty, RandomShapesAgainstEigen) {
  Rng rng(99);
  for (int c = 0; c < 60; ++c) {
    const std::size_t r = lrc::testing::random_size(rng, 1, 20), k = lrc::testing::random_size(rng, 1, 20);
    const auto m = random_matrix(r, k, rng);
    const auto s = svd_thin(m);
    SCOPED_TRACE("case " + std::to_string(c));
    ASSERT_EQ(s.singular_values.size(), std::min(r, k));
    EXPECT_LE(frobenius_distance(m, svd_product(s)), 1e-8 * frobenius_norm(m));
    EXPECT_LE(orthonormality_defect(s.u), 1e-8);
    EXPECT_LE(orthonormality_defect(s.v), 1e-8);
    Eigen::JacobiSVD<Eigen::MatrixXd> oracle(to_eigen(m));
    for (std::size_t i = 0; i < s.singular_values.size(); ++i) {
      EXPECT_GE(s.singular_values[i], 0.0);
      EXPECT_NEAR(s.singular_values[i], oracle.singularValues()(static_cast<Eigen::Index>(i)), 1e-9 * frobenius_norm(m));
    }
  }
}

TEST(SvdProperty, AgreesWithEigenOnPsd) {
  Rng rng(3);
  for (int c = 0; c < 30; ++c) {
    const auto a = lrc::testing::random_psd(lrc::testing::random_size(rng, 1, 10), rng);
    const auto s = svd_thin(a);
    const auto e = sym_eigen(a);
    for (std::size_t i = 0; i < e.values.size(); ++i)
      EXPECT_NEAR(s.singular_values[i], e.values[i], 1e-8 * std::max(1.0, e.values[0]));
  }
}

// ---- low_rank_factors_svd ---------------------------------------------------

TEST(LowRankFactors, DiagonalRankOne) {
  const auto m = Matrix<double>::from_rows({{3, 0}, {0, 1}});
  const auto f = low_rank_factors_svd(m, 1);
  EXPECT_NEAR(f.left(0, 0), std::sqrt(3.0), 1e-15);
  EXPECT_NEAR(f.left(1, 0), 0.0, 1e-15);
  EXPECT_NEAR(f.right(0, 0), std::sqrt(3.0), 1e-15);
  EXPECT_NEAR(f.right(0, 1), 0.0, 1e-15);
  const auto p = matmul(f.left, f.right);
  EXPECT_LE(lrc::testing::max_abs_diff(p, Matrix<double>::from_rows({{3, 0}, {0, 0}})), 1e-14);
  EXPECT_NEAR(frobenius_distance(m, p), 1.0, 1e-14);
}

TEST(LowRankFactors, FullRankIsIdentity) {
  Rng rng(8);
  const auto m = random_matrix(6, 4, rng);
  const auto f = low_rank_factors_svd(m, 4);
  EXPECT_LE(frobenius_distance(m, matmul(f.left, f.right)), 1e-8 * frobenius_norm(m));
}

TEST(LowRankFactors, Random5x4RankTwo) {
  Rng rng(21);
  const auto m = random_matrix(5, 4, rng);
  const auto s = svd_thin(m).singular_values;
  const auto f = low_rank_factors_svd(m, 2);
  const double want = std::sqrt(s[2] * s[2] + s[3] * s[3]);
  EXPECT_LE(lrc::testing::relative_error(frobenius_distance(m, matmul(f.left, f.right)), want), 1e-6);
}

TEST(LowRankFactors, RankOutOfRange) {
  const auto m = Matrix<double>(3, 2, 1.0);
  EXPECT_THROW(low_rank_factors_svd(m, 0), RankError);
  EXPECT_THROW(low_rank_factors_svd(m, 3), RankError);
}

TEST(LowRankProperty, EckartYoungAgainstRandomRankK) {
  Rng rng(77);
  for (int c = 0; c < 25; ++c) {
    const std::size_t r = lrc::testing::random_size(rng, 2, 12), n = lrc::testing::random_size(rng, 2, 12);
    const std::size_t k = lrc::testing::random_size(rng, 1, std::min(r, n));
    const auto m = random_matrix(r, n, rng);
    const auto f = low_rank_factors_svd(m, k);
    const double best = frobenius_distance(m, matmul(f.left, f.right));
    for (int trial = 0; trial < 20; ++trial) {
      const auto other = lrc::testing::random_low_rank(r, n, k, rng);
      EXPECT_LE(best, frobenius_distance(m, other) + 1e-9);
    }
    // Perturbing the optimum never helps either.
    auto l2 = f.left;
    for (auto& v : l2.flat()) v += 1e-3 * standard_normal(rng);
    EXPECT_LE(best, frobenius_distance(m, matmul(l2, f.right)) + 1e-9);
  }
}

// ---- tensor train -----------------------------------------------------------

namespace {

// Independent dense TT-SVD sweep using Eigen's JacobiSVD. Indices are split
// most-significant-first, as in the library, and the result is the dense
// reconstruction of the padded matrix.
Matrix<double> tt_svd_oracle(const Matrix<double>& m, const std::vector<std::size_t>& rf,
                             const std::vector<std::size_t>& cf, std::size_t max_rank) {
  const std::size_t k = rf.size();
  const std::size_t pr = std::accumulate(rf.begin(), rf.end(), std::size_t{1}, std::multiplies<>());
  const std::size_t pc = std::accumulate(cf.begin(), cf.end(), std::size_t{1}, std::multiplies<>());
  // Tensor with modes (i_p, j_p) flattened as mode index i_p * n_p + j_p.
  std::vector<std::size_t> mode(k);
  for (std::size_t p = 0; p < k; ++p) mode[p] = rf[p] * cf[p];
  const std::size_t total = pr * pc;
  auto tensor_index = [&](std::size_t row, std::size_t col) {
    std::vector<std::size_t> ri(k), ci(k);
    for (std::size_t p = k; p-- > 0;) {
      ri[p] = row % rf[p];
      row /= rf[p];
      ci[p] = col % cf[p];
      col /= cf[p];
    }
    std::size_t idx = 0;
    for (std::size_t p = 0; p < k; ++p) idx = idx * mode[p] + ri[p] * cf[p] + ci[p];
    return idx;
  };
  Eigen::VectorXd t = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(total));
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) t(static_cast<Eigen::Index>(tensor_index(i, j))) = m(i, j);

  // Sequential truncated SVDs; cores kept as matrices (r_prev * mode) x r.
  std::vector<Eigen::MatrixXd> cores;
  Eigen::MatrixXd rest = Eigen::Map<Eigen::MatrixXd>(t.data(), 1, static_cast<Eigen::Index>(total));
  std::size_t r_prev = 1;
  std::size_t remaining = total;
  for (std::size_t p = 0; p + 1 < k; ++p) {
    remaining /= mode[p];
    // Row-major reshape of the remaining tensor to (r_prev*mode_p) x remaining.
    Eigen::MatrixXd c(static_cast<Eigen::Index>(r_prev * mode[p]), static_cast<Eigen::Index>(remaining));
    const Eigen::Index cols_before = rest.cols();
    for (Eigen::Index a = 0; a < rest.rows(); ++a)
      for (Eigen::Index b = 0; b < cols_before; ++b) {
        const std::size_t flat = static_cast<std::size_t>(a) * static_cast<std::size_t>(cols_before) + static_cast<std::size_t>(b);
        c(static_cast<Eigen::Index>(flat / remaining), static_cast<Eigen::Index>(flat % remaining)) = rest(a, b);
      }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(c, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& s = svd.singularValues();
    std::size_t r = 0;
    for (Eigen::Index i = 0; i < s.size(); ++i)
      if (s(i) > 1e-13 * std::max(s(0), 1e-300)) ++r;
    r = std::max<std::size_t>(1, std::min(r, max_rank));
    const auto ri = static_cast<Eigen::Index>(r);
    cores.push_back(svd.matrixU().leftCols(ri));
    rest = s.head(ri).asDiagonal() * svd.matrixV().leftCols(ri).transpose();
    r_prev = r;
  }
  // Contract back to a dense vector.
  Eigen::MatrixXd acc = Eigen::MatrixXd::Ones(1, 1);
  for (std::size_t p = 0; p + 1 < k; ++p) {
    const Eigen::Index rp = acc.cols();
    Eigen::MatrixXd next(acc.rows() * static_cast<Eigen::Index>(mode[p]), cores[p].cols());
    for (Eigen::Index w = 0; w < acc.rows(); ++w)
      for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(mode[p]); ++i)
        for (Eigen::Index b = 0; b < cores[p].cols(); ++b) {
          double v = 0;
          for (Eigen::Index a = 0; a < rp; ++a) v += acc(w, a) * cores[p](a * static_cast<Eigen::Index>(mode[p]) + i, b);
          next(w * static_cast<Eigen::Index>(mode[p]) + i, b) = v;
        }
    acc = next;
  }
  const Eigen::MatrixXd dense = acc * rest;  // (prod modes before last) x mode_last
  Matrix<double> out(pr, pc);
  for (std::size_t i = 0; i < pr; ++i)
    for (std::size_t j = 0; j < pc; ++j) {
      const std::size_t idx = tensor_index(i, j);
      out(i, j) = dense(static_cast<Eigen::Index>(idx / mode[k - 1]), static_cast<Eigen::Index>(idx % mode[k - 1]));
    }
  return out;
}

// Naive contraction of cores for element (row, col) in long double.
long double tt_element(const TTCores<double>& tt, std::size_t row, std::size_t col) {
  const std::size_t k = tt.cores.size();
  std::vector<std::size_t> ri(k), ci(k);
  for (std::size_t p = k; p-- > 0;) {
    ri[p] = row % tt.row_factors[p];
    row /= tt.row_factors[p];
    ci[p] = col % tt.col_factors[p];
    col /= tt.col_factors[p];
  }
  std::vector<long double> v{1.0L};
  for (std::size_t p = 0; p < k; ++p) {
    const auto& c = tt.cores[p];
    std::vector<long double> nv(c.rank_out, 0.0L);
    for (std::size_t a = 0; a < c.rank_in; ++a)
      for (std::size_t b = 0; b < c.rank_out; ++b) nv[b] += v[a] * c.at(a, ri[p], ci[p], b);
    v = nv;
  }
  return v[0];
}

Matrix<double> pad(const Matrix<double>& m, std::size_t r, std::size_t c) {
  Matrix<double> out(r, c);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = m(i, j);
  return out;
}

}  // namespace

TEST(TensorTrain, FullRank4x4IsExact) {
  Rng rng(1);
  const auto m = random_matrix(4, 4, rng);
  const auto tt = tt_decompose_matrix(m, {2, 2}, {2, 2}, kUnboundedRank);
  EXPECT_LE(frobenius_distance(tt_reconstruct(tt), m), 1e-7 * frobenius_norm(m));
  const auto row0 = tt_reconstruct_row(tt, 0);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(row0[j], m(0, j), 1e-7);
}

TEST(TensorTrain, ZeroMatrix) {
  const auto tt = tt_decompose_matrix(Matrix<double>(8, 4), {2, 4}, {2, 2}, 3);
  for (const auto& c : tt.cores)
    for (double v : c.data) EXPECT_EQ(v, 0.0);
  for (std::size_t r = 0; r < 8; ++r)
    for (double v : tt_reconstruct_row(tt, r)) EXPECT_EQ(v, 0.0);
}

TEST(TensorTrain, Padded6x6RankTwoMatchesDenseOracle) {
  Rng rng(2);
  const auto m = random_matrix(6, 6, rng);
  const auto tt = tt_decompose_matrix(m, {2, 4}, {2, 4}, 2);
  EXPECT_EQ(tt.padded_rows(), 8u);
  const auto oracle = tt_svd_oracle(m, {2, 4}, {2, 4}, 2);
  Matrix<double> got(8, 8);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) got(i, j) = static_cast<double>(tt_element(tt, i, j));
  const double err = frobenius_distance(got, pad(m, 8, 8));
  const double oracle_err = frobenius_distance(oracle, pad(m, 8, 8));
  EXPECT_LE(lrc::testing::relative_error(err, oracle_err), 1e-9);
  EXPECT_LE(lrc::testing::max_abs_diff(got, oracle), 1e-9);
}

TEST(TensorTrain, ThreeCoreTruncationMatchesDenseOracle) {
  Rng rng(4);
  for (int c = 0; c < 10; ++c) {
    const auto m = random_matrix(12, 8, rng);
    const std::size_t rank = lrc::testing::random_size(rng, 1, 4);
    const auto tt = tt_decompose_matrix(m, {2, 2, 3}, {2, 2, 2}, rank);
    const auto oracle = tt_svd_oracle(m, {2, 2, 3}, {2, 2, 2}, rank);
    EXPECT_LE(lrc::testing::max_abs_diff(tt_reconstruct(tt), pad(oracle, 12, 8)), 1e-9) << "rank " << rank;
  }
}

TEST(TensorTrain, RowContractionMatchesDenseOracle) {
  Rng rng(6);
  const auto m = random_matrix(4, 4, rng);
  const auto tt = tt_decompose_matrix(m, {2, 2}, {2, 2}, 1);
  for (std::size_t r = 0; r < 4; ++r) {
    const auto row = tt_reconstruct_row(tt, r);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(row[j], static_cast<double>(tt_element(tt, r, j)), 1e-7);
  }
}

TEST(TensorTrain, ParameterBound) {
  Rng rng(8);
  const auto m = random_matrix(16, 8, rng);
  const auto tt = tt_decompose_matrix(m, {2, 2, 4}, {2, 2, 2}, 3);
  std::size_t bound = 0;
  for (std::size_t p = 0; p < 3; ++p) bound += tt.ranks[p] * tt.row_factors[p] * tt.col_factors[p] * tt.ranks[p + 1];
  EXPECT_EQ(tt.param_count(), bound);
  EXPECT_EQ(tt.ranks.front(), 1u);
  EXPECT_EQ(tt.ranks.back(), 1u);
  for (auto r : tt.ranks) EXPECT_LE(r, 3u);
}

TEST(TensorTrain, Errors) {
  const auto m = Matrix<double>(6, 6, 1.0);
  EXPECT_THROW(tt_decompose_matrix(m, {2, 2}, {2, 4}, 2), ShapeError);  // 4 rows < 6
  EXPECT_THROW(tt_decompose_matrix(m, {}, {}, 2), ShapeError);
  EXPECT_THROW(tt_decompose_matrix(m, {2, 4}, {2, 4}, 0), RankError);
  const auto tt = tt_decompose_matrix(m, {2, 4}, {2, 4}, 2);
  EXPECT_THROW(tt_reconstruct_row(tt, 8), DataError);
  EXPECT_NO_THROW(tt_reconstruct_row(tt, 7));  // padded rows are addressable
}

TEST(TensorTrain, AutoFactors) {
  EXPECT_EQ(tt_auto_factors(16, 3), (std::vector<std::size_t>{2, 2, 4}));
  EXPECT_EQ(tt_auto_factors(10000, 3), (std::vector<std::size_t>{20, 20, 25}));
  EXPECT_EQ(tt_auto_factors(1, 3), (std::vector<std::size_t>{1, 1, 1}));
  for (std::size_t n : {7u, 97u, 1000u, 1021u, 4096u}) {
    const auto f = tt_auto_factors(n, 3);
    EXPECT_GE(std::accumulate(f.begin(), f.end(), std::size_t{1}, std::multiplies<>()), n) << n;
  }
}

TEST(TensorTrainProperty, ExhaustiveReconstructionEqualsDenseContraction) {
  Rng rng(31);
  for (int c = 0; c < 20; ++c) {
    const std::size_t rows = lrc::testing::random_size(rng, 1, 16), cols = lrc::testing::random_size(rng, 1, 16);
    const auto rf = tt_auto_factors(rows, 2), cf = tt_auto_factors(cols, 2);
    const auto m = random_matrix(rows, cols, rng);
    const auto tt = tt_decompose_matrix(m, rf, cf, lrc::testing::random_size(rng, 1, 5));
    const auto dense = tt_reconstruct(tt);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j)
        ASSERT_NEAR(dense(i, j), static_cast<double>(tt_element(tt, i, j)), 1e-12) << "case " << c;
    // Unbounded rank reproduces the matrix.
    const auto full = tt_decompose_matrix(m, rf, cf, kUnboundedRank);
    EXPECT_LE(frobenius_distance(tt_reconstruct(full), m), 1e-7 * std::max(1.0, frobenius_norm(m)));
  }
}

TEST(TensorTrainProperty, Deterministic) {
  Rng rng(9);
  const auto m = random_matrix(10, 9, rng);
  const auto a = tt_decompose_matrix(m, {2, 5}, {3, 3}, 2);
  const auto b = tt_decompose_matrix(m, {2, 5}, {3, 3}, 2);
  for (std::size_t p = 0; p < a.cores.size(); ++p) EXPECT_EQ(a.cores[p].data, b.cores[p].data);
}

TEST(EigenOracleSanity, RoundTrip) {
  Rng rng(1);
  const auto m = random_matrix(3, 2, rng);
  EXPECT_EQ(from_eigen(to_eigen(m)), m);
}
