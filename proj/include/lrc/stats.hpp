#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lrc/error.hpp"
#include "lrc/linalg.hpp"

namespace lrc {

// Streaming first and second moments of a vector-valued signal, kept in 64-bit.
// sum_outer is maintained as a full symmetric matrix.
class MomentAccumulator {
 public:
  MomentAccumulator() = default;
  explicit MomentAccumulator(std::size_t dim) : dim_(dim), sum_(dim, 0.0), sum_outer_(dim, dim) {}

  std::size_t dim() const noexcept { return dim_; }
  std::uint64_t count() const noexcept { return n_; }
  const std::vector<double>& sum() const noexcept { return sum_; }
  const Matrix<double>& sum_outer() const noexcept { return sum_outer_; }

  // Adds every row of `batch` (n_samples x dim).
  template <typename T>
  void update(const Matrix<T>& batch) {
    if (batch.cols() != dim_) {
      throw DimensionError("moments_update: batch has " + std::to_string(batch.cols()) + " columns, accumulator dim " +
                           std::to_string(dim_));
    }
    std::vector<double> y(dim_);
    for (std::size_t s = 0; s < batch.rows(); ++s) {
      auto src = batch.row(s);
      for (std::size_t i = 0; i < dim_; ++i) y[i] = static_cast<double>(src[i]);
      for (std::size_t i = 0; i < dim_; ++i) {
        const double yi = y[i];
        sum_[i] += yi;
        if (yi == 0.0) continue;
        double* row = sum_outer_.row(i).data();
        for (std::size_t j = i; j < dim_; ++j) row[j] += yi * y[j];
      }
    }
    n_ += batch.rows();
    mirror_upper();
  }

  void merge(const MomentAccumulator& other) {
    if (other.dim_ != dim_) {
      throw DimensionError("moments_merge: dims " + std::to_string(dim_) + " and " + std::to_string(other.dim_));
    }
    for (std::size_t i = 0; i < dim_; ++i) sum_[i] += other.sum_[i];
    auto dst = sum_outer_.flat();
    auto src = other.sum_outer_.flat();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    n_ += other.n_;
  }

 private:
  void mirror_upper() {
    for (std::size_t i = 0; i < dim_; ++i)
      for (std::size_t j = 0; j < i; ++j) sum_outer_(i, j) = sum_outer_(j, i);
  }

  std::size_t dim_ = 0;
  std::vector<double> sum_;
  Matrix<double> sum_outer_;
  std::uint64_t n_ = 0;
};

inline MomentAccumulator moments_merge(MomentAccumulator a, const MomentAccumulator& b) {
  a.merge(b);
  return a;
}

struct Covariance {
  std::vector<double> mean;
  Matrix<double> cov;
};

// Population covariance E[yy^T] - E[y]E[y]^T.
inline Covariance covariance(const MomentAccumulator& acc) {
  if (acc.count() == 0) throw EmptyAccumulatorError("covariance: accumulator holds no samples");
  const std::size_t d = acc.dim();
  const double inv_n = 1.0 / static_cast<double>(acc.count());
  Covariance out{std::vector<double>(d), Matrix<double>(d, d)};
  for (std::size_t i = 0; i < d; ++i) out.mean[i] = acc.sum()[i] * inv_n;
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i; j < d; ++j) {
      const double c = acc.sum_outer()(i, j) * inv_n - out.mean[i] * out.mean[j];
      out.cov(i, j) = c;
      out.cov(j, i) = c;
    }
  }
  for (std::size_t i = 0; i < d; ++i) {
    const double scale = std::max(1.0, acc.sum_outer()(i, i) * inv_n);
    if (out.cov(i, i) < -1e-9 * scale) {
      throw NumericError("covariance: negative variance " + std::to_string(out.cov(i, i)) + " on coordinate " +
                         std::to_string(i));
    }
    if (!std::isfinite(out.cov(i, i))) throw NumericError("covariance: non-finite variance");
  }
  return out;
}

// One accumulator per compressible layer ("mlp/<layer>") or embedding field
// ("emb/<field>").
using TapSet = std::map<std::string, MomentAccumulator>;

}  // namespace lrc
