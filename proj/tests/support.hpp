#pragma once

// Hand-rolled generators shared by the unit, property and acceptance tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lrc/lrc.hpp"

namespace lrc::testing {

inline Matrix<double> random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
  Matrix<double> m(rows, cols);
  for (auto& v : m.flat()) v = scale * standard_normal(rng);
  return m;
}

// Exactly rank-k product of two Gaussian factors.
inline Matrix<double> random_low_rank(std::size_t rows, std::size_t cols, std::size_t k, Rng& rng) {
  return matmul(random_matrix(rows, k, rng), random_matrix(k, cols, rng));
}

inline Matrix<double> random_psd(std::size_t n, Rng& rng) {
  const auto a = random_matrix(n, n, rng);
  return matmul(a, transpose(a));
}

inline std::size_t random_size(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(uniform_index(rng, hi - lo + 1));
}

template <typename T>
double max_abs_diff(const std::vector<T>& a, const std::vector<T>& b) {
  double d = a.size() == b.size() ? 0.0 : INFINITY;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i)
    d = std::max(d, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return d;
}

template <typename T>
double max_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return INFINITY;
  return max_abs_diff(a.storage(), b.storage());
}

inline double relative_error(double got, double want) {
  return std::abs(got - want) / std::max(std::abs(want), 1e-300);
}

// Small DeepFM with `fields` categorical fields of the given vocabulary.
inline ModelConfig small_config(std::size_t fields, std::size_t vocab, std::size_t t, std::vector<std::size_t> hidden,
                                std::size_t n_continuous = 0, double dropout = 0.0) {
  ModelConfig c;
  for (std::size_t f = 0; f < fields; ++f) {
    c.field_names.push_back("f" + std::to_string(f));
    c.vocab_sizes.push_back(vocab);
  }
  c.embedding_dim = t;
  c.hidden = std::move(hidden);
  c.n_continuous = n_continuous;
  c.dropout = dropout;
  return c;
}

// Random dataset matching a model's fields, with labels from a coin.
inline ClickDataset random_dataset(const DeepFMModel& m, std::size_t n, Rng& rng) {
  ClickDataset ds;
  for (const auto& t : m.tables) ds.fields.push_back({t.field, t.vocab});
  ds.n_continuous = m.n_continuous;
  for (std::size_t s = 0; s < n; ++s) {
    ds.labels.push_back(static_cast<std::uint8_t>(rng() & 1));
    for (const auto& t : m.tables) ds.categorical.push_back(static_cast<std::uint32_t>(uniform_index(rng, t.vocab)));
    for (std::size_t c = 0; c < m.n_continuous; ++c) ds.continuous.push_back(static_cast<float>(uniform(rng, 0, 3)));
  }
  return ds;
}

// Per-test scratch directory under the system temp dir, emptied on creation.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("lrc-test-" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace lrc::testing
