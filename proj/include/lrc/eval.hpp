#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "lrc/data.hpp"
#include "lrc/error.hpp"
#include "lrc/nn.hpp"
#include "lrc/util.hpp"

namespace lrc {

// Rank-based AUC; tied scores share their average rank, which is the same as
// giving half credit to tied positive/negative pairs.
template <typename L, typename S>
double auc(std::span<const L> labels, std::span<const S> scores) {
  if (labels.size() != scores.size()) throw DimensionError("auc: labels/scores length mismatch");
  const std::size_t n = labels.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos = 0, neg = 0, rank_sum = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    // ranks i+1 .. j share (i + 1 + j) / 2
    const double avg = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t q = i; q < j; ++q) {
      if (labels[order[q]] != L(0)) {
        rank_sum += avg;
        pos += 1;
      } else {
        neg += 1;
      }
    }
    i = j;
  }
  if (pos == 0 || neg == 0) throw UndefinedMetricError("auc: needs at least one positive and one negative label");
  return (rank_sum - pos * (pos + 1) / 2) / (pos * neg);
}

template <typename L, typename S>
double auc(const std::vector<L>& labels, const std::vector<S>& scores) {
  return auc(std::span<const L>(labels), std::span<const S>(scores));
}

inline constexpr double kLoglossClamp = 1e-7;

template <typename L, typename S>
double logloss(std::span<const L> labels, std::span<const S> scores) {
  if (labels.size() != scores.size()) throw DimensionError("logloss: labels/scores length mismatch");
  if (labels.empty()) throw UndefinedMetricError("logloss: no samples");
  double acc = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double p = std::clamp(static_cast<double>(scores[i]), kLoglossClamp, 1.0 - kLoglossClamp);
    acc += labels[i] != L(0) ? -std::log(p) : -std::log1p(-p);
  }
  return acc / static_cast<double>(labels.size());
}

template <typename L, typename S>
double logloss(const std::vector<L>& labels, const std::vector<S>& scores) {
  return logloss(std::span<const L>(labels), std::span<const S>(scores));
}

// NaN when the metric is undefined (single-class labels).
template <typename L, typename S>
double auc_or_nan(const std::vector<L>& labels, const std::vector<S>& scores) {
  try {
    return auc(labels, scores);
  } catch (const UndefinedMetricError&) {
    return std::nan("");
  }
}

// JSON null for NaN.
inline nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }

struct MetricReport {
  double auc = 0;
  double logloss = 0;
  std::size_t n_samples = 0;
  ParamCount params;
  std::optional<double> throughput_samples_per_sec;

  nlohmann::json to_json() const {
    nlohmann::json j{{"auc", number_or_null(auc)},
                     {"logloss", number_or_null(logloss)},
                     {"n_samples", n_samples},
                     {"param_total", params.total()},
                     {"param_breakdown",
                      {{"embeddings", params.embeddings},
                       {"projections", params.projections},
                       {"first_order", params.first_order},
                       {"mlp", params.mlp}}}};
    if (throughput_samples_per_sec) j["throughput_samples_per_sec"] = *throughput_samples_per_sec;
    return j;
  }
};

// Click probabilities for every row, infer mode.
template <typename T>
std::vector<T> predict(const DeepFM<T>& m, const ClickDataset& ds, std::size_t batch_size = 10000) {
  std::vector<T> out;
  out.reserve(ds.size());
  ForwardState<T> st;
  const ForwardOptions opt{Mode::infer, nullptr, std::nullopt};
  for (std::size_t begin = 0; begin < ds.size(); begin += batch_size) {
    const FeatureBatch b = ds.slice(begin, batch_size);
    forward_pass(m, b, opt, st);
    for (T z : st.logits) out.push_back(sigmoid(z));
  }
  return out;
}

template <typename T>
MetricReport evaluate(const DeepFM<T>& m, const ClickDataset& ds, std::size_t batch_size = 10000) {
  if (ds.empty()) throw DataError("evaluate: empty dataset");
  const auto p = predict(m, ds, batch_size);
  MetricReport r;
  r.auc = auc(ds.labels, p);
  r.logloss = logloss(ds.labels, p);
  r.n_samples = ds.size();
  r.params = param_count(m);
  return r;
}

// ---------------------------------------------------------------------------
// Throughput
// ---------------------------------------------------------------------------

struct BenchConfig {
  std::size_t batch_size = 10000;
  std::size_t n_batches = 20;
  std::size_t warmup = 3;
  std::uint64_t seed = 0;
};

struct BenchResult {
  double samples_per_second = 0;
  double median_batch_seconds = 0;
  std::vector<double> batch_seconds;
  std::size_t batch_size = 0;
  std::string hardware;

  nlohmann::json to_json() const {
    return {{"samples_per_second", samples_per_second},
            {"median_batch_seconds", median_batch_seconds},
            {"batch_seconds", batch_seconds},
            {"batch_size", batch_size},
            {"hardware", hardware},
            {"timed_region", "model forward only, inference mode, single thread"}};
  }
};

inline std::string hardware_string() {
  std::string model = "unknown cpu";
  std::ifstream in("/proc/cpuinfo");
  for (std::string line; std::getline(in, line);) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) {
        model = line.substr(colon + 1);
        model.erase(0, model.find_first_not_of(' '));
      }
      break;
    }
  }
  return model + " (" + std::to_string(std::thread::hardware_concurrency()) + " logical cpus)";
}

// Uniformly random indices per field, standard-normal continuous values.
template <typename T>
FeatureBatch random_batch(const DeepFM<T>& m, std::size_t size, Rng& rng) {
  FeatureBatch b;
  b.size = size;
  b.n_fields = m.n_fields();
  b.n_continuous = m.n_continuous;
  b.categorical.resize(size * b.n_fields);
  b.continuous.resize(size * b.n_continuous);
  for (std::size_t s = 0; s < size; ++s)
    for (std::size_t f = 0; f < b.n_fields; ++f)
      b.categorical[s * b.n_fields + f] = static_cast<std::uint32_t>(uniform_index(rng, m.tables[f].vocab));
  for (auto& c : b.continuous) c = static_cast<float>(standard_normal(rng));
  return b;
}

// Median wall time of forward passes over pre-generated batches.
template <typename T>
BenchResult bench_throughput(const DeepFM<T>& m, const BenchConfig& cfg) {
  if (cfg.batch_size == 0 || cfg.n_batches == 0) throw UsageError("bench: batch size and batch count must be >= 1");
  Rng rng(cfg.seed);
  std::vector<FeatureBatch> batches;
  const std::size_t distinct = std::min<std::size_t>(cfg.n_batches + cfg.warmup, 4);
  for (std::size_t i = 0; i < distinct; ++i) batches.push_back(random_batch(m, cfg.batch_size, rng));

  ForwardState<T> st;
  const ForwardOptions opt{Mode::infer, nullptr, std::nullopt};
  BenchResult r;
  r.batch_size = cfg.batch_size;
  r.hardware = hardware_string();
  for (std::size_t i = 0; i < cfg.warmup + cfg.n_batches; ++i) {
    const auto& b = batches[i % batches.size()];
    const auto t0 = std::chrono::steady_clock::now();
    forward_pass(m, b, opt, st);
    const auto t1 = std::chrono::steady_clock::now();
    if (i >= cfg.warmup) r.batch_seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  std::vector<double> sorted = r.batch_seconds;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t k = sorted.size();
  r.median_batch_seconds = k % 2 ? sorted[k / 2] : 0.5 * (sorted[k / 2 - 1] + sorted[k / 2]);
  r.samples_per_second = static_cast<double>(cfg.batch_size) / r.median_batch_seconds;
  return r;
}

}  // namespace lrc
