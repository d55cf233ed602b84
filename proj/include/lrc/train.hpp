#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lrc/data.hpp"
#include "lrc/error.hpp"
#include "lrc/eval.hpp"
#include "lrc/nn.hpp"
#include "lrc/stats.hpp"
#include "lrc/util.hpp"

namespace lrc {

// ---------------------------------------------------------------------------
// Adam with decoupled weight decay
// ---------------------------------------------------------------------------

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 1e-3;
};

// One step on a flat tensor. `step` is 1-based.
//   p <- p - lr*wd*p - lr * mhat / (sqrt(vhat) + eps)
template <typename T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v, std::uint64_t step,
                 const AdamConfig& cfg) {
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T lr = static_cast<T>(cfg.learning_rate);
  const T decay = static_cast<T>(cfg.learning_rate * cfg.weight_decay);
  const T inv_bc1 = static_cast<T>(1.0 / bc1), inv_bc2 = static_cast<T>(1.0 / bc2);
  const T eps = static_cast<T>(cfg.epsilon);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i];
    m[i] = b1 * m[i] + (T(1) - b1) * g;
    v[i] = b2 * v[i] + (T(1) - b2) * g * g;
    const T mhat = m[i] * inv_bc1;
    const T vhat = v[i] * inv_bc2;
    param[i] = param[i] - decay * param[i] - lr * mhat / (std::sqrt(vhat) + eps);
  }
}

template <typename T>
struct AdamState {
  std::uint64_t step = 0;
  DeepFM<T> m;
  DeepFM<T> v;

  explicit AdamState(const DeepFM<T>& model) : m(zeros_like(model)), v(zeros_like(model)) {}

  void apply(DeepFM<T>& model, DeepFM<T>& grads, const AdamConfig& cfg) {
    ++step;
    auto p = param_refs(model);
    auto g = param_refs(grads);
    auto mm = param_refs(m);
    auto vv = param_refs(v);
    if (p.size() != g.size() || p.size() != mm.size()) throw ShapeError("adam: optimizer state does not match model");
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p[i].data.size() != g[i].data.size() || p[i].data.size() != mm[i].data.size())
        throw ShapeError("adam: state shape mismatch for " + p[i].info.name);
      adam_update(p[i].data, std::span<const T>(g[i].data), mm[i].data, vv[i].data, step, cfg);
    }
  }
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 1000;
  std::size_t epochs = 1;
  std::optional<double> dropout_rate;  // overrides the rate of layers that carry dropout
  double weight_decay = 1e-3;
  double l2_ratio = 1e-5;
  std::uint64_t seed = 0;
  bool shuffle = true;

  AdamConfig adam() const { return {learning_rate, 0.9, 0.999, 1e-8, weight_decay}; }
};

inline void validate(const TrainConfig& c) {
  if (!(c.learning_rate >= 0.0) || !std::isfinite(c.learning_rate)) throw UsageError("train: learning_rate must be >= 0");
  if (c.batch_size < 1) throw UsageError("train: batch_size must be >= 1");
  if (!(c.l2_ratio >= 0.0)) throw UsageError("train: l2_ratio must be >= 0");
  if (!(c.weight_decay >= 0.0)) throw UsageError("train: weight_decay must be >= 0");
  if (c.dropout_rate && !(*c.dropout_rate >= 0.0 && *c.dropout_rate < 1.0))
    throw UsageError("train: dropout_rate must lie in [0, 1)");
}

struct EpochMetrics {
  std::string stage;
  std::size_t epoch = 0;
  double train_auc = 0;  // progressive, from the training forward passes
  double train_logloss = 0;
  double test_auc = 0;  // NaN without a test set
  double test_logloss = 0;
  double wall_seconds = 0;

  nlohmann::json to_json() const {
    return {{"stage", stage},
            {"epoch", epoch},
            {"train_auc", number_or_null(train_auc)},
            {"train_logloss", number_or_null(train_logloss)},
            {"test_auc", number_or_null(test_auc)},
            {"test_logloss", number_or_null(test_logloss)},
            {"wall_seconds", wall_seconds}};
  }
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

// BCE from logits plus r * sum ||W||^2 over weight tensors.
template <typename T>
double loss_bce_l2(std::span<const T> logits, std::span<const T> labels, const DeepFM<T>& m, double r) {
  return bce_from_logits(logits, labels) + r * l2_norm_squared(m);
}

template <typename T>
std::vector<EpochMetrics> train(DeepFM<T>& model, const ClickDataset& ds, const TrainConfig& cfg,
                                const ClickDataset* test = nullptr, const std::string& stage = "train",
                                const EpochCallback& on_epoch = {}) {
  validate(cfg);
  validate_model(model);
  std::vector<EpochMetrics> out;
  if (cfg.epochs == 0) return out;
  if (ds.empty()) throw DataError("train: empty dataset (no rows, no fields populated)");
  if (ds.vocab_sizes() != [&] {
        std::vector<std::size_t> v;
        for (const auto& t : model.tables) v.push_back(t.vocab);
        return v;
      }())
    throw DataError("train: dataset vocabularies do not match the model");

  Rng order_rng(cfg.seed);
  Rng dropout_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  DeepFM<T> grads = zeros_like(model);
  AdamState<T> adam(model);
  const AdamConfig acfg = cfg.adam();
  ForwardState<T> st;
  const ForwardOptions fopt{Mode::train, &dropout_rng, cfg.dropout_rate};

  std::vector<std::size_t> order(ds.size());
  std::vector<float> seen_labels;
  std::vector<T> seen_preds;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), 0);
    if (cfg.shuffle) shuffle(order, order_rng);
    seen_labels.clear();
    seen_preds.clear();
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, order.size() - begin);
      const FeatureBatch b = ds.gather(std::span<const std::size_t>(order.data() + begin, count));
      const LossValue loss = compute_gradients(model, b, cfg.l2_ratio, fopt, grads, st);
      if (!std::isfinite(loss.total())) {
        throw NumericError(stage + ": non-finite loss at epoch " + std::to_string(epoch) + ", batch starting at " +
                           std::to_string(begin) + " (bce " + std::to_string(loss.bce) + ", l2 " +
                           std::to_string(loss.l2) + ")");
      }
      for (std::size_t s = 0; s < b.size; ++s) {
        seen_labels.push_back(b.labels[s]);
        seen_preds.push_back(sigmoid(st.logits[s]));
      }
      adam.apply(model, grads, acfg);
    }
    EpochMetrics em;
    em.stage = stage;
    em.epoch = epoch;
    em.train_auc = auc_or_nan(seen_labels, seen_preds);
    em.train_logloss = logloss(seen_labels, seen_preds);
    em.test_auc = em.test_logloss = std::nan("");
    if (test && !test->empty()) {
      const auto p = predict(model, *test);
      em.test_auc = auc_or_nan(test->labels, p);
      em.test_logloss = logloss(test->labels, p);
    }
    em.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (on_epoch) on_epoch(em);
    out.push_back(em);
  }
  return out;
}

// A model counts as compressed once any table is factored or projected, or any
// MLP layer has been split.
template <typename T>
bool is_compressed(const DeepFM<T>& m) {
  if (m.has_projections()) return true;
  for (const auto& t : m.tables)
    if (t.tt) return true;
  for (const auto& l : m.mlp)
    if (l.name.size() > 2 && (l.name.ends_with(".a") || l.name.ends_with(".b"))) return true;
  return false;
}

// Exactly one epoch over the data; the model must already be compressed.
template <typename T>
std::vector<EpochMetrics> finetune(DeepFM<T>& model, const ClickDataset& ds, TrainConfig cfg,
                                   const ClickDataset* test = nullptr, const std::string& stage = "finetune",
                                   const EpochCallback& on_epoch = {}) {
  if (!is_compressed(model)) throw UsageError("finetune: model has not been compressed");
  cfg.epochs = 1;
  return train(model, ds, cfg, test, stage, on_epoch);
}

// ---------------------------------------------------------------------------
// Calibration scan
// ---------------------------------------------------------------------------

// One inference pass (dropout off) accumulating first and second moments of the
// requested taps. max_samples = 0 scans every row.
template <typename T>
TapSet calibrate(const DeepFM<T>& model, const ClickDataset& ds, const std::set<std::string>& taps,
                 std::size_t batch_size = 10000, std::size_t max_samples = 0) {
  if (batch_size == 0) throw UsageError("calibrate: batch size must be >= 1");
  TapSet out;
  for (const auto& tap : taps) {
    std::size_t dim = 0;
    bool found = false;
    for (const auto& l : model.mlp)
      if (mlp_tap(l.name) == tap) {
        dim = l.out_dim();
        found = true;
      }
    for (const auto& t : model.tables)
      if (embedding_tap(t.field) == tap) {
        dim = model.embedding_dim;
        found = true;
      }
    if (!found) throw UsageError("calibrate: unknown tap '" + tap + "'");
    out.emplace(tap, MomentAccumulator(dim));
  }
  const std::size_t n = max_samples ? std::min(max_samples, ds.size()) : ds.size();
  const ForwardOptions opt{Mode::infer, nullptr, std::nullopt};
  for (std::size_t begin = 0; begin < n; begin += batch_size) {
    const FeatureBatch b = ds.slice(begin, std::min(batch_size, n - begin));
    const auto trace = forward(model, b, opt, taps);
    for (auto& [tap, acc] : out) acc.update(trace.captured.at(tap));
  }
  return out;
}

}  // namespace lrc
