#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lrc/error.hpp"
#include "lrc/linalg.hpp"
#include "lrc/tt.hpp"
#include "lrc/util.hpp"

namespace lrc {

// A batch of samples: categorical indices (size x n_fields) and transformed
// continuous values (size x n_continuous), row-major. Labels are optional.
struct FeatureBatch {
  std::size_t size = 0;
  std::size_t n_fields = 0;
  std::size_t n_continuous = 0;
  std::vector<std::uint32_t> categorical;
  std::vector<float> continuous;
  std::vector<float> labels;

  std::uint32_t index(std::size_t sample, std::size_t field) const { return categorical[sample * n_fields + field]; }
};

enum class Activation { none, relu, sigmoid };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::none: return "none";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
  }
  return "none";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "none") return Activation::none;
  if (s == "relu") return Activation::relu;
  if (s == "sigmoid") return Activation::sigmoid;
  throw DataError("unknown activation '" + s + "'");
}

// Per-field lookup table. Rows are items: weights is vocab x dim, so row v is the
// embedding of item v. When `tt` is set the rows are reconstructed from cores and
// `weights` is empty.
template <typename T>
struct EmbeddingTable {
  std::string field;
  std::size_t vocab = 0;
  std::size_t dim = 0;
  Matrix<T> weights;
  std::optional<TTCores<T>> tt;
};

// Restores a compressed lookup to the original width: e = weight * e' + bias.
template <typename T>
struct ProjectionLayer {
  Matrix<T> weight;  // t x k
  std::vector<T> bias;
};

template <typename T>
struct DenseLayer {
  std::string name;
  Matrix<T> weight;  // out x in
  std::vector<T> bias;  // empty: the layer has no bias
  Activation activation = Activation::none;
  double dropout_rate = 0.0;  // applied to the activated output in training mode

  std::size_t in_dim() const noexcept { return weight.cols(); }
  std::size_t out_dim() const noexcept { return weight.rows(); }
};

template <typename T>
struct DeepFM {
  std::size_t embedding_dim = 0;  // t
  std::size_t n_continuous = 0;
  bool fm_enabled = true;
  // MLP consumes the compressed lookups directly; projections feed only the FM term.
  bool fused = false;
  std::vector<EmbeddingTable<T>> tables;
  std::vector<ProjectionLayer<T>> projections;  // empty, or one per field
  std::vector<std::vector<T>> first_order;      // per field, vocab entries
  std::vector<DenseLayer<T>> mlp;               // hidden layers then the 1-unit output

  std::size_t n_fields() const noexcept { return tables.size(); }
  bool has_projections() const noexcept { return !projections.empty(); }

  std::size_t mlp_input_dim() const {
    std::size_t d = n_continuous;
    for (const auto& t : tables) d += fused ? t.dim : embedding_dim;
    return d;
  }

  const DenseLayer<T>* find_layer(const std::string& name) const {
    for (const auto& l : mlp)
      if (l.name == name) return &l;
    return nullptr;
  }

  template <typename U>
  DeepFM<U> cast() const {
    DeepFM<U> out;
    out.embedding_dim = embedding_dim;
    out.n_continuous = n_continuous;
    out.fm_enabled = fm_enabled;
    out.fused = fused;
    for (const auto& t : tables) {
      EmbeddingTable<U> c{t.field, t.vocab, t.dim, t.weights.template cast<U>(), std::nullopt};
      if (t.tt) c.tt = t.tt->template cast<U>();
      out.tables.push_back(std::move(c));
    }
    for (const auto& p : projections)
      out.projections.push_back({p.weight.template cast<U>(), std::vector<U>(p.bias.begin(), p.bias.end())});
    for (const auto& f : first_order) out.first_order.emplace_back(f.begin(), f.end());
    for (const auto& l : mlp)
      out.mlp.push_back({l.name, l.weight.template cast<U>(), std::vector<U>(l.bias.begin(), l.bias.end()),
                         l.activation, l.dropout_rate});
    return out;
  }
};

using DeepFMModel = DeepFM<float>;

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

struct ModelConfig {
  std::vector<std::string> field_names;
  std::vector<std::size_t> vocab_sizes;
  std::size_t embedding_dim = 16;
  std::size_t n_continuous = 0;
  std::vector<std::size_t> hidden = {400, 400, 400};
  double dropout = 0.5;
  bool fm = true;
};

// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); embedding rows use fan_in = t and
// first-order tables fan_in = vocab.
template <typename T = float>
DeepFM<T> make_deepfm(const ModelConfig& cfg, std::uint64_t seed) {
  if (cfg.field_names.size() != cfg.vocab_sizes.size()) throw UsageError("make_deepfm: field names/vocab mismatch");
  if (cfg.embedding_dim == 0) throw UsageError("make_deepfm: embedding_dim must be >= 1");
  Rng rng(seed);
  DeepFM<T> m;
  m.embedding_dim = cfg.embedding_dim;
  m.n_continuous = cfg.n_continuous;
  m.fm_enabled = cfg.fm;
  const double emb_bound = 1.0 / std::sqrt(static_cast<double>(cfg.embedding_dim));
  for (std::size_t f = 0; f < cfg.vocab_sizes.size(); ++f) {
    const std::size_t vocab = cfg.vocab_sizes[f];
    if (vocab == 0) throw UsageError("make_deepfm: field " + cfg.field_names[f] + " has empty vocabulary");
    EmbeddingTable<T> t{cfg.field_names[f], vocab, cfg.embedding_dim, Matrix<T>(vocab, cfg.embedding_dim), std::nullopt};
    for (auto& w : t.weights.flat()) w = static_cast<T>(uniform(rng, -emb_bound, emb_bound));
    m.tables.push_back(std::move(t));
  }
  for (std::size_t f = 0; f < cfg.vocab_sizes.size(); ++f) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.vocab_sizes[f]));
    std::vector<T> w(cfg.vocab_sizes[f]);
    for (auto& x : w) x = static_cast<T>(uniform(rng, -bound, bound));
    m.first_order.push_back(std::move(w));
  }
  std::size_t in = m.mlp_input_dim();
  for (std::size_t h = 0; h <= cfg.hidden.size(); ++h) {
    const bool output = h == cfg.hidden.size();
    const std::size_t out = output ? 1 : cfg.hidden[h];
    DenseLayer<T> layer{output ? "output" : "hidden" + std::to_string(h + 1), Matrix<T>(out, in), std::vector<T>(out),
                        output ? Activation::none : Activation::relu, output ? 0.0 : cfg.dropout};
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& w : layer.weight.flat()) w = static_cast<T>(uniform(rng, -bound, bound));
    for (auto& b : layer.bias) b = static_cast<T>(uniform(rng, -bound, bound));
    m.mlp.push_back(std::move(layer));
    in = out;
  }
  return m;
}

template <typename T>
void validate_model(const DeepFM<T>& m) {
  if (m.first_order.size() != m.tables.size()) throw ShapeError("model: first-order tables do not match fields");
  if (m.has_projections() && m.projections.size() != m.tables.size())
    throw ShapeError("model: projection count does not match fields");
  if (m.fused && !m.has_projections()) throw ShapeError("model: fused flag set without projections");
  for (std::size_t f = 0; f < m.tables.size(); ++f) {
    const auto& t = m.tables[f];
    if (t.tt) {
      if (t.tt->rows != t.vocab || t.tt->cols != t.dim) throw ShapeError("model: TT table shape mismatch for " + t.field);
    } else if (t.weights.rows() != t.vocab || t.weights.cols() != t.dim) {
      throw ShapeError("model: table shape mismatch for " + t.field);
    }
    if (m.first_order[f].size() != t.vocab) throw ShapeError("model: first-order size mismatch for " + t.field);
    if (m.has_projections()) {
      const auto& p = m.projections[f];
      if (p.weight.rows() != m.embedding_dim || p.weight.cols() != t.dim || p.bias.size() != m.embedding_dim)
        throw ShapeError("model: projection shape mismatch for " + t.field);
    } else if (t.dim != m.embedding_dim) {
      throw ShapeError("model: table " + t.field + " has dim " + std::to_string(t.dim) + " without a projection");
    }
  }
  if (m.mlp.empty()) throw ShapeError("model: empty MLP");
  std::size_t in = m.mlp_input_dim();
  for (const auto& l : m.mlp) {
    if (l.in_dim() != in) throw ShapeError("model: layer " + l.name + " expects input " + std::to_string(l.in_dim()) +
                                           ", got " + std::to_string(in));
    if (!l.bias.empty() && l.bias.size() != l.out_dim()) throw ShapeError("model: bias size mismatch in " + l.name);
    in = l.out_dim();
  }
  if (in != 1) throw ShapeError("model: output layer must produce one logit");
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct ParamInfo {
  std::string name;
  std::vector<std::size_t> shape;
  bool is_weight = true;  // enters the L2 term; biases do not
};

template <typename T>
struct ParamRef {
  ParamInfo info;
  std::span<T> data;
};

// Every trainable tensor in a fixed order. Also the checkpoint tensor list.
template <typename Model>
auto param_refs(Model& m) {
  using Elem = std::remove_reference_t<decltype(m.mlp.front().bias.front())>;
  std::vector<ParamRef<Elem>> refs;
  for (std::size_t f = 0; f < m.tables.size(); ++f) {
    auto& t = m.tables[f];
    const std::string base = "emb/" + t.field;
    if (t.tt) {
      for (std::size_t p = 0; p < t.tt->cores.size(); ++p) {
        auto& c = t.tt->cores[p];
        refs.push_back({{base + "/tt/core" + std::to_string(p), {c.rank_in, c.rows, c.cols, c.rank_out}, true},
                        std::span<Elem>(c.data)});
      }
    } else {
      refs.push_back({{base + "/table", {t.weights.rows(), t.weights.cols()}, true}, t.weights.flat()});
    }
    if (!m.projections.empty()) {
      auto& p = m.projections[f];
      refs.push_back({{base + "/proj/weight", {p.weight.rows(), p.weight.cols()}, true}, p.weight.flat()});
      refs.push_back({{base + "/proj/bias", {p.bias.size()}, false}, std::span<Elem>(p.bias)});
    }
  }
  for (std::size_t f = 0; f < m.first_order.size(); ++f) {
    refs.push_back({{"first_order/" + m.tables[f].field, {m.first_order[f].size()}, true},
                    std::span<Elem>(m.first_order[f])});
  }
  for (auto& l : m.mlp) {
    refs.push_back({{"mlp/" + l.name + "/weight", {l.weight.rows(), l.weight.cols()}, true}, l.weight.flat()});
    if (!l.bias.empty()) refs.push_back({{"mlp/" + l.name + "/bias", {l.bias.size()}, false}, std::span<Elem>(l.bias)});
  }
  return refs;
}

template <typename T>
DeepFM<T> zeros_like(const DeepFM<T>& m) {
  DeepFM<T> z = m;
  for (auto& r : param_refs(z)) std::fill(r.data.begin(), r.data.end(), T(0));
  return z;
}

template <typename T>
double l2_norm_squared(const DeepFM<T>& m) {
  long double acc = 0;
  for (const auto& r : param_refs(m))
    if (r.info.is_weight)
      for (T v : r.data) acc += static_cast<long double>(v) * v;
  return static_cast<double>(acc);
}

struct ParamCount {
  std::size_t embeddings = 0;   // tables or TT cores
  std::size_t projections = 0;  // projection weights and biases
  std::size_t first_order = 0;
  std::size_t mlp = 0;

  std::size_t embedding_total() const noexcept { return embeddings + projections; }
  std::size_t total() const noexcept { return embeddings + projections + first_order + mlp; }
};

template <typename T>
ParamCount param_count(const DeepFM<T>& m) {
  ParamCount c;
  for (const auto& t : m.tables) c.embeddings += t.tt ? t.tt->param_count() : t.weights.size();
  for (const auto& p : m.projections) c.projections += p.weight.size() + p.bias.size();
  for (const auto& f : m.first_order) c.first_order += f.size();
  for (const auto& l : m.mlp) c.mlp += l.weight.size() + l.bias.size();
  return c;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

enum class Mode { train, infer };

// Closed-form FM pairwise term 1/2 (||sum e_i||^2 - sum ||e_i||^2) per sample.
template <typename T>
std::vector<T> fm_second_order(const std::vector<Matrix<T>>& per_field) {
  if (per_field.empty()) return {};
  const std::size_t n = per_field.front().rows();
  const std::size_t t = per_field.front().cols();
  for (const auto& e : per_field)
    if (e.rows() != n || e.cols() != t) throw DimensionError("fm_second_order: fields differ in shape");
  std::vector<T> out(n, T(0));
  std::vector<T> sum(t);
  for (std::size_t s = 0; s < n; ++s) {
    std::fill(sum.begin(), sum.end(), T(0));
    T sq = 0;
    for (const auto& e : per_field) {
      auto row = e.row(s);
      for (std::size_t j = 0; j < t; ++j) {
        sum[j] += row[j];
        sq += row[j] * row[j];
      }
    }
    T tot = 0;
    for (std::size_t j = 0; j < t; ++j) tot += sum[j] * sum[j];
    out[s] = T(0.5) * (tot - sq);
  }
  return out;
}

struct ForwardOptions {
  Mode mode = Mode::infer;
  Rng* rng = nullptr;                        // required when dropout is active
  std::optional<double> dropout_override;   // replaces the rate of layers that carry dropout
};

template <typename T>
struct ForwardState {
  std::vector<Matrix<T>> lookup;    // per field, n x table.dim
  std::vector<Matrix<T>> embedded;  // per field, n x t
  Matrix<T> mlp_input;
  std::vector<Matrix<T>> pre;       // per layer pre-activation
  std::vector<Matrix<T>> post;      // per layer activated output (dropout applied)
  std::vector<Matrix<T>> mask;      // per layer dropout scale, empty when inactive
  std::vector<T> linear;
  std::vector<T> fm;
  std::vector<T> mlp_out;
  std::vector<T> logits;
};

template <typename T>
struct ForwardTrace {
  std::vector<T> logits;
  std::vector<T> predictions;
  std::vector<T> mlp_logits;  // output of the MLP path alone
  std::map<std::string, Matrix<T>> captured;
};

inline std::string mlp_tap(const std::string& layer) { return "mlp/" + layer; }
inline std::string embedding_tap(const std::string& field) { return "emb/" + field; }

namespace detail {

template <typename T>
void check_batch(const DeepFM<T>& m, const FeatureBatch& b) {
  if (b.n_fields != m.n_fields()) {
    throw DataError("batch has " + std::to_string(b.n_fields) + " categorical fields, model has " +
                    std::to_string(m.n_fields()));
  }
  if (b.n_continuous != m.n_continuous) {
    throw DataError("batch has " + std::to_string(b.n_continuous) + " continuous fields, model has " +
                    std::to_string(m.n_continuous));
  }
  if (b.categorical.size() != b.size * b.n_fields || b.continuous.size() != b.size * b.n_continuous)
    throw DataError("batch storage does not match its declared shape");
  for (std::size_t s = 0; s < b.size; ++s)
    for (std::size_t f = 0; f < b.n_fields; ++f)
      if (b.index(s, f) >= m.tables[f].vocab) {
        throw DataError("index " + std::to_string(b.index(s, f)) + " out of vocabulary for field " + m.tables[f].field +
                        " (size " + std::to_string(m.tables[f].vocab) + ")");
      }
}

template <typename T>
T activate(Activation a, T z) {
  switch (a) {
    case Activation::relu: return z > T(0) ? z : T(0);
    case Activation::sigmoid: return sigmoid(z);
    case Activation::none: return z;
  }
  return z;
}

template <typename T>
T activation_grad(Activation a, T z) {
  switch (a) {
    case Activation::relu: return z > T(0) ? T(1) : T(0);
    case Activation::sigmoid: {
      const T s = sigmoid(z);
      return s * (T(1) - s);
    }
    case Activation::none: return T(1);
  }
  return T(1);
}

}  // namespace detail

template <typename T>
void forward_pass(const DeepFM<T>& m, const FeatureBatch& b, const ForwardOptions& opt, ForwardState<T>& st) {
  detail::check_batch(m, b);
  const std::size_t n = b.size;
  const std::size_t d = m.n_fields();

  st.lookup.resize(d);
  st.embedded.resize(d);
  TTWorkspace ws;
  for (std::size_t f = 0; f < d; ++f) {
    const auto& table = m.tables[f];
    st.lookup[f] = Matrix<T>(n, table.dim);
    for (std::size_t s = 0; s < n; ++s) {
      const std::uint32_t idx = b.index(s, f);
      if (table.tt) {
        tt_reconstruct_row_into(*table.tt, idx, st.lookup[f].row(s), ws);
      } else {
        auto src = table.weights.row(idx);
        std::copy(src.begin(), src.end(), st.lookup[f].row(s).begin());
      }
    }
    if (m.has_projections()) {
      const auto& p = m.projections[f];
      kernels::affine(st.lookup[f], transpose(p.weight), std::span<const T>(p.bias), st.embedded[f]);
    } else {
      st.embedded[f] = st.lookup[f];
    }
  }

  st.linear.assign(n, T(0));
  for (std::size_t s = 0; s < n; ++s) {
    T acc = 0;
    for (std::size_t f = 0; f < d; ++f) acc += m.first_order[f][b.index(s, f)];
    st.linear[s] = acc;
  }
  st.fm = m.fm_enabled ? fm_second_order(st.embedded) : std::vector<T>(n, T(0));

  const std::size_t in_dim = m.mlp_input_dim();
  st.mlp_input = Matrix<T>(n, in_dim);
  for (std::size_t s = 0; s < n; ++s) {
    auto dst = st.mlp_input.row(s);
    std::size_t off = 0;
    for (std::size_t f = 0; f < d; ++f) {
      auto src = (m.fused ? st.lookup[f] : st.embedded[f]).row(s);
      std::copy(src.begin(), src.end(), dst.begin() + off);
      off += src.size();
    }
    for (std::size_t c = 0; c < m.n_continuous; ++c) dst[off + c] = b.continuous[s * m.n_continuous + c];
  }

  const std::size_t layers = m.mlp.size();
  st.pre.resize(layers);
  st.post.resize(layers);
  st.mask.resize(layers);
  const Matrix<T>* input = &st.mlp_input;
  for (std::size_t l = 0; l < layers; ++l) {
    const auto& layer = m.mlp[l];
    if (input->cols() != layer.in_dim()) throw ShapeError("forward: layer " + layer.name + " input mismatch");
    kernels::affine(*input, transpose(layer.weight), std::span<const T>(layer.bias), st.pre[l]);
    Matrix<T>& out = st.post[l];
    out = st.pre[l];
    for (auto& v : out.flat()) v = detail::activate(layer.activation, v);
    double rate = layer.dropout_rate;
    if (opt.dropout_override && rate > 0.0) rate = *opt.dropout_override;
    st.mask[l] = Matrix<T>();
    if (opt.mode == Mode::train && rate > 0.0) {
      if (opt.rng == nullptr) throw UsageError("forward: dropout in training mode needs a random generator");
      if (rate >= 1.0) throw UsageError("forward: dropout rate must be < 1");
      st.mask[l] = Matrix<T>(out.rows(), out.cols());
      const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
      auto mk = st.mask[l].flat();
      auto ov = out.flat();
      for (std::size_t i = 0; i < mk.size(); ++i) {
        mk[i] = uniform01(*opt.rng) < rate ? T(0) : keep_scale;
        ov[i] *= mk[i];
      }
    }
    input = &out;
  }
  st.mlp_out.assign(n, T(0));
  st.logits.assign(n, T(0));
  for (std::size_t s = 0; s < n; ++s) {
    st.mlp_out[s] = st.post.back()(s, 0);
    st.logits[s] = st.linear[s] + st.fm[s] + st.mlp_out[s];
    if (!std::isfinite(st.logits[s])) throw NumericError("forward: non-finite logit at sample " + std::to_string(s));
  }
}

template <typename T>
ForwardTrace<T> forward(const DeepFM<T>& m, const FeatureBatch& b, const ForwardOptions& opt = {},
                        const std::set<std::string>& capture = {}) {
  ForwardState<T> st;
  forward_pass(m, b, opt, st);
  ForwardTrace<T> tr;
  tr.logits = st.logits;
  tr.mlp_logits = st.mlp_out;
  tr.predictions.resize(st.logits.size());
  for (std::size_t s = 0; s < st.logits.size(); ++s) tr.predictions[s] = sigmoid(st.logits[s]);
  for (const auto& tap : capture) {
    bool found = false;
    for (std::size_t l = 0; l < m.mlp.size() && !found; ++l) {
      if (tap == mlp_tap(m.mlp[l].name)) {
        tr.captured[tap] = st.pre[l];
        found = true;
      }
    }
    for (std::size_t f = 0; f < m.n_fields() && !found; ++f) {
      if (tap == embedding_tap(m.tables[f].field)) {
        tr.captured[tap] = st.embedded[f];
        found = true;
      }
    }
    if (!found) throw UsageError("unknown tap '" + tap + "'");
  }
  return tr;
}

// Binary cross-entropy (from logits) plus l2_ratio * sum ||W||^2.
struct LossValue {
  double bce = 0;
  double l2 = 0;
  double total() const noexcept { return bce + l2; }
};

template <typename T>
double bce_from_logits(std::span<const T> logits, std::span<const T> labels) {
  if (logits.size() != labels.size()) throw DimensionError("bce: logits/labels length mismatch");
  if (logits.empty()) return 0.0;
  long double acc = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i];
    const double y = labels[i];
    if (y != 0.0 && y != 1.0) throw DataError("bce: label " + std::to_string(y) + " not in {0,1}");
    acc += softplus(z) - y * z;
  }
  return static_cast<double>(acc / static_cast<long double>(logits.size()));
}

// Gradients of the loss w.r.t. every parameter, written into `grads` (shaped like
// the model; overwritten). Returns the loss at the current parameters.
template <typename T>
LossValue compute_gradients(const DeepFM<T>& m, const FeatureBatch& b, double l2_ratio, const ForwardOptions& opt,
                            DeepFM<T>& grads, ForwardState<T>& st) {
  if (b.labels.size() != b.size) throw DataError("compute_gradients: batch has no labels");
  forward_pass(m, b, opt, st);
  const std::size_t n = b.size;
  const std::size_t d = m.n_fields();
  const std::size_t t = m.embedding_dim;

  std::vector<T> labels(b.labels.begin(), b.labels.end());
  LossValue loss;
  loss.bce = bce_from_logits(std::span<const T>(st.logits), std::span<const T>(labels));
  loss.l2 = l2_ratio * l2_norm_squared(m);

  for (auto& r : param_refs(grads)) std::fill(r.data.begin(), r.data.end(), T(0));

  std::vector<T> g(n);
  for (std::size_t s = 0; s < n; ++s) g[s] = (sigmoid(st.logits[s]) - labels[s]) / static_cast<T>(n);

  // MLP, back to front.
  Matrix<T> grad_z(n, 1);
  for (std::size_t s = 0; s < n; ++s) grad_z(s, 0) = g[s];
  Matrix<T> grad_in;
  for (std::size_t l = m.mlp.size(); l-- > 0;) {
    const auto& layer = m.mlp[l];
    // grad_z holds d/d(post[l]); fold in dropout scale and activation slope.
    {
      auto gz = grad_z.flat();
      auto pre = st.pre[l].flat();
      const bool masked = !st.mask[l].empty();
      for (std::size_t i = 0; i < gz.size(); ++i) {
        T v = gz[i];
        if (masked) v *= st.mask[l].flat()[i];
        gz[i] = v * detail::activation_grad(layer.activation, pre[i]);
      }
    }
    const Matrix<T>& input = l == 0 ? st.mlp_input : st.post[l - 1];
    kernels::accumulate_weight_grad(grad_z, input, grads.mlp[l].weight, std::span<T>(grads.mlp[l].bias));
    kernels::backprop_input(grad_z, layer.weight, grad_in);
    grad_z = std::move(grad_in);
  }
  const Matrix<T>& grad_x0 = grad_z;

  // Embedding path: MLP slice plus FM term.
  std::vector<T> sum(t);
  std::vector<Matrix<T>> grad_e(d, Matrix<T>(n, t));
  std::vector<Matrix<T>> grad_c(d);
  for (std::size_t f = 0; f < d; ++f) grad_c[f] = Matrix<T>(n, m.tables[f].dim);
  for (std::size_t s = 0; s < n; ++s) {
    std::size_t off = 0;
    for (std::size_t f = 0; f < d; ++f) {
      const std::size_t width = m.fused ? m.tables[f].dim : t;
      auto src = grad_x0.row(s).subspan(off, width);
      auto dst = m.fused ? grad_c[f].row(s) : grad_e[f].row(s);
      std::copy(src.begin(), src.end(), dst.begin());
      off += width;
    }
    if (m.fm_enabled) {
      std::fill(sum.begin(), sum.end(), T(0));
      for (std::size_t f = 0; f < d; ++f) {
        auto e = st.embedded[f].row(s);
        for (std::size_t j = 0; j < t; ++j) sum[j] += e[j];
      }
      for (std::size_t f = 0; f < d; ++f) {
        auto e = st.embedded[f].row(s);
        auto ge = grad_e[f].row(s);
        for (std::size_t j = 0; j < t; ++j) ge[j] += g[s] * (sum[j] - e[j]);
      }
    }
  }
  for (std::size_t f = 0; f < d; ++f) {
    auto& table = m.tables[f];
    if (m.has_projections()) {
      auto& p = m.projections[f];
      auto& gp = grads.projections[f];
      kernels::accumulate_weight_grad(grad_e[f], st.lookup[f], gp.weight, std::span<T>(gp.bias));
      Matrix<T> back;
      kernels::backprop_input(grad_e[f], p.weight, back);
      auto dst = grad_c[f].flat();
      auto src = back.flat();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    } else {
      grad_c[f] = std::move(grad_e[f]);
    }
    auto& gt = grads.tables[f];
    for (std::size_t s = 0; s < n; ++s) {
      const std::uint32_t idx = b.index(s, f);
      if (table.tt) {
        tt_row_backward(*table.tt, idx, std::span<const T>(grad_c[f].row(s)), gt.tt->cores);
      } else {
        auto dst = gt.weights.row(idx);
        auto src = grad_c[f].row(s);
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
      }
      grads.first_order[f][idx] += g[s];
    }
  }

  if (l2_ratio != 0.0) {
    auto prefs = param_refs(m);
    auto grefs = param_refs(grads);
    const T two_r = static_cast<T>(2.0 * l2_ratio);
    for (std::size_t i = 0; i < prefs.size(); ++i) {
      if (!prefs[i].info.is_weight) continue;
      auto pd = prefs[i].data;
      auto gd = grefs[i].data;
      for (std::size_t j = 0; j < pd.size(); ++j) gd[j] += two_r * pd[j];
    }
  }
  for (const auto& r : param_refs(grads))
    if (!all_finite(std::span<const T>(r.data.data(), r.data.size())))
      throw NumericError("non-finite gradient in " + r.info.name);
  return loss;
}

}  // namespace lrc
