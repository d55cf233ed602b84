#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "lrc/error.hpp"
#include "lrc/linalg.hpp"
#include "lrc/nn.hpp"
#include "lrc/stats.hpp"
#include "lrc/tt.hpp"

namespace lrc {

// Principal subspace of a tap's covariance. Eigenvalues slightly below zero
// (rounding) are clamped; clearly negative ones abort.
struct PcaBasis {
  std::vector<double> mean;
  std::vector<double> eigenvalues;  // all of them, descending, clamped at 0
  Matrix<double> basis;             // dim x k
};

namespace detail {

inline PcaBasis pca_basis(const MomentAccumulator& acc, std::size_t k, const std::string& what) {
  if (k < 1 || k > acc.dim()) {
    throw RankError(what + ": rank " + std::to_string(k) + " outside [1, " + std::to_string(acc.dim()) + "]");
  }
  Covariance c = covariance(acc);
  EigenResult e = sym_eigen(c.cov);
  const double scale = std::max(1.0, e.values.empty() ? 0.0 : std::abs(e.values.front()));
  for (double& l : e.values) {
    if (l < -1e-9 * scale) throw NumericError(what + ": covariance eigenvalue " + std::to_string(l) + " is negative");
    if (l < 0) l = 0;
  }
  PcaBasis p{std::move(c.mean), std::move(e.values), Matrix<double>(acc.dim(), k)};
  for (std::size_t i = 0; i < acc.dim(); ++i)
    for (std::size_t j = 0; j < k; ++j) p.basis(i, j) = e.vectors(i, j);
  return p;
}

inline double leading_fraction(const std::vector<double>& values, std::size_t k) {
  double top = 0, total = 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    total += values[i];
    if (i < k) top += values[i];
  }
  return total > 0 ? top / total : 1.0;
}

template <typename T>
Matrix<double> to_double(const Matrix<T>& m) {
  return m.template cast<double>();
}

template <typename T>
Matrix<T> from_double(const Matrix<double>& m) {
  return m.template cast<T>();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// MLP layers
// ---------------------------------------------------------------------------

struct FcCompressionPlan {
  std::string layer;
  std::size_t rank = 0;
  Matrix<double> basis;  // m x k, orthonormal columns
  std::vector<double> mean;
  std::vector<double> eigenvalues;
  bool insert_relu = true;

  double retained_fraction() const { return detail::leading_fraction(eigenvalues, rank); }
};

// Top-k principal directions of the layer's pre-activation outputs.
inline FcCompressionPlan afm_plan_fc(const std::string& layer, const MomentAccumulator& acc, std::size_t k,
                                     bool insert_relu = true) {
  if (acc.count() == 0) throw EmptyAccumulatorError("afm_plan_fc: no samples for " + layer);
  if (k < 1 || k > acc.dim()) {
    throw RankError("afm_plan_fc: rank " + std::to_string(k) + " outside [1, " + std::to_string(acc.dim()) + "] for " +
                    layer);
  }
  if (acc.count() < acc.dim()) {
    throw DataError("afm_plan_fc: " + std::to_string(acc.count()) + " samples are fewer than the output dimension " +
                    std::to_string(acc.dim()) + " of " + layer);
  }
  PcaBasis p = detail::pca_basis(acc, k, "afm_plan_fc(" + layer + ")");
  return {layer, k, std::move(p.basis), std::move(p.mean), std::move(p.eigenvalues), insert_relu};
}

// Reconstruction mean + U U^T (y - mean) of each row of y.
inline Matrix<double> afm_reconstruct(const Matrix<double>& basis, const std::vector<double>& mean,
                                      const Matrix<double>& y) {
  const std::size_t m = basis.rows(), k = basis.cols();
  if (y.cols() != m || mean.size() != m) throw DimensionError("afm_reconstruct: dimension mismatch");
  Matrix<double> out(y.rows(), m);
  std::vector<double> c(k);
  for (std::size_t s = 0; s < y.rows(); ++s) {
    std::fill(c.begin(), c.end(), 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      const double d = y(s, i) - mean[i];
      for (std::size_t j = 0; j < k; ++j) c[j] += basis(i, j) * d;
    }
    for (std::size_t i = 0; i < m; ++i) {
      double v = mean[i];
      for (std::size_t j = 0; j < k; ++j) v += basis(i, j) * c[j];
      out(s, i) = v;
    }
  }
  return out;
}

// y = W x + b  ->  B(A x) with A = U_k^T W (no bias) and B = U_k with bias
// E[y] + U_k U_k^T (b - E[y]). B keeps the original activation and dropout.
template <typename T>
std::pair<DenseLayer<T>, DenseLayer<T>> afm_apply_fc(const DenseLayer<T>& layer, const FcCompressionPlan& plan) {
  if (plan.layer != layer.name) throw ShapeError("afm_apply_fc: plan for " + plan.layer + " applied to " + layer.name);
  const std::size_t m = layer.out_dim(), k = plan.rank;
  if (plan.basis.rows() != m || plan.basis.cols() != k || plan.mean.size() != m)
    throw ShapeError("afm_apply_fc: plan shape does not match layer " + layer.name);
  const Matrix<double> w = detail::to_double(layer.weight);
  const Matrix<double> a = matmul(transpose(plan.basis), w);

  std::vector<double> centered(m);
  for (std::size_t i = 0; i < m; ++i) centered[i] = static_cast<double>(layer.bias[i]) - plan.mean[i];
  std::vector<double> coef(k, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < k; ++j) coef[j] += plan.basis(i, j) * centered[i];
  std::vector<T> bias_b(m);
  for (std::size_t i = 0; i < m; ++i) {
    double v = plan.mean[i];
    for (std::size_t j = 0; j < k; ++j) v += plan.basis(i, j) * coef[j];
    bias_b[i] = static_cast<T>(v);
  }
  DenseLayer<T> la{layer.name + ".a", detail::from_double<T>(a), std::vector<T>{},
                   plan.insert_relu ? Activation::relu : Activation::none, 0.0};
  DenseLayer<T> lb{layer.name + ".b", detail::from_double<T>(plan.basis), std::move(bias_b), layer.activation,
                   layer.dropout_rate};
  return {std::move(la), std::move(lb)};
}

// Weight-SVD split: A = S_k^{1/2} V_k^T (no bias), B = U_k S_k^{1/2} with the
// original bias.
template <typename T>
std::pair<DenseLayer<T>, DenseLayer<T>> svd_compress_fc(const DenseLayer<T>& layer, std::size_t k,
                                                        bool insert_relu = true) {
  const LowRankFactors f = low_rank_factors_svd(detail::to_double(layer.weight), k);
  DenseLayer<T> la{layer.name + ".a", detail::from_double<T>(f.right), std::vector<T>{},
                   insert_relu ? Activation::relu : Activation::none, 0.0};
  DenseLayer<T> lb{layer.name + ".b", detail::from_double<T>(f.left), layer.bias, layer.activation,
                   layer.dropout_rate};
  return {std::move(la), std::move(lb)};
}

// Hidden layers after the first; the first layer and the output stay dense.
template <typename T>
std::vector<std::string> compressible_layers(const DeepFM<T>& m) {
  std::vector<std::string> out;
  for (std::size_t l = 1; l + 1 < m.mlp.size(); ++l) {
    const auto& name = m.mlp[l].name;
    if (name.ends_with(".a") || name.ends_with(".b")) continue;
    out.push_back(name);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Embedding tables
// ---------------------------------------------------------------------------

struct EmbFieldPlan {
  std::string field;
  Matrix<double> basis;  // t x k
  std::vector<double> mean;
  std::vector<double> eigenvalues;

  double retained_fraction() const { return detail::leading_fraction(eigenvalues, basis.cols()); }
};

struct EmbCompressionPlan {
  std::size_t rank = 0;
  bool fuse_into_first_fc = true;
  std::vector<EmbFieldPlan> fields;
};

// One PCA per field over the scanned embedding outputs; frequent items weigh
// in proportion to how often they occur. Constant fields get canonical axes.
inline EmbCompressionPlan afm_plan_embedding(const TapSet& taps, const std::vector<std::string>& fields, std::size_t k,
                                             bool fuse = true) {
  EmbCompressionPlan plan{k, fuse, {}};
  for (const auto& f : fields) {
    auto it = taps.find(embedding_tap(f));
    if (it == taps.end()) throw DataError("afm_plan_embedding: no statistics for field " + f);
    if (it->second.count() == 0) throw EmptyAccumulatorError("afm_plan_embedding: no samples for field " + f);
    PcaBasis p = detail::pca_basis(it->second, k, "afm_plan_embedding(" + f + ")");
    plan.fields.push_back({f, std::move(p.basis), std::move(p.mean), std::move(p.eigenvalues)});
  }
  return plan;
}

namespace detail {

template <typename T>
void require_plain_embeddings(const DeepFM<T>& m, const std::string& what) {
  if (m.has_projections()) throw UsageError(what + ": embeddings are already compressed");
  for (const auto& t : m.tables)
    if (t.tt) throw UsageError(what + ": embeddings are already TT-factored");
}

}  // namespace detail

// Merges each projection into the first MLP layer: block f of the weight
// becomes W'_f P_f and the bias absorbs sum_f W'_f b_f. Projections stay for
// the FM term.
template <typename T>
void fuse_projection_into_first_fc(DeepFM<T>& m) {
  if (!m.has_projections()) throw UsageError("fuse: model has no projection layers");
  if (m.fused) throw UsageError("fuse: projections are already fused");
  const std::size_t t = m.embedding_dim;
  const std::size_t d = m.n_fields();
  auto& first = m.mlp.front();
  if (first.in_dim() != d * t + m.n_continuous)
    throw ShapeError("fuse: first layer does not consume the concatenated embeddings directly");
  const std::size_t o = first.out_dim();
  std::size_t new_in = m.n_continuous;
  for (const auto& tb : m.tables) new_in += tb.dim;

  Matrix<T> w(o, new_in);
  std::vector<double> bias(first.bias.begin(), first.bias.end());
  std::size_t off_new = 0;
  for (std::size_t f = 0; f < d; ++f) {
    const auto& p = m.projections[f];
    const std::size_t k = p.weight.cols();
    for (std::size_t r = 0; r < o; ++r) {
      const T* wr = first.weight.row(r).data() + f * t;
      for (std::size_t j = 0; j < k; ++j) {
        double acc = 0;
        for (std::size_t i = 0; i < t; ++i) acc += static_cast<double>(wr[i]) * static_cast<double>(p.weight(i, j));
        w(r, off_new + j) = static_cast<T>(acc);
      }
      double bacc = 0;
      for (std::size_t i = 0; i < t; ++i) bacc += static_cast<double>(wr[i]) * static_cast<double>(p.bias[i]);
      bias[r] += bacc;
    }
    off_new += k;
  }
  for (std::size_t r = 0; r < o; ++r)
    for (std::size_t c = 0; c < m.n_continuous; ++c) w(r, off_new + c) = first.weight(r, d * t + c);
  first.weight = std::move(w);
  for (std::size_t r = 0; r < o; ++r) first.bias[r] = static_cast<T>(bias[r]);
  m.fused = true;
}

// Tables become U_k^T D_i (stored vocab x k); projections restore
// E[e] + U_k U_k^T (e - E[e]).
template <typename T>
void afm_apply_embedding(DeepFM<T>& m, const EmbCompressionPlan& plan) {
  detail::require_plain_embeddings(m, "afm_apply_embedding");
  if (plan.fields.size() != m.n_fields())
    throw DimensionError("afm_apply_embedding: plan covers " + std::to_string(plan.fields.size()) + " fields, model has " +
                         std::to_string(m.n_fields()));
  const std::size_t t = m.embedding_dim, k = plan.rank;
  std::vector<ProjectionLayer<T>> projections;
  for (std::size_t f = 0; f < m.n_fields(); ++f) {
    const auto& fp = plan.fields[f];
    auto& table = m.tables[f];
    if (fp.field != table.field) throw DimensionError("afm_apply_embedding: plan field " + fp.field + " != " + table.field);
    if (fp.basis.rows() != t || fp.basis.cols() != k || fp.mean.size() != t)
      throw DimensionError("afm_apply_embedding: basis shape mismatch for field " + table.field);
    Matrix<T> compact(table.vocab, k);
    for (std::size_t v = 0; v < table.vocab; ++v) {
      auto e = table.weights.row(v);
      for (std::size_t j = 0; j < k; ++j) {
        double acc = 0;
        for (std::size_t i = 0; i < t; ++i) acc += fp.basis(i, j) * static_cast<double>(e[i]);
        compact(v, j) = static_cast<T>(acc);
      }
    }
    // bias = (I - U U^T) E[e]
    std::vector<double> coef(k, 0.0);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < k; ++j) coef[j] += fp.basis(i, j) * fp.mean[i];
    ProjectionLayer<T> proj{detail::from_double<T>(fp.basis), std::vector<T>(t)};
    for (std::size_t i = 0; i < t; ++i) {
      double v = fp.mean[i];
      for (std::size_t j = 0; j < k; ++j) v -= fp.basis(i, j) * coef[j];
      proj.bias[i] = static_cast<T>(v);
    }
    table.weights = std::move(compact);
    table.dim = k;
    projections.push_back(std::move(proj));
  }
  m.projections = std::move(projections);
  if (plan.fuse_into_first_fc) fuse_projection_into_first_fc(m);
}

// Weight-SVD of each item-major table D = U S V^T: rows become U_k S_k^{1/2},
// the projection is V_k S_k^{1/2} with zero bias.
template <typename T>
void svd_compress_embedding(DeepFM<T>& m, std::size_t k, bool fuse = true) {
  detail::require_plain_embeddings(m, "svd_compress_embedding");
  std::vector<ProjectionLayer<T>> projections;
  for (auto& table : m.tables) {
    const std::size_t full = std::min(table.vocab, table.dim);
    if (k < 1 || k > full) {
      throw RankError("svd_compress_embedding: rank " + std::to_string(k) + " outside [1, " + std::to_string(full) +
                      "] for field " + table.field);
    }
    const LowRankFactors f = low_rank_factors_svd(detail::to_double(table.weights), k);
    table.weights = detail::from_double<T>(f.left);
    table.dim = k;
    projections.push_back({detail::from_double<T>(transpose(f.right)), std::vector<T>(m.embedding_dim, T(0))});
  }
  m.projections = std::move(projections);
  if (fuse) fuse_projection_into_first_fc(m);
}

struct TtPlan {
  std::size_t parts = 3;
  std::size_t max_rank = 16;
  std::vector<std::size_t> row_factors;  // empty: chosen per field from the vocabulary size
  std::vector<std::size_t> col_factors;  // empty: chosen from the embedding width
};

template <typename T>
void tt_compress_embedding(DeepFM<T>& m, const TtPlan& plan) {
  detail::require_plain_embeddings(m, "tt_compress_embedding");
  if (plan.max_rank < 1) throw RankError("tt_compress_embedding: max rank must be >= 1");
  std::vector<TTCores<T>> out;
  for (auto& table : m.tables) {
    const auto rows = plan.row_factors.empty() ? tt_auto_factors(table.vocab, plan.parts) : plan.row_factors;
    const auto cols = plan.col_factors.empty() ? tt_auto_factors(table.dim, plan.parts) : plan.col_factors;
    out.push_back(tt_decompose_matrix(detail::to_double(table.weights), rows, cols, plan.max_rank).template cast<T>());
  }
  for (std::size_t f = 0; f < m.n_fields(); ++f) {
    m.tables[f].tt = std::move(out[f]);
    m.tables[f].weights = Matrix<T>();
  }
}

// ---------------------------------------------------------------------------
// Model-level drivers and reports
// ---------------------------------------------------------------------------

enum class Method { afm_mlp, svd_mlp, afm_emb, svd_emb, tt_emb };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::afm_mlp: return "afm-mlp";
    case Method::svd_mlp: return "svd-mlp";
    case Method::afm_emb: return "afm-emb";
    case Method::svd_emb: return "svd-emb";
    case Method::tt_emb: return "tt-emb";
  }
  return "?";
}

inline Method method_from_string(const std::string& s) {
  for (Method m : {Method::afm_mlp, Method::svd_mlp, Method::afm_emb, Method::svd_emb, Method::tt_emb})
    if (s == to_string(m)) return m;
  throw UsageError("unknown compression method '" + s + "' (afm-mlp, svd-mlp, afm-emb, svd-emb, tt-emb)");
}

inline bool targets_mlp(Method m) { return m == Method::afm_mlp || m == Method::svd_mlp; }
inline bool needs_calibration(Method m) { return m == Method::afm_mlp || m == Method::afm_emb; }

// Rank 0 means full rank of each target.
inline constexpr std::size_t kFullRank = 0;

struct CompressOptions {
  std::size_t rank = kFullRank;
  bool insert_relu = true;
  bool fuse = true;
  TtPlan tt;  // max_rank is replaced by `rank`; full rank means unbounded bonds
};

inline nlohmann::json param_count_json(const ParamCount& c) {
  return {{"embeddings", c.embeddings},
          {"projections", c.projections},
          {"first_order", c.first_order},
          {"mlp", c.mlp},
          {"embedding_total", c.embedding_total()},
          {"total", c.total()}};
}

struct CompressionReport {
  Method method = Method::afm_mlp;
  std::map<std::string, std::size_t> ranks;  // per layer or field
  ParamCount before;
  ParamCount after;
  std::map<std::string, double> retained;  // eigenvalue (AFM) or energy (SVD) fraction
  std::string retained_basis;
  std::vector<std::string> split_layers;
  std::vector<std::string> untouched_layers;
  bool insert_relu = false;
  bool fused = false;
  std::vector<std::string> notes;

  nlohmann::json to_json() const {
    nlohmann::json j{{"method", to_string(method)},
                     {"ranks", ranks},
                     {"params_before", param_count_json(before)},
                     {"params_after", param_count_json(after)},
                     {"retained_fraction", retained},
                     {"retained_fraction_basis", retained_basis},
                     {"notes", notes}};
    if (targets_mlp(method)) {
      j["split_layers"] = split_layers;
      j["untouched_layers"] = untouched_layers;
      j["insert_relu"] = insert_relu;
    } else if (method != Method::tt_emb) {
      j["fused"] = fused;
    }
    return j;
  }
};

template <typename T>
std::set<std::string> required_taps(const DeepFM<T>& m, Method method) {
  std::set<std::string> taps;
  if (method == Method::afm_mlp)
    for (const auto& l : compressible_layers(m)) taps.insert(mlp_tap(l));
  if (method == Method::afm_emb)
    for (const auto& t : m.tables) taps.insert(embedding_tap(t.field));
  return taps;
}

namespace detail {

inline double energy_fraction(const Matrix<double>& w, std::size_t k) {
  const SvdResult s = svd_thin(w);
  std::vector<double> sq;
  for (double v : s.singular_values) sq.push_back(v * v);
  return leading_fraction(sq, k);
}

}  // namespace detail

// Compresses `m` in place. AFM methods need calibration statistics for the
// taps named by required_taps().
template <typename T>
CompressionReport compress_model(DeepFM<T>& m, Method method, const CompressOptions& opt, const TapSet* taps = nullptr) {
  validate_model(m);
  CompressionReport rep;
  rep.method = method;
  rep.before = param_count(m);
  rep.insert_relu = opt.insert_relu;
  if (targets_mlp(method)) {
    const auto targets = compressible_layers(m);
    if (targets.empty()) throw UsageError(std::string(to_string(method)) + ": no uncompressed hidden layers after the first");
    rep.retained_basis = method == Method::afm_mlp ? "covariance eigenvalues" : "squared singular values";
    std::vector<DenseLayer<T>> mlp;
    for (const auto& layer : m.mlp) {
      if (std::find(targets.begin(), targets.end(), layer.name) == targets.end()) {
        rep.untouched_layers.push_back(layer.name);
        mlp.push_back(layer);
        continue;
      }
      const std::size_t k = opt.rank == kFullRank ? layer.out_dim() : opt.rank;
      if (k > std::min(layer.out_dim(), layer.in_dim()) && method == Method::svd_mlp)
        throw RankError("svd-mlp: rank " + std::to_string(k) + " exceeds min dimension of " + layer.name);
      std::pair<DenseLayer<T>, DenseLayer<T>> parts;
      if (method == Method::afm_mlp) {
        if (taps == nullptr || !taps->count(mlp_tap(layer.name)))
          throw DataError("afm-mlp: no calibration statistics for " + mlp_tap(layer.name));
        const auto plan = afm_plan_fc(layer.name, taps->at(mlp_tap(layer.name)), k, opt.insert_relu);
        rep.retained[layer.name] = plan.retained_fraction();
        parts = afm_apply_fc(layer, plan);
      } else {
        rep.retained[layer.name] = detail::energy_fraction(detail::to_double(layer.weight), k);
        parts = svd_compress_fc(layer, k, opt.insert_relu);
      }
      rep.ranks[layer.name] = k;
      rep.split_layers.push_back(layer.name);
      mlp.push_back(std::move(parts.first));
      mlp.push_back(std::move(parts.second));
    }
    m.mlp = std::move(mlp);
  } else if (method == Method::afm_emb || method == Method::svd_emb) {
    const std::size_t k = opt.rank == kFullRank ? m.embedding_dim : opt.rank;
    if (method == Method::afm_emb) {
      if (taps == nullptr) throw DataError("afm-emb: calibration statistics required");
      std::vector<std::string> fields;
      for (const auto& t : m.tables) fields.push_back(t.field);
      const auto plan = afm_plan_embedding(*taps, fields, k, opt.fuse);
      for (const auto& fp : plan.fields) rep.retained[fp.field] = fp.retained_fraction();
      rep.retained_basis = "covariance eigenvalues";
      afm_apply_embedding(m, plan);
    } else {
      for (const auto& t : m.tables)
        if (k >= 1 && k <= std::min(t.vocab, t.dim)) rep.retained[t.field] = detail::energy_fraction(detail::to_double(t.weights), k);
      rep.retained_basis = "squared singular values";
      svd_compress_embedding(m, k, opt.fuse);
      rep.notes.push_back("svd-emb projection bias is zero (pure weight factorization, no mean term)");
    }
    for (const auto& t : m.tables) rep.ranks[t.field] = k;
    rep.fused = m.fused;
  } else {
    TtPlan plan = opt.tt;
    plan.max_rank = opt.rank == kFullRank ? kUnboundedRank : opt.rank;
    tt_compress_embedding(m, plan);
    for (const auto& t : m.tables) rep.ranks[t.field] = *std::max_element(t.tt->ranks.begin(), t.tt->ranks.end());
    rep.notes.push_back("tt-emb lookups reconstruct each row by contracting the cores");
  }
  rep.after = param_count(m);
  validate_model(m);
  return rep;
}

}  // namespace lrc
