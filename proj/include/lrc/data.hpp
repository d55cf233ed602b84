#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "lrc/error.hpp"
#include "lrc/nn.hpp"
#include "lrc/util.hpp"

namespace lrc {

struct FieldSpec {
  std::string name;
  std::size_t vocab = 1;  // index 0 is the out-of-vocabulary slot
};

// Labelled click rows: categorical indices (rows x fields) and transformed
// continuous values (rows x n_continuous). Immutable after construction.
struct ClickDataset {
  std::vector<FieldSpec> fields;
  std::size_t n_continuous = 0;
  std::vector<std::uint8_t> labels;
  std::vector<std::uint32_t> categorical;
  std::vector<float> continuous;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t n_fields() const noexcept { return fields.size(); }
  bool empty() const noexcept { return labels.empty(); }

  std::vector<std::size_t> vocab_sizes() const {
    std::vector<std::size_t> v;
    for (const auto& f : fields) v.push_back(f.vocab);
    return v;
  }
  std::vector<std::string> field_names() const {
    std::vector<std::string> v;
    for (const auto& f : fields) v.push_back(f.name);
    return v;
  }

  FeatureBatch gather(std::span<const std::size_t> rows) const {
    FeatureBatch b;
    b.size = rows.size();
    b.n_fields = n_fields();
    b.n_continuous = n_continuous;
    b.categorical.resize(b.size * b.n_fields);
    b.continuous.resize(b.size * n_continuous);
    b.labels.resize(b.size);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const std::size_t r = rows[i];
      std::copy_n(categorical.begin() + r * b.n_fields, b.n_fields, b.categorical.begin() + i * b.n_fields);
      std::copy_n(continuous.begin() + r * n_continuous, n_continuous, b.continuous.begin() + i * n_continuous);
      b.labels[i] = static_cast<float>(labels[r]);
    }
    return b;
  }

  FeatureBatch slice(std::size_t begin, std::size_t count) const {
    count = std::min(count, size() - std::min(begin, size()));
    std::vector<std::size_t> rows(count);
    std::iota(rows.begin(), rows.end(), begin);
    return gather(rows);
  }

  ClickDataset subset(std::span<const std::size_t> rows) const {
    ClickDataset out;
    out.fields = fields;
    out.n_continuous = n_continuous;
    out.labels.reserve(rows.size());
    out.categorical.reserve(rows.size() * n_fields());
    out.continuous.reserve(rows.size() * n_continuous);
    for (std::size_t r : rows) {
      out.labels.push_back(labels[r]);
      out.categorical.insert(out.categorical.end(), categorical.begin() + r * n_fields(),
                             categorical.begin() + (r + 1) * n_fields());
      out.continuous.insert(out.continuous.end(), continuous.begin() + r * n_continuous,
                            continuous.begin() + (r + 1) * n_continuous);
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Field dictionaries
// ---------------------------------------------------------------------------

// Token -> index map for one categorical field. tokens[i] has index i + 1;
// index 0 is reserved for unseen, rare and empty tokens.
class FieldDictionary {
 public:
  FieldDictionary() = default;
  FieldDictionary(std::string field, std::size_t min_count, std::vector<std::string> tokens)
      : field_(std::move(field)), min_count_(min_count), tokens_(std::move(tokens)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!lookup_.emplace(tokens_[i], static_cast<std::uint32_t>(i + 1)).second)
        throw DataError("dictionary " + field_ + ": duplicate token '" + tokens_[i] + "'");
    }
  }

  // Retains tokens seen at least min_count times, ordered by descending count
  // then lexicographically.
  static FieldDictionary build(std::string field, const std::unordered_map<std::string, std::size_t>& counts,
                               std::size_t min_count) {
    std::vector<std::pair<std::string, std::size_t>> kept;
    for (const auto& [tok, c] : counts)
      if (!tok.empty() && c >= min_count) kept.emplace_back(tok, c);
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
      return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    std::vector<std::string> tokens;
    tokens.reserve(kept.size());
    for (auto& kv : kept) tokens.push_back(std::move(kv.first));
    return FieldDictionary(std::move(field), min_count, std::move(tokens));
  }

  std::uint32_t index_of(std::string_view token) const {
    if (token.empty()) return 0;
    auto it = lookup_.find(std::string(token));
    return it == lookup_.end() ? 0 : it->second;
  }
  // Empty string for the OOV slot.
  const std::string& token_of(std::uint32_t index) const {
    static const std::string kEmpty;
    return index == 0 || index > tokens_.size() ? kEmpty : tokens_[index - 1];
  }

  const std::string& field() const noexcept { return field_; }
  std::size_t min_count() const noexcept { return min_count_; }
  std::size_t vocab() const noexcept { return tokens_.size() + 1; }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

 private:
  std::string field_;
  std::size_t min_count_ = 1;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::uint32_t> lookup_;
};

inline nlohmann::json dictionaries_to_json(const std::vector<FieldDictionary>& dicts) {
  nlohmann::json fields = nlohmann::json::array();
  for (const auto& d : dicts) fields.push_back({{"field", d.field()}, {"min_count", d.min_count()}, {"tokens", d.tokens()}});
  return {{"fields", fields}};
}

inline std::vector<FieldDictionary> dictionaries_from_json(const nlohmann::json& j) {
  std::vector<FieldDictionary> out;
  try {
    for (const auto& f : j.at("fields"))
      out.emplace_back(f.at("field").get<std::string>(), f.at("min_count").get<std::size_t>(),
                       f.at("tokens").get<std::vector<std::string>>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed dictionary JSON: ") + e.what());
  }
  return out;
}

// ---------------------------------------------------------------------------
// TSV click logs: label \t continuous... \t categorical...
// ---------------------------------------------------------------------------

struct TsvLayout {
  std::size_t n_continuous = 13;
  std::size_t n_categorical = 26;

  static TsvLayout criteo() { return {13, 26}; }
  static TsvLayout avazu() { return {0, 22}; }
};

struct LoadedData {
  ClickDataset dataset;
  std::vector<FieldDictionary> dictionaries;
};

// log(1 + max(x, 0)); empty cells are 0.
inline float transform_continuous(std::string_view cell, std::size_t line_no) {
  if (cell.empty()) return 0.0f;
  double v = 0;
  const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (res.ec != std::errc() || res.ptr != cell.data() + cell.size()) {
    throw DataError("line " + std::to_string(line_no) + ": bad numeric cell '" + std::string(cell) + "'");
  }
  return static_cast<float>(std::log1p(std::max(v, 0.0)));
}

namespace detail {

inline std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    if (tab == std::string_view::npos) {
      cells.push_back(line.substr(start));
      break;
    }
    cells.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
  return cells;
}

}  // namespace detail

// Loads a TSV click log. With `dictionaries` the given vocabularies are used;
// otherwise they are built from the file with the min-count threshold.
inline LoadedData load_criteo_tsv(const std::string& path, const TsvLayout& layout,
                                  const std::vector<FieldDictionary>* dictionaries = nullptr,
                                  std::size_t min_count = 10) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open data file '" + path + "'");
  const std::size_t expected = 1 + layout.n_continuous + layout.n_categorical;
  if (dictionaries && dictionaries->size() != layout.n_categorical) {
    throw DataError("dictionary count " + std::to_string(dictionaries->size()) + " != categorical columns " +
                    std::to_string(layout.n_categorical));
  }

  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  while (!lines.empty() && lines.back().empty()) lines.pop_back();

  LoadedData out;
  if (dictionaries) {
    out.dictionaries = *dictionaries;
  } else {
    std::vector<std::unordered_map<std::string, std::size_t>> counts(layout.n_categorical);
    for (std::size_t li = 0; li < lines.size(); ++li) {
      const auto cells = detail::split_tabs(lines[li]);
      if (cells.size() != expected) {
        throw DataError(path + ":" + std::to_string(li + 1) + ": expected " + std::to_string(expected) + " columns, got " +
                        std::to_string(cells.size()));
      }
      for (std::size_t c = 0; c < layout.n_categorical; ++c) ++counts[c][std::string(cells[1 + layout.n_continuous + c])];
    }
    for (std::size_t c = 0; c < layout.n_categorical; ++c)
      out.dictionaries.push_back(FieldDictionary::build("C" + std::to_string(c + 1), counts[c], min_count));
  }

  ClickDataset& ds = out.dataset;
  ds.n_continuous = layout.n_continuous;
  for (const auto& d : out.dictionaries) ds.fields.push_back({d.field(), d.vocab()});
  ds.labels.reserve(lines.size());
  ds.categorical.reserve(lines.size() * layout.n_categorical);
  ds.continuous.reserve(lines.size() * layout.n_continuous);
  for (std::size_t li = 0; li < lines.size(); ++li) {
    const std::size_t line_no = li + 1;
    const auto cells = detail::split_tabs(lines[li]);
    if (cells.size() != expected) {
      throw DataError(path + ":" + std::to_string(line_no) + ": expected " + std::to_string(expected) + " columns, got " +
                      std::to_string(cells.size()));
    }
    if (cells[0] != "0" && cells[0] != "1") {
      throw DataError(path + ":" + std::to_string(line_no) + ": label '" + std::string(cells[0]) + "' not in {0,1}");
    }
    ds.labels.push_back(cells[0] == "1" ? 1 : 0);
    for (std::size_t c = 0; c < layout.n_continuous; ++c) ds.continuous.push_back(transform_continuous(cells[1 + c], line_no));
    for (std::size_t c = 0; c < layout.n_categorical; ++c)
      ds.categorical.push_back(out.dictionaries[c].index_of(cells[1 + layout.n_continuous + c]));
  }
  return out;
}

// Writes rows back as TSV. Continuous values are inverted through expm1, the
// OOV index as an empty cell.
inline void write_tsv(const ClickDataset& ds, const std::vector<FieldDictionary>& dicts, const std::string& path) {
  if (dicts.size() != ds.n_fields()) throw DataError("write_tsv: dictionary count does not match fields");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  char buf[64];
  std::string line;
  for (std::size_t r = 0; r < ds.size(); ++r) {
    line.clear();
    line += ds.labels[r] ? '1' : '0';
    for (std::size_t c = 0; c < ds.n_continuous; ++c) {
      std::snprintf(buf, sizeof buf, "%.9g", std::expm1(static_cast<double>(ds.continuous[r * ds.n_continuous + c])));
      line += '\t';
      line += buf;
    }
    for (std::size_t f = 0; f < ds.n_fields(); ++f) {
      line += '\t';
      line += dicts[f].token_of(ds.categorical[r * ds.n_fields() + f]);
    }
    line += '\n';
    out << line;
  }
  if (!out) throw DataError("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

// Deterministic random partition; the test part takes round(n * fraction) rows.
// Both parts keep the original row order.
inline std::pair<ClickDataset, ClickDataset> split(const ClickDataset& ds, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw UsageError("split: test fraction " + std::to_string(test_fraction) + " outside (0, 1)");
  }
  const std::size_t n = ds.size();
  const auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * test_fraction));
  if (n_test == 0 || n_test >= n) {
    throw DataError("split: " + std::to_string(n) + " rows with fraction " + std::to_string(test_fraction) +
                    " leaves an empty part");
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed);
  shuffle(perm, rng);
  std::vector<std::size_t> test(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::size_t> train(perm.begin() + static_cast<std::ptrdiff_t>(n_test), perm.end());
  std::sort(test.begin(), test.end());
  std::sort(train.begin(), train.end());
  return {ds.subset(train), ds.subset(test)};
}

// ---------------------------------------------------------------------------
// Synthetic click logs
// ---------------------------------------------------------------------------

struct SynthField {
  std::size_t vocab = 1000;
  double skew = 1.0;  // Zipf exponent of item popularity
};

// Items are drawn per field from a Zipf-like law over indices 1..vocab-1. The
// click logit is score_scale * (normalized sum of pairwise latent dot products)
// plus small per-item biases and a fixed offset; labels are then flipped with
// probability `noise`.
struct SynthSpec {
  std::size_t n_samples = 100000;
  std::vector<SynthField> fields;
  std::size_t latent_rank = 4;
  double noise = 0.1;
  double score_scale = 3.0;
  std::uint64_t seed = 0;

  static SynthSpec uniform(std::size_t n_samples, std::size_t n_fields, std::size_t vocab, std::size_t latent_rank,
                           double noise, std::uint64_t seed, double skew = 1.0) {
    SynthSpec s;
    s.n_samples = n_samples;
    s.fields.assign(n_fields, SynthField{vocab, skew});
    s.latent_rank = latent_rank;
    s.noise = noise;
    s.seed = seed;
    return s;
  }
};

inline void validate(const SynthSpec& s) {
  if (s.fields.empty()) throw UsageError("synth: at least one field required");
  for (const auto& f : s.fields) {
    if (f.vocab < 1) throw UsageError("synth: vocab must be >= 1");
    if (!(f.skew >= 0.0)) throw UsageError("synth: skew must be >= 0");
  }
  if (s.latent_rank < 1) throw UsageError("synth: latent rank must be >= 1");
  if (!(s.noise >= 0.0 && s.noise < 0.5)) throw UsageError("synth: noise must lie in [0, 0.5)");
  if (!(s.score_scale > 0.0)) throw UsageError("synth: score_scale must be > 0");
}

inline nlohmann::json to_json(const SynthSpec& s) {
  nlohmann::json fields = nlohmann::json::array();
  for (const auto& f : s.fields) fields.push_back({{"vocab", f.vocab}, {"skew", f.skew}});
  return {{"n_samples", s.n_samples}, {"fields", fields},          {"latent_rank", s.latent_rank},
          {"noise", s.noise},         {"score_scale", s.score_scale}, {"seed", s.seed}};
}

inline SynthSpec synth_spec_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> kKeys = {"n_samples", "fields", "latent_rank", "noise", "score_scale", "seed"};
  for (const auto& [k, v] : j.items())
    if (std::find(kKeys.begin(), kKeys.end(), k) == kKeys.end()) throw UsageError("synth spec: unknown key '" + k + "'");
  SynthSpec s;
  try {
    s.n_samples = j.value("n_samples", s.n_samples);
    s.latent_rank = j.value("latent_rank", s.latent_rank);
    s.noise = j.value("noise", s.noise);
    s.score_scale = j.value("score_scale", s.score_scale);
    s.seed = j.value("seed", s.seed);
    for (const auto& f : j.at("fields")) {
      for (const auto& [k, v] : f.items())
        if (k != "vocab" && k != "skew") throw UsageError("synth spec field: unknown key '" + k + "'");
      s.fields.push_back({f.at("vocab").get<std::size_t>(), f.value("skew", 1.0)});
    }
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("synth spec: ") + e.what());
  }
  validate(s);
  return s;
}

inline ClickDataset synth_generate(const SynthSpec& spec) {
  validate(spec);
  Rng rng(spec.seed);
  const std::size_t d = spec.fields.size();
  const std::size_t rank = spec.latent_rank;
  // Per-component variance 1/sqrt(rank) gives unit variance per pairwise dot.
  const double z_std = std::pow(static_cast<double>(rank), -0.25);
  const double bias_std = 0.5 / std::sqrt(static_cast<double>(d));

  std::vector<std::vector<double>> latent(d), bias(d), cdf(d);
  for (std::size_t f = 0; f < d; ++f) {
    const std::size_t vocab = spec.fields[f].vocab;
    latent[f].resize(vocab * rank);
    bias[f].resize(vocab);
    for (auto& z : latent[f]) z = z_std * standard_normal(rng);
    for (auto& b : bias[f]) b = bias_std * standard_normal(rng);
    if (vocab > 1) {
      cdf[f].resize(vocab - 1);
      double acc = 0;
      for (std::size_t r = 0; r + 1 < vocab; ++r) {
        acc += std::pow(static_cast<double>(r + 1), -spec.fields[f].skew);
        cdf[f][r] = acc;
      }
      for (auto& c : cdf[f]) c /= acc;
    }
  }
  const double pairs = d > 1 ? static_cast<double>(d * (d - 1) / 2) : 1.0;
  const double pair_norm = spec.score_scale / std::sqrt(pairs);

  ClickDataset ds;
  for (std::size_t f = 0; f < d; ++f) ds.fields.push_back({"f" + std::to_string(f), spec.fields[f].vocab});
  ds.labels.resize(spec.n_samples);
  ds.categorical.resize(spec.n_samples * d);
  std::vector<std::uint32_t> items(d);
  std::vector<double> zsum(rank);
  for (std::size_t s = 0; s < spec.n_samples; ++s) {
    for (std::size_t f = 0; f < d; ++f) {
      if (spec.fields[f].vocab == 1) {
        items[f] = 0;
        continue;
      }
      const double u = uniform01(rng);
      const auto it = std::lower_bound(cdf[f].begin(), cdf[f].end(), u);
      const std::size_t r = std::min<std::size_t>(static_cast<std::size_t>(it - cdf[f].begin()), cdf[f].size() - 1);
      items[f] = static_cast<std::uint32_t>(r + 1);
    }
    // sum_{i<j} <z_i, z_j> = 1/2 (||sum z||^2 - sum ||z||^2)
    std::fill(zsum.begin(), zsum.end(), 0.0);
    double sq = 0, b = 0;
    for (std::size_t f = 0; f < d; ++f) {
      const double* z = latent[f].data() + items[f] * rank;
      for (std::size_t k = 0; k < rank; ++k) {
        zsum[k] += z[k];
        sq += z[k] * z[k];
      }
      b += bias[f][items[f]];
    }
    double tot = 0;
    for (double v : zsum) tot += v * v;
    const double score = pair_norm * 0.5 * (tot - sq) + b - 1.0;
    std::uint8_t label = uniform01(rng) < sigmoid(score) ? 1 : 0;
    if (uniform01(rng) < spec.noise) label = 1 - label;
    ds.labels[s] = label;
    std::copy(items.begin(), items.end(), ds.categorical.begin() + s * d);
  }
  return ds;
}

// Dictionaries whose tokens are the decimal item ids, matching synth indices.
inline std::vector<FieldDictionary> synth_dictionaries(const ClickDataset& ds) {
  std::vector<FieldDictionary> out;
  for (const auto& f : ds.fields) {
    std::vector<std::string> tokens;
    for (std::size_t v = 1; v < f.vocab; ++v) tokens.push_back(std::to_string(v));
    out.emplace_back(f.name, 1, std::move(tokens));
  }
  return out;
}

}  // namespace lrc
