#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lrc/checkpoint.hpp"
#include "lrc/compress.hpp"
#include "lrc/data.hpp"
#include "lrc/error.hpp"
#include "lrc/eval.hpp"
#include "lrc/nn.hpp"
#include "lrc/train.hpp"
#include "lrc/util.hpp"

namespace lrc {

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

enum class StageType { train, calibrate, compress, finetune, eval };

inline const char* to_string(StageType t) {
  switch (t) {
    case StageType::train: return "train";
    case StageType::calibrate: return "calibrate";
    case StageType::compress: return "compress";
    case StageType::finetune: return "finetune";
    case StageType::eval: return "eval";
  }
  return "?";
}

inline StageType stage_type_from_string(const std::string& s) {
  for (StageType t : {StageType::train, StageType::calibrate, StageType::compress, StageType::finetune, StageType::eval})
    if (s == to_string(t)) return t;
  throw UsageError("unknown stage type '" + s + "'");
}

// Per-stage overrides of the profile's training settings.
struct TrainOverrides {
  std::optional<double> learning_rate;
  std::optional<std::size_t> batch_size;
  std::optional<std::size_t> epochs;
  std::optional<std::optional<double>> dropout_rate;  // outer empty: inherit; inner empty: layer defaults
  std::optional<double> weight_decay;
  std::optional<double> l2_ratio;
  std::optional<bool> shuffle;

  TrainConfig apply(TrainConfig c) const {
    if (learning_rate) c.learning_rate = *learning_rate;
    if (batch_size) c.batch_size = *batch_size;
    if (epochs) c.epochs = *epochs;
    if (dropout_rate) c.dropout_rate = *dropout_rate;
    if (weight_decay) c.weight_decay = *weight_decay;
    if (l2_ratio) c.l2_ratio = *l2_ratio;
    if (shuffle) c.shuffle = *shuffle;
    return c;
  }
};

struct StageSpec {
  StageType type = StageType::train;
  Method method = Method::afm_mlp;       // compress only
  std::optional<std::size_t> rank;       // compress only; kFullRank = full
  std::optional<bool> insert_relu;       // compress only
  std::optional<bool> fuse;              // compress only
  TrainOverrides overrides;              // train / finetune
};

struct DataConfig {
  std::string path;       // TSV click log; empty with `synth`
  std::string test_path;  // optional pre-partitioned test log
  std::optional<SynthSpec> synth;
  double test_fraction = 0.1;
  std::optional<std::uint64_t> split_seed;  // defaults to the run seed
  std::size_t min_count = 10;
  TsvLayout layout = TsvLayout::criteo();
};

enum class CompressionOrder { mlp_first, emb_first };

struct RunConfig {
  std::string profile = "criteo";
  DataConfig data;
  std::size_t embedding_dim = 16;
  std::vector<std::size_t> hidden = {400, 400, 400};
  double dropout = 0.5;
  bool fm = true;
  std::uint64_t seed = 0;
  std::string output_dir = "lrc-run";
  TrainConfig train;
  TrainConfig finetune_mlp;
  TrainConfig finetune_emb;
  std::size_t mlp_rank = 64;
  std::size_t emb_rank = 2;
  bool insert_relu = true;
  bool fuse = true;
  CompressionOrder order = CompressionOrder::mlp_first;
  TtPlan tt;
  std::size_t calibration_samples = 0;  // 0 scans the whole training split
  std::size_t eval_batch_size = 10000;
  std::vector<StageSpec> stages;  // empty: the default protocol for `order`
};

namespace detail {

inline TrainConfig make_train(double lr, std::size_t batch, std::optional<double> dropout, double l2) {
  TrainConfig c;
  c.learning_rate = lr;
  c.batch_size = batch;
  c.epochs = 1;
  c.dropout_rate = dropout;
  c.weight_decay = 1e-3;
  c.l2_ratio = l2;
  return c;
}

}  // namespace detail

// Named presets. criteo/avazu/xyz follow the published recipes; synth is a
// desk-scale stand-in sized for a single CPU core.
inline RunConfig profile_config(const std::string& name) {
  RunConfig c;
  c.profile = name;
  if (name == "criteo") {
    c.data.layout = TsvLayout::criteo();
    c.data.test_fraction = 0.1;
    c.embedding_dim = 16;
    c.hidden = {400, 400, 400};
    c.train = detail::make_train(1e-4, 1000, std::nullopt, 1e-5);
    c.finetune_mlp = detail::make_train(1e-3, 20000, std::nullopt, 1e-5);
    c.finetune_emb = detail::make_train(1e-3, 10000, 0.0, 1e-5);
    c.mlp_rank = 64;
    c.emb_rank = 2;
  } else if (name == "avazu") {
    c.data.layout = TsvLayout::avazu();
    c.data.test_fraction = 0.2;
    c.embedding_dim = 50;
    c.hidden = {2000, 2000, 2000};
    c.train = detail::make_train(1e-4, 500, std::nullopt, 1e-5);
    c.finetune_mlp = detail::make_train(1e-3, 10000, std::nullopt, 1e-5);
    c.finetune_emb = detail::make_train(1e-3, 5000, 0.0, 1e-5);
    c.mlp_rank = 320;
    c.emb_rank = 8;
  } else if (name == "xyz") {
    c.data.layout = {0, 80};
    c.embedding_dim = 16;
    c.hidden = {400, 400, 400};
    c.train = detail::make_train(1e-4, 2000, std::nullopt, 1e-5);
    c.finetune_mlp = detail::make_train(1e-3, 20000, std::nullopt, 1e-5);
    c.finetune_emb = detail::make_train(1e-3, 3000, 0.3, 1e-2);
    c.mlp_rank = 64;
    c.emb_rank = 4;
  } else if (name == "synth") {
    SynthSpec s = SynthSpec::uniform(1000000, 10, 10000, 4, 0.1, 0);
    c.data.synth = s;
    c.data.layout = {0, s.fields.size()};
    c.data.test_fraction = 0.1;
    c.data.min_count = 1;
    c.embedding_dim = 16;
    c.hidden = {128, 128, 128};
    c.train = detail::make_train(3e-3, 1000, std::nullopt, 1e-5);
    c.finetune_mlp = detail::make_train(1e-3, 5000, std::nullopt, 1e-5);
    c.finetune_emb = detail::make_train(1e-3, 5000, 0.0, 1e-5);
    c.mlp_rank = 32;
    c.emb_rank = 4;
  } else {
    throw UsageError("unknown profile '" + name + "' (criteo, avazu, xyz, synth)");
  }
  return c;
}

// Stages run when the config lists none: baseline, then both compressions in
// the configured order, each followed by one fine-tune epoch, then eval.
inline std::vector<StageSpec> default_stages(const RunConfig& c) {
  std::vector<StageSpec> s;
  s.push_back({StageType::train, Method::afm_mlp, std::nullopt, std::nullopt, std::nullopt, {}});
  const Method first = c.order == CompressionOrder::mlp_first ? Method::afm_mlp : Method::afm_emb;
  const Method second = c.order == CompressionOrder::mlp_first ? Method::afm_emb : Method::afm_mlp;
  for (Method m : {first, second}) {
    s.push_back({StageType::compress, m, std::nullopt, std::nullopt, std::nullopt, {}});
    s.push_back({StageType::finetune, m, std::nullopt, std::nullopt, std::nullopt, {}});
  }
  s.push_back({StageType::eval, Method::afm_mlp, std::nullopt, std::nullopt, std::nullopt, {}});
  return s;
}

// ---- JSON ----------------------------------------------------------------

namespace detail {

inline void require_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw UsageError(where + ": expected a JSON object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw UsageError(where + ": unknown key '" + k + "'");
}

inline nlohmann::json train_to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"dropout_rate", c.dropout_rate ? nlohmann::json(*c.dropout_rate) : nlohmann::json()},
          {"weight_decay", c.weight_decay},
          {"l2_ratio", c.l2_ratio},
          {"shuffle", c.shuffle}};
}

inline const std::set<std::string> kTrainKeys = {"learning_rate", "batch_size", "epochs",  "dropout_rate",
                                                 "weight_decay",  "l2_ratio",   "shuffle"};

inline TrainOverrides overrides_from_json(const nlohmann::json& j) {
  TrainOverrides o;
  if (j.contains("learning_rate")) o.learning_rate = j.at("learning_rate").get<double>();
  if (j.contains("batch_size")) o.batch_size = j.at("batch_size").get<std::size_t>();
  if (j.contains("epochs")) o.epochs = j.at("epochs").get<std::size_t>();
  if (j.contains("dropout_rate"))
    o.dropout_rate = j.at("dropout_rate").is_null() ? std::optional<double>() : std::optional<double>(j.at("dropout_rate").get<double>());
  if (j.contains("weight_decay")) o.weight_decay = j.at("weight_decay").get<double>();
  if (j.contains("l2_ratio")) o.l2_ratio = j.at("l2_ratio").get<double>();
  if (j.contains("shuffle")) o.shuffle = j.at("shuffle").get<bool>();
  return o;
}

inline std::size_t rank_from_json(const nlohmann::json& j) {
  if (j.is_string()) {
    if (j.get<std::string>() == "full") return kFullRank;
    throw UsageError("rank must be a positive integer or \"full\"");
  }
  const auto v = j.get<long long>();
  if (v < 1) throw RankError("rank must be >= 1 (or \"full\")");
  return static_cast<std::size_t>(v);
}

inline nlohmann::json rank_to_json(std::size_t r) { return r == kFullRank ? nlohmann::json("full") : nlohmann::json(r); }

inline nlohmann::json stage_to_json(const StageSpec& s) {
  nlohmann::json j{{"type", to_string(s.type)}};
  if (s.type == StageType::compress) {
    j["method"] = to_string(s.method);
    if (s.rank) j["rank"] = rank_to_json(*s.rank);
    if (s.insert_relu) j["insert_relu"] = *s.insert_relu;
    if (s.fuse) j["fuse"] = *s.fuse;
  }
  const auto& o = s.overrides;
  if (o.learning_rate) j["learning_rate"] = *o.learning_rate;
  if (o.batch_size) j["batch_size"] = *o.batch_size;
  if (o.epochs) j["epochs"] = *o.epochs;
  if (o.dropout_rate) j["dropout_rate"] = *o.dropout_rate ? nlohmann::json(**o.dropout_rate) : nlohmann::json();
  if (o.weight_decay) j["weight_decay"] = *o.weight_decay;
  if (o.l2_ratio) j["l2_ratio"] = *o.l2_ratio;
  if (o.shuffle) j["shuffle"] = *o.shuffle;
  return j;
}

inline StageSpec stage_from_json(const nlohmann::json& j, std::size_t index) {
  const std::string where = "stages[" + std::to_string(index) + "]";
  if (!j.is_object() || !j.contains("type")) throw UsageError(where + ": stage needs a \"type\"");
  StageSpec s;
  s.type = stage_type_from_string(j.at("type").get<std::string>());
  std::set<std::string> allowed = {"type"};
  if (s.type == StageType::compress) {
    allowed.insert({"method", "rank", "insert_relu", "fuse"});
    if (!j.contains("method")) throw UsageError(where + ": compress stage needs a \"method\"");
  }
  if (s.type == StageType::train || s.type == StageType::finetune) allowed.insert(kTrainKeys.begin(), kTrainKeys.end());
  require_keys(j, allowed, where);
  if (s.type == StageType::compress) {
    s.method = method_from_string(j.at("method").get<std::string>());
    if (j.contains("rank")) s.rank = rank_from_json(j.at("rank"));
    if (j.contains("insert_relu")) s.insert_relu = j.at("insert_relu").get<bool>();
    if (j.contains("fuse")) s.fuse = j.at("fuse").get<bool>();
  }
  s.overrides = overrides_from_json(j);
  return s;
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json data{{"path", c.data.path},
                      {"test_path", c.data.test_path},
                      {"test_fraction", c.data.test_fraction},
                      {"min_count", c.data.min_count},
                      {"n_continuous", c.data.layout.n_continuous},
                      {"n_categorical", c.data.layout.n_categorical}};
  data["synth"] = c.data.synth ? to_json(*c.data.synth) : nlohmann::json();
  data["split_seed"] = c.data.split_seed ? nlohmann::json(*c.data.split_seed) : nlohmann::json();
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : c.stages) stages.push_back(detail::stage_to_json(s));
  return {{"profile", c.profile},
          {"data", data},
          {"model", {{"embedding_dim", c.embedding_dim}, {"hidden", c.hidden}, {"dropout", c.dropout}, {"fm", c.fm}}},
          {"seed", c.seed},
          {"output_dir", c.output_dir},
          {"train", detail::train_to_json(c.train)},
          {"finetune_mlp", detail::train_to_json(c.finetune_mlp)},
          {"finetune_emb", detail::train_to_json(c.finetune_emb)},
          {"compression",
           {{"mlp_rank", c.mlp_rank},
            {"emb_rank", c.emb_rank},
            {"insert_relu", c.insert_relu},
            {"fuse", c.fuse},
            {"order", c.order == CompressionOrder::mlp_first ? "mlp-first" : "emb-first"},
            {"tt", {{"parts", c.tt.parts}, {"max_rank", c.tt.max_rank}}},
            {"calibration_samples", c.calibration_samples}}},
          {"eval_batch_size", c.eval_batch_size},
          {"stages", stages}};
}

inline void validate(const RunConfig& c) {
  validate(c.train);
  validate(c.finetune_mlp);
  validate(c.finetune_emb);
  if (c.embedding_dim < 1) throw UsageError("model.embedding_dim must be >= 1");
  if (c.hidden.size() < 1) throw UsageError("model.hidden needs at least one layer");
  for (auto h : c.hidden)
    if (h < 1) throw UsageError("model.hidden sizes must be >= 1");
  if (!(c.dropout >= 0.0 && c.dropout < 1.0)) throw UsageError("model.dropout must lie in [0, 1)");
  if (c.mlp_rank < 1 || c.emb_rank < 1) throw RankError("compression ranks must be >= 1");
  if (c.eval_batch_size < 1) throw UsageError("eval_batch_size must be >= 1");
  if (c.data.path.empty() && !c.data.synth) throw UsageError("data: either \"path\" or \"synth\" is required");
  if (c.data.synth) validate(*c.data.synth);
}

// Profile defaults overlaid with the JSON document; unknown keys are rejected
// at every level.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  using detail::require_keys;
  try {
    require_keys(j, {"profile", "data", "model", "seed", "output_dir", "train", "finetune_mlp", "finetune_emb",
                     "compression", "eval_batch_size", "stages"},
                 "config");
    RunConfig c = profile_config(j.value("profile", std::string("criteo")));
    if (j.contains("data")) {
      const auto& d = j.at("data");
      require_keys(d, {"path", "test_path", "synth", "test_fraction", "split_seed", "min_count", "n_continuous", "n_categorical"},
                   "data");
      if (d.contains("path")) c.data.path = d.at("path").get<std::string>();
      if (d.contains("test_path")) c.data.test_path = d.at("test_path").get<std::string>();
      if (d.contains("synth")) {
        if (d.at("synth").is_null()) {
          c.data.synth.reset();
        } else {
          c.data.synth = synth_spec_from_json(d.at("synth"));
          c.data.layout = {0, c.data.synth->fields.size()};
        }
      }
      if (d.contains("test_fraction")) c.data.test_fraction = d.at("test_fraction").get<double>();
      if (d.contains("split_seed") && !d.at("split_seed").is_null()) c.data.split_seed = d.at("split_seed").get<std::uint64_t>();
      if (d.contains("min_count")) c.data.min_count = d.at("min_count").get<std::size_t>();
      if (d.contains("n_continuous")) c.data.layout.n_continuous = d.at("n_continuous").get<std::size_t>();
      if (d.contains("n_categorical")) c.data.layout.n_categorical = d.at("n_categorical").get<std::size_t>();
      if (!c.data.path.empty() && !d.contains("synth")) c.data.synth.reset();
    }
    if (j.contains("model")) {
      const auto& m = j.at("model");
      require_keys(m, {"embedding_dim", "hidden", "dropout", "fm"}, "model");
      c.embedding_dim = m.value("embedding_dim", c.embedding_dim);
      c.hidden = m.value("hidden", c.hidden);
      c.dropout = m.value("dropout", c.dropout);
      c.fm = m.value("fm", c.fm);
    }
    c.seed = j.value("seed", c.seed);
    c.output_dir = j.value("output_dir", c.output_dir);
    for (auto [key, dst] : {std::pair<const char*, TrainConfig*>{"train", &c.train},
                            {"finetune_mlp", &c.finetune_mlp},
                            {"finetune_emb", &c.finetune_emb}}) {
      if (!j.contains(key)) continue;
      require_keys(j.at(key), detail::kTrainKeys, key);
      *dst = detail::overrides_from_json(j.at(key)).apply(*dst);
    }
    if (j.contains("compression")) {
      const auto& k = j.at("compression");
      require_keys(k, {"mlp_rank", "emb_rank", "insert_relu", "fuse", "order", "tt", "calibration_samples"}, "compression");
      if (k.contains("mlp_rank")) c.mlp_rank = detail::rank_from_json(k.at("mlp_rank"));
      if (k.contains("emb_rank")) c.emb_rank = detail::rank_from_json(k.at("emb_rank"));
      if (c.mlp_rank == kFullRank) c.mlp_rank = c.hidden.front();
      if (c.emb_rank == kFullRank) c.emb_rank = c.embedding_dim;
      c.insert_relu = k.value("insert_relu", c.insert_relu);
      c.fuse = k.value("fuse", c.fuse);
      if (k.contains("order")) {
        const auto o = k.at("order").get<std::string>();
        if (o == "mlp-first") c.order = CompressionOrder::mlp_first;
        else if (o == "emb-first") c.order = CompressionOrder::emb_first;
        else throw UsageError("compression.order must be \"mlp-first\" or \"emb-first\"");
      }
      if (k.contains("tt")) {
        require_keys(k.at("tt"), {"parts", "max_rank"}, "compression.tt");
        c.tt.parts = k.at("tt").value("parts", c.tt.parts);
        c.tt.max_rank = k.at("tt").value("max_rank", c.tt.max_rank);
      }
      c.calibration_samples = k.value("calibration_samples", c.calibration_samples);
    }
    c.eval_batch_size = j.value("eval_batch_size", c.eval_batch_size);
    if (j.contains("stages")) {
      const auto& st = j.at("stages");
      if (!st.is_array()) throw UsageError("stages must be an array");
      for (std::size_t i = 0; i < st.size(); ++i) c.stages.push_back(detail::stage_from_json(st[i], i));
    }
    validate(c);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("config " + path + ": " + e.what());
  }
  return run_config_from_json(j);
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// FNV-1a over the canonical JSON of the resolved configuration.
inline std::string config_hash(const RunConfig& c) { return hex64(fnv1a64(to_json(c).dump())); }

// ---------------------------------------------------------------------------
// Data for a run
// ---------------------------------------------------------------------------

struct RunData {
  ClickDataset train;
  ClickDataset test;
  std::vector<FieldDictionary> dictionaries;
};

inline std::string dictionary_sidecar(const std::string& tsv_path) { return tsv_path + ".dict.json"; }

// Loads a TSV, using its dictionary sidecar when one exists.
inline LoadedData load_tsv_with_sidecar(const std::string& path, const TsvLayout& layout, std::size_t min_count) {
  const std::string side = dictionary_sidecar(path);
  if (std::filesystem::exists(side)) {
    std::ifstream in(side);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw DataError(side + ": " + e.what());
    }
    const auto dicts = dictionaries_from_json(j);
    return load_criteo_tsv(path, layout, &dicts, min_count);
  }
  return load_criteo_tsv(path, layout, nullptr, min_count);
}

inline RunData load_run_data(const RunConfig& c) {
  RunData d;
  ClickDataset all;
  if (!c.data.path.empty()) {
    LoadedData l = load_tsv_with_sidecar(c.data.path, c.data.layout, c.data.min_count);
    all = std::move(l.dataset);
    d.dictionaries = std::move(l.dictionaries);
  } else {
    all = synth_generate(*c.data.synth);
    d.dictionaries = synth_dictionaries(all);
  }
  if (!c.data.test_path.empty()) {
    d.test = load_criteo_tsv(c.data.test_path, c.data.layout, &d.dictionaries, c.data.min_count).dataset;
    d.train = std::move(all);
  } else {
    if (all.empty()) throw DataError("dataset is empty; nothing to train on");
    auto [tr, te] = split(all, c.data.test_fraction, c.data.split_seed.value_or(c.seed));
    d.train = std::move(tr);
    d.test = std::move(te);
  }
  return d;
}

inline ModelConfig model_config(const RunConfig& c, const ClickDataset& ds) {
  ModelConfig m;
  m.field_names = ds.field_names();
  m.vocab_sizes = ds.vocab_sizes();
  m.embedding_dim = c.embedding_dim;
  m.n_continuous = ds.n_continuous;
  m.hidden = c.hidden;
  m.dropout = c.dropout;
  m.fm = c.fm;
  return m;
}

template <typename T>
void require_matching_vocab(const DeepFM<T>& m, const ClickDataset& ds) {
  if (m.n_fields() != ds.n_fields() || m.n_continuous != ds.n_continuous)
    throw DataError("model expects " + std::to_string(m.n_fields()) + " categorical and " +
                    std::to_string(m.n_continuous) + " continuous fields, data has " + std::to_string(ds.n_fields()) +
                    " and " + std::to_string(ds.n_continuous));
  for (std::size_t f = 0; f < m.n_fields(); ++f)
    if (m.tables[f].vocab != ds.fields[f].vocab)
      throw DataError("field " + m.tables[f].field + ": model vocabulary " + std::to_string(m.tables[f].vocab) +
                      " differs from data vocabulary " + std::to_string(ds.fields[f].vocab));
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

struct StageResult {
  std::size_t index = 0;  // 1-based
  StageSpec spec;
  std::string checkpoint;  // file name inside the output dir, empty if none
  std::string report;
  MetricReport test;
  std::optional<CompressionReport> compression;
  std::vector<EpochMetrics> epochs;
};

struct PipelineResult {
  std::vector<StageResult> stages;
  DeepFMModel model;
  std::string config_hash;
  std::vector<std::string> artifacts;
};

using ProgressCallback = std::function<void(const std::string&)>;

namespace detail {

inline std::string stage_stem(std::size_t index, const StageSpec& s) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "%02zu", index);
  std::string stem = std::string(buf) + "-" + to_string(s.type);
  if (s.type == StageType::compress) stem += std::string("-") + to_string(s.method);
  return stem;
}

inline void write_json_file(const std::filesystem::path& p, const nlohmann::json& j) {
  std::ofstream out(p);
  if (!out) throw DataError("cannot write '" + p.string() + "'");
  out << j.dump(2) << "\n";
}

inline void write_text_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw DataError("cannot write '" + p.string() + "'");
  out << text;
}

inline std::uint64_t stage_seed(std::uint64_t seed, std::size_t index) {
  return seed * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b9e5ULL * (index + 1);
}

inline std::set<std::string> all_taps(const DeepFMModel& m) {
  std::set<std::string> taps = required_taps(m, Method::afm_mlp);
  for (const auto& t : required_taps(m, Method::afm_emb)) taps.insert(t);
  return taps;
}

}  // namespace detail

// Runs every stage in order, writing checkpoints, reports, a JSON-lines metric
// log, a manifest and a stage marker into c.output_dir. On failure the marker
// names the failing stage and already written artifacts are kept.
inline PipelineResult run_pipeline(const RunConfig& cfg, const ProgressCallback& progress = {}) {
  RunConfig c = cfg;
  validate(c);
  const std::vector<StageSpec> stages = c.stages.empty() ? default_stages(c) : c.stages;
  const std::filesystem::path dir(c.output_dir);
  std::filesystem::create_directories(dir);
  const auto say = [&](const std::string& s) {
    if (progress) progress(s);
  };

  PipelineResult res;
  res.config_hash = config_hash(c);
  std::vector<std::string> artifacts = {"config.json", "metrics.jsonl", "stage.marker"};
  detail::write_json_file(dir / "config.json", to_json(c));
  std::ofstream metrics(dir / "metrics.jsonl", std::ios::trunc);
  detail::write_text_file(dir / "stage.marker", "started\n");

  const auto write_manifest = [&](const std::string& status) {
    nlohmann::json st = nlohmann::json::array();
    for (const auto& r : res.stages) {
      nlohmann::json j{{"index", r.index}, {"stage", detail::stage_to_json(r.spec)}, {"test", r.test.to_json()}};
      if (!r.checkpoint.empty()) j["checkpoint"] = r.checkpoint;
      if (!r.report.empty()) j["report"] = r.report;
      st.push_back(j);
    }
    std::vector<std::string> listed = artifacts;
    listed.push_back("manifest.json");
    nlohmann::json m{{"config_hash", res.config_hash}, {"seed", c.seed}, {"status", status},
                     {"artifacts", listed},            {"stages", st}};
    if (!res.stages.empty()) {
      for (auto it = res.stages.rbegin(); it != res.stages.rend(); ++it)
        if (!it->checkpoint.empty()) {
          m["final_checkpoint"] = it->checkpoint;
          break;
        }
    }
    detail::write_json_file(dir / "manifest.json", m);
    res.artifacts = listed;
  };

  std::size_t current = 0;
  try {
    say("loading data");
    RunData data = load_run_data(c);
    DeepFMModel model = make_deepfm<float>(model_config(c, data.train), c.seed);
    std::optional<TapSet> taps;
    std::optional<Method> last_compress;
    std::size_t finetunes_since_compress = 0;

    for (std::size_t i = 0; i < stages.size(); ++i) {
      current = i + 1;
      const StageSpec& spec = stages[i];
      const std::string stem = detail::stage_stem(current, spec);
      StageResult r;
      r.index = current;
      r.spec = spec;
      say("stage " + stem);
      const auto log_epoch = [&](const EpochMetrics& em) { metrics << em.to_json().dump() << "\n" << std::flush; };
      switch (spec.type) {
        case StageType::train: {
          TrainConfig tc = spec.overrides.apply(c.train);
          tc.seed = detail::stage_seed(c.seed, i);
          r.epochs = train(model, data.train, tc, &data.test, stem, log_epoch);
          r.checkpoint = stem + ".lrck";
          break;
        }
        case StageType::calibrate: {
          taps = calibrate(model, data.train, detail::all_taps(model), c.eval_batch_size, c.calibration_samples);
          break;
        }
        case StageType::compress: {
          CompressOptions opt;
          opt.rank = spec.rank.value_or(targets_mlp(spec.method) ? c.mlp_rank
                                        : spec.method == Method::tt_emb ? c.tt.max_rank
                                                                         : c.emb_rank);
          opt.insert_relu = spec.insert_relu.value_or(c.insert_relu);
          opt.fuse = spec.fuse.value_or(c.fuse);
          opt.tt = c.tt;
          if (needs_calibration(spec.method)) {
            const auto wanted = required_taps(model, spec.method);
            bool have = taps.has_value();
            for (const auto& t : wanted) have = have && taps->count(t) && taps->at(t).count() > 0;
            if (!have) taps = calibrate(model, data.train, wanted, c.eval_batch_size, c.calibration_samples);
          }
          r.compression = compress_model(model, spec.method, opt, taps ? &*taps : nullptr);
          taps.reset();
          last_compress = spec.method;
          finetunes_since_compress = 0;
          r.checkpoint = stem + ".lrck";
          r.report = stem + ".report.json";
          break;
        }
        case StageType::finetune: {
          if (!last_compress) throw UsageError("stage " + stem + ": finetune requires a preceding compress stage");
          if (finetunes_since_compress++ > 0)
            throw UsageError("stage " + stem + ": only one finetune stage may follow each compress stage");
          TrainConfig tc = spec.overrides.apply(targets_mlp(*last_compress) ? c.finetune_mlp : c.finetune_emb);
          tc.seed = detail::stage_seed(c.seed, i);
          r.epochs = finetune(model, data.train, tc, &data.test, stem, log_epoch);
          r.checkpoint = stem + ".lrck";
          break;
        }
        case StageType::eval: {
          r.report = stem + ".json";
          break;
        }
      }
      if (spec.type != StageType::calibrate) r.test = evaluate(model, data.test, c.eval_batch_size);
      if (!r.checkpoint.empty()) {
        save_checkpoint(model, (dir / r.checkpoint).string());
        artifacts.push_back(r.checkpoint);
      }
      if (!r.report.empty()) {
        detail::write_json_file(dir / r.report, r.compression ? r.compression->to_json() : r.test.to_json());
        artifacts.push_back(r.report);
      }
      res.stages.push_back(std::move(r));
      detail::write_text_file(dir / "stage.marker", "completed " + std::to_string(current) + " " + stem + "\n");
      write_manifest("running");
    }
    res.model = std::move(model);
    detail::write_text_file(dir / "stage.marker", "done\n");
    write_manifest("ok");
  } catch (const std::exception& e) {
    detail::write_text_file(dir / "stage.marker",
                            "failed " + std::to_string(current) + (current && current <= stages.size()
                                                                       ? " " + detail::stage_stem(current, stages[current - 1])
                                                                       : std::string(" setup")) +
                                ": " + e.what() + "\n");
    write_manifest("failed");
    throw;
  }
  return res;
}

}  // namespace lrc
