// lrc: train, compress, fine-tune, evaluate and benchmark low-rank CTR models.
//
// Exit codes: 0 ok, 1 internal error, 2 usage, 3 data, 4 numeric.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "lrc/lrc.hpp"

namespace {

struct Common {
  std::string config;
  std::string profile = "criteo";
  std::string data;
  std::string model_in;
  std::string model_out;
  std::string report;
  std::optional<std::uint64_t> seed;
};

lrc::RunConfig resolve_config(const Common& c) {
  lrc::RunConfig cfg;
  if (!c.config.empty()) {
    if (!std::filesystem::exists(c.config)) throw lrc::DataError("config file '" + c.config + "' does not exist");
    cfg = lrc::load_run_config(c.config);
  } else {
    cfg = lrc::profile_config(c.profile);
  }
  if (!c.data.empty()) {
    cfg.data.path = c.data;
    cfg.data.synth.reset();
  }
  if (c.seed) cfg.seed = *c.seed;
  lrc::validate(cfg);
  return cfg;
}

void emit(const nlohmann::json& j, const std::string& path) {
  if (path.empty()) {
    std::cout << j.dump(2) << "\n";
    return;
  }
  std::ofstream out(path);
  if (!out) throw lrc::DataError("cannot write report '" + path + "'");
  out << j.dump(2) << "\n";
}

lrc::DeepFMModel load_model(const std::string& path) {
  if (path.empty()) throw lrc::UsageError("--model-in is required");
  return lrc::load_checkpoint(path);
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw lrc::UsageError(std::string(flag) + " is required");
}

void add_common(CLI::App* sub, Common& c, bool model_in, bool model_out) {
  sub->add_option("--config", c.config, "JSON run configuration");
  sub->add_option("--profile", c.profile, "preset used when no --config is given (criteo, avazu, xyz, synth)");
  sub->add_option("--data", c.data, "TSV click log (overrides the config)");
  if (model_in) sub->add_option("--model-in", c.model_in, "input LRCK1 checkpoint");
  if (model_out) sub->add_option("--model-out", c.model_out, "output LRCK1 checkpoint");
  sub->add_option("--report", c.report, "write the JSON report here instead of stdout");
  sub->add_option("--seed", c.seed, "override the run seed");
}

int cmd_train(const Common& c) {
  require(c.model_out, "--model-out");
  const auto cfg = resolve_config(c);
  const auto data = lrc::load_run_data(cfg);
  auto model = lrc::make_deepfm<float>(lrc::model_config(cfg, data.train), cfg.seed);
  lrc::TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  const auto epochs = lrc::train(model, data.train, tc, &data.test, "train");
  lrc::save_checkpoint(model, c.model_out);
  nlohmann::json j{{"checkpoint", c.model_out}, {"test", lrc::evaluate(model, data.test).to_json()}};
  for (const auto& e : epochs) j["epochs"].push_back(e.to_json());
  emit(j, c.report);
  return 0;
}

int cmd_compress(const Common& c, const std::string& method_name, const std::string& rank_text, bool no_relu,
                 bool no_fuse) {
  require(c.model_out, "--model-out");
  const auto method = lrc::method_from_string(method_name);
  const auto cfg = resolve_config(c);
  auto model = load_model(c.model_in);
  lrc::CompressOptions opt;
  opt.insert_relu = cfg.insert_relu && !no_relu;
  opt.fuse = cfg.fuse && !no_fuse;
  opt.tt = cfg.tt;
  if (rank_text.empty()) {
    opt.rank = lrc::targets_mlp(method) ? cfg.mlp_rank : method == lrc::Method::tt_emb ? cfg.tt.max_rank : cfg.emb_rank;
  } else {
    opt.rank = lrc::detail::rank_from_json(rank_text == "full" ? nlohmann::json("full") : nlohmann::json::parse(rank_text));
  }
  std::optional<lrc::TapSet> taps;
  if (lrc::needs_calibration(method)) {
    const auto data = lrc::load_run_data(cfg);
    lrc::require_matching_vocab(model, data.train);
    taps = lrc::calibrate(model, data.train, lrc::required_taps(model, method), cfg.eval_batch_size,
                          cfg.calibration_samples);
  }
  const auto rep = lrc::compress_model(model, method, opt, taps ? &*taps : nullptr);
  lrc::save_checkpoint(model, c.model_out);
  emit(rep.to_json(), c.report);
  return 0;
}

int cmd_finetune(const Common& c) {
  require(c.model_out, "--model-out");
  const auto cfg = resolve_config(c);
  auto model = load_model(c.model_in);
  const auto data = lrc::load_run_data(cfg);
  lrc::require_matching_vocab(model, data.train);
  // Reduced embeddings use the embedding fine-tune recipe, split MLPs the MLP one.
  bool emb = model.has_projections();
  for (const auto& t : model.tables) emb = emb || t.tt.has_value();
  lrc::TrainConfig tc = emb ? cfg.finetune_emb : cfg.finetune_mlp;
  tc.seed = cfg.seed;
  const auto epochs = lrc::finetune(model, data.train, tc, &data.test, "finetune");
  lrc::save_checkpoint(model, c.model_out);
  nlohmann::json j{{"checkpoint", c.model_out}, {"test", lrc::evaluate(model, data.test).to_json()}};
  for (const auto& e : epochs) j["epochs"].push_back(e.to_json());
  emit(j, c.report);
  return 0;
}

int cmd_eval(const Common& c) {
  const auto cfg = resolve_config(c);
  const auto model = load_model(c.model_in);
  const auto data = lrc::load_run_data(cfg);
  lrc::require_matching_vocab(model, data.test);
  emit(lrc::evaluate(model, data.test, cfg.eval_batch_size).to_json(), c.report);
  return 0;
}

int cmd_bench(const Common& c, const lrc::BenchConfig& bc) {
  const auto model = load_model(c.model_in);
  lrc::BenchConfig b = bc;
  if (c.seed) b.seed = *c.seed;
  auto j = lrc::bench_throughput(model, b).to_json();
  j["model"] = c.model_in;
  j["params"] = lrc::param_count_json(lrc::param_count(model));
  emit(j, c.report);
  return 0;
}

int cmd_synth(const Common& c, lrc::SynthSpec spec, const std::string& spec_path) {
  require(c.data, "--data");
  if (!spec_path.empty()) {
    std::ifstream in(spec_path);
    if (!in) throw lrc::DataError("cannot open synth spec '" + spec_path + "'");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw lrc::UsageError(spec_path + ": " + e.what());
    }
    spec = lrc::synth_spec_from_json(j);
  }
  if (c.seed) spec.seed = *c.seed;
  const auto ds = lrc::synth_generate(spec);
  const auto dicts = lrc::synth_dictionaries(ds);
  lrc::write_tsv(ds, dicts, c.data);
  {
    std::ofstream out(lrc::dictionary_sidecar(c.data));
    if (!out) throw lrc::DataError("cannot write '" + lrc::dictionary_sidecar(c.data) + "'");
    out << lrc::dictionaries_to_json(dicts).dump() << "\n";
  }
  std::size_t positives = 0;
  for (auto l : ds.labels) positives += l;
  emit({{"rows", ds.size()},
        {"fields", ds.n_fields()},
        {"positive_rate", ds.empty() ? 0.0 : static_cast<double>(positives) / static_cast<double>(ds.size())},
        {"data", c.data},
        {"dictionaries", lrc::dictionary_sidecar(c.data)},
        {"spec", lrc::to_json(spec)}},
       c.report);
  return 0;
}

int cmd_pipeline(const Common& c, const std::string& output_dir) {
  require(c.config, "--config");
  auto cfg = resolve_config(c);
  if (!output_dir.empty()) cfg.output_dir = output_dir;
  const auto res = lrc::run_pipeline(cfg, [](const std::string& s) { std::cerr << "[lrc] " << s << "\n"; });
  nlohmann::json j{{"output_dir", cfg.output_dir}, {"config_hash", res.config_hash}, {"artifacts", res.artifacts}};
  for (const auto& s : res.stages)
    j["stages"].push_back({{"index", s.index}, {"type", lrc::to_string(s.spec.type)}, {"test", s.test.to_json()}});
  emit(j, c.report);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Low-rank compression of CTR models: AFM, SVD and TT for DeepFM"};
  app.require_subcommand(1);
  Common common;

  auto* train = app.add_subcommand("train", "train a baseline model");
  add_common(train, common, false, true);

  std::string method = "afm-mlp", rank;
  bool no_relu = false, no_fuse = false;
  auto* compress = app.add_subcommand("compress", "calibrate (AFM) and compress a checkpoint");
  add_common(compress, common, true, true);
  compress->add_option("--method", method, "afm-mlp, svd-mlp, afm-emb, svd-emb or tt-emb");
  compress->add_option("--rank", rank, "target rank, or \"full\"");
  compress->add_flag("--no-relu", no_relu, "do not insert ReLU between split MLP layers");
  compress->add_flag("--no-fuse", no_fuse, "keep embedding projections out of the first MLP layer");

  auto* finetune = app.add_subcommand("finetune", "fine-tune a compressed checkpoint for one epoch");
  add_common(finetune, common, true, true);

  auto* eval = app.add_subcommand("eval", "AUC, LogLoss and parameter counts on the test split");
  add_common(eval, common, true, false);

  lrc::BenchConfig bench_cfg;
  auto* bench = app.add_subcommand("bench", "inference throughput (median batch time)");
  add_common(bench, common, true, false);
  bench->add_option("--batch-size", bench_cfg.batch_size, "samples per batch");
  bench->add_option("--batches", bench_cfg.n_batches, "timed batches");
  bench->add_option("--warmup", bench_cfg.warmup, "untimed warmup batches");

  lrc::SynthSpec synth_spec = lrc::SynthSpec::uniform(100000, 10, 10000, 4, 0.1, 0);
  std::size_t synth_fields = 10, synth_vocab = 10000;
  double synth_skew = 1.0;
  std::string synth_spec_path;
  auto* synth = app.add_subcommand("synth", "write a synthetic click log and its dictionaries");
  synth->add_option("--data", common.data, "output TSV path");
  synth->add_option("--config", synth_spec_path, "JSON synth spec");
  synth->add_option("--rows", synth_spec.n_samples, "number of rows");
  synth->add_option("--fields", synth_fields, "categorical fields");
  synth->add_option("--vocab", synth_vocab, "vocabulary size per field");
  synth->add_option("--skew", synth_skew, "Zipf exponent of item popularity");
  synth->add_option("--latent-rank", synth_spec.latent_rank, "rank of the ground-truth interaction model");
  synth->add_option("--noise", synth_spec.noise, "label flip probability in [0, 0.5)");
  synth->add_option("--seed", common.seed, "generator seed");
  synth->add_option("--report", common.report, "write the JSON summary here instead of stdout");

  std::string output_dir;
  auto* pipeline = app.add_subcommand("pipeline", "run the configured stages end to end");
  add_common(pipeline, common, false, false);
  pipeline->add_option("--output-dir", output_dir, "override the config's output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train) return cmd_train(common);
    if (*compress) return cmd_compress(common, method, rank, no_relu, no_fuse);
    if (*finetune) return cmd_finetune(common);
    if (*eval) return cmd_eval(common);
    if (*bench) return cmd_bench(common, bench_cfg);
    if (*synth) {
      synth_spec.fields.assign(synth_fields, lrc::SynthField{synth_vocab, synth_skew});
      return cmd_synth(common, synth_spec, synth_spec_path);
    }
    if (*pipeline) return cmd_pipeline(common, output_dir);
  } catch (const lrc::Error& e) {
    std::cerr << "lrc: " << e.what() << "\n";
    return lrc::exit_code(e.kind());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "lrc: invalid JSON: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "lrc: internal error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
