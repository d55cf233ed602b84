#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "support.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

class Cli : public ::testing::Test {
 protected:
  static inline fs::path dir;

  static CliRun run(const std::string& args) {
    const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
    const std::string cmd = std::string("'") + LRC_CLI_PATH + "' " + args + " > '" + out.string() + "' 2> '" +
                            err.string() + "'";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
  }

  static std::string p(const std::string& name) { return "'" + (dir / name).string() + "'"; }

  // Shared data, config and baseline checkpoint.
  static void SetUpTestSuite() {
    dir = lrc::testing::scratch_dir("cli");
    std::ofstream(dir / "run.json") << json{{"profile", "synth"},
                                            {"data", {{"n_categorical", 4}}},
                                            {"model", {{"embedding_dim", 8}, {"hidden", {32, 32, 32}}}},
                                            {"train", {{"batch_size", 200}}},
                                            {"finetune_mlp", {{"batch_size", 500}}},
                                            {"finetune_emb", {{"batch_size", 500}}},
                                            {"compression", {{"mlp_rank", 8}, {"emb_rank", 2}}},
                                            {"eval_batch_size", 1000}}
                                           .dump();
    const auto s = run("synth --data " + p("d.tsv") + " --rows 3000 --fields 4 --vocab 40 --seed 3");
    ASSERT_EQ(s.code, 0) << s.err;
    const auto t = run("train --config " + p("run.json") + " --data " + p("d.tsv") + " --model-out " + p("base.lrck"));
    ASSERT_EQ(t.code, 0) << t.err;
  }

  static std::string cfg() { return "--config " + p("run.json") + " --data " + p("d.tsv"); }
};

}  // namespace

TEST_F(Cli, SynthWritesDataAndDictionaries) {
  const auto r = run("synth --data " + p("s.tsv") + " --rows 100 --fields 3 --vocab 7 --seed 1");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(r.out);
  EXPECT_EQ(j.at("rows"), 100);
  EXPECT_EQ(j.at("fields"), 3);
  EXPECT_TRUE(fs::exists(dir / "s.tsv.dict.json"));
  const auto dicts = lrc::dictionaries_from_json(json::parse(slurp(dir / "s.tsv.dict.json")));
  EXPECT_EQ(dicts.size(), 3u);
  EXPECT_EQ(dicts[0].vocab(), 7u);
  // Same seed, same bytes.
  run("synth --data " + p("s2.tsv") + " --rows 100 --fields 3 --vocab 7 --seed 1");
  EXPECT_EQ(slurp(dir / "s.tsv"), slurp(dir / "s2.tsv"));
}

TEST_F(Cli, TrainReportedMetrics) {
  const auto r = run("eval " + cfg() + " --model-in " + p("base.lrck"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(r.out);
  EXPECT_GT(j.at("auc").get<double>(), 0.5);
  EXPECT_EQ(j.at("n_samples"), 300);
}

TEST_F(Cli, CompressMlpSplitsLaterLayers) {
  const auto r = run("compress " + cfg() + " --model-in " + p("base.lrck") + " --model-out " + p("mlp.lrck") +
                     " --method afm-mlp --rank 8");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(r.out);
  EXPECT_EQ(j.at("split_layers"), (json{"hidden2", "hidden3"}));
  EXPECT_EQ(j.at("untouched_layers"), (json{"hidden1", "output"}));
  EXPECT_EQ(j.at("ranks").at("hidden3"), 8);
  const auto m = lrc::read_checkpoint_manifest((dir / "mlp.lrck").string());
  std::vector<std::string> names;
  for (const auto& l : m.at("topology").at("mlp")) names.push_back(l.at("name"));
  EXPECT_EQ(names, (std::vector<std::string>{"hidden1", "hidden2.a", "hidden2.b", "hidden3.a", "hidden3.b", "output"}));
  const auto f = run("finetune " + cfg() + " --model-in " + p("mlp.lrck") + " --model-out " + p("mlp-ft.lrck"));
  ASSERT_EQ(f.code, 0) << f.err;
  EXPECT_EQ(json::parse(f.out).at("epochs").size(), 1u);
}

TEST_F(Cli, CompressEmbeddingRankTwo) {
  const auto r = run("compress " + cfg() + " --model-in " + p("base.lrck") + " --model-out " + p("emb.lrck") +
                     " --method afm-emb --rank 2 --report " + p("emb.json"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(slurp(dir / "emb.json"));
  EXPECT_EQ(j.at("fused"), true);
  const auto model = lrc::load_checkpoint((dir / "emb.lrck").string());
  for (const auto& t : model.tables) EXPECT_EQ(t.weights.cols(), 2u);
  EXPECT_EQ(model.mlp.front().in_dim(), 4u * 2);
  const auto b = run("bench --model-in " + p("emb.lrck") + " --batch-size 500 --batches 3 --warmup 1");
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_GT(json::parse(b.out).at("samples_per_second").get<double>(), 0.0);
}

TEST_F(Cli, TtFullRank) {
  const auto r = run("compress " + cfg() + " --model-in " + p("base.lrck") + " --model-out " + p("tt.lrck") +
                     " --method tt-emb --rank full");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto base = run("eval " + cfg() + " --model-in " + p("base.lrck"));
  const auto tt = run("eval " + cfg() + " --model-in " + p("tt.lrck"));
  EXPECT_NEAR(json::parse(tt.out).at("auc").get<double>(), json::parse(base.out).at("auc").get<double>(), 1e-6);
}

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("train --bogus 1").code, 2);
  EXPECT_EQ(run("compress " + cfg() + " --model-in " + p("base.lrck") + " --model-out " + p("x.lrck") + " --method pca").code, 2);
  EXPECT_EQ(run("compress " + cfg() + " --model-in " + p("base.lrck") + " --model-out " + p("x.lrck") +
                " --method svd-mlp --rank 0")
                .code,
            2);
  EXPECT_EQ(run("compress " + cfg() + " --model-in " + p("base.lrck") + " --model-out " + p("x.lrck") +
                " --method svd-mlp --rank 33")
                .code,
            2);
  EXPECT_EQ(run("train " + cfg()).code, 2);  // --model-out missing
  EXPECT_EQ(run("finetune " + cfg() + " --model-in " + p("base.lrck") + " --model-out " + p("x.lrck")).code, 2);
  EXPECT_EQ(run("train --profile nope --model-out " + p("x.lrck")).code, 2);
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, DataErrorsExitThreeAndNameThePath) {
  const auto missing = (dir / "no-such.tsv").string();
  const auto r = run("train --config " + p("run.json") + " --data '" + missing + "' --model-out " + p("x.lrck"));
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find(missing), std::string::npos) << r.err;
  EXPECT_EQ(run("eval " + cfg() + " --model-in " + p("no-such.lrck")).code, 3);
  EXPECT_EQ(run("eval --config " + p("no-such.json") + " --model-in " + p("base.lrck")).code, 3);
  std::ofstream(dir / "garbage.lrck") << "LRCK1 but not really";
  EXPECT_EQ(run("eval " + cfg() + " --model-in " + p("garbage.lrck")).code, 3);
  // A model trained on other data does not match this vocabulary.
  run("synth --data " + p("other.tsv") + " --rows 500 --fields 4 --vocab 9 --seed 1");
  EXPECT_EQ(run("eval --config " + p("run.json") + " --data " + p("other.tsv") + " --model-in " + p("base.lrck")).code, 3);
}

TEST_F(Cli, UndefinedMetricExitsFour) {
  auto loaded = lrc::load_criteo_tsv((dir / "d.tsv").string(), lrc::TsvLayout{0, 4}, nullptr, 1);
  std::fill(loaded.dataset.labels.begin(), loaded.dataset.labels.end(), 1);
  lrc::write_tsv(loaded.dataset, loaded.dictionaries, (dir / "pos.tsv").string());
  fs::copy_file(dir / "d.tsv.dict.json", dir / "pos.tsv.dict.json", fs::copy_options::overwrite_existing);
  const auto r = run("eval --config " + p("run.json") + " --data " + p("pos.tsv") + " --model-in " + p("base.lrck"));
  EXPECT_EQ(r.code, 4) << r.err;
}

TEST_F(Cli, PipelineRunsFromConfig) {
  json cfg{{"profile", "synth"}, {"output_dir", (dir / "pipe-out").string()}};
  cfg["data"]["synth"] = {{"n_samples", 2000}, {"fields", json::parse(R"([{"vocab": 20}, {"vocab": 20}])")}};
  cfg["model"] = {{"embedding_dim", 4}, {"hidden", {16, 16, 16}}};
  cfg["train"] = {{"batch_size", 200}};
  cfg["compression"] = {{"mlp_rank", 8}, {"emb_rank", 2}};
  std::ofstream(dir / "pipe.json") << cfg.dump();
  const auto r = run("pipeline --config " + p("pipe.json"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json::parse(r.out).at("stages").size(), 6u);
  EXPECT_NE(r.err.find("[lrc] stage 02-compress-afm-mlp"), std::string::npos);
  EXPECT_EQ(slurp(dir / "pipe-out" / "stage.marker"), "done\n");
}
