#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>

#include "marmot/serialize.hpp"
#include "test_support.hpp"

#ifndef MARMOT_CLI_PATH
#error "MARMOT_CLI_PATH must name the marmot executable"
#endif

namespace marmot {
namespace {

using testing::read_file;
using testing::TempDir;
using testing::write_file;

int run_cli(const std::string& args, const std::string& log) {
  const std::string cmd = std::string(MARMOT_CLI_PATH) + " " + args + " >" + log + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Json read_json(const std::string& path) { return Json::parse(read_file(path)); }

const char* kSmallConfig = R"({
  "model": {"d": 16, "heads": 2, "encoder_layers": 2, "decoder_layers": 1},
  "train": {"learning_rate": 0.003, "batch_size": 8, "epochs": 3}
})";

class Cli : public ::testing::Test {
 protected:
  TempDir dir{"cli"};
  std::string log = dir.file("log.txt");

  void SetUp() override {
    write_file(dir.file("cfg.json"), kSmallConfig);
    ASSERT_EQ(run_cli("gen-synth --n 24 --seed 2 --out " + dir.file("data.jsonl"), log), 0) << read_file(log);
  }

  std::string train_into(const std::string& out, const std::string& extra = "", int seed = 5) {
    EXPECT_EQ(run_cli("train --config " + dir.file("cfg.json") + " --data " + dir.file("data.jsonl") +
                          " --out " + out + " --seed " + std::to_string(seed) + " " + extra,
                      log),
              0)
        << read_file(log);
    return out;
  }
};

TEST_F(Cli, TrainThenEvalReproducesFinalEpochAccuracy) {
  const auto run = train_into(dir.file("run"));
  ASSERT_EQ(run_cli("eval --model " + run + "/params.json --data " + dir.file("data.jsonl") + " --out " +
                        dir.file("metrics.json"),
                    log),
            0)
      << read_file(log);
  const auto report = read_json(run + "/train_report.json");
  const auto metrics = read_json(dir.file("metrics.json"));
  EXPECT_EQ(report["format"], "marmot-train-report");
  EXPECT_EQ(report["epochs"].size(), 3u);
  EXPECT_EQ(metrics["accuracy"].get<double>(), report["epochs"].back()["train_accuracy"].get<double>());
  EXPECT_EQ(metrics["examples"], 24);
}

TEST_F(Cli, PredictAtLogitTieGivesClassOne) {
  const auto records = load_records(dir.file("data.jsonl")).records;
  const auto vocab = build_vocabulary(record_texts(records));
  ModelConfig cfg;
  cfg.d = 8;
  cfg.vocab = vocab.size();
  Rng rng(1);
  auto params = MarmotParams::random(cfg, rng);
  for (auto& v : params.head_w2.mutable_values()) v = 0.0;
  for (auto& v : params.head_b2.mutable_values()) v = 0.0;
  save_params(dir.file("tie.json"), params, vocab);
  ASSERT_EQ(run_cli("predict --threshold 0.5 --model " + dir.file("tie.json") + " --data " + dir.file("data.jsonl") +
                        " --out " + dir.file("pred.jsonl"),
                    log),
            0)
      << read_file(log);
  std::istringstream lines(read_file(dir.file("pred.jsonl")));
  std::string line;
  std::getline(lines, line);
  EXPECT_EQ(Json::parse(line)["format"], "marmot-predictions");
  std::size_t count = 0;
  while (std::getline(lines, line)) {
    const auto j = Json::parse(line);
    EXPECT_EQ(j["class"], 1);
    EXPECT_EQ(j["p_positive"].get<double>(), 0.5);
    ++count;
  }
  EXPECT_EQ(count, 24u);
}

TEST_F(Cli, ExportAttentionWritesLayersTimesHeadsFusionFiles) {
  const auto run = train_into(dir.file("run"));
  const auto records = load_records(dir.file("data.jsonl")).records;
  std::string with_image, text_only;
  for (const auto& r : records) (r.image ? with_image : text_only) = r.id;
  ASSERT_EQ(run_cli("export-attention --model " + run + "/params.json --data " + dir.file("data.jsonl") +
                        " --ids " + with_image + "," + text_only + " --out " + dir.file("traces"),
                    log),
            0)
      << read_file(log);
  std::map<std::string, std::size_t> fusion;
  std::size_t total = 0;
  for (const auto& entry : std::filesystem::directory_iterator(dir.file("traces"))) {
    const auto j = read_json(entry.path().string());
    EXPECT_EQ(j["format"], "marmot-attention-trace");
    if (j["subnetwork"] == "fusion") ++fusion[j["example_id"].get<std::string>()];
    ++total;
  }
  EXPECT_EQ(fusion[with_image], 2u * 2u);
  EXPECT_EQ(fusion[text_only], 2u * 2u);
  // Decoder traces: 1 layer x 2 heads x (self, cross) per example.
  EXPECT_EQ(total, 2u * (4u + 4u));

  EXPECT_EQ(run_cli("export-attention --model " + run + "/params.json --data " + dir.file("data.jsonl") +
                        " --ids no-such-id --out " + dir.file("t2"),
                    log),
            1);
}

TEST_F(Cli, IdenticalFlagsGiveByteIdenticalArtifacts) {
  const auto a = train_into(dir.file("a"));
  const auto b = train_into(dir.file("b"));
  EXPECT_EQ(read_file(a + "/params.json"), read_file(b + "/params.json"));
  EXPECT_EQ(read_file(a + "/train_report.json"), read_file(b + "/train_report.json"));
  const auto c = train_into(dir.file("c"), "", 6);
  EXPECT_NE(read_file(a + "/params.json"), read_file(c + "/params.json"));

  ASSERT_EQ(run_cli("gen-synth --n 24 --seed 2 --sidecar --out " + dir.file("again/data.jsonl"), log), 0);
  EXPECT_EQ(load_records(dir.file("again/data.jsonl")).records, load_records(dir.file("data.jsonl")).records);
  ASSERT_EQ(run_cli("gen-synth --n 24 --seed 2 --out " + dir.file("again2.jsonl"), log), 0);
  EXPECT_EQ(read_file(dir.file("again2.jsonl")), read_file(dir.file("data.jsonl")));

  for (const char* name : {"p1.jsonl", "p2.jsonl"})
    ASSERT_EQ(run_cli("predict --model " + a + "/params.json --data " + dir.file("data.jsonl") + " --out " +
                          dir.file(name),
                      log),
              0);
  EXPECT_EQ(read_file(dir.file("p1.jsonl")), read_file(dir.file("p2.jsonl")));
}

TEST_F(Cli, EnsembleAndGrid) {
  const auto run = train_into(dir.file("ens"), "--ensemble 3 --threads 2");
  const auto manifest = read_json(run + "/ensemble.json");
  ASSERT_EQ(manifest["members"].size(), 3u);
  ASSERT_EQ(run_cli("eval --model " + run + "/ensemble.json --data " + dir.file("data.jsonl") + " --out " +
                        dir.file("m.json"),
                    log),
            0)
      << read_file(log);
  EXPECT_EQ(read_json(dir.file("m.json"))["ensemble_members"], 3);
  EXPECT_EQ(run_cli("train --data " + dir.file("data.jsonl") + " --out " + dir.file("even") + " --ensemble 2", log), 1);

  write_file(dir.file("grid.json"), R"({"model": {"d": 8, "encoder_layers": 1, "decoder_layers": 1},
    "grid": {"learning_rates": [0.0, 0.003], "batch_sizes": [8], "epochs": [2], "metric": "accuracy"}})");
  ASSERT_EQ(run_cli("train --config " + dir.file("grid.json") + " --data " + dir.file("data.jsonl") + " --val " +
                        dir.file("data.jsonl") + " --out " + dir.file("grid"),
                    log),
            0)
      << read_file(log);
  const auto grid = read_json(dir.file("grid/grid.json"));
  EXPECT_EQ(grid["cells"].size(), 2u);
  const auto chosen = read_json(dir.file("grid/train_report.json"))["train"]["learning_rate"].get<double>();
  EXPECT_EQ(chosen, grid["cells"][grid["best"].get<std::size_t>()]["learning_rate"].get<double>());
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run_cli("--help", log), 0);
  EXPECT_EQ(run_cli("", log), 1);
  EXPECT_EQ(run_cli("train --data " + dir.file("data.jsonl") + " --bogus-flag", log), 1);
  EXPECT_EQ(run_cli("eval --model " + dir.file("missing.json") + " --data " + dir.file("data.jsonl"), log), 1);
  EXPECT_EQ(run_cli("gen-synth --n 7 --out " + dir.file("odd.jsonl"), log), 1);

  write_file(dir.file("bad.jsonl"), "{\"id\": \"x\", \"text\": \"hi\", \"captions\": [\"c\"], \"label\": 1}\n");
  EXPECT_EQ(run_cli("train --data " + dir.file("bad.jsonl") + " --out " + dir.file("bad"), log), 1);
  EXPECT_NE(read_file(log).find("line 1"), std::string::npos) << read_file(log);

  write_file(dir.file("badcfg.json"), R"({"model": {"d": 10, "heads": 3}})");
  EXPECT_EQ(run_cli("train --config " + dir.file("badcfg.json") + " --data " + dir.file("data.jsonl") + " --out " +
                        dir.file("bc"),
                    log),
            1);

  write_file(dir.file("unlabelled.jsonl"), "{\"id\": \"u\", \"text\": \"alpha\"}\n");
  EXPECT_EQ(run_cli("train --data " + dir.file("unlabelled.jsonl") + " --out " + dir.file("u"), log), 1);

  // An absurd learning rate blows the parameters up: a runtime failure.
  write_file(dir.file("blowup.json"), R"({"model": {"d": 8, "encoder_layers": 1, "decoder_layers": 1},
    "train": {"learning_rate": 1e300, "batch_size": 4, "epochs": 3, "warmup_fraction": 0.0}})");
  EXPECT_EQ(run_cli("train --config " + dir.file("blowup.json") + " --data " + dir.file("data.jsonl") + " --out " +
                        dir.file("blowup"),
                    log),
            2)
      << read_file(log);
}

}  // namespace
}  // namespace marmot
