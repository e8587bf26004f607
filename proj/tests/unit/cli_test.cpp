// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "cli.hpp"
#include "json.hpp"
#include "peftlab/generator.hpp"
#include "test_support.hpp"

namespace peftlab::cli {
namespace {

using peftlab::testing::fixtures_dir;
using peftlab::testing::golden_dir;
using peftlab::testing::read_file;
using peftlab::testing::TempDir;

struct Result {
  int code = -1;
  std::string out, err;
};

Result invoke(const std::vector<std::string>& args, const std::string& input = "") {
  std::istringstream in(input);
  std::ostringstream out, err;
  Result r;
  r.code = run(args, in, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

void write(const std::filesystem::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

constexpr const char* kMicroConfig =
    "model.d_model = 16\n"
    "model.n_layers = 2\n"
    "model.n_query_heads = 2\n"
    "model.n_kv_heads = 1\n"
    "model.d_ff = 32\n"
    "model.max_seq_len = 256\n"
    "train.steps = 3\n"
    "train.batch_size = 2\n"
    "train.max_seq_len = 256\n"
    "data.limit = 4\n";

// Ingests mini_corpus and trains a micro model; shared by several tests.
class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("cli");
    write(*dir_ / "micro.conf", kMicroConfig);
    write(*dir_ / "dense.conf", std::string(kMicroConfig) + "lora.enabled = false\nquant.enabled = false\n");
    const auto d = dir_->path().string();
    ASSERT_EQ(invoke({"ingest", "--xml-dir", (fixtures_dir() / "mini_corpus").string(), "--out", d + "/qa.jsonl"}).code,
              kExitOk);
    ASSERT_EQ(invoke({"train", "--data", d + "/qa.jsonl", "--config", d + "/dense.conf", "--out", d + "/base.ckpt"})
                  .code,
              kExitOk);
    ASSERT_EQ(invoke({"train", "--data", d + "/qa.jsonl", "--config", d + "/micro.conf", "--out", d + "/lora.ckpt"})
                  .code,
              kExitOk);
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static std::string path(const std::string& name) { return (*dir_ / name).string(); }

  static TempDir* dir_;
};

TempDir* CliPipeline::dir_ = nullptr;

TEST(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(invoke({"--help"}).code, kExitOk);
  const Result bad = invoke({"ingest", "--xml-dir"});
  EXPECT_EQ(bad.code, kExitUsage);
  EXPECT_NE(bad.err.find("error:"), std::string::npos);
  EXPECT_EQ(invoke({"frobnicate"}).code, kExitUsage);
  EXPECT_EQ(invoke({}).code, kExitUsage);
  EXPECT_EQ(invoke({"generate", "--ckpt", "x", "--question", "q", "--top-k", "0"}).code, kExitUsage);
  EXPECT_EQ(invoke({"generate", "--ckpt", "x", "--question", "q", "--top-k", "3", "--top-p", "0.5"}).code, kExitUsage);
}

TEST(Cli, IngestMatchesGoldenStats) {
  TempDir dir("ingest");
  for (const char* name : {"xml_basic", "mini_corpus"}) {
    const auto out = (dir / (std::string(name) + ".jsonl")).string();
    const Result r = invoke({"ingest", "--xml-dir", (fixtures_dir() / name).string(), "--out", out, "--workers", "2"});
    EXPECT_EQ(r.code, kExitOk);
    EXPECT_EQ(r.out, read_file(golden_dir() / (std::string(name) + ".stats.txt")));
    // The export holds answered pairs only; everything else agrees.
    const auto from_xml = nlohmann::json::parse(
        invoke({"ingest", "--xml-dir", (fixtures_dir() / name).string(), "--out", out, "--json"}).out);
    auto from_jsonl = nlohmann::json::parse(invoke({"stats", "--data", out, "--json"}).out);
    EXPECT_EQ(from_jsonl.at("total_pairs"), from_xml.at("answered_pairs"));
    from_jsonl["total_pairs"] = from_xml.at("total_pairs");
    EXPECT_EQ(from_jsonl, from_xml);
  }
  const Result json = invoke({"ingest", "--xml-dir", (fixtures_dir() / "mini_corpus").string(), "--out",
                              (dir / "m.jsonl").string(), "--json"});
  const auto parsed = nlohmann::json::parse(json.out);
  EXPECT_EQ(parsed.at("answered_pairs"), 32);
}

TEST(Cli, IngestStrictAndMissing) {
  TempDir dir("strict");
  std::filesystem::create_directory(dir / "xml");
  std::filesystem::copy(fixtures_dir() / "xml_basic" / "0000001_asthma.xml", dir / "xml" / "a.xml");
  write(dir / "xml" / "broken.xml", "<Document id=\"3\">");
  const auto xml = (dir / "xml").string(), out = (dir / "o.jsonl").string(), rep = (dir / "r.txt").string();
  EXPECT_EQ(invoke({"ingest", "--xml-dir", xml, "--out", out, "--report", rep}).code, kExitOk);
  EXPECT_NE(read_file(rep).find("broken.xml"), std::string::npos);
  EXPECT_EQ(invoke({"ingest", "--xml-dir", xml, "--out", out, "--strict"}).code, kExitStrict);
  EXPECT_EQ(invoke({"ingest", "--xml-dir", (dir / "nope").string(), "--out", out}).code, kExitNoInput);
  EXPECT_EQ(invoke({"stats", "--data", (dir / "nope.jsonl").string()}).code, kExitNoInput);
  write(dir / "bad.jsonl", "{\"question_id\": 1}\n");
  EXPECT_EQ(invoke({"stats", "--data", (dir / "bad.jsonl").string()}).code, kExitDataErr);
}

TEST_F(CliPipeline, TrainIsDeterministic) {
  const Result r = invoke({"train", "--data", path("qa.jsonl"), "--config", path("micro.conf"), "--out",
                           path("again.ckpt"), "--log-every", "0"});
  ASSERT_EQ(r.code, kExitOk);
  EXPECT_EQ(read_file(path("again.ckpt")), read_file(path("lora.ckpt")));
  EXPECT_EQ(read_file(path("again.ckpt.loss.csv")), read_file(path("lora.ckpt.loss.csv")));
  EXPECT_TRUE(read_file(path("again.ckpt.loss.csv")).starts_with("step,loss\n1,"));
  EXPECT_NE(r.out.find("trainable_fraction"), std::string::npos);
  EXPECT_TRUE(r.err.empty() || r.err.find("step ") == std::string::npos);
}

TEST_F(CliPipeline, TrainErrors) {
  const auto data = path("qa.jsonl");
  write(path("unknown.conf"), "train.speed = 3\n");
  EXPECT_EQ(invoke({"train", "--data", data, "--config", path("unknown.conf"), "--out", path("x.ckpt")}).code,
            kExitUsage);
  write(path("quant_only.conf"), std::string(kMicroConfig) + "lora.enabled = false\n");
  EXPECT_EQ(invoke({"train", "--data", data, "--config", path("quant_only.conf"), "--out", path("x.ckpt")}).code,
            kExitUsage);
  EXPECT_EQ(invoke({"train", "--data", data, "--config", path("micro.conf"), "--out", path("x.ckpt"),
                    "--adapters-only"})
                .code,
            kExitUsage);
  EXPECT_EQ(invoke({"train", "--data", path("none.jsonl"), "--config", path("micro.conf"), "--out", path("x.ckpt")})
                .code,
            kExitNoInput);
}

TEST_F(CliPipeline, AdaptersOnlyNeedBase) {
  const Result r = invoke({"train", "--data", path("qa.jsonl"), "--config", path("micro.conf"), "--out",
                           path("adapters.ckpt"), "--base", path("base.ckpt"), "--adapters-only"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_LT(std::filesystem::file_size(path("adapters.ckpt")), std::filesystem::file_size(path("base.ckpt")));
  const std::vector<std::string> gen = {"generate", "--ckpt", path("adapters.ckpt"), "--question", "What is asthma?",
                                        "--max-new-tokens", "5"};
  EXPECT_EQ(invoke(gen).code, kExitUsage);
  auto with_base = gen;
  with_base.insert(with_base.end(), {"--base", path("base.ckpt")});
  EXPECT_EQ(invoke(with_base).code, kExitOk);
  auto wrong_base = gen;
  wrong_base.insert(wrong_base.end(), {"--base", path("lora.ckpt")});
  EXPECT_EQ(invoke(wrong_base).code, kExitDataErr);
}

TEST_F(CliPipeline, GenerateAndChat) {
  const std::vector<std::string> args = {"generate", "--ckpt", path("lora.ckpt"), "--question", "What is asthma?",
                                         "--top-p", "0.9", "--seed", "4", "--max-new-tokens", "16"};
  const Result a = invoke(args);
  ASSERT_EQ(a.code, kExitOk) << a.err;
  EXPECT_TRUE(a.out.starts_with(std::string(kDisclaimer) + "\n"));
  EXPECT_EQ(invoke(args).out, a.out);

  std::vector<std::string> greedy = {"generate", "--ckpt", path("lora.ckpt"), "--question", "What is asthma?",
                                     "--greedy", "--max-new-tokens", "16"};
  const Result g1 = invoke(greedy);
  ASSERT_EQ(g1.code, kExitOk) << g1.err;
  EXPECT_EQ(invoke(greedy).out, g1.out);

  const Result chat = invoke({"chat", "--ckpt", path("lora.ckpt"), "--max-new-tokens", "4"}, "hello\n/quit\n");
  EXPECT_EQ(chat.code, kExitOk);
  EXPECT_TRUE(chat.out.starts_with("> " + std::string(kDisclaimer)));

  EXPECT_EQ(invoke({"generate", "--ckpt", path("missing.ckpt"), "--question", "q"}).code, kExitNoInput);
  write(path("garbage.ckpt"), "not a checkpoint at all");
  EXPECT_EQ(invoke({"generate", "--ckpt", path("garbage.ckpt"), "--question", "q"}).code, kExitDataErr);
}

TEST_F(CliPipeline, QuantizeInspectAndWrite) {
  const Result text = invoke({"quantize", "--ckpt", path("base.ckpt"), "--inspect"});
  ASSERT_EQ(text.code, kExitOk) << text.err;
  EXPECT_NE(text.out.find("footprint"), std::string::npos);

  const Result json = invoke({"quantize", "--ckpt", path("lora.ckpt"), "--inspect", "--json"});
  ASSERT_EQ(json.code, kExitOk);
  const auto j = nlohmann::json::parse(json.out);
  bool saw_nf4 = false;
  for (const auto& t : j.at("tensors")) {
    if (t.at("name") == "layer.0.attn.key") {
      EXPECT_EQ(t.at("format"), "nf4+dq");
      EXPECT_EQ(t.at("bits_per_param_exact"), "1057/256");
      saw_nf4 = true;
    }
  }
  EXPECT_TRUE(saw_nf4);

  EXPECT_EQ(invoke({"quantize", "--ckpt", path("base.ckpt"), "--out", path("q.ckpt"), "--no-double-quant"}).code,
            kExitOk);
  EXPECT_LT(std::filesystem::file_size(path("q.ckpt")), std::filesystem::file_size(path("base.ckpt")));
  EXPECT_EQ(invoke({"quantize", "--ckpt", path("lora.ckpt"), "--out", path("q2.ckpt")}).code, kExitUsage);
  EXPECT_EQ(invoke({"quantize", "--ckpt", path("base.ckpt")}).code, kExitUsage);
}

}  // namespace
}  // namespace peftlab::cli
