// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include "peftlab/corpus.hpp"
#include "peftlab/generator.hpp"
#include "peftlab/lora.hpp"
#include "peftlab/model.hpp"
#include "peftlab/trainer.hpp"

namespace peftlab {
namespace {

std::vector<corpus::QARecord> records() {
  static const auto r =
      corpus::filter_answered(corpus::parse_directory(std::string(PEFTLAB_FIXTURES_DIR) + "/mini_corpus").records);
  return r;
}

// Arg 0: dense base, 1: 4-bit base with adapters.
Model default_model(bool peft) {
  Model m = init_weights(ModelConfig{}, 0);
  if (peft) {
    quantize_base(m, {});
    inject(m, LoraConfig{});
  }
  return m;
}

void BM_Forward(benchmark::State& state) {
  Model m = default_model(state.range(0) != 0);
  const Example ex = format_example(records().front(), kDefaultTemplate, 512);
  for (auto _ : state) {
    Graph g(Graph::Mode::kInference);
    benchmark::DoNotOptimize(forward(g, m, ex.tokens, false));
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * ex.tokens.size()));
}
BENCHMARK(BM_Forward)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  Model m = default_model(state.range(0) != 0);
  const auto data = records();
  TrainConfig tc;
  tc.steps = 1;
  tc.batch_size = 8;
  for (auto _ : state) benchmark::DoNotOptimize(train(m, data, tc));
}
BENCHMARK(BM_TrainStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_GreedyDecode(benchmark::State& state) {
  Model m = default_model(true);
  const auto prompt = format_prompt("What is asthma?", "information", kDefaultTemplate);
  DecodeConfig dc;
  dc.stop_tokens.clear();
  dc.max_new_tokens = 64;
  for (auto _ : state) benchmark::DoNotOptimize(generate(m, prompt, dc));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * 64));
}
BENCHMARK(BM_GreedyDecode)->Unit(benchmark::kMillisecond);

}  // namespace
}  // namespace peftlab
