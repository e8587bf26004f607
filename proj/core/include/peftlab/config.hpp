// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "peftlab/lora.hpp"
#include "peftlab/model.hpp"
#include "peftlab/quant4.hpp"
#include "peftlab/trainer.hpp"

namespace peftlab {

// Everything `peftlab train` needs, read from a flat "key = value" file.
//
// Keys are dotted: model.*, lora.*, quant.*, train.*, data.*. Lines starting
// with '#' and blank lines are ignored. Unknown or repeated keys, and values
// that do not parse, are errors reported with their line number.
struct PipelineConfig {
  ModelConfig model;
  std::uint64_t model_seed = 0;

  bool lora_enabled = true;
  LoraConfig lora;

  bool quant_enabled = true;
  quant::QuantConfig quant;

  // Full-parameter steps on a freshly initialised base before it is frozen,
  // quantized and given adapters. Ignored when a base checkpoint is supplied.
  std::size_t base_steps = 0;
  double base_learning_rate = 2e-3;
  TrainConfig train;

  double holdout_fraction = 0.0;  // seeded evaluation split; off by default
  std::uint64_t holdout_seed = 0;
  std::size_t data_limit = 0;     // use only the first N records when non-zero

  // Throws InvalidConfig.
  void validate() const;
};

// Throws InvalidConfig with "line N: ..." for any problem.
PipelineConfig parse_config(std::string_view text);
// Throws IoError when the file cannot be read.
PipelineConfig load_config(const std::filesystem::path& path);

}  // namespace peftlab
