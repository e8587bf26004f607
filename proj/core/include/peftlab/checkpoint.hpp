// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "peftlab/lora.hpp"
#include "peftlab/model.hpp"
#include "peftlab/quant4.hpp"
#include "peftlab/trainer.hpp"

namespace peftlab {

// File layout:
//   "PEFTLAB1" | u64 LE header length | JSON header | body
// The header carries the configs, the SHA-256 of the body and of the base
// weights, and a tensor index (name, dtype, shape, offset, length). Body
// blobs are little-endian and appear in index order without padding.
// Quantized weights are split into "{name}:codes", "{name}:absmax" (or
// ":absmax_codes", ":absmax_scale", ":absmax_offset") and "{name}:codebook".
inline constexpr std::string_view kCheckpointMagic = "PEFTLAB1";
inline constexpr int kCheckpointVersion = 1;

struct CheckpointMeta {
  std::optional<TrainConfig> train;
  std::optional<LoraConfig> lora;
  std::optional<quant::QuantConfig> quant;  // set when the base was quantized
};

struct LoadedCheckpoint {
  Model model;
  CheckpointMeta meta;
  bool adapters_only = false;
};

// Hex SHA-256 over the serialized base weights (names, dtypes, shapes, bytes).
std::string base_hash(const Model& model);

std::string serialize_checkpoint(const Model& model, const CheckpointMeta& meta, bool adapters_only);

// An adapters-only checkpoint needs `base`: it is cloned, quantized with the
// stored settings if it is still dense, checked against the stored base hash
// and given the adapters. Throws BadMagic, VersionMismatch, HashMismatch,
// CorruptIndex.
LoadedCheckpoint deserialize_checkpoint(std::string_view bytes, const Model* base = nullptr);

void save_checkpoint(const Model& model, const CheckpointMeta& meta, const std::filesystem::path& path,
                     bool adapters_only = false);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const Model* base = nullptr);

// True when the file at `path` is an adapters-only checkpoint.
bool is_adapters_only(const std::filesystem::path& path);

}  // namespace peftlab
