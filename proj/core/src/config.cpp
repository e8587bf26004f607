// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "peftlab/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "peftlab/errors.hpp"

namespace peftlab {
namespace {

std::string_view strip(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::size_t as_size(std::string_view v) {
  std::size_t out = 0;
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size()) throw InvalidConfig("expected a non-negative integer");
  return out;
}

std::uint64_t as_u64(std::string_view v) {
  std::uint64_t out = 0;
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size()) throw InvalidConfig("expected a non-negative integer");
  return out;
}

double as_double(std::string_view v) {
  double out = 0;
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size()) throw InvalidConfig("expected a number");
  return out;
}

bool as_bool(std::string_view v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw InvalidConfig("expected true or false");
}

std::vector<std::string> as_list(std::string_view v) {
  std::vector<std::string> out;
  while (!v.empty()) {
    const auto comma = v.find(',');
    const auto item = strip(v.substr(0, comma));
    if (item.empty()) throw InvalidConfig("empty list item");
    out.emplace_back(item);
    if (comma == std::string_view::npos) break;
    v.remove_prefix(comma + 1);
  }
  if (out.empty()) throw InvalidConfig("expected a comma-separated list");
  return out;
}

using Setter = std::function<void(PipelineConfig&, std::string_view)>;

const std::map<std::string, Setter, std::less<>>& setters() {
  static const std::map<std::string, Setter, std::less<>> table = {
      {"model.d_model", [](PipelineConfig& c, std::string_view v) { c.model.d_model = as_size(v); }},
      {"model.n_layers", [](PipelineConfig& c, std::string_view v) { c.model.n_layers = as_size(v); }},
      {"model.n_query_heads", [](PipelineConfig& c, std::string_view v) { c.model.n_query_heads = as_size(v); }},
      {"model.n_kv_heads", [](PipelineConfig& c, std::string_view v) { c.model.n_kv_heads = as_size(v); }},
      {"model.d_ff", [](PipelineConfig& c, std::string_view v) { c.model.d_ff = as_size(v); }},
      {"model.max_seq_len", [](PipelineConfig& c, std::string_view v) { c.model.max_seq_len = as_size(v); }},
      {"model.tie_embeddings", [](PipelineConfig& c, std::string_view v) { c.model.tie_embeddings = as_bool(v); }},
      {"model.seed", [](PipelineConfig& c, std::string_view v) { c.model_seed = as_u64(v); }},

      {"lora.enabled", [](PipelineConfig& c, std::string_view v) { c.lora_enabled = as_bool(v); }},
      {"lora.rank", [](PipelineConfig& c, std::string_view v) { c.lora.rank = as_size(v); }},
      {"lora.alpha", [](PipelineConfig& c, std::string_view v) { c.lora.alpha = static_cast<float>(as_double(v)); }},
      {"lora.dropout", [](PipelineConfig& c, std::string_view v) { c.lora.dropout = static_cast<float>(as_double(v)); }},
      {"lora.targets", [](PipelineConfig& c, std::string_view v) { c.lora.targets = as_list(v); }},
      {"lora.seed", [](PipelineConfig& c, std::string_view v) { c.lora.seed = as_u64(v); }},

      {"quant.enabled", [](PipelineConfig& c, std::string_view v) { c.quant_enabled = as_bool(v); }},
      {"quant.block_size", [](PipelineConfig& c, std::string_view v) { c.quant.block_size = as_size(v); }},
      {"quant.double_quant", [](PipelineConfig& c, std::string_view v) { c.quant.double_quant = as_bool(v); }},
      {"quant.dq_group_size", [](PipelineConfig& c, std::string_view v) { c.quant.dq_group_size = as_size(v); }},

      {"train.lr", [](PipelineConfig& c, std::string_view v) { c.train.learning_rate = as_double(v); }},
      {"train.beta1", [](PipelineConfig& c, std::string_view v) { c.train.beta1 = as_double(v); }},
      {"train.beta2", [](PipelineConfig& c, std::string_view v) { c.train.beta2 = as_double(v); }},
      {"train.eps", [](PipelineConfig& c, std::string_view v) { c.train.eps = as_double(v); }},
      {"train.weight_decay", [](PipelineConfig& c, std::string_view v) { c.train.weight_decay = as_double(v); }},
      {"train.steps", [](PipelineConfig& c, std::string_view v) { c.train.steps = as_size(v); }},
      {"train.batch_size", [](PipelineConfig& c, std::string_view v) { c.train.batch_size = as_size(v); }},
      {"train.grad_clip", [](PipelineConfig& c, std::string_view v) { c.train.grad_clip_norm = as_double(v); }},
      {"train.seed", [](PipelineConfig& c, std::string_view v) { c.train.seed = as_u64(v); }},
      {"train.max_seq_len", [](PipelineConfig& c, std::string_view v) { c.train.max_seq_len = as_size(v); }},
      {"train.base_steps", [](PipelineConfig& c, std::string_view v) { c.base_steps = as_size(v); }},
      {"train.base_lr", [](PipelineConfig& c, std::string_view v) { c.base_learning_rate = as_double(v); }},

      {"data.template", [](PipelineConfig& c, std::string_view v) { c.train.template_id = std::string(v); }},
      {"data.holdout", [](PipelineConfig& c, std::string_view v) { c.holdout_fraction = as_double(v); }},
      {"data.holdout_seed", [](PipelineConfig& c, std::string_view v) { c.holdout_seed = as_u64(v); }},
      {"data.limit", [](PipelineConfig& c, std::string_view v) { c.data_limit = as_size(v); }},
  };
  return table;
}

}  // namespace

void PipelineConfig::validate() const {
  model.validate();
  train.validate();
  if (!(base_learning_rate > 0.0)) throw InvalidConfig("train.base_lr must be positive");
  if (lora_enabled) {
    if (lora.rank < 1) throw InvalidConfig("lora.rank must be >= 1");
    if (!(lora.alpha > 0.0f)) throw InvalidConfig("lora.alpha must be positive");
    if (!(lora.dropout >= 0.0f && lora.dropout < 1.0f)) throw InvalidConfig("lora.dropout must be in [0, 1)");
  }
  if (quant_enabled && (quant.block_size < 1 || quant.dq_group_size < 1)) {
    throw InvalidConfig("quant block and group sizes must be >= 1");
  }
  if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) throw InvalidConfig("data.holdout must be in [0, 1)");
}

PipelineConfig parse_config(std::string_view text) {
  PipelineConfig cfg;
  std::set<std::string, std::less<>> seen;
  std::size_t line_no = 0;
  while (!text.empty() || line_no == 0) {
    ++line_no;
    const auto nl = text.find('\n');
    const std::string_view line = strip(text.substr(0, nl));
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (line.empty() || line.front() == '#') continue;
    const auto at = [&](const std::string& what) {
      return InvalidConfig("line " + std::to_string(line_no) + ": " + what);
    };
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw at("expected 'key = value'");
    const auto key = strip(line.substr(0, eq));
    const auto value = strip(line.substr(eq + 1));
    const auto it = setters().find(key);
    if (it == setters().end()) throw at("unknown key '" + std::string(key) + "'");
    if (!seen.emplace(key).second) throw at("duplicate key '" + std::string(key) + "'");
    try {
      it->second(cfg, value);
    } catch (const InvalidConfig& e) {
      throw at(std::string(key) + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace peftlab
