// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "peftlab/checkpoint.hpp"
#include "peftlab/config.hpp"
#include "peftlab/corpus.hpp"
#include "peftlab/errors.hpp"
#include "peftlab/generator.hpp"
#include "peftlab/lora.hpp"
#include "peftlab/model.hpp"
#include "peftlab/quant4.hpp"
#include "peftlab/trainer.hpp"

namespace peftlab::cli {
namespace {

namespace fs = std::filesystem;

class MissingInput : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

void require_file(const std::string& path, const char* what) {
  if (!fs::exists(path)) throw MissingInput(std::string(what) + " not found: " + path);
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string general(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string shape_str(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

std::vector<corpus::QARecord> read_jsonl(const std::string& path) {
  require_file(path, "data file");
  std::ifstream in(path);
  if (!in) throw MissingInput("cannot open " + path);
  return corpus::load_jsonl(in);
}

Model load_model(const std::string& ckpt, const std::string& base) {
  require_file(ckpt, "checkpoint");
  if (!is_adapters_only(ckpt)) return load_checkpoint(ckpt).model;
  if (base.empty()) throw UsageError(ckpt + " holds adapters only; pass the base checkpoint with --base");
  require_file(base, "base checkpoint");
  LoadedCheckpoint b = load_checkpoint(base);
  return load_checkpoint(ckpt, &b.model).model;
}

// ---- ingest / stats ----

struct IngestArgs {
  std::string xml_dir, out, report;
  bool strict = false;
  bool json = false;
  std::size_t workers = 0;
};

int cmd_ingest(const IngestArgs& a, std::ostream& out, std::ostream& err) {
  if (!fs::is_directory(a.xml_dir)) throw MissingInput("XML directory not found: " + a.xml_dir);
  const std::size_t workers = a.workers ? a.workers : std::max(1u, std::thread::hardware_concurrency());
  corpus::DirectoryParse parsed = corpus::parse_directory(a.xml_dir, workers);
  const auto answered = corpus::filter_answered(parsed.records);
  {
    std::ofstream sink(a.out, std::ios::binary | std::ios::trunc);
    if (!sink) throw IoError("cannot write " + a.out);
    corpus::export_jsonl(answered, sink);
  }
  const std::string report = parsed.report.to_text();
  if (!a.report.empty()) {
    std::ofstream rep(a.report, std::ios::binary | std::ios::trunc);
    if (!rep) throw IoError("cannot write " + a.report);
    rep << report;
  }
  const auto stats = corpus::compute_stats(parsed.records);
  out << (a.json ? corpus::stats_to_json(stats) + "\n" : corpus::stats_to_text(stats));
  err << "ingest: " << parsed.report.files << " files, " << parsed.report.malformed_files << " malformed, "
      << parsed.report.issues.size() << " issues; wrote " << answered.size() << " records to " << a.out << '\n';
  if (a.strict && !parsed.report.issues.empty()) {
    err << report;
    return kExitStrict;
  }
  return kExitOk;
}

int cmd_stats(const std::string& data, bool json, std::ostream& out) {
  const auto stats = corpus::compute_stats(read_jsonl(data));
  out << (json ? corpus::stats_to_json(stats) + "\n" : corpus::stats_to_text(stats));
  return kExitOk;
}

// ---- train ----

struct TrainArgs {
  std::string data, config, out, base, loss_csv;
  bool adapters_only = false;
  std::size_t log_every = 10;
};

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  require_file(a.config, "config file");
  PipelineConfig cfg = load_config(a.config);
  if (cfg.quant_enabled && !cfg.lora_enabled) {
    throw InvalidConfig("quant.enabled = true needs lora.enabled = true (a 4-bit base cannot be trained)");
  }
  if (a.adapters_only && a.base.empty()) {
    throw UsageError("--adapters-only needs --base: the adapters must pair with a base checkpoint on disk");
  }
  if (a.adapters_only && !cfg.lora_enabled) throw UsageError("--adapters-only needs lora.enabled = true");
  auto records = read_jsonl(a.data);
  if (cfg.data_limit > 0 && records.size() > cfg.data_limit) records.resize(cfg.data_limit);
  std::vector<corpus::QARecord> held;
  if (cfg.holdout_fraction > 0.0) {
    auto split = holdout_split(records, cfg.holdout_fraction, cfg.holdout_seed);
    records = std::move(split.first);
    held = std::move(split.second);
    err << "holdout: " << held.size() << " records kept out of training\n";
  }

  std::optional<Model> model;
  if (!a.base.empty()) {
    require_file(a.base, "base checkpoint");
    LoadedCheckpoint base = load_checkpoint(a.base);
    if (!base.model.adapters().empty()) throw UsageError("--base must be a checkpoint without adapters");
    if (!(base.model.config() == cfg.model)) err << "note: using the model configuration stored in " << a.base << '\n';
    model.emplace(std::move(base.model));
  } else {
    model.emplace(init_weights(cfg.model, cfg.model_seed));
  }

  std::vector<float> history;
  auto logger = [&](std::size_t offset) {
    return [&err, &a, offset](const TrainStep& s) {
      if (a.log_every > 0 && (s.step == 1 || s.step % a.log_every == 0)) {
        err << "step " << offset + s.step << " loss " << fixed(s.loss, 4) << " grad_norm " << fixed(s.grad_norm, 4)
            << '\n';
      }
    };
  };
  if (a.base.empty() && cfg.base_steps > 0) {
    TrainConfig base_cfg = cfg.train;
    base_cfg.steps = cfg.base_steps;
    base_cfg.learning_rate = cfg.base_learning_rate;
    err << "base phase: " << cfg.base_steps << " full-parameter steps\n";
    history = train(*model, records, base_cfg, logger(0));
  }

  CheckpointMeta meta;
  meta.train = cfg.train;
  if (cfg.lora_enabled) {
    if (cfg.quant_enabled) {
      quantize_base(*model, cfg.quant);
      meta.quant = cfg.quant;
    } else {
      freeze_base(*model);
    }
    inject(*model, cfg.lora);
    meta.lora = cfg.lora;
  }
  const PeftReport rep = report(*model);
  err << (cfg.lora_enabled ? "adapter phase: " : "training: ") << cfg.train.steps << " steps\n";
  const std::size_t offset = history.size();
  const auto main_history = train(*model, records, cfg.train, logger(offset));
  history.insert(history.end(), main_history.begin(), main_history.end());

  save_checkpoint(*model, meta, a.out, a.adapters_only);
  const std::string csv_path = a.loss_csv.empty() ? a.out + ".loss.csv" : a.loss_csv;
  {
    std::ofstream csv(csv_path, std::ios::trunc);
    if (!csv) throw IoError("cannot write " + csv_path);
    write_loss_csv(history, csv);
  }

  auto row = [&](const std::string& k, const std::string& v) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-24s%s\n", k.c_str(), v.c_str());
    out << buf;
  };
  row("records", std::to_string(records.size()));
  row("total_parameters", std::to_string(rep.total_parameters));
  row("trainable_parameters", std::to_string(rep.trainable_parameters));
  row("trainable_fraction", format_percent(rep.trainable_fraction));
  row("steps", std::to_string(history.size()));
  row("initial_loss", fixed(history.front(), 4));
  row("final_loss", fixed(history.back(), 4));
  if (!held.empty()) {
    double total = 0.0;
    for (const auto& r : held) {
      const Example ex = format_example(r, cfg.train.template_id,
                                        std::min(cfg.train.max_seq_len, model->config().max_seq_len));
      Graph g(Graph::Mode::kInference);
      total += lm_loss(g, forward(g, *model, ex.tokens, false), ex.tokens, ex.loss_mask).item();
    }
    row("holdout_loss", fixed(total / double(held.size()), 4));
  }
  row("checkpoint", a.out + (a.adapters_only ? " (adapters only)" : ""));
  row("loss_csv", csv_path);
  return kExitOk;
}

// ---- quantize ----

struct QuantArgs {
  std::string ckpt, base, out;
  bool inspect = false;
  bool json = false;
  std::size_t block_size = 64;
  std::size_t dq_group_size = 256;
  bool no_double_quant = false;
};

int cmd_quantize(const QuantArgs& a, std::ostream& out, std::ostream& err) {
  if (!a.inspect && a.out.empty()) throw UsageError("quantize needs --inspect and/or --out FILE");
  Model model = load_model(a.ckpt, a.base);
  const quant::QuantConfig qcfg{a.block_size, !a.no_double_quant, a.dq_group_size};

  struct Row {
    std::string name, shape, format;
    std::size_t params = 0;
    quant::Rational bits{32};
    std::size_t bytes = 0;
    std::optional<float> max_err;
  };
  std::vector<Row> rows;
  for (const auto& [name, w] : model.weights()) {
    Row r{name, shape_str(weight_shape(w)), "f32", weight_numel(w), quant::Rational(32), 0, std::nullopt};
    if (is_quantized(w)) {
      const auto& q = *std::get<std::shared_ptr<const quant::QuantizedTensor>>(w);
      r.format = q.double_quantized ? "nf4+dq" : "nf4";
      r.bits = quant::bits_per_parameter(q);
      r.bytes = q.storage_bytes();
    } else if (Model::is_linear_weight_name(name)) {
      const Tensor& t = std::get<Tensor>(w);
      const auto q = quant::quantize(t, qcfg);
      const Tensor back = quant::dequantize(q, DType::kF32);
      float worst = 0.0f;
      for (std::size_t i = 0; i < t.numel(); ++i) worst = std::max(worst, std::abs(t.data()[i] - back.data()[i]));
      r.format = q.double_quantized ? "nf4+dq" : "nf4";
      r.bits = quant::bits_per_parameter(q);
      r.bytes = q.storage_bytes();
      r.max_err = worst;
    } else {
      r.bytes = r.params * 4;
    }
    rows.push_back(std::move(r));
  }
  for (const auto& [name, ad] : model.adapters()) {
    rows.push_back({name + ".lora_a", shape_str(ad.a.shape()), "f32", ad.a.numel(), quant::Rational(32), ad.a.numel() * 4, {}});
    rows.push_back({name + ".lora_b", shape_str(ad.b.shape()), "f32", ad.b.numel(), quant::Rational(32), ad.b.numel() * 4, {}});
  }
  std::size_t total_params = 0, total_bytes = 0;
  for (const auto& r : rows) {
    total_params += r.params;
    total_bytes += r.bytes;
  }

  if (a.inspect && a.json) {
    nlohmann::ordered_json j;
    j["tensors"] = nlohmann::ordered_json::array();
    for (const auto& r : rows) {
      nlohmann::ordered_json t;
      t["name"] = r.name;
      t["shape"] = r.shape;
      t["format"] = r.format;
      t["params"] = r.params;
      t["bits_per_param"] = boost::rational_cast<double>(r.bits);
      t["bits_per_param_exact"] = std::to_string(r.bits.numerator()) + "/" + std::to_string(r.bits.denominator());
      t["bytes"] = r.bytes;
      t["max_abs_error"] = r.max_err ? nlohmann::ordered_json(*r.max_err) : nlohmann::ordered_json(nullptr);
      j["tensors"].push_back(std::move(t));
    }
    j["total_params"] = total_params;
    j["total_bytes"] = total_bytes;
    j["f32_bytes"] = total_params * 4;
    out << j.dump(2) << '\n';
  } else if (a.inspect) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-28s %-10s %-7s %9s %10s %10s %12s\n", "tensor", "shape", "format", "params",
                  "bits/param", "bytes", "max_abs_err");
    out << buf;
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%-28s %-10s %-7s %9zu %10s %10zu %12s\n", r.name.c_str(), r.shape.c_str(),
                    r.format.c_str(), r.params, fixed(boost::rational_cast<double>(r.bits), 4).c_str(), r.bytes,
                    r.max_err ? general(*r.max_err).c_str() : "-");
      out << buf;
    }
    std::snprintf(buf, sizeof buf, "%-28s %-10s %-7s %9zu %10s %10zu\n", "total", "", "", total_params,
                  fixed(8.0 * double(total_bytes) / double(total_params), 4).c_str(), total_bytes);
    out << buf;
    out << "footprint " << fixed(double(total_bytes) / (1024.0 * 1024.0), 3) << " MiB (f32 would be "
        << fixed(double(total_params) * 4.0 / (1024.0 * 1024.0), 3) << " MiB)\n";
  }
  if (!a.out.empty()) {
    if (!model.adapters().empty()) throw UsageError("--out expects a checkpoint without adapters");
    quantize_base(model, qcfg);
    save_checkpoint(model, CheckpointMeta{std::nullopt, std::nullopt, qcfg}, a.out, false);
    err << "wrote quantized checkpoint " << a.out << '\n';
  }
  return kExitOk;
}

// ---- generate / chat ----

struct DecodeArgs {
  bool greedy = false;
  std::optional<std::size_t> top_k;
  std::optional<double> top_p;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  std::size_t max_new_tokens = 256;

  DecodeConfig config() const {
    DecodeConfig c;
    if (top_k) {
      c.mode = DecodeMode::kTopK;
      c.k = *top_k;
    } else if (top_p) {
      c.mode = DecodeMode::kNucleus;
      c.p = *top_p;
    }
    c.temperature = temperature;
    c.seed = seed;
    c.max_new_tokens = max_new_tokens;
    c.validate();
    return c;
  }
};

void add_decode_flags(CLI::App* cmd, DecodeArgs& d) {
  auto* g = cmd->add_flag("--greedy", d.greedy, "Greedy decoding (default)");
  auto* k = cmd->add_option("--top-k", d.top_k, "Sample from the K most likely tokens")->check(CLI::PositiveNumber);
  auto* p = cmd->add_option("--top-p", d.top_p, "Nucleus sampling with mass P")->check(CLI::Range(0.0, 1.0));
  g->excludes(k)->excludes(p);
  k->excludes(p);
  cmd->add_option("--temperature", d.temperature, "Softmax temperature for sampling")->check(CLI::PositiveNumber);
  cmd->add_option("--seed", d.seed, "Sampling seed");
  cmd->add_option("--max-new-tokens", d.max_new_tokens, "Generation budget");
}

}  // namespace

int run(const std::vector<std::string>& args, std::istream& in, std::ostream& out, std::ostream& err) {
  CLI::App app{"peftlab: parameter-efficient fine-tuning of a small medical QA model", "peftlab"};
  app.require_subcommand(1);

  IngestArgs ingest;
  auto* c_ingest = app.add_subcommand("ingest", "Parse XML QA documents and export answered pairs as JSONL");
  c_ingest->add_option("--xml-dir", ingest.xml_dir, "Directory scanned recursively for *.xml")->required();
  c_ingest->add_option("--out", ingest.out, "Output JSONL file")->required();
  c_ingest->add_option("--report", ingest.report, "Write skipped pairs and files here");
  c_ingest->add_option("--workers", ingest.workers, "Parser threads (default: all cores)");
  c_ingest->add_flag("--strict", ingest.strict, "Exit 2 when any pair or file was skipped");
  c_ingest->add_flag("--json", ingest.json, "Print stats as JSON");

  std::string stats_data;
  bool stats_json = false;
  auto* c_stats = app.add_subcommand("stats", "Corpus statistics of a JSONL file");
  c_stats->add_option("--data", stats_data, "JSONL file")->required();
  c_stats->add_flag("--json", stats_json, "Print JSON instead of text");

  TrainArgs train_args;
  auto* c_train = app.add_subcommand("train", "Fine-tune and write a checkpoint plus loss CSV");
  c_train->add_option("--data", train_args.data, "JSONL training records")->required();
  c_train->add_option("--config", train_args.config, "key = value pipeline config")->required();
  c_train->add_option("--out", train_args.out, "Checkpoint path")->required();
  c_train->add_option("--base", train_args.base, "Start from this checkpoint instead of fresh weights");
  c_train->add_option("--loss-csv", train_args.loss_csv, "Loss CSV path (default: OUT.loss.csv)");
  c_train->add_option("--log-every", train_args.log_every, "Progress line interval on stderr (0: off)");
  c_train->add_flag("--adapters-only", train_args.adapters_only, "Write adapter tensors and the base hash only");

  QuantArgs quant_args;
  auto* c_quant = app.add_subcommand("quantize", "Inspect or write the 4-bit form of a checkpoint");
  c_quant->add_option("--ckpt", quant_args.ckpt, "Checkpoint")->required();
  c_quant->add_option("--base", quant_args.base, "Base checkpoint for an adapters-only --ckpt");
  c_quant->add_flag("--inspect", quant_args.inspect, "Per-tensor bits/param, error and footprint");
  c_quant->add_flag("--json", quant_args.json, "Inspection as JSON");
  c_quant->add_option("--out", quant_args.out, "Write a quantized copy of a dense base checkpoint");
  c_quant->add_option("--block-size", quant_args.block_size, "Elements per absmax block")->check(CLI::PositiveNumber);
  c_quant->add_option("--dq-group-size", quant_args.dq_group_size, "Blocks per double-quant group")
      ->check(CLI::PositiveNumber);
  c_quant->add_flag("--no-double-quant", quant_args.no_double_quant, "Keep absmax scales in f32");

  std::string gen_ckpt, gen_base, question, qtype = "information";
  DecodeArgs gen_decode;
  auto* c_gen = app.add_subcommand("generate", "Answer one question");
  c_gen->add_option("--ckpt", gen_ckpt, "Checkpoint")->required();
  c_gen->add_option("--base", gen_base, "Base checkpoint for an adapters-only --ckpt");
  c_gen->add_option("--question", question, "Question text")->required();
  c_gen->add_option("--type", qtype, "Question type written into the prompt");
  add_decode_flags(c_gen, gen_decode);

  std::string chat_ckpt, chat_base, chat_type = "information";
  DecodeArgs chat_decode;
  auto* c_chat = app.add_subcommand("chat", "Interactive question answering on stdin/stdout");
  c_chat->add_option("--ckpt", chat_ckpt, "Checkpoint")->required();
  c_chat->add_option("--base", chat_base, "Base checkpoint for an adapters-only --ckpt");
  c_chat->add_option("--type", chat_type, "Question type written into every prompt");
  add_decode_flags(c_chat, chat_decode);

  std::vector<const char*> argv{"peftlab"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return kExitUsage;
  }

  try {
    if (c_ingest->parsed()) return cmd_ingest(ingest, out, err);
    if (c_stats->parsed()) return cmd_stats(stats_data, stats_json, out);
    if (c_train->parsed()) return cmd_train(train_args, out, err);
    if (c_quant->parsed()) return cmd_quantize(quant_args, out, err);
    if (c_gen->parsed()) {
      const DecodeConfig dc = gen_decode.config();
      Model model = load_model(gen_ckpt, gen_base);
      const std::string answer = answer_question(model, question, qtype, kDefaultTemplate, dc);
      out << kDisclaimer << '\n' << answer << '\n';
      return kExitOk;
    }
    if (c_chat->parsed()) {
      ReplConfig rc;
      rc.question_type = chat_type;
      rc.decode = chat_decode.config();
      Model model = load_model(chat_ckpt, chat_base);
      return repl(model, rc, in, out, err);
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const InvalidConfig& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const MissingInput& e) {
    err << "error: " << e.what() << '\n';
    return kExitNoInput;
  } catch (const MalformedRecord& e) {
    err << "error: " << e.what() << '\n';
    return kExitDataErr;
  } catch (const BadMagic& e) {
    err << "error: " << e.what() << '\n';
    return kExitDataErr;
  } catch (const VersionMismatch& e) {
    err << "error: " << e.what() << '\n';
    return kExitDataErr;
  } catch (const HashMismatch& e) {
    err << "error: " << e.what() << '\n';
    return kExitDataErr;
  } catch (const CorruptIndex& e) {
    err << "error: " << e.what() << '\n';
    return kExitDataErr;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitSoftware;
  }
  return kExitUsage;
}

}  // namespace peftlab::cli
