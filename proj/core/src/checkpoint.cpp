// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "peftlab/checkpoint.hpp"

#include <openssl/evp.h>

#include <Eigen/Core>
#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>
#include <sstream>
#include <vector>

#include "json.hpp"
#include "peftlab/errors.hpp"

namespace peftlab {
namespace {

using json = nlohmann::json;

// ---- little-endian scalars ----

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <class U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

std::string f32_blob(std::span<const float> xs) {
  std::string out;
  out.reserve(xs.size() * 4);
  for (float x : xs) put_le(out, std::bit_cast<std::uint32_t>(x));
  return out;
}

std::string f16_blob(std::span<const float> xs) {
  std::string out;
  out.reserve(xs.size() * 2);
  for (float x : xs) put_le(out, Eigen::numext::bit_cast<std::uint16_t>(Eigen::half(x)));
  return out;
}

std::vector<float> read_f32(std::string_view blob) {
  std::vector<float> out(blob.size() / 4);
  const auto* p = reinterpret_cast<const unsigned char*>(blob.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::bit_cast<float>(get_le<std::uint32_t>(p + 4 * i));
  return out;
}

std::vector<float> read_f16(std::string_view blob) {
  std::vector<float> out(blob.size() / 2);
  const auto* p = reinterpret_cast<const unsigned char*>(blob.data());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>(Eigen::numext::bit_cast<Eigen::half>(get_le<std::uint16_t>(p + 2 * i)));
  }
  return out;
}

std::size_t dtype_bytes(const std::string& dtype) {
  if (dtype == "f32") return 4;
  if (dtype == "f16") return 2;
  if (dtype == "u8" || dtype == "i8") return 1;
  throw CorruptIndex("unknown dtype '" + dtype + "'");
}

// ---- hashing ----

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) {
      throw Error("sha256: initialisation failed");
    }
  }
  void update(std::string_view bytes) { EVP_DigestUpdate(ctx_.get(), bytes.data(), bytes.size()); }
  std::string hex() {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_.get(), digest, &len);
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
      out.push_back(kHex[digest[i] >> 4]);
      out.push_back(kHex[digest[i] & 0xF]);
    }
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

// ---- entries ----

struct Entry {
  json meta;  // everything but offset/length
  std::string bytes;
  bool base = false;
};

Entry dense_entry(const std::string& name, const Tensor& t, bool base) {
  Entry e;
  const bool half = t.dtype() == DType::kF16;
  e.meta = {{"name", name}, {"dtype", half ? "f16" : "f32"}, {"shape", t.shape()},
            {"requires_grad", t.requires_grad()}};
  e.bytes = half ? f16_blob(t.data()) : f32_blob(t.data());
  e.base = base;
  return e;
}

Entry raw_entry(const std::string& name, const char* dtype, Shape shape, std::string bytes) {
  Entry e;
  e.meta = {{"name", name}, {"dtype", dtype}, {"shape", std::move(shape)}};
  e.bytes = std::move(bytes);
  e.base = true;
  return e;
}

void append_quantized(std::vector<Entry>& out, const std::string& name, const quant::QuantizedTensor& q) {
  Entry codes = raw_entry(name + ":codes", "u8", {q.codes.size()},
                          std::string(q.codes.begin(), q.codes.end()));
  codes.meta["quant"] = {{"logical_shape", q.shape},
                         {"block_size", q.block_size},
                         {"double_quant", q.double_quantized},
                         {"dq_group_size", q.dq_group_size}};
  out.push_back(std::move(codes));
  if (q.double_quantized) {
    const std::size_t n = q.absmax_codes.size();
    std::string ac(n, '\0');
    std::memcpy(ac.data(), q.absmax_codes.data(), n);
    out.push_back(raw_entry(name + ":absmax_codes", "i8", {n}, std::move(ac)));
    out.push_back(raw_entry(name + ":absmax_scale", "f32", {q.absmax_scale.size()}, f32_blob(q.absmax_scale)));
    out.push_back(raw_entry(name + ":absmax_offset", "f32", {q.absmax_offset.size()}, f32_blob(q.absmax_offset)));
  } else {
    out.push_back(raw_entry(name + ":absmax", "f32", {q.absmax.size()}, f32_blob(q.absmax)));
  }
  out.push_back(raw_entry(name + ":codebook", "f32", {16}, f32_blob(q.codebook.values)));
}

std::vector<Entry> collect(const Model& model, bool with_base, bool with_adapters) {
  std::vector<Entry> out;
  if (with_base) {
    for (const auto& [name, w] : model.weights()) {
      if (const auto* t = std::get_if<Tensor>(&w)) {
        out.push_back(dense_entry(name, *t, true));
      } else {
        append_quantized(out, name, *std::get<std::shared_ptr<const quant::QuantizedTensor>>(w));
      }
    }
  }
  if (with_adapters) {
    for (const auto& [name, ad] : model.adapters()) {
      Entry a = dense_entry(name + ".lora_a", ad.a, false);
      a.meta["adapter"] = {{"target", name}, {"rank", ad.rank}, {"alpha", ad.alpha}, {"dropout", ad.dropout_p}};
      out.push_back(std::move(a));
      out.push_back(dense_entry(name + ".lora_b", ad.b, false));
    }
  }
  return out;
}

std::string hash_base_entries(const std::vector<Entry>& entries) {
  Sha256 h;
  for (const auto& e : entries) {
    if (!e.base) continue;
    std::string framing = e.meta["name"].get<std::string>();
    framing.push_back('\0');
    framing += e.meta["dtype"].get<std::string>();
    framing.push_back('\0');
    for (const auto& d : e.meta["shape"]) put_le<std::uint64_t>(framing, d.get<std::uint64_t>());
    put_le<std::uint64_t>(framing, e.bytes.size());
    h.update(framing);
    h.update(e.bytes);
  }
  return h.hex();
}

// ---- configs to/from JSON ----

json model_config_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},         {"d_model", c.d_model},     {"n_layers", c.n_layers},
          {"n_query_heads", c.n_query_heads},   {"n_kv_heads", c.n_kv_heads}, {"d_ff", c.d_ff},
          {"max_seq_len", c.max_seq_len},       {"tie_embeddings", c.tie_embeddings}};
}

ModelConfig model_config_from(const json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size");
  c.d_model = j.at("d_model");
  c.n_layers = j.at("n_layers");
  c.n_query_heads = j.at("n_query_heads");
  c.n_kv_heads = j.at("n_kv_heads");
  c.d_ff = j.at("d_ff");
  c.max_seq_len = j.at("max_seq_len");
  c.tie_embeddings = j.at("tie_embeddings");
  return c;
}

json train_config_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"beta1", c.beta1},
          {"beta2", c.beta2},                 {"eps", c.eps},
          {"weight_decay", c.weight_decay},   {"steps", c.steps},
          {"batch_size", c.batch_size},       {"grad_clip_norm", c.grad_clip_norm},
          {"seed", c.seed},                   {"max_seq_len", c.max_seq_len},
          {"template_id", c.template_id}};
}

TrainConfig train_config_from(const json& j) {
  TrainConfig c;
  c.learning_rate = j.at("learning_rate");
  c.beta1 = j.at("beta1");
  c.beta2 = j.at("beta2");
  c.eps = j.at("eps");
  c.weight_decay = j.at("weight_decay");
  c.steps = j.at("steps");
  c.batch_size = j.at("batch_size");
  c.grad_clip_norm = j.at("grad_clip_norm");
  c.seed = j.at("seed");
  c.max_seq_len = j.at("max_seq_len");
  c.template_id = j.at("template_id");
  return c;
}

json lora_config_json(const LoraConfig& c) {
  return {{"rank", c.rank}, {"alpha", c.alpha}, {"dropout", c.dropout}, {"targets", c.targets}, {"seed", c.seed}};
}

LoraConfig lora_config_from(const json& j) {
  LoraConfig c;
  c.rank = j.at("rank");
  c.alpha = j.at("alpha");
  c.dropout = j.at("dropout");
  c.targets = j.at("targets").get<std::vector<std::string>>();
  c.seed = j.at("seed");
  return c;
}

json quant_config_json(const quant::QuantConfig& c) {
  return {{"block_size", c.block_size}, {"double_quant", c.double_quant}, {"dq_group_size", c.dq_group_size}};
}

quant::QuantConfig quant_config_from(const json& j) {
  quant::QuantConfig c;
  c.block_size = j.at("block_size");
  c.double_quant = j.at("double_quant");
  c.dq_group_size = j.at("dq_group_size");
  return c;
}

// ---- parsing ----

struct Parsed {
  json header;
  std::string_view body;
};

Parsed split(std::string_view bytes) {
  if (bytes.size() < kCheckpointMagic.size() || bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic) {
    throw BadMagic("not a peftlab checkpoint");
  }
  if (bytes.size() < kCheckpointMagic.size() + 8) throw CorruptIndex("truncated header length");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + kCheckpointMagic.size();
  const std::uint64_t header_len = get_le<std::uint64_t>(p);
  const std::size_t header_start = kCheckpointMagic.size() + 8;
  if (header_len > bytes.size() - header_start) throw CorruptIndex("header runs past end of file");
  Parsed out;
  try {
    out.header = json::parse(bytes.substr(header_start, header_len));
  } catch (const json::exception& e) {
    throw CorruptIndex(std::string("header is not valid JSON: ") + e.what());
  }
  if (!out.header.is_object() || !out.header.contains("format_version")) {
    throw CorruptIndex("header lacks format_version");
  }
  const auto& version = out.header["format_version"];
  if (!version.is_number_integer() || version.get<int>() != kCheckpointVersion) {
    throw VersionMismatch("checkpoint format " + version.dump() + ", expected " +
                          std::to_string(kCheckpointVersion));
  }
  out.body = bytes.substr(header_start + header_len);
  return out;
}

struct Blob {
  json meta;
  std::string_view bytes;
};

std::vector<Blob> index_blobs(const json& header, std::string_view body) {
  if (!header.contains("tensors") || !header["tensors"].is_array()) throw CorruptIndex("missing tensor index");
  std::vector<Blob> out;
  std::uint64_t cursor = 0;
  for (const auto& t : header["tensors"]) {
    const std::uint64_t offset = t.at("offset");
    const std::uint64_t length = t.at("length");
    const Shape shape = t.at("shape").get<Shape>();
    if (offset < cursor) throw CorruptIndex("tensor offsets overlap or are not ascending");
    if (length != shape_numel(shape) * dtype_bytes(t.at("dtype"))) {
      throw CorruptIndex("declared length of '" + t.at("name").get<std::string>() + "' disagrees with dtype/shape");
    }
    if (offset > body.size() || length > body.size() - offset) throw CorruptIndex("tensor runs past end of body");
    out.push_back({t, body.substr(offset, length)});
    cursor = offset + length;
  }
  return out;
}

Tensor dense_from(const Blob& b) {
  const std::string dtype = b.meta.at("dtype");
  const bool half = dtype == "f16";
  if (!half && dtype != "f32") throw CorruptIndex("dense tensor with dtype " + dtype);
  auto data = half ? read_f16(b.bytes) : read_f32(b.bytes);
  return Tensor::from_data(b.meta.at("shape").get<Shape>(), std::move(data), half ? DType::kF16 : DType::kF32,
                           b.meta.value("requires_grad", false));
}

std::pair<std::string, std::string> split_name(const std::string& name) {
  const auto colon = name.find(':');
  if (colon == std::string::npos) return {name, ""};
  return {name.substr(0, colon), name.substr(colon + 1)};
}

void load_base(Model& model, const std::vector<Blob>& blobs, std::size_t& i) {
  while (i < blobs.size() && !blobs[i].meta.contains("adapter")) {
    const auto [name, part] = split_name(blobs[i].meta.at("name"));
    if (part.empty()) {
      model.set_weight(name, dense_from(blobs[i]));
      ++i;
      continue;
    }
    if (part != "codes" || !blobs[i].meta.contains("quant")) throw CorruptIndex("unexpected entry " + name + ":" + part);
    auto q = std::make_shared<quant::QuantizedTensor>();
    const auto& qm = blobs[i].meta["quant"];
    q->shape = qm.at("logical_shape").get<Shape>();
    q->block_size = qm.at("block_size");
    q->double_quantized = qm.at("double_quant");
    q->dq_group_size = qm.at("dq_group_size");
    q->codes.assign(blobs[i].bytes.begin(), blobs[i].bytes.end());
    ++i;
    auto take = [&](const std::string& want) -> std::string_view {
      if (i >= blobs.size() || blobs[i].meta.at("name").get<std::string>() != name + ":" + want) {
        throw CorruptIndex("expected " + name + ":" + want);
      }
      return blobs[i++].bytes;
    };
    if (q->double_quantized) {
      const auto ac = take("absmax_codes");
      q->absmax_codes.resize(ac.size());
      std::memcpy(q->absmax_codes.data(), ac.data(), ac.size());
      q->absmax_scale = read_f32(take("absmax_scale"));
      q->absmax_offset = read_f32(take("absmax_offset"));
    } else {
      q->absmax = read_f32(take("absmax"));
    }
    const auto cb = read_f32(take("codebook"));
    if (cb.size() != 16) throw CorruptIndex("codebook of " + name + " must hold 16 values");
    std::copy(cb.begin(), cb.end(), q->codebook.values.begin());
    try {
      q->codebook.validate();
    } catch (const InvalidConfig& e) {
      throw CorruptIndex(name + ": " + e.what());
    }
    q->validate();
    model.set_weight(name, std::shared_ptr<const quant::QuantizedTensor>(std::move(q)));
  }
}

void load_adapters(Model& model, const std::vector<Blob>& blobs, std::size_t i) {
  while (i < blobs.size()) {
    const auto& am = blobs[i].meta;
    if (!am.contains("adapter") || i + 1 >= blobs.size()) throw CorruptIndex("malformed adapter entries");
    LoraAdapter ad;
    ad.name = am["adapter"].at("target");
    ad.rank = am["adapter"].at("rank");
    ad.alpha = am["adapter"].at("alpha");
    ad.dropout_p = am["adapter"].at("dropout");
    if (am.at("name") != ad.name + ".lora_a" || blobs[i + 1].meta.at("name") != ad.name + ".lora_b") {
      throw CorruptIndex("adapter entries for '" + ad.name + "' out of order");
    }
    ad.a = dense_from(blobs[i]);
    ad.b = dense_from(blobs[i + 1]);
    if (!model.has_weight(ad.name)) throw CorruptIndex("adapter for unknown weight '" + ad.name + "'");
    const Shape& ws = weight_shape(model.weight(ad.name));
    if (ad.a.rank() != 2 || ad.b.rank() != 2 || ad.a.dim(0) != ad.rank || ad.b.dim(1) != ad.rank ||
        ad.a.dim(1) != ws[1] || ad.b.dim(0) != ws[0]) {
      throw CorruptIndex("adapter '" + ad.name + "' has inconsistent shapes");
    }
    std::string key = ad.name;
    model.mutable_adapters().insert_or_assign(key, std::move(ad));
    i += 2;
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("cannot read " + path.string());
  return bytes;
}

}  // namespace

std::string base_hash(const Model& model) { return hash_base_entries(collect(model, true, false)); }

std::string serialize_checkpoint(const Model& model, const CheckpointMeta& meta, bool adapters_only) {
  auto entries = collect(model, true, true);
  const std::string base_digest = hash_base_entries(entries);
  if (adapters_only) {
    std::erase_if(entries, [](const Entry& e) { return e.base; });
  }

  json index = json::array();
  std::string body;
  for (auto& e : entries) {
    json m = e.meta;
    m["offset"] = body.size();
    m["length"] = e.bytes.size();
    index.push_back(std::move(m));
    body += e.bytes;
  }
  Sha256 body_hash;
  body_hash.update(body);

  json header = {{"format_version", kCheckpointVersion},
                 {"kind", adapters_only ? "adapters_only" : "full"},
                 {"model_config", model_config_json(model.config())},
                 {"train_config", meta.train ? train_config_json(*meta.train) : json(nullptr)},
                 {"lora", meta.lora ? lora_config_json(*meta.lora) : json(nullptr)},
                 {"quant", meta.quant ? quant_config_json(*meta.quant) : json(nullptr)},
                 {"base_hash", base_digest},
                 {"body_sha256", body_hash.hex()},
                 {"tensors", std::move(index)}};
  const std::string header_text = header.dump();

  std::string out(kCheckpointMagic);
  put_le<std::uint64_t>(out, header_text.size());
  out += header_text;
  out += body;
  return out;
}

LoadedCheckpoint deserialize_checkpoint(std::string_view bytes, const Model* base) {
  const Parsed parsed = split(bytes);
  const json& h = parsed.header;
  try {
    Sha256 body_hash;
    body_hash.update(parsed.body);
    if (body_hash.hex() != h.at("body_sha256").get<std::string>()) {
      throw HashMismatch("checkpoint body does not match its recorded SHA-256");
    }
    const auto blobs = index_blobs(h, parsed.body);

    CheckpointMeta meta;
    if (!h.at("train_config").is_null()) meta.train = train_config_from(h["train_config"]);
    if (!h.at("lora").is_null()) meta.lora = lora_config_from(h["lora"]);
    if (!h.at("quant").is_null()) meta.quant = quant_config_from(h["quant"]);
    const ModelConfig config = model_config_from(h.at("model_config"));
    const std::string kind = h.at("kind");
    const std::string expected_base = h.at("base_hash");

    if (kind == "full") {
      Model model(config);
      std::size_t i = 0;
      load_base(model, blobs, i);
      load_adapters(model, blobs, i);
      if (base_hash(model) != expected_base) throw HashMismatch("base weights do not match the recorded hash");
      return LoadedCheckpoint{std::move(model), std::move(meta), false};
    }
    if (kind != "adapters_only") throw CorruptIndex("unknown checkpoint kind '" + kind + "'");
    if (base == nullptr) throw InvalidConfig("adapters-only checkpoint needs a base checkpoint");
    if (!(base->config() == config)) throw HashMismatch("base model configuration differs from the adapters'");
    Model model = base->clone();
    model.mutable_adapters().clear();
    if (meta.quant) {
      const bool dense_left = std::any_of(model.weights().begin(), model.weights().end(), [](const auto& kv) {
        return Model::is_linear_weight_name(kv.first) && !is_quantized(kv.second);
      });
      if (dense_left) quantize_base(model, *meta.quant);
    } else {
      freeze_base(model);
    }
    if (base_hash(model) != expected_base) throw HashMismatch("base checkpoint does not match the adapters' base hash");
    load_adapters(model, blobs, 0);
    return LoadedCheckpoint{std::move(model), std::move(meta), true};
  } catch (const json::exception& e) {
    throw CorruptIndex(std::string("bad header field: ") + e.what());
  }
}

void save_checkpoint(const Model& model, const CheckpointMeta& meta, const std::filesystem::path& path,
                     bool adapters_only) {
  const std::string bytes = serialize_checkpoint(model, meta, adapters_only);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write to " + path.string() + " failed");
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const Model* base) {
  return deserialize_checkpoint(read_file(path), base);
}

bool is_adapters_only(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const Parsed parsed = split(bytes);
  return parsed.header.value("kind", std::string()) == "adapters_only";
}

}  // namespace peftlab
