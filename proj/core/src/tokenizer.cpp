// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "peftlab/tokenizer.hpp"

#include "peftlab/errors.hpp"

namespace peftlab {

std::vector<TokenId> Tokenizer::encode(std::string_view text, bool add_specials) const {
  std::vector<TokenId> out;
  out.reserve(text.size() + 2);
  if (add_specials) out.push_back(Vocab::kBos);
  for (unsigned char byte : text) out.push_back(static_cast<TokenId>(byte) + Vocab::kByteOffset);
  if (add_specials) out.push_back(Vocab::kEos);
  return out;
}

std::string Tokenizer::decode(std::span<const TokenId> tokens) const {
  std::string bytes;
  bytes.reserve(tokens.size());
  for (TokenId id : tokens) {
    if (id < 0 || id >= Vocab::kSize) throw UnknownToken("token id " + std::to_string(id));
    if (Vocab::is_special(id)) continue;
    bytes.push_back(static_cast<char>(id - Vocab::kByteOffset));
  }
  return sanitize_utf8(bytes);
}

std::string sanitize_utf8(std::string_view bytes) {
  static constexpr std::string_view kReplacement = "\xEF\xBF\xBD";
  std::string out;
  out.reserve(bytes.size());
  std::size_t i = 0;
  const std::size_t n = bytes.size();
  auto byte = [&](std::size_t k) { return static_cast<unsigned char>(bytes[k]); };
  while (i < n) {
    const unsigned char b0 = byte(i);
    if (b0 < 0x80) {
      out.push_back(static_cast<char>(b0));
      ++i;
      continue;
    }
    std::size_t len = 0;
    unsigned char lo = 0x80, hi = 0xBF;  // bounds on the second byte
    if (b0 >= 0xC2 && b0 <= 0xDF) {
      len = 2;
    } else if (b0 >= 0xE0 && b0 <= 0xEF) {
      len = 3;
      if (b0 == 0xE0) lo = 0xA0;
      if (b0 == 0xED) hi = 0x9F;
    } else if (b0 >= 0xF0 && b0 <= 0xF4) {
      len = 4;
      if (b0 == 0xF0) lo = 0x90;
      if (b0 == 0xF4) hi = 0x8F;
    }
    if (len == 0) {
      out.append(kReplacement);
      ++i;
      continue;
    }
    // Length of the valid prefix of this sequence.
    std::size_t valid = 1;
    while (valid < len && i + valid < n) {
      const unsigned char b = byte(i + valid);
      const unsigned char low = valid == 1 ? lo : 0x80;
      const unsigned char high = valid == 1 ? hi : 0xBF;
      if (b < low || b > high) break;
      ++valid;
    }
    if (valid == len) {
      out.append(bytes.substr(i, len));
    } else {
      out.append(kReplacement);
    }
    i += valid;
  }
  return out;
}

}  // namespace peftlab
