// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "peftlab/corpus.hpp"

#include <expat.h>

#include <algorithm>
#include <atomic>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "peftlab/errors.hpp"

namespace peftlab::corpus {
namespace {

using ordered_json = nlohmann::ordered_json;

// Decodes one code point; returns its byte length (>= 1) or 1 for a stray byte.
std::size_t decode_utf8(std::string_view s, std::size_t i, char32_t& cp) {
  const auto b0 = static_cast<unsigned char>(s[i]);
  auto cont = [&](std::size_t k) -> int {
    if (i + k >= s.size()) return -1;
    const auto b = static_cast<unsigned char>(s[i + k]);
    return (b & 0xC0) == 0x80 ? (b & 0x3F) : -1;
  };
  if (b0 < 0x80) {
    cp = b0;
    return 1;
  }
  if ((b0 & 0xE0) == 0xC0) {
    const int c1 = cont(1);
    if (c1 >= 0) {
      cp = ((b0 & 0x1F) << 6) | c1;
      return 2;
    }
  } else if ((b0 & 0xF0) == 0xE0) {
    const int c1 = cont(1), c2 = cont(2);
    if (c1 >= 0 && c2 >= 0) {
      cp = ((b0 & 0x0F) << 12) | (c1 << 6) | c2;
      return 3;
    }
  } else if ((b0 & 0xF8) == 0xF0) {
    const int c1 = cont(1), c2 = cont(2), c3 = cont(3);
    if (c1 >= 0 && c2 >= 0 && c3 >= 0) {
      cp = ((b0 & 0x07) << 18) | (c1 << 12) | (c2 << 6) | c3;
      return 4;
    }
  }
  cp = 0xFFFD;
  return 1;
}

// Unicode White_Space property.
bool is_unicode_space(char32_t c) {
  return (c >= 0x09 && c <= 0x0D) || c == 0x20 || c == 0x85 || c == 0xA0 || c == 0x1680 ||
         (c >= 0x2000 && c <= 0x200A) || c == 0x2028 || c == 0x2029 || c == 0x202F ||
         c == 0x205F || c == 0x3000;
}

bool is_ascii_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

bool answered(const QARecord& r) { return !trim_unicode(r.answer_text).empty(); }

struct PairState {
  bool active = false;
  std::int64_t offset = -1;
  int questions = 0;
  bool in_question = false;
  bool in_answer = false;
  std::string qid, qtype, question, answer;
  bool missing_qid = false, missing_qtype = false;
};

struct ParserState {
  XML_Parser parser = nullptr;
  std::vector<std::string> stack;
  std::string document_id, url, focus;
  bool root_seen = false;
  bool in_focus = false;
  std::string fatal;  // document-level schema violation
  std::int64_t fatal_offset = -1;
  PairState pair;
  std::vector<QARecord> records;
  std::vector<ParseIssue> issues;
  std::string path;
};

const char* find_attr(const XML_Char** attrs, const char* name) {
  for (std::size_t i = 0; attrs[i] != nullptr; i += 2) {
    if (std::string_view(attrs[i]) == name) return attrs[i + 1];
  }
  return nullptr;
}

void fail_document(ParserState& s, std::string message) {
  if (s.fatal.empty()) {
    s.fatal = std::move(message);
    s.fatal_offset = XML_GetCurrentByteIndex(s.parser);
  }
  XML_StopParser(s.parser, XML_FALSE);
}

void XMLCALL on_start(void* user, const XML_Char* name, const XML_Char** attrs) {
  auto& s = *static_cast<ParserState*>(user);
  const std::string_view el(name);
  if (!s.root_seen) {
    s.root_seen = true;
    if (el != "Document") {
      fail_document(s, "root element is <" + std::string(el) + ">, expected <Document>");
      return;
    }
    const char* id = find_attr(attrs, "id");
    if (id == nullptr || std::string_view(id).empty()) {
      fail_document(s, "<Document> has no id attribute");
      return;
    }
    s.document_id = id;
    if (const char* url = find_attr(attrs, "url")) s.url = url;
  } else if (el == "Focus" && !s.pair.active) {
    s.in_focus = true;
  } else if (el == "QAPair") {
    s.pair = PairState{};
    s.pair.active = true;
    s.pair.offset = XML_GetCurrentByteIndex(s.parser);
  } else if (el == "Question" && s.pair.active) {
    ++s.pair.questions;
    if (s.pair.questions == 1) {
      s.pair.in_question = true;
      const char* qid = find_attr(attrs, "qid");
      const char* qtype = find_attr(attrs, "qtype");
      s.pair.missing_qid = qid == nullptr;
      s.pair.missing_qtype = qtype == nullptr;
      if (qid != nullptr) s.pair.qid = qid;
      if (qtype != nullptr) s.pair.qtype = qtype;
    }
  } else if (el == "Answer" && s.pair.active) {
    s.pair.in_answer = true;
  }
  s.stack.emplace_back(el);
}

void finish_pair(ParserState& s) {
  PairState& p = s.pair;
  auto skip = [&](std::string why) {
    s.issues.push_back(ParseIssue{s.path, s.document_id, p.offset, std::move(why)});
  };
  if (p.questions == 0) return skip("QAPair has no <Question> element");
  if (p.questions > 1) return skip("QAPair has more than one <Question> element");
  if (p.missing_qid) return skip("<Question> is missing the qid attribute");
  if (p.missing_qtype) return skip("<Question> is missing the qtype attribute");
  QARecord r;
  r.question_id = p.qid;
  r.question_text = trim_unicode(p.question);
  if (r.question_text.empty()) return skip("question " + p.qid + " has empty text");
  r.answer_text = trim_unicode(p.answer);
  r.question_type = normalize_question_type(p.qtype);
  r.document_id = s.document_id;
  r.source_url = s.url;
  r.focus = trim_unicode(s.focus);
  s.records.push_back(std::move(r));
}

void XMLCALL on_end(void* user, const XML_Char* name) {
  auto& s = *static_cast<ParserState*>(user);
  const std::string_view el(name);
  if (!s.stack.empty()) s.stack.pop_back();
  if (el == "Focus") {
    s.in_focus = false;
  } else if (el == "Question") {
    s.pair.in_question = false;
  } else if (el == "Answer") {
    s.pair.in_answer = false;
  } else if (el == "QAPair" && s.pair.active) {
    finish_pair(s);
    s.pair = PairState{};
  }
}

void XMLCALL on_text(void* user, const XML_Char* text, int len) {
  auto& s = *static_cast<ParserState*>(user);
  const std::string_view chunk(text, static_cast<std::size_t>(len));
  if (s.pair.in_question) {
    s.pair.question.append(chunk);
  } else if (s.pair.in_answer) {
    s.pair.answer.append(chunk);
  } else if (s.in_focus) {
    s.focus.append(chunk);
  }
}

std::vector<std::filesystem::path> list_xml(const std::filesystem::path& root) {
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(root)) {
    if (entry.is_regular_file() && entry.path().extension() == ".xml") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end(),
            [](const auto& a, const auto& b) { return a.generic_string() < b.generic_string(); });
  return files;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string ParseReport::to_text() const {
  std::ostringstream os;
  for (const auto& issue : issues) {
    os << issue.path;
    if (issue.byte_offset) os << ':' << *issue.byte_offset;
    os << ": ";
    if (!issue.document_id.empty()) os << "[" << issue.document_id << "] ";
    os << issue.message << '\n';
  }
  return os.str();
}

std::string normalize_question_type(std::string_view raw) {
  std::string out;
  bool pending_space = false;
  for (char c : raw) {
    if (is_ascii_space(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

std::string trim_unicode(std::string_view text) {
  std::size_t begin = 0;
  std::size_t end = text.size();
  char32_t cp = 0;
  while (begin < end) {
    const std::size_t n = decode_utf8(text, begin, cp);
    if (!is_unicode_space(cp)) break;
    begin += n;
  }
  // Scan forward to find the end of the last non-space code point.
  std::size_t last = begin;
  for (std::size_t i = begin; i < end;) {
    const std::size_t n = decode_utf8(text, i, cp);
    i += n;
    if (!is_unicode_space(cp)) last = i;
  }
  return std::string(text.substr(begin, last - begin));
}

std::vector<QARecord> parse_document(std::string_view xml_bytes, ParseReport* report,
                                     const std::string& path) {
  ParserState state;
  state.path = path;
  std::unique_ptr<std::remove_pointer_t<XML_Parser>, decltype(&XML_ParserFree)> parser(
      XML_ParserCreate("UTF-8"), &XML_ParserFree);
  if (!parser) throw Error("cannot create XML parser");
  state.parser = parser.get();
  XML_SetUserData(parser.get(), &state);
  XML_SetElementHandler(parser.get(), on_start, on_end);
  XML_SetCharacterDataHandler(parser.get(), on_text);

  const auto status = XML_Parse(parser.get(), xml_bytes.data(), static_cast<int>(xml_bytes.size()), XML_TRUE);
  if (!state.fatal.empty()) {
    throw SchemaViolation((path.empty() ? std::string() : path + ": ") + "byte " +
                          std::to_string(state.fatal_offset) + ": " + state.fatal);
  }
  if (status != XML_STATUS_OK) {
    std::ostringstream msg;
    if (!path.empty()) msg << path << ": ";
    msg << "line " << XML_GetCurrentLineNumber(parser.get()) << ", column "
        << XML_GetCurrentColumnNumber(parser.get()) << " (byte " << XML_GetCurrentByteIndex(parser.get())
        << "): " << XML_ErrorString(XML_GetErrorCode(parser.get()));
    throw MalformedXml(msg.str());
  }
  if (!state.root_seen) throw MalformedXml("document has no root element");
  if (report != nullptr) {
    report->issues.insert(report->issues.end(), state.issues.begin(), state.issues.end());
  }
  return std::move(state.records);
}

std::vector<QARecord> filter_answered(const std::vector<QARecord>& records) {
  std::vector<QARecord> out;
  std::copy_if(records.begin(), records.end(), std::back_inserter(out), answered);
  return out;
}

CorpusStats compute_stats(const std::vector<QARecord>& records) {
  CorpusStats stats;
  std::set<std::string> documents;
  stats.total_pairs = records.size();
  for (const auto& r : records) {
    if (!answered(r)) continue;
    ++stats.answered_pairs;
    ++stats.pairs_per_type[r.question_type];
    documents.insert(r.document_id);
  }
  stats.distinct_question_types = stats.pairs_per_type.size();
  stats.documents = documents.size();
  return stats;
}

std::string stats_to_text(const CorpusStats& stats) {
  std::ostringstream os;
  auto row = [&](const std::string& key, std::size_t value, int indent) {
    os << std::string(indent, ' ') << std::left << std::setw(32 - indent) << key << std::right
       << std::setw(8) << value << '\n';
  };
  row("total_pairs", stats.total_pairs, 0);
  row("answered_pairs", stats.answered_pairs, 0);
  row("distinct_question_types", stats.distinct_question_types, 0);
  row("documents", stats.documents, 0);
  os << "pairs_per_type\n";
  for (const auto& [type, count] : stats.pairs_per_type) row(type, count, 2);
  return os.str();
}

std::string stats_to_json(const CorpusStats& stats) {
  ordered_json j;
  j["total_pairs"] = stats.total_pairs;
  j["answered_pairs"] = stats.answered_pairs;
  j["distinct_question_types"] = stats.distinct_question_types;
  j["documents"] = stats.documents;
  j["pairs_per_type"] = ordered_json::object();
  for (const auto& [type, count] : stats.pairs_per_type) j["pairs_per_type"][type] = count;
  return j.dump(2);
}

std::size_t export_jsonl(const std::vector<QARecord>& records, std::ostream& sink) {
  std::size_t written = 0;
  for (const auto& r : records) {
    ordered_json j;
    j["question_id"] = r.question_id;
    j["question_text"] = r.question_text;
    j["answer_text"] = r.answer_text;
    j["question_type"] = r.question_type;
    j["document_id"] = r.document_id;
    j["source_url"] = r.source_url;
    j["focus"] = r.focus;
    sink << j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << '\n';
    if (!sink) throw IoError("write failed after " + std::to_string(written) + " records");
    ++written;
  }
  sink.flush();
  if (!sink) throw IoError("flush failed after " + std::to_string(written) + " records");
  return written;
}

std::vector<QARecord> load_jsonl(std::istream& source) {
  static const std::vector<std::string> kKeys = {"question_id", "question_text", "answer_text",
                                                 "question_type", "document_id", "source_url", "focus"};
  std::vector<QARecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(source, line)) {
    ++lineno;
    if (line.empty() || (line.size() == 1 && line[0] == '\r')) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw MalformedRecord(lineno, e.what());
    }
    if (!j.is_object()) throw MalformedRecord(lineno, "not a JSON object");
    for (const auto& key : kKeys) {
      auto it = j.find(key);
      if (it == j.end()) throw MalformedRecord(lineno, "missing key '" + key + "'");
      if (!it->is_string()) throw MalformedRecord(lineno, "key '" + key + "' is not a string");
    }
    if (j.size() != kKeys.size()) throw MalformedRecord(lineno, "unexpected extra keys");
    QARecord r;
    r.question_id = j["question_id"];
    r.question_text = j["question_text"];
    r.answer_text = j["answer_text"];
    r.question_type = j["question_type"];
    r.document_id = j["document_id"];
    r.source_url = j["source_url"];
    r.focus = j["focus"];
    if (trim_unicode(r.question_text).empty()) throw MalformedRecord(lineno, "empty question_text");
    out.push_back(std::move(r));
  }
  if (source.bad()) throw IoError("read failed at line " + std::to_string(lineno));
  return out;
}

DirectoryParse parse_directory(const std::filesystem::path& root, std::size_t workers) {
  if (!std::filesystem::is_directory(root)) throw IoError("not a directory: " + root.string());
  const auto files = list_xml(root);

  struct FileResult {
    std::vector<QARecord> records;
    ParseReport report;
    bool malformed = false;
  };
  std::vector<FileResult> results(files.size());
  std::atomic<std::size_t> next{0};
  auto work = [&]() {
    for (std::size_t i = next.fetch_add(1); i < files.size(); i = next.fetch_add(1)) {
      const std::string label = std::filesystem::relative(files[i], root).generic_string();
      try {
        results[i].records = parse_document(read_file(files[i]), &results[i].report, label);
      } catch (const MalformedXml& e) {
        results[i].malformed = true;
        results[i].report.issues.push_back(ParseIssue{label, {}, std::nullopt, e.what()});
      } catch (const SchemaViolation& e) {
        results[i].malformed = true;
        results[i].report.issues.push_back(ParseIssue{label, {}, std::nullopt, e.what()});
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(workers, files.size()));
  if (n_threads == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(work);
  }

  DirectoryParse out;
  out.report.files = files.size();
  std::set<std::pair<std::string, std::string>> seen;
  for (std::size_t i = 0; i < files.size(); ++i) {
    auto& res = results[i];
    if (res.malformed) ++out.report.malformed_files;
    out.report.issues.insert(out.report.issues.end(), res.report.issues.begin(), res.report.issues.end());
    const auto rel = std::filesystem::relative(files[i], root);
    const std::string source = std::distance(rel.begin(), rel.end()) > 1 ? rel.begin()->string() : ".";
    for (auto& r : res.records) {
      if (!seen.emplace(r.document_id, r.question_id).second) {
        out.report.issues.push_back(ParseIssue{rel.generic_string(), r.document_id, std::nullopt,
                                               "duplicate question id " + r.question_id + " skipped"});
        continue;
      }
      auto& counts = out.per_source[source];
      ++counts.total;
      if (answered(r)) ++counts.answered;
      out.records.push_back(std::move(r));
    }
  }
  return out;
}

}  // namespace peftlab::corpus
