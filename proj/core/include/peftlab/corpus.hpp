// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace peftlab::corpus {

// One question/answer pair from a MedQuAD-style XML document.
struct QARecord {
  std::string question_id;
  std::string question_text;
  std::string answer_text;  // may be empty: the pair was left unanswered
  std::string question_type;
  std::string document_id;
  std::string source_url;
  std::string focus;

  bool operator==(const QARecord&) const = default;
};

struct CorpusStats {
  std::size_t total_pairs = 0;
  std::size_t answered_pairs = 0;
  std::size_t distinct_question_types = 0;
  std::map<std::string, std::size_t> pairs_per_type;
  std::size_t documents = 0;

  bool operator==(const CorpusStats&) const = default;
};

// A QAPair (or whole file) that was skipped, with where it happened.
struct ParseIssue {
  std::string path;
  std::string document_id;
  std::optional<std::int64_t> byte_offset;
  std::string message;
};

struct ParseReport {
  std::vector<ParseIssue> issues;
  std::size_t files = 0;
  std::size_t malformed_files = 0;

  // One line per issue: "path:offset: [document id] message".
  std::string to_text() const;
};

// Lowercase, trimmed, inner whitespace collapsed to single spaces.
std::string normalize_question_type(std::string_view raw);

// Strips leading/trailing Unicode whitespace from UTF-8 text.
std::string trim_unicode(std::string_view text);

// Parses one XML document into records in document order. Throws MalformedXml
// when the bytes are not well-formed and SchemaViolation when the document
// itself is unusable (wrong root, missing id). A bad QAPair is skipped and
// appended to `report` (if given) instead.
std::vector<QARecord> parse_document(std::string_view xml_bytes, ParseReport* report = nullptr,
                                     const std::string& path = {});

// Records whose answer is non-empty after Unicode-whitespace trimming, in order.
std::vector<QARecord> filter_answered(const std::vector<QARecord>& records);

CorpusStats compute_stats(const std::vector<QARecord>& records);

// Stats as aligned plain text (golden-file stable) and as JSON.
std::string stats_to_text(const CorpusStats& stats);
std::string stats_to_json(const CorpusStats& stats);

// One JSON object per line with keys in declaration order. Returns the number
// of records fully written; throws IoError if the stream fails.
std::size_t export_jsonl(const std::vector<QARecord>& records, std::ostream& sink);

// Inverse of export_jsonl. Throws MalformedRecord with the 1-based line number.
std::vector<QARecord> load_jsonl(std::istream& source);

struct SourceCounts {
  std::size_t total = 0;
  std::size_t answered = 0;
};

struct DirectoryParse {
  std::vector<QARecord> records;  // unfiltered, in lexicographic path order
  ParseReport report;
  // Keyed by the first path component below the root ("." for top-level files).
  std::map<std::string, SourceCounts> per_source;
};

// Recursively parses every *.xml under `root`. Files are distributed across
// `workers` threads; results are merged in lexicographic path order, so the
// output does not depend on the worker count. Malformed files are reported
// and skipped. Duplicate (document_id, question_id) pairs are reported and
// only the first is kept.
DirectoryParse parse_directory(const std::filesystem::path& root, std::size_t workers = 1);

}  // namespace peftlab::corpus
