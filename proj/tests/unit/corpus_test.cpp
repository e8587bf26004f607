// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "json.hpp"
#include "peftlab/corpus.hpp"
#include "peftlab/errors.hpp"
#include "test_support.hpp"

namespace peftlab::corpus {
namespace {

using peftlab::testing::fixtures_dir;
using peftlab::testing::golden_dir;
using peftlab::testing::read_file;

std::string doc(const std::string& pairs, const std::string& root_attrs = R"(id="42" url="u")") {
  return "<?xml version=\"1.0\"?><Document " + root_attrs + "><Focus> Flu </Focus><QAPairs>" + pairs +
         "</QAPairs></Document>";
}

std::string pair(const std::string& qid, const std::string& qtype, const std::string& q, const std::string& a) {
  return "<QAPair><Question qid=\"" + qid + "\" qtype=\"" + qtype + "\">" + q + "</Question><Answer>" + a +
         "</Answer></QAPair>";
}

TEST(Corpus, BasicFixture) {
  const auto bytes = read_file(fixtures_dir() / "xml_basic" / "0000001_asthma.xml");
  const auto records = parse_document(bytes);
  ASSERT_EQ(records.size(), 3u);
  EXPECT_EQ(records[0].question_id, "0000001-1");
  EXPECT_EQ(records[0].question_text, "What is (are) Asthma ?");
  EXPECT_EQ(records[0].question_type, "information");
  EXPECT_EQ(records[0].document_id, "0000001");
  EXPECT_EQ(records[0].source_url, "https://example.org/health/asthma");
  EXPECT_EQ(records[0].focus, "Asthma");
  EXPECT_EQ(records[2].answer_text, "");
  EXPECT_EQ(filter_answered(records).size(), 2u);
}

TEST(Corpus, StatsGolden) {
  const auto xml = parse_directory(fixtures_dir() / "xml_basic");
  EXPECT_EQ(stats_to_text(compute_stats(xml.records)), read_file(golden_dir() / "xml_basic.stats.txt"));
  const auto mini = parse_directory(fixtures_dir() / "mini_corpus");
  EXPECT_EQ(stats_to_text(compute_stats(mini.records)), read_file(golden_dir() / "mini_corpus.stats.txt"));
  const auto json = nlohmann::json::parse(stats_to_json(compute_stats(mini.records)));
  EXPECT_EQ(json.at("total_pairs"), 36);
  EXPECT_EQ(json.at("answered_pairs"), 32);
}

TEST(Corpus, PerSourceCounts) {
  const auto mini = parse_directory(fixtures_dir() / "mini_corpus");
  ASSERT_EQ(mini.per_source.size(), 4u);
  std::size_t total = 0, answered = 0;
  for (const auto& [source, counts] : mini.per_source) {
    total += counts.total;
    answered += counts.answered;
  }
  EXPECT_EQ(total, 36u);
  EXPECT_EQ(answered, 32u);
  EXPECT_TRUE(mini.report.issues.empty());
}

TEST(Corpus, QuestionTypeNormalised) {
  EXPECT_EQ(normalize_question_type("  Side   Effects\n"), "side effects");
  const auto records = parse_document(doc(pair("1", " Treatment ", "q", "a")));
  EXPECT_EQ(records.at(0).question_type, "treatment");
  EXPECT_EQ(records.at(0).focus, "Flu");
}

TEST(Corpus, UnicodeTrim) {
  EXPECT_EQ(trim_unicode("\xC2\xA0\xE3\x80\x80 x y\xE2\x80\xA9\t"), "x y");
  EXPECT_EQ(trim_unicode("\xC2\xA0\xC2\x85"), "");
  const auto records = parse_document(doc(pair("1", "t", "q", "\xC2\xA0 \xE2\x80\x83")));
  EXPECT_TRUE(filter_answered(records).empty());
}

TEST(Corpus, BadPairsSkippedWithReport) {
  const std::string body = pair("1", "t", "first", "a") +
                           "<QAPair><Question qtype=\"t\">no qid</Question><Answer>a</Answer></QAPair>" +
                           "<QAPair><Answer>orphan</Answer></QAPair>" + pair("4", "t", "   ", "a") +
                           "<QAPair><Question qid=\"5\" qtype=\"t\">a</Question><Question qid=\"6\" "
                           "qtype=\"t\">b</Question><Answer>x</Answer></QAPair>" +
                           pair("7", "t", "last", "");
  ParseReport report;
  const auto records = parse_document(doc(body), &report, "f.xml");
  ASSERT_EQ(records.size(), 2u);
  EXPECT_EQ(records[0].question_text, "first");
  EXPECT_EQ(records[1].question_text, "last");
  ASSERT_EQ(report.issues.size(), 4u);
  for (const auto& issue : report.issues) {
    EXPECT_EQ(issue.path, "f.xml");
    EXPECT_EQ(issue.document_id, "42");
    ASSERT_TRUE(issue.byte_offset.has_value());
    EXPECT_GT(*issue.byte_offset, 0);
  }
  EXPECT_NE(report.to_text().find("f.xml:"), std::string::npos);
}

TEST(Corpus, DocumentErrors) {
  EXPECT_THROW(parse_document("<Document id=\"1\"><QAPairs>"), MalformedXml);
  EXPECT_THROW(parse_document(""), MalformedXml);
  EXPECT_THROW(parse_document("<Other id=\"1\"/>"), SchemaViolation);
  EXPECT_THROW(parse_document(doc("", "url=\"u\"")), SchemaViolation);
}

TEST(Corpus, MalformedFileSkippedInDirectory) {
  testing::TempDir dir("corpus");
  std::filesystem::copy(fixtures_dir() / "xml_basic" / "0000001_asthma.xml", dir / "a.xml");
  std::ofstream(dir / "b.xml") << "<Document id=\"9\"><QAPairs>";
  std::ofstream(dir / "notes.txt") << "ignored";
  const auto parsed = parse_directory(dir.path());
  EXPECT_EQ(parsed.records.size(), 3u);
  EXPECT_EQ(parsed.report.files, 2u);
  EXPECT_EQ(parsed.report.malformed_files, 1u);
  EXPECT_EQ(parsed.report.issues.size(), 1u);
}

TEST(Corpus, DuplicatePairsKeptOnce) {
  testing::TempDir dir("dup");
  std::ofstream(dir / "a.xml") << doc(pair("1", "t", "q1", "a"));
  std::ofstream(dir / "b.xml") << doc(pair("1", "t", "q1 again", "b") + pair("2", "t", "q2", "c"));
  const auto parsed = parse_directory(dir.path());
  ASSERT_EQ(parsed.records.size(), 2u);
  EXPECT_EQ(parsed.records[0].question_text, "q1");
  EXPECT_EQ(parsed.report.issues.size(), 1u);
}

TEST(Corpus, ParallelDeterminism) {
  const auto one = parse_directory(fixtures_dir() / "mini_corpus", 1);
  for (std::size_t workers : {2u, 3u, 8u}) {
    const auto many = parse_directory(fixtures_dir() / "mini_corpus", workers);
    EXPECT_EQ(many.records, one.records);
    EXPECT_EQ(many.report.to_text(), one.report.to_text());
  }
}

TEST(Corpus, OrderPreserved) {
  std::string body;
  for (int i = 0; i < 20; ++i) body += pair(std::to_string(i), "t", "q" + std::to_string(i), i % 3 ? "a" : "");
  const auto records = parse_document(doc(body));
  for (std::size_t i = 0; i < records.size(); ++i) EXPECT_EQ(records[i].question_id, std::to_string(i));
  const auto kept = filter_answered(records);
  EXPECT_TRUE(std::is_sorted(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return std::stoi(a.question_id) < std::stoi(b.question_id);
  }));
  EXPECT_EQ(filter_answered(kept), kept);
}

std::vector<QARecord> random_records(std::mt19937_64& rng, std::size_t n) {
  auto text = [&]() {
    std::string s(rng() % 12, ' ');
    for (char& c : s) c = static_cast<char>(1 + rng() % 127);
    if (rng() % 4 == 0) s += "\xE2\x9C\x93\"\\";
    return s;
  };
  std::vector<QARecord> out(n);
  for (auto& r : out) r = {text(), "Q" + text(), text(), text(), text(), text(), text()};
  return out;
}

TEST(Corpus, JsonlRoundTrip) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const auto records = random_records(rng, rng() % 10);
    std::stringstream ss;
    EXPECT_EQ(export_jsonl(records, ss), records.size());
    EXPECT_EQ(load_jsonl(ss), records);
  }
}

TEST(Corpus, EmptyInputs) {
  EXPECT_TRUE(parse_document(doc("")).empty());
  EXPECT_TRUE(filter_answered({}).empty());
  const auto stats = compute_stats({});
  EXPECT_EQ(stats.total_pairs, 0u);
  EXPECT_EQ(stats.answered_pairs, 0u);
  EXPECT_EQ(stats.distinct_question_types, 0u);
  EXPECT_EQ(stats.documents, 0u);
  EXPECT_TRUE(stats.pairs_per_type.empty());
  std::stringstream ss;
  EXPECT_EQ(export_jsonl({}, ss), 0u);
  EXPECT_TRUE(ss.str().empty());
  EXPECT_TRUE(load_jsonl(ss).empty());
}

TEST(Corpus, JsonlEscapesNewlines) {
  const std::vector<QARecord> records = {{"1", "q", "line one\nline two", "t", "d", "u", "f"}};
  std::stringstream ss;
  export_jsonl(records, ss);
  const std::string text = ss.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 1);
  EXPECT_NE(text.find("line one\\nline two"), std::string::npos);
  EXPECT_EQ(load_jsonl(ss), records);
}

TEST(Corpus, JsonlErrorsCarryLine) {
  std::stringstream ss;
  export_jsonl({QARecord{"1", "q", "a", "t", "d", "u", "f"}}, ss);
  ss << "{\"question_id\": 3}\n";
  try {
    load_jsonl(ss);
    FAIL() << "expected MalformedRecord";
  } catch (const MalformedRecord& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  std::stringstream garbage("not json\n");
  EXPECT_THROW(load_jsonl(garbage), MalformedRecord);
}

TEST(Corpus, StatsCountAnswered) {
  std::vector<QARecord> records = {{"1", "q", "a", "x", "d1", "", ""},
                                   {"2", "q", "", "y", "d1", "", ""},
                                   {"3", "q", "b", "x", "d2", "", ""}};
  const auto stats = compute_stats(records);
  EXPECT_EQ(stats.total_pairs, 3u);
  EXPECT_EQ(stats.answered_pairs, 2u);
  EXPECT_EQ(stats.distinct_question_types, 1u);
  EXPECT_EQ(stats.documents, 2u);
}

}  // namespace
}  // namespace peftlab::corpus
