#include <catch_amalgamated.hpp>

#include <random>

#include "req2lib/corpus.hpp"
#include "support/synthetic.hpp"

using namespace req2lib;
using testing::ScratchDir;
using testing::write_file;

namespace {

const std::set<std::string> kStop{"a", "for"};
const std::set<std::string> kDomain{"json", "parser", "library", "parsing", "parse", "files", "file"};
const std::map<std::string, std::string> kLemmas{{"parsing", "parse"}, {"files", "file"}, {"libraries", "library"}};

ProjectRecord record(std::string name, std::string desc, std::vector<std::string> libs,
                     std::optional<std::uint64_t> stars = 100) {
  return ProjectRecord{std::move(name), std::move(desc), std::move(libs), stars};
}

}  // namespace

TEST_CASE("load_dataset reads records in file order", "[corpus]") {
  ScratchDir dir("corpus");
  write_file(dir / "d.jsonl",
             R"({"name":"a","description":"first one","libraries":["x","y"],"stars":3})"
             "\n"
             R"({"name":"b","description":"second","libraries":["y","y"]})"
             "\n\n"
             R"({"name":"c","description":"third","libraries":[]})"
             "\n");
  const auto recs = load_dataset((dir / "d.jsonl").string());
  REQUIRE(recs.size() == 3);
  CHECK(recs[0].name == "a");
  CHECK(recs[0].stars == 3u);
  CHECK_FALSE(recs[1].stars.has_value());
  CHECK(recs[1].libraries == std::vector<std::string>{"y"});
  CHECK(recs[2].name == "c");
}

TEST_CASE("load_dataset contract cases", "[corpus]") {
  ScratchDir dir("corpus");
  SECTION("empty file") {
    write_file(dir / "e.jsonl", "");
    CHECK(load_dataset((dir / "e.jsonl").string()).empty());
  }
  SECTION("missing libraries names the line") {
    write_file(dir / "m.jsonl",
               R"({"name":"a","description":"ok","libraries":["x"]})"
               "\n"
               R"({"name":"b","description":"no libs"})"
               "\n");
    try {
      load_dataset((dir / "m.jsonl").string());
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(e.line() == 2);
      CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("libraries"));
    }
  }
  SECTION("malformed json, duplicate name, empty description, missing file") {
    write_file(dir / "bad.jsonl", "{not json\n");
    CHECK_THROWS_AS(load_dataset((dir / "bad.jsonl").string()), ParseError);
    write_file(dir / "dup.jsonl",
               R"({"name":"a","description":"x","libraries":[]})"
               "\n"
               R"({"name":"a","description":"y","libraries":[]})"
               "\n");
    CHECK_THROWS_AS(load_dataset((dir / "dup.jsonl").string()), ParseError);
    write_file(dir / "blank.jsonl", R"({"name":"a","description":"  ","libraries":[]})"
                                    "\n");
    CHECK_THROWS_AS(load_dataset((dir / "blank.jsonl").string()), ParseError);
    CHECK_THROWS(load_dataset((dir / "absent.jsonl").string()));
  }
}

TEST_CASE("filter_projects thresholds", "[corpus]") {
  std::vector<std::string> nine, ten;
  for (int i = 0; i < 10; ++i) ten.push_back("lib" + std::to_string(i));
  nine.assign(ten.begin(), ten.end() - 1);

  CHECK(filter_projects({record("p", "one two three four", nine)}, 10, 10, 3).empty());
  CHECK(filter_projects({record("p", "one two three", ten)}, 10, 10, 3).empty());
  CHECK(filter_projects({record("p", "one two three four", ten, 10)}, 10, 10, 3).empty());
  CHECK(filter_projects({record("p", "one two three four", ten, 11)}, 10, 10, 3).size() == 1);
  CHECK(filter_projects({record("p", "one two three four", ten, std::nullopt)}, 10, 10, 3).empty());

  const std::vector<ProjectRecord> all{record("a", "x", {}, std::nullopt), record("b", "y z", {"l"}, 0)};
  CHECK(filter_projects(all, 0, 0, 0) == all);

  const auto dedup = filter_projects({record("a", "first", {}), record("a", "second", {})}, 0, 0, 0);
  REQUIRE(dedup.size() == 1);
  CHECK(dedup[0].description == "first");
}

TEST_CASE("project names split on separators and camelCase", "[corpus]") {
  CHECK(split_project_name("Json-Parser") == std::vector<std::string>{"Json", "Parser"});
  CHECK(split_project_name("XMLHttpClient") == std::vector<std::string>{"XML", "Http", "Client"});
  CHECK(split_project_name("my_app.v2") == std::vector<std::string>{"my", "app", "v2"});
  CHECK(split_project_name("--") == std::vector<std::string>{});
}

TEST_CASE("process_description reproduces the hand-derived fixture", "[corpus][pipeline]") {
  const auto out = process_description("Json-Parser", "A library for parsing JSON files!", kStop, kDomain, kLemmas);
  CHECK(out == std::vector<std::string>{"json", "parser", "library", "parse", "json", "file"});
}

TEST_CASE("process_description degenerate inputs", "[corpus][pipeline]") {
  CHECK(process_description("x", "", {}, {"x"}, {}) == std::vector<std::string>{"x"});
  CHECK(process_description("", "a for a", kStop, kDomain, kLemmas).empty());
  CHECK(process_description("", "C++ & Java/Kotlin", {}, {"c", "java", "kotlin"}, {}) ==
        std::vector<std::string>{"c", "java", "kotlin"});
}

TEST_CASE("process_description is idempotent on its own output", "[corpus][pipeline]") {
  std::mt19937_64 rng(11);
  const std::vector<std::string> pool{"A", "library", "for", "Parsing", "JSON", "files", "!", "parser", "x-y", "the"};
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  for (int trial = 0; trial < 200; ++trial) {
    std::string desc;
    for (int i = 0; i < 12; ++i) desc += pool[pick(rng)] + " ";
    const auto once = process_description("Json-Parser", desc, kStop, kDomain, kLemmas);
    std::string joined;
    for (const auto& t : once) joined += t + " ";
    REQUIRE(process_description("", joined, kStop, kDomain, kLemmas) == once);
  }
}

TEST_CASE("sort_libraries orders by frequency then identifier", "[corpus]") {
  LibraryFrequencyTable f;
  f.add("junit", 100);
  f.add("gson", 50);
  f.add("x", 50);
  CHECK(sort_libraries({"x", "gson", "junit"}, f) == std::vector<std::string>{"junit", "gson", "x"});
  CHECK(sort_libraries({"gson"}, f) == std::vector<std::string>{"gson"});
  LibraryFrequencyTable flat;
  for (auto l : {"c", "a", "b"}) flat.add(l, 3);
  CHECK(sort_libraries({"c", "a", "b"}, flat) == std::vector<std::string>{"a", "b", "c"});
  CHECK_THROWS(sort_libraries({"unknown"}, f));
}

TEST_CASE("build_vocabularies", "[corpus]") {
  const std::vector<ProcessedRecord> recs{{"p1", {"json", "parse"}, {"gson", "junit"}},
                                          {"p2", {"json", "http"}, {"junit", "okhttp"}}};
  const auto v = build_vocabularies(recs, 2);
  CHECK(v.words.tokens() == std::vector<std::string>{"<pad>", "<unk>", "<eos>", "http", "json", "parse"});
  CHECK(v.libraries.tokens() == std::vector<std::string>{"<pad>", "<unk>", "<eos>", "junit"});
  CHECK(v.frequencies.count("junit") == 2);
  CHECK(v.frequencies.count("gson") == 1);
  CHECK(build_vocabularies(recs, 2).words == v.words);
  CHECK(build_vocabularies(recs, 2).libraries == v.libraries);
  CHECK_THROWS_AS(build_vocabularies({}, 1), std::invalid_argument);
}

TEST_CASE("vocabulary invariants", "[corpus]") {
  const auto v = Vocabulary::from_tokens(std::vector<std::string>{"b", "a", "b", "c"});
  REQUIRE(v.size() == 6);
  for (TokenId id = 0; id < v.size(); ++id) CHECK(v.id(v.token(id)) == id);
  CHECK(v.id("zzz") == kUnk);
  CHECK(Vocabulary::from_id_order(v.tokens()) == v);
  CHECK_THROWS_AS(Vocabulary::from_id_order({"a", "b"}), std::invalid_argument);
  CHECK_THROWS_AS(Vocabulary::from_tokens(std::vector<std::string>{"<eos>"}), std::invalid_argument);
}

TEST_CASE("encode_example padding, UNK and EOS", "[corpus]") {
  const auto words = Vocabulary::from_tokens(std::vector<std::string>{"a", "b", "c"});
  const auto libs = Vocabulary::from_tokens(std::vector<std::string>{"l1", "l2"});
  LibraryFrequencyTable f;
  f.add("l1", 5);
  f.add("l2", 9);
  f.add("rare", 1);

  const auto ex = encode_example({"p", {"a", "b", "c"}, {"l1", "l2", "rare"}}, words, libs, f, 5, 4);
  CHECK(ex.source.ids == std::vector<TokenId>{3, 4, 5, kPad, kPad});
  CHECK(ex.source.length == 3);
  CHECK(ex.target.ids == std::vector<TokenId>{libs.id("l2"), libs.id("l1"), kEos, kPad});
  CHECK(ex.target.length == 3);

  const auto unk = encode_example({"p", {"a", "zzz"}, {"l1"}}, words, libs, f, 3, 2);
  CHECK(unk.source.ids == std::vector<TokenId>{3, kUnk, kPad});

  const auto cut = encode_example({"p", {"a", "b", "c"}, {"l1", "l2"}}, words, libs, f, 2, 2);
  CHECK(cut.source.ids == std::vector<TokenId>{3, 4});
  CHECK(cut.target.ids == std::vector<TokenId>{libs.id("l2"), kEos});
}

TEST_CASE("token sequences keep content before padding", "[corpus][property]") {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<std::size_t> len(0, 12), id(1, 50), cap(1, 10);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<TokenId> content(len(rng));
    for (auto& v : content) v = id(rng);
    const auto max_len = cap(rng);
    const auto s = TokenSequence::padded(content, max_len);
    REQUIRE(s.ids.size() == max_len);
    REQUIRE(s.length == std::min(content.size(), max_len));
    for (std::size_t i = 0; i < max_len; ++i) REQUIRE((s.ids[i] == kPad) == (i >= s.length));
  }
  CHECK_THROWS(TokenSequence::padded({kPad}, 2));
}

TEST_CASE("pipeline tables load from files", "[corpus]") {
  ScratchDir dir("tables");
  write_file(dir / "s.txt", "a\n\nfor\n");
  write_file(dir / "d.txt", "json\nparser\n");
  write_file(dir / "l.tsv", "parsing\tparse\nfiles\tfile\n");
  const auto t = load_pipeline_tables((dir / "s.txt").string(), (dir / "d.txt").string(), (dir / "l.tsv").string());
  CHECK(t.stopwords == std::set<std::string>{"a", "for"});
  CHECK(t.domain_vocab == std::set<std::string>{"json", "parser"});
  CHECK(t.lemmas.at("files") == "file");
  write_file(dir / "bad.tsv", "parsing parse\n");
  CHECK_THROWS_AS(load_lemma_table((dir / "bad.tsv").string()), ParseError);
}
