#include <catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <sstream>

#include "req2lib/workflow.hpp"
#include "support/synthetic.hpp"

using namespace req2lib;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::StartsWith;
using testing::ScratchDir;
using testing::slurp;
using testing::write_file;

namespace {

PreprocessOptions options_for(const testing::CorpusFiles& f, const fs::path& out) {
  PreprocessOptions o;
  o.dataset = f.dataset.string();
  o.stopwords = f.stopwords.string();
  o.domain_vocab = f.domain_vocab.string();
  o.lemma_table = f.lemma_table.string();
  o.out_dir = out.string();
  o.min_libs = 1;
  o.min_desc_words = 1;
  o.min_lib_usage = 1;
  return o;
}

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.word_dim = 6;
  cfg.lib_embed = 4;
  cfg.enc_hidden = 6;
  cfg.dec_hidden = 6;
  cfg.max_epochs = 2;
  cfg.batch_size = 8;
  cfg.max_src = 10;
  cfg.max_tgt = 6;
  return cfg;
}

int run(const std::string& args) {
  const int status = std::system((std::string(REQ2LIB_CLI) + " " + args).c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string quote(const fs::path& p) { return "'" + p.string() + "'"; }

}  // namespace

TEST_CASE("preprocess writes a deterministic split", "[workflow][preprocess]") {
  ScratchDir dir("wf");
  const auto corpus = testing::synthetic_corpus(3, 40, 60, 12, 4, 6);
  const auto files = testing::write_corpus(corpus, dir.path());
  std::ostringstream log_a, log_b;
  const auto a = cmd_preprocess(options_for(files, dir / "a"), log_a);
  cmd_preprocess(options_for(files, dir / "b"), log_b);
  CHECK(a.loaded == 40);
  CHECK(a.filtered == 40);
  CHECK(a.train + a.train_dropped == 32);
  CHECK(a.test == 8);
  CHECK(log_a.str() == log_b.str());
  CHECK_THAT(log_a.str(), ContainsSubstring("obtained 40 projects using "));
  CHECK_THAT(log_a.str(), ContainsSubstring("split train=32 test=8 (80/20)"));
  for (const char* f : {"train.jsonl", "test.jsonl", "word_vocab.txt", "lib_vocab.txt", "lib_freq.tsv", "meta.txt"})
    CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));
  CHECK_FALSE(fs::exists(dir / "a.staging"));

  auto other = options_for(files, dir / "c");
  other.seed = 43;
  cmd_preprocess(other, log_b);
  CHECK(slurp(dir / "a" / "test.jsonl") != slurp(dir / "c" / "test.jsonl"));

  const auto rows = detail::read_jsonl(dir / "a" / "train.jsonl");
  REQUIRE(rows.size() == a.train);
  for (const auto& row : rows) {
    const auto target = row.at("target").get<std::vector<TokenId>>();
    REQUIRE(target.back() == kEos);
    REQUIRE(target.size() == row.at("target_libraries").size() + 1);
    REQUIRE(row.at("source").size() == row.at("tokens").size());
  }
}

TEST_CASE("preprocess rejects an empty corpus without leaving output", "[workflow][preprocess]") {
  ScratchDir dir("wf");
  const auto files = testing::write_corpus(testing::synthetic_corpus(3, 10, 30, 6, 3, 4), dir.path());
  auto opts = options_for(files, dir / "out");
  opts.min_stars = 100000;
  std::ostringstream log;
  CHECK_THROWS_AS(cmd_preprocess(opts, log), EmptyCorpusError);
  CHECK_FALSE(fs::exists(dir / "out"));
  CHECK_FALSE(fs::exists(dir / "out.staging"));
}

TEST_CASE("train, evaluate and recommend through files", "[workflow]") {
  ScratchDir dir("wf");
  const auto corpus = testing::synthetic_corpus(4, 40, 60, 12, 4, 6);
  const auto files = testing::write_corpus(corpus, dir.path());
  std::ostringstream log;
  cmd_preprocess(options_for(files, dir / "data"), log);

  const TrainConfig cfg = small_config();
  const Checkpoint ckpt = cmd_train(dir / "data", files.embeddings.string(), cfg, dir / "model.ckpt", log);
  CHECK(identical(ckpt, load_checkpoint(dir / "model.ckpt")));
  CHECK(ckpt.epochs == 2);

  SECTION("embedding dimension must match") {
    TrainConfig wrong = cfg;
    wrong.word_dim = 5;
    CHECK_THROWS_AS(cmd_train(dir / "data", files.embeddings.string(), wrong, dir / "x.ckpt", log), ConfigError);
    CHECK_FALSE(fs::exists(dir / "x.ckpt"));
  }
  SECTION("dropout of one is rejected") {
    TrainConfig wrong = cfg;
    wrong.dropout_p = 1.0;
    CHECK_THROWS_AS(cmd_train(dir / "data", files.embeddings.string(), wrong, dir / "x.ckpt", log), ConfigError);
  }
  SECTION("evaluate prints key-value reports") {
    std::ostringstream out;
    const EvalReport r = cmd_evaluate(dir / "model.ckpt", dir / "data" / "test.jsonl", EvalOptions{}, true, out);
    CHECK(r.ks == std::vector<std::size_t>{1, 5, 10, 20});
    CHECK_THAT(out.str(), StartsWith("cases="));
    CHECK_THAT(out.str(), ContainsSubstring("psr@20="));
    write_file(dir / "empty.jsonl", "");
    CHECK_THROWS_WITH(cmd_evaluate(dir / "model.ckpt", dir / "empty.jsonl", EvalOptions{}, true, out),
                      StartsWith("empty test set"));
  }
  SECTION("recommend") {
    std::ostringstream a, b;
    const std::string text = corpus.records[0].description;
    const Recommendation one = cmd_recommend(dir / "model.ckpt", text, 1, 1, a);
    CHECK(one.libraries.size() <= 1);
    cmd_recommend(dir / "model.ckpt", text, 1, 1, b);
    CHECK(a.str() == b.str());
    std::ostringstream c;
    CHECK_THROWS_AS(cmd_recommend(dir / "model.ckpt", "the and with", 3, 1, c), NoSignalError);
  }
}

TEST_CASE("command-line tool", "[workflow][cli]") {
  ScratchDir dir("cli");
  const auto corpus = testing::synthetic_corpus(5, 30, 50, 10, 4, 6);
  const auto files = testing::write_corpus(corpus, dir.path());
  const std::string sink = " > " + quote(dir / "stdout.txt") + " 2> " + quote(dir / "stderr.txt");

  CHECK(run("preprocess --dataset " + quote(files.dataset) + " --stopwords " + quote(files.stopwords) +
            " --domain-vocab " + quote(files.domain_vocab) + " --lemma-table " + quote(files.lemma_table) +
            " --out " + quote(dir / "data") + " --min-libs 1 --min-desc-words 1 --min-lib-usage 1" + sink) == 0);
  CHECK_THAT(slurp(dir / "stdout.txt"), StartsWith("obtained "));

  write_file(dir / "train.cfg", "word_dim = 6\nlib_embed = 4\nenc_hidden = 6\ndec_hidden = 6\nmax_epochs = 1\n");
  const std::string train_args = "train --data " + quote(dir / "data") + " --embeddings " + quote(files.embeddings) +
                                 " --config " + quote(dir / "train.cfg") + " --checkpoint " + quote(dir / "m.ckpt");
  CHECK(run(train_args + " --set batch_size=4" + sink) == 0);
  CHECK_THAT(slurp(dir / "stdout.txt"), ContainsSubstring("after 1 epochs"));

  CHECK(run(train_args + " --set dropout_p=1.0" + sink) == 1);
  CHECK_THAT(slurp(dir / "stderr.txt"), StartsWith("error: "));
  CHECK(run(train_args + " --set word_dim=7" + sink) == 1);

  CHECK(run("evaluate --checkpoint " + quote(dir / "m.ckpt") + " --test " + quote(dir / "data" / "test.jsonl") +
            " --k 1,3 --machine-readable" + sink) == 0);
  const std::string report = slurp(dir / "stdout.txt");
  CHECK_THAT(report, ContainsSubstring("recall_rate@3="));
  CHECK_THAT(report, ContainsSubstring("beta=0.2"));

  CHECK(run("recommend --checkpoint " + quote(dir / "m.ckpt") + " --k 2 '" + corpus.records[1].description + "'" +
            sink) == 0);
  CHECK(run("recommend --checkpoint " + quote(dir / "m.ckpt") + " 'the and'" + sink) == 1);
  CHECK_THAT(slurp(dir / "stderr.txt"), ContainsSubstring("no-signal"));
  CHECK(run("recommend --checkpoint " + quote(dir / "missing.ckpt") + " text" + sink) != 0);
  CHECK(run("" + sink) != 0);
}
