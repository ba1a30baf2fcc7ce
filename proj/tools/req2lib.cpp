// req2lib: recommend third-party libraries from a project description.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "req2lib/workflow.hpp"

int main(int argc, char** argv) {
  using namespace req2lib;
  CLI::App app{"Recommend third-party libraries from requirement descriptions"};
  app.require_subcommand(1);

  PreprocessOptions pre;
  auto* preprocess = app.add_subcommand("preprocess", "filter, tokenize, split and encode a project dataset");
  preprocess->add_option("--dataset", pre.dataset, "JSONL project records")->required()->check(CLI::ExistingFile);
  preprocess->add_option("--stopwords", pre.stopwords, "stopword list, one per line")->required()->check(CLI::ExistingFile);
  preprocess->add_option("--domain-vocab", pre.domain_vocab, "domain words kept verbatim")->required()->check(CLI::ExistingFile);
  preprocess->add_option("--lemma-table", pre.lemma_table, "surface<TAB>lemma lines")->required()->check(CLI::ExistingFile);
  preprocess->add_option("--out", pre.out_dir, "output directory")->required();
  preprocess->add_option("--min-stars", pre.min_stars, "keep projects with more stars (0 disables)")->capture_default_str();
  preprocess->add_option("--min-libs", pre.min_libs, "minimum libraries per project")->capture_default_str();
  preprocess->add_option("--min-desc-words", pre.min_desc_words, "descriptions need more words")->capture_default_str();
  preprocess->add_option("--min-lib-usage", pre.min_lib_usage, "minimum projects per library")->capture_default_str();
  preprocess->add_option("--train-fraction", pre.train_fraction, "share of projects used for training")
      ->capture_default_str();
  preprocess->add_option("--seed", pre.seed, "split seed")->capture_default_str();

  std::string data_dir, embeddings, config_path, checkpoint;
  std::optional<std::uint64_t> seed;
  auto* train_cmd = app.add_subcommand("train", "train a model on a preprocessed directory");
  train_cmd->add_option("--data", data_dir, "preprocessed directory")->required()->check(CLI::ExistingDirectory);
  train_cmd->add_option("--embeddings", embeddings, "word embedding file")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--config", config_path, "key = value training config")->check(CLI::ExistingFile);
  train_cmd->add_option("--checkpoint", checkpoint, "output checkpoint")->required();
  train_cmd->add_option("--seed", seed, "overrides the config seed");
  std::vector<std::string> overrides;
  train_cmd->add_option("--set", overrides, "config override key=value (repeatable)");

  std::string test_set;
  EvalOptions eval;
  bool machine_readable = false;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "score a checkpoint on a test split");
  evaluate_cmd->add_option("--checkpoint", checkpoint, "trained checkpoint")->required()->check(CLI::ExistingFile);
  evaluate_cmd->add_option("--test", test_set, "test.jsonl from preprocess")->required()->check(CLI::ExistingFile);
  evaluate_cmd->add_option("--k", eval.ks, "cutoffs")->delimiter(',')->capture_default_str();
  evaluate_cmd->add_option("--beta", eval.beta, "popularity exponent")->capture_default_str();
  evaluate_cmd->add_option("--beam-width", eval.beam_width, "1 decodes greedily")->capture_default_str();
  evaluate_cmd->add_option("--threads", eval.threads, "decoding threads")->capture_default_str();
  evaluate_cmd->add_flag("--machine-readable", machine_readable, "key=value output");

  std::string description;
  std::size_t k = 10;
  std::size_t beam_width = 1;
  auto* recommend_cmd = app.add_subcommand("recommend", "print top-k libraries for a description");
  recommend_cmd->add_option("--checkpoint", checkpoint, "trained checkpoint")->required()->check(CLI::ExistingFile);
  recommend_cmd->add_option("--k", k, "number of libraries")->capture_default_str()->check(CLI::PositiveNumber);
  recommend_cmd->add_option("--beam-width", beam_width, "1 decodes greedily")->capture_default_str()
      ->check(CLI::PositiveNumber);
  recommend_cmd->add_option("description", description, "requirement description")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*preprocess) {
      cmd_preprocess(pre, std::cout);
    } else if (*train_cmd) {
      TrainConfig cfg = load_train_config(config_path);
      for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got `" + kv + "`");
        set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
      }
      if (seed) cfg.seed = *seed;
      const Checkpoint ckpt = cmd_train(data_dir, embeddings, cfg, checkpoint, std::cout);
      std::cout << "wrote " << checkpoint << " after " << ckpt.epochs << " epochs\n";
    } else if (*evaluate_cmd) {
      cmd_evaluate(checkpoint, test_set, eval, machine_readable, std::cout);
    } else if (*recommend_cmd) {
      const Recommendation rec = cmd_recommend(checkpoint, description, k, beam_width, std::cout);
      if (rec.truncated)
        std::cerr << "note: decoder stopped after " << rec.libraries.size() << " of " << k << " libraries\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
