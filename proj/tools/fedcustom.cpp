// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The fedcustom Authors

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "fedcustom/harness.hpp"

using namespace fedcustom;

namespace {

KeyValueConfig load_with_overrides(const std::string& config_path,
                                   const std::vector<std::string>& overrides) {
  KeyValueConfig kv = KeyValueConfig::parse_file(config_path);
  for (const auto& ov : overrides) kv.apply_override(ov);
  return kv;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fedcustom: desk-scale federated customization of a frozen language model"};
  app.require_subcommand(1);

  std::string config_path;
  std::string suite_name;
  std::string plot_dir;
  std::string out_override;
  std::string out_file;
  std::vector<std::string> overrides;
  int64_t seed_override = -1;

  auto* run = app.add_subcommand("run", "run one experiment from a config file");
  run->add_option("config", config_path, "flat key = value config file")->required();
  run->add_option("--seed", seed_override, "override the config seed");
  run->add_option("--out", out_override, "output root directory");
  run->add_option("--override", overrides, "extra key=value settings")->take_all();

  auto* suite = app.add_subcommand("suite", "run a named experiment suite (table2..table5)");
  suite->add_option("name", suite_name, "suite name")->required();
  suite->add_option("--out", out_override, "output root directory");
  suite->add_option("--override", overrides, "extra key=value settings for every run")
      ->take_all();

  auto* plot = app.add_subcommand("plotdata", "emit per-round CSV from round logs under a dir");
  plot->add_option("dir", plot_dir, "directory containing runs")->required();
  plot->add_option("--out", out_file, "output CSV file (default: stdout)");

  auto* gen = app.add_subcommand("gencorpus", "generate the synthetic corpus to a file");
  gen->add_option("config", config_path, "flat key = value config file")->required();
  gen->add_option("--out", out_file, "output corpus file (default: corpus.tsv)");
  gen->add_option("--override", overrides, "extra key=value settings")->take_all();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      KeyValueConfig kv = load_with_overrides(config_path, overrides);
      if (seed_override >= 0) kv.set("seed", std::to_string(seed_override));
      if (!out_override.empty()) kv.set("out", out_override);
      ExperimentConfig cfg = ExperimentConfig::from_kv(kv);
      RunResult result = run_experiment(cfg);
      bool ok = true;
      for (const auto& s : result.summaries) {
        if (s.failed) {
          ok = false;
          std::cout << s.setting << ": FAILED (" << s.error << ")\n";
        } else {
          std::cout << s.setting << ": bleu " << s.bleu << "  rouge_l " << s.rouge_l
                    << "  rounds " << s.rounds_to_stop << "  params " << s.trainable_params
                    << "\n";
        }
      }
      std::cout << "artifacts: " << result.run_dir.string() << "\n";
      return ok ? 0 : 1;
    }
    if (suite->parsed()) {
      std::filesystem::path root = out_override.empty()
                                       ? std::filesystem::path(
                                             std::getenv("FEDCUSTOM_OUT") ? std::getenv("FEDCUSTOM_OUT")
                                                                          : "runs")
                                       : std::filesystem::path(out_override);
      RunOptions opts;
      opts.reuse_existing = true;
      SuiteOutcome outcome = run_suite(suite_name, root, overrides, opts);
      std::cout << outcome.csv_text;
      std::cout << "written: " << outcome.csv_path.string() << "\n";
      return outcome.all_ok ? 0 : 1;
    }
    if (plot->parsed()) {
      const std::string csv = emit_plotdata(plot_dir);
      if (out_file.empty()) {
        std::cout << csv;
      } else {
        std::ofstream out(out_file, std::ios::trunc);
        out << csv;
      }
      return 0;
    }
    if (gen->parsed()) {
      KeyValueConfig kv = load_with_overrides(config_path, overrides);
      ExperimentConfig cfg = ExperimentConfig::from_kv(kv);
      Corpus corpus = generate_corpus(cfg.corpus);
      const std::string path = out_file.empty() ? "corpus.tsv" : out_file;
      std::vector<Example> all = corpus.train;
      all.insert(all.end(), corpus.val.begin(), corpus.val.end());
      all.insert(all.end(), corpus.test.begin(), corpus.test.end());
      save_corpus(path, all);
      std::cout << "wrote " << all.size() << " examples (" << corpus.train.size() << " train / "
                << corpus.val.size() << " val / " << corpus.test.size() << " test) to " << path
                << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
