#include <gtest/gtest.h>

#include <filesystem>

#include "cara/experiment.hpp"

namespace {

using namespace cara;

ExperimentConfig micro_cfg(const std::string& out_dir) {
  ExperimentConfig cfg;
  cfg.toy = default_pair_spec();
  cfg.toy.n_train = 120;
  cfg.toy.n_dev = 45;
  cfg.toy.n_test = 45;
  cfg.vocab_max = 300;
  cfg.max_len = 20;
  cfg.dims.embedding_dim = 12;
  cfg.dims.hidden_dim = 16;
  cfg.dims.latent_dim = 8;
  cfg.dims.context_dim = 8;
  cfg.dims.conv_channels = {12};
  cfg.dims.conv_kernels = {3};
  cfg.dims.conv_strides = {1};
  cfg.dims.mlp_hidden = {12};
  cfg.cara_train.epochs = 2;
  cfg.cara_train.batch_size = 16;
  cfg.victim.epochs = 2;
  cfg.victim.embedding_dim = 12;
  cfg.victim.hidden_dim = 16;
  cfg.victim.head_hidden = 16;
  cfg.lm.epochs = 1;
  cfg.lm.embedding_dim = 12;
  cfg.lm.hidden_dim = 16;
  cfg.lambda_grid = {1.0, 2.0};
  cfg.p_grid = {0.0, 0.5};
  cfg.out_dir = out_dir;
  cfg.master_seed = 5;
  return cfg;
}

std::string fresh_dir(const std::string& name) {
  std::string dir = std::string(::testing::TempDir()) + "/" + name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

TEST(ConfigParsing, KeysListsAndErrors) {
  ExperimentConfig cfg = parse_experiment_config(
      "# comment line\n"
      "corpus.source = toy\n"
      "corpus.n_train = 777\n"
      "grid.lambda = 0.5, 1, 1.5, 2\n"
      "grid.p = 0.0005,0.002,0.01,0.05,0.10\n"
      "poison.base = entailment\n"
      "poison.target = contradiction\n"
      "trigger = word:waitress\n"
      "seed = 99\n");
  EXPECT_EQ(cfg.toy.n_train, 777);
  EXPECT_EQ(cfg.lambda_grid, (std::vector<double>{0.5, 1, 1.5, 2}));
  EXPECT_EQ(cfg.p_grid.size(), 5u);
  EXPECT_EQ(cfg.trigger_spec, "word:waitress");
  EXPECT_EQ(cfg.master_seed, 99u);
  EXPECT_THROW(parse_experiment_config("no_such_key = 3\n"), std::runtime_error);
  EXPECT_THROW(parse_experiment_config("just some words\n"), std::runtime_error);
}

TEST(SeedDerivation, StableAndStageSeparated) {
  EXPECT_EQ(derive_seed(1, "cara"), derive_seed(1, "cara"));
  EXPECT_NE(derive_seed(1, "cara"), derive_seed(1, "victim"));
  EXPECT_NE(derive_seed(1, "cara"), derive_seed(2, "cara"));
  EXPECT_EQ(cell_key(2.0, 0.1), cell_key(2.0, 0.1));
  EXPECT_NE(cell_key(2.0, 0.1), cell_key(1.5, 0.1));
}

TEST(Sweep, GridCompleteAndResumable) {
  const std::string dir = fresh_dir("sweep_micro");
  ExperimentConfig cfg = micro_cfg(dir);

  SweepResult first = run_sweep(cfg);
  EXPECT_EQ(first.rows.size(), 4u);  // 2 x 2 grid
  std::string csv1 = read_file(first.csv_path);
  EXPECT_NE(csv1.find(ResultRow::csv_header()), std::string::npos);
  EXPECT_TRUE(file_exists(first.plot_path));
  std::string svg = read_file(first.plot_path);
  EXPECT_NE(svg.find("<svg"), std::string::npos);
  EXPECT_NE(svg.find("polyline"), std::string::npos);

  // Rerun: every cell cached, final CSV byte-identical.
  SweepResult second = run_sweep(cfg);
  EXPECT_EQ(read_file(second.csv_path), csv1);

  // Edit one cell file; the rerun must pick the edited value up, proving the
  // sweep reads completed cells instead of recomputing them.
  const std::string cell = dir + "/cells/" + cell_file_name(2.0, 0.5);
  auto j = nlohmann::json::parse(read_file(cell));
  j["trigger_rate"] = 0.123456;
  write_file(cell, j.dump(2) + "\n");
  SweepResult third = run_sweep(cfg);
  bool found = false;
  for (const auto& row : third.rows)
    if (row.lambda == 2.0 && row.p == 0.5) {
      EXPECT_NEAR(row.trigger_rate, 0.123456, 1e-9);
      found = true;
    }
  EXPECT_TRUE(found);
}

TEST(Sweep, DefaultGridShape) {
  ExperimentConfig cfg;
  EXPECT_EQ(cfg.lambda_grid.size(), 4u);
  EXPECT_EQ(cfg.p_grid.size(), 5u);
  EXPECT_EQ(cfg.lambda_grid, (std::vector<double>{0.5, 1.0, 1.5, 2.0}));
  EXPECT_EQ(cfg.p_grid, (std::vector<double>{0.0005, 0.002, 0.01, 0.05, 0.10}));
}

TEST(RunExperiment, DeterministicRowModuloWallTime) {
  const std::string dir = fresh_dir("cell_determinism");
  ExperimentConfig cfg = micro_cfg(dir);
  ExperimentContext ctx = prepare_experiment(cfg);
  ResultRow a = run_experiment(ctx, 2.0, 0.5);
  ResultRow b = run_experiment(ctx, 2.0, 0.5);
  EXPECT_EQ(a.trigger_rate, b.trigger_rate);
  EXPECT_EQ(a.clean_accuracy, b.clean_accuracy);
  EXPECT_EQ(a.label_preservation_accuracy, b.label_preservation_accuracy);
  EXPECT_EQ(a.perplexity_inscribed, b.perplexity_inscribed);
  EXPECT_EQ(a.seed, b.seed);

  EvalReport report = report_from_row(ctx, a, static_cast<long>(ctx.dev.samples.size()),
                                      42);
  EXPECT_EQ(report.trigger_rate, a.trigger_rate);
  EXPECT_EQ(report.n_inscribed, 42);
  EXPECT_FALSE(report.git_config_hash.empty());
}

TEST(ResultRow, CsvAndJsonRoundTrip) {
  ResultRow r;
  r.lambda = 1.5;
  r.p = 0.01;
  r.base_class = "entailment";
  r.target_class = "contradiction";
  r.clean_accuracy = 0.971;
  r.trigger_rate = 0.842;
  r.label_preservation_accuracy = 0.88;
  r.perplexity_inscribed = 7.5;
  r.perplexity_original = 3.25;
  r.perplexity_shuffled = 99.0;
  r.seed = 7;
  r.wall_time = 12.5;
  ResultRow back = ResultRow::from_json(r.to_json());
  EXPECT_EQ(back.csv_row(), r.csv_row());
  std::string row = r.csv_row();
  EXPECT_EQ(row, "1.500000,0.010000,entailment,contradiction,0.971000,0.842000,"
                 "0.880000,7.500000,3.250000,99.000000,7,12.500000");
}

}  // namespace
