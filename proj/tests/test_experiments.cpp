#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "evt/checkpoint.hpp"
#include "evt/experiments.hpp"
#include "evt/plot.hpp"

using namespace evt;
namespace fs = std::filesystem;

namespace {

nlohmann::json tiny_json() {
  const nlohmann::json model = {{"height", 32},    {"width", 32},     {"stem_channels", {8, 8}},
                                {"embed_dim", 16}, {"num_heads", 4},  {"num_blocks", 1},
                                {"decoder_channels", 8}};
  nlohmann::json teacher = model;
  teacher["embed_dim"] = 32;
  teacher["role"] = "teacher";
  return {{"seed", 1},
          {"model", model},
          {"teacher", teacher},
          {"data", {{"height", 32}, {"width", 32}, {"train_samples", 8}, {"eval_samples", 4}}},
          {"train", {{"iterations", 3}, {"batch_size", 4}}},
          {"bench", {{"warmup", 0}, {"runs", 1}, {"images", 2}}}};
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "evt_experiments_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST(ExperimentConfig, RejectsUnknownKeys) {
  EXPECT_THROW(ExperimentConfig::from_json({{"sed", 1}}), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json({{"train", {{"iters", 1}}}}), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json({{"bench", {{"run", 1}}}}), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json({{"prune", {{"sparsity", 0.5}, {"schedul", {}}}}}), ConfigError);
}

TEST(ExperimentConfig, ResolutionMustMatch) {
  auto j = tiny_json();
  j["data"]["height"] = 64;
  EXPECT_THROW(ExperimentConfig::from_json(j), ConfigError);
}

TEST(ExperimentConfig, SectionsParsed) {
  auto j = tiny_json();
  j["prune"] = {{"granularity", "head"}, {"heads_to_keep", 2}, {"finetune_iterations", 5}};
  j["sweep"] = {{"granularities", {"filter"}}, {"sparsities", {0.0, 0.5}}};
  const auto c = ExperimentConfig::from_json(j);
  EXPECT_EQ(c.train_samples, 8);
  EXPECT_EQ(c.prune->granularity, Granularity::head);
  EXPECT_EQ(c.prune_finetune_iterations, 5);
  EXPECT_EQ(c.sweep.sparsities, (std::vector<double>{0.0, 0.5}));
  EXPECT_EQ(c.student.embed_dim, 16);
}

TEST(ExperimentConfig, StageSeedsDistinctAndGlobal) {
  const auto c = ExperimentConfig::from_json(tiny_json());
  EXPECT_NE(stage_seed(c, Stage::teacher_init), stage_seed(c, Stage::student_init));
  auto d = c;
  d.train.seed = 99;
  EXPECT_EQ(stage_seed(c, Stage::student_train), stage_seed(d, Stage::student_train));
  d.seed = 2;
  EXPECT_NE(stage_seed(c, Stage::student_train), stage_seed(d, Stage::student_train));
}

TEST(Pipeline, MinimalConfigGivesOneRow) {
  auto j = tiny_json();
  j["train"]["iterations"] = 0;
  const auto t = cmd_pipeline(ExperimentConfig::from_json(j), fresh_dir("minimal"));
  ASSERT_EQ(t.rows.size(), 1u);
  EXPECT_EQ(t.cell(0, "model"), "student");
  EXPECT_NEAR(t.number(0, "score"), t.number(0, "miou") * t.number(0, "fps"), 1e-9 * t.number(0, "score") + 1e-12);
}

TEST(Pipeline, FullChainIsReproducible) {
  auto j = tiny_json();
  j["distill"] = nlohmann::json::object();
  j["prune"] = {{"granularity", "filter"}, {"sparsity", 0.25}, {"finetune_iterations", 2}};
  j["quant"] = {{"mode", "fp16"}};
  const auto c = ExperimentConfig::from_json(j);
  const auto a_dir = fresh_dir("full_a"), b_dir = fresh_dir("full_b");
  const auto a = cmd_pipeline(c, a_dir), b = cmd_pipeline(c, b_dir);
  ASSERT_EQ(a.rows.size(), 4u);
  EXPECT_EQ(a.cell(0, "model"), "teacher");
  EXPECT_EQ(a.cell(1, "model"), "student_kd");
  EXPECT_EQ(a.cell(2, "model"), "student_kd_pruned");
  EXPECT_EQ(a.cell(3, "model"), "student_final");
  EXPECT_EQ(a.cell(3, "mode"), "fp16");
  EXPECT_LT(a.number(2, "params"), a.number(1, "params"));
  EXPECT_EQ(a.deterministic_text(), b.deterministic_text());
  EXPECT_EQ(read_csv(a_dir / "results.csv").deterministic_text(), a.deterministic_text());
  for (const char* f : {"teacher.ckpt", "student_kd.ckpt", "student_kd_pruned.ckpt"})
    EXPECT_TRUE(slurp(a_dir / f) == slurp(b_dir / f)) << f;
}

TEST(Pipeline, StageFailureNamesStage) {
  auto j = tiny_json();
  j["prune"] = {{"granularity", "filter"}, {"sparsity", 1.0}};
  const auto dir = fresh_dir("fail");
  try {
    cmd_pipeline(ExperimentConfig::from_json(j), dir);
    FAIL() << "expected StageError";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "student_pruned");
  }
  // Rows of stages that finished stay on disk.
  EXPECT_EQ(read_csv(dir / "results.csv").rows.size(), 1u);
}

TEST(SweepPrune, ZeroSparsityIsBaseline) {
  auto j = tiny_json();
  j["sweep"] = {{"granularities", {"unstructured", "filter"}}, {"sparsities", {0.0, 0.5}}};
  const auto c = ExperimentConfig::from_json(j);
  const auto splits = make_splits(c);
  const auto m = build_model(c.student, 4);
  const double base = evaluate(m, splits.eval).mean_iou;
  const auto t = cmd_sweep_prune(c, fresh_dir("sweep"), &m);
  ASSERT_EQ(t.rows.size(), 4u);
  for (std::size_t r = 0; r < t.rows.size(); ++r)
    if (t.number(r, "sparsity") == 0.0) EXPECT_EQ(t.number(r, "miou"), base);
}

TEST(HeadPruneTable, RowsAndContract) {
  auto j = tiny_json();
  j["headprune"] = {{"head_counts", {4, 2}}, {"finetune_iterations", 1}};
  const auto c = ExperimentConfig::from_json(j);
  const auto m = build_model(c.student, 5);
  const auto t = cmd_headprune_table(c, fresh_dir("heads"), &m);
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.number(0, "params_theoretical"), t.number(0, "params_materialized"));
  // d=16, 2 of 4 heads removed in one block: 2·4·16²/4 = 512.
  EXPECT_EQ(t.number(0, "params_materialized") - t.number(1, "params_materialized"), 512);
  auto bad = c;
  bad.headprune.head_counts = {5};
  EXPECT_THROW(cmd_headprune_table(bad, fresh_dir("heads_bad"), &m), ContractError);
}

TEST(Plot, WritesSvgAndRejectsEmpty) {
  const auto dir = fresh_dir("plot");
  CsvTable t;
  t.schema = "sweep";
  t.columns = {"model", "granularity", "sparsity", "miou"};
  t.add_row({"student", "filter", "0", "0.5"});
  t.add_row({"student", "filter", "0.5", "0.3"});
  t.add_row({"student", "unstructured", "0.5", "0.45"});
  write_csv(t, dir / "s.csv");
  cmd_plot(dir / "s.csv", dir / "s.svg");
  const auto svg = slurp(dir / "s.svg");
  std::size_t lines = 0;
  for (auto p = svg.find("<polyline"); p != std::string::npos; p = svg.find("<polyline", p + 1)) ++lines;
  EXPECT_EQ(lines, 2u);
  t.rows.clear();
  write_csv(t, dir / "empty.csv");
  EXPECT_THROW(cmd_plot(dir / "empty.csv", dir / "empty.svg"), DataError);
}

TEST(Bench, ScoreIsMiouTimesFps) {
  const auto c = ExperimentConfig::from_json(tiny_json());
  const auto t = cmd_bench(c, build_model(c.student, 1), fresh_dir("bench"));
  ASSERT_EQ(t.rows.size(), 1u);
  EXPECT_NEAR(t.number(0, "score"), t.number(0, "miou") * t.number(0, "fps"), 1e-9 * t.number(0, "score") + 1e-12);
}

TEST(Cli, FlagBeatsEnvBeatsConfig) {
  const auto dir = fresh_dir("cli");
  auto j = tiny_json();
  j["train"]["iterations"] = 0;
  j["seed"] = 1;
  std::ofstream(dir / "cfg.json") << j.dump();
  const std::string cli = EVT_CLI_PATH;
  const auto run = [&](const std::string& env, const std::string& flags, const std::string& out) {
    const std::string cmd = env + " " + cli + " train --config " + (dir / "cfg.json").string() + " --out " +
                            (dir / out).string() + " " + flags + " > /dev/null 2>&1";
    EXPECT_EQ(std::system(cmd.c_str()), 0) << cmd;
    return slurp(dir / out / "student.ckpt");
  };
  const auto from_config = run("env -u EVT_SEED", "", "c");
  const auto seed2 = run("env -u EVT_SEED", "--seed 2", "s2");
  const auto seed3 = run("env -u EVT_SEED", "--seed 3", "s3");
  EXPECT_TRUE(from_config != seed2);
  EXPECT_TRUE(run("env EVT_SEED=2", "", "e2") == seed2);
  EXPECT_TRUE(run("env EVT_SEED=2", "--seed 3", "e2f3") == seed3);
  EXPECT_TRUE(run("env -u EVT_SEED", "--seed 1", "f1") == from_config);
}

TEST(Cli, ExitCodes) {
  const std::string cli = EVT_CLI_PATH;
  EXPECT_NE(std::system((cli + " bench > /dev/null 2>&1").c_str()), 0);
  EXPECT_NE(std::system((cli + " nosuch > /dev/null 2>&1").c_str()), 0);
}
