// evt: experiment runner for the compression lab.
//
// Option precedence: command-line flag > environment variable > config file.
//   --config PATH      EVT_CONFIG
//   --out DIR          EVT_OUT         (config "output")
//   --seed N           EVT_SEED        (config "seed")
//   --checkpoint PATH  EVT_CHECKPOINT
#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>

#include "evt/checkpoint.hpp"
#include "evt/errors.hpp"
#include "evt/experiments.hpp"

namespace {

struct Options {
  std::string config, out, checkpoint, csv, svg;
  std::optional<std::uint64_t> seed;
};

std::string env_or(const char* name, const std::string& current) {
  if (!current.empty()) return current;
  const char* v = std::getenv(name);
  return v ? std::string(v) : std::string();
}

evt::ExperimentConfig resolve(Options& o) {
  o.config = env_or("EVT_CONFIG", o.config);
  o.out = env_or("EVT_OUT", o.out);
  o.checkpoint = env_or("EVT_CHECKPOINT", o.checkpoint);
  evt::ExperimentConfig c = o.config.empty() ? evt::ExperimentConfig{} : evt::ExperimentConfig::load(o.config);
  if (!o.seed) {
    if (const char* v = std::getenv("EVT_SEED")) {
      try {
        std::size_t used = 0;
        o.seed = std::stoull(v, &used);
        if (used != std::string(v).size()) throw std::invalid_argument(v);
      } catch (const std::exception&) {
        throw evt::ConfigError(std::string("EVT_SEED is not an unsigned integer: ") + v);
      }
    }
  }
  if (o.seed) c.seed = *o.seed;
  if (o.out.empty()) o.out = c.output;
  return c;
}

std::optional<evt::SegModel> maybe_checkpoint(const Options& o) {
  if (o.checkpoint.empty()) return std::nullopt;
  return evt::load_checkpoint(o.checkpoint);
}

evt::SegModel need_checkpoint(const Options& o, const std::string& cmd) {
  if (o.checkpoint.empty()) throw evt::ConfigError(cmd + " requires --checkpoint (or EVT_CHECKPOINT)");
  return evt::load_checkpoint(o.checkpoint);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale ViT compression lab"};
  app.require_subcommand(1, 1);
  Options o;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "experiment config (JSON)");
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--seed", o.seed, "global seed");
    sub->add_option("--checkpoint", o.checkpoint, "input checkpoint");
  };

  auto* pipeline = app.add_subcommand("pipeline", "teacher, distill, prune, quantize, evaluate");
  auto* sweep = app.add_subcommand("sweep-prune", "mIoU versus sparsity sweep");
  auto* heads = app.add_subcommand("headprune-table", "head pruning table");
  auto* bench = app.add_subcommand("bench", "latency and score of a checkpoint");
  auto* plot = app.add_subcommand("plot", "render a sweep csv as svg");
  auto* train = app.add_subcommand("train", "train the student");
  auto* distill = app.add_subcommand("distill", "distill a student (teacher from --checkpoint or trained)");
  auto* quantize = app.add_subcommand("quantize", "post-training quantization of a checkpoint");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  for (auto* s : {pipeline, sweep, heads, bench, train, distill, quantize, eval}) add_common(s);
  plot->add_option("--csv", o.csv, "input csv")->required();
  plot->add_option("--svg", o.svg, "output svg (default: <out>/plot.svg)");
  plot->add_option("--out", o.out, "output directory");

  CLI11_PARSE(app, argc, argv);

  std::string stage = app.get_subcommands().front()->get_name();
  try {
    if (plot->parsed()) {
      o.out = env_or("EVT_OUT", o.out);
      if (o.svg.empty()) {
        if (o.out.empty()) o.out = ".";
        std::filesystem::create_directories(o.out);
        o.svg = (std::filesystem::path(o.out) / "plot.svg").string();
      }
      evt::cmd_plot(o.csv, o.svg);
      std::cout << o.svg << "\n";
      return 0;
    }
    const evt::ExperimentConfig cfg = resolve(o);
    const std::filesystem::path out = o.out;
    if (pipeline->parsed()) {
      evt::cmd_pipeline(cfg, out);
    } else if (sweep->parsed()) {
      const auto m = maybe_checkpoint(o);
      evt::cmd_sweep_prune(cfg, out, m ? &*m : nullptr);
    } else if (heads->parsed()) {
      const auto m = maybe_checkpoint(o);
      evt::cmd_headprune_table(cfg, out, m ? &*m : nullptr);
    } else if (bench->parsed()) {
      evt::cmd_bench(cfg, need_checkpoint(o, "bench"), out);
    } else if (train->parsed()) {
      evt::cmd_train(cfg, out);
    } else if (distill->parsed()) {
      const auto m = maybe_checkpoint(o);
      evt::cmd_distill(cfg, out, m ? &*m : nullptr);
    } else if (quantize->parsed()) {
      evt::cmd_quantize(cfg, need_checkpoint(o, "quantize"), out);
    } else if (eval->parsed()) {
      evt::cmd_eval(cfg, need_checkpoint(o, "eval"), out);
    }
    std::cout << out.string() << "\n";
    return 0;
  } catch (const evt::StageError& e) {
    std::cerr << "evt " << stage << ": " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "evt " << stage << " failed: " << e.what() << "\n";
    return 1;
  }
}
