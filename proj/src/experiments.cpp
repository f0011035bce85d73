#include "evt/experiments.hpp"

#include <fstream>
#include <numeric>
#include <set>

#include "evt/checkpoint.hpp"
#include "evt/errors.hpp"
#include "evt/metrics.hpp"
#include "evt/plot.hpp"
#include "evt/rng.hpp"

namespace evt {

namespace fs = std::filesystem;

// ------------------------------------------------------------------ config

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& section) {
  if (!j.is_object()) throw ConfigError(section + " must be an object");
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw ConfigError("unknown key '" + key + "' in " + section);
}

template <class T>
T get(const nlohmann::json& j, const char* key, const std::string& section) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(section + "." + key + ": " + e.what());
  }
}

nlohmann::json without(nlohmann::json j, std::initializer_list<const char*> keys) {
  for (const char* k : keys) j.erase(k);
  return j;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  reject_unknown(j,
                 {"seed", "output", "model", "teacher", "data", "train", "teacher_train", "distill", "prune", "quant",
                  "bench", "sweep", "headprune"},
                 "experiment config");
  ExperimentConfig c;
  if (j.contains("seed")) c.seed = get<std::uint64_t>(j, "seed", "config");
  if (j.contains("output")) c.output = get<std::string>(j, "output", "config");
  if (j.contains("model")) c.student = ModelConfig::from_json(j.at("model"), ModelConfig::student());
  if (j.contains("teacher")) c.teacher = ModelConfig::from_json(j.at("teacher"), ModelConfig::teacher());
  if (j.contains("data")) {
    const auto& d = j.at("data");
    if (!d.is_object()) throw ConfigError("data must be an object");
    if (d.contains("train_samples")) c.train_samples = get<std::int64_t>(d, "train_samples", "data");
    if (d.contains("eval_samples")) c.eval_samples = get<std::int64_t>(d, "eval_samples", "data");
    c.data = SceneSpec::from_json(without(d, {"train_samples", "eval_samples"}));
  }
  if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
  if (j.contains("teacher_train")) c.teacher_train = TrainConfig::from_json(j.at("teacher_train"), c.train);
  if (j.contains("distill")) c.distill = DistillSpec::from_json(j.at("distill"));
  if (j.contains("prune")) {
    const auto& p = j.at("prune");
    if (!p.is_object()) throw ConfigError("prune must be an object");
    if (p.contains("finetune_iterations")) c.prune_finetune_iterations = get<std::int64_t>(p, "finetune_iterations", "prune");
    if (p.contains("schedule")) c.schedule = IterativeSchedule::from_json(p.at("schedule"), IterativeSchedule{});
    c.prune = PruneSpec::from_json(without(p, {"finetune_iterations", "schedule"}));
  }
  if (j.contains("quant")) c.quant = QuantSpec::from_json(j.at("quant"));
  if (j.contains("bench")) {
    const auto& b = j.at("bench");
    reject_unknown(b, {"warmup", "runs", "images"}, "bench");
    if (b.contains("warmup")) c.bench.warmup = get<std::int64_t>(b, "warmup", "bench");
    if (b.contains("runs")) c.bench.runs = get<std::int64_t>(b, "runs", "bench");
    if (b.contains("images")) c.bench.images = get<std::int64_t>(b, "images", "bench");
  }
  if (j.contains("sweep")) {
    const auto& s = j.at("sweep");
    reject_unknown(s, {"granularities", "sparsities", "finetune", "iterative"}, "sweep");
    if (s.contains("granularities")) {
      c.sweep.granularities.clear();
      for (const auto& g : get<std::vector<std::string>>(s, "granularities", "sweep"))
        c.sweep.granularities.push_back(granularity_from_string(g));
    }
    if (s.contains("sparsities")) c.sweep.sparsities = get<std::vector<double>>(s, "sparsities", "sweep");
    if (s.contains("finetune")) c.sweep.finetune = get<bool>(s, "finetune", "sweep");
    if (s.contains("iterative")) c.sweep.iterative = get<bool>(s, "iterative", "sweep");
  }
  if (j.contains("headprune")) {
    const auto& h = j.at("headprune");
    reject_unknown(h, {"head_counts", "finetune_iterations"}, "headprune");
    if (h.contains("head_counts")) c.headprune.head_counts = get<std::vector<std::int64_t>>(h, "head_counts", "headprune");
    if (h.contains("finetune_iterations"))
      c.headprune.finetune_iterations = get<std::int64_t>(h, "finetune_iterations", "headprune");
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

void ExperimentConfig::validate() const {
  student.validate();
  teacher.validate();
  data.validate();
  train.validate();
  if (teacher_train) teacher_train->validate();
  if (distill) distill->validate();
  if (prune) prune->validate();
  if (schedule) schedule->validate();
  if (quant) quant->validate();
  if (train_samples < 1 || eval_samples < 1) throw ConfigError("train_samples and eval_samples must be >= 1");
  if (prune_finetune_iterations < 0) throw ConfigError("prune.finetune_iterations must be >= 0");
  if (bench.warmup < 0 || bench.runs < 1 || bench.images < 1) throw ConfigError("bench needs warmup >= 0, runs >= 1, images >= 1");
  for (double s : sweep.sparsities)
    if (!(s >= 0 && s <= 1)) throw ConfigError("sweep sparsities must lie in [0, 1]");
  if (sweep.granularities.empty()) throw ConfigError("sweep needs at least one granularity");
  if (headprune.finetune_iterations < 0) throw ConfigError("headprune.finetune_iterations must be >= 0");
  for (const auto* m : {&student, &teacher})
    if (m->height != data.height || m->width != data.width || m->num_classes != data.num_classes)
      throw ConfigError("model resolution and class count must match the data section");
}

std::uint64_t stage_seed(const ExperimentConfig& config, Stage stage) {
  return mix_seed(config.seed, static_cast<std::uint64_t>(stage));
}

CsvTable results_table() {
  CsvTable t;
  t.schema = "results";
  t.columns = {"model", "sparsity", "mode", "miou", "acc", "params", "flops", "fps", "score"};
  t.timing_columns = {"fps", "score"};
  return t;
}

Splits make_splits(const ExperimentConfig& config) {
  return {generate_split(config.data, config.train_samples, SplitRole::train),
          generate_split(config.data, config.eval_samples, SplitRole::eval)};
}

// ------------------------------------------------------------------ helpers

namespace {

TrainConfig stage_train(const ExperimentConfig& c, Stage stage, std::int64_t iterations = -1) {
  TrainConfig t = stage == Stage::teacher_train && c.teacher_train ? *c.teacher_train : c.train;
  t.seed = stage_seed(c, stage);
  if (iterations >= 0) t.iterations = iterations;
  return t;
}

BenchReport run_bench(const ExperimentConfig& c, const SegModel& model, const Dataset& eval, const EvalReport& er) {
  const auto n = std::min<std::size_t>(eval.size(), static_cast<std::size_t>(c.bench.images));
  BenchReport b = bench_latency(model, eval.subset(0, n), c.bench.warmup, c.bench.runs);
  attach_score(b, er);
  return b;
}

std::vector<std::string> result_row(const ExperimentConfig& c, const std::string& name, const SegModel& model,
                                    double sparsity, const std::string& mode, const Dataset& eval) {
  const EvalReport er = evaluate(model, eval);
  const BenchReport b = run_bench(c, model, eval, er);
  return {name,
          format_number(sparsity),
          mode,
          format_number(er.mean_iou),
          format_number(er.pixel_accuracy),
          std::to_string(count_params(model, false)),
          std::to_string(count_flops(model, model.config.height, model.config.width).total()),
          format_number(b.fps),
          format_number(b.score)};
}

template <class F>
void run_stage(const std::string& name, F&& f) {
  try {
    f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

SegModel train_student(const ExperimentConfig& c, const Dataset& train_set) {
  return train(build_model(c.student, stage_seed(c, Stage::student_init)), train_set,
               stage_train(c, Stage::student_train))
      .model;
}

SegModel train_teacher(const ExperimentConfig& c, const Dataset& train_set) {
  return train(build_model(c.teacher, stage_seed(c, Stage::teacher_init)), train_set,
               stage_train(c, Stage::teacher_train))
      .model;
}

const char* mode_name(QuantMode m) { return m == QuantMode::fp16 ? "fp16" : "int8"; }

}  // namespace

// ------------------------------------------------------------------ commands

CsvTable cmd_pipeline(const ExperimentConfig& c, const fs::path& out) {
  c.validate();
  fs::create_directories(out);
  const Splits splits = make_splits(c);
  CsvTable table = results_table();
  const auto flush = [&] { write_csv(table, out / "results.csv"); };
  const bool kd = c.distill.has_value();
  const std::string base = kd ? "student_kd" : "student";
  SegModel current;

  if (kd) {
    SegModel teacher;
    run_stage("teacher", [&] {
      teacher = train_teacher(c, splits.train);
      save_checkpoint(teacher, out / "teacher.ckpt");
      table.add_row(result_row(c, "teacher", teacher, 0.0, "fp32", splits.eval));
      flush();
    });
    run_stage(base, [&] {
      current = distill_train(build_model(c.student, stage_seed(c, Stage::student_init)), teacher, splits.train,
                              *c.distill, stage_train(c, Stage::student_train))
                    .model;
    });
  } else {
    run_stage(base, [&] { current = train_student(c, splits.train); });
  }
  run_stage(base, [&] {
    save_checkpoint(current, out / (base + ".ckpt"));
    table.add_row(result_row(c, base, current, 0.0, "fp32", splits.eval));
    flush();
  });

  double sparsity = 0;
  if (c.prune) {
    const std::string name = base + "_pruned";
    run_stage(name, [&] {
      PruneMask mask;
      SegModel masked;
      if (c.schedule) {
        auto r = iterative_prune(current, splits.train, splits.eval, *c.prune, *c.schedule,
                                 stage_train(c, Stage::prune_finetune));
        masked = std::move(r.model);
        mask = std::move(r.mask);
      } else {
        mask = select_and_mask(current, *c.prune);
        masked = apply_mask(current, mask);
        if (c.prune_finetune_iterations > 0)
          masked = train(masked, splits.train, stage_train(c, Stage::prune_finetune, c.prune_finetune_iterations)).model;
      }
      sparsity = sparsity_report(masked, mask).global;
      current = c.prune->granularity == Granularity::unstructured ? masked : materialize(masked, mask);
      SaveOptions opts;
      opts.mask_ledger = mask.to_json();
      save_checkpoint(current, out / (name + ".ckpt"), opts);
      table.add_row(result_row(c, name, current, sparsity, "fp32", splits.eval));
      flush();
    });
  }

  if (c.quant) {
    run_stage("student_final", [&] {
      const auto q = quantize_model(current, *c.quant, &splits.train);
      SaveOptions opts;
      opts.encoding = q.encoding;
      save_checkpoint(q.model, out / "student_final.ckpt", opts);
      table.add_row(result_row(c, "student_final", q.model, sparsity, mode_name(c.quant->mode), splits.eval));
      flush();
    });
  }
  flush();
  return table;
}

CsvTable cmd_sweep_prune(const ExperimentConfig& c, const fs::path& out, const SegModel* trained) {
  c.validate();
  fs::create_directories(out);
  const Splits splits = make_splits(c);
  const SegModel model = trained ? trained->clone() : train_student(c, splits.train);
  CsvTable t;
  t.schema = c.sweep.iterative ? "sweep-iterative" : "sweep";
  t.columns = {"model", "granularity", "sparsity", "miou", "params"};
  if (c.sweep.iterative) t.columns.insert(t.columns.end(), {"round", "finetune_iters"});

  std::uint64_t point = 0;
  for (auto g : c.sweep.granularities) {
    PruneSpec spec = c.prune && c.prune->granularity == g ? *c.prune : PruneSpec{};
    spec.granularity = g;
    spec.heads_to_keep = 0;
    if (c.sweep.iterative) {
      const IterativeSchedule sched = c.schedule.value_or(IterativeSchedule{});
      TrainConfig tc = stage_train(c, Stage::prune_finetune);
      tc.seed = mix_seed(tc.seed, point++);
      const auto r = iterative_prune(model, splits.train, splits.eval, spec, sched, tc);
      // Parameter counts of intermediate rounds are not retained; recompute
      // them from the ledger-free final state only for the last round.
      for (const auto& row : r.trace) {
        const bool last = row.round == sched.rounds;
        t.add_row({"student", to_string(g), format_number(row.target_sparsity), format_number(row.miou),
                   last ? std::to_string(count_params(r.model, false)) : "", std::to_string(row.round),
                   std::to_string(sched.finetune_iterations)});
      }
      continue;
    }
    for (double s : c.sweep.sparsities) {
      spec.sparsity = s;
      SegModel m = prune(model, spec);
      if (c.sweep.finetune && c.prune_finetune_iterations > 0) {
        TrainConfig tc = stage_train(c, Stage::prune_finetune, c.prune_finetune_iterations);
        tc.seed = mix_seed(tc.seed, point);
        m = train(m, splits.train, tc).model;
      }
      ++point;
      t.add_row({"student", to_string(g), format_number(s), format_number(evaluate(m, splits.eval).mean_iou),
                 std::to_string(count_params(m, false))});
    }
  }
  write_csv(t, out / "sweep.csv");
  return t;
}

CsvTable cmd_headprune_table(const ExperimentConfig& c, const fs::path& out, const SegModel* trained) {
  c.validate();
  for (auto h : c.headprune.head_counts)
    if (h < 1 || h > c.student.num_heads)
      throw ContractError("head count " + std::to_string(h) + " outside [1, " + std::to_string(c.student.num_heads) + "]");
  fs::create_directories(out);
  const Splits splits = make_splits(c);
  const SegModel model = trained ? trained->clone() : train_student(c, splits.train);
  CsvTable t;
  t.schema = "headprune";
  t.columns = {"heads", "miou", "params_theoretical", "params_materialized", "fps"};
  t.timing_columns = {"fps"};
  std::uint64_t point = 0;
  for (auto h : c.headprune.head_counts) {
    PruneSpec spec;
    spec.granularity = Granularity::head;
    spec.heads_to_keep = h;
    const PruneMask mask = select_and_mask(model, spec);
    SegModel masked = apply_mask(model, mask);
    if (h < model.config.num_heads && c.headprune.finetune_iterations > 0) {
      TrainConfig tc = stage_train(c, Stage::headprune_finetune, c.headprune.finetune_iterations);
      tc.seed = mix_seed(tc.seed, point);
      masked = train(masked, splits.train, tc).model;
    }
    ++point;
    const SegModel mat = materialize(masked, mask);
    const EvalReport er = evaluate(mat, splits.eval);
    const BenchReport b = run_bench(c, mat, splits.eval, er);
    t.add_row({std::to_string(h), format_number(er.mean_iou), std::to_string(count_params(masked, false)),
               std::to_string(count_params(mat)), format_number(b.fps)});
  }
  write_csv(t, out / "table.csv");
  return t;
}

CsvTable cmd_bench(const ExperimentConfig& c, const SegModel& model, const fs::path& out) {
  c.validate();
  fs::create_directories(out);
  const Dataset eval = generate_split(c.data, c.eval_samples, SplitRole::eval);
  const EvalReport er = evaluate(model, eval);
  const BenchReport b = run_bench(c, model, eval, er);
  CsvTable t;
  t.schema = "bench";
  t.columns = {"model", "miou", "acc", "mean_time", "std_time", "std_defined", "fps", "score", "runs"};
  t.timing_columns = {"mean_time", "std_time", "fps", "score"};
  t.add_row({to_string(model.config.role), format_number(er.mean_iou), format_number(er.pixel_accuracy),
             format_number(b.mean_time), format_number(b.std_time), b.std_defined ? "1" : "0", format_number(b.fps),
             format_number(b.score), std::to_string(b.timed_runs)});
  write_csv(t, out / "bench.csv");
  return t;
}

void cmd_plot(const fs::path& csv, const fs::path& svg) {
  const std::string text = render_svg(read_csv(csv));
  std::ofstream f(svg, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + svg.string() + " for writing");
  f << text;
}

CsvTable cmd_train(const ExperimentConfig& c, const fs::path& out) {
  c.validate();
  fs::create_directories(out);
  const Splits splits = make_splits(c);
  const auto r = train(build_model(c.student, stage_seed(c, Stage::student_init)), splits.train,
                       stage_train(c, Stage::student_train));
  save_checkpoint(r.model, out / "student.ckpt");
  CsvTable t;
  t.schema = "train";
  t.columns = {"iteration", "loss"};
  for (std::size_t i = 0; i < r.loss_trace.size(); ++i) t.add_row({std::to_string(i), format_number(r.loss_trace[i])});
  write_csv(t, out / "train.csv");
  return t;
}

CsvTable cmd_distill(const ExperimentConfig& c, const fs::path& out, const SegModel* teacher) {
  c.validate();
  fs::create_directories(out);
  const Splits splits = make_splits(c);
  const SegModel t = teacher ? teacher->clone() : train_teacher(c, splits.train);
  const auto r = distill_train(build_model(c.student, stage_seed(c, Stage::student_init)), t, splits.train,
                               c.distill.value_or(DistillSpec{}), stage_train(c, Stage::student_train));
  save_checkpoint(r.model, out / "student_kd.ckpt");
  CsvTable table;
  table.schema = "train";
  table.columns = {"iteration", "loss"};
  for (std::size_t i = 0; i < r.loss_trace.size(); ++i)
    table.add_row({std::to_string(i), format_number(r.loss_trace[i])});
  write_csv(table, out / "distill.csv");
  return table;
}

CsvTable cmd_quantize(const ExperimentConfig& c, const SegModel& model, const fs::path& out) {
  c.validate();
  fs::create_directories(out);
  const Dataset calib = generate_split(c.data, c.train_samples, SplitRole::train);
  const auto q = quantize_model(model, c.quant.value_or(QuantSpec{}), &calib);
  SaveOptions opts;
  opts.encoding = q.encoding;
  save_checkpoint(q.model, out / "quantized.ckpt", opts);
  CsvTable t;
  t.schema = "quant";
  t.columns = {"layer", "max_abs", "mean_abs", "scale"};
  for (const auto& [name, e] : q.report.layers)
    t.add_row({name, format_number(e.max_abs), format_number(e.mean_abs), format_number(e.scale)});
  write_csv(t, out / "quant.csv");
  return t;
}

CsvTable cmd_eval(const ExperimentConfig& c, const SegModel& model, const fs::path& out) {
  c.validate();
  fs::create_directories(out);
  const Dataset eval = generate_split(c.data, c.eval_samples, SplitRole::eval);
  const EvalReport er = evaluate(model, eval);
  CsvTable t;
  t.schema = "eval";
  t.columns = {"model", "n", "miou", "acc", "params", "flops"};
  t.add_row({to_string(model.config.role), std::to_string(er.n), format_number(er.mean_iou),
             format_number(er.pixel_accuracy), std::to_string(count_params(model, false)),
             std::to_string(count_flops(model, model.config.height, model.config.width).total())});
  write_csv(t, out / "eval.csv");
  return t;
}

}  // namespace evt
