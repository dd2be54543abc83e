// otd: demonstrations -> dataset -> trajectory model -> closed-loop evaluation.
#include <CLI11.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "otd/demo.hpp"
#include "otd/diffusion.hpp"
#include "otd/eval.hpp"
#include "otd/policy.hpp"
#include "otd/serialization.hpp"
#include "otd/sim.hpp"

namespace fs = std::filesystem;
using namespace otd;

namespace {

struct Paths {
  std::string data_dir = "demos";
  std::string dataset = "dataset.json";
  std::string checkpoint = "model.json";
  std::string report = "report.json";
  std::string trace = "trace.jsonl";
};

struct RunConfig {
  std::uint64_t seed = 0;
  Paths paths;
  std::vector<std::string> tasks{"mug-on-coaster"};
  std::vector<std::string> task_files;
  int demos = 8;
  DatasetConfig dataset;
  ModelConfig model;
  TrainingConfig training;
  ExecutorConfig executor;
  sim::PerturbationSpec perturbation;
  int trials = 10;
  int repeats = 1;
  int trial = 0;
  std::vector<int> horizons;  // empty: {1, 2, N}
  int log_every = 100;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

Json to_json(const RunConfig& c) {
  return Json{{"seed", c.seed},
              {"paths",
               Json{{"data_dir", c.paths.data_dir},
                    {"dataset", c.paths.dataset},
                    {"checkpoint", c.paths.checkpoint},
                    {"report", c.paths.report},
                    {"trace", c.paths.trace}}},
              {"tasks", c.tasks},
              {"task_files", c.task_files},
              {"demos", c.demos},
              {"dataset", otd::to_json(c.dataset)},
              {"model", otd::to_json(c.model)},
              {"training", otd::to_json(c.training)},
              {"executor", otd::to_json(c.executor)},
              {"perturbation", sim::to_json(c.perturbation)},
              {"eval",
               Json{{"trials", c.trials},
                    {"repeats", c.repeats},
                    {"trial", c.trial},
                    {"horizons", c.horizons},
                    {"log_every", c.log_every}}}};
}

// Each section is parsed on its own so errors can name it.
template <typename F>
void section(const Json& j, const char* key, F&& apply) {
  if (!j.contains(key)) return;
  try {
    apply(j.at(key));
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config field '") + key + "': " + e.what());
  }
}

void apply_file(RunConfig& c, const Json& j) {
  section(j, "seed", [&](const Json& v) { c.seed = v.get<std::uint64_t>(); });
  section(j, "paths", [&](const Json& v) {
    c.paths.data_dir = v.value("data_dir", c.paths.data_dir);
    c.paths.dataset = v.value("dataset", c.paths.dataset);
    c.paths.checkpoint = v.value("checkpoint", c.paths.checkpoint);
    c.paths.report = v.value("report", c.paths.report);
    c.paths.trace = v.value("trace", c.paths.trace);
  });
  section(j, "tasks", [&](const Json& v) { c.tasks = v.get<std::vector<std::string>>(); });
  section(j, "task_files", [&](const Json& v) { c.task_files = v.get<std::vector<std::string>>(); });
  section(j, "demos", [&](const Json& v) { c.demos = v.get<int>(); });
  section(j, "dataset", [&](const Json& v) { c.dataset = dataset_config_from_json(v); });
  section(j, "model", [&](const Json& v) { c.model = model_config_from_json(v); });
  section(j, "training", [&](const Json& v) { c.training = training_config_from_json(v); });
  section(j, "executor", [&](const Json& v) { c.executor = executor_config_from_json(v); });
  section(j, "perturbation", [&](const Json& v) { c.perturbation = sim::perturbation_from_json(v); });
  section(j, "eval", [&](const Json& v) {
    c.trials = v.value("trials", c.trials);
    c.repeats = v.value("repeats", c.repeats);
    c.trial = v.value("trial", c.trial);
    c.horizons = v.value("horizons", c.horizons);
    c.log_every = v.value("log_every", c.log_every);
  });
}

void check(bool ok, const std::string& field, const std::string& why) {
  if (!ok) throw ConfigError("invalid config field '" + field + "': " + why);
}

template <typename F>
void check_section(const std::string& field, F&& validate) {
  try {
    validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("invalid config field '" + field + "': " + e.what());
  }
}

void validate(const RunConfig& c) {
  check(c.demos >= 1, "demos", "must be >= 1");
  check(c.trials >= 1, "eval.trials", "must be >= 1");
  check(c.repeats >= 1, "eval.repeats", "must be >= 1");
  check(c.trial >= 0, "eval.trial", "must be >= 0");
  check(c.log_every >= 1, "eval.log_every", "must be >= 1");
  check(!c.tasks.empty() || !c.task_files.empty(), "tasks", "at least one task is required");
  const std::vector<std::string> paths{c.paths.data_dir, c.paths.dataset, c.paths.checkpoint, c.paths.report,
                                       c.paths.trace};
  check(std::set<std::string>(paths.begin(), paths.end()).size() == paths.size(), "paths",
        "referenced paths must be distinct");
  check_section("dataset", [&] { c.dataset.validate(); });
  check_section("model", [&] { c.model.validate(); });
  check_section("training", [&] { c.training.validate(); });
  check_section("executor", [&] { c.executor.validate(); });
  check_section("perturbation", [&] { c.perturbation.validate(); });
  check(c.executor.prediction_horizon == c.dataset.pred_horizon, "executor.prediction_horizon",
        "must equal dataset.pred_horizon");
  for (int k : c.horizons) {
    check(k >= 1 && k <= c.executor.prediction_horizon, "eval.horizons", "every K must lie in [1, N]");
  }
}

std::vector<sim::TaskSpec> resolve_tasks(const RunConfig& c) {
  std::vector<sim::TaskSpec> out;
  for (const auto& name : c.tasks) {
    try {
      out.push_back(sim::task_by_name(name));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("invalid config field 'tasks': ") + e.what());
    }
  }
  for (const auto& f : c.task_files) out.push_back(sim::load_task_spec(f));
  return out;
}

// Flags that override the file; unset flags leave the file value alone.
struct Overrides {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> tasks;
  std::vector<std::string> task_files;
  std::optional<int> demos;
  std::optional<std::string> data_dir, dataset, checkpoint, report, trace;
  std::optional<int> obs_horizon, pred_horizon, max_stages;
  std::optional<double> translation_threshold, rotation_threshold_deg;
  std::optional<int> epochs, batch_size;
  std::optional<double> lr;
  std::optional<int> execution_horizon, max_steps, dense_substeps, patience;
  std::optional<int> trials, repeats, trial, log_every;
  std::vector<int> horizons;
  std::optional<double> slip_time;
  std::vector<double> slip_offset;
  std::vector<double> drift;
  std::optional<double> translation_noise, rotation_noise, dropout;
};

RunConfig resolve(const Overrides& o) {
  RunConfig c;
  if (o.config) apply_file(c, read_json_file(*o.config));
  if (o.seed) c.seed = *o.seed;
  if (!o.tasks.empty()) c.tasks = o.tasks;
  if (!o.task_files.empty()) {
    c.task_files = o.task_files;
    if (o.tasks.empty()) c.tasks.clear();
  }
  if (o.demos) c.demos = *o.demos;
  if (o.data_dir) c.paths.data_dir = *o.data_dir;
  if (o.dataset) c.paths.dataset = *o.dataset;
  if (o.checkpoint) c.paths.checkpoint = *o.checkpoint;
  if (o.report) c.paths.report = *o.report;
  if (o.trace) c.paths.trace = *o.trace;
  if (o.obs_horizon) c.dataset.obs_horizon = *o.obs_horizon;
  if (o.pred_horizon) {
    c.dataset.pred_horizon = *o.pred_horizon;
    c.executor.prediction_horizon = *o.pred_horizon;
  }
  if (o.max_stages) c.dataset.max_stages = *o.max_stages;
  if (o.translation_threshold) c.dataset.keyframe.translation_threshold = *o.translation_threshold;
  if (o.rotation_threshold_deg) c.dataset.keyframe.rotation_threshold = *o.rotation_threshold_deg * std::numbers::pi / 180.0;
  if (o.epochs) c.training.epochs = *o.epochs;
  if (o.batch_size) c.training.batch_size = *o.batch_size;
  if (o.lr) c.training.adam.lr = *o.lr;
  if (o.execution_horizon) c.executor.execution_horizon = *o.execution_horizon;
  if (o.max_steps) c.executor.max_steps = *o.max_steps;
  if (o.dense_substeps) c.executor.dense_substeps = *o.dense_substeps;
  if (o.patience) c.executor.patience = *o.patience;
  if (o.trials) c.trials = *o.trials;
  if (o.repeats) c.repeats = *o.repeats;
  if (o.trial) c.trial = *o.trial;
  if (o.log_every) c.log_every = *o.log_every;
  if (!o.horizons.empty()) c.horizons = o.horizons;
  if (o.slip_time || !o.slip_offset.empty()) {
    check(o.slip_time.has_value() && o.slip_offset.size() == 3, "perturbation.slips",
          "--slip-time and a 3-value --slip-offset go together");
    c.perturbation.slips = {{*o.slip_time, Pose::FromTranslation({o.slip_offset[0], o.slip_offset[1],
                                                                    o.slip_offset[2]})}};
  }
  if (!o.drift.empty()) {
    check(o.drift.size() == 3, "perturbation.target_drift", "needs 3 values");
    c.perturbation.target_drift = {o.drift[0], o.drift[1], o.drift[2]};
  }
  if (o.translation_noise) c.perturbation.translation_noise = *o.translation_noise;
  if (o.rotation_noise) c.perturbation.rotation_noise = *o.rotation_noise;
  if (o.dropout) c.perturbation.dropout = *o.dropout;
  c.dataset.embedding_seed = substream(c.seed, "init");
  c.training.seed = c.seed;
  validate(c);
  return c;
}

void announce(const std::string& command, const RunConfig& c) {
  std::cout << "otd " << command << " seed=" << c.seed << "\n" << to_json(c).dump(2) << "\n";
}

std::string demo_file(const std::string& task_id, int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "_%03d.jsonl", i);
  return task_id + buf;
}

int gen_demos(const RunConfig& c) {
  fs::create_directories(c.paths.data_dir);
  for (const auto& task : resolve_tasks(c)) {
    for (int i = 0; i < c.demos; ++i) {
      const fs::path path = fs::path(c.paths.data_dir) / demo_file(task.task_id, i);
      save_demo_log(path, sim::generate_demo(task, demo_seed(c.seed, i)));
      std::cout << "wrote " << path.string() << "\n";
    }
  }
  return 0;
}

int build_dataset(const RunConfig& c) {
  if (!fs::is_directory(c.paths.data_dir)) throw std::runtime_error("demo directory not found: " + c.paths.data_dir);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(c.paths.data_dir)) {
    if (e.path().extension() == ".jsonl") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("no .jsonl demo logs in " + c.paths.data_dir);
  std::vector<DemoEpisode> episodes;
  for (const auto& f : files) episodes.push_back(load_demo_log(f));
  const Dataset ds = dataset_from_episodes(episodes, c.dataset);
  save_dataset(c.paths.dataset, ds);
  std::cout << "episodes=" << episodes.size() << " samples=" << ds.samples.size()
            << " tasks=" << ds.task_embeddings.size() << " -> " << c.paths.dataset << "\n";
  return 0;
}

int train_cmd(const RunConfig& c) {
  const Dataset ds = load_dataset(c.paths.dataset);
  const TrajectoryModel model = train(ds, c.model, c.training, [&](int epoch, const StepStats& s) {
    if (epoch % c.log_every == 0 || epoch + 1 == c.training.epochs) {
      std::cout << "epoch " << epoch << " loss " << s.loss << " end_state_loss " << s.head_loss << "\n";
    }
  });
  save_model(c.paths.checkpoint, model);
  std::cout << "checkpoint -> " << c.paths.checkpoint << "\n";
  return 0;
}

TrajectoryModel load_checked(const RunConfig& c) {
  TrajectoryModel model = load_model(c.paths.checkpoint);
  if (model.config.pred_horizon != c.executor.prediction_horizon) {
    throw ConfigError("invalid config field 'executor.prediction_horizon': checkpoint was trained with N=" +
                      std::to_string(model.config.pred_horizon) + ", executor requests N=" +
                      std::to_string(c.executor.prediction_horizon));
  }
  if (model.config.obs_horizon != c.dataset.obs_horizon) {
    throw ConfigError("invalid config field 'dataset.obs_horizon': checkpoint was trained with " +
                      std::to_string(model.config.obs_horizon) + ", config requests " +
                      std::to_string(c.dataset.obs_horizon));
  }
  return model;
}

int eval_cmd(const RunConfig& c) {
  const TrajectoryModel model = load_checked(c);
  const auto tasks = resolve_tasks(c);
  const std::uint64_t policy_seed = substream(c.seed, "eval");
  std::vector<EvalReport> reports;
  Json out;
  for (int r = 0; r < c.repeats; ++r) {
    const std::uint64_t base = eval_base_seed(c.seed) + static_cast<std::uint64_t>(r * c.trials);
    EvalReport rep = evaluate(model, tasks, c.trials, base, c.executor, c.perturbation, policy_seed);
    rep.seed_offset = kEvalSeedOffset;
    std::cout << format_table(rep);
    reports.push_back(std::move(rep));
  }
  if (reports.size() == 1) {
    out = to_json(reports.front());
  } else {
    out = Json{{"repeats", Json::array()}, {"summary", Json::array()}};
    for (const auto& r : reports) out["repeats"].push_back(to_json(r));
    for (const auto& s : summarize(reports)) {
      out["summary"].push_back(Json{{"task_id", s.task_id}, {"mean", s.mean}, {"stddev", s.stddev}});
      std::cout << s.task_id << " success " << s.mean << " +/- " << s.stddev << "\n";
    }
  }
  out["config"] = to_json(c);
  write_json_file(c.paths.report, out);
  std::cout << "report -> " << c.paths.report << "\n";
  return 0;
}

int rollout_cmd(const RunConfig& c) {
  const TrajectoryModel model = load_checked(c);
  const auto tasks = resolve_tasks(c);
  const std::uint64_t seed = eval_base_seed(c.seed) + static_cast<std::uint64_t>(c.trial);
  std::vector<StepRecord> records;
  const sim::RolloutResult r =
      model_rollout(model, tasks.front(), seed, c.executor, c.perturbation, substream(c.seed, "eval"), &records);
  write_trace(c.paths.trace, records);
  std::cout << tasks.front().task_id << " seed=" << seed << " outcome=" << sim::to_string(r.failure_mode)
            << " steps=" << r.steps << " replans=" << r.replans << "\ntrace -> " << c.paths.trace << "\n";
  return 0;
}

int ablate_cmd(const RunConfig& c) {
  const TrajectoryModel model = load_checked(c);
  const auto tasks = resolve_tasks(c);
  std::vector<int> ks = c.horizons;
  if (ks.empty()) ks = {1, 2, c.executor.prediction_horizon};
  Json out{{"config", to_json(c)}, {"seed_offset", kEvalSeedOffset}, {"tasks", Json::array()}};
  for (const auto& task : tasks) {
    const auto rows = ablate_horizon(model, task, ks, c.trials, eval_base_seed(c.seed), c.executor, c.perturbation,
                                     substream(c.seed, "eval"));
    std::cout << task.task_id << "\n" << format_table(rows);
    out["tasks"].push_back(Json{{"task_id", task.task_id}, {"rows", to_json(rows)}});
  }
  write_json_file(c.paths.report, out);
  std::cout << "report -> " << c.paths.report << "\n";
  return 0;
}

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "JSON run config; flags override it");
  cmd->add_option("--seed", o.seed, "Global seed");
  cmd->add_option("--task", o.tasks, "Built-in task name (repeatable)");
  cmd->add_option("--task-file", o.task_files, "Task spec JSON file (repeatable)");
  cmd->add_option("--obs-horizon", o.obs_horizon);
  cmd->add_option("--pred-horizon", o.pred_horizon, "N");
}

void add_executor(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--checkpoint", o.checkpoint);
  cmd->add_option("-K,--execution-horizon", o.execution_horizon);
  cmd->add_option("--max-steps", o.max_steps);
  cmd->add_option("--dense-substeps", o.dense_substeps);
  cmd->add_option("--patience", o.patience);
  cmd->add_option("--trials", o.trials);
  cmd->add_option("--slip-time", o.slip_time, "Slip event time (s)");
  cmd->add_option("--slip-offset", o.slip_offset, "Slip translation in the object frame (m)")->expected(3);
  cmd->add_option("--target-drift", o.drift, "Target velocity (m/s)")->expected(3);
  cmd->add_option("--translation-noise", o.translation_noise, "Tracker sigma (m)");
  cmd->add_option("--rotation-noise", o.rotation_noise, "Tracker sigma (rad)");
  cmd->add_option("--dropout", o.dropout, "Tracker dropout probability");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Object-centric trajectory diffusion: demos, training and closed-loop evaluation"};
  app.require_subcommand(1);
  Overrides o;

  auto* gen = app.add_subcommand("gen-demos", "Generate oracle demonstration logs");
  add_common(gen, o);
  gen->add_option("--n", o.demos, "Demos per task");
  gen->add_option("--out", o.data_dir, "Output directory");

  auto* build = app.add_subcommand("build-dataset", "Demo logs -> training dataset");
  add_common(build, o);
  build->add_option("--data-dir", o.data_dir);
  build->add_option("--out", o.dataset);
  build->add_option("--max-stages", o.max_stages);
  build->add_option("--translation-threshold", o.translation_threshold, "Keyframe distance (m)");
  build->add_option("--rotation-threshold-deg", o.rotation_threshold_deg, "Keyframe rotation (deg)");

  auto* tr = app.add_subcommand("train", "Dataset -> checkpoint");
  add_common(tr, o);
  tr->add_option("--dataset", o.dataset);
  tr->add_option("--out", o.checkpoint);
  tr->add_option("--epochs", o.epochs);
  tr->add_option("--batch-size", o.batch_size);
  tr->add_option("--lr", o.lr);
  tr->add_option("--log-every", o.log_every);

  auto* ev = app.add_subcommand("eval", "Closed-loop evaluation report");
  add_common(ev, o);
  add_executor(ev, o);
  ev->add_option("--repeats", o.repeats, "Repeated evaluations on fresh seeds");
  ev->add_option("--report", o.report);

  auto* ro = app.add_subcommand("rollout", "One seeded episode with trace export");
  add_common(ro, o);
  add_executor(ro, o);
  ro->add_option("--trial", o.trial, "Evaluation trial index");
  ro->add_option("--trace", o.trace);

  auto* ab = app.add_subcommand("ablate", "Execution-horizon ablation");
  add_common(ab, o);
  add_executor(ab, o);
  ab->add_option("--horizons", o.horizons, "K values (default 1 2 N)");
  ab->add_option("--report", o.report);

  CLI11_PARSE(app, argc, argv);

  try {
    const RunConfig c = resolve(o);
    const std::string name = app.get_subcommands().front()->get_name();
    announce(name, c);
    if (name == "gen-demos") return gen_demos(c);
    if (name == "build-dataset") return build_dataset(c);
    if (name == "train") return train_cmd(c);
    if (name == "eval") return eval_cmd(c);
    if (name == "rollout") return rollout_cmd(c);
    if (name == "ablate") return ablate_cmd(c);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
