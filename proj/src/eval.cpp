#include "otd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace otd {

std::uint64_t scene_root(std::uint64_t global_seed) { return substream(global_seed, "demo"); }

std::uint64_t demo_seed(std::uint64_t global_seed, int index) {
  return scene_root(global_seed) + static_cast<std::uint64_t>(index);
}

std::uint64_t eval_base_seed(std::uint64_t global_seed) { return scene_root(global_seed) + kEvalSeedOffset; }

int TaskReport::count(sim::FailureMode m) const {
  return static_cast<int>(std::count_if(trials.begin(), trials.end(), [m](const auto& t) { return t.outcome == m; }));
}

double TaskReport::success_rate() const {
  return trials.empty() ? 0.0 : static_cast<double>(successes()) / trial_count();
}

double TaskReport::mean_violation() const {
  if (trials.empty()) return 0.0;
  double s = 0.0;
  for (const auto& t : trials) s += t.constraint_violation;
  return s / trial_count();
}

double TaskReport::max_violation() const {
  double m = 0.0;
  for (const auto& t : trials) m = std::max(m, t.constraint_violation);
  return m;
}

double TaskReport::mean_replans() const {
  if (trials.empty()) return 0.0;
  double s = 0.0;
  for (const auto& t : trials) s += t.replans;
  return s / trial_count();
}

int EvalReport::trial_count() const {
  int n = 0;
  for (const auto& t : tasks) n += t.trial_count();
  return n;
}

double EvalReport::success_rate() const {
  int s = 0;
  for (const auto& t : tasks) s += t.successes();
  const int n = trial_count();
  return n == 0 ? 0.0 : static_cast<double>(s) / n;
}

EvalReport evaluate(const RolloutFn& rollout, std::span<const sim::TaskSpec> tasks, int trials,
                    std::uint64_t base_seed) {
  if (trials < 1) throw std::invalid_argument("trials must be >= 1");
  EvalReport report;
  report.base_seed = base_seed;
  for (const auto& task : tasks) {
    TaskReport tr;
    tr.task_id = task.task_id;
    for (int i = 0; i < trials; ++i) {
      const std::uint64_t seed = base_seed + static_cast<std::uint64_t>(i);
      const sim::RolloutResult r = rollout(task, seed);
      tr.trials.push_back({seed, r.failure_mode, r.replans, r.max_tilt_outside,
                           std::max(0.0, r.max_constraint_violation)});
    }
    report.tasks.push_back(std::move(tr));
  }
  return report;
}

sim::RolloutResult model_rollout(const TrajectoryModel& model, const sim::TaskSpec& task, std::uint64_t seed,
                                 const ExecutorConfig& cfg, const sim::PerturbationSpec& pspec,
                                 std::uint64_t policy_seed, std::vector<StepRecord>* records) {
  sim::Simulator world(task, pspec, seed);
  return receding_horizon_episode(model, world, cfg, substream(policy_seed, seed), records);
}

EvalReport evaluate(const TrajectoryModel& model, std::span<const sim::TaskSpec> tasks, int trials,
                    std::uint64_t base_seed, const ExecutorConfig& cfg, const sim::PerturbationSpec& pspec,
                    std::uint64_t policy_seed) {
  cfg.validate();
  pspec.validate();
  auto rollout = [&](const sim::TaskSpec& task, std::uint64_t seed) {
    return model_rollout(model, task, seed, cfg, pspec, policy_seed);
  };
  EvalReport report = evaluate(rollout, tasks, trials, base_seed);
  report.executor = cfg;
  report.perturbation = pspec;
  return report;
}

std::vector<AblationRow> ablate_horizon(const TrajectoryModel& model, const sim::TaskSpec& task,
                                        std::span<const int> horizons, int trials, std::uint64_t base_seed,
                                        const ExecutorConfig& cfg, const sim::PerturbationSpec& pspec,
                                        std::uint64_t policy_seed) {
  std::vector<AblationRow> rows;
  for (int k : horizons) {
    ExecutorConfig c = cfg;
    c.execution_horizon = k;
    c.validate();
    EvalReport r = evaluate(model, std::span(&task, 1), trials, base_seed, c, pspec, policy_seed);
    rows.push_back({k, std::move(r.tasks.front())});
  }
  return rows;
}

std::vector<RateSummary> summarize(std::span<const EvalReport> reports) {
  std::vector<RateSummary> out;
  if (reports.empty()) return out;
  for (std::size_t t = 0; t < reports.front().tasks.size(); ++t) {
    RateSummary s;
    s.task_id = reports.front().tasks[t].task_id;
    std::vector<double> rates;
    for (const auto& r : reports) rates.push_back(r.tasks.at(t).success_rate());
    s.mean = std::accumulate(rates.begin(), rates.end(), 0.0) / static_cast<double>(rates.size());
    if (rates.size() > 1) {
      double ss = 0.0;
      for (double x : rates) ss += (x - s.mean) * (x - s.mean);
      s.stddev = std::sqrt(ss / static_cast<double>(rates.size() - 1));
    }
    out.push_back(s);
  }
  return out;
}

namespace {

Json task_json(const TaskReport& t) {
  Json counts;
  for (auto m : kOutcomes) counts[std::string(sim::to_string(m))] = t.count(m);
  Json trials = Json::array();
  for (const auto& tr : t.trials) {
    trials.push_back(Json{{"seed", tr.seed},
                          {"outcome", std::string(sim::to_string(tr.outcome))},
                          {"replans", tr.replans},
                          {"max_tilt_outside", tr.max_tilt_outside},
                          {"constraint_violation", tr.constraint_violation}});
  }
  return Json{{"task_id", t.task_id},
              {"trials", t.trial_count()},
              {"success_rate", t.success_rate()},
              {"outcomes", std::move(counts)},
              {"mean_constraint_violation", t.mean_violation()},
              {"max_constraint_violation", t.max_violation()},
              {"mean_replans", t.mean_replans()},
              {"per_trial", std::move(trials)}};
}

std::string row(const TaskReport& t, const std::string& label) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-18s %6d %8.2f %8d %8d %8d %10.4f %8.1f\n", label.c_str(), t.trial_count(),
                t.success_rate(), t.count(sim::FailureMode::kTracking), t.count(sim::FailureMode::kPlacing),
                t.count(sim::FailureMode::kTaskConstraint), t.max_violation(), t.mean_replans());
  return buf;
}

constexpr const char* kHeader = "task               trials  success tracking  placing  constr.  max_viol  replans\n";

}  // namespace

Json to_json(const EvalReport& report) {
  Json tasks = Json::array();
  for (const auto& t : report.tasks) tasks.push_back(task_json(t));
  return Json{{"format_version", EvalReport::kFormatVersion},
              {"base_seed", report.base_seed},
              {"seed_offset", report.seed_offset},
              {"executor", to_json(report.executor)},
              {"perturbation", to_json(report.perturbation)},
              {"tasks", std::move(tasks)},
              {"aggregate", Json{{"trials", report.trial_count()}, {"success_rate", report.success_rate()}}}};
}

std::string format_table(const EvalReport& report) {
  std::ostringstream os;
  os << kHeader;
  for (const auto& t : report.tasks) os << row(t, t.task_id);
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-18s %6d %8.2f\n", "all", report.trial_count(), report.success_rate());
  os << buf;
  return os.str();
}

Json to_json(std::span<const AblationRow> rows) {
  Json out = Json::array();
  for (const auto& r : rows) {
    Json j = task_json(r.report);
    j["execution_horizon"] = r.execution_horizon;
    out.push_back(std::move(j));
  }
  return out;
}

std::string format_table(std::span<const AblationRow> rows) {
  std::ostringstream os;
  os << kHeader;
  for (const auto& r : rows) os << row(r.report, "K=" + std::to_string(r.execution_horizon));
  return os.str();
}

}  // namespace otd
