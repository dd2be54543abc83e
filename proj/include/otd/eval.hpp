#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "otd/policy.hpp"
#include "otd/sim.hpp"

namespace otd {

/// Scene seeds: demo i uses scene_root + i, evaluation trial j uses
/// scene_root + kEvalSeedOffset + j.
inline constexpr std::uint64_t kEvalSeedOffset = 1'000'000;
std::uint64_t scene_root(std::uint64_t global_seed);
std::uint64_t demo_seed(std::uint64_t global_seed, int index);
std::uint64_t eval_base_seed(std::uint64_t global_seed);

inline constexpr std::array<sim::FailureMode, 4> kOutcomes{sim::FailureMode::kNone, sim::FailureMode::kTracking,
                                                           sim::FailureMode::kPlacing,
                                                           sim::FailureMode::kTaskConstraint};

struct TrialOutcome {
  std::uint64_t seed = 0;
  sim::FailureMode outcome = sim::FailureMode::kPlacing;
  int replans = 0;
  double max_tilt_outside = 0.0;
  double constraint_violation = 0.0;
};

struct TaskReport {
  std::string task_id;
  std::vector<TrialOutcome> trials;

  int trial_count() const { return static_cast<int>(trials.size()); }
  int count(sim::FailureMode m) const;
  int successes() const { return count(sim::FailureMode::kNone); }
  double success_rate() const;
  double mean_violation() const;
  double max_violation() const;
  double mean_replans() const;
};

struct EvalReport {
  static constexpr int kFormatVersion = 1;

  std::uint64_t base_seed = 0;
  std::uint64_t seed_offset = 0;  // already included in base_seed
  ExecutorConfig executor;
  sim::PerturbationSpec perturbation;
  std::vector<TaskReport> tasks;

  int trial_count() const;
  double success_rate() const;
};

using RolloutFn = std::function<sim::RolloutResult(const sim::TaskSpec& task, std::uint64_t seed)>;

/// Seeds base_seed .. base_seed + trials - 1 for every task.
EvalReport evaluate(const RolloutFn& rollout, std::span<const sim::TaskSpec> tasks, int trials,
                    std::uint64_t base_seed);

/// Model-driven rollouts; the scene uses the trial seed, synthesis draws
/// from substream(policy_seed, trial seed).
EvalReport evaluate(const TrajectoryModel& model, std::span<const sim::TaskSpec> tasks, int trials,
                    std::uint64_t base_seed, const ExecutorConfig& cfg, const sim::PerturbationSpec& pspec,
                    std::uint64_t policy_seed = 0);

sim::RolloutResult model_rollout(const TrajectoryModel& model, const sim::TaskSpec& task, std::uint64_t seed,
                                 const ExecutorConfig& cfg, const sim::PerturbationSpec& pspec,
                                 std::uint64_t policy_seed = 0, std::vector<StepRecord>* records = nullptr);

struct AblationRow {
  int execution_horizon = 0;
  TaskReport report;
};

/// One evaluation per K over the same seeds.
std::vector<AblationRow> ablate_horizon(const TrajectoryModel& model, const sim::TaskSpec& task,
                                        std::span<const int> horizons, int trials, std::uint64_t base_seed,
                                        const ExecutorConfig& cfg, const sim::PerturbationSpec& pspec,
                                        std::uint64_t policy_seed = 0);

struct RateSummary {
  std::string task_id;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation
};

/// Per-task success rate across repeated evaluations with different seeds.
std::vector<RateSummary> summarize(std::span<const EvalReport> reports);

Json to_json(const EvalReport& report);
std::string format_table(const EvalReport& report);
Json to_json(std::span<const AblationRow> rows);
std::string format_table(std::span<const AblationRow> rows);

}  // namespace otd
