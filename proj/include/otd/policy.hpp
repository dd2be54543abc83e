#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "otd/diffusion.hpp"
#include "otd/geometry.hpp"
#include "otd/sim.hpp"

namespace otd {

struct ExecutorConfig {
  int prediction_horizon = 8;  // N
  int execution_horizon = 2;   // K, keyposes executed per plan
  double end_threshold = kEndStateThreshold;
  int max_steps = 300;
  int dense_substeps = 5;
  int patience = 3;  // tolerated consecutive invalid observations

  void validate() const;
};

/// End-effector subgoals in the world frame. keyframe[i] is the index of the
/// synthesized pose that subgoal i leads to; the last subgoal of each
/// segment reaches it exactly.
struct ActionPlan {
  std::vector<Pose> subgoals;
  std::vector<Gripper> gripper;
  std::vector<int> keyframe;

  bool segment_end(std::size_t i) const { return i + 1 == keyframe.size() || keyframe[i + 1] != keyframe[i]; }
};

/// N canonical poses from a history of obs_horizon canonical poses.
std::vector<Pose> synthesize(const TrajectoryModel& model, std::span<const Pose> history,
                             const Eigen::VectorXd& task_emb, int stage, std::uint64_t seed);

/// Subgoal i = target_world * canonical_i * grasp_tf. With `start` (the
/// current canonical pose) each keypose segment is split into
/// dense_substeps interpolated object poses; without it the first keypose
/// is a single subgoal.
ActionPlan plan_actions(std::span<const Pose> canonical, const Pose& target_world, const Pose& grasp_tf,
                        int dense_substeps = 1, const std::optional<Pose>& start = std::nullopt);

/// Per-step record for trace export.
struct StepRecord {
  double t = 0.0;
  int stage = 0;
  bool observation_valid = false;
  Pose observed_source;
  Pose observed_target;
  std::vector<Pose> plan;  // canonical chunk, only on replanning steps
  std::optional<Pose> subgoal;
  double end_probability = 0.0;
  bool released = false;
};

/// Runs every stage of the simulator's task with the model in the loop.
/// Synthesis seeds are substreams of `seed` indexed by replan count.
sim::RolloutResult receding_horizon_episode(const TrajectoryModel& model, sim::Simulator& sim,
                                            const ExecutorConfig& cfg, std::uint64_t seed,
                                            std::vector<StepRecord>* records = nullptr);

void write_trace(const std::filesystem::path& path, std::span<const StepRecord> records);

Json to_json(const ExecutorConfig& cfg);
ExecutorConfig executor_config_from_json(const Json& j);

}  // namespace otd
