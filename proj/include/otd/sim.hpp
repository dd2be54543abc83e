#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "otd/demo.hpp"
#include "otd/geometry.hpp"
#include "otd/random.hpp"
#include "otd/serialization.hpp"

namespace otd::sim {

struct ObjectSpec {
  std::string name;
  Eigen::Vector3d extents = Eigen::Vector3d::Constant(0.05);  // meters
};

/// Source must stay within max_tilt of world up while farther than
/// activation_radius from its goal position.
struct UprightConstraint {
  double max_tilt = 0.0;           // rad
  double activation_radius = 0.0;  // m
};

struct StageSpec {
  int source = 0;
  int target = 1;
  Pose goal;      // source in target frame at release
  Pose approach;  // pre-goal pose in target frame
  Pose grasp;     // end effector in source frame
  double lift_height = 0.08;
  double position_tolerance = 0.02;
  double rotation_tolerance = 0.26;
  std::optional<UprightConstraint> constraint;
};

/// Placement of an object relative to the anchor (the target of stage 0),
/// in polar coordinates on the table plane.
struct RelativePlacement {
  int object = 0;
  double radius_min = 0.2, radius_max = 0.3;
  double bearing_min = -3.14159, bearing_max = 3.14159;
  double yaw_min = 0.0, yaw_max = 0.0;
  double height = 0.0;
};

struct TaskSpec {
  std::string task_id;
  std::vector<ObjectSpec> objects;
  Eigen::Vector3d anchor_min{0.35, -0.25, 0.0};
  Eigen::Vector3d anchor_max{0.65, 0.25, 0.0};
  double anchor_yaw_min = -3.14159, anchor_yaw_max = 3.14159;
  std::vector<RelativePlacement> placements;
  std::vector<StageSpec> stages;

  int stage_count() const { return static_cast<int>(stages.size()); }
  int anchor() const { return stages.front().target; }
  void validate() const;
};

struct SlipEvent {
  double time = 0.0;  // s
  Pose offset;        // applied to the held object, in its own frame
};

struct PerturbationSpec {
  std::vector<SlipEvent> slips;
  Eigen::Vector3d target_drift = Eigen::Vector3d::Zero();  // m/s
  double translation_noise = 0.0;                          // m
  double rotation_noise = 0.0;                             // rad
  double dropout = 0.0;

  void validate() const;
};

enum class FailureMode { kNone, kPlacing, kTaskConstraint, kTracking };
std::string_view to_string(FailureMode m);

struct ReleaseEvent {
  int stage = 0;
  double t = 0.0;
  double probability = 1.0;  // end-state probability that triggered it
  Pose source;
  Pose target;
};

struct RolloutResult {
  bool success = false;
  FailureMode failure_mode = FailureMode::kPlacing;
  int steps = 0;
  int replans = 0;
  double max_tilt_outside = 0.0;          // rad, while held outside the activation radius
  double max_constraint_violation = 0.0;  // rad above the limit
  std::vector<ReleaseEvent> releases;
};

struct WorldState {
  double t = 0.0;
  std::vector<Pose> objects;
  int stage = 0;
  Pose ee;
  Pose grasp_tf;  // end effector in the held object's frame
  Gripper gripper = Gripper::kOpen;
  std::size_t next_slip = 0;

  int source_index = 0;
  int target_index = 1;
  const Pose& source_pose() const { return objects.at(source_index); }
  const Pose& target_pose() const { return objects.at(target_index); }
};

struct TrackerObservation {
  double t = 0.0;
  Pose source_pose;
  Pose target_pose;
  bool valid = true;
};

struct TraceSample {
  double t = 0.0;
  int stage = 0;
  Pose source;
  Pose target;
  Pose ee;
  Gripper gripper = Gripper::kOpen;
};

struct EpisodeTrace {
  std::vector<TraceSample> samples;
  std::vector<ReleaseEvent> releases;
  bool tracking_lost = false;
};

/// Demo logging rate and simulator substep.
inline constexpr double kDemoRate = 10.0;
inline constexpr double kStepDt = 0.1;

/// Initial object poses in the world frame for a seed.
std::vector<Pose> sample_scene(const TaskSpec& spec, std::uint64_t seed);

/// Dense oracle path of the source in the target frame (10 Hz samples),
/// from `start` through lift and approach to the goal.
std::vector<Pose> oracle_path(const StageSpec& stage, const Pose& start);

DemoEpisode generate_demo(const TaskSpec& spec, std::uint64_t seed);

/// Upper bound on how far canonical oracle paths of one stage can be apart
/// at matched normalized arc length.
double demo_variation_bound(const TaskSpec& spec, int stage);

TrackerObservation observe(const WorldState& world, const PerturbationSpec& pspec, Rng& rng);

/// Kinematic step: the end effector reaches `subgoal` exactly, a held
/// object follows through grasp_tf, due slips and target drift are applied,
/// then the gripper command takes effect.
WorldState apply_action(const WorldState& world, const Pose& subgoal, Gripper cmd, const PerturbationSpec& pspec,
                        double dt = kStepDt);

/// Goal predicate for a stage given world poses.
bool goal_reached(const StageSpec& stage, const Pose& source, const Pose& target);

RolloutResult check_outcome(const EpisodeTrace& trace, const TaskSpec& spec);

/// One episode's world: owns the state, the tracker noise stream and the
/// trace. Stage grasps are scripted.
class Simulator {
 public:
  Simulator(TaskSpec spec, PerturbationSpec pspec, std::uint64_t seed, const Pose& scene_transform = Pose());

  const TaskSpec& spec() const { return spec_; }
  const WorldState& state() const { return state_; }
  const EpisodeTrace& trace() const { return trace_; }
  EpisodeTrace& trace() { return trace_; }

  /// Moves the end effector to the stage's grasp pose and closes.
  void begin_stage(int stage);
  TrackerObservation observe();
  void step(const Pose& ee_subgoal);
  /// Opens the gripper in place and records the release.
  void release(double probability);

 private:
  void record();

  TaskSpec spec_;
  PerturbationSpec pspec_;
  WorldState state_;
  Rng tracker_rng_;
  EpisodeTrace trace_;
};

/// Replays the oracle path for the episode's scene; perfect tracking.
RolloutResult oracle_episode(const TaskSpec& spec, const PerturbationSpec& pspec, std::uint64_t seed);

// Built-in task suite.
TaskSpec mug_on_coaster();
TaskSpec plant_in_vase();
TaskSpec pour_water();
TaskSpec two_stage_stack();
std::vector<TaskSpec> task_suite();
TaskSpec task_by_name(std::string_view name);

Json to_json(const TaskSpec& spec);
TaskSpec task_spec_from_json(const Json& j);
TaskSpec load_task_spec(const std::filesystem::path& path);

Json to_json(const PerturbationSpec& p);
PerturbationSpec perturbation_from_json(const Json& j);

}  // namespace otd::sim
