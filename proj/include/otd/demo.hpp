#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "otd/geometry.hpp"
#include "otd/serialization.hpp"

namespace otd {

enum class Gripper { kOpen, kClosed };

std::string_view to_string(Gripper g);
Gripper gripper_from_string(std::string_view s);

struct DemoFrame {
  double t = 0.0;
  Pose source_pose;
  Pose target_pose;
  Gripper gripper = Gripper::kOpen;
};

struct DemoEpisode {
  std::string task_id;
  std::vector<DemoFrame> frames;

  /// Non-empty with strictly increasing timestamps.
  void validate() const;
};

/// Inclusive frame-index range.
struct FrameRange {
  std::size_t first = 0;
  std::size_t last = 0;
  bool operator==(const FrameRange&) const = default;
};

class UnsegmentableEpisode : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class EmptyDataset : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Keyposes of one stage, source object expressed in the target frame.
/// Only the last keypose carries the end flag.
class CanonicalTrajectory {
 public:
  CanonicalTrajectory(std::string task_id, int stage_index, std::vector<Pose> keyposes);

  const std::string& task_id() const { return task_id_; }
  int stage_index() const { return stage_index_; }
  const std::vector<Pose>& keyposes() const { return keyposes_; }
  const std::vector<bool>& end_flags() const { return end_flags_; }
  std::size_t size() const { return keyposes_.size(); }

 private:
  std::string task_id_;
  int stage_index_;
  std::vector<Pose> keyposes_;
  std::vector<bool> end_flags_;
};

struct KeyframeConfig {
  double translation_threshold = 0.05;
  double rotation_threshold = 15.0 * std::numbers::pi / 180.0;
  double velocity_epsilon = 1e-4;

  void validate() const;
};

/// Min/max of the nine feature dimensions. Translations are scaled to
/// [-1, 1]; the rotation columns are passed through, their bounds are fixed
/// at [-1, 1].
struct NormStats {
  PoseFeature min = PoseFeature::Constant(-1.0);
  PoseFeature max = PoseFeature::Constant(1.0);

  static NormStats FromTranslations(std::span<const Eigen::Vector3d> translations);

  PoseFeature normalize(const PoseFeature& f) const;
  PoseFeature denormalize(const PoseFeature& f) const;
  /// Applies per 9-block to a stacked chunk.
  Eigen::VectorXd normalize_chunk(const Eigen::VectorXd& chunk) const;
  Eigen::VectorXd denormalize_chunk(const Eigen::VectorXd& chunk) const;
};

struct TrainingSample {
  std::string task_id;
  int stage = 0;
  Eigen::VectorXd observed;    // obs_horizon x 9, normalized
  Eigen::VectorXd target;      // pred_horizon x 9, normalized
  Eigen::VectorXd end_labels;  // pred_horizon, monotone 0 -> 1
  double end_state = 0.0;      // 1 when the latest observed keypose is the stage end
};

struct DatasetConfig {
  int obs_horizon = 2;
  int pred_horizon = 8;
  int max_stages = 4;
  int task_embedding_dim = 32;
  std::uint64_t embedding_seed = 0;
  KeyframeConfig keyframe;

  void validate() const;
};

using TaskEmbeddings = std::map<std::string, Eigen::VectorXd>;

struct Dataset {
  static constexpr int kFormatVersion = 1;

  DatasetConfig config;
  NormStats stats;
  TaskEmbeddings task_embeddings;
  std::vector<TrainingSample> samples;
};

/// One range per closed-gripper interval, from the grasp frame to the
/// release frame. Throws UnsegmentableEpisode without any closed interval.
std::vector<FrameRange> segment_stages(const DemoEpisode& episode);

std::vector<Pose> canonicalize(const DemoEpisode& episode, FrameRange range);

/// Keyframe indices into `traj`; first and last are always kept.
///
/// A frame is kept when the translational motion reverses there (the next
/// moving displacement has negative projection on the last moving one), or
/// when it lies more than the translation or rotation threshold from the
/// previous keyframe. Frames identical to the previous keyframe are
/// dropped.
std::vector<std::size_t> select_keyframes(std::span<const Pose> traj, const KeyframeConfig& cfg,
                                          double frame_dt = 0.1);

/// Segment, canonicalize and keyframe every stage of an episode.
std::vector<CanonicalTrajectory> extract_trajectories(const DemoEpisode& episode,
                                                      const KeyframeConfig& cfg);

/// Sliding windows over keyposes. Observations before the first keypose and
/// targets past the last are padded by repetition; one extra window observes
/// only the settled final keypose.
std::pair<std::vector<TrainingSample>, NormStats> build_training_set(
    std::span<const CanonicalTrajectory> trajs, int obs_horizon, int pred_horizon);

/// Fixed unit-norm embedding for a task name.
Eigen::VectorXd task_embedding(std::string_view task_id, int dim, std::uint64_t seed);

Dataset make_dataset(std::span<const CanonicalTrajectory> trajs, const DatasetConfig& config);
Dataset dataset_from_episodes(std::span<const DemoEpisode> episodes, const DatasetConfig& config);

// Demo logs: one JSON object per line,
// {"t", "source_pose", "target_pose", "gripper", "task_id"}.
void write_demo_log(std::ostream& out, const DemoEpisode& episode);
DemoEpisode read_demo_log(std::istream& in);
void save_demo_log(const std::filesystem::path& path, const DemoEpisode& episode);
DemoEpisode load_demo_log(const std::filesystem::path& path);

Json to_json(const KeyframeConfig& cfg);
KeyframeConfig keyframe_config_from_json(const Json& j);
Json to_json(const DatasetConfig& cfg);
DatasetConfig dataset_config_from_json(const Json& j);
Json to_json(const NormStats& stats);
NormStats norm_stats_from_json(const Json& j);
Json to_json(const TaskEmbeddings& table);
TaskEmbeddings task_embeddings_from_json(const Json& j);

Json to_json(const Dataset& dataset);
Dataset dataset_from_json(const Json& j);
void save_dataset(const std::filesystem::path& path, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace otd
