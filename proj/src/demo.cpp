#include "otd/demo.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <stdexcept>

#include "otd/random.hpp"

namespace otd {

std::string_view to_string(Gripper g) { return g == Gripper::kOpen ? "open" : "closed"; }

Gripper gripper_from_string(std::string_view s) {
  if (s == "open") return Gripper::kOpen;
  if (s == "closed") return Gripper::kClosed;
  throw std::invalid_argument("gripper must be \"open\" or \"closed\", got \"" + std::string(s) + "\"");
}

void DemoEpisode::validate() const {
  if (frames.empty()) throw std::invalid_argument("demo episode has no frames");
  for (std::size_t i = 1; i < frames.size(); ++i) {
    if (!(frames[i].t > frames[i - 1].t)) {
      throw std::invalid_argument("demo timestamps must be strictly increasing (frame " +
                                  std::to_string(i) + ")");
    }
  }
}

CanonicalTrajectory::CanonicalTrajectory(std::string task_id, int stage_index, std::vector<Pose> keyposes)
    : task_id_(std::move(task_id)), stage_index_(stage_index), keyposes_(std::move(keyposes)) {
  if (keyposes_.size() < 2) throw std::invalid_argument("canonical trajectory needs at least 2 keyposes");
  if (stage_index_ < 0) throw std::invalid_argument("stage index must be non-negative");
  end_flags_.assign(keyposes_.size(), false);
  end_flags_.back() = true;
}

void KeyframeConfig::validate() const {
  if (!(translation_threshold > 0)) throw std::invalid_argument("keyframe.translation_threshold must be positive");
  if (!(rotation_threshold > 0)) throw std::invalid_argument("keyframe.rotation_threshold must be positive");
  if (!(velocity_epsilon > 0)) throw std::invalid_argument("keyframe.velocity_epsilon must be positive");
}

void DatasetConfig::validate() const {
  if (obs_horizon < 1) throw std::invalid_argument("obs_horizon must be >= 1");
  if (pred_horizon < 1) throw std::invalid_argument("pred_horizon must be >= 1");
  if (max_stages < 1) throw std::invalid_argument("max_stages must be >= 1");
  if (task_embedding_dim < 1) throw std::invalid_argument("task_embedding_dim must be >= 1");
  keyframe.validate();
}

// ---------------------------------------------------------------------------
// Normalization

NormStats NormStats::FromTranslations(std::span<const Eigen::Vector3d> translations) {
  NormStats s;
  if (translations.empty()) return s;
  Eigen::Vector3d lo = translations.front(), hi = translations.front();
  for (const auto& t : translations) {
    lo = lo.cwiseMin(t);
    hi = hi.cwiseMax(t);
  }
  s.min.head<3>() = lo;
  s.max.head<3>() = hi;
  return s;
}

namespace {

// Degenerate axes keep unit scale around their single value.
double half_range(double lo, double hi) {
  const double h = 0.5 * (hi - lo);
  return h > 1e-9 ? h : 1.0;
}

}  // namespace

PoseFeature NormStats::normalize(const PoseFeature& f) const {
  PoseFeature out = f;
  for (int d = 0; d < 3; ++d) {
    out[d] = (f[d] - 0.5 * (min[d] + max[d])) / half_range(min[d], max[d]);
  }
  return out;
}

PoseFeature NormStats::denormalize(const PoseFeature& f) const {
  PoseFeature out = f;
  for (int d = 0; d < 3; ++d) {
    out[d] = f[d] * half_range(min[d], max[d]) + 0.5 * (min[d] + max[d]);
  }
  return out;
}

Eigen::VectorXd NormStats::normalize_chunk(const Eigen::VectorXd& chunk) const {
  if (chunk.size() % kPoseFeatureDim != 0) throw std::invalid_argument("chunk length is not a multiple of 9");
  Eigen::VectorXd out(chunk.size());
  for (Eigen::Index i = 0; i < chunk.size(); i += kPoseFeatureDim) {
    out.segment<kPoseFeatureDim>(i) = normalize(chunk.segment<kPoseFeatureDim>(i));
  }
  return out;
}

Eigen::VectorXd NormStats::denormalize_chunk(const Eigen::VectorXd& chunk) const {
  if (chunk.size() % kPoseFeatureDim != 0) throw std::invalid_argument("chunk length is not a multiple of 9");
  Eigen::VectorXd out(chunk.size());
  for (Eigen::Index i = 0; i < chunk.size(); i += kPoseFeatureDim) {
    out.segment<kPoseFeatureDim>(i) = denormalize(chunk.segment<kPoseFeatureDim>(i));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parsing

std::vector<FrameRange> segment_stages(const DemoEpisode& episode) {
  episode.validate();
  const auto& f = episode.frames;
  const bool any_transition = std::any_of(f.begin() + 1, f.end(), [&](const DemoFrame& fr) {
    return fr.gripper != f.front().gripper;
  });
  if (!any_transition) {
    throw UnsegmentableEpisode("episode '" + episode.task_id + "' has no gripper transitions");
  }
  std::vector<FrameRange> ranges;
  std::size_t start = 0;
  for (std::size_t i = 1; i < f.size(); ++i) {
    if (f[i - 1].gripper == Gripper::kOpen && f[i].gripper == Gripper::kClosed) {
      start = i;
    } else if (f[i - 1].gripper == Gripper::kClosed && f[i].gripper == Gripper::kOpen) {
      ranges.push_back({start, i});
    }
  }
  if (f.back().gripper == Gripper::kClosed && start + 1 < f.size()) ranges.push_back({start, f.size() - 1});
  return ranges;
}

std::vector<Pose> canonicalize(const DemoEpisode& episode, FrameRange range) {
  if (range.first > range.last || range.last >= episode.frames.size()) {
    throw std::out_of_range("frame range outside episode");
  }
  std::vector<Pose> out;
  out.reserve(range.last - range.first + 1);
  for (std::size_t i = range.first; i <= range.last; ++i) {
    const auto& fr = episode.frames[i];
    out.push_back(relative_pose(fr.source_pose, fr.target_pose));
  }
  return out;
}

std::vector<std::size_t> select_keyframes(std::span<const Pose> traj, const KeyframeConfig& cfg,
                                          double frame_dt) {
  cfg.validate();
  if (traj.size() < 2) throw std::invalid_argument("keyframe selection needs at least 2 poses");
  if (!(frame_dt > 0)) throw std::invalid_argument("frame_dt must be positive");
  const std::size_t n = traj.size();

  // Reversal points: frame j-1 when displacement j moves against the last
  // moving displacement.
  std::vector<bool> reversal(n, false);
  std::optional<Eigen::Vector3d> last_motion;
  for (std::size_t j = 1; j < n; ++j) {
    const Eigen::Vector3d v = (traj[j].translation() - traj[j - 1].translation()) / frame_dt;
    if (v.norm() <= cfg.velocity_epsilon) continue;
    if (last_motion && v.dot(*last_motion) < 0.0) reversal[j - 1] = true;
    last_motion = v;
  }

  constexpr double kSame = 1e-12;
  std::vector<std::size_t> keys{0};
  for (std::size_t i = 1; i + 1 < n; ++i) {
    const Pose& prev = traj[keys.back()];
    const bool far = translation_distance(traj[i], prev) > cfg.translation_threshold ||
                     rotation_geodesic(traj[i], prev) > cfg.rotation_threshold;
    if ((reversal[i] || far) && !traj[i].isApprox(prev, kSame)) keys.push_back(i);
  }
  if (keys.size() > 1 && traj[n - 1].isApprox(traj[keys.back()], kSame)) {
    keys.back() = n - 1;
  } else {
    keys.push_back(n - 1);
  }
  return keys;
}

std::vector<CanonicalTrajectory> extract_trajectories(const DemoEpisode& episode, const KeyframeConfig& cfg) {
  const auto ranges = segment_stages(episode);
  std::vector<CanonicalTrajectory> out;
  for (std::size_t stage = 0; stage < ranges.size(); ++stage) {
    const auto dense = canonicalize(episode, ranges[stage]);
    const auto& f = episode.frames;
    const double span = f[ranges[stage].last].t - f[ranges[stage].first].t;
    const double dt = dense.size() > 1 ? span / static_cast<double>(dense.size() - 1) : 1.0;
    std::vector<Pose> keyposes;
    for (std::size_t k : select_keyframes(dense, cfg, dt)) keyposes.push_back(dense[k]);
    out.emplace_back(episode.task_id, static_cast<int>(stage), std::move(keyposes));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Datasets

std::pair<std::vector<TrainingSample>, NormStats> build_training_set(
    std::span<const CanonicalTrajectory> trajs, int obs_horizon, int pred_horizon) {
  if (trajs.empty()) throw EmptyDataset("no trajectories to build a dataset from");
  if (obs_horizon < 1 || pred_horizon < 1) throw std::invalid_argument("horizons must be >= 1");

  std::vector<Eigen::Vector3d> translations;
  for (const auto& tr : trajs) {
    for (const auto& p : tr.keyposes()) translations.push_back(p.translation());
  }
  const NormStats stats = NormStats::FromTranslations(translations);

  std::vector<TrainingSample> samples;
  for (const auto& tr : trajs) {
    const auto& kp = tr.keyposes();
    const long last = static_cast<long>(kp.size()) - 1;
    std::vector<PoseFeature> feats;
    for (const auto& p : kp) feats.push_back(stats.normalize(pose_to_feature(p)));

    for (long c = 0; c <= last + 1; ++c) {
      TrainingSample s;
      s.task_id = tr.task_id();
      s.stage = tr.stage_index();
      s.observed.resize(obs_horizon * kPoseFeatureDim);
      for (int j = 0; j < obs_horizon; ++j) {
        const long idx = std::clamp<long>(c - (obs_horizon - 1) + j, 0, last);
        s.observed.segment<kPoseFeatureDim>(j * kPoseFeatureDim) = feats[idx];
      }
      s.target.resize(pred_horizon * kPoseFeatureDim);
      s.end_labels.resize(pred_horizon);
      for (int j = 0; j < pred_horizon; ++j) {
        const long idx = std::min<long>(c + 1 + j, last);
        s.target.segment<kPoseFeatureDim>(j * kPoseFeatureDim) = feats[idx];
        s.end_labels[j] = c + 1 + j >= last ? 1.0 : 0.0;
      }
      s.end_state = c >= last ? 1.0 : 0.0;
      samples.push_back(std::move(s));
    }
  }
  return {std::move(samples), stats};
}

Eigen::VectorXd task_embedding(std::string_view task_id, int dim, std::uint64_t seed) {
  Rng rng(substream(substream(seed, "task-embedding"), task_id));
  Eigen::VectorXd v = rng.normal(dim);
  return v / v.norm();
}

Dataset make_dataset(std::span<const CanonicalTrajectory> trajs, const DatasetConfig& config) {
  config.validate();
  Dataset ds;
  ds.config = config;
  for (const auto& tr : trajs) {
    if (tr.stage_index() >= config.max_stages) {
      throw std::invalid_argument("stage index " + std::to_string(tr.stage_index()) + " exceeds max_stages");
    }
  }
  auto [samples, stats] = build_training_set(trajs, config.obs_horizon, config.pred_horizon);
  ds.samples = std::move(samples);
  ds.stats = stats;
  for (const auto& tr : trajs) {
    if (!ds.task_embeddings.contains(tr.task_id())) {
      ds.task_embeddings[tr.task_id()] =
          task_embedding(tr.task_id(), config.task_embedding_dim, config.embedding_seed);
    }
  }
  return ds;
}

Dataset dataset_from_episodes(std::span<const DemoEpisode> episodes, const DatasetConfig& config) {
  std::vector<CanonicalTrajectory> trajs;
  for (const auto& ep : episodes) {
    for (auto& t : extract_trajectories(ep, config.keyframe)) trajs.push_back(std::move(t));
  }
  return make_dataset(trajs, config);
}

// ---------------------------------------------------------------------------
// I/O

void write_demo_log(std::ostream& out, const DemoEpisode& episode) {
  for (const auto& f : episode.frames) {
    Json rec;
    rec["t"] = f.t;
    rec["source_pose"] = pose_to_json(f.source_pose);
    rec["target_pose"] = pose_to_json(f.target_pose);
    rec["gripper"] = std::string(to_string(f.gripper));
    rec["task_id"] = episode.task_id;
    out << rec.dump() << '\n';
  }
}

DemoEpisode read_demo_log(std::istream& in) {
  DemoEpisode ep;
  std::string line;
  std::size_t lineno = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const Json rec = Json::parse(line);
      DemoFrame f;
      f.t = rec.at("t").get<double>();
      f.source_pose = pose_from_json(rec.at("source_pose"));
      f.target_pose = pose_from_json(rec.at("target_pose"));
      f.gripper = gripper_from_string(rec.at("gripper").get<std::string>());
      const auto task = rec.at("task_id").get<std::string>();
      if (first) {
        ep.task_id = task;
        first = false;
      } else if (task != ep.task_id) {
        throw std::invalid_argument("task_id changes within one log");
      }
      ep.frames.push_back(f);
    } catch (const std::exception& e) {
      throw std::runtime_error("demo log line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  ep.validate();
  return ep;
}

void save_demo_log(const std::filesystem::path& path, const DemoEpisode& episode) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_demo_log(out, episode);
}

DemoEpisode load_demo_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_demo_log(in);
}

Json to_json(const KeyframeConfig& cfg) {
  return Json{{"translation_threshold", cfg.translation_threshold},
              {"rotation_threshold", cfg.rotation_threshold},
              {"velocity_epsilon", cfg.velocity_epsilon}};
}

KeyframeConfig keyframe_config_from_json(const Json& j) {
  KeyframeConfig cfg;
  cfg.translation_threshold = j.value("translation_threshold", cfg.translation_threshold);
  cfg.rotation_threshold = j.value("rotation_threshold", cfg.rotation_threshold);
  cfg.velocity_epsilon = j.value("velocity_epsilon", cfg.velocity_epsilon);
  return cfg;
}

Json to_json(const DatasetConfig& cfg) {
  return Json{{"obs_horizon", cfg.obs_horizon},
              {"pred_horizon", cfg.pred_horizon},
              {"max_stages", cfg.max_stages},
              {"task_embedding_dim", cfg.task_embedding_dim},
              {"embedding_seed", cfg.embedding_seed},
              {"keyframe", to_json(cfg.keyframe)}};
}

DatasetConfig dataset_config_from_json(const Json& j) {
  DatasetConfig cfg;
  cfg.obs_horizon = j.value("obs_horizon", cfg.obs_horizon);
  cfg.pred_horizon = j.value("pred_horizon", cfg.pred_horizon);
  cfg.max_stages = j.value("max_stages", cfg.max_stages);
  cfg.task_embedding_dim = j.value("task_embedding_dim", cfg.task_embedding_dim);
  cfg.embedding_seed = j.value("embedding_seed", cfg.embedding_seed);
  if (j.contains("keyframe")) cfg.keyframe = keyframe_config_from_json(j.at("keyframe"));
  return cfg;
}

Json to_json(const NormStats& stats) {
  return Json{{"min", vector_to_json(stats.min)}, {"max", vector_to_json(stats.max)}};
}

NormStats norm_stats_from_json(const Json& j) {
  NormStats s;
  const Eigen::VectorXd lo = vector_from_json(j.at("min"));
  const Eigen::VectorXd hi = vector_from_json(j.at("max"));
  if (lo.size() != kPoseFeatureDim || hi.size() != kPoseFeatureDim) {
    throw std::invalid_argument("norm stats must have 9 dimensions");
  }
  if ((lo.array() > hi.array()).any()) throw std::invalid_argument("norm stats min exceeds max");
  s.min = lo;
  s.max = hi;
  return s;
}

Json to_json(const TaskEmbeddings& table) {
  Json j = Json::object();
  for (const auto& [id, v] : table) j[id] = vector_to_json(v);
  return j;
}

TaskEmbeddings task_embeddings_from_json(const Json& j) {
  TaskEmbeddings t;
  for (const auto& [id, v] : j.items()) t[id] = vector_from_json(v);
  return t;
}

Json to_json(const Dataset& dataset) {
  Json j;
  j["format_version"] = Dataset::kFormatVersion;
  j["config"] = to_json(dataset.config);
  j["norm_stats"] = to_json(dataset.stats);
  j["task_embeddings"] = to_json(dataset.task_embeddings);
  Json samples = Json::array();
  for (const auto& s : dataset.samples) {
    samples.push_back(Json{{"task_id", s.task_id},
                           {"stage", s.stage},
                           {"observed", vector_to_json(s.observed)},
                           {"target", vector_to_json(s.target)},
                           {"end_labels", vector_to_json(s.end_labels)},
                           {"end_state", s.end_state}});
  }
  j["samples"] = std::move(samples);
  return j;
}

Dataset dataset_from_json(const Json& j) {
  const int version = j.at("format_version").get<int>();
  if (version != Dataset::kFormatVersion) {
    throw std::invalid_argument("unsupported dataset format_version " + std::to_string(version));
  }
  Dataset ds;
  ds.config = dataset_config_from_json(j.at("config"));
  ds.config.validate();
  ds.stats = norm_stats_from_json(j.at("norm_stats"));
  ds.task_embeddings = task_embeddings_from_json(j.at("task_embeddings"));
  const auto obs_len = ds.config.obs_horizon * kPoseFeatureDim;
  const auto pred_len = ds.config.pred_horizon * kPoseFeatureDim;
  for (const auto& sj : j.at("samples")) {
    TrainingSample s;
    s.task_id = sj.at("task_id").get<std::string>();
    s.stage = sj.at("stage").get<int>();
    s.observed = vector_from_json(sj.at("observed"));
    s.target = vector_from_json(sj.at("target"));
    s.end_labels = vector_from_json(sj.at("end_labels"));
    s.end_state = sj.at("end_state").get<double>();
    if (s.observed.size() != obs_len || s.target.size() != pred_len ||
        s.end_labels.size() != ds.config.pred_horizon) {
      throw std::invalid_argument("dataset sample shape does not match horizons");
    }
    if (!ds.task_embeddings.contains(s.task_id)) {
      throw std::invalid_argument("sample references unknown task '" + s.task_id + "'");
    }
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.empty()) throw EmptyDataset("dataset has no samples");
  return ds;
}

void save_dataset(const std::filesystem::path& path, const Dataset& dataset) {
  write_json_file(path, to_json(dataset));
}

Dataset load_dataset(const std::filesystem::path& path) { return dataset_from_json(read_json_file(path)); }

}  // namespace otd
