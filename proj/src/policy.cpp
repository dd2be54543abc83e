#include "otd/policy.hpp"

#include <deque>
#include <fstream>
#include <stdexcept>
#include <string>

namespace otd {

void ExecutorConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw std::invalid_argument("executor." + field + " " + why);
  };
  if (prediction_horizon < 1) fail("prediction_horizon", "must be >= 1");
  if (execution_horizon < 1 || execution_horizon > prediction_horizon) {
    fail("execution_horizon", "must lie in [1, prediction_horizon]");
  }
  if (!(end_threshold > 0.0 && end_threshold < 1.0)) fail("end_threshold", "must lie in (0, 1)");
  if (max_steps < 1) fail("max_steps", "must be >= 1");
  if (dense_substeps < 1) fail("dense_substeps", "must be >= 1");
  if (patience < 0) fail("patience", "must be >= 0");
}

namespace {

std::vector<Pose> decode_chunk(const Eigen::VectorXd& chunk) {
  std::vector<Pose> out;
  out.reserve(static_cast<std::size_t>(chunk.size() / kPoseFeatureDim));
  for (Eigen::Index i = 0; i + kPoseFeatureDim <= chunk.size(); i += kPoseFeatureDim) {
    out.push_back(feature_to_pose(chunk.segment<kPoseFeatureDim>(i)));
  }
  return out;
}

}  // namespace

std::vector<Pose> synthesize(const TrajectoryModel& model, std::span<const Pose> history,
                             const Eigen::VectorXd& task_emb, int stage, std::uint64_t seed) {
  return decode_chunk(ddim_sample(model, encode_condition(model, history, task_emb, stage), seed));
}

ActionPlan plan_actions(std::span<const Pose> canonical, const Pose& target_world, const Pose& grasp_tf,
                        int dense_substeps, const std::optional<Pose>& start) {
  if (canonical.empty()) throw std::invalid_argument("plan_actions needs at least one pose");
  if (dense_substeps < 1) throw std::invalid_argument("dense_substeps must be >= 1");
  ActionPlan plan;
  auto emit = [&](const Pose& object_canonical, int k) {
    plan.subgoals.push_back(compose(compose(target_world, object_canonical), grasp_tf));
    plan.gripper.push_back(Gripper::kClosed);
    plan.keyframe.push_back(k);
  };
  for (std::size_t k = 0; k < canonical.size(); ++k) {
    const Pose* from = k > 0 ? &canonical[k - 1] : (start ? &*start : nullptr);
    if (from) {
      for (int s = 1; s < dense_substeps; ++s) {
        emit(interpolate(*from, canonical[k], static_cast<double>(s) / dense_substeps), static_cast<int>(k));
      }
    }
    emit(canonical[k], static_cast<int>(k));
  }
  return plan;
}

sim::RolloutResult receding_horizon_episode(const TrajectoryModel& model, sim::Simulator& sim,
                                            const ExecutorConfig& cfg, std::uint64_t seed,
                                            std::vector<StepRecord>* records) {
  cfg.validate();
  if (cfg.prediction_horizon != model.config.pred_horizon) {
    throw std::invalid_argument("executor.prediction_horizon " + std::to_string(cfg.prediction_horizon) +
                                " does not match the model's pred_horizon " +
                                std::to_string(model.config.pred_horizon));
  }
  const auto& spec = sim.spec();
  const Eigen::VectorXd& emb = model.embedding(spec.task_id);
  const auto obs_horizon = static_cast<std::size_t>(model.config.obs_horizon);

  int steps = 0;
  int replans = 0;
  int invalid_run = 0;
  bool aborted = false;

  for (int stage = 0; stage < spec.stage_count() && !aborted; ++stage) {
    if (stage > 0) sim.begin_stage(stage);
    std::deque<Pose> history;
    ActionPlan plan;
    std::size_t cursor = 0;
    int executed = 0;
    bool at_boundary = true;

    while (true) {
      const sim::TrackerObservation obs = sim.observe();
      StepRecord rec;
      rec.t = obs.t;
      rec.stage = stage;
      rec.observation_valid = obs.valid;
      std::optional<Pose> current;
      if (obs.valid) {
        invalid_run = 0;
        rec.observed_source = obs.source_pose;
        rec.observed_target = obs.target_pose;
        current = relative_pose(obs.source_pose, obs.target_pose);
        if (at_boundary) {
          if (history.empty()) history.assign(obs_horizon, *current);
          history.push_back(*current);
          while (history.size() > obs_horizon) history.pop_front();
          at_boundary = false;
        }
      } else if (++invalid_run > cfg.patience) {
        sim.trace().tracking_lost = true;
        aborted = true;
        if (records) records->push_back(rec);
        break;
      }

      const bool exhausted = cursor >= plan.subgoals.size();
      if (obs.valid && !history.empty() && (exhausted || executed >= cfg.execution_horizon)) {
        ++replans;
        const std::vector<Pose> hist(history.begin(), history.end());
        const Eigen::VectorXd cond = encode_condition(model, hist, emb, stage);
        rec.end_probability = predict_end_state(model.net, cond);
        if (rec.end_probability > cfg.end_threshold) {
          sim.release(rec.end_probability);
          rec.released = true;
          if (records) records->push_back(rec);
          break;
        }
        try {
          rec.plan = decode_chunk(ddim_sample(model, cond, substream(seed, static_cast<std::uint64_t>(replans))));
        } catch (const InvalidFeature&) {
          // An undecodable sample ends the episode without a release.
          aborted = true;
          if (records) records->push_back(rec);
          break;
        }
        const Pose grasp_tf = relative_pose(sim.state().ee, obs.source_pose);
        plan = plan_actions(rec.plan, obs.target_pose, grasp_tf, cfg.dense_substeps, current);
        cursor = 0;
        executed = 0;
      }

      if (steps >= cfg.max_steps) {
        aborted = true;
        if (records) records->push_back(rec);
        break;
      }
      const bool has_subgoal = cursor < plan.subgoals.size();
      const Pose subgoal = has_subgoal ? plan.subgoals[cursor] : sim.state().ee;
      rec.subgoal = subgoal;
      sim.step(subgoal);
      ++steps;
      if (has_subgoal) {
        if (plan.segment_end(cursor)) {
          ++executed;
          at_boundary = true;
        }
        ++cursor;
      }
      if (records) records->push_back(std::move(rec));
    }
  }

  sim::RolloutResult result = sim::check_outcome(sim.trace(), spec);
  result.steps = steps;
  result.replans = replans;
  return result;
}

void write_trace(const std::filesystem::path& path, std::span<const StepRecord> records) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write trace file " + path.string());
  for (const auto& r : records) {
    Json j;
    j["t"] = r.t;
    j["stage"] = r.stage;
    j["observation_valid"] = r.observation_valid;
    if (r.observation_valid) {
      j["observed_source"] = pose_to_json(r.observed_source);
      j["observed_target"] = pose_to_json(r.observed_target);
    }
    if (!r.plan.empty()) {
      Json plan = Json::array();
      for (const auto& p : r.plan) plan.push_back(pose_to_json(p));
      j["plan"] = std::move(plan);
    }
    j["subgoal"] = r.subgoal ? pose_to_json(*r.subgoal) : Json();
    j["end_probability"] = r.end_probability;
    j["released"] = r.released;
    out << j.dump() << '\n';
  }
}

Json to_json(const ExecutorConfig& cfg) {
  return Json{{"prediction_horizon", cfg.prediction_horizon},
              {"execution_horizon", cfg.execution_horizon},
              {"end_threshold", cfg.end_threshold},
              {"max_steps", cfg.max_steps},
              {"dense_substeps", cfg.dense_substeps},
              {"patience", cfg.patience}};
}

ExecutorConfig executor_config_from_json(const Json& j) {
  ExecutorConfig c;
  c.prediction_horizon = j.value("prediction_horizon", c.prediction_horizon);
  c.execution_horizon = j.value("execution_horizon", c.execution_horizon);
  c.end_threshold = j.value("end_threshold", c.end_threshold);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.dense_substeps = j.value("dense_substeps", c.dense_substeps);
  c.patience = j.value("patience", c.patience);
  c.validate();
  return c;
}

}  // namespace otd
