#include "otd/sim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace otd::sim {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

Pose yaw_pose(double yaw, const Eigen::Vector3d& t) {
  return Pose::FromAxisAngle(Eigen::Vector3d::UnitZ(), yaw, t);
}

double min_jerk(double s) { return s * s * s * (10.0 + s * (-15.0 + 6.0 * s)); }

}  // namespace

std::string_view to_string(FailureMode m) {
  switch (m) {
    case FailureMode::kNone: return "none";
    case FailureMode::kPlacing: return "placing_failure";
    case FailureMode::kTaskConstraint: return "task_constraint_failure";
    case FailureMode::kTracking: return "tracking_failure";
  }
  return "unknown";
}

void TaskSpec::validate() const {
  if (task_id.empty()) throw std::invalid_argument("task_id must not be empty");
  if (stages.empty()) throw std::invalid_argument("task '" + task_id + "' has no stages");
  const int n = static_cast<int>(objects.size());
  auto check_index = [&](int i, const char* what) {
    if (i < 0 || i >= n) throw std::invalid_argument(std::string(what) + " object index out of range");
  };
  for (const auto& o : objects) {
    if ((o.extents.array() <= 0.0).any()) throw std::invalid_argument("object extents must be positive");
  }
  if ((anchor_min.array() > anchor_max.array()).any() || anchor_yaw_min > anchor_yaw_max) {
    throw std::invalid_argument("anchor sampling range is inverted");
  }
  for (const auto& p : placements) {
    check_index(p.object, "placement");
    if (p.radius_min < 0 || p.radius_min > p.radius_max || p.bearing_min > p.bearing_max || p.yaw_min > p.yaw_max) {
      throw std::invalid_argument("placement sampling range is invalid");
    }
  }
  for (const auto& s : stages) {
    check_index(s.source, "stage source");
    check_index(s.target, "stage target");
    if (s.source == s.target) throw std::invalid_argument("stage source and target must differ");
    if (!(s.position_tolerance > 0) || !(s.rotation_tolerance > 0)) {
      throw std::invalid_argument("goal tolerances must be positive");
    }
    if (s.lift_height < 0) throw std::invalid_argument("lift_height must be non-negative");
    if (s.constraint) {
      if (!(s.constraint->max_tilt > 0)) throw std::invalid_argument("constraint.max_tilt must be positive");
      if (!(s.constraint->activation_radius > s.position_tolerance)) {
        throw std::invalid_argument("constraint.activation_radius must exceed the position tolerance");
      }
    }
  }
}

void PerturbationSpec::validate() const {
  if (translation_noise < 0 || rotation_noise < 0) throw std::invalid_argument("tracker noise must be non-negative");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout must lie in [0, 1)");
  for (const auto& s : slips) {
    if (s.time < 0) throw std::invalid_argument("slip time must be non-negative");
  }
}

// ---------------------------------------------------------------------------
// Scenes and oracle demonstrations

std::vector<Pose> sample_scene(const TaskSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(substream(seed, "scene"));
  std::vector<Pose> objects(spec.objects.size());
  Eigen::Vector3d a;
  for (int d = 0; d < 3; ++d) a[d] = rng.uniform(spec.anchor_min[d], spec.anchor_max[d]);
  const Pose anchor = yaw_pose(rng.uniform(spec.anchor_yaw_min, spec.anchor_yaw_max), a);
  objects[spec.anchor()] = anchor;
  for (const auto& p : spec.placements) {
    const double r = rng.uniform(p.radius_min, p.radius_max);
    const double b = rng.uniform(p.bearing_min, p.bearing_max);
    const double yaw = rng.uniform(p.yaw_min, p.yaw_max);
    objects[p.object] = compose(anchor, yaw_pose(yaw, {r * std::cos(b), r * std::sin(b), p.height}));
  }
  return objects;
}

std::vector<Pose> oracle_path(const StageSpec& stage, const Pose& start) {
  const Pose lifted(start.rotation(), start.translation() + stage.lift_height * Eigen::Vector3d::UnitZ());
  const std::array<Pose, 4> waypoints{start, lifted, stage.approach, stage.goal};
  constexpr double kSpeed = 0.15;      // m/s
  constexpr double kTurnRate = 0.9;    // rad/s
  constexpr double kMinDuration = 0.5;
  std::vector<Pose> path{start};
  for (std::size_t w = 0; w + 1 < waypoints.size(); ++w) {
    const Pose& a = waypoints[w];
    const Pose& b = waypoints[w + 1];
    const double duration = std::max({kMinDuration, translation_distance(a, b) / kSpeed,
                                      rotation_geodesic(a, b) / kTurnRate});
    const int frames = static_cast<int>(std::ceil(duration * kDemoRate - 1e-9));
    for (int i = 1; i <= frames; ++i) {
      path.push_back(interpolate(a, b, min_jerk(static_cast<double>(i) / frames)));
    }
  }
  return path;
}

DemoEpisode generate_demo(const TaskSpec& spec, std::uint64_t seed) {
  std::vector<Pose> objects = sample_scene(spec, seed);
  DemoEpisode ep;
  ep.task_id = spec.task_id;
  constexpr int kIdleFrames = 5;
  constexpr int kTrailingFrames = 3;
  auto log = [&](const StageSpec& s, Gripper g) {
    const double t = static_cast<double>(ep.frames.size()) / kDemoRate;
    ep.frames.push_back({t, objects[s.source], objects[s.target], g});
  };
  for (const auto& stage : spec.stages) {
    for (int i = 0; i < kIdleFrames; ++i) log(stage, Gripper::kOpen);
    log(stage, Gripper::kClosed);
    const auto path = oracle_path(stage, relative_pose(objects[stage.source], objects[stage.target]));
    for (std::size_t i = 1; i < path.size(); ++i) {
      objects[stage.source] = compose(objects[stage.target], path[i]);
      log(stage, Gripper::kClosed);
    }
    log(stage, Gripper::kOpen);
  }
  for (int i = 0; i < kTrailingFrames; ++i) log(spec.stages.back(), Gripper::kOpen);
  return ep;
}

double demo_variation_bound(const TaskSpec& spec, int stage) {
  const auto& s = spec.stages.at(stage);
  double reach = 0.0;
  for (const auto& p : spec.placements) reach = std::max(reach, p.radius_max + std::abs(p.height));
  for (const auto& st : spec.stages) reach += st.goal.translation().norm();
  const double radius = reach + s.lift_height + s.goal.translation().norm() +
                        (s.approach.translation() - s.goal.translation()).norm();
  return 2.0 * radius;
}

// ---------------------------------------------------------------------------
// Tracker and kinematics

TrackerObservation observe(const WorldState& world, const PerturbationSpec& pspec, Rng& rng) {
  auto noisy = [&](const Pose& p) {
    Eigen::Vector3d dt, dr;
    for (int i = 0; i < 3; ++i) dt[i] = rng.normal() * pspec.translation_noise;
    for (int i = 0; i < 3; ++i) dr[i] = rng.normal() * pspec.rotation_noise;
    const double angle = dr.norm();
    Eigen::Quaterniond q = p.rotation();
    if (angle > 0.0) q = Eigen::Quaterniond(Eigen::AngleAxisd(angle, dr / angle)) * q;
    return Pose(q, p.translation() + dt);
  };
  TrackerObservation obs;
  obs.t = world.t;
  obs.source_pose = noisy(world.source_pose());
  obs.target_pose = noisy(world.target_pose());
  obs.valid = !rng.bernoulli(pspec.dropout);
  return obs;
}

WorldState apply_action(const WorldState& world, const Pose& subgoal, Gripper cmd, const PerturbationSpec& pspec,
                        double dt) {
  WorldState next = world;
  const double t0 = world.t;
  next.t = t0 + dt;
  next.ee = subgoal;
  const bool holding = world.gripper == Gripper::kClosed;
  while (next.next_slip < pspec.slips.size() && pspec.slips[next.next_slip].time <= next.t) {
    const auto& slip = pspec.slips[next.next_slip++];
    if (holding) next.grasp_tf = compose(inverse(slip.offset), next.grasp_tf);
  }
  if (holding) next.objects[next.source_index] = compose(next.ee, inverse(next.grasp_tf));
  if (!pspec.target_drift.isZero()) {
    Pose& target = next.objects[next.target_index];
    target = Pose(target.rotation(), target.translation() + pspec.target_drift * dt);
  }
  if (cmd == Gripper::kClosed && !holding) {
    next.grasp_tf = relative_pose(next.ee, next.source_pose());
  }
  next.gripper = cmd;
  return next;
}

bool goal_reached(const StageSpec& stage, const Pose& source, const Pose& target) {
  const Pose rel = relative_pose(source, target);
  return translation_distance(rel, stage.goal) <= stage.position_tolerance &&
         rotation_geodesic(rel, stage.goal) <= stage.rotation_tolerance;
}

RolloutResult check_outcome(const EpisodeTrace& trace, const TaskSpec& spec) {
  RolloutResult r;
  r.releases = trace.releases;
  for (const auto& s : trace.samples) {
    if (s.gripper != Gripper::kClosed) continue;
    const auto& stage = spec.stages.at(s.stage);
    if (!stage.constraint) continue;
    const Pose goal_world = compose(s.target, stage.goal);
    if (translation_distance(s.source, goal_world) <= stage.constraint->activation_radius) continue;
    const double tilt = tilt_from_up(s.source);
    r.max_tilt_outside = std::max(r.max_tilt_outside, tilt);
    r.max_constraint_violation = std::max(r.max_constraint_violation, tilt - stage.constraint->max_tilt);
  }

  if (trace.tracking_lost) {
    r.failure_mode = FailureMode::kTracking;
  } else if (r.max_constraint_violation > 0.0) {
    r.failure_mode = FailureMode::kTaskConstraint;
  } else {
    r.failure_mode = FailureMode::kNone;
    for (int s = 0; s < spec.stage_count(); ++s) {
      const auto it = std::find_if(trace.releases.begin(), trace.releases.end(),
                                   [&](const ReleaseEvent& e) { return e.stage == s; });
      if (it == trace.releases.end() || !goal_reached(spec.stages[s], it->source, it->target)) {
        r.failure_mode = FailureMode::kPlacing;
        break;
      }
    }
  }
  r.success = r.failure_mode == FailureMode::kNone;
  return r;
}

// ---------------------------------------------------------------------------
// Simulator

Simulator::Simulator(TaskSpec spec, PerturbationSpec pspec, std::uint64_t seed, const Pose& scene_transform)
    : spec_(std::move(spec)), pspec_(std::move(pspec)), tracker_rng_(substream(seed, "tracker")) {
  spec_.validate();
  pspec_.validate();
  for (const Pose& p : sample_scene(spec_, seed)) state_.objects.push_back(compose(scene_transform, p));
  state_.ee = compose(scene_transform, Pose::FromAxisAngle(Eigen::Vector3d::UnitX(), std::numbers::pi,
                                                           Eigen::Vector3d(0.3, 0.0, 0.45)));
  record();
  begin_stage(0);
}

void Simulator::begin_stage(int stage) {
  const auto& s = spec_.stages.at(stage);
  if (state_.gripper == Gripper::kClosed) throw std::logic_error("begin_stage while still holding an object");
  state_.stage = stage;
  state_.source_index = s.source;
  state_.target_index = s.target;
  const Pose grasp_ee = compose(state_.source_pose(), s.grasp);
  state_ = apply_action(state_, grasp_ee, Gripper::kClosed, pspec_);
  record();
}

TrackerObservation Simulator::observe() { return sim::observe(state_, pspec_, tracker_rng_); }

void Simulator::step(const Pose& ee_subgoal) {
  state_ = apply_action(state_, ee_subgoal, state_.gripper, pspec_);
  record();
}

void Simulator::release(double probability) {
  state_ = apply_action(state_, state_.ee, Gripper::kOpen, pspec_);
  trace_.releases.push_back({state_.stage, state_.t, probability, state_.source_pose(), state_.target_pose()});
  record();
}

void Simulator::record() {
  trace_.samples.push_back(
      {state_.t, state_.stage, state_.source_pose(), state_.target_pose(), state_.ee, state_.gripper});
}

RolloutResult oracle_episode(const TaskSpec& spec, const PerturbationSpec& pspec, std::uint64_t seed) {
  Simulator sim(spec, pspec, seed);
  int steps = 0;
  for (int s = 0; s < spec.stage_count(); ++s) {
    if (s > 0) sim.begin_stage(s);
    const auto& w = sim.state();
    const auto path = oracle_path(spec.stages[s], relative_pose(w.source_pose(), w.target_pose()));
    for (std::size_t i = 1; i < path.size(); ++i) {
      const auto& cur = sim.state();
      sim.step(compose(compose(cur.target_pose(), path[i]), cur.grasp_tf));
      ++steps;
    }
    sim.release(1.0);
  }
  RolloutResult r = check_outcome(sim.trace(), spec);
  r.steps = steps;
  return r;
}

// ---------------------------------------------------------------------------
// Task suite

TaskSpec mug_on_coaster() {
  TaskSpec t;
  t.task_id = "mug-on-coaster";
  t.objects = {{"coaster", {0.10, 0.10, 0.005}}, {"mug", {0.08, 0.08, 0.10}}};
  t.placements = {{1, 0.18, 0.25, -0.6, 0.6, -0.6, 0.6, 0.0}};
  StageSpec s;
  s.source = 1;
  s.target = 0;
  s.goal = Pose::FromTranslation({0.0, 0.0, 0.005});
  s.approach = Pose::FromTranslation({0.0, 0.0, 0.085});
  s.grasp = Pose::FromAxisAngle(Eigen::Vector3d::UnitX(), std::numbers::pi, Eigen::Vector3d(0.0, 0.0, 0.12));
  s.lift_height = 0.08;
  s.position_tolerance = 0.02;
  s.rotation_tolerance = 15.0 * kDeg;
  t.stages = {s};
  return t;
}

TaskSpec plant_in_vase() {
  TaskSpec t;
  t.task_id = "plant-in-vase";
  t.objects = {{"vase", {0.10, 0.10, 0.20}}, {"plant", {0.06, 0.06, 0.15}}};
  t.placements = {{1, 0.22, 0.30, -0.6, 0.6, -0.5, 0.5, 0.0}};
  StageSpec s;
  s.source = 1;
  s.target = 0;
  s.goal = Pose::FromTranslation({0.0, 0.0, 0.05});
  s.approach = Pose::FromTranslation({0.0, 0.0, 0.22});
  s.grasp = Pose::FromAxisAngle(Eigen::Vector3d::UnitX(), std::numbers::pi, Eigen::Vector3d(0.0, 0.0, 0.16));
  s.lift_height = 0.22;
  s.position_tolerance = 0.008;
  s.rotation_tolerance = 10.0 * kDeg;
  t.stages = {s};
  return t;
}

TaskSpec pour_water() {
  TaskSpec t;
  t.task_id = "pour-water";
  t.objects = {{"mug", {0.08, 0.08, 0.10}}, {"kettle", {0.12, 0.12, 0.15}}};
  t.placements = {{1, 0.24, 0.32, -0.6, 0.6, -0.5, 0.5, 0.0}};
  StageSpec s;
  s.source = 1;
  s.target = 0;
  s.goal = Pose::FromAxisAngle(Eigen::Vector3d::UnitX(), -50.0 * kDeg, Eigen::Vector3d(0.0, -0.09, 0.17));
  s.approach = Pose::FromTranslation({0.0, -0.13, 0.17});
  s.grasp = Pose::FromAxisAngle(Eigen::Vector3d::UnitY(), std::numbers::pi / 2, Eigen::Vector3d(-0.09, 0.0, 0.08));
  s.lift_height = 0.12;
  s.position_tolerance = 0.02;
  s.rotation_tolerance = 10.0 * kDeg;
  s.constraint = UprightConstraint{20.0 * kDeg, 0.12};
  t.stages = {s};
  return t;
}

TaskSpec two_stage_stack() {
  TaskSpec t;
  t.task_id = "two-stage-stack";
  t.objects = {{"base", {0.12, 0.12, 0.04}}, {"block-a", {0.05, 0.05, 0.05}}, {"block-b", {0.05, 0.05, 0.05}}};
  t.placements = {{1, 0.22, 0.30, -2.1, -1.0, -0.5, 0.5, 0.0}, {2, 0.22, 0.30, 1.0, 2.1, -0.5, 0.5, 0.0}};
  const Pose top_grasp =
      Pose::FromAxisAngle(Eigen::Vector3d::UnitX(), std::numbers::pi, Eigen::Vector3d(0.0, 0.0, 0.05));
  StageSpec a;
  a.source = 1;
  a.target = 0;
  a.goal = Pose::FromTranslation({0.0, 0.0, 0.04});
  a.approach = Pose::FromTranslation({0.0, 0.0, 0.10});
  a.grasp = top_grasp;
  a.lift_height = 0.08;
  a.position_tolerance = 0.02;
  a.rotation_tolerance = 15.0 * kDeg;
  StageSpec b = a;
  b.source = 2;
  b.target = 1;
  b.goal = Pose::FromTranslation({0.0, 0.0, 0.05});
  b.approach = Pose::FromTranslation({0.0, 0.0, 0.11});
  b.lift_height = 0.12;
  t.stages = {a, b};
  return t;
}

std::vector<TaskSpec> task_suite() { return {mug_on_coaster(), plant_in_vase(), pour_water(), two_stage_stack()}; }

TaskSpec task_by_name(std::string_view name) {
  for (auto& t : task_suite()) {
    if (t.task_id == name) return t;
  }
  throw std::invalid_argument("unknown task '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Files

namespace {

Json vec3(const Eigen::Vector3d& v) { return Json::array({v.x(), v.y(), v.z()}); }

Eigen::Vector3d vec3_from(const Json& j) {
  const auto v = j.get<std::vector<double>>();
  if (v.size() != 3) throw std::invalid_argument("expected a 3-vector");
  return {v[0], v[1], v[2]};
}

}  // namespace

Json to_json(const TaskSpec& spec) {
  Json j;
  j["task_id"] = spec.task_id;
  Json objs = Json::array();
  for (const auto& o : spec.objects) objs.push_back(Json{{"name", o.name}, {"extents", vec3(o.extents)}});
  j["objects"] = std::move(objs);
  j["anchor"] = Json{{"min", vec3(spec.anchor_min)},
                     {"max", vec3(spec.anchor_max)},
                     {"yaw_min", spec.anchor_yaw_min},
                     {"yaw_max", spec.anchor_yaw_max}};
  Json places = Json::array();
  for (const auto& p : spec.placements) {
    places.push_back(Json{{"object", p.object},
                          {"radius_min", p.radius_min},
                          {"radius_max", p.radius_max},
                          {"bearing_min", p.bearing_min},
                          {"bearing_max", p.bearing_max},
                          {"yaw_min", p.yaw_min},
                          {"yaw_max", p.yaw_max},
                          {"height", p.height}});
  }
  j["placements"] = std::move(places);
  Json stages = Json::array();
  for (const auto& s : spec.stages) {
    Json sj{{"source", s.source},
            {"target", s.target},
            {"goal", pose_to_json(s.goal)},
            {"approach", pose_to_json(s.approach)},
            {"grasp", pose_to_json(s.grasp)},
            {"lift_height", s.lift_height},
            {"position_tolerance", s.position_tolerance},
            {"rotation_tolerance", s.rotation_tolerance}};
    if (s.constraint) {
      sj["constraint"] =
          Json{{"max_tilt", s.constraint->max_tilt}, {"activation_radius", s.constraint->activation_radius}};
    }
    stages.push_back(std::move(sj));
  }
  j["stages"] = std::move(stages);
  return j;
}

TaskSpec task_spec_from_json(const Json& j) {
  TaskSpec t;
  t.task_id = j.at("task_id").get<std::string>();
  for (const auto& o : j.at("objects")) t.objects.push_back({o.at("name").get<std::string>(), vec3_from(o.at("extents"))});
  if (j.contains("anchor")) {
    const auto& a = j.at("anchor");
    t.anchor_min = vec3_from(a.at("min"));
    t.anchor_max = vec3_from(a.at("max"));
    t.anchor_yaw_min = a.value("yaw_min", t.anchor_yaw_min);
    t.anchor_yaw_max = a.value("yaw_max", t.anchor_yaw_max);
  }
  for (const auto& p : j.value("placements", Json::array())) {
    RelativePlacement r;
    r.object = p.at("object").get<int>();
    r.radius_min = p.value("radius_min", r.radius_min);
    r.radius_max = p.value("radius_max", r.radius_max);
    r.bearing_min = p.value("bearing_min", r.bearing_min);
    r.bearing_max = p.value("bearing_max", r.bearing_max);
    r.yaw_min = p.value("yaw_min", r.yaw_min);
    r.yaw_max = p.value("yaw_max", r.yaw_max);
    r.height = p.value("height", r.height);
    t.placements.push_back(r);
  }
  for (const auto& sj : j.at("stages")) {
    StageSpec s;
    s.source = sj.at("source").get<int>();
    s.target = sj.at("target").get<int>();
    s.goal = pose_from_json(sj.at("goal"));
    s.approach = pose_from_json(sj.at("approach"));
    s.grasp = pose_from_json(sj.at("grasp"));
    s.lift_height = sj.value("lift_height", s.lift_height);
    s.position_tolerance = sj.value("position_tolerance", s.position_tolerance);
    s.rotation_tolerance = sj.value("rotation_tolerance", s.rotation_tolerance);
    if (sj.contains("constraint")) {
      const auto& c = sj.at("constraint");
      s.constraint = UprightConstraint{c.at("max_tilt").get<double>(), c.at("activation_radius").get<double>()};
    }
    t.stages.push_back(s);
  }
  t.validate();
  return t;
}

TaskSpec load_task_spec(const std::filesystem::path& path) { return task_spec_from_json(read_json_file(path)); }

Json to_json(const PerturbationSpec& p) {
  Json slips = Json::array();
  for (const auto& s : p.slips) slips.push_back(Json{{"time", s.time}, {"offset", pose_to_json(s.offset)}});
  return Json{{"slips", std::move(slips)},
              {"target_drift", vec3(p.target_drift)},
              {"translation_noise", p.translation_noise},
              {"rotation_noise", p.rotation_noise},
              {"dropout", p.dropout}};
}

PerturbationSpec perturbation_from_json(const Json& j) {
  PerturbationSpec p;
  for (const auto& s : j.value("slips", Json::array())) {
    p.slips.push_back({s.at("time").get<double>(), pose_from_json(s.at("offset"))});
  }
  if (j.contains("target_drift")) p.target_drift = vec3_from(j.at("target_drift"));
  p.translation_noise = j.value("translation_noise", p.translation_noise);
  p.rotation_noise = j.value("rotation_noise", p.rotation_noise);
  p.dropout = j.value("dropout", p.dropout);
  p.validate();
  return p;
}

}  // namespace otd::sim
