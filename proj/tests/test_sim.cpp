#include <gtest/gtest.h>

#include <numbers>

#include "oracles.hpp"
#include "otd/sim.hpp"

using namespace otd;
using namespace otd::sim;

namespace {

WorldState two_objects() {
  WorldState w;
  w.objects = {Pose::FromTranslation({0.5, 0.0, 0.0}), Pose::FromTranslation({0.3, 0.1, 0.0})};
  w.source_index = 1;
  w.target_index = 0;
  return w;
}

}  // namespace

TEST(Sim, ExactObservationsWithoutNoise) {
  const WorldState w = two_objects();
  Rng rng(1);
  const TrackerObservation o = observe(w, PerturbationSpec{}, rng);
  EXPECT_TRUE(o.valid);
  EXPECT_TRUE(o.source_pose.isApprox(w.source_pose(), 0.0));
  EXPECT_TRUE(o.target_pose.isApprox(w.target_pose(), 0.0));
}

TEST(Sim, DropoutMustBeBelowOne) {
  PerturbationSpec p;
  p.dropout = 1.0;
  EXPECT_THROW(p.validate(), std::invalid_argument);
  p.dropout = -0.1;
  EXPECT_THROW(p.validate(), std::invalid_argument);
  p.dropout = 0.2;
  p.translation_noise = -1.0;
  EXPECT_THROW(p.validate(), std::invalid_argument);
}

TEST(Sim, TrackerNoiseRmsMonteCarlo) {
  const WorldState w = two_objects();
  PerturbationSpec p;
  p.translation_noise = 0.005;
  Rng rng(2);
  const int n = 10000;
  double sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const auto o = observe(w, p, rng);
    sq += (o.source_pose.translation() - w.source_pose().translation()).squaredNorm();
  }
  // |e|^2 / sigma^2 is chi-square with 3 dof: mean 3, variance 6.
  const double s2 = p.translation_noise * p.translation_noise;
  EXPECT_NEAR(sq / n, 3.0 * s2, 3.0 * s2 * std::sqrt(6.0 / n));
  EXPECT_NEAR(std::sqrt(sq / n), 0.005 * std::sqrt(3.0), 3e-4);
}

TEST(Sim, RotationNoiseMonteCarlo) {
  const WorldState w = two_objects();
  PerturbationSpec p;
  p.rotation_noise = 0.02;
  Rng rng(3);
  const int n = 10000;
  double sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double a = rotation_geodesic(observe(w, p, rng).source_pose, w.source_pose());
    sq += a * a;
  }
  const double s2 = p.rotation_noise * p.rotation_noise;
  EXPECT_NEAR(sq / n, 3.0 * s2, 3.0 * s2 * std::sqrt(6.0 / n));
}

TEST(Sim, DropoutRate) {
  const WorldState w = two_objects();
  PerturbationSpec p;
  p.dropout = 0.3;
  Rng rng(4);
  const int n = 10000;
  int invalid = 0;
  for (int i = 0; i < n; ++i) invalid += observe(w, p, rng).valid ? 0 : 1;
  EXPECT_NEAR(invalid / double(n), 0.3, 3.0 * std::sqrt(0.3 * 0.7 / n));
}

TEST(Sim, ClosedGripperCarriesObject) {
  WorldState w = two_objects();
  w.ee = w.source_pose();
  w = apply_action(w, w.ee, Gripper::kClosed, PerturbationSpec{});
  EXPECT_TRUE(w.grasp_tf.isApprox(Pose::Identity(), 1e-15));
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    const Pose goal = oracle::random_pose(rng, 0.3);
    w = apply_action(w, goal, Gripper::kClosed, PerturbationSpec{});
    EXPECT_TRUE(w.source_pose().isApprox(goal, 1e-12));
  }
}

TEST(Sim, RigidAttachmentWithOffsetGrasp) {
  WorldState w = two_objects();
  const Pose grasp = Pose::FromAxisAngle(Eigen::Vector3d::UnitX(), std::numbers::pi, Eigen::Vector3d(0, 0, 0.1));
  w = apply_action(w, compose(w.source_pose(), grasp), Gripper::kClosed, PerturbationSpec{});
  Rng rng(6);
  for (int i = 0; i < 20; ++i) {
    w = apply_action(w, oracle::random_pose(rng, 0.3), Gripper::kClosed, PerturbationSpec{});
    EXPECT_TRUE(relative_pose(w.ee, w.source_pose()).isApprox(grasp, 1e-12));
  }
}

TEST(Sim, OpenGripperLeavesObject) {
  WorldState w = two_objects();
  const Pose before = w.source_pose();
  Rng rng(7);
  for (int i = 0; i < 5; ++i) w = apply_action(w, oracle::random_pose(rng), Gripper::kOpen, PerturbationSpec{});
  EXPECT_TRUE(w.source_pose().isApprox(before, 0.0));
}

TEST(Sim, SlipAppliesExactTransform) {
  PerturbationSpec p;
  const Pose slip = Pose::FromTranslation({0.02, 0.0, 0.0});
  p.slips.push_back({2.0, slip});
  WorldState w = two_objects();
  const Pose grasp = Pose::FromAxisAngle(Eigen::Vector3d::UnitX(), std::numbers::pi, Eigen::Vector3d(0, 0, 0.1));
  w = apply_action(w, compose(w.source_pose(), grasp), Gripper::kClosed, p);
  Rng rng(8);
  while (w.t < 3.0 - 1e-9) {
    const Pose cmd = oracle::random_pose(rng, 0.3);
    w = apply_action(w, cmd, Gripper::kClosed, p);
    const Pose commanded = compose(cmd, inverse(grasp));
    if (w.t < 2.0 - 1e-9) {
      EXPECT_TRUE(w.source_pose().isApprox(commanded, 1e-12)) << w.t;
    } else {
      // Deviation from the commanded object pose is the slip, in the object frame.
      EXPECT_TRUE(relative_pose(w.source_pose(), commanded).isApprox(slip, 1e-12)) << w.t;
      EXPECT_LE(oracle::matrix_gap(w.source_pose(), oracle::homogeneous(commanded) * oracle::homogeneous(slip)),
                1e-12);
    }
  }
  EXPECT_EQ(w.next_slip, 1u);
}

TEST(Sim, SlipIgnoredWhenNotHolding) {
  PerturbationSpec p;
  p.slips.push_back({0.05, Pose::FromTranslation({0.02, 0, 0})});
  WorldState w = two_objects();
  w = apply_action(w, w.source_pose(), Gripper::kOpen, p);
  w = apply_action(w, w.source_pose(), Gripper::kClosed, p);
  EXPECT_TRUE(w.grasp_tf.isApprox(Pose::Identity(), 1e-15));
}

TEST(Sim, TargetDrift) {
  PerturbationSpec p;
  p.target_drift = {0.01, -0.02, 0.0};
  WorldState w = two_objects();
  const Eigen::Vector3d start = w.target_pose().translation();
  for (int i = 0; i < 10; ++i) w = apply_action(w, w.ee, Gripper::kOpen, p);
  EXPECT_LE((w.target_pose().translation() - (start + p.target_drift * 1.0)).norm(), 1e-12);
}

TEST(Sim, GoalPredicate) {
  const StageSpec s = mug_on_coaster().stages[0];
  const Pose target = Pose::FromAxisAngle(Eigen::Vector3d::UnitZ(), 0.7, Eigen::Vector3d(0.5, 0.1, 0));
  EXPECT_TRUE(goal_reached(s, compose(target, s.goal), target));
  const Pose off = compose(target, compose(s.goal, Pose::FromTranslation({0.025, 0, 0})));
  EXPECT_FALSE(goal_reached(s, off, target));
  const Pose turned = compose(target, compose(s.goal, Pose::FromAxisAngle(Eigen::Vector3d::UnitZ(), 0.3)));
  EXPECT_FALSE(goal_reached(s, turned, target));
}

TEST(Sim, OverTiltFarFromGoalIsConstraintFailure) {
  const TaskSpec spec = pour_water();
  const auto& st = spec.stages[0];
  const Pose target;
  EpisodeTrace trace;
  const Pose far_tilted = Pose::FromAxisAngle(Eigen::Vector3d::UnitX(), 0.6, Eigen::Vector3d(0.4, 0.0, 0.3));
  trace.samples.push_back({0.1, 0, far_tilted, target, Pose(), Gripper::kClosed});
  const Pose done = compose(target, st.goal);
  trace.samples.push_back({0.2, 0, done, target, Pose(), Gripper::kOpen});
  trace.releases.push_back({0, 0.2, 1.0, done, target});
  RolloutResult r = check_outcome(trace, spec);
  EXPECT_EQ(r.failure_mode, FailureMode::kTaskConstraint);
  EXPECT_NEAR(r.max_constraint_violation, 0.6 - st.constraint->max_tilt, 1e-12);
  EXPECT_FALSE(r.success);

  trace.samples.front().source = Pose::FromTranslation({0.4, 0.0, 0.3});
  r = check_outcome(trace, spec);
  EXPECT_EQ(r.failure_mode, FailureMode::kNone);
  EXPECT_TRUE(r.success);

  trace.tracking_lost = true;
  EXPECT_EQ(check_outcome(trace, spec).failure_mode, FailureMode::kTracking);
}

TEST(Sim, TiltInsideActivationRadiusIsAllowed) {
  const TaskSpec spec = pour_water();
  EpisodeTrace trace;
  const Pose target;
  const Pose pour = compose(target, spec.stages[0].goal);
  trace.samples.push_back({0.1, 0, pour, target, Pose(), Gripper::kClosed});
  trace.releases.push_back({0, 0.1, 1.0, pour, target});
  const RolloutResult r = check_outcome(trace, spec);
  EXPECT_EQ(r.failure_mode, FailureMode::kNone);
  EXPECT_EQ(r.max_tilt_outside, 0.0);
}

TEST(Sim, MissingOrWrongReleaseIsPlacingFailure) {
  const TaskSpec spec = two_stage_stack();
  EpisodeTrace trace;
  const Pose target;
  trace.releases.push_back({0, 1.0, 1.0, compose(target, spec.stages[0].goal), target});
  EXPECT_EQ(check_outcome(trace, spec).failure_mode, FailureMode::kPlacing);
  trace.releases.push_back({1, 2.0, 1.0, Pose::FromTranslation({1, 0, 0}), target});
  EXPECT_EQ(check_outcome(trace, spec).failure_mode, FailureMode::kPlacing);
  trace.releases.back().source = compose(target, spec.stages[1].goal);
  EXPECT_EQ(check_outcome(trace, spec).failure_mode, FailureMode::kNone);
}

TEST(Sim, SceneSamplingIsSeeded) {
  const TaskSpec spec = two_stage_stack();
  const auto a = sample_scene(spec, 5), b = sample_scene(spec, 5), c = sample_scene(spec, 6);
  ASSERT_EQ(a.size(), 3u);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(a[i].isApprox(b[i], 0.0));
  EXPECT_FALSE(a[1].isApprox(c[1], 1e-6));
  for (const auto& p : a) EXPECT_NEAR(tilt_from_up(p), 0.0, 1e-7);
}

TEST(Sim, DemosReachGoalAndRespectConstraints) {
  for (const auto& spec : task_suite()) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const DemoEpisode ep = generate_demo(spec, seed);
      ep.validate();
      const auto ranges = segment_stages(ep);
      ASSERT_EQ(static_cast<int>(ranges.size()), spec.stage_count()) << spec.task_id;
      for (int s = 0; s < spec.stage_count(); ++s) {
        const auto& st = spec.stages[s];
        const auto& last = ep.frames[ranges[s].last];
        EXPECT_TRUE(goal_reached(st, last.source_pose, last.target_pose)) << spec.task_id;
        if (!st.constraint) continue;
        for (std::size_t i = ranges[s].first; i <= ranges[s].last; ++i) {
          const auto& f = ep.frames[i];
          const double d = translation_distance(f.source_pose, compose(f.target_pose, st.goal));
          if (d > st.constraint->activation_radius) {
            EXPECT_LE(tilt_from_up(f.source_pose), st.constraint->max_tilt);
          }
        }
      }
    }
  }
}

TEST(Sim, CanonicalDemosShareShapeAcrossSeeds) {
  const TaskSpec spec = mug_on_coaster();
  const auto& st = spec.stages[0];
  for (std::uint64_t seed : {1u, 2u}) {
    const DemoEpisode ep = generate_demo(spec, seed);
    const auto range = segment_stages(ep)[0];
    const auto canon = canonicalize(ep, range);
    // The canonical path is the oracle path from its own start.
    const auto path = oracle_path(st, canon.front());
    ASSERT_EQ(path.size() + 1, canon.size());
    for (std::size_t i = 0; i < path.size(); ++i) EXPECT_TRUE(canon[i].isApprox(path[i], 1e-9));
    EXPECT_TRUE(canon.back().isApprox(st.goal, 1e-9));
  }
}

TEST(Sim, DemoVariationBound) {
  for (const auto& spec : task_suite()) {
    for (int s = 0; s < spec.stage_count(); ++s) {
      std::vector<std::vector<Pose>> paths;
      for (std::uint64_t seed = 0; seed < 6; ++seed) {
        const DemoEpisode ep = generate_demo(spec, seed);
        paths.push_back(canonicalize(ep, segment_stages(ep)[s]));
      }
      const double bound = demo_variation_bound(spec, s);
      for (const auto& a : paths) {
        for (const auto& b : paths) {
          for (int k = 0; k <= 10; ++k) {
            const auto ia = static_cast<std::size_t>(k * (a.size() - 1) / 10);
            const auto ib = static_cast<std::size_t>(k * (b.size() - 1) / 10);
            EXPECT_LE(translation_distance(a[ia], b[ib]), bound) << spec.task_id;
          }
        }
      }
    }
  }
}

TEST(Sim, OracleReplaySucceedsEverywhere) {
  for (const auto& spec : task_suite()) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const RolloutResult r = oracle_episode(spec, PerturbationSpec{}, seed);
      EXPECT_TRUE(r.success) << spec.task_id << " seed " << seed << " " << to_string(r.failure_mode);
      EXPECT_EQ(static_cast<int>(r.releases.size()), spec.stage_count());
    }
  }
}

TEST(Sim, SimulatorEquivariance) {
  Rng rng(9);
  const Pose g = oracle::random_pose(rng);
  const TaskSpec spec = pour_water();
  Simulator a(spec, PerturbationSpec{}, 3), b(spec, PerturbationSpec{}, 3, g);
  const auto oa = a.observe(), ob = b.observe();
  EXPECT_TRUE(relative_pose(oa.source_pose, oa.target_pose)
                  .isApprox(relative_pose(ob.source_pose, ob.target_pose), 1e-9));
  EXPECT_TRUE(a.state().grasp_tf.isApprox(b.state().grasp_tf, 1e-9));
  EXPECT_EQ(a.state().gripper, Gripper::kClosed);
}

TEST(Sim, BeginStageWhileHoldingThrows) {
  Simulator s(two_stage_stack(), PerturbationSpec{}, 1);
  EXPECT_THROW(s.begin_stage(1), std::logic_error);
  s.release(0.99);
  EXPECT_NO_THROW(s.begin_stage(1));
  EXPECT_EQ(s.state().source_index, 2);
  EXPECT_EQ(s.trace().releases.size(), 1u);
}

TEST(Sim, SpecJsonRoundTrip) {
  for (const auto& spec : task_suite()) {
    const TaskSpec back = task_spec_from_json(to_json(spec));
    EXPECT_EQ(to_json(back), to_json(spec));
  }
  PerturbationSpec p;
  p.slips.push_back({2.0, Pose::FromTranslation({0.02, 0, 0})});
  p.target_drift = {0.01, 0, 0};
  p.dropout = 0.1;
  EXPECT_EQ(to_json(perturbation_from_json(to_json(p))), to_json(p));
  Json bad = to_json(mug_on_coaster());
  bad["stages"][0]["target"] = 1;
  EXPECT_THROW(task_spec_from_json(bad), std::invalid_argument);
  EXPECT_THROW(task_by_name("juggling"), std::invalid_argument);
}
