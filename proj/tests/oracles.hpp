#pragma once

// Independent reference implementations used by the unit tests and the
// acceptance binary.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "otd/demo.hpp"
#include "otd/geometry.hpp"
#include "otd/nn.hpp"
#include "otd/random.hpp"

namespace otd::oracle {

using Mat4 = Eigen::Matrix4d;

inline Mat4 homogeneous(const Pose& p) {
  // Built from the quaternion by hand rather than through Pose::matrix().
  const double w = p.rotation().w(), x = p.rotation().x(), y = p.rotation().y(), z = p.rotation().z();
  Mat4 m = Mat4::Identity();
  m(0, 0) = 1 - 2 * (y * y + z * z);
  m(0, 1) = 2 * (x * y - w * z);
  m(0, 2) = 2 * (x * z + w * y);
  m(1, 0) = 2 * (x * y + w * z);
  m(1, 1) = 1 - 2 * (x * x + z * z);
  m(1, 2) = 2 * (y * z - w * x);
  m(2, 0) = 2 * (x * z - w * y);
  m(2, 1) = 2 * (y * z + w * x);
  m(2, 2) = 1 - 2 * (x * x + y * y);
  m.topRightCorner<3, 1>() = p.translation();
  return m;
}

inline double matrix_gap(const Pose& p, const Mat4& m) { return (homogeneous(p) - m).cwiseAbs().maxCoeff(); }

inline Pose random_pose(Rng& rng, double scale = 1.0) {
  Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  return Pose(q, scale * Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()));
}

/// Direct replay of the keyframe rule, written frame by frame with explicit
/// searches instead of a running state.
inline std::vector<std::size_t> keyframes(const std::vector<Pose>& traj, const KeyframeConfig& cfg, double dt) {
  const std::size_t n = traj.size();
  auto disp = [&](std::size_t j) -> Eigen::Vector3d { return traj[j].translation() - traj[j - 1].translation(); };
  auto moving = [&](std::size_t j) { return disp(j).norm() / dt > cfg.velocity_epsilon; };
  auto reversal = [&](std::size_t i) {
    if (!moving(i + 1)) return false;
    for (std::size_t k = i; k >= 1; --k) {
      if (moving(k)) return disp(i + 1).dot(disp(k)) < 0.0;
    }
    return false;
  };
  auto same = [](const Pose& a, const Pose& b) {
    const auto ta = a.tuple(), tb = b.tuple();
    for (int i = 0; i < 7; ++i) {
      if (std::abs(ta[i] - tb[i]) > 1e-12) return false;
    }
    return true;
  };
  std::vector<std::size_t> out{0};
  for (std::size_t i = 1; i + 1 < n; ++i) {
    const Pose& prev = traj[out.back()];
    const double dtrans = (traj[i].translation() - prev.translation()).norm();
    const Eigen::Matrix3d rel = prev.rotationMatrix().transpose() * traj[i].rotationMatrix();
    const double drot = std::acos(std::clamp((rel.trace() - 1.0) / 2.0, -1.0, 1.0));
    const bool rule_a = reversal(i);
    const bool rule_b = dtrans > cfg.translation_threshold || drot > cfg.rotation_threshold;
    if ((rule_a || rule_b) && !same(traj[i], prev)) out.push_back(i);
  }
  if (out.size() > 1 && same(traj[n - 1], traj[out.back()])) {
    out.back() = n - 1;
  } else {
    out.push_back(n - 1);
  }
  return out;
}

/// Random trajectory mixing straight runs, reversals, holds, rotations and
/// duplicated frames.
inline std::vector<Pose> random_trajectory(Rng& rng) {
  const std::size_t n = 2 + rng.below(40);
  std::vector<Pose> traj;
  Pose p = random_pose(rng, 0.2);
  Eigen::Vector3d v = 0.02 * Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
  for (std::size_t i = 0; i < n; ++i) {
    traj.push_back(p);
    const double u = rng.uniform();
    if (u < 0.15) v = -v;
    else if (u < 0.25) v = 0.02 * Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
    if (rng.uniform() < 0.2) continue;  // hold
    const Eigen::Quaterniond dq(Eigen::AngleAxisd(0.1 * rng.normal(), Eigen::Vector3d::UnitZ()));
    p = Pose(dq * p.rotation(), p.translation() + v);
  }
  return traj;
}

/// Max relative error between backward() and central differences of
/// sum(dy .* forward(x)) over `probes` random parameter and input entries.
struct GradCheck {
  double max_rel_error = 0.0;
  int probes = 0;
};

inline GradCheck check_gradients(nn::MlpParams params, const Eigen::MatrixXd& x, std::uint64_t seed, int probes,
                                 double h = 1e-5) {
  Rng rng(seed);
  Eigen::MatrixXd dy(params.spec().output_dim(), x.cols());
  for (Eigen::Index i = 0; i < dy.size(); ++i) dy.data()[i] = rng.normal();
  nn::MlpCache cache;
  nn::forward(params, x, &cache);
  const nn::MlpGradients g = nn::backward(params, cache, dy);
  auto loss = [&](const nn::MlpParams& p, const Eigen::MatrixXd& in) {
    return (nn::forward(p, in).array() * dy.array()).sum();
  };
  auto rel = [](double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); };
  GradCheck out;
  for (int k = 0; k < probes; ++k) {
    double analytic, numeric;
    if (k % 4 != 3) {
      const Eigen::Index i = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(params.size())));
      const double v = params.values()[i];
      params.values()[i] = v + h;
      const double up = loss(params, x);
      params.values()[i] = v - h;
      const double down = loss(params, x);
      params.values()[i] = v;
      analytic = g.params[i];
      numeric = (up - down) / (2 * h);
    } else {
      const Eigen::Index i = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(x.size())));
      Eigen::MatrixXd xp = x;
      xp.data()[i] += h;
      const double up = loss(params, xp);
      xp.data()[i] -= 2 * h;
      const double down = loss(params, xp);
      analytic = g.input.data()[i];
      numeric = (up - down) / (2 * h);
    }
    out.max_rel_error = std::max(out.max_rel_error, rel(analytic, numeric));
    ++out.probes;
  }
  return out;
}

/// Mann-Whitney AUC with ties counted half.
inline double auc(const std::vector<double>& pos, const std::vector<double>& neg) {
  if (pos.empty() || neg.empty()) return 0.0;
  double wins = 0.0;
  for (double p : pos) {
    for (double n : neg) wins += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
  }
  return wins / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

}  // namespace otd::oracle
