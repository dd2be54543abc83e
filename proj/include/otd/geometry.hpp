#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <stdexcept>

namespace otd {

/// Rigid transform stored as a unit quaternion and a translation.
///
/// The quaternion is kept normalized with a canonical sign (w >= 0, and when
/// w == 0 the first nonzero of x, y, z is positive) so that two poses
/// describing the same rotation compare equal component-wise.
template <typename Scalar>
class PoseT {
 public:
  using Quaternion = Eigen::Quaternion<Scalar>;
  using Vector3 = Eigen::Matrix<Scalar, 3, 1>;
  using Matrix3 = Eigen::Matrix<Scalar, 3, 3>;
  using Matrix4 = Eigen::Matrix<Scalar, 4, 4>;

  PoseT() : rotation_(Quaternion::Identity()), translation_(Vector3::Zero()) {}

  PoseT(const Quaternion& rotation, const Vector3& translation)
      : rotation_(canonical(rotation)), translation_(translation) {}

  PoseT(const Matrix3& rotation, const Vector3& translation)
      : PoseT(Quaternion(rotation), translation) {}

  static PoseT Identity() { return PoseT(); }

  static PoseT FromTranslation(const Vector3& t) {
    return PoseT(Quaternion::Identity(), t);
  }

  static PoseT FromAxisAngle(const Vector3& axis, Scalar angle,
                             const Vector3& t = Vector3::Zero()) {
    return PoseT(Quaternion(Eigen::AngleAxis<Scalar>(angle, axis.normalized())), t);
  }

  static PoseT FromMatrix(const Matrix4& m) {
    return PoseT(Matrix3(m.template topLeftCorner<3, 3>()),
                 Vector3(m.template topRightCorner<3, 1>()));
  }

  /// [qw, qx, qy, qz, tx, ty, tz]
  static PoseT FromTuple(std::span<const Scalar> v) {
    if (v.size() != 7) throw std::invalid_argument("pose tuple must have 7 entries");
    return PoseT(Quaternion(v[0], v[1], v[2], v[3]), Vector3(v[4], v[5], v[6]));
  }

  std::array<Scalar, 7> tuple() const {
    return {rotation_.w(), rotation_.x(), rotation_.y(), rotation_.z(),
            translation_.x(), translation_.y(), translation_.z()};
  }

  const Quaternion& rotation() const { return rotation_; }
  const Vector3& translation() const { return translation_; }
  Matrix3 rotationMatrix() const { return rotation_.toRotationMatrix(); }

  Matrix4 matrix() const {
    Matrix4 m = Matrix4::Identity();
    m.template topLeftCorner<3, 3>() = rotationMatrix();
    m.template topRightCorner<3, 1>() = translation_;
    return m;
  }

  Vector3 operator*(const Vector3& p) const { return rotation_ * p + translation_; }

  template <typename Other>
  PoseT<Other> cast() const {
    return PoseT<Other>(rotation_.template cast<Other>(), translation_.template cast<Other>());
  }

  bool isApprox(const PoseT& o, Scalar tol) const {
    return (rotation_.coeffs() - o.rotation_.coeffs()).cwiseAbs().maxCoeff() <= tol &&
           (translation_ - o.translation_).cwiseAbs().maxCoeff() <= tol;
  }

 private:
  static Quaternion canonical(Quaternion q) {
    const Scalar n = q.norm();
    if (!(n > Scalar(0)) || !std::isfinite(n)) {
      throw std::invalid_argument("pose quaternion must be finite and nonzero");
    }
    q.coeffs() /= n;
    bool flip = q.w() < Scalar(0);
    if (q.w() == Scalar(0)) {
      for (Scalar c : {q.x(), q.y(), q.z()}) {
        if (c != Scalar(0)) {
          flip = c < Scalar(0);
          break;
        }
      }
    }
    if (flip) q.coeffs() = -q.coeffs();
    return q;
  }

  Quaternion rotation_;
  Vector3 translation_;
};

using Pose = PoseT<double>;

/// Translation followed by the first two rotation-matrix columns.
template <typename Scalar>
using PoseFeatureT = Eigen::Matrix<Scalar, 9, 1>;
using PoseFeature = PoseFeatureT<double>;

inline constexpr int kPoseFeatureDim = 9;

class InvalidFeature : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// a applied after b.
template <typename Scalar>
PoseT<Scalar> compose(const PoseT<Scalar>& a, const PoseT<Scalar>& b) {
  return PoseT<Scalar>(a.rotation() * b.rotation(), a.rotation() * b.translation() + a.translation());
}

template <typename Scalar>
PoseT<Scalar> inverse(const PoseT<Scalar>& p) {
  const auto qi = p.rotation().conjugate();
  return PoseT<Scalar>(qi, -(qi * p.translation()));
}

/// Pose of `source_world` expressed in the frame of `target_world`.
template <typename Scalar>
PoseT<Scalar> relative_pose(const PoseT<Scalar>& source_world, const PoseT<Scalar>& target_world) {
  return compose(inverse(target_world), source_world);
}

/// Angle of the rotation taking a to b, in [0, pi].
template <typename Scalar>
Scalar rotation_geodesic(const PoseT<Scalar>& a, const PoseT<Scalar>& b) {
  const Scalar d = std::abs(a.rotation().dot(b.rotation()));
  return Scalar(2) * std::acos(std::clamp(d, Scalar(0), Scalar(1)));
}

template <typename Scalar>
Scalar translation_distance(const PoseT<Scalar>& a, const PoseT<Scalar>& b) {
  return (a.translation() - b.translation()).norm();
}

/// Angle between the pose's local z axis and world up.
template <typename Scalar>
Scalar tilt_from_up(const PoseT<Scalar>& p) {
  const Scalar c = (p.rotation() * Eigen::Matrix<Scalar, 3, 1>::UnitZ()).z();
  return std::acos(std::clamp(c, Scalar(-1), Scalar(1)));
}

template <typename Scalar>
PoseFeatureT<Scalar> pose_to_feature(const PoseT<Scalar>& p) {
  PoseFeatureT<Scalar> f;
  const auto r = p.rotationMatrix();
  f.template head<3>() = p.translation();
  f.template segment<3>(3) = r.col(0);
  f.template segment<3>(6) = r.col(1);
  return f;
}

/// Gram-Schmidt on the two encoded columns; throws InvalidFeature when they
/// are (near) zero or parallel.
template <typename Derived>
PoseT<typename Derived::Scalar> feature_to_pose(const Eigen::MatrixBase<Derived>& f) {
  using Scalar = typename Derived::Scalar;
  using Vector3 = Eigen::Matrix<Scalar, 3, 1>;
  if (f.size() != kPoseFeatureDim) throw InvalidFeature("pose feature must have 9 entries");
  if (!f.allFinite()) throw InvalidFeature("pose feature is not finite");
  constexpr Scalar kMinNorm = Scalar(1e-9);
  const Vector3 a = f.template segment<3>(3);
  const Vector3 b = f.template segment<3>(6);
  const Scalar na = a.norm();
  if (na < kMinNorm) throw InvalidFeature("first rotation column is degenerate");
  const Vector3 c0 = a / na;
  const Vector3 b_perp = b - c0.dot(b) * c0;
  const Scalar nb = b_perp.norm();
  if (nb < kMinNorm * std::max(Scalar(1), b.norm())) {
    throw InvalidFeature("rotation columns are parallel or degenerate");
  }
  const Vector3 c1 = b_perp / nb;
  Eigen::Matrix<Scalar, 3, 3> r;
  r.col(0) = c0;
  r.col(1) = c1;
  r.col(2) = c0.cross(c1);
  return PoseT<Scalar>(r, Vector3(f.template head<3>()));
}

/// Linear in translation, slerp along the shorter arc in rotation.
template <typename Scalar>
PoseT<Scalar> interpolate(const PoseT<Scalar>& a, const PoseT<Scalar>& b, Scalar s) {
  if (!(s >= Scalar(0) && s <= Scalar(1))) {
    throw std::invalid_argument("interpolation parameter must lie in [0, 1]");
  }
  if (s == Scalar(0)) return a;
  if (s == Scalar(1)) return b;
  return PoseT<Scalar>(a.rotation().slerp(s, b.rotation()),
                       (Scalar(1) - s) * a.translation() + s * b.translation());
}

}  // namespace otd
