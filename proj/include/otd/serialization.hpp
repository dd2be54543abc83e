#pragma once

#include <json.hpp>

#include <Eigen/Core>

#include <filesystem>
#include <string>

#include "otd/geometry.hpp"

namespace otd {

using Json = nlohmann::ordered_json;

inline Json pose_to_json(const Pose& p) {
  const auto t = p.tuple();
  return Json(std::vector<double>(t.begin(), t.end()));
}

inline Pose pose_from_json(const Json& j) {
  const auto v = j.get<std::vector<double>>();
  return Pose::FromTuple(v);
}

template <typename Derived>
Json vector_to_json(const Eigen::MatrixBase<Derived>& v) {
  return Json(std::vector<double>(v.derived().data(), v.derived().data() + v.size()));
}

inline Eigen::VectorXd vector_from_json(const Json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

/// Reads a whole JSON document; throws std::runtime_error naming the path.
Json read_json_file(const std::filesystem::path& path);

/// Writes `j` with fixed indentation and a trailing newline.
void write_json_file(const std::filesystem::path& path, const Json& j);

}  // namespace otd
