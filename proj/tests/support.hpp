#pragma once

#include "so3flow/so3.hpp"

#include <cmath>
#include <functional>

namespace so3flow::oracle {

/// Rotation vector v with exp([v]x) = r, for |v| < pi.
inline Vec3 log_map(const Rotation& r) {
  const Vec4 q = matrix_to_quat(r).coeffs();
  const Vec3 v = q.tail<3>();
  const double s = v.norm();
  if (s < 1e-300) return Vec3::Zero();
  const double w = q[0] >= 0 ? q[0] : -q[0];
  const double sign = q[0] >= 0 ? 1.0 : -1.0;
  return sign * 2.0 * std::atan2(s, w) / s * v;
}

/**
 * log|det| of the differential of f at r, measured in body-frame tangent
 * coordinates R exp([v]x) on both sides (the Haar volume form) by central
 * differences.
 */
inline double tangent_log_det(const std::function<Rotation(const Rotation&)>& f, const Rotation& r,
                              double h = 1e-5) {
  const Rotation fr = f(r);
  Mat3 j;
  for (int k = 0; k < 3; ++k) {
    const Rotation plus = f(r * Rotation::about_axis(Vec3::Unit(k), h));
    const Rotation minus = f(r * Rotation::about_axis(Vec3::Unit(k), -h));
    j.col(k) = (log_map(fr.transpose() * plus) - log_map(fr.transpose() * minus)) / (2 * h);
  }
  return std::log(std::abs(j.determinant()));
}

}  // namespace so3flow::oracle
