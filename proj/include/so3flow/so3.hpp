#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

namespace so3flow {

using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Rng = std::mt19937_64;

/// Raised when an input lies outside the domain of an operation
/// (non-orthonormal matrix, non-unit quaternion, degenerate geometry).
class DomainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/**
 * @brief Element of SO(3) stored as a 3x3 matrix with columns c1, c2, c3.
 *
 * Construction through from_matrix() validates orthonormality and a positive
 * determinant; unchecked() is reserved for values produced by exact
 * constructions inside the library.
 */
class Rotation {
 public:
  Rotation() : m_(Mat3::Identity()) {}

  static Rotation from_matrix(const Mat3& m, double tol = 1e-6);
  static Rotation unchecked(const Mat3& m) { return Rotation(m); }
  static Rotation identity() { return Rotation(); }
  /// Rotation by `angle` radians about a unit axis.
  static Rotation about_axis(const Vec3& axis, double angle);

  const Mat3& matrix() const { return m_; }
  Vec3 col(int i) const { return m_.col(i); }

  Rotation operator*(const Rotation& other) const { return Rotation(m_ * other.m_); }
  Rotation transpose() const { return Rotation(m_.transpose()); }

  /// Largest entry of |R^T R - I|.
  double orthonormality_error() const;

 private:
  explicit Rotation(const Mat3& m) : m_(m) {}
  Mat3 m_;
};

/// Unit quaternion (w, x, y, z); q and -q denote the same rotation.
class UnitQuaternion {
 public:
  UnitQuaternion() : q_(1.0, 0.0, 0.0, 0.0) {}

  /// Accepts vectors whose norm is within 1e-6 of one and renormalizes them.
  static UnitQuaternion from_vector(const Vec4& v);
  static UnitQuaternion unchecked(const Vec4& v) { return UnitQuaternion(v); }

  const Vec4& coeffs() const { return q_; }
  double w() const { return q_[0]; }
  double x() const { return q_[1]; }
  double y() const { return q_[2]; }
  double z() const { return q_[3]; }

  UnitQuaternion operator-() const { return UnitQuaternion(-q_); }
  /// Sign chosen so the first nonzero coordinate is positive.
  UnitQuaternion canonical() const;

 private:
  explicit UnitQuaternion(const Vec4& v) : q_(v) {}
  Vec4 q_;
};

Rotation quat_to_matrix(const UnitQuaternion& q);
UnitQuaternion matrix_to_quat(const Rotation& r);

/// Geodesic (angular) distance in radians, in [0, pi].
double geodesic_distance(const Rotation& a, const Rotation& b);

/// Haar-uniform rotation from four normalized standard normals.
Rotation sample_uniform(Rng& rng);

// Hopf coordinates: dir = R e_z, tilt = angle of the residual rotation about
// e_z after aligning e_z with dir by the minimal rotation.
Rotation hopf_compose(const Vec3& dir, double tilt);
std::pair<Vec3, double> hopf_decompose(const Rotation& r);

/// Near-equivolumetric point set with uniform probability weights.
struct SO3Grid {
  std::vector<Rotation> points;
  double weight = 0.0;

  std::size_t size() const { return points.size(); }
};

SO3Grid fibonacci_hopf_grid(int n_base, int n_fiber);
/// Fibonacci-Hopf grid with about `n` points and balanced base/fiber spacing.
SO3Grid grid_with_size(std::size_t n);

/// Grid average of precomputed per-point values: (sum f_i) / N.
double grid_mean(std::span<const double> values);
double grid_mean(const SO3Grid& grid, const std::function<double(const Rotation&)>& f);

/// Geodesic distance from each grid point to its nearest neighbour
/// (spatial hashing of quaternions in R^4).
std::vector<double> nearest_neighbor_distances(const SO3Grid& grid);

namespace detail {

// Rotations are flattened column by column: index = 3 * col + row.
using Flat9 = Eigen::Matrix<double, 9, 1>;

Flat9 flatten(const Mat3& m);
Mat3 unflatten(const double* flat);

/// quat_to_matrix on a raw 4-vector (no normalization) with d(flat R)/dq.
void quat_to_matrix_jacobian(const double* q, double* flat_out, double* jac_9x4);
/// matrix_to_quat on a flat matrix (no validation) with dq/d(flat R).
void matrix_to_quat_jacobian(const double* flat, double* q_out, double* jac_4x9);

}  // namespace detail

}  // namespace so3flow
