#include "so3flow/so3.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <unordered_map>

namespace so3flow {

namespace {

constexpr int idx(int row, int col) { return 3 * col + row; }

Mat3 skew(const Vec3& v) {
  Mat3 k;
  k << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
       -v.y(), v.x(), 0.0;
  return k;
}

Mat3 align_z(const Vec3& dir) {
  const double c = dir.z();
  if (1.0 + c < 1e-12) {
    return Vec3(1.0, -1.0, -1.0).asDiagonal();
  }
  const Mat3 k = skew(Vec3(-dir.y(), dir.x(), 0.0));
  return Mat3::Identity() + k + k * k / (1.0 + c);
}

Mat3 rot_z(double angle) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  Mat3 r;
  r << c, -s, 0.0,
       s, c, 0.0,
       0.0, 0.0, 1.0;
  return r;
}

// Off-diagonal combinations used by the quaternion extraction branches,
// indexed by the unordered component pair (a < b).
struct LinearTerm {
  int flat[2];
  double coef[2];
};

constexpr LinearTerm pair_term(int a, int b) {
  // w=0, x=1, y=2, z=3
  if (a == 0 && b == 1) return {{idx(2, 1), idx(1, 2)}, {1.0, -1.0}};
  if (a == 0 && b == 2) return {{idx(0, 2), idx(2, 0)}, {1.0, -1.0}};
  if (a == 0 && b == 3) return {{idx(1, 0), idx(0, 1)}, {1.0, -1.0}};
  if (a == 1 && b == 2) return {{idx(0, 1), idx(1, 0)}, {1.0, 1.0}};
  if (a == 1 && b == 3) return {{idx(0, 2), idx(2, 0)}, {1.0, 1.0}};
  return {{idx(1, 2), idx(2, 1)}, {1.0, 1.0}};
}

constexpr std::array<std::array<double, 3>, 4> kPivotSigns = {{
    {1.0, 1.0, 1.0},
    {1.0, -1.0, -1.0},
    {-1.0, 1.0, -1.0},
    {-1.0, -1.0, 1.0},
}};

}  // namespace

Rotation Rotation::from_matrix(const Mat3& m, double tol) {
  const Rotation r(m);
  if (!m.allFinite() || r.orthonormality_error() > tol) {
    throw DomainError("rotation matrix is not orthonormal");
  }
  if (m.determinant() <= 0.0) {
    throw DomainError("rotation matrix has non-positive determinant");
  }
  return r;
}

Rotation Rotation::about_axis(const Vec3& axis, double angle) {
  const Vec3 a = axis.normalized();
  const Mat3 k = skew(a);
  return Rotation(Mat3::Identity() + std::sin(angle) * k + (1.0 - std::cos(angle)) * k * k);
}

double Rotation::orthonormality_error() const {
  return (m_.transpose() * m_ - Mat3::Identity()).cwiseAbs().maxCoeff();
}

UnitQuaternion UnitQuaternion::from_vector(const Vec4& v) {
  const double n = v.norm();
  if (!std::isfinite(n) || std::abs(n - 1.0) > 1e-6) {
    throw DomainError("quaternion norm deviates from 1 by more than 1e-6");
  }
  return UnitQuaternion(v / n);
}

UnitQuaternion UnitQuaternion::canonical() const {
  for (int i = 0; i < 4; ++i) {
    if (q_[i] != 0.0) {
      return q_[i] > 0.0 ? *this : -*this;
    }
  }
  return *this;
}

Rotation quat_to_matrix(const UnitQuaternion& q) {
  double flat[9];
  detail::quat_to_matrix_jacobian(q.coeffs().data(), flat, nullptr);
  return Rotation::unchecked(detail::unflatten(flat));
}

UnitQuaternion matrix_to_quat(const Rotation& r) {
  if (r.orthonormality_error() > 1e-6) {
    throw DomainError("matrix_to_quat: input is not orthonormal");
  }
  const detail::Flat9 flat = detail::flatten(r.matrix());
  Vec4 q;
  detail::matrix_to_quat_jacobian(flat.data(), q.data(), nullptr);
  return UnitQuaternion::unchecked(q);
}

double geodesic_distance(const Rotation& a, const Rotation& b) {
  const Mat3 m = a.matrix().transpose() * b.matrix();
  const double cos_angle = 0.5 * (m.trace() - 1.0);
  const Vec3 axis(m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1));
  const double sin_angle = 0.5 * axis.norm();
  return std::atan2(sin_angle, std::clamp(cos_angle, -1.0, 1.0));
}

Rotation sample_uniform(Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (;;) {
    Vec4 v(normal(rng), normal(rng), normal(rng), normal(rng));
    const double n = v.norm();
    if (n > 1e-12) {
      return quat_to_matrix(UnitQuaternion::unchecked(v / n));
    }
  }
}

Rotation hopf_compose(const Vec3& dir, double tilt) {
  return Rotation::unchecked(align_z(dir) * rot_z(tilt));
}

std::pair<Vec3, double> hopf_decompose(const Rotation& r) {
  const Vec3 dir = r.col(2);
  const Mat3 residual = align_z(dir).transpose() * r.matrix();
  return {dir, std::atan2(residual(1, 0), residual(0, 0))};
}

SO3Grid fibonacci_hopf_grid(int n_base, int n_fiber) {
  if (n_base < 16 || n_fiber < 8) {
    throw std::invalid_argument("fibonacci_hopf_grid requires n_base >= 16 and n_fiber >= 8");
  }
  constexpr double kGoldenAngle = std::numbers::pi * (3.0 - 2.23606797749978969641);
  SO3Grid grid;
  grid.points.reserve(static_cast<std::size_t>(n_base) * static_cast<std::size_t>(n_fiber));
  for (int i = 0; i < n_base; ++i) {
    const double z = 1.0 - (2.0 * i + 1.0) / n_base;
    const double rho = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double phi = kGoldenAngle * i;
    const Vec3 dir(rho * std::cos(phi), rho * std::sin(phi), z);
    const Mat3 align = align_z(dir);
    // Fiber phase offset varies per base point so fibers do not line up.
    const double offset = std::fmod(i * std::numbers::sqrt2, 1.0);
    for (int j = 0; j < n_fiber; ++j) {
      const double tilt = 2.0 * std::numbers::pi * (j + offset) / n_fiber;
      grid.points.push_back(Rotation::unchecked(align * rot_z(tilt)));
    }
  }
  grid.weight = 1.0 / static_cast<double>(grid.points.size());
  return grid;
}

SO3Grid grid_with_size(std::size_t n) {
  const double fiber = std::round(std::cbrt(std::numbers::pi * static_cast<double>(n)));
  const int n_fiber = std::max(8, static_cast<int>(fiber));
  const int n_base = std::max(16, static_cast<int>(std::round(static_cast<double>(n) / n_fiber)));
  return fibonacci_hopf_grid(n_base, n_fiber);
}

double grid_mean(std::span<const double> values) {
  // Pairwise summation keeps the rounding error at O(log N).
  const std::function<double(std::size_t, std::size_t)> sum = [&](std::size_t lo, std::size_t hi) {
    if (hi - lo <= 256) {
      double s = 0.0;
      for (std::size_t i = lo; i < hi; ++i) s += values[i];
      return s;
    }
    const std::size_t mid = lo + (hi - lo) / 2;
    return sum(lo, mid) + sum(mid, hi);
  };
  if (values.empty()) return 0.0;
  return sum(0, values.size()) / static_cast<double>(values.size());
}

double grid_mean(const SO3Grid& grid, const std::function<double(const Rotation&)>& f) {
  std::vector<double> values;
  values.reserve(grid.size());
  for (const Rotation& r : grid.points) values.push_back(f(r));
  return grid_mean(values);
}

std::vector<double> nearest_neighbor_distances(const SO3Grid& grid) {
  const std::size_t n = grid.size();
  std::vector<Vec4> quats;
  quats.reserve(n);
  for (const Rotation& r : grid.points) quats.push_back(matrix_to_quat(r).coeffs());

  // Expected nearest-neighbour angle scales as (8 pi^2 / N)^(1/3); quaternion
  // chord length is about half the angle.
  const double spacing = std::cbrt(8.0 * std::numbers::pi * std::numbers::pi / static_cast<double>(n));
  const double cell = spacing;
  auto key_of = [cell](const Vec4& q, const std::array<int, 4>& shift) {
    std::uint64_t key = 0;
    for (int k = 0; k < 4; ++k) {
      const auto c = static_cast<std::int64_t>(std::floor(q[k] / cell)) + shift[k] + 32768;
      key = (key << 16) | static_cast<std::uint64_t>(c & 0xffff);
    }
    return key;
  };
  std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> cells;
  cells.reserve(4 * n);
  for (std::size_t i = 0; i < n; ++i) {
    cells[key_of(quats[i], {0, 0, 0, 0})].push_back(static_cast<std::uint32_t>(2 * i));
    cells[key_of(-quats[i], {0, 0, 0, 0})].push_back(static_cast<std::uint32_t>(2 * i + 1));
  }

  std::vector<double> result(n, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < n; ++i) {
    double best_chord = std::numeric_limits<double>::infinity();
    std::array<int, 4> shift{};
    for (shift[0] = -1; shift[0] <= 1; ++shift[0])
      for (shift[1] = -1; shift[1] <= 1; ++shift[1])
        for (shift[2] = -1; shift[2] <= 1; ++shift[2])
          for (shift[3] = -1; shift[3] <= 1; ++shift[3]) {
            const auto it = cells.find(key_of(quats[i], shift));
            if (it == cells.end()) continue;
            for (const std::uint32_t code : it->second) {
              const std::size_t j = code / 2;
              if (j == i) continue;
              const Vec4 other = (code % 2 == 0) ? quats[j] : Vec4(-quats[j]);
              best_chord = std::min(best_chord, (quats[i] - other).norm());
            }
          }
    if (!(best_chord < cell)) {
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        best_chord = std::min({best_chord, (quats[i] - quats[j]).norm(), (quats[i] + quats[j]).norm()});
      }
    }
    result[i] = 4.0 * std::asin(std::min(1.0, 0.5 * best_chord));
  }
  return result;
}

namespace detail {

Flat9 flatten(const Mat3& m) {
  Flat9 f;
  for (int c = 0; c < 3; ++c)
    for (int r = 0; r < 3; ++r) f[idx(r, c)] = m(r, c);
  return f;
}

Mat3 unflatten(const double* flat) {
  Mat3 m;
  for (int c = 0; c < 3; ++c)
    for (int r = 0; r < 3; ++r) m(r, c) = flat[idx(r, c)];
  return m;
}

void quat_to_matrix_jacobian(const double* q, double* flat_out, double* jac_9x4) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  flat_out[idx(0, 0)] = 1.0 - 2.0 * (y * y + z * z);
  flat_out[idx(0, 1)] = 2.0 * (x * y - w * z);
  flat_out[idx(0, 2)] = 2.0 * (x * z + w * y);
  flat_out[idx(1, 0)] = 2.0 * (x * y + w * z);
  flat_out[idx(1, 1)] = 1.0 - 2.0 * (x * x + z * z);
  flat_out[idx(1, 2)] = 2.0 * (y * z - w * x);
  flat_out[idx(2, 0)] = 2.0 * (x * z - w * y);
  flat_out[idx(2, 1)] = 2.0 * (y * z + w * x);
  flat_out[idx(2, 2)] = 1.0 - 2.0 * (x * x + y * y);
  if (jac_9x4 == nullptr) return;

  auto set = [jac_9x4](int row, int col, double dw, double dx, double dy, double dz) {
    double* j = jac_9x4 + 4 * idx(row, col);
    j[0] = dw;
    j[1] = dx;
    j[2] = dy;
    j[3] = dz;
  };
  set(0, 0, 0.0, 0.0, -4.0 * y, -4.0 * z);
  set(0, 1, -2.0 * z, 2.0 * y, 2.0 * x, -2.0 * w);
  set(0, 2, 2.0 * y, 2.0 * z, 2.0 * w, 2.0 * x);
  set(1, 0, 2.0 * z, 2.0 * y, 2.0 * x, 2.0 * w);
  set(1, 1, 0.0, -4.0 * x, 0.0, -4.0 * z);
  set(1, 2, -2.0 * x, -2.0 * w, 2.0 * z, 2.0 * y);
  set(2, 0, -2.0 * y, 2.0 * z, -2.0 * w, 2.0 * x);
  set(2, 1, 2.0 * x, 2.0 * w, 2.0 * z, 2.0 * y);
  set(2, 2, 0.0, -4.0 * x, -4.0 * y, 0.0);
}

void matrix_to_quat_jacobian(const double* flat, double* q_out, double* jac_4x9) {
  const double d[3] = {flat[idx(0, 0)], flat[idx(1, 1)], flat[idx(2, 2)]};
  int branch = 0;
  double pivot = -std::numeric_limits<double>::infinity();
  for (int b = 0; b < 4; ++b) {
    const double p = 1.0 + kPivotSigns[b][0] * d[0] + kPivotSigns[b][1] * d[1] + kPivotSigns[b][2] * d[2];
    if (p > pivot) {
      pivot = p;
      branch = b;
    }
  }
  const double s = 2.0 * std::sqrt(pivot);
  if (jac_4x9 != nullptr) std::fill(jac_4x9, jac_4x9 + 36, 0.0);

  for (int j = 0; j < 4; ++j) {
    if (j == branch) {
      q_out[j] = 0.25 * s;
      if (jac_4x9 != nullptr) {
        for (int k = 0; k < 3; ++k) jac_4x9[9 * j + idx(k, k)] = kPivotSigns[branch][k] / (2.0 * s);
      }
      continue;
    }
    const LinearTerm term = pair_term(std::min(j, branch), std::max(j, branch));
    const double a = term.coef[0] * flat[term.flat[0]] + term.coef[1] * flat[term.flat[1]];
    q_out[j] = a / s;
    if (jac_4x9 != nullptr) {
      double* row = jac_4x9 + 9 * j;
      row[term.flat[0]] += term.coef[0] / s;
      row[term.flat[1]] += term.coef[1] / s;
      const double dp_scale = -2.0 * a / (s * s * s);
      for (int k = 0; k < 3; ++k) row[idx(k, k)] += dp_scale * kPivotSigns[branch][k];
    }
  }

  for (int i = 0; i < 4; ++i) {
    if (q_out[i] == 0.0) continue;
    if (q_out[i] < 0.0) {
      for (int k = 0; k < 4; ++k) q_out[k] = -q_out[k];
      if (jac_4x9 != nullptr) {
        for (int k = 0; k < 36; ++k) jac_4x9[k] = -jac_4x9[k];
      }
    }
    break;
  }
}

}  // namespace detail

}  // namespace so3flow
