#include "so3flow/distributions.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace so3flow {

namespace {

double log_sum_exp(const std::vector<double>& v) {
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

double fisher_exponent(const Mat3& f, const Rotation& r) { return f.cwiseProduct(r.matrix()).sum(); }

Vec3 random_unit(Rng& rng) {
  std::normal_distribution<double> n;
  for (;;) {
    const Vec3 v(n(rng), n(rng), n(rng));
    const double len = v.norm();
    if (len > 1e-12) return v / len;
  }
}

// Orthonormal pair spanning the plane orthogonal to unit vector a.
std::pair<Vec3, Vec3> orthonormal_complement(const Vec3& a) {
  const Vec3 helper = std::abs(a.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  const Vec3 e1 = (helper - helper.dot(a) * a).normalized();
  return {e1, a.cross(e1)};
}

// Inverse-CDF sampler for the rotation angle of an isotropic matrix Fisher
// draw; density on [0, pi] proportional to exp(2 kappa (cos t - 1)) (1 - cos t).
class AngleSampler {
 public:
  explicit AngleSampler(double kappa) : cdf_(kSteps + 1) {
    const double h = std::numbers::pi / kSteps;
    auto density = [&](double t) { return std::exp(2.0 * kappa * (std::cos(t) - 1.0)) * (1.0 - std::cos(t)); };
    cdf_[0] = 0.0;
    double previous = density(0.0);
    for (int i = 1; i <= kSteps; ++i) {
      const double current = density(i * h);
      cdf_[static_cast<std::size_t>(i)] = cdf_[static_cast<std::size_t>(i - 1)] + 0.5 * h * (previous + current);
      previous = current;
    }
  }

  double operator()(Rng& rng) const {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double target = u(rng) * cdf_.back();
    const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), target);
    const auto i = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(it - cdf_.begin(), 1, kSteps));
    const double span = cdf_[i] - cdf_[i - 1];
    const double frac = span > 0.0 ? (target - cdf_[i - 1]) / span : 0.0;
    return (static_cast<double>(i - 1) + frac) * std::numbers::pi / kSteps;
  }

 private:
  static constexpr int kSteps = 1 << 16;
  std::vector<double> cdf_;
};

Rotation sample_cone(const ConeComponent& cone, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  // c1 . axis for a von Mises-Fisher draw on S^2.
  const double v = u(rng);
  const double t = std::clamp(1.0 + std::log(v + (1.0 - v) * std::exp(-2.0 * cone.kappa)) / cone.kappa, -1.0, 1.0);
  const double phi = 2.0 * std::numbers::pi * u(rng);
  const auto [e1, e2] = orthonormal_complement(cone.axis);
  const Vec3 c1 =
      (t * cone.axis + std::sqrt(std::max(0.0, 1.0 - t * t)) * (std::cos(phi) * e1 + std::sin(phi) * e2)).normalized();
  const double psi = 2.0 * std::numbers::pi * u(rng);
  const auto [b1, b2] = orthonormal_complement(c1);
  const Vec3 c2 = std::cos(psi) * b1 + std::sin(psi) * b2;
  Mat3 m;
  m << c1, c2, c1.cross(c2);
  return Rotation::unchecked(m);
}

}  // namespace

double fisher_log_prob(const MatrixFisher& fisher, const Rotation& r) {
  if (!fisher.log_norm) throw std::logic_error("fisher_log_prob: log_norm is not set");
  return fisher_exponent(fisher.f, r) - *fisher.log_norm;
}

double compute_log_norm(const Mat3& f, const SO3Grid& grid) {
  std::vector<double> e(grid.size());
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < grid.size(); ++i) {
    e[i] = fisher_exponent(f, grid.points[i]);
    m = std::max(m, e[i]);
  }
  for (double& x : e) x = std::exp(x - m);
  return m + std::log(grid_mean(e));
}

double isotropic_fisher_log_norm(double kappa) {
  // Z = (1/pi) int_0^pi exp(kappa (1 + 2 cos t)) (1 - cos t) dt, composite Simpson.
  constexpr int n = 200000;
  const double h = std::numbers::pi / n;
  double s = 0.0;
  for (int i = 0; i <= n; ++i) {
    const double t = i * h;
    const double w = (i == 0 || i == n) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
    s += w * std::exp(2.0 * kappa * (std::cos(t) - 1.0)) * (1.0 - std::cos(t));
  }
  return 3.0 * kappa + std::log(s * h / 3.0 / std::numbers::pi);
}

std::string to_string(TargetKind kind) {
  switch (kind) {
    case TargetKind::Peak:
      return "peak";
    case TargetKind::Cube24:
      return "cube24";
    case TargetKind::ConeCyclic:
      return "cone-cyclic";
    case TargetKind::Line3:
      return "line3";
  }
  return "unknown";
}

TargetKind parse_target_kind(const std::string& name) {
  if (name == "peak") return TargetKind::Peak;
  if (name == "cube24") return TargetKind::Cube24;
  if (name == "cone-cyclic" || name == "cone") return TargetKind::ConeCyclic;
  if (name == "line3") return TargetKind::Line3;
  throw std::invalid_argument("unknown target kind '" + name + "' (expected peak, cube24, cone-cyclic or line3)");
}

std::vector<Rotation> octahedral_group() {
  std::vector<Rotation> out;
  const int perms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
  for (const auto& p : perms) {
    for (int signs = 0; signs < 8; ++signs) {
      Mat3 m = Mat3::Zero();
      for (int row = 0; row < 3; ++row) m(row, p[row]) = (signs >> row) & 1 ? -1.0 : 1.0;
      if (m.determinant() > 0) out.push_back(Rotation::unchecked(m));
    }
  }
  return out;
}

TargetSpec make_target(TargetKind kind, double kappa, const Rotation& mode) {
  if (!(kappa > 0.0)) throw std::invalid_argument("target concentration kappa must be > 0");
  TargetSpec t;
  t.kind = kind;
  t.kappa = kappa;
  t.mode = mode;
  const double fisher_norm = isotropic_fisher_log_norm(kappa);
  const double cone_norm = std::log1p(-std::exp(-2.0 * kappa)) - std::log(2.0 * kappa);
  switch (kind) {
    case TargetKind::Peak:
      t.fishers.push_back({kappa * mode.matrix(), fisher_norm});
      break;
    case TargetKind::Cube24:
      for (const Rotation& g : octahedral_group()) t.fishers.push_back({kappa * (mode * g).matrix(), fisher_norm});
      break;
    case TargetKind::ConeCyclic:
      t.cones.push_back({mode.col(2), kappa, cone_norm});
      break;
    case TargetKind::Line3:
      for (int i = 0; i < 3; ++i) t.cones.push_back({mode.col(i), kappa, cone_norm});
      break;
  }
  t.weights.assign(t.component_count(), 1.0 / static_cast<double>(t.component_count()));
  return t;
}

double target_log_prob(const TargetSpec& target, const Rotation& r) {
  std::vector<double> terms;
  terms.reserve(target.component_count());
  std::size_t i = 0;
  for (const MatrixFisher& f : target.fishers) terms.push_back(std::log(target.weights[i++]) + fisher_log_prob(f, r));
  for (const ConeComponent& c : target.cones) {
    terms.push_back(std::log(target.weights[i++]) + c.kappa * (r.col(0).dot(c.axis) - 1.0) - c.log_norm);
  }
  return log_sum_exp(terms);
}

double target_max_log_prob(const TargetSpec& target, const SO3Grid& grid) {
  double m = -std::numeric_limits<double>::infinity();
  for (const Rotation& r : grid.points) m = std::max(m, target_log_prob(target, r));
  return m;
}

Rotation sample_isotropic_fisher(double kappa, Rng& rng) {
  thread_local std::optional<std::pair<double, AngleSampler>> cache;
  if (!cache || cache->first != kappa) cache.emplace(kappa, AngleSampler(kappa));
  const double t = cache->second(rng);
  return Rotation::about_axis(random_unit(rng), t);
}

std::vector<Rotation> target_sample_components(const TargetSpec& target, std::size_t n, Rng& rng) {
  std::optional<AngleSampler> angle;
  if (!target.fishers.empty()) angle.emplace(target.kappa);
  std::discrete_distribution<std::size_t> pick(target.weights.begin(), target.weights.end());
  std::vector<Rotation> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t c = pick(rng);
    if (c < target.fishers.size()) {
      // F = kappa Q: R = Q R_iso with R_iso a draw from kappa I.
      const Rotation q = Rotation::unchecked(target.fishers[c].f / target.kappa);
      const double t = (*angle)(rng);
      out.push_back(q * Rotation::about_axis(random_unit(rng), t));
    } else {
      out.push_back(sample_cone(target.cones[c - target.fishers.size()], rng));
    }
  }
  return out;
}

std::vector<Rotation> target_sample(const TargetSpec& target, std::size_t n, Rng& rng, const SO3Grid& grid) {
  const double log_envelope = target_max_log_prob(target, grid) + std::log(1.05);
  if (std::exp(-log_envelope) < 1e-3) return target_sample_components(target, n, rng);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Rotation> out;
  out.reserve(n);
  while (out.size() < n) {
    const Rotation r = sample_uniform(rng);
    if (std::log(u(rng)) < target_log_prob(target, r) - log_envelope) out.push_back(r);
  }
  return out;
}

double target_entropy(const TargetSpec& target, const SO3Grid& grid) {
  std::vector<double> lp(grid.size());
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < grid.size(); ++i) {
    lp[i] = target_log_prob(target, grid.points[i]);
    m = std::max(m, lp[i]);
  }
  std::vector<double> w(grid.size()), wl(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    w[i] = std::exp(lp[i] - m);
    wl[i] = w[i] * lp[i];
  }
  return -grid_mean(wl) / grid_mean(w);
}

}  // namespace so3flow
