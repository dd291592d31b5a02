#include "so3flow/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace so3flow {

namespace {

constexpr double kDeg = 180.0 / std::numbers::pi;

// A rotation taking body x to `a`.
Rotation align_x(const Vec3& a) {
  const Vec3 helper = std::abs(a.z()) < 0.9 ? Vec3::UnitZ() : Vec3::UnitY();
  const Vec3 y = helper.cross(a).normalized();
  Mat3 m;
  m << a, y, a.cross(y);
  return Rotation::unchecked(m);
}

double min_distance(const Rotation& r, const SymmetrySet& gt) {
  double best = std::numeric_limits<double>::infinity();
  for (const Rotation& g : gt.rotations) best = std::min(best, geodesic_distance(r, g));
  return best;
}

}  // namespace

double avg_log_likelihood(const FlowModel& model, std::span<const Rotation> xs, const ad::Tensor* cond,
                          int threads) {
  if (xs.empty()) throw std::invalid_argument("avg_log_likelihood: empty test set");
  const std::vector<double> lp = model.log_prob(xs, cond, threads);
  double s = 0.0;
  for (double v : lp) s += v;
  return s / static_cast<double>(lp.size());
}

SymmetrySet SymmetrySet::finite(const Rotation& base, std::span<const Rotation> group) {
  SymmetrySet s;
  for (const Rotation& g : group) s.rotations.push_back(base * g);
  return s;
}

SymmetrySet SymmetrySet::fiber(const Rotation& base, const Vec3& body_axis) {
  SymmetrySet s;
  s.discretization_deg = 1.0;
  for (int k = 0; k < 360; ++k) s.rotations.push_back(base * Rotation::about_axis(body_axis, k / kDeg));
  return s;
}

SymmetrySet SymmetrySet::merged(const SymmetrySet& other) const {
  SymmetrySet s = *this;
  s.rotations.insert(s.rotations.end(), other.rotations.begin(), other.rotations.end());
  s.discretization_deg = std::max(discretization_deg, other.discretization_deg);
  return s;
}

double SymmetrySet::closure_error() const {
  double worst = 0.0;
  for (const Rotation& a : rotations) {
    for (const Rotation& b : rotations) {
      const Rotation ab = a * b.transpose();
      for (const Rotation& c : rotations) worst = std::max(worst, min_distance(ab * c, *this));
    }
  }
  return worst;
}

SymmetrySet symmetry_set_for(const TargetSpec& target) {
  switch (target.kind) {
    case TargetKind::Peak:
      return SymmetrySet{{target.mode}, 0.0};
    case TargetKind::Cube24: {
      const std::vector<Rotation> g = octahedral_group();
      return SymmetrySet::finite(target.mode, g);
    }
    case TargetKind::ConeCyclic:
    case TargetKind::Line3: {
      SymmetrySet s;
      for (const ConeComponent& c : target.cones) s = s.merged(SymmetrySet::fiber(align_x(c.axis), Vec3::UnitX()));
      return s;
    }
  }
  throw std::logic_error("symmetry_set_for: unknown target kind");
}

double spread_deg(std::span<const Rotation> samples, const SymmetrySet& gt) {
  if (samples.empty()) throw std::invalid_argument("spread: no samples");
  if (gt.rotations.empty()) throw std::invalid_argument("spread: empty ground-truth set");
  double s = 0.0;
  for (const Rotation& r : samples) s += min_distance(r, gt);
  return kDeg * s / static_cast<double>(samples.size());
}

Estimate mc_entropy(const FlowModel& model, std::size_t n, Rng& rng, const ad::Tensor* cond, double tol,
                    int threads) {
  if (n < 2) throw std::invalid_argument("mc_entropy: n must be >= 2");
  const std::vector<FlowSample> samples = model.sample(n, rng, cond, tol, threads);
  double mean = 0.0;
  for (const FlowSample& s : samples) mean += s.log_prob;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (const FlowSample& s : samples) var += (s.log_prob - mean) * (s.log_prob - mean);
  var /= static_cast<double>(n - 1);
  return {-mean, std::sqrt(var / static_cast<double>(n))};
}

double normalization_audit(const FlowModel& model, const SO3Grid& grid, const ad::Tensor* cond, int threads) {
  if (grid.size() < 100000) throw std::invalid_argument("normalization_audit: grid needs >= 1e5 points");
  std::vector<double> p = model.log_prob(grid.points, cond, threads);
  for (double& v : p) v = std::exp(v);
  return grid_mean(p);
}

double quadrature_entropy(const FlowModel& model, const SO3Grid& grid, const ad::Tensor* cond, int threads) {
  const std::vector<double> lp = model.log_prob(grid.points, cond, threads);
  const double m = *std::max_element(lp.begin(), lp.end());
  std::vector<double> w(lp.size()), wl(lp.size());
  for (std::size_t i = 0; i < lp.size(); ++i) {
    w[i] = std::exp(lp[i] - m);
    wl[i] = w[i] * lp[i];
  }
  return -grid_mean(wl) / grid_mean(w);
}

}  // namespace so3flow
