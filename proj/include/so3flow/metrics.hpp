#pragma once

#include "so3flow/distributions.hpp"
#include "so3flow/flow.hpp"

#include <span>
#include <vector>

namespace so3flow {

/// Mean log_prob over a held-out set; throws on an empty set.
double avg_log_likelihood(const FlowModel& model, std::span<const Rotation> xs, const ad::Tensor* cond = nullptr,
                          int threads = 1);

/// Equivalent ground-truth rotations. Continuous fibers are stored
/// discretized, and `discretization_deg` records the step.
struct SymmetrySet {
  std::vector<Rotation> rotations;
  double discretization_deg = 0.0;

  /// {base * g} for every g in `group`.
  static SymmetrySet finite(const Rotation& base, std::span<const Rotation> group);
  /// {base * exp(phi axis)} for phi on a 1 degree grid over [0, 360).
  static SymmetrySet fiber(const Rotation& base, const Vec3& body_axis);
  /// Union of two sets.
  SymmetrySet merged(const SymmetrySet& other) const;

  /// Largest distance from a product a * b^T * c of members back into the
  /// set; ~0 for a set that is a coset of a group.
  double closure_error() const;
};

/// Ground truth for a target: its modes, or 1 degree fibers for cones.
SymmetrySet symmetry_set_for(const TargetSpec& target);

/// Mean over samples of the distance to the nearest ground-truth rotation,
/// in degrees. Throws std::invalid_argument on an empty sample list or set.
double spread_deg(std::span<const Rotation> samples, const SymmetrySet& gt);

struct Estimate {
  double value = 0.0;
  double stderr_ = 0.0;
};

/// -mean log_prob over n flow samples, with the standard error of the mean.
Estimate mc_entropy(const FlowModel& model, std::size_t n, Rng& rng, const ad::Tensor* cond = nullptr,
                    double tol = 1e-7, int threads = 1);

/// Grid mean of exp(log_prob); ~1 for a normalized density. Needs >= 1e5
/// grid points.
double normalization_audit(const FlowModel& model, const SO3Grid& grid, const ad::Tensor* cond = nullptr,
                           int threads = 1);
inline bool normalization_ok(double mass) { return mass >= 0.95 && mass <= 1.05; }

/// -E[log p] of the model density by quadrature on `grid`.
double quadrature_entropy(const FlowModel& model, const SO3Grid& grid, const ad::Tensor* cond = nullptr,
                          int threads = 1);

}  // namespace so3flow
