#pragma once

#include "so3flow/so3.hpp"

#include <optional>
#include <string>
#include <vector>

namespace so3flow {

/// Density exp(tr(F^T R)) / Z relative to the Haar measure.
struct MatrixFisher {
  Mat3 f = Mat3::Zero();
  std::optional<double> log_norm;
};

/// tr(F^T R) - log_norm; throws std::logic_error if log_norm is unset.
double fisher_log_prob(const MatrixFisher& fisher, const Rotation& r);

/// log of the grid mean of exp(tr(F^T R)), with max subtraction.
double compute_log_norm(const Mat3& f, const SO3Grid& grid);

/// Exact log-normalizer of F = kappa Q for a rotation Q, from the 1-D
/// rotation-angle integral.
double isotropic_fisher_log_norm(double kappa);

/// Density exp(kappa (c1 . axis - 1)) / Z, uniform along the fiber about c1.
struct ConeComponent {
  Vec3 axis = Vec3::UnitZ();
  double kappa = 0.0;
  double log_norm = 0.0;
};

enum class TargetKind { Peak, Cube24, ConeCyclic, Line3 };

std::string to_string(TargetKind kind);
/// Accepts peak, cube24, cone-cyclic (or cone) and line3.
TargetKind parse_target_kind(const std::string& name);

struct TargetSpec {
  TargetKind kind = TargetKind::Peak;
  double kappa = 0.0;
  Rotation mode;
  std::vector<double> weights;
  std::vector<MatrixFisher> fishers;
  std::vector<ConeComponent> cones;

  std::size_t component_count() const { return fishers.size() + cones.size(); }
};

/// The 24 rotations of the chiral octahedral group (signed permutation
/// matrices with determinant +1), identity first.
std::vector<Rotation> octahedral_group();

/**
 * @brief Builds a target with its normalizers.
 *
 * peak: F = kappa R0. cube24: F_i = kappa R0 G_i over the octahedral group.
 * cone-cyclic: cone about R0 e_z. line3: cones about the three columns of R0.
 */
TargetSpec make_target(TargetKind kind, double kappa, const Rotation& mode = Rotation::identity());

double target_log_prob(const TargetSpec& target, const Rotation& r);

/// Rejection sampling from the Haar measure with a grid-estimated envelope
/// (max density on `grid` x 1.05); when the acceptance rate would fall below
/// 1e-3, draws exactly from the mixture components instead.
std::vector<Rotation> target_sample(const TargetSpec& target, std::size_t n, Rng& rng, const SO3Grid& grid);

/// Exact component sampler (used as the low-acceptance fallback).
std::vector<Rotation> target_sample_components(const TargetSpec& target, std::size_t n, Rng& rng);

/// Rotation about a uniformly random axis by an angle with density
/// proportional to exp(2 kappa cos t)(1 - cos t): a draw from F = kappa I.
Rotation sample_isotropic_fisher(double kappa, Rng& rng);

/// -E[log p] under the normalized grid density: -(mean p log p) / (mean p).
double target_entropy(const TargetSpec& target, const SO3Grid& grid);

/// Max of target_log_prob over the grid.
double target_max_log_prob(const TargetSpec& target, const SO3Grid& grid);

}  // namespace so3flow
