#pragma once

#include "so3flow/layers.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace so3flow {

/// Which affine layers read the condition vector in a conditional flow.
enum class ConditionalAffine { None, Head, Every };

struct FlowArchitecture {
  int blocks = 6;
  int components = 16;
  std::vector<int> hidden{64, 64, 64, 64};
  bool mobius = true;
  bool affine = true;
  AffineParameterization affine_param = AffineParameterization::Unconstrained;
  int cond_dim = 0;
  ConditionalAffine conditional_affine = ConditionalAffine::Every;
  /// Block b conditions its Mobius coupling on column b mod 3 instead of
  /// always on the first column.
  bool cycle_columns = false;

  /// 6 blocks, K = 16.
  static FlowArchitecture desk();
  /// 24 blocks, K = 64.
  static FlowArchitecture paper();

  /// Throws std::invalid_argument describing the first bad field.
  void validate() const;
  bool operator==(const FlowArchitecture&) const = default;
};

struct FlowSample {
  Rotation rotation;
  double log_prob = 0.0;
};

/**
 * @brief Blocks of (Mobius coupling, matrix -> quaternion, quaternion affine,
 * quaternion -> matrix) over a Haar-uniform base.
 *
 * forward runs data -> base; densities are relative to the Haar measure, so
 * log_prob is the summed log-determinant and the uniform model has log_prob 0.
 */
class FlowModel {
 public:
  struct Block {
    std::optional<MobiusCouplingLayer> mobius;
    std::optional<QuaternionAffineLayer> affine;
  };

  FlowModel(const FlowArchitecture& arch, std::uint64_t seed);

  const FlowArchitecture& architecture() const { return arch_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<Block>& blocks() const { return blocks_; }
  /// Column the Mobius coupling of block b conditions on (0-based).
  int conditioner_column(int block) const { return arch_.cycle_columns ? block % 3 : 0; }
  const ParameterStore& params() const { return store_; }
  ParameterStore& params() { return store_; }

  /// Tape forward on B x 9 rotations; returns (base points B x 9, log-det B x 1).
  std::pair<ad::Var, ad::Var> forward(const BoundParams& params, const ad::Var& rotations, const ad::Var* cond) const;

  /// Batched log-density. `cond` has one row per rotation, or a single row
  /// shared by all of them.
  std::vector<double> log_prob(std::span<const Rotation> xs, const ad::Tensor* cond = nullptr, int threads = 1) const;
  double log_prob(const Rotation& x, std::span<const double> cond = {}) const;

  /// Single-rotation data -> base through the closed-form layer functions.
  std::pair<Rotation, double> forward_to_base(const Rotation& x, std::span<const double> cond = {}) const;
  /// Per-layer log-dets in application order (Mobius then affine per block).
  std::vector<double> layer_log_dets(const Rotation& x, std::span<const double> cond = {}) const;

  /// Base -> data for a batch of base points.
  std::vector<Rotation> inverse(std::span<const Rotation> zs, const ad::Tensor* cond = nullptr, double tol = 1e-7,
                                int threads = 1) const;
  Rotation inverse_from_base(const Rotation& z, std::span<const double> cond = {}, double tol = 1e-7) const;

  /// Draws base points from the Haar measure, inverts them and evaluates the
  /// log-density at the recovered rotations.
  std::vector<FlowSample> sample(std::size_t n, Rng& rng, const ad::Tensor* cond = nullptr, double tol = 1e-7,
                                 int threads = 1) const;

  /// Moves every output layer away from zero (for tests and audits).
  void randomize(Rng& rng, double scale);

 private:
  FlowArchitecture arch_;
  std::uint64_t seed_;
  ParameterStore store_;
  std::vector<Block> blocks_;
};

/// Highest log_prob, ties to the lowest index; throws on an empty list.
const Rotation& best_sample(std::span<const FlowSample> samples);

/// Rows of `cond` for [begin, end), broadcasting a single-row condition.
ad::Tensor condition_rows(const ad::Tensor& cond, std::size_t begin, std::size_t end);

}  // namespace so3flow
