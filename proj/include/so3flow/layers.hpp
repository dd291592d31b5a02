#pragma once

#include "so3flow/autodiff.hpp"
#include "so3flow/so3.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace so3flow {

/// Named parameter tensors in declaration order (the checkpoint order).
class ParameterStore {
 public:
  int add(std::string name, ad::Tensor value);

  std::size_t size() const { return values_.size(); }
  std::size_t scalar_count() const;

  const std::string& name(int id) const { return names_[static_cast<std::size_t>(id)]; }
  const ad::Tensor& value(int id) const { return values_[static_cast<std::size_t>(id)]; }
  ad::Tensor& value(int id) { return values_[static_cast<std::size_t>(id)]; }

  const std::vector<ad::Tensor>& values() const { return values_; }
  std::vector<ad::Tensor>& values() { return values_; }
  const std::vector<std::string>& names() const { return names_; }

 private:
  std::vector<std::string> names_;
  std::vector<ad::Tensor> values_;
};

/// Parameters of a store placed on a tape, indexed like the store.
using BoundParams = std::vector<ad::Var>;

/// Binds every parameter as a gradient leaf (or as constants on a
/// non-recording tape).
BoundParams bind(ad::Tape& tape, const ParameterStore& store);

/**
 * @brief Conditioner network: [in, h..., out] with ReLU activations and a
 * residual connection adding the first hidden layer's output to the last
 * hidden layer's pre-activation.
 *
 * Hidden layers use the uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initializer;
 * the output layer starts at zero so that every flow starts at the identity.
 */
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParameterStore& store, const std::string& prefix, int in, std::span<const int> hidden, int out, Rng& rng);

  ad::Var forward(const BoundParams& params, const ad::Var& x) const;

  int in_dim() const { return in_; }
  int out_dim() const { return out_; }
  int output_weight() const { return weights_.back(); }
  int output_bias() const { return biases_.back(); }
  bool has_residual() const { return residual_; }

  /// Re-draws the output layer with the hidden-layer initializer times `gain`.
  void randomize_output(ParameterStore& store, Rng& rng, double gain) const;

 private:
  std::vector<int> weights_;
  std::vector<int> biases_;
  int in_ = 0;
  int out_ = 0;
  bool residual_ = false;
};

// ---------------------------------------------------------------------------
// Mobius coupling

/// 0.7 < sqrt(2)/2 keeps each component angle inside (-pi/2, pi/2).
inline constexpr double kOmegaRadius = 0.7;

/// (1 - |w|^2) / |c - w|^2 (c - w) - w; throws DomainError if |c - w| < 1e-10.
Vec3 mobius_point(const Vec3& c, const Vec3& omega);
/// d mobius_point / d c.
Mat3 mobius_jacobian(const Vec3& c, const Vec3& omega);
/// atan2(v . e_b, v . e_a); throws DomainError if v leaves span{e_a, e_b} by
/// more than 1e-8.
double signed_fiber_angle(const Vec3& v, const Vec3& e_a, const Vec3& e_b);

/// Evaluated conditioner outputs for one rotation.
struct MobiusConditioning {
  Eigen::Matrix<double, Eigen::Dynamic, 3> omega;  // K x 3, each |w_k| < 0.7, w_k . c1 = 0
  Eigen::VectorXd alpha;                           // K mixing weights, sum 1
};

/// Per-component angles theta_k of c2 -> mobius_point(c2, w_k) in the (c2, c3)
/// basis, with derivatives d theta_k / d theta.
struct ComponentAngles {
  Eigen::VectorXd theta;
  Eigen::VectorXd rate;
};
ComponentAngles component_angles(const Vec3& c2, const Vec3& c3, const MobiusConditioning& mc);

/// Combined rotation angle sum_k alpha_k theta_k about c1; optionally the
/// derivative sum_k alpha_k d theta_k / d theta.
double combined_angle(const Vec3& c2, const Vec3& c3, const MobiusConditioning& mc, double* derivative = nullptr);

class MobiusCouplingLayer {
 public:
  MobiusCouplingLayer() = default;
  MobiusCouplingLayer(ParameterStore& store, const std::string& prefix, int components, int cond_dim,
                      std::span<const int> hidden, Rng& rng);

  int components() const { return components_; }
  int cond_dim() const { return cond_dim_; }
  const Mlp& omega_net() const { return omega_net_; }
  const Mlp& weight_net() const { return weight_net_; }

  struct Conditioner {
    ad::Var omega;  // (B*K) x 3, projected and reparameterized
    ad::Var alpha;  // B x K
  };
  /// c1: B x 3; cond: B x cond_dim or nullptr.
  Conditioner conditioner(const BoundParams& params, const ad::Var& c1, const ad::Var* cond) const;

  /// Data -> base on a batch of flattened rotations (B x 9, column-major per
  /// row). Returns the transformed rotations and the B x 1 log-determinants.
  std::pair<ad::Var, ad::Var> forward(const BoundParams& params, const ad::Var& rotations, const ad::Var* cond) const;

  /// Evaluated conditioners for a batch; c1 rows are unit vectors.
  std::vector<MobiusConditioning> conditioning(const ParameterStore& store, const Eigen::MatrixX3d& c1,
                                               const ad::Tensor* cond) const;

 private:
  Mlp omega_net_;
  Mlp weight_net_;
  int components_ = 0;
  int cond_dim_ = 0;
};

/// Single-rotation data -> base direction with its log-determinant.
std::pair<Rotation, double> mobius_coupling_forward(const Rotation& r, const MobiusCouplingLayer& layer,
                                                     const ParameterStore& store, std::span<const double> cond = {});

/// Inverts the coupling by bisection on the fiber angle in (-pi/2, pi/2).
/// `iterations`, when given, receives the bisection step count.
Rotation mobius_coupling_inverse(const Rotation& r, const MobiusCouplingLayer& layer, const ParameterStore& store,
                                 std::span<const double> cond = {}, double tol = 1e-7, int* iterations = nullptr);

/// Same, with the conditioner already evaluated.
Rotation mobius_coupling_inverse(const Rotation& r, const MobiusConditioning& mc, double tol, int* iterations = nullptr);

/// Bisection steps needed to shrink (-pi/2, pi/2) below `tol`.
int bisection_iterations(double tol);

// ---------------------------------------------------------------------------
// Quaternion affine

enum class AffineParameterization { Unconstrained, LU };

/// Smallest |det W| accepted by the affine layer.
inline constexpr double kMinAbsDet = 1e-8;

std::pair<UnitQuaternion, double> affine_forward(const UnitQuaternion& q, const Mat4& w);
UnitQuaternion affine_inverse(const UnitQuaternion& q, const Mat4& w);

struct LuComposition {
  Mat4 w;
  double log_abs_det = 0.0;
};
/// W = P L (U + S): only the strictly lower part of `lower` and the strictly
/// upper part of `upper` are read; S = diag(s).
LuComposition lu_compose(const Mat4& lower, const Mat4& upper, const Vec4& s, const Mat4& permutation);

class QuaternionAffineLayer {
 public:
  QuaternionAffineLayer() = default;
  /// cond_dim > 0 makes W the reshaped output of an affine network whose
  /// output bias starts at the identity (unconstrained parameterization only).
  QuaternionAffineLayer(ParameterStore& store, const std::string& prefix, AffineParameterization kind, int cond_dim,
                        std::span<const int> hidden, Rng& rng, const Mat4& permutation = Mat4::Identity());

  AffineParameterization kind() const { return kind_; }
  bool conditional() const { return cond_dim_ > 0; }
  int cond_dim() const { return cond_dim_; }

  /// Data -> base on a batch of quaternions (B x 4).
  std::pair<ad::Var, ad::Var> forward(const BoundParams& params, const ad::Var& quats, const ad::Var* cond) const;

  /// W for an unconditional layer, or for the given condition vector.
  Mat4 matrix(const ParameterStore& store, std::span<const double> cond = {}) const;
  /// Per-row W for a batch of conditions (B x 16, row-major).
  ad::Tensor matrices(const ParameterStore& store, const ad::Tensor& cond) const;

  /// Replaces W (or the network's output bias) by `w`, keeping parameter
  /// shapes; LU layers store the factors of `w` under the fixed permutation.
  void set_matrix(ParameterStore& store, const Mat4& w) const;
  void randomize(ParameterStore& store, Rng& rng, double scale) const;

 private:
  ad::Var matrix_var(const BoundParams& params) const;

  AffineParameterization kind_ = AffineParameterization::Unconstrained;
  int cond_dim_ = 0;
  int w_ = -1;      // unconstrained W (4 x 4)
  int lower_ = -1;  // LU factors
  int upper_ = -1;
  int diag_ = -1;   // 1 x 4
  Mat4 permutation_ = Mat4::Identity();
  Mlp net_;
};

std::pair<UnitQuaternion, double> affine_forward(const UnitQuaternion& q, const QuaternionAffineLayer& layer,
                                                 const ParameterStore& store, std::span<const double> cond = {});
UnitQuaternion affine_inverse(const UnitQuaternion& q, const QuaternionAffineLayer& layer,
                              const ParameterStore& store, std::span<const double> cond = {});

// ---------------------------------------------------------------------------
// Representation changes on the tape (column-major flattened rotations).

ad::Var matrix_to_quat_rows(const ad::Var& rotations);
ad::Var quat_to_matrix_rows(const ad::Var& quats);

ad::Tensor flatten_rotations(std::span<const Rotation> rotations);
Rotation rotation_from_row(const double* flat);

}  // namespace so3flow
