#include "so3flow/layers.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace so3flow {

using ad::Tensor;
using ad::Var;

namespace {

using Mat4r = Eigen::Matrix<double, 4, 4, Eigen::RowMajor>;

Tensor uniform_tensor(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor t(rows, cols);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = u(rng);
  return t;
}

// 0.7 x / (1 + |x|) with its Jacobian; differentiable at x = 0.
void squash_row(const double* in, double* out, double* jac) {
  const Eigen::Map<const Vec3> x(in);
  const double r = x.norm();
  const double a = kOmegaRadius / (1.0 + r);
  Eigen::Map<Vec3> y(out);
  y = a * x;
  if (jac == nullptr) return;
  Eigen::Map<Eigen::Matrix<double, 3, 3, Eigen::RowMajor>> j(jac);
  j = a * Mat3::Identity();
  if (r > 0.0) j -= kOmegaRadius / (r * (1.0 + r) * (1.0 + r)) * x * x.transpose();
}

Tensor identity_row16() {
  Tensor t(1, 16);
  Eigen::Map<Mat4r>(t.data()) = Mat4r::Identity();
  return t;
}

void require_nonsingular(double log_abs_det) {
  if (!(log_abs_det > std::log(kMinAbsDet))) {
    throw DomainError("affine layer matrix is near-singular (|det W| <= 1e-8)");
  }
}

}  // namespace

// ---------------------------------------------------------------------------

int ParameterStore::add(std::string name, Tensor value) {
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  return static_cast<int>(values_.size()) - 1;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const Tensor& t : values_) n += static_cast<std::size_t>(t.size());
  return n;
}

BoundParams bind(ad::Tape& tape, const ParameterStore& store) {
  BoundParams bound;
  bound.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    const int id = static_cast<int>(i);
    bound.push_back(tape.recording() ? tape.parameter(store.value(id), id) : tape.constant(store.value(id)));
  }
  return bound;
}

// ---------------------------------------------------------------------------

Mlp::Mlp(ParameterStore& store, const std::string& prefix, int in, std::span<const int> hidden, int out, Rng& rng)
    : in_(in), out_(out) {
  std::vector<int> dims;
  dims.push_back(in);
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(out);
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const bool output = i + 2 == dims.size();
    const double bound = 1.0 / std::sqrt(static_cast<double>(dims[i]));
    Tensor w = output ? Tensor::Zero(dims[i], dims[i + 1]) : uniform_tensor(dims[i], dims[i + 1], bound, rng);
    Tensor b = output ? Tensor::Zero(1, dims[i + 1]) : uniform_tensor(1, dims[i + 1], bound, rng);
    weights_.push_back(store.add(prefix + ".w" + std::to_string(i), std::move(w)));
    biases_.push_back(store.add(prefix + ".b" + std::to_string(i), std::move(b)));
  }
  residual_ = hidden.size() >= 2 && hidden.front() == hidden.back();
}

Var Mlp::forward(const BoundParams& params, const Var& x) const {
  const std::size_t layers = weights_.size();
  auto affine = [&](const Var& h, std::size_t i) {
    return ad::add_row(ad::matmul(h, params[static_cast<std::size_t>(weights_[i])]),
                       params[static_cast<std::size_t>(biases_[i])]);
  };
  if (layers == 1) return affine(x, 0);

  const Var first = ad::relu(affine(x, 0));
  Var h = first;
  for (std::size_t i = 1; i + 1 < layers; ++i) {
    Var pre = affine(h, i);
    if (residual_ && i + 2 == layers) pre = pre + first;
    h = ad::relu(pre);
  }
  return affine(h, layers - 1);
}

void Mlp::randomize_output(ParameterStore& store, Rng& rng, double gain) const {
  Tensor& w = store.value(weights_.back());
  const double bound = gain / std::sqrt(static_cast<double>(w.rows()));
  w = uniform_tensor(w.rows(), w.cols(), bound, rng);
  Tensor& b = store.value(biases_.back());
  b = uniform_tensor(b.rows(), b.cols(), bound, rng);
}

// ---------------------------------------------------------------------------

Vec3 mobius_point(const Vec3& c, const Vec3& omega) {
  const Vec3 d = c - omega;
  const double dn2 = d.squaredNorm();
  if (!(dn2 >= 1e-20)) throw DomainError("mobius_point: c coincides with omega");
  return (1.0 - omega.squaredNorm()) / dn2 * d - omega;
}

Mat3 mobius_jacobian(const Vec3& c, const Vec3& omega) {
  const Vec3 d = c - omega;
  const double dn2 = d.squaredNorm();
  if (!(dn2 >= 1e-20)) throw DomainError("mobius_jacobian: c coincides with omega");
  return (1.0 - omega.squaredNorm()) / dn2 * (Mat3::Identity() - 2.0 * d * d.transpose() / dn2);
}

double signed_fiber_angle(const Vec3& v, const Vec3& e_a, const Vec3& e_b) {
  const double a = v.dot(e_a);
  const double b = v.dot(e_b);
  if ((v - a * e_a - b * e_b).norm() > 1e-8) {
    throw DomainError("signed_fiber_angle: vector is not in the fiber plane");
  }
  return std::atan2(b, a);
}

ComponentAngles component_angles(const Vec3& c2, const Vec3& c3, const MobiusConditioning& mc) {
  const Eigen::Index k = mc.omega.rows();
  ComponentAngles out{Eigen::VectorXd(k), Eigen::VectorXd(k)};
  for (Eigen::Index i = 0; i < k; ++i) {
    const Vec3 omega = mc.omega.row(i).transpose();
    const Vec3 d = c2 - omega;
    const double dn2 = d.squaredNorm();
    if (!(dn2 >= 1e-20)) throw DomainError("mobius_point: c coincides with omega");
    const double s = (1.0 - omega.squaredNorm()) / dn2;
    const Vec3 moved = s * d - omega;
    out.theta[i] = std::atan2(moved.dot(c3), moved.dot(c2));
    out.rate[i] = (1.0 - omega.squaredNorm()) / (1.0 - 2.0 * c2.dot(omega) + omega.squaredNorm());
  }
  return out;
}

double combined_angle(const Vec3& c2, const Vec3& c3, const MobiusConditioning& mc, double* derivative) {
  const ComponentAngles angles = component_angles(c2, c3, mc);
  if (derivative != nullptr) *derivative = mc.alpha.dot(angles.rate);
  return mc.alpha.dot(angles.theta);
}

MobiusCouplingLayer::MobiusCouplingLayer(ParameterStore& store, const std::string& prefix, int components,
                                         int cond_dim, std::span<const int> hidden, Rng& rng)
    : components_(components), cond_dim_(cond_dim) {
  if (components < 1) throw std::invalid_argument("Mobius coupling needs at least one component");
  omega_net_ = Mlp(store, prefix + ".omega", 3 + cond_dim, hidden, 3 * components, rng);
  weight_net_ = Mlp(store, prefix + ".weight", 3 + cond_dim, hidden, components, rng);
}

MobiusCouplingLayer::Conditioner MobiusCouplingLayer::conditioner(const BoundParams& params, const Var& c1,
                                                                  const Var* cond) const {
  Var input = c1;
  if (cond_dim_ > 0) {
    if (cond == nullptr || cond->cols() != cond_dim_) throw std::invalid_argument("Mobius layer expects a condition");
    const Var parts[] = {c1, *cond};
    input = ad::concat_cols(parts);
  }
  const Eigen::Index batch = c1.rows();
  const Var raw = ad::reshape(omega_net_.forward(params, input), batch * components_, 3);
  const Var c1r = ad::repeat_rows(c1, components_);
  const Var projected = raw - ad::mul_col(c1r, ad::dot_rows(c1r, raw));
  return {ad::rowwise(projected, 3, squash_row), ad::softmax_rows(weight_net_.forward(params, input))};
}

std::pair<Var, Var> MobiusCouplingLayer::forward(const BoundParams& params, const Var& rotations,
                                                 const Var* cond) const {
  const Eigen::Index batch = rotations.rows();
  const Var c1 = ad::cols(rotations, 0, 3);
  const Var c2 = ad::cols(rotations, 3, 3);
  const Var c3 = ad::cols(rotations, 6, 3);
  const Conditioner cn = conditioner(params, c1, cond);

  const Var c2r = ad::repeat_rows(c2, components_);
  const Var c3r = ad::repeat_rows(c3, components_);
  const Var d = c2r - cn.omega;
  const Var dn2 = ad::dot_rows(d, d);
  const Var s = ad::add_scalar(ad::neg(ad::dot_rows(cn.omega, cn.omega)), 1.0) / dn2;
  const Var moved = ad::mul_col(d, s) - cn.omega;
  const Var theta = ad::reshape(ad::atan2(ad::dot_rows(moved, c3r), ad::dot_rows(moved, c2r)), batch, components_);

  // d theta_k / d theta = |J_k c3|; the reflection in J_k preserves norm, leaving
  // (1 - |w|^2) / |c2 - w|^2 with |c2| = 1.
  const Var omega_sq = ad::dot_rows(cn.omega, cn.omega);
  const Var rate = ad::reshape(ad::add_scalar(ad::neg(omega_sq), 1.0) /
                                   ad::add_scalar(omega_sq - ad::scale(ad::dot_rows(c2r, cn.omega), 2.0), 1.0),
                               batch, components_);

  const Var angle = ad::sum_cols(cn.alpha * theta);
  const Var log_det = ad::log(ad::sum_cols(cn.alpha * rate));
  const Var new_c2 = ad::mul_col(c2, ad::cos(angle)) + ad::mul_col(c3, ad::sin(angle));
  const Var new_c3 = ad::cross_rows(c1, new_c2);
  const Var parts[] = {c1, new_c2, new_c3};
  return {ad::concat_cols(parts), log_det};
}

std::vector<MobiusConditioning> MobiusCouplingLayer::conditioning(const ParameterStore& store,
                                                                  const Eigen::MatrixX3d& c1,
                                                                  const Tensor* cond) const {
  ad::Tape tape(false);
  const BoundParams params = bind(tape, store);
  const Var c1v = tape.constant(Tensor(c1));
  Var condv;
  if (cond != nullptr) condv = tape.constant(*cond);
  const Conditioner cn = conditioner(params, c1v, cond != nullptr ? &condv : nullptr);
  const Tensor& omega = cn.omega.value();
  const Tensor& alpha = cn.alpha.value();
  std::vector<MobiusConditioning> out(static_cast<std::size_t>(c1.rows()));
  for (Eigen::Index b = 0; b < c1.rows(); ++b) {
    MobiusConditioning& mc = out[static_cast<std::size_t>(b)];
    mc.omega = omega.middleRows(b * components_, components_);
    mc.alpha = alpha.row(b).transpose();
  }
  return out;
}

namespace {

Tensor condition_row(std::span<const double> cond) {
  Tensor t(1, static_cast<Eigen::Index>(cond.size()));
  for (std::size_t i = 0; i < cond.size(); ++i) t(0, static_cast<Eigen::Index>(i)) = cond[i];
  return t;
}

MobiusConditioning single_conditioning(const Rotation& r, const MobiusCouplingLayer& layer,
                                       const ParameterStore& store, std::span<const double> cond) {
  Eigen::MatrixX3d c1(1, 3);
  c1.row(0) = r.col(0).transpose();
  if (layer.cond_dim() > 0) {
    if (static_cast<int>(cond.size()) != layer.cond_dim()) throw std::invalid_argument("condition size mismatch");
    const Tensor c = condition_row(cond);
    return layer.conditioning(store, c1, &c).front();
  }
  return layer.conditioning(store, c1, nullptr).front();
}

}  // namespace

std::pair<Rotation, double> mobius_coupling_forward(const Rotation& r, const MobiusCouplingLayer& layer,
                                                     const ParameterStore& store, std::span<const double> cond) {
  const MobiusConditioning mc = single_conditioning(r, layer, store, cond);
  const Vec3 c1 = r.col(0), c2 = r.col(1), c3 = r.col(2);
  double rate = 0.0;
  const double angle = combined_angle(c2, c3, mc, &rate);
  const Vec3 new_c2 = std::cos(angle) * c2 + std::sin(angle) * c3;
  Mat3 m;
  m << c1, new_c2, c1.cross(new_c2);
  return {Rotation::unchecked(m), std::log(rate)};
}

int bisection_iterations(double tol) {
  if (!(tol > 0.0)) throw std::invalid_argument("bisection tolerance must be positive");
  return std::max(0, static_cast<int>(std::ceil(std::log2(std::numbers::pi / tol))));
}

Rotation mobius_coupling_inverse(const Rotation& r, const MobiusConditioning& mc, double tol, int* iterations) {
  const int max_steps = bisection_iterations(tol);
  const Vec3 c1 = r.col(0), out2 = r.col(1), out3 = r.col(2);
  // Candidate input c2(t) = cos t out2 + sin t out3 maps to out2 iff
  // t + theta'(t) = 0, which is strictly increasing in t.
  auto residual = [&](double t) {
    const Vec3 c2 = std::cos(t) * out2 + std::sin(t) * out3;
    const Vec3 c3 = -std::sin(t) * out2 + std::cos(t) * out3;
    return t + combined_angle(c2, c3, mc);
  };
  double lo = -0.5 * std::numbers::pi;
  double hi = 0.5 * std::numbers::pi;
  double g_lo = residual(lo);
  double g_hi = residual(hi);
  if (!(g_lo <= 0.0 && g_hi >= 0.0)) {
    throw DomainError("mobius_coupling_inverse: target angle is not bracketed");
  }
  int steps = 0;
  while (hi - lo > tol && steps < max_steps) {
    const double mid = 0.5 * (lo + hi);
    const double g = residual(mid);
    if (g == 0.0) {
      lo = hi = mid;
      g_lo = g_hi = 0.0;
    } else if (g < 0.0) {
      lo = mid;
      g_lo = g;
    } else {
      hi = mid;
      g_hi = g;
    }
    ++steps;
  }
  if (iterations != nullptr) *iterations = steps;
  // Secant point of the final bracket.
  const double t = g_hi > g_lo ? lo - g_lo * (hi - lo) / (g_hi - g_lo) : 0.5 * (lo + hi);
  const Vec3 c2 = std::cos(t) * out2 + std::sin(t) * out3;
  Mat3 m;
  m << c1, c2, c1.cross(c2);
  return Rotation::unchecked(m);
}

Rotation mobius_coupling_inverse(const Rotation& r, const MobiusCouplingLayer& layer, const ParameterStore& store,
                                 std::span<const double> cond, double tol, int* iterations) {
  return mobius_coupling_inverse(r, single_conditioning(r, layer, store, cond), tol, iterations);
}

// ---------------------------------------------------------------------------

std::pair<UnitQuaternion, double> affine_forward(const UnitQuaternion& q, const Mat4& w) {
  const double det = w.determinant();
  require_nonsingular(std::log(std::abs(det)));
  const Vec4 wq = w * q.coeffs();
  const double n = wq.norm();
  return {UnitQuaternion::unchecked(wq / n), std::log(std::abs(det)) - 4.0 * (std::log(n) - std::log(q.coeffs().norm()))};
}

UnitQuaternion affine_inverse(const UnitQuaternion& q, const Mat4& w) {
  require_nonsingular(std::log(std::abs(w.determinant())));
  const Vec4 v = w.partialPivLu().solve(q.coeffs());
  return UnitQuaternion::unchecked(v / v.norm());
}

LuComposition lu_compose(const Mat4& lower, const Mat4& upper, const Vec4& s, const Mat4& permutation) {
  if ((s.array() == 0.0).any()) throw DomainError("lu_compose: zero diagonal entry");
  Mat4 l = Mat4::Identity();
  Mat4 u = s.asDiagonal();
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) {
      if (i > j) l(i, j) = lower(i, j);
      if (i < j) u(i, j) = upper(i, j);
    }
  }
  return {permutation * l * u, s.array().abs().log().sum()};
}

QuaternionAffineLayer::QuaternionAffineLayer(ParameterStore& store, const std::string& prefix,
                                             AffineParameterization kind, int cond_dim, std::span<const int> hidden,
                                             Rng& rng, const Mat4& permutation)
    : kind_(kind), cond_dim_(cond_dim), permutation_(permutation) {
  if (cond_dim > 0) {
    if (kind != AffineParameterization::Unconstrained) {
      throw std::invalid_argument("conditional affine layers use the unconstrained parameterization");
    }
    net_ = Mlp(store, prefix + ".affine", cond_dim, hidden, 16, rng);
    store.value(net_.output_bias()) = identity_row16();
    return;
  }
  if (kind == AffineParameterization::Unconstrained) {
    w_ = store.add(prefix + ".W", Tensor::Identity(4, 4));
  } else {
    lower_ = store.add(prefix + ".L", Tensor::Zero(4, 4));
    upper_ = store.add(prefix + ".U", Tensor::Zero(4, 4));
    diag_ = store.add(prefix + ".s", Tensor::Ones(1, 4));
  }
}

Var QuaternionAffineLayer::matrix_var(const BoundParams& params) const {
  if (kind_ == AffineParameterization::Unconstrained) return params[static_cast<std::size_t>(w_)];
  ad::Tape& tape = *params.front().tape();
  Tensor lower_mask = Tensor::Zero(4, 4), upper_mask = Tensor::Zero(4, 4);
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) {
      if (i > j) lower_mask(i, j) = 1.0;
      if (i < j) upper_mask(i, j) = 1.0;
    }
  }
  const Var l = ad::mul(params[static_cast<std::size_t>(lower_)], tape.constant(lower_mask)) +
                tape.constant(Tensor::Identity(4, 4));
  const Var diag = ad::mul(ad::add_row(tape.constant(Tensor::Zero(4, 4)), params[static_cast<std::size_t>(diag_)]),
                           tape.constant(Tensor::Identity(4, 4)));
  const Var u = ad::mul(params[static_cast<std::size_t>(upper_)], tape.constant(upper_mask)) + diag;
  return ad::matmul(tape.constant(Tensor(permutation_)), ad::matmul(l, u));
}

std::pair<Var, Var> QuaternionAffineLayer::forward(const BoundParams& params, const Var& quats,
                                                   const Var* cond) const {
  Var wq, log_abs_det;
  if (conditional()) {
    if (cond == nullptr || cond->cols() != cond_dim_) throw std::invalid_argument("affine layer expects a condition");
    const Var w = net_.forward(params, *cond);
    log_abs_det = ad::batched_logabsdet4(w);
    require_nonsingular(log_abs_det.value().minCoeff());
    wq = ad::batched_matvec4(w, quats);
  } else {
    const Var w = matrix_var(params);
    log_abs_det = ad::logabsdet(w);
    require_nonsingular(log_abs_det.item());
    wq = ad::matmul(quats, ad::transpose(w));
  }
  const Var scaled = ad::scale(ad::log(ad::norm_rows(wq)) - ad::log(ad::norm_rows(quats)), -4.0);
  const Var log_det = conditional() ? log_abs_det + scaled : ad::add_row(scaled, log_abs_det);
  return {ad::normalize_rows(wq), log_det};
}

Mat4 QuaternionAffineLayer::matrix(const ParameterStore& store, std::span<const double> cond) const {
  if (conditional()) {
    if (static_cast<int>(cond.size()) != cond_dim_) throw std::invalid_argument("condition size mismatch");
    const Tensor w = matrices(store, condition_row(cond));
    return Eigen::Map<const Mat4r>(w.data());
  }
  if (kind_ == AffineParameterization::Unconstrained) return store.value(w_);
  return lu_compose(store.value(lower_), store.value(upper_), store.value(diag_).row(0).transpose(), permutation_).w;
}

Tensor QuaternionAffineLayer::matrices(const ParameterStore& store, const Tensor& cond) const {
  ad::Tape tape(false);
  const BoundParams params = bind(tape, store);
  return net_.forward(params, tape.constant(cond)).value();
}

void QuaternionAffineLayer::set_matrix(ParameterStore& store, const Mat4& w) const {
  if (conditional()) {
    Tensor bias(1, 16);
    Eigen::Map<Mat4r>(bias.data()) = w;
    store.value(net_.output_bias()) = bias;
    return;
  }
  if (kind_ == AffineParameterization::Unconstrained) {
    store.value(w_) = w;
    return;
  }
  // Doolittle factorization of P^T W without pivoting.
  const Mat4 a = permutation_.transpose() * w;
  Mat4 l = Mat4::Identity(), u = Mat4::Zero();
  for (int i = 0; i < 4; ++i) {
    for (int j = i; j < 4; ++j) u(i, j) = a(i, j) - l.row(i).head(i).dot(u.col(j).head(i));
    if (std::abs(u(i, i)) < 1e-12) throw DomainError("set_matrix: W has no LU factorization under P");
    for (int j = i + 1; j < 4; ++j) l(j, i) = (a(j, i) - l.row(j).head(i).dot(u.col(i).head(i))) / u(i, i);
  }
  Tensor lower = Tensor::Zero(4, 4), upper = Tensor::Zero(4, 4), diag(1, 4);
  for (int i = 0; i < 4; ++i) {
    diag(0, i) = u(i, i);
    for (int j = 0; j < 4; ++j) {
      if (i > j) lower(i, j) = l(i, j);
      if (i < j) upper(i, j) = u(i, j);
    }
  }
  store.value(lower_) = lower;
  store.value(upper_) = upper;
  store.value(diag_) = diag;
}

void QuaternionAffineLayer::randomize(ParameterStore& store, Rng& rng, double scale) const {
  std::normal_distribution<double> normal(0.0, scale);
  Mat4 w = Mat4::Identity();
  for (int i = 0; i < 16; ++i) w.data()[i] += normal(rng);
  if (conditional()) net_.randomize_output(store, rng, scale);
  if (kind_ == AffineParameterization::LU && !conditional()) {
    Tensor& lower = store.value(lower_);
    Tensor& upper = store.value(upper_);
    Tensor& diag = store.value(diag_);
    for (int i = 0; i < 4; ++i) {
      diag(0, i) = std::exp(normal(rng));
      for (int j = 0; j < 4; ++j) {
        lower(i, j) = i > j ? normal(rng) : 0.0;
        upper(i, j) = i < j ? normal(rng) : 0.0;
      }
    }
    return;
  }
  set_matrix(store, w);
}

std::pair<UnitQuaternion, double> affine_forward(const UnitQuaternion& q, const QuaternionAffineLayer& layer,
                                                 const ParameterStore& store, std::span<const double> cond) {
  return affine_forward(q, layer.matrix(store, cond));
}

UnitQuaternion affine_inverse(const UnitQuaternion& q, const QuaternionAffineLayer& layer,
                              const ParameterStore& store, std::span<const double> cond) {
  return affine_inverse(q, layer.matrix(store, cond));
}

// ---------------------------------------------------------------------------

Var matrix_to_quat_rows(const Var& rotations) {
  return ad::rowwise(rotations, 4, [](const double* in, double* out, double* jac) {
    detail::matrix_to_quat_jacobian(in, out, jac);
  });
}

Var quat_to_matrix_rows(const Var& quats) {
  return ad::rowwise(quats, 9, [](const double* in, double* out, double* jac) {
    detail::quat_to_matrix_jacobian(in, out, jac);
  });
}

Tensor flatten_rotations(std::span<const Rotation> rotations) {
  Tensor t(static_cast<Eigen::Index>(rotations.size()), 9);
  for (std::size_t i = 0; i < rotations.size(); ++i) {
    t.row(static_cast<Eigen::Index>(i)) = detail::flatten(rotations[i].matrix()).transpose();
  }
  return t;
}

Rotation rotation_from_row(const double* flat) { return Rotation::unchecked(detail::unflatten(flat)); }

}  // namespace so3flow
