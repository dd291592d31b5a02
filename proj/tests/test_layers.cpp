#include <gtest/gtest.h>

#include "so3flow/layers.hpp"
#include "support.hpp"

#include <cmath>
#include <numbers>

using namespace so3flow;
using ad::Tensor;

namespace {

const std::vector<int> kHidden{32, 32};

Vec3 random_unit(Rng& rng) {
  std::normal_distribution<double> n;
  return Vec3(n(rng), n(rng), n(rng)).normalized();
}

Vec3 random_ball(Rng& rng, double radius) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return random_unit(rng) * radius * std::cbrt(u(rng));
}

struct MobiusFixture {
  ParameterStore store;
  Rng rng{11};
  MobiusCouplingLayer layer;

  explicit MobiusFixture(int k, int cond_dim = 0, double gain = 1.0) {
    layer = MobiusCouplingLayer(store, "m", k, cond_dim, kHidden, rng);
    if (gain > 0) {
      layer.omega_net().randomize_output(store, rng, gain);
      layer.weight_net().randomize_output(store, rng, gain);
    }
  }
};

}  // namespace

// ---------------------------------------------------------------------------

TEST(MobiusPoint, IdentityAtOrigin) {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const Vec3 c = random_unit(rng);
    EXPECT_LT((mobius_point(c, Vec3::Zero()) - c).norm(), 1e-15);
  }
}

TEST(MobiusPoint, FixedPointsAlongOmega) {
  const Vec3 w(0.2, -0.3, 0.4);
  const Vec3 u = w.normalized();
  EXPECT_LT((mobius_point(u, w) - u).norm(), 1e-12);
  EXPECT_LT((mobius_point(-u, w) + u).norm(), 1e-12);
}

TEST(MobiusPoint, MatchesLineSphereConstruction) {
  // The line from c through w meets the sphere again at p; the Mobius image is -p.
  auto construct = [](const Vec3& c, const Vec3& w) {
    const Vec3 d = w - c;
    const double t = -2.0 * c.dot(d) / d.squaredNorm();
    return Vec3(-(c + t * d));
  };
  EXPECT_LT((mobius_point(Vec3(0, 1, 0), Vec3(0.3, 0, 0)) - construct(Vec3(0, 1, 0), Vec3(0.3, 0, 0))).norm(), 1e-12);
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    const Vec3 c = random_unit(rng), w = random_ball(rng, 0.7);
    EXPECT_LT((mobius_point(c, w) - construct(c, w)).norm(), 1e-10);
  }
}

TEST(MobiusPoint, NormAndPlanePreservation) {
  Rng rng(3);
  for (int i = 0; i < 100000; ++i) {
    const Vec3 c1 = random_unit(rng);
    Vec3 c2 = random_unit(rng);
    c2 = (c2 - c2.dot(c1) * c1).normalized();
    Vec3 w = random_ball(rng, 0.7);
    ASSERT_LT(std::abs(mobius_point(c2, w).norm() - 1.0), 1e-10);
    w -= w.dot(c1) * c1;
    ASSERT_LT(std::abs(mobius_point(c2, w).dot(c1)), 1e-10);
  }
}

TEST(MobiusPoint, JacobianMatchesFiniteDifferences) {
  Rng rng(4);
  for (int i = 0; i < 100; ++i) {
    const Vec3 c = random_unit(rng), w = random_ball(rng, 0.7);
    const Mat3 j = mobius_jacobian(c, w);
    for (int k = 0; k < 3; ++k) {
      const double h = 1e-6;
      const Vec3 e = Vec3::Unit(k);
      const Vec3 fd = (mobius_point(c + h * e, w) - mobius_point(c - h * e, w)) / (2 * h);
      EXPECT_LT((j.col(k) - fd).norm(), 1e-6);
    }
  }
}

TEST(MobiusPoint, DegenerateInput) { EXPECT_THROW(mobius_point(Vec3(1, 0, 0), Vec3(1, 0, 0)), DomainError); }

TEST(SignedFiberAngle, Definition) {
  const Vec3 a(1, 0, 0), b(0, 1, 0);
  EXPECT_EQ(signed_fiber_angle(a, a, b), 0.0);
  EXPECT_NEAR(signed_fiber_angle(b, a, b), std::numbers::pi / 2, 1e-15);
  EXPECT_NEAR(signed_fiber_angle(std::cos(0.4) * a + std::sin(0.4) * b, a, b), 0.4, 1e-12);
  EXPECT_THROW(signed_fiber_angle(Vec3(0, 0, 1), a, b), DomainError);
}

// ---------------------------------------------------------------------------

TEST(MobiusLayer, ZeroInitIsIdentity) {
  MobiusFixture f(8, 0, 0.0);
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    const Rotation r = sample_uniform(rng);
    auto [out, ld] = mobius_coupling_forward(r, f.layer, f.store);
    EXPECT_LT((out.matrix() - r.matrix()).norm(), 1e-15);
    EXPECT_EQ(ld, 0.0);
    EXPECT_LT((mobius_coupling_inverse(r, f.layer, f.store).matrix() - r.matrix()).norm(), 1e-6);
  }
}

TEST(MobiusLayer, ConditionerConstraints) {
  MobiusFixture f(16, 0, 3.0);
  Rng rng(6);
  Eigen::MatrixX3d c1(2000, 3);
  for (int i = 0; i < c1.rows(); ++i) c1.row(i) = random_unit(rng).transpose();
  const auto mcs = f.layer.conditioning(f.store, c1, nullptr);
  for (int i = 0; i < c1.rows(); ++i) {
    const MobiusConditioning& mc = mcs[static_cast<std::size_t>(i)];
    EXPECT_NEAR(mc.alpha.sum(), 1.0, 1e-12);
    EXPECT_GT(mc.alpha.minCoeff(), 0.0);
    for (int k = 0; k < mc.omega.rows(); ++k) {
      EXPECT_LT(mc.omega.row(k).norm(), kOmegaRadius);
      EXPECT_LT(std::abs(mc.omega.row(k).dot(c1.row(i))), 1e-12);
    }
  }
}

TEST(MobiusLayer, ComponentAnglesStayInHalfCircle) {
  MobiusFixture f(16, 0, 3.0);
  Rng rng(7);
  for (int i = 0; i < 1000; ++i) {
    const Rotation r = sample_uniform(rng);
    Eigen::MatrixX3d c1(1, 3);
    c1.row(0) = r.col(0).transpose();
    const auto mc = f.layer.conditioning(f.store, c1, nullptr).front();
    const ComponentAngles a = component_angles(r.col(1), r.col(2), mc);
    EXPECT_LT(a.theta.cwiseAbs().maxCoeff(), std::numbers::pi / 2);
  }
}

TEST(MobiusLayer, SingleComponentLogDetMatchesAngleDerivative) {
  MobiusFixture f(1, 0, 2.0);
  Rng rng(8);
  for (int i = 0; i < 100; ++i) {
    const Rotation r = sample_uniform(rng);
    Eigen::MatrixX3d c1(1, 3);
    c1.row(0) = r.col(0).transpose();
    const auto mc = f.layer.conditioning(f.store, c1, nullptr).front();
    auto angle_at = [&](double t) {
      const Vec3 c2 = std::cos(t) * r.col(1) + std::sin(t) * r.col(2);
      const Vec3 c3 = -std::sin(t) * r.col(1) + std::cos(t) * r.col(2);
      return t + combined_angle(c2, c3, mc);
    };
    // The output angle is measured from c2, so the map on the fiber is t -> t + theta'(t).
    const double h = 1e-6;
    const double fd = (angle_at(h) - angle_at(-h)) / (2 * h);
    const double ld = mobius_coupling_forward(r, f.layer, f.store).second;
    EXPECT_NEAR(std::exp(ld), fd, 1e-6);
  }
}

TEST(MobiusLayer, FiberMapIsStrictlyIncreasing) {
  MobiusFixture f(16, 0, 3.0);
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const Rotation r = sample_uniform(rng);
    Eigen::MatrixX3d c1(1, 3);
    c1.row(0) = r.col(0).transpose();
    const auto mc = f.layer.conditioning(f.store, c1, nullptr).front();
    double previous = -1e9;
    for (int i = 0; i < 1000; ++i) {
      const double t = -std::numbers::pi + 2 * std::numbers::pi * (i + 0.5) / 1000;
      const Vec3 c2 = std::cos(t) * r.col(1) + std::sin(t) * r.col(2);
      const Vec3 c3 = -std::sin(t) * r.col(1) + std::cos(t) * r.col(2);
      double rate = 0.0;
      const double value = t + combined_angle(c2, c3, mc, &rate);
      EXPECT_GT(rate, 0.0);
      EXPECT_GT(value, previous);
      previous = value;
    }
  }
}

TEST(MobiusLayer, InverseRoundTrip) {
  MobiusFixture f(16, 0, 3.0);
  Rng rng(10);
  for (int i = 0; i < 300; ++i) {
    const Rotation r = sample_uniform(rng);
    const Rotation y = mobius_coupling_forward(r, f.layer, f.store).first;
    int steps = 0;
    const Rotation back = mobius_coupling_inverse(y, f.layer, f.store, {}, 1e-7, &steps);
    EXPECT_LT(geodesic_distance(back, r), 2e-7);
    EXPECT_LE(steps, 25);
  }
  EXPECT_EQ(bisection_iterations(1e-7), 25);
}

TEST(MobiusLayer, TangentLogDet) {
  MobiusFixture f(16, 0, 3.0);
  Rng rng(11);
  for (int i = 0; i < 50; ++i) {
    const Rotation r = sample_uniform(rng);
    const double analytic = mobius_coupling_forward(r, f.layer, f.store).second;
    const double fd = oracle::tangent_log_det(
        [&](const Rotation& x) { return mobius_coupling_forward(x, f.layer, f.store).first; }, r);
    EXPECT_NEAR(std::exp(analytic - fd), 1.0, 1e-6);
  }
}

TEST(MobiusLayer, TapeMatchesClosedForm) {
  MobiusFixture f(8, 2, 2.0);
  Rng rng(12);
  std::vector<Rotation> rs;
  for (int i = 0; i < 16; ++i) rs.push_back(sample_uniform(rng));
  Tensor cond(16, 2);
  std::normal_distribution<double> n;
  for (Eigen::Index i = 0; i < cond.size(); ++i) cond.data()[i] = n(rng);
  ad::Tape tape(false);
  const BoundParams params = bind(tape, f.store);
  const ad::Var x = tape.constant(flatten_rotations(rs));
  const ad::Var c = tape.constant(cond);
  auto [y, ld] = f.layer.forward(params, x, &c);
  for (int i = 0; i < 16; ++i) {
    const std::vector<double> ci{cond(i, 0), cond(i, 1)};
    auto [r, l] = mobius_coupling_forward(rs[static_cast<std::size_t>(i)], f.layer, f.store, ci);
    EXPECT_LT((rotation_from_row(y.value().row(i).data()).matrix() - r.matrix()).norm(), 1e-12);
    EXPECT_NEAR(ld.value()(i, 0), l, 1e-12);
  }
}

// ---------------------------------------------------------------------------

TEST(Affine, IdentityAndOrthogonal) {
  Rng rng(13);
  const UnitQuaternion q = matrix_to_quat(sample_uniform(rng));
  auto [q1, ld1] = affine_forward(q, Mat4::Identity());
  EXPECT_LT((q1.coeffs() - q.coeffs()).norm(), 1e-15);
  EXPECT_EQ(ld1, 0.0);
  const Mat4 o = Eigen::HouseholderQR<Mat4>(Mat4::Random()).householderQ();
  auto [q2, ld2] = affine_forward(q, o);
  EXPECT_LT((q2.coeffs() - o * q.coeffs()).norm(), 1e-12);
  EXPECT_NEAR(ld2, 0.0, 1e-12);
}

TEST(Affine, DiagonalScaling) {
  const Mat4 w = Vec4(2, 1, 1, 1).asDiagonal();
  auto [q, ld] = affine_forward(UnitQuaternion::from_vector(Vec4(1, 0, 0, 0)), w);
  EXPECT_LT((q.coeffs() - Vec4(1, 0, 0, 0)).norm(), 1e-15);
  EXPECT_NEAR(ld, -std::log(8.0), 1e-14);
  const double fd = oracle::tangent_log_det(
      [&](const Rotation& r) { return quat_to_matrix(affine_forward(matrix_to_quat(r), w).first); },
      Rotation::identity());
  EXPECT_NEAR(fd, -std::log(8.0), 1e-8);

  const UnitQuaternion p = UnitQuaternion::from_vector(Vec4(0.5, std::sqrt(3.0) / 2, 0, 0));
  const Vec4 back = affine_inverse(affine_forward(p, w).first, w).coeffs();
  EXPECT_LT((back - p.coeffs()).norm(), 1e-10);
}

TEST(Affine, AntipodalEquivarianceIsExact) {
  Rng rng(14);
  std::normal_distribution<double> n;
  for (int i = 0; i < 1000; ++i) {
    Mat4 w;
    for (int k = 0; k < 16; ++k) w.data()[k] = n(rng);
    const UnitQuaternion q = matrix_to_quat(sample_uniform(rng));
    auto [a, la] = affine_forward(q, w);
    auto [b, lb] = affine_forward(-q, w);
    EXPECT_EQ(b.coeffs(), -a.coeffs());
    EXPECT_EQ(la, lb);
    EXPECT_EQ(affine_inverse(-q, w).coeffs(), -affine_inverse(q, w).coeffs());
  }
}

TEST(Affine, TangentLogDetAndRoundTrip) {
  Rng rng(15);
  std::normal_distribution<double> n;
  for (int i = 0; i < 100; ++i) {
    Mat4 w = Mat4::Identity();
    for (int k = 0; k < 16; ++k) w.data()[k] += 0.5 * n(rng);
    if (std::abs(w.determinant()) < 1e-3) continue;
    const Rotation r = sample_uniform(rng);
    const auto fwd = [&](const Rotation& x) { return quat_to_matrix(affine_forward(matrix_to_quat(x), w).first); };
    const double analytic = affine_forward(matrix_to_quat(r), w).second;
    EXPECT_NEAR(std::exp(analytic - oracle::tangent_log_det(fwd, r)), 1.0, 1e-6);
    const Vec4 q = matrix_to_quat(r).coeffs();
    const Vec4 back = affine_inverse(affine_forward(UnitQuaternion::unchecked(q), w).first, w).coeffs();
    EXPECT_LT(std::min((back - q).norm(), (back + q).norm()), 1e-10);
  }
}

TEST(Affine, RejectsNearSingular) {
  Mat4 w = Mat4::Identity();
  w(3, 3) = 1e-9;
  EXPECT_THROW(affine_forward(UnitQuaternion::from_vector(Vec4(1, 0, 0, 0)), w), DomainError);
  EXPECT_THROW(affine_inverse(UnitQuaternion::from_vector(Vec4(1, 0, 0, 0)), w), DomainError);
}

TEST(LuCompose, KnownValues) {
  const LuComposition id = lu_compose(Mat4::Identity(), Mat4::Zero(), Vec4::Ones(), Mat4::Identity());
  EXPECT_EQ(id.w, Mat4::Identity());
  EXPECT_EQ(id.log_abs_det, 0.0);
  const LuComposition s = lu_compose(Mat4::Identity(), Mat4::Zero(), Vec4(2, 3, 1, 1), Mat4::Identity());
  EXPECT_NEAR(s.log_abs_det, std::log(6.0), 1e-15);
  EXPECT_THROW(lu_compose(Mat4::Identity(), Mat4::Zero(), Vec4(1, 0, 1, 1), Mat4::Identity()), DomainError);
}

TEST(LuCompose, DeterminantMatchesCofactorExpansion) {
  auto det3 = [](const Mat3& m) {
    return m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1)) - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0)) +
           m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0));
  };
  auto det4 = [&](const Mat4& m) {
    double d = 0.0;
    for (int j = 0; j < 4; ++j) {
      Mat3 minor;
      for (int r = 1; r < 4; ++r) {
        for (int c = 0, cc = 0; c < 4; ++c) {
          if (c != j) minor(r - 1, cc++) = m(r, c);
        }
      }
      d += (j % 2 == 0 ? 1.0 : -1.0) * m(0, j) * det3(minor);
    }
    return d;
  };
  Rng rng(16);
  std::normal_distribution<double> n;
  Mat4 p = Mat4::Zero();
  p(0, 2) = p(1, 0) = p(2, 3) = p(3, 1) = 1.0;
  for (int i = 0; i < 100; ++i) {
    Mat4 l, u;
    Vec4 s;
    for (int k = 0; k < 16; ++k) {
      l.data()[k] = n(rng);
      u.data()[k] = n(rng);
    }
    for (int k = 0; k < 4; ++k) s[k] = n(rng);
    const LuComposition c = lu_compose(l, u, s, p);
    const double direct = det4(c.w);
    EXPECT_NEAR(std::abs(direct), std::exp(c.log_abs_det), 1e-10 * std::abs(direct));
  }
}

TEST(AffineLayer, LuSetMatrixRoundTrip) {
  ParameterStore store;
  Rng rng(17);
  const QuaternionAffineLayer layer(store, "a", AffineParameterization::LU, 0, kHidden, rng);
  EXPECT_EQ(layer.matrix(store), Mat4::Identity());
  layer.randomize(store, rng, 0.3);
  const Mat4 w = layer.matrix(store);
  layer.set_matrix(store, w);
  EXPECT_LT((layer.matrix(store) - w).norm(), 1e-12);
}

TEST(AffineLayer, TapeMatchesClosedForm) {
  Rng rng(18);
  std::vector<Rotation> rs;
  for (int i = 0; i < 8; ++i) rs.push_back(sample_uniform(rng));
  Tensor cond = Tensor::Random(8, 3);
  for (auto kind : {AffineParameterization::Unconstrained, AffineParameterization::LU}) {
    for (int cond_dim : {0, 3}) {
      if (cond_dim > 0 && kind == AffineParameterization::LU) continue;
      ParameterStore store;
      const QuaternionAffineLayer layer(store, "a", kind, cond_dim, kHidden, rng);
      layer.randomize(store, rng, 0.3);
      ad::Tape tape(false);
      const BoundParams params = bind(tape, store);
      const ad::Var q = matrix_to_quat_rows(tape.constant(flatten_rotations(rs)));
      const ad::Var c = tape.constant(cond);
      auto [out, ld] = layer.forward(params, q, cond_dim > 0 ? &c : nullptr);
      for (int i = 0; i < 8; ++i) {
        std::vector<double> ci;
        if (cond_dim > 0) ci = {cond(i, 0), cond(i, 1), cond(i, 2)};
        auto [qq, l] = affine_forward(matrix_to_quat(rs[static_cast<std::size_t>(i)]), layer, store, ci);
        EXPECT_LT((out.value().row(i).transpose() - qq.coeffs()).norm(), 1e-12);
        EXPECT_NEAR(ld.value()(i, 0), l, 1e-12);
      }
    }
  }
}

TEST(AffineLayer, ConditionalStartsAtIdentity) {
  ParameterStore store;
  Rng rng(19);
  const QuaternionAffineLayer layer(store, "a", AffineParameterization::Unconstrained, 4, kHidden, rng);
  const std::vector<double> c{0.1, -2.0, 3.0, 0.5};
  EXPECT_EQ(layer.matrix(store, c), Mat4::Identity());
  EXPECT_THROW(QuaternionAffineLayer(store, "b", AffineParameterization::LU, 4, kHidden, rng), std::invalid_argument);
}

TEST(Conversions, TapeRowsMatchScalarFunctions) {
  Rng rng(20);
  std::vector<Rotation> rs;
  for (int i = 0; i < 32; ++i) rs.push_back(sample_uniform(rng));
  ad::Tape tape(false);
  const ad::Var q = matrix_to_quat_rows(tape.constant(flatten_rotations(rs)));
  const ad::Var back = quat_to_matrix_rows(q);
  for (int i = 0; i < 32; ++i) {
    EXPECT_EQ(q.value().row(i).transpose(), matrix_to_quat(rs[static_cast<std::size_t>(i)]).coeffs());
    EXPECT_LT((rotation_from_row(back.value().row(i).data()).matrix() - rs[static_cast<std::size_t>(i)].matrix()).norm(),
              1e-12);
  }
}
