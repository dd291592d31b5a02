#include <gtest/gtest.h>

#include "so3flow/autodiff.hpp"

#include <cmath>
#include <functional>
#include <random>
#include <vector>

using namespace so3flow::ad;

namespace {

using OpFn = std::function<Var(std::vector<Var>&)>;

Tensor random_tensor(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(r, c);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = u(rng);
  return t;
}

// Scalar probe L = sum(w .* op(inputs)) with fixed random weights w.
double probe(const OpFn& op, const std::vector<Tensor>& inputs, const Tensor& weights) {
  Tape tape(false);
  std::vector<Var> vars;
  for (const Tensor& t : inputs) vars.push_back(tape.constant(t));
  return (op(vars).value().array() * weights.array()).sum();
}

void check_gradient(const OpFn& op, std::vector<Tensor> inputs, double tol = 1e-7) {
  std::mt19937_64 rng(99);
  Tape tape;
  std::vector<Var> vars;
  for (std::size_t i = 0; i < inputs.size(); ++i) vars.push_back(tape.parameter(inputs[i], static_cast<int>(i)));
  const Var out = op(vars);
  const Tensor weights = random_tensor(out.rows(), out.cols(), rng);
  const Var loss = sum_all(out * tape.constant(weights));
  const GradientMap grads = tape.backward(loss);

  const double h = 1e-6;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor& g = grads.at(static_cast<int>(i));
    ASSERT_EQ(g.rows(), inputs[i].rows());
    ASSERT_EQ(g.cols(), inputs[i].cols());
    for (Eigen::Index k = 0; k < inputs[i].size(); ++k) {
      std::vector<Tensor> plus = inputs, minus = inputs;
      plus[i].data()[k] += h;
      minus[i].data()[k] -= h;
      const double fd = (probe(op, plus, weights) - probe(op, minus, weights)) / (2 * h);
      EXPECT_NEAR(g.data()[k], fd, tol * std::max(1.0, std::abs(fd))) << "input " << i << " entry " << k;
    }
  }
}

}  // namespace

TEST(Autodiff, SquareOfScalar) {
  Tape tape;
  Tensor x(1, 1);
  x(0, 0) = 3.0;
  const Var v = tape.parameter(x, 0);
  const Var y = square(v);
  EXPECT_DOUBLE_EQ(y.item(), 9.0);
  EXPECT_DOUBLE_EQ(tape.backward(y).at(0)(0, 0), 6.0);
}

TEST(Autodiff, GradientOfLossWithRespectToItselfIsOne) {
  Tape tape;
  const Var x = tape.parameter(Tensor::Constant(1, 1, 2.0), 0);
  const Var y = exp(x);
  tape.backward(y);
  EXPECT_DOUBLE_EQ(tape.grad(y)(0, 0), 1.0);
}

TEST(Autodiff, SumOfSquaresGradient) {
  std::mt19937_64 rng(1);
  Tape tape;
  const Tensor p = random_tensor(3, 4, rng);
  const Var v = tape.parameter(p, 7);
  const GradientMap g = tape.backward(sum_all(square(v)));
  EXPECT_TRUE(g.at(7).isApprox(2.0 * p));
}

TEST(Autodiff, ConstantLossGivesZeroGradient) {
  Tape tape;
  const Var p = tape.parameter(Tensor::Ones(2, 2), 0);
  const Var q = tape.parameter(Tensor::Ones(1, 3), 1);
  (void)p;
  (void)q;
  const Var c = tape.constant(Tensor::Constant(1, 1, 5.0));
  const GradientMap g = tape.backward(c);
  EXPECT_EQ(g.at(0), Tensor::Zero(2, 2));
  EXPECT_EQ(g.at(1), Tensor::Zero(1, 3));
}

TEST(Autodiff, SoftmaxUniformAndTranslationInvariance) {
  Tape tape;
  const Var x = tape.parameter(Tensor::Zero(1, 3), 0);
  const Var y = softmax_rows(x);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(y.value()(0, i), 1.0 / 3.0, 1e-15);
  // Each output's gradient sums to zero over the inputs.
  for (int j = 0; j < 3; ++j) {
    Tape t2;
    const Var x2 = t2.parameter(Tensor::Zero(1, 3), 0);
    const Var out = cols(softmax_rows(x2), j, 1);
    EXPECT_NEAR(t2.backward(out).at(0).sum(), 0.0, 1e-15);
  }
}

TEST(Autodiff, Atan2Partials) {
  Tape tape;
  const Var y = tape.parameter(Tensor::Constant(1, 1, 0.3), 0);
  const Var x = tape.parameter(Tensor::Constant(1, 1, 0.7), 1);
  const GradientMap g = tape.backward(atan2(y, x));
  const double r2 = 0.3 * 0.3 + 0.7 * 0.7;
  EXPECT_NEAR(g.at(0)(0, 0), 0.7 / r2, 1e-15);
  EXPECT_NEAR(g.at(1)(0, 0), -0.3 / r2, 1e-15);
  const double h = 1e-6;
  EXPECT_NEAR(g.at(0)(0, 0), (std::atan2(0.3 + h, 0.7) - std::atan2(0.3 - h, 0.7)) / (2 * h), 1e-7);
  EXPECT_NEAR(g.at(1)(0, 0), (std::atan2(0.3, 0.7 + h) - std::atan2(0.3, 0.7 - h)) / (2 * h), 1e-7);
}

TEST(Autodiff, NormRejectsDegenerateInput) {
  Tape tape;
  const Var z = tape.parameter(Tensor::Zero(2, 3), 0);
  EXPECT_THROW(norm_rows(z), DegenerateInput);
  EXPECT_THROW(normalize_rows(z), DegenerateInput);
}

TEST(AutodiffGradients, Elementwise) {
  std::mt19937_64 rng(2);
  const Tensor a = random_tensor(3, 4, rng), b = random_tensor(3, 4, rng, 0.5, 1.5);
  check_gradient([](auto& v) { return v[0] + v[1]; }, {a, b});
  check_gradient([](auto& v) { return v[0] - v[1]; }, {a, b});
  check_gradient([](auto& v) { return v[0] * v[1]; }, {a, b});
  check_gradient([](auto& v) { return v[0] / v[1]; }, {a, b});
  check_gradient([](auto& v) { return -v[0]; }, {a});
  check_gradient([](auto& v) { return scale(v[0], 2.5); }, {a});
  check_gradient([](auto& v) { return add_scalar(v[0], 2.5); }, {a});
  check_gradient([](auto& v) { return square(v[0]); }, {a});
  check_gradient([](auto& v) { return sqrt(v[0]); }, {b});
  check_gradient([](auto& v) { return exp(v[0]); }, {a});
  check_gradient([](auto& v) { return log(v[0]); }, {b});
  check_gradient([](auto& v) { return sin(v[0]); }, {a});
  check_gradient([](auto& v) { return cos(v[0]); }, {a});
  check_gradient([](auto& v) { return relu(v[0]); }, {a});
  check_gradient([](auto& v) { return atan2(v[0], v[1]); }, {a, b});
  check_gradient([](auto& v) { return atan2(v[0], -v[1]); }, {a, b});
}

TEST(AutodiffGradients, Broadcasting) {
  std::mt19937_64 rng(3);
  check_gradient([](auto& v) { return add_row(v[0], v[1]); }, {random_tensor(4, 3, rng), random_tensor(1, 3, rng)});
  check_gradient([](auto& v) { return mul_col(v[0], v[1]); }, {random_tensor(4, 3, rng), random_tensor(4, 1, rng)});
}

TEST(AutodiffGradients, LinearAlgebraAndShape) {
  std::mt19937_64 rng(4);
  const Tensor a = random_tensor(3, 4, rng), b = random_tensor(4, 2, rng);
  check_gradient([](auto& v) { return matmul(v[0], v[1]); }, {a, b});
  check_gradient([](auto& v) { return transpose(v[0]); }, {a});
  check_gradient([](auto& v) { return sum_cols(v[0]); }, {a});
  check_gradient([](auto& v) { return sum_all(v[0]); }, {a});
  check_gradient([](auto& v) { return mean_all(v[0]); }, {a});
  check_gradient([](auto& v) { return cols(v[0], 1, 2); }, {a});
  check_gradient([](auto& v) { return concat_cols(std::span<const Var>(v.data(), 2)); }, {a, random_tensor(3, 2, rng)});
  check_gradient([](auto& v) { return reshape(v[0], 6, 2); }, {a});
  check_gradient([](auto& v) { return repeat_rows(v[0], 3); }, {a});
  check_gradient([](auto& v) { return softmax_rows(v[0]); }, {a});
  Tensor m = random_tensor(4, 4, rng) + 2.0 * Tensor::Identity(4, 4);
  check_gradient([](auto& v) { return logabsdet(v[0]); }, {m});
  check_gradient([](auto& v) { return logabsdet(v[0]); }, {Tensor(-m)});
}

TEST(AutodiffGradients, RowGeometry) {
  std::mt19937_64 rng(5);
  const Tensor a = random_tensor(5, 3, rng), b = random_tensor(5, 3, rng);
  check_gradient([](auto& v) { return dot_rows(v[0], v[1]); }, {a, b});
  check_gradient([](auto& v) { return cross_rows(v[0], v[1]); }, {a, b});
  check_gradient([](auto& v) { return norm_rows(v[0]); }, {a});
  check_gradient([](auto& v) { return normalize_rows(v[0]); }, {a});
}

TEST(AutodiffGradients, BatchedFourByFour) {
  std::mt19937_64 rng(6);
  Tensor w = random_tensor(3, 16, rng);
  for (int r = 0; r < 3; ++r) {
    for (int i = 0; i < 4; ++i) w(r, 5 * i) += 2.0;
  }
  check_gradient([](auto& v) { return batched_matvec4(v[0], v[1]); }, {w, random_tensor(3, 4, rng)});
  check_gradient([](auto& v) { return batched_logabsdet4(v[0]); }, {w});
  Tape tape(false);
  const Var wv = tape.constant(w);
  for (int r = 0; r < 3; ++r) {
    const Eigen::Map<const Eigen::Matrix<double, 4, 4, Eigen::RowMajor>> m(w.row(r).data());
    EXPECT_NEAR(batched_logabsdet4(wv).value()(r, 0), std::log(std::abs(m.determinant())), 1e-12);
  }
}

TEST(AutodiffGradients, Rowwise) {
  std::mt19937_64 rng(7);
  // (x, y) -> (x y, sin x)
  const RowFn fn = [](const double* in, double* out, double* jac) {
    out[0] = in[0] * in[1];
    out[1] = std::sin(in[0]);
    if (jac) {
      jac[0] = in[1];
      jac[1] = in[0];
      jac[2] = std::cos(in[0]);
      jac[3] = 0.0;
    }
  };
  check_gradient([&](auto& v) { return rowwise(v[0], 2, fn); }, {random_tensor(4, 2, rng)});
}

TEST(AutodiffGradients, SharedSubexpressionAccumulates) {
  std::mt19937_64 rng(8);
  check_gradient([](auto& v) { return v[0] * v[0] + exp(v[0]) * v[0]; }, {random_tensor(2, 2, rng)});
}

TEST(Autodiff, BackwardIsDeterministic) {
  std::mt19937_64 rng(9);
  const Tensor a = random_tensor(8, 3, rng), b = random_tensor(3, 3, rng);
  auto run = [&] {
    Tape tape;
    const Var x = tape.parameter(a, 0), w = tape.parameter(b, 1);
    return tape.backward(sum_all(normalize_rows(matmul(x, w))));
  };
  const GradientMap g1 = run(), g2 = run();
  EXPECT_EQ(g1.at(0), g2.at(0));
  EXPECT_EQ(g1.at(1), g2.at(1));
}

TEST(Autodiff, NonRecordingTapeKeepsValues) {
  Tape tape(false);
  const Var x = tape.constant(Tensor::Constant(1, 1, 2.0));
  EXPECT_DOUBLE_EQ(exp(x).item(), std::exp(2.0));
  EXPECT_FALSE(tape.needs_grad(exp(x)));
}
