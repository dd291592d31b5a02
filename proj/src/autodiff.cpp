#include "so3flow/autodiff.hpp"

#include <cmath>
#include <string>
#include <utility>

namespace so3flow::ad {

namespace {

using Mat4r = Eigen::Matrix<double, 4, 4, Eigen::RowMajor>;

Tape& tape_of(const Var& a) {
  if (!a.valid()) throw std::logic_error("operation on an unbound Var");
  return *a.tape();
}

Tape& tape_of(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw std::logic_error("Vars live on different tapes");
  return tape_of(a);
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

// Single-input op; `grad(in, g)` maps the output gradient to the input's.
Var unary(const Var& a, Tensor value, std::function<Tensor(const Tensor& in, const Tensor& g)> grad) {
  Tape& t = tape_of(a);
  const Var inputs[] = {a};
  if (!t.recording() || !t.needs_grad(a)) return t.record(std::move(value), inputs, {});
  return t.record(std::move(value), inputs, [a, grad = std::move(grad)](Tape& tape, const Tensor& g) {
    tape.accumulate(a, grad(tape.value(a), g));
  });
}

}  // namespace

const Tensor& Var::value() const {
  if (tape_ == nullptr) throw std::logic_error("value of an unbound Var");
  return tape_->value(*this);
}

double Var::item() const {
  const Tensor& v = value();
  if (v.rows() != 1 || v.cols() != 1) throw std::invalid_argument("item() requires a 1x1 Var");
  return v(0, 0);
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), Tensor(), {}, -1, false, false});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::parameter(Tensor value, int param_id) {
  nodes_.push_back(Node{std::move(value), Tensor(), {}, param_id, record_, false});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), Tensor(), {}, -1, record_, false});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  bool needs = false;
  if (record_) {
    for (const Var& in : inputs) {
      if (in.tape() != this) throw std::logic_error("input Var recorded on another tape");
      needs = needs || needs_grad(in);
    }
  }
  Node node;
  node.value = std::move(value);
  node.needs_grad = needs;
  if (needs) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::accumulate(const Var& v, const Tensor& g) {
  Node& node = nodes_[static_cast<std::size_t>(v.id())];
  if (!node.needs_grad) return;
  if (!node.has_grad) {
    node.grad = g;
    node.has_grad = true;
  } else {
    node.grad += g;
  }
}

GradientMap Tape::backward(const Var& loss) {
  if (loss.tape() != this) throw std::logic_error("loss recorded on another tape");
  if (loss.rows() != 1 || loss.cols() != 1) throw std::invalid_argument("backward requires a scalar loss");
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad.resize(0, 0);
  }
  GradientMap out;
  for (const Node& n : nodes_) {
    if (n.param_id >= 0) out[n.param_id] = Tensor::Zero(n.value.rows(), n.value.cols());
  }
  if (!record_) return out;

  accumulate(loss, Tensor::Ones(1, 1));
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.has_grad) continue;
    if (n.backward) {
      // The callback only touches earlier nodes, so `n` stays valid.
      Tensor g = std::move(n.grad);
      n.backward(*this, g);
      n.grad = std::move(g);
    }
    if (n.param_id >= 0) out[n.param_id] += n.grad;
  }
  return out;
}

Tensor Tape::grad(const Var& v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id())];
  if (!n.has_grad) return Tensor::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "add");
  const Var in[] = {a, b};
  return t.record(a.value() + b.value(), in, [a, b](Tape& tape, const Tensor& g) {
    tape.accumulate(a, g);
    tape.accumulate(b, g);
  });
}

Var sub(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "sub");
  const Var in[] = {a, b};
  return t.record(a.value() - b.value(), in, [a, b](Tape& tape, const Tensor& g) {
    tape.accumulate(a, g);
    tape.accumulate(b, -g);
  });
}

Var mul(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "mul");
  const Var in[] = {a, b};
  return t.record(a.value().cwiseProduct(b.value()), in, [a, b](Tape& tape, const Tensor& g) {
    if (tape.needs_grad(a)) tape.accumulate(a, g.cwiseProduct(tape.value(b)));
    if (tape.needs_grad(b)) tape.accumulate(b, g.cwiseProduct(tape.value(a)));
  });
}

Var div(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "div");
  const Var in[] = {a, b};
  return t.record(a.value().cwiseQuotient(b.value()), in, [a, b](Tape& tape, const Tensor& g) {
    const Tensor& bv = tape.value(b);
    if (tape.needs_grad(a)) tape.accumulate(a, g.cwiseQuotient(bv));
    if (tape.needs_grad(b)) {
      const Tensor& av = tape.value(a);
      tape.accumulate(b, (-(g.array() * av.array()) / bv.array().square()).matrix());
    }
  });
}

Var neg(const Var& a) {
  return unary(a, -a.value(), [](const Tensor&, const Tensor& g) { return Tensor(-g); });
}

Var scale(const Var& a, double s) {
  return unary(a, s * a.value(), [s](const Tensor&, const Tensor& g) { return Tensor(s * g); });
}

Var add_scalar(const Var& a, double s) {
  return unary(a, (a.value().array() + s).matrix(),
               [](const Tensor&, const Tensor& g) { return g; });
}

Var add_row(const Var& a, const Var& row) {
  Tape& t = tape_of(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: shape mismatch");
  Tensor value = a.value();
  value.rowwise() += row.value().row(0);
  const Var in[] = {a, row};
  return t.record(std::move(value), in, [a, row](Tape& tape, const Tensor& g) {
    tape.accumulate(a, g);
    if (tape.needs_grad(row)) tape.accumulate(row, g.colwise().sum());
  });
}

Var mul_col(const Var& a, const Var& col) {
  Tape& t = tape_of(a, col);
  if (col.cols() != 1 || col.rows() != a.rows()) throw std::invalid_argument("mul_col: shape mismatch");
  Tensor value = (a.value().array().colwise() * col.value().col(0).array()).matrix();
  const Var in[] = {a, col};
  return t.record(std::move(value), in, [a, col](Tape& tape, const Tensor& g) {
    const Tensor& cv = tape.value(col);
    if (tape.needs_grad(a)) tape.accumulate(a, (g.array().colwise() * cv.col(0).array()).matrix());
    if (tape.needs_grad(col)) tape.accumulate(col, g.cwiseProduct(tape.value(a)).rowwise().sum());
  });
}

Var square(const Var& a) {
  return unary(a, a.value().cwiseAbs2(),
               [](const Tensor& in, const Tensor& g) { return Tensor(2.0 * in.cwiseProduct(g)); });
}

Var sqrt(const Var& a) {
  return unary(a, a.value().cwiseSqrt(), [](const Tensor& in, const Tensor& g) {
    return Tensor((g.array() / (2.0 * in.array().sqrt())).matrix());
  });
}

Var exp(const Var& a) {
  return unary(a, a.value().array().exp().matrix(), [](const Tensor& in, const Tensor& g) {
    return Tensor((g.array() * in.array().exp()).matrix());
  });
}

Var log(const Var& a) {
  return unary(a, a.value().array().log().matrix(),
               [](const Tensor& in, const Tensor& g) { return Tensor(g.cwiseQuotient(in)); });
}

Var sin(const Var& a) {
  return unary(a, a.value().array().sin().matrix(), [](const Tensor& in, const Tensor& g) {
    return Tensor((g.array() * in.array().cos()).matrix());
  });
}

Var cos(const Var& a) {
  return unary(a, a.value().array().cos().matrix(), [](const Tensor& in, const Tensor& g) {
    return Tensor((-g.array() * in.array().sin()).matrix());
  });
}

Var relu(const Var& a) {
  return unary(a, a.value().cwiseMax(0.0), [](const Tensor& in, const Tensor& g) {
    return Tensor((in.array() > 0.0).select(g.array(), 0.0).matrix());
  });
}

Var atan2(const Var& y, const Var& x) {
  Tape& t = tape_of(y, x);
  require_same_shape(y, x, "atan2");
  Tensor value(y.rows(), y.cols());
  for (Eigen::Index i = 0; i < value.size(); ++i) value.data()[i] = std::atan2(y.value().data()[i], x.value().data()[i]);
  const Var in[] = {y, x};
  return t.record(std::move(value), in, [y, x](Tape& tape, const Tensor& g) {
    const auto yv = tape.value(y).array();
    const auto xv = tape.value(x).array();
    const Eigen::ArrayXXd r2 = xv * xv + yv * yv;
    if (tape.needs_grad(y)) tape.accumulate(y, Tensor((g.array() * xv / r2).matrix()));
    if (tape.needs_grad(x)) tape.accumulate(x, Tensor((-g.array() * yv / r2).matrix()));
  });
}

Var matmul(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Tensor value = a.value() * b.value();
  const Var in[] = {a, b};
  return t.record(std::move(value), in, [a, b](Tape& tape, const Tensor& g) {
    if (tape.needs_grad(a)) tape.accumulate(a, g * tape.value(b).transpose());
    if (tape.needs_grad(b)) tape.accumulate(b, tape.value(a).transpose() * g);
  });
}

Var transpose(const Var& a) {
  return unary(a, a.value().transpose(),
               [](const Tensor&, const Tensor& g) { return Tensor(g.transpose()); });
}

Var sum_cols(const Var& a) {
  const Eigen::Index c = a.cols();
  return unary(a, a.value().rowwise().sum(), [c](const Tensor&, const Tensor& g) {
    return Tensor(g.col(0).replicate(1, c));
  });
}

Var sum_all(const Var& a) {
  Tensor value(1, 1);
  value(0, 0) = a.value().sum();
  const Eigen::Index r = a.rows(), c = a.cols();
  return unary(a, std::move(value), [r, c](const Tensor&, const Tensor& g) {
    return Tensor(Tensor::Constant(r, c, g(0, 0)));
  });
}

Var mean_all(const Var& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.value().size()));
}

Var cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw std::invalid_argument("cols: range out of bounds");
  const Eigen::Index r = a.rows(), c = a.cols();
  return unary(a, a.value().middleCols(start, count), [r, c, start, count](const Tensor&, const Tensor& g) {
    Tensor full = Tensor::Zero(r, c);
    full.middleCols(start, count) = g;
    return full;
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Tape& t = tape_of(parts.front());
  Eigen::Index total = 0;
  for (const Var& p : parts) {
    if (p.tape() != &t || p.rows() != parts.front().rows()) throw std::invalid_argument("concat_cols: mismatch");
    total += p.cols();
  }
  Tensor value(parts.front().rows(), total);
  Eigen::Index offset = 0;
  std::vector<Var> inputs(parts.begin(), parts.end());
  for (const Var& p : parts) {
    value.middleCols(offset, p.cols()) = p.value();
    offset += p.cols();
  }
  return t.record(std::move(value), inputs, [inputs](Tape& tape, const Tensor& g) {
    Eigen::Index off = 0;
    for (const Var& p : inputs) {
      const Eigen::Index c = tape.value(p).cols();
      if (tape.needs_grad(p)) tape.accumulate(p, g.middleCols(off, c));
      off += c;
    }
  });
}

Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != a.value().size()) throw std::invalid_argument("reshape: size mismatch");
  const Eigen::Index r0 = a.rows(), c0 = a.cols();
  Tensor value = Eigen::Map<const Tensor>(a.value().data(), rows, cols);
  return unary(a, std::move(value), [r0, c0](const Tensor&, const Tensor& g) {
    return Tensor(Eigen::Map<const Tensor>(g.data(), r0, c0));
  });
}

Var repeat_rows(const Var& a, Eigen::Index times) {
  const Eigen::Index r = a.rows(), c = a.cols();
  Tensor value(r * times, c);
  for (Eigen::Index i = 0; i < r; ++i) value.middleRows(i * times, times) = a.value().row(i).replicate(times, 1);
  return unary(a, std::move(value), [r, c, times](const Tensor&, const Tensor& g) {
    Tensor out(r, c);
    for (Eigen::Index i = 0; i < r; ++i) out.row(i) = g.middleRows(i * times, times).colwise().sum();
    return out;
  });
}

Var softmax_rows(const Var& a) {
  Tensor value = a.value();
  for (Eigen::Index i = 0; i < value.rows(); ++i) {
    auto row = value.row(i);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
  Tape& t = tape_of(a);
  const Var in[] = {a};
  return t.record(std::move(value), in, [a](Tape& tape, const Tensor& g) {
    // Recompute y from the input to avoid referencing this node.
    Tensor y = tape.value(a);
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      auto row = y.row(i);
      row.array() -= row.maxCoeff();
      row = row.array().exp().matrix();
      row /= row.sum();
    }
    const Eigen::VectorXd dotgy = g.cwiseProduct(y).rowwise().sum();
    Tensor dx = y.cwiseProduct(Tensor((g.colwise() - dotgy)));
    tape.accumulate(a, dx);
  });
}

Var logabsdet(const Var& a) {
  if (a.rows() != a.cols()) throw std::invalid_argument("logabsdet: matrix must be square");
  const Eigen::MatrixXd m = a.value();
  const Eigen::PartialPivLU<Eigen::MatrixXd> lu(m);
  Tensor value(1, 1);
  value(0, 0) = std::log(std::abs(lu.determinant()));
  return unary(a, std::move(value), [](const Tensor& in, const Tensor& g) {
    const Eigen::MatrixXd inv = Eigen::MatrixXd(in).inverse();
    return Tensor(g(0, 0) * inv.transpose());
  });
}

Var dot_rows(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "dot_rows");
  Tensor value = a.value().cwiseProduct(b.value()).rowwise().sum();
  const Var in[] = {a, b};
  return t.record(std::move(value), in, [a, b](Tape& tape, const Tensor& g) {
    const auto gc = g.col(0).array();
    if (tape.needs_grad(a)) tape.accumulate(a, Tensor((tape.value(b).array().colwise() * gc).matrix()));
    if (tape.needs_grad(b)) tape.accumulate(b, Tensor((tape.value(a).array().colwise() * gc).matrix()));
  });
}

namespace {

Tensor cross_rows_value(const Tensor& a, const Tensor& b) {
  Tensor out(a.rows(), 3);
  out.col(0) = a.col(1).cwiseProduct(b.col(2)) - a.col(2).cwiseProduct(b.col(1));
  out.col(1) = a.col(2).cwiseProduct(b.col(0)) - a.col(0).cwiseProduct(b.col(2));
  out.col(2) = a.col(0).cwiseProduct(b.col(1)) - a.col(1).cwiseProduct(b.col(0));
  return out;
}

}  // namespace

Var cross_rows(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "cross_rows");
  if (a.cols() != 3) throw std::invalid_argument("cross_rows: rows must be 3-vectors");
  const Var in[] = {a, b};
  return t.record(cross_rows_value(a.value(), b.value()), in, [a, b](Tape& tape, const Tensor& g) {
    // d(g . (a x b)) = (b x g) . da + (g x a) . db
    if (tape.needs_grad(a)) tape.accumulate(a, cross_rows_value(tape.value(b), g));
    if (tape.needs_grad(b)) tape.accumulate(b, cross_rows_value(g, tape.value(a)));
  });
}

Var norm_rows(const Var& a) {
  Tensor value = a.value().rowwise().norm();
  if (value.size() > 0 && !(value.minCoeff() >= 1e-12)) {
    throw DegenerateInput("norm of a (near-)zero vector");
  }
  Tape& t = tape_of(a);
  const Var in[] = {a};
  return t.record(std::move(value), in, [a](Tape& tape, const Tensor& g) {
    const Tensor& av = tape.value(a);
    const Eigen::ArrayXd n = av.rowwise().norm().array();
    tape.accumulate(a, Tensor((av.array().colwise() * (g.col(0).array() / n)).matrix()));
  });
}

Var normalize_rows(const Var& a) {
  const Eigen::VectorXd n = a.value().rowwise().norm();
  if (n.size() > 0 && !(n.minCoeff() >= 1e-12)) {
    throw DegenerateInput("normalizing a (near-)zero vector");
  }
  Tensor value = (a.value().array().colwise() / n.array()).matrix();
  Tape& t = tape_of(a);
  const Var in[] = {a};
  return t.record(std::move(value), in, [a](Tape& tape, const Tensor& g) {
    const Tensor& av = tape.value(a);
    const Eigen::ArrayXd nn = av.rowwise().norm().array();
    const Tensor y = (av.array().colwise() / nn).matrix();
    const Eigen::ArrayXd yg = y.cwiseProduct(g).rowwise().sum().array();
    const Tensor tangential = g - Tensor((y.array().colwise() * yg).matrix());
    tape.accumulate(a, Tensor((tangential.array().colwise() / nn).matrix()));
  });
}

Var rowwise(const Var& a, Eigen::Index out_cols, const RowFn& fn) {
  Tape& t = tape_of(a);
  const Eigen::Index rows = a.rows();
  const Eigen::Index in_cols = a.cols();
  Tensor value(rows, out_cols);
  const bool need_jac = t.recording() && t.needs_grad(a);
  Tensor jac = need_jac ? Tensor(rows, out_cols * in_cols) : Tensor();
  const Tensor& in = a.value();
  for (Eigen::Index i = 0; i < rows; ++i) {
    fn(in.row(i).data(), value.row(i).data(), need_jac ? jac.row(i).data() : nullptr);
  }
  const Var inputs[] = {a};
  return t.record(std::move(value), inputs, [a, jac = std::move(jac), out_cols, in_cols](Tape& tape, const Tensor& g) {
    Tensor dx(g.rows(), in_cols);
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      const Eigen::Map<const Tensor> j(jac.row(i).data(), out_cols, in_cols);
      dx.row(i) = g.row(i) * j;
    }
    tape.accumulate(a, dx);
  });
}

Var batched_matvec4(const Var& w, const Var& q) {
  Tape& t = tape_of(w, q);
  if (w.cols() != 16 || q.cols() != 4 || w.rows() != q.rows()) throw std::invalid_argument("batched_matvec4: shape");
  Tensor value(q.rows(), 4);
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    const Eigen::Map<const Mat4r> m(w.value().row(i).data());
    value.row(i) = (m * q.value().row(i).transpose()).transpose();
  }
  const Var in[] = {w, q};
  return t.record(std::move(value), in, [w, q](Tape& tape, const Tensor& g) {
    const Tensor& wv = tape.value(w);
    const Tensor& qv = tape.value(q);
    if (tape.needs_grad(w)) {
      Tensor dw(wv.rows(), 16);
      for (Eigen::Index i = 0; i < wv.rows(); ++i) {
        Eigen::Map<Mat4r> d(dw.row(i).data());
        d = g.row(i).transpose() * qv.row(i);
      }
      tape.accumulate(w, dw);
    }
    if (tape.needs_grad(q)) {
      Tensor dq(qv.rows(), 4);
      for (Eigen::Index i = 0; i < qv.rows(); ++i) {
        const Eigen::Map<const Mat4r> m(wv.row(i).data());
        dq.row(i) = g.row(i) * m;
      }
      tape.accumulate(q, dq);
    }
  });
}

Var batched_logabsdet4(const Var& w) {
  if (w.cols() != 16) throw std::invalid_argument("batched_logabsdet4: rows must hold 4x4 matrices");
  Tensor value(w.rows(), 1);
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    const Eigen::Map<const Mat4r> m(w.value().row(i).data());
    value(i, 0) = std::log(std::abs(m.determinant()));
  }
  return unary(w, std::move(value), [](const Tensor& in, const Tensor& g) {
    Tensor dw(in.rows(), 16);
    for (Eigen::Index i = 0; i < in.rows(); ++i) {
      const Eigen::Map<const Mat4r> m(in.row(i).data());
      Eigen::Map<Mat4r> d(dw.row(i).data());
      d = g(i, 0) * Mat4r(m.inverse().transpose());
    }
    return dw;
  });
}

}  // namespace so3flow::ad
