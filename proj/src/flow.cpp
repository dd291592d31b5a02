#include "so3flow/flow.hpp"

#include "so3flow/parallel.hpp"

#include <stdexcept>
#include <string>

namespace so3flow {

using ad::Tensor;
using ad::Var;

namespace {

constexpr std::size_t kChunk = 512;

Eigen::MatrixX3d first_columns(std::span<const Rotation> rs) {
  Eigen::MatrixX3d c1(static_cast<Eigen::Index>(rs.size()), 3);
  for (std::size_t i = 0; i < rs.size(); ++i) c1.row(static_cast<Eigen::Index>(i)) = rs[i].col(0).transpose();
  return c1;
}

// R P with columns (c_s, c_s+1, c_s+2); a proper rotation, so Haar-preserving.
Rotation cycle(const Rotation& r, int s) {
  if (s == 0) return r;
  Mat3 m;
  for (int k = 0; k < 3; ++k) m.col(k) = r.col((k + s) % 3);
  return Rotation::unchecked(m);
}

Var cycle(const Var& x, int s) {
  if (s == 0) return x;
  const Var parts[] = {ad::cols(x, 3 * (s % 3), 3), ad::cols(x, 3 * ((s + 1) % 3), 3), ad::cols(x, 3 * ((s + 2) % 3), 3)};
  return ad::concat_cols(parts);
}

}  // namespace

FlowArchitecture FlowArchitecture::desk() { return FlowArchitecture{}; }

FlowArchitecture FlowArchitecture::paper() {
  FlowArchitecture a;
  a.blocks = 24;
  a.components = 64;
  return a;
}

void FlowArchitecture::validate() const {
  if (blocks < 0) throw std::invalid_argument("blocks must be >= 0");
  if (components < 1) throw std::invalid_argument("components must be >= 1");
  for (int h : hidden) {
    if (h < 1) throw std::invalid_argument("hidden widths must be >= 1");
  }
  if (cond_dim < 0) throw std::invalid_argument("cond_dim must be >= 0");
  if (cond_dim > 0 && affine && conditional_affine != ConditionalAffine::None &&
      affine_param != AffineParameterization::Unconstrained) {
    throw std::invalid_argument("conditional affine layers require the unconstrained parameterization");
  }
}

FlowModel::FlowModel(const FlowArchitecture& arch, std::uint64_t seed) : arch_(arch), seed_(seed) {
  arch_.validate();
  Rng rng(seed);
  for (int b = 0; b < arch_.blocks; ++b) {
    const std::string prefix = "block" + std::to_string(b);
    Block block;
    if (arch_.mobius) {
      block.mobius.emplace(store_, prefix + ".mobius", arch_.components, arch_.cond_dim, arch_.hidden, rng);
    }
    if (arch_.affine) {
      const bool conditional = arch_.cond_dim > 0 &&
                               (arch_.conditional_affine == ConditionalAffine::Every ||
                                (arch_.conditional_affine == ConditionalAffine::Head && b == 0));
      block.affine.emplace(store_, prefix + ".affine", arch_.affine_param, conditional ? arch_.cond_dim : 0,
                           arch_.hidden, rng);
    }
    blocks_.push_back(std::move(block));
  }
}

std::pair<Var, Var> FlowModel::forward(const BoundParams& params, const Var& rotations, const Var* cond) const {
  ad::Tape& tape = *rotations.tape();
  Var x = rotations;
  Var total = tape.constant(Tensor::Zero(rotations.rows(), 1));
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const Block& block = blocks_[b];
    if (block.mobius) {
      const int s = conditioner_column(static_cast<int>(b));
      auto [y, ld] = block.mobius->forward(params, cycle(x, s), cond);
      x = cycle(y, (3 - s) % 3);
      total = total + ld;
    }
    if (block.affine) {
      auto [q, ld] = block.affine->forward(params, matrix_to_quat_rows(x), block.affine->conditional() ? cond : nullptr);
      x = quat_to_matrix_rows(q);
      total = total + ld;
    }
  }
  return {x, total};
}

Tensor condition_rows(const Tensor& cond, std::size_t begin, std::size_t end) {
  const auto count = static_cast<Eigen::Index>(end - begin);
  if (cond.rows() == 1) return cond.replicate(count, 1);
  return cond.middleRows(static_cast<Eigen::Index>(begin), count);
}

std::vector<double> FlowModel::log_prob(std::span<const Rotation> xs, const Tensor* cond, int threads) const {
  if (arch_.cond_dim > 0) {
    if (cond == nullptr || cond->cols() != arch_.cond_dim ||
        (cond->rows() != 1 && cond->rows() != static_cast<Eigen::Index>(xs.size()))) {
      throw std::invalid_argument("log_prob: condition shape does not match the model");
    }
  }
  std::vector<double> out(xs.size());
  parallel_chunks(xs.size(), kChunk, threads, [&](std::size_t, std::size_t begin, std::size_t end) {
    ad::Tape tape(false);
    const BoundParams params = bind(tape, store_);
    const Var x = tape.constant(flatten_rotations(xs.subspan(begin, end - begin)));
    Var c;
    if (arch_.cond_dim > 0) c = tape.constant(condition_rows(*cond, begin, end));
    const Tensor& ld = forward(params, x, arch_.cond_dim > 0 ? &c : nullptr).second.value();
    for (std::size_t i = begin; i < end; ++i) out[i] = ld(static_cast<Eigen::Index>(i - begin), 0);
  });
  return out;
}

double FlowModel::log_prob(const Rotation& x, std::span<const double> cond) const {
  if (arch_.cond_dim == 0) return log_prob(std::span<const Rotation>(&x, 1)).front();
  Tensor c(1, static_cast<Eigen::Index>(cond.size()));
  for (std::size_t i = 0; i < cond.size(); ++i) c(0, static_cast<Eigen::Index>(i)) = cond[i];
  return log_prob(std::span<const Rotation>(&x, 1), &c).front();
}

std::vector<double> FlowModel::layer_log_dets(const Rotation& x, std::span<const double> cond) const {
  std::vector<double> out;
  Rotation r = x;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const Block& block = blocks_[b];
    if (block.mobius) {
      const int s = conditioner_column(static_cast<int>(b));
      auto [y, ld] = mobius_coupling_forward(cycle(r, s), *block.mobius, store_, cond);
      r = cycle(y, (3 - s) % 3);
      out.push_back(ld);
    }
    if (block.affine) {
      const std::span<const double> c = block.affine->conditional() ? cond : std::span<const double>{};
      auto [q, ld] = affine_forward(matrix_to_quat(r), *block.affine, store_, c);
      r = quat_to_matrix(q);
      out.push_back(ld);
    }
  }
  return out;
}

std::pair<Rotation, double> FlowModel::forward_to_base(const Rotation& x, std::span<const double> cond) const {
  Rotation r = x;
  double total = 0.0;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const Block& block = blocks_[b];
    if (block.mobius) {
      const int s = conditioner_column(static_cast<int>(b));
      auto [y, ld] = mobius_coupling_forward(cycle(r, s), *block.mobius, store_, cond);
      r = cycle(y, (3 - s) % 3);
      total += ld;
    }
    if (block.affine) {
      const std::span<const double> c = block.affine->conditional() ? cond : std::span<const double>{};
      auto [q, ld] = affine_forward(matrix_to_quat(r), *block.affine, store_, c);
      r = quat_to_matrix(q);
      total += ld;
    }
  }
  return {r, total};
}

std::vector<Rotation> FlowModel::inverse(std::span<const Rotation> zs, const Tensor* cond, double tol,
                                         int threads) const {
  if (arch_.cond_dim > 0 && (cond == nullptr || cond->cols() != arch_.cond_dim)) {
    throw std::invalid_argument("inverse: condition shape does not match the model");
  }
  std::vector<Rotation> out(zs.begin(), zs.end());
  parallel_chunks(zs.size(), kChunk, threads, [&](std::size_t, std::size_t begin, std::size_t end) {
    const std::span<Rotation> rs(out.data() + begin, end - begin);
    Tensor c;
    if (arch_.cond_dim > 0) c = condition_rows(*cond, begin, end);
    for (std::size_t b = blocks_.size(); b-- > 0;) {
      const Block* it = &blocks_[b];
      if (it->affine) {
        const QuaternionAffineLayer& layer = *it->affine;
        if (layer.conditional()) {
          const Tensor w = layer.matrices(store_, c);
          for (std::size_t i = 0; i < rs.size(); ++i) {
            const Mat4 m = Eigen::Map<const Eigen::Matrix<double, 4, 4, Eigen::RowMajor>>(
                w.row(static_cast<Eigen::Index>(i)).data());
            rs[i] = quat_to_matrix(affine_inverse(matrix_to_quat(rs[i]), m));
          }
        } else {
          const Mat4 m = layer.matrix(store_);
          for (Rotation& r : rs) r = quat_to_matrix(affine_inverse(matrix_to_quat(r), m));
        }
      }
      if (it->mobius) {
        const int s = conditioner_column(static_cast<int>(b));
        for (Rotation& r : rs) r = cycle(r, s);
        const std::vector<MobiusConditioning> mcs =
            it->mobius->conditioning(store_, first_columns(rs), arch_.cond_dim > 0 ? &c : nullptr);
        for (std::size_t i = 0; i < rs.size(); ++i) rs[i] = cycle(mobius_coupling_inverse(rs[i], mcs[i], tol), (3 - s) % 3);
      }
    }
  });
  return out;
}

Rotation FlowModel::inverse_from_base(const Rotation& z, std::span<const double> cond, double tol) const {
  if (arch_.cond_dim == 0) return inverse(std::span<const Rotation>(&z, 1), nullptr, tol).front();
  Tensor c(1, static_cast<Eigen::Index>(cond.size()));
  for (std::size_t i = 0; i < cond.size(); ++i) c(0, static_cast<Eigen::Index>(i)) = cond[i];
  return inverse(std::span<const Rotation>(&z, 1), &c, tol).front();
}

std::vector<FlowSample> FlowModel::sample(std::size_t n, Rng& rng, const Tensor* cond, double tol,
                                          int threads) const {
  if (n == 0) throw std::invalid_argument("sample: n must be >= 1");
  std::vector<Rotation> zs;
  zs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) zs.push_back(sample_uniform(rng));
  const std::vector<Rotation> xs = inverse(zs, cond, tol, threads);
  const std::vector<double> lp = log_prob(xs, cond, threads);
  std::vector<FlowSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back({xs[i], lp[i]});
  return out;
}

void FlowModel::randomize(Rng& rng, double scale) {
  for (const Block& block : blocks_) {
    if (block.mobius) {
      block.mobius->omega_net().randomize_output(store_, rng, scale);
      block.mobius->weight_net().randomize_output(store_, rng, scale);
    }
    if (block.affine) block.affine->randomize(store_, rng, 0.3 * scale);
  }
}

const Rotation& best_sample(std::span<const FlowSample> samples) {
  if (samples.empty()) throw std::invalid_argument("best_sample: empty sample list");
  std::size_t best = 0;
  for (std::size_t i = 1; i < samples.size(); ++i) {
    if (samples[i].log_prob > samples[best].log_prob) best = i;
  }
  return samples[best].rotation;
}

}  // namespace so3flow
