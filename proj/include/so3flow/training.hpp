#pragma once

#include "so3flow/distributions.hpp"
#include "so3flow/flow.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace so3flow {

struct TrainConfig {
  double lr = 1e-4;
  int batch_size = 64;
  int steps = 20000;
  std::vector<int> milestones;  // steps at which lr is multiplied by `decay`
  double decay = 0.1;
  double clip = 10.0;           // global L2 norm; <= 0 disables
  int checkpoint_interval = 0;  // 0 writes only the final checkpoint
  int threads = 1;
  int shards = 4;               // fixed batch partition; keeps gradients thread-count independent
  std::size_t dataset_size = 100000;
  double test_fraction = 0.1;

  /// Throws std::invalid_argument naming the first bad field.
  void validate() const;
};

/// Learning rate in effect at `step` (0-based).
double learning_rate(const TrainConfig& cfg, int step);

struct AdamState {
  std::vector<ad::Tensor> m;
  std::vector<ad::Tensor> v;
  std::int64_t t = 0;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One Adam update (beta1 0.9, beta2 0.999, eps 1e-8, bias-corrected).
/// Throws NonFiniteError naming the parameter if a gradient is not finite.
void adam_step(ParameterStore& params, const ad::GradientMap& grads, AdamState& state, double lr);

/// Scales gradients so their global L2 norm is at most max_norm; returns the
/// norm before clipping. Gradients are untouched when already within bounds.
double clip_gradients(ad::GradientMap& grads, double max_norm);

/// -mean log_prob over the batch.
double nll_loss(const FlowModel& model, std::span<const Rotation> batch, const ad::Tensor* cond = nullptr);

/// Loss and parameter gradients, computed over `shards` contiguous pieces of
/// the batch on separate tapes and summed in shard order.
std::pair<double, ad::GradientMap> nll_and_gradient(const FlowModel& model, std::span<const Rotation> batch,
                                                    const ad::Tensor* cond, int shards, int threads);

struct Dataset {
  std::vector<Rotation> train;
  std::vector<Rotation> test;
  ad::Tensor train_cond;  // empty for unconditional data
  ad::Tensor test_cond;

  bool conditional() const { return train_cond.size() > 0; }
};

/// Draws `cfg.dataset_size` samples from each target (one-hot conditions
/// when more than one target is given) and holds out `test_fraction`.
Dataset make_dataset(std::span<const TargetSpec> targets, const TrainConfig& cfg, std::uint64_t seed,
                     const SO3Grid& envelope_grid);

struct MetricsRow {
  int step = 0;
  double nll = 0.0;
  double lr = 0.0;
  double wall_time_ms = 0.0;
};

void write_metrics_header(std::ostream& out);
void write_metrics_row(std::ostream& out, const MetricsRow& row);

struct Checkpoint {
  FlowModel model;
  AdamState adam;
  int step = 0;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const FlowModel& model, const AdamState& adam, int step);
/// Throws std::runtime_error for unreadable, truncated or mismatched files.
Checkpoint load_checkpoint(const std::filesystem::path& path);

class TrainingAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainOutputs {
  std::filesystem::path metrics_csv;     // empty: not written
  std::filesystem::path checkpoint_dir;  // empty: no checkpoints
  std::function<void(const MetricsRow&)> on_step;
};

/**
 * @brief Minibatch maximum-likelihood training.
 *
 * Minibatch indices for step s are drawn from an RNG seeded by (seed, s), so a
 * run resumed from a checkpoint continues the uninterrupted trajectory. On a
 * non-finite loss or gradient a crash checkpoint is written and
 * TrainingAborted is thrown.
 */
std::vector<MetricsRow> train(FlowModel& model, AdamState& adam, int start_step, const Dataset& data,
                              const TrainConfig& cfg, std::uint64_t seed, const TrainOutputs& outputs = {});

}  // namespace so3flow
