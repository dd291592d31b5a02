#include "so3flow/training.hpp"

#include "so3flow/config.hpp"
#include "so3flow/parallel.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <random>

namespace so3flow {

namespace {

constexpr char kMagic[8] = {'S', 'O', '3', 'F', 'C', 'K', 'P', 'T'};

Rng step_rng(std::uint64_t seed, int step) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step), 0x6d62u};
  return Rng(seq);
}

bool all_finite(const ad::Tensor& t) { return t.allFinite(); }

void write_tensor(std::ostream& out, const ad::Tensor& t) {
  out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
}

void read_tensor(std::istream& in, ad::Tensor& t) {
  in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!in) throw std::runtime_error("checkpoint is truncated");
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw std::invalid_argument("train.lr must be a positive number");
  if (batch_size < 1) throw std::invalid_argument("train.batch_size must be >= 1");
  if (steps < 0) throw std::invalid_argument("train.steps must be >= 0");
  if (!(decay > 0.0)) throw std::invalid_argument("train.decay must be > 0");
  if (!std::is_sorted(milestones.begin(), milestones.end())) {
    throw std::invalid_argument("train.milestones must be increasing");
  }
  if (checkpoint_interval < 0) throw std::invalid_argument("train.checkpoint_interval must be >= 0");
  if (threads < 0) throw std::invalid_argument("train.threads must be >= 0");
  if (shards < 1) throw std::invalid_argument("train.shards must be >= 1");
  if (dataset_size < 2) throw std::invalid_argument("train.dataset_size must be >= 2");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw std::invalid_argument("train.test_fraction must be in (0, 1)");
  }
}

double learning_rate(const TrainConfig& cfg, int step) {
  double lr = cfg.lr;
  for (int m : cfg.milestones) {
    if (step >= m) lr *= cfg.decay;
  }
  return lr;
}

void adam_step(ParameterStore& params, const ad::GradientMap& grads, AdamState& state, double lr) {
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  for (const auto& [id, g] : grads) {
    if (!all_finite(g)) throw NonFiniteError("non-finite gradient in parameter '" + params.name(id) + "'");
  }
  if (state.m.empty()) {
    for (const ad::Tensor& v : params.values()) {
      state.m.push_back(ad::Tensor::Zero(v.rows(), v.cols()));
      state.v.push_back(ad::Tensor::Zero(v.rows(), v.cols()));
    }
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (const auto& [id, g] : grads) {
    const auto i = static_cast<std::size_t>(id);
    ad::Tensor& m = state.m[i];
    ad::Tensor& v = state.v[i];
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g.cwiseProduct(g);
    params.value(id).array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
}

double clip_gradients(ad::GradientMap& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [id, g] : grads) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [id, g] : grads) g *= s;
  }
  return norm;
}

double nll_loss(const FlowModel& model, std::span<const Rotation> batch, const ad::Tensor* cond) {
  const std::vector<double> lp = model.log_prob(batch, cond);
  double s = 0.0;
  for (double v : lp) s += v;
  return -s / static_cast<double>(lp.size());
}

std::pair<double, ad::GradientMap> nll_and_gradient(const FlowModel& model, std::span<const Rotation> batch,
                                                    const ad::Tensor* cond, int shards, int threads) {
  if (batch.empty()) throw std::invalid_argument("nll_and_gradient: empty batch");
  const std::size_t n = batch.size();
  const std::size_t shard_size = (n + static_cast<std::size_t>(shards) - 1) / static_cast<std::size_t>(shards);
  const std::size_t count = (n + shard_size - 1) / shard_size;
  std::vector<double> losses(count);
  std::vector<ad::GradientMap> parts(count);
  parallel_chunks(n, shard_size, threads, [&](std::size_t c, std::size_t begin, std::size_t end) {
    ad::Tape tape;
    const BoundParams params = bind(tape, model.params());
    const ad::Var x = tape.constant(flatten_rotations(batch.subspan(begin, end - begin)));
    ad::Var cv;
    if (cond) cv = tape.constant(condition_rows(*cond, begin, end));
    const ad::Var ld = model.forward(params, x, cond ? &cv : nullptr).second;
    const ad::Var loss = ad::scale(ad::sum_all(ld), -1.0 / static_cast<double>(n));
    losses[c] = loss.item();
    parts[c] = tape.backward(loss);
  });
  double loss = 0.0;
  ad::GradientMap grads;
  for (std::size_t c = 0; c < count; ++c) {
    loss += losses[c];
    for (auto& [id, g] : parts[c]) {
      auto it = grads.find(id);
      if (it == grads.end()) {
        grads.emplace(id, std::move(g));
      } else {
        it->second += g;
      }
    }
  }
  return {loss, std::move(grads)};
}

Dataset make_dataset(std::span<const TargetSpec> targets, const TrainConfig& cfg, std::uint64_t seed,
                     const SO3Grid& envelope_grid) {
  if (targets.empty()) throw std::invalid_argument("make_dataset: no targets");
  Dataset d;
  const bool conditional = targets.size() > 1;
  const std::size_t n_test =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(cfg.test_fraction * cfg.dataset_size)));
  const std::size_t n_train = cfg.dataset_size - n_test;
  const auto k = static_cast<Eigen::Index>(targets.size());
  if (conditional) {
    d.train_cond = ad::Tensor::Zero(static_cast<Eigen::Index>(n_train) * k, k);
    d.test_cond = ad::Tensor::Zero(static_cast<Eigen::Index>(n_test) * k, k);
  }
  for (std::size_t t = 0; t < targets.size(); ++t) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(t), 0xda7au};
    Rng rng(seq);
    const std::vector<Rotation> xs = target_sample(targets[t], cfg.dataset_size, rng, envelope_grid);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const bool test = i >= n_train;
      std::vector<Rotation>& dst = test ? d.test : d.train;
      if (conditional) (test ? d.test_cond : d.train_cond)(static_cast<Eigen::Index>(dst.size()), static_cast<Eigen::Index>(t)) = 1.0;
      dst.push_back(xs[i]);
    }
  }
  return d;
}

void write_metrics_header(std::ostream& out) { out << "step,nll,lr,wall_time_ms\n"; }

void write_metrics_row(std::ostream& out, const MetricsRow& row) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.3f\n", row.step, row.nll, row.lr, row.wall_time_ms);
  out << buf;
}

void save_checkpoint(const std::filesystem::path& path, const FlowModel& model, const AdamState& adam, int step) {
  const ParameterStore& store = model.params();
  nlohmann::json header;
  header["format_version"] = kCheckpointVersion;
  header["library_version"] = SO3FLOW_VERSION;
  header["architecture"] = nlohmann::json::parse(architecture_to_json(model.architecture()));
  header["seed"] = model.seed();
  header["step"] = step;
  header["adam_t"] = adam.t;
  header["has_adam"] = !adam.m.empty();
  nlohmann::json params = nlohmann::json::array();
  for (std::size_t i = 0; i < store.size(); ++i) {
    const ad::Tensor& v = store.value(static_cast<int>(i));
    params.push_back({{"name", store.name(static_cast<int>(i))}, {"rows", v.rows()}, {"cols", v.cols()}});
  }
  header["params"] = params;
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    out.write(kMagic, sizeof kMagic);
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t length = text.size();
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&length), sizeof length);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const ad::Tensor& v : store.values()) write_tensor(out, v);
    for (const ad::Tensor& m : adam.m) write_tensor(out, m);
    for (const ad::Tensor& v : adam.v) write_tensor(out, v);
    if (!out) throw std::runtime_error("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[sizeof kMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw std::runtime_error(path.string() + " is not a so3flow checkpoint");
  }
  std::uint32_t version = 0;
  std::uint64_t length = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&length), sizeof length);
  if (!in) throw std::runtime_error("checkpoint is truncated");
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  if (length > (1u << 26)) throw std::runtime_error("checkpoint header is corrupt");
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) throw std::runtime_error("checkpoint is truncated");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("checkpoint header is corrupt: ") + e.what());
  }
  const FlowArchitecture arch = architecture_from_json(header.at("architecture").dump());
  Checkpoint ck{FlowModel(arch, header.at("seed").get<std::uint64_t>()), AdamState{}, header.at("step").get<int>()};
  ParameterStore& store = ck.model.params();
  const nlohmann::json& params = header.at("params");
  if (params.size() != store.size()) throw std::runtime_error("checkpoint parameter count does not match its architecture");
  for (std::size_t i = 0; i < store.size(); ++i) {
    ad::Tensor& v = store.value(static_cast<int>(i));
    if (params[i].at("name").get<std::string>() != store.name(static_cast<int>(i)) ||
        params[i].at("rows").get<Eigen::Index>() != v.rows() || params[i].at("cols").get<Eigen::Index>() != v.cols()) {
      throw std::runtime_error("checkpoint parameter '" + params[i].at("name").get<std::string>() +
                               "' does not match its architecture");
    }
    read_tensor(in, v);
  }
  if (header.at("has_adam").get<bool>()) {
    ck.adam.t = header.at("adam_t").get<std::int64_t>();
    for (auto* moments : {&ck.adam.m, &ck.adam.v}) {
      for (const ad::Tensor& v : store.values()) {
        moments->push_back(ad::Tensor(v.rows(), v.cols()));
        read_tensor(in, moments->back());
      }
    }
  }
  return ck;
}

std::vector<MetricsRow> train(FlowModel& model, AdamState& adam, int start_step, const Dataset& data,
                              const TrainConfig& cfg, std::uint64_t seed, const TrainOutputs& outputs) {
  cfg.validate();
  if (data.train.empty()) throw std::invalid_argument("train: empty training set");
  const auto t0 = std::chrono::steady_clock::now();

  std::ofstream csv;
  if (!outputs.metrics_csv.empty()) {
    if (outputs.metrics_csv.has_parent_path()) std::filesystem::create_directories(outputs.metrics_csv.parent_path());
    const bool append = start_step > 0 && std::filesystem::exists(outputs.metrics_csv);
    csv.open(outputs.metrics_csv, append ? std::ios::app : std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot write " + outputs.metrics_csv.string());
    if (!append) write_metrics_header(csv);
  }
  auto save = [&](const std::string& name, int step) {
    if (!outputs.checkpoint_dir.empty()) save_checkpoint(outputs.checkpoint_dir / name, model, adam, step);
  };
  auto abort = [&](int step, const std::string& why) {
    if (csv) csv.flush();
    save("crash_checkpoint.bin", step);
    throw TrainingAborted("training aborted at step " + std::to_string(step) + ": " + why);
  };

  std::vector<MetricsRow> rows;
  std::vector<Rotation> batch(static_cast<std::size_t>(cfg.batch_size));
  ad::Tensor cond;
  if (data.conditional()) cond.resize(cfg.batch_size, data.train_cond.cols());
  std::uniform_int_distribution<std::size_t> pick(0, data.train.size() - 1);

  for (int step = start_step; step < cfg.steps; ++step) {
    Rng rng = step_rng(seed, step);
    for (int i = 0; i < cfg.batch_size; ++i) {
      const std::size_t j = pick(rng);
      batch[static_cast<std::size_t>(i)] = data.train[j];
      if (data.conditional()) cond.row(i) = data.train_cond.row(static_cast<Eigen::Index>(j));
    }
    const double lr = learning_rate(cfg, step);
    double loss = 0.0;
    try {
      auto [value, grads] = nll_and_gradient(model, batch, data.conditional() ? &cond : nullptr, cfg.shards, cfg.threads);
      loss = value;
      if (!std::isfinite(loss)) abort(step, "non-finite loss");
      clip_gradients(grads, cfg.clip);
      adam_step(model.params(), grads, adam, lr);
    } catch (const NonFiniteError& e) {
      abort(step, e.what());
    } catch (const DomainError& e) {
      abort(step, e.what());
    } catch (const std::domain_error& e) {
      abort(step, e.what());
    }
    const MetricsRow row{step, loss, lr,
                         std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count()};
    rows.push_back(row);
    if (csv) write_metrics_row(csv, row);
    if (outputs.on_step) outputs.on_step(row);
    if (cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0) {
      if (csv) csv.flush();
      save("checkpoint.bin", step + 1);
    }
  }
  save("checkpoint.bin", std::max(start_step, cfg.steps));
  return rows;
}

}  // namespace so3flow
