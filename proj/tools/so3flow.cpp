// so3flow: train, evaluate and sample rotation flows from a JSON run config.

#include "so3flow/config.hpp"
#include "so3flow/metrics.hpp"
#include "so3flow/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

using namespace so3flow;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitAborted = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config;
  std::string checkpoint;
  std::optional<long long> n;
  std::string out;
  std::optional<std::uint64_t> seed;
};

struct Context {
  RunConfig config;
  std::filesystem::path out;
  std::string hash;
};

Context make_context(const Options& o, bool config_required) {
  Context c;
  const std::filesystem::path beside =
      o.checkpoint.empty() ? std::filesystem::path() : std::filesystem::path(o.checkpoint).parent_path() / "config.json";
  if (!o.config.empty()) {
    c.config = load_run_config(o.config);
  } else if (config_required) {
    throw UsageError("--config is required");
  } else if (!beside.empty() && std::filesystem::exists(beside)) {
    c.config = load_run_config(beside);
  }
  if (o.seed) c.config.seed = *o.seed;
  if (!o.out.empty()) {
    c.out = o.out;
  } else if (const char* env = std::getenv("SO3FLOW_OUT_DIR"); env && *env) {
    c.out = env;
  } else {
    c.out = c.config.output_dir;
  }
  c.config.output_dir = c.out.string();
  c.hash = config_hash(c.config);
  std::filesystem::create_directories(c.out);
  std::ofstream(c.out / "config.json") << to_json(c.config) << "\n";
  std::ofstream(c.out / "VERSION") << SO3FLOW_VERSION << "\n";
  return c;
}

Checkpoint load_model(const Options& o, const Context& ctx) {
  if (o.checkpoint.empty()) throw UsageError("--checkpoint is required");
  Checkpoint ck = [&] {
    try {
      return load_checkpoint(o.checkpoint);
    } catch (const std::exception& e) {
      throw UsageError(e.what());
    }
  }();
  if (!o.config.empty() && !(ck.model.architecture() == ctx.config.model)) {
    throw UsageError("checkpoint architecture " + architecture_to_json(ck.model.architecture()) +
                     " does not match the config model " + architecture_to_json(ctx.config.model));
  }
  return ck;
}

std::size_t count_option(const Options& o, std::size_t fallback) {
  if (!o.n) return fallback;
  if (*o.n <= 0) throw UsageError("--n must be a positive count");
  return static_cast<std::size_t>(*o.n);
}

// One-hot condition rows for a conditional model, else a single empty entry.
std::vector<std::optional<ad::Tensor>> conditions(const FlowModel& model) {
  const int k = model.architecture().cond_dim;
  if (k == 0) return {std::nullopt};
  std::vector<std::optional<ad::Tensor>> out;
  for (int i = 0; i < k; ++i) {
    ad::Tensor c = ad::Tensor::Zero(1, k);
    c(0, i) = 1.0;
    out.emplace_back(c);
  }
  return out;
}

const ad::Tensor* ptr(const std::optional<ad::Tensor>& c) { return c ? &*c : nullptr; }

class Reports {
 public:
  Reports(std::filesystem::path path, std::string hash) : path_(std::move(path)), hash_(std::move(hash)) {}

  void add(const std::string& metric, double value, std::optional<double> err = {}, std::optional<int> cond = {}) {
    json r{{"metric", metric}, {"value", value}, {"stderr", err ? json(*err) : json(nullptr)}, {"config_hash", hash_}};
    if (cond) r["condition"] = *cond;
    std::cout << r.dump() << "\n";
    records_.push_back(std::move(r));
  }

  ~Reports() { std::ofstream(path_) << records_.dump(2) << "\n"; }

 private:
  std::filesystem::path path_;
  std::string hash_;
  json records_ = json::array();
};

int cmd_train(const Options& o) {
  Context ctx = make_context(o, true);
  const RunConfig& cfg = ctx.config;
  const std::vector<TargetSpec> targets = cfg.build_targets();
  const Dataset data = make_dataset(targets, cfg.train, cfg.seed, grid_with_size(cfg.eval.envelope_grid_size));

  FlowModel model(cfg.model, cfg.seed);
  AdamState adam;
  int start = 0;
  if (!o.checkpoint.empty()) {
    Checkpoint ck = load_model(o, ctx);
    model = std::move(ck.model);
    adam = std::move(ck.adam);
    start = ck.step;
  }
  TrainOutputs outputs{ctx.out / "metrics.csv", ctx.out, [&](const MetricsRow& row) {
                         if ((row.step + 1) % 1000 == 0) {
                           std::cerr << "step " << row.step + 1 << " nll " << row.nll << "\n";
                         }
                       }};
  try {
    train(model, adam, start, data, cfg.train, cfg.seed, outputs);
  } catch (const TrainingAborted& e) {
    std::cerr << "so3flow: " << e.what() << "\n";
    return kExitAborted;
  }
  Reports reports(ctx.out / "train_report.json", ctx.hash);
  const ad::Tensor* cond = data.conditional() ? &data.test_cond : nullptr;
  reports.add("test_nll", -avg_log_likelihood(model, data.test, cond, cfg.eval.threads));
  return 0;
}

int cmd_eval(const Options& o) {
  Context ctx = make_context(o, false);
  const Checkpoint ck = load_model(o, ctx);
  const RunConfig& cfg = ctx.config;
  const FlowModel& model = ck.model;
  std::vector<TargetSpec> targets = cfg.build_targets();
  if (model.architecture().cond_dim > 0 && targets.size() != static_cast<std::size_t>(model.architecture().cond_dim)) {
    throw UsageError("conditional checkpoint needs a config listing its targets");
  }
  const SO3Grid grid = grid_with_size(cfg.eval.grid_size);
  const Dataset data = make_dataset(targets, cfg.train, cfg.seed, grid_with_size(cfg.eval.envelope_grid_size));
  const std::size_t n_samples = count_option(o, cfg.eval.samples);
  const std::vector<std::optional<ad::Tensor>> conds = conditions(model);
  const std::size_t per = data.test.size() / conds.size();

  Reports reports(ctx.out / "eval.json", ctx.hash);
  for (std::size_t i = 0; i < conds.size(); ++i) {
    const std::optional<int> tag = conds[i] ? std::optional<int>(static_cast<int>(i)) : std::nullopt;
    const ad::Tensor* c = ptr(conds[i]);
    const TargetSpec& target = targets[conds.size() > 1 ? i : 0];
    const std::span<const Rotation> test(data.test.data() + i * per, per);
    reports.add("avg_log_likelihood", avg_log_likelihood(model, test, c, cfg.eval.threads), {}, tag);
    reports.add("target_entropy", target_entropy(target, grid), {}, tag);
    reports.add("normalization", normalization_audit(model, grid, c, cfg.eval.threads), {}, tag);
    reports.add("quadrature_entropy", quadrature_entropy(model, grid, c, cfg.eval.threads), {}, tag);
    Rng rng(cfg.seed + 0x5a17 + i);
    const std::vector<FlowSample> samples = model.sample(n_samples, rng, c, cfg.eval.tol, cfg.eval.threads);
    std::vector<Rotation> rs;
    for (const FlowSample& s : samples) rs.push_back(s.rotation);
    const SymmetrySet gt = symmetry_set_for(target);
    reports.add("spread_deg", spread_deg(rs, gt), {}, tag);
    if (gt.discretization_deg > 0) reports.add("spread_discretization_deg", gt.discretization_deg, {}, tag);
  }
  return 0;
}

int cmd_sample(const Options& o) {
  Context ctx = make_context(o, false);
  const Checkpoint ck = load_model(o, ctx);
  const std::size_t n = count_option(o, 0);
  if (n == 0) throw UsageError("--n is required");
  std::ofstream out(ctx.out / "samples.jsonl");
  const auto conds = conditions(ck.model);
  for (std::size_t i = 0; i < conds.size(); ++i) {
    Rng rng(ctx.config.seed + i);
    for (const FlowSample& s : ck.model.sample(n, rng, ptr(conds[i]), ctx.config.eval.tol, ctx.config.eval.threads)) {
      const Vec4 q = matrix_to_quat(s.rotation).canonical().coeffs();
      json r{{"quat", {q[0], q[1], q[2], q[3]}}, {"log_prob", s.log_prob}};
      if (conds[i]) r["condition"] = i;
      out << r.dump() << "\n";
    }
  }
  std::cout << (ctx.out / "samples.jsonl").string() << "\n";
  return 0;
}

int cmd_entropy(const Options& o) {
  Context ctx = make_context(o, false);
  const Checkpoint ck = load_model(o, ctx);
  const std::size_t n = count_option(o, ctx.config.eval.samples);
  if (n < 2) throw UsageError("--n must be >= 2");
  Reports reports(ctx.out / "entropy.json", ctx.hash);
  const auto conds = conditions(ck.model);
  for (std::size_t i = 0; i < conds.size(); ++i) {
    Rng rng(ctx.config.seed + i);
    const Estimate e = mc_entropy(ck.model, n, rng, ptr(conds[i]), ctx.config.eval.tol, ctx.config.eval.threads);
    reports.add("mc_entropy", e.value, e.stderr_, conds[i] ? std::optional<int>(static_cast<int>(i)) : std::nullopt);
  }
  return 0;
}

void write_viz(std::ostream& out, const Rotation& r, double weight) {
  const auto [dir, tilt] = hopf_decompose(r);
  out << json{{"dir", {dir.x(), dir.y(), dir.z()}}, {"tilt", tilt}, {"weight", weight}}.dump() << "\n";
}

int cmd_export_viz(const Options& o) {
  Context ctx = make_context(o, false);
  std::ofstream out(ctx.out / "viz.jsonl");
  const std::optional<std::size_t> n = o.n ? std::optional(count_option(o, 0)) : std::nullopt;
  constexpr std::size_t kGridPoints = 50000;
  if (!o.checkpoint.empty()) {
    const Checkpoint ck = load_model(o, ctx);
    const auto cond = conditions(ck.model).front();
    if (n) {
      Rng rng(ctx.config.seed);
      for (const FlowSample& s : ck.model.sample(*n, rng, ptr(cond), ctx.config.eval.tol, ctx.config.eval.threads)) {
        write_viz(out, s.rotation, 1.0 / static_cast<double>(*n));
      }
    } else {
      const SO3Grid grid = grid_with_size(kGridPoints);
      const std::vector<double> lp = ck.model.log_prob(grid.points, ptr(cond), ctx.config.eval.threads);
      for (std::size_t i = 0; i < grid.size(); ++i) write_viz(out, grid.points[i], std::exp(lp[i]));
    }
  } else {
    if (o.config.empty()) throw UsageError("export-viz needs --checkpoint or --config");
    const TargetSpec target = ctx.config.targets.front().build();
    if (n) {
      Rng rng(ctx.config.seed);
      for (const Rotation& r : target_sample(target, *n, rng, grid_with_size(ctx.config.eval.envelope_grid_size))) {
        write_viz(out, r, 1.0 / static_cast<double>(*n));
      }
    } else {
      for (const Rotation& r : grid_with_size(kGridPoints).points) write_viz(out, r, std::exp(target_log_prob(target, r)));
    }
  }
  std::cout << (ctx.out / "viz.jsonl").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Normalizing flows on SO(3)"};
  app.set_version_flag("--version", std::string(SO3FLOW_VERSION));
  app.require_subcommand(1);
  Options o;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Run config (JSON)");
    sub->add_option("--checkpoint", o.checkpoint, "Model checkpoint");
    sub->add_option("--n", o.n, "Sample count");
    sub->add_option("--out", o.out, "Output directory (overrides config and SO3FLOW_OUT_DIR)");
    sub->add_option("--seed", o.seed, "Seed (overrides config)");
  };
  std::function<int(const Options&)> run;
  const std::vector<std::pair<std::string, std::function<int(const Options&)>>> commands{
      {"train", cmd_train},     {"eval", cmd_eval},           {"sample", cmd_sample},
      {"entropy", cmd_entropy}, {"export-viz", cmd_export_viz}};
  const std::map<std::string, std::string> help{
      {"train", "Generate data, train and write checkpoint + metrics CSV"},
      {"eval", "Held-out log-likelihood, entropy, normalization and spread"},
      {"sample", "Draw samples as JSONL (canonical quaternion, log_prob)"},
      {"entropy", "Monte-Carlo entropy with standard error"},
      {"export-viz", "Hopf (dir, tilt, weight) records for plotting"}};
  for (const auto& [name, fn] : commands) {
    CLI::App* sub = app.add_subcommand(name, help.at(name));
    add_common(sub);
    sub->callback([&run, f = fn] { run = f; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }
  try {
    return run(o);
  } catch (const ConfigError& e) {
    std::cerr << "so3flow: " << e.what() << "\n";
    return kExitUsage;
  } catch (const UsageError& e) {
    std::cerr << "so3flow: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "so3flow: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "so3flow: " << e.what() << "\n";
    return 1;
  }
}
