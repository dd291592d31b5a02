#include "so3flow/config.hpp"

#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace so3flow {

namespace {

using nlohmann::json;

int line_at(const std::string& text, std::size_t offset) {
  offset = std::min(offset, text.size());
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(offset), '\n'));
}

// Line of the last key in `path`, found by scanning for each key in turn.
int locate(const std::string& text, const std::vector<std::string>& path) {
  std::size_t pos = 0;
  for (const std::string& key : path) {
    const std::string quoted = "\"" + key + "\"";
    std::size_t found = pos;
    for (;;) {
      found = text.find(quoted, found);
      if (found == std::string::npos) return 0;
      std::size_t after = found + quoted.size();
      while (after < text.size() && std::isspace(static_cast<unsigned char>(text[after]))) ++after;
      if (after < text.size() && text[after] == ':') break;
      found += quoted.size();
    }
    pos = found + quoted.size();
  }
  return line_at(text, pos);
}

class Reader {
 public:
  Reader(const std::string& text, std::string source) : text_(text), source_(std::move(source)) {}

  [[noreturn]] void fail(const std::vector<std::string>& path, const std::string& message) const {
    std::string dotted;
    for (const std::string& p : path) dotted += (dotted.empty() ? "" : ".") + p;
    const int line = locate(text_, path);
    std::string where = source_;
    if (line > 0) where += ":" + std::to_string(line);
    throw ConfigError(where + ": " + dotted + ": " + message, line);
  }

  void check_keys(const json& obj, const std::vector<std::string>& path, const std::set<std::string>& allowed) const {
    if (!obj.is_object()) fail(path, "expected an object");
    for (const auto& [key, value] : obj.items()) {
      if (!allowed.count(key)) {
        std::vector<std::string> p = path;
        p.push_back(key);
        fail(p, "unknown key");
      }
    }
  }

  template <typename T>
  void read(const json& obj, const std::vector<std::string>& path, const std::string& key, T& out) const {
    if (!obj.contains(key)) return;
    std::vector<std::string> p = path;
    p.push_back(key);
    const json& v = obj.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) fail(p, "expected true or false");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) fail(p, "expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0) fail(p, "must be >= 0");
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) fail(p, "expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) fail(p, "expected a string");
    }
    out = v.get<T>();
  }

  template <typename Fn>
  void guard(const std::vector<std::string>& path, Fn&& fn) const {
    try {
      fn();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      // Messages like "train.lr must be ..." name the field; anchor to it.
      const std::string what = e.what();
      std::vector<std::string> field = path;
      if (!path.empty() && what.rfind(path.front() + ".", 0) == 0) {
        const std::size_t end = what.find(' ');
        field = {path.front(), what.substr(path.front().size() + 1, end - path.front().size() - 1)};
        fail(field, what.substr(end + 1));
      }
      fail(field, what);
    }
  }

 private:
  const std::string& text_;
  std::string source_;
};

AffineParameterization parse_affine_param(const std::string& s) {
  if (s == "unconstrained") return AffineParameterization::Unconstrained;
  if (s == "lu") return AffineParameterization::LU;
  throw std::invalid_argument("expected 'unconstrained' or 'lu', got '" + s + "'");
}

ConditionalAffine parse_conditional_affine(const std::string& s) {
  if (s == "none") return ConditionalAffine::None;
  if (s == "head") return ConditionalAffine::Head;
  if (s == "every") return ConditionalAffine::Every;
  throw std::invalid_argument("expected 'none', 'head' or 'every', got '" + s + "'");
}

json arch_json(const FlowArchitecture& a) {
  return {{"blocks", a.blocks},
          {"components", a.components},
          {"hidden", a.hidden},
          {"mobius", a.mobius},
          {"affine", a.affine},
          {"affine_param", to_string(a.affine_param)},
          {"cond_dim", a.cond_dim},
          {"conditional_affine", to_string(a.conditional_affine)},
          {"cycle_columns", a.cycle_columns}};
}

void read_arch(const Reader& r, const json& obj, const std::vector<std::string>& path, FlowArchitecture& a,
               bool allow_preset) {
  std::set<std::string> keys{"blocks",       "components",         "hidden",       "mobius",
                             "affine_param", "conditional_affine", "cycle_columns", "affine"};
  if (allow_preset) {
    keys.insert("preset");
  } else {
    keys.insert("cond_dim");
  }
  r.check_keys(obj, path, keys);
  if (obj.contains("preset")) {
    std::string preset;
    r.read(obj, path, "preset", preset);
    if (preset == "desk") {
      a = FlowArchitecture::desk();
    } else if (preset == "paper") {
      a = FlowArchitecture::paper();
    } else {
      auto p = path;
      p.push_back("preset");
      r.fail(p, "expected 'desk' or 'paper', got '" + preset + "'");
    }
  }
  r.read(obj, path, "blocks", a.blocks);
  r.read(obj, path, "components", a.components);
  if (obj.contains("hidden")) {
    auto p = path;
    p.push_back("hidden");
    const json& h = obj.at("hidden");
    if (!h.is_array()) r.fail(p, "expected an array of integers");
    a.hidden.clear();
    for (const json& v : h) {
      if (!v.is_number_integer()) r.fail(p, "expected an array of integers");
      a.hidden.push_back(v.get<int>());
    }
  }
  r.read(obj, path, "mobius", a.mobius);
  r.read(obj, path, "affine", a.affine);
  r.read(obj, path, "cycle_columns", a.cycle_columns);
  r.read(obj, path, "cond_dim", a.cond_dim);
  if (obj.contains("affine_param")) {
    std::string s;
    r.read(obj, path, "affine_param", s);
    r.guard(path, [&] { a.affine_param = parse_affine_param(s); });
  }
  if (obj.contains("conditional_affine")) {
    std::string s;
    r.read(obj, path, "conditional_affine", s);
    r.guard(path, [&] { a.conditional_affine = parse_conditional_affine(s); });
  }
}

TargetConfig read_target(const Reader& r, const json& obj, const std::vector<std::string>& path) {
  r.check_keys(obj, path, {"kind", "kappa", "mode"});
  TargetConfig t;
  if (obj.contains("kind")) {
    std::string s;
    r.read(obj, path, "kind", s);
    auto p = path;
    p.push_back("kind");
    r.guard(p, [&] { t.kind = parse_target_kind(s); });
  }
  r.read(obj, path, "kappa", t.kappa);
  if (!(t.kappa > 0.0)) {
    auto p = path;
    p.push_back("kappa");
    r.fail(p, "must be > 0");
  }
  if (obj.contains("mode")) {
    auto p = path;
    p.push_back("mode");
    const json& m = obj.at("mode");
    if (!m.is_array() || m.size() != 4) r.fail(p, "expected a quaternion [w, x, y, z]");
    Vec4 q;
    for (int i = 0; i < 4; ++i) {
      if (!m[static_cast<std::size_t>(i)].is_number()) r.fail(p, "expected a quaternion [w, x, y, z]");
      q[i] = m[static_cast<std::size_t>(i)].get<double>();
    }
    if (!(q.norm() > 1e-12)) r.fail(p, "quaternion must be nonzero");
    t.mode = quat_to_matrix(UnitQuaternion::from_vector(q.normalized()));
  }
  return t;
}

json to_json_value(const RunConfig& c) {
  json targets = json::array();
  for (const TargetConfig& t : c.targets) {
    const Vec4 q = matrix_to_quat(t.mode).canonical().coeffs();
    targets.push_back({{"kind", to_string(t.kind)}, {"kappa", t.kappa}, {"mode", {q[0], q[1], q[2], q[3]}}});
  }
  json model = arch_json(c.model);
  model.erase("cond_dim");
  return {{"version", SO3FLOW_VERSION},
          {"seed", c.seed},
          {"output_dir", c.output_dir},
          {"targets", targets},
          {"model", model},
          {"train",
           {{"lr", c.train.lr},
            {"batch_size", c.train.batch_size},
            {"steps", c.train.steps},
            {"milestones", c.train.milestones},
            {"decay", c.train.decay},
            {"clip", c.train.clip},
            {"checkpoint_interval", c.train.checkpoint_interval},
            {"threads", c.train.threads},
            {"shards", c.train.shards},
            {"dataset_size", c.train.dataset_size},
            {"test_fraction", c.train.test_fraction}}},
          {"eval",
           {{"grid_size", c.eval.grid_size},
            {"envelope_grid_size", c.eval.envelope_grid_size},
            {"samples", c.eval.samples},
            {"tol", c.eval.tol},
            {"threads", c.eval.threads}}}};
}

}  // namespace

std::string to_string(AffineParameterization p) {
  return p == AffineParameterization::LU ? "lu" : "unconstrained";
}

std::string to_string(ConditionalAffine c) {
  switch (c) {
    case ConditionalAffine::None:
      return "none";
    case ConditionalAffine::Head:
      return "head";
    case ConditionalAffine::Every:
      return "every";
  }
  return "every";
}

std::vector<TargetSpec> RunConfig::build_targets() const {
  std::vector<TargetSpec> out;
  for (const TargetConfig& t : targets) out.push_back(t.build());
  return out;
}

RunConfig parse_run_config(const std::string& text, const std::string& source) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    const int line = line_at(text, e.byte > 0 ? e.byte - 1 : 0);
    throw ConfigError(source + ":" + std::to_string(line) + ": invalid JSON: " + e.what(), line);
  }
  const Reader r(text, source);
  r.check_keys(root, {}, {"version", "seed", "output_dir", "target", "targets", "model", "train", "eval"});
  if (root.contains("target") && root.contains("targets")) r.fail({"targets"}, "give either 'target' or 'targets'");

  RunConfig c;
  r.read(root, {}, "seed", c.seed);
  r.read(root, {}, "output_dir", c.output_dir);
  for (const char* key : {"target", "targets"}) {
    if (!root.contains(key)) continue;
    const json& t = root.at(key);
    c.targets.clear();
    if (t.is_array()) {
      if (t.empty()) r.fail({key}, "needs at least one target");
      for (const json& item : t) c.targets.push_back(read_target(r, item, {key}));
    } else {
      c.targets.push_back(read_target(r, t, {key}));
    }
  }
  if (root.contains("model")) read_arch(r, root.at("model"), {"model"}, c.model, true);
  c.model.cond_dim = c.targets.size() > 1 ? static_cast<int>(c.targets.size()) : 0;
  r.guard({"model"}, [&] { c.model.validate(); });

  if (root.contains("train")) {
    const json& t = root.at("train");
    const std::vector<std::string> p{"train"};
    r.check_keys(t, p,
                 {"lr", "batch_size", "steps", "milestones", "decay", "clip", "checkpoint_interval", "threads", "shards",
                  "dataset_size", "test_fraction"});
    r.read(t, p, "lr", c.train.lr);
    r.read(t, p, "batch_size", c.train.batch_size);
    r.read(t, p, "steps", c.train.steps);
    if (t.contains("milestones")) {
      const json& m = t.at("milestones");
      if (!m.is_array()) r.fail({"train", "milestones"}, "expected an array of integers");
      c.train.milestones.clear();
      for (const json& v : m) {
        if (!v.is_number_integer()) r.fail({"train", "milestones"}, "expected an array of integers");
        c.train.milestones.push_back(v.get<int>());
      }
    }
    r.read(t, p, "decay", c.train.decay);
    r.read(t, p, "clip", c.train.clip);
    r.read(t, p, "checkpoint_interval", c.train.checkpoint_interval);
    r.read(t, p, "threads", c.train.threads);
    r.read(t, p, "shards", c.train.shards);
    r.read(t, p, "dataset_size", c.train.dataset_size);
    r.read(t, p, "test_fraction", c.train.test_fraction);
  }
  r.guard({"train"}, [&] { c.train.validate(); });

  if (root.contains("eval")) {
    const json& e = root.at("eval");
    const std::vector<std::string> p{"eval"};
    r.check_keys(e, p, {"grid_size", "envelope_grid_size", "samples", "tol", "threads"});
    r.read(e, p, "grid_size", c.eval.grid_size);
    r.read(e, p, "envelope_grid_size", c.eval.envelope_grid_size);
    r.read(e, p, "samples", c.eval.samples);
    r.read(e, p, "tol", c.eval.tol);
    r.read(e, p, "threads", c.eval.threads);
    if (c.eval.grid_size < 1000) r.fail({"eval", "grid_size"}, "must be >= 1000");
    if (c.eval.envelope_grid_size < 1000) r.fail({"eval", "envelope_grid_size"}, "must be >= 1000");
    if (!(c.eval.tol > 0.0)) r.fail({"eval", "tol"}, "must be > 0");
    if (c.eval.threads < 0) r.fail({"eval", "threads"}, "must be >= 0");
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path.string());
}

std::string to_json(const RunConfig& config) { return to_json_value(config).dump(2); }

std::string config_hash(const RunConfig& config) {
  json v = to_json_value(config);
  v.erase("output_dir");
  const std::string s = v.dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string architecture_to_json(const FlowArchitecture& arch) { return arch_json(arch).dump(); }

FlowArchitecture architecture_from_json(const std::string& text) {
  const json obj = json::parse(text);
  const Reader r(text, "<architecture>");
  FlowArchitecture a;
  read_arch(r, obj, {}, a, false);
  r.guard({}, [&] { a.validate(); });
  return a;
}

}  // namespace so3flow
