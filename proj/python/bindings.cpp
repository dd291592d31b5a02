#include "so3flow/config.hpp"
#include "so3flow/metrics.hpp"
#include "so3flow/training.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

namespace py = pybind11;
using namespace so3flow;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

std::vector<Rotation> to_rotations(const Array& a) {
  const bool single = a.ndim() == 2 && a.shape(0) == 3 && a.shape(1) == 3;
  if (!single && (a.ndim() != 3 || a.shape(1) != 3 || a.shape(2) != 3)) {
    throw std::invalid_argument("expected an (n, 3, 3) array");
  }
  const py::ssize_t n = single ? 1 : a.shape(0);
  const double* data = a.data();
  std::vector<Rotation> out;
  for (py::ssize_t i = 0; i < n; ++i) {
    Mat3 m;
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) m(j, k) = data[9 * i + 3 * j + k];
    out.push_back(Rotation::from_matrix(m));
  }
  return out;
}

Array from_rotations(const std::vector<Rotation>& rs) {
  Array out({static_cast<py::ssize_t>(rs.size()), py::ssize_t{3}, py::ssize_t{3}});
  auto w = out.mutable_unchecked<3>();
  for (std::size_t i = 0; i < rs.size(); ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) w(static_cast<py::ssize_t>(i), j, k) = rs[i].matrix()(j, k);
  return out;
}

Array from_matrix(const Rotation& r) {
  Array out({py::ssize_t{3}, py::ssize_t{3}});
  auto w = out.mutable_unchecked<2>();
  for (int j = 0; j < 3; ++j)
    for (int k = 0; k < 3; ++k) w(j, k) = r.matrix()(j, k);
  return out;
}

Array from_vector(const std::vector<double>& v) {
  Array out(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

std::optional<ad::Tensor> to_cond(const std::optional<Array>& c) {
  if (!c) return std::nullopt;
  if (c->ndim() != 1 && c->ndim() != 2) throw std::invalid_argument("condition must be a vector or an (n, d) array");
  const py::ssize_t rows = c->ndim() == 1 ? 1 : c->shape(0);
  const py::ssize_t cols = c->ndim() == 1 ? c->shape(0) : c->shape(1);
  ad::Tensor t(rows, cols);
  std::copy(c->data(), c->data() + c->size(), t.data());
  return t;
}

const ad::Tensor* ptr(const std::optional<ad::Tensor>& c) { return c ? &*c : nullptr; }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Normalizing flows on SO(3) with Mobius coupling and quaternion affine layers";
  m.attr("__version__") = SO3FLOW_VERSION;

  m.def("quat_to_matrix", [](const std::array<double, 4>& q) {
    return from_matrix(quat_to_matrix(UnitQuaternion::from_vector(Vec4(q[0], q[1], q[2], q[3]))));
  }, py::arg("q"), "Unit quaternion [w, x, y, z] to a 3x3 rotation matrix.");
  m.def("matrix_to_quat", [](const Array& r) {
    const Vec4 q = matrix_to_quat(to_rotations(r).at(0)).canonical().coeffs();
    return std::array<double, 4>{q[0], q[1], q[2], q[3]};
  }, py::arg("r"), "Rotation matrix to a canonical-sign quaternion [w, x, y, z].");
  m.def("geodesic_distance", [](const Array& a, const Array& b) {
    return geodesic_distance(to_rotations(a).at(0), to_rotations(b).at(0));
  }, py::arg("a"), py::arg("b"));
  m.def("hopf_decompose", [](const Array& r) {
    const auto [dir, tilt] = hopf_decompose(to_rotations(r).at(0));
    return py::make_tuple(std::array<double, 3>{dir.x(), dir.y(), dir.z()}, tilt);
  }, py::arg("r"), "(direction of R e_z, tilt angle about it).");
  m.def("grid", [](std::size_t n) { return from_rotations(grid_with_size(n).points); }, py::arg("n"),
        "Equal-weight Fibonacci-Hopf grid with about n rotations.");
  m.def("sample_uniform", [](std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Rotation> rs;
    for (std::size_t i = 0; i < n; ++i) rs.push_back(sample_uniform(rng));
    return from_rotations(rs);
  }, py::arg("n"), py::arg("seed") = 0);

  py::class_<TargetSpec>(m, "Target")
      .def(py::init([](const std::string& kind, double kappa) { return make_target(parse_target_kind(kind), kappa); }),
           py::arg("kind"), py::arg("kappa"))
      .def_property_readonly("kind", [](const TargetSpec& t) { return to_string(t.kind); })
      .def_readonly("kappa", &TargetSpec::kappa)
      .def("log_prob", [](const TargetSpec& t, const Array& r) {
        std::vector<double> out;
        for (const Rotation& x : to_rotations(r)) out.push_back(target_log_prob(t, x));
        return from_vector(out);
      }, py::arg("rotations"))
      .def("sample", [](const TargetSpec& t, std::size_t n, std::uint64_t seed) {
        Rng rng(seed);
        return from_rotations(target_sample(t, n, rng, grid_with_size(100000)));
      }, py::arg("n"), py::arg("seed") = 0)
      .def("entropy", [](const TargetSpec& t, std::size_t grid_size) {
        return target_entropy(t, grid_with_size(grid_size));
      }, py::arg("grid_size") = 500000, "-E[log p] by grid quadrature.");

  py::class_<FlowModel>(m, "Flow")
      .def(py::init([](int blocks, int components, std::vector<int> hidden, bool mobius, bool affine, int cond_dim,
                       std::uint64_t seed) {
        FlowArchitecture a;
        a.blocks = blocks;
        a.components = components;
        a.hidden = std::move(hidden);
        a.mobius = mobius;
        a.affine = affine;
        a.cond_dim = cond_dim;
        return FlowModel(a, seed);
      }), py::arg("blocks") = 6, py::arg("components") = 16, py::arg("hidden") = std::vector<int>{64, 64, 64, 64},
           py::arg("mobius") = true, py::arg("affine") = true, py::arg("cond_dim") = 0, py::arg("seed") = 0)
      .def_static("load", [](const std::string& path) { return load_checkpoint(path).model; }, py::arg("path"))
      .def("save", [](const FlowModel& f, const std::string& path) { save_checkpoint(path, f, AdamState{}, 0); },
           py::arg("path"))
      .def_property_readonly("architecture", [](const FlowModel& f) { return architecture_to_json(f.architecture()); })
      .def_property_readonly("num_parameters", [](const FlowModel& f) { return f.params().scalar_count(); })
      .def("randomize", [](FlowModel& f, double scale, std::uint64_t seed) {
        Rng rng(seed);
        f.randomize(rng, scale);
      }, py::arg("scale") = 1.0, py::arg("seed") = 0)
      .def("log_prob", [](const FlowModel& f, const Array& r, const std::optional<Array>& cond, int threads) {
        const auto rs = to_rotations(r);
        const auto c = to_cond(cond);
        std::vector<double> lp;
        {
          py::gil_scoped_release release;
          lp = f.log_prob(rs, ptr(c), threads);
        }
        return from_vector(lp);
      }, py::arg("rotations"), py::arg("cond") = py::none(), py::arg("threads") = 1)
      .def("sample", [](const FlowModel& f, std::size_t n, std::uint64_t seed, const std::optional<Array>& cond,
                        int threads) {
        const auto c = to_cond(cond);
        std::vector<FlowSample> s;
        {
          py::gil_scoped_release release;
          Rng rng(seed);
          s = f.sample(n, rng, ptr(c), 1e-7, threads);
        }
        std::vector<Rotation> rs;
        std::vector<double> lp;
        for (const FlowSample& x : s) {
          rs.push_back(x.rotation);
          lp.push_back(x.log_prob);
        }
        return py::make_tuple(from_rotations(rs), from_vector(lp));
      }, py::arg("n"), py::arg("seed") = 0, py::arg("cond") = py::none(), py::arg("threads") = 1,
           "Returns (rotations (n, 3, 3), log_prob (n,)).")
      .def("forward", [](const FlowModel& f, const Array& r) {
        std::vector<Rotation> zs;
        std::vector<double> ld;
        for (const Rotation& x : to_rotations(r)) {
          auto [z, l] = f.forward_to_base(x);
          zs.push_back(z);
          ld.push_back(l);
        }
        return py::make_tuple(from_rotations(zs), from_vector(ld));
      }, py::arg("rotations"), "Data -> base: (base points, log-det).")
      .def("inverse", [](const FlowModel& f, const Array& z) { return from_rotations(f.inverse(to_rotations(z))); },
           py::arg("base"))
      .def("mc_entropy", [](const FlowModel& f, std::size_t n, std::uint64_t seed) {
        Rng rng(seed);
        const Estimate e = mc_entropy(f, n, rng);
        return py::make_tuple(e.value, e.stderr_);
      }, py::arg("n"), py::arg("seed") = 0, "(estimate, standard error)")
      .def("normalization", [](const FlowModel& f, std::size_t grid_size) {
        return normalization_audit(f, grid_with_size(grid_size));
      }, py::arg("grid_size") = 500000);

  m.def("train", [](FlowModel& model, const Array& data, int steps, double lr, int batch_size, std::uint64_t seed) {
    Dataset d;
    d.train = to_rotations(data);
    TrainConfig cfg;
    cfg.steps = steps;
    cfg.lr = lr;
    cfg.batch_size = batch_size;
    AdamState adam;
    std::vector<MetricsRow> rows;
    {
      py::gil_scoped_release release;
      rows = train(model, adam, 0, d, cfg, seed);
    }
    std::vector<double> nll;
    for (const MetricsRow& r : rows) nll.push_back(r.nll);
    return from_vector(nll);
  }, py::arg("model"), py::arg("data"), py::arg("steps"), py::arg("lr") = 1e-4, py::arg("batch_size") = 64,
     py::arg("seed") = 0, "Trains in place; returns the per-step minibatch NLL.");
}
