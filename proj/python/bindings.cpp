#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "flowopd/commands.hpp"
#include "flowopd/error.hpp"
#include "flowopd/verify.hpp"

namespace py = pybind11;
using namespace flowopd;

namespace {

py::array_t<double> as_array(const std::vector<double>& v) { return py::array_t<double>(v.size(), v.data()); }

py::array_t<double> final_samples(const ParamVector& p, const Condition& c, std::size_t n, std::uint64_t seed,
                                  std::size_t steps, double a) {
    const TimeGrid grid{steps, 0.02, 0.98};
    py::array_t<double> out({n, p.arch().output_dim});
    auto m = out.mutable_unchecked<2>();
    for (std::size_t i = 0; i < n; ++i) {
        const auto tr = sample_trajectory(p, c, grid, NoiseSchedule{a}, trajectory_seed(seed, i));
        for (std::size_t k = 0; k < tr.final_sample().size(); ++k) m(i, k) = tr.final_sample()[k];
    }
    return out;
}

py::dict report_dict(const EvalReport& r) {
    py::dict d;
    for (TaskId t : kAllTasks) d[py::str(std::string(task_name(t)))] = r[t];
    d["normalized_average"] = r.normalized_average();
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "flow-matching on-policy distillation toy: numerical core";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<RoutingError>(m, "RoutingError", PyExc_KeyError);
    py::register_exception<DivergenceError>(m, "DivergenceError", PyExc_ArithmeticError);

    py::enum_<TaskId>(m, "Task")
        .value("region", TaskId::Region)
        .value("ring", TaskId::Ring)
        .value("preference", TaskId::Preference)
        .value("quality", TaskId::Quality);

    py::class_<Condition>(m, "Condition")
        .def_static("region", &Condition::region, py::arg("component"), py::arg("n_components") = 4)
        .def_static("ring", &Condition::ring, py::arg("radius"))
        .def_static("preference", &Condition::preference, py::arg("content"), py::arg("n_components") = 4)
        .def_static("quality", &Condition::quality, py::arg("content"), py::arg("n_components") = 4)
        .def_readonly("task", &Condition::task)
        .def_readonly("params", &Condition::params)
        .def("__repr__", [](const Condition& c) { return describe(c); });

    py::class_<ArchSpec>(m, "ArchSpec")
        .def(py::init([](std::size_t in, std::vector<std::size_t> hidden, std::size_t out) {
                 ArchSpec a{in, std::move(hidden), out};
                 a.validate();
                 return a;
             }),
             py::arg("input_dim"), py::arg("hidden_widths"), py::arg("output_dim"))
        .def_readonly("input_dim", &ArchSpec::input_dim)
        .def_readonly("hidden_widths", &ArchSpec::hidden_widths)
        .def_readonly("output_dim", &ArchSpec::output_dim)
        .def("__repr__", [](const ArchSpec& a) { return describe(a); });

    py::class_<ParamVector>(m, "Params")
        .def_property_readonly("arch", &ParamVector::arch)
        .def_property_readonly("values",
                               [](const ParamVector& p) {
                                   const auto v = p.values();
                                   return py::array_t<double>(v.size(), v.data());
                               })
        .def("__len__", &ParamVector::size)
        .def("__eq__", [](const ParamVector& a, const ParamVector& b) { return a == b; });

    m.def("param_count", &param_count);
    m.def("init_params", &init_params, py::arg("arch"), py::arg("seed"));
    m.def("load_checkpoint", &load_checkpoint);
    m.def("save_checkpoint", &save_checkpoint);
    m.def("velocity",
          [](const ParamVector& p, std::vector<double> x, double t, const Condition& c) { return as_array(velocity(p, x, t, c)); });
    m.def("merge", [](std::vector<ParamVector> inputs, std::vector<double> weights) {
        return merge_models({std::move(inputs), std::move(weights)});
    });
    m.def("sample", &final_samples, py::arg("params"), py::arg("condition"), py::arg("n"), py::arg("seed") = 0,
          py::arg("steps") = 40, py::arg("a") = 0.7, "final states of n SDE rollouts, shape (n, d)");

    // flow math
    m.def("sigma", [](double t, double a) { return sigma(t, NoiseSchedule{a}); }, py::arg("t"), py::arg("a") = 0.7);
    m.def("sde_drift", [](std::vector<double> v, std::vector<double> x, double t, double s) {
        return as_array(sde_drift(v, x, t, s));
    });
    m.def("transition_mean", [](std::vector<double> x, std::vector<double> v, double t, double dt, double s) {
        return as_array(transition_mean(x, v, t, dt, s));
    });
    m.def("transition_logprob", [](std::vector<double> x, std::vector<double> mu, double var) {
        return transition_logprob(x, mu, var);
    });
    m.def("gaussian_kl", &gaussian_kl_general, py::arg("mu1"), py::arg("cov1"), py::arg("mu2"), py::arg("cov2"));
    m.def("kl_means", [](std::vector<double> a, std::vector<double> b, double s, double dt) { return kl_means(a, b, s, dt); });
    m.def("weight_w", &weight_w, py::arg("t"), py::arg("sigma"), py::arg("dt"));
    m.def("kl_velocities", [](std::vector<double> a, std::vector<double> b, double t, double s, double dt) {
        return kl_velocities(a, b, t, s, dt);
    });

    // rewards
    m.def("reward", [](TaskId task, std::vector<double> x, const Condition& c) {
        return task_reward(task, x, c, default_world());
    });
    m.def("group_advantage", [](std::vector<double> r) { return as_array(group_advantage(r)); });

    // configs and runs
    m.def("default_config", [] { return serialize_config(ExperimentConfig{}); }, "default experiment config as JSON text");
    m.def("normalize_config", [](const std::string& text) { return serialize_config(parse_config(text)); },
          "parse, validate and re-serialize a config");
    m.def(
        "evaluate",
        [](const std::filesystem::path& checkpoint, const std::string& config_text) {
            const auto cfg = config_text.empty() ? ExperimentConfig{} : parse_config(config_text);
            py::gil_scoped_release release;
            const auto p = load_checkpoint(checkpoint);
            EvalReport r = evaluate(p, cfg.world, cfg.schedule, cfg.eval);
            py::gil_scoped_acquire acquire;
            return report_dict(r);
        },
        py::arg("checkpoint"), py::arg("config") = "");
    m.def(
        "verify",
        [](std::size_t scale_down) {
            VerifyOptions opt;
            if (scale_down > 1) {
                opt.kl_instances /= scale_down;
                opt.mc_pairs = std::max<std::size_t>(2, opt.mc_pairs / scale_down);
                opt.mc_samples /= scale_down;
                opt.grad_instances = std::max<std::size_t>(2, opt.grad_instances / scale_down);
                opt.identity_batches = std::max<std::size_t>(2, opt.identity_batches / scale_down);
                opt.nullity_samples /= scale_down;
            }
            const auto rep = run_verification(ExperimentConfig{}, opt);
            py::list out;
            for (const auto& c : rep.checks)
                out.append(py::dict(py::arg("name") = c.name, py::arg("measured") = c.measured,
                                    py::arg("tolerance") = c.tolerance, py::arg("passed") = c.passed,
                                    py::arg("detail") = c.detail));
            return out;
        },
        py::arg("scale_down") = 1, "oracle suite; returns one dict per check");
}
