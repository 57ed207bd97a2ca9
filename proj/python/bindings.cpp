#include "bmpc/certificates.hpp"
#include "bmpc/commands.hpp"
#include "bmpc/config.hpp"
#include "bmpc/simulate.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

namespace py = pybind11;
using namespace bmpc;

namespace {

std::optional<BlockingMatrix> to_blocking(const std::optional<Matrix>& M) {
    if (!M) return std::nullopt;
    return BlockingMatrix(*M);
}

Matrix stack_columns(const std::vector<Vector>& vs, Index rows) {
    Matrix out(rows, static_cast<Index>(vs.size()));
    for (size_t k = 0; k < vs.size(); ++k) out.col(static_cast<Index>(k)) = vs[k];
    return out.transpose();
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Bilevel MPC formulations, move blocking and gap certificates";

    static py::exception<Error> exc(m, "BmpcError");
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const Error& e) {
            py::tuple args = py::make_tuple(to_string(e.code()), e.what());
            PyErr_SetObject(exc.ptr(), args.ptr());
        }
    });

    py::class_<ProblemConfig>(m, "ProblemConfig")
        .def_readwrite("A", &ProblemConfig::A)
        .def_readwrite("B", &ProblemConfig::B)
        .def_readwrite("N", &ProblemConfig::N)
        .def_readwrite("x0", &ProblemConfig::x0)
        .def_readwrite("x_target", &ProblemConfig::x_target)
        .def("dump", &dump_config, "canonical JSON text")
        .def("save", &save_config, py::arg("path"));

    m.def("toy_config", &toy_config);
    m.def("load_config", &load_config, py::arg("path"));
    m.def("parse_config", &parse_config, py::arg("text"));

    py::class_<BilevelInstance>(m, "Instance")
        .def_property_readonly("N", &BilevelInstance::N)
        .def_property_readonly("n", &BilevelInstance::n)
        .def_property_readonly("m", &BilevelInstance::m)
        .def_property_readonly("gamma_ratio", [](const BilevelInstance& i) { return i.gamma_ratio; })
        .def("upper_cost", &value_of, py::arg("U"), py::arg("x0"))
        .def("upper_constraints", [](const BilevelInstance& i, const Vector& U, const Vector& x0) {
            return Vector(i.upper.evaluate(U, x0));
        }, py::arg("U"), py::arg("x0"));
    m.def("make_instance", &make_instance, py::arg("config"));

    py::class_<SolveReport>(m, "SolveReport")
        .def_readonly("problem", &SolveReport::problem)
        .def_readonly("U", &SolveReport::U)
        .def_readonly("Theta", &SolveReport::Theta)
        .def_readonly("Phi", &SolveReport::Phi)
        .def_readonly("value", &SolveReport::value)
        .def_readonly("wall_time_s", &SolveReport::wall_time_s)
        .def_readonly("nodes", &SolveReport::nodes)
        .def_property_readonly("status", [](const SolveReport& r) { return std::string(to_string(r.status)); })
        .def("__repr__", [](const SolveReport& r) {
            return "<SolveReport " + r.problem + " value=" + std::to_string(r.value) + ">";
        });

    m.def("solve_hmpc", [](const BilevelInstance& i, const Vector& x0) { return solve_hmpc(i, x0); },
          py::arg("inst"), py::arg("x0"));
    m.def("solve_p2",
          [](const BilevelInstance& i, const Vector& x0, const std::optional<Matrix>& M, bool explicit_form) {
              return solve_p2(i, x0, to_blocking(M),
                              explicit_form ? P2Method::explicit_stationarity : P2Method::eliminate);
          },
          py::arg("inst"), py::arg("x0"), py::arg("M") = py::none(), py::arg("explicit_stationarity") = false);
    m.def("solve_p3", [](const BilevelInstance& i, const Vector& x0) { return solve_p3(i, x0); },
          py::arg("inst"), py::arg("x0"));
    m.def("solve_p1_oracle",
          [](const BilevelInstance& i, const Vector& x0, const std::optional<Matrix>& M, Index cap) {
              OracleOptions o;
              o.cap = cap;
              return solve_p1_oracle(i, x0, to_blocking(M), o);
          },
          py::arg("inst"), py::arg("x0"), py::arg("M") = py::none(), py::arg("cap") = 22);
    m.def("solve_lower",
          [](const BilevelInstance& i, const Vector& Theta, const Vector& x0) { return solve_lower(i, Theta, x0); },
          py::arg("inst"), py::arg("Theta"), py::arg("x0"));
    m.def("theta_star_map", &theta_star_map, py::arg("inst"), py::arg("U"), py::arg("x0"));
    m.def("u_star_map", &u_star_map, py::arg("inst"), py::arg("Theta"), py::arg("x0"));

    m.def("leading_free", [](Index i, Index N, Index mm) { return leading_free(i, N, mm).matrix(); },
          py::arg("i"), py::arg("N"), py::arg("m"));
    m.def("construct_from_p0",
          [](const BilevelInstance& i, const std::vector<Vector>& samples, double rtol) {
              const ConstructedBlocking cb = construct_from_p0(i, samples, rtol);
              py::dict d;
              d["M"] = cb.M.matrix();
              d["thetas"] = cb.thetas;
              d["gu_satisfied"] = cb.gu_satisfied;
              d["rank"] = cb.M.p();
              return d;
          },
          py::arg("inst"), py::arg("samples"), py::arg("rtol") = 1e-8);
    m.def("sample_box", &sample_box, py::arg("center"), py::arg("half_width"), py::arg("count"), py::arg("seed"));

    py::class_<GapCertificate>(m, "GapCertificate")
        .def_readonly("label", &GapCertificate::label)
        .def_readonly("delta", &GapCertificate::delta)
        .def_readonly("epsilon", &GapCertificate::epsilon)
        .def_readonly("near_set", &GapCertificate::near_set)
        .def_readonly("mu", &GapCertificate::mu)
        .def_readonly("mfcq_ok", &GapCertificate::mfcq_ok)
        .def_readonly("w", &GapCertificate::w)
        .def_readonly("f_w", &GapCertificate::f_w)
        .def_readonly("violating_rows", &GapCertificate::violating_rows)
        .def_property_readonly("status", [](const GapCertificate& c) { return std::string(to_string(c.status)); });
    m.def("blocked_gap_certificate",
          [](const BilevelInstance& i, const Matrix& M, const Matrix& Mhat, const Vector& x0, double eps) {
              return blocked_gap_certificate(i, BlockingMatrix(M), BlockingMatrix(Mhat), x0, eps);
          },
          py::arg("inst"), py::arg("M"), py::arg("Mhat"), py::arg("x0"), py::arg("eps") = 0.0);
    m.def("hmpc_gap_certificate",
          [](const BilevelInstance& i, const Vector& x0, double eps) { return hmpc_gap_certificate(i, x0, eps); },
          py::arg("inst"), py::arg("x0"), py::arg("eps") = 0.0);

    py::class_<ClosedLoopTrace>(m, "Trace")
        .def_property_readonly("states", [](const ClosedLoopTrace& t) {
            return stack_columns(t.states, t.states.empty() ? 0 : t.states.front().size());
        })
        .def_property_readonly("inputs", [](const ClosedLoopTrace& t) {
            return stack_columns(t.inputs, t.inputs.empty() ? 0 : t.inputs.front().size());
        })
        .def_readonly("stage_costs", &ClosedLoopTrace::stage_costs)
        .def_readonly("failed_step", &ClosedLoopTrace::failed_step)
        .def_readonly("failure", &ClosedLoopTrace::failure)
        .def_property_readonly("completed", &ClosedLoopTrace::completed)
        .def("csv", &trace_csv);
    m.def("simulate",
          [](const BilevelInstance& i, const std::string& kind, const Vector& x0, Index steps,
             const std::optional<Matrix>& M) {
              ControllerSpec s;
              s.kind = parse_controller_kind(kind);
              s.blocking = to_blocking(M);
              return simulate(i, s, x0, steps);
          },
          py::arg("inst"), py::arg("controller"), py::arg("x0"), py::arg("steps"), py::arg("M") = py::none());
    m.def("trace_metrics",
          [](const BilevelInstance& i, const ClosedLoopTrace& t, double threshold) {
              const TraceMetrics mt = trace_metrics(i, t, threshold);
              py::dict d;
              d["average_stage_cost"] = mt.average_stage_cost;
              d["max_upper_violation"] = mt.max_upper_violation;
              d["settling_step"] = mt.settling_step;
              d["steps"] = mt.steps;
              return d;
          },
          py::arg("inst"), py::arg("trace"), py::arg("threshold") = 1e-3);
}
