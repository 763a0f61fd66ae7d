#include "mfbslq/cli.hpp"
#include "mfbslq/oracle.hpp"
#include "mfbslq/outer.hpp"
#include "mfbslq/riccati.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

namespace py = pybind11;
using namespace mfbslq;

namespace {

// Level k of a process as a (width, rows) array for column vectors, or a
// list of matrices when asked (or when the values are not vectors).
py::list levels(const ScenarioTree& tree, const AdaptedProcess& p, bool matrices = false) {
  py::list out;
  for (int k = p.first_level(); k <= p.last_level(); ++k) {
    if (p.cols() == 1 && !matrices) {
      Eigen::MatrixXd level(tree.width(k), p.rows());
      for (std::size_t j = 0; j < tree.width(k); ++j) level.row(static_cast<Eigen::Index>(j)) = p(k, j).col(0).transpose();
      out.append(level);
    } else {
      py::list level;
      for (std::size_t j = 0; j < tree.width(k); ++j) level.append(Eigen::MatrixXd(p(k, j)));
      out.append(level);
    }
  }
  return out;
}

const char* kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::configuration: return "configuration";
    case ErrorKind::parse: return "parse";
    case ErrorKind::validation: return "validation";
    case ErrorKind::contract: return "contract";
    case ErrorKind::step_size: return "step_size";
    case ErrorKind::riccati_failure: return "riccati_failure";
    case ErrorKind::decoupling_breakdown: return "decoupling_breakdown";
    case ErrorKind::infeasible: return "infeasible";
    case ErrorKind::convexity: return "convexity";
    case ErrorKind::size_limit: return "size_limit";
    case ErrorKind::solver: return "solver";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

struct Problem {
  ProblemSpec spec;
  ScenarioTree tree;
  CoefficientSet coeffs;
  Problem(const std::string& document, int steps)
      : spec(load_spec(document)), tree(spec.T, steps), coeffs(realize(spec, tree)) {}
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Mean-field backward stochastic LQ control on binomial scenario trees";

  static py::exception<Error> error(m, "Error");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object exc = py::reinterpret_borrow<py::object>(error)(py::str(e.what()));
      exc.attr("kind") = kind_name(e.kind());
      PyErr_SetObject(error.ptr(), exc.ptr());
    }
  });

  m.def("validate", [](const std::string& document, int steps) {
    Problem p(document, steps);
    ValidationReport r = validate_h1_h2(p.coeffs, p.spec.delta);
    return py::make_tuple(r.passed(), r.summary());
  }, py::arg("spec"), py::arg("nt") = 1, "Assumption checks on a tree with nt steps: (passed, summary).");

  m.def("run", [](const std::string& document, int steps, bool with_oracle, const std::string& outer) {
    Problem p(document, steps);
    ValidationReport v = validate_h1_h2(p.coeffs, p.spec.delta);
    if (!v.passed()) throw Error(ErrorKind::validation, "assumption check failed\n" + v.summary());
    PipelineOptions options;
    options.with_oracle = with_oracle;
    if (outer == "quadratic") options.outer = OuterMethod::quadratic;
    else if (outer != "conditions") throw Error(ErrorKind::configuration, "outer must be 'conditions' or 'quadratic'");
    PipelineReport r;
    {
      py::gil_scoped_release release;
      r = run_pipeline(p.tree, p.coeffs, options);
    }
    py::dict out;
    out["report"] = cli::report_to_json(r).dump();
    out["u"] = levels(p.tree, r.u_star);
    out["Y"] = levels(p.tree, r.Y_star);
    out["Z"] = levels(p.tree, r.Z_star);
    out["X"] = levels(p.tree, r.X_star);
    return out;
  }, py::arg("spec"), py::arg("nt"), py::arg("with_oracle") = false, py::arg("outer") = "conditions");

  m.def("solve_qp", [](const std::string& document, int steps) {
    Problem p(document, steps);
    QpResult r;
    {
      py::gil_scoped_release release;
      r = solve_qp(p.tree, p.coeffs);
    }
    py::dict out;
    out["cost"] = r.cost;
    out["gradient_norm"] = r.gradient_norm;
    out["gradient_norm_at_zero"] = r.gradient_norm_at_zero;
    out["method"] = r.method;
    out["hessian_min_eigenvalue"] = r.hessian_min_eigenvalue;
    out["u"] = levels(p.tree, r.u);
    out["Y"] = levels(p.tree, r.state.Y);
    out["Z"] = levels(p.tree, r.state.Z);
    return out;
  }, py::arg("spec"), py::arg("nt"), "Exact discrete optimum of the tree problem.");

  m.def("riccati", [](const std::string& document, int steps) {
    Problem p(document, steps);
    RiccatiSolution r = solve_riccati(p.tree, p.coeffs);
    py::dict out;
    out["Sigma"] = levels(p.tree, r.Sigma, true);
    out["Phi"] = levels(p.tree, r.Phi, true);
    out["max_asymmetry"] = r.diagnostics.max_asymmetry;
    out["min_singular_value"] = r.diagnostics.min_singular_value;
    return out;
  }, py::arg("spec"), py::arg("nt"), "Riccati solution; Sigma[k][j] is n x n at node (k, j).");

  m.def("brownian", [](double T, int steps) {
    ScenarioTree tree(T, steps);
    return levels(tree, brownian_process(tree));
  }, py::arg("T"), py::arg("nt"), "W at every node, level by level.");
}
