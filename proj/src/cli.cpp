#include "mfbslq/cli.hpp"

#include "mfbslq/error.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

namespace mfbslq::cli {

namespace {

using json = nlohmann::ordered_json;

json path_to_json(const Eigen::MatrixXd& path) {
  // One array per step, each holding the components at that step.
  json out = json::array();
  for (Eigen::Index k = 0; k < path.cols(); ++k) {
    json step = json::array();
    for (Eigen::Index i = 0; i < path.rows(); ++i) step.push_back(path(i, k));
    out.push_back(std::move(step));
  }
  return out;
}

json vector_to_json(const Eigen::VectorXd& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

json root_value(const AdaptedProcess& p) { return vector_to_json(p(0, 0).col(0)); }

std::string format_number(double x) {
  if (!std::isfinite(x)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string rate(double previous, double current) {
  if (!(previous > 0.0) || !(current > 0.0)) return "";
  return format_number(std::log2(previous / current));
}

void write_text(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty()) {
    out << text;
    return;
  }
  std::ofstream file(path, std::ios::binary);
  if (!file) throw Error(ErrorKind::io, "cannot open output file " + path);
  file << text;
  if (!file) throw Error(ErrorKind::io, "cannot write output file " + path);
}

// Tables pin the number of steps; otherwise one step covers constant
// descriptors and eight steps sample the random ones.
int validation_steps(const ProblemSpec& spec) {
  int pinned = 0, steps = 1;
  for (const auto& d : spec.coefficients) {
    if (const auto* t = std::get_if<TimeTableForm>(&d)) pinned = static_cast<int>(t->values.size());
    else if (const auto* nt = std::get_if<NodeTableForm>(&d)) pinned = static_cast<int>(nt->levels.size());
    else if (std::holds_alternative<AffineTanhWForm>(d)) steps = 8;
  }
  if (const auto* leaves = std::get_if<LeafTableForm>(&spec.terminal)) {
    std::size_t count = leaves->values.size();
    int k = 0;
    while ((std::size_t{1} << k) < count) ++k;
    pinned = k;
  }
  return pinned > 0 ? pinned : steps;
}

}  // namespace

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::configuration:
    case ErrorKind::parse:
    case ErrorKind::validation:
    case ErrorKind::io:
      return exit_invalid;
    default:
      return exit_solver;
  }
}

json report_to_json(const PipelineReport& r) {
  json j;
  j["n"] = r.n;
  j["m"] = r.m;
  j["nt"] = r.steps;
  j["dt"] = r.dt;
  j["outer_method"] = r.outer_method;
  j["cost"] = r.cost;
  j["u0"] = root_value(r.u_star);
  j["Y0"] = root_value(r.Y_star);
  j["eta_star"] = {{"alpha", path_to_json(r.eta_star.alpha)},
                   {"beta", path_to_json(r.eta_star.beta)},
                   {"gamma", path_to_json(r.eta_star.gamma)}};
  j["lambda_star"] = {{"lambda1", path_to_json(r.lambda_star.lambda1)},
                      {"lambda2", path_to_json(r.lambda_star.lambda2)},
                      {"lambda3", path_to_json(r.lambda_star.lambda3)}};
  j["lambda_residual"] = r.lambda_residual;
  j["lambda_certified"] = r.lambda_certified;
  j["multiplier_rank"] = r.multiplier_rank;
  j["constraint_residuals"] = {{"y", r.constraints.max_y}, {"z", r.constraints.max_z},
                               {"u", r.constraints.max_u}, {"max", r.constraints.max()}};
  j["first_order_residual"] = r.first_order_residual;
  j["stationarity_residual"] = r.stationarity_residual;
  j["stationarity_max"] = r.stationarity_max;
  j["embedding_stationarity"] = r.embedding_stationarity;
  j["decoupling"] = {{"y_max", r.decoupling.max_y},
                     {"z_max", r.decoupling.max_z},
                     {"y_weighted", r.decoupling.weighted_y},
                     {"z_weighted", r.decoupling.weighted_z}};
  if (r.quadratic_available)
    j["quadratic"] = {{"objective", r.pipeline_objective},
                      {"gradient", r.quadratic_gradient},
                      {"min_eigenvalue", r.hessian_min_eigenvalue},
                      {"singular", r.eta_singular}};
  else
    j["quadratic"] = nullptr;
  double min_eig = r.riccati.min_sigma_eigenvalue.empty()
                       ? 0.0
                       : *std::min_element(r.riccati.min_sigma_eigenvalue.begin(), r.riccati.min_sigma_eigenvalue.end());
  j["riccati"] = {{"symmetry", r.riccati.max_asymmetry},
                  {"min_sigma_eig", min_eig},
                  {"min_I_plus_SigmaR_sv", r.riccati.min_singular_value},
                  {"newton_iterations", r.riccati.max_newton_iterations}};
  if (r.oracle) {
    const OracleComparison& o = *r.oracle;
    j["oracle"] = {{"cost", o.cost},
                   {"control_error", o.control_error},
                   {"cost_gap", o.cost_gap},
                   {"gradient_norm", o.gradient_norm},
                   {"gradient_norm_at_zero", o.gradient_norm_at_zero},
                   {"stationarity_residual", o.stationarity_residual},
                   {"method", o.method}};
  }
  json t = json::object();
  for (const auto& [name, seconds] : r.timings) t[name] = seconds;
  j["timings"] = std::move(t);
  return j;
}

std::vector<std::string> check_report(const PipelineReport& r, const CheckTolerances& tol) {
  std::vector<std::string> failures;
  auto fail = [&](const std::string& what, double value, double bound) {
    std::ostringstream s;
    s << what << " = " << value << " (bound " << bound << ")";
    failures.push_back(s.str());
  };
  if (!r.lambda_certified) fail("multiplier residual (uncertified)", r.lambda_residual, 0.0);
  if (r.constraints.max() > tol.constraint) fail("constraint residual", r.constraints.max(), tol.constraint);
  double scale = 1.0 + r.u_star.max_abs();
  if (r.embedding_stationarity > tol.embedding_stationarity * scale)
    fail("embedding stationarity", r.embedding_stationarity, tol.embedding_stationarity * scale);
  if (r.riccati.max_asymmetry > tol.symmetry) fail("Riccati asymmetry", r.riccati.max_asymmetry, tol.symmetry);
  if (r.oracle) {
    const OracleComparison& o = *r.oracle;
    double kkt = tol.kkt * (1.0 + o.gradient_norm_at_zero);
    if (o.gradient_norm > kkt) fail("oracle gradient norm", o.gradient_norm, kkt);
    if (o.cost_gap < tol.cost_gap_floor) fail("cost gap", o.cost_gap, tol.cost_gap_floor);
    if (r.steps >= tol.control_error_min_steps && o.control_error > tol.control_error)
      fail("control error", o.control_error, tol.control_error);
  }
  return failures;
}

int cmd_run(const RunConfig& config, std::ostream& out, std::ostream& err) {
  try {
    ProblemSpec spec = load_spec_file(config.spec_path);
    PipelineOptions options;
    options.with_oracle = config.with_oracle;
    PipelineReport report = run_pipeline(spec, config.steps, options);
    json j = report_to_json(report);
    std::vector<std::string> failures;
    if (config.check) {
      failures = check_report(report, config.tolerances);
      json f = json::array();
      for (const auto& s : failures) f.push_back(s);
      json c = {{"passed", failures.empty()}, {"failures", std::move(f)}};
      // keep "timings" last so the checked payload is a prefix-stable object
      json t = std::move(j["timings"]);
      j.erase("timings");
      j["check"] = std::move(c);
      j["timings"] = std::move(t);
    }
    if (!config.timings) j.erase("timings");
    write_text(config.output, j.dump(2) + "\n", out);
    for (const auto& s : failures) err << "check failed: " << s << "\n";
    return failures.empty() ? exit_ok : exit_check;
  } catch (const Error& e) {
    err << e.what() << "\n";
    return exit_code_for(e.kind());
  }
}

int cmd_converge(const ConvergeConfig& config, std::ostream& out, std::ostream& err) {
  std::ostringstream csv;
  csv << "nt,dt,control_err_vs_oracle,cost_gap,stationarity_residual,control_err_rate,cost_gap_rate,"
         "stationarity_rate,status\n";
  int code = exit_ok;
  try {
    require(!config.steps.empty(), ErrorKind::configuration, "empty n_t list");
    for (std::size_t i = 1; i < config.steps.size(); ++i)
      require(config.steps[i] > config.steps[i - 1], ErrorKind::configuration, "n_t list must be ascending");
    ProblemSpec spec = load_spec_file(config.spec_path);
    PipelineOptions options;
    options.with_oracle = true;
    double prev_err = NAN, prev_gap = NAN, prev_stat = NAN;
    for (int nt : config.steps) {
      try {
        PipelineReport r = run_pipeline(spec, nt, options);
        double e = r.oracle->control_error, g = r.oracle->cost_gap, s = r.stationarity_residual;
        csv << nt << "," << format_number(r.dt) << "," << format_number(e) << "," << format_number(g) << ","
            << format_number(s) << "," << rate(prev_err, e) << "," << rate(prev_gap, g) << "," << rate(prev_stat, s)
            << ",ok\n";
        prev_err = e;
        prev_gap = g;
        prev_stat = s;
      } catch (const Error& e) {
        std::string message = e.what();
        std::replace(message.begin(), message.end(), ',', ';');
        std::replace(message.begin(), message.end(), '\n', ' ');
        csv << nt << ",,,,,,,,failed: " << message << "\n";
        err << "n_t = " << nt << ": " << e.what() << "\n";
        code = exit_code_for(e.kind());
        break;
      }
    }
  } catch (const Error& e) {
    err << e.what() << "\n";
    return exit_code_for(e.kind());
  }
  try {
    write_text(config.output, csv.str(), out);
  } catch (const Error& e) {
    err << e.what() << "\n";
    return exit_code_for(e.kind());
  }
  return code;
}

int cmd_validate(const std::string& spec_path, std::ostream& out, std::ostream& err) {
  try {
    ProblemSpec spec = load_spec_file(spec_path);
    ScenarioTree tree(spec.T, validation_steps(spec));
    CoefficientSet coeffs = realize(spec, tree);
    ValidationReport report = validate_h1_h2(coeffs, spec.delta);
    out << report.summary();
    out << (report.passed() ? "valid\n" : "invalid\n");
    return report.passed() ? exit_ok : exit_invalid;
  } catch (const Error& e) {
    err << e.what() << "\n";
    return exit_code_for(e.kind());
  }
}

int main(int argc, char** argv) {
  CLI::App app{"Mean-field backward stochastic LQ solver on binomial scenario trees"};
  app.require_subcommand(1);

  RunConfig run;
  CLI::App* run_cmd = app.add_subcommand("run", "Solve one spec and write a JSON report");
  run_cmd->add_option("--spec", run.spec_path, "Problem spec (JSON)")->required();
  run_cmd->add_option("--nt", run.steps, "Number of time steps")->check(CLI::Range(1, 24));
  run_cmd->add_flag("--with-oracle", run.with_oracle, "Compare against the discrete QP optimum");
  run_cmd->add_flag("--check", run.check, "Enforce acceptance tolerances (exit 3 on violation)");
  run_cmd->add_option("--out", run.output, "Report file (default: stdout)");
  bool no_timings = false;
  run_cmd->add_flag("--no-timings", no_timings, "Omit wall-clock timings from the report");
  run_cmd->add_option("--tol-control-error", run.tolerances.control_error, "Check bound on the control error");
  run_cmd->add_option("--tol-constraint", run.tolerances.constraint, "Check bound on constraint residuals");
  run_cmd->add_option("--tol-kkt", run.tolerances.kkt, "Check bound on the oracle gradient");

  ConvergeConfig conv;
  std::string nt_list = "4,8,16";
  CLI::App* conv_cmd = app.add_subcommand("converge", "Convergence study against the oracle, CSV output");
  conv_cmd->add_option("--spec", conv.spec_path, "Problem spec (JSON)")->required();
  conv_cmd->add_option("--nt", nt_list, "Comma-separated ascending n_t list");
  conv_cmd->add_option("--out", conv.output, "CSV file (default: stdout)");

  std::string validate_path;
  CLI::App* val_cmd = app.add_subcommand("validate", "Check the standing assumptions of a spec");
  val_cmd->add_option("--spec", validate_path, "Problem spec (JSON)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? exit_ok : exit_invalid;
  }

  if (run_cmd->parsed()) {
    run.timings = !no_timings;
    return cmd_run(run, std::cout, std::cerr);
  }
  if (conv_cmd->parsed()) {
    std::stringstream ss(nt_list);
    std::string item;
    try {
      while (std::getline(ss, item, ',')) conv.steps.push_back(std::stoi(item));
    } catch (const std::exception&) {
      std::cerr << "invalid --nt list: " << nt_list << "\n";
      return exit_invalid;
    }
    return cmd_converge(conv, std::cout, std::cerr);
  }
  return cmd_validate(validate_path, std::cout, std::cerr);
}

}  // namespace mfbslq::cli
