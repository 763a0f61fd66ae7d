#include "mfbslq/outer.hpp"

#include "mfbslq/error.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace mfbslq {

namespace {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

std::string coordinate_name(Eigen::Index g, int n, int m, int nt) {
  StackedLayout layout{n, m, nt};
  const char* block = "alpha";
  Eigen::Index local = g, rows = n;
  if (g >= layout.third(0)) {
    block = "gamma";
    local = g - layout.third(0);
    rows = m;
  } else if (g >= layout.second(0)) {
    block = "beta";
    local = g - layout.second(0);
  }
  return std::string(block) + "[" + std::to_string(local % rows) + "] at step " + std::to_string(local / rows);
}

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double lap() {
    auto now = std::chrono::steady_clock::now();
    double s = std::chrono::duration<double>(now - start_).count();
    start_ = now;
    return s;
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

void copy_column(const AdaptedProcess& from, Eigen::Index from_col, AdaptedProcess& to, Eigen::Index to_col,
                 const ScenarioTree& tree) {
  for (int k = to.first_level(); k <= to.last_level(); ++k)
    for (std::size_t j = 0; j < tree.width(k); ++j) to(k, j).col(to_col) = from(k, j).col(from_col);
}

}  // namespace

OuterMaps::Value OuterMaps::evaluate(const ScenarioTree& tree, const Vec& eta) const {
  Value out{Y_offset, Z_offset, u_offset};
  auto apply = [&](const AdaptedProcess& lin, AdaptedProcess& dst) {
    for (int k = dst.first_level(); k <= dst.last_level(); ++k)
      for (std::size_t j = 0; j < tree.width(k); ++j) dst(k, j) += lin(k, j) * eta;
  };
  apply(Y, out.Y);
  apply(Z, out.Z);
  apply(u, out.u);
  return out;
}

OuterMaps probe_outer(const Embedding& emb, const OperatorBlocks& blocks, const MultiplierSolver& solver,
                      const AdaptedProcess& xi, Eigen::Index batch) {
  const ScenarioTree& tree = emb.tree();
  const CoefficientSet& c = emb.coeffs();
  int n = c.n, m = c.m, nt = tree.steps();
  Eigen::Index d = stacked_size(n, m, nt);

  Mat rhs = Mat::Identity(d, d) - blocks.P_eta;
  OuterMaps maps;
  maps.lambda_linear = solver.solve(rhs);
  Mat misfit = blocks.L * maps.lambda_linear - rhs;
  for (Eigen::Index g = 0; g < d; ++g) {
    double r = misfit.col(g).norm();
    if (r > feasibility_tolerance(rhs.col(g).norm()))
      throw Error(ErrorKind::infeasible, "mean impulse " + coordinate_name(g, n, m, nt) +
                                             " is not reachable by the multipliers (residual " + std::to_string(r) + ")");
  }
  maps.lambda_offset = solver.solve(Mat(-blocks.p_xi)).col(0);
  double r0 = (blocks.L * maps.lambda_offset + blocks.p_xi).norm();
  if (r0 > feasibility_tolerance(blocks.p_xi.norm()))
    throw Error(ErrorKind::infeasible, "terminal offset is not reachable by the multipliers (residual " +
                                           std::to_string(r0) + ")");

  maps.Y = AdaptedProcess(n, d, 0, nt);
  maps.Z = AdaptedProcess(n, d, 0, nt - 1);
  maps.u = AdaptedProcess(m, d, 0, nt - 1);
  std::optional<BackwardScheme> scheme;
  if (blocks.source == MeanSource::state) scheme.emplace(tree, c);
  Eigen::Index total = d + 1;
  for (Eigen::Index start = 0; start < total; start += batch) {
    Eigen::Index cols = std::min(batch, total - start);
    Mat eta = Mat::Zero(d, cols), lambda = Mat::Zero(d, cols);
    AdaptedProcess terminal(n, cols, nt, nt);
    for (Eigen::Index q = 0; q < cols; ++q) {
      Eigen::Index g = start + q;
      if (g < d) {
        eta(g, q) = 1.0;
        lambda.col(q) = maps.lambda_linear.col(g);
      } else {
        lambda.col(q) = maps.lambda_offset;
        for (std::size_t j = 0; j < tree.width(nt); ++j) terminal(nt, j).col(q) = xi(nt, j).col(0);
      }
    }
    DecoupledSolution sol = decoupled_solve(emb, terminal, eta, lambda);
    for (Eigen::Index q = 0; q < cols; ++q) {
      Eigen::Index g = start + q;
      const AdaptedProcess* Y = &sol.state.Y;
      const AdaptedProcess* Z = &sol.state.Z;
      Eigen::Index yz_col = q;
      BsdeSolution st;
      if (scheme) {
        st = constrained_state(tree, c, *scheme, sol.state.u, q, eta.col(q), &terminal, q);
        Y = &st.Y;
        Z = &st.Z;
        yz_col = 0;
      }
      if (g < d) {
        copy_column(*Y, yz_col, maps.Y, g, tree);
        copy_column(*Z, yz_col, maps.Z, g, tree);
        copy_column(sol.state.u, q, maps.u, g, tree);
      } else {
        maps.Y_offset = AdaptedProcess(n, 1, 0, nt);
        maps.Z_offset = AdaptedProcess(n, 1, 0, nt - 1);
        maps.u_offset = AdaptedProcess(m, 1, 0, nt - 1);
        copy_column(*Y, yz_col, maps.Y_offset, 0, tree);
        copy_column(*Z, yz_col, maps.Z_offset, 0, tree);
        copy_column(sol.state.u, q, maps.u_offset, 0, tree);
      }
    }
  }
  return maps;
}

OuterMaps probe_outer(const ScenarioTree& tree, const CoefficientSet& coeffs, const RiccatiSolution& ric,
                      const AdaptedProcess& xi) {
  Embedding emb(tree, coeffs, ric);
  OperatorBlocks blocks = probe_operators(emb, xi);
  MultiplierSolver solver(blocks.L);
  return probe_outer(emb, blocks, solver, xi);
}

QuadraticForm assemble_quadratic(const ScenarioTree& tree, const CoefficientSet& coeffs, const OuterMaps& maps) {
  int n = coeffs.n, m = coeffs.m, nt = tree.steps();
  double dt = tree.dt();
  Eigen::Index d = stacked_size(n, m, nt);
  StackedLayout layout{n, m, nt};
  QuadraticForm qf{Mat::Zero(d, d), Vec::Zero(d), 0.0};
  auto add = [&](const Mat& lin, const Mat& off, const Mat& weight, double w) {
    Mat wl = weight * lin;
    qf.H.noalias() += w * (lin.transpose() * wl);
    qf.b.noalias() += w * (wl.transpose() * off.col(0));
    qf.c += w * off.col(0).dot(weight * off.col(0));
  };
  add(maps.Y(0, 0), maps.Y_offset(0, 0), coeffs.G, 1.0);
  for (int k = 0; k < nt; ++k) {
    double w = dt * tree.probability(k);
    for (std::size_t j = 0; j < tree.width(k); ++j) {
      add(maps.Y(k, j), maps.Y_offset(k, j), coeffs[Coef::Q](k, j), w);
      add(maps.Z(k, j), maps.Z_offset(k, j), coeffs[Coef::R](k, j), w);
      add(maps.u(k, j), maps.u_offset(k, j), coeffs[Coef::N](k, j), w);
    }
    qf.H.block(layout.first(k), layout.first(k), n, n) += dt * expect(tree, coeffs[Coef::Q_bar], k);
    qf.H.block(layout.second(k), layout.second(k), n, n) += dt * expect(tree, coeffs[Coef::R_bar], k);
    qf.H.block(layout.third(k), layout.third(k), m, m) += dt * expect(tree, coeffs[Coef::N_bar], k);
  }
  qf.H = 0.5 * (qf.H + qf.H.transpose()).eval();
  return qf;
}

double hat_cost(const ScenarioTree& tree, const CoefficientSet& coeffs, const AdaptedProcess& Y,
                const AdaptedProcess& Z, const AdaptedProcess& u, const MeanTriple& eta) {
  int nt = tree.steps();
  double dt = tree.dt();
  double total = Y(0, 0).col(0).dot(coeffs.G * Y(0, 0).col(0));
  for (int k = 0; k < nt; ++k) {
    double level = 0.0;
    for (std::size_t j = 0; j < tree.width(k); ++j) {
      level += Y(k, j).col(0).dot(coeffs[Coef::Q](k, j) * Y(k, j).col(0));
      level += Z(k, j).col(0).dot(coeffs[Coef::R](k, j) * Z(k, j).col(0));
      level += u(k, j).col(0).dot(coeffs[Coef::N](k, j) * u(k, j).col(0));
    }
    total += dt * tree.probability(k) * level;
    total += dt * (eta.alpha.col(k).dot(expect(tree, coeffs[Coef::Q_bar], k) * eta.alpha.col(k)) +
                   eta.beta.col(k).dot(expect(tree, coeffs[Coef::R_bar], k) * eta.beta.col(k)) +
                   eta.gamma.col(k).dot(expect(tree, coeffs[Coef::N_bar], k) * eta.gamma.col(k)));
  }
  return total;
}

EtaSolve solve_eta(const QuadraticForm& qf, int n, int m, int steps) {
  Eigen::Index d = qf.H.rows();
  require(d == stacked_size(n, m, steps) && qf.b.size() == d, ErrorKind::contract, "quadratic form has wrong size");
  Eigen::SelfAdjointEigenSolver<Mat> es(qf.H);
  EtaSolve out;
  out.min_eigenvalue = es.eigenvalues()(0);
  out.max_eigenvalue = es.eigenvalues()(d - 1);
  double scale = std::max(1.0, std::abs(out.max_eigenvalue));
  if (out.min_eigenvalue < -1e-9 * scale)
    throw Error(ErrorKind::convexity, "outer quadratic form is indefinite (min eigenvalue " +
                                          std::to_string(out.min_eigenvalue) + ")");
  double cutoff = 1e-12 * scale;
  if (out.min_eigenvalue > cutoff) {
    out.stacked = qf.H.llt().solve(-qf.b);
  } else {
    out.singular = true;
    Vec coeffs = es.eigenvectors().transpose() * (-qf.b);
    for (Eigen::Index i = 0; i < d; ++i) {
      double lam = es.eigenvalues()(i);
      coeffs(i) = lam > cutoff ? coeffs(i) / lam : 0.0;
    }
    out.stacked = es.eigenvectors() * coeffs;
  }
  out.first_order_residual = (qf.H * out.stacked + qf.b).norm();
  out.eta = unstack_means(out.stacked, n, m, steps);
  return out;
}

ConditionSolve solve_mean_conditions(const ScenarioTree& tree, const CoefficientSet& coeffs, const OperatorBlocks& blocks) {
  int n = coeffs.n, m = coeffs.m, nt = tree.steps();
  StackedLayout layout{n, m, nt};
  Eigen::Index d = layout.size();
  require(blocks.L.rows() == d && blocks.K_lambda.rows() == d, ErrorKind::contract,
          "operator blocks do not match the coefficients");
  Mat W = Mat::Zero(d, d);
  for (int k = 0; k < nt; ++k) {
    W.block(layout.first(k), layout.first(k), n, n) = expect(tree, coeffs[Coef::Q_bar], k);
    W.block(layout.second(k), layout.second(k), n, n) = expect(tree, coeffs[Coef::R_bar], k);
    W.block(layout.third(k), layout.third(k), m, m) = expect(tree, coeffs[Coef::N_bar], k);
  }
  Mat system(2 * d, 2 * d);
  Mat identity = Mat::Identity(d, d);
  system << blocks.P_eta - identity, blocks.L, blocks.K_eta - W, identity + blocks.K_lambda;
  Vec rhs(2 * d);
  rhs << -blocks.p_xi, -blocks.k_xi;
  Eigen::CompleteOrthogonalDecomposition<Mat> cod;
  cod.setThreshold(1e-12);
  cod.compute(system);
  Vec x = cod.solve(rhs);
  ConditionSolve out;
  out.stacked_eta = x.head(d);
  out.stacked_lambda = x.tail(d);
  out.eta = unstack_means(out.stacked_eta, n, m, nt);
  out.lambda = unstack_multipliers(out.stacked_lambda, n, m, nt);
  out.residual = (system * x - rhs).norm();
  out.rank = cod.rank();
  out.size = 2 * d;
  return out;
}

PipelineReport run_pipeline(const ScenarioTree& tree, const CoefficientSet& coeffs, const PipelineOptions& options) {
  PipelineReport report;
  report.n = coeffs.n;
  report.m = coeffs.m;
  report.steps = tree.steps();
  report.dt = tree.dt();
  Stopwatch clock;

  RiccatiSolution ric = solve_riccati(tree, coeffs);
  report.riccati = ric.diagnostics;
  report.timings["riccati"] = clock.lap();

  Embedding emb(tree, coeffs, ric);
  OperatorBlocks blocks = probe_operators(emb, coeffs.xi, options.means);
  MultiplierSolver solver(blocks.L);
  report.multiplier_rank = solver.rank();
  report.timings["probe_operators"] = clock.lap();

  std::optional<QuadraticForm> qf;
  try {
    OuterMaps maps = probe_outer(emb, blocks, solver, coeffs.xi);
    qf = assemble_quadratic(tree, coeffs, maps);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::infeasible || options.outer == OuterMethod::quadratic) throw;
  }
  report.quadratic_available = qf.has_value();
  report.timings["probe_outer"] = clock.lap();

  std::optional<ConstrainedSolution> sol;
  if (options.outer == OuterMethod::quadratic) {
    EtaSolve es = solve_eta(*qf, coeffs.n, coeffs.m, tree.steps());
    report.outer_method = "quadratic";
    report.eta_star = es.eta;
    report.first_order_residual = es.first_order_residual;
    sol = solve_constrained_problem(emb, blocks, solver, coeffs.xi, es.eta);
  } else {
    ConditionSolve cs = solve_mean_conditions(tree, coeffs, blocks);
    report.outer_method = "conditions";
    report.eta_star = cs.eta;
    report.first_order_residual = cs.residual;
    sol = solve_constrained_problem(emb, blocks, coeffs.xi, cs.eta, cs.lambda);
  }
  if (qf) {
    Vec e = stack(report.eta_star);
    Eigen::SelfAdjointEigenSolver<Mat> es(qf->H, Eigen::EigenvaluesOnly);
    report.hessian_min_eigenvalue = es.eigenvalues()(0);
    report.eta_singular = es.eigenvalues()(0) <= 1e-12 * std::max(1.0, std::abs(es.eigenvalues()(qf->H.rows() - 1)));
    report.quadratic_gradient = (qf->H * e + qf->b).norm();
    report.pipeline_objective = qf->value(e);
  }
  report.timings["outer_solve"] = clock.lap();

  report.lambda_star = sol->lambda;
  report.lambda_residual = sol->lambda_residual;
  report.lambda_certified = sol->certified;
  report.constraints = sol->residuals;
  report.embedding_stationarity = sol->stationarity_max;
  report.decoupling = decoupling_defect(tree, coeffs, sol->Y_tilde, sol->Z_tilde, sol->u, report.eta_star);
  report.u_star = std::move(sol->u);
  report.Y_star = std::move(sol->Y);
  report.Z_star = std::move(sol->Z);
  report.X_star = std::move(sol->X);

  CostModel model(tree, coeffs);
  BsdeSolution exact = model.state(report.u_star);
  report.cost = evaluate_cost(tree, coeffs, exact.Y, exact.Z, report.u_star);
  StationarityReport st = stationarity_residual(tree, coeffs, exact.Y, exact.Z, report.u_star);
  report.stationarity_residual = st.weighted_norm;
  report.stationarity_max = st.max_abs;
  report.timings["verification"] = clock.lap();

  if (options.with_oracle) {
    QpResult qp = solve_qp(tree, coeffs, options.qp);
    OracleComparison cmp;
    cmp.cost = qp.cost;
    cmp.cost_gap = report.cost - qp.cost;
    AdaptedProcess diff = report.u_star;
    for (int k = 0; k < tree.steps(); ++k)
      for (std::size_t j = 0; j < tree.width(k); ++j) diff(k, j) -= qp.u(k, j);
    double ref = weighted_norm(tree, qp.u);
    double err = weighted_norm(tree, diff);
    cmp.control_error = ref > 0.0 ? err / ref : err;
    cmp.gradient_norm = qp.gradient_norm;
    cmp.gradient_norm_at_zero = qp.gradient_norm_at_zero;
    cmp.method = qp.method;
    cmp.stationarity_residual = stationarity_residual(tree, coeffs, qp.state.Y, qp.state.Z, qp.u).weighted_norm;
    report.oracle = cmp;
    report.timings["oracle"] = clock.lap();
  }
  return report;
}

PipelineReport run_pipeline(const ProblemSpec& spec, int steps, const PipelineOptions& options) {
  ScenarioTree tree(spec.T, steps);
  CoefficientSet coeffs = realize(spec, tree);
  ValidationReport validation = validate_h1_h2(coeffs, spec.delta);
  if (!validation.passed()) throw Error(ErrorKind::validation, "assumption check failed\n" + validation.summary());
  return run_pipeline(tree, coeffs, options);
}

}  // namespace mfbslq
