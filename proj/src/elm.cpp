#include "mfbslq/elm.hpp"

#include "mfbslq/error.hpp"

#include <algorithm>
#include <optional>

namespace mfbslq {

namespace {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

AdaptedProcess terminal_batch(const ScenarioTree& tree, const AdaptedProcess& xi, Eigen::Index cols,
                              Eigen::Index xi_col) {
  int nt = tree.steps();
  AdaptedProcess out(xi.rows(), cols, nt, nt);
  if (xi_col >= 0)
    for (std::size_t j = 0; j < tree.width(nt); ++j) out(nt, j).col(xi_col) = xi(nt, j).col(0);
  return out;
}

}  // namespace

Mat stacked_adjoint_means(const ScenarioTree& tree, const CoefficientSet& c, const AdaptedProcess& X) {
  int n = c.n, m = c.m, nt = tree.steps();
  StackedLayout layout{n, m, nt};
  Mat out = Mat::Zero(layout.size(), X.cols());
  for (int k = 0; k < nt; ++k) {
    double p = tree.probability(k);
    for (std::size_t j = 0; j < tree.width(k); ++j) {
      auto x = X(k, j);
      out.middleRows(layout.first(k), n).noalias() += p * c[Coef::A_bar](k, j).transpose() * x;
      out.middleRows(layout.second(k), n).noalias() += p * c[Coef::C_bar](k, j).transpose() * x;
      out.middleRows(layout.third(k), m).noalias() += p * c[Coef::B_bar](k, j).transpose() * x;
    }
  }
  return out;
}

BsdeSolution constrained_state(const ScenarioTree& tree, const CoefficientSet& c, const BackwardScheme& scheme,
                               const AdaptedProcess& u, Eigen::Index col, const Vec& eta, const AdaptedProcess* terminal,
                               Eigen::Index terminal_col) {
  int nt = tree.steps();
  AdaptedProcess uc(c.m, 1, 0, nt - 1), term(c.n, 1, nt, nt);
  for (int k = 0; k < nt; ++k)
    for (std::size_t j = 0; j < tree.width(k); ++j) uc(k, j) = u(k, j).col(col);
  if (terminal)
    for (std::size_t j = 0; j < tree.width(nt); ++j) term(nt, j) = (*terminal)(nt, j).col(terminal_col);
  return solve_constrained_bsde(tree, c, scheme, uc, unstack_means(eta, c.n, c.m, nt), term);
}

OperatorBlocks probe_operators(const Embedding& emb, const AdaptedProcess& xi, MeanSource source, Eigen::Index batch) {
  const ScenarioTree& tree = emb.tree();
  const CoefficientSet& c = emb.coeffs();
  Eigen::Index d = stacked_size(c.n, c.m, tree.steps());
  Eigen::Index total = 2 * d + 1;  // lambda impulses, eta impulses, xi
  OperatorBlocks out{source, Mat(d, d), Mat(d, d), Vec(d), Mat(d, d), Mat(d, d), Vec(d)};
  std::optional<BackwardScheme> scheme;
  if (source == MeanSource::state) scheme.emplace(tree, c);
  StackedLayout layout{c.n, c.m, tree.steps()};
  for (Eigen::Index start = 0; start < total; start += batch) {
    Eigen::Index cols = std::min(batch, total - start);
    Mat eta = Mat::Zero(d, cols), lambda = Mat::Zero(d, cols);
    Eigen::Index xi_col = -1;
    for (Eigen::Index q = 0; q < cols; ++q) {
      Eigen::Index g = start + q;
      if (g < d) lambda(g, q) = 1.0;
      else if (g < 2 * d) eta(g - d, q) = 1.0;
      else xi_col = q;
    }
    AdaptedProcess terminal = terminal_batch(tree, xi, cols, xi_col);
    DecoupledSolution sol = decoupled_solve(emb, terminal, eta, lambda);
    Mat means = stacked_means(tree, sol.state);
    if (scheme)
      for (Eigen::Index q = 0; q < cols; ++q) {
        BsdeSolution st = constrained_state(tree, c, *scheme, sol.state.u, q, eta.col(q), &terminal, q);
        for (int k = 0; k < tree.steps(); ++k) {
          means.col(q).segment(layout.first(k), c.n) = expect(tree, st.Y, k).col(0);
          means.col(q).segment(layout.second(k), c.n) = expect(tree, st.Z, k).col(0);
        }
      }
    Mat adjoint = stacked_adjoint_means(tree, c, sol.X);
    for (Eigen::Index q = 0; q < cols; ++q) {
      Eigen::Index g = start + q;
      if (g < d) {
        out.L.col(g) = means.col(q);
        out.K_lambda.col(g) = adjoint.col(q);
      } else if (g < 2 * d) {
        out.P_eta.col(g - d) = means.col(q);
        out.K_eta.col(g - d) = adjoint.col(q);
      } else {
        out.p_xi = means.col(q);
        out.k_xi = adjoint.col(q);
      }
    }
  }
  return out;
}

OperatorBlocks probe_operators(const ScenarioTree& tree, const CoefficientSet& coeffs, const RiccatiSolution& ric,
                               const AdaptedProcess& xi, MeanSource source) {
  Embedding emb(tree, coeffs, ric);
  return probe_operators(emb, xi, source);
}

MultiplierSolver::MultiplierSolver(const Mat& L, double rank_tolerance) {
  cod_.setThreshold(rank_tolerance);
  cod_.compute(L);
}

Mat MultiplierSolver::solve(const Mat& rhs) const { return cod_.solve(rhs); }

double feasibility_tolerance(double rhs_norm, double factor) { return factor * (1.0 + rhs_norm); }

MultiplierSolve solve_multipliers(const OperatorBlocks& blocks, const MeanTriple& eta, double feas_factor) {
  MultiplierSolver solver(blocks.L);
  return solve_multipliers(blocks, solver, eta, feas_factor);
}

MultiplierSolve solve_multipliers(const OperatorBlocks& blocks, const MultiplierSolver& solver, const MeanTriple& eta,
                                  double feas_factor) {
  int n = static_cast<int>(eta.alpha.rows()), m = static_cast<int>(eta.gamma.rows());
  int nt = static_cast<int>(eta.alpha.cols());
  Vec e = stack(eta);
  require(e.size() == blocks.L.rows(), ErrorKind::contract, "mean triple does not match the operator blocks");
  Vec rhs = e - blocks.P_eta * e - blocks.p_xi;
  MultiplierSolve out;
  out.stacked = solver.solve(rhs);
  out.lambda = unstack_multipliers(out.stacked, n, m, nt);
  out.rhs_norm = rhs.norm();
  out.residual = (blocks.L * out.stacked - rhs).norm();
  out.certified = out.residual <= feasibility_tolerance(out.rhs_norm, feas_factor);
  out.rank = solver.rank();
  return out;
}

ConstraintResiduals verify_constraints(const ScenarioTree& tree, const ConstrainedSolution& sol, const MeanTriple& eta) {
  int nt = tree.steps();
  ConstraintResiduals out{Vec(nt), Vec(nt), Vec(nt)};
  for (int k = 0; k < nt; ++k) {
    out.y(k) = (expect(tree, sol.Y, k).col(0) - eta.alpha.col(k)).norm();
    out.z(k) = (expect(tree, sol.Z, k).col(0) - eta.beta.col(k)).norm();
    out.u(k) = (expect(tree, sol.u, k).col(0) - eta.gamma.col(k)).norm();
  }
  out.max_y = out.y.maxCoeff();
  out.max_z = out.z.maxCoeff();
  out.max_u = out.u.maxCoeff();
  return out;
}

namespace {

ConstrainedSolution assemble_solution(const Embedding& emb, MeanSource source, const AdaptedProcess& xi,
                                      const MeanTriple& eta, const MultiplierTriple& lambda, const Vec& stacked_lambda) {
  const ScenarioTree& tree = emb.tree();
  const CoefficientSet& c = emb.coeffs();
  Vec e = stack(eta);
  DecoupledSolution sol = decoupled_solve(emb, xi, e, stacked_lambda);
  ConstrainedSolution out;
  out.u = std::move(sol.state.u);
  out.Y_tilde = std::move(sol.state.Y);
  out.Z_tilde = std::move(sol.state.Z);
  out.X = std::move(sol.X);
  if (source == MeanSource::state) {
    BackwardScheme scheme(tree, c);
    BsdeSolution st = solve_constrained_bsde(tree, c, scheme, out.u, eta, xi);
    out.Y = std::move(st.Y);
    out.Z = std::move(st.Z);
  } else {
    out.Y = out.Y_tilde;
    out.Z = out.Z_tilde;
  }
  out.lambda = lambda;
  out.residuals = verify_constraints(tree, out, eta);
  for (int k = 0; k < tree.steps(); ++k)
    for (std::size_t j = 0; j < tree.width(k); ++j) {
      Vec r = c[Coef::N](k, j) * out.u(k, j).col(0) - c[Coef::B](k, j).transpose() * out.X(k, j).col(0) +
              out.lambda.lambda3.col(k);
      out.stationarity_max = std::max(out.stationarity_max, r.cwiseAbs().maxCoeff());
    }
  return out;
}

}  // namespace

ConstrainedSolution solve_constrained_problem(const Embedding& emb, const OperatorBlocks& blocks,
                                              const MultiplierSolver& solver, const AdaptedProcess& xi,
                                              const MeanTriple& eta) {
  MultiplierSolve ms = solve_multipliers(blocks, solver, eta);
  ConstrainedSolution out = assemble_solution(emb, blocks.source, xi, eta, ms.lambda, ms.stacked);
  out.lambda_residual = ms.residual;
  out.certified = ms.certified;
  return out;
}

ConstrainedSolution solve_constrained_problem(const Embedding& emb, const OperatorBlocks& blocks, const AdaptedProcess& xi,
                                              const MeanTriple& eta, const MultiplierTriple& lambda) {
  Vec e = stack(eta), l = stack(lambda);
  Vec rhs = e - blocks.P_eta * e - blocks.p_xi;
  ConstrainedSolution out = assemble_solution(emb, blocks.source, xi, eta, lambda, l);
  out.lambda_residual = (blocks.L * l - rhs).norm();
  out.certified = out.lambda_residual <= feasibility_tolerance(rhs.norm());
  return out;
}

ConstrainedSolution solve_constrained_problem(const ScenarioTree& tree, const CoefficientSet& coeffs,
                                              const RiccatiSolution& ric, const AdaptedProcess& xi,
                                              const MeanTriple& eta) {
  Embedding emb(tree, coeffs, ric);
  OperatorBlocks blocks = probe_operators(emb, xi);
  MultiplierSolver solver(blocks.L);
  return solve_constrained_problem(emb, blocks, solver, xi, eta);
}

}  // namespace mfbslq
