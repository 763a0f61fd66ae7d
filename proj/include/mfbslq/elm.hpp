#pragma once

#include "mfbslq/bsde.hpp"
#include "mfbslq/model.hpp"
#include "mfbslq/paths.hpp"
#include "mfbslq/riccati.hpp"
#include "mfbslq/tree.hpp"

namespace mfbslq {

// Where E[Y], E[Z] are read from. state: the constrained state equation driven
// by the decoupled control. reconstruction: the embedded (Y~, Z~) of the
// decoupled solve itself. E[u] is the decoupled control's mean either way.
enum class MeanSource { state, reconstruction };

// Affine response of the stacked means (E[Y_k], E[Z_k], E[u_k]) of the
// decoupled solution: means = L lambda + P_eta eta + p_xi.
struct OperatorBlocks {
  MeanSource source = MeanSource::state;
  Eigen::MatrixXd L;
  Eigen::MatrixXd P_eta;
  Eigen::VectorXd p_xi;
  // Mean-field adjoint response (E[A_bar^T X_k], E[C_bar^T X_k], E[B_bar^T X_k]),
  // stacked like lambda: adjoint = K_lambda lambda + K_eta eta + k_xi.
  Eigen::MatrixXd K_lambda;
  Eigen::MatrixXd K_eta;
  Eigen::VectorXd k_xi;
};

// Stacked (E[A_bar^T X_k], E[C_bar^T X_k], E[B_bar^T X_k]) for every column of X.
Eigen::MatrixXd stacked_adjoint_means(const ScenarioTree& tree, const CoefficientSet& coeffs, const AdaptedProcess& X);

// Columns are processed in batches of at most `batch` decoupled solves.
OperatorBlocks probe_operators(const Embedding& emb, const AdaptedProcess& xi, MeanSource source = MeanSource::state,
                               Eigen::Index batch = 64);
OperatorBlocks probe_operators(const ScenarioTree& tree, const CoefficientSet& coeffs, const RiccatiSolution& ric,
                               const AdaptedProcess& xi, MeanSource source = MeanSource::state);

// Constrained state driven by column `col` of a batched decoupled control, at
// means eta; terminal column `terminal_col` of `terminal`, or zero when null.
BsdeSolution constrained_state(const ScenarioTree& tree, const CoefficientSet& coeffs, const BackwardScheme& scheme,
                               const AdaptedProcess& u, Eigen::Index col, const Eigen::VectorXd& eta,
                               const AdaptedProcess* terminal, Eigen::Index terminal_col);

// Minimum-norm least squares for L lambda = rhs with a cached complete
// orthogonal decomposition (rank tolerance relative to |L|).
class MultiplierSolver {
 public:
  explicit MultiplierSolver(const Eigen::MatrixXd& L, double rank_tolerance = 1e-10);
  Eigen::MatrixXd solve(const Eigen::MatrixXd& rhs) const;
  Eigen::Index rank() const { return cod_.rank(); }

 private:
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod_;
};

struct MultiplierSolve {
  MultiplierTriple lambda;
  Eigen::VectorXd stacked;
  double residual = 0.0;
  double rhs_norm = 0.0;
  bool certified = false;
  Eigen::Index rank = 0;
};

double feasibility_tolerance(double rhs_norm, double factor = 1e-8);

MultiplierSolve solve_multipliers(const OperatorBlocks& blocks, const MeanTriple& eta, double feas_factor = 1e-8);
MultiplierSolve solve_multipliers(const OperatorBlocks& blocks, const MultiplierSolver& solver, const MeanTriple& eta,
                                  double feas_factor = 1e-8);

struct ConstraintResiduals {
  Eigen::VectorXd y, z, u;  // per-step Euclidean norms
  double max_y = 0.0, max_z = 0.0, max_u = 0.0;
  double max() const { return std::max(max_y, std::max(max_z, max_u)); }
};

// Y, Z follow blocks.source: the state driven by u, or the reconstruction.
// Y_tilde, Z_tilde are always the reconstruction.
struct ConstrainedSolution {
  AdaptedProcess u, Y, Z, X;
  AdaptedProcess Y_tilde, Z_tilde;
  MultiplierTriple lambda;
  double lambda_residual = 0.0;
  bool certified = false;
  ConstraintResiduals residuals;
  double stationarity_max = 0.0;  // max |N u - B^T X + lambda3|
};

ConstrainedSolution solve_constrained_problem(const ScenarioTree& tree, const CoefficientSet& coeffs,
                                              const RiccatiSolution& ric, const AdaptedProcess& xi,
                                              const MeanTriple& eta);
ConstrainedSolution solve_constrained_problem(const Embedding& emb, const OperatorBlocks& blocks,
                                              const MultiplierSolver& solver, const AdaptedProcess& xi,
                                              const MeanTriple& eta);

// Decoupled solve at a prescribed multiplier (no least-squares step); lambda_residual
// is the misfit of the mean identity L lambda + P eta + p = eta.
ConstrainedSolution solve_constrained_problem(const Embedding& emb, const OperatorBlocks& blocks, const AdaptedProcess& xi,
                                              const MeanTriple& eta, const MultiplierTriple& lambda);

ConstraintResiduals verify_constraints(const ScenarioTree& tree, const ConstrainedSolution& sol, const MeanTriple& eta);

}  // namespace mfbslq
