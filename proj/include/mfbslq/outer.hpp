#pragma once

#include "mfbslq/elm.hpp"
#include "mfbslq/model.hpp"
#include "mfbslq/oracle.hpp"
#include "mfbslq/riccati.hpp"
#include "mfbslq/tree.hpp"

#include <map>
#include <optional>
#include <string>

namespace mfbslq {

// Affine maps eta -> processes of the constrained optimum: value = linear * eta + offset
// at every node. Linear parts carry one column per stacked eta coordinate.
struct OuterMaps {
  AdaptedProcess Y, Z, u;                       // n x d, n x d, m x d
  AdaptedProcess Y_offset, Z_offset, u_offset;  // offsets from xi
  Eigen::MatrixXd lambda_linear;                // multipliers: lambda = lambda_linear eta + lambda_offset
  Eigen::VectorXd lambda_offset;

  struct Value {
    AdaptedProcess Y, Z, u;
  };
  Value evaluate(const ScenarioTree& tree, const Eigen::VectorXd& eta) const;
};

// Each eta unit impulse is resolved through the multiplier system; any
// impulse whose multiplier solve is not certified raises Error(infeasible).
OuterMaps probe_outer(const Embedding& emb, const OperatorBlocks& blocks, const MultiplierSolver& solver,
                      const AdaptedProcess& xi, Eigen::Index batch = 64);
OuterMaps probe_outer(const ScenarioTree& tree, const CoefficientSet& coeffs, const RiccatiSolution& ric,
                      const AdaptedProcess& xi);

// J_eta(eta) = eta^T H eta + 2 b^T eta + c.
struct QuadraticForm {
  Eigen::MatrixXd H;
  Eigen::VectorXd b;
  double c = 0.0;
  double value(const Eigen::VectorXd& eta) const { return eta.dot(H * eta) + 2.0 * b.dot(eta) + c; }
};

QuadraticForm assemble_quadratic(const ScenarioTree& tree, const CoefficientSet& coeffs, const OuterMaps& maps);

// Cost of a constrained candidate with the mean terms replaced by eta:
// <G Y0, Y0> + sum dt 2^-k (<QY,Y> + <RZ,Z> + <Nu,u>) + sum dt (<E Qbar alpha, alpha> + ...).
double hat_cost(const ScenarioTree& tree, const CoefficientSet& coeffs, const AdaptedProcess& Y,
                const AdaptedProcess& Z, const AdaptedProcess& u, const MeanTriple& eta);

struct EtaSolve {
  MeanTriple eta;
  Eigen::VectorXd stacked;
  double first_order_residual = 0.0;
  bool singular = false;
  double min_eigenvalue = 0.0;
  double max_eigenvalue = 0.0;
};

// Solves H eta = -b; minimum-norm solution (flagged) when H is singular.
// Throws Error(convexity) when H has an eigenvalue below -1e-9 max(1, |H|).
EtaSolve solve_eta(const QuadraticForm& qf, int n, int m, int steps);

// Mean-field matching conditions for eta: the mean identity L lambda + P eta + p = eta
// together with lambda1 = E[Qbar] alpha - E[Abar^T X], lambda2 = E[Rbar] beta - E[Cbar^T X],
// lambda3 = E[Nbar] gamma - E[Bbar^T X], solved jointly in (eta, lambda).
struct ConditionSolve {
  MeanTriple eta;
  MultiplierTriple lambda;
  Eigen::VectorXd stacked_eta, stacked_lambda;
  double residual = 0.0;
  Eigen::Index rank = 0;
  Eigen::Index size = 0;
};

ConditionSolve solve_mean_conditions(const ScenarioTree& tree, const CoefficientSet& coeffs, const OperatorBlocks& blocks);

// conditions: eta from the matching conditions (default). quadratic: eta minimizes the
// probed quadratic form, lambda from the minimum-norm multiplier solve.
enum class OuterMethod { conditions, quadratic };

struct PipelineOptions {
  bool with_oracle = false;
  OuterMethod outer = OuterMethod::conditions;
  MeanSource means = MeanSource::state;
  QpOptions qp;
};

struct OracleComparison {
  double cost = 0.0;
  double control_error = 0.0;  // |u* - u_oracle|_w / |u_oracle|_w (absolute when u_oracle = 0)
  double cost_gap = 0.0;       // J(u*) - J(u_oracle)
  double gradient_norm = 0.0;
  double gradient_norm_at_zero = 0.0;
  double stationarity_residual = 0.0;  // continuous-form residual at u_oracle
  std::string method;
};

struct PipelineReport {
  int n = 0, m = 0, steps = 0;
  double dt = 0.0;
  MeanTriple eta_star;
  MultiplierTriple lambda_star;
  AdaptedProcess u_star, Y_star, Z_star, X_star;
  double cost = 0.0;                 // exact discrete J(u*)
  double pipeline_objective = 0.0;   // J_eta at eta*
  double lambda_residual = 0.0;
  bool lambda_certified = false;
  Eigen::Index multiplier_rank = 0;
  ConstraintResiduals constraints;
  std::string outer_method;
  double first_order_residual = 0.0;     // residual of the system that fixed eta*
  bool quadratic_available = false;      // false when some eta impulse is unreachable
  double quadratic_gradient = 0.0;       // |H eta* + b|
  bool eta_singular = false;
  double hessian_min_eigenvalue = 0.0;
  double stationarity_residual = 0.0;    // weighted norm at (u*, its exact state)
  double stationarity_max = 0.0;
  double embedding_stationarity = 0.0;   // max |N u - B^T X + lambda3|
  DecouplingDefect decoupling;           // reconstructed triple against the state scheme
  RiccatiDiagnostics riccati;
  std::optional<OracleComparison> oracle;
  std::map<std::string, double> timings;  // seconds; excluded from the checked payload
};

PipelineReport run_pipeline(const ScenarioTree& tree, const CoefficientSet& coeffs, const PipelineOptions& options = {});
// realize -> validate -> full pipeline. Validation failure throws Error(validation).
PipelineReport run_pipeline(const ProblemSpec& spec, int steps, const PipelineOptions& options = {});

}  // namespace mfbslq
