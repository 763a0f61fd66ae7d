#pragma once

#include "mfbslq/bsde.hpp"
#include "mfbslq/model.hpp"
#include "mfbslq/paths.hpp"
#include "mfbslq/tree.hpp"

#include <algorithm>
#include <vector>

namespace mfbslq {

struct RiccatiDiagnostics {
  double max_asymmetry = 0.0;
  std::vector<double> min_sigma_eigenvalue;  // per level 0..n_t
  double min_singular_value = 0.0;           // of I + Sigma R over levels 0..n_t-1
  int max_newton_iterations = 0;
};

// Sigma: n x n, levels 0..n_t, Sigma(n_t) = 0. Phi = z_from_next(Sigma), levels 0..n_t-1.
struct RiccatiSolution {
  AdaptedProcess Sigma;
  AdaptedProcess Phi;
  RiccatiDiagnostics diagnostics;
};

struct NewtonOptions {
  int max_iterations = 50;
  double tolerance = 1e-12;  // relative to 1 + |Sigma|
  int max_halvings = 30;
};

// Backward recursion Sigma_k = E_k Sigma_{k+1} - dt F(Sigma_k, Phi_k) with
// F = -Sigma A^T - A Sigma + Sigma Q Sigma - B N^{-1} B^T + Phi R K Phi
//     - Phi (I + R Sigma)^{-1} C^T - C K (Phi + Sigma C^T),  K = (I + Sigma R)^{-1},
// solved per node by damped Newton in the symmetric subspace.
RiccatiSolution solve_riccati(const ScenarioTree& tree, const CoefficientSet& coeffs, const NewtonOptions& options = {});

// Riccati drift F at one node and its directional derivative dF[E].
Eigen::MatrixXd riccati_drift(const Eigen::MatrixXd& sigma, const Eigen::MatrixXd& phi, const Eigen::MatrixXd& A,
                              const Eigen::MatrixXd& B, const Eigen::MatrixXd& C, const Eigen::MatrixXd& Q,
                              const Eigen::MatrixXd& R, const Eigen::MatrixXd& N);
Eigen::MatrixXd riccati_drift_derivative(const Eigen::MatrixXd& sigma, const Eigen::MatrixXd& phi,
                                         const Eigen::MatrixXd& A, const Eigen::MatrixXd& C,
                                         const Eigen::MatrixXd& Q, const Eigen::MatrixXd& R,
                                         const Eigen::MatrixXd& direction);

// phi: n x R, levels 0..n_t, phi(n_t) = -xi. varphi = z_from_next(phi).
struct PhiSolution {
  AdaptedProcess phi;
  AdaptedProcess varphi;
};

struct DecoupledState {
  AdaptedProcess u;  // m x R, levels 0..n_t-1
  AdaptedProcess Y;  // n x R, levels 0..n_t
  AdaptedProcess Z;  // n x R, levels 0..n_t-1
};

// Per-node matrices of the decoupled system that depend only on the
// coefficients and the Riccati solution. Holds references to both.
class Embedding {
 public:
  Embedding(const ScenarioTree& tree, const CoefficientSet& coeffs, const RiccatiSolution& ric);

  const ScenarioTree& tree() const { return tree_; }
  const CoefficientSet& coeffs() const { return coeffs_; }
  const RiccatiSolution& riccati() const { return ric_; }

  AdaptedProcess K;            // (I + Sigma R)^{-1}
  AdaptedProcess RK;           // R K
  AdaptedProcess KSigma;       // K Sigma
  AdaptedProcess phi_step;     // (I + dt (Sigma Q - A))^{-1}
  AdaptedProcess phi_varphi;   // (Phi R - C) K
  AdaptedProcess phi_lambda2;  // Phi R K (Sigma + I) - C K Sigma
  AdaptedProcess BNinv;        // B N^{-1}
  AdaptedProcess Ninv;         // N^{-1}
  AdaptedProcess x_drift;      // Q Sigma - A^T
  AdaptedProcess x_diffusion;  // R K (Phi + Sigma C^T) - C^T
  AdaptedProcess z_x;          // K (Phi + Sigma C^T)
  Eigen::MatrixXd x0_map;      // (I + G Sigma_0)^{-1} G

 private:
  const ScenarioTree& tree_;
  const CoefficientSet& coeffs_;
  const RiccatiSolution& ric_;
};

// Column blocks of stacked deterministic paths (rows as in stack()).
struct StackedLayout {
  int n, m, steps;
  Eigen::Index first(int k) const { return static_cast<Eigen::Index>(k) * n; }
  Eigen::Index second(int k) const { return static_cast<Eigen::Index>(n) * steps + static_cast<Eigen::Index>(k) * n; }
  Eigen::Index third(int k) const { return 2 * static_cast<Eigen::Index>(n) * steps + static_cast<Eigen::Index>(k) * m; }
  Eigen::Index size() const { return stacked_size(n, m, steps); }
};

// Batched solves: every column of the stacked inputs is an independent
// problem; `terminal` is n x R at level n_t, `eta` and `lambda` are d x R.
PhiSolution solve_phi(const Embedding& emb, const AdaptedProcess& terminal, const Eigen::MatrixXd& eta,
                      const Eigen::MatrixXd& lambda);
AdaptedProcess solve_xtilde(const Embedding& emb, const PhiSolution& phis, const Eigen::MatrixXd& lambda);
DecoupledState control_and_state(const Embedding& emb, const PhiSolution& phis, const AdaptedProcess& X,
                                 const Eigen::MatrixXd& lambda);

// Single-problem forms.
PhiSolution solve_phi(const ScenarioTree& tree, const CoefficientSet& coeffs, const RiccatiSolution& ric,
                      const MeanTriple& eta, const MultiplierTriple& lambda);
ForwardSolution solve_xtilde(const ScenarioTree& tree, const CoefficientSet& coeffs, const RiccatiSolution& ric,
                             const PhiSolution& phis, const MultiplierTriple& lambda);
DecoupledState control_and_state(const ScenarioTree& tree, const CoefficientSet& coeffs, const RiccatiSolution& ric,
                                 const PhiSolution& phis, const ForwardSolution& xt, const MultiplierTriple& lambda);

// Full decoupled solve for given terminal data, means and multipliers.
struct DecoupledSolution {
  PhiSolution phis;
  AdaptedProcess X;  // adjoint, n x R
  DecoupledState state;
};
DecoupledSolution decoupled_solve(const Embedding& emb, const AdaptedProcess& terminal, const Eigen::MatrixXd& eta,
                                  const Eigen::MatrixXd& lambda);

// Means E[Y_k], E[Z_k], E[u_k] (k < n_t) of a batched state, stacked, d x R.
Eigen::MatrixXd stacked_means(const ScenarioTree& tree, const DecoupledState& state);

// How far a reconstructed (Y, Z, u) is from solving the constrained-state
// scheme at means eta:
//   y: ((I - dt A) Y_k - E_k[Y_{k+1}]) / dt - (Abar alpha + B u + Bbar gamma + C Z + Cbar beta)
//   z: Z_k - z(Y_{k+1})
// as per-level maxima of nodewise Euclidean norms (column 0 of each process),
// and in the weighted norm sqrt(sum_k sum_j dt 2^-k |r|^2).
struct DecouplingDefect {
  Eigen::VectorXd y, z;
  double max_y = 0.0, max_z = 0.0;
  double weighted_y = 0.0, weighted_z = 0.0;
  double max() const { return std::max(max_y, max_z); }
};
DecouplingDefect decoupling_defect(const ScenarioTree& tree, const CoefficientSet& coeffs, const AdaptedProcess& Y,
                                   const AdaptedProcess& Z, const AdaptedProcess& u, const MeanTriple& eta);

// Picard iteration on the coupled system
//   u = N^{-1}(B^T X - lambda3), (Y, Z) the constrained BSDE, and
//   dX = (A^T X - Q Y - lambda1) ds + (C^T X - R Z - lambda2) dW, X(0) = -G Y(0),
// started from X = 0.
struct PicardResult {
  AdaptedProcess u, Y, Z, X;
  int iterations = 0;
  bool converged = false;
  double last_change = 0.0;
};
PicardResult solve_coupled_by_picard(const ScenarioTree& tree, const CoefficientSet& coeffs, const MeanTriple& eta,
                                     const MultiplierTriple& lambda, int max_iterations = 500,
                                     double tolerance = 1e-13);

}  // namespace mfbslq
