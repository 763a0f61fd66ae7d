#pragma once

#include "mfbslq/model.hpp"
#include "mfbslq/paths.hpp"
#include "mfbslq/tree.hpp"

#include <functional>
#include <vector>

namespace mfbslq {

struct BsdeSolution {
  AdaptedProcess Y;  // n x 1, levels 0..n_t
  AdaptedProcess Z;  // n x 1, levels 0..n_t-1
};

struct ForwardSolution {
  AdaptedProcess X;  // n x 1, levels 0..n_t
};

// Per-node one-step operators of the implicit backward scheme,
// (I - dt A_k)^{-1} and (I - dt A_k)^{-1} A_bar_k, plus the factorized
// level matrices I - dt sum_j p (I - dt A_j)^{-1} A_bar_j that resolve the
// mean-field coupling.
class BackwardScheme {
 public:
  BackwardScheme(const ScenarioTree& tree, const CoefficientSet& coeffs);

  const AdaptedProcess& resolvent() const { return resolvent_; }
  const AdaptedProcess& resolvent_abar() const { return resolvent_abar_; }
  const Eigen::PartialPivLU<Eigen::MatrixXd>& level_solver(int level) const {
    return level_solvers_[static_cast<std::size_t>(level)];
  }

 private:
  AdaptedProcess resolvent_;
  AdaptedProcess resolvent_abar_;
  std::vector<Eigen::PartialPivLU<Eigen::MatrixXd>> level_solvers_;
};

// Backward sweep with prescribed means eta in place of E[Y], E[Z], E[u]:
// Z_k = z(Y_{k+1}), (I - dt A) Y_k = E_k Y_{k+1} + dt (A_bar alpha + B u + B_bar gamma + C Z + C_bar beta).
BsdeSolution solve_constrained_bsde(const ScenarioTree& tree, const CoefficientSet& coeffs,
                                    const AdaptedProcess& u, const MeanTriple& eta);
BsdeSolution solve_constrained_bsde(const ScenarioTree& tree, const CoefficientSet& coeffs,
                                    const BackwardScheme& scheme, const AdaptedProcess& u,
                                    const MeanTriple& eta, const AdaptedProcess& terminal);

// Mean-field state equation; the level means are resolved by one n x n solve per level.
BsdeSolution solve_meanfield_bsde(const ScenarioTree& tree, const CoefficientSet& coeffs, const AdaptedProcess& u);
BsdeSolution solve_meanfield_bsde(const ScenarioTree& tree, const CoefficientSet& coeffs,
                                  const BackwardScheme& scheme, const AdaptedProcess& u,
                                  const AdaptedProcess& terminal);

// Callbacks for an explicit forward step. `prepare` runs once per level
// before any node of that level is advanced and may cache level means.
struct ForwardDynamics {
  std::function<void(int level, const AdaptedProcess& X)> prepare;
  std::function<Eigen::VectorXd(int level, std::size_t index, const Eigen::VectorXd& x)> drift;
  std::function<Eigen::VectorXd(int level, std::size_t index, const Eigen::VectorXd& x)> diffusion;
};

// X_{k+1}(child) = X_k - dt drift - dW diffusion.
ForwardSolution solve_forward_sde(const ScenarioTree& tree, const Eigen::VectorXd& init,
                                  const ForwardDynamics& dynamics);

// Zero control on levels 0..n_t-1.
AdaptedProcess zero_control(const ScenarioTree& tree, int m);

}  // namespace mfbslq
