#pragma once

#include "mfbslq/bsde.hpp"
#include "mfbslq/model.hpp"
#include "mfbslq/tree.hpp"

#include <optional>
#include <string>
#include <vector>

namespace mfbslq {

// Stacking of per-node vectors of dimension `dim` over levels first..last,
// level by level, nodes in index order.
struct NodeLayout {
  int dim = 0;
  int first = 0;
  int last = -1;

  Eigen::Index offset(int level, std::size_t index) const {
    return dim * static_cast<Eigen::Index>((std::size_t{1} << level) - (std::size_t{1} << first) + index);
  }
  Eigen::Index size() const { return last < first ? 0 : offset(last + 1, 0); }
};

Eigen::VectorXd flatten(const AdaptedProcess& proc, const NodeLayout& layout);
AdaptedProcess unflatten(const Eigen::Ref<const Eigen::VectorXd>& v, const NodeLayout& layout);

// Affine map u -> (Y, Z) of the mean-field state equation; Y(0) is the
// first n rows of the Y block.
struct StateMap {
  NodeLayout control, y, z;
  Eigen::MatrixXd linear;  // rows: Y block then Z block; cols: control
  Eigen::VectorXd offset;  // response to xi with u = 0

  Eigen::Index y_rows() const { return y.size(); }
  Eigen::Index z_rows() const { return z.size(); }
};

StateMap assemble_state_map(const ScenarioTree& tree, const CoefficientSet& coeffs, Eigen::Index size_cap = 20000);

// Exact discrete cost
//   J = <G Y0, Y0> + sum_k dt sum_j 2^-k (<QY,Y> + <RZ,Z> + <Nu,u>)
//       + sum_k dt (<E[Qbar] EY, EY> + <E[Rbar] EZ, EZ> + <E[Nbar] Eu, Eu>), k = 0..n_t-1.
double evaluate_cost(const ScenarioTree& tree, const CoefficientSet& coeffs, const AdaptedProcess& Y,
                     const AdaptedProcess& Z, const AdaptedProcess& u);

// Cost and gradient of the discrete problem. The gradient is the Riesz
// representer in the weighted product <u, v>_w = sum dt 2^-k u.v, computed by
// the exact transpose of the backward scheme.
class CostModel {
 public:
  CostModel(const ScenarioTree& tree, const CoefficientSet& coeffs);

  const BackwardScheme& scheme() const { return scheme_; }
  BsdeSolution state(const AdaptedProcess& u) const;
  double cost(const AdaptedProcess& u) const;
  AdaptedProcess gradient(const AdaptedProcess& u) const;
  // Weighted Hessian applied to v (half the gradient of the homogeneous problem).
  AdaptedProcess hessian_apply(const AdaptedProcess& v) const;
  // Euclidean adjoint of the linear map u -> (Y, Z): returns sum of Ybar.dY + Zbar.dZ sensitivities.
  AdaptedProcess transpose_state(const AdaptedProcess& ybar, const AdaptedProcess& zbar) const;

 private:
  AdaptedProcess gradient_impl(const AdaptedProcess& u, const AdaptedProcess& terminal) const;

  const ScenarioTree& tree_;
  const CoefficientSet& coeffs_;
  BackwardScheme scheme_;
  AdaptedProcess zero_terminal_;
  std::vector<Eigen::MatrixXd> mean_q_, mean_r_, mean_n_;
};

struct QpOptions {
  enum class Method { automatic, dense, iterative };
  Method method = Method::automatic;
  Eigen::Index dense_limit = 2047;  // largest d_u solved by dense factorization
  double tolerance = 1e-12;         // relative gradient tolerance for the iterative solve
  int max_iterations = 5000;
  bool compute_spectrum = true;     // Hessian eigenvalues for dense solves
  const AdaptedProcess* initial = nullptr;
};

struct QpResult {
  AdaptedProcess u;
  BsdeSolution state;
  double cost = 0.0;
  double gradient_norm = 0.0;          // |grad J(u)|_w
  double gradient_norm_at_zero = 0.0;  // |grad J(0)|_w
  std::optional<double> hessian_min_eigenvalue;
  std::optional<double> hessian_max_eigenvalue;
  int iterations = 0;
  std::string method;
};

QpResult solve_qp(const ScenarioTree& tree, const CoefficientSet& coeffs, const QpOptions& options = {});

// Weighted Hessian of J (symmetric form D^{-1/2} (2 H) D^{-1/2}) from the dense state map.
Eigen::MatrixXd weighted_hessian(const ScenarioTree& tree, const CoefficientSet& coeffs, const StateMap& map);

struct StationarityReport {
  AdaptedProcess residual;  // N u + E[Nbar] E[u] - B^T X - E[Bbar^T X], levels 0..n_t-1
  AdaptedProcess adjoint;   // X, levels 0..n_t
  std::vector<double> level_norms;  // sqrt(sum_j 2^-k |r|^2) per level
  double weighted_norm = 0.0;
  double max_abs = 0.0;
  bool inversion_checked = false;
  double inversion_margin = 0.0;  // smallest singular value of I_m + E[N^-1] E[Nbar]
  double reconstruction_discrepancy = 0.0;  // |u_rec - u|_w
};

// Continuous-form optimality condition evaluated on the tree. The adjoint
// solves dX = (A^T X + E[Abar^T X] - Q Y - E[Qbar] E[Y]) ds
//           + (C^T X + E[Cbar^T X] - R Z - E[Rbar] E[Z]) dW,  X(0) = -G Y(0).
StationarityReport stationarity_residual(const ScenarioTree& tree, const CoefficientSet& coeffs,
                                         const AdaptedProcess& Y, const AdaptedProcess& Z, const AdaptedProcess& u);

struct GradientCheck {
  double analytic = 0.0;
  double finite_difference = 0.0;
  double relative_error = 0.0;
  std::optional<double> hessian_min_eigenvalue;
  double coercivity_bound = 0.0;  // 2 delta
};

GradientCheck gradient_and_convexity_check(const ScenarioTree& tree, const CoefficientSet& coeffs,
                                           const AdaptedProcess& u, const AdaptedProcess& v, double epsilon = 1e-5,
                                           bool with_hessian = false, Eigen::Index dense_limit = 2047);

}  // namespace mfbslq
