#pragma once

#include <Eigen/Dense>

namespace mfbslq {

// Deterministic time paths, one column per step k = 0..n_t-1.
// Stacked order: first block, second block, third block; inside a block the
// entry (i, k) sits at k * rows + i (column-major).

// Prescribed means: E[Y_k] = alpha_k, E[Z_k] = beta_k, E[u_k] = gamma_k.
struct MeanTriple {
  Eigen::MatrixXd alpha;  // n x n_t
  Eigen::MatrixXd beta;   // n x n_t
  Eigen::MatrixXd gamma;  // m x n_t

  static MeanTriple zero(int n, int m, int steps);
};

// Multipliers paired with the three mean constraints.
struct MultiplierTriple {
  Eigen::MatrixXd lambda1;  // n x n_t
  Eigen::MatrixXd lambda2;  // n x n_t
  Eigen::MatrixXd lambda3;  // m x n_t

  static MultiplierTriple zero(int n, int m, int steps);
};

inline Eigen::Index stacked_size(int n, int m, int steps) { return static_cast<Eigen::Index>(2 * n + m) * steps; }

Eigen::VectorXd stack(const MeanTriple& eta);
Eigen::VectorXd stack(const MultiplierTriple& lambda);
MeanTriple unstack_means(const Eigen::Ref<const Eigen::VectorXd>& v, int n, int m, int steps);
MultiplierTriple unstack_multipliers(const Eigen::Ref<const Eigen::VectorXd>& v, int n, int m, int steps);

}  // namespace mfbslq
