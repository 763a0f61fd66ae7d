#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <vector>

namespace mfbslq {

// Non-recombining binary tree generated by a +/- sqrt(dt) random walk.
// Node (k, j) has children (k+1, 2j) ("up", dW = +sqrt(dt)) and
// (k+1, 2j+1) ("down", dW = -sqrt(dt)); every node at level k carries
// probability 2^-k.
class ScenarioTree {
 public:
  static constexpr int max_depth = 24;

  ScenarioTree(double horizon, int steps);

  double horizon() const { return horizon_; }
  int steps() const { return steps_; }
  double dt() const { return dt_; }
  double sqrt_dt() const { return sqrt_dt_; }

  std::size_t width(int level) const { return std::size_t{1} << level; }
  double probability(int level) const { return std::ldexp(1.0, -level); }
  double time(int level) const { return level * dt_; }
  std::size_t node_count() const { return (std::size_t{1} << (steps_ + 1)) - 1; }

  // W(k, j): sqrt(dt) * (#ups - #downs). Down moves are the set bits of j.
  double brownian(int level, std::size_t index) const;
  // Increment dW leading into a node with the given index at its level.
  double increment(std::size_t child_index) const { return (child_index & 1u) ? -sqrt_dt_ : sqrt_dt_; }

 private:
  double horizon_;
  int steps_;
  double dt_;
  double sqrt_dt_;
};

ScenarioTree build_tree(double horizon, int steps);

// Values of a fixed-shape matrix per node over a contiguous range of levels.
// Each level is one contiguous array; node j occupies rows*cols doubles in
// column-major order.
class AdaptedProcess {
 public:
  using Map = Eigen::Map<Eigen::MatrixXd>;
  using ConstMap = Eigen::Map<const Eigen::MatrixXd>;

  AdaptedProcess() = default;
  AdaptedProcess(Eigen::Index rows, Eigen::Index cols, int first_level, int last_level, double fill = 0.0);

  Eigen::Index rows() const { return rows_; }
  Eigen::Index cols() const { return cols_; }
  int first_level() const { return first_; }
  int last_level() const { return last_; }
  bool empty() const { return levels_.empty(); }
  bool has_level(int level) const { return !levels_.empty() && level >= first_ && level <= last_; }
  std::size_t width(int level) const { return std::size_t{1} << level; }

  Map operator()(int level, std::size_t index) {
    return Map(slot(level, index), rows_, cols_);
  }
  ConstMap operator()(int level, std::size_t index) const {
    return ConstMap(slot(level, index), rows_, cols_);
  }

  double* level_data(int level);
  const double* level_data(int level) const;
  std::size_t stride() const { return static_cast<std::size_t>(rows_ * cols_); }

  // Maximum absolute entrywise difference over the common levels.
  double max_abs_diff(const AdaptedProcess& other) const;
  double max_abs() const;

 private:
  double* slot(int level, std::size_t index);
  const double* slot(int level, std::size_t index) const;

  Eigen::Index rows_ = 0;
  Eigen::Index cols_ = 0;
  int first_ = 0;
  int last_ = -1;
  std::vector<std::vector<double>> levels_;
};

// Conditional expectation E_k: values at `level` from the values at level+1.
AdaptedProcess cond_expect(const ScenarioTree& tree, const AdaptedProcess& proc, int level);

// Unconditional mean over the nodes of one level, summed in index order.
Eigen::MatrixXd expect(const ScenarioTree& tree, const AdaptedProcess& proc, int level);

// Discrete martingale representation Z_k = E_k[Y_{k+1} dW] / dt, returned at `level`.
AdaptedProcess z_from_next(const ScenarioTree& tree, const AdaptedProcess& next, int level);

// The Brownian path W as a scalar process on levels 0..n_t.
AdaptedProcess brownian_process(const ScenarioTree& tree);

// Weighted inner product sum_k sum_j dt 2^-k <a, b> over levels 0..n_t-1,
// the discrete L^2(0,T; L^2) product used for controls.
double weighted_dot(const ScenarioTree& tree, const AdaptedProcess& a, const AdaptedProcess& b);
double weighted_norm(const ScenarioTree& tree, const AdaptedProcess& a);

}  // namespace mfbslq
