#include "mfbslq/tree.hpp"

#include "mfbslq/error.hpp"

#include <algorithm>
#include <bit>
#include <string>

namespace mfbslq {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::configuration: return "configuration error";
    case ErrorKind::parse: return "parse error";
    case ErrorKind::validation: return "validation error";
    case ErrorKind::contract: return "contract violation";
    case ErrorKind::step_size: return "step-size error";
    case ErrorKind::riccati_failure: return "Riccati failure";
    case ErrorKind::decoupling_breakdown: return "decoupling breakdown";
    case ErrorKind::infeasible: return "infeasible";
    case ErrorKind::convexity: return "convexity violation";
    case ErrorKind::size_limit: return "size limit";
    case ErrorKind::solver: return "solver failure";
    case ErrorKind::io: return "I/O error";
  }
  return "error";
}

ScenarioTree::ScenarioTree(double horizon, int steps) : horizon_(horizon), steps_(steps) {
  require(std::isfinite(horizon) && horizon > 0.0, ErrorKind::configuration, "horizon T must be positive");
  require(steps >= 1 && steps <= max_depth, ErrorKind::configuration,
          "n_t must lie in [1, " + std::to_string(max_depth) + "], got " + std::to_string(steps));
  dt_ = horizon / steps;
  sqrt_dt_ = std::sqrt(dt_);
}

double ScenarioTree::brownian(int level, std::size_t index) const {
  int downs = std::popcount(static_cast<unsigned long long>(index));
  return sqrt_dt_ * static_cast<double>(level - 2 * downs);
}

ScenarioTree build_tree(double horizon, int steps) { return ScenarioTree(horizon, steps); }

AdaptedProcess::AdaptedProcess(Eigen::Index rows, Eigen::Index cols, int first_level, int last_level, double fill)
    : rows_(rows), cols_(cols), first_(first_level), last_(last_level) {
  require(rows >= 1 && cols >= 1, ErrorKind::contract, "process shape must be positive");
  require(first_level >= 0 && last_level >= first_level && last_level <= ScenarioTree::max_depth,
          ErrorKind::contract, "invalid level range");
  levels_.resize(static_cast<std::size_t>(last_level - first_level + 1));
  for (int k = first_level; k <= last_level; ++k)
    levels_[static_cast<std::size_t>(k - first_level)].assign(width(k) * stride(), fill);
}

double* AdaptedProcess::level_data(int level) {
  require(has_level(level), ErrorKind::contract, "level " + std::to_string(level) + " not stored");
  return levels_[static_cast<std::size_t>(level - first_)].data();
}

const double* AdaptedProcess::level_data(int level) const {
  require(has_level(level), ErrorKind::contract, "level " + std::to_string(level) + " not stored");
  return levels_[static_cast<std::size_t>(level - first_)].data();
}

double* AdaptedProcess::slot(int level, std::size_t index) {
  return levels_[static_cast<std::size_t>(level - first_)].data() + index * stride();
}

const double* AdaptedProcess::slot(int level, std::size_t index) const {
  return levels_[static_cast<std::size_t>(level - first_)].data() + index * stride();
}

double AdaptedProcess::max_abs_diff(const AdaptedProcess& other) const {
  require(rows_ == other.rows_ && cols_ == other.cols_, ErrorKind::contract, "shape mismatch");
  int lo = std::max(first_, other.first_);
  int hi = std::min(last_, other.last_);
  double worst = 0.0;
  for (int k = lo; k <= hi; ++k) {
    const double* a = level_data(k);
    const double* b = other.level_data(k);
    std::size_t size = width(k) * stride();
    for (std::size_t i = 0; i < size; ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  }
  return worst;
}

double AdaptedProcess::max_abs() const {
  double worst = 0.0;
  for (const auto& level : levels_)
    for (double v : level) worst = std::max(worst, std::abs(v));
  return worst;
}

AdaptedProcess cond_expect(const ScenarioTree& tree, const AdaptedProcess& proc, int level) {
  require(level >= 0 && level < tree.steps() && proc.has_level(level + 1), ErrorKind::contract,
          "cond_expect needs the process at level " + std::to_string(level + 1));
  AdaptedProcess out(proc.rows(), proc.cols(), level, level);
  for (std::size_t j = 0; j < tree.width(level); ++j)
    out(level, j) = 0.5 * (proc(level + 1, 2 * j) + proc(level + 1, 2 * j + 1));
  return out;
}

Eigen::MatrixXd expect(const ScenarioTree& tree, const AdaptedProcess& proc, int level) {
  require(level >= 0 && level <= tree.steps() && proc.has_level(level), ErrorKind::contract,
          "expect needs the process at level " + std::to_string(level));
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(proc.rows(), proc.cols());
  for (std::size_t j = 0; j < tree.width(level); ++j) sum += proc(level, j);
  return sum * tree.probability(level);
}

AdaptedProcess z_from_next(const ScenarioTree& tree, const AdaptedProcess& next, int level) {
  require(level >= 0 && level < tree.steps() && next.has_level(level + 1), ErrorKind::contract,
          "z_from_next needs the process at level " + std::to_string(level + 1));
  AdaptedProcess out(next.rows(), next.cols(), level, level);
  double scale = 0.5 / tree.sqrt_dt();
  for (std::size_t j = 0; j < tree.width(level); ++j)
    out(level, j) = scale * (next(level + 1, 2 * j) - next(level + 1, 2 * j + 1));
  return out;
}

AdaptedProcess brownian_process(const ScenarioTree& tree) {
  AdaptedProcess w(1, 1, 0, tree.steps());
  for (int k = 0; k <= tree.steps(); ++k)
    for (std::size_t j = 0; j < tree.width(k); ++j) w(k, j)(0, 0) = tree.brownian(k, j);
  return w;
}

double weighted_dot(const ScenarioTree& tree, const AdaptedProcess& a, const AdaptedProcess& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorKind::contract, "shape mismatch");
  double total = 0.0;
  for (int k = 0; k < tree.steps(); ++k) {
    const double* pa = a.level_data(k);
    const double* pb = b.level_data(k);
    std::size_t size = tree.width(k) * a.stride();
    double level_sum = 0.0;
    for (std::size_t i = 0; i < size; ++i) level_sum += pa[i] * pb[i];
    total += tree.dt() * tree.probability(k) * level_sum;
  }
  return total;
}

double weighted_norm(const ScenarioTree& tree, const AdaptedProcess& a) {
  return std::sqrt(weighted_dot(tree, a, a));
}

}  // namespace mfbslq
