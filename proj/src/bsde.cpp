#include "mfbslq/bsde.hpp"

#include "mfbslq/error.hpp"

#include <string>

namespace mfbslq {

MeanTriple MeanTriple::zero(int n, int m, int steps) {
  return {Eigen::MatrixXd::Zero(n, steps), Eigen::MatrixXd::Zero(n, steps), Eigen::MatrixXd::Zero(m, steps)};
}

MultiplierTriple MultiplierTriple::zero(int n, int m, int steps) {
  return {Eigen::MatrixXd::Zero(n, steps), Eigen::MatrixXd::Zero(n, steps), Eigen::MatrixXd::Zero(m, steps)};
}

namespace {

Eigen::VectorXd stack3(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const Eigen::MatrixXd& c) {
  Eigen::VectorXd out(a.size() + b.size() + c.size());
  out << a.reshaped(), b.reshaped(), c.reshaped();
  return out;
}

void unstack3(const Eigen::Ref<const Eigen::VectorXd>& v, int n, int m, int steps, Eigen::MatrixXd& a,
              Eigen::MatrixXd& b, Eigen::MatrixXd& c) {
  require(v.size() == stacked_size(n, m, steps), ErrorKind::contract, "stacked path has wrong length");
  Eigen::Index block = static_cast<Eigen::Index>(n) * steps;
  a = v.segment(0, block).reshaped(n, steps);
  b = v.segment(block, block).reshaped(n, steps);
  c = v.segment(2 * block, static_cast<Eigen::Index>(m) * steps).reshaped(m, steps);
}

void check_means(const MeanTriple& eta, int n, int m, int steps) {
  require(eta.alpha.rows() == n && eta.alpha.cols() == steps && eta.beta.rows() == n &&
              eta.beta.cols() == steps && eta.gamma.rows() == m && eta.gamma.cols() == steps,
          ErrorKind::contract, "mean triple has wrong shape");
}

void check_control(const ScenarioTree& tree, const AdaptedProcess& u, int m) {
  require(u.rows() == m && u.cols() == 1 && u.first_level() <= 0 && u.last_level() >= tree.steps() - 1,
          ErrorKind::contract, "control must be an m-vector on levels 0..n_t-1");
}

void check_terminal(const ScenarioTree& tree, const AdaptedProcess& terminal, int n) {
  require(terminal.rows() == n && terminal.cols() == 1 && terminal.has_level(tree.steps()), ErrorKind::contract,
          "terminal value must be an n-vector at level n_t");
}

// Shared right-hand side so that the constrained and the mean-field sweeps
// evaluate bit-identical expressions when the barred coefficients vanish.
inline Eigen::VectorXd scheme_rhs(const CoefficientSet& c, int k, std::size_t j, double dt,
                                  const Eigen::VectorXd& ey, const Eigen::VectorXd& z,
                                  const Eigen::Ref<const Eigen::VectorXd>& u, const Eigen::VectorXd& a,
                                  const Eigen::VectorXd& g, const Eigen::VectorXd& b) {
  return ey + dt * (c[Coef::A_bar](k, j) * a + c[Coef::B](k, j) * u + c[Coef::B_bar](k, j) * g +
                    c[Coef::C](k, j) * z + c[Coef::C_bar](k, j) * b);
}

}  // namespace

Eigen::VectorXd stack(const MeanTriple& eta) { return stack3(eta.alpha, eta.beta, eta.gamma); }

Eigen::VectorXd stack(const MultiplierTriple& lambda) { return stack3(lambda.lambda1, lambda.lambda2, lambda.lambda3); }

MeanTriple unstack_means(const Eigen::Ref<const Eigen::VectorXd>& v, int n, int m, int steps) {
  MeanTriple out;
  unstack3(v, n, m, steps, out.alpha, out.beta, out.gamma);
  return out;
}

MultiplierTriple unstack_multipliers(const Eigen::Ref<const Eigen::VectorXd>& v, int n, int m, int steps) {
  MultiplierTriple out;
  unstack3(v, n, m, steps, out.lambda1, out.lambda2, out.lambda3);
  return out;
}

BackwardScheme::BackwardScheme(const ScenarioTree& tree, const CoefficientSet& coeffs) {
  int n = coeffs.n;
  int nt = tree.steps();
  require(coeffs.steps() == nt, ErrorKind::contract, "coefficients realized on a different tree");
  double dt = tree.dt();
  resolvent_ = AdaptedProcess(n, n, 0, nt - 1);
  resolvent_abar_ = AdaptedProcess(n, n, 0, nt - 1);
  level_solvers_.resize(static_cast<std::size_t>(nt));
  Eigen::MatrixXd identity = Eigen::MatrixXd::Identity(n, n);
  for (int k = 0; k < nt; ++k) {
    Eigen::MatrixXd level = Eigen::MatrixXd::Zero(n, n);
    for (std::size_t j = 0; j < tree.width(k); ++j) {
      Eigen::PartialPivLU<Eigen::MatrixXd> lu(identity - dt * coeffs[Coef::A](k, j));
      if (!(lu.rcond() > 1e-12))
        throw Error(ErrorKind::step_size, "I - dt A is singular at node (" + std::to_string(k) + "," +
                                              std::to_string(j) + "); increase n_t");
      resolvent_(k, j) = lu.inverse();
      resolvent_abar_(k, j) = resolvent_(k, j) * coeffs[Coef::A_bar](k, j);
      level += resolvent_abar_(k, j);
    }
    Eigen::MatrixXd level_matrix = identity - dt * tree.probability(k) * level;
    level_solvers_[static_cast<std::size_t>(k)].compute(level_matrix);
    if (!(level_solvers_[static_cast<std::size_t>(k)].rcond() > 1e-12))
      throw Error(ErrorKind::step_size,
                  "level mean matrix singular at level " + std::to_string(k) + "; increase n_t");
  }
}

BsdeSolution solve_constrained_bsde(const ScenarioTree& tree, const CoefficientSet& coeffs,
                                    const AdaptedProcess& u, const MeanTriple& eta) {
  BackwardScheme scheme(tree, coeffs);
  return solve_constrained_bsde(tree, coeffs, scheme, u, eta, coeffs.xi);
}

BsdeSolution solve_constrained_bsde(const ScenarioTree& tree, const CoefficientSet& coeffs,
                                    const BackwardScheme& scheme, const AdaptedProcess& u,
                                    const MeanTriple& eta, const AdaptedProcess& terminal) {
  int n = coeffs.n;
  int nt = tree.steps();
  check_control(tree, u, coeffs.m);
  check_means(eta, n, coeffs.m, nt);
  check_terminal(tree, terminal, n);
  double dt = tree.dt();
  double half_inv_sqrt = 0.5 / tree.sqrt_dt();
  BsdeSolution out{AdaptedProcess(n, 1, 0, nt), AdaptedProcess(n, 1, 0, nt - 1)};
  for (std::size_t j = 0; j < tree.width(nt); ++j) out.Y(nt, j) = terminal(nt, j);
  for (int k = nt - 1; k >= 0; --k) {
    Eigen::VectorXd a = eta.alpha.col(k), b = eta.beta.col(k), g = eta.gamma.col(k);
    for (std::size_t j = 0; j < tree.width(k); ++j) {
      Eigen::VectorXd up = out.Y(k + 1, 2 * j), down = out.Y(k + 1, 2 * j + 1);
      Eigen::VectorXd z = half_inv_sqrt * (up - down);
      Eigen::VectorXd ey = 0.5 * (up + down);
      out.Z(k, j) = z;
      out.Y(k, j) = scheme.resolvent()(k, j) * scheme_rhs(coeffs, k, j, dt, ey, z, u(k, j), a, g, b);
    }
  }
  return out;
}

BsdeSolution solve_meanfield_bsde(const ScenarioTree& tree, const CoefficientSet& coeffs, const AdaptedProcess& u) {
  BackwardScheme scheme(tree, coeffs);
  return solve_meanfield_bsde(tree, coeffs, scheme, u, coeffs.xi);
}

BsdeSolution solve_meanfield_bsde(const ScenarioTree& tree, const CoefficientSet& coeffs,
                                  const BackwardScheme& scheme, const AdaptedProcess& u,
                                  const AdaptedProcess& terminal) {
  int n = coeffs.n;
  int nt = tree.steps();
  check_control(tree, u, coeffs.m);
  check_terminal(tree, terminal, n);
  double dt = tree.dt();
  double half_inv_sqrt = 0.5 / tree.sqrt_dt();
  BsdeSolution out{AdaptedProcess(n, 1, 0, nt), AdaptedProcess(n, 1, 0, nt - 1)};
  for (std::size_t j = 0; j < tree.width(nt); ++j) out.Y(nt, j) = terminal(nt, j);
  Eigen::VectorXd zero_n = Eigen::VectorXd::Zero(n);
  for (int k = nt - 1; k >= 0; --k) {
    std::size_t width = tree.width(k);
    for (std::size_t j = 0; j < width; ++j)
      out.Z(k, j) = half_inv_sqrt * (out.Y(k + 1, 2 * j) - out.Y(k + 1, 2 * j + 1));
    Eigen::VectorXd ez = expect(tree, out.Z, k);
    Eigen::VectorXd eu = expect(tree, u, k);
    Eigen::VectorXd mean_w = Eigen::VectorXd::Zero(n);
    for (std::size_t j = 0; j < width; ++j) {
      Eigen::VectorXd ey = 0.5 * (out.Y(k + 1, 2 * j) + out.Y(k + 1, 2 * j + 1));
      Eigen::VectorXd z = out.Z(k, j);
      out.Y(k, j) = scheme.resolvent()(k, j) * scheme_rhs(coeffs, k, j, dt, ey, z, u(k, j), zero_n, eu, ez);
      mean_w += out.Y(k, j);
    }
    mean_w *= tree.probability(k);
    Eigen::VectorXd mean_y = scheme.level_solver(k).solve(mean_w);
    for (std::size_t j = 0; j < width; ++j) out.Y(k, j) += dt * (scheme.resolvent_abar()(k, j) * mean_y);
  }
  return out;
}

ForwardSolution solve_forward_sde(const ScenarioTree& tree, const Eigen::VectorXd& init,
                                  const ForwardDynamics& dynamics) {
  int nt = tree.steps();
  Eigen::Index n = init.size();
  ForwardSolution out{AdaptedProcess(n, 1, 0, nt)};
  out.X(0, 0) = init;
  double dt = tree.dt();
  double s = tree.sqrt_dt();
  for (int k = 0; k < nt; ++k) {
    if (dynamics.prepare) dynamics.prepare(k, out.X);
    for (std::size_t j = 0; j < tree.width(k); ++j) {
      Eigen::VectorXd x = out.X(k, j);
      Eigen::VectorXd base = x;
      if (dynamics.drift) base -= dt * dynamics.drift(k, j, x);
      Eigen::VectorXd spread = Eigen::VectorXd::Zero(n);
      if (dynamics.diffusion) spread = s * dynamics.diffusion(k, j, x);
      out.X(k + 1, 2 * j) = base - spread;
      out.X(k + 1, 2 * j + 1) = base + spread;
    }
  }
  return out;
}

AdaptedProcess zero_control(const ScenarioTree& tree, int m) { return AdaptedProcess(m, 1, 0, tree.steps() - 1); }

}  // namespace mfbslq
