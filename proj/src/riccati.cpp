#include "mfbslq/riccati.hpp"

#include "mfbslq/error.hpp"
#include "mfbslq/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace mfbslq {

namespace {

using Mat = Eigen::MatrixXd;

std::string node_name(int k, std::size_t j) { return "(" + std::to_string(k) + "," + std::to_string(j) + ")"; }

Eigen::VectorXd upper(const Mat& m) {
  Eigen::Index n = m.rows();
  Eigen::VectorXd out(n * (n + 1) / 2);
  Eigen::Index p = 0;
  for (Eigen::Index a = 0; a < n; ++a)
    for (Eigen::Index b = a; b < n; ++b) out(p++) = m(a, b);
  return out;
}

Mat symmetric_from(const Eigen::VectorXd& s, Eigen::Index n) {
  Mat out(n, n);
  Eigen::Index p = 0;
  for (Eigen::Index a = 0; a < n; ++a)
    for (Eigen::Index b = a; b < n; ++b) {
      out(a, b) = s(p);
      out(b, a) = s(p);
      ++p;
    }
  return out;
}

Mat inverse_checked(const Mat& m, double& rcond) {
  Eigen::PartialPivLU<Mat> lu(m);
  rcond = lu.rcond();
  return lu.inverse();
}

}  // namespace

Mat riccati_drift(const Mat& sigma, const Mat& phi, const Mat& A, const Mat& B, const Mat& C, const Mat& Q,
                  const Mat& R, const Mat& N) {
  Eigen::Index n = sigma.rows();
  Mat identity = Mat::Identity(n, n);
  Mat K = (identity + sigma * R).partialPivLu().inverse();
  Mat Kt = (identity + R * sigma).partialPivLu().inverse();
  Mat S = B * N.ldlt().solve(B.transpose());
  return -sigma * A.transpose() - A * sigma + sigma * Q * sigma - S + phi * R * K * phi - phi * Kt * C.transpose() -
         C * K * (phi + sigma * C.transpose());
}

Mat riccati_drift_derivative(const Mat& sigma, const Mat& phi, const Mat& A, const Mat& C, const Mat& Q, const Mat& R,
                             const Mat& E) {
  Eigen::Index n = sigma.rows();
  Mat identity = Mat::Identity(n, n);
  Mat K = (identity + sigma * R).partialPivLu().inverse();
  Mat Kt = (identity + R * sigma).partialPivLu().inverse();
  Mat ERK = E * R * K;
  return -E * A.transpose() - A * E + E * Q * sigma + sigma * Q * E - phi * R * K * ERK * phi +
         phi * Kt * R * E * Kt * C.transpose() + C * K * ERK * (phi + sigma * C.transpose()) -
         C * K * E * C.transpose();
}

RiccatiSolution solve_riccati(const ScenarioTree& tree, const CoefficientSet& coeffs, const NewtonOptions& options) {
  int n = coeffs.n;
  int nt = tree.steps();
  require(coeffs.steps() == nt, ErrorKind::contract, "coefficients realized on a different tree");
  double dt = tree.dt();
  double half_inv_sqrt = 0.5 / tree.sqrt_dt();
  RiccatiSolution out{AdaptedProcess(n, n, 0, nt), AdaptedProcess(n, n, 0, nt - 1), {}};
  out.diagnostics.min_sigma_eigenvalue.assign(static_cast<std::size_t>(nt + 1), 0.0);
  out.diagnostics.min_singular_value = std::numeric_limits<double>::infinity();
  Eigen::Index dim = n * (n + 1) / 2;
  Mat identity = Mat::Identity(n, n);

  for (int k = nt - 1; k >= 0; --k) {
    std::size_t width = tree.width(k);
    std::vector<int> iterations(width, 0);
    std::vector<double> singular(width, 0.0);
    parallel_for(0, width, [&](std::size_t j) {
      Mat up = out.Sigma(k + 1, 2 * j), down = out.Sigma(k + 1, 2 * j + 1);
      Mat next_mean = 0.5 * (up + down);
      Mat phi = half_inv_sqrt * (up - down);
      out.Phi(k, j) = phi;
      Mat A = coeffs[Coef::A](k, j), B = coeffs[Coef::B](k, j), C = coeffs[Coef::C](k, j);
      Mat Q = coeffs[Coef::Q](k, j), R = coeffs[Coef::R](k, j), N = coeffs[Coef::N](k, j);

      auto residual = [&](const Mat& s) { return Mat(s - next_mean + dt * riccati_drift(s, phi, A, B, C, Q, R, N)); };
      Mat sigma = next_mean;
      Mat r = residual(sigma);
      double norm = r.norm();
      int it = 0;
      while (!(norm <= options.tolerance * (1.0 + sigma.norm()))) {
        if (it == options.max_iterations || !std::isfinite(norm))
          throw Error(ErrorKind::riccati_failure, "Newton did not converge at node " + node_name(k, j) +
                                                      " (residual " + std::to_string(norm) +
                                                      "); try a smaller dt (larger n_t)");
        Mat jac(dim, dim);
        Eigen::Index col = 0;
        for (Eigen::Index a = 0; a < n; ++a)
          for (Eigen::Index b = a; b < n; ++b) {
            Mat E = Mat::Zero(n, n);
            E(a, b) = 1.0;
            E(b, a) = 1.0;
            jac.col(col++) = upper(E + dt * riccati_drift_derivative(sigma, phi, A, C, Q, R, E));
          }
        Eigen::VectorXd step = jac.fullPivLu().solve(-upper(r));
        Mat delta = symmetric_from(step, n);
        double t = 1.0;
        bool accepted = false;
        for (int h = 0; h <= options.max_halvings; ++h, t *= 0.5) {
          Mat trial = sigma + t * delta;
          Mat trial_r = residual(trial);
          double trial_norm = trial_r.norm();
          if (std::isfinite(trial_norm) && trial_norm <= (1.0 - 1e-4 * t) * norm) {
            sigma = trial;
            r = trial_r;
            norm = trial_norm;
            accepted = true;
            break;
          }
        }
        ++it;
        if (!accepted)
          throw Error(ErrorKind::riccati_failure, "damped Newton stalled at node " + node_name(k, j) + " (residual " +
                                                      std::to_string(norm) + "); try a smaller dt (larger n_t)");
      }
      iterations[j] = it;
      Eigen::JacobiSVD<Mat> svd(identity + sigma * R);
      double smin = svd.singularValues()(n - 1);
      if (!(smin > 1e-12))
        throw Error(ErrorKind::decoupling_breakdown, "I + Sigma R singular at node " + node_name(k, j));
      singular[j] = smin;
      out.Sigma(k, j) = sigma;
    }, 256);
    for (std::size_t j = 0; j < width; ++j) {
      out.diagnostics.max_newton_iterations = std::max(out.diagnostics.max_newton_iterations, iterations[j]);
      out.diagnostics.min_singular_value = std::min(out.diagnostics.min_singular_value, singular[j]);
    }
  }

  for (int k = 0; k <= nt; ++k) {
    double eig = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < tree.width(k); ++j) {
      Mat s = out.Sigma(k, j);
      out.diagnostics.max_asymmetry = std::max(out.diagnostics.max_asymmetry, (s - s.transpose()).cwiseAbs().maxCoeff());
      Eigen::SelfAdjointEigenSolver<Mat> es(s, Eigen::EigenvaluesOnly);
      eig = std::min(eig, es.eigenvalues()(0));
    }
    out.diagnostics.min_sigma_eigenvalue[static_cast<std::size_t>(k)] = eig;
  }
  return out;
}

Embedding::Embedding(const ScenarioTree& tree, const CoefficientSet& coeffs, const RiccatiSolution& ric)
    : tree_(tree), coeffs_(coeffs), ric_(ric) {
  int n = coeffs.n;
  int m = coeffs.m;
  int last = tree.steps() - 1;
  double dt = tree.dt();
  K = AdaptedProcess(n, n, 0, last);
  RK = AdaptedProcess(n, n, 0, last);
  KSigma = AdaptedProcess(n, n, 0, last);
  phi_step = AdaptedProcess(n, n, 0, last);
  phi_varphi = AdaptedProcess(n, n, 0, last);
  phi_lambda2 = AdaptedProcess(n, n, 0, last);
  BNinv = AdaptedProcess(n, m, 0, last);
  Ninv = AdaptedProcess(m, m, 0, last);
  x_drift = AdaptedProcess(n, n, 0, last);
  x_diffusion = AdaptedProcess(n, n, 0, last);
  z_x = AdaptedProcess(n, n, 0, last);
  Mat identity = Mat::Identity(n, n);
  for (int k = 0; k <= last; ++k) {
    parallel_for(0, tree.width(k), [&](std::size_t j) {
      Mat sigma = ric.Sigma(k, j), phi = ric.Phi(k, j);
      Mat A = coeffs[Coef::A](k, j), B = coeffs[Coef::B](k, j), C = coeffs[Coef::C](k, j);
      Mat Q = coeffs[Coef::Q](k, j), R = coeffs[Coef::R](k, j), N = coeffs[Coef::N](k, j);
      double rcond = 0.0;
      Mat k_mat = inverse_checked(identity + sigma * R, rcond);
      if (!(rcond > 1e-12)) throw Error(ErrorKind::decoupling_breakdown, "I + Sigma R singular at node " + node_name(k, j));
      Mat step = inverse_checked(identity + dt * (sigma * Q - A), rcond);
      if (!(rcond > 1e-12))
        throw Error(ErrorKind::step_size, "one-step matrix of the phi equation singular at node " + node_name(k, j) +
                                              "; increase n_t");
      Mat n_inv = inverse_checked(N, rcond);
      if (!(rcond > 1e-14)) throw Error(ErrorKind::validation, "N singular at node " + node_name(k, j));
      Mat rk = R * k_mat;
      Mat gain = phi + sigma * C.transpose();
      K(k, j) = k_mat;
      RK(k, j) = rk;
      KSigma(k, j) = k_mat * sigma;
      phi_step(k, j) = step;
      phi_varphi(k, j) = (phi * R - C) * k_mat;
      phi_lambda2(k, j) = phi * rk * (sigma + identity) - C * k_mat * sigma;
      BNinv(k, j) = B * n_inv;
      Ninv(k, j) = n_inv;
      x_drift(k, j) = Q * sigma - A.transpose();
      x_diffusion(k, j) = rk * gain - C.transpose();
      z_x(k, j) = k_mat * gain;
    }, 1024);
  }
  double rcond = 0.0;
  Mat init = inverse_checked(identity + coeffs.G * ric.Sigma(0, 0), rcond);
  if (!(rcond > 1e-12)) throw Error(ErrorKind::decoupling_breakdown, "I + G Sigma(0) singular at t = 0");
  x0_map = init * coeffs.G;
}

namespace {

void check_blocks(const Embedding& emb, Eigen::Index cols, const Eigen::MatrixXd& eta, const Eigen::MatrixXd& lambda) {
  const auto& c = emb.coeffs();
  Eigen::Index d = stacked_size(c.n, c.m, emb.tree().steps());
  require(eta.rows() == d && lambda.rows() == d && eta.cols() == cols && lambda.cols() == cols, ErrorKind::contract,
          "stacked paths have wrong shape");
}

}  // namespace

PhiSolution solve_phi(const Embedding& emb, const AdaptedProcess& terminal, const Eigen::MatrixXd& eta,
                      const Eigen::MatrixXd& lambda) {
  const ScenarioTree& tree = emb.tree();
  const CoefficientSet& c = emb.coeffs();
  const RiccatiSolution& ric = emb.riccati();
  int n = c.n, nt = tree.steps();
  Eigen::Index cols = terminal.cols();
  require(terminal.rows() == n && terminal.has_level(nt), ErrorKind::contract, "terminal has wrong shape");
  check_blocks(emb, cols, eta, lambda);
  StackedLayout layout{n, c.m, nt};
  double dt = tree.dt();
  double half_inv_sqrt = 0.5 / tree.sqrt_dt();
  PhiSolution out{AdaptedProcess(n, cols, 0, nt), AdaptedProcess(n, cols, 0, nt - 1)};
  for (std::size_t j = 0; j < tree.width(nt); ++j) out.phi(nt, j) = -terminal(nt, j);
  for (int k = nt - 1; k >= 0; --k) {
    Mat alpha = eta.middleRows(layout.first(k), n), beta = eta.middleRows(layout.second(k), n);
    Mat gamma = eta.middleRows(layout.third(k), c.m);
    Mat l1 = lambda.middleRows(layout.first(k), n), l2 = lambda.middleRows(layout.second(k), n);
    Mat l3 = lambda.middleRows(layout.third(k), c.m);
    parallel_for(0, tree.width(k), [&](std::size_t j) {
      Mat up = out.phi(k + 1, 2 * j), down = out.phi(k + 1, 2 * j + 1);
      Mat vphi = half_inv_sqrt * (up - down);
      out.varphi(k, j) = vphi;
      Mat rest = emb.phi_varphi(k, j) * vphi - ric.Sigma(k, j) * l1 - emb.BNinv(k, j) * l3 +
                 emb.phi_lambda2(k, j) * l2 + c[Coef::A_bar](k, j) * alpha + c[Coef::B_bar](k, j) * gamma +
                 c[Coef::C_bar](k, j) * beta;
      out.phi(k, j) = emb.phi_step(k, j) * (0.5 * (up + down) - dt * rest);
    }, 1024);
  }
  return out;
}

AdaptedProcess solve_xtilde(const Embedding& emb, const PhiSolution& phis, const Eigen::MatrixXd& lambda) {
  const ScenarioTree& tree = emb.tree();
  const CoefficientSet& c = emb.coeffs();
  const RiccatiSolution& ric = emb.riccati();
  int n = c.n, nt = tree.steps();
  Eigen::Index cols = phis.phi.cols();
  StackedLayout layout{n, c.m, nt};
  require(lambda.rows() == layout.size() && lambda.cols() == cols, ErrorKind::contract, "multipliers have wrong shape");
  double dt = tree.dt();
  double s = tree.sqrt_dt();
  AdaptedProcess X(n, cols, 0, nt);
  X(0, 0) = emb.x0_map * phis.phi(0, 0);
  for (int k = 0; k < nt; ++k) {
    Mat l1 = lambda.middleRows(layout.first(k), n), l2 = lambda.middleRows(layout.second(k), n);
    parallel_for(0, tree.width(k), [&](std::size_t j) {
      Mat x = X(k, j);
      Mat drift = emb.x_drift(k, j) * x - c[Coef::Q](k, j) * phis.phi(k, j) + l1;
      Mat diffusion =
          emb.x_diffusion(k, j) * x - emb.RK(k, j) * (ric.Sigma(k, j) * l2 + phis.varphi(k, j)) + l2;
      Mat base = x - dt * drift;
      X(k + 1, 2 * j) = base - s * diffusion;
      X(k + 1, 2 * j + 1) = base + s * diffusion;
    }, 1024);
  }
  return X;
}

DecoupledState control_and_state(const Embedding& emb, const PhiSolution& phis, const AdaptedProcess& X,
                                 const Eigen::MatrixXd& lambda) {
  const ScenarioTree& tree = emb.tree();
  const CoefficientSet& c = emb.coeffs();
  const RiccatiSolution& ric = emb.riccati();
  int n = c.n, m = c.m, nt = tree.steps();
  Eigen::Index cols = X.cols();
  StackedLayout layout{n, m, nt};
  require(lambda.rows() == layout.size() && lambda.cols() == cols, ErrorKind::contract, "multipliers have wrong shape");
  DecoupledState out{AdaptedProcess(m, cols, 0, nt - 1), AdaptedProcess(n, cols, 0, nt), AdaptedProcess(n, cols, 0, nt - 1)};
  for (int k = 0; k < nt; ++k) {
    Mat l2 = lambda.middleRows(layout.second(k), n), l3 = lambda.middleRows(layout.third(k), m);
    parallel_for(0, tree.width(k), [&](std::size_t j) {
      Mat x = X(k, j);
      out.u(k, j) = emb.Ninv(k, j) * (c[Coef::B](k, j).transpose() * x - l3);
      out.Y(k, j) = ric.Sigma(k, j) * x - phis.phi(k, j);
      out.Z(k, j) = emb.z_x(k, j) * x - emb.KSigma(k, j) * l2 - emb.K(k, j) * phis.varphi(k, j);
    }, 1024);
  }
  for (std::size_t j = 0; j < tree.width(nt); ++j) out.Y(nt, j) = ric.Sigma(nt, j) * X(nt, j) - phis.phi(nt, j);
  return out;
}

PhiSolution solve_phi(const ScenarioTree& tree, const CoefficientSet& coeffs, const RiccatiSolution& ric,
                      const MeanTriple& eta, const MultiplierTriple& lambda) {
  Embedding emb(tree, coeffs, ric);
  return solve_phi(emb, coeffs.xi, stack(eta), stack(lambda));
}

ForwardSolution solve_xtilde(const ScenarioTree& tree, const CoefficientSet& coeffs, const RiccatiSolution& ric,
                             const PhiSolution& phis, const MultiplierTriple& lambda) {
  Embedding emb(tree, coeffs, ric);
  return {solve_xtilde(emb, phis, stack(lambda))};
}

DecoupledState control_and_state(const ScenarioTree& tree, const CoefficientSet& coeffs, const RiccatiSolution& ric,
                                 const PhiSolution& phis, const ForwardSolution& xt, const MultiplierTriple& lambda) {
  Embedding emb(tree, coeffs, ric);
  return control_and_state(emb, phis, xt.X, stack(lambda));
}

DecoupledSolution decoupled_solve(const Embedding& emb, const AdaptedProcess& terminal, const Eigen::MatrixXd& eta,
                                  const Eigen::MatrixXd& lambda) {
  DecoupledSolution out;
  out.phis = solve_phi(emb, terminal, eta, lambda);
  out.X = solve_xtilde(emb, out.phis, lambda);
  out.state = control_and_state(emb, out.phis, out.X, lambda);
  return out;
}

Eigen::MatrixXd stacked_means(const ScenarioTree& tree, const DecoupledState& state) {
  int n = static_cast<int>(state.Y.rows()), m = static_cast<int>(state.u.rows()), nt = tree.steps();
  StackedLayout layout{n, m, nt};
  Eigen::MatrixXd out(layout.size(), state.Y.cols());
  for (int k = 0; k < nt; ++k) {
    out.middleRows(layout.first(k), n) = expect(tree, state.Y, k);
    out.middleRows(layout.second(k), n) = expect(tree, state.Z, k);
    out.middleRows(layout.third(k), m) = expect(tree, state.u, k);
  }
  return out;
}

DecouplingDefect decoupling_defect(const ScenarioTree& tree, const CoefficientSet& c, const AdaptedProcess& Y,
                                   const AdaptedProcess& Z, const AdaptedProcess& u, const MeanTriple& eta) {
  int n = c.n, nt = tree.steps();
  double dt = tree.dt();
  require(Y.has_level(0) && Y.has_level(nt) && Z.has_level(nt - 1) && u.has_level(nt - 1), ErrorKind::contract,
          "defect needs Y on levels 0..n_t and Z, u on 0..n_t-1");
  DecouplingDefect out{Eigen::VectorXd::Zero(nt), Eigen::VectorXd::Zero(nt)};
  Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
  for (int k = 0; k < nt; ++k) {
    AdaptedProcess ey = cond_expect(tree, Y, k);
    AdaptedProcess zy = z_from_next(tree, Y, k);
    for (std::size_t j = 0; j < tree.width(k); ++j) {
      Eigen::VectorXd drift = c[Coef::A_bar](k, j) * eta.alpha.col(k) + c[Coef::B](k, j) * u(k, j).col(0) +
                              c[Coef::B_bar](k, j) * eta.gamma.col(k) + c[Coef::C](k, j) * Z(k, j).col(0) +
                              c[Coef::C_bar](k, j) * eta.beta.col(k);
      Eigen::VectorXd ry = ((I - dt * c[Coef::A](k, j)) * Y(k, j).col(0) - ey(k, j).col(0)) / dt - drift;
      double rz = (Z(k, j).col(0) - zy(k, j).col(0)).norm();
      out.y(k) = std::max(out.y(k), ry.norm());
      out.z(k) = std::max(out.z(k), rz);
      out.weighted_y += dt * tree.probability(k) * ry.squaredNorm();
      out.weighted_z += dt * tree.probability(k) * rz * rz;
    }
  }
  out.weighted_y = std::sqrt(out.weighted_y);
  out.weighted_z = std::sqrt(out.weighted_z);
  out.max_y = out.y.maxCoeff();
  out.max_z = out.z.maxCoeff();
  return out;
}

PicardResult solve_coupled_by_picard(const ScenarioTree& tree, const CoefficientSet& coeffs, const MeanTriple& eta,
                                     const MultiplierTriple& lambda, int max_iterations, double tolerance) {
  int n = coeffs.n, m = coeffs.m, nt = tree.steps();
  BackwardScheme scheme(tree, coeffs);
  PicardResult out;
  out.X = AdaptedProcess(n, 1, 0, nt);
  for (int it = 1; it <= max_iterations; ++it) {
    AdaptedProcess u(m, 1, 0, nt - 1);
    for (int k = 0; k < nt; ++k)
      for (std::size_t j = 0; j < tree.width(k); ++j)
        u(k, j) = coeffs[Coef::N](k, j).ldlt().solve(coeffs[Coef::B](k, j).transpose() * out.X(k, j) -
                                                      lambda.lambda3.col(k));
    BsdeSolution state = solve_constrained_bsde(tree, coeffs, scheme, u, eta, coeffs.xi);
    ForwardDynamics dynamics;
    dynamics.drift = [&](int k, std::size_t j, const Eigen::VectorXd& x) -> Eigen::VectorXd {
      return -(coeffs[Coef::A](k, j).transpose() * x - coeffs[Coef::Q](k, j) * state.Y(k, j) - lambda.lambda1.col(k));
    };
    dynamics.diffusion = [&](int k, std::size_t j, const Eigen::VectorXd& x) -> Eigen::VectorXd {
      return -(coeffs[Coef::C](k, j).transpose() * x - coeffs[Coef::R](k, j) * state.Z(k, j) - lambda.lambda2.col(k));
    };
    Eigen::VectorXd x0 = -coeffs.G * state.Y(0, 0);
    ForwardSolution next = solve_forward_sde(tree, x0, dynamics);
    out.last_change = next.X.max_abs_diff(out.X);
    out.X = std::move(next.X);
    out.u = std::move(u);
    out.Y = std::move(state.Y);
    out.Z = std::move(state.Z);
    out.iterations = it;
    if (out.last_change <= tolerance * (1.0 + out.X.max_abs())) {
      out.converged = true;
      break;
    }
  }
  // Final state consistent with the converged adjoint.
  if (out.converged) {
    for (int k = 0; k < nt; ++k)
      for (std::size_t j = 0; j < tree.width(k); ++j)
        out.u(k, j) = coeffs[Coef::N](k, j).ldlt().solve(coeffs[Coef::B](k, j).transpose() * out.X(k, j) -
                                                          lambda.lambda3.col(k));
    BsdeSolution state = solve_constrained_bsde(tree, coeffs, scheme, out.u, eta, coeffs.xi);
    out.Y = std::move(state.Y);
    out.Z = std::move(state.Z);
  }
  return out;
}

}  // namespace mfbslq
