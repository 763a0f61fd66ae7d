#include "mfbslq/error.hpp"
#include "mfbslq/riccati.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace mfbslq;
using testing_support::json;

namespace {

struct Fixture {
  ProblemSpec spec;
  ScenarioTree tree;
  CoefficientSet coeffs;
  RiccatiSolution ric;
  Fixture(const ProblemSpec& s, int steps)
      : spec(s), tree(s.T, steps), coeffs(realize(spec, tree)), ric(solve_riccati(tree, coeffs)) {}
  Fixture(const json& doc, int steps) : Fixture(load_spec(doc.dump()), steps) {}
};

json with_terminal(json doc, double g1) {
  doc["terminal"]["g1"] = g1;
  return doc;
}

}  // namespace

TEST(Riccati, LinearBenchmarkIsExact) {
  for (int nt : {2, 5, 8}) {
    Fixture f(testing_support::corpus("S1"), nt);
    for (int k = 0; k <= nt; ++k)
      for (std::size_t j = 0; j < f.tree.width(k); ++j)
        EXPECT_NEAR(f.ric.Sigma(k, j)(0, 0), (nt - k) * f.tree.dt(), 1e-12);
    EXPECT_LT(f.ric.Phi.max_abs(), 1e-12);
  }
}

TEST(Riccati, ZeroWithoutControlOrRunningCost) {
  Fixture f(testing_support::scalar_spec(0.3, 0.0, 0.2, 0.0, 1.0, 1.0, 0.0, 1.0), 4);
  EXPECT_EQ(f.ric.Sigma.max_abs(), 0.0);
  EXPECT_EQ(f.ric.Phi.max_abs(), 0.0);
}

TEST(Riccati, ScalarAgainstRk4) {
  // A = 1, Q = 1, B = N = 1, C = 0: dSigma/dt = -2 Sigma + Sigma^2 - 1, Sigma(T) = 0.
  Fixture f(testing_support::scalar_spec(1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.5), 8);
  auto F = [](double, const Eigen::MatrixXd& s) -> Eigen::MatrixXd {
    return -2.0 * s + s * s - Eigen::MatrixXd::Identity(1, 1);
  };
  double ref = testing_support::rk4_backward(F, Eigen::MatrixXd::Zero(1, 1), 0.5, 4000)(0, 0);
  EXPECT_NEAR(f.ric.Sigma(0, 0)(0, 0), ref, 2.0 * f.tree.dt());
  EXPECT_GT(f.ric.Sigma(0, 0)(0, 0), 0.0);
}

TEST(Riccati, DeterministicD2AgainstRk4) {
  Fixture f(testing_support::corpus("D2"), 8);
  const auto& c = f.coeffs;
  Eigen::MatrixXd A = c[Coef::A](0, 0), B = c[Coef::B](0, 0), C = c[Coef::C](0, 0), Q = c[Coef::Q](0, 0),
                  R = c[Coef::R](0, 0), N = c[Coef::N](0, 0);
  Eigen::MatrixXd I = Eigen::MatrixXd::Identity(2, 2);
  auto F = [&](double, const Eigen::MatrixXd& s) -> Eigen::MatrixXd {
    Eigen::MatrixXd K = (I + s * R).inverse();
    return -s * A.transpose() - A * s + s * Q * s - B * N.inverse() * B.transpose() - C * K * s * C.transpose();
  };
  Eigen::MatrixXd ref = testing_support::rk4_backward(F, Eigen::MatrixXd::Zero(2, 2), 1.0, 4000);
  EXPECT_LT((f.ric.Sigma(0, 0) - ref).cwiseAbs().maxCoeff(), 2.0 * f.tree.dt());
  EXPECT_LT(f.ric.Phi.max_abs(), 1e-12);
  EXPECT_LT(f.ric.diagnostics.max_asymmetry, 1e-12);
  for (double e : f.ric.diagnostics.min_sigma_eigenvalue) EXPECT_GE(e, -1e-12);
}

TEST(Riccati, RandomCoefficientsGiveSymmetricPsdSolution) {
  Fixture f(testing_support::corpus("M1r"), 6);
  EXPECT_LT(f.ric.diagnostics.max_asymmetry, 1e-12);
  for (double e : f.ric.diagnostics.min_sigma_eigenvalue) EXPECT_GE(e, -1e-12);
  EXPECT_GT(f.ric.diagnostics.min_singular_value, 0.0);
  // The stored integrand is the martingale representation of Sigma.
  for (int k = 0; k < 6; ++k) {
    AdaptedProcess z = z_from_next(f.tree, f.ric.Sigma, k);
    for (std::size_t j = 0; j < f.tree.width(k); ++j) EXPECT_NEAR(z(k, j)(0, 0), f.ric.Phi(k, j)(0, 0), 1e-14);
  }
  EXPECT_GT(f.ric.Phi.max_abs(), 1e-6);
}

TEST(Riccati, DriftDerivativeMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> g;
  auto random = [&](int r, int c) {
    Eigen::MatrixXd m(r, c);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) m(i, j) = g(rng);
    return m;
  };
  auto sym = [&](int n) {
    Eigen::MatrixXd m = random(n, n);
    return Eigen::MatrixXd(0.5 * (m + m.transpose()));
  };
  Eigen::MatrixXd S = sym(2) * 0.1 + Eigen::MatrixXd::Identity(2, 2), Phi = sym(2) * 0.1, A = random(2, 2),
                  B = random(2, 1), C = random(2, 2) * 0.3, Q = Eigen::MatrixXd::Identity(2, 2),
                  R = Eigen::MatrixXd::Identity(2, 2), N = Eigen::MatrixXd::Identity(1, 1), E = sym(2);
  double h = 1e-6;
  Eigen::MatrixXd fd = (riccati_drift(S + h * E, Phi, A, B, C, Q, R, N) - riccati_drift(S - h * E, Phi, A, B, C, Q, R, N)) /
                       (2 * h);
  Eigen::MatrixXd an = riccati_drift_derivative(S, Phi, A, C, Q, R, E);
  EXPECT_LT((fd - an).norm(), 1e-7 * (1.0 + an.norm()));
}

TEST(Embedding, PhiAndAdjointWithoutMultipliers) {
  Fixture f(testing_support::corpus("S1"), 2);
  MeanTriple eta = MeanTriple::zero(1, 1, 2);
  MultiplierTriple lambda = MultiplierTriple::zero(1, 1, 2);
  PhiSolution phis = solve_phi(f.tree, f.coeffs, f.ric, eta, lambda);
  for (int k = 0; k <= 2; ++k)
    for (std::size_t j = 0; j < f.tree.width(k); ++j) EXPECT_NEAR(phis.phi(k, j)(0, 0), -f.tree.brownian(k, j), 1e-14);
  for (int k = 0; k < 2; ++k)
    for (std::size_t j = 0; j < f.tree.width(k); ++j) EXPECT_NEAR(phis.varphi(k, j)(0, 0), -1.0, 1e-14);
  ForwardSolution xt = solve_xtilde(f.tree, f.coeffs, f.ric, phis, lambda);
  EXPECT_NEAR(xt.X(0, 0)(0, 0), 0.0, 1e-15);
  EXPECT_NEAR(xt.X(1, 0)(0, 0), -std::sqrt(0.5) / 2.0, 1e-14);
  EXPECT_NEAR(xt.X(1, 1)(0, 0), std::sqrt(0.5) / 2.0, 1e-14);
  DecoupledState st = control_and_state(f.tree, f.coeffs, f.ric, phis, xt, lambda);
  EXPECT_NEAR(st.u(1, 0)(0, 0), -std::sqrt(0.5) / 2.0, 1e-14);
  EXPECT_NEAR(st.u(1, 1)(0, 0), std::sqrt(0.5) / 2.0, 1e-14);
}

TEST(Embedding, MultiplierResponses) {
  Fixture f(with_terminal(testing_support::spec_json("S1"), 0.0), 4);
  MeanTriple eta = MeanTriple::zero(1, 1, 4);
  MultiplierTriple l3 = MultiplierTriple::zero(1, 1, 4);
  l3.lambda3.setOnes();
  PhiSolution phis = solve_phi(f.tree, f.coeffs, f.ric, eta, l3);
  for (int k = 0; k <= 4; ++k)
    for (std::size_t j = 0; j < f.tree.width(k); ++j) EXPECT_NEAR(phis.phi(k, j)(0, 0), 1.0 - f.tree.time(k), 1e-14);

  MultiplierTriple l1 = MultiplierTriple::zero(1, 1, 4);
  double q = 0.7;
  l1.lambda1.setConstant(q);
  PhiSolution p1 = solve_phi(f.tree, f.coeffs, f.ric, eta, l1);
  ForwardSolution xt = solve_xtilde(f.tree, f.coeffs, f.ric, p1, l1);
  for (int k = 0; k <= 4; ++k)
    for (std::size_t j = 0; j < f.tree.width(k); ++j) EXPECT_NEAR(xt.X(k, j)(0, 0), -q * f.tree.time(k), 1e-14);
}

TEST(Embedding, BatchedColumnsAreIndependent) {
  Fixture f(testing_support::corpus("M1r"), 4);
  Embedding emb(f.tree, f.coeffs, f.ric);
  Eigen::Index d = stacked_size(1, 1, 4);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g;
  Eigen::MatrixXd eta(d, 3), lambda(d, 3);
  for (Eigen::Index i = 0; i < d; ++i)
    for (int c = 0; c < 3; ++c) eta(i, c) = g(rng), lambda(i, c) = g(rng);
  AdaptedProcess terminal(1, 3, 4, 4);
  for (std::size_t j = 0; j < 16; ++j) terminal(4, j) = Eigen::RowVector3d(f.coeffs.xi(4, j)(0, 0), 0.0, 1.0);
  DecoupledSolution batch = decoupled_solve(emb, terminal, eta, lambda);
  for (int c = 0; c < 3; ++c) {
    AdaptedProcess t1(1, 1, 4, 4);
    for (std::size_t j = 0; j < 16; ++j) t1(4, j)(0, 0) = terminal(4, j)(0, c);
    DecoupledSolution single = decoupled_solve(emb, t1, eta.col(c), lambda.col(c));
    for (int k = 0; k < 4; ++k)
      for (std::size_t j = 0; j < f.tree.width(k); ++j)
        EXPECT_NEAR(batch.state.u(k, j)(0, c), single.state.u(k, j)(0, 0), 1e-13);
  }
}

TEST(Embedding, DecouplingDefectShrinks) {
  double prev = 0.0;
  for (int nt : {4, 8, 16}) {
    Fixture f(testing_support::corpus("S1"), nt);
    Embedding emb(f.tree, f.coeffs, f.ric);
    Eigen::VectorXd zero = Eigen::VectorXd::Zero(stacked_size(1, 1, nt));
    DecoupledSolution s = decoupled_solve(emb, f.coeffs.xi, zero, zero);
    DecouplingDefect d = decoupling_defect(f.tree, f.coeffs, s.state.Y, s.state.Z, s.state.u,
                                           MeanTriple::zero(1, 1, nt));
    double w = std::max(d.weighted_y, d.weighted_z);
    EXPECT_LE(w, 2.0 * f.tree.dt());
    if (nt > 4) EXPECT_GT(prev / w, 1.5);
    prev = w;
  }
}

TEST(Embedding, PicardAgreesOnShortHorizon) {
  json doc = testing_support::spec_json("M1");
  doc["T"] = 0.25;
  for (int nt : {4, 8}) {
    Fixture f(doc, nt);
    MeanTriple eta = MeanTriple::zero(1, 1, nt);
    eta.alpha.setConstant(0.5);
    eta.gamma.setConstant(-0.1);
    MultiplierTriple lambda = MultiplierTriple::zero(1, 1, nt);
    lambda.lambda3.setConstant(0.2);
    Embedding emb(f.tree, f.coeffs, f.ric);
    DecoupledSolution s = decoupled_solve(emb, f.coeffs.xi, stack(eta), stack(lambda));
    PicardResult p = solve_coupled_by_picard(f.tree, f.coeffs, eta, lambda);
    ASSERT_TRUE(p.converged);
    EXPECT_LT(p.u.max_abs_diff(s.state.u), 10.0 * f.tree.dt());
    EXPECT_LT(p.Y.max_abs_diff(s.state.Y), 10.0 * f.tree.dt());
    EXPECT_LT(p.X.max_abs_diff(s.X), 10.0 * f.tree.dt());
  }
}
