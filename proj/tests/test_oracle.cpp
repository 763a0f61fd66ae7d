#include "mfbslq/error.hpp"
#include "mfbslq/oracle.hpp"

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
  Fixture(const ProblemSpec& s, int steps) : spec(s), tree(s.T, steps), coeffs(realize(spec, tree)) {}
  Fixture(const std::string& name, int steps) : Fixture(testing_support::corpus(name), steps) {}
};

AdaptedProcess from_vector(const Eigen::VectorXd& v, int nt) { return unflatten(v, NodeLayout{1, 0, nt - 1}); }

}  // namespace

TEST(Oracle, TwoStepClosedForm) {
  Fixture f("S1", 2);
  QpResult qp = solve_qp(f.tree, f.coeffs);
  double u1 = 2.0 / 3.0 * std::sqrt(0.5);
  EXPECT_NEAR(qp.cost, 5.0 / 6.0, 1e-12);
  EXPECT_NEAR(qp.u(0, 0)(0, 0), 0.0, 1e-12);
  EXPECT_NEAR(qp.u(1, 0)(0, 0), -u1, 1e-12);
  EXPECT_NEAR(qp.u(1, 1)(0, 0), u1, 1e-12);
  EXPECT_EQ(qp.method, "dense");
}

TEST(Oracle, UncontrolledCostOfS1) {
  for (int nt : {2, 6}) {
    Fixture f("S1", nt);
    CostModel model(f.tree, f.coeffs);
    EXPECT_NEAR(model.cost(zero_control(f.tree, 1)), 1.0, 1e-13);
  }
}

TEST(Oracle, CostMatchesIndependentReference) {
  std::mt19937_64 rng(17);
  for (const char* name : {"S1", "M1", "M1r"}) {
    Fixture f(name, 4);
    CostModel model(f.tree, f.coeffs);
    for (int i = 0; i < 3; ++i) {
      AdaptedProcess u = testing_support::random_control(f.tree, 1, rng);
      double ref = testing_support::ScalarReference::cost(f.tree, f.coeffs, u);
      EXPECT_NEAR(model.cost(u), ref, 1e-12 * (1.0 + std::abs(ref))) << name;
      BsdeSolution s = model.state(u);
      EXPECT_NEAR(evaluate_cost(f.tree, f.coeffs, s.Y, s.Z, u), ref, 1e-12 * (1.0 + std::abs(ref))) << name;
    }
  }
}

TEST(Oracle, MinimizerMatchesIndependentQuadraticSolve) {
  for (const char* name : {"M1", "M1r"}) {
    Fixture f(name, 3);
    auto J = [&](const Eigen::VectorXd& v) { return testing_support::ScalarReference::cost(f.tree, f.coeffs, from_vector(v, 3)); };
    Eigen::VectorXd ref = testing_support::minimize_quadratic(J, 7);
    QpResult qp = solve_qp(f.tree, f.coeffs);
    EXPECT_LT((flatten(qp.u, NodeLayout{1, 0, 2}) - ref).cwiseAbs().maxCoeff(), 1e-8) << name;
    EXPECT_NEAR(qp.cost, J(ref), 1e-10) << name;
  }
}

TEST(Oracle, KktAndMethodsAgree) {
  for (const char* name : {"S1", "M1", "M1r", "D2"}) {
    Fixture f(name, 6);
    QpOptions dense;
    dense.method = QpOptions::Method::dense;
    QpOptions iterative;
    iterative.method = QpOptions::Method::iterative;
    QpResult a = solve_qp(f.tree, f.coeffs, dense);
    QpResult b = solve_qp(f.tree, f.coeffs, iterative);
    EXPECT_LE(a.gradient_norm, 1e-9 * (1.0 + a.gradient_norm_at_zero)) << name;
    EXPECT_LE(b.gradient_norm, 1e-9 * (1.0 + b.gradient_norm_at_zero)) << name;
    EXPECT_LT(a.u.max_abs_diff(b.u), 1e-8) << name;
    EXPECT_NEAR(a.cost, b.cost, 1e-10) << name;
    ASSERT_TRUE(a.hessian_min_eigenvalue.has_value());
    EXPECT_GE(*a.hessian_min_eigenvalue, 2.0 * f.spec.delta - 1e-9) << name;
  }
}

TEST(Oracle, RestartsReturnTheSameMinimizer) {
  Fixture f("M1r", 5);
  QpResult ref = solve_qp(f.tree, f.coeffs);
  std::mt19937_64 rng(8);
  for (int i = 0; i < 3; ++i) {
    AdaptedProcess start = testing_support::random_control(f.tree, 1, rng);
    QpOptions opts;
    opts.method = QpOptions::Method::iterative;
    opts.initial = &start;
    EXPECT_LT(solve_qp(f.tree, f.coeffs, opts).u.max_abs_diff(ref.u), 1e-8);
  }
}

TEST(Oracle, NoControlAuthorityGivesZeroControl) {
  json doc = testing_support::spec_json("M1");
  doc["dynamics"]["B"] = testing_support::constant(0.0);
  doc["dynamics"]["B_bar"] = testing_support::constant(0.0);
  Fixture f(load_spec(doc.dump()), 4);
  QpResult qp = solve_qp(f.tree, f.coeffs);
  EXPECT_LT(qp.u.max_abs(), 1e-14);
}

TEST(Oracle, StateMapImpulsesPropagateConditionalMeans) {
  Fixture f(load_spec(testing_support::scalar_spec(0, 1, 0, 0, 1, 1, 0, 0).dump()), 3);
  StateMap map = assemble_state_map(f.tree, f.coeffs);
  double dt = f.tree.dt();
  // Impulse at node (2, 3): Y(2,3) += dt, Y(1,1) += dt/2, Y(0,0) += dt/4.
  Eigen::Index col = map.control.offset(2, 3);
  EXPECT_NEAR(map.linear(map.y.offset(2, 3), col), dt, 1e-15);
  EXPECT_NEAR(map.linear(map.y.offset(2, 2), col), 0.0, 1e-15);
  EXPECT_NEAR(map.linear(map.y.offset(1, 1), col), dt / 2, 1e-15);
  EXPECT_NEAR(map.linear(map.y.offset(1, 0), col), 0.0, 1e-15);
  EXPECT_NEAR(map.linear(map.y.offset(0, 0), col), dt / 4, 1e-15);
}

TEST(Oracle, StateMapReproducesStateSolves) {
  Fixture f("D2", 4);
  StateMap map = assemble_state_map(f.tree, f.coeffs);
  std::mt19937_64 rng(6);
  AdaptedProcess u = testing_support::random_control(f.tree, 1, rng);
  BsdeSolution s = solve_meanfield_bsde(f.tree, f.coeffs, u);
  Eigen::VectorXd yz = map.linear * flatten(u, map.control) + map.offset;
  EXPECT_LT((yz.head(map.y_rows()) - flatten(s.Y, map.y)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((yz.tail(map.z_rows()) - flatten(s.Z, map.z)).cwiseAbs().maxCoeff(), 1e-12);
  BsdeSolution s0 = solve_meanfield_bsde(f.tree, f.coeffs, zero_control(f.tree, 1));
  EXPECT_EQ((map.offset.head(map.y_rows()) - flatten(s0.Y, map.y)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Oracle, SizeCapIsEnforced) {
  Fixture f("S1", 6);
  try {
    assemble_state_map(f.tree, f.coeffs, 10);
    FAIL() << "expected a size error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::size_limit);
  }
}

TEST(Oracle, GradientChecks) {
  Fixture f("S1", 4);
  AdaptedProcess one(1, 1, 0, 3, 1.0);
  GradientCheck g = gradient_and_convexity_check(f.tree, f.coeffs, zero_control(f.tree, 1), one, 1e-5, true);
  EXPECT_LE(g.relative_error, 1e-6);
  ASSERT_TRUE(g.hessian_min_eigenvalue.has_value());
  EXPECT_NEAR(g.coercivity_bound, 1.0, 1e-15);
  EXPECT_GE(*g.hessian_min_eigenvalue, 1.9 * f.spec.delta);

  Fixture z(load_spec(testing_support::scalar_spec(0, 1, 0, 0, 1, 1, 0, 0).dump()), 3);
  GradientCheck g0 = gradient_and_convexity_check(z.tree, z.coeffs, zero_control(z.tree, 1), AdaptedProcess(1, 1, 0, 2, 1.0));
  EXPECT_EQ(g0.analytic, 0.0);
  EXPECT_EQ(g0.finite_difference, 0.0);
}

TEST(Oracle, StationarityAtTheDiscreteOptimum) {
  Fixture f("M1", 8);
  QpResult qp = solve_qp(f.tree, f.coeffs);
  StationarityReport r = stationarity_residual(f.tree, f.coeffs, qp.state.Y, qp.state.Z, qp.u);
  EXPECT_TRUE(r.inversion_checked);
  EXPECT_GT(r.inversion_margin, 0.0);
  EXPECT_LT(r.weighted_norm, 1.0);

  // A unit shift of the control leaves a residual of order N.
  AdaptedProcess shifted = qp.u;
  for (int k = 0; k < 8; ++k)
    for (std::size_t j = 0; j < f.tree.width(k); ++j) shifted(k, j)(0, 0) += 1.0;
  BsdeSolution s = solve_meanfield_bsde(f.tree, f.coeffs, shifted);
  StationarityReport p = stationarity_residual(f.tree, f.coeffs, s.Y, s.Z, shifted);
  EXPECT_GE(p.max_abs, f.spec.delta - 8 * f.tree.dt());

  Fixture z(load_spec(testing_support::scalar_spec(0, 1, 0, 0, 1, 1, 0, 0).dump()), 3);
  AdaptedProcess u0 = zero_control(z.tree, 1);
  BsdeSolution s0 = solve_meanfield_bsde(z.tree, z.coeffs, u0);
  EXPECT_EQ(stationarity_residual(z.tree, z.coeffs, s0.Y, s0.Z, u0).max_abs, 0.0);
}

TEST(Oracle, WeightedHessianOfCorpus) {
  for (const char* name : {"S1", "M1", "M1r", "D2"}) {
    Fixture f(name, 4);
    Eigen::MatrixXd H = weighted_hessian(f.tree, f.coeffs, assemble_state_map(f.tree, f.coeffs));
    EXPECT_LT((H - H.transpose()).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_GE(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(H).eigenvalues()(0), 1.9 * f.spec.delta) << name;
  }
}
