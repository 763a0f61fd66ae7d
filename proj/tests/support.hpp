#pragma once

#include "mfbslq/model.hpp"
#include "mfbslq/tree.hpp"

#include <json.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace testing_support {

using nlohmann::json;

inline std::string spec_path(const std::string& name) { return std::string(MFBSLQ_SPEC_DIR) + "/" + name + ".json"; }

inline mfbslq::ProblemSpec corpus(const std::string& name) { return mfbslq::load_spec_file(spec_path(name)); }

inline json constant(double v) { return {{"form", "constant"}, {"value", v}}; }

// Scalar spec with constant coefficients, terminal g0 + g1 W(T).
inline json scalar_spec(double A, double B, double C, double Q, double R, double N, double G, double g1,
                        double T = 1.0, double delta = 0.5) {
  return {{"n", 1},
          {"m", 1},
          {"T", T},
          {"delta", delta},
          {"dynamics",
           {{"A", constant(A)},
            {"A_bar", constant(0.0)},
            {"B", constant(B)},
            {"B_bar", constant(0.0)},
            {"C", constant(C)},
            {"C_bar", constant(0.0)}}},
          {"cost",
           {{"Q", constant(Q)},
            {"Q_bar", constant(0.0)},
            {"R", constant(R)},
            {"R_bar", constant(0.0)},
            {"N", constant(N)},
            {"N_bar", constant(0.0)},
            {"G", G}}},
          {"terminal", {{"form", "affine_in_WT"}, {"g0", 0.0}, {"g1", g1}}}};
}

inline json spec_json(const std::string& name) {
  std::ifstream in(spec_path(name));
  return json::parse(in);
}

// Every barred coefficient replaced by a zero constant of the same shape.
inline mfbslq::ProblemSpec zero_bars(mfbslq::ProblemSpec spec) {
  using mfbslq::Coef;
  auto zero = [&](Coef c, int r, int k) { spec.descriptor(c) = mfbslq::ConstantForm{Eigen::MatrixXd::Zero(r, k)}; };
  zero(Coef::A_bar, spec.n, spec.n);
  zero(Coef::B_bar, spec.n, spec.m);
  zero(Coef::C_bar, spec.n, spec.n);
  zero(Coef::Q_bar, spec.n, spec.n);
  zero(Coef::R_bar, spec.n, spec.n);
  zero(Coef::N_bar, spec.m, spec.m);
  return spec;
}

inline mfbslq::AdaptedProcess random_control(const mfbslq::ScenarioTree& tree, int m, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  mfbslq::AdaptedProcess u(m, 1, 0, tree.steps() - 1);
  for (int k = 0; k < tree.steps(); ++k)
    for (std::size_t j = 0; j < tree.width(k); ++j)
      for (int i = 0; i < m; ++i) u(k, j)(i, 0) = g(rng);
  return u;
}

// Independent reference for the scalar mean-field state equation. Written
// node by node from the scheme definition with a fixed-point iteration on
// the level means instead of the closed-form level solve.
struct ScalarReference {
  struct Result {
    std::vector<std::vector<double>> Y, Z;
  };

  static Result solve(const mfbslq::ScenarioTree& tree, const mfbslq::CoefficientSet& c,
                      const mfbslq::AdaptedProcess& u) {
    using mfbslq::Coef;
    int nt = tree.steps();
    double dt = tree.dt(), s = tree.sqrt_dt();
    Result r;
    r.Y.assign(nt + 1, {});
    r.Z.assign(nt, {});
    r.Y[nt].resize(tree.width(nt));
    for (std::size_t j = 0; j < tree.width(nt); ++j) r.Y[nt][j] = c.xi(nt, j)(0, 0);
    for (int k = nt - 1; k >= 0; --k) {
      std::size_t w = tree.width(k);
      r.Y[k].assign(w, 0.0);
      r.Z[k].assign(w, 0.0);
      std::vector<double> ey(w);
      double Ez = 0.0, Eu = 0.0;
      for (std::size_t j = 0; j < w; ++j) {
        double up = r.Y[k + 1][2 * j], dn = r.Y[k + 1][2 * j + 1];
        ey[j] = 0.5 * (up + dn);
        r.Z[k][j] = (up - dn) / (2.0 * s);
        Ez += r.Z[k][j] / static_cast<double>(w);
        Eu += u(k, j)(0, 0) / static_cast<double>(w);
      }
      double Ey = 0.0;
      for (int it = 0; it < 2000; ++it) {
        double next = 0.0;
        for (std::size_t j = 0; j < w; ++j) {
          double a = c[Coef::A](k, j)(0, 0);
          double rhs = ey[j] + dt * (c[Coef::A_bar](k, j)(0, 0) * Ey + c[Coef::B](k, j)(0, 0) * u(k, j)(0, 0) +
                                     c[Coef::B_bar](k, j)(0, 0) * Eu + c[Coef::C](k, j)(0, 0) * r.Z[k][j] +
                                     c[Coef::C_bar](k, j)(0, 0) * Ez);
          r.Y[k][j] = rhs / (1.0 - dt * a);
          next += r.Y[k][j] / static_cast<double>(w);
        }
        if (std::abs(next - Ey) < 1e-16 * (1.0 + std::abs(next))) break;
        Ey = next;
      }
    }
    return r;
  }

  static double cost(const mfbslq::ScenarioTree& tree, const mfbslq::CoefficientSet& c, const mfbslq::AdaptedProcess& u) {
    using mfbslq::Coef;
    Result r = solve(tree, c, u);
    double dt = tree.dt();
    double J = c.G(0, 0) * r.Y[0][0] * r.Y[0][0];
    for (int k = 0; k < tree.steps(); ++k) {
      std::size_t w = tree.width(k);
      double p = tree.probability(k), Ey = 0, Ez = 0, Eu = 0, Eq = 0, Er = 0, En = 0;
      for (std::size_t j = 0; j < w; ++j) {
        double y = r.Y[k][j], z = r.Z[k][j], v = u(k, j)(0, 0);
        J += dt * p * (c[Coef::Q](k, j)(0, 0) * y * y + c[Coef::R](k, j)(0, 0) * z * z + c[Coef::N](k, j)(0, 0) * v * v);
        Ey += p * y;
        Ez += p * z;
        Eu += p * v;
        Eq += p * c[Coef::Q_bar](k, j)(0, 0);
        Er += p * c[Coef::R_bar](k, j)(0, 0);
        En += p * c[Coef::N_bar](k, j)(0, 0);
      }
      J += dt * (Eq * Ey * Ey + Er * Ez * Ez + En * Eu * Eu);
    }
    return J;
  }
};

// Dense minimizer of a quadratic given only as a black-box function, by
// second differences on the unit basis. Small problems only.
inline Eigen::VectorXd minimize_quadratic(const std::function<double(const Eigen::VectorXd&)>& f, Eigen::Index d) {
  Eigen::VectorXd zero = Eigen::VectorXd::Zero(d);
  double f0 = f(zero);
  Eigen::MatrixXd H(d, d);
  Eigen::VectorXd g(d), fi(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    Eigen::VectorXd e = Eigen::VectorXd::Unit(d, i);
    double fp = f(e), fm = f(-e);
    fi(i) = fp;
    H(i, i) = fp + fm - 2.0 * f0;
    g(i) = 0.5 * (fp - fm);
  }
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = i + 1; j < d; ++j) {
      Eigen::VectorXd e = Eigen::VectorXd::Unit(d, i) + Eigen::VectorXd::Unit(d, j);
      H(i, j) = H(j, i) = f(e) - fi(i) - fi(j) + f0;
    }
  return H.ldlt().solve(-g);
}

// Classical RK4 for the matrix ODE dS/dt = F(t, S) integrated backward from S(T) = S_T.
inline Eigen::MatrixXd rk4_backward(const std::function<Eigen::MatrixXd(double, const Eigen::MatrixXd&)>& F,
                                    const Eigen::MatrixXd& terminal, double T, int steps) {
  Eigen::MatrixXd S = terminal;
  double h = -T / steps;
  double t = T;
  for (int i = 0; i < steps; ++i) {
    Eigen::MatrixXd k1 = F(t, S);
    Eigen::MatrixXd k2 = F(t + 0.5 * h, S + 0.5 * h * k1);
    Eigen::MatrixXd k3 = F(t + 0.5 * h, S + 0.5 * h * k2);
    Eigen::MatrixXd k4 = F(t + h, S + h * k3);
    S += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    t += h;
  }
  return S;
}

}  // namespace testing_support
