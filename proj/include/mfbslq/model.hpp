#pragma once

#include "mfbslq/tree.hpp"

#include <Eigen/Dense>

#include <array>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace mfbslq {

enum class Coef { A, A_bar, B, B_bar, C, C_bar, Q, Q_bar, R, R_bar, N, N_bar };

inline constexpr std::array<Coef, 12> all_coefficients = {
    Coef::A, Coef::A_bar, Coef::B, Coef::B_bar, Coef::C, Coef::C_bar,
    Coef::Q, Coef::Q_bar, Coef::R, Coef::R_bar, Coef::N, Coef::N_bar};

const char* coefficient_name(Coef c);
bool is_dynamics(Coef c);

struct ConstantForm {
  Eigen::MatrixXd value;
};
struct TimeTableForm {
  std::vector<Eigen::MatrixXd> values;  // one per step k = 0..n_t-1
};
// M0 + M1 tanh(W) + M2 tanh(W)^2
struct AffineTanhWForm {
  Eigen::MatrixXd m0;
  Eigen::MatrixXd m1;
  std::optional<Eigen::MatrixXd> m2;
};
struct NodeTableForm {
  std::vector<std::vector<Eigen::MatrixXd>> levels;  // levels[k][j]
};
using CoefficientDescriptor = std::variant<ConstantForm, TimeTableForm, AffineTanhWForm, NodeTableForm>;

struct LeafTableForm {
  std::vector<Eigen::VectorXd> values;  // one per leaf
};
struct AffineInWTForm {
  Eigen::VectorXd g0;
  Eigen::VectorXd g1;
};
struct PolyInWTForm {
  std::vector<Eigen::VectorXd> coeffs;  // coeffs[p] multiplies W(T)^p
};
using TerminalDescriptor = std::variant<LeafTableForm, AffineInWTForm, PolyInWTForm>;

struct ProblemSpec {
  int n = 0;
  int m = 0;
  double T = 0.0;
  double delta = 0.0;
  std::optional<double> coefficient_bound;
  std::array<CoefficientDescriptor, 12> coefficients;
  Eigen::MatrixXd G;
  TerminalDescriptor terminal;

  const CoefficientDescriptor& descriptor(Coef c) const { return coefficients[static_cast<std::size_t>(c)]; }
  CoefficientDescriptor& descriptor(Coef c) { return coefficients[static_cast<std::size_t>(c)]; }
};

// Parses a JSON document. Throws Error(parse) naming the offending field.
ProblemSpec load_spec(const std::string& document);
ProblemSpec load_spec_file(const std::string& path);

struct CoefficientSet {
  int n = 0;
  int m = 0;
  double delta = 0.0;
  std::optional<double> coefficient_bound;
  std::array<AdaptedProcess, 12> values;  // levels 0..n_t-1
  Eigen::MatrixXd G;
  AdaptedProcess xi;                     // n x 1 at level n_t

  const AdaptedProcess& operator[](Coef c) const { return values[static_cast<std::size_t>(c)]; }
  AdaptedProcess& operator[](Coef c) { return values[static_cast<std::size_t>(c)]; }
  int steps() const { return xi.last_level(); }
};

CoefficientSet realize(const ProblemSpec& spec, const ScenarioTree& tree);

// Terminal values xi realized on the leaves of the tree.
AdaptedProcess realize_terminal(const TerminalDescriptor& terminal, int n, const ScenarioTree& tree);

struct AssumptionCheck {
  std::string name;
  bool passed = true;
  double margin = 0.0;  // smallest eigenvalue minus the required bound (or negative asymmetry)
  int worst_level = -1;
  std::size_t worst_index = 0;
  std::string message;
};

struct ValidationReport {
  std::vector<AssumptionCheck> checks;
  bool passed() const;
  std::string summary() const;
};

// Checks symmetry, semidefiniteness, the delta-coercivity of N and R, and
// the optional coefficient bound. Never throws.
ValidationReport validate_h1_h2(const CoefficientSet& coeffs, double delta);

}  // namespace mfbslq
