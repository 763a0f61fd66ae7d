#include "mfbslq/model.hpp"

#include "mfbslq/error.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace mfbslq {

using json = nlohmann::json;

const char* coefficient_name(Coef c) {
  switch (c) {
    case Coef::A: return "A";
    case Coef::A_bar: return "A_bar";
    case Coef::B: return "B";
    case Coef::B_bar: return "B_bar";
    case Coef::C: return "C";
    case Coef::C_bar: return "C_bar";
    case Coef::Q: return "Q";
    case Coef::Q_bar: return "Q_bar";
    case Coef::R: return "R";
    case Coef::R_bar: return "R_bar";
    case Coef::N: return "N";
    case Coef::N_bar: return "N_bar";
  }
  return "?";
}

bool is_dynamics(Coef c) {
  return c == Coef::A || c == Coef::A_bar || c == Coef::B || c == Coef::B_bar || c == Coef::C || c == Coef::C_bar;
}

namespace {

struct Shape {
  int rows;
  int cols;
};

Shape coefficient_shape(Coef c, int n, int m) {
  switch (c) {
    case Coef::B:
    case Coef::B_bar: return {n, m};
    case Coef::N:
    case Coef::N_bar: return {m, m};
    default: return {n, n};
  }
}

[[noreturn]] void parse_fail(const std::string& path, const std::string& message) {
  throw Error(ErrorKind::parse, path + ": " + message);
}

const json& field(const json& obj, const char* key, const std::string& path) {
  auto it = obj.find(key);
  if (it == obj.end()) parse_fail(path.empty() ? key : path + "." + key, "missing required field");
  return *it;
}

void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& path) {
  if (!obj.is_object()) parse_fail(path, "expected an object");
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!allowed.count(it.key())) parse_fail(path.empty() ? it.key() : path + "." + it.key(), "unknown field");
}

double parse_number(const json& v, const std::string& path) {
  if (!v.is_number()) parse_fail(path, "expected a number");
  double x = v.get<double>();
  if (!std::isfinite(x)) parse_fail(path, "non-finite value");
  return x;
}

int parse_positive_int(const json& v, const std::string& path) {
  if (!v.is_number_integer()) parse_fail(path, "expected an integer");
  long long x = v.get<long long>();
  if (x < 1 || x > 1000) parse_fail(path, "dimension out of range");
  return static_cast<int>(x);
}

// Row-major nested array; a bare number is accepted for a 1x1 matrix.
Eigen::MatrixXd parse_matrix(const json& v, Shape shape, const std::string& path) {
  Eigen::MatrixXd out(shape.rows, shape.cols);
  if (v.is_number()) {
    if (shape.rows != 1 || shape.cols != 1)
      parse_fail(path, "dimension mismatch: scalar given for a " + std::to_string(shape.rows) + "x" +
                           std::to_string(shape.cols) + " matrix");
    out(0, 0) = parse_number(v, path);
    return out;
  }
  if (!v.is_array() || static_cast<int>(v.size()) != shape.rows)
    parse_fail(path, "dimension mismatch: expected " + std::to_string(shape.rows) + " rows");
  for (int i = 0; i < shape.rows; ++i) {
    const json& row = v[static_cast<std::size_t>(i)];
    std::string row_path = path + "[" + std::to_string(i) + "]";
    if (row.is_number() && shape.cols == 1) {
      out(i, 0) = parse_number(row, row_path);
      continue;
    }
    if (!row.is_array() || static_cast<int>(row.size()) != shape.cols)
      parse_fail(row_path, "dimension mismatch: expected " + std::to_string(shape.cols) + " columns");
    for (int j = 0; j < shape.cols; ++j)
      out(i, j) = parse_number(row[static_cast<std::size_t>(j)], row_path + "[" + std::to_string(j) + "]");
  }
  return out;
}

// Flat array of length n; a bare number is accepted when n = 1.
Eigen::VectorXd parse_vector(const json& v, int n, const std::string& path) {
  Eigen::VectorXd out(n);
  if (v.is_number()) {
    if (n != 1) parse_fail(path, "dimension mismatch: scalar given for a " + std::to_string(n) + "-vector");
    out(0) = parse_number(v, path);
    return out;
  }
  if (!v.is_array() || static_cast<int>(v.size()) != n)
    parse_fail(path, "dimension mismatch: expected " + std::to_string(n) + " entries");
  for (int i = 0; i < n; ++i) out(i) = parse_number(v[static_cast<std::size_t>(i)], path + "[" + std::to_string(i) + "]");
  return out;
}

std::vector<Eigen::MatrixXd> parse_matrix_list(const json& v, Shape shape, const std::string& path) {
  if (!v.is_array()) parse_fail(path, "expected an array");
  std::vector<Eigen::MatrixXd> out;
  out.reserve(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back(parse_matrix(v[i], shape, path + "[" + std::to_string(i) + "]"));
  return out;
}

CoefficientDescriptor parse_descriptor(const json& v, Shape shape, const std::string& path) {
  if (!v.is_object()) parse_fail(path, "expected a descriptor object with a \"form\" field");
  const json& form_value = field(v, "form", path);
  if (!form_value.is_string()) parse_fail(path + ".form", "expected a string");
  std::string form = form_value.get<std::string>();
  if (form == "constant") {
    reject_unknown(v, {"form", "value"}, path);
    return ConstantForm{parse_matrix(field(v, "value", path), shape, path + ".value")};
  }
  if (form == "time_table") {
    reject_unknown(v, {"form", "values"}, path);
    return TimeTableForm{parse_matrix_list(field(v, "values", path), shape, path + ".values")};
  }
  if (form == "affine_tanh_W") {
    reject_unknown(v, {"form", "M0", "M1", "M2"}, path);
    AffineTanhWForm out{parse_matrix(field(v, "M0", path), shape, path + ".M0"),
                        parse_matrix(field(v, "M1", path), shape, path + ".M1"), std::nullopt};
    if (v.contains("M2")) out.m2 = parse_matrix(v["M2"], shape, path + ".M2");
    return out;
  }
  if (form == "node_table") {
    reject_unknown(v, {"form", "levels"}, path);
    const json& levels = field(v, "levels", path);
    if (!levels.is_array()) parse_fail(path + ".levels", "expected an array of levels");
    NodeTableForm out;
    for (std::size_t k = 0; k < levels.size(); ++k)
      out.levels.push_back(parse_matrix_list(levels[k], shape, path + ".levels[" + std::to_string(k) + "]"));
    return out;
  }
  parse_fail(path + ".form", "unsupported descriptor form \"" + form + "\"");
}

TerminalDescriptor parse_terminal(const json& v, int n, const std::string& path) {
  if (!v.is_object()) parse_fail(path, "expected a descriptor object with a \"form\" field");
  const json& form_value = field(v, "form", path);
  if (!form_value.is_string()) parse_fail(path + ".form", "expected a string");
  std::string form = form_value.get<std::string>();
  if (form == "leaf_table") {
    reject_unknown(v, {"form", "values"}, path);
    const json& values = field(v, "values", path);
    if (!values.is_array()) parse_fail(path + ".values", "expected an array");
    LeafTableForm out;
    for (std::size_t i = 0; i < values.size(); ++i)
      out.values.push_back(parse_vector(values[i], n, path + ".values[" + std::to_string(i) + "]"));
    return out;
  }
  if (form == "affine_in_WT") {
    reject_unknown(v, {"form", "g0", "g1"}, path);
    return AffineInWTForm{parse_vector(field(v, "g0", path), n, path + ".g0"),
                          parse_vector(field(v, "g1", path), n, path + ".g1")};
  }
  if (form == "poly_in_WT") {
    reject_unknown(v, {"form", "coeffs"}, path);
    const json& coeffs = field(v, "coeffs", path);
    if (!coeffs.is_array() || coeffs.empty()) parse_fail(path + ".coeffs", "expected a non-empty array");
    PolyInWTForm out;
    for (std::size_t i = 0; i < coeffs.size(); ++i)
      out.coeffs.push_back(parse_vector(coeffs[i], n, path + ".coeffs[" + std::to_string(i) + "]"));
    return out;
  }
  parse_fail(path + ".form", "unsupported terminal form \"" + form + "\"");
}

}  // namespace

ProblemSpec load_spec(const std::string& document) {
  json root;
  try {
    root = json::parse(document);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::parse, std::string("malformed JSON: ") + e.what());
  }
  reject_unknown(root, {"n", "m", "T", "delta", "dynamics", "cost", "terminal", "coefficient_bound"}, "");
  ProblemSpec spec;
  spec.n = parse_positive_int(field(root, "n", ""), "n");
  spec.m = parse_positive_int(field(root, "m", ""), "m");
  spec.T = parse_number(field(root, "T", ""), "T");
  if (spec.T <= 0.0) parse_fail("T", "must be positive");
  spec.delta = parse_number(field(root, "delta", ""), "delta");
  if (spec.delta <= 0.0) parse_fail("delta", "must be positive");
  if (root.contains("coefficient_bound")) {
    double bound = parse_number(root["coefficient_bound"], "coefficient_bound");
    if (bound <= 0.0) parse_fail("coefficient_bound", "must be positive");
    spec.coefficient_bound = bound;
  }

  const json& dynamics = field(root, "dynamics", "");
  reject_unknown(dynamics, {"A", "A_bar", "B", "B_bar", "C", "C_bar"}, "dynamics");
  const json& cost = field(root, "cost", "");
  reject_unknown(cost, {"Q", "Q_bar", "R", "R_bar", "N", "N_bar", "G"}, "cost");
  for (Coef c : all_coefficients) {
    const json& section = is_dynamics(c) ? dynamics : cost;
    std::string path = std::string(is_dynamics(c) ? "dynamics." : "cost.") + coefficient_name(c);
    spec.descriptor(c) =
        parse_descriptor(field(section, coefficient_name(c), is_dynamics(c) ? "dynamics" : "cost"),
                         coefficient_shape(c, spec.n, spec.m), path);
  }

  // G is a deterministic matrix: either a raw matrix or a constant descriptor.
  const json& g = field(cost, "G", "cost");
  if (g.is_object()) {
    CoefficientDescriptor d = parse_descriptor(g, {spec.n, spec.n}, "cost.G");
    if (!std::holds_alternative<ConstantForm>(d)) parse_fail("cost.G.form", "G must be constant");
    spec.G = std::get<ConstantForm>(d).value;
  } else {
    spec.G = parse_matrix(g, {spec.n, spec.n}, "cost.G");
  }
  spec.terminal = parse_terminal(field(root, "terminal", ""), spec.n, "terminal");
  return spec;
}

ProblemSpec load_spec_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open spec file " + path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return load_spec(buffer.str());
}

namespace {

AdaptedProcess realize_descriptor(const CoefficientDescriptor& d, Shape shape, const ScenarioTree& tree,
                                  const std::string& name) {
  int last = tree.steps() - 1;
  AdaptedProcess out(shape.rows, shape.cols, 0, last);
  if (const auto* c = std::get_if<ConstantForm>(&d)) {
    for (int k = 0; k <= last; ++k)
      for (std::size_t j = 0; j < tree.width(k); ++j) out(k, j) = c->value;
  } else if (const auto* t = std::get_if<TimeTableForm>(&d)) {
    require(static_cast<int>(t->values.size()) == tree.steps(), ErrorKind::configuration,
            name + ": time_table has " + std::to_string(t->values.size()) + " entries, tree has " +
                std::to_string(tree.steps()) + " steps");
    for (int k = 0; k <= last; ++k)
      for (std::size_t j = 0; j < tree.width(k); ++j) out(k, j) = t->values[static_cast<std::size_t>(k)];
  } else if (const auto* a = std::get_if<AffineTanhWForm>(&d)) {
    for (int k = 0; k <= last; ++k)
      for (std::size_t j = 0; j < tree.width(k); ++j) {
        double h = std::tanh(tree.brownian(k, j));
        auto node = out(k, j);
        node = a->m0 + h * a->m1;
        if (a->m2) node += (h * h) * *a->m2;
      }
  } else {
    const auto& table = std::get<NodeTableForm>(d);
    require(static_cast<int>(table.levels.size()) == tree.steps(), ErrorKind::configuration,
            name + ": node_table has " + std::to_string(table.levels.size()) + " levels, tree has " +
                std::to_string(tree.steps()) + " steps");
    for (int k = 0; k <= last; ++k) {
      const auto& level = table.levels[static_cast<std::size_t>(k)];
      require(level.size() == tree.width(k), ErrorKind::configuration,
              name + ": node_table level " + std::to_string(k) + " needs " + std::to_string(tree.width(k)) + " nodes");
      for (std::size_t j = 0; j < tree.width(k); ++j) out(k, j) = level[j];
    }
  }
  return out;
}

}  // namespace

AdaptedProcess realize_terminal(const TerminalDescriptor& terminal, int n, const ScenarioTree& tree) {
  int nt = tree.steps();
  AdaptedProcess xi(n, 1, nt, nt);
  std::size_t leaves = tree.width(nt);
  if (const auto* table = std::get_if<LeafTableForm>(&terminal)) {
    require(table->values.size() == leaves, ErrorKind::configuration,
            "terminal leaf_table has " + std::to_string(table->values.size()) + " values, tree has " +
                std::to_string(leaves) + " leaves");
    for (std::size_t j = 0; j < leaves; ++j) xi(nt, j) = table->values[j];
  } else if (const auto* affine = std::get_if<AffineInWTForm>(&terminal)) {
    for (std::size_t j = 0; j < leaves; ++j) xi(nt, j) = affine->g0 + tree.brownian(nt, j) * affine->g1;
  } else {
    const auto& poly = std::get<PolyInWTForm>(terminal);
    for (std::size_t j = 0; j < leaves; ++j) {
      double w = tree.brownian(nt, j);
      Eigen::VectorXd value = Eigen::VectorXd::Zero(n);
      for (auto it = poly.coeffs.rbegin(); it != poly.coeffs.rend(); ++it) value = value * w + *it;
      xi(nt, j) = value;
    }
  }
  return xi;
}

CoefficientSet realize(const ProblemSpec& spec, const ScenarioTree& tree) {
  CoefficientSet out;
  out.n = spec.n;
  out.m = spec.m;
  out.delta = spec.delta;
  out.coefficient_bound = spec.coefficient_bound;
  for (Coef c : all_coefficients)
    out[c] = realize_descriptor(spec.descriptor(c), coefficient_shape(c, spec.n, spec.m), tree, coefficient_name(c));
  out.G = spec.G;
  out.xi = realize_terminal(spec.terminal, spec.n, tree);
  return out;
}

bool ValidationReport::passed() const {
  for (const auto& c : checks)
    if (!c.passed) return false;
  return true;
}

std::string ValidationReport::summary() const {
  std::ostringstream os;
  for (const auto& c : checks) {
    os << (c.passed ? "pass" : "FAIL") << "  " << c.name << "  margin=" << c.margin + 0.0;
    if (!c.passed && c.worst_level >= 0) os << "  at node (" << c.worst_level << "," << c.worst_index << ")";
    if (!c.message.empty()) os << "  " << c.message;
    os << "\n";
  }
  return os.str();
}

namespace {

constexpr double symmetry_tolerance = 1e-12;
constexpr double eigen_tolerance = 1e-12;

struct Worst {
  double value = std::numeric_limits<double>::infinity();
  int level = -1;
  std::size_t index = 0;
  void offer(double v, int k, std::size_t j) {
    if (v < value) {
      value = v;
      level = k;
      index = j;
    }
  }
};

double min_eigenvalue(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m, Eigen::EigenvaluesOnly);
  return solver.eigenvalues()(0);
}

// Symmetry check followed, if it passes, by the bound lambda_min >= floor.
void check_weight(std::vector<AssumptionCheck>& out, const std::string& name, const ScenarioTree* tree,
                  const AdaptedProcess* proc, const Eigen::MatrixXd* constant, double floor,
                  const std::string& requirement) {
  Worst asym, eig;
  auto visit = [&](const Eigen::MatrixXd& m, int k, std::size_t j) {
    double a = (m - m.transpose()).cwiseAbs().maxCoeff();
    asym.offer(-a, k, j);
    if (a <= symmetry_tolerance) eig.offer(min_eigenvalue(0.5 * (m + m.transpose())) - floor, k, j);
  };
  if (constant) {
    visit(*constant, -1, 0);
  } else {
    for (int k = proc->first_level(); k <= proc->last_level(); ++k)
      for (std::size_t j = 0; j < tree->width(k); ++j) visit((*proc)(k, j), k, j);
  }
  AssumptionCheck sym{name + " symmetric", -asym.value <= symmetry_tolerance, asym.value, asym.level, asym.index, ""};
  if (!sym.passed) sym.message = "max |M - M^T| = " + std::to_string(-asym.value);
  out.push_back(sym);
  if (!sym.passed) return;
  AssumptionCheck pos{name + " " + requirement, eig.value >= -eigen_tolerance, eig.value, eig.level, eig.index, ""};
  out.push_back(pos);
}

}  // namespace

ValidationReport validate_h1_h2(const CoefficientSet& coeffs, double delta) {
  ValidationReport report;
  int nt = coeffs.steps();
  ScenarioTree tree(1.0, nt < 1 ? 1 : nt);
  auto& out = report.checks;
  check_weight(out, "Q", &tree, &coeffs[Coef::Q], nullptr, 0.0, ">= 0");
  check_weight(out, "Q_bar", &tree, &coeffs[Coef::Q_bar], nullptr, 0.0, ">= 0");
  check_weight(out, "R", &tree, &coeffs[Coef::R], nullptr, delta, ">= delta I");
  check_weight(out, "R_bar", &tree, &coeffs[Coef::R_bar], nullptr, 0.0, ">= 0");
  check_weight(out, "N", &tree, &coeffs[Coef::N], nullptr, delta, ">= delta I");
  check_weight(out, "N_bar", &tree, &coeffs[Coef::N_bar], nullptr, 0.0, ">= 0");
  check_weight(out, "G", nullptr, nullptr, &coeffs.G, 0.0, ">= 0");

  // Finiteness, and the operator-norm bound when one is supplied.
  double bound = coeffs.coefficient_bound.value_or(std::numeric_limits<double>::infinity());
  AssumptionCheck bounded{"coefficients bounded", true, 0.0, -1, 0, ""};
  double worst_norm = 0.0;
  auto offer_norm = [&](const Eigen::MatrixXd& m, int k, std::size_t j, const char* name) {
    double norm = m.allFinite() ? m.norm() : std::numeric_limits<double>::infinity();
    if (norm > worst_norm) {
      worst_norm = norm;
      bounded.worst_level = k;
      bounded.worst_index = j;
      bounded.message = std::string("largest in ") + name;
    }
  };
  for (Coef c : all_coefficients) {
    const auto& proc = coeffs[c];
    for (int k = proc.first_level(); k <= proc.last_level(); ++k)
      for (std::size_t j = 0; j < tree.width(k); ++j) offer_norm(proc(k, j), k, j, coefficient_name(c));
  }
  offer_norm(coeffs.G, -1, 0, "G");
  bool xi_finite = true;
  for (std::size_t j = 0; j < tree.width(nt); ++j) xi_finite = xi_finite && coeffs.xi(nt, j).allFinite();
  bounded.margin = bound - worst_norm;
  bounded.passed = std::isfinite(worst_norm) && worst_norm <= bound && xi_finite;
  if (!xi_finite) bounded.message = "terminal value not finite";
  out.push_back(bounded);
  out.push_back({"dimensions", coeffs.n >= 1 && coeffs.m >= 1 && delta > 0.0, delta, -1, 0, ""});
  return report;
}

}  // namespace mfbslq
