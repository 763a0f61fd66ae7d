#include "mfbslq/oracle.hpp"

#include "mfbslq/error.hpp"
#include "mfbslq/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mfbslq {

namespace {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

std::vector<Mat> level_means(const ScenarioTree& tree, const AdaptedProcess& proc) {
  std::vector<Mat> out;
  for (int k = 0; k < tree.steps(); ++k) out.push_back(expect(tree, proc, k));
  return out;
}

// y += a * x over the stored levels 0..n_t-1.
void axpy(const ScenarioTree& tree, double a, const AdaptedProcess& x, AdaptedProcess& y) {
  for (int k = 0; k < tree.steps(); ++k) {
    const double* px = x.level_data(k);
    double* py = y.level_data(k);
    std::size_t size = tree.width(k) * x.stride();
    for (std::size_t i = 0; i < size; ++i) py[i] += a * px[i];
  }
}

void scale(const ScenarioTree& tree, double a, AdaptedProcess& y) {
  for (int k = 0; k < tree.steps(); ++k) {
    double* py = y.level_data(k);
    std::size_t size = tree.width(k) * y.stride();
    for (std::size_t i = 0; i < size; ++i) py[i] *= a;
  }
}

// Symmetric bilinear form of the cost: evaluate_cost(x) = cost_form(x, x).
double cost_form(const ScenarioTree& tree, const CoefficientSet& c, const AdaptedProcess& Y1, const AdaptedProcess& Z1,
                 const AdaptedProcess& u1, const AdaptedProcess& Y2, const AdaptedProcess& Z2,
                 const AdaptedProcess& u2) {
  int nt = tree.steps();
  double dt = tree.dt();
  double total = Y1(0, 0).col(0).dot(c.G * Y2(0, 0).col(0));
  for (int k = 0; k < nt; ++k) {
    double p = tree.probability(k);
    double level = 0.0;
    for (std::size_t j = 0; j < tree.width(k); ++j) {
      level += Y1(k, j).col(0).dot(c[Coef::Q](k, j) * Y2(k, j).col(0));
      level += Z1(k, j).col(0).dot(c[Coef::R](k, j) * Z2(k, j).col(0));
      level += u1(k, j).col(0).dot(c[Coef::N](k, j) * u2(k, j).col(0));
    }
    total += dt * p * level;
    Vec ey1 = expect(tree, Y1, k), ey2 = expect(tree, Y2, k);
    Vec ez1 = expect(tree, Z1, k), ez2 = expect(tree, Z2, k);
    Vec eu1 = expect(tree, u1, k), eu2 = expect(tree, u2, k);
    total += dt * (ey1.dot(expect(tree, c[Coef::Q_bar], k) * ey2) + ez1.dot(expect(tree, c[Coef::R_bar], k) * ez2) +
                   eu1.dot(expect(tree, c[Coef::N_bar], k) * eu2));
  }
  return total;
}

}  // namespace

Vec flatten(const AdaptedProcess& proc, const NodeLayout& layout) {
  require(proc.rows() == layout.dim && proc.cols() == 1, ErrorKind::contract, "flatten: shape mismatch");
  Vec out(layout.size());
  for (int k = layout.first; k <= layout.last; ++k) {
    std::size_t size = (std::size_t{1} << k) * proc.stride();
    std::copy(proc.level_data(k), proc.level_data(k) + size, out.data() + layout.offset(k, 0));
  }
  return out;
}

AdaptedProcess unflatten(const Eigen::Ref<const Vec>& v, const NodeLayout& layout) {
  require(v.size() == layout.size(), ErrorKind::contract, "unflatten: size mismatch");
  AdaptedProcess out(layout.dim, 1, layout.first, layout.last);
  for (int k = layout.first; k <= layout.last; ++k) {
    std::size_t size = (std::size_t{1} << k) * out.stride();
    std::copy(v.data() + layout.offset(k, 0), v.data() + layout.offset(k, 0) + size, out.level_data(k));
  }
  return out;
}

StateMap assemble_state_map(const ScenarioTree& tree, const CoefficientSet& coeffs, Eigen::Index size_cap) {
  int n = coeffs.n, m = coeffs.m, nt = tree.steps();
  StateMap map;
  map.control = {m, 0, nt - 1};
  map.y = {n, 0, nt};
  map.z = {n, 0, nt - 1};
  Eigen::Index du = map.control.size();
  if (du > size_cap)
    throw Error(ErrorKind::size_limit, "state map needs " + std::to_string(du) + " control columns (cap " +
                                           std::to_string(size_cap) + "); use the matrix-free solver");
  BackwardScheme scheme(tree, coeffs);
  AdaptedProcess zero_terminal(n, 1, nt, nt);
  Eigen::Index rows = map.y_rows() + map.z_rows();
  map.linear.resize(rows, du);
  parallel_for(0, static_cast<std::size_t>(du), [&](std::size_t i) {
    Vec e = Vec::Zero(du);
    e(static_cast<Eigen::Index>(i)) = 1.0;
    BsdeSolution s = solve_meanfield_bsde(tree, coeffs, scheme, unflatten(e, map.control), zero_terminal);
    map.linear.col(static_cast<Eigen::Index>(i)).head(map.y_rows()) = flatten(s.Y, map.y);
    map.linear.col(static_cast<Eigen::Index>(i)).tail(map.z_rows()) = flatten(s.Z, map.z);
  }, 16);
  BsdeSolution s = solve_meanfield_bsde(tree, coeffs, scheme, zero_control(tree, m), coeffs.xi);
  map.offset.resize(rows);
  map.offset.head(map.y_rows()) = flatten(s.Y, map.y);
  map.offset.tail(map.z_rows()) = flatten(s.Z, map.z);
  return map;
}

double evaluate_cost(const ScenarioTree& tree, const CoefficientSet& coeffs, const AdaptedProcess& Y,
                     const AdaptedProcess& Z, const AdaptedProcess& u) {
  return cost_form(tree, coeffs, Y, Z, u, Y, Z, u);
}

CostModel::CostModel(const ScenarioTree& tree, const CoefficientSet& coeffs)
    : tree_(tree), coeffs_(coeffs), scheme_(tree, coeffs), zero_terminal_(coeffs.n, 1, tree.steps(), tree.steps()) {
  mean_q_ = level_means(tree, coeffs[Coef::Q_bar]);
  mean_r_ = level_means(tree, coeffs[Coef::R_bar]);
  mean_n_ = level_means(tree, coeffs[Coef::N_bar]);
}

BsdeSolution CostModel::state(const AdaptedProcess& u) const {
  return solve_meanfield_bsde(tree_, coeffs_, scheme_, u, coeffs_.xi);
}

double CostModel::cost(const AdaptedProcess& u) const {
  BsdeSolution s = state(u);
  return evaluate_cost(tree_, coeffs_, s.Y, s.Z, u);
}

AdaptedProcess CostModel::transpose_state(const AdaptedProcess& ybar_in, const AdaptedProcess& zbar_in) const {
  int n = coeffs_.n, m = coeffs_.m, nt = tree_.steps();
  double dt = tree_.dt();
  double half_inv_sqrt = 0.5 / tree_.sqrt_dt();
  AdaptedProcess ybar(n, 1, 0, nt);
  for (int k = 0; k <= nt; ++k)
    for (std::size_t j = 0; j < tree_.width(k); ++j) ybar(k, j) = ybar_in(k, j);
  AdaptedProcess ubar(m, 1, 0, nt - 1);
  for (int k = 0; k < nt; ++k) {
    std::size_t width = tree_.width(k);
    double p = tree_.probability(k);
    Vec mbar = Vec::Zero(n);
    for (std::size_t j = 0; j < width; ++j) mbar += dt * (scheme_.resolvent_abar()(k, j).transpose() * ybar(k, j));
    Vec bbar = scheme_.level_solver(k).transpose().solve(mbar);
    std::vector<Vec> rhsbar(width);
    Vec eubar = Vec::Zero(m), ezbar = Vec::Zero(n);
    for (std::size_t j = 0; j < width; ++j) {
      Vec wbar = ybar(k, j) + p * bbar;
      rhsbar[j] = scheme_.resolvent()(k, j).transpose() * wbar;
      eubar += dt * (coeffs_[Coef::B_bar](k, j).transpose() * rhsbar[j]);
      ezbar += dt * (coeffs_[Coef::C_bar](k, j).transpose() * rhsbar[j]);
    }
    for (std::size_t j = 0; j < width; ++j) {
      ubar(k, j) = dt * (coeffs_[Coef::B](k, j).transpose() * rhsbar[j]) + p * eubar;
      Vec zb = zbar_in(k, j) + dt * (coeffs_[Coef::C](k, j).transpose() * rhsbar[j]) + p * ezbar;
      ybar(k + 1, 2 * j) += 0.5 * rhsbar[j] + half_inv_sqrt * zb;
      ybar(k + 1, 2 * j + 1) += 0.5 * rhsbar[j] - half_inv_sqrt * zb;
    }
  }
  return ubar;
}

AdaptedProcess CostModel::gradient_impl(const AdaptedProcess& u, const AdaptedProcess& terminal) const {
  int n = coeffs_.n, m = coeffs_.m, nt = tree_.steps();
  double dt = tree_.dt();
  BsdeSolution s = solve_meanfield_bsde(tree_, coeffs_, scheme_, u, terminal);
  AdaptedProcess ybar(n, 1, 0, nt), zbar(n, 1, 0, nt - 1), direct(m, 1, 0, nt - 1);
  for (int k = 0; k < nt; ++k) {
    double w = 2.0 * dt * tree_.probability(k);
    Vec ey = expect(tree_, s.Y, k), ez = expect(tree_, s.Z, k), eu = expect(tree_, u, k);
    Vec qy = mean_q_[static_cast<std::size_t>(k)] * ey;
    Vec rz = mean_r_[static_cast<std::size_t>(k)] * ez;
    Vec nu = mean_n_[static_cast<std::size_t>(k)] * eu;
    for (std::size_t j = 0; j < tree_.width(k); ++j) {
      ybar(k, j) = w * (coeffs_[Coef::Q](k, j) * s.Y(k, j) + qy);
      zbar(k, j) = w * (coeffs_[Coef::R](k, j) * s.Z(k, j) + rz);
      direct(k, j) = w * (coeffs_[Coef::N](k, j) * u(k, j) + nu);
    }
  }
  ybar(0, 0) += 2.0 * (coeffs_.G * s.Y(0, 0));
  AdaptedProcess grad = transpose_state(ybar, zbar);
  axpy(tree_, 1.0, direct, grad);
  for (int k = 0; k < nt; ++k) {
    double inv = 1.0 / (dt * tree_.probability(k));
    double* g = grad.level_data(k);
    std::size_t size = tree_.width(k) * grad.stride();
    for (std::size_t i = 0; i < size; ++i) g[i] *= inv;
  }
  return grad;
}

AdaptedProcess CostModel::gradient(const AdaptedProcess& u) const { return gradient_impl(u, coeffs_.xi); }

AdaptedProcess CostModel::hessian_apply(const AdaptedProcess& v) const {
  AdaptedProcess out = gradient_impl(v, zero_terminal_);
  scale(tree_, 0.5, out);
  return out;
}

namespace {

struct DenseQuadratic {
  Mat H;  // Euclidean: J(u) = u^T H u + 2 b^T u + c
  Vec b;
};

DenseQuadratic dense_quadratic(const ScenarioTree& tree, const CoefficientSet& c, const StateMap& map) {
  int n = c.n, m = c.m, nt = tree.steps();
  double dt = tree.dt();
  const Mat& S = map.linear;
  Eigen::Index du = S.cols();
  Eigen::Index yr = map.y_rows();
  Mat TS = Mat::Zero(S.rows(), du);
  Vec Ts = Vec::Zero(S.rows());
  for (int k = 0; k < nt; ++k) {
    double w = dt * tree.probability(k);
    for (std::size_t j = 0; j < tree.width(k); ++j) {
      Eigen::Index ry = map.y.offset(k, j), rz = yr + map.z.offset(k, j);
      Mat wq = w * c[Coef::Q](k, j);
      Mat wr = w * c[Coef::R](k, j);
      TS.middleRows(ry, n) = wq * S.middleRows(ry, n);
      Ts.segment(ry, n) = wq * map.offset.segment(ry, n);
      TS.middleRows(rz, n) = wr * S.middleRows(rz, n);
      Ts.segment(rz, n) = wr * map.offset.segment(rz, n);
    }
  }
  TS.topRows(n) += c.G * S.topRows(n);
  Ts.head(n) += c.G * map.offset.head(n);
  DenseQuadratic out{S.transpose() * TS, S.transpose() * Ts};
  for (int k = 0; k < nt; ++k) {
    double p = tree.probability(k);
    Mat ey = Mat::Zero(n, du), ez = Mat::Zero(n, du);
    Vec ey0 = Vec::Zero(n), ez0 = Vec::Zero(n);
    for (std::size_t j = 0; j < tree.width(k); ++j) {
      ey += p * S.middleRows(map.y.offset(k, j), n);
      ez += p * S.middleRows(yr + map.z.offset(k, j), n);
      ey0 += p * map.offset.segment(map.y.offset(k, j), n);
      ez0 += p * map.offset.segment(yr + map.z.offset(k, j), n);
    }
    Mat qb = expect(tree, c[Coef::Q_bar], k), rb = expect(tree, c[Coef::R_bar], k);
    Mat nb = expect(tree, c[Coef::N_bar], k);
    out.H += dt * (ey.transpose() * qb * ey + ez.transpose() * rb * ez);
    out.b += dt * (ey.transpose() * (qb * ey0) + ez.transpose() * (rb * ez0));
    Eigen::Index base = map.control.offset(k, 0);
    Eigen::Index width = static_cast<Eigen::Index>(tree.width(k));
    for (Eigen::Index a = 0; a < width; ++a) {
      out.H.block(base + a * m, base + a * m, m, m) += dt * p * c[Coef::N](k, static_cast<std::size_t>(a));
      for (Eigen::Index b = 0; b < width; ++b) out.H.block(base + a * m, base + b * m, m, m) += dt * p * p * nb;
    }
  }
  out.H = 0.5 * (out.H + out.H.transpose()).eval();
  return out;
}

Vec weights(const ScenarioTree& tree, const NodeLayout& layout) {
  Vec w(layout.size());
  for (int k = layout.first; k <= layout.last; ++k)
    w.segment(layout.offset(k, 0), static_cast<Eigen::Index>(tree.width(k)) * layout.dim)
        .setConstant(tree.dt() * tree.probability(k));
  return w;
}

}  // namespace

Mat weighted_hessian(const ScenarioTree& tree, const CoefficientSet& coeffs, const StateMap& map) {
  DenseQuadratic q = dense_quadratic(tree, coeffs, map);
  Vec s = weights(tree, map.control).cwiseSqrt().cwiseInverse();
  return 2.0 * s.asDiagonal() * q.H * s.asDiagonal();
}

QpResult solve_qp(const ScenarioTree& tree, const CoefficientSet& coeffs, const QpOptions& options) {
  int m = coeffs.m, nt = tree.steps();
  NodeLayout control{m, 0, nt - 1};
  Eigen::Index du = control.size();
  bool dense = options.method == QpOptions::Method::dense ||
               (options.method == QpOptions::Method::automatic && du <= options.dense_limit);
  CostModel model(tree, coeffs);
  QpResult out;
  AdaptedProcess zero = zero_control(tree, m);
  AdaptedProcess g0 = model.gradient(zero);
  out.gradient_norm_at_zero = weighted_norm(tree, g0);

  if (dense) {
    StateMap map = assemble_state_map(tree, coeffs, std::max<Eigen::Index>(du, 20000));
    DenseQuadratic q = dense_quadratic(tree, coeffs, map);
    Eigen::LLT<Mat> llt(q.H);
    if (llt.info() != Eigen::Success)
      throw Error(ErrorKind::convexity, "discrete cost Hessian is not positive definite; check the weights");
    out.u = unflatten(llt.solve(-q.b), control);
    if (options.compute_spectrum) {
      Vec s = weights(tree, control).cwiseSqrt().cwiseInverse();
      Mat hw = 2.0 * s.asDiagonal() * q.H * s.asDiagonal();
      Eigen::SelfAdjointEigenSolver<Mat> es(hw, Eigen::EigenvaluesOnly);
      out.hessian_min_eigenvalue = es.eigenvalues()(0);
      out.hessian_max_eigenvalue = es.eigenvalues()(du - 1);
      if (*out.hessian_min_eigenvalue < -1e-9)
        throw Error(ErrorKind::convexity, "discrete cost Hessian is indefinite; check the weights");
    }
    out.method = "dense";
    out.iterations = 1;
  } else {
    // Conjugate gradients in the weighted inner product on H x = -b, with
    // the residual r = -(H x + b) = -grad/2 recomputed periodically.
    AdaptedProcess x = options.initial ? *options.initial : zero;
    auto true_residual = [&](const AdaptedProcess& at) {
      AdaptedProcess r = model.gradient(at);
      scale(tree, -0.5, r);
      return r;
    };
    AdaptedProcess r = true_residual(x);
    AdaptedProcess p = r;
    double rr = weighted_dot(tree, r, r);
    double target = options.tolerance * (1.0 + 0.5 * out.gradient_norm_at_zero);
    int it = 0;
    while (std::sqrt(rr) > target) {
      if (it >= options.max_iterations)
        throw Error(ErrorKind::solver, "conjugate gradients did not converge (residual " + std::to_string(std::sqrt(rr)) + ")");
      AdaptedProcess hp = model.hessian_apply(p);
      double php = weighted_dot(tree, p, hp);
      if (!(php > 0.0)) throw Error(ErrorKind::convexity, "discrete cost Hessian is not positive definite");
      double alpha = rr / php;
      axpy(tree, alpha, p, x);
      ++it;
      if (it % 50 == 0) {
        r = true_residual(x);
      } else {
        axpy(tree, -alpha, hp, r);
      }
      double rr_new = weighted_dot(tree, r, r);
      double beta = rr_new / rr;
      rr = rr_new;
      scale(tree, beta, p);
      axpy(tree, 1.0, r, p);
    }
    out.u = std::move(x);
    out.method = "cg";
    out.iterations = it;
  }
  out.state = model.state(out.u);
  out.cost = evaluate_cost(tree, coeffs, out.state.Y, out.state.Z, out.u);
  out.gradient_norm = weighted_norm(tree, model.gradient(out.u));
  return out;
}

StationarityReport stationarity_residual(const ScenarioTree& tree, const CoefficientSet& coeffs,
                                         const AdaptedProcess& Y, const AdaptedProcess& Z, const AdaptedProcess& u) {
  int n = coeffs.n, m = coeffs.m, nt = tree.steps();
  Vec eabar, ecbar, ey, ez;
  Mat qb, rb;
  ForwardDynamics dyn;
  dyn.prepare = [&](int k, const AdaptedProcess& X) {
    eabar = Vec::Zero(n);
    ecbar = Vec::Zero(n);
    for (std::size_t j = 0; j < tree.width(k); ++j) {
      eabar += coeffs[Coef::A_bar](k, j).transpose() * X(k, j);
      ecbar += coeffs[Coef::C_bar](k, j).transpose() * X(k, j);
    }
    eabar *= tree.probability(k);
    ecbar *= tree.probability(k);
    ey = expect(tree, Y, k);
    ez = expect(tree, Z, k);
    qb = expect(tree, coeffs[Coef::Q_bar], k);
    rb = expect(tree, coeffs[Coef::R_bar], k);
  };
  dyn.drift = [&](int k, std::size_t j, const Vec& x) -> Vec {
    return -(coeffs[Coef::A](k, j).transpose() * x + eabar - coeffs[Coef::Q](k, j) * Y(k, j) - qb * ey);
  };
  dyn.diffusion = [&](int k, std::size_t j, const Vec& x) -> Vec {
    return -(coeffs[Coef::C](k, j).transpose() * x + ecbar - coeffs[Coef::R](k, j) * Z(k, j) - rb * ez);
  };
  StationarityReport out;
  out.adjoint = solve_forward_sde(tree, -coeffs.G * Y(0, 0).col(0), dyn).X;
  const AdaptedProcess& X = out.adjoint;
  out.residual = AdaptedProcess(m, 1, 0, nt - 1);
  AdaptedProcess reconstructed(m, 1, 0, nt - 1);
  out.inversion_checked = true;
  out.inversion_margin = std::numeric_limits<double>::infinity();
  Mat identity = Mat::Identity(m, m);
  double weighted = 0.0;
  for (int k = 0; k < nt; ++k) {
    std::size_t width = tree.width(k);
    double p = tree.probability(k);
    Vec ebx = Vec::Zero(m), enbx = Vec::Zero(m);
    Mat eninv = Mat::Zero(m, m);
    std::vector<Mat> ninv(width);
    for (std::size_t j = 0; j < width; ++j) {
      ninv[j] = coeffs[Coef::N](k, j).inverse();
      ebx += coeffs[Coef::B_bar](k, j).transpose() * X(k, j);
      enbx += ninv[j] * (coeffs[Coef::B](k, j).transpose() * X(k, j));
      eninv += ninv[j];
    }
    ebx *= p;
    enbx *= p;
    eninv *= p;
    Mat nb = expect(tree, coeffs[Coef::N_bar], k);
    Vec eu = expect(tree, u, k);
    double level = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      Vec r = coeffs[Coef::N](k, j) * u(k, j) + nb * eu - coeffs[Coef::B](k, j).transpose() * X(k, j) - ebx;
      out.residual(k, j) = r;
      level += r.squaredNorm();
      out.max_abs = std::max(out.max_abs, r.cwiseAbs().maxCoeff());
    }
    out.level_norms.push_back(std::sqrt(p * level));
    weighted += tree.dt() * p * level;

    Mat inversion = identity + eninv * nb;
    Eigen::JacobiSVD<Mat> svd(inversion);
    double smin = svd.singularValues()(m - 1);
    out.inversion_margin = std::min(out.inversion_margin, smin);
    if (!(smin > 1e-12)) {
      out.inversion_checked = false;
      continue;
    }
    Vec eu_rec = inversion.partialPivLu().solve(enbx + eninv * ebx);
    for (std::size_t j = 0; j < width; ++j)
      reconstructed(k, j) = ninv[j] * (coeffs[Coef::B](k, j).transpose() * X(k, j) + ebx - nb * eu_rec);
  }
  out.weighted_norm = std::sqrt(weighted);
  if (out.inversion_checked) {
    axpy(tree, -1.0, u, reconstructed);
    out.reconstruction_discrepancy = weighted_norm(tree, reconstructed);
  }
  return out;
}

GradientCheck gradient_and_convexity_check(const ScenarioTree& tree, const CoefficientSet& coeffs,
                                           const AdaptedProcess& u, const AdaptedProcess& v, double epsilon,
                                           bool with_hessian, Eigen::Index dense_limit) {
  int n = coeffs.n, nt = tree.steps();
  BackwardScheme scheme(tree, coeffs);
  AdaptedProcess zero_terminal(n, 1, nt, nt);
  BsdeSolution s = solve_meanfield_bsde(tree, coeffs, scheme, u, coeffs.xi);
  BsdeSolution var = solve_meanfield_bsde(tree, coeffs, scheme, v, zero_terminal);
  GradientCheck out;
  out.analytic = 2.0 * cost_form(tree, coeffs, s.Y, s.Z, u, var.Y, var.Z, v);
  AdaptedProcess plus = u, minus = u;
  axpy(tree, epsilon, v, plus);
  axpy(tree, -epsilon, v, minus);
  BsdeSolution sp = solve_meanfield_bsde(tree, coeffs, scheme, plus, coeffs.xi);
  BsdeSolution sm = solve_meanfield_bsde(tree, coeffs, scheme, minus, coeffs.xi);
  double jp = evaluate_cost(tree, coeffs, sp.Y, sp.Z, plus);
  double jm = evaluate_cost(tree, coeffs, sm.Y, sm.Z, minus);
  out.finite_difference = (jp - jm) / (2.0 * epsilon);
  double scale_ref = std::max(std::abs(out.analytic), std::abs(out.finite_difference));
  out.relative_error = scale_ref < 1e-14 ? 0.0 : std::abs(out.analytic - out.finite_difference) / scale_ref;
  out.coercivity_bound = 2.0 * coeffs.delta;
  if (with_hessian && NodeLayout{coeffs.m, 0, nt - 1}.size() <= dense_limit) {
    StateMap map = assemble_state_map(tree, coeffs, dense_limit);
    Eigen::SelfAdjointEigenSolver<Mat> es(weighted_hessian(tree, coeffs, map), Eigen::EigenvaluesOnly);
    out.hessian_min_eigenvalue = es.eigenvalues()(0);
  }
  return out;
}

}  // namespace mfbslq
