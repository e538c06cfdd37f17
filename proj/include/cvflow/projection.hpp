#pragma once

// Nearest feasible action argmin_{b in C(s) ∩ A} |b - a|^2.
//
// Each constraint is first evaluated at the state and matched against a small
// set of shapes with exact projections (ball, outside-of-ball, halfspace,
// diagonal ellipsoid, weighted L1 ball, positive-part sum). Then:
//   feasible input         returned unchanged, 0 iterations
//   one convex shape       closed form (if the result stays in A)
//   ball + outside-ball    closed-form radial projection onto the shell
//   several convex shapes  Dykstra over the shapes and the box A
//   anything else          penalty gradient descent on |b - a|^2 + rho cv(b)

#include "cvflow/autodiff.hpp"
#include "cvflow/constraints.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace cvflow {

enum class ProjectionMethod { ClosedForm, Dykstra, PenaltyGd };

inline std::string to_string(ProjectionMethod m) {
  switch (m) {
    case ProjectionMethod::ClosedForm:
      return "closed-form";
    case ProjectionMethod::Dykstra:
      return "dykstra";
    default:
      return "penalty-gd";
  }
}

struct ProjectionResult {
  Vector action;
  int iterations = 0;
  double residual_cv = 0.0;
  ProjectionMethod method = ProjectionMethod::ClosedForm;
};

struct ProjectionOptions {
  double tol = 1e-6;  // feasibility margin on cv
  double eps = 1e-3;  // equality margin
  double dykstra_tol = 1e-8;
  int max_sweeps = 500;
  double rho_start = 10.0;
  double rho_max = 1e5;
  double rho_factor = 10.0;
  int steps_per_rho = 200;
};

namespace proj {

// One convex or reverse-convex piece of C(s), already evaluated at s.
struct Shape {
  enum class Kind { Ball, OutsideBall, Halfspace, Ellipsoid, WeightedL1, PositivePart } kind;
  Vector w;  // per-coordinate weights (normal for halfspaces)
  double b = 0.0;

  bool convex() const { return kind != Kind::OutsideBall; }
};

// Matches g(a, s) <= 0 against the known shapes; nullopt when it is none of them.
inline std::optional<Shape> classify(const ConstraintFunction& f, const Vector& s, int d) {
  double rhs = f.bound;
  std::optional<TermKind> kind;
  Vector w = Vector::Zero(d);
  std::vector<bool> seen(static_cast<std::size_t>(d), false);
  for (const Term& t : f.terms) {
    if (t.kind == TermKind::Constant) {
      rhs -= t.coef;
      continue;
    }
    if (t.kind == TermKind::Feature) {
      rhs -= t.coef * s(t.feature);
      continue;
    }
    if (kind && *kind != t.kind) return std::nullopt;
    kind = t.kind;
    const double m = detail::term_scale(t, s.data());
    const auto i = static_cast<std::size_t>(t.action);
    switch (t.kind) {
      case TermKind::Linear:
        w(t.action) += t.coef * m;
        break;
      case TermKind::Square:
        w(t.action) += t.coef * m * m;
        break;
      case TermKind::Abs:
        if (t.coef < 0) return std::nullopt;
        w(t.action) += t.coef * std::abs(m);
        break;
      case TermKind::Relu:
        // Two relu terms on one coordinate do not combine into one relu.
        if (t.coef < 0 || seen[i]) return std::nullopt;
        w(t.action) = t.coef * m;
        break;
      default:
        return std::nullopt;
    }
    seen[i] = true;
  }
  if (!kind) return std::nullopt;  // constant constraint: nothing to project
  switch (*kind) {
    case TermKind::Linear:
      return Shape{Shape::Kind::Halfspace, w, rhs};
    case TermKind::Abs:
      return Shape{Shape::Kind::WeightedL1, w, rhs};
    case TermKind::Relu:
      return Shape{Shape::Kind::PositivePart, w, rhs};
    default:
      break;
  }
  // Square terms: sum w_i a_i^2 <= rhs.
  if ((w.array() >= 0).all()) {
    const bool isotropic = (w.array() == w(0)).all() && w(0) > 0;
    if (isotropic) {
      Vector r = Vector::Constant(1, rhs / w(0));
      return Shape{Shape::Kind::Ball, r, 0.0};
    }
    return Shape{Shape::Kind::Ellipsoid, w, rhs};
  }
  if ((w.array() < 0).all() && (w.array() == w(0)).all()) {
    // -c |a|^2 <= rhs  <=>  |a|^2 >= -rhs / c
    Vector r = Vector::Constant(1, rhs / w(0));
    return Shape{Shape::Kind::OutsideBall, r, 0.0};
  }
  return std::nullopt;
}

// Smallest mu in [0, hi] with g(mu) <= 0 for a non-increasing g.
template <class F>
double bisect(F g, double hi) {
  double lo = 0.0;
  while (g(hi) > 0 && hi < 1e300) hi *= 2;
  for (int it = 0; it < 200 && hi - lo > 1e-16 * std::max(1.0, hi); ++it) {
    const double mid = 0.5 * (lo + hi);
    (g(mid) > 0 ? lo : hi) = mid;
  }
  return hi;
}

inline Vector project_shape(const Shape& sh, const Vector& x) {
  using K = Shape::Kind;
  switch (sh.kind) {
    case K::Ball: {
      const double r2 = sh.w(0);
      if (r2 < 0) return x;  // empty set
      const double n = x.norm();
      if (n * n <= r2) return x;
      return x * (std::sqrt(r2) / n);
    }
    case K::OutsideBall: {
      const double r2 = sh.w(0);
      const double n = x.norm();
      if (r2 <= 0 || n * n >= r2) return x;
      if (n == 0.0) {
        Vector e = Vector::Zero(x.size());
        e(0) = std::sqrt(r2);  // deterministic tie-break along +e1
        return e;
      }
      return x * (std::sqrt(r2) / n);
    }
    case K::Halfspace: {
      const double viol = sh.w.dot(x) - sh.b;
      const double nn = sh.w.squaredNorm();
      if (viol <= 0 || nn == 0.0) return x;
      return x - (viol / nn) * sh.w;
    }
    case K::Ellipsoid: {
      auto value = [&](double mu) {
        return (sh.w.array() * x.array().square() / (1.0 + mu * sh.w.array()).square()).sum() - sh.b;
      };
      if (value(0.0) <= 0 || sh.b < 0) return x;
      const double mu = bisect(value, 1.0);
      return (x.array() / (1.0 + mu * sh.w.array())).matrix();
    }
    case K::WeightedL1: {
      auto shrink = [&](double mu) {
        return (x.array().sign() * (x.array().abs() - mu * sh.w.array()).max(0.0)).matrix().eval();
      };
      auto value = [&](double mu) { return (sh.w.array() * shrink(mu).array().abs()).sum() - sh.b; };
      if (value(0.0) <= 0 || sh.b < 0) return x;
      return shrink(bisect(value, 1.0));
    }
    case K::PositivePart: {
      // Only coordinates with w_i x_i > 0 contribute; they shrink toward 0.
      auto shrink = [&](double mu) {
        Vector y = x;
        for (Eigen::Index i = 0; i < x.size(); ++i) {
          if (sh.w(i) * x(i) > 0) y(i) = (x(i) > 0 ? 1.0 : -1.0) * std::max(std::abs(x(i)) - mu * std::abs(sh.w(i)), 0.0);
        }
        return y;
      };
      auto value = [&](double mu) { return (sh.w.array() * shrink(mu).array()).max(0.0).sum() - sh.b; };
      if (value(0.0) <= 0 || sh.b < 0) return x;
      return shrink(bisect(value, 1.0));
    }
  }
  return x;
}

inline Vector clamp_box(const Vector& x) { return x.cwiseMax(-1.0).cwiseMin(1.0); }

inline bool in_box(const Vector& x, double tol = 1e-12) { return (x.array().abs() <= 1.0 + tol).all(); }

// Dykstra's alternating projections onto the intersection of convex shapes
// and the box A. Returns the iterate and the number of sweeps.
inline std::pair<Vector, int> dykstra(const std::vector<Shape>& shapes, const Vector& a, const ProjectionOptions& o) {
  const std::size_t k = shapes.size() + 1;
  std::vector<Vector> incr(k, Vector::Zero(a.size()));
  Vector x = a;
  int sweeps = 0;
  while (sweeps < o.max_sweeps) {
    ++sweeps;
    const Vector prev = x;
    for (std::size_t i = 0; i < k; ++i) {
      const Vector y = x + incr[i];
      const Vector p = i < shapes.size() ? project_shape(shapes[i], y) : clamp_box(y);
      incr[i] = y - p;
      x = p;
    }
    if ((x - prev).norm() < o.dykstra_tol) break;
  }
  return {x, sweeps};
}

// Penalty method with projected gradient steps inside A and Armijo
// backtracking; rho grows by rho_factor every steps_per_rho steps.
inline ProjectionResult penalty_gd(const ConstraintSet& cs, const Vector& a, const Vector& s,
                                   const ProjectionOptions& o) {
  const Matrix state = cs.feature_dim() > 0 ? row_matrix(s) : Matrix::Zero(1, 0);
  auto objective = [&](const Vector& x, double rho, Vector* grad) {
    ad::Tape tape;
    ad::Value v = tape.variable(row_matrix(x));
    ad::Value diff = ad::sub(v, tape.constant(row_matrix(a)));
    ad::Value f = ad::add(ad::sum(ad::square(diff)), ad::scale(ad::sum(cs.cv(tape, v, state, o.eps)), rho));
    if (grad) {
      tape.backward(f);
      *grad = v.grad().row(0).transpose();
    }
    return f.item();
  };

  Vector x = clamp_box(a);
  Vector best = x;
  double best_cv = cs.cv(x, s, o.eps);
  int iterations = 0;
  double step = 0.1;
  for (double rho = o.rho_start; rho <= o.rho_max * (1 + 1e-12); rho *= o.rho_factor) {
    step = std::min(0.5, step * 10);
    for (int k = 0; k < o.steps_per_rho; ++k) {
      ++iterations;
      Vector g;
      const double f0 = objective(x, rho, &g);
      if (g.norm() < 1e-14) break;
      Vector next;
      bool accepted = false;
      for (int bt = 0; bt < 60; ++bt) {
        next = clamp_box(x - step * g);
        if (objective(next, rho, nullptr) <= f0 - 1e-4 * g.dot(x - next)) {
          accepted = true;
          break;
        }
        step *= 0.5;
      }
      if (!accepted) break;
      x = next;
      step = std::min(1.0, step * 2);
      const double c = cs.cv(x, s, o.eps);
      if (c < best_cv || (c <= o.tol && best_cv <= o.tol && (x - a).norm() < (best - a).norm())) {
        best = x;
        best_cv = c;
      }
    }
  }
  return {best, iterations, best_cv, ProjectionMethod::PenaltyGd};
}

}  // namespace proj

inline bool feasible(const Vector& a, const Vector& s, const ConstraintSet& cs, double tol = 1e-6, double eps = 1e-3) {
  return cs.cv(a, s, eps) <= tol;
}

inline ProjectionResult project(const Vector& a, const Vector& s, const ConstraintSet& cs,
                                const ProjectionOptions& o = {}) {
  if (a.size() != cs.action_dim()) {
    throw ShapeError("project: action has " + std::to_string(a.size()) + " entries, constraint " + cs.id() +
                     " expects " + std::to_string(cs.action_dim()));
  }
  const Vector state = cs.feature_dim() > 0 ? s : Vector();

  std::vector<proj::Shape> shapes;
  bool recognized = cs.equalities().empty();
  for (const ConstraintFunction& g : cs.inequalities()) {
    if (!recognized) break;
    if (auto sh = proj::classify(g, state, cs.action_dim())) {
      shapes.push_back(*sh);
    } else {
      recognized = std::all_of(g.terms.begin(), g.terms.end(), [](const Term& t) {
        return t.kind == TermKind::Constant || t.kind == TermKind::Feature;
      });
    }
  }
  const bool all_convex = std::all_of(shapes.begin(), shapes.end(), [](const proj::Shape& sh) { return sh.convex(); });
  using K = proj::Shape::Kind;
  const bool is_shell = shapes.size() == 2 && ((shapes[0].kind == K::Ball && shapes[1].kind == K::OutsideBall) ||
                                               (shapes[0].kind == K::OutsideBall && shapes[1].kind == K::Ball));

  ProjectionMethod method = ProjectionMethod::PenaltyGd;
  if (recognized && (all_convex && shapes.size() <= 1)) method = ProjectionMethod::ClosedForm;
  if (recognized && all_convex && shapes.size() > 1) method = ProjectionMethod::Dykstra;
  if (recognized && is_shell) method = ProjectionMethod::ClosedForm;

  const double cv0 = cs.cv(a, state, o.eps);
  if (cv0 <= o.tol) return {a, 0, cv0, method};

  ProjectionResult res;
  res.method = method;
  if (method == ProjectionMethod::ClosedForm) {
    Vector x = a;
    if (is_shell) {
      const proj::Shape& ball = shapes[0].kind == K::Ball ? shapes[0] : shapes[1];
      const proj::Shape& hole = shapes[0].kind == K::Ball ? shapes[1] : shapes[0];
      x = proj::project_shape(hole, proj::project_shape(ball, a));
    } else if (!shapes.empty()) {
      x = proj::project_shape(shapes[0], a);
    }
    if (!is_shell && !proj::in_box(x)) {
      // The single shape's projection left A: intersect with the box instead.
      method = ProjectionMethod::Dykstra;
    } else {
      res.action = proj::in_box(x) ? x : proj::clamp_box(x);
      res.iterations = 1;
    }
  }
  if (method == ProjectionMethod::Dykstra) {
    auto [x, sweeps] = proj::dykstra(shapes, a, o);
    res.action = x;
    res.iterations = sweeps;
    res.method = method;
  }
  if (method == ProjectionMethod::PenaltyGd) return proj::penalty_gd(cs, a, state, o);
  res.residual_cv = cs.cv(res.action, state, o.eps);
  return res;
}

}  // namespace cvflow
