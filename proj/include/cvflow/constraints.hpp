#pragma once

// Analytic action constraints, the constraint-violation (CV) signal, and the
// exp(-lambda * cv) target measure used to train flows.
//
// Every constraint function is a sum of simple terms minus a bound:
//   g(a, s) = sum_k term_k(a, s) - bound      (feasible when g <= 0)
// with term_k one of
//   constant      coef
//   feature       coef * s[j]
//   linear/square/abs/relu    coef * phi(m * a[i]),  m in {1, s[j], sin(s[j])}
// which covers the catalog families and user-defined configs alike, and keeps
// scalar and differentiable evaluation in one place.

#include "cvflow/autodiff.hpp"
#include "cvflow/random.hpp"

#include "json.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace cvflow {

enum class TermKind { Constant, Feature, Linear, Square, Abs, Relu };
enum class ScaleKind { None, Feature, SinFeature };
enum class Convexity { Convex, Nonconvex };

struct Term {
  TermKind kind = TermKind::Linear;
  int action = -1;
  ScaleKind scale = ScaleKind::None;
  int feature = -1;
  double coef = 1.0;

  static Term constant(double c) { return {TermKind::Constant, -1, ScaleKind::None, -1, c}; }
  static Term feature_term(int j, double c = 1.0) { return {TermKind::Feature, -1, ScaleKind::None, j, c}; }
  static Term of(TermKind k, int i, double c = 1.0) { return {k, i, ScaleKind::None, -1, c}; }
  static Term scaled(TermKind k, int i, ScaleKind sk, int j, double c = 1.0) { return {k, i, sk, j, c}; }
};

struct ConstraintFunction {
  std::vector<Term> terms;
  double bound = 0.0;
};

struct FeatureDistribution {
  enum class Kind { Uniform, Normal } kind = Kind::Uniform;
  double a = 0.0;  // lo or mean
  double b = 0.0;  // hi or stddev

  static FeatureDistribution uniform(double lo, double hi) { return {Kind::Uniform, lo, hi}; }
  static FeatureDistribution normal(double mean, double stddev) { return {Kind::Normal, mean, stddev}; }

  double sample(Rng& rng) const { return kind == Kind::Uniform ? rng.uniform(a, b) : rng.normal(a, b); }
};

class UnknownConstraint : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline double phi(TermKind k, double x) {
  switch (k) {
    case TermKind::Linear:
      return x;
    case TermKind::Square:
      return x * x;
    case TermKind::Abs:
      return std::abs(x);
    case TermKind::Relu:
      return std::max(x, 0.0);
    default:
      return 0.0;
  }
}

inline double term_scale(const Term& t, const double* s) {
  switch (t.scale) {
    case ScaleKind::Feature:
      return s[t.feature];
    case ScaleKind::SinFeature:
      return std::sin(s[t.feature]);
    default:
      return 1.0;
  }
}

}  // namespace detail

class ConstraintSet {
 public:
  ConstraintSet() = default;

  ConstraintSet(std::string id, int action_dim, int feature_dim, Convexity convexity,
                std::vector<ConstraintFunction> inequalities, std::vector<ConstraintFunction> equalities = {},
                std::vector<FeatureDistribution> features = {})
      : id_(std::move(id)),
        action_dim_(action_dim),
        feature_dim_(feature_dim),
        convexity_(convexity),
        inequalities_(std::move(inequalities)),
        equalities_(std::move(equalities)),
        features_(std::move(features)) {
    validate();
  }

  const std::string& id() const { return id_; }
  int action_dim() const { return action_dim_; }
  int feature_dim() const { return feature_dim_; }
  Convexity convexity() const { return convexity_; }
  const std::vector<ConstraintFunction>& inequalities() const { return inequalities_; }
  const std::vector<ConstraintFunction>& equalities() const { return equalities_; }
  const std::vector<FeatureDistribution>& feature_distribution() const { return features_; }

  static double evaluate(const ConstraintFunction& f, const double* a, const double* s) {
    double v = -f.bound;
    for (const Term& t : f.terms) {
      switch (t.kind) {
        case TermKind::Constant:
          v += t.coef;
          break;
        case TermKind::Feature:
          v += t.coef * s[t.feature];
          break;
        default:
          v += t.coef * detail::phi(t.kind, detail::term_scale(t, s) * a[t.action]);
      }
    }
    return v;
  }

  double inequality(std::size_t i, const Vector& a, const Vector& s) const {
    check_dims(a, s);
    return evaluate(inequalities_.at(i), a.data(), s.data());
  }

  double equality(std::size_t j, const Vector& a, const Vector& s) const {
    check_dims(a, s);
    return evaluate(equalities_.at(j), a.data(), s.data());
  }

  // sum_i max(g_i, 0) + sum_j max(|h_j| - eps, 0)
  double cv(const Vector& a, const Vector& s, double eps = 1e-3) const {
    check_dims(a, s);
    return cv_raw(a.data(), s.data(), eps);
  }

  double cv_raw(const double* a, const double* s, double eps) const {
    double total = 0.0;
    for (const ConstraintFunction& g : inequalities_) total += std::max(evaluate(g, a, s), 0.0);
    for (const ConstraintFunction& h : equalities_) total += std::max(std::abs(evaluate(h, a, s)) - eps, 0.0);
    return total;
  }

  // Rows of `actions` paired with rows of `states` (states may have zero columns).
  Vector cv_batch(const Matrix& actions, const Matrix& states, double eps = 1e-3) const {
    check_batch(actions.rows(), actions.cols(), states);
    Vector out(actions.rows());
    for (Eigen::Index r = 0; r < actions.rows(); ++r) {
      out(r) = cv_raw(actions.row(r).data(), feature_dim_ > 0 ? states.row(r).data() : nullptr, eps);
    }
    return out;
  }

  // Differentiable CV, one row per batch entry: (B x 1).
  ad::Value cv(ad::Tape& tape, const ad::Value& actions, const Matrix& states, double eps = 1e-3) const {
    check_batch(actions.rows(), actions.cols(), states);
    const Eigen::Index batch = actions.rows();
    std::optional<ad::Value> total;
    auto accumulate = [&](const ad::Value& v) { total = total ? ad::add(*total, v) : v; };
    for (const ConstraintFunction& g : inequalities_) accumulate(ad::relu(function_value(tape, g, actions, states)));
    for (const ConstraintFunction& h : equalities_) {
      accumulate(ad::relu(ad::add_scalar(ad::abs(function_value(tape, h, actions, states)), -eps)));
    }
    if (!total) return tape.constant(Matrix::Zero(batch, 1));
    return *total;
  }

  Matrix sample_states(Eigen::Index n, Rng& rng) const {
    Matrix s(n, feature_dim_);
    for (Eigen::Index r = 0; r < n; ++r) {
      for (int j = 0; j < feature_dim_; ++j) s(r, j) = features_[static_cast<std::size_t>(j)].sample(rng);
    }
    return s;
  }

  Vector sample_state(Rng& rng) const { return sample_states(1, rng).row(0).transpose(); }

 private:
  void validate() const {
    if (action_dim_ < 1) throw std::invalid_argument("constraint '" + id_ + "': action_dim must be >= 1");
    if (!features_.empty() && static_cast<int>(features_.size()) != feature_dim_) {
      throw std::invalid_argument("constraint '" + id_ + "': feature distribution size differs from feature_dim");
    }
    auto check = [&](const ConstraintFunction& f) {
      for (const Term& t : f.terms) {
        const bool uses_action = t.kind != TermKind::Constant && t.kind != TermKind::Feature;
        if (uses_action && (t.action < 0 || t.action >= action_dim_)) {
          throw std::invalid_argument("constraint '" + id_ + "': term action index out of range");
        }
        const bool uses_feature = t.kind == TermKind::Feature || (uses_action && t.scale != ScaleKind::None);
        if (uses_feature && (t.feature < 0 || t.feature >= feature_dim_)) {
          throw std::invalid_argument("constraint '" + id_ + "': term feature index out of range");
        }
      }
    };
    for (const auto& f : inequalities_) check(f);
    for (const auto& f : equalities_) check(f);
  }

  void check_dims(const Vector& a, const Vector& s) const {
    if (a.size() != action_dim_ || s.size() < feature_dim_) {
      throw ShapeError("constraint '" + id_ + "': dimension mismatch (action " + std::to_string(a.size()) +
                       ", features " + std::to_string(s.size()) + "; expected " + std::to_string(action_dim_) +
                       ", " + std::to_string(feature_dim_) + ")");
    }
  }

  void check_batch(Eigen::Index rows, Eigen::Index cols, const Matrix& states) const {
    if (cols != action_dim_ || (feature_dim_ > 0 && (states.rows() != rows || states.cols() < feature_dim_))) {
      throw ShapeError("constraint '" + id_ + "': batch dimension mismatch, actions (" + std::to_string(rows) + "x" +
                       std::to_string(cols) + ") states " + shape_str(states));
    }
  }

  ad::Value function_value(ad::Tape& tape, const ConstraintFunction& f, const ad::Value& actions,
                           const Matrix& states) const {
    const Eigen::Index batch = actions.rows();
    Matrix fixed = Matrix::Constant(batch, 1, -f.bound);
    std::optional<ad::Value> acc;
    for (const Term& t : f.terms) {
      if (t.kind == TermKind::Constant) {
        fixed.array() += t.coef;
        continue;
      }
      if (t.kind == TermKind::Feature) {
        fixed += t.coef * states.col(t.feature);
        continue;
      }
      ad::Value x = ad::column(actions, t.action);
      if (t.scale != ScaleKind::None) {
        Matrix m = states.col(t.feature);
        if (t.scale == ScaleKind::SinFeature) m = m.array().sin();
        x = ad::mul(x, tape.constant(std::move(m)));
      }
      switch (t.kind) {
        case TermKind::Square:
          x = ad::square(x);
          break;
        case TermKind::Abs:
          x = ad::abs(x);
          break;
        case TermKind::Relu:
          x = ad::relu(x);
          break;
        default:
          break;
      }
      if (t.coef != 1.0) x = ad::scale(x, t.coef);
      acc = acc ? ad::add(*acc, x) : x;
    }
    ad::Value c = tape.constant(std::move(fixed));
    return acc ? ad::add(*acc, c) : c;
  }

  std::string id_;
  int action_dim_ = 0;
  int feature_dim_ = 0;
  Convexity convexity_ = Convexity::Convex;
  std::vector<ConstraintFunction> inequalities_;
  std::vector<ConstraintFunction> equalities_;
  std::vector<FeatureDistribution> features_;
};

inline bool is_feasible(const ConstraintSet& cs, const Vector& a, const Vector& s, double tol = 1e-6,
                        double eps = 1e-3) {
  return cs.cv(a, s, eps) <= tol;
}

// Rate and equality margin of the target measure p~(a|s) = exp(-lambda * cv).
struct TargetDensity {
  double lambda = 1000.0;
  double epsilon = 1e-3;

  double log_unnormalized(const ConstraintSet& cs, const Vector& a, const Vector& s) const {
    return -lambda * cs.cv(a, s, epsilon);
  }

  double unnormalized(const ConstraintSet& cs, const Vector& a, const Vector& s) const {
    return std::exp(log_unnormalized(cs, a, s));
  }
};

namespace catalog {

inline ConstraintFunction norm_squared(int d, double bound, double coef = 1.0) {
  ConstraintFunction f;
  for (int i = 0; i < d; ++i) f.terms.push_back(Term::of(TermKind::Square, i, coef));
  f.bound = bound;
  return f;
}

// lo <= sum a_i^2 <= hi
inline ConstraintSet shell(std::string id, int d, double lo, double hi) {
  return ConstraintSet(std::move(id), d, 0, Convexity::Nonconvex, {norm_squared(d, hi), norm_squared(d, -lo, -1.0)});
}

inline ConstraintSet r_l2() {
  return ConstraintSet("R+L2", 2, 0, Convexity::Convex, {norm_squared(2, 0.05)});
}

inline ConstraintSet r_d() { return shell("R+D", 2, 0.04, 0.05); }

inline ConstraintSet h_d(int d = 3) { return shell("H+D(" + std::to_string(d) + ")", d, 1.4, 1.5); }

// sum_i max(w_i a_i, 0) <= 10, features w.
inline ConstraintSet m(int d = 3) {
  ConstraintFunction f;
  for (int i = 0; i < d; ++i) f.terms.push_back(Term::scaled(TermKind::Relu, i, ScaleKind::Feature, i));
  f.bound = 10.0;
  return ConstraintSet("M(" + std::to_string(d) + ")", d, d, Convexity::Convex, {f},
                       {}, std::vector<FeatureDistribution>(static_cast<std::size_t>(d), FeatureDistribution::uniform(-10, 10)));
}

// sum_i |w_i a_i| <= 10 and sum_i a_i^2 sin^2(theta_i) <= 0.1, features (w, theta).
inline ConstraintSet o_s(int d = 3) {
  ConstraintFunction o, s;
  for (int i = 0; i < d; ++i) {
    o.terms.push_back(Term::scaled(TermKind::Abs, i, ScaleKind::Feature, i));
    s.terms.push_back(Term::scaled(TermKind::Square, i, ScaleKind::SinFeature, d + i));
  }
  o.bound = 10.0;
  s.bound = 0.1;
  std::vector<FeatureDistribution> fd(static_cast<std::size_t>(d), FeatureDistribution::uniform(-10, 10));
  fd.resize(static_cast<std::size_t>(2 * d), FeatureDistribution::uniform(-std::numbers::pi, std::numbers::pi));
  return ConstraintSet("O+S(" + std::to_string(d) + ")", d, 2 * d, Convexity::Convex, {o, s}, {}, fd);
}

// sum_i |w_i a_i| <= 20, w_i ~ N(0, 15).
inline ConstraintSet hc_o(int d = 6) {
  ConstraintFunction o;
  for (int i = 0; i < d; ++i) o.terms.push_back(Term::scaled(TermKind::Abs, i, ScaleKind::Feature, i));
  o.bound = 20.0;
  return ConstraintSet("HC+O(" + std::to_string(d) + ")", d, d, Convexity::Convex, {o}, {},
                       std::vector<FeatureDistribution>(static_cast<std::size_t>(d), FeatureDistribution::normal(0, 15)));
}

// k linearized state-wise constraints c_i + w_i . a + margin <= 0.
// Feature layout: [c_1..c_k, w_11..w_1d, ..., w_k1..w_kd].
inline ConstraintSet linear_statewise(int k, int d, double margin = 0.0) {
  std::vector<ConstraintFunction> ineq;
  for (int i = 0; i < k; ++i) {
    ConstraintFunction f;
    f.terms.push_back(Term::feature_term(i));
    for (int j = 0; j < d; ++j) f.terms.push_back(Term::scaled(TermKind::Linear, j, ScaleKind::Feature, k + i * d + j));
    f.bound = -margin;
    ineq.push_back(f);
  }
  std::vector<FeatureDistribution> fd(static_cast<std::size_t>(k), FeatureDistribution::uniform(-1, 0));
  fd.resize(static_cast<std::size_t>(k + k * d), FeatureDistribution::uniform(-1, 1));
  return ConstraintSet("linear-statewise(" + std::to_string(k) + "," + std::to_string(d) + ")", d, k + k * d,
                       Convexity::Convex, ineq, {}, fd);
}

// C = A: no constraint beyond the unconstrained box.
inline ConstraintSet box(int d = 2) {
  return ConstraintSet("box(" + std::to_string(d) + ")", d, 0, Convexity::Convex, {});
}

namespace detail {

inline std::vector<int> parse_args(const std::string& id, const std::string& inner) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos <= inner.size()) {
    std::size_t comma = inner.find(',', pos);
    std::string tok = inner.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    try {
      std::size_t used = 0;
      int v = std::stoi(tok, &used);
      if (used != tok.size() || v < 1) throw std::invalid_argument(tok);
      out.push_back(v);
    } catch (const std::exception&) {
      throw UnknownConstraint("constraint id '" + id + "': bad dimension argument '" + tok + "'");
    }
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

}  // namespace detail

inline ConstraintSet from_json(const nlohmann::json& j);

// Resolves ids such as "R+L2", "M(3)", "HC+O(6)", "linear-statewise(2,1)",
// or "file:<path>" for a user-defined JSON constraint config.
inline ConstraintSet lookup(const std::string& id) {
  if (id.rfind("file:", 0) == 0) {
    std::ifstream in(id.substr(5));
    if (!in) throw UnknownConstraint("constraint file not readable: " + id.substr(5));
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw UnknownConstraint("constraint file " + id.substr(5) + ": " + e.what());
    }
    return from_json(j);
  }
  std::string name = id;
  std::vector<int> args;
  if (auto open = id.find('('); open != std::string::npos) {
    if (id.back() != ')') throw UnknownConstraint("unknown constraint id '" + id + "'");
    name = id.substr(0, open);
    args = detail::parse_args(id, id.substr(open + 1, id.size() - open - 2));
  }
  auto arg = [&](std::size_t i, int dflt) { return i < args.size() ? args[i] : dflt; };
  auto max_args = [&](std::size_t n) {
    if (args.size() > n) throw UnknownConstraint("constraint id '" + id + "': too many arguments");
  };
  if (name == "R+L2") {
    max_args(0);
    return r_l2();
  }
  if (name == "R+D") {
    max_args(0);
    return r_d();
  }
  if (name == "H+D") {
    max_args(1);
    return h_d(arg(0, 3));
  }
  if (name == "M" || name == "H+M" || name == "W+M") {
    max_args(1);
    return m(arg(0, name == "W+M" ? 6 : 3));
  }
  if (name == "O+S" || name == "H+O+S" || name == "W+O+S") {
    max_args(1);
    return o_s(arg(0, name == "W+O+S" ? 6 : 3));
  }
  if (name == "HC+O") {
    max_args(1);
    return hc_o(arg(0, 6));
  }
  if (name == "linear-statewise") {
    max_args(2);
    return linear_statewise(arg(0, 2), arg(1, 1));
  }
  if (name == "box") {
    max_args(1);
    return box(arg(0, 2));
  }
  throw UnknownConstraint("unknown constraint id '" + id + "'");
}

inline TermKind term_kind_from(const std::string& s) {
  if (s == "constant") return TermKind::Constant;
  if (s == "feature") return TermKind::Feature;
  if (s == "linear") return TermKind::Linear;
  if (s == "square") return TermKind::Square;
  if (s == "abs") return TermKind::Abs;
  if (s == "max" || s == "relu") return TermKind::Relu;
  throw UnknownConstraint("unknown term kind '" + s + "'");
}

// {"id", "action_dim", "feature_dim", "convexity": "convex"|"nonconvex",
//  "inequalities"/"equalities": [{"bound", "terms": [{"kind", "action",
//  "coef", "scale": "none"|"feature"|"sin-feature", "feature"}]}],
//  "features": [{"dist": "uniform"|"normal", "a", "b"}]}
inline ConstraintSet from_json(const nlohmann::json& j) {
  try {
    auto functions = [](const nlohmann::json& arr) {
      std::vector<ConstraintFunction> fs;
      for (const auto& jf : arr) {
        ConstraintFunction f;
        f.bound = jf.value("bound", 0.0);
        for (const auto& jt : jf.at("terms")) {
          Term t;
          t.kind = term_kind_from(jt.at("kind").get<std::string>());
          t.action = jt.value("action", -1);
          t.coef = jt.value("coef", 1.0);
          t.feature = jt.value("feature", -1);
          const std::string sc = jt.value("scale", std::string("none"));
          if (sc == "none") {
            t.scale = ScaleKind::None;
          } else if (sc == "feature") {
            t.scale = ScaleKind::Feature;
          } else if (sc == "sin-feature") {
            t.scale = ScaleKind::SinFeature;
          } else {
            throw UnknownConstraint("unknown term scale '" + sc + "'");
          }
          f.terms.push_back(t);
        }
        fs.push_back(std::move(f));
      }
      return fs;
    };
    std::vector<FeatureDistribution> fd;
    for (const auto& jd : j.value("features", nlohmann::json::array())) {
      const std::string kind = jd.at("dist").get<std::string>();
      if (kind == "uniform") {
        fd.push_back(FeatureDistribution::uniform(jd.at("a").get<double>(), jd.at("b").get<double>()));
      } else if (kind == "normal") {
        fd.push_back(FeatureDistribution::normal(jd.at("a").get<double>(), jd.at("b").get<double>()));
      } else {
        throw UnknownConstraint("unknown feature distribution '" + kind + "'");
      }
    }
    const std::string conv = j.value("convexity", std::string("nonconvex"));
    if (conv != "convex" && conv != "nonconvex") throw UnknownConstraint("convexity must be convex|nonconvex");
    return ConstraintSet(j.value("id", std::string("user")), j.at("action_dim").get<int>(), j.value("feature_dim", 0),
                         conv == "convex" ? Convexity::Convex : Convexity::Nonconvex,
                         functions(j.value("inequalities", nlohmann::json::array())),
                         functions(j.value("equalities", nlohmann::json::array())), fd);
  } catch (const nlohmann::json::exception& e) {
    throw UnknownConstraint(std::string("constraint config: ") + e.what());
  }
}

}  // namespace catalog
}  // namespace cvflow
