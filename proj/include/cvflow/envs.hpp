#pragma once

// Toy constrained control tasks with known dynamics.
//
//   ball1d / ball3d  state (pos, target), pos' = pos + 0.2 a, safe region
//                    [0, 1]^k, per-state costs c = (pos_i - 1, -pos_i),
//                    reward -|pos - target|, episode ends on violation.
//   pointmass2d      state (p, v, goal), v' = 0.9 v + a, p' = p + 0.1 v',
//                    reward -|p - goal| - 0.01 |a|^2, action constraint
//                    from the catalog (R+L2 or R+D).

#include "cvflow/autodiff.hpp"
#include "cvflow/constraints.hpp"
#include "cvflow/csv.hpp"
#include "cvflow/random.hpp"

#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace cvflow {

struct StepResult {
  Vector state;
  double reward = 0.0;
  bool done = false;      // episode over (terminal or horizon)
  bool terminal = false;  // true termination; bootstrapping stops here
  double violation = 0.0;
};

class UnknownEnvironment : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Environment {
 public:
  virtual ~Environment() = default;

  virtual std::string id() const = 0;
  virtual int state_dim() const = 0;
  virtual int action_dim() const = 0;
  virtual int horizon() const = 0;
  virtual std::unique_ptr<Environment> clone() const = 0;

  // Draws from the initial-state distribution.
  virtual Vector sample_state(Rng& rng) const = 0;

  // Per-state costs c_i(s) <= 0 for state-wise tasks; empty otherwise.
  virtual int num_costs() const { return 0; }
  virtual Vector costs(const Vector& /*state*/) const { return Vector(); }

  // Action constraint C(s) for action-constrained tasks; null otherwise.
  virtual const ConstraintSet* action_constraint() const { return nullptr; }

  bool terminate_on_violation = false;

  Vector reset(Rng& rng) {
    state_ = sample_state(rng);
    t_ = 0;
    return state_;
  }

  const Vector& state() const { return state_; }
  int time() const { return t_; }

  StepResult step(const Vector& action) {
    if (state_.size() != state_dim()) throw std::logic_error(id() + ": step before reset");
    if (action.size() != action_dim()) {
      throw ShapeError(id() + ": action has " + std::to_string(action.size()) + " entries, expected " +
                       std::to_string(action_dim()));
    }
    if (!action.allFinite() || (action.array().abs() > 1.0 + 1e-12).any()) {
      throw DomainError(id() + ": action outside A = [-1, 1]^" + std::to_string(action_dim()));
    }
    StepResult r;
    r.state = dynamics(state_, action);
    r.reward = reward(state_, action, r.state);
    r.violation = violation(state_, action, r.state);
    r.terminal = terminate_on_violation && r.violation > 0.0;
    ++t_;
    r.done = r.terminal || t_ >= horizon();
    state_ = r.state;
    return r;
  }

  // Violation caused by executing `action` in `state`: positive part of the
  // next-state costs for state-wise tasks, cv(a, s) for action constraints.
  double violation(const Vector& state, const Vector& action, const Vector& next) const {
    if (num_costs() > 0) return costs(next).cwiseMax(0.0).sum();
    if (const ConstraintSet* cs = action_constraint()) {
      const double v = cs->cv(action, constraint_features(state));
      return v > 1e-6 ? v : 0.0;
    }
    return 0.0;
  }

  // Conditioning features of the action constraint (empty for the catalog
  // families used here).
  virtual Vector constraint_features(const Vector& /*state*/) const { return Vector(); }

  virtual Vector dynamics(const Vector& state, const Vector& action) const = 0;
  virtual double reward(const Vector& state, const Vector& action, const Vector& next) const = 0;

 protected:
  Vector state_;
  int t_ = 0;
};

class BallEnv : public Environment {
 public:
  static constexpr double kGain = 0.2;

  explicit BallEnv(int dims, int horizon = 50) : k_(dims), horizon_(horizon) { terminate_on_violation = true; }

  std::string id() const override { return k_ == 1 ? "ball1d" : "ball" + std::to_string(k_) + "d"; }
  int state_dim() const override { return 2 * k_; }
  int action_dim() const override { return k_; }
  int horizon() const override { return horizon_; }
  std::unique_ptr<Environment> clone() const override { return std::make_unique<BallEnv>(*this); }

  Vector sample_state(Rng& rng) const override {
    Vector s(2 * k_);
    for (int i = 0; i < 2 * k_; ++i) s(i) = rng.uniform(0.0, 1.0);
    return s;
  }

  int num_costs() const override { return 2 * k_; }

  // (pos_1 - 1, -pos_1, pos_2 - 1, -pos_2, ...)
  Vector costs(const Vector& s) const override {
    Vector c(2 * k_);
    for (int i = 0; i < k_; ++i) {
      c(2 * i) = s(i) - 1.0;
      c(2 * i + 1) = -s(i);
    }
    return c;
  }

  // d c(s') / d a, for checking fitted sensitivities.
  Matrix true_sensitivity() const {
    Matrix w = Matrix::Zero(2 * k_, k_);
    for (int i = 0; i < k_; ++i) {
      w(2 * i, i) = kGain;
      w(2 * i + 1, i) = -kGain;
    }
    return w;
  }

  Vector dynamics(const Vector& s, const Vector& a) const override {
    Vector n = s;
    n.head(k_) += kGain * a;
    return n;
  }

  double reward(const Vector&, const Vector&, const Vector& next) const override {
    return -(next.head(k_) - next.tail(k_)).norm();
  }

 private:
  int k_;
  int horizon_;
};

class PointMassEnv : public Environment {
 public:
  explicit PointMassEnv(ConstraintSet cs, int horizon = 200) : cs_(std::move(cs)), horizon_(horizon) {
    if (cs_.action_dim() != 2 || cs_.feature_dim() != 0) {
      throw std::invalid_argument("pointmass2d needs a state-independent 2-D constraint, got " + cs_.id());
    }
  }

  std::string id() const override { return "pointmass2d:" + cs_.id(); }
  int state_dim() const override { return 6; }
  int action_dim() const override { return 2; }
  int horizon() const override { return horizon_; }
  const ConstraintSet* action_constraint() const override { return &cs_; }
  std::unique_ptr<Environment> clone() const override { return std::make_unique<PointMassEnv>(*this); }

  Vector sample_state(Rng& rng) const override {
    Vector s = Vector::Zero(6);
    s(0) = rng.uniform(-1, 1);
    s(1) = rng.uniform(-1, 1);
    s(4) = rng.uniform(-1, 1);
    s(5) = rng.uniform(-1, 1);
    return s;
  }

  Vector dynamics(const Vector& s, const Vector& a) const override {
    Vector n = s;
    n.segment(2, 2) = 0.9 * s.segment(2, 2) + a;
    n.head(2) = s.head(2) + 0.1 * n.segment(2, 2);
    return n;
  }

  double reward(const Vector&, const Vector& a, const Vector& next) const override {
    return -(next.head(2) - next.tail(2)).norm() - 0.01 * a.squaredNorm();
  }

 private:
  ConstraintSet cs_;
  int horizon_;
};

// ids: ball1d, ball3d, pointmass2d (constraint R+L2 by default), or
// pointmass2d:<constraint id>.
inline std::unique_ptr<Environment> make_env(const std::string& id) {
  if (id == "ball1d") return std::make_unique<BallEnv>(1);
  if (id == "ball3d") return std::make_unique<BallEnv>(3);
  if (id == "pointmass2d") return std::make_unique<PointMassEnv>(catalog::r_l2());
  if (id.rfind("pointmass2d:", 0) == 0) return std::make_unique<PointMassEnv>(catalog::lookup(id.substr(12)));
  throw UnknownEnvironment("unknown environment '" + id + "' (expected ball1d, ball3d, pointmass2d[:<constraint>])");
}

// ---- rollouts --------------------------------------------------------------

struct Transition {
  Vector state;
  Vector action;  // latent action for flow agents, env action otherwise
  double reward = 0.0;
  Vector next_state;
  bool done = false;  // terminal; horizon truncation keeps bootstrapping
};

struct Decision {
  Vector stored;    // what goes into the replay buffer
  Vector executed;  // action passed to the environment
  double cv_pre = 0.0;
  bool projected = false;
};

using Policy = std::function<Decision(const Vector& state, Rng& rng)>;

struct StepRecord {
  long step = 0;
  Vector state;
  Vector action;
  double reward = 0.0;
  double cv_pre = 0.0;
  double cv_post = 0.0;
  bool done = false;
};

struct RolloutStats {
  std::vector<double> episode_returns;  // completed episodes only
  int violation_episodes = 0;           // episodes with a post-action violation
  long pre_violations = 0;              // steps with cv_pre > 0
  long post_violations = 0;
  long projections = 0;
};

struct Rollout {
  std::vector<Transition> transitions;
  std::vector<StepRecord> records;
  RolloutStats stats;
};

// Runs `steps` environment steps, resetting after each finished episode.
// With stop_on_done the rollout ends with the first finished episode.
inline Rollout rollout(Environment& env, const Policy& policy, long steps, Rng& rng, bool stop_on_done = false) {
  Rollout out;
  if (steps <= 0) return out;
  Rng env_rng = rng.derive("env");
  Rng policy_rng = rng.derive("policy");
  Vector s = env.reset(env_rng);
  double ret = 0.0;
  bool violated = false;
  for (long t = 0; t < steps; ++t) {
    Decision d = policy(s, policy_rng);
    StepResult r = env.step(d.executed);
    out.transitions.push_back({s, d.stored, r.reward, r.state, r.terminal});
    out.records.push_back({t, s, d.executed, r.reward, d.cv_pre, r.violation, r.done});
    ret += r.reward;
    violated = violated || r.violation > 0.0;
    out.stats.pre_violations += d.cv_pre > 0.0;
    out.stats.post_violations += r.violation > 0.0;
    out.stats.projections += d.projected;
    if (r.done) {
      out.stats.episode_returns.push_back(ret);
      out.stats.violation_episodes += violated;
      ret = 0.0;
      violated = false;
      if (stop_on_done) break;
      s = env.reset(env_rng);
    } else {
      s = r.state;
    }
  }
  return out;
}

// Uniform actions over A, optionally checked against the action constraint.
inline Policy random_policy(int action_dim) {
  return [action_dim](const Vector&, Rng& rng) {
    Vector a(action_dim);
    for (int i = 0; i < action_dim; ++i) a(i) = rng.uniform(-1.0, 1.0);
    return Decision{a, a, 0.0, false};
  };
}

inline void write_rollout_csv(const std::string& path, const std::vector<StepRecord>& records, int state_dim,
                              int action_dim) {
  std::vector<std::string> header{"step"};
  for (int i = 0; i < state_dim; ++i) header.push_back("s_" + std::to_string(i));
  for (int i = 0; i < action_dim; ++i) header.push_back("a_" + std::to_string(i));
  for (const char* h : {"r", "cv_pre", "cv_post", "done"}) header.emplace_back(h);
  csv::Writer w(path, header);
  for (const StepRecord& r : records) {
    std::vector<std::string> row{csv::num(static_cast<long long>(r.step))};
    for (int i = 0; i < state_dim; ++i) row.push_back(csv::num(r.state(i)));
    for (int i = 0; i < action_dim; ++i) row.push_back(csv::num(r.action(i)));
    row.push_back(csv::num(r.reward));
    row.push_back(csv::num(r.cv_pre));
    row.push_back(csv::num(r.cv_post));
    row.push_back(r.done ? "1" : "0");
    w.row(row);
  }
}

}  // namespace cvflow
