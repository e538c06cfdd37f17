#pragma once

// Agents that act through a frozen flow, plus a projection baseline.
//
//   sac-cvflow   Gaussian policy over latents; a = f(clip(latent, 3), s),
//                projected if infeasible; the replay buffer stores latents.
//                Entropy uses the surrogate log mu(latent|s) + |latent|^2 / 2.
//   ddpg-cvflow  deterministic latent policy; the actor gradient chains
//                through the flow; the critic sees environment actions.
//   sac-proj     tanh-Gaussian SAC directly in A with projection and a
//                -beta * cv reward penalty.

#include "cvflow/autodiff.hpp"
#include "cvflow/constraints.hpp"
#include "cvflow/csv.hpp"
#include "cvflow/envs.hpp"
#include "cvflow/flow.hpp"
#include "cvflow/metrics.hpp"
#include "cvflow/nn.hpp"
#include "cvflow/projection.hpp"
#include "cvflow/random.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace cvflow {

// ---- replay ------------------------------------------------------------------

struct Batch {
  Matrix states;       // B x state_dim
  Matrix actions;      // B x action_dim
  Matrix rewards;      // B x 1
  Matrix next_states;  // B x state_dim
  Matrix dones;        // B x 1
};

class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t capacity, int state_dim, int action_dim)
      : capacity_(capacity), state_dim_(state_dim), action_dim_(action_dim) {
    if (capacity == 0) throw std::invalid_argument("replay buffer capacity must be positive");
  }

  std::size_t size() const { return data_.size(); }
  std::size_t capacity() const { return capacity_; }
  const Transition& at(std::size_t i) const { return data_.at(i); }

  void add(const Transition& t) {
    if (t.state.size() != state_dim_ || t.next_state.size() != state_dim_ || t.action.size() != action_dim_) {
      throw ShapeError("replay buffer: transition shapes do not match");
    }
    if (data_.size() < capacity_) {
      data_.push_back(t);
    } else {
      data_[next_] = t;
    }
    next_ = (next_ + 1) % capacity_;
  }

  Batch sample(int n, Rng& rng) const {
    if (data_.empty()) throw std::logic_error("replay buffer: sample from empty buffer");
    Batch b{Matrix(n, state_dim_), Matrix(n, action_dim_), Matrix(n, 1), Matrix(n, state_dim_), Matrix(n, 1)};
    for (int r = 0; r < n; ++r) {
      const Transition& t = data_[rng.index(data_.size())];
      b.states.row(r) = t.state.transpose();
      b.actions.row(r) = t.action.transpose();
      b.rewards(r, 0) = t.reward;
      b.next_states.row(r) = t.next_state.transpose();
      b.dones(r, 0) = t.done ? 1.0 : 0.0;
    }
    return b;
  }

 private:
  std::size_t capacity_;
  int state_dim_;
  int action_dim_;
  std::vector<Transition> data_;
  std::size_t next_ = 0;
};

// ---- networks ----------------------------------------------------------------

class GaussianPolicy {
 public:
  static constexpr double kLogStdMin = -5.0;
  static constexpr double kLogStdMax = 2.0;

  GaussianPolicy(int state_dim, int action_dim, int hidden, Rng& rng)
      : d_(action_dim), net_(state_dim, {hidden, hidden}, 2 * action_dim, Activation::Relu, rng) {}

  int action_dim() const { return d_; }
  Mlp& net() { return net_; }
  const Mlp& net() const { return net_; }
  std::vector<Parameter*> parameters() { return net_.parameters(); }

  std::pair<ad::Value, ad::Value> head(ad::Tape& tape, const Matrix& states, ParamMode mode = ParamMode::Track) {
    auto parts = ad::split(net_.forward(tape, tape.constant(states), mode), {d_, d_});
    return {parts[0], ad::clamp(parts[1], kLogStdMin, kLogStdMax)};
  }

  std::pair<Matrix, Matrix> head(const Matrix& states) const {
    const Matrix out = net_.forward(states);
    return {out.leftCols(d_), out.rightCols(d_).cwiseMax(kLogStdMin).cwiseMin(kLogStdMax)};
  }

  struct Sample {
    ad::Value latent;  // B x d
    ad::Value log_mu;  // B x 1
  };

  // Reparameterized draw latent = mean + exp(log_std) * noise.
  Sample rsample(ad::Tape& tape, const Matrix& states, const Matrix& noise, ParamMode mode = ParamMode::Track) {
    auto [mean, log_std] = head(tape, states, mode);
    ad::Value latent = ad::add(mean, ad::mul(ad::exp(log_std), tape.constant(noise)));
    // (latent - mean) / std == noise, so the quadratic term is a constant.
    const Matrix quad = -0.5 * noise.array().square().rowwise().sum().matrix();
    ad::Value log_mu = ad::add_scalar(ad::sub(tape.constant(quad), ad::row_sum(log_std)), log_norm_const());
    return {latent, log_mu};
  }

  // Diagonal-Gaussian log density at arbitrary latents.
  Vector log_prob(const Matrix& latent, const Matrix& states) const {
    auto [mean, log_std] = head(states);
    const Matrix z = ((latent - mean).array() / log_std.array().exp()).matrix();
    return (-0.5 * z.array().square().rowwise().sum() - log_std.array().rowwise().sum()).matrix() +
           Vector::Constant(latent.rows(), log_norm_const());
  }

 private:
  double log_norm_const() const { return -0.5 * d_ * std::log(2.0 * std::numbers::pi); }

  int d_;
  Mlp net_;
};

// Q(s, a) heads; twin heads are combined with an elementwise min.
class Critic {
 public:
  Critic(int state_dim, int action_dim, int hidden, bool twin, Rng& rng) {
    for (int k = 0; k < (twin ? 2 : 1); ++k) nets_.emplace_back(state_dim + action_dim, std::vector<Eigen::Index>{hidden, hidden}, 1, Activation::Relu, rng);
  }

  int heads() const { return static_cast<int>(nets_.size()); }
  std::vector<Mlp>& nets() { return nets_; }
  const std::vector<Mlp>& nets() const { return nets_; }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> ps;
    for (Mlp& n : nets_) {
      auto p = n.parameters();
      ps.insert(ps.end(), p.begin(), p.end());
    }
    return ps;
  }

  ad::Value q(ad::Tape& tape, int k, const Matrix& states, const ad::Value& actions, ParamMode mode) {
    return nets_[static_cast<std::size_t>(k)].forward(tape, ad::concat({tape.constant(states), actions}), mode);
  }

  ad::Value min_q(ad::Tape& tape, const Matrix& states, const ad::Value& actions, ParamMode mode) {
    ad::Value out = q(tape, 0, states, actions, mode);
    for (int k = 1; k < heads(); ++k) {
      ad::Value other = q(tape, k, states, actions, mode);
      out = ad::sub(out, ad::relu(ad::sub(out, other)));  // min(a, b) = a - max(a - b, 0)
    }
    return out;
  }

  Matrix q(int k, const Matrix& states, const Matrix& actions) const {
    Matrix in(states.rows(), states.cols() + actions.cols());
    in << states, actions;
    return nets_[static_cast<std::size_t>(k)].forward(in);
  }

  Matrix min_q(const Matrix& states, const Matrix& actions) const {
    Matrix out = q(0, states, actions);
    for (int k = 1; k < heads(); ++k) out = out.cwiseMin(q(k, states, actions));
    return out;
  }

 private:
  std::vector<Mlp> nets_;
};

// ---- SAC losses ---------------------------------------------------------------

enum class ActionSpace { Latent, TanhBox };

struct SacLossConfig {
  double alpha = 0.2;
  double gamma = 0.99;
  bool entropy_correction = true;
  double latent_clip = 3.0;
  ActionSpace space = ActionSpace::Latent;
};

// log mu(latent|s) + |latent|^2 / 2: the combined policy's log-probability up
// to a term that does not depend on the action.
inline Vector latent_log_surrogate(const GaussianPolicy& pi, const Matrix& latent, const Matrix& states,
                                   bool entropy_correction = true) {
  Vector lp = pi.log_prob(latent, states);
  if (entropy_correction) lp += 0.5 * latent.rowwise().squaredNorm();
  return lp;
}

struct PolicyAction {
  ad::Value action;  // what the critic sees
  ad::Value logp;    // B x 1
};

inline PolicyAction policy_action(ad::Tape& tape, GaussianPolicy& pi, const Matrix& states, const Matrix& noise,
                                  const SacLossConfig& c, ParamMode mode = ParamMode::Track) {
  GaussianPolicy::Sample smp = pi.rsample(tape, states, noise, mode);
  if (c.space == ActionSpace::Latent) {
    ad::Value logp = smp.log_mu;
    if (c.entropy_correction) logp = ad::add(logp, ad::scale(ad::row_sum(ad::square(smp.latent)), 0.5));
    return {smp.latent, logp};
  }
  // log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
  ad::Value u = smp.latent;
  ad::Value ldj = ad::scale(ad::add_scalar(ad::neg(ad::add(u, ad::softplus(ad::scale(u, -2.0)))), std::numbers::ln2), 2.0);
  return {ad::tanh(u), ad::sub(smp.log_mu, ad::row_sum(ldj))};
}

// -E[ Q(s, a) - alpha * logp ] with the critic frozen.
inline ad::Value sac_policy_loss(ad::Tape& tape, GaussianPolicy& pi, Critic& critic, const Matrix& states,
                                 const Matrix& noise, const SacLossConfig& c) {
  PolicyAction pa = policy_action(tape, pi, states, noise, c);
  ad::Value q = critic.min_q(tape, states, pa.action, ParamMode::Frozen);
  return ad::neg(ad::mean(ad::sub(q, ad::scale(pa.logp, c.alpha))));
}

// r + gamma (1 - done) (Qbar(s', a') - alpha logp(a'|s')), a' drawn with `noise`.
// Latents are clipped before both the critic and the log-density.
inline Matrix sac_target(const GaussianPolicy& pi, const Critic& target, const Batch& b, const Matrix& noise,
                         const SacLossConfig& c) {
  auto [mean, log_std] = pi.head(b.next_states);
  Matrix u = mean + (log_std.array().exp() * noise.array()).matrix();
  Matrix action;
  Vector logp;
  if (c.space == ActionSpace::Latent) {
    u = u.cwiseMax(-c.latent_clip).cwiseMin(c.latent_clip);
    logp = latent_log_surrogate(pi, u, b.next_states, c.entropy_correction);
    action = u;
  } else {
    logp = pi.log_prob(u, b.next_states);
    for (Eigen::Index r = 0; r < u.rows(); ++r) {
      for (Eigen::Index j = 0; j < u.cols(); ++j) logp(r) -= log_dtanh(u(r, j));
    }
    action = u.array().tanh().matrix();
  }
  const Matrix q = target.min_q(b.next_states, action);
  return b.rewards + c.gamma * ((1.0 - b.dones.array()) * (q.array() - c.alpha * logp.array())).matrix();
}

// Sum over critic heads of the mean squared Bellman error against y.
inline ad::Value sac_critic_loss(ad::Tape& tape, Critic& critic, const Batch& b, const Matrix& y) {
  ad::Value actions = tape.constant(b.actions);
  ad::Value target = tape.constant(y);
  std::optional<ad::Value> loss;
  for (int k = 0; k < critic.heads(); ++k) {
    ad::Value l = ad::mean(ad::square(ad::sub(critic.q(tape, k, b.states, actions, ParamMode::Track), target)));
    loss = loss ? ad::add(*loss, l) : l;
  }
  return *loss;
}

// ---- acting through the flow ----------------------------------------------------

// The agent's view of C(s): a constraint set and the map from environment
// states to its conditioning features.
struct ConstraintView {
  const ConstraintSet* cs = nullptr;
  std::function<Matrix(const Matrix& states)> features;

  Matrix batch_features(const Matrix& states) const {
    if (features) return features(states);
    return Matrix::Zero(states.rows(), cs ? cs->feature_dim() : 0);
  }
};

struct ActOptions {
  ProjectionOptions projection;
  double tol = kFeasibleTol;
};

// Checks `a` against the view and projects it when infeasible.
inline Decision guard_action(const Vector& stored, const Vector& a, const Vector& features, const ConstraintView& view,
                             const ActOptions& o, long* warnings) {
  Decision d{stored, a, 0.0, false};
  if (!view.cs) return d;
  const double cv = view.cs->cv(a, features, o.projection.eps);
  if (cv <= o.tol) return d;
  d.cv_pre = cv;
  ProjectionResult pr = project(a, features, *view.cs, o.projection);
  d.executed = pr.action;
  d.projected = true;
  if (pr.residual_cv > o.tol && warnings) ++*warnings;
  return d;
}

// Latent -> clip -> flow -> projection guard.
inline Decision act_through_flow(const Vector& latent, const Vector& state, const FlowModel& flow,
                                 const ConstraintView& view, double clip, const ActOptions& o, long* warnings) {
  const Vector z = latent.cwiseMax(-clip).cwiseMin(clip);
  const Matrix feat = view.batch_features(row_matrix(state));
  const Vector a = flow.forward(row_matrix(z), feat).values.row(0).transpose();
  return guard_action(z, a, feat.row(0).transpose(), view, o, warnings);
}

// ---- agents -------------------------------------------------------------------

struct AgentConfig {
  std::string algo = "sac-cvflow";  // sac-cvflow | ddpg-cvflow | sac-proj
  long steps = 20000;
  int batch = 256;
  double lr = 3e-4;
  double gamma = 0.99;
  double tau = 0.005;
  double alpha = 0.2;
  long learning_starts = 1000;
  long buffer_size = 1000000;
  int hidden = 64;
  int updates_per_step = 1;
  bool entropy_correction = true;
  bool single_critic = false;
  double latent_clip = 3.0;
  double ddpg_noise = 1.0;
  double penalty_beta = 1.0;
  long eval_every = 1000;
  int eval_episodes = 5;
  std::uint64_t seed = 0;
  ActOptions act;
  std::string runlog_path;      // runlog.csv
  std::string steps_path;       // per-step log
  std::string checkpoint_path;  // agent weights
};

inline nlohmann::json params_to_json(const std::vector<Parameter*>& ps) {
  nlohmann::json out = nlohmann::json::array();
  for (const Parameter* p : ps) out.push_back(detail::matrix_to_json(p->value));
  return out;
}

inline void params_from_json(const nlohmann::json& j, const std::vector<Parameter*>& ps) {
  if (j.size() != ps.size()) throw CheckpointError("agent checkpoint: parameter count mismatch");
  for (std::size_t i = 0; i < ps.size(); ++i) {
    Matrix m = detail::matrix_from_json(j[i]);
    if (m.rows() != ps[i]->value.rows() || m.cols() != ps[i]->value.cols()) {
      throw CheckpointError("agent checkpoint: parameter " + std::to_string(i) + " has shape " + shape_str(m) +
                            ", expected " + shape_str(ps[i]->value));
    }
    ps[i]->value = std::move(m);
  }
}

class Agent {
 public:
  enum class Mode { Random, Explore, Greedy };

  Agent() = default;
  Agent(const Agent&) = delete;
  Agent& operator=(const Agent&) = delete;
  virtual ~Agent() = default;

  virtual Decision act(const Vector& state, Rng& rng, Mode mode) = 0;
  virtual void update(const ReplayBuffer& buffer, Rng& rng) = 0;
  virtual std::string algo() const = 0;
  virtual nlohmann::json to_json() = 0;
  virtual void from_json(const nlohmann::json& j) = 0;
  virtual int stored_dim() const = 0;

  long projection_warnings = 0;
};

class SacAgent : public Agent {
 public:
  // flow == nullptr selects the tanh-Gaussian policy acting directly in A.
  SacAgent(const Environment& env, const FlowModel* flow, ConstraintView view, const AgentConfig& cfg, Rng& rng)
      : flow_(flow),
        view_(std::move(view)),
        cfg_(cfg),
        policy_(env.state_dim(), env.action_dim(), cfg.hidden, rng),
        critic_(env.state_dim(), env.action_dim(), cfg.hidden, !cfg.single_critic, rng),
        target_(env.state_dim(), env.action_dim(), cfg.hidden, !cfg.single_critic, rng),
        popt_(policy_.parameters(), cfg.lr),
        qopt_(critic_.parameters(), cfg.lr) {
    if (flow_ && flow_->action_dim() != env.action_dim()) {
      throw ShapeError("flow has " + std::to_string(flow_->action_dim()) + " action dims, environment " + env.id() +
                       " has " + std::to_string(env.action_dim()));
    }
    polyak_update(target_.parameters(), critic_.parameters(), 1.0);
    loss_.alpha = cfg.alpha;
    loss_.gamma = cfg.gamma;
    loss_.entropy_correction = cfg.entropy_correction;
    loss_.latent_clip = cfg.latent_clip;
    loss_.space = flow_ ? ActionSpace::Latent : ActionSpace::TanhBox;
  }

  std::string algo() const override { return flow_ ? "sac-cvflow" : "sac-proj"; }
  int stored_dim() const override { return policy_.action_dim(); }
  GaussianPolicy& policy() { return policy_; }
  Critic& critic() { return critic_; }
  Critic& target() { return target_; }
  const SacLossConfig& loss_config() const { return loss_; }

  Decision act(const Vector& state, Rng& rng, Mode mode) override {
    const int d = policy_.action_dim();
    Vector u(d);
    if (mode == Mode::Random) {
      for (int i = 0; i < d; ++i) u(i) = flow_ ? rng.normal() : std::atanh(rng.uniform(-1.0 + 1e-9, 1.0 - 1e-9));
    } else {
      auto [mean, log_std] = policy_.head(row_matrix(state));
      u = mean.row(0).transpose();
      if (mode == Mode::Explore) {
        for (int i = 0; i < d; ++i) u(i) += std::exp(log_std(0, i)) * rng.normal();
      }
    }
    if (flow_) return act_through_flow(u, state, *flow_, view_, cfg_.latent_clip, cfg_.act, &projection_warnings);
    const Vector a = u.array().tanh().matrix();
    const Matrix feat = view_.batch_features(row_matrix(state));
    return guard_action(a, a, feat.row(0).transpose(), view_, cfg_.act, &projection_warnings);
  }

  void update(const ReplayBuffer& buffer, Rng& rng) override {
    const Batch b = buffer.sample(cfg_.batch, rng);
    const int d = policy_.action_dim();
    const Matrix y = sac_target(policy_, target_, b, rng.normal_matrix(cfg_.batch, d), loss_);
    {
      ad::Tape tape;
      tape.backward(sac_critic_loss(tape, critic_, b, y));
      qopt_.step();
    }
    {
      ad::Tape tape;
      tape.backward(sac_policy_loss(tape, policy_, critic_, b.states, rng.normal_matrix(cfg_.batch, d), loss_));
      popt_.step();
    }
    polyak_update(target_.parameters(), critic_.parameters(), cfg_.tau);
  }

  nlohmann::json to_json() override {
    return {{"format", "cvflow-agent"}, {"version", 1}, {"algo", algo()}, {"policy", params_to_json(policy_.parameters())},
            {"critic", params_to_json(critic_.parameters())}, {"target", params_to_json(target_.parameters())}};
  }

  void from_json(const nlohmann::json& j) override {
    if (j.value("algo", "") != algo()) throw CheckpointError("agent checkpoint is for " + j.value("algo", "?"));
    params_from_json(j.at("policy"), policy_.parameters());
    params_from_json(j.at("critic"), critic_.parameters());
    params_from_json(j.at("target"), target_.parameters());
  }

 private:
  const FlowModel* flow_;
  ConstraintView view_;
  AgentConfig cfg_;
  SacLossConfig loss_;
  GaussianPolicy policy_;
  Critic critic_;
  Critic target_;
  Adam popt_;
  Adam qopt_;
};

// -E[ Q(s, f(mu(s), s)) ]: the actor gradient flows through the frozen flow
// and the frozen critic.
inline ad::Value ddpg_actor_loss(ad::Tape& tape, Mlp& actor, Critic& critic, FlowModel& flow, const Matrix& states,
                                 const Matrix& features) {
  ad::Value latent = actor.forward(tape, tape.constant(states));
  ad::Value action = flow.forward(tape, latent, features, ParamMode::Frozen).action;
  return ad::neg(ad::mean(critic.q(tape, 0, states, action, ParamMode::Frozen)));
}

class DdpgAgent : public Agent {
 public:
  DdpgAgent(const Environment& env, const FlowModel& flow, ConstraintView view, const AgentConfig& cfg, Rng& rng)
      : flow_(flow),
        view_(std::move(view)),
        cfg_(cfg),
        actor_(env.state_dim(), {cfg.hidden, cfg.hidden}, env.action_dim(), Activation::Relu, rng),
        critic_(env.state_dim(), env.action_dim(), cfg.hidden, false, rng),
        target_(env.state_dim(), env.action_dim(), cfg.hidden, false, rng),
        aopt_(actor_.parameters(), cfg.lr),
        qopt_(critic_.parameters(), cfg.lr) {
    if (flow_.action_dim() != env.action_dim()) throw ShapeError("flow and environment action dims differ");
    polyak_update(target_.parameters(), critic_.parameters(), 1.0);
  }

  std::string algo() const override { return "ddpg-cvflow"; }
  int stored_dim() const override { return flow_.action_dim(); }
  Mlp& actor() { return actor_; }
  Critic& critic() { return critic_; }

  Decision act(const Vector& state, Rng& rng, Mode mode) override {
    const int d = flow_.action_dim();
    Vector u(d);
    if (mode == Mode::Random) {
      for (int i = 0; i < d; ++i) u(i) = rng.normal();
    } else {
      u = actor_.forward(row_matrix(state)).row(0).transpose();
      if (mode == Mode::Explore) {
        for (int i = 0; i < d; ++i) u(i) += cfg_.ddpg_noise * rng.normal();
      }
    }
    Decision dec = act_through_flow(u, state, flow_, view_, cfg_.latent_clip, cfg_.act, &projection_warnings);
    dec.stored = dec.executed;  // the critic learns on environment actions
    return dec;
  }

  void update(const ReplayBuffer& buffer, Rng& rng) override {
    const Batch b = buffer.sample(cfg_.batch, rng);
    const Matrix feat_next = view_.batch_features(b.next_states);
    const Matrix a_next = flow_.forward(actor_.forward(b.next_states), feat_next).values;
    const Matrix y = b.rewards + cfg_.gamma * ((1.0 - b.dones.array()) * target_.q(0, b.next_states, a_next).array()).matrix();
    {
      ad::Tape tape;
      tape.backward(sac_critic_loss(tape, critic_, b, y));
      qopt_.step();
    }
    {
      ad::Tape tape;
      FlowModel& flow = const_cast<FlowModel&>(flow_);  // frozen: read-only on the tape
      tape.backward(ddpg_actor_loss(tape, actor_, critic_, flow, b.states, view_.batch_features(b.states)));
      aopt_.step();
    }
    polyak_update(target_.parameters(), critic_.parameters(), cfg_.tau);
  }

  nlohmann::json to_json() override {
    return {{"format", "cvflow-agent"}, {"version", 1}, {"algo", algo()}, {"actor", params_to_json(actor_.parameters())},
            {"critic", params_to_json(critic_.parameters())}, {"target", params_to_json(target_.parameters())}};
  }

  void from_json(const nlohmann::json& j) override {
    if (j.value("algo", "") != algo()) throw CheckpointError("agent checkpoint is for " + j.value("algo", "?"));
    params_from_json(j.at("actor"), actor_.parameters());
    params_from_json(j.at("critic"), critic_.parameters());
    params_from_json(j.at("target"), target_.parameters());
  }

 private:
  const FlowModel& flow_;
  ConstraintView view_;
  AgentConfig cfg_;
  Mlp actor_;
  Critic critic_;
  Critic target_;
  Adam aopt_;
  Adam qopt_;
};

// ---- training loop -----------------------------------------------------------

struct RunLogRow {
  long step = 0;
  double eval_return = 0.0;
  double cv_count_pct = 0.0;
  double cv_magnitude = 0.0;
  long projections = 0;
};

struct TrainResult {
  std::vector<RunLogRow> log;
  std::vector<StepRecord> steps;
  std::vector<double> episode_returns;
  int episodes = 0;
  int violation_episodes = 0;  // episodes with a post-projection violation
  CvStats cv;                  // over all training steps (pre-projection)
  long projections = 0;
  long projection_warnings = 0;
  std::vector<double> final_eval_returns;
};

// Greedy episodes on a copy of the environment.
inline std::vector<double> evaluate(Agent& agent, const Environment& env, int episodes, Rng rng,
                                    int* violation_episodes = nullptr) {
  std::unique_ptr<Environment> e = env.clone();
  Rng env_rng = rng.derive("env");
  Rng act_rng = rng.derive("act");
  std::vector<double> returns;
  for (int ep = 0; ep < episodes; ++ep) {
    Vector s = e->reset(env_rng);
    double ret = 0.0;
    bool violated = false;
    for (;;) {
      StepResult r = e->step(agent.act(s, act_rng, Agent::Mode::Greedy).executed);
      ret += r.reward;
      violated = violated || r.violation > 0;
      s = r.state;
      if (r.done) break;
    }
    returns.push_back(ret);
    if (violation_episodes) *violation_episodes += violated;
  }
  return returns;
}

// Random actions over A through the same projection guard, for baselines.
inline std::vector<double> evaluate_random(const Environment& env, const ConstraintView& view, int episodes, Rng rng,
                                           const ActOptions& o = {}) {
  std::unique_ptr<Environment> e = env.clone();
  Rng env_rng = rng.derive("env");
  Rng act_rng = rng.derive("act");
  std::vector<double> returns;
  for (int ep = 0; ep < episodes; ++ep) {
    Vector s = e->reset(env_rng);
    double ret = 0.0;
    for (;;) {
      Vector a(e->action_dim());
      for (Eigen::Index i = 0; i < a.size(); ++i) a(i) = act_rng.uniform(-1.0, 1.0);
      const Matrix feat = view.batch_features(row_matrix(s));
      StepResult r = e->step(guard_action(a, a, feat.row(0).transpose(), view, o, nullptr).executed);
      ret += r.reward;
      s = r.state;
      if (r.done) break;
    }
    returns.push_back(ret);
  }
  return returns;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// Baseline reward shaping r - beta * cv(a_pre, s).
inline double penalized_reward(double reward, double cv_pre, double beta) { return reward - beta * cv_pre; }

inline TrainResult train_agent(Environment& env, Agent& agent, const ConstraintView& view, const AgentConfig& cfg,
                               bool penalize_cv = false) {
  (void)view;
  Rng root(cfg.seed);
  Rng env_rng = root.derive("env");
  Rng act_rng = root.derive("policy");
  Rng update_rng = root.derive("update");
  ReplayBuffer buffer(static_cast<std::size_t>(cfg.buffer_size), env.state_dim(), agent.stored_dim());

  TrainResult res;
  std::vector<double> cv_pre;
  csv::Writer runlog;
  if (!cfg.runlog_path.empty()) {
    runlog = csv::Writer(cfg.runlog_path, {"step", "eval_return", "cv_count_pct", "cv_magnitude", "projections_fired"});
  }
  Vector s = env.reset(env_rng);
  double ret = 0.0;
  bool violated = false;
  long episode_steps = 0;
  for (long step = 1; step <= cfg.steps; ++step) {
    const Agent::Mode mode = step <= cfg.learning_starts ? Agent::Mode::Random : Agent::Mode::Explore;
    const Decision d = agent.act(s, act_rng, mode);
    const StepResult r = env.step(d.executed);
    const double reward = penalize_cv ? penalized_reward(r.reward, d.cv_pre, cfg.penalty_beta) : r.reward;
    buffer.add({s, d.stored, reward, r.state, r.terminal});
    res.steps.push_back({step, s, d.executed, r.reward, d.cv_pre, r.violation, r.done});
    cv_pre.push_back(d.cv_pre);
    res.projections += d.projected;
    ret += r.reward;
    violated = violated || r.violation > 0;
    ++episode_steps;
    if (r.done) {
      res.episode_returns.push_back(ret);
      ++res.episodes;
      res.violation_episodes += violated;
      ret = 0.0;
      violated = false;
      episode_steps = 0;
      s = env.reset(env_rng);
    } else {
      s = r.state;
    }
    if (step > cfg.learning_starts && buffer.size() >= static_cast<std::size_t>(cfg.batch)) {
      for (int u = 0; u < cfg.updates_per_step; ++u) agent.update(buffer, update_rng);
    }
    if ((cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.steps) {
      Rng eval_rng = root.derive("eval").derive(std::to_string(step));
      const std::vector<double> returns = evaluate(agent, env, cfg.eval_episodes, eval_rng);
      const CvStats st = cv_stats(cv_pre);
      res.log.push_back({step, mean_of(returns), st.count_pct, st.magnitude, res.projections});
      runlog.row({csv::num(static_cast<long long>(step)), csv::num(mean_of(returns)), csv::num(st.count_pct),
                  csv::num(st.magnitude), csv::num(static_cast<long long>(res.projections))});
      if (step == cfg.steps) res.final_eval_returns = returns;
    }
  }
  if (episode_steps > 0) {
    ++res.episodes;
    res.violation_episodes += violated;
  }
  if (!cv_pre.empty()) res.cv = cv_stats(cv_pre);
  res.projection_warnings = agent.projection_warnings;
  if (!cfg.steps_path.empty()) write_rollout_csv(cfg.steps_path, res.steps, env.state_dim(), env.action_dim());
  if (!cfg.checkpoint_path.empty()) {
    std::ofstream out(cfg.checkpoint_path);
    if (!out) throw CheckpointError("cannot write " + cfg.checkpoint_path);
    out << agent.to_json().dump(1) << '\n';
  }
  return res;
}

// Builds the agent for cfg.algo. The flow must outlive the agent.
inline std::unique_ptr<Agent> make_agent(const Environment& env, const FlowModel* flow, const ConstraintView& view,
                                         const AgentConfig& cfg) {
  Rng init = Rng(cfg.seed).derive("agent-init");
  if (cfg.algo == "sac-cvflow" || cfg.algo == "ddpg-cvflow") {
    if (!flow) throw std::invalid_argument(cfg.algo + " needs a flow checkpoint");
    const int feat = static_cast<int>(view.batch_features(Matrix::Zero(1, env.state_dim())).cols());
    if (flow->state_dim() != feat) {
      throw ShapeError("flow conditions on " + std::to_string(flow->state_dim()) + " features but the constraint for " +
                       env.id() + " provides " + std::to_string(feat));
    }
    if (cfg.algo == "sac-cvflow") return std::make_unique<SacAgent>(env, flow, view, cfg, init);
    return std::make_unique<DdpgAgent>(env, *flow, view, cfg, init);
  }
  if (cfg.algo == "sac-proj") return std::make_unique<SacAgent>(env, nullptr, view, cfg, init);
  throw std::invalid_argument("unknown algo '" + cfg.algo + "' (expected sac-cvflow, ddpg-cvflow, sac-proj)");
}

inline TrainResult train_sac(Environment& env, const FlowModel& flow, const ConstraintView& view, AgentConfig cfg) {
  cfg.algo = "sac-cvflow";
  auto agent = make_agent(env, &flow, view, cfg);
  return train_agent(env, *agent, view, cfg);
}

inline TrainResult train_ddpg(Environment& env, const FlowModel& flow, const ConstraintView& view, AgentConfig cfg) {
  cfg.algo = "ddpg-cvflow";
  auto agent = make_agent(env, &flow, view, cfg);
  return train_agent(env, *agent, view, cfg);
}

inline TrainResult train_baseline_sproj(Environment& env, const ConstraintView& view, AgentConfig cfg) {
  cfg.algo = "sac-proj";
  auto agent = make_agent(env, nullptr, view, cfg);
  return train_agent(env, *agent, view, cfg, /*penalize_cv=*/true);
}

}  // namespace cvflow
