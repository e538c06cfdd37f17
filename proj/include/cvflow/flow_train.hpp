#pragma once

// Reverse-KL pretraining of a flow against the exp(-lambda * cv) target:
//
//   J(psi) = E_{latent ~ base, s ~ p_S} [ lambda * cv(f(latent, s), s) - log|det J_f| ]
//
// plus the state-wise pipeline that first learns linear cost sensitivities
// w_i(s) from random rollouts and then trains a flow on the linearized
// constraints c_i(s) + w_i(s) . a <= 0.

#include "cvflow/autodiff.hpp"
#include "cvflow/constraints.hpp"
#include "cvflow/csv.hpp"
#include "cvflow/envs.hpp"
#include "cvflow/flow.hpp"
#include "cvflow/nn.hpp"
#include "cvflow/random.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cvflow {

inline constexpr double kFeasibleTol = 1e-6;

struct FlowTrainConfig {
  int epochs = 3000;
  int batch = 512;
  double lr = 1e-3;
  double lr_final = 1e-4;  // cosine decay from lr to lr_final over the epochs
  double lambda = 1000.0;
  // When positive (0 disables), lambda grows geometrically from lambda_start to lambda
  // over the first lambda_warmup fraction of the epochs.
  double lambda_start = 1.0;
  double lambda_warmup = 0.5;
  double epsilon = 1e-3;
  std::string constraint = "R+L2";
  BaseKind base = BaseKind::Gaussian;
  std::uint64_t seed = 0;
  int layers = 6;
  int hidden = 64;
  int hidden_layers = 2;
  double scale_clamp = 2.0;
  bool squash = true;
  std::string log_path;         // flowlog.csv when non-empty
  std::string checkpoint_path;  // written after training when non-empty
};

inline FlowConfig flow_config_for(const FlowTrainConfig& c, int action_dim, int state_dim) {
  FlowConfig f;
  f.action_dim = action_dim;
  f.state_dim = state_dim;
  f.layers = c.layers;
  f.hidden = c.hidden;
  f.hidden_layers = c.hidden_layers;
  f.scale_clamp = c.scale_clamp;
  f.squash = c.squash;
  f.base = c.base;
  return f;
}

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct FlowLoss {
  ad::Value loss;  // 1 x 1
  Vector cv;       // per sample
  Vector logdet;   // per sample
};

// Mean of lambda * cv(f(latent, s), s) - logdet over the batch.
inline FlowLoss flow_loss(ad::Tape& tape, FlowModel& model, const Matrix& latent, const Matrix& states,
                          const ConstraintSet& cs, const TargetDensity& td) {
  if (model.action_dim() != cs.action_dim() || model.state_dim() != cs.feature_dim()) {
    throw ShapeError("flow_loss: flow (" + std::to_string(model.action_dim()) + " actions, " +
                     std::to_string(model.state_dim()) + " features) does not match constraint " + cs.id());
  }
  FlowModel::TapeOutput out = model.forward(tape, tape.constant(latent), states);
  ad::Value cv = cs.cv(tape, out.action, states, td.epsilon);
  ad::Value per = ad::sub(ad::scale(cv, td.lambda), out.logdet);
  ad::Value loss = ad::mean(per);
  if (!std::isfinite(loss.item())) {
    std::ostringstream os;
    os << "flow_loss: non-finite loss (mean cv " << cv.data().mean() << ", mean logdet " << out.logdet.data().mean()
       << ", batch " << latent.rows() << ")";
    throw DivergenceError(os.str());
  }
  return {loss, cv.data().col(0), out.logdet.data().col(0)};
}

struct EpochLog {
  int epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;  // feasible fraction of the epoch's batch
};

struct PretrainResult {
  FlowModel model;
  std::vector<EpochLog> log;
  bool diverged = false;
  std::string message;
};

inline double lambda_at(const FlowTrainConfig& cfg, int epoch) {
  if (cfg.lambda_start <= 0 || cfg.lambda_start >= cfg.lambda) return cfg.lambda;
  const double ramp = cfg.lambda_warmup * cfg.epochs;
  if (ramp <= 0 || epoch >= ramp) return cfg.lambda;
  return cfg.lambda_start * std::pow(cfg.lambda / cfg.lambda_start, (epoch - 1) / ramp);
}

using StateSampler = std::function<Matrix(Eigen::Index n, Rng& rng)>;
using EpochCallback = std::function<void(int epoch, const FlowModel& model)>;

inline void write_flowlog(const std::string& path, const std::vector<EpochLog>& log) {
  csv::Writer w(path, {"epoch", "loss", "accuracy"});
  for (const EpochLog& e : log) w.row({csv::num(e.epoch), csv::num(e.loss), csv::num(e.accuracy)});
}

// Trains a fresh flow on cs. States come from `sampler` (the constraint's own
// feature distribution by default) and are redrawn every batch.
inline PretrainResult pretrain(const FlowTrainConfig& cfg, const ConstraintSet& cs, StateSampler sampler = {},
                               EpochCallback on_epoch = {}) {
  if (cfg.epochs < 0 || cfg.batch < 1 || cfg.lr <= 0 || cfg.lr_final <= 0 || cfg.lambda < 0 || cfg.epsilon < 0) {
    throw std::invalid_argument("pretrain: epochs >= 0, batch >= 1, lr > 0, lr_final > 0, lambda >= 0, epsilon >= 0 required");
  }
  if (!sampler) sampler = [&cs](Eigen::Index n, Rng& rng) { return cs.sample_states(n, rng); };
  Rng root(cfg.seed);
  Rng init_rng = root.derive("flow-init");
  Rng latent_rng = root.derive("flow-latent");
  Rng state_rng = root.derive("flow-states");

  PretrainResult res{FlowModel(flow_config_for(cfg, cs.action_dim(), cs.feature_dim()), init_rng), {}, false, {}};
  FlowModel& model = res.model;
  std::vector<Parameter*> params = model.parameters();
  Adam opt(params, cfg.lr);
  TargetDensity td{cfg.lambda, cfg.epsilon};
  std::vector<Matrix> last_good(params.size());

  if (on_epoch) on_epoch(0, model);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Matrix latent = model.base().sample(cfg.batch, latent_rng);
    Matrix states = sampler(cfg.batch, state_rng);
    td.lambda = lambda_at(cfg, epoch);
    try {
      ad::Tape tape;
      FlowLoss fl = flow_loss(tape, model, latent, states, cs, td);
      tape.backward(fl.loss);
      const double acc = static_cast<double>((fl.cv.array() <= kFeasibleTol).count()) / cfg.batch;
      res.log.push_back({epoch, fl.loss.item(), acc});
      for (std::size_t i = 0; i < params.size(); ++i) last_good[i] = params[i]->value;
      const double progress = cfg.epochs > 1 ? static_cast<double>(epoch - 1) / (cfg.epochs - 1) : 0.0;
      opt.set_learning_rate(cfg.lr_final +
                            0.5 * (cfg.lr - cfg.lr_final) * (1.0 + std::cos(std::numbers::pi * progress)));
      opt.step();
    } catch (const std::exception& e) {
      // Either the loss or a gradient went non-finite: the parameters that
      // produced it are the last ones we stepped to, so roll back one step.
      if (epoch > 1) {
        for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = last_good[i];
      }
      for (Parameter* p : params) p->zero_grad();
      res.diverged = true;
      res.message = "diverged at epoch " + std::to_string(epoch) + ": " + e.what();
      break;
    }
    if (on_epoch) on_epoch(epoch, model);
  }
  if (!cfg.log_path.empty()) write_flowlog(cfg.log_path, res.log);
  if (!cfg.checkpoint_path.empty()) save_checkpoint(model, cfg.checkpoint_path);
  return res;
}

// ---- state-wise pipeline -----------------------------------------------------

struct StatewiseConfig {
  long rollout_steps = 10000;
  int fit_epochs = 2000;
  int fit_batch = 256;
  double fit_lr = 1e-3;
  int hidden = 64;
  double margin = 0.005;
  double condition_limit = 1e8;
  FlowTrainConfig flow;
};

// One sensitivity model per cost: c_i(s') ~ c_i(s) + w_i(s) . a.
class SensitivityModel {
 public:
  SensitivityModel() = default;

  SensitivityModel(int state_dim, int action_dim, int num_costs, int hidden, Rng& rng)
      : state_dim_(state_dim), action_dim_(action_dim) {
    for (int i = 0; i < num_costs; ++i) nets_.emplace_back(state_dim, std::vector<Eigen::Index>{hidden, hidden}, action_dim, Activation::Tanh, rng);
  }

  int num_costs() const { return static_cast<int>(nets_.size()); }
  int state_dim() const { return state_dim_; }
  int action_dim() const { return action_dim_; }
  std::vector<Mlp>& nets() { return nets_; }
  const std::vector<Mlp>& nets() const { return nets_; }

  // k x d matrix of sensitivities at one state.
  Matrix weights(const Vector& state) const {
    Matrix w(num_costs(), action_dim_);
    const Matrix s = row_matrix(state);
    for (int i = 0; i < num_costs(); ++i) w.row(i) = nets_[static_cast<std::size_t>(i)].forward(s).row(0);
    return w;
  }

  // Constraint features [c_1..c_k, w_11..w_1d, ..., w_k1..w_kd] for a batch.
  Matrix features(const Matrix& states, const Environment& env) const {
    const int k = num_costs();
    Matrix f(states.rows(), k + k * action_dim_);
    std::vector<Matrix> w;
    for (const Mlp& net : nets_) w.push_back(net.forward(states));
    for (Eigen::Index r = 0; r < states.rows(); ++r) {
      const Vector c = env.costs(states.row(r).transpose());
      for (int i = 0; i < k; ++i) {
        f(r, i) = c(i);
        for (int j = 0; j < action_dim_; ++j) f(r, k + i * action_dim_ + j) = w[static_cast<std::size_t>(i)](r, j);
      }
    }
    return f;
  }

  nlohmann::json to_json() const {
    nlohmann::json nets = nlohmann::json::array();
    for (const Mlp& net : nets_) {
      nlohmann::json ws = nlohmann::json::array();
      for (const Parameter* p : net.parameters()) ws.push_back(detail::matrix_to_json(p->value));
      nets.push_back(ws);
    }
    const int hidden = nets_.empty() ? 0 : static_cast<int>(nets_.front().parameters().front()->value.cols());
    return {{"format", "cvflow-sensitivity"}, {"version", 1}, {"state_dim", state_dim_}, {"action_dim", action_dim_},
            {"hidden", hidden}, {"nets", nets}};
  }

  static SensitivityModel from_json(const nlohmann::json& j) {
    try {
      if (j.at("format") != "cvflow-sensitivity") throw CheckpointError("sensitivity checkpoint: wrong format tag");
      if (j.at("version") != 1) throw CheckpointError("sensitivity checkpoint: unsupported version");
      const auto& nets = j.at("nets");
      Rng rng(0);
      SensitivityModel m(j.at("state_dim").get<int>(), j.at("action_dim").get<int>(), static_cast<int>(nets.size()),
                         j.at("hidden").get<int>(), rng);
      for (std::size_t i = 0; i < nets.size(); ++i) {
        std::vector<Parameter*> ps = m.nets_[i].parameters();
        if (nets[i].size() != ps.size()) throw CheckpointError("sensitivity checkpoint: parameter count mismatch");
        for (std::size_t k = 0; k < ps.size(); ++k) {
          Matrix v = detail::matrix_from_json(nets[i][k]);
          if (v.rows() != ps[k]->value.rows() || v.cols() != ps[k]->value.cols()) {
            throw CheckpointError("sensitivity checkpoint: parameter shape mismatch");
          }
          ps[k]->value = std::move(v);
        }
      }
      return m;
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(std::string("sensitivity checkpoint: ") + e.what());
    }
  }

 private:
  int state_dim_ = 0;
  int action_dim_ = 0;
  std::vector<Mlp> nets_;
};

struct FitReport {
  std::vector<double> initial_mse;  // validation MSE before training, per cost
  std::vector<double> final_mse;    // validation MSE after training, per cost
  double action_condition = 0.0;    // condition number of the action second-moment matrix
  std::vector<std::string> warnings;
};

struct StatewiseResult {
  SensitivityModel sensitivity;
  FitReport fit;
  ConstraintSet constraint;
  PretrainResult flow;
};

class InsufficientData : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Fits w_i by minimizing (c_i(s) + w_i(s) . a - c_i(s'))^2 on an 80/20
// train/validation split of the transitions.
inline FitReport fit_sensitivity(SensitivityModel& model, const Environment& env,
                                 const std::vector<Transition>& data, const StatewiseConfig& cfg, Rng& rng) {
  const int k = model.num_costs();
  const int d = model.action_dim();
  const Eigen::Index n = static_cast<Eigen::Index>(data.size());
  Matrix S(n, model.state_dim()), A(n, d), C(n, k), Cn(n, k);
  for (Eigen::Index r = 0; r < n; ++r) {
    const Transition& t = data[static_cast<std::size_t>(r)];
    S.row(r) = t.state.transpose();
    A.row(r) = t.action.transpose();
    C.row(r) = env.costs(t.state).transpose();
    Cn.row(r) = env.costs(t.next_state).transpose();
  }

  FitReport rep;
  const Matrix gram = A.transpose() * A / static_cast<double>(std::max<Eigen::Index>(n, 1));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(Eigen::MatrixXd(gram), Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff(), hi = eig.eigenvalues().maxCoeff();
  rep.action_condition = lo > 0 ? hi / lo : std::numeric_limits<double>::infinity();
  if (!(rep.action_condition < cfg.condition_limit)) {
    std::ostringstream os;
    os << "sensitivity fit is degenerate: action second-moment condition number " << rep.action_condition
       << " (actions lack excitation)";
    rep.warnings.push_back(os.str());
  }

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::shuffle(order.begin(), order.end(), rng.engine());
  const Eigen::Index n_train = std::max<Eigen::Index>(1, (n * 4) / 5);
  auto take = [&](const Matrix& m, Eigen::Index from, Eigen::Index to) {
    Matrix out(to - from, m.cols());
    for (Eigen::Index i = from; i < to; ++i) out.row(i - from) = m.row(order[static_cast<std::size_t>(i)]);
    return out;
  };
  const Matrix Sv = take(S, n_train, n), Av = take(A, n_train, n), Cv = take(C, n_train, n), Cnv = take(Cn, n_train, n);

  auto val_mse = [&](const Mlp& net, int i) {
    if (Sv.rows() == 0) return 0.0;
    const Matrix w = net.forward(Sv);
    const Vector pred = Cv.col(i) + w.cwiseProduct(Av).rowwise().sum();
    return (pred - Cnv.col(i)).squaredNorm() / static_cast<double>(Sv.rows());
  };

  for (int i = 0; i < k; ++i) {
    Mlp& net = model.nets()[static_cast<std::size_t>(i)];
    rep.initial_mse.push_back(val_mse(net, i));
    Adam opt(net.parameters(), cfg.fit_lr);
    const Eigen::Index b = std::min<Eigen::Index>(cfg.fit_batch, n_train);
    for (int epoch = 0; epoch < cfg.fit_epochs; ++epoch) {
      Matrix sb(b, S.cols()), ab(b, d), target(b, 1);
      for (Eigen::Index r = 0; r < b; ++r) {
        const Eigen::Index idx = order[rng.index(static_cast<std::size_t>(n_train))];
        sb.row(r) = S.row(idx);
        ab.row(r) = A.row(idx);
        target(r, 0) = Cn(idx, i) - C(idx, i);
      }
      ad::Tape tape;
      ad::Value w = net.forward(tape, tape.constant(sb));
      ad::Value pred = ad::row_sum(ad::mul(w, tape.constant(ab)));
      tape.backward(ad::mean(ad::square(ad::sub(pred, tape.constant(target)))));
      opt.step();
    }
    rep.final_mse.push_back(val_mse(net, i));
  }
  return rep;
}

// Collects random-policy transitions, fits the sensitivities, then trains a
// flow on the linearized constraints with states drawn from the visited ones.
inline StatewiseResult pretrain_statewise(Environment& env, const StatewiseConfig& cfg, const Policy& behaviour = {}) {
  if (env.num_costs() == 0) throw std::invalid_argument(env.id() + " exposes no per-state costs");
  if (cfg.rollout_steps < cfg.flow.batch || cfg.rollout_steps < cfg.fit_batch) {
    throw InsufficientData("pretrain_statewise: " + std::to_string(cfg.rollout_steps) +
                           " rollout steps is fewer than the batch size");
  }
  Rng root(cfg.flow.seed);
  Rng rollout_rng = root.derive("statewise-rollout");
  Rng init_rng = root.derive("statewise-init");
  Rng fit_rng = root.derive("statewise-fit");

  Rollout data = rollout(env, behaviour ? behaviour : random_policy(env.action_dim()), cfg.rollout_steps, rollout_rng);
  StatewiseResult res;
  res.sensitivity = SensitivityModel(env.state_dim(), env.action_dim(), env.num_costs(), cfg.hidden, init_rng);
  res.fit = fit_sensitivity(res.sensitivity, env, data.transitions, cfg, fit_rng);
  res.constraint = catalog::linear_statewise(env.num_costs(), env.action_dim(), cfg.margin);

  Matrix pool(static_cast<Eigen::Index>(data.transitions.size()), env.state_dim());
  for (std::size_t i = 0; i < data.transitions.size(); ++i) pool.row(static_cast<Eigen::Index>(i)) = data.transitions[i].state.transpose();
  const SensitivityModel& sens = res.sensitivity;
  StateSampler sampler = [&pool, &sens, &env](Eigen::Index n, Rng& rng) {
    Matrix s(n, pool.cols());
    for (Eigen::Index r = 0; r < n; ++r) s.row(r) = pool.row(static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(pool.rows()))));
    return sens.features(s, env);
  };
  res.flow = pretrain(cfg.flow, res.constraint, sampler);
  return res;
}

}  // namespace cvflow
