#pragma once

// Flow quality (accuracy, recall, F1), constraint-violation statistics and
// the CV-Flow vs maximum-likelihood flow comparison.
//
//   accuracy  fraction of flow samples that are feasible
//   recall    fraction of uniformly drawn feasible actions whose inverse
//             lands in the latent box [-1, 1]^d (uniform base only)

#include "cvflow/autodiff.hpp"
#include "cvflow/constraints.hpp"
#include "cvflow/csv.hpp"
#include "cvflow/flow.hpp"
#include "cvflow/flow_train.hpp"
#include "cvflow/random.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace cvflow {

class ConstraintTooTight : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MetricOptions {
  long n = 100000;
  int n_states = 32;
  long max_attempts = 10000000;  // rejection-sampling budget for recall
  double tol = kFeasibleTol;
  double eps = 1e-3;
};

struct FlowQualityReport {
  double accuracy = 0.0;
  std::optional<double> recall;  // only defined for a uniform base
  double f1 = 0.0;
  long n_samples = 0;
  std::string constraint;
  int n_states = 0;
};

inline double f1_score(double accuracy, double recall) {
  return accuracy + recall > 0 ? 2.0 * accuracy * recall / (accuracy + recall) : 0.0;
}

namespace metrics_detail {

inline Matrix draw_states(const ConstraintSet& cs, int n_states, Rng& rng, const StateSampler& sampler) {
  if (sampler) return sampler(n_states, rng);
  return cs.sample_states(n_states, rng);
}

// Samples for state k out of n_states when n are split as evenly as possible.
inline long share(long n, int n_states, int k) { return n / n_states + (k < n % n_states ? 1 : 0); }

inline Matrix repeat_row(const Matrix& states, int k, long rows) {
  if (states.cols() == 0) return Matrix::Zero(rows, 0);
  return states.row(k).replicate(rows, 1);
}

}  // namespace metrics_detail

inline double accuracy(const FlowModel& flow, const ConstraintSet& cs, Rng& rng, const MetricOptions& o = {},
                       const StateSampler& sampler = {}) {
  if (o.n < 1) throw std::invalid_argument("accuracy: n must be >= 1");
  if (o.n_states < 1) throw std::invalid_argument("accuracy: n_states must be >= 1");
  const Matrix states = metrics_detail::draw_states(cs, o.n_states, rng, sampler);
  long hits = 0;
  for (int k = 0; k < o.n_states; ++k) {
    const long m = metrics_detail::share(o.n, o.n_states, k);
    if (m == 0) continue;
    const Matrix s = metrics_detail::repeat_row(states, k, m);
    const Vector cv = cs.cv_batch(flow.sample(m, s, rng), s, o.eps);
    hits += (cv.array() <= o.tol).count();
  }
  return static_cast<double>(hits) / static_cast<double>(o.n);
}

// n feasible actions for one state by uniform rejection sampling over A.
inline Matrix sample_feasible(const ConstraintSet& cs, const Vector& state, long n, Rng& rng, long& attempts,
                              long max_attempts, double tol = kFeasibleTol, double eps = 1e-3) {
  const int d = cs.action_dim();
  Matrix out(n, d);
  Vector a(d);
  long got = 0;
  while (got < n) {
    if (attempts >= max_attempts) {
      throw ConstraintTooTight("rejection sampling for " + cs.id() + " exceeded " + std::to_string(max_attempts) +
                               " attempts with " + std::to_string(got) + " of " + std::to_string(n) + " hits");
    }
    ++attempts;
    for (int i = 0; i < d; ++i) a(i) = rng.uniform(-1.0, 1.0);
    if (cs.cv(a, state, eps) <= tol) out.row(got++) = a.transpose();
  }
  return out;
}

// Fraction of latents inside [-1, 1]^d; actions the inverse cannot map
// (on the squash boundary) count as not covered.
inline long count_covered(const FlowModel& flow, const Matrix& actions, const Matrix& states) {
  long covered = 0;
  for (Eigen::Index r = 0; r < actions.rows(); ++r) {
    const Matrix s = states.cols() > 0 ? Matrix(states.row(r)) : Matrix::Zero(1, 0);
    try {
      const Matrix z = flow.inverse(Matrix(actions.row(r)), s).values;
      covered += (z.array().abs() <= 1.0).all();
    } catch (const DomainError&) {
    }
  }
  return covered;
}

inline double recall(const FlowModel& flow, const ConstraintSet& cs, Rng& rng, const MetricOptions& o = {},
                     const StateSampler& sampler = {}) {
  if (flow.base().kind() != BaseKind::Uniform) {
    throw std::invalid_argument("recall is defined only for a uniform base distribution");
  }
  if (o.n < 1) throw std::invalid_argument("recall: n must be >= 1");
  const Matrix states = metrics_detail::draw_states(cs, o.n_states, rng, sampler);
  long attempts = 0, covered = 0;
  for (int k = 0; k < o.n_states; ++k) {
    const long m = metrics_detail::share(o.n, o.n_states, k);
    if (m == 0) continue;
    const Vector state = states.cols() > 0 ? Vector(states.row(k).transpose()) : Vector();
    const Matrix a = sample_feasible(cs, state, m, rng, attempts, o.max_attempts, o.tol, o.eps);
    covered += count_covered(flow, a, metrics_detail::repeat_row(states, k, m));
  }
  return static_cast<double>(covered) / static_cast<double>(o.n);
}

inline FlowQualityReport quality_report(const FlowModel& flow, const ConstraintSet& cs, Rng& rng,
                                        const MetricOptions& o = {}, const StateSampler& sampler = {}) {
  FlowQualityReport rep;
  rep.constraint = cs.id();
  rep.n_samples = o.n;
  rep.n_states = o.n_states;
  Rng acc_rng = rng.derive("accuracy");
  Rng rec_rng = rng.derive("recall");
  rep.accuracy = accuracy(flow, cs, acc_rng, o, sampler);
  if (flow.base().kind() == BaseKind::Uniform) {
    rep.recall = recall(flow, cs, rec_rng, o, sampler);
    rep.f1 = f1_score(rep.accuracy, *rep.recall);
  }
  return rep;
}

// ---- constraint-violation statistics ------------------------------------------

struct CvStats {
  double count_pct = 0.0;  // 100 * (steps with cv_pre > 0) / steps
  double magnitude = 0.0;  // mean cv_pre over violating steps
  long steps = 0;
};

inline CvStats cv_stats(const std::vector<double>& cv_pre) {
  if (cv_pre.empty()) throw std::invalid_argument("cv_stats: empty run log");
  CvStats st;
  st.steps = static_cast<long>(cv_pre.size());
  long count = 0;
  double total = 0.0;
  for (double c : cv_pre) {
    if (c > 0) {
      ++count;
      total += c;
    }
  }
  st.count_pct = 100.0 * static_cast<double>(count) / static_cast<double>(st.steps);
  st.magnitude = count > 0 ? total / static_cast<double>(count) : 0.0;
  return st;
}

// Reads the cv_pre column of a per-step log.
inline CvStats cv_stats_from_csv(const std::string& path) {
  const csv::Table t = csv::read(path);
  const int col = t.column("cv_pre");
  if (col < 0) throw std::runtime_error(path + ": no cv_pre column");
  std::vector<double> cv;
  for (const auto& row : t.rows) cv.push_back(std::stod(row.at(static_cast<std::size_t>(col))));
  return cv_stats(cv);
}

// ---- standard-flow comparison -------------------------------------------------

// Negative log-likelihood of feasible actions under the flow. For a uniform
// base the log-density is replaced by -lambda * sum max(|z| - 1, 0) so the
// objective stays finite while latents outside the box are pushed back in.
inline ad::Value nll_loss(ad::Tape& tape, FlowModel& model, const Matrix& actions, const Matrix& states,
                          double lambda) {
  FlowModel::TapeOutput inv = model.inverse(tape, actions, states);
  ad::Value z = inv.action;
  ad::Value log_base;
  if (model.base().kind() == BaseKind::Gaussian) {
    const double c = -0.5 * model.action_dim() * std::log(2.0 * std::numbers::pi);
    log_base = ad::add_scalar(ad::scale(ad::row_sum(ad::square(z)), -0.5), c);
  } else {
    log_base = ad::scale(ad::row_sum(ad::relu(ad::add_scalar(ad::abs(z), -1.0))), -lambda);
  }
  return ad::neg(ad::mean(ad::add(log_base, inv.logdet)));
}

struct ComparisonRow {
  int epoch = 0;
  std::string arm;  // "cvflow" or "standard"
  FlowQualityReport report;
};

struct ComparisonResult {
  std::vector<ComparisonRow> rows;
  FlowQualityReport cvflow_final;
  FlowQualityReport standard_final;
};

struct ComparisonConfig {
  FlowTrainConfig train;
  int eval_every = 100;
  MetricOptions eval{4000, 32};    // per-epoch metrics
  MetricOptions final{100000, 32};  // final reports
  std::string csv_path;
};

// Maximum-likelihood training on rejection-sampled feasible actions, with the
// same initialization, batch size, schedule and epoch count as pretrain().
inline FlowModel train_standard_flow(const FlowTrainConfig& cfg, const ConstraintSet& cs,
                                     const std::function<void(int, const FlowModel&)>& on_epoch = {}) {
  Rng root(cfg.seed);
  Rng init_rng = root.derive("flow-init");
  Rng data_rng = root.derive("standard-data");
  Rng state_rng = root.derive("flow-states");
  FlowModel model(flow_config_for(cfg, cs.action_dim(), cs.feature_dim()), init_rng);
  Adam opt(model.parameters(), cfg.lr);
  if (on_epoch) on_epoch(0, model);
  long attempts = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const Matrix states = cs.sample_states(cfg.batch, state_rng);
    Matrix actions(cfg.batch, cs.action_dim());
    for (int r = 0; r < cfg.batch; ++r) {
      const Vector s = states.cols() > 0 ? Vector(states.row(r).transpose()) : Vector();
      attempts = 0;
      actions.row(r) = sample_feasible(cs, s, 1, data_rng, attempts, 10000000).row(0);
    }
    ad::Tape tape;
    tape.backward(nll_loss(tape, model, actions, states, cfg.lambda));
    const double progress = cfg.epochs > 1 ? static_cast<double>(epoch - 1) / (cfg.epochs - 1) : 0.0;
    opt.set_learning_rate(cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + std::cos(std::numbers::pi * progress)));
    opt.step();
    if (on_epoch) on_epoch(epoch, model);
  }
  return model;
}

inline ComparisonResult compare_standard_flow(const ConstraintSet& cs, const ComparisonConfig& cfg) {
  ComparisonResult res;
  std::vector<ComparisonRow> cv_rows, std_rows;
  auto recorder = [&](std::vector<ComparisonRow>& rows, const char* arm) {
    return [&rows, arm, &cfg, &cs](int epoch, const FlowModel& m) {
      if (epoch % cfg.eval_every != 0 && epoch != cfg.train.epochs) return;
      Rng r = Rng(cfg.train.seed).derive("eval").derive(std::to_string(epoch));
      rows.push_back({epoch, arm, quality_report(m, cs, r, cfg.eval)});
    };
  };
  PretrainResult cvflow = pretrain(cfg.train, cs, {}, recorder(cv_rows, "cvflow"));
  FlowModel standard = train_standard_flow(cfg.train, cs, recorder(std_rows, "standard"));

  Rng final_rng = Rng(cfg.train.seed).derive("final-eval");
  res.cvflow_final = quality_report(cvflow.model, cs, final_rng, cfg.final);
  res.standard_final = quality_report(standard, cs, final_rng, cfg.final);
  for (std::size_t i = 0; i < std::max(cv_rows.size(), std_rows.size()); ++i) {
    if (i < cv_rows.size()) res.rows.push_back(cv_rows[i]);
    if (i < std_rows.size()) res.rows.push_back(std_rows[i]);
  }
  if (!cfg.csv_path.empty()) {
    csv::Writer w(cfg.csv_path, {"epoch", "arm", "accuracy", "recall", "f1"});
    for (const ComparisonRow& r : res.rows) {
      w.row({csv::num(r.epoch), r.arm, csv::num(r.report.accuracy),
             r.report.recall ? csv::num(*r.report.recall) : "nan", r.report.recall ? csv::num(r.report.f1) : "nan"});
    }
  }
  return res;
}

}  // namespace cvflow
