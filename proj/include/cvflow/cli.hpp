#pragma once

// Command-line front end. Kept in a header so tests can drive it in-process.

#include "cvflow/config.hpp"
#include "cvflow/envs.hpp"
#include "cvflow/flow_train.hpp"
#include "cvflow/metrics.hpp"
#include "cvflow/rl.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace cvflow::cli {

namespace fs = std::filesystem;

struct CommonOptions {
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<long long> seed;
  std::string out;
  std::string run_name;
};

inline void add_common(CLI::App* app, CommonOptions& c) {
  app->add_option("--config", c.config_file, "config file with [section] key = value lines")->check(CLI::ExistingFile);
  app->add_option("--set", c.sets, "override one key, e.g. --set flow-train.epochs=500 (repeatable)");
  app->add_option("--seed", c.seed, "root seed");
  app->add_option("--out", c.out, "output root (default: $CVFLOW_OUTDIR, then output-dir)");
  app->add_option("--run-name", c.run_name, "run directory name (default: <command>-<UTC timestamp>-s<seed>)");
}

// Defaults, then the config file, then --set, then dedicated flags.
inline RunConfig build_config(const CommonOptions& c, const std::vector<std::pair<std::string, std::string>>& flags) {
  RunConfig cfg;
  if (!c.config_file.empty()) cfg.load_file(c.config_file);
  for (const std::string& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects KEY=VALUE, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1), "--set " + kv);
  }
  if (c.seed) cfg.set("seed", std::to_string(*c.seed), "--seed");
  for (const auto& [k, v] : flags) {
    if (!v.empty()) cfg.set(k, v, "flag for " + k);
  }
  return cfg;
}

inline std::string utc_stamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return buf;
}

// Creates the run directory and writes config.resolved into it.
inline fs::path make_run_dir(RunConfig& cfg, const CommonOptions& c, const std::string& command) {
  std::string root = cfg.text("output-dir");
  if (const char* env = std::getenv("CVFLOW_OUTDIR"); env && *env) root = env;
  if (!c.out.empty()) root = c.out;
  cfg.set("output-dir", root, "resolved output root");
  fs::path dir;
  if (!c.run_name.empty()) {
    dir = fs::path(root) / c.run_name;
  } else {
    const std::string base = command + "-" + utc_stamp() + "-s" + cfg.text("seed");
    dir = fs::path(root) / base;
    for (int k = 2; fs::exists(dir); ++k) dir = fs::path(root) / (base + "-" + std::to_string(k));
  }
  fs::create_directories(dir);
  cfg.write_resolved((dir / "config.resolved").string());
  return dir;
}

inline ConstraintSet constraint_from(const RunConfig& cfg) { return catalog::lookup(cfg.text("constraint")); }

// Everything an agent needs on one environment. Not movable: the view
// points into it.
struct Task {
  std::unique_ptr<Environment> env;
  ConstraintSet cs;
  std::optional<SensitivityModel> sensitivity;
  std::optional<FlowModel> flow;
  ConstraintView view;

  Task() = default;
  Task(const Task&) = delete;
  Task& operator=(const Task&) = delete;
};

inline nlohmann::json read_json(const std::string& path, const std::string& what) {
  std::ifstream in(path);
  if (!in) throw CheckpointError(what + ": cannot read " + path);
  try {
    nlohmann::json j;
    in >> j;
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(what + ": corrupt file " + path + " (" + e.what() + ")");
  }
}

// `flow` may name a checkpoint file or a run directory holding flow.json
// (and sensitivity.json for state-cost environments).
inline std::unique_ptr<Task> make_task(const RunConfig& cfg, bool need_flow) {
  auto t = std::make_unique<Task>();
  t->env = make_env(cfg.text("env"));
  std::string flow_path = cfg.text("agent-train.flow");
  std::string sens_path = cfg.text("agent-train.sensitivity");
  if (!flow_path.empty() && fs::is_directory(flow_path)) {
    const fs::path dir = flow_path;
    flow_path = (dir / "flow.json").string();
    if (sens_path.empty() && fs::exists(dir / "sensitivity.json")) sens_path = (dir / "sensitivity.json").string();
  }
  if (t->env->num_costs() > 0) {
    if (sens_path.empty()) {
      throw std::invalid_argument(t->env->id() +
                                  " has per-state costs; pass --sensitivity <file> or --flow <pretrain-statewise run dir>");
    }
    t->sensitivity = SensitivityModel::from_json(read_json(sens_path, "sensitivity checkpoint"));
    if (t->sensitivity->state_dim() != t->env->state_dim() || t->sensitivity->action_dim() != t->env->action_dim() ||
        t->sensitivity->num_costs() != t->env->num_costs()) {
      throw CheckpointError("sensitivity checkpoint " + sens_path + " does not match environment " + t->env->id());
    }
    t->cs = catalog::linear_statewise(t->env->num_costs(), t->env->action_dim(), cfg.real("statewise.margin"));
    const SensitivityModel* sens = &*t->sensitivity;
    const Environment* env = t->env.get();
    t->view = ConstraintView{&t->cs, [sens, env](const Matrix& s) { return sens->features(s, *env); }};
  } else {
    const ConstraintSet* cs = t->env->action_constraint();
    if (!cs) throw std::invalid_argument(t->env->id() + " defines no action constraint");
    t->cs = *cs;
    t->view = ConstraintView{&t->cs, {}};
  }
  if (need_flow) {
    if (flow_path.empty()) throw std::invalid_argument(cfg.text("agent-train.algo") + " needs --flow <checkpoint>");
    t->flow = load_checkpoint(flow_path, t->env->action_dim());
  }
  return t;
}

inline bool algo_needs_flow(const std::string& algo) { return algo == "sac-cvflow" || algo == "ddpg-cvflow"; }

inline void write_quality(const std::string& path, const FlowQualityReport& r, BaseKind base) {
  csv::Writer w(path, {"constraint", "base", "n", "n_states", "accuracy", "recall_uniform_base", "f1"});
  w.row({r.constraint, to_string(base), csv::num(static_cast<long long>(r.n_samples)), csv::num(r.n_states),
         csv::num(r.accuracy), r.recall ? csv::num(*r.recall) : "nan", r.recall ? csv::num(r.f1) : "nan"});
}

// ---- subcommands ------------------------------------------------------------

inline int cmd_train_flow(RunConfig cfg, const CommonOptions& c, std::ostream& out) {
  const ConstraintSet cs = constraint_from(cfg);
  const fs::path dir = make_run_dir(cfg, c, "train-flow");
  FlowTrainConfig tc = cfg.flow_train();
  tc.log_path = (dir / "flowlog.csv").string();
  tc.checkpoint_path = (dir / "flow.json").string();
  FlowQualityReport rep;
  if (cfg.flag("flow-train.compare")) {
    ComparisonConfig cc;
    cc.train = tc;
    cc.eval_every = static_cast<int>(cfg.integer("flow-train.compare-every"));
    cc.final = cfg.metrics();
    cc.csv_path = (dir / "compare.csv").string();
    const ComparisonResult r = compare_standard_flow(cs, cc);
    rep = r.cvflow_final;
    out << "standard-flow accuracy " << csv::num(r.standard_final.accuracy) << "\n";
  } else {
    const PretrainResult r = pretrain(tc, cs);
    if (r.diverged) out << "warning: " << r.message << "\n";
    Rng rng = Rng(tc.seed).derive("final-eval");
    rep = quality_report(r.model, cs, rng, cfg.metrics());
  }
  write_quality((dir / "quality.csv").string(), rep, tc.base);
  out << "accuracy " << csv::num(rep.accuracy);
  if (rep.recall) out << " recall " << csv::num(*rep.recall) << " f1 " << csv::num(rep.f1);
  out << "\nrun directory " << dir.string() << "\n";
  return 0;
}

inline int cmd_eval_flow(RunConfig cfg, const CommonOptions& c, const std::string& flow_path, std::ostream& out) {
  const ConstraintSet cs = constraint_from(cfg);
  const FlowModel flow = load_checkpoint(flow_path, cs.action_dim(), cs.feature_dim());
  const fs::path dir = make_run_dir(cfg, c, "eval-flow");
  Rng rng = Rng(static_cast<std::uint64_t>(cfg.integer("seed"))).derive("eval-flow");
  const FlowQualityReport rep = quality_report(flow, cs, rng, cfg.metrics());
  write_quality((dir / "report.csv").string(), rep, flow.base().kind());
  out << "accuracy " << csv::num(rep.accuracy);
  if (rep.recall) out << " recall " << csv::num(*rep.recall) << " f1 " << csv::num(rep.f1);
  out << "\nrun directory " << dir.string() << "\n";
  return 0;
}

inline int cmd_train_agent(RunConfig cfg, const CommonOptions& c, std::ostream& out) {
  AgentConfig ac = cfg.agent();
  auto task = make_task(cfg, algo_needs_flow(ac.algo));
  const fs::path dir = make_run_dir(cfg, c, "train-agent");
  ac.runlog_path = (dir / "runlog.csv").string();
  ac.steps_path = (dir / "steps.csv").string();
  ac.checkpoint_path = (dir / "agent.json").string();
  auto agent = make_agent(*task->env, task->flow ? &*task->flow : nullptr, task->view, ac);
  const TrainResult r = train_agent(*task->env, *agent, task->view, ac, ac.algo == "sac-proj");
  csv::Writer w((dir / "summary.csv").string(),
                {"final_return", "episodes", "violation_episodes", "cv_count_pct", "cv_magnitude", "projections_fired",
                 "projection_warnings"});
  w.row({csv::num(mean_of(r.final_eval_returns)), csv::num(r.episodes), csv::num(r.violation_episodes),
         csv::num(r.cv.count_pct), csv::num(r.cv.magnitude), csv::num(static_cast<long long>(r.projections)),
         csv::num(static_cast<long long>(r.projection_warnings))});
  out << "final return " << csv::num(mean_of(r.final_eval_returns)) << " cv-count % " << csv::num(r.cv.count_pct)
      << " violation episodes " << r.violation_episodes << "\nrun directory " << dir.string() << "\n";
  return 0;
}

inline int cmd_eval_agent(RunConfig cfg, const CommonOptions& c, const std::string& agent_path, std::ostream& out) {
  const nlohmann::json j = read_json(agent_path, "agent checkpoint");
  if (!j.contains("algo")) throw CheckpointError("agent checkpoint " + agent_path + " has no algo field");
  cfg.set("agent-train.algo", j["algo"].get<std::string>(), agent_path);
  AgentConfig ac = cfg.agent();
  auto task = make_task(cfg, algo_needs_flow(ac.algo));
  auto agent = make_agent(*task->env, task->flow ? &*task->flow : nullptr, task->view, ac);
  agent->from_json(j);
  const fs::path dir = make_run_dir(cfg, c, "eval-agent");
  int violations = 0;
  const int episodes = static_cast<int>(cfg.integer("eval.episodes"));
  const std::vector<double> returns =
      evaluate(*agent, *task->env, episodes, Rng(ac.seed).derive("eval-agent"), &violations);
  csv::Writer w((dir / "eval.csv").string(), {"episode", "return"});
  for (std::size_t i = 0; i < returns.size(); ++i) w.row({csv::num(i), csv::num(returns[i])});
  out << "mean return " << csv::num(mean_of(returns)) << " violation episodes " << violations << "\nrun directory "
      << dir.string() << "\n";
  return 0;
}

inline int cmd_pretrain_statewise(RunConfig cfg, const CommonOptions& c, std::ostream& out) {
  auto env = make_env(cfg.text("env"));
  StatewiseConfig sc = cfg.statewise();
  cfg.set("constraint", catalog::linear_statewise(env->num_costs(), env->action_dim(), sc.margin).id(), "statewise");
  const fs::path dir = make_run_dir(cfg, c, "pretrain-statewise");
  sc.flow.log_path = (dir / "flowlog.csv").string();
  sc.flow.checkpoint_path = (dir / "flow.json").string();
  const StatewiseResult r = pretrain_statewise(*env, sc);
  {
    std::ofstream s(dir / "sensitivity.json");
    if (!s) throw CheckpointError("cannot write " + (dir / "sensitivity.json").string());
    s << r.sensitivity.to_json().dump(1) << '\n';
  }
  csv::Writer w((dir / "fit.csv").string(), {"cost", "initial_mse", "final_mse"});
  for (std::size_t i = 0; i < r.fit.final_mse.size(); ++i) {
    w.row({csv::num(i), csv::num(r.fit.initial_mse[i]), csv::num(r.fit.final_mse[i])});
  }
  for (const std::string& warn : r.fit.warnings) out << "warning: " << warn << "\n";
  const double acc = r.flow.log.empty() ? 0.0 : r.flow.log.back().accuracy;
  out << "final batch accuracy " << csv::num(acc) << "\nrun directory " << dir.string() << "\n";
  return 0;
}

// Reads config.resolved back into key/value pairs of one section.
inline std::string resolved_value(const fs::path& file, const std::string& section, const std::string& key) {
  std::ifstream in(file);
  if (!in) throw std::invalid_argument("missing " + file.string());
  std::string line, cur;
  while (std::getline(in, line)) {
    line = config_detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      cur = line.substr(1, line.size() - 2);
      continue;
    }
    const auto eq = line.find('=');
    if (cur == section && eq != std::string::npos && config_detail::trim(line.substr(0, eq)) == key) {
      return config_detail::trim(line.substr(eq + 1));
    }
  }
  throw std::invalid_argument(file.string() + " has no " + section + "." + key);
}

// Accepts run directories directly or a parent holding several of them.
inline std::vector<fs::path> collect_runs(const std::vector<std::string>& paths) {
  std::vector<fs::path> runs;
  for (const std::string& p : paths) {
    if (!fs::is_directory(p)) throw std::invalid_argument("run directory not found: " + p);
    if (fs::exists(fs::path(p) / "runlog.csv")) {
      runs.emplace_back(p);
      continue;
    }
    std::vector<fs::path> found;
    for (const auto& e : fs::directory_iterator(p)) {
      if (e.is_directory() && fs::exists(e.path() / "runlog.csv")) found.push_back(e.path());
    }
    if (found.empty()) throw std::invalid_argument(p + " holds no runlog.csv");
    std::sort(found.begin(), found.end());
    runs.insert(runs.end(), found.begin(), found.end());
  }
  return runs;
}

inline int cmd_report(RunConfig cfg, const CommonOptions& c, const std::vector<std::string>& run_paths,
                      std::ostream& out) {
  const std::vector<fs::path> runs = collect_runs(run_paths);
  const fs::path dir = make_run_dir(cfg, c, "report");
  csv::Writer w((dir / "report.csv").string(),
                {"run_id", "env", "algo", "final_return", "cv_count_pct", "cv_magnitude"});
  for (const fs::path& run : runs) {
    const csv::Table t = csv::read((run / "runlog.csv").string());
    if (t.rows.empty()) throw std::invalid_argument((run / "runlog.csv").string() + " has no rows");
    const auto col = [&](const char* name) {
      const int i = t.column(name);
      if (i < 0) throw std::invalid_argument((run / "runlog.csv").string() + " lacks column " + name);
      return t.rows.back()[static_cast<std::size_t>(i)];
    };
    const fs::path resolved = run / "config.resolved";
    w.row({run.filename().string(), resolved_value(resolved, "global", "env"),
           resolved_value(resolved, "agent-train", "algo"), col("eval_return"), col("cv_count_pct"),
           col("cv_magnitude")});
  }
  out << runs.size() << " runs\nrun directory " << dir.string() << "\n";
  return 0;
}

// Prints n rows of (latent, action, cv) and a trailing summary line.
inline int cmd_sample(const RunConfig& cfg, const std::string& flow_path, long n, std::ostream& out) {
  if (n < 0) throw std::invalid_argument("sample: --n must be >= 0");
  const ConstraintSet cs = constraint_from(cfg);
  const FlowModel flow = load_checkpoint(flow_path, cs.action_dim(), cs.feature_dim());
  Rng root(static_cast<std::uint64_t>(cfg.integer("seed")));
  Rng state_rng = root.derive("sample-states");
  Rng latent_rng = root.derive("sample-latent");
  const int d = cs.action_dim(), k = cs.feature_dim();
  std::vector<std::string> header;
  for (int i = 0; i < k; ++i) header.push_back("s_" + std::to_string(i));
  for (int i = 0; i < d; ++i) header.push_back("latent_" + std::to_string(i));
  for (int i = 0; i < d; ++i) header.push_back("a_" + std::to_string(i));
  header.push_back("cv");
  out << csv::join(header) << "\n";
  const Matrix states = cs.sample_states(n, state_rng);
  const Matrix latent = flow.base().sample(n, latent_rng);
  const Matrix actions = n > 0 ? flow.forward(latent, states).values : Matrix(0, d);
  const Vector cv = n > 0 ? cs.cv_batch(actions, states, cfg.real("epsilon")) : Vector();
  long feasible = 0;
  for (Eigen::Index r = 0; r < n; ++r) {
    std::vector<std::string> row;
    for (int i = 0; i < k; ++i) row.push_back(csv::num(states(r, i)));
    for (int i = 0; i < d; ++i) row.push_back(csv::num(latent(r, i)));
    for (int i = 0; i < d; ++i) row.push_back(csv::num(actions(r, i)));
    row.push_back(csv::num(cv(r)));
    feasible += cv(r) <= cfg.real("eval.tol");
    out << csv::join(row) << "\n";
  }
  const double acc = n > 0 ? static_cast<double>(feasible) / static_cast<double>(n) : std::nan("");
  out << "# summary n=" << n << " accuracy=" << csv::num(acc) << "\n";
  return 0;
}

// ---- entry point ------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"cvflow: constraint-violation flows and constrained agents", "cvflow"};
  app.require_subcommand(1);
  CommonOptions common;

  std::string constraint, base, env, algo, flow, sensitivity, agent_path;
  std::string epochs, lambda, steps, n_text, episodes, rollout;
  bool compare = false;
  long n = 10;
  std::vector<std::string> runs;

  CLI::App* train_flow = app.add_subcommand("train-flow", "train a flow on a constraint");
  add_common(train_flow, common);
  train_flow->add_option("--constraint", constraint, "constraint id, or file:<path> for a JSON definition");
  train_flow->add_option("--epochs", epochs, "training epochs");
  train_flow->add_option("--base", base, "gaussian or uniform");
  train_flow->add_option("--lambda", lambda, "violation penalty weight");
  train_flow->add_flag("--compare", compare, "also train a maximum-likelihood flow and write compare.csv");

  CLI::App* train_agent_cmd = app.add_subcommand("train-agent", "train an agent on an environment");
  add_common(train_agent_cmd, common);
  train_agent_cmd->add_option("--algo", algo, "sac-cvflow, ddpg-cvflow or sac-proj");
  train_agent_cmd->add_option("--env", env, "environment id");
  train_agent_cmd->add_option("--flow", flow, "flow checkpoint or pretrain-statewise run directory");
  train_agent_cmd->add_option("--sensitivity", sensitivity, "sensitivity checkpoint");
  train_agent_cmd->add_option("--steps", steps, "environment steps");

  CLI::App* eval_flow = app.add_subcommand("eval-flow", "accuracy, recall and F1 of a flow checkpoint");
  add_common(eval_flow, common);
  eval_flow->add_option("--flow", flow, "flow checkpoint")->required();
  eval_flow->add_option("--constraint", constraint, "constraint id");
  eval_flow->add_option("--n", n_text, "flow samples");

  CLI::App* eval_agent = app.add_subcommand("eval-agent", "greedy episodes of a trained agent");
  add_common(eval_agent, common);
  eval_agent->add_option("--agent", agent_path, "agent checkpoint")->required();
  eval_agent->add_option("--env", env, "environment id");
  eval_agent->add_option("--flow", flow, "flow checkpoint or pretrain-statewise run directory");
  eval_agent->add_option("--sensitivity", sensitivity, "sensitivity checkpoint");
  eval_agent->add_option("--episodes", episodes, "episodes");

  CLI::App* statewise = app.add_subcommand("pretrain-statewise", "fit cost sensitivities and train a flow on them");
  add_common(statewise, common);
  statewise->add_option("--env", env, "environment id with per-state costs");
  statewise->add_option("--rollout-steps", rollout, "random-policy steps");
  statewise->add_option("--epochs", epochs, "flow training epochs");

  CLI::App* report = app.add_subcommand("report", "aggregate run directories into report.csv");
  add_common(report, common);
  report->add_option("--runs", runs, "run directories, or parents holding them")->required();

  CLI::App* sample = app.add_subcommand("sample", "print flow samples with their violations");
  add_common(sample, common);
  sample->add_option("--flow", flow, "flow checkpoint")->required();
  sample->add_option("--constraint", constraint, "constraint id");
  sample->add_option("--n", n, "rows to print")->check(CLI::NonNegativeNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    CLI::App* sub = nullptr;
    for (CLI::App* s : app.get_subcommands()) sub = s;
    err << (sub ? sub->help() : app.help());
    return 2;
  }

  try {
    if (train_flow->parsed()) {
      RunConfig cfg = build_config(common, {{"constraint", constraint},
                                            {"flow-train.epochs", epochs},
                                            {"base", base},
                                            {"lambda", lambda},
                                            {"flow-train.compare", compare ? "on" : ""}});
      return cmd_train_flow(cfg, common, out);
    }
    if (train_agent_cmd->parsed()) {
      RunConfig cfg = build_config(common, {{"agent-train.algo", algo},
                                            {"env", env},
                                            {"agent-train.flow", flow},
                                            {"agent-train.sensitivity", sensitivity},
                                            {"agent-train.steps", steps}});
      return cmd_train_agent(cfg, common, out);
    }
    if (eval_flow->parsed()) {
      RunConfig cfg = build_config(common, {{"constraint", constraint}, {"eval.n", n_text}});
      return cmd_eval_flow(cfg, common, flow, out);
    }
    if (eval_agent->parsed()) {
      RunConfig cfg = build_config(common, {{"env", env},
                                            {"agent-train.flow", flow},
                                            {"agent-train.sensitivity", sensitivity},
                                            {"eval.episodes", episodes}});
      return cmd_eval_agent(cfg, common, agent_path, out);
    }
    if (statewise->parsed()) {
      RunConfig cfg = build_config(common, {{"env", env},
                                            {"statewise.rollout-steps", rollout},
                                            {"flow-train.epochs", epochs}});
      return cmd_pretrain_statewise(cfg, common, out);
    }
    if (report->parsed()) return cmd_report(build_config(common, {}), common, runs, out);
    if (sample->parsed()) return cmd_sample(build_config(common, {{"constraint", constraint}}), flow, n, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  err << app.help();
  return 2;
}

}  // namespace cvflow::cli
