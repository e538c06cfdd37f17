#pragma once

// Run configuration as flat `key = value` text grouped into [sections].
// Every key has a default and a type; unknown keys and malformed values are
// rejected with the offending source location.

#include "cvflow/flow_train.hpp"
#include "cvflow/metrics.hpp"
#include "cvflow/rl.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cvflow {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class ValueKind { Text, Real, Integer, Flag };

struct ConfigEntry {
  std::string section;
  std::string key;
  ValueKind kind = ValueKind::Text;
  std::string value;
  std::string help;
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline bool parse_real(const std::string& s, double& out) {
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && p == end;
}

inline bool parse_integer(const std::string& s, long long& out) {
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  if (ec == std::errc() && p == end) return true;
  // Accept integral values written in scientific notation, e.g. 1e6.
  double d = 0.0;
  if (!parse_real(s, d) || d != std::floor(d) || std::abs(d) > 9e18) return false;
  out = static_cast<long long>(d);
  return true;
}

inline bool parse_flag(const std::string& s, bool& out) {
  if (s == "on" || s == "true" || s == "1" || s == "yes") return out = true, true;
  if (s == "off" || s == "false" || s == "0" || s == "no") return out = false, true;
  return false;
}

inline const char* kind_name(ValueKind k) {
  switch (k) {
    case ValueKind::Real: return "a number";
    case ValueKind::Integer: return "an integer";
    case ValueKind::Flag: return "on/off";
    default: return "text";
  }
}

}  // namespace config_detail

class RunConfig {
 public:
  static constexpr const char* kGlobal = "global";

  RunConfig() {
    auto add = [this](const char* sec, const char* key, ValueKind k, const char* v, const char* help) {
      entries_.push_back({sec, key, k, v, help});
    };
    using K = ValueKind;
    add(kGlobal, "seed", K::Integer, "0", "root seed for every random stream");
    add(kGlobal, "output-dir", K::Text, "runs", "root directory for run directories");
    add(kGlobal, "constraint", K::Text, "R+L2", "constraint id");
    add(kGlobal, "env", K::Text, "pointmass2d:R+L2", "environment id");
    add(kGlobal, "lambda", K::Real, "1000", "violation penalty weight");
    add(kGlobal, "epsilon", K::Real, "1e-3", "equality tolerance");
    add(kGlobal, "alpha", K::Real, "0.2", "entropy temperature");
    add(kGlobal, "gamma", K::Real, "0.99", "discount");
    add(kGlobal, "tau", K::Real, "0.005", "target network averaging rate");
    add(kGlobal, "hidden", K::Integer, "64", "hidden width of policy and critic networks");
    add(kGlobal, "flow-layers", K::Integer, "6", "coupling layers");
    add(kGlobal, "flow-hidden", K::Integer, "64", "conditioner hidden width");
    add(kGlobal, "flow-hidden-layers", K::Integer, "2", "conditioner hidden layers");
    add(kGlobal, "scale-clamp", K::Real, "2", "coupling scale bound");
    add(kGlobal, "base", K::Text, "gaussian", "flow base distribution: gaussian or uniform");
    add(kGlobal, "entropy-correction", K::Flag, "on", "add |latent|^2/2 to the latent log-density");
    add(kGlobal, "single-critic", K::Flag, "off", "use one critic instead of a twin pair");

    add("flow-train", "epochs", K::Integer, "3000", "training epochs");
    add("flow-train", "batch", K::Integer, "512", "latent samples per epoch");
    add("flow-train", "lr", K::Real, "1e-3", "initial learning rate");
    add("flow-train", "lr-final", K::Real, "1e-4", "learning rate at the last epoch (cosine decay)");
    add("flow-train", "lambda-start", K::Real, "1", "initial lambda of the warmup ramp; 0 disables it");
    add("flow-train", "lambda-warmup", K::Real, "0.5", "fraction of epochs spent ramping lambda");
    add("flow-train", "compare", K::Flag, "off", "also train a maximum-likelihood flow and log both");
    add("flow-train", "compare-every", K::Integer, "100", "epochs between comparison reports");

    add("agent-train", "algo", K::Text, "sac-cvflow", "sac-cvflow, ddpg-cvflow or sac-proj");
    add("agent-train", "steps", K::Integer, "20000", "environment steps");
    add("agent-train", "batch", K::Integer, "256", "replay batch size");
    add("agent-train", "lr", K::Real, "3e-4", "learning rate");
    add("agent-train", "learning-starts", K::Integer, "1000", "uniform random steps before updates");
    add("agent-train", "buffer-size", K::Integer, "1000000", "replay capacity");
    add("agent-train", "updates-per-step", K::Integer, "1", "gradient updates per environment step");
    add("agent-train", "latent-clip", K::Real, "3", "latent action clip");
    add("agent-train", "ddpg-noise", K::Real, "1", "exploration noise scale for ddpg-cvflow");
    add("agent-train", "penalty-beta", K::Real, "1", "violation penalty on sac-proj rewards");
    add("agent-train", "eval-every", K::Integer, "1000", "steps between evaluations");
    add("agent-train", "eval-episodes", K::Integer, "5", "episodes per evaluation");
    add("agent-train", "flow", K::Text, "", "flow checkpoint or pretrain-statewise run directory");
    add("agent-train", "sensitivity", K::Text, "", "sensitivity checkpoint for environments with state costs");

    add("statewise", "rollout-steps", K::Integer, "10000", "random-policy steps collected for fitting");
    add("statewise", "fit-epochs", K::Integer, "2000", "sensitivity training epochs");
    add("statewise", "fit-batch", K::Integer, "256", "sensitivity batch size");
    add("statewise", "fit-lr", K::Real, "1e-3", "sensitivity learning rate");
    add("statewise", "hidden", K::Integer, "64", "sensitivity network width");
    add("statewise", "margin", K::Real, "0.005", "safety margin of the linearized constraint");

    add("eval", "n", K::Integer, "100000", "flow samples per report");
    add("eval", "n-states", K::Integer, "32", "conditioning states per report");
    add("eval", "max-attempts", K::Integer, "100000000", "rejection-sampling budget for recall");
    add("eval", "tol", K::Real, "1e-6", "feasibility tolerance");
    add("eval", "episodes", K::Integer, "10", "episodes for eval-agent");
  }

  const std::vector<ConfigEntry>& entries() const { return entries_; }

  // `name` is "section.key" or a bare global key.
  void set(const std::string& name, const std::string& value, const std::string& where = "override") {
    const auto dot = name.find('.');
    if (dot == std::string::npos) {
      set(kGlobal, name, value, where);
    } else {
      set(name.substr(0, dot), name.substr(dot + 1), value, where);
    }
  }

  void set(const std::string& section, const std::string& key, const std::string& raw, const std::string& where) {
    ConfigEntry& e = find(section, key, where);
    const std::string value = config_detail::trim(raw);
    double d = 0.0;
    long long i = 0;
    bool b = false;
    bool ok = true;
    if (e.kind == ValueKind::Real) ok = config_detail::parse_real(value, d);
    if (e.kind == ValueKind::Integer) ok = config_detail::parse_integer(value, i);
    if (e.kind == ValueKind::Flag) ok = config_detail::parse_flag(value, b);
    if (!ok) {
      throw ConfigError(where + ": " + section + "." + key + " must be " + config_detail::kind_name(e.kind) + ", got '" +
                        value + "'");
    }
    e.value = e.kind == ValueKind::Flag ? (b ? "on" : "off") : value;
  }

  void parse(std::istream& in, const std::string& source) {
    std::string line, section = kGlobal;
    for (int n = 1; std::getline(in, line); ++n) {
      const std::string where = source + ":" + std::to_string(n);
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      line = config_detail::trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError(where + ": unterminated section header");
        section = config_detail::trim(line.substr(1, line.size() - 2));
        if (!has_section(section)) throw ConfigError(where + ": unknown section [" + section + "]");
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
      set(section, config_detail::trim(line.substr(0, eq)), line.substr(eq + 1), where);
    }
  }

  void load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path);
    parse(in, path);
  }

  const std::string& text(const std::string& name) const {
    const auto dot = name.find('.');
    const std::string sec = dot == std::string::npos ? kGlobal : name.substr(0, dot);
    const std::string key = dot == std::string::npos ? name : name.substr(dot + 1);
    return const_cast<RunConfig*>(this)->find(sec, key, "lookup").value;
  }

  double real(const std::string& name) const {
    double d = 0.0;
    config_detail::parse_real(text(name), d);
    return d;
  }

  long long integer(const std::string& name) const {
    long long i = 0;
    config_detail::parse_integer(text(name), i);
    return i;
  }

  bool flag(const std::string& name) const { return text(name) == "on"; }

  std::string resolved() const {
    std::ostringstream out;
    std::string section;
    for (const ConfigEntry& e : entries_) {
      if (e.section != section) {
        if (!section.empty()) out << '\n';
        section = e.section;
        out << '[' << section << "]\n";
      }
      out << e.key << " = " << e.value << '\n';
    }
    return out.str();
  }

  void write_resolved(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << resolved();
  }

  FlowTrainConfig flow_train() const {
    FlowTrainConfig c;
    c.epochs = static_cast<int>(integer("flow-train.epochs"));
    c.batch = static_cast<int>(integer("flow-train.batch"));
    c.lr = real("flow-train.lr");
    c.lr_final = real("flow-train.lr-final");
    c.lambda = real("lambda");
    c.lambda_start = real("flow-train.lambda-start");
    c.lambda_warmup = real("flow-train.lambda-warmup");
    c.epsilon = real("epsilon");
    c.constraint = text("constraint");
    c.base = base_kind_from(text("base"));
    c.seed = static_cast<std::uint64_t>(integer("seed"));
    c.layers = static_cast<int>(integer("flow-layers"));
    c.hidden = static_cast<int>(integer("flow-hidden"));
    c.hidden_layers = static_cast<int>(integer("flow-hidden-layers"));
    c.scale_clamp = real("scale-clamp");
    return c;
  }

  AgentConfig agent() const {
    AgentConfig c;
    c.algo = text("agent-train.algo");
    c.steps = integer("agent-train.steps");
    c.batch = static_cast<int>(integer("agent-train.batch"));
    c.lr = real("agent-train.lr");
    c.gamma = real("gamma");
    c.tau = real("tau");
    c.alpha = real("alpha");
    c.learning_starts = integer("agent-train.learning-starts");
    c.buffer_size = integer("agent-train.buffer-size");
    c.hidden = static_cast<int>(integer("hidden"));
    c.updates_per_step = static_cast<int>(integer("agent-train.updates-per-step"));
    c.entropy_correction = flag("entropy-correction");
    c.single_critic = flag("single-critic");
    c.latent_clip = real("agent-train.latent-clip");
    c.ddpg_noise = real("agent-train.ddpg-noise");
    c.penalty_beta = real("agent-train.penalty-beta");
    c.eval_every = integer("agent-train.eval-every");
    c.eval_episodes = static_cast<int>(integer("agent-train.eval-episodes"));
    c.seed = static_cast<std::uint64_t>(integer("seed"));
    c.act.tol = real("eval.tol");
    return c;
  }

  StatewiseConfig statewise() const {
    StatewiseConfig c;
    c.rollout_steps = integer("statewise.rollout-steps");
    c.fit_epochs = static_cast<int>(integer("statewise.fit-epochs"));
    c.fit_batch = static_cast<int>(integer("statewise.fit-batch"));
    c.fit_lr = real("statewise.fit-lr");
    c.hidden = static_cast<int>(integer("statewise.hidden"));
    c.margin = real("statewise.margin");
    c.flow = flow_train();
    return c;
  }

  MetricOptions metrics() const {
    MetricOptions o;
    o.n = integer("eval.n");
    o.n_states = static_cast<int>(integer("eval.n-states"));
    o.max_attempts = integer("eval.max-attempts");
    o.tol = real("eval.tol");
    o.eps = real("epsilon");
    return o;
  }

 private:
  bool has_section(const std::string& s) const {
    for (const ConfigEntry& e : entries_) {
      if (e.section == s) return true;
    }
    return false;
  }

  ConfigEntry& find(const std::string& section, const std::string& key, const std::string& where) {
    for (ConfigEntry& e : entries_) {
      if (e.section == section && e.key == key) return e;
    }
    if (!has_section(section)) throw ConfigError(where + ": unknown section [" + section + "]");
    throw ConfigError(where + ": unknown key '" + key + "' in [" + section + "]");
  }

  std::vector<ConfigEntry> entries_;
};

}  // namespace cvflow
