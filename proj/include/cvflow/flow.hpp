#pragma once

// Conditional normalizing flow: a stack of affine coupling layers conditioned
// on state features, followed by an optional tanh squash into A = [-1, 1]^d.
//
//   a = squash(f_L o ... o f_1(latent; s))
//   log q(a|s) = log q_base(latent) - log|det J(latent; s)|
//
// Each coupling layer keeps the masked coordinates and maps the others as
// x -> x * exp(scale) + shift, where (scale, shift) come from an MLP on the
// masked coordinates and the state. The scale is soft-clamped c * tanh(./c).
// With one action dimension there is nothing to condition on besides the
// state, so layers become state-conditioned elementwise affine maps.

#include "cvflow/autodiff.hpp"
#include "cvflow/nn.hpp"
#include "cvflow/random.hpp"

#include "json.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cvflow {

enum class BaseKind { Gaussian, Uniform };

inline std::string to_string(BaseKind k) { return k == BaseKind::Gaussian ? "gaussian" : "uniform"; }

inline BaseKind base_kind_from(const std::string& s) {
  if (s == "gaussian") return BaseKind::Gaussian;
  if (s == "uniform") return BaseKind::Uniform;
  throw std::invalid_argument("unknown base distribution '" + s + "' (expected gaussian|uniform)");
}

// Standard Gaussian or uniform on [-1, 1]^d.
class BaseDistribution {
 public:
  BaseDistribution() = default;
  BaseDistribution(BaseKind kind, int dim) : kind_(kind), dim_(dim) {}

  BaseKind kind() const { return kind_; }
  int dim() const { return dim_; }

  Matrix sample(Eigen::Index n, Rng& rng) const {
    return kind_ == BaseKind::Gaussian ? rng.normal_matrix(n, dim_) : rng.uniform_matrix(n, dim_, -1.0, 1.0);
  }

  bool in_support(const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
    return kind_ == BaseKind::Gaussian || (x.array().abs() <= 1.0).all();
  }

  Vector log_density(const Matrix& x) const {
    Vector out(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      if (kind_ == BaseKind::Gaussian) {
        out(r) = -0.5 * x.row(r).squaredNorm() - 0.5 * dim_ * std::log(2.0 * std::numbers::pi);
      } else {
        out(r) = in_support(x.row(r)) ? -dim_ * std::log(2.0) : -std::numeric_limits<double>::infinity();
      }
    }
    return out;
  }

 private:
  BaseKind kind_ = BaseKind::Gaussian;
  int dim_ = 1;
};

struct FlowConfig {
  int action_dim = 2;
  int state_dim = 0;
  int layers = 6;
  int hidden = 64;
  int hidden_layers = 2;
  double scale_clamp = 2.0;
  bool squash = true;
  BaseKind base = BaseKind::Gaussian;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Stable log(1 - tanh(z)^2) = 2 * (log 2 - z - softplus(-2z)).
inline double log_dtanh(double z) {
  const double x = -2.0 * z;
  const double sp = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
  return 2.0 * (std::numbers::ln2 - z - sp);
}

class CouplingLayer {
 public:
  CouplingLayer() = default;

  CouplingLayer(const FlowConfig& cfg, int index, Rng& rng) : d_(cfg.action_dim), clamp_(cfg.scale_clamp) {
    mask_ = Matrix::Zero(1, d_);
    if (d_ >= 2) {
      for (int i = 0; i < d_; ++i) mask_(0, i) = ((i + index) % 2 == 0) ? 1.0 : 0.0;
    }
    const Eigen::Index in = (d_ >= 2 ? d_ : 0) + cfg.state_dim;
    std::vector<Eigen::Index> hidden(static_cast<std::size_t>(cfg.hidden_layers), cfg.hidden);
    conditioner_ = Mlp(in, hidden, 2 * d_, Activation::Tanh, rng, /*zero_final=*/true);
  }

  const Matrix& mask() const { return mask_; }
  void set_mask(Matrix m) { mask_ = std::move(m); }
  Mlp& conditioner() { return conditioner_; }
  const Mlp& conditioner() const { return conditioner_; }

  // Returns (scale, shift), both zero on masked coordinates.
  std::pair<Matrix, Matrix> scale_shift(const Matrix& x, const Matrix& state) const {
    Matrix out = conditioner_.forward(conditioner_input(x, state));
    Matrix free = free_mask(x.rows());
    Matrix s = (clamp_ * (out.leftCols(d_).array() / clamp_).tanh()).matrix().cwiseProduct(free);
    Matrix t = out.rightCols(d_).cwiseProduct(free);
    return {std::move(s), std::move(t)};
  }

  std::pair<ad::Value, ad::Value> scale_shift(ad::Tape& tape, const ad::Value& x, const Matrix& state,
                                              ParamMode mode) {
    const Eigen::Index b = x.rows();
    ad::Value in;
    if (d_ >= 2) {
      ad::Value masked = ad::mul(x, tape.constant(mask_.replicate(b, 1)));
      in = state.cols() > 0 ? ad::concat({masked, tape.constant(state)}) : masked;
    } else {
      in = tape.constant(state.cols() > 0 ? state : Matrix::Zero(b, 0));
    }
    ad::Value out = conditioner_.forward(tape, in, mode);
    auto parts = ad::split(out, {d_, d_});
    ad::Value free = tape.constant(free_mask(b));
    ad::Value s = ad::mul(ad::scale(ad::tanh(ad::scale(parts[0], 1.0 / clamp_)), clamp_), free);
    ad::Value t = ad::mul(parts[1], free);
    return {s, t};
  }

 private:
  Matrix conditioner_input(const Matrix& x, const Matrix& state) const {
    const Eigen::Index b = x.rows();
    if (d_ < 2) return state.cols() > 0 ? state : Matrix::Zero(b, 0);
    Matrix in(b, d_ + state.cols());
    in.leftCols(d_) = x.cwiseProduct(mask_.replicate(b, 1));
    if (state.cols() > 0) in.rightCols(state.cols()) = state;
    return in;
  }

  Matrix free_mask(Eigen::Index b) const { return (1.0 - mask_.array()).matrix().replicate(b, 1); }

  int d_ = 1;
  double clamp_ = 2.0;
  Matrix mask_;
  Mlp conditioner_;
};

class FlowModel {
 public:
  struct TapeOutput {
    ad::Value action;  // B x d
    ad::Value logdet;  // B x 1
  };

  struct Output {
    Matrix values;  // B x d
    Vector logdet;
  };

  FlowModel() = default;

  FlowModel(const FlowConfig& cfg, Rng& rng) : cfg_(cfg), base_(cfg.base, cfg.action_dim) {
    if (cfg.action_dim < 1) throw std::invalid_argument("flow: action_dim must be >= 1");
    if (cfg.state_dim < 0) throw std::invalid_argument("flow: state_dim must be >= 0");
    if (cfg.layers < 1) throw std::invalid_argument("flow: need at least one layer");
    if (cfg.scale_clamp <= 0) throw std::invalid_argument("flow: scale_clamp must be positive");
    for (int i = 0; i < cfg.layers; ++i) layers_.emplace_back(cfg, i, rng);
  }

  const FlowConfig& config() const { return cfg_; }
  const BaseDistribution& base() const { return base_; }
  int action_dim() const { return cfg_.action_dim; }
  int state_dim() const { return cfg_.state_dim; }
  std::vector<CouplingLayer>& layers() { return layers_; }
  const std::vector<CouplingLayer>& layers() const { return layers_; }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> ps;
    for (CouplingLayer& l : layers_) {
      auto lp = l.conditioner().parameters();
      ps.insert(ps.end(), lp.begin(), lp.end());
    }
    return ps;
  }

  std::vector<const Parameter*> parameters() const {
    std::vector<const Parameter*> ps;
    for (const CouplingLayer& l : layers_) {
      auto lp = l.conditioner().parameters();
      ps.insert(ps.end(), lp.begin(), lp.end());
    }
    return ps;
  }

  // Differentiable forward pass; the latent may itself require gradients.
  TapeOutput forward(ad::Tape& tape, ad::Value latent, const Matrix& state, ParamMode mode = ParamMode::Track) {
    check_batch(latent.rows(), latent.cols(), state, "forward");
    const Eigen::Index b = latent.rows();
    ad::Value x = latent;
    std::optional<ad::Value> logdet;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      auto [s, t] = layers_[i].scale_shift(tape, x, state, mode);
      x = ad::add(ad::mul(x, ad::exp(s)), t);
      if (!x.data().allFinite()) throw DomainError("flow forward: non-finite output at layer " + std::to_string(i));
      ad::Value ld = ad::row_sum(s);
      logdet = logdet ? ad::add(*logdet, ld) : ld;
    }
    if (!logdet) logdet = tape.constant(Matrix::Zero(b, 1));
    if (cfg_.squash) {
      // log(1 - tanh(z)^2) = 2 (log 2 - z - softplus(-2 z))
      ad::Value sp = ad::softplus(ad::scale(x, -2.0));
      ad::Value term = ad::scale(ad::add_scalar(ad::neg(ad::add(x, sp)), std::numbers::ln2), 2.0);
      logdet = ad::add(*logdet, ad::row_sum(term));
      x = ad::tanh(x);
    }
    return {x, *logdet};
  }

  // Differentiable inverse for fixed actions: returns (latent, log|det J_inverse|).
  TapeOutput inverse(ad::Tape& tape, const Matrix& action, const Matrix& state, ParamMode mode = ParamMode::Track) {
    check_batch(action.rows(), action.cols(), state, "inverse");
    Matrix z = action;
    Matrix ld0 = Matrix::Zero(action.rows(), 1);
    if (cfg_.squash) unsquash(z, ld0);
    ad::Value y = tape.constant(std::move(z));
    ad::Value logdet = tape.constant(std::move(ld0));
    for (std::size_t i = layers_.size(); i-- > 0;) {
      auto [s, t] = layers_[i].scale_shift(tape, y, state, mode);
      y = ad::mul(ad::sub(y, t), ad::exp(ad::neg(s)));
      logdet = ad::sub(logdet, ad::row_sum(s));
    }
    return {y, logdet};
  }

  Output forward(const Matrix& latent, const Matrix& state) const {
    check_batch(latent.rows(), latent.cols(), state, "forward");
    Matrix x = latent;
    Vector logdet = Vector::Zero(latent.rows());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      auto [s, t] = layers_[i].scale_shift(x, state);
      x = x.cwiseProduct(s.array().exp().matrix()) + t;
      if (!x.allFinite()) throw DomainError("flow forward: non-finite output at layer " + std::to_string(i));
      logdet += s.rowwise().sum();
    }
    if (cfg_.squash) {
      for (Eigen::Index r = 0; r < x.rows(); ++r) {
        for (Eigen::Index c = 0; c < x.cols(); ++c) {
          logdet(r) += log_dtanh(x(r, c));
          x(r, c) = std::tanh(x(r, c));
        }
      }
    }
    return {std::move(x), std::move(logdet)};
  }

  // Exact inverse; logdet is log|det| of the inverse map (= -forward logdet).
  Output inverse(const Matrix& action, const Matrix& state) const {
    check_batch(action.rows(), action.cols(), state, "inverse");
    Matrix y = action;
    Matrix ld = Matrix::Zero(action.rows(), 1);
    if (cfg_.squash) unsquash(y, ld);
    Vector logdet = ld.col(0);
    for (std::size_t i = layers_.size(); i-- > 0;) {
      auto [s, t] = layers_[i].scale_shift(y, state);
      y = (y - t).cwiseProduct((-s).array().exp().matrix());
      logdet -= s.rowwise().sum();
    }
    return {std::move(y), std::move(logdet)};
  }

  Vector log_prob(const Matrix& action, const Matrix& state) const {
    Output inv = inverse(action, state);
    return base_.log_density(inv.values) + inv.logdet;
  }

  Vector forward_one(const Vector& latent, const Vector& state) const {
    return forward(row_matrix(latent), state_row(state)).values.row(0).transpose();
  }

  Matrix sample(Eigen::Index n, const Matrix& state, Rng& rng) const {
    return forward(base_.sample(n, rng), state).values;
  }

 private:
  Matrix state_row(const Vector& state) const {
    if (cfg_.state_dim == 0) return Matrix::Zero(1, 0);
    return row_matrix(state);
  }

  static void unsquash(Matrix& a, Matrix& logdet) {
    constexpr double kEdge = 1.0 - 1e-9;
    if ((a.array().abs() >= kEdge).any()) {
      throw DomainError("flow inverse: action outside the open squash range (-1, 1)");
    }
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
      for (Eigen::Index c = 0; c < a.cols(); ++c) {
        const double v = a(r, c);
        logdet(r, 0) -= std::log1p(-v * v);
        a(r, c) = std::atanh(v);
      }
    }
  }

  void check_batch(Eigen::Index rows, Eigen::Index cols, const Matrix& state, const char* op) const {
    if (cols != cfg_.action_dim) {
      throw ShapeError(std::string("flow ") + op + ": expected " + std::to_string(cfg_.action_dim) +
                       " action columns, got " + std::to_string(cols));
    }
    if (state.cols() != cfg_.state_dim || (cfg_.state_dim > 0 && state.rows() != rows)) {
      throw ShapeError(std::string("flow ") + op + ": state batch " + shape_str(state) + " does not match " +
                       std::to_string(rows) + "x" + std::to_string(cfg_.state_dim));
    }
  }

  FlowConfig cfg_;
  BaseDistribution base_;
  std::vector<CouplingLayer> layers_;
};

// ---- checkpoint persistence ----------------------------------------------

inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline nlohmann::json matrix_to_json(const Matrix& m) {
  return {{"shape", {m.rows(), m.cols()}}, {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
  const auto shape = j.at("shape").get<std::vector<Eigen::Index>>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (shape.size() != 2 || shape[0] * shape[1] != static_cast<Eigen::Index>(data.size())) {
    throw CheckpointError("checkpoint: array shape does not match data length");
  }
  Matrix m(shape[0], shape[1]);
  std::copy(data.begin(), data.end(), m.data());
  return m;
}

}  // namespace detail

inline nlohmann::json flow_to_json(const FlowModel& model) {
  const FlowConfig& c = model.config();
  nlohmann::json layers = nlohmann::json::array();
  for (const CouplingLayer& l : model.layers()) {
    nlohmann::json weights = nlohmann::json::array();
    for (const Parameter* p : l.conditioner().parameters()) weights.push_back(detail::matrix_to_json(p->value));
    layers.push_back({{"mask", detail::matrix_to_json(l.mask())}, {"weights", weights}});
  }
  return {{"format", "cvflow-checkpoint"},
          {"version", kCheckpointVersion},
          {"action_dim", c.action_dim},
          {"state_dim", c.state_dim},
          {"base", to_string(c.base)},
          {"scale_clamp", c.scale_clamp},
          {"squash", c.squash},
          {"hidden", c.hidden},
          {"hidden_layers", c.hidden_layers},
          {"layers", layers}};
}

inline FlowModel flow_from_json(const nlohmann::json& j) {
  try {
    if (j.value("format", std::string()) != "cvflow-checkpoint") throw CheckpointError("checkpoint: not a flow checkpoint");
    const int version = j.at("version").get<int>();
    if (version != kCheckpointVersion) {
      throw CheckpointError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                            std::to_string(kCheckpointVersion) + ")");
    }
    FlowConfig c;
    c.action_dim = j.at("action_dim").get<int>();
    c.state_dim = j.at("state_dim").get<int>();
    c.base = base_kind_from(j.at("base").get<std::string>());
    c.scale_clamp = j.at("scale_clamp").get<double>();
    c.squash = j.at("squash").get<bool>();
    c.hidden = j.at("hidden").get<int>();
    c.hidden_layers = j.at("hidden_layers").get<int>();
    c.layers = static_cast<int>(j.at("layers").size());
    Rng scratch(0);
    FlowModel model(c, scratch);
    for (std::size_t i = 0; i < model.layers().size(); ++i) {
      const auto& jl = j.at("layers").at(i);
      CouplingLayer& layer = model.layers()[i];
      Matrix mask = detail::matrix_from_json(jl.at("mask"));
      if (mask.rows() != 1 || mask.cols() != c.action_dim) throw CheckpointError("checkpoint: mask shape mismatch");
      layer.set_mask(std::move(mask));
      auto params = layer.conditioner().parameters();
      const auto& jw = jl.at("weights");
      if (jw.size() != params.size()) throw CheckpointError("checkpoint: layer " + std::to_string(i) + " weight count mismatch");
      for (std::size_t k = 0; k < params.size(); ++k) {
        Matrix w = detail::matrix_from_json(jw.at(k));
        if (w.rows() != params[k]->value.rows() || w.cols() != params[k]->value.cols()) {
          throw CheckpointError("checkpoint: layer " + std::to_string(i) + " weight " + std::to_string(k) +
                                " has shape " + shape_str(w) + ", expected " + shape_str(params[k]->value));
        }
        *params[k] = Parameter(std::move(w));
      }
    }
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: corrupt file (") + e.what() + ")");
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const FlowModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw CheckpointError("checkpoint: cannot write " + path);
  out << flow_to_json(model).dump(1) << '\n';
  if (!out) throw CheckpointError("checkpoint: write failed for " + path);
}

// Optional expected dimensions come from the run configuration.
inline FlowModel load_checkpoint(const std::string& path, std::optional<int> action_dim = std::nullopt,
                                 std::optional<int> state_dim = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("checkpoint: cannot read " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("checkpoint: corrupt file " + path + " (" + e.what() + ")");
  }
  FlowModel model = flow_from_json(j);
  if (action_dim && *action_dim != model.action_dim()) {
    throw CheckpointError("checkpoint: action_dim " + std::to_string(model.action_dim()) + " does not match expected " +
                          std::to_string(*action_dim));
  }
  if (state_dim && *state_dim != model.state_dim()) {
    throw CheckpointError("checkpoint: state_dim " + std::to_string(model.state_dim()) + " does not match expected " +
                          std::to_string(*state_dim));
  }
  return model;
}

}  // namespace cvflow
