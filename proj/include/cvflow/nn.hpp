#pragma once

// Dense layers, MLPs and the Adam optimizer on top of the autodiff tape.

#include "cvflow/autodiff.hpp"
#include "cvflow/random.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace cvflow {

enum class Activation { Tanh, Relu };

// Track records parameters as gradient leaves; Frozen embeds their current
// values as constants (gradients still flow to the layer input).
enum class ParamMode { Track, Frozen };

class Linear {
 public:
  Linear() = default;

  Linear(Eigen::Index in, Eigen::Index out, Rng& rng, bool zero_init = false)
      : weight_(Matrix::Zero(in, out)), bias_(Matrix::Zero(1, out)) {
    if (!zero_init) {
      const double bound = in > 0 ? 1.0 / std::sqrt(static_cast<double>(in)) : 0.0;
      weight_.value = rng.uniform_matrix(in, out, -bound, bound);
      bias_.value = rng.uniform_matrix(1, out, -bound, bound);
    }
  }

  Eigen::Index in_features() const { return weight_.value.rows(); }
  Eigen::Index out_features() const { return weight_.value.cols(); }

  ad::Value forward(ad::Tape& tape, const ad::Value& x, ParamMode mode) {
    ad::Value w = mode == ParamMode::Track ? tape.parameter(weight_) : tape.constant(weight_.value);
    ad::Value b = mode == ParamMode::Track ? tape.parameter(bias_) : tape.constant(bias_.value);
    return ad::add_row(ad::matmul(x, w), b);
  }

  Matrix forward(const Matrix& x) const {
    Matrix y = x * weight_.value;
    y.rowwise() += bias_.value.row(0);
    return y;
  }

  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  const Parameter& weight() const { return weight_; }
  const Parameter& bias() const { return bias_; }

 private:
  Parameter weight_;
  Parameter bias_;
};

class Mlp {
 public:
  Mlp() = default;

  // zero_final zero-initializes the output layer so the network starts at 0.
  Mlp(Eigen::Index in, const std::vector<Eigen::Index>& hidden, Eigen::Index out, Activation act, Rng& rng,
      bool zero_final = false)
      : act_(act) {
    Eigen::Index prev = in;
    for (Eigen::Index h : hidden) {
      layers_.emplace_back(prev, h, rng);
      prev = h;
    }
    layers_.emplace_back(prev, out, rng, zero_final);
  }

  Eigen::Index in_features() const { return layers_.front().in_features(); }
  Eigen::Index out_features() const { return layers_.back().out_features(); }
  Activation activation() const { return act_; }

  ad::Value forward(ad::Tape& tape, ad::Value x, ParamMode mode = ParamMode::Track) {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      x = layers_[i].forward(tape, x, mode);
      if (i + 1 < layers_.size()) x = act_ == Activation::Tanh ? ad::tanh(x) : ad::relu(x);
    }
    return x;
  }

  Matrix forward(const Matrix& input) const {
    Matrix x = input;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      x = layers_[i].forward(x);
      if (i + 1 < layers_.size()) {
        if (act_ == Activation::Tanh) {
          x = x.array().tanh();
        } else {
          x = x.cwiseMax(0.0);
        }
      }
    }
    return x;
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> ps;
    for (Linear& l : layers_) {
      ps.push_back(&l.weight());
      ps.push_back(&l.bias());
    }
    return ps;
  }

  std::vector<const Parameter*> parameters() const {
    std::vector<const Parameter*> ps;
    for (const Linear& l : layers_) {
      ps.push_back(&l.weight());
      ps.push_back(&l.bias());
    }
    return ps;
  }

  std::vector<Linear>& layers() { return layers_; }
  const std::vector<Linear>& layers() const { return layers_; }

 private:
  std::vector<Linear> layers_;
  Activation act_ = Activation::Tanh;
};

// target <- tau * source + (1 - tau) * target
inline void polyak_update(std::vector<Parameter*> target, const std::vector<Parameter*>& source, double tau) {
  if (target.size() != source.size()) throw std::invalid_argument("polyak_update: parameter count mismatch");
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (tau == 1.0) {
      target[i]->value = source[i]->value;
    } else {
      target[i]->value = tau * source[i]->value + (1.0 - tau) * target[i]->value;
    }
  }
}

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Adam {
 public:
  Adam() = default;

  explicit Adam(std::vector<Parameter*> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (Parameter* p : params_) {
      m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
  }

  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }
  long steps() const { return t_; }

  // Applies one update and zeroes the gradients. A NaN/inf gradient aborts
  // before any parameter is touched.
  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (!params_[i]->grad.allFinite()) {
        std::ostringstream os;
        os << "Adam: non-finite gradient in parameter " << i << " of shape " << shape_str(params_[i]->value);
        throw NonFiniteGradient(os.str());
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Parameter& p = *params_[i];
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * p.grad;
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * p.grad.cwiseProduct(p.grad);
      p.value.array() -= lr_ * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + eps_);
      p.grad.setZero();
    }
  }

  void zero_grad() {
    for (Parameter* p : params_) p->zero_grad();
  }

 private:
  std::vector<Parameter*> params_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  double lr_ = 1e-3;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  long t_ = 0;
};

}  // namespace cvflow
