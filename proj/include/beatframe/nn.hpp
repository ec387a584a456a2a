#pragma once

// Small reverse-mode automatic differentiation over dense row-major matrices.
// Enough to train the lyric model's transformer encoder/decoder on CPU.

#include <Eigen/Dense>
#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace beatframe::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Parameter {
  Matrix value;
  Matrix grad;
};

/// Named parameters in a stable (lexicographic) order.
class ParameterSet {
 public:
  Parameter& add(const std::string& name, Matrix init);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  void zero_grad();
  std::size_t scalar_count() const;
  std::size_t size() const { return params_.size(); }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Parameter> params_;
};

class Graph {
 public:
  struct Var {
    std::size_t id = 0;
  };

  Var constant(Matrix value);
  Var param(Parameter& p);

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  double scalar(Var v) const { return nodes_[v.id].value(0, 0); }

  Var matmul(Var a, Var b);
  /// a * b^T
  Var matmul_bt(Var a, Var b);
  Var add(Var a, Var b);
  /// Adds a 1 x n row to every row of `a`.
  Var add_row(Var a, Var row);
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  /// a + s * b
  Var add_scaled(Var a, Var b, double s);
  Var gelu(Var a);
  Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
  /// Row-wise softmax; with `causal`, entry (i, j > i) is masked out.
  Var softmax_rows(Var a, bool causal);
  Var slice_cols(Var a, std::size_t start, std::size_t width);
  Var slice_rows(Var a, std::size_t start, std::size_t count);
  Var concat_cols(const std::vector<Var>& parts);
  Var concat_rows(const std::vector<Var>& parts);
  /// Gathers rows of `table` by id.
  Var embedding(Var table, const std::vector<int>& ids);
  /// Mean negative log-likelihood of `targets` over rows where `mask` is set.
  Var cross_entropy(Var logits, const std::vector<int>& targets, const std::vector<char>& mask);
  /// KL(N(mu, exp(logvar)) || N(0, I)), summed over dimensions.
  Var kl_standard_normal(Var mu, Var logvar);
  /// mu + exp(logvar / 2) * eps
  Var reparameterize(Var mu, Var logvar, const Matrix& eps);

  /// Back-propagates from a 1x1 node and accumulates into Parameter::grad.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Parameter* param = nullptr;
    bool needs_grad = false;
    std::function<void(Graph&, std::size_t)> back;
  };

  Var push(Matrix value, bool needs_grad, std::function<void(Graph&, std::size_t)> back);
  bool needs(Var v) const { return nodes_[v.id].needs_grad; }
  Matrix& grad(Var v) { return nodes_[v.id].grad; }
  const Matrix& grad_of(std::size_t id) const { return nodes_[id].grad; }

  std::vector<Node> nodes_;
};

struct AdamConfig {
  double learning_rate = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double grad_clip = 1.0;  // global L2 norm; <= 0 disables
};

class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}
  /// Applies one update from the accumulated gradients; returns the
  /// pre-clipping gradient norm.
  double step(ParameterSet& params);
  const AdamConfig& config() const { return config_; }
  void set_learning_rate(double lr) { config_.learning_rate = lr; }

 private:
  AdamConfig config_;
  std::map<std::string, std::pair<Matrix, Matrix>> moments_;
  long step_count_ = 0;
};

}  // namespace beatframe::nn
