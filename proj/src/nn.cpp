#include "beatframe/nn.hpp"

#include <cmath>
#include <limits>

#include "beatframe/error.hpp"

namespace beatframe::nn {

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Parameter& ParameterSet::add(const std::string& name, Matrix init) {
  auto [it, inserted] = params_.emplace(name, Parameter{});
  if (!inserted) throw Error("duplicate parameter '" + name + "'");
  it->second.grad = Matrix::Zero(init.rows(), init.cols());
  it->second.value = std::move(init);
  return it->second;
}

Parameter& ParameterSet::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw Error("unknown parameter '" + name + "'");
  return it->second;
}

const Parameter& ParameterSet::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw Error("unknown parameter '" + name + "'");
  return it->second;
}

void ParameterSet::zero_grad() {
  for (auto& [name, p] : params_) p.grad.setZero(p.value.rows(), p.value.cols());
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, p] : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

Graph::Var Graph::push(Matrix value, bool needs_grad, std::function<void(Graph&, std::size_t)> back) {
  Node node;
  node.value = std::move(value);
  node.needs_grad = needs_grad;
  if (needs_grad) node.back = std::move(back);
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

Graph::Var Graph::constant(Matrix value) { return push(std::move(value), false, nullptr); }

Graph::Var Graph::param(Parameter& p) {
  Var v = push(p.value, true, nullptr);
  nodes_[v.id].param = &p;
  return v;
}

Graph::Var Graph::matmul(Var a, Var b) {
  const Matrix& A = value(a);
  const Matrix& B = value(b);
  if (A.cols() != B.rows()) throw ShapeError("matmul: inner dimensions differ");
  return push(A * B, needs(a) || needs(b), [a, b](Graph& g, std::size_t self) {
    const Matrix& d = g.grad_of(self);
    if (g.needs(a)) g.grad(a).noalias() += d * g.value(b).transpose();
    if (g.needs(b)) g.grad(b).noalias() += g.value(a).transpose() * d;
  });
}

Graph::Var Graph::matmul_bt(Var a, Var b) {
  const Matrix& A = value(a);
  const Matrix& B = value(b);
  if (A.cols() != B.cols()) throw ShapeError("matmul_bt: inner dimensions differ");
  return push(A * B.transpose(), needs(a) || needs(b), [a, b](Graph& g, std::size_t self) {
    const Matrix& d = g.grad_of(self);
    if (g.needs(a)) g.grad(a).noalias() += d * g.value(b);
    if (g.needs(b)) g.grad(b).noalias() += d.transpose() * g.value(a);
  });
}

Graph::Var Graph::add(Var a, Var b) {
  require_same_shape(value(a), value(b), "add");
  return push(value(a) + value(b), needs(a) || needs(b), [a, b](Graph& g, std::size_t self) {
    const Matrix& d = g.grad_of(self);
    if (g.needs(a)) g.grad(a) += d;
    if (g.needs(b)) g.grad(b) += d;
  });
}

Graph::Var Graph::add_row(Var a, Var row) {
  const Matrix& A = value(a);
  const Matrix& R = value(row);
  if (R.rows() != 1 || R.cols() != A.cols()) throw ShapeError("add_row: row vector width mismatch");
  Matrix out = A.rowwise() + R.row(0);
  return push(std::move(out), needs(a) || needs(row), [a, row](Graph& g, std::size_t self) {
    const Matrix& d = g.grad_of(self);
    if (g.needs(a)) g.grad(a) += d;
    if (g.needs(row)) g.grad(row) += d.colwise().sum();
  });
}

Graph::Var Graph::mul(Var a, Var b) {
  require_same_shape(value(a), value(b), "mul");
  return push(value(a).cwiseProduct(value(b)), needs(a) || needs(b), [a, b](Graph& g, std::size_t self) {
    const Matrix& d = g.grad_of(self);
    if (g.needs(a)) g.grad(a) += d.cwiseProduct(g.value(b));
    if (g.needs(b)) g.grad(b) += d.cwiseProduct(g.value(a));
  });
}

Graph::Var Graph::scale(Var a, double s) {
  return push(value(a) * s, needs(a), [a, s](Graph& g, std::size_t self) { g.grad(a) += g.grad_of(self) * s; });
}

Graph::Var Graph::add_scaled(Var a, Var b, double s) {
  require_same_shape(value(a), value(b), "add_scaled");
  return push(value(a) + s * value(b), needs(a) || needs(b), [a, b, s](Graph& g, std::size_t self) {
    const Matrix& d = g.grad_of(self);
    if (g.needs(a)) g.grad(a) += d;
    if (g.needs(b)) g.grad(b) += s * d;
  });
}

Graph::Var Graph::gelu(Var a) {
  const Matrix& X = value(a);
  Matrix out = X.unaryExpr([](double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
  });
  return push(std::move(out), needs(a), [a](Graph& g, std::size_t self) {
    const Matrix& X = g.value(a);
    const Matrix& d = g.grad_of(self);
    Matrix& ga = g.grad(a);
    for (Eigen::Index i = 0; i < X.size(); ++i) {
      const double x = X.data()[i];
      const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
      const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
      ga.data()[i] += d.data()[i] * (0.5 * (1.0 + t) + 0.5 * x * dt);
    }
  });
}

Graph::Var Graph::layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Matrix& X = value(x);
  const Matrix& G = value(gamma);
  const Matrix& B = value(beta);
  if (G.rows() != 1 || G.cols() != X.cols() || B.rows() != 1 || B.cols() != X.cols()) {
    throw ShapeError("layer_norm: gain/bias width mismatch");
  }
  const auto n = static_cast<double>(X.cols());
  Matrix xhat(X.rows(), X.cols());
  Eigen::VectorXd inv_std(X.rows());
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    const double mean = X.row(r).mean();
    const double var = (X.row(r).array() - mean).square().sum() / n;
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (X.row(r).array() - mean) * inv_std(r);
  }
  Matrix out = (xhat.array().rowwise() * G.row(0).array()).rowwise() + B.row(0).array();
  return push(std::move(out), needs(x) || needs(gamma) || needs(beta),
              [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), n](Graph& g, std::size_t self) {
                const Matrix& d = g.grad_of(self);
                if (g.needs(gamma)) g.grad(gamma) += d.cwiseProduct(xhat).colwise().sum();
                if (g.needs(beta)) g.grad(beta) += d.colwise().sum();
                if (g.needs(x)) {
                  const Matrix dxhat = d.array().rowwise() * g.value(gamma).row(0).array();
                  Matrix& gx = g.grad(x);
                  for (Eigen::Index r = 0; r < d.rows(); ++r) {
                    const double sum_d = dxhat.row(r).sum();
                    const double sum_dx = dxhat.row(r).dot(xhat.row(r));
                    gx.row(r).array() +=
                        (inv_std(r) / n) * (n * dxhat.row(r).array() - sum_d - xhat.row(r).array() * sum_dx);
                  }
                }
              });
}

Graph::Var Graph::softmax_rows(Var a, bool causal) {
  const Matrix& X = value(a);
  Matrix out = Matrix::Zero(X.rows(), X.cols());
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    const Eigen::Index limit = causal ? std::min<Eigen::Index>(r + 1, X.cols()) : X.cols();
    const double mx = X.row(r).head(limit).maxCoeff();
    double total = 0.0;
    for (Eigen::Index c = 0; c < limit; ++c) {
      out(r, c) = std::exp(X(r, c) - mx);
      total += out(r, c);
    }
    out.row(r).head(limit) /= total;
  }
  return push(std::move(out), needs(a), [a](Graph& g, std::size_t self) {
    const Matrix& y = g.value(Var{self});
    const Matrix& d = g.grad_of(self);
    const Eigen::VectorXd dot = d.cwiseProduct(y).rowwise().sum();
    g.grad(a) += y.cwiseProduct(d.colwise() - dot);
  });
}

Graph::Var Graph::slice_cols(Var a, std::size_t start, std::size_t width) {
  const Matrix& X = value(a);
  if (start + width > static_cast<std::size_t>(X.cols())) throw ShapeError("slice_cols out of range");
  Matrix out = X.middleCols(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(width));
  return push(std::move(out), needs(a), [a, start, width](Graph& g, std::size_t self) {
    g.grad(a).middleCols(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(width)) += g.grad_of(self);
  });
}

Graph::Var Graph::slice_rows(Var a, std::size_t start, std::size_t count) {
  const Matrix& X = value(a);
  if (start + count > static_cast<std::size_t>(X.rows())) throw ShapeError("slice_rows out of range");
  Matrix out = X.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(count));
  return push(std::move(out), needs(a), [a, start, count](Graph& g, std::size_t self) {
    g.grad(a).middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(count)) += g.grad_of(self);
  });
}

Graph::Var Graph::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  const Eigen::Index rows = value(parts[0]).rows();
  Eigen::Index cols = 0;
  bool any = false;
  for (Var p : parts) {
    if (value(p).rows() != rows) throw ShapeError("concat_cols: row count mismatch");
    cols += value(p).cols();
    any = any || needs(p);
  }
  Matrix out(rows, cols);
  Eigen::Index offset = 0;
  for (Var p : parts) {
    out.middleCols(offset, value(p).cols()) = value(p);
    offset += value(p).cols();
  }
  return push(std::move(out), any, [parts](Graph& g, std::size_t self) {
    Eigen::Index off = 0;
    for (Var p : parts) {
      const Eigen::Index w = g.value(p).cols();
      if (g.needs(p)) g.grad(p) += g.grad_of(self).middleCols(off, w);
      off += w;
    }
  });
}

Graph::Var Graph::concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  const Eigen::Index cols = value(parts[0]).cols();
  Eigen::Index rows = 0;
  bool any = false;
  for (Var p : parts) {
    if (value(p).cols() != cols) throw ShapeError("concat_rows: column count mismatch");
    rows += value(p).rows();
    any = any || needs(p);
  }
  Matrix out(rows, cols);
  Eigen::Index offset = 0;
  for (Var p : parts) {
    out.middleRows(offset, value(p).rows()) = value(p);
    offset += value(p).rows();
  }
  return push(std::move(out), any, [parts](Graph& g, std::size_t self) {
    Eigen::Index off = 0;
    for (Var p : parts) {
      const Eigen::Index h = g.value(p).rows();
      if (g.needs(p)) g.grad(p) += g.grad_of(self).middleRows(off, h);
      off += h;
    }
  });
}

Graph::Var Graph::embedding(Var table, const std::vector<int>& ids) {
  const Matrix& T = value(table);
  Matrix out(static_cast<Eigen::Index>(ids.size()), T.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= T.rows()) throw ShapeError("embedding id " + std::to_string(ids[i]) + " out of range");
    out.row(static_cast<Eigen::Index>(i)) = T.row(ids[i]);
  }
  return push(std::move(out), needs(table), [table, ids](Graph& g, std::size_t self) {
    const Matrix& d = g.grad_of(self);
    Matrix& gt = g.grad(table);
    for (std::size_t i = 0; i < ids.size(); ++i) gt.row(ids[i]) += d.row(static_cast<Eigen::Index>(i));
  });
}

Graph::Var Graph::cross_entropy(Var logits, const std::vector<int>& targets, const std::vector<char>& mask) {
  const Matrix& L = value(logits);
  if (static_cast<std::size_t>(L.rows()) != targets.size() || targets.size() != mask.size()) {
    throw ShapeError("cross_entropy: logits rows, targets and mask must agree");
  }
  Matrix probs(L.rows(), L.cols());
  double total = 0.0;
  double count = 0.0;
  for (Eigen::Index r = 0; r < L.rows(); ++r) {
    const double mx = L.row(r).maxCoeff();
    probs.row(r) = (L.row(r).array() - mx).exp();
    const double z = probs.row(r).sum();
    probs.row(r) /= z;
    if (mask[static_cast<std::size_t>(r)]) {
      const int t = targets[static_cast<std::size_t>(r)];
      if (t < 0 || t >= L.cols()) throw ShapeError("cross_entropy: target id out of range");
      total += -(L(r, t) - mx - std::log(z));
      count += 1.0;
    }
  }
  Matrix out(1, 1);
  out(0, 0) = count > 0.0 ? total / count : 0.0;
  return push(std::move(out), needs(logits),
              [logits, targets, mask, probs = std::move(probs), count](Graph& g, std::size_t self) {
                if (count == 0.0) return;
                const double d = g.grad_of(self)(0, 0) / count;
                Matrix& gl = g.grad(logits);
                for (Eigen::Index r = 0; r < probs.rows(); ++r) {
                  if (!mask[static_cast<std::size_t>(r)]) continue;
                  gl.row(r) += d * probs.row(r);
                  gl(r, targets[static_cast<std::size_t>(r)]) -= d;
                }
              });
}

Graph::Var Graph::kl_standard_normal(Var mu, Var logvar) {
  const Matrix& M = value(mu);
  const Matrix& LV = value(logvar);
  require_same_shape(M, LV, "kl_standard_normal");
  Matrix out(1, 1);
  out(0, 0) = 0.5 * (M.array().square() + LV.array().exp() - 1.0 - LV.array()).sum();
  return push(std::move(out), needs(mu) || needs(logvar), [mu, logvar](Graph& g, std::size_t self) {
    const double d = g.grad_of(self)(0, 0);
    if (g.needs(mu)) g.grad(mu) += d * g.value(mu);
    if (g.needs(logvar)) g.grad(logvar).array() += d * 0.5 * (g.value(logvar).array().exp() - 1.0);
  });
}

Graph::Var Graph::reparameterize(Var mu, Var logvar, const Matrix& eps) {
  const Matrix& M = value(mu);
  const Matrix& LV = value(logvar);
  require_same_shape(M, LV, "reparameterize");
  require_same_shape(M, eps, "reparameterize");
  Matrix sigma = (0.5 * LV.array()).exp();
  Matrix out = M.array() + sigma.array() * eps.array();
  return push(std::move(out), needs(mu) || needs(logvar),
              [mu, logvar, eps, sigma = std::move(sigma)](Graph& g, std::size_t self) {
                const Matrix& d = g.grad_of(self);
                if (g.needs(mu)) g.grad(mu) += d;
                if (g.needs(logvar)) g.grad(logvar).array() += d.array() * eps.array() * sigma.array() * 0.5;
              });
}

void Graph::backward(Var loss) {
  if (value(loss).size() != 1) throw ShapeError("backward requires a scalar loss");
  for (std::size_t i = 0; i <= loss.id; ++i) {
    Node& n = nodes_[i];
    if (n.needs_grad) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  }
  if (!nodes_[loss.id].needs_grad) return;
  nodes_[loss.id].grad(0, 0) = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad) continue;
    // Closures index into nodes_ but never resize it, so `n` stays valid.
    if (n.back) n.back(*this, i);
    if (n.param != nullptr) n.param->grad += nodes_[i].grad;
  }
}

double Adam::step(ParameterSet& params) {
  double norm_sq = 0.0;
  for (auto& [name, p] : params) norm_sq += p.grad.squaredNorm();
  const double norm = std::sqrt(norm_sq);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  const double clip = (config_.grad_clip > 0.0 && norm > config_.grad_clip) ? config_.grad_clip / norm : 1.0;

  ++step_count_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_count_));
  for (auto& [name, p] : params) {
    auto& [m, v] = moments_[name];
    if (m.size() == 0) {
      m = Matrix::Zero(p.value.rows(), p.value.cols());
      v = Matrix::Zero(p.value.rows(), p.value.cols());
    }
    const Matrix g = p.grad * clip;
    m = config_.beta1 * m + (1.0 - config_.beta1) * g;
    v = config_.beta2 * v + (1.0 - config_.beta2) * g.cwiseProduct(g);
    if (config_.learning_rate == 0.0) continue;
    p.value.array() -= config_.learning_rate * (m.array() / bc1) / ((v.array() / bc2).sqrt() + config_.epsilon);
  }
  return norm;
}

}  // namespace beatframe::nn
