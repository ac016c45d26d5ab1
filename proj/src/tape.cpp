#include "wavediff/tape.hpp"

#include <cmath>
#include <stdexcept>

namespace wavediff::ad {

namespace {
constexpr double kLayerNormEps = 1e-5;

[[noreturn]] void shape_error(const std::string& op, const Matrix& a, const Matrix& b) {
  throw std::invalid_argument(op + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                              std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
                              "x" + std::to_string(b.cols()) + ")");
}
}  // namespace

Parameter& ParameterSet::add(const std::string& name, const Matrix& init) {
  if (index_.count(name)) {
    throw std::invalid_argument("ParameterSet: duplicate parameter " + name);
  }
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->value = init;
  p->grad = Matrix::Zero(init.rows(), init.cols());
  p->moment1 = Matrix::Zero(init.rows(), init.cols());
  p->moment2 = Matrix::Zero(init.rows(), init.cols());
  index_[name] = params_.size();
  params_.push_back(std::move(p));
  return *params_.back();
}

Parameter& ParameterSet::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw std::invalid_argument("ParameterSet: unknown parameter " + name);
  }
  return *params_[it->second];
}

const Parameter& ParameterSet::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw std::invalid_argument("ParameterSet: unknown parameter " + name);
  }
  return *params_[it->second];
}

bool ParameterSet::contains(const std::string& name) const { return index_.count(name) > 0; }

void ParameterSet::zero_grads() {
  for (auto& p : params_) p->grad.setZero();
}

void ParameterSet::adam_step(double lr, double beta1, double beta2, double eps) {
  for (const auto& p : params_) {
    if (!p->grad.allFinite()) {
      throw std::runtime_error("adam_step: non-finite gradient in parameter " + p->name);
    }
  }
  ++step_;
  const double c1 = 1.0 - std::pow(beta1, double(step_));
  const double c2 = 1.0 - std::pow(beta2, double(step_));
  for (auto& p : params_) {
    p->moment1 = beta1 * p->moment1 + (1.0 - beta1) * p->grad;
    p->moment2.array() =
        beta2 * p->moment2.array() + (1.0 - beta2) * p->grad.array().square();
    p->value.array() -=
        lr * (p->moment1.array() / c1) / ((p->moment2.array() / c2).sqrt() + eps);
    p->grad.setZero();
  }
}

double ParameterSet::grad_max_abs() const {
  double m = 0;
  for (const auto& p : params_) {
    if (p->grad.size() > 0) m = std::max(m, p->grad.cwiseAbs().maxCoeff());
  }
  return m;
}

std::size_t ParameterSet::value_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += std::size_t(p->value.size());
  return n;
}

const Tape::Node& Tape::node(Var v) const {
  if (!v.valid() || std::size_t(v.id) >= nodes_.size()) {
    throw std::invalid_argument("Tape: invalid var");
  }
  return nodes_[v.id];
}

Var Tape::push(Matrix value, bool needs_grad,
               std::function<void(Tape&, const Matrix&)> backprop) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  if (needs_grad) n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Var{int(nodes_.size() - 1)};
}

Var Tape::input(Matrix value) { return push(std::move(value), false, nullptr); }

Var Tape::leaf(Parameter& p) {
  auto it = leaf_ids_.find(&p);
  if (it != leaf_ids_.end()) return Var{it->second};
  Var v = push(p.value, true, nullptr);
  leaf_ids_[&p] = v.id;
  leaves_.emplace_back(&p, v.id);
  return v;
}

const Matrix& Tape::value(Var v) const { return node(v).value; }

Matrix Tape::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::accumulate_grad(Var v, const Matrix& g) {
  Node& n = nodes_[v.id];
  if (!n.needs_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void Tape::backward(Var root, double seed) {
  const Node& r = node(root);
  if (r.value.size() != 1) {
    throw std::invalid_argument("backward: root must be scalar (1x1)");
  }
  for (auto& n : nodes_) n.grad.resize(0, 0);
  nodes_[root.id].grad = Matrix::Constant(1, 1, seed);
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0 || !n.backprop) continue;
    n.backprop(*this, n.grad);
  }
}

void Tape::flush_param_grads() {
  for (const auto& [param, id] : leaves_) {
    const Node& n = nodes_[id];
    if (n.grad.size() > 0) param->grad += n.grad;
  }
}

Var Tape::add(Var a, Var b) {
  const Matrix& va = value(a);
  const Matrix& vb = value(b);
  if (va.rows() != vb.rows() || va.cols() != vb.cols()) shape_error("add", va, vb);
  return push(va + vb, needs(a) || needs(b), [a, b](Tape& t, const Matrix& g) {
    t.accumulate_grad(a, g);
    t.accumulate_grad(b, g);
  });
}

Var Tape::sub(Var a, Var b) {
  const Matrix& va = value(a);
  const Matrix& vb = value(b);
  if (va.rows() != vb.rows() || va.cols() != vb.cols()) shape_error("sub", va, vb);
  return push(va - vb, needs(a) || needs(b), [a, b](Tape& t, const Matrix& g) {
    t.accumulate_grad(a, g);
    t.accumulate_grad(b, Matrix(-g));
  });
}

Var Tape::scale(Var a, double s) {
  return push(value(a) * s, needs(a), [a, s](Tape& t, const Matrix& g) {
    t.accumulate_grad(a, Matrix(g * s));
  });
}

Var Tape::hadamard(Var a, Var b) {
  const Matrix& va = value(a);
  const Matrix& vb = value(b);
  if (va.rows() != vb.rows() || va.cols() != vb.cols()) shape_error("hadamard", va, vb);
  return push(va.cwiseProduct(vb), needs(a) || needs(b), [a, b](Tape& t, const Matrix& g) {
    t.accumulate_grad(a, g.cwiseProduct(t.value(b)));
    t.accumulate_grad(b, g.cwiseProduct(t.value(a)));
  });
}

Var Tape::matmul(Var a, Var b) {
  const Matrix& va = value(a);
  const Matrix& vb = value(b);
  if (va.cols() != vb.rows()) shape_error("matmul", va, vb);
  return push(va * vb, needs(a) || needs(b), [a, b](Tape& t, const Matrix& g) {
    t.accumulate_grad(a, g * t.value(b).transpose());
    t.accumulate_grad(b, t.value(a).transpose() * g);
  });
}

Var Tape::transpose(Var a) {
  return push(value(a).transpose(), needs(a), [a](Tape& t, const Matrix& g) {
    t.accumulate_grad(a, g.transpose());
  });
}

Var Tape::linear(Var x, Var w, Var b) {
  const Matrix& vx = value(x);
  const Matrix& vw = value(w);
  const Matrix& vb = value(b);
  if (vx.cols() != vw.rows()) shape_error("linear", vx, vw);
  if (vb.rows() != 1 || vb.cols() != vw.cols()) shape_error("linear bias", vw, vb);
  Matrix y = vx * vw;
  y.rowwise() += vb.row(0);
  return push(std::move(y), needs(x) || needs(w) || needs(b),
              [x, w, b](Tape& t, const Matrix& g) {
                t.accumulate_grad(x, g * t.value(w).transpose());
                t.accumulate_grad(w, t.value(x).transpose() * g);
                t.accumulate_grad(b, g.colwise().sum());
              });
}

Var Tape::relu(Var a) {
  return push(value(a).cwiseMax(0.0), needs(a), [a](Tape& t, const Matrix& g) {
    const Matrix mask = (t.value(a).array() > 0.0).cast<double>().matrix();
    t.accumulate_grad(a, g.cwiseProduct(mask));
  });
}

Var Tape::cwise_cos(Var a) {
  return push(value(a).array().cos().matrix(), needs(a), [a](Tape& t, const Matrix& g) {
    t.accumulate_grad(a, (-t.value(a).array().sin() * g.array()).matrix());
  });
}

Var Tape::cwise_sin(Var a) {
  return push(value(a).array().sin().matrix(), needs(a), [a](Tape& t, const Matrix& g) {
    t.accumulate_grad(a, (t.value(a).array().cos() * g.array()).matrix());
  });
}

Var Tape::lmul_const(const Matrix& m, Var a) {
  if (m.cols() != value(a).rows()) shape_error("lmul_const", m, value(a));
  // Copy m into the closure: the caller's matrix may not outlive the tape.
  return push(m * value(a), needs(a), [m, a](Tape& t, const Matrix& g) {
    t.accumulate_grad(a, m.transpose() * g);
  });
}

Var Tape::layer_norm(Var x, Var gain, Var shift) {
  const Matrix& vx = value(x);
  const Matrix& vg = value(gain);
  const Matrix& vs = value(shift);
  if (vg.rows() != 1 || vg.cols() != vx.cols()) shape_error("layer_norm gain", vx, vg);
  if (vs.rows() != 1 || vs.cols() != vx.cols()) shape_error("layer_norm shift", vx, vs);

  const Eigen::Index cols = vx.cols();
  Matrix xhat(vx.rows(), cols);
  Matrix inv_std(vx.rows(), 1);
  for (Eigen::Index r = 0; r < vx.rows(); ++r) {
    const double mu = vx.row(r).mean();
    const double var = (vx.row(r).array() - mu).square().mean();
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std(r, 0) = is;
    xhat.row(r) = (vx.row(r).array() - mu) * is;
  }
  Matrix y = (xhat.array().rowwise() * vg.row(0).array()).matrix();
  y.rowwise() += vs.row(0);

  return push(std::move(y), needs(x) || needs(gain) || needs(shift),
              [x, gain, shift, xhat, inv_std](Tape& t, const Matrix& g) {
                const Matrix& vg = t.value(gain);
                const Eigen::Index n = xhat.cols();
                t.accumulate_grad(gain, (g.cwiseProduct(xhat)).colwise().sum());
                t.accumulate_grad(shift, g.colwise().sum());
                Matrix dx(xhat.rows(), n);
                for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
                  const Eigen::RowVectorXd dxhat =
                      (g.row(r).array() * vg.row(0).array()).matrix();
                  const double sum_dxhat = dxhat.sum();
                  const double sum_dxhat_xhat = dxhat.cwiseProduct(xhat.row(r)).sum();
                  dx.row(r) = inv_std(r, 0) / double(n) *
                              (double(n) * dxhat.array() - sum_dxhat -
                               xhat.row(r).array() * sum_dxhat_xhat)
                                  .matrix();
                }
                t.accumulate_grad(x, dx);
              });
}

Var Tape::softmax_rows(Var a) {
  const Matrix& va = value(a);
  Matrix y(va.rows(), va.cols());
  for (Eigen::Index r = 0; r < va.rows(); ++r) {
    const double m = va.row(r).maxCoeff();
    const Eigen::RowVectorXd e = (va.row(r).array() - m).exp().matrix();
    y.row(r) = e / e.sum();
  }
  return push(std::move(y), needs(a), [a, out_id = int(nodes_.size())](Tape& t, const Matrix& g) {
    const Matrix& y = t.nodes_[out_id].value;
    Matrix dx(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double dot = g.row(r).cwiseProduct(y.row(r)).sum();
      dx.row(r) = (g.row(r).array() - dot) * y.row(r).array();
    }
    t.accumulate_grad(a, dx);
  });
}

Var Tape::row_mean(Var a) {
  const Matrix& va = value(a);
  const double inv = 1.0 / double(va.rows());
  return push(va.colwise().mean(), needs(a), [a, inv](Tape& t, const Matrix& g) {
    Matrix dx(t.value(a).rows(), t.value(a).cols());
    dx = (g.row(0) * inv).replicate(t.value(a).rows(), 1);
    t.accumulate_grad(a, dx);
  });
}

Var Tape::broadcast_rows(Var row, Eigen::Index rows) {
  const Matrix& vr = value(row);
  if (vr.rows() != 1) {
    throw std::invalid_argument("broadcast_rows: input must be a single row");
  }
  return push(vr.replicate(rows, 1), needs(row), [row](Tape& t, const Matrix& g) {
    t.accumulate_grad(row, g.colwise().sum());
  });
}

Var Tape::append_scalar(Var row, double s) {
  const Matrix& vr = value(row);
  if (vr.rows() != 1) {
    throw std::invalid_argument("append_scalar: input must be a single row");
  }
  Matrix y(1, vr.cols() + 1);
  y.leftCols(vr.cols()) = vr;
  y(0, vr.cols()) = s;
  return push(std::move(y), needs(row), [row](Tape& t, const Matrix& g) {
    t.accumulate_grad(row, g.leftCols(g.cols() - 1));
  });
}

Var Tape::conv1d(Var x, const std::vector<Var>& taps, Var bias) {
  const Matrix& vx = value(x);
  const int k = int(taps.size());
  if (k < 1 || k % 2 == 0) {
    throw std::invalid_argument("conv1d: kernel size must be odd and positive");
  }
  const Eigen::Index cin = vx.cols();
  const Eigen::Index cout = value(taps[0]).cols();
  for (const Var& w : taps) {
    if (value(w).rows() != cin || value(w).cols() != cout) {
      shape_error("conv1d tap", vx, value(w));
    }
  }
  const Matrix& vb = value(bias);
  if (vb.rows() != 1 || vb.cols() != cout) shape_error("conv1d bias", value(taps[0]), vb);

  const Eigen::Index t_len = vx.rows();
  const int half = k / 2;
  Matrix y = vb.replicate(t_len, 1);
  for (int m = 0; m < k; ++m) {
    const int off = m - half;  // y[t] += x[t + off] * W_m, zero padded
    const Eigen::Index lo = std::max<Eigen::Index>(0, -off);
    const Eigen::Index hi = std::min<Eigen::Index>(t_len, t_len - off);
    if (hi <= lo) continue;
    y.middleRows(lo, hi - lo).noalias() +=
        vx.middleRows(lo + off, hi - lo) * value(taps[m]);
  }

  bool any = needs(x) || needs(bias);
  for (const Var& w : taps) any = any || needs(w);
  return push(std::move(y), any, [x, taps, bias, half, t_len](Tape& t, const Matrix& g) {
    t.accumulate_grad(bias, g.colwise().sum());
    Matrix dx = Matrix::Zero(t_len, t.value(x).cols());
    for (int m = 0; m < int(taps.size()); ++m) {
      const int off = m - half;
      const Eigen::Index lo = std::max<Eigen::Index>(0, -off);
      const Eigen::Index hi = std::min<Eigen::Index>(t_len, t_len - off);
      if (hi <= lo) continue;
      dx.middleRows(lo + off, hi - lo).noalias() +=
          g.middleRows(lo, hi - lo) * t.value(taps[m]).transpose();
      t.accumulate_grad(taps[m], t.value(x).middleRows(lo + off, hi - lo).transpose() *
                                     g.middleRows(lo, hi - lo));
    }
    t.accumulate_grad(x, dx);
  });
}

Var Tape::sum(Var a) {
  return push(Matrix::Constant(1, 1, value(a).sum()), needs(a),
              [a](Tape& t, const Matrix& g) {
                t.accumulate_grad(a, Matrix::Constant(t.value(a).rows(), t.value(a).cols(),
                                                      g(0, 0)));
              });
}

Var Tape::mean_sq_error(Var pred, const Matrix& target) {
  const Matrix& vp = value(pred);
  if (vp.rows() != target.rows() || vp.cols() != target.cols()) {
    shape_error("mean_sq_error", vp, target);
  }
  const Matrix diff = vp - target;
  const double inv = 1.0 / double(diff.size());
  return push(Matrix::Constant(1, 1, diff.squaredNorm() * inv), needs(pred),
              [pred, diff, inv](Tape& t, const Matrix& g) {
                t.accumulate_grad(pred, Matrix(2.0 * inv * g(0, 0) * diff));
              });
}

Var Tape::custom(Matrix value, std::vector<Var> inputs,
                 std::function<void(Tape&, const Matrix&)> backprop) {
  bool any = false;
  for (const Var& v : inputs) any = any || needs(v);
  return push(std::move(value), any, std::move(backprop));
}

Matrix he_init(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(rows)));
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
  return m;
}

FFNParams add_ffn(ParameterSet& ps, const std::string& prefix, int in, int hidden, int out,
                  std::mt19937_64& rng, bool zero_output) {
  FFNParams f;
  f.w1 = &ps.add(prefix + ".w1", he_init(in, hidden, rng));
  f.b1 = &ps.add(prefix + ".b1", Matrix::Zero(1, hidden));
  f.w2 = &ps.add(prefix + ".w2",
                 zero_output ? Matrix::Zero(hidden, out) : he_init(hidden, out, rng));
  f.b2 = &ps.add(prefix + ".b2", Matrix::Zero(1, out));
  return f;
}

FFNParams ffn_handles(ParameterSet& ps, const std::string& prefix) {
  FFNParams f;
  f.w1 = &ps.at(prefix + ".w1");
  f.b1 = &ps.at(prefix + ".b1");
  f.w2 = &ps.at(prefix + ".w2");
  f.b2 = &ps.at(prefix + ".b2");
  return f;
}

Var ffn_apply(Tape& t, Var x, const FFNParams& p) {
  const Var h = t.relu(t.linear(x, t.leaf(*p.w1), t.leaf(*p.b1)));
  return t.linear(h, t.leaf(*p.w2), t.leaf(*p.b2));
}

}  // namespace wavediff::ad
