// Minimal reverse-mode differentiable kernel over dense 64-bit matrices.
//
// A Tape records primitive operations as they execute; backward() replays
// the record in reverse, accumulating gradients. Parameters live in a
// ParameterSet (values + gradient buffers + Adam state); a tape references
// them through leaf nodes and flushes leaf gradients back in deterministic
// parameter order, so per-item tapes built on worker threads can be merged
// reproducibly.

#pragma once

#include <Eigen/Dense>

#include <functional>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace wavediff::ad {

using Matrix = Eigen::MatrixXd;

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  Matrix moment1;
  Matrix moment2;
};

// Ordered, name-addressed parameter store. Insertion order is the manifest
// and checkpoint order.
class ParameterSet {
 public:
  Parameter& add(const std::string& name, const Matrix& init);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::size_t size() const { return params_.size(); }
  bool empty() const { return params_.empty(); }
  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }

  void zero_grads();

  // Standard Adam with bias correction; clears gradients afterward and
  // advances the step counter. Rejects non-finite gradients by name.
  void adam_step(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  long step_count() const { return step_; }

  double grad_max_abs() const;
  std::size_t value_count() const;

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, std::size_t> index_;
  long step_ = 0;
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  // Leaf construction.
  Var input(Matrix value);              // constant, no gradient
  Var leaf(Parameter& p);               // cached: one node per parameter per tape

  const Matrix& value(Var v) const;
  // Gradient of the last backward() root w.r.t. v (zeros if v was unreached).
  Matrix grad(Var v) const;

  // Primitives. Shapes are validated; mismatches throw std::invalid_argument.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var scale(Var a, double s);
  Var hadamard(Var a, Var b);
  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var linear(Var x, Var w, Var b);      // x*w + b broadcast over rows; b is 1 x cols
  Var relu(Var a);
  Var cwise_cos(Var a);
  Var cwise_sin(Var a);
  Var lmul_const(const Matrix& m, Var a);  // m * a with constant m
  Var layer_norm(Var x, Var gain, Var shift);  // row-wise, eps = 1e-5
  Var softmax_rows(Var a);
  Var row_mean(Var a);                  // 1 x cols
  Var broadcast_rows(Var row, Eigen::Index rows);
  Var append_scalar(Var row, double s); // 1 x d -> 1 x (d+1), constant tail
  Var conv1d(Var x, const std::vector<Var>& taps, Var bias);  // over time rows
  Var sum(Var a);                       // 1 x 1
  Var mean_sq_error(Var pred, const Matrix& target);  // 1 x 1

  // Escape hatch for custom nodes (used by tests to plant corrupted
  // backward rules): `backprop` receives (tape, node grad) and must
  // accumulate into the inputs itself via accumulate_grad().
  Var custom(Matrix value, std::vector<Var> inputs,
             std::function<void(Tape&, const Matrix&)> backprop);
  void accumulate_grad(Var v, const Matrix& g);

  // Seeds d(root)/d(root) = seed (root must be 1x1) and replays the record.
  void backward(Var root, double seed = 1.0);

  // Adds leaf gradients into their parameters' grad buffers, in leaf
  // creation order. Call once per tape, after backward().
  void flush_param_grads();

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;  // empty until touched by backward
    std::function<void(Tape&, const Matrix&)> backprop;
    Parameter* param = nullptr;
    bool needs_grad = false;
  };

  Var push(Matrix value, bool needs_grad,
           std::function<void(Tape&, const Matrix&)> backprop);
  bool needs(Var v) const { return nodes_[v.id].needs_grad; }
  const Node& node(Var v) const;

  std::vector<Node> nodes_;
  std::vector<std::pair<Parameter*, int>> leaves_;  // creation order
  std::map<const Parameter*, int> leaf_ids_;
};

// Two linear layers with a rectified-linear activation between.
struct FFNParams {
  Parameter* w1 = nullptr;
  Parameter* b1 = nullptr;
  Parameter* w2 = nullptr;
  Parameter* b2 = nullptr;
};

// Registers <prefix>.w1/.b1/.w2/.b2 with He-scaled first layer. When
// `zero_output` is set the second layer starts at zero (identity residual
// start).
FFNParams add_ffn(ParameterSet& ps, const std::string& prefix, int in, int hidden, int out,
                  std::mt19937_64& rng, bool zero_output = false);
FFNParams ffn_handles(ParameterSet& ps, const std::string& prefix);
Var ffn_apply(Tape& t, Var x, const FFNParams& p);

Matrix he_init(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng);

}  // namespace wavediff::ad
