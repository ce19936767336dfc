#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices of doubles. Every operation records a pullback on the tape that
// owns its inputs; Tape::backward replays them in reverse creation order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "glance/random.hpp"
#include "json.hpp"

namespace glance {

/// Non-finite values in a gradient or loss.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace ad {

class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<std::size_t> shape, std::vector<double> values);
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> values);

  static Tensor zeros(std::size_t rows, std::size_t cols);
  static Tensor scalar(double v) { return Tensor(1, 1, {v}); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  /// Rank-2 accessors; a rank-1 tensor is treated as a single row.
  std::size_t rows() const { return shape_.size() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }
  std::size_t size() const { return values_.size(); }

  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }
  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  bool all_finite() const;
  std::string shape_string() const;
  bool operator==(const Tensor&) const = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> values_;
};

/// Named tensors in a stable (lexicographic) order.
class ParamSet {
 public:
  using Map = std::map<std::string, Tensor>;

  void set(const std::string& name, Tensor t) { params_[name] = std::move(t); }
  bool contains(const std::string& name) const { return params_.count(name) > 0; }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  void erase(const std::string& name) { params_.erase(name); }
  std::size_t size() const { return params_.size(); }
  std::size_t parameter_count() const;

  Map::const_iterator begin() const { return params_.begin(); }
  Map::const_iterator end() const { return params_.end(); }
  Map::iterator begin() { return params_.begin(); }
  Map::iterator end() { return params_.end(); }

  bool operator==(const ParamSet&) const = default;

 private:
  Map params_;
};

using Gradients = std::map<std::string, Tensor>;

class Tape;

/// Handle to a value recorded on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Pullback = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that receives no gradient.
  Var constant(Tensor value);
  /// Leaf whose gradient is tracked (e.g. an input being optimized).
  Var variable(Tensor value);
  /// Leaf bound to a named parameter. Repeated calls with the same name return
  /// the same leaf, so every use of a shared parameter accumulates into it.
  Var param(const ParamSet& params, const std::string& name);

  /// Records an op output; the pullback runs only if some input needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, Pullback pullback);

  /// Reverse sweep from a 1x1 loss. Throws std::invalid_argument otherwise.
  void backward(Var loss);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Gradient of the last backward() target w.r.t. v (zeros if unreached).
  Tensor grad(Var v) const;
  /// Adds g into the gradient slot of node id (allocating on first use).
  void accumulate(std::size_t id, const Tensor& g);
  Tensor& grad_slot(std::size_t id);

  /// Gradients of every parameter leaf, keyed by parameter name.
  Gradients param_grads() const;
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Pullback pullback;
  };
  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> param_ids_;
};

// Primitives. Shapes are checked and mismatches throw std::invalid_argument
// naming the operation and operand shapes.
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
/// x (n x m) plus a 1 x m row broadcast to every row.
Var add_bias(Var x, Var bias);
Var scale(Var x, double factor);
Var add_scalar(Var x, double c);
Var concat(std::span<const Var> parts, int axis);
Var concat(std::initializer_list<Var> parts, int axis);
Var relu(Var x);
Var sigmoid(Var x);
Var tanh(Var x);
Var abs(Var x);
/// 1x1 mean / sum over all entries.
Var mean(Var x);
Var sum(Var x);
/// out[s] = sum of rows i with segment_ids[i] == s. Each segment is summed in
/// sorted value order, so the result depends only on the multiset of rows.
Var segment_sum(Var values, std::span<const int> segment_ids, std::size_t n_segments);
/// out[i] = x[index[i]].
Var gather_rows(Var x, std::span<const int> index);
/// Copy of base with rows index[i] replaced by values[i].
Var scatter_rows(Var base, std::span<const int> index, Var values);
/// out[i] = weights[i] * x[i].
Var scale_rows(Var x, std::span<const double> weights);
Var slice_cols(Var x, std::size_t begin, std::size_t count);
Var transpose(Var x);
/// Same values in row-major order with a new rows x cols shape.
Var reshape(Var x, std::size_t rows, std::size_t cols);

/// Operator sugar over the primitives.
inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

struct GruWeights {
  Var w_z, w_r, w_h;  // input_dim x state_dim
  Var u_z, u_r, u_h;  // state_dim x state_dim
  Var b_z, b_r, b_h;  // 1 x state_dim

  /// Binds "<prefix>.W_z", ... from params onto the tape.
  static GruWeights bind(Tape& tape, const ParamSet& params, const std::string& prefix);
};

/// Standard GRU step over a batch of rows:
/// z = s(x Wz + h Uz + bz), r = s(x Wr + h Ur + br),
/// n = tanh(x Wh + (r . h) Uh + bh), h' = (1 - z) . h + z . n.
Var gru_cell(Var x, Var h, const GruWeights& w);

/// Adds GRU parameters under prefix (Glorot-uniform matrices, zero biases).
void init_gru(ParamSet& params, const std::string& prefix, std::size_t input_dim, std::size_t state_dim, Rng& rng);

/// Glorot-uniform matrix: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
Tensor glorot_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng);

/// Dense layer stack "<prefix>.<i>.W" / "<prefix>.<i>.b" with the given widths
/// (widths[0] is the input size). ReLU between layers, none after the last.
void init_mlp(ParamSet& params, const std::string& prefix, const std::vector<std::size_t>& widths, Rng& rng);
Var mlp(Tape& tape, const ParamSet& params, const std::string& prefix, std::size_t layers, Var x);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// L2 coefficient per parameter-name prefix; a parameter matches the first
/// entry whose prefix equals its leading dotted component(s). Others get 0.
using L2Groups = std::vector<std::pair<std::string, double>>;
double l2_coefficient(const L2Groups& groups, const std::string& name);

class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  /// One update of every parameter present in grads; c * w is added to each
  /// gradient first, with c from l2. Parameters without a gradient are left
  /// untouched. Throws NumericalError naming the first non-finite gradient.
  void step(ParamSet& params, const Gradients& grads, const L2Groups& l2 = {});

  const AdamConfig& config() const { return config_; }
  long long steps() const { return t_; }
  /// Moment estimates as "m.<name>" / "v.<name>" for checkpointing.
  ParamSet state() const;
  void load_state(const ParamSet& state, long long steps);

 private:
  AdamConfig config_;
  long long t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

/// Versioned little-endian container: magic, version, manifest JSON, then
/// name -> (shape, float64 values). Round trips are bit-exact.
std::string serialize_checkpoint(const ParamSet& params, const nlohmann::json& manifest);
std::pair<ParamSet, nlohmann::json> deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const std::string& path, const ParamSet& params, const nlohmann::json& manifest);
std::pair<ParamSet, nlohmann::json> load_checkpoint(const std::string& path);

}  // namespace ad
}  // namespace glance
