#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// float64 tensors. A Tape records primitives as they execute; backward()
// walks it in reverse and accumulates gradients into every leaf.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace dcollapse::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Value of a single-element tensor.
  double item() const;

  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// A trainable tensor together with its gradient buffer.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
};

void zero_grad(std::span<Parameter> params);

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Access handed to a primitive's backward rule.
class BackwardContext {
 public:
  const Tensor& out_grad() const;
  const Tensor& output() const;
  const Tensor& input(std::size_t k) const;
  bool needs_grad(std::size_t k) const;
  /// Gradient buffer of input k, zero-initialized on first access.
  Tensor& input_grad(std::size_t k);

 private:
  friend class Tape;
  BackwardContext(Tape& tape, std::size_t node) : tape_(tape), node_(node) {}
  Tape& tape_;
  std::size_t node_;
};

using BackwardFn = std::function<void(BackwardContext&)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Non-differentiable input.
  Var constant(Tensor value);
  /// Differentiable input; its gradient is readable through grad() after backward.
  Var leaf(Tensor value);
  /// Differentiable input bound to a parameter; backward accumulates into p.grad.
  Var param(Parameter& p);

  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  /// Gradient of the last backward() with respect to v (zeros if v was unreached).
  Tensor grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a scalar loss. Every parameter registered on this tape
  /// has its gradient overwritten (zeros when the loss does not depend on it).
  void backward(Var loss);

 private:
  friend class BackwardContext;
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };
  Tensor& grad_buffer(std::size_t id);
  std::vector<Node> nodes_;
};

inline void backward(Var loss) { loss.tape().backward(loss); }

// ---- primitives -------------------------------------------------------------

Var matmul(Var a, Var b);               // [m,k] x [k,n]
Var transpose(Var a);                   // 2-D
Var add(Var a, Var b);                  // same shape
Var sub(Var a, Var b);                  // same shape
Var mul(Var a, Var b);                  // elementwise, same shape
Var add_bias(Var x, Var bias);          // [n,f] + [f]
Var scalar_mul(Var a, double s);
Var add_scalar(Var a, double s);
Var relu(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);
Var sum(Var a);                         // -> [1]
Var mean(Var a);                        // -> [1]
Var sum_rows(Var a);                    // [n,f] -> [n]
Var concat(std::span<const Var> parts); // along axis 0
Var reshape(Var a, Shape shape);
Var diag(Var a);                        // [n,n] -> [n]
/// Row-wise x / ||x||. Throws DegenerateRow on a zero-norm row.
Var l2_normalize_rows(Var a);
/// Row-wise log(sum(exp(x))) with max subtraction. [n,f] -> [n]
Var logsumexp_rows(Var a);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// x [n,c,h,w], weight [o,c,k,k], bias [o] (may be a default Var for none).
Var conv2d(Var x, Var weight, Var bias, Conv2dOptions opts = {});
Var conv2d(Var x, Var weight, Conv2dOptions opts = {});
/// Non-overlapping k x k average pooling; h and w must be divisible by k.
Var avgpool2d(Var x, std::size_t k);
/// [n,c,h,w] -> [n,c]
Var global_avgpool(Var x);

std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad);

// ---- optimizer --------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;
};

AdamState make_adam(std::span<const Parameter> params, AdamConfig config = {});

/// One bias-corrected Adam update using each parameter's grad.
void adam_step(std::span<Parameter> params, AdamState& state);

// ---- gradient checking -------------------------------------------------------

/// Builds a scalar from the differentiable input on a fresh tape.
using ScalarProgram = std::function<Var(Var)>;

/// Max relative error between reverse-mode and central-difference gradients
/// over `coordinates` sampled entries of x (all entries if fewer).
double finite_diff_check(const ScalarProgram& f, const Tensor& x, std::size_t coordinates,
                         std::uint64_t seed, double h = 1e-5);

}  // namespace dcollapse::ad
