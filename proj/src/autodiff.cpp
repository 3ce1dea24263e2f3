#include "dcollapse/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "dcollapse/error.hpp"
#include "dcollapse/rng.hpp"

namespace dcollapse::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

MapMat as_mat(Tensor& t, std::size_t rows, std::size_t cols) {
  return MapMat(t.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
CMapMat as_mat(const Tensor& t, std::size_t rows, std::size_t cols) {
  return CMapMat(t.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const char* expected) {
  throw ShapeError(std::string(op) + ": got shape " + shape_str(a) + ", expected " + expected);
}

void require_same_tape(const Var& a, const Var& b, const char* op) {
  if (&a.tape() != &b.tape()) throw InvalidInput(std::string(op) + ": operands live on different tapes");
}

// Elementwise unary op with derivative expressed through input and output.
template <class Fwd, class Deriv>
Var unary(Var a, Fwd fwd, Deriv deriv) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  return a.tape().record(std::move(y), {a.id()}, [deriv](BackwardContext& ctx) {
    if (!ctx.needs_grad(0)) return;
    const Tensor& x = ctx.input(0);
    const Tensor& y = ctx.output();
    const Tensor& g = ctx.out_grad();
    Tensor& dx = ctx.input_grad(0);
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] += g[i] * deriv(x[i], y[i]);
  });
}

}  // namespace

// ---- Tensor -----------------------------------------------------------------

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
  for (auto e : shape_)
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape_));
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto e : shape_)
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape_));
  if (shape_size(shape_) != data_.size())
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_str(shape_));
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void zero_grad(std::span<Parameter> params) {
  for (auto& p : params) p.grad = Tensor(p.value.shape());
}

// ---- Tape -------------------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }

const Tensor& BackwardContext::out_grad() const { return tape_.nodes_[node_].grad; }
const Tensor& BackwardContext::output() const { return tape_.nodes_[node_].value; }
const Tensor& BackwardContext::input(std::size_t k) const {
  return tape_.nodes_[tape_.nodes_[node_].inputs[k]].value;
}
bool BackwardContext::needs_grad(std::size_t k) const {
  return tape_.nodes_[tape_.nodes_[node_].inputs[k]].requires_grad;
}
Tensor& BackwardContext::input_grad(std::size_t k) { return tape_.grad_buffer(tape_.nodes_[node_].inputs[k]); }

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(Parameter& p) {
  Node n;
  n.value = p.value;
  n.requires_grad = true;
  n.param = &p;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  for (auto i : inputs) {
    if (i >= nodes_.size()) throw InvalidInput("tape input precedes no recorded node");
    n.requires_grad = n.requires_grad || nodes_[i].requires_grad;
  }
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id());
  return n.grad.empty() ? Tensor(n.value.shape()) : n.grad;
}

void Tape::backward(Var loss) {
  if (&loss.tape() != this) throw InvalidInput("backward: loss belongs to a different tape");
  const Tensor& lv = nodes_.at(loss.id()).value;
  if (lv.size() != 1) throw InvalidInput("backward: loss must be a scalar, got shape " + shape_str(lv.shape()));

  for (auto& n : nodes_) n.grad = Tensor();
  for (auto& n : nodes_)
    if (n.param) n.param->grad = Tensor(n.param->value.shape());

  grad_buffer(loss.id())[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) {
      BackwardContext ctx(*this, i);
      n.backward(ctx);
    }
    if (n.param) {
      auto& pg = n.param->grad.storage();
      const auto& g = n.grad.storage();
      for (std::size_t k = 0; k < g.size(); ++k) pg[k] += g[k];
    }
  }
}

// ---- primitives -------------------------------------------------------------

Var matmul(Var a, Var b) {
  require_same_tape(a, b, "matmul");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) shape_fail("matmul", A.shape(), B.shape());
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor C({m, n});
  as_mat(C, m, n).noalias() = as_mat(A, m, k) * as_mat(B, k, n);
  return a.tape().record(std::move(C), {a.id(), b.id()}, [m, k, n](BackwardContext& ctx) {
    auto G = as_mat(ctx.out_grad(), m, n);
    if (ctx.needs_grad(0)) as_mat(ctx.input_grad(0), m, k).noalias() += G * as_mat(ctx.input(1), k, n).transpose();
    if (ctx.needs_grad(1)) as_mat(ctx.input_grad(1), k, n).noalias() += as_mat(ctx.input(0), m, k).transpose() * G;
  });
}

Var transpose(Var a) {
  const Tensor& A = a.value();
  if (A.rank() != 2) shape_fail("transpose", A.shape(), "rank 2");
  const std::size_t r = A.dim(0), c = A.dim(1);
  Tensor T({c, r});
  as_mat(T, c, r) = as_mat(A, r, c).transpose();
  return a.tape().record(std::move(T), {a.id()}, [r, c](BackwardContext& ctx) {
    if (ctx.needs_grad(0)) as_mat(ctx.input_grad(0), r, c) += as_mat(ctx.out_grad(), c, r).transpose();
  });
}

Var add(Var a, Var b) {
  require_same_tape(a, b, "add");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape() != B.shape()) shape_fail("add", A.shape(), B.shape());
  Tensor C(A.shape());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] + B[i];
  return a.tape().record(std::move(C), {a.id(), b.id()}, [](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    for (std::size_t k = 0; k < 2; ++k) {
      if (!ctx.needs_grad(k)) continue;
      Tensor& d = ctx.input_grad(k);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b, "sub");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape() != B.shape()) shape_fail("sub", A.shape(), B.shape());
  Tensor C(A.shape());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] - B[i];
  return a.tape().record(std::move(C), {a.id(), b.id()}, [](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    if (ctx.needs_grad(0)) {
      Tensor& d = ctx.input_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (ctx.needs_grad(1)) {
      Tensor& d = ctx.input_grad(1);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b, "mul");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape() != B.shape()) shape_fail("mul", A.shape(), B.shape());
  Tensor C(A.shape());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] * B[i];
  return a.tape().record(std::move(C), {a.id(), b.id()}, [](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    if (ctx.needs_grad(0)) {
      Tensor& d = ctx.input_grad(0);
      const Tensor& B = ctx.input(1);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * B[i];
    }
    if (ctx.needs_grad(1)) {
      Tensor& d = ctx.input_grad(1);
      const Tensor& A = ctx.input(0);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * A[i];
    }
  });
}

Var add_bias(Var x, Var bias) {
  require_same_tape(x, bias, "add_bias");
  const Tensor& X = x.value();
  const Tensor& b = bias.value();
  if (X.rank() != 2 || b.rank() != 1 || b.dim(0) != X.dim(1)) shape_fail("add_bias", X.shape(), b.shape());
  const std::size_t n = X.dim(0), f = X.dim(1);
  Tensor Y(X.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < f; ++j) Y[i * f + j] = X[i * f + j] + b[j];
  return x.tape().record(std::move(Y), {x.id(), bias.id()}, [n, f](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    if (ctx.needs_grad(0)) {
      Tensor& d = ctx.input_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (ctx.needs_grad(1)) {
      Tensor& d = ctx.input_grad(1);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < f; ++j) d[j] += g[i * f + j];
    }
  });
}

Var scalar_mul(Var a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(Var a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var relu(Var a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  for (double v : a.value().data())
    if (!(v > 0.0)) throw InvalidInput("log: non-positive input " + std::to_string(v));
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var square(Var a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape().record(Tensor::scalar(s), {a.id()}, [](BackwardContext& ctx) {
    if (!ctx.needs_grad(0)) return;
    const double g = ctx.out_grad()[0];
    for (double& d : ctx.input_grad(0).data()) d += g;
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape().record(Tensor::scalar(s / n), {a.id()}, [n](BackwardContext& ctx) {
    if (!ctx.needs_grad(0)) return;
    const double g = ctx.out_grad()[0] / n;
    for (double& d : ctx.input_grad(0).data()) d += g;
  });
}

Var sum_rows(Var a) {
  const Tensor& X = a.value();
  if (X.rank() != 2) shape_fail("sum_rows", X.shape(), "rank 2");
  const std::size_t n = X.dim(0), f = X.dim(1);
  Tensor Y({n});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < f; ++j) s += X[i * f + j];
    Y[i] = s;
  }
  return a.tape().record(std::move(Y), {a.id()}, [n, f](BackwardContext& ctx) {
    if (!ctx.needs_grad(0)) return;
    const Tensor& g = ctx.out_grad();
    Tensor& d = ctx.input_grad(0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < f; ++j) d[i * f + j] += g[i];
  });
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw InvalidInput("concat: no inputs");
  const Shape& first = parts[0].shape();
  Shape out_shape = first;
  out_shape[0] = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> sizes;
  for (const Var& p : parts) {
    require_same_tape(parts[0], p, "concat");
    const Shape& s = p.shape();
    if (s.size() != first.size() || !std::equal(s.begin() + 1, s.end(), first.begin() + 1))
      shape_fail("concat", first, s);
    out_shape[0] += s[0];
    ids.push_back(p.id());
    sizes.push_back(p.value().size());
  }
  Tensor Y(out_shape);
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), Y.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += p.value().size();
  }
  return parts[0].tape().record(std::move(Y), std::move(ids), [sizes](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    std::size_t off = 0;
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      if (ctx.needs_grad(k)) {
        Tensor& d = ctx.input_grad(k);
        for (std::size_t i = 0; i < sizes[k]; ++i) d[i] += g[off + i];
      }
      off += sizes[k];
    }
  });
}

Var reshape(Var a, Shape shape) {
  if (shape_size(shape) != a.value().size()) shape_fail("reshape", a.shape(), shape);
  Tensor Y(std::move(shape), a.value().storage());
  return a.tape().record(std::move(Y), {a.id()}, [](BackwardContext& ctx) {
    if (!ctx.needs_grad(0)) return;
    const Tensor& g = ctx.out_grad();
    Tensor& d = ctx.input_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

Var diag(Var a) {
  const Tensor& X = a.value();
  if (X.rank() != 2 || X.dim(0) != X.dim(1)) shape_fail("diag", X.shape(), "square rank 2");
  const std::size_t n = X.dim(0);
  Tensor Y({n});
  for (std::size_t i = 0; i < n; ++i) Y[i] = X[i * n + i];
  return a.tape().record(std::move(Y), {a.id()}, [n](BackwardContext& ctx) {
    if (!ctx.needs_grad(0)) return;
    const Tensor& g = ctx.out_grad();
    Tensor& d = ctx.input_grad(0);
    for (std::size_t i = 0; i < n; ++i) d[i * n + i] += g[i];
  });
}

Var l2_normalize_rows(Var a) {
  const Tensor& X = a.value();
  if (X.rank() != 2) shape_fail("l2_normalize_rows", X.shape(), "rank 2");
  const std::size_t n = X.dim(0), f = X.dim(1);
  Tensor Y(X.shape());
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < f; ++j) s += X[i * f + j] * X[i * f + j];
    const double r = std::sqrt(s);
    if (!(r > 0.0)) throw DegenerateRow("l2_normalize_rows: zero-norm row", i);
    norms[i] = r;
    for (std::size_t j = 0; j < f; ++j) Y[i * f + j] = X[i * f + j] / r;
  }
  return a.tape().record(std::move(Y), {a.id()}, [n, f, norms = std::move(norms)](BackwardContext& ctx) {
    if (!ctx.needs_grad(0)) return;
    const Tensor& g = ctx.out_grad();
    const Tensor& y = ctx.output();
    Tensor& d = ctx.input_grad(0);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < f; ++j) dot += y[i * f + j] * g[i * f + j];
      for (std::size_t j = 0; j < f; ++j) d[i * f + j] += (g[i * f + j] - y[i * f + j] * dot) / norms[i];
    }
  });
}

Var logsumexp_rows(Var a) {
  const Tensor& X = a.value();
  if (X.rank() != 2) shape_fail("logsumexp_rows", X.shape(), "rank 2");
  const std::size_t n = X.dim(0), f = X.dim(1);
  Tensor Y({n});
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = &X.data()[i * f];
    const double m = *std::max_element(row, row + f);
    double s = 0.0;
    for (std::size_t j = 0; j < f; ++j) s += std::exp(row[j] - m);
    Y[i] = m + std::log(s);
  }
  return a.tape().record(std::move(Y), {a.id()}, [n, f](BackwardContext& ctx) {
    if (!ctx.needs_grad(0)) return;
    const Tensor& g = ctx.out_grad();
    const Tensor& X = ctx.input(0);
    const Tensor& Y = ctx.output();
    Tensor& d = ctx.input_grad(0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < f; ++j) d[i * f + j] += g[i] * std::exp(X[i * f + j] - Y[i]);
  });
}

std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (stride == 0) throw InvalidInput("conv2d: stride must be positive");
  if (in + 2 * pad < k) throw ShapeError("conv2d: kernel larger than padded input");
  return (in + 2 * pad - k) / stride + 1;
}

Var conv2d(Var x, Var weight, Conv2dOptions opts) { return conv2d(x, weight, Var(), opts); }

Var conv2d(Var x, Var weight, Var bias, Conv2dOptions opts) {
  require_same_tape(x, weight, "conv2d");
  const bool has_bias = bias.valid();
  const Tensor& X = x.value();
  const Tensor& Wt = weight.value();
  if (X.rank() != 4 || Wt.rank() != 4 || Wt.dim(1) != X.dim(1) || Wt.dim(2) != Wt.dim(3))
    shape_fail("conv2d", X.shape(), Wt.shape());
  if (has_bias) {
    require_same_tape(x, bias, "conv2d");
    if (bias.value().rank() != 1 || bias.value().dim(0) != Wt.dim(0))
      shape_fail("conv2d", Wt.shape(), bias.value().shape());
  }
  const std::size_t N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
  const std::size_t O = Wt.dim(0), k = Wt.dim(2);
  const std::size_t s = opts.stride, pad = opts.padding;
  const std::size_t Ho = conv_out_extent(H, k, s, pad), Wo = conv_out_extent(W, k, s, pad);
  const std::size_t K = C * k * k, HW = Ho * Wo;

  // Per-image im2col, [n][(c, ki, kj)][(oy, ox)]. Each image is multiplied
  // separately so a sample's output never depends on the rest of the batch.
  auto cols = std::make_shared<std::vector<double>>(N * K * HW, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const double* src = &X.data()[(n * C + c) * H * W];
      for (std::size_t ki = 0; ki < k; ++ki)
        for (std::size_t kj = 0; kj < k; ++kj) {
          double* dst = cols->data() + (n * K + (c * k + ki) * k + kj) * HW;
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * s + ki) - static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * s + kj) - static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
              dst[oy * Wo + ox] = src[static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)];
            }
          }
        }
    }

  Tensor out({N, O, Ho, Wo});
  const auto Wm = as_mat(Wt, O, K);
  for (std::size_t n = 0; n < N; ++n) {
    MapMat Yn(out.data().data() + n * O * HW, static_cast<Eigen::Index>(O), static_cast<Eigen::Index>(HW));
    Yn.noalias() = Wm * CMapMat(cols->data() + n * K * HW, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(HW));
    if (has_bias)
      for (std::size_t o = 0; o < O; ++o) Yn.row(static_cast<Eigen::Index>(o)).array() += bias.value()[o];
  }

  std::vector<std::size_t> inputs{x.id(), weight.id()};
  if (has_bias) inputs.push_back(bias.id());
  return x.tape().record(
      std::move(out), std::move(inputs),
      [=, cols = std::move(cols)](BackwardContext& ctx) {
        const Tensor& dOut = ctx.out_grad();
        auto Gn = [&](std::size_t n) {
          return CMapMat(dOut.data().data() + n * O * HW, static_cast<Eigen::Index>(O), static_cast<Eigen::Index>(HW));
        };
        auto colsn = [&](std::size_t n) {
          return CMapMat(cols->data() + n * K * HW, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(HW));
        };
        if (ctx.needs_grad(1)) {
          auto dW = as_mat(ctx.input_grad(1), O, K);
          for (std::size_t n = 0; n < N; ++n) dW.noalias() += Gn(n) * colsn(n).transpose();
        }
        if (has_bias && ctx.needs_grad(2)) {
          Tensor& db = ctx.input_grad(2);
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t o = 0; o < O; ++o) db[o] += Gn(n).row(static_cast<Eigen::Index>(o)).sum();
        }
        if (!ctx.needs_grad(0)) return;
        const auto Wm = as_mat(ctx.input(1), O, K);
        Tensor& dX = ctx.input_grad(0);
        RowMat dcols(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(HW));
        for (std::size_t n = 0; n < N; ++n) {
          dcols.noalias() = Wm.transpose() * Gn(n);
          for (std::size_t c = 0; c < C; ++c) {
            double* dst = &dX.data()[(n * C + c) * H * W];
            for (std::size_t ki = 0; ki < k; ++ki)
              for (std::size_t kj = 0; kj < k; ++kj) {
                const double* src = dcols.data() + ((c * k + ki) * k + kj) * HW;
                for (std::size_t oy = 0; oy < Ho; ++oy) {
                  const auto iy = static_cast<std::ptrdiff_t>(oy * s + ki) - static_cast<std::ptrdiff_t>(pad);
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                  for (std::size_t ox = 0; ox < Wo; ++ox) {
                    const auto ix = static_cast<std::ptrdiff_t>(ox * s + kj) - static_cast<std::ptrdiff_t>(pad);
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                    dst[static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)] += src[oy * Wo + ox];
                  }
                }
              }
          }
        }
      });
}

Var avgpool2d(Var x, std::size_t k) {
  const Tensor& X = x.value();
  if (X.rank() != 4) shape_fail("avgpool2d", X.shape(), "rank 4");
  if (k == 0 || X.dim(2) % k != 0 || X.dim(3) % k != 0) shape_fail("avgpool2d", X.shape(), "extents divisible by k");
  const std::size_t N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
  const std::size_t Ho = H / k, Wo = W / k;
  const double inv = 1.0 / static_cast<double>(k * k);
  Tensor Y({N, C, Ho, Wo});
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        double s = 0.0;
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t j = 0; j < k; ++j) s += X[(nc * H + oy * k + i) * W + ox * k + j];
        Y[(nc * Ho + oy) * Wo + ox] = s * inv;
      }
  return x.tape().record(std::move(Y), {x.id()}, [=](BackwardContext& ctx) {
    if (!ctx.needs_grad(0)) return;
    const Tensor& g = ctx.out_grad();
    Tensor& d = ctx.input_grad(0);
    for (std::size_t nc = 0; nc < N * C; ++nc)
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          const double v = g[(nc * Ho + oy) * Wo + ox] * inv;
          for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j) d[(nc * H + oy * k + i) * W + ox * k + j] += v;
        }
  });
}

Var global_avgpool(Var x) {
  const Tensor& X = x.value();
  if (X.rank() != 4) shape_fail("global_avgpool", X.shape(), "rank 4");
  const std::size_t N = X.dim(0), C = X.dim(1), HW = X.dim(2) * X.dim(3);
  const double inv = 1.0 / static_cast<double>(HW);
  Tensor Y({N, C});
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    double s = 0.0;
    for (std::size_t p = 0; p < HW; ++p) s += X[nc * HW + p];
    Y[nc] = s * inv;
  }
  return x.tape().record(std::move(Y), {x.id()}, [=](BackwardContext& ctx) {
    if (!ctx.needs_grad(0)) return;
    const Tensor& g = ctx.out_grad();
    Tensor& d = ctx.input_grad(0);
    for (std::size_t nc = 0; nc < N * C; ++nc)
      for (std::size_t p = 0; p < HW; ++p) d[nc * HW + p] += g[nc] * inv;
  });
}

// ---- Adam -------------------------------------------------------------------

AdamState make_adam(std::span<const Parameter> params, AdamConfig config) {
  if (!(config.lr > 0.0) || config.beta1 < 0.0 || config.beta1 >= 1.0 || config.beta2 < 0.0 ||
      config.beta2 >= 1.0 || config.eps < 0.0)
    throw InvalidInput("adam: invalid hyperparameters");
  AdamState st;
  st.config = config;
  for (const auto& p : params) {
    st.m.emplace_back(p.value.shape());
    st.v.emplace_back(p.value.shape());
  }
  return st;
}

void adam_step(std::span<Parameter> params, AdamState& state) {
  if (params.size() != state.m.size()) throw ShapeError("adam_step: parameter count does not match optimizer state");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].grad.shape() != params[i].value.shape())
      shape_fail("adam_step", params[i].value.shape(), params[i].grad.shape());
    if (state.m[i].shape() != params[i].value.shape())
      shape_fail("adam_step", params[i].value.shape(), state.m[i].shape());
  }
  const auto& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i].value.storage();
    const auto& g = params[i].grad.storage();
    auto& m = state.m[i].storage();
    auto& v = state.v[i].storage();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
      const double mh = m[j] / bc1;
      const double vh = v[j] / bc2;
      w[j] -= c.lr * mh / (std::sqrt(vh) + c.eps);
    }
  }
}

// ---- finite differences -----------------------------------------------------

double finite_diff_check(const ScalarProgram& f, const Tensor& x, std::size_t coordinates, std::uint64_t seed,
                         double h) {
  Tensor grad;
  {
    Tape tape;
    Var in = tape.leaf(x);
    Var out = f(in);
    tape.backward(out);
    grad = tape.grad(in);
  }
  auto eval = [&](const Tensor& xv) {
    Tape tape;
    return f(tape.leaf(xv)).value().item();
  };

  std::vector<std::size_t> coords;
  if (coordinates >= x.size()) {
    coords.resize(x.size());
    std::iota(coords.begin(), coords.end(), 0);
  } else {
    Rng rng(seed);
    std::unordered_set<std::size_t> seen;
    while (coords.size() < coordinates) {
      const auto c = static_cast<std::size_t>(rng.below(x.size()));
      if (seen.insert(c).second) coords.push_back(c);
    }
  }

  double worst = 0.0;
  for (auto c : coords) {
    Tensor xp = x, xm = x;
    xp[c] += h;
    xm[c] -= h;
    const double fd = (eval(xp) - eval(xm)) / (2.0 * h);
    const double ad = grad[c];
    const double denom = std::max({std::abs(fd), std::abs(ad), 1e-6});
    worst = std::max(worst, std::abs(fd - ad) / denom);
  }
  return worst;
}

}  // namespace dcollapse::ad
