#pragma once

// Reverse-mode differentiation on an append-only tape of rank <= 2 tensors.
//
// Every op evaluates eagerly and records a node; backward() walks the nodes
// in reverse creation order, which is a valid reverse topological order since
// parents always precede children.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rtpp/tensor.hpp"

namespace rtpp::ad {

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::int32_t id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
};

enum class Op : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  MatVec,
  MatMul,
  Concat,
  Slice,
  Tanh,
  Sigmoid,
  Exp,
  Log,
  Softplus,
  Neg,
  Sum,
  Scale,
  Shift,
  Map,
};

const char* op_name(Op op);

/// Elementwise function with its derivative, for ops not in the built-in set.
struct UnaryFn {
  std::function<double(double)> value;
  std::function<double(double)> derivative;
};

class Tape {
 public:
  Tape();

  Var constant(const Tensor& t);
  Var constant(double v);
  /// Leaf whose gradient is reported by parameter_gradients().
  Var parameter(const Tensor& t);

  // Binary ops accept equal shapes, or a 1x1 operand broadcast over the other.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var matvec(Var m, Var v);
  Var matmul(Var a, Var b);
  /// Vertical stack of column vectors.
  Var concat(std::span<const Var> parts);
  /// Rows [begin, begin + count) of a column vector.
  Var slice(Var v, std::size_t begin, std::size_t count);
  Var tanh(Var x);
  Var sigmoid(Var x);
  Var exp(Var x);
  Var log(Var x);
  Var softplus(Var x);
  Var neg(Var x);
  Var sum(Var x);
  Var scale(Var x, double k);
  Var shift(Var x, double k);
  Var map(Var x, UnaryFn fn);

  /// Populates adjoints for every node reachable from a scalar loss.
  /// Adjoints are reset first, so repeated calls give identical results.
  void backward(Var loss);

  std::span<const double> value(Var v) const;
  double scalar(Var v) const;
  Tensor value_tensor(Var v) const;
  std::span<const double> grad(Var v) const;
  Tensor grad_tensor(Var v) const;
  std::size_t rows(Var v) const { return nodes_.at(v.id).rows; }
  std::size_t cols(Var v) const { return nodes_.at(v.id).cols; }
  Op op(Var v) const { return nodes_.at(v.id).op; }

  const std::vector<std::int32_t>& parameter_ids() const { return params_; }
  /// Gradients of the last backward() in parameter registration order.
  std::vector<Tensor> parameter_gradients() const;

  std::size_t size() const { return nodes_.size(); }
  void clear();

  /// Position on the tape; rewind() drops every node recorded after it.
  struct Mark {
    std::size_t nodes, values, concat_parents, maps, params;
  };
  Mark mark() const;
  void rewind(const Mark& m);

 private:
  struct Node {
    Op op;
    std::int32_t a;
    std::int32_t b;
    std::uint32_t rows;
    std::uint32_t cols;
    std::size_t offset;
    double k;
    std::int32_t extra;
  };

  Var push(Op op, std::int32_t a, std::int32_t b, std::size_t rows, std::size_t cols, double k = 0.0,
           std::int32_t extra = 0);
  const Node& node(Var v) const;
  void check_owner(Var v, const char* op) const;
  void check_finite(Var out) const;
  Var binary(Op op, Var a, Var b);
  Var unary(Op op, Var x, double k = 0.0, std::int32_t extra = 0);
  void backprop_node(std::size_t i);

  std::vector<Node> nodes_;
  std::vector<double> values_;
  std::vector<double> adjoints_;
  std::vector<std::int32_t> concat_parents_;
  std::vector<UnaryFn> maps_;
  std::vector<std::int32_t> params_;
  bool has_adjoints_ = false;
};

Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator-(Var a);
Var operator*(double k, Var x);
Var operator+(Var x, double k);
Var operator-(Var x, double k);

inline Var matvec(Var m, Var v) { return m.tape->matvec(m, v); }
inline Var matmul(Var a, Var b) { return a.tape->matmul(a, b); }
inline Var tanh(Var x) { return x.tape->tanh(x); }
inline Var sigmoid(Var x) { return x.tape->sigmoid(x); }
inline Var exp(Var x) { return x.tape->exp(x); }
inline Var log(Var x) { return x.tape->log(x); }
inline Var softplus(Var x) { return x.tape->softplus(x); }
inline Var sum(Var x) { return x.tape->sum(x); }
inline Var slice(Var v, std::size_t begin, std::size_t count) { return v.tape->slice(v, begin, count); }
Var concat(std::initializer_list<Var> parts);

/// Builds a scalar loss on the given tape from parameter leaves.
using TapeFunction = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckReport {
  /// Largest relative error within each parameter tensor.
  std::vector<double> max_rel_error_per_param;
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
  bool passed = false;
};

/// |analytic - numeric| / max(|analytic|, |numeric|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-6);

/// Compares tape gradients to central finite differences for every parameter entry.
GradCheckReport grad_check(const TapeFunction& f, const std::vector<Tensor>& params, double h = 1e-5,
                           double tol = 1e-4);

}  // namespace rtpp::ad
