#include "rtpp/diffgraph.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "rtpp/errors.hpp"

namespace rtpp {

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    std::ostringstream msg;
    msg << "Tensor: " << data_.size() << " values do not fill shape [" << rows << "," << cols << "]";
    throw ShapeError(msg.str());
  }
}

Tensor Tensor::column(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor(n, 1, std::move(values));
}

}  // namespace rtpp

namespace rtpp::ad {
namespace {

std::string shape_str(std::size_t r, std::size_t c) {
  std::ostringstream s;
  s << "[" << r << "," << c << "]";
  return s.str();
}

double stable_softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::MatVec: return "matvec";
    case Op::MatMul: return "matmul";
    case Op::Concat: return "concat";
    case Op::Slice: return "slice";
    case Op::Tanh: return "tanh";
    case Op::Sigmoid: return "sigmoid";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Softplus: return "softplus";
    case Op::Neg: return "negate";
    case Op::Sum: return "sum";
    case Op::Scale: return "scale";
    case Op::Shift: return "shift";
    case Op::Map: return "map";
  }
  return "?";
}

Tape::Tape() {
  nodes_.reserve(256);
  values_.reserve(4096);
}

void Tape::clear() {
  nodes_.clear();
  values_.clear();
  adjoints_.clear();
  concat_parents_.clear();
  maps_.clear();
  params_.clear();
  has_adjoints_ = false;
}

Tape::Mark Tape::mark() const {
  return {nodes_.size(), values_.size(), concat_parents_.size(), maps_.size(), params_.size()};
}

void Tape::rewind(const Mark& m) {
  if (m.nodes > nodes_.size()) throw std::invalid_argument("rewind: mark is ahead of the tape");
  nodes_.resize(m.nodes);
  values_.resize(m.values);
  concat_parents_.resize(m.concat_parents);
  maps_.resize(m.maps);
  params_.resize(m.params);
  has_adjoints_ = false;
}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
    throw std::invalid_argument("Var does not belong to this tape");
  return nodes_[v.id];
}

void Tape::check_owner(Var v, const char* op) const {
  if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
    throw std::invalid_argument(std::string(op) + ": operand does not belong to this tape");
}

Var Tape::push(Op op, std::int32_t a, std::int32_t b, std::size_t rows, std::size_t cols, double k,
               std::int32_t extra) {
  Node n{op, a, b, static_cast<std::uint32_t>(rows), static_cast<std::uint32_t>(cols), values_.size(), k, extra};
  values_.resize(values_.size() + rows * cols);
  nodes_.push_back(n);
  has_adjoints_ = false;
  return Var{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

void Tape::check_finite(Var out) const {
  const Node& n = nodes_[out.id];
  const double* p = values_.data() + n.offset;
  for (std::size_t i = 0; i < std::size_t{n.rows} * n.cols; ++i) {
    if (!std::isfinite(p[i])) {
      std::ostringstream msg;
      msg << op_name(n.op) << " produced a non-finite value at node " << out.id;
      throw NumericalError(msg.str());
    }
  }
}

Var Tape::constant(const Tensor& t) {
  Var v = push(Op::Leaf, -1, -1, t.rows(), t.cols());
  std::copy(t.data().begin(), t.data().end(), values_.begin() + nodes_[v.id].offset);
  check_finite(v);
  return v;
}

Var Tape::constant(double x) { return constant(Tensor::scalar(x)); }

Var Tape::parameter(const Tensor& t) {
  Var v = constant(t);
  params_.push_back(v.id);
  return v;
}

Var Tape::binary(Op op, Var a, Var b) {
  check_owner(a, op_name(op));
  check_owner(b, op_name(op));
  const Node na = nodes_[a.id];
  const Node nb = nodes_[b.id];
  const std::size_t sa = std::size_t{na.rows} * na.cols;
  const std::size_t sb = std::size_t{nb.rows} * nb.cols;
  std::size_t rows, cols;
  if (na.rows == nb.rows && na.cols == nb.cols) {
    rows = na.rows;
    cols = na.cols;
  } else if (sa == 1) {
    rows = nb.rows;
    cols = nb.cols;
  } else if (sb == 1) {
    rows = na.rows;
    cols = na.cols;
  } else {
    throw ShapeError(std::string(op_name(op)) + ": shape mismatch " + shape_str(na.rows, na.cols) + " vs " +
                     shape_str(nb.rows, nb.cols));
  }
  Var out = push(op, a.id, b.id, rows, cols);
  const double* pa = values_.data() + na.offset;
  const double* pb = values_.data() + nb.offset;
  double* po = values_.data() + nodes_[out.id].offset;
  const std::size_t n = rows * cols;
  const std::size_t ia = sa == 1 ? 0 : 1;
  const std::size_t ib = sb == 1 ? 0 : 1;
  switch (op) {
    case Op::Add:
      for (std::size_t i = 0; i < n; ++i) po[i] = pa[i * ia] + pb[i * ib];
      break;
    case Op::Sub:
      for (std::size_t i = 0; i < n; ++i) po[i] = pa[i * ia] - pb[i * ib];
      break;
    case Op::Mul:
      for (std::size_t i = 0; i < n; ++i) po[i] = pa[i * ia] * pb[i * ib];
      break;
    default:
      break;
  }
  check_finite(out);
  return out;
}

Var Tape::add(Var a, Var b) { return binary(Op::Add, a, b); }
Var Tape::sub(Var a, Var b) { return binary(Op::Sub, a, b); }
Var Tape::mul(Var a, Var b) { return binary(Op::Mul, a, b); }

Var Tape::matvec(Var m, Var v) {
  check_owner(m, "matvec");
  check_owner(v, "matvec");
  const Node nm = nodes_[m.id];
  const Node nv = nodes_[v.id];
  if (nv.cols != 1 || nm.cols != nv.rows)
    throw ShapeError("matvec: shape mismatch " + shape_str(nm.rows, nm.cols) + " x " + shape_str(nv.rows, nv.cols));
  Var out = push(Op::MatVec, m.id, v.id, nm.rows, 1);
  const double* pm = values_.data() + nm.offset;
  const double* pv = values_.data() + nv.offset;
  double* po = values_.data() + nodes_[out.id].offset;
  for (std::size_t r = 0; r < nm.rows; ++r) {
    const double* row = pm + r * nm.cols;
    double acc = 0.0;
    for (std::size_t c = 0; c < nm.cols; ++c) acc += row[c] * pv[c];
    po[r] = acc;
  }
  check_finite(out);
  return out;
}

Var Tape::matmul(Var a, Var b) {
  check_owner(a, "matmul");
  check_owner(b, "matmul");
  const Node na = nodes_[a.id];
  const Node nb = nodes_[b.id];
  if (na.cols != nb.rows)
    throw ShapeError("matmul: shape mismatch " + shape_str(na.rows, na.cols) + " x " + shape_str(nb.rows, nb.cols));
  Var out = push(Op::MatMul, a.id, b.id, na.rows, nb.cols);
  const double* pa = values_.data() + na.offset;
  const double* pb = values_.data() + nb.offset;
  double* po = values_.data() + nodes_[out.id].offset;
  for (std::size_t r = 0; r < na.rows; ++r) {
    for (std::size_t c = 0; c < nb.cols; ++c) {
      double acc = 0.0;
      for (std::size_t k = 0; k < na.cols; ++k) acc += pa[r * na.cols + k] * pb[k * nb.cols + c];
      po[r * nb.cols + c] = acc;
    }
  }
  check_finite(out);
  return out;
}

Var Tape::concat(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  std::size_t rows = 0;
  for (Var p : parts) {
    check_owner(p, "concat");
    const Node& n = nodes_[p.id];
    if (n.cols != 1) throw ShapeError("concat: operand " + shape_str(n.rows, n.cols) + " is not a column vector");
    rows += n.rows;
  }
  const auto first = static_cast<std::int32_t>(concat_parents_.size());
  for (Var p : parts) concat_parents_.push_back(p.id);
  Var out = push(Op::Concat, first, static_cast<std::int32_t>(parts.size()), rows, 1);
  double* po = values_.data() + nodes_[out.id].offset;
  for (Var p : parts) {
    const Node& n = nodes_[p.id];
    const double* src = values_.data() + n.offset;
    po = std::copy(src, src + n.rows, po);
  }
  return out;
}

Var Tape::slice(Var v, std::size_t begin, std::size_t count) {
  check_owner(v, "slice");
  const Node nv = nodes_[v.id];
  if (nv.cols != 1 || begin + count > nv.rows || count == 0) {
    std::ostringstream msg;
    msg << "slice: rows [" << begin << "," << begin + count << ") out of range for " << shape_str(nv.rows, nv.cols);
    throw ShapeError(msg.str());
  }
  Var out = push(Op::Slice, v.id, -1, count, 1, 0.0, static_cast<std::int32_t>(begin));
  const double* src = values_.data() + nv.offset + begin;
  std::copy(src, src + count, values_.begin() + nodes_[out.id].offset);
  return out;
}

Var Tape::unary(Op op, Var x, double k, std::int32_t extra) {
  check_owner(x, op_name(op));
  const Node nx = nodes_[x.id];
  const std::size_t n = std::size_t{nx.rows} * nx.cols;
  Var out = op == Op::Sum ? push(op, x.id, -1, 1, 1, k, extra) : push(op, x.id, -1, nx.rows, nx.cols, k, extra);
  const double* px = values_.data() + nx.offset;
  double* po = values_.data() + nodes_[out.id].offset;
  switch (op) {
    case Op::Tanh:
      for (std::size_t i = 0; i < n; ++i) po[i] = std::tanh(px[i]);
      break;
    case Op::Sigmoid:
      for (std::size_t i = 0; i < n; ++i) po[i] = logistic(px[i]);
      break;
    case Op::Exp:
      for (std::size_t i = 0; i < n; ++i) po[i] = std::exp(px[i]);
      break;
    case Op::Log:
      for (std::size_t i = 0; i < n; ++i) po[i] = std::log(px[i]);
      break;
    case Op::Softplus:
      for (std::size_t i = 0; i < n; ++i) po[i] = stable_softplus(px[i]);
      break;
    case Op::Neg:
      for (std::size_t i = 0; i < n; ++i) po[i] = -px[i];
      break;
    case Op::Sum: {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += px[i];
      po[0] = acc;
      break;
    }
    case Op::Scale:
      for (std::size_t i = 0; i < n; ++i) po[i] = k * px[i];
      break;
    case Op::Shift:
      for (std::size_t i = 0; i < n; ++i) po[i] = px[i] + k;
      break;
    case Op::Map: {
      const auto& f = maps_[extra].value;
      for (std::size_t i = 0; i < n; ++i) po[i] = f(px[i]);
      break;
    }
    default:
      break;
  }
  check_finite(out);
  return out;
}

Var Tape::tanh(Var x) { return unary(Op::Tanh, x); }
Var Tape::sigmoid(Var x) { return unary(Op::Sigmoid, x); }
Var Tape::exp(Var x) { return unary(Op::Exp, x); }
Var Tape::log(Var x) { return unary(Op::Log, x); }
Var Tape::softplus(Var x) { return unary(Op::Softplus, x); }
Var Tape::neg(Var x) { return unary(Op::Neg, x); }
Var Tape::sum(Var x) { return unary(Op::Sum, x); }
Var Tape::scale(Var x, double k) { return unary(Op::Scale, x, k); }
Var Tape::shift(Var x, double k) { return unary(Op::Shift, x, k); }

Var Tape::map(Var x, UnaryFn fn) {
  if (!fn.value || !fn.derivative) throw std::invalid_argument("map: missing function");
  maps_.push_back(std::move(fn));
  return unary(Op::Map, x, 0.0, static_cast<std::int32_t>(maps_.size() - 1));
}

void Tape::backprop_node(std::size_t i) {
  const Node& n = nodes_[i];
  const std::size_t size = std::size_t{n.rows} * n.cols;
  const double* go = adjoints_.data() + n.offset;
  const double* vo = values_.data() + n.offset;
  switch (n.op) {
    case Op::Leaf:
      return;
    case Op::Add:
    case Op::Sub:
    case Op::Mul: {
      const Node& na = nodes_[n.a];
      const Node& nb = nodes_[n.b];
      const bool ba = std::size_t{na.rows} * na.cols == 1 && size != 1;
      const bool bb = std::size_t{nb.rows} * nb.cols == 1 && size != 1;
      double* ga = adjoints_.data() + na.offset;
      double* gb = adjoints_.data() + nb.offset;
      const double* va = values_.data() + na.offset;
      const double* vb = values_.data() + nb.offset;
      for (std::size_t j = 0; j < size; ++j) {
        const std::size_t ja = ba ? 0 : j;
        const std::size_t jb = bb ? 0 : j;
        if (n.op == Op::Add) {
          ga[ja] += go[j];
          gb[jb] += go[j];
        } else if (n.op == Op::Sub) {
          ga[ja] += go[j];
          gb[jb] -= go[j];
        } else {
          ga[ja] += go[j] * vb[jb];
          gb[jb] += go[j] * va[ja];
        }
      }
      return;
    }
    case Op::MatVec: {
      const Node& nm = nodes_[n.a];
      const Node& nv = nodes_[n.b];
      double* gm = adjoints_.data() + nm.offset;
      double* gv = adjoints_.data() + nv.offset;
      const double* vm = values_.data() + nm.offset;
      const double* vv = values_.data() + nv.offset;
      for (std::size_t r = 0; r < nm.rows; ++r) {
        const double g = go[r];
        if (g == 0.0) continue;
        double* grow = gm + r * nm.cols;
        const double* vrow = vm + r * nm.cols;
        for (std::size_t c = 0; c < nm.cols; ++c) {
          grow[c] += g * vv[c];
          gv[c] += g * vrow[c];
        }
      }
      return;
    }
    case Op::MatMul: {
      const Node& na = nodes_[n.a];
      const Node& nb = nodes_[n.b];
      double* ga = adjoints_.data() + na.offset;
      double* gb = adjoints_.data() + nb.offset;
      const double* va = values_.data() + na.offset;
      const double* vb = values_.data() + nb.offset;
      const std::size_t rows = na.rows, inner = na.cols, cols = nb.cols;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
          const double g = go[r * cols + c];
          for (std::size_t k = 0; k < inner; ++k) {
            ga[r * inner + k] += g * vb[k * cols + c];
            gb[k * cols + c] += g * va[r * inner + k];
          }
        }
      return;
    }
    case Op::Concat: {
      std::size_t pos = 0;
      for (std::int32_t p = 0; p < n.b; ++p) {
        const Node& np = nodes_[concat_parents_[n.a + p]];
        double* gp = adjoints_.data() + np.offset;
        for (std::size_t r = 0; r < np.rows; ++r) gp[r] += go[pos + r];
        pos += np.rows;
      }
      return;
    }
    case Op::Slice: {
      double* gp = adjoints_.data() + nodes_[n.a].offset + n.extra;
      for (std::size_t j = 0; j < size; ++j) gp[j] += go[j];
      return;
    }
    default:
      break;
  }
  // Elementwise unary ops and sum.
  const Node& nx = nodes_[n.a];
  double* gx = adjoints_.data() + nx.offset;
  const double* vx = values_.data() + nx.offset;
  const std::size_t nsize = std::size_t{nx.rows} * nx.cols;
  switch (n.op) {
    case Op::Tanh:
      for (std::size_t j = 0; j < size; ++j) gx[j] += go[j] * (1.0 - vo[j] * vo[j]);
      break;
    case Op::Sigmoid:
      for (std::size_t j = 0; j < size; ++j) gx[j] += go[j] * vo[j] * (1.0 - vo[j]);
      break;
    case Op::Exp:
      for (std::size_t j = 0; j < size; ++j) gx[j] += go[j] * vo[j];
      break;
    case Op::Log:
      for (std::size_t j = 0; j < size; ++j) gx[j] += go[j] / vx[j];
      break;
    case Op::Softplus:
      for (std::size_t j = 0; j < size; ++j) gx[j] += go[j] * logistic(vx[j]);
      break;
    case Op::Neg:
      for (std::size_t j = 0; j < size; ++j) gx[j] -= go[j];
      break;
    case Op::Sum:
      for (std::size_t j = 0; j < nsize; ++j) gx[j] += go[0];
      break;
    case Op::Scale:
      for (std::size_t j = 0; j < size; ++j) gx[j] += go[j] * n.k;
      break;
    case Op::Shift:
      for (std::size_t j = 0; j < size; ++j) gx[j] += go[j];
      break;
    case Op::Map: {
      const auto& df = maps_[n.extra].derivative;
      for (std::size_t j = 0; j < size; ++j) gx[j] += go[j] * df(vx[j]);
      break;
    }
    default:
      break;
  }
}

void Tape::backward(Var loss) {
  const Node& nl = node(loss);
  if (nl.rows != 1 || nl.cols != 1)
    throw ShapeError("backward: loss must be scalar, got " + shape_str(nl.rows, nl.cols));
  adjoints_.assign(values_.size(), 0.0);
  adjoints_[nl.offset] = 1.0;
  for (std::size_t i = static_cast<std::size_t>(loss.id) + 1; i-- > 0;) backprop_node(i);
  has_adjoints_ = true;
}

std::span<const double> Tape::value(Var v) const {
  const Node& n = node(v);
  return {values_.data() + n.offset, std::size_t{n.rows} * n.cols};
}

double Tape::scalar(Var v) const {
  const Node& n = node(v);
  if (n.rows * n.cols != 1) throw ShapeError("scalar: node is " + shape_str(n.rows, n.cols));
  return values_[n.offset];
}

Tensor Tape::value_tensor(Var v) const {
  const Node& n = node(v);
  auto s = value(v);
  return Tensor(n.rows, n.cols, std::vector<double>(s.begin(), s.end()));
}

std::span<const double> Tape::grad(Var v) const {
  const Node& n = node(v);
  if (!has_adjoints_) throw std::logic_error("grad: backward() has not been run on the current tape");
  return {adjoints_.data() + n.offset, std::size_t{n.rows} * n.cols};
}

Tensor Tape::grad_tensor(Var v) const {
  const Node& n = node(v);
  auto s = grad(v);
  return Tensor(n.rows, n.cols, std::vector<double>(s.begin(), s.end()));
}

std::vector<Tensor> Tape::parameter_gradients() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (std::int32_t id : params_) out.push_back(grad_tensor(Var{const_cast<Tape*>(this), id}));
  return out;
}

Var operator+(Var a, Var b) { return a.tape->add(a, b); }
Var operator-(Var a, Var b) { return a.tape->sub(a, b); }
Var operator*(Var a, Var b) { return a.tape->mul(a, b); }
Var operator-(Var a) { return a.tape->neg(a); }
Var operator*(double k, Var x) { return x.tape->scale(x, k); }
Var operator+(Var x, double k) { return x.tape->shift(x, k); }
Var operator-(Var x, double k) { return x.tape->shift(x, -k); }

Var concat(std::initializer_list<Var> parts) {
  if (parts.size() == 0) throw ShapeError("concat: no operands");
  return parts.begin()->tape->concat(std::span<const Var>(parts.begin(), parts.size()));
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(const TapeFunction& f, const std::vector<Tensor>& params, double h, double tol) {
  auto evaluate = [&](const std::vector<Tensor>& ps, bool with_grad, std::vector<Tensor>* grads) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(ps.size());
    for (const auto& p : ps) vars.push_back(tape.parameter(p));
    Var loss = f(tape, vars);
    const double value = tape.scalar(loss);
    if (!std::isfinite(value)) throw NumericalError("grad_check: non-finite forward value");
    if (with_grad) {
      tape.backward(loss);
      *grads = tape.parameter_gradients();
    }
    return value;
  };

  std::vector<Tensor> analytic;
  evaluate(params, true, &analytic);

  GradCheckReport report;
  report.max_rel_error_per_param.assign(params.size(), 0.0);
  std::vector<Tensor> work = params;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double orig = work[p][i];
      work[p][i] = orig + h;
      const double up = evaluate(work, false, nullptr);
      work[p][i] = orig - h;
      const double down = evaluate(work, false, nullptr);
      work[p][i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double err = relative_error(analytic[p][i], numeric);
      report.max_rel_error_per_param[p] = std::max(report.max_rel_error_per_param[p], err);
      if (err > report.max_rel_error || report.entries_checked == 0) {
        report.max_rel_error = std::max(err, report.max_rel_error);
        report.worst_param = p;
        report.worst_index = i;
        report.worst_analytic = analytic[p][i];
        report.worst_numeric = numeric;
      }
      ++report.entries_checked;
    }
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

}  // namespace rtpp::ad
