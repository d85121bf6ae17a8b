#include "fseb/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "fseb/linalg.hpp"

namespace fseb::ad {

const char* primitive_name(Primitive p) {
  switch (p) {
    case Primitive::kLeaf: return "leaf";
    case Primitive::kConstant: return "constant";
    case Primitive::kMatMul: return "matmul";
    case Primitive::kAdd: return "add";
    case Primitive::kSub: return "sub";
    case Primitive::kScalarMul: return "scalar-mul";
    case Primitive::kMul: return "elementwise-mul";
    case Primitive::kTanh: return "tanh";
    case Primitive::kRelu: return "relu";
    case Primitive::kLogSumExp: return "log-sum-exp";
    case Primitive::kLogSoftmax: return "log-softmax";
    case Primitive::kSum: return "sum";
    case Primitive::kMean: return "mean";
    case Primitive::kSquare: return "square";
    case Primitive::kQuadFormFixed: return "quadratic-form-with-fixed-factor";
  }
  return "unknown";
}

const Tensor& Gradients::at(const std::string& name) const {
  auto it = grads_.find(name);
  if (it == grads_.end()) throw std::out_of_range("gradients: no leaf named '" + name + "'");
  return it->second;
}

const Tensor& Var::value() const {
  if (!tape_) throw std::logic_error("var: not bound to a tape");
  return tape_->value(id_);
}

Var Tape::leaf(std::string name, Tensor value) {
  if (leaf_ids_.count(name)) throw std::invalid_argument("tape: duplicate leaf '" + name + "'");
  Var v = record(Primitive::kLeaf, {}, std::move(value));
  nodes_.back().leaf_name = name;
  leaf_ids_.emplace(std::move(name), v.id());
  return v;
}

Var Tape::constant(Tensor value) { return record(Primitive::kConstant, {}, std::move(value)); }

Var Tape::record(Primitive op, std::vector<std::size_t> inputs, Tensor value, Tensor saved,
                 double scalar, std::shared_ptr<const Tensor> factor) {
  if (consumed_) throw std::logic_error("tape: already consumed by backward()");
  for (auto id : inputs) {
    if (id >= nodes_.size()) throw std::logic_error("tape: input recorded out of order");
  }
  nodes_.push_back(Node{op, std::move(inputs), std::move(value), std::move(saved), scalar,
                        std::move(factor), {}});
  return Var(this, nodes_.size() - 1);
}

namespace {

[[noreturn]] void shape_fail(Primitive op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(primitive_name(op)) + ": incompatible shapes " + shape_string(a) +
                   " and " + shape_string(b));
}

[[noreturn]] void shape_fail(Primitive op, const Shape& a) {
  throw ShapeError(std::string(primitive_name(op)) + ": unsupported shape " + shape_string(a));
}

Tape& same_tape(const Var& a, const Var& b) {
  if (!a.valid() || a.tape() != b.tape()) throw std::logic_error("vars recorded on different tapes");
  return *a.tape();
}

// Row structure shared by the row-wise reductions: a rank-1 tensor is one row.
std::pair<std::size_t, std::size_t> row_layout(const Tensor& t, Primitive op) {
  if (t.rank() == 1) return {1, t.shape()[0]};
  if (t.rank() == 2) return {t.shape()[0], t.shape()[1]};
  shape_fail(op, t.shape());
}

bool is_row_bias(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2) return false;
  const std::size_t c = a.shape()[1];
  return (b.rank() == 1 && b.shape()[0] == c) || (b.rank() == 2 && b.shape()[0] == 1 && b.shape()[1] == c);
}

Var binary_elementwise(Primitive op, const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.shape() == y.shape()) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
      switch (op) {
        case Primitive::kAdd: out[i] = x[i] + y[i]; break;
        case Primitive::kSub: out[i] = x[i] - y[i]; break;
        default: out[i] = x[i] * y[i]; break;
      }
    }
    return tape.record(op, {a.id(), b.id()}, std::move(out));
  }
  if (op != Primitive::kMul && is_row_bias(x, y)) {
    const std::size_t r = x.shape()[0], c = x.shape()[1];
    Tensor out(x.shape());
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j)
        out(i, j) = op == Primitive::kAdd ? x(i, j) + y[j] : x(i, j) - y[j];
    return tape.record(op, {a.id(), b.id()}, std::move(out));
  }
  shape_fail(op, x.shape(), y.shape());
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[0]) {
    shape_fail(Primitive::kMatMul, x.shape(), y.shape());
  }
  return tape.record(Primitive::kMatMul, {a.id(), b.id()}, fseb::matmul(x, y));
}

Var add(const Var& a, const Var& b) { return binary_elementwise(Primitive::kAdd, a, b); }
Var sub(const Var& a, const Var& b) { return binary_elementwise(Primitive::kSub, a, b); }
Var mul(const Var& a, const Var& b) { return binary_elementwise(Primitive::kMul, a, b); }

Var scalar_mul(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= s;
  return a.tape()->record(Primitive::kScalarMul, {a.id()}, std::move(out), {}, s);
}

Var tanh(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = std::tanh(v);
  return a.tape()->record(Primitive::kTanh, {a.id()}, std::move(out));
}

Var relu(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  return a.tape()->record(Primitive::kRelu, {a.id()}, std::move(out));
}

Var log_sum_exp(const Var& a) {
  const Tensor& x = a.value();
  auto [r, c] = row_layout(x, Primitive::kLogSumExp);
  if (c == 0) shape_fail(Primitive::kLogSumExp, x.shape());
  Tensor out = x.rank() == 1 ? Tensor::scalar(0.0) : Tensor({r});
  Tensor soft(x.shape());
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = x.data().data() + i * c;
    const double m = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - m);
    const double lse = m + std::log(s);
    out[i] = lse;
    for (std::size_t j = 0; j < c; ++j) soft[i * c + j] = std::exp(row[j] - lse);
  }
  return a.tape()->record(Primitive::kLogSumExp, {a.id()}, std::move(out), std::move(soft));
}

Var log_softmax(const Var& a) {
  const Tensor& x = a.value();
  auto [r, c] = row_layout(x, Primitive::kLogSoftmax);
  if (c == 0) shape_fail(Primitive::kLogSoftmax, x.shape());
  Tensor out(x.shape());
  Tensor soft(x.shape());
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = x.data().data() + i * c;
    const double m = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - m);
    const double lse = m + std::log(s);
    for (std::size_t j = 0; j < c; ++j) {
      out[i * c + j] = row[j] - lse;
      soft[i * c + j] = std::exp(out[i * c + j]);
    }
  }
  return a.tape()->record(Primitive::kLogSoftmax, {a.id()}, std::move(out), std::move(soft));
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape()->record(Primitive::kSum, {a.id()}, Tensor::scalar(s));
}

Var mean(const Var& a) {
  const Tensor& x = a.value();
  if (x.size() == 0) shape_fail(Primitive::kMean, x.shape());
  double s = 0.0;
  for (double v : x.data()) s += v;
  return a.tape()->record(Primitive::kMean, {a.id()}, Tensor::scalar(s / static_cast<double>(x.size())));
}

Var square(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = v * v;
  return a.tape()->record(Primitive::kSquare, {a.id()}, std::move(out));
}

Var quad_form_fixed(const Var& v, std::shared_ptr<const Tensor> lower_factor) {
  if (!lower_factor) throw std::invalid_argument("quadratic-form-with-fixed-factor: null factor");
  const Tensor& x = v.value();
  const Tensor& l = *lower_factor;
  if (l.rank() != 2 || l.shape()[0] != l.shape()[1]) shape_fail(Primitive::kQuadFormFixed, l.shape());
  const std::size_t m = l.shape()[0];
  std::size_t k = 0;
  if (x.rank() == 1 && x.shape()[0] == m) {
    k = 1;
  } else if (x.rank() == 2 && x.shape()[0] == m) {
    k = x.shape()[1];
  } else {
    shape_fail(Primitive::kQuadFormFixed, x.shape(), l.shape());
  }
  // alpha holds (L L^T)^{-1} v column by column, kept for the backward pass.
  Tensor alpha(x.shape());
  std::vector<double> col(m);
  double total = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t i = 0; i < m; ++i) col[i] = x[i * k + j];
    linalg::solve_lower(l, col);
    for (double w : col) total += w * w;
    linalg::solve_lower_transposed(l, col);
    for (std::size_t i = 0; i < m; ++i) alpha[i * k + j] = col[i];
  }
  return v.tape()->record(Primitive::kQuadFormFixed, {v.id()}, Tensor::scalar(total),
                          std::move(alpha), 0.0, std::move(lower_factor));
}

Gradients Tape::backward(const Var& loss) {
  if (loss.tape() != this) throw std::logic_error("backward: loss recorded on a different tape");
  if (consumed_) throw std::logic_error("backward: tape already consumed");
  if (loss.value().size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_string(loss.shape()));
  }
  consumed_ = true;

  std::vector<Tensor> grads(nodes_.size(), Tensor());
  std::vector<bool> live(nodes_.size(), false);
  auto seed_grad = [&](std::size_t id) -> Tensor& {
    if (!live[id]) {
      grads[id] = Tensor(nodes_[id].value.shape());
      live[id] = true;
    }
    return grads[id];
  };
  seed_grad(loss.id())[0] = 1.0;

  for (std::size_t n = loss.id() + 1; n-- > 0;) {
    if (!live[n]) continue;
    const Node& node = nodes_[n];
    const Tensor& g = grads[n];
    switch (node.op) {
      case Primitive::kLeaf:
      case Primitive::kConstant:
        break;
      case Primitive::kMatMul: {
        const Tensor& a = nodes_[node.inputs[0]].value;
        const Tensor& b = nodes_[node.inputs[1]].value;
        // dA = G B^T, dB = A^T G
        Tensor ga = matmul_transposed_rhs(g, b);
        Tensor gb = fseb::matmul(a.transposed(), g);
        Tensor& ta = seed_grad(node.inputs[0]);
        for (std::size_t i = 0; i < ga.size(); ++i) ta[i] += ga[i];
        Tensor& tb = seed_grad(node.inputs[1]);
        for (std::size_t i = 0; i < gb.size(); ++i) tb[i] += gb[i];
        break;
      }
      case Primitive::kAdd:
      case Primitive::kSub: {
        const double sign = node.op == Primitive::kAdd ? 1.0 : -1.0;
        Tensor& ta = seed_grad(node.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) ta[i] += g[i];
        Tensor& tb = seed_grad(node.inputs[1]);
        if (tb.size() == g.size()) {
          for (std::size_t i = 0; i < g.size(); ++i) tb[i] += sign * g[i];
        } else {
          const std::size_t c = tb.size();
          for (std::size_t i = 0; i < g.size(); ++i) tb[i % c] += sign * g[i];
        }
        break;
      }
      case Primitive::kScalarMul: {
        Tensor& ta = seed_grad(node.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) ta[i] += node.scalar * g[i];
        break;
      }
      case Primitive::kMul: {
        const Tensor& a = nodes_[node.inputs[0]].value;
        const Tensor& b = nodes_[node.inputs[1]].value;
        {
          Tensor& ta = seed_grad(node.inputs[0]);
          for (std::size_t i = 0; i < g.size(); ++i) ta[i] += g[i] * b[i];
        }
        Tensor& tb = seed_grad(node.inputs[1]);
        for (std::size_t i = 0; i < g.size(); ++i) tb[i] += g[i] * a[i];
        break;
      }
      case Primitive::kTanh: {
        Tensor& ta = seed_grad(node.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) ta[i] += g[i] * (1.0 - node.value[i] * node.value[i]);
        break;
      }
      case Primitive::kRelu: {
        const Tensor& a = nodes_[node.inputs[0]].value;
        Tensor& ta = seed_grad(node.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) ta[i] += a[i] > 0.0 ? g[i] : 0.0;
        break;
      }
      case Primitive::kLogSumExp: {
        Tensor& ta = seed_grad(node.inputs[0]);
        const std::size_t r = g.size();
        const std::size_t c = ta.size() / r;
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) ta[i * c + j] += g[i] * node.saved[i * c + j];
        break;
      }
      case Primitive::kLogSoftmax: {
        Tensor& ta = seed_grad(node.inputs[0]);
        const auto [r, c] = row_layout(node.value, Primitive::kLogSoftmax);
        for (std::size_t i = 0; i < r; ++i) {
          double gs = 0.0;
          for (std::size_t j = 0; j < c; ++j) gs += g[i * c + j];
          for (std::size_t j = 0; j < c; ++j) ta[i * c + j] += g[i * c + j] - node.saved[i * c + j] * gs;
        }
        break;
      }
      case Primitive::kSum: {
        Tensor& ta = seed_grad(node.inputs[0]);
        for (auto& v : ta.data()) v += g[0];
        break;
      }
      case Primitive::kMean: {
        Tensor& ta = seed_grad(node.inputs[0]);
        const double s = g[0] / static_cast<double>(ta.size());
        for (auto& v : ta.data()) v += s;
        break;
      }
      case Primitive::kSquare: {
        const Tensor& a = nodes_[node.inputs[0]].value;
        Tensor& ta = seed_grad(node.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) ta[i] += 2.0 * a[i] * g[i];
        break;
      }
      case Primitive::kQuadFormFixed: {
        Tensor& ta = seed_grad(node.inputs[0]);
        for (std::size_t i = 0; i < ta.size(); ++i) ta[i] += 2.0 * node.saved[i] * g[0];
        break;
      }
    }
  }

  Gradients out;
  for (const auto& [name, id] : leaf_ids_) {
    out.set(name, live[id] ? std::move(grads[id]) : Tensor(nodes_[id].value.shape()));
  }
  return out;
}

Gradients finite_difference_grad(const ScalarFn& fn, const std::map<std::string, Tensor>& params,
                                 double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_difference_grad: step must be positive");
  Gradients out;
  std::map<std::string, Tensor> probe = params;
  for (const auto& [name, value] : params) {
    Tensor g(value.shape());
    Tensor& slot = probe.at(name);
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double orig = value[i];
      slot[i] = orig + step;
      const double fp = fn(probe);
      slot[i] = orig - step;
      const double fm = fn(probe);
      slot[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw NumericalError("finite_difference_grad: non-finite function value at " + name + "[" +
                             std::to_string(i) + "]");
      }
      g[i] = (fp - fm) / (2.0 * step);
    }
    out.set(name, std::move(g));
  }
  return out;
}

double max_relative_error(const Gradients& a, const Gradients& b, double floor) {
  double diff = 0.0, scale = floor;
  for (const auto& [name, ga] : a.entries()) {
    const Tensor& gb = b.at(name);
    if (ga.shape() != gb.shape()) {
      throw ShapeError("max_relative_error: leaf '" + name + "' shapes " + shape_string(ga.shape()) +
                       " vs " + shape_string(gb.shape()));
    }
    for (std::size_t i = 0; i < ga.size(); ++i) {
      diff = std::max(diff, std::abs(ga[i] - gb[i]));
      scale = std::max({scale, std::abs(ga[i]), std::abs(gb[i])});
    }
  }
  for (const auto& [name, gb] : b.entries()) {
    if (!a.contains(name)) throw std::out_of_range("max_relative_error: leaf '" + name + "' missing");
  }
  return diff / scale;
}

}  // namespace fseb::ad
