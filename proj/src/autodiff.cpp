#include "glance/autodiff.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace glance::ad {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

[[noreturn]] void shape_error(const std::string& op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(op + ": incompatible operands " + a.shape_string() + " and " + b.shape_string());
}

void require_same_tape(Var a, Var b, const char* op) {
  if (a.tape() != b.tape()) throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (product(shape_) != values_.size())
    throw std::invalid_argument("tensor shape " + shape_string() + " does not match " +
                                std::to_string(values_.size()) + " values");
}

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<double> values)
    : Tensor(std::vector<std::size_t>{rows, cols}, std::move(values)) {}

Tensor Tensor::zeros(std::size_t rows, std::size_t cols) { return Tensor(rows, cols, std::vector<double>(rows * cols)); }

bool Tensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

std::string Tensor::shape_string() const {
  std::string s = "[";
  for (std::size_t i = 0; i < shape_.size(); ++i) s += (i ? "x" : "") + std::to_string(shape_[i]);
  return s + "]";
}

const Tensor& ParamSet::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no parameter named '" + name + "'");
  return it->second;
}

Tensor& ParamSet::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no parameter named '" + name + "'");
  return it->second;
}

std::size_t ParamSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.size();
  return n;
}

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::constant(Tensor value) {
  nodes_.push_back({std::move(value), {}, false, {}});
  return {this, nodes_.size() - 1};
}

Var Tape::variable(Tensor value) {
  nodes_.push_back({std::move(value), {}, true, {}});
  return {this, nodes_.size() - 1};
}

Var Tape::param(const ParamSet& params, const std::string& name) {
  if (auto it = param_ids_.find(name); it != param_ids_.end()) return {this, it->second};
  Var v = variable(params.at(name));
  param_ids_[name] = v.id();
  return v;
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, Pullback pullback) {
  bool needs = false;
  for (const Var& in : inputs) {
    if (in.tape() != this) throw std::invalid_argument("operand recorded on a different tape");
    needs = needs || nodes_[in.id()].requires_grad;
  }
  nodes_.push_back({std::move(value), {}, needs, needs ? std::move(pullback) : Pullback{}});
  return {this, nodes_.size() - 1};
}

void Tape::accumulate(std::size_t id, const Tensor& g) {
  if (!nodes_[id].requires_grad) return;
  Tensor& slot = grad_slot(id);
  double* dst = slot.data();
  const double* src = g.data();
  for (std::size_t i = 0, n = slot.size(); i < n; ++i) dst[i] += src[i];
}

Tensor& Tape::grad_slot(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape())
    n.grad = Tensor(n.value.shape(), std::vector<double>(n.value.size(), 0.0));
  return n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw std::invalid_argument("backward: loss belongs to another tape");
  const Tensor& lv = nodes_[loss.id()].value;
  if (lv.size() != 1) throw std::invalid_argument("backward: loss must be scalar, got " + lv.shape_string());
  for (auto& n : nodes_) n.grad = Tensor();
  if (!nodes_[loss.id()].requires_grad) return;
  grad_slot(loss.id())[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.pullback || n.grad.size() == 0) continue;
    const Tensor g = std::move(n.grad);
    n.pullback(*this, g);
    n.grad = g;
  }
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.size() == n.value.size() && n.grad.shape() == n.value.shape()) return n.grad;
  return Tensor(n.value.shape(), std::vector<double>(n.value.size(), 0.0));
}

Gradients Tape::param_grads() const {
  Gradients out;
  for (const auto& [name, id] : param_ids_) out.emplace(name, grad(Var(const_cast<Tape*>(this), id)));
  return out;
}

// ---------------------------------------------------------------------------
// Primitives

namespace {

// C (n x m) += A (n x k) * B (k x m). Each output element accumulates over k in
// ascending order regardless of its row, so row permutations commute exactly.
void gemm_acc(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* ci = c + i * m;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  require_same_tape(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) shape_error("matmul", av, bv);
  const std::size_t n = av.rows(), k = av.cols(), m = bv.cols();
  Tensor out = Tensor::zeros(n, m);
  gemm_acc(av.data(), bv.data(), out.data(), n, k, m);
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib, n, k, m](Tape& t, const Tensor& g) {
    const Tensor& A = t.value(ia);
    const Tensor& B = t.value(ib);
    if (t.requires_grad(ia)) {
      // dA = G B^T
      Tensor& da = t.grad_slot(ia);
      for (std::size_t i = 0; i < n; ++i) {
        const double* gi = g.data() + i * m;
        for (std::size_t p = 0; p < k; ++p) {
          const double* bp = B.data() + p * m;
          double s = 0.0;
          for (std::size_t j = 0; j < m; ++j) s += gi[j] * bp[j];
          da.data()[i * k + p] += s;
        }
      }
    }
    if (t.requires_grad(ib)) {
      // dB = A^T G
      Tensor& db = t.grad_slot(ib);
      for (std::size_t i = 0; i < n; ++i) {
        const double* ai = A.data() + i * k;
        const double* gi = g.data() + i * m;
        for (std::size_t p = 0; p < k; ++p) {
          const double av2 = ai[p];
          if (av2 == 0.0) continue;
          double* dbp = db.data() + p * m;
          for (std::size_t j = 0; j < m; ++j) dbp[j] += av2 * gi[j];
        }
      }
    }
  });
}

namespace {

template <typename F>
Tensor map_values(const Tensor& x, F f) {
  Tensor out = x;
  for (auto& v : out.values()) v = f(v);
  return out;
}

void require_same_shape(const char* op, Var a, Var b) {
  require_same_tape(a, b, op);
  if (a.value().shape() != b.value().shape()) shape_error(op, a.value(), b.value());
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape("add", a, b);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a, b);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    t.accumulate(ia, g);
    if (t.requires_grad(ib)) {
      Tensor& d = t.grad_slot(ib);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a, b);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) {
      Tensor& d = t.grad_slot(ia);
      const Tensor& bv = t.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& d = t.grad_slot(ib);
      const Tensor& av = t.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * av[i];
    }
  });
}

Var add_bias(Var x, Var bias) {
  require_same_tape(x, bias, "add_bias");
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (xv.rank() != 2 || bv.size() != xv.cols()) shape_error("add_bias", xv, bv);
  Tensor out = xv;
  const std::size_t n = xv.rows(), m = xv.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out(i, j) += bv[j];
  const auto ix = x.id(), ib = bias.id();
  return x.tape()->record(std::move(out), {x, bias}, [ix, ib, n, m](Tape& t, const Tensor& g) {
    t.accumulate(ix, g);
    if (t.requires_grad(ib)) {
      Tensor& d = t.grad_slot(ib);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) d[j] += g(i, j);
    }
  });
}

Var scale(Var x, double factor) {
  Tensor out = map_values(x.value(), [factor](double v) { return v * factor; });
  const auto ix = x.id();
  return x.tape()->record(std::move(out), {x}, [ix, factor](Tape& t, const Tensor& g) {
    Tensor& d = t.grad_slot(ix);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += factor * g[i];
  });
}

Var add_scalar(Var x, double c) {
  Tensor out = map_values(x.value(), [c](double v) { return v + c; });
  const auto ix = x.id();
  return x.tape()->record(std::move(out), {x}, [ix](Tape& t, const Tensor& g) { t.accumulate(ix, g); });
}

Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no operands");
  if (axis != 0 && axis != 1) throw std::invalid_argument("concat: axis must be 0 or 1");
  Tape* tape = parts[0].tape();
  std::vector<std::size_t> ids;
  std::vector<std::size_t> extents;
  const Tensor& first = parts[0].value();
  std::size_t total = 0;
  for (const Var& p : parts) {
    require_same_tape(parts[0], p, "concat");
    const Tensor& v = p.value();
    if (v.rank() != 2 || (axis == 1 && v.rows() != first.rows()) || (axis == 0 && v.cols() != first.cols()))
      shape_error("concat", first, v);
    ids.push_back(p.id());
    extents.push_back(axis == 1 ? v.cols() : v.rows());
    total += extents.back();
  }
  const std::size_t rows = axis == 1 ? first.rows() : total;
  const std::size_t cols = axis == 1 ? total : first.cols();
  Tensor out = Tensor::zeros(rows, cols);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    if (axis == 1) {
      for (std::size_t i = 0; i < rows; ++i)
        std::copy_n(v.data() + i * v.cols(), v.cols(), out.data() + i * cols + offset);
    } else {
      std::copy_n(v.data(), v.size(), out.data() + offset * cols);
    }
    offset += extents[k];
  }
  // record() only checks the listed inputs, so pass one that needs a gradient.
  bool needs = false;
  for (auto id : ids) needs = needs || tape->requires_grad(id);
  Var anchor = needs ? Var(tape, *std::find_if(ids.begin(), ids.end(), [&](auto id) { return tape->requires_grad(id); }))
                     : parts[0];
  return tape->record(std::move(out), {anchor}, [ids, extents, axis, rows, cols](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.requires_grad(ids[k])) {
        Tensor& d = t.grad_slot(ids[k]);
        if (axis == 1) {
          const std::size_t w = extents[k];
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < w; ++j) d.data()[i * w + j] += g.data()[i * cols + off + j];
        } else {
          const double* src = g.data() + off * cols;
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += src[i];
        }
      }
      off += extents[k];
    }
  });
}

Var concat(std::initializer_list<Var> parts, int axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

Var relu(Var x) {
  Tensor out = map_values(x.value(), [](double v) { return v > 0.0 ? v : 0.0; });
  const auto ix = x.id();
  return x.tape()->record(std::move(out), {x}, [ix](Tape& t, const Tensor& g) {
    Tensor& d = t.grad_slot(ix);
    const Tensor& xv = t.value(ix);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0) d[i] += g[i];
  });
}

Var sigmoid(Var x) {
  Tensor out = map_values(x.value(), [](double v) { return 1.0 / (1.0 + std::exp(-v)); });
  const auto ix = x.id();
  return x.tape()->record(std::move(out), {x}, [ix](Tape& t, const Tensor& g) {
    Tensor& d = t.grad_slot(ix);
    const Tensor& xv = t.value(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double y = 1.0 / (1.0 + std::exp(-xv[i]));
      d[i] += g[i] * y * (1.0 - y);
    }
  });
}

Var tanh(Var x) {
  Tensor out = map_values(x.value(), [](double v) { return std::tanh(v); });
  const auto ix = x.id();
  return x.tape()->record(std::move(out), {x}, [ix](Tape& t, const Tensor& g) {
    Tensor& d = t.grad_slot(ix);
    const Tensor& xv = t.value(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double y = std::tanh(xv[i]);
      d[i] += g[i] * (1.0 - y * y);
    }
  });
}

Var abs(Var x) {
  Tensor out = map_values(x.value(), [](double v) { return std::abs(v); });
  const auto ix = x.id();
  return x.tape()->record(std::move(out), {x}, [ix](Tape& t, const Tensor& g) {
    Tensor& d = t.grad_slot(ix);
    const Tensor& xv = t.value(ix);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += xv[i] > 0.0 ? g[i] : (xv[i] < 0.0 ? -g[i] : 0.0);
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  const auto ix = x.id();
  return x.tape()->record(Tensor::scalar(s), {x}, [ix](Tape& t, const Tensor& g) {
    Tensor& d = t.grad_slot(ix);
    for (auto& v : d.values()) v += g[0];
  });
}

Var mean(Var x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw std::invalid_argument("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var segment_sum(Var values, std::span<const int> segment_ids, std::size_t n_segments) {
  const Tensor& v = values.value();
  if (v.rank() != 2 || segment_ids.size() != v.rows())
    throw std::invalid_argument("segment_sum: " + std::to_string(segment_ids.size()) + " ids for values " +
                                v.shape_string());
  const std::size_t m = v.cols();
  // Bucket rows by segment.
  std::vector<std::size_t> start(n_segments + 1, 0);
  for (int s : segment_ids) {
    if (s < 0 || static_cast<std::size_t>(s) >= n_segments)
      throw std::invalid_argument("segment_sum: segment id " + std::to_string(s) + " out of range");
    ++start[s + 1];
  }
  for (std::size_t s = 0; s < n_segments; ++s) start[s + 1] += start[s];
  std::vector<std::size_t> order(segment_ids.size());
  {
    auto fill = start;
    for (std::size_t i = 0; i < segment_ids.size(); ++i) order[fill[segment_ids[i]]++] = i;
  }
  Tensor out = Tensor::zeros(n_segments, m);
  std::vector<double> buf;
  for (std::size_t s = 0; s < n_segments; ++s) {
    const std::size_t b = start[s], e = start[s + 1];
    double* o = out.data() + s * m;
    if (e - b <= 2) {
      for (std::size_t k = b; k < e; ++k) {
        const double* row = v.data() + order[k] * m;
        for (std::size_t j = 0; j < m; ++j) o[j] += row[j];
      }
      continue;
    }
    buf.resize(e - b);
    for (std::size_t j = 0; j < m; ++j) {
      for (std::size_t k = b; k < e; ++k) buf[k - b] = v.data()[order[k] * m + j];
      std::sort(buf.begin(), buf.end());
      double acc = 0.0;
      for (double x : buf) acc += x;
      o[j] = acc;
    }
  }
  const auto iv = values.id();
  std::vector<int> ids(segment_ids.begin(), segment_ids.end());
  return values.tape()->record(std::move(out), {values}, [iv, ids = std::move(ids), m](Tape& t, const Tensor& g) {
    Tensor& d = t.grad_slot(iv);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const double* gs = g.data() + static_cast<std::size_t>(ids[i]) * m;
      double* di = d.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) di[j] += gs[j];
    }
  });
}

Var gather_rows(Var x, std::span<const int> index) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2) throw std::invalid_argument("gather_rows: operand must be a matrix");
  const std::size_t m = xv.cols(), n = xv.rows();
  Tensor out = Tensor::zeros(index.size(), m);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || static_cast<std::size_t>(index[i]) >= n)
      throw std::invalid_argument("gather_rows: index " + std::to_string(index[i]) + " out of range for " +
                                  xv.shape_string());
    std::copy_n(xv.data() + static_cast<std::size_t>(index[i]) * m, m, out.data() + i * m);
  }
  const auto ix = x.id();
  std::vector<int> idx(index.begin(), index.end());
  return x.tape()->record(std::move(out), {x}, [ix, idx = std::move(idx), m](Tape& t, const Tensor& g) {
    Tensor& d = t.grad_slot(ix);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      double* di = d.data() + static_cast<std::size_t>(idx[i]) * m;
      const double* gi = g.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) di[j] += gi[j];
    }
  });
}

Var scatter_rows(Var base, std::span<const int> index, Var values) {
  require_same_tape(base, values, "scatter_rows");
  const Tensor& bv = base.value();
  const Tensor& vv = values.value();
  if (bv.rank() != 2 || vv.rank() != 2 || vv.cols() != bv.cols() || vv.rows() != index.size())
    shape_error("scatter_rows", bv, vv);
  const std::size_t m = bv.cols();
  Tensor out = bv;
  std::vector<char> replaced(bv.rows(), 0);
  for (std::size_t i = 0; i < index.size(); ++i) {
    const int r = index[i];
    if (r < 0 || static_cast<std::size_t>(r) >= bv.rows() || replaced[r])
      throw std::invalid_argument("scatter_rows: invalid or repeated row index " + std::to_string(r));
    replaced[r] = 1;
    std::copy_n(vv.data() + i * m, m, out.data() + static_cast<std::size_t>(r) * m);
  }
  const auto ib = base.id(), iv = values.id();
  std::vector<int> idx(index.begin(), index.end());
  return base.tape()->record(
      std::move(out), {base, values},
      [ib, iv, idx = std::move(idx), replaced = std::move(replaced), m](Tape& t, const Tensor& g) {
        if (t.requires_grad(ib)) {
          Tensor& d = t.grad_slot(ib);
          for (std::size_t r = 0; r < replaced.size(); ++r)
            if (!replaced[r])
              for (std::size_t j = 0; j < m; ++j) d.data()[r * m + j] += g.data()[r * m + j];
        }
        if (t.requires_grad(iv)) {
          Tensor& d = t.grad_slot(iv);
          for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < m; ++j)
              d.data()[i * m + j] += g.data()[static_cast<std::size_t>(idx[i]) * m + j];
        }
      });
}

Var scale_rows(Var x, std::span<const double> weights) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || weights.size() != xv.rows())
    throw std::invalid_argument("scale_rows: " + std::to_string(weights.size()) + " weights for " + xv.shape_string());
  const std::size_t m = xv.cols();
  Tensor out = xv;
  for (std::size_t i = 0; i < weights.size(); ++i)
    for (std::size_t j = 0; j < m; ++j) out.data()[i * m + j] *= weights[i];
  const auto ix = x.id();
  std::vector<double> w(weights.begin(), weights.end());
  return x.tape()->record(std::move(out), {x}, [ix, w = std::move(w), m](Tape& t, const Tensor& g) {
    Tensor& d = t.grad_slot(ix);
    for (std::size_t i = 0; i < w.size(); ++i)
      for (std::size_t j = 0; j < m; ++j) d.data()[i * m + j] += w[i] * g.data()[i * m + j];
  });
}

Var slice_cols(Var x, std::size_t begin, std::size_t count) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || begin + count > xv.cols())
    throw std::invalid_argument("slice_cols: columns [" + std::to_string(begin) + ", " +
                                std::to_string(begin + count) + ") out of range for " + xv.shape_string());
  const std::size_t n = xv.rows(), m = xv.cols();
  Tensor out = Tensor::zeros(n, count);
  for (std::size_t i = 0; i < n; ++i) std::copy_n(xv.data() + i * m + begin, count, out.data() + i * count);
  const auto ix = x.id();
  return x.tape()->record(std::move(out), {x}, [ix, n, m, begin, count](Tape& t, const Tensor& g) {
    Tensor& d = t.grad_slot(ix);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < count; ++j) d.data()[i * m + begin + j] += g.data()[i * count + j];
  });
}

Var transpose(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2) throw std::invalid_argument("transpose: operand must be a matrix, got " + xv.shape_string());
  const std::size_t n = xv.rows(), m = xv.cols();
  Tensor out = Tensor::zeros(m, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out(j, i) = xv(i, j);
  const auto ix = x.id();
  return x.tape()->record(std::move(out), {x}, [ix, n, m](Tape& t, const Tensor& g) {
    Tensor& d = t.grad_slot(ix);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) d(i, j) += g(j, i);
  });
}

Var reshape(Var x, std::size_t rows, std::size_t cols) {
  const Tensor& xv = x.value();
  if (rows * cols != xv.size())
    throw std::invalid_argument("reshape: cannot view " + xv.shape_string() + " as " + std::to_string(rows) + "x" +
                                std::to_string(cols));
  const auto ix = x.id();
  return x.tape()->record(Tensor(rows, cols, xv.values()), {x}, [ix](Tape& t, const Tensor& g) {
    Tensor& d = t.grad_slot(ix);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Layers

GruWeights GruWeights::bind(Tape& tape, const ParamSet& params, const std::string& prefix) {
  auto p = [&](const char* n) { return tape.param(params, prefix + "." + n); };
  return {p("W_z"), p("W_r"), p("W_h"), p("U_z"), p("U_r"), p("U_h"), p("b_z"), p("b_r"), p("b_h")};
}

Var gru_cell(Var x, Var h, const GruWeights& w) {
  if (x.cols() != w.w_z.rows())
    throw std::invalid_argument("gru_cell: input width " + std::to_string(x.cols()) + " != " +
                                std::to_string(w.w_z.rows()));
  if (h.cols() != w.u_z.rows() || h.rows() != x.rows())
    throw std::invalid_argument("gru_cell: state " + h.value().shape_string() + " does not fit input " +
                                x.value().shape_string());
  Var z = sigmoid(add_bias(matmul(x, w.w_z) + matmul(h, w.u_z), w.b_z));
  Var r = sigmoid(add_bias(matmul(x, w.w_r) + matmul(h, w.u_r), w.b_r));
  Var n = tanh(add_bias(matmul(x, w.w_h) + matmul(r * h, w.u_h), w.b_h));
  // (1 - z) h + z n == h + z (n - h)
  return h + z * (n - h);
}

Tensor glorot_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t = Tensor::zeros(fan_in, fan_out);
  for (auto& v : t.values()) v = uniform(rng, -limit, limit);
  return t;
}

void init_gru(ParamSet& params, const std::string& prefix, std::size_t input_dim, std::size_t state_dim, Rng& rng) {
  for (const char* g : {"z", "r", "h"}) {
    params.set(prefix + ".W_" + g, glorot_uniform(input_dim, state_dim, rng));
    params.set(prefix + ".U_" + g, glorot_uniform(state_dim, state_dim, rng));
    params.set(prefix + ".b_" + g, Tensor::zeros(1, state_dim));
  }
}

void init_mlp(ParamSet& params, const std::string& prefix, const std::vector<std::size_t>& widths, Rng& rng) {
  if (widths.size() < 2) throw std::invalid_argument("init_mlp: need input and output widths");
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const std::string base = prefix + "." + std::to_string(i);
    params.set(base + ".W", glorot_uniform(widths[i], widths[i + 1], rng));
    params.set(base + ".b", Tensor::zeros(1, widths[i + 1]));
  }
}

Var mlp(Tape& tape, const ParamSet& params, const std::string& prefix, std::size_t layers, Var x) {
  for (std::size_t i = 0; i < layers; ++i) {
    const std::string base = prefix + "." + std::to_string(i);
    x = add_bias(matmul(x, tape.param(params, base + ".W")), tape.param(params, base + ".b"));
    if (i + 1 < layers) x = relu(x);
  }
  return x;
}

// ---------------------------------------------------------------------------
// Optimizer

double l2_coefficient(const L2Groups& groups, const std::string& name) {
  for (const auto& [prefix, c] : groups)
    if (name.size() > prefix.size() && name.compare(0, prefix.size(), prefix) == 0 && name[prefix.size()] == '.')
      return c;
  return 0.0;
}

void Adam::step(ParamSet& params, const Gradients& grads, const L2Groups& l2) {
  for (const auto& [name, g] : grads) {
    if (!g.all_finite()) throw NumericalError("non-finite gradient for parameter '" + name + "'");
    if (params.at(name).shape() != g.shape())
      throw std::invalid_argument("gradient shape mismatch for '" + name + "'");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (const auto& [name, g] : grads) {
    Tensor& w = params.at(name);
    auto [mit, m_new] = m_.try_emplace(name, Tensor(w.shape(), std::vector<double>(w.size(), 0.0)));
    auto [vit, v_new] = v_.try_emplace(name, Tensor(w.shape(), std::vector<double>(w.size(), 0.0)));
    const double c = l2_coefficient(l2, name);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] + c * w[i];
      double& m = mit->second[i];
      double& v = vit->second[i];
      m = config_.beta1 * m + (1.0 - config_.beta1) * gi;
      v = config_.beta2 * v + (1.0 - config_.beta2) * gi * gi;
      w[i] -= config_.lr * (m / bc1) / (std::sqrt(v / bc2) + config_.eps);
    }
  }
}

ParamSet Adam::state() const {
  ParamSet s;
  for (const auto& [name, t] : m_) s.set("m." + name, t);
  for (const auto& [name, t] : v_) s.set("v." + name, t);
  return s;
}

void Adam::load_state(const ParamSet& state, long long steps) {
  m_.clear();
  v_.clear();
  for (const auto& [name, t] : state) {
    if (name.rfind("m.", 0) == 0)
      m_[name.substr(2)] = t;
    else if (name.rfind("v.", 0) == 0)
      v_[name.substr(2)] = t;
  }
  t_ = steps;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'G', 'L', 'A', 'N', 'C', 'E', 'C', 'K'};
static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw std::runtime_error("checkpoint truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

std::string serialize_checkpoint(const ParamSet& params, const nlohmann::json& manifest) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  const std::string m = manifest.dump();
  put<std::uint64_t>(out, m.size());
  out += m;
  put<std::uint64_t>(out, params.size());
  for (const auto& [name, t] : params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint64_t>(out, d);
    for (double v : t.values()) put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

std::pair<ParamSet, nlohmann::json> deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("not a checkpoint file");
  std::size_t pos = sizeof(kMagic);
  const auto version = take<std::uint32_t>(bytes, pos);
  if (version != kVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  const auto mlen = take<std::uint64_t>(bytes, pos);
  if (pos + mlen > bytes.size()) throw std::runtime_error("checkpoint truncated");
  auto manifest = nlohmann::json::parse(bytes.substr(pos, mlen));
  pos += mlen;
  const auto count = take<std::uint64_t>(bytes, pos);
  ParamSet params;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto nlen = take<std::uint32_t>(bytes, pos);
    if (pos + nlen > bytes.size()) throw std::runtime_error("checkpoint truncated");
    std::string name = bytes.substr(pos, nlen);
    pos += nlen;
    const auto rank = take<std::uint32_t>(bytes, pos);
    std::vector<std::size_t> shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(take<std::uint64_t>(bytes, pos));
    std::vector<double> values(product(shape));
    for (auto& v : values) v = std::bit_cast<double>(take<std::uint64_t>(bytes, pos));
    params.set(name, Tensor(std::move(shape), std::move(values)));
  }
  return {std::move(params), std::move(manifest)};
}

void save_checkpoint(const std::string& path, const ParamSet& params, const nlohmann::json& manifest) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write checkpoint " + path);
  const auto bytes = serialize_checkpoint(params, manifest);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::pair<ParamSet, nlohmann::json> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read checkpoint " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace glance::ad
