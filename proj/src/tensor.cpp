#include "litediff/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace litediff {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

ShapeError::ShapeError(const std::string& op, Shape lhs, Shape rhs)
    : std::invalid_argument(op + ": incompatible shapes " + shape_str(lhs) +
                            " and " + shape_str(rhs)),
      op_(op),
      lhs_(std::move(lhs)),
      rhs_(std::move(rhs)) {}

Tensor::Tensor() : impl_(std::make_shared<TensorImpl>()) {}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
  for (auto d : shape) {
    if (d == 0) throw std::invalid_argument("tensor dims must be positive: " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw std::invalid_argument("tensor shape " + shape_str(shape) + " does not match " +
                                std::to_string(data.size()) + " elements");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("item() on non-scalar " + shape_str(shape()));
  return impl_->data[0];
}

void Tensor::set_requires_grad(bool value) {
  impl_->requires_grad = value;
  if (!value) impl_->grad.reset();
}

std::span<const double> Tensor::grad() const {
  if (!impl_->grad) throw std::logic_error("tensor has no gradient");
  return *impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (!impl_->grad) throw std::logic_error("tensor has no gradient");
  return *impl_->grad;
}

Tensor Tensor::detach() const {
  Tensor out;
  out.impl_->shape = impl_->shape;
  out.impl_->data = impl_->data;
  return out;
}

namespace {
thread_local Tape* g_current_tape = nullptr;
}

Tape* Tape::current() { return g_current_tape; }

bool Tape::produced(const Tensor& t) const {
  return std::any_of(nodes_.begin(), nodes_.end(),
                     [&](const Node& n) { return n.output == t.impl(); });
}

TapeScope::TapeScope(Tape& tape) : previous_(g_current_tape) { g_current_tape = &tape; }
TapeScope::~TapeScope() { g_current_tape = previous_; }

std::vector<double>& grad_buffer(TensorImpl& t) {
  if (!t.grad) t.grad.emplace(t.data.size(), 0.0);
  return *t.grad;
}

Tensor record_op(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                 Tape::BackwardFn backward) {
  Tensor out(std::move(shape), std::move(data));
  Tape* tape = Tape::current();
  if (!tape) return out;
  bool any = std::any_of(inputs.begin(), inputs.end(),
                         [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return out;
  out.impl()->requires_grad = true;
  Tape::Node node;
  for (auto& in : inputs) node.inputs.push_back(in.impl());
  node.output = out.impl();
  node.backward = std::move(backward);
  tape->record(std::move(node));
  return out;
}

void backward(const Tensor& loss, Tape& tape) {
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  const auto& nodes = tape.nodes();
  std::size_t end = nodes.size();
  for (std::size_t i = nodes.size(); i-- > 0;) {
    if (nodes[i].output == loss.impl()) {
      end = i;
      break;
    }
  }
  if (end == nodes.size()) throw std::invalid_argument("backward: loss was not produced on this tape");

  for (const auto& node : nodes) {
    for (const auto& in : node.inputs) {
      if (in->requires_grad) in->grad.emplace(in->data.size(), 0.0);
    }
    node.output->grad.emplace(node.output->data.size(), 0.0);
  }
  (*loss.impl()->grad)[0] = 1.0;
  for (std::size_t i = end + 1; i-- > 0;) {
    nodes[i].backward(*nodes[i].output->grad);
  }
}

namespace {

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got " + shape_str(t.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  auto ai = a.impl(), bi = b.impl();
  return record_op(a.shape(), std::move(out), {a, b}, [ai, bi](const std::vector<double>& g) {
    for (auto* t : {ai.get(), bi.get()}) {
      if (!t->requires_grad) continue;
      auto& dst = grad_buffer(*t);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same("sub", a, b);
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  auto ai = a.impl(), bi = b.impl();
  return record_op(a.shape(), std::move(out), {a, b}, [ai, bi](const std::vector<double>& g) {
    if (ai->requires_grad) {
      auto& dst = grad_buffer(*ai);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
    if (bi->requires_grad) {
      auto& dst = grad_buffer(*bi);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] -= g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same("mul", a, b);
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  auto ai = a.impl(), bi = b.impl();
  return record_op(a.shape(), std::move(out), {a, b}, [ai, bi](const std::vector<double>& g) {
    if (ai->requires_grad) {
      auto& dst = grad_buffer(*ai);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * bi->data[i];
    }
    if (bi->requires_grad) {
      auto& dst = grad_buffer(*bi);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * ai->data[i];
    }
  });
}

Tensor add(const Tensor& a, double b) {
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + b;
  auto ai = a.impl();
  return record_op(a.shape(), std::move(out), {a}, [ai](const std::vector<double>& g) {
    auto& dst = grad_buffer(*ai);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
}

Tensor mul(const Tensor& a, double b) {
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * b;
  auto ai = a.impl();
  return record_op(a.shape(), std::move(out), {a}, [ai, b](const std::vector<double>& g) {
    auto& dst = grad_buffer(*ai);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * b;
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto ai = a.impl();
  return record_op({1}, {s}, {a}, [ai](const std::vector<double>& g) {
    auto& dst = grad_buffer(*ai);
    for (auto& d : dst) d += g[0];
  });
}

Tensor mean(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  const double inv = 1.0 / static_cast<double>(a.numel());
  auto ai = a.impl();
  return record_op({1}, {s * inv}, {a}, [ai, inv](const std::vector<double>& g) {
    auto& dst = grad_buffer(*ai);
    for (auto& d : dst) d += g[0] * inv;
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) throw ShapeError("reshape", a.shape(), shape);
  std::vector<double> out(a.data().begin(), a.data().end());
  auto ai = a.impl();
  return record_op(std::move(shape), std::move(out), {a}, [ai](const std::vector<double>& g) {
    auto& dst = grad_buffer(*ai);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) throw ShapeError("matmul", a.shape(), b.shape());
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  std::vector<double> out(n * m, 0.0);
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    double* row = out.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = x[i * k + p];
      const double* yr = y.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) row[j] += s * yr[j];
    }
  }
  auto ai = a.impl(), bi = b.impl();
  return record_op({n, m}, std::move(out), {a, b}, [ai, bi, n, k, m](const std::vector<double>& g) {
    if (ai->requires_grad) {
      // dA = G · Bᵀ
      auto& da = grad_buffer(*ai);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < m; ++j) s += g[i * m + j] * bi->data[p * m + j];
          da[i * k + p] += s;
        }
      }
    }
    if (bi->requires_grad) {
      // dB = Aᵀ · G
      auto& db = grad_buffer(*bi);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double s = ai->data[i * k + p];
          double* row = db.data() + p * m;
          for (std::size_t j = 0; j < m; ++j) row[j] += s * g[i * m + j];
        }
      }
    }
  });
}

Tensor add_row_bias(const Tensor& a, const Tensor& bias) {
  require_rank("add_row_bias", a, 2);
  if (bias.numel() != a.dim(1)) throw ShapeError("add_row_bias", a.shape(), bias.shape());
  const std::size_t n = a.dim(0), m = a.dim(1);
  std::vector<double> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] += bias[j];
  auto ai = a.impl(), bi = bias.impl();
  return record_op(a.shape(), std::move(out), {a, bias}, [ai, bi, n, m](const std::vector<double>& g) {
    if (ai->requires_grad) {
      auto& da = grad_buffer(*ai);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
    }
    if (bi->requires_grad) {
      auto& db = grad_buffer(*bi);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) db[j] += g[i * m + j];
    }
  });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& v) {
  require_rank("add_channel_bias", x, 4);
  if (v.rank() != 2 || v.dim(0) != x.dim(0) || v.dim(1) != x.dim(1)) {
    throw ShapeError("add_channel_bias", x.shape(), v.shape());
  }
  const std::size_t planes = x.dim(0) * x.dim(1);
  const std::size_t hw = x.dim(2) * x.dim(3);
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t p = 0; p < planes; ++p) {
    const double b = v[p];
    double* dst = out.data() + p * hw;
    for (std::size_t i = 0; i < hw; ++i) dst[i] += b;
  }
  auto xi = x.impl(), vi = v.impl();
  return record_op(x.shape(), std::move(out), {x, v}, [xi, vi, planes, hw](const std::vector<double>& g) {
    if (xi->requires_grad) {
      auto& dx = grad_buffer(*xi);
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
    }
    if (vi->requires_grad) {
      auto& dv = grad_buffer(*vi);
      for (std::size_t p = 0; p < planes; ++p) {
        double s = 0.0;
        for (std::size_t i = 0; i < hw; ++i) s += g[p * hw + i];
        dv[p] += s;
      }
    }
  });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_rank("concat_channels", a, 4);
  require_rank("concat_channels", b, 4);
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels", a.shape(), b.shape());
  }
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const std::size_t hw = a.dim(2) * a.dim(3);
  std::vector<double> out;
  out.reserve(n * (ca + cb) * hw);
  for (std::size_t i = 0; i < n; ++i) {
    auto sa = a.data().subspan(i * ca * hw, ca * hw);
    auto sb = b.data().subspan(i * cb * hw, cb * hw);
    out.insert(out.end(), sa.begin(), sa.end());
    out.insert(out.end(), sb.begin(), sb.end());
  }
  auto ai = a.impl(), bi = b.impl();
  return record_op({n, ca + cb, a.dim(2), a.dim(3)}, std::move(out), {a, b},
                   [ai, bi, n, ca, cb, hw](const std::vector<double>& g) {
                     for (std::size_t i = 0; i < n; ++i) {
                       const double* src = g.data() + i * (ca + cb) * hw;
                       if (ai->requires_grad) {
                         double* dst = grad_buffer(*ai).data() + i * ca * hw;
                         for (std::size_t j = 0; j < ca * hw; ++j) dst[j] += src[j];
                       }
                       if (bi->requires_grad) {
                         double* dst = grad_buffer(*bi).data() + i * cb * hw;
                         for (std::size_t j = 0; j < cb * hw; ++j) dst[j] += src[ca * hw + j];
                       }
                     }
                   });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank("global_avg_pool", x, 4);
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const double inv = 1.0 / static_cast<double>(hw);
  std::vector<double> out(n * c);
  for (std::size_t p = 0; p < n * c; ++p) {
    double s = 0.0;
    for (std::size_t i = 0; i < hw; ++i) s += x[p * hw + i];
    out[p] = s * inv;
  }
  auto xi = x.impl();
  return record_op({n, c}, std::move(out), {x}, [xi, hw, inv](const std::vector<double>& g) {
    auto& dx = grad_buffer(*xi);
    for (std::size_t p = 0; p < g.size(); ++p) {
      const double v = g[p] * inv;
      for (std::size_t i = 0; i < hw; ++i) dx[p * hw + i] += v;
    }
  });
}

}  // namespace litediff
