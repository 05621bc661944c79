#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace litediff {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Raised when operand shapes are incompatible. Carries both shapes so callers
// can report them without re-parsing the message.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, Shape lhs, Shape rhs);

  const std::string& op() const { return op_; }
  const Shape& lhs() const { return lhs_; }
  const Shape& rhs() const { return rhs_; }

 private:
  std::string op_;
  Shape lhs_;
  Shape rhs_;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::optional<std::vector<double>> grad;
};

/// Dense row-major f64 array. Copies share storage (handle semantics); use
/// clone() for an independent copy.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double item() const;
  double operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value);

  bool has_grad() const { return impl_->grad.has_value(); }
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void clear_grad() { impl_->grad.reset(); }

  // New storage, no grad, not tracked.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Define-by-run record of differentiable operations. Ops record onto the
/// tape activated by a TapeScope on the current thread; with no active tape
/// nothing is recorded and results never require grad.
class Tape {
 public:
  using BackwardFn = std::function<void(const std::vector<double>& out_grad)>;

  struct Node {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(Node node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  bool produced(const Tensor& t) const;
  void clear() { nodes_.clear(); }

  // Tape active on this thread, or nullptr.
  static Tape* current();

 private:
  friend class TapeScope;
  std::vector<Node> nodes_;
};

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Accumulates into a tensor's grad buffer, allocating zeros on first touch.
std::vector<double>& grad_buffer(TensorImpl& t);

// Builds an op result. requires_grad only if a tape is active and any input
// requires grad; in that case `backward` is recorded.
Tensor record_op(Shape shape, std::vector<double> data,
                 std::vector<Tensor> inputs, Tape::BackwardFn backward);

/// Reverse sweep from a scalar loss. Grads of every requires_grad tensor on the
/// tape are reset first, so after return each such leaf holds d(loss)/d(leaf)
/// (zeros when unreachable).
void backward(const Tensor& loss, Tape& tape);

// Elementwise. `b` must match `a` exactly unless it is a plain double.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor mul(const Tensor& a, double b);
inline Tensor scale(const Tensor& a, double c) { return mul(a, c); }

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor matmul(const Tensor& a, const Tensor& b);
// a: N×M, bias: M. Adds bias to every row.
Tensor add_row_bias(const Tensor& a, const Tensor& bias);
// x: N×C×H×W, v: N×C. Adds v[n][c] to every pixel of plane (n, c).
Tensor add_channel_bias(const Tensor& x, const Tensor& v);
// N×C1×H×W ++ N×C2×H×W -> N×(C1+C2)×H×W
Tensor concat_channels(const Tensor& a, const Tensor& b);
// N×C×H×W -> N×C
Tensor global_avg_pool(const Tensor& x);

/// Cross-correlation, NCHW input, OIHW kernel. Each output element is
/// accumulated as bias + sum over (ic, kh, kw) in that nesting order.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              std::size_t stride, std::size_t padding);

enum class Resample { Down2, Up2 };
// Down2: 2×2 average pool. Up2: nearest-neighbour duplication.
Tensor resample(const Tensor& input, Resample mode);

}  // namespace litediff
