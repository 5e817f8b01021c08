#pragma once

// Dense float64 tensor with a tape-based reverse-mode autodiff.
//
// A Tensor is a cheap handle onto shared storage. Operations that see at
// least one input with requires_grad() produce an output that also requires
// grad and append one entry to the Tape they were given. Tape::backward walks
// the entries in reverse and each entry pushes its output gradient into the
// gradients of its inputs. Gradients accumulate additively, so fan-out needs
// no special handling.

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "heightformer/errors.hpp"

namespace hf {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : data_(std::make_shared<Storage>()) {
    for (auto extent : shape) {
      if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("shape " + shape_str(shape) + " does not hold " +
                           std::to_string(values.size()) + " values");
    }
    data_->shape = std::move(shape);
    data_->values = std::move(values);
    data_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const { return data_->shape; }
  std::size_t rank() const { return data_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return data_->shape.at(axis); }
  std::size_t size() const { return data_->values.size(); }

  std::span<const double> values() const { return data_->values; }
  std::span<double> mutable_values() { return data_->values; }
  const std::vector<double>& vec() const { return data_->values; }

  double operator[](std::size_t i) const { return data_->values[i]; }
  double item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return data_->values[0];
  }

  bool requires_grad() const { return data_ && data_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    data_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !data_->grad.empty(); }
  /// Empty span until a backward pass reached this tensor.
  std::span<const double> grad() const { return data_->grad; }
  /// Allocates a zero gradient on first use.
  std::span<double> grad_buffer() const {
    if (data_->grad.empty()) data_->grad.assign(data_->values.size(), 0.0);
    return data_->grad;
  }
  void zero_grad() { data_->grad.clear(); }

  /// Same storage identity.
  bool is(const Tensor& other) const { return data_ == other.data_; }

  /// Deep copy of values only; the copy carries no gradient.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(shape(), data_->values, requires_grad);
  }

 private:
  struct Storage {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> data_;
};

/// Ordered record of executed differentiable operations.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  /// Appends an operation. The closure reads `output`'s gradient and
  /// accumulates into the gradients of whichever inputs require grad.
  void record(std::string_view op, std::vector<Tensor> inputs, Tensor output, BackwardFn backward) {
    entries_.push_back({std::string(op), std::move(inputs), std::move(output), std::move(backward)});
  }

  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  const std::string& op_name(std::size_t i) const { return entries_.at(i).op; }

  /// Name of the first recorded op whose output holds a NaN/Inf.
  std::optional<std::string> first_non_finite() const {
    for (const auto& e : entries_) {
      for (double v : e.output.values()) {
        if (!std::isfinite(v)) return e.op;
      }
    }
    return std::nullopt;
  }

  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
      throw ContractError("backward needs a scalar loss, got " +
                          (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    }
    std::size_t last = entries_.size();
    for (std::size_t i = entries_.size(); i-- > 0;) {
      if (entries_[i].output.is(loss)) {
        last = i;
        break;
      }
    }
    if (last == entries_.size()) throw ContractError("loss was not produced on this tape");

    Tensor seed = loss;
    seed.grad_buffer()[0] += 1.0;
    for (std::size_t i = last + 1; i-- > 0;) {
      auto& e = entries_[i];
      if (!e.output.has_grad()) continue;  // not reachable from the loss
      e.backward();
    }
  }

 private:
  struct Entry {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };
  std::vector<Entry> entries_;
};

}  // namespace hf
