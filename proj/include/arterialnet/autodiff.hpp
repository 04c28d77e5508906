// Reverse-mode differentiation over dense row-major arrays of doubles.
//
// A DiffArray is an immutable value (shape + shared storage). When it was
// produced on a Tape it also carries the id of the tape node that made it.
// Operations on detached arrays simply compute values; as soon as one input
// lives on a tape the result is recorded there as well.
//
//   ad::Tape tape;
//   auto x = tape.variable(ad::DiffArray({2}, {1.0, 2.0}));
//   auto y = ad::sum(ad::mul(x, x));
//   auto grads = tape.backward(y);
//   grads.wrt(x);  // {2, 4}
#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace arterialnet::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

// Raised when a primitive receives incompatible shapes. The message names the
// primitive and both offending shapes.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(std::string_view op, const Shape& a, const Shape& b,
             std::string_view detail = {});
};

class Tape;

class DiffArray {
 public:
  static constexpr std::size_t kNoNode = std::numeric_limits<std::size_t>::max();

  DiffArray();  // scalar zero
  DiffArray(Shape shape, std::vector<double> values);

  static DiffArray scalar(double v);
  static DiffArray zeros(Shape shape);
  static DiffArray full(Shape shape, double v);
  static DiffArray vector(std::vector<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_->size(); }
  std::span<const double> values() const { return *data_; }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double item() const;  // requires size() == 1

  bool attached() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::optional<std::size_t> node_id() const;

  // Same values, no tape.
  DiffArray detach() const;

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  Tape* tape_ = nullptr;
  std::size_t node_ = kNoNode;
};

// Write handle into an input's gradient accumulator. Empty when the input does
// not need a gradient (detached constant).
class GradSink {
 public:
  GradSink() = default;
  explicit GradSink(double* data) : data_(data) {}
  explicit operator bool() const { return data_ != nullptr; }
  double& operator[](std::size_t i) const { return data_[i]; }
  double* data() const { return data_; }

 private:
  double* data_ = nullptr;
};

using BackwardFn =
    std::function<void(std::span<const double> grad_out, std::span<GradSink> inputs)>;

class Gradients {
 public:
  // Gradient of the root w.r.t. x, shaped like x. Zeros when x is detached,
  // belongs to another tape, or did not influence the root.
  std::vector<double> wrt(const DiffArray& x) const;

 private:
  friend class Tape;
  const Tape* tape_ = nullptr;
  std::vector<std::vector<double>> grads_;
};

// Define-by-run tape. Nodes are appended in execution order, so inputs always
// precede the node that consumes them. Not thread-safe; use one tape per thread.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a leaf that gradients are computed for.
  DiffArray variable(const DiffArray& value);

  // Records an operation. Returns a detached array when no input is attached.
  static DiffArray record(std::string_view op, Shape shape, std::vector<double> values,
                          std::initializer_list<const DiffArray*> inputs, BackwardFn fn);
  static DiffArray record(std::string_view op, Shape shape, std::vector<double> values,
                          const std::vector<const DiffArray*>& inputs, BackwardFn fn);

  // Reverse sweep from a scalar root. Each node is visited once.
  Gradients backward(const DiffArray& root) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::string_view op;
    std::size_t size = 0;
    std::vector<std::size_t> inputs;  // kNoNode for detached inputs
    BackwardFn backward;
  };
  std::size_t push(Node node);
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Primitives

// Elementwise, numpy-style broadcasting.
DiffArray add(const DiffArray& a, const DiffArray& b);
DiffArray sub(const DiffArray& a, const DiffArray& b);
DiffArray mul(const DiffArray& a, const DiffArray& b);
DiffArray div(const DiffArray& a, const DiffArray& b);

DiffArray neg(const DiffArray& x);
DiffArray exp(const DiffArray& x);
DiffArray log(const DiffArray& x);
// Gradient is taken as 0 where x == 0.
DiffArray sqrt(const DiffArray& x);
DiffArray power(const DiffArray& x, double p);
// Subgradient at 0 is 0.
DiffArray relu(const DiffArray& x);

DiffArray operator+(const DiffArray& a, const DiffArray& b);
DiffArray operator-(const DiffArray& a, const DiffArray& b);
DiffArray operator*(const DiffArray& a, const DiffArray& b);
DiffArray operator/(const DiffArray& a, const DiffArray& b);
DiffArray operator-(const DiffArray& x);
DiffArray operator+(const DiffArray& a, double b);
DiffArray operator-(const DiffArray& a, double b);
DiffArray operator*(const DiffArray& a, double b);
DiffArray operator/(const DiffArray& a, double b);
DiffArray operator*(double a, const DiffArray& b);
DiffArray operator+(double a, const DiffArray& b);
DiffArray operator-(double a, const DiffArray& b);
DiffArray operator/(double a, const DiffArray& b);

// (M,K)x(K,N) or batched (B,M,K)x(B,K,N).
DiffArray matmul(const DiffArray& a, const DiffArray& b);
DiffArray transpose(const DiffArray& x, std::size_t axis_a, std::size_t axis_b);
DiffArray reshape(const DiffArray& x, Shape shape);

DiffArray sum(const DiffArray& x);
DiffArray mean(const DiffArray& x);
DiffArray sum(const DiffArray& x, std::size_t axis, bool keepdim = false);
DiffArray mean(const DiffArray& x, std::size_t axis, bool keepdim = false);
// Whole-array extremum; gradient goes to the first index attaining it.
DiffArray min(const DiffArray& x);
DiffArray max(const DiffArray& x);

// Along the last axis.
DiffArray softmax(const DiffArray& x);

DiffArray slice(const DiffArray& x, std::size_t axis, std::size_t start, std::size_t end);
DiffArray concat(const std::vector<DiffArray>& parts, std::size_t axis);

struct Conv1dOptions {
  std::size_t dilation = 1;
  std::size_t pad_left = 0;
  std::size_t pad_right = 0;
};

// x: (B, Cin, L), weight: (Cout, Cin, K), bias: (Cout). Zero padding.
DiffArray conv1d(const DiffArray& x, const DiffArray& weight, const DiffArray& bias,
                 const Conv1dOptions& options);
// Left-padded by dilation*(K-1) so that output[t] only sees input[<= t].
DiffArray causal_conv1d(const DiffArray& x, const DiffArray& weight, const DiffArray& bias,
                        std::size_t dilation);

// Running statistics owned by a batch-norm layer.
struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

// x: (B, C) or (B, C, L); statistics per channel over batch (and time).
// Training mode normalizes with biased batch statistics and updates the
// running estimates; evaluation mode uses the running estimates.
DiffArray batch_norm(const DiffArray& x, const DiffArray& gamma, const DiffArray& beta,
                     BatchNormState& state, bool training);

// (B, C, L) -> (B, C, L/factor) by averaging.
DiffArray avg_pool1d(const DiffArray& x, std::size_t factor);
// (B, C, L) -> (B, C, L*factor) by repetition.
DiffArray upsample1d(const DiffArray& x, std::size_t factor);

// ---------------------------------------------------------------------------
// Finite-difference checking

struct GradCheckReport {
  std::vector<double> analytic;
  std::vector<double> numeric;
  std::vector<double> rel_error;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  bool passed = false;
};

using ScalarFn = std::function<DiffArray(const DiffArray&)>;

// Compares tape gradients of f at x with central differences
// (f(x+h) - f(x-h)) / 2h, coordinate by coordinate. The relative error uses
// max(|analytic|, |numeric|, 1e-4 * max(1, |f(x)|)) as denominator so that
// round-off in the difference quotient does not dominate near-zero entries.
// Throws std::domain_error naming the coordinate if f is non-finite at a probe.
GradCheckReport grad_check(const ScalarFn& f, const DiffArray& x, double step, double tol);

}  // namespace arterialnet::ad
