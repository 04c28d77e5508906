#include "arterialnet/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace arterialnet::ad {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  if (shape.size() == 1) os << ',';
  os << ')';
  return os.str();
}

namespace {

std::string shape_error_message(std::string_view op, const Shape& a, const Shape& b,
                                std::string_view detail) {
  std::string msg = std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                    shape_str(b);
  if (!detail.empty()) msg += " (" + std::string(detail) + ")";
  return msg;
}

}  // namespace

ShapeError::ShapeError(std::string_view op, const Shape& a, const Shape& b,
                       std::string_view detail)
    : std::invalid_argument(shape_error_message(op, a, b, detail)) {}

DiffArray::DiffArray() : data_(std::make_shared<const std::vector<double>>(1, 0.0)) {}

DiffArray::DiffArray(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  if (shape_size(shape_) != values.size()) {
    throw std::invalid_argument("DiffArray: shape " + shape_str(shape_) + " holds " +
                                std::to_string(shape_size(shape_)) + " values, got " +
                                std::to_string(values.size()));
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw std::domain_error("DiffArray: non-finite value at flat index " +
                              std::to_string(i));
    }
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(values));
}

DiffArray DiffArray::scalar(double v) { return DiffArray({}, {v}); }

DiffArray DiffArray::zeros(Shape shape) { return full(std::move(shape), 0.0); }

DiffArray DiffArray::full(Shape shape, double v) {
  const auto n = shape_size(shape);
  return DiffArray(std::move(shape), std::vector<double>(n, v));
}

DiffArray DiffArray::vector(std::vector<double> values) {
  const auto n = values.size();
  return DiffArray({n}, std::move(values));
}

std::size_t DiffArray::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw std::out_of_range("DiffArray::dim: axis " + std::to_string(axis) +
                            " out of range for shape " + shape_str(shape_));
  }
  return shape_[axis];
}

double DiffArray::item() const {
  if (size() != 1) {
    throw std::invalid_argument("DiffArray::item: expected a single value, shape is " +
                                shape_str(shape_));
  }
  return (*data_)[0];
}

std::optional<std::size_t> DiffArray::node_id() const {
  if (tape_ == nullptr) return std::nullopt;
  return node_;
}

DiffArray DiffArray::detach() const {
  DiffArray out = *this;
  out.tape_ = nullptr;
  out.node_ = kNoNode;
  return out;
}

std::vector<double> Gradients::wrt(const DiffArray& x) const {
  if (x.tape() == nullptr || x.tape() != tape_) return std::vector<double>(x.size(), 0.0);
  const auto id = *x.node_id();
  if (id >= grads_.size() || grads_[id].empty()) return std::vector<double>(x.size(), 0.0);
  return grads_[id];
}

std::size_t Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

DiffArray Tape::variable(const DiffArray& value) {
  DiffArray out = value.detach();
  out.tape_ = this;
  out.node_ = push(Node{"variable", value.size(), {}, {}});
  return out;
}

DiffArray Tape::record(std::string_view op, Shape shape, std::vector<double> values,
                       std::initializer_list<const DiffArray*> inputs, BackwardFn fn) {
  return record(op, std::move(shape), std::move(values),
                std::vector<const DiffArray*>(inputs), std::move(fn));
}

DiffArray Tape::record(std::string_view op, Shape shape, std::vector<double> values,
                       const std::vector<const DiffArray*>& inputs, BackwardFn fn) {
  DiffArray out(std::move(shape), std::move(values));
  Tape* tape = nullptr;
  for (const auto* in : inputs) {
    if (in->tape() == nullptr) continue;
    if (tape != nullptr && tape != in->tape()) {
      throw std::invalid_argument(std::string(op) + ": inputs recorded on different tapes");
    }
    tape = in->tape();
  }
  if (tape == nullptr) return out;

  Node node{op, out.size(), {}, std::move(fn)};
  node.inputs.reserve(inputs.size());
  for (const auto* in : inputs) {
    node.inputs.push_back(in->tape() ? in->node_ : DiffArray::kNoNode);
  }
  out.tape_ = tape;
  out.node_ = tape->push(std::move(node));
  return out;
}

Gradients Tape::backward(const DiffArray& root) const {
  if (root.size() != 1) {
    throw std::invalid_argument("backward: root must be a scalar, got shape " +
                                shape_str(root.shape()));
  }
  Gradients out;
  out.tape_ = this;
  out.grads_.resize(nodes_.size());
  if (root.tape() != this) return out;  // detached root: all gradients zero

  out.grads_[root.node_] = {1.0};
  std::vector<GradSink> sinks;
  for (std::size_t id = root.node_ + 1; id-- > 0;) {
    const Node& node = nodes_[id];
    if (out.grads_[id].empty() || !node.backward) continue;
    sinks.assign(node.inputs.size(), GradSink{});
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const auto in = node.inputs[k];
      if (in == DiffArray::kNoNode) continue;
      auto& g = out.grads_[in];
      if (g.empty()) g.assign(nodes_[in].size, 0.0);
      sinks[k] = GradSink(g.data());
    }
    node.backward(out.grads_[id], sinks);
  }
  return out;
}

GradCheckReport grad_check(const ScalarFn& f, const DiffArray& x, double step, double tol) {
  if (!(step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");

  GradCheckReport report;
  double f0 = 0.0;
  {
    Tape tape;
    auto leaf = tape.variable(x);
    auto y = f(leaf);
    if (y.size() != 1) {
      throw std::invalid_argument("grad_check: f must return a scalar, got shape " +
                                  shape_str(y.shape()));
    }
    f0 = y.item();
    report.analytic = tape.backward(y).wrt(leaf);
  }

  const auto base = x.values();
  std::vector<double> probe(base.begin(), base.end());
  const double floor = 1e-4 * std::max(1.0, std::abs(f0));
  report.numeric.resize(x.size());
  report.rel_error.resize(x.size());

  auto eval_at = [&](std::size_t i, double value) {
    probe[i] = value;
    double fx = 0.0;
    try {
      fx = f(DiffArray(x.shape(), probe)).item();
    } catch (const std::domain_error& e) {
      throw std::domain_error("grad_check: f non-finite when probing coordinate " +
                              std::to_string(i) + ": " + e.what());
    }
    if (!std::isfinite(fx)) {
      throw std::domain_error("grad_check: f non-finite when probing coordinate " +
                              std::to_string(i));
    }
    return fx;
  };

  for (std::size_t i = 0; i < x.size(); ++i) {
    const double plus = eval_at(i, base[i] + step);
    const double minus = eval_at(i, base[i] - step);
    probe[i] = base[i];
    const double fd = (plus - minus) / (2.0 * step);
    const double g = report.analytic[i];
    const double denom = std::max({std::abs(g), std::abs(fd), floor});
    const double err = std::abs(g - fd) / denom;
    report.numeric[i] = fd;
    report.rel_error[i] = err;
    if (err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_index = i;
    }
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

}  // namespace arterialnet::ad
