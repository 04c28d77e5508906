#include <algorithm>
#include <cmath>
#include <numeric>

#include "arterialnet/autodiff.hpp"

namespace arterialnet::ad {

namespace {

// Four partial sums so the loop vectorizes under strict floating point.
double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

// Maps every output element of a broadcast binary op to the flat index of
// each operand. Empty maps mean "same shape as the output".
struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> a_map;
  std::vector<std::size_t> b_map;
  bool a_scalar = false;
  bool b_scalar = false;
};

std::vector<std::size_t> broadcast_map(const Shape& in, const Shape& out) {
  const std::size_t nd = out.size();
  const std::size_t offset = nd - in.size();
  std::vector<std::size_t> in_stride(nd, 0);
  std::size_t s = 1;
  for (std::size_t k = in.size(); k-- > 0;) {
    in_stride[k + offset] = in[k] == 1 ? 0 : s;
    s *= in[k];
  }
  const std::size_t n = shape_size(out);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(nd, 0);
  std::size_t flat = 0;
  for (std::size_t i = 0; i < n; ++i) {
    map[i] = flat;
    for (std::size_t k = nd; k-- > 0;) {
      ++idx[k];
      flat += in_stride[k];
      if (idx[k] < out[k]) break;
      flat -= in_stride[k] * idx[k];
      idx[k] = 0;
    }
  }
  return map;
}

BroadcastPlan plan_broadcast(std::string_view op, const Shape& a, const Shape& b) {
  BroadcastPlan plan;
  if (a == b) {
    plan.out = a;
    return plan;
  }
  if (shape_size(b) == 1 && b.size() <= a.size()) {
    plan.out = a;
    plan.b_scalar = true;
    return plan;
  }
  if (shape_size(a) == 1 && a.size() <= b.size()) {
    plan.out = b;
    plan.a_scalar = true;
    return plan;
  }
  const std::size_t nd = std::max(a.size(), b.size());
  plan.out.assign(nd, 1);
  for (std::size_t k = 0; k < nd; ++k) {
    const std::size_t da = k + a.size() >= nd ? a[k + a.size() - nd] : 1;
    const std::size_t db = k + b.size() >= nd ? b[k + b.size() - nd] : 1;
    if (da != db && da != 1 && db != 1) throw ShapeError(op, a, b, "not broadcastable");
    plan.out[k] = std::max(da, db);
  }
  if (a != plan.out) plan.a_map = broadcast_map(a, plan.out);
  if (b != plan.out) plan.b_map = broadcast_map(b, plan.out);
  return plan;
}

template <typename Fwd, typename Da, typename Db>
DiffArray binary(std::string_view op, const DiffArray& a, const DiffArray& b, Fwd fwd, Da da,
                 Db db) {
  auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(op, a.shape(), b.shape()));
  const std::size_t n = shape_size(plan->out);
  const auto av = a.values();
  const auto bv = b.values();
  auto ai = [&plan](std::size_t i) {
    return plan->a_scalar ? 0 : (plan->a_map.empty() ? i : plan->a_map[i]);
  };
  auto bi = [&plan](std::size_t i) {
    return plan->b_scalar ? 0 : (plan->b_map.empty() ? i : plan->b_map[i]);
  };
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[ai(i)], bv[bi(i)]);
  return Tape::record(op, plan->out, std::move(out), {&a, &b},
                      [a, b, plan, da, db](std::span<const double> g, std::span<GradSink> in) {
                        const auto av = a.values();
                        const auto bv = b.values();
                        auto ai = [&plan](std::size_t i) {
                          return plan->a_scalar ? 0 : (plan->a_map.empty() ? i : plan->a_map[i]);
                        };
                        auto bi = [&plan](std::size_t i) {
                          return plan->b_scalar ? 0 : (plan->b_map.empty() ? i : plan->b_map[i]);
                        };
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          const double x = av[ai(i)];
                          const double y = bv[bi(i)];
                          if (in[0]) in[0][ai(i)] += g[i] * da(x, y);
                          if (in[1]) in[1][bi(i)] += g[i] * db(x, y);
                        }
                      });
}

template <typename Fwd, typename Deriv>
DiffArray unary(std::string_view op, const DiffArray& x, Fwd fwd, Deriv deriv) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  auto result_values = std::make_shared<std::vector<double>>(out);
  return Tape::record(op, x.shape(), std::move(out), {&x},
                      [x, result_values, deriv](std::span<const double> g, std::span<GradSink> in) {
                        if (!in[0]) return;
                        const auto xv = x.values();
                        const auto& yv = *result_values;
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          in[0][i] += g[i] * deriv(xv[i], yv[i]);
                        }
                      });
}

// (outer, axis, inner) factorization of a shape around one axis.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(std::string_view op, const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError(op, shape, Shape{axis}, "axis out of range");
  }
  AxisSplit s;
  for (std::size_t k = 0; k < axis; ++k) s.outer *= shape[k];
  s.len = shape[axis];
  for (std::size_t k = axis + 1; k < shape.size(); ++k) s.inner *= shape[k];
  return s;
}

DiffArray reduce_axis(std::string_view op, const DiffArray& x, std::size_t axis, bool keepdim,
                      double scale) {
  const auto s = split_axis(op, x.shape(), axis);
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[axis] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  const auto xv = x.values();
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t l = 0; l < s.len; ++l) {
      const double* row = xv.data() + (o * s.len + l) * s.inner;
      double* dst = out.data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += row[i];
    }
  }
  for (auto& v : out) v *= scale;
  return Tape::record(op, std::move(out_shape), std::move(out), {&x},
                      [s, scale](std::span<const double> g, std::span<GradSink> in) {
                        if (!in[0]) return;
                        for (std::size_t o = 0; o < s.outer; ++o) {
                          for (std::size_t l = 0; l < s.len; ++l) {
                            double* dst = in[0].data() + (o * s.len + l) * s.inner;
                            const double* src = g.data() + o * s.inner;
                            for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i] * scale;
                          }
                        }
                      });
}

DiffArray extremum(std::string_view op, const DiffArray& x, bool want_max) {
  if (x.size() == 0) throw ShapeError(op, x.shape(), Shape{}, "empty input");
  const auto xv = x.values();
  std::size_t best = 0;
  for (std::size_t i = 1; i < xv.size(); ++i) {
    if (want_max ? xv[i] > xv[best] : xv[i] < xv[best]) best = i;
  }
  return Tape::record(op, {}, {xv[best]}, {&x},
                      [best](std::span<const double> g, std::span<GradSink> in) {
                        if (in[0]) in[0][best] += g[0];
                      });
}

}  // namespace

DiffArray add(const DiffArray& a, const DiffArray& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

DiffArray sub(const DiffArray& a, const DiffArray& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

DiffArray mul(const DiffArray& a, const DiffArray& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

DiffArray div(const DiffArray& a, const DiffArray& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
}

DiffArray neg(const DiffArray& x) {
  return unary(
      "neg", x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

DiffArray exp(const DiffArray& x) {
  return unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

DiffArray log(const DiffArray& x) {
  return unary(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

DiffArray sqrt(const DiffArray& x) {
  return unary(
      "sqrt", x, [](double v) { return std::sqrt(v); },
      [](double, double y) { return y == 0.0 ? 0.0 : 0.5 / y; });
}

DiffArray power(const DiffArray& x, double p) {
  return unary(
      "power", x, [p](double v) { return std::pow(v, p); },
      [p](double v, double) { return p == 0.0 ? 0.0 : p * std::pow(v, p - 1.0); });
}

DiffArray relu(const DiffArray& x) {
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

DiffArray operator+(const DiffArray& a, const DiffArray& b) { return add(a, b); }
DiffArray operator-(const DiffArray& a, const DiffArray& b) { return sub(a, b); }
DiffArray operator*(const DiffArray& a, const DiffArray& b) { return mul(a, b); }
DiffArray operator/(const DiffArray& a, const DiffArray& b) { return div(a, b); }
DiffArray operator-(const DiffArray& x) { return neg(x); }
DiffArray operator+(const DiffArray& a, double b) { return add(a, DiffArray::scalar(b)); }
DiffArray operator-(const DiffArray& a, double b) { return sub(a, DiffArray::scalar(b)); }
DiffArray operator*(const DiffArray& a, double b) { return mul(a, DiffArray::scalar(b)); }
DiffArray operator/(const DiffArray& a, double b) { return div(a, DiffArray::scalar(b)); }
DiffArray operator*(double a, const DiffArray& b) { return mul(DiffArray::scalar(a), b); }
DiffArray operator+(double a, const DiffArray& b) { return add(DiffArray::scalar(a), b); }
DiffArray operator-(double a, const DiffArray& b) { return sub(DiffArray::scalar(a), b); }
DiffArray operator/(double a, const DiffArray& b) { return div(DiffArray::scalar(a), b); }

DiffArray matmul(const DiffArray& a, const DiffArray& b) {
  std::size_t batch = 1, m = 0, k = 0, n = 0;
  Shape out_shape;
  if (a.ndim() == 2 && b.ndim() == 2) {
    m = a.dim(0);
    k = a.dim(1);
    n = b.dim(1);
    if (b.dim(0) != k) throw ShapeError("matmul", a.shape(), b.shape(), "inner dimensions differ");
    out_shape = {m, n};
  } else if (a.ndim() == 3 && b.ndim() == 3) {
    batch = a.dim(0);
    m = a.dim(1);
    k = a.dim(2);
    n = b.dim(2);
    if (b.dim(0) != batch || b.dim(1) != k) {
      throw ShapeError("matmul", a.shape(), b.shape(), "batch or inner dimensions differ");
    }
    out_shape = {batch, m, n};
  } else {
    throw ShapeError("matmul", a.shape(), b.shape(), "expected 2-D or batched 3-D operands");
  }

  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(batch * m * n, 0.0);
  for (std::size_t bt = 0; bt < batch; ++bt) {
    const double* A = av.data() + bt * m * k;
    const double* B = bv.data() + bt * k * n;
    double* C = out.data() + bt * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = A[i * k + p];
        if (aip == 0.0) continue;
        const double* brow = B + p * n;
        double* crow = C + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
  }
  return Tape::record(
      "matmul", std::move(out_shape), std::move(out), {&a, &b},
      [a, b, batch, m, k, n](std::span<const double> g, std::span<GradSink> in) {
        const auto av = a.values();
        const auto bv = b.values();
        for (std::size_t bt = 0; bt < batch; ++bt) {
          const double* A = av.data() + bt * m * k;
          const double* B = bv.data() + bt * k * n;
          const double* G = g.data() + bt * m * n;
          if (in[0]) {
            double* GA = in[0].data() + bt * m * k;
            for (std::size_t i = 0; i < m; ++i) {
              for (std::size_t p = 0; p < k; ++p) {
                const double* brow = B + p * n;
                const double* grow = G + i * n;
                GA[i * k + p] += dot(grow, brow, n);
              }
            }
          }
          if (in[1]) {
            double* GB = in[1].data() + bt * k * n;
            for (std::size_t i = 0; i < m; ++i) {
              const double* grow = G + i * n;
              for (std::size_t p = 0; p < k; ++p) {
                const double aip = A[i * k + p];
                if (aip == 0.0) continue;
                double* gbrow = GB + p * n;
                for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
              }
            }
          }
        }
      });
}

DiffArray transpose(const DiffArray& x, std::size_t axis_a, std::size_t axis_b) {
  const auto& in_shape = x.shape();
  const std::size_t nd = in_shape.size();
  if (axis_a >= nd || axis_b >= nd) {
    throw ShapeError("transpose", in_shape, Shape{axis_a, axis_b}, "axis out of range");
  }
  Shape out_shape = in_shape;
  std::swap(out_shape[axis_a], out_shape[axis_b]);

  // Strides of the input, permuted into output axis order.
  std::vector<std::size_t> in_stride(nd, 1);
  for (std::size_t k = nd - 1; k-- > 0;) in_stride[k] = in_stride[k + 1] * in_shape[k + 1];
  std::vector<std::size_t> perm_stride = in_stride;
  std::swap(perm_stride[axis_a], perm_stride[axis_b]);

  const std::size_t n = x.size();
  auto map = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(nd, 0);
  std::size_t flat = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (*map)[i] = flat;
    for (std::size_t k = nd; k-- > 0;) {
      ++idx[k];
      flat += perm_stride[k];
      if (idx[k] < out_shape[k]) break;
      flat -= perm_stride[k] * idx[k];
      idx[k] = 0;
    }
  }
  const auto xv = x.values();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[(*map)[i]];
  return Tape::record("transpose", std::move(out_shape), std::move(out), {&x},
                      [map](std::span<const double> g, std::span<GradSink> in) {
                        if (!in[0]) return;
                        for (std::size_t i = 0; i < g.size(); ++i) in[0][(*map)[i]] += g[i];
                      });
}

DiffArray reshape(const DiffArray& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw ShapeError("reshape", x.shape(), shape, "element counts differ");
  }
  const auto xv = x.values();
  return Tape::record("reshape", std::move(shape), std::vector<double>(xv.begin(), xv.end()),
                      {&x}, [](std::span<const double> g, std::span<GradSink> in) {
                        if (!in[0]) return;
                        for (std::size_t i = 0; i < g.size(); ++i) in[0][i] += g[i];
                      });
}

DiffArray sum(const DiffArray& x) {
  const auto xv = x.values();
  const double s = std::accumulate(xv.begin(), xv.end(), 0.0);
  const std::size_t n = x.size();
  return Tape::record("sum", {}, {s}, {&x},
                      [n](std::span<const double> g, std::span<GradSink> in) {
                        if (!in[0]) return;
                        for (std::size_t i = 0; i < n; ++i) in[0][i] += g[0];
                      });
}

DiffArray mean(const DiffArray& x) {
  if (x.size() == 0) throw ShapeError("mean", x.shape(), Shape{}, "empty input");
  const auto xv = x.values();
  const std::size_t n = x.size();
  const double inv = 1.0 / static_cast<double>(n);
  const double m = std::accumulate(xv.begin(), xv.end(), 0.0) * inv;
  return Tape::record("mean", {}, {m}, {&x},
                      [n, inv](std::span<const double> g, std::span<GradSink> in) {
                        if (!in[0]) return;
                        for (std::size_t i = 0; i < n; ++i) in[0][i] += g[0] * inv;
                      });
}

DiffArray sum(const DiffArray& x, std::size_t axis, bool keepdim) {
  return reduce_axis("sum", x, axis, keepdim, 1.0);
}

DiffArray mean(const DiffArray& x, std::size_t axis, bool keepdim) {
  const auto s = split_axis("mean", x.shape(), axis);
  if (s.len == 0) throw ShapeError("mean", x.shape(), Shape{axis}, "empty axis");
  return reduce_axis("mean", x, axis, keepdim, 1.0 / static_cast<double>(s.len));
}

DiffArray min(const DiffArray& x) { return extremum("min", x, false); }
DiffArray max(const DiffArray& x) { return extremum("max", x, true); }

DiffArray softmax(const DiffArray& x) {
  if (x.ndim() == 0) throw ShapeError("softmax", x.shape(), Shape{}, "needs at least 1 axis");
  const std::size_t len = x.shape().back();
  const std::size_t rows = x.size() / len;
  const auto xv = x.values();
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = xv.data() + r * len;
    double* dst = out.data() + r * len;
    const double mx = *std::max_element(src, src + len);
    double z = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      dst[i] = std::exp(src[i] - mx);
      z += dst[i];
    }
    for (std::size_t i = 0; i < len; ++i) dst[i] /= z;
  }
  auto y = std::make_shared<std::vector<double>>(out);
  return Tape::record("softmax", x.shape(), std::move(out), {&x},
                      [y, rows, len](std::span<const double> g, std::span<GradSink> in) {
                        if (!in[0]) return;
                        for (std::size_t r = 0; r < rows; ++r) {
                          const double* yr = y->data() + r * len;
                          const double* gr = g.data() + r * len;
                          double dot = 0.0;
                          for (std::size_t i = 0; i < len; ++i) dot += gr[i] * yr[i];
                          for (std::size_t i = 0; i < len; ++i) {
                            in[0][r * len + i] += yr[i] * (gr[i] - dot);
                          }
                        }
                      });
}

DiffArray slice(const DiffArray& x, std::size_t axis, std::size_t start, std::size_t end) {
  const auto s = split_axis("slice", x.shape(), axis);
  if (start > end || end > s.len) {
    throw ShapeError("slice", x.shape(), Shape{start, end}, "range outside axis");
  }
  Shape out_shape = x.shape();
  out_shape[axis] = end - start;
  const std::size_t width = end - start;
  const auto xv = x.values();
  std::vector<double> out(s.outer * width * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    const double* src = xv.data() + (o * s.len + start) * s.inner;
    std::copy(src, src + width * s.inner, out.data() + o * width * s.inner);
  }
  return Tape::record("slice", std::move(out_shape), std::move(out), {&x},
                      [s, start, width](std::span<const double> g, std::span<GradSink> in) {
                        if (!in[0]) return;
                        for (std::size_t o = 0; o < s.outer; ++o) {
                          double* dst = in[0].data() + (o * s.len + start) * s.inner;
                          const double* src = g.data() + o * width * s.inner;
                          for (std::size_t i = 0; i < width * s.inner; ++i) dst[i] += src[i];
                        }
                      });
}

DiffArray concat(const std::vector<DiffArray>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& ref = parts.front().shape();
  const auto s0 = split_axis("concat", ref, axis);
  std::vector<std::size_t> lens;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.ndim() != ref.size()) throw ShapeError("concat", ref, p.shape(), "rank differs");
    for (std::size_t k = 0; k < ref.size(); ++k) {
      if (k != axis && p.shape()[k] != ref[k]) {
        throw ShapeError("concat", ref, p.shape(), "non-concatenated axis differs");
      }
    }
    lens.push_back(p.shape()[axis]);
    total += p.shape()[axis];
  }
  Shape out_shape = ref;
  out_shape[axis] = total;
  std::vector<double> out(s0.outer * total * s0.inner);
  std::size_t offset = 0;
  for (std::size_t q = 0; q < parts.size(); ++q) {
    const auto pv = parts[q].values();
    const std::size_t w = lens[q] * s0.inner;
    for (std::size_t o = 0; o < s0.outer; ++o) {
      std::copy(pv.data() + o * w, pv.data() + (o + 1) * w,
                out.data() + (o * total + offset) * s0.inner);
    }
    offset += lens[q];
  }
  std::vector<const DiffArray*> inputs;
  for (const auto& p : parts) inputs.push_back(&p);
  const std::size_t outer = s0.outer, inner = s0.inner;
  return Tape::record("concat", std::move(out_shape), std::move(out), inputs,
                      [lens, total, outer, inner](std::span<const double> g,
                                                  std::span<GradSink> in) {
                        std::size_t offset = 0;
                        for (std::size_t q = 0; q < lens.size(); ++q) {
                          const std::size_t w = lens[q] * inner;
                          if (in[q]) {
                            for (std::size_t o = 0; o < outer; ++o) {
                              const double* src = g.data() + (o * total + offset) * inner;
                              double* dst = in[q].data() + o * w;
                              for (std::size_t i = 0; i < w; ++i) dst[i] += src[i];
                            }
                          }
                          offset += lens[q];
                        }
                      });
}

DiffArray conv1d(const DiffArray& x, const DiffArray& weight, const DiffArray& bias,
                 const Conv1dOptions& opt) {
  if (x.ndim() != 3 || weight.ndim() != 3) {
    throw ShapeError("conv1d", x.shape(), weight.shape(), "expected (B,C,L) and (O,C,K)");
  }
  const std::size_t B = x.dim(0), C = x.dim(1), L = x.dim(2);
  const std::size_t O = weight.dim(0), K = weight.dim(2);
  if (weight.dim(1) != C) throw ShapeError("conv1d", x.shape(), weight.shape(), "channel mismatch");
  if (bias.shape() != Shape{O}) throw ShapeError("conv1d", weight.shape(), bias.shape(), "bias");
  if (opt.dilation == 0) throw std::invalid_argument("conv1d: dilation must be positive");
  const std::size_t span = opt.dilation * (K - 1);
  if (L + opt.pad_left + opt.pad_right <= span) {
    throw ShapeError("conv1d", x.shape(), weight.shape(), "input shorter than kernel span");
  }
  const std::size_t Lout = L + opt.pad_left + opt.pad_right - span;
  const auto d = static_cast<std::ptrdiff_t>(opt.dilation);
  const auto pl = static_cast<std::ptrdiff_t>(opt.pad_left);
  const auto Ls = static_cast<std::ptrdiff_t>(L);
  const auto Lo = static_cast<std::ptrdiff_t>(Lout);

  // Valid output range [lo, hi) for kernel tap k.
  auto tap_range = [=](std::size_t k, std::ptrdiff_t& lo, std::ptrdiff_t& hi) {
    const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(k) * d - pl;
    lo = std::max<std::ptrdiff_t>(0, -off);
    hi = std::min<std::ptrdiff_t>(Lo, Ls - off);
    return off;
  };

  const auto xv = x.values();
  const auto wv = weight.values();
  const auto bv = bias.values();
  std::vector<double> out(B * O * Lout);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t o = 0; o < O; ++o) {
      double* dst = out.data() + (b * O + o) * Lout;
      std::fill(dst, dst + Lout, bv[o]);
      for (std::size_t c = 0; c < C; ++c) {
        const double* src = xv.data() + (b * C + c) * L;
        for (std::size_t k = 0; k < K; ++k) {
          const double w = wv[(o * C + c) * K + k];
          std::ptrdiff_t lo, hi;
          const auto off = tap_range(k, lo, hi);
          for (std::ptrdiff_t t = lo; t < hi; ++t) dst[t] += w * src[t + off];
        }
      }
    }
  }
  return Tape::record(
      "conv1d", {B, O, Lout}, std::move(out), {&x, &weight, &bias},
      [x, weight, B, C, L, O, K, Lout, tap_range](std::span<const double> g,
                                                   std::span<GradSink> in) {
        const auto xv = x.values();
        const auto wv = weight.values();
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t o = 0; o < O; ++o) {
            const double* gr = g.data() + (b * O + o) * Lout;
            if (in[2]) {
              double acc = 0.0;
              for (std::size_t t = 0; t < Lout; ++t) acc += gr[t];
              in[2][o] += acc;
            }
            for (std::size_t c = 0; c < C; ++c) {
              const double* src = xv.data() + (b * C + c) * L;
              for (std::size_t k = 0; k < K; ++k) {
                std::ptrdiff_t lo, hi;
                const auto off = tap_range(k, lo, hi);
                const std::size_t widx = (o * C + c) * K + k;
                if (in[1]) {
                  if (hi > lo) in[1][widx] += dot(gr + lo, src + lo + off, static_cast<std::size_t>(hi - lo));
                }
                if (in[0]) {
                  const double w = wv[widx];
                  double* gx = in[0].data() + (b * C + c) * L;
                  for (std::ptrdiff_t t = lo; t < hi; ++t) gx[t + off] += w * gr[t];
                }
              }
            }
          }
        }
      });
}

DiffArray causal_conv1d(const DiffArray& x, const DiffArray& weight, const DiffArray& bias,
                        std::size_t dilation) {
  if (weight.ndim() != 3) throw ShapeError("causal_conv1d", x.shape(), weight.shape());
  return conv1d(x, weight, bias, {dilation, dilation * (weight.dim(2) - 1), 0});
}

DiffArray batch_norm(const DiffArray& x, const DiffArray& gamma, const DiffArray& beta,
                     BatchNormState& state, bool training) {
  if (x.ndim() != 2 && x.ndim() != 3) {
    throw ShapeError("batch_norm", x.shape(), gamma.shape(), "expected (B,C) or (B,C,L)");
  }
  const std::size_t B = x.dim(0), C = x.dim(1), L = x.ndim() == 3 ? x.dim(2) : 1;
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) {
    throw ShapeError("batch_norm", x.shape(), gamma.shape(), "affine parameters");
  }
  if (state.running_mean.size() != C || state.running_var.size() != C) {
    throw ShapeError("batch_norm", x.shape(), Shape{state.running_mean.size()},
                     "running statistics");
  }
  const std::size_t count = B * L;
  const auto xv = x.values();
  const auto gv = gamma.values();
  const auto bv = beta.values();

  auto inv_std = std::make_shared<std::vector<double>>(C);
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  std::vector<double> out(x.size());
  for (std::size_t c = 0; c < C; ++c) {
    double mu, var;
    if (training) {
      double s = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const double* row = xv.data() + (b * C + c) * L;
        for (std::size_t t = 0; t < L; ++t) s += row[t];
      }
      mu = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const double* row = xv.data() + (b * C + c) * L;
        for (std::size_t t = 0; t < L; ++t) ss += (row[t] - mu) * (row[t] - mu);
      }
      var = ss / static_cast<double>(count);
      const double unbiased = count > 1 ? ss / static_cast<double>(count - 1) : var;
      state.running_mean[c] = (1.0 - state.momentum) * state.running_mean[c] + state.momentum * mu;
      state.running_var[c] =
          (1.0 - state.momentum) * state.running_var[c] + state.momentum * unbiased;
    } else {
      mu = state.running_mean[c];
      var = state.running_var[c];
    }
    const double is = 1.0 / std::sqrt(var + state.eps);
    (*inv_std)[c] = is;
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t base = (b * C + c) * L;
      for (std::size_t t = 0; t < L; ++t) {
        const double h = (xv[base + t] - mu) * is;
        (*xhat)[base + t] = h;
        out[base + t] = gv[c] * h + bv[c];
      }
    }
  }
  return Tape::record(
      "batch_norm", x.shape(), std::move(out), {&x, &gamma, &beta},
      [gamma, inv_std, xhat, B, C, L, count, training](std::span<const double> g,
                                                        std::span<GradSink> in) {
        const auto gv = gamma.values();
        const auto n = static_cast<double>(count);
        for (std::size_t c = 0; c < C; ++c) {
          double sum_g = 0.0, sum_gh = 0.0;
          for (std::size_t b = 0; b < B; ++b) {
            const std::size_t base = (b * C + c) * L;
            for (std::size_t t = 0; t < L; ++t) {
              sum_g += g[base + t];
              sum_gh += g[base + t] * (*xhat)[base + t];
            }
          }
          if (in[1]) in[1][c] += sum_gh;
          if (in[2]) in[2][c] += sum_g;
          if (!in[0]) continue;
          const double scale = gv[c] * (*inv_std)[c];
          for (std::size_t b = 0; b < B; ++b) {
            const std::size_t base = (b * C + c) * L;
            for (std::size_t t = 0; t < L; ++t) {
              if (training) {
                in[0][base + t] +=
                    scale * (g[base + t] - sum_g / n - (*xhat)[base + t] * sum_gh / n);
              } else {
                in[0][base + t] += scale * g[base + t];
              }
            }
          }
        }
      });
}

DiffArray avg_pool1d(const DiffArray& x, std::size_t factor) {
  if (x.ndim() != 3 || factor == 0 || x.dim(2) % factor != 0) {
    throw ShapeError("avg_pool1d", x.shape(), Shape{factor}, "length not divisible by factor");
  }
  const std::size_t rows = x.dim(0) * x.dim(1), L = x.dim(2), Lo = L / factor;
  const auto xv = x.values();
  std::vector<double> out(rows * Lo, 0.0);
  const double inv = 1.0 / static_cast<double>(factor);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t t = 0; t < L; ++t) out[r * Lo + t / factor] += xv[r * L + t] * inv;
  }
  return Tape::record("avg_pool1d", {x.dim(0), x.dim(1), Lo}, std::move(out), {&x},
                      [rows, L, Lo, factor, inv](std::span<const double> g,
                                                 std::span<GradSink> in) {
                        if (!in[0]) return;
                        for (std::size_t r = 0; r < rows; ++r) {
                          for (std::size_t t = 0; t < L; ++t) {
                            in[0][r * L + t] += g[r * Lo + t / factor] * inv;
                          }
                        }
                      });
}

DiffArray upsample1d(const DiffArray& x, std::size_t factor) {
  if (x.ndim() != 3 || factor == 0) {
    throw ShapeError("upsample1d", x.shape(), Shape{factor}, "expected (B,C,L)");
  }
  const std::size_t rows = x.dim(0) * x.dim(1), L = x.dim(2), Lo = L * factor;
  const auto xv = x.values();
  std::vector<double> out(rows * Lo);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t t = 0; t < Lo; ++t) out[r * Lo + t] = xv[r * L + t / factor];
  }
  return Tape::record("upsample1d", {x.dim(0), x.dim(1), Lo}, std::move(out), {&x},
                      [rows, L, Lo, factor](std::span<const double> g, std::span<GradSink> in) {
                        if (!in[0]) return;
                        for (std::size_t r = 0; r < rows; ++r) {
                          for (std::size_t t = 0; t < Lo; ++t) {
                            in[0][r * L + t / factor] += g[r * Lo + t];
                          }
                        }
                      });
}

}  // namespace arterialnet::ad
