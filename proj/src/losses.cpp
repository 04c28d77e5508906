#include "arterialnet/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>

namespace arterialnet::losses {

using ad::Shape;
using ad::ShapeError;

void LossConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& rule) {
    throw std::invalid_argument("loss config: " + field + " " + rule);
  };
  if (!(alpha >= 0.0 && alpha <= 1.0)) fail("alpha", "must lie in [0, 1]");
  if (!(c > 0.0)) fail("c", "must be positive");
  if (!(gamma > 0.0)) fail("gamma", "must be positive");
  if (!(phi_w >= 0.0)) fail("phi_w", "must be non-negative");
  if (!(phi_r >= 0.0)) fail("phi_r", "must be non-negative");
  if (!(phi_a >= 0.0)) fail("phi_a", "must be non-negative");
  if (!(omega >= 0.0) || !std::isfinite(omega)) fail("omega", "must be finite and >= 0");
}

namespace {

DiffArray as_row(const DiffArray& x) { return ad::reshape(x, {1, x.size()}); }

DiffArray first(const DiffArray& rows) { return ad::reshape(rows, {}); }

void require_rows(std::string_view op, const DiffArray& a) {
  if (a.ndim() != 2 || a.dim(1) == 0) throw ShapeError(op, a.shape(), {}, "expected (B, L)");
}

void require_same(std::string_view op, const DiffArray& a, const DiffArray& b) {
  require_rows(op, a);
  if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

}  // namespace

DiffArray rmse_rows(const DiffArray& yhat, const DiffArray& y) {
  require_same("rmse", yhat, y);
  auto d = yhat - y;
  return ad::sqrt(ad::mean(d * d, 1));
}

DiffArray stat_features_rows(const DiffArray& y) {
  require_rows("stat_features", y);
  const std::size_t rows = y.dim(0);
  const std::size_t n = y.dim(1);
  if (n < 2) throw std::invalid_argument("stat_features: need at least 2 samples per row");
  const auto x = y.values();
  const double nd = static_cast<double>(n);

  struct RowStats {
    double mu, m2, m3;
    std::size_t argmin, argmax;
  };
  std::vector<RowStats> stats(rows);
  std::vector<double> out(rows * kStatCount);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* v = x.data() + r * n;
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += v[i];
    mu /= nd;
    double m2 = 0.0, m3 = 0.0;
    std::size_t amin = 0, amax = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = v[i] - mu;
      m2 += d * d;
      m3 += d * d * d;
      if (v[i] < v[amin]) amin = i;
      if (v[i] > v[amax]) amax = i;
    }
    m2 /= nd;
    m3 /= nd;
    stats[r] = {mu, m2, m3, amin, amax};
    double* o = out.data() + r * kStatCount;
    o[kMean] = mu;
    o[kStd] = std::sqrt(m2);
    o[kSkew] = m2 > 0.0 ? m3 / std::pow(m2, 1.5) : 0.0;
    o[kMin] = v[amin];
    o[kMax] = v[amax];
  }

  return ad::Tape::record(
      "stat_features", {rows, kStatCount}, std::move(out), {&y},
      [y, stats, n, nd](std::span<const double> g, std::span<ad::GradSink> in) {
        if (!in[0]) return;
        const auto x = y.values();
        for (std::size_t r = 0; r < stats.size(); ++r) {
          const auto& s = stats[r];
          const double* v = x.data() + r * n;
          const double* go = g.data() + r * kStatCount;
          const double sd = std::sqrt(s.m2);
          double skew_m2 = 0.0, skew_m3 = 0.0;
          if (s.m2 > 0.0) {
            skew_m3 = 1.0 / std::pow(s.m2, 1.5);
            skew_m2 = -1.5 * s.m3 / std::pow(s.m2, 2.5);
          }
          for (std::size_t i = 0; i < n; ++i) {
            const double d = v[i] - s.mu;
            double acc = go[kMean] / nd;
            if (sd > 0.0) acc += go[kStd] * d / (nd * sd);
            const double dm2 = 2.0 * d / nd;
            const double dm3 = 3.0 * (d * d - s.m2) / nd;
            acc += go[kSkew] * (skew_m3 * dm3 + skew_m2 * dm2);
            in[0][r * n + i] += acc;
          }
          in[0][r * n + s.argmin] += go[kMin];
          in[0][r * n + s.argmax] += go[kMax];
        }
      });
}

DiffArray waveform_loss_rows(const DiffArray& yhat, const DiffArray& y, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw std::invalid_argument("waveform_loss: alpha must lie in [0, 1]");
  }
  auto recon = rmse_rows(yhat, y);
  if (alpha == 0.0) return recon;
  auto penalty = rmse_rows(stat_features_rows(yhat), stat_features_rows(y));
  return (1.0 - alpha) * recon + alpha * penalty;
}

DiffArray correlation_loss_rows(const DiffArray& yhat, const DiffArray& y, double c) {
  require_same("correlation_loss", yhat, y);
  const std::size_t n = y.dim(1);
  for (const auto* arr : {&yhat, &y}) {
    const auto v = arr->values();
    for (std::size_t r = 0; r < arr->dim(0); ++r) {
      const auto row = v.subspan(r * n, n);
      if (std::all_of(row.begin(), row.end(), [&](double e) { return e == row[0]; })) {
        throw std::domain_error("correlation undefined: zero-variance input in row " +
                                std::to_string(r));
      }
    }
  }
  auto a = yhat - ad::mean(yhat, 1, true);
  auto b = y - ad::mean(y, 1, true);
  auto r = ad::sum(a * b, 1) / ad::sqrt(ad::sum(a * a, 1) * ad::sum(b * b, 1));
  return 1.0 / (2.0 * (r + 1.0) + c);
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// R is (n+1) x (m+1), row-major, R[0][0] = 0 and the other borders +inf.
double softdtw_forward(const double* x, std::size_t n, const double* y, std::size_t m,
                       double gamma, std::vector<double>& R) {
  const std::size_t w = m + 1;
  R.assign((n + 1) * w, kInf);
  R[0] = 0.0;
  const double inv = 1.0 / gamma;
  for (std::size_t i = 1; i <= n; ++i) {
    const double xi = x[i - 1];
    for (std::size_t j = 1; j <= m; ++j) {
      const double a = -R[(i - 1) * w + (j - 1)] * inv;
      const double b = -R[(i - 1) * w + j] * inv;
      const double c = -R[i * w + (j - 1)] * inv;
      double lse;
      if (a >= b && a >= c) {
        lse = a + std::log(1.0 + std::exp(b - a) + std::exp(c - a));
      } else if (b >= c) {
        lse = b + std::log(1.0 + std::exp(a - b) + std::exp(c - b));
      } else {
        lse = c + std::log(1.0 + std::exp(a - c) + std::exp(b - c));
      }
      const double d = xi - y[j - 1];
      R[i * w + j] = d * d - gamma * lse;
    }
  }
  return R[n * w + m];
}

// Expected alignment matrix E (n x m), the gradient of R[n][m] w.r.t. the
// local costs.
void softdtw_backward(const double* x, std::size_t n, const double* y, std::size_t m,
                      double gamma, const std::vector<double>& R, std::vector<double>& E) {
  const std::size_t w = m + 2;
  // Padded copies indexed 0..n+1 / 0..m+1.
  std::vector<double> Rp((n + 2) * w, -kInf), Ep((n + 2) * w, 0.0), Dp((n + 2) * w, 0.0);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      Rp[i * w + j] = R[i * (m + 1) + j];
      const double d = x[i - 1] - y[j - 1];
      Dp[i * w + j] = d * d;
    }
  }
  Rp[(n + 1) * w + (m + 1)] = R[n * (m + 1) + m];
  Ep[(n + 1) * w + (m + 1)] = 1.0;
  for (std::size_t j = m; j >= 1; --j) {
    for (std::size_t i = n; i >= 1; --i) {
      const double r = Rp[i * w + j];
      const double a = std::exp((Rp[(i + 1) * w + j] - r - Dp[(i + 1) * w + j]) / gamma);
      const double b = std::exp((Rp[i * w + j + 1] - r - Dp[i * w + j + 1]) / gamma);
      const double c =
          std::exp((Rp[(i + 1) * w + j + 1] - r - Dp[(i + 1) * w + j + 1]) / gamma);
      Ep[i * w + j] = Ep[(i + 1) * w + j] * a + Ep[i * w + j + 1] * b +
                      Ep[(i + 1) * w + j + 1] * c;
    }
  }
  E.assign(n * m, 0.0);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) E[(i - 1) * m + (j - 1)] = Ep[i * w + j];
  }
}

}  // namespace

DiffArray softdtw_loss_rows(const DiffArray& yhat, const DiffArray& y, double gamma) {
  if (!(gamma > 0.0)) throw std::invalid_argument("softdtw_loss: gamma must be positive");
  require_rows("softdtw_loss", yhat);
  require_rows("softdtw_loss", y);
  if (yhat.dim(0) != y.dim(0)) throw ShapeError("softdtw_loss", yhat.shape(), y.shape());
  const std::size_t rows = y.dim(0), n = yhat.dim(1), m = y.dim(1);

  std::vector<double> out(rows);
  auto tables = std::make_shared<std::vector<std::vector<double>>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    out[r] = softdtw_forward(yhat.values().data() + r * n, n, y.values().data() + r * m, m,
                             gamma, (*tables)[r]);
  }
  return ad::Tape::record(
      "softdtw", {rows}, std::move(out), {&yhat, &y},
      [yhat, y, rows, n, m, gamma, tables](std::span<const double> g, std::span<ad::GradSink> in) {
        std::vector<double> E;
        for (std::size_t r = 0; r < rows; ++r) {
          const double* x = yhat.values().data() + r * n;
          const double* z = y.values().data() + r * m;
          softdtw_backward(x, n, z, m, gamma, (*tables)[r], E);
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < m; ++j) {
              const double e = g[r] * E[i * m + j] * 2.0 * (x[i] - z[j]);
              if (in[0]) in[0][r * n + i] += e;
              if (in[1]) in[1][r * m + j] -= e;
            }
          }
        }
      });
}

HybridLossRows hybrid_loss_rows(const DiffArray& yhat, const DiffArray& y,
                                const LossConfig& config) {
  config.validate();
  auto lw = waveform_loss_rows(yhat, y, config.alpha);
  auto lr = correlation_loss_rows(yhat, y, config.c);
  auto la = softdtw_loss_rows(yhat, y, config.gamma);
  HybridLossRows out;
  out.total = config.phi_w * lw + config.phi_r * lr + config.phi_a * la;
  out.lambda_w.assign(lw.values().begin(), lw.values().end());
  out.lambda_r.assign(lr.values().begin(), lr.values().end());
  out.lambda_a.assign(la.values().begin(), la.values().end());
  return out;
}

DiffArray rmse(const DiffArray& yhat, const DiffArray& y) {
  if (yhat.shape() != y.shape()) throw ShapeError("rmse", yhat.shape(), y.shape());
  if (y.size() == 0) throw std::invalid_argument("rmse: empty input");
  return first(rmse_rows(as_row(yhat), as_row(y)));
}

DiffArray stat_features(const DiffArray& y) {
  return ad::reshape(stat_features_rows(as_row(y)), {kStatCount});
}

DiffArray waveform_loss(const DiffArray& yhat, const DiffArray& y, double alpha) {
  if (yhat.shape() != y.shape()) throw ShapeError("waveform_loss", yhat.shape(), y.shape());
  return first(waveform_loss_rows(as_row(yhat), as_row(y), alpha));
}

DiffArray correlation_loss(const DiffArray& yhat, const DiffArray& y, double c) {
  if (yhat.shape() != y.shape()) throw ShapeError("correlation_loss", yhat.shape(), y.shape());
  return first(correlation_loss_rows(as_row(yhat), as_row(y), c));
}

DiffArray softdtw_loss(const DiffArray& yhat, const DiffArray& y, double gamma) {
  return first(softdtw_loss_rows(as_row(yhat), as_row(y), gamma));
}

HybridLoss hybrid_loss(const DiffArray& yhat, const DiffArray& y, const LossConfig& config) {
  if (yhat.shape() != y.shape()) throw ShapeError("hybrid_loss", yhat.shape(), y.shape());
  auto rows = hybrid_loss_rows(as_row(yhat), as_row(y), config);
  HybridLoss out;
  out.total = first(rows.total);
  out.lambda_w = rows.lambda_w[0];
  out.lambda_r = rows.lambda_r[0];
  out.lambda_a = rows.lambda_a[0];
  out.weighted_w = config.phi_w * out.lambda_w;
  out.weighted_r = config.phi_r * out.lambda_r;
  out.weighted_a = config.phi_a * out.lambda_a;
  return out;
}

DiffArray cohort_regularized_loss(const DiffArray& losses, double omega) {
  if (losses.size() == 0) throw std::invalid_argument("cohort_regularized_loss: empty list");
  if (!(omega >= 0.0)) throw std::invalid_argument("cohort_regularized_loss: omega < 0");
  auto flat = ad::reshape(losses, {losses.size()});
  auto dev = flat - ad::mean(flat);
  auto total = ad::sum(flat);
  if (omega == 0.0) return total;
  return omega * ad::sqrt(ad::mean(dev * dev)) + total;
}

DiffArray cohort_regularized_loss(const std::vector<DiffArray>& losses, double omega) {
  if (losses.empty()) throw std::invalid_argument("cohort_regularized_loss: empty list");
  std::vector<DiffArray> parts;
  parts.reserve(losses.size());
  for (const auto& l : losses) parts.push_back(ad::reshape(l, {1}));
  return cohort_regularized_loss(ad::concat(parts, 0), omega);
}

}  // namespace arterialnet::losses
