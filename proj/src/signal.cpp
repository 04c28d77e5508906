#include "arterialnet/signal.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>
#include <numeric>
#include <set>

namespace arterialnet::signal {

Waveform::Waveform(std::vector<double> s, double r, std::string l)
    : samples(std::move(s)), rate(r), label(std::move(l)) {}

void Waveform::validate() const {
  if (!(rate > 0.0) || !std::isfinite(rate)) {
    throw SignalError("waveform '" + label + "': rate must be positive");
  }
  if (samples.size() < 2) {
    throw SignalError("waveform '" + label + "': needs at least two samples");
  }
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (!std::isfinite(samples[i])) {
      throw SignalError("waveform '" + label + "': non-finite sample at " + std::to_string(i));
    }
  }
}

namespace {

void check_band(const Waveform& w, double low, double high) {
  w.validate();
  if (!(low > 0.0 && low < high && high < w.rate / 2.0)) {
    throw SignalError("band [" + std::to_string(low) + ", " + std::to_string(high) +
                      "] Hz must satisfy 0 < low < high < Nyquist (" +
                      std::to_string(w.rate / 2.0) + " Hz)");
  }
}

// Odd reflection about the end samples, as used for zero-phase filtering.
double extended(std::span<const double> x, long i) {
  const long n = static_cast<long>(x.size());
  if (i < 0) {
    const long j = std::min(-i, n - 1);
    return 2.0 * x[0] - x[static_cast<std::size_t>(j)];
  }
  if (i >= n) {
    const long j = std::max(2 * (n - 1) - i, 0L);
    return 2.0 * x[static_cast<std::size_t>(n - 1)] - x[static_cast<std::size_t>(j)];
  }
  return x[static_cast<std::size_t>(i)];
}

std::vector<double> windowed_sinc_lowpass(double cutoff_norm, std::size_t order) {
  // cutoff_norm = fc / rate. Normalized to unit DC gain.
  std::vector<double> h(order + 1);
  const double mid = static_cast<double>(order) / 2.0;
  for (std::size_t n = 0; n <= order; ++n) {
    const double m = static_cast<double>(n) - mid;
    const double sinc = m == 0.0 ? 2.0 * cutoff_norm
                                 : std::sin(2.0 * std::numbers::pi * cutoff_norm * m) /
                                       (std::numbers::pi * m);
    const double hamming =
        0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) /
                               static_cast<double>(order));
    h[n] = sinc * hamming;
  }
  const double s = std::accumulate(h.begin(), h.end(), 0.0);
  for (auto& v : h) v /= s;
  return h;
}

struct Biquad {
  double b0, b1, b2, a1, a2;

  double dc_gain() const { return (b0 + b1 + b2) / (1.0 + a1 + a2); }

  // Transposed direct form II, started in the steady state for a constant
  // input equal to x[0].
  std::vector<double> run(const std::vector<double>& x) const {
    std::vector<double> y(x.size());
    const double g = dc_gain();
    double z1 = (g - b0) * x[0];
    double z2 = (b2 - a2 * g) * x[0];
    for (std::size_t n = 0; n < x.size(); ++n) {
      const double out = b0 * x[n] + z1;
      z1 = b1 * x[n] - a1 * out + z2;
      z2 = b2 * x[n] - a2 * out;
      y[n] = out;
    }
    return y;
  }
};

Biquad butterworth(double fc, double rate, bool highpass) {
  const double q = 1.0 / std::numbers::sqrt2;
  const double k = std::tan(std::numbers::pi * fc / rate);
  const double norm = 1.0 / (1.0 + k / q + k * k);
  Biquad bq{};
  if (highpass) {
    bq.b0 = norm;
    bq.b1 = -2.0 * norm;
    bq.b2 = norm;
  } else {
    bq.b0 = k * k * norm;
    bq.b1 = 2.0 * bq.b0;
    bq.b2 = bq.b0;
  }
  bq.a1 = 2.0 * (k * k - 1.0) * norm;
  bq.a2 = (1.0 - k / q + k * k) * norm;
  return bq;
}

}  // namespace

Waveform bandpass_fir(const Waveform& w, double low, double high) {
  check_band(w, low, high);
  auto order = static_cast<std::size_t>(std::lround(4.0 * w.rate / low));
  if (order % 2 == 1) ++order;
  if (order < 2) order = 2;
  const auto lp_high = windowed_sinc_lowpass(high / w.rate, order);
  const auto lp_low = windowed_sinc_lowpass(low / w.rate, order);
  std::vector<double> h(order + 1);
  for (std::size_t i = 0; i <= order; ++i) h[i] = lp_high[i] - lp_low[i];

  const long half = static_cast<long>(order / 2);
  const std::span<const double> x(w.samples);
  std::vector<double> y(x.size(), 0.0);
  for (std::size_t n = 0; n < x.size(); ++n) {
    double acc = 0.0;
    const long center = static_cast<long>(n) + half;
    for (std::size_t k = 0; k <= order; ++k) acc += h[k] * extended(x, center - static_cast<long>(k));
    y[n] = acc;
  }
  return Waveform(std::move(y), w.rate, w.label);
}

Waveform bandpass_iir_zero_phase(const Waveform& w, double low, double high) {
  check_band(w, low, high);
  const std::array<Biquad, 2> sections{butterworth(low, w.rate, true),
                                       butterworth(high, w.rate, false)};
  const long n = static_cast<long>(w.size());
  const long pad = std::min(n - 1, static_cast<long>(std::lround(3.0 * w.rate / low)));

  std::vector<double> ext(static_cast<std::size_t>(n + 2 * pad));
  for (long i = -pad; i < n + pad; ++i) ext[static_cast<std::size_t>(i + pad)] = extended(w.samples, i);

  for (const auto& s : sections) ext = s.run(ext);
  std::reverse(ext.begin(), ext.end());
  for (const auto& s : sections) ext = s.run(ext);
  std::reverse(ext.begin(), ext.end());

  std::vector<double> y(ext.begin() + pad, ext.begin() + pad + n);
  return Waveform(std::move(y), w.rate, w.label);
}

Alignment align_phase(const Waveform& reference, const Waveform& target, double max_lag) {
  reference.validate();
  target.validate();
  if (reference.rate != target.rate) throw SignalError("align_phase: sampling rates differ");
  const double duration = std::min(reference.duration(), target.duration());
  if (!(max_lag >= 0.0) || max_lag >= duration / 2.0) {
    throw SignalError("align_phase: max_lag must be below half the duration");
  }
  const long nr = static_cast<long>(reference.size());
  const long nt = static_cast<long>(target.size());
  const long kmax = static_cast<long>(std::floor(max_lag * reference.rate + 1e-9));
  const auto& r = reference.samples;
  const auto& t = target.samples;

  auto flat = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
  };
  if (flat(r) || flat(t)) throw SignalError("alignment undefined: zero-variance input");

  double best_corr = -2.0;
  long best_lag = 0;
  constexpr double kTie = 1e-12;
  for (long k = -kmax; k <= kmax; ++k) {
    const long i0 = std::max(0L, -k);
    const long i1 = std::min(nr, nt - k);
    if (i1 - i0 < 2) continue;
    double mr = 0.0, mt = 0.0;
    for (long i = i0; i < i1; ++i) {
      mr += r[static_cast<std::size_t>(i)];
      mt += t[static_cast<std::size_t>(i + k)];
    }
    const double cnt = static_cast<double>(i1 - i0);
    mr /= cnt;
    mt /= cnt;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (long i = i0; i < i1; ++i) {
      const double a = r[static_cast<std::size_t>(i)] - mr;
      const double b = t[static_cast<std::size_t>(i + k)] - mt;
      sxy += a * b;
      sxx += a * a;
      syy += b * b;
    }
    if (sxx <= 0.0 || syy <= 0.0) continue;
    const double corr = sxy / std::sqrt(sxx * syy);
    const bool better = corr > best_corr + kTie;
    const bool tie = std::abs(corr - best_corr) <= kTie &&
                     (std::abs(k) < std::abs(best_lag) ||
                      (std::abs(k) == std::abs(best_lag) && k > best_lag));
    if (better || tie) {
      if (better) best_corr = corr;
      best_lag = k;
    }
  }
  if (best_corr < -1.5) throw SignalError("alignment undefined: no overlapping lag");

  const long i0 = std::max(0L, -best_lag);
  const long i1 = std::min(nr, nt - best_lag);
  Alignment out;
  out.lag_samples = best_lag;
  out.lag_seconds = static_cast<double>(best_lag) / reference.rate;
  out.correlation = best_corr;
  out.reference = Waveform(std::vector<double>(r.begin() + i0, r.begin() + i1), reference.rate,
                           reference.label);
  out.target = Waveform(std::vector<double>(t.begin() + i0 + best_lag, t.begin() + i1 + best_lag),
                        target.rate, target.label);
  return out;
}

Waveform shift_and_trim(const Waveform& w, long lag_samples, std::size_t length) {
  const long start = std::max(0L, lag_samples);
  if (start + static_cast<long>(length) > static_cast<long>(w.size())) {
    throw SignalError("shift_and_trim: channel '" + w.label + "' too short for the shift");
  }
  return Waveform(std::vector<double>(w.samples.begin() + start,
                                      w.samples.begin() + start + static_cast<long>(length)),
                  w.rate, w.label);
}

CardiacCycle cycle_fiducials(std::span<const double> x, std::size_t start, std::size_t end) {
  if (start >= end || end > x.size()) throw SignalError("cycle_fiducials: empty or out of range");
  CardiacCycle c;
  c.start_idx = start;
  c.end_idx = end;
  c.dbp_idx = start;
  c.dbp_value = x[start];
  c.sbp_idx = start;
  for (std::size_t i = start + 1; i < end; ++i) {
    if (x[i] > x[c.sbp_idx]) c.sbp_idx = i;
  }
  c.sbp_value = x[c.sbp_idx];
  return c;
}

std::vector<CardiacCycle> segment_cycles(const Waveform& w) {
  w.validate();
  const auto& x = w.samples;
  const std::size_t n = x.size();
  if (n < 3) throw SignalError("no cycles");

  std::vector<double> d(n - 1);
  for (std::size_t i = 0; i + 1 < n; ++i) d[i] = x[i + 1] - x[i];

  std::vector<double> pos;
  for (double v : d) {
    if (v > 0.0) pos.push_back(v);
  }
  if (pos.empty()) throw SignalError("no cycles");
  const std::size_t q = std::min(pos.size() - 1, static_cast<std::size_t>(0.98 * pos.size()));
  std::nth_element(pos.begin(), pos.begin() + static_cast<long>(q), pos.end());
  const double threshold = 0.4 * pos[q];

  // Candidate upstrokes: local maxima of the slope above threshold.
  std::vector<std::size_t> cand;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double left = i > 0 ? d[i - 1] : -INFINITY;
    const double right = i + 1 < d.size() ? d[i + 1] : -INFINITY;
    if (d[i] >= threshold && d[i] >= left && d[i] > right) cand.push_back(i);
  }
  std::stable_sort(cand.begin(), cand.end(),
                   [&](std::size_t a, std::size_t b) { return d[a] > d[b]; });
  const auto refractory = static_cast<std::size_t>(std::lround(kRefractorySeconds * w.rate));
  std::set<std::size_t> upstrokes;
  for (auto i : cand) {
    auto it = upstrokes.lower_bound(i);
    if (it != upstrokes.end() && *it - i < refractory) continue;
    if (it != upstrokes.begin() && i - *std::prev(it) < refractory) continue;
    upstrokes.insert(i);
  }

  const auto lookback = static_cast<std::size_t>(std::lround(2.0 * w.rate));
  std::vector<std::size_t> feet;
  std::size_t prev = 0;
  bool have_prev = false;
  for (auto u : upstrokes) {
    std::size_t lo = have_prev ? prev + 1 : (u > lookback ? u - lookback : 0);
    if (have_prev && u > lookback && u - lookback > lo) lo = u - lookback;
    std::size_t foot = lo;
    for (std::size_t i = lo; i <= u; ++i) {
      if (x[i] < x[foot]) foot = i;
    }
    if (feet.empty() || foot > feet.back()) feet.push_back(foot);
    prev = u;
    have_prev = true;
  }
  if (feet.size() < 2) throw SignalError("no cycles");

  std::vector<CardiacCycle> cycles;
  cycles.reserve(feet.size() - 1);
  for (std::size_t k = 0; k + 1 < feet.size(); ++k) {
    cycles.push_back(cycle_fiducials(x, feet[k], feet[k + 1]));
  }
  return cycles;
}

namespace {

bool is_ecg(const std::string& label) {
  std::string l = label;
  std::transform(l.begin(), l.end(), l.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return l.find("ecg") != std::string::npos;
}

}  // namespace

PttResult compute_ptt(const Waveform& proximal, const std::vector<CardiacCycle>& proximal_cycles,
                      const Waveform& distal, const std::vector<CardiacCycle>& distal_cycles) {
  if (proximal.rate != distal.rate) throw SignalError("compute_ptt: sampling rates differ");
  const double rate = proximal.rate;
  const bool r_peak = is_ecg(proximal.label);

  std::vector<std::size_t> distal_feet;
  for (const auto& c : distal_cycles) distal_feet.push_back(c.start_idx);
  if (!distal_cycles.empty()) distal_feet.push_back(distal_cycles.back().end_idx);

  const auto window = static_cast<std::size_t>(std::floor(kPairingSeconds * rate));
  PttResult out;
  for (const auto& c : proximal_cycles) {
    const std::size_t p = r_peak ? c.sbp_idx : c.start_idx;
    auto it = std::lower_bound(distal_feet.begin(), distal_feet.end(), p);
    if (it == distal_feet.end() || *it - p > window) continue;
    out.ptt.push_back(static_cast<double>(*it - p) / rate);
    out.proximal_idx.push_back(p);
    out.distal_idx.push_back(*it);
  }
  if (out.ptt.empty()) throw SignalError("compute_ptt: no matched cycles");
  return out;
}

namespace {

std::vector<double> gradient(std::span<const double> x, double rate) {
  const std::size_t n = x.size();
  std::vector<double> g(n);
  g[0] = (x[1] - x[0]) * rate;
  g[n - 1] = (x[n - 1] - x[n - 2]) * rate;
  for (std::size_t i = 1; i + 1 < n; ++i) g[i] = (x[i + 1] - x[i - 1]) * 0.5 * rate;
  return g;
}

}  // namespace

std::array<std::vector<double>, 3> expand_gradients(std::span<const double> x, double rate) {
  if (x.size() < 3) throw SignalError("expand_gradients: needs at least three samples");
  auto d1 = gradient(x, rate);
  auto d2 = gradient(d1, rate);
  return {std::vector<double>(x.begin(), x.end()), std::move(d1), std::move(d2)};
}

std::array<std::vector<double>, 3> expand_gradients(const Waveform& w) {
  w.validate();
  return expand_gradients(w.samples, w.rate);
}

MorphologyVector morphology_features(std::span<const double> x, double rate) {
  if (x.size() < 5) throw SignalError("morphology_features: cycle needs at least 5 samples");
  if (!(rate > 0.0)) throw SignalError("morphology_features: rate must be positive");
  const std::size_t n = x.size();
  const double dt = 1.0 / rate;
  MorphologyVector m;
  auto& f = m.values;

  const double duration = static_cast<double>(n) * dt;
  const double area = std::accumulate(x.begin(), x.end(), 0.0) * dt;
  f[0] = duration;
  f[4] = area;

  const double foot = x[0];
  const std::size_t peak =
      static_cast<std::size_t>(std::max_element(x.begin(), x.end()) - x.begin());
  const double amplitude = x[peak] - foot;
  if (!(amplitude > 0.0)) {
    m.degenerate = true;
    return m;
  }
  f[1] = amplitude;
  f[2] = static_cast<double>(peak) * dt;
  f[3] = static_cast<double>(n - peak) * dt;
  f[5] = std::accumulate(x.begin(), x.begin() + static_cast<long>(peak), 0.0) * dt;
  f[6] = area - f[5];

  double up = 0.0, down = 0.0;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const double s = (x[i + 1] - x[i]) * rate;
    up = std::max(up, s);
    down = std::max(down, -s);
  }
  f[7] = up;
  f[8] = down;
  f[9] = f[2] / duration;

  // Width at half amplitude around the peak, with linearly interpolated crossings.
  const double level = foot + 0.5 * amplitude;
  double left = 0.0;
  {
    std::size_t i = peak;
    while (i > 0 && x[i - 1] >= level) --i;
    left = static_cast<double>(i);
    if (i > 0) left -= (x[i] - level) / (x[i] - x[i - 1]);
  }
  double right = static_cast<double>(n - 1);
  {
    std::size_t i = peak;
    while (i + 1 < n && x[i + 1] >= level) ++i;
    right = static_cast<double>(i);
    if (i + 1 < n) right += (x[i] - level) / (x[i] - x[i + 1]);
  }
  f[10] = (right - left) * dt;
  return m;
}

std::vector<double> resample_linear(std::span<const double> x, std::size_t out_len) {
  if (x.empty() || out_len == 0) throw SignalError("resample_linear: empty input or output");
  std::vector<double> y(out_len);
  if (out_len == 1 || x.size() == 1) {
    std::fill(y.begin(), y.end(), x[0]);
    return y;
  }
  const double step = static_cast<double>(x.size() - 1) / static_cast<double>(out_len - 1);
  for (std::size_t m = 0; m < out_len; ++m) {
    const double pos = static_cast<double>(m) * step;
    auto i = static_cast<std::size_t>(pos);
    if (i >= x.size() - 1) {
      y[m] = x.back();
      continue;
    }
    const double frac = pos - static_cast<double>(i);
    y[m] = x[i] + frac * (x[i + 1] - x[i]);
  }
  return y;
}

double resampled_position(double idx, std::size_t native_len, std::size_t out_len) {
  if (native_len < 2) return 0.0;
  return idx * static_cast<double>(out_len - 1) / static_cast<double>(native_len - 1);
}

}  // namespace arterialnet::signal
