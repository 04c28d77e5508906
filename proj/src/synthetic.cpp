#include "arterialnet/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

namespace arterialnet::synth {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kUpstroke = 0.3;    // fraction of the period
constexpr double kDecayTau = 0.25;   // in periods
constexpr double kNotchCenter = 0.5;
constexpr double kNotchHalfWidth = 0.05;
constexpr double kNotchHeight = 0.1;
constexpr double kPreroll = 3.0;     // s of beats generated before t = 0
constexpr double kDriftHz = 0.05;

// 0 at the foot, 1 at the systolic peak, back to 0 at the end of the period.
double beat_template(double phase) {
  if (phase < kUpstroke) return 0.5 * (1.0 - std::cos(kPi * phase / kUpstroke));
  const double tail = std::exp(-(1.0 - kUpstroke) / kDecayTau);
  double v = (std::exp(-(phase - kUpstroke) / kDecayTau) - tail) / (1.0 - tail);
  const double d = phase - kNotchCenter;
  if (std::abs(d) < kNotchHalfWidth) {
    v += kNotchHeight * 0.5 * (1.0 + std::cos(kPi * d / kNotchHalfWidth));
  }
  return v;
}

struct Beat {
  double onset, period, sbp, dbp;
};

class AbpModel {
 public:
  AbpModel(const SubjectProfile& p, double duration, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    double t = -kPreroll;
    while (t < duration + 1.0) {
      const double period = (1.0 / p.heart_rate) * (1.0 + p.hrv * u(rng));
      const double level = pressor_level(std::clamp(t / duration, 0.0, 1.0));
      beats_.push_back({t, period, p.sbp_base + p.pressor_rise * level,
                        p.dbp_base + 0.5 * p.pressor_rise * level});
      t += period;
    }
  }

  double at(double t) const {
    auto it = std::upper_bound(beats_.begin(), beats_.end(), t,
                               [](double v, const Beat& b) { return v < b.onset; });
    const Beat& b = it == beats_.begin() ? beats_.front() : *std::prev(it);
    const double phase = std::clamp((t - b.onset) / b.period, 0.0, 1.0);
    return b.dbp + (b.sbp - b.dbp) * beat_template(phase);
  }

  const std::vector<Beat>& beats() const { return beats_; }

 private:
  std::vector<Beat> beats_;
};

}  // namespace

void SubjectProfile::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("subject profile: " + m); };
  if (!(heart_rate >= 0.7 && heart_rate <= 3.0)) fail("heart_rate must lie in [0.7, 3] Hz");
  if (!(dbp_base > 0.0 && sbp_base > dbp_base)) fail("need sbp_base > dbp_base > 0");
  if (!(pressor_rise >= 0.0)) fail("pressor_rise must be >= 0");
  if (!(ptt_base >= 0.0)) fail("ptt_base must be >= 0");
  if (!(gain != 0.0 && std::isfinite(gain))) fail("gain must be non-zero");
  if (!(delay >= 0.0)) fail("delay must be >= 0");
  if (!(damping >= 0.0)) fail("damping must be >= 0");
  if (!(drift >= 0.0 && noise >= 0.0)) fail("drift and noise must be >= 0");
  if (!(hrv >= 0.0 && hrv < 0.25)) fail("hrv must lie in [0, 0.25)");
}

double pressor_level(double u) {
  constexpr double rest = 0.5 / 8, ramp = 3.0 / 8, elevated = 1.0 / 8;
  if (u < rest) return 0.0;
  if (u < rest + ramp) return 0.5 * (1.0 - std::cos(kPi * (u - rest) / ramp));
  if (u < rest + ramp + elevated) return 1.0;
  const double start = rest + ramp + elevated;
  return 0.5 * (1.0 + std::cos(kPi * std::min(1.0, (u - start) / (1.0 - start))));
}

SyntheticSubject generate_subject(const SubjectProfile& profile, double duration, double rate,
                                  std::uint64_t seed, const std::string& id) {
  profile.validate();
  if (!(rate > 0.0)) throw std::invalid_argument("generate_subject: rate must be positive");
  if (!(duration * profile.heart_rate >= 2.0) || duration * rate < 2.0) {
    throw std::invalid_argument("generate_subject: duration must cover at least two cycles");
  }
  std::mt19937_64 rng(seed);
  const AbpModel abp(profile, duration, rng);
  const auto n = static_cast<std::size_t>(std::floor(duration * rate));
  const auto pre = static_cast<std::size_t>(std::floor((kPreroll - 1.0) * rate));
  auto time = [rate](long i) { return static_cast<double>(i) / rate; };

  SyntheticSubject out;
  out.profile = profile;
  out.raw.subject_id = id;
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = abp.at(time(static_cast<long>(i)));
  out.raw.abp = signal::Waveform(y, rate, "abp");

  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * kPi);
  auto make_channel = [&](auto extra_delay, const std::string& label) {
    const double drift_phase = phase_dist(rng);
    const double alpha = profile.damping > 0.0 ? 1.0 - std::exp(-1.0 / (rate * profile.damping)) : 1.0;
    std::vector<double> x(n);
    double state = 0.0;
    for (long i = -static_cast<long>(pre); i < static_cast<long>(n); ++i) {
      const double t = time(i);
      const double src = abp.at(t - profile.delay - extra_delay(t));
      state = i == -static_cast<long>(pre) || alpha == 1.0 ? src : state + alpha * (src - state);
      if (i < 0) continue;
      double v = profile.gain * state;
      if (profile.drift > 0.0) v += profile.drift * std::sin(2.0 * kPi * kDriftHz * t + drift_phase);
      if (profile.noise > 0.0) v += profile.noise * gauss(rng);
      x[static_cast<std::size_t>(i)] = v;
    }
    return signal::Waveform(std::move(x), rate, label);
  };
  out.raw.channels.push_back(make_channel([](double) { return 0.0; }, "ppg_proximal"));
  if (profile.distal_channel) {
    out.raw.channels.push_back(make_channel(
        [&](double t) {
          return profile.ptt_base * (1.0 - 0.25 * pressor_level(std::clamp(t / duration, 0.0, 1.0)));
        },
        "ppg_distal"));
  }

  for (const auto& b : abp.beats()) {
    if (b.onset < 0.0 || b.onset + b.period > time(static_cast<long>(n) - 1)) continue;
    const auto lo = static_cast<std::size_t>(std::ceil(b.onset * rate));
    const auto hi = std::min(n, static_cast<std::size_t>(std::ceil((b.onset + b.period) * rate)));
    BeatTruth t;
    t.onset = b.onset;
    t.sbp_commanded = b.sbp;
    t.dbp_commanded = b.dbp;
    t.peak_idx = lo;
    for (std::size_t i = lo; i < hi; ++i) {
      if (y[i] > y[t.peak_idx]) t.peak_idx = i;
    }
    t.sbp_sampled = y[t.peak_idx];
    out.beats.push_back(t);
  }
  return out;
}

std::vector<SyntheticSubject> generate_cohort(std::size_t n, const CohortSpec& spec,
                                              double duration, double rate, std::uint64_t seed) {
  if (n < 2) throw std::invalid_argument("generate_cohort: cohort needs at least 2 subjects");
  if (!(spec.variability >= 0.0)) throw std::invalid_argument("generate_cohort: variability < 0");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double v = spec.variability;
  std::vector<SyntheticSubject> out;
  for (std::size_t i = 0; i < n; ++i) {
    SubjectProfile p = spec.base;
    p.heart_rate = std::clamp(p.heart_rate + v * spec.spread.heart_rate * u(rng), 0.7, 3.0);
    p.sbp_base += v * spec.spread.sbp * u(rng);
    p.dbp_base += v * spec.spread.dbp * u(rng);
    p.dbp_base = std::clamp(p.dbp_base, 1.0, p.sbp_base - 10.0);
    p.pressor_rise = std::max(0.0, p.pressor_rise + v * spec.spread.pressor_rise * u(rng));
    p.ptt_base = std::max(0.0, p.ptt_base + v * spec.spread.ptt * u(rng));
    p.gain += v * spec.spread.gain * u(rng);
    p.delay = std::max(0.0, p.delay + v * spec.spread.delay * u(rng));
    p.damping = std::max(0.0, p.damping + v * spec.spread.damping * u(rng));
    // Without variability every subject also shares the noise realization.
    const std::uint64_t subject_seed = v == 0.0 ? seed : seed + 1000003ULL * (i + 1);
    out.push_back(generate_subject(p, duration, rate, subject_seed, "S" + std::to_string(i + 1)));
  }
  return out;
}

void write_subject(const SyntheticSubject& s, const std::filesystem::path& dir) {
  data::write_raw_subject(s.raw, dir);
  std::ostringstream beats;
  beats << "onset_s,peak_idx,sbp_commanded,dbp_commanded,sbp_sampled\n";
  for (const auto& b : s.beats) {
    beats << io::format_double(b.onset) << ',' << b.peak_idx << ','
          << io::format_double(b.sbp_commanded) << ',' << io::format_double(b.dbp_commanded) << ','
          << io::format_double(b.sbp_sampled) << '\n';
  }
  io::write_text(dir / "beats.txt", beats.str());
  const auto& p = s.profile;
  std::ostringstream prof;
  prof << "heart_rate=" << io::format_double(p.heart_rate) << '\n'
       << "sbp_base=" << io::format_double(p.sbp_base) << '\n'
       << "dbp_base=" << io::format_double(p.dbp_base) << '\n'
       << "pressor_rise=" << io::format_double(p.pressor_rise) << '\n'
       << "ptt_base=" << io::format_double(p.ptt_base) << '\n'
       << "gain=" << io::format_double(p.gain) << '\n'
       << "delay=" << io::format_double(p.delay) << '\n'
       << "damping=" << io::format_double(p.damping) << '\n'
       << "drift=" << io::format_double(p.drift) << '\n'
       << "noise=" << io::format_double(p.noise) << '\n'
       << "hrv=" << io::format_double(p.hrv) << '\n';
  io::write_text(dir / "profile.txt", prof.str());
}

}  // namespace arterialnet::synth
