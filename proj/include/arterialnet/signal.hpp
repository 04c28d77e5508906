// Biosignal preprocessing: band-pass filtering, phase alignment, cardiac
// cycle segmentation, pulse transit time and per-cycle features.
#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace arterialnet::signal {

class SignalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One uniformly sampled channel. ABP is in mmHg, pulsatile channels are in
// arbitrary units.
struct Waveform {
  std::vector<double> samples;
  double rate = 0.0;  // Hz
  std::string label;

  Waveform() = default;
  Waveform(std::vector<double> samples, double rate, std::string label = {});

  std::size_t size() const { return samples.size(); }
  double duration() const { return static_cast<double>(samples.size()) / rate; }
  // Throws SignalError unless rate > 0, at least two samples, all finite.
  void validate() const;
};

// Foot-to-foot span [start_idx, end_idx) with systolic and diastolic fiducials.
struct CardiacCycle {
  std::size_t start_idx = 0;
  std::size_t end_idx = 0;
  std::size_t sbp_idx = 0;
  std::size_t dbp_idx = 0;
  double sbp_value = 0.0;
  double dbp_value = 0.0;

  std::size_t length() const { return end_idx - start_idx; }
};

// Linear-phase windowed-sinc (Hamming) band-pass, 4*rate/low taps rounded to an
// even order, applied with group-delay compensation. Output length equals input.
Waveform bandpass_fir(const Waveform& w, double low, double high);

// Second-order Butterworth high-pass at `low` cascaded with a second-order
// Butterworth low-pass at `high`, run forward then backward (zero phase).
Waveform bandpass_iir_zero_phase(const Waveform& w, double low, double high);

struct Alignment {
  Waveform reference;  // truncated to the overlap
  Waveform target;     // shifted and truncated to the overlap
  long lag_samples = 0;
  double lag_seconds = 0.0;
  double correlation = 0.0;
};

// Finds the lag in [-max_lag, max_lag] seconds maximizing the normalized
// cross-correlation between reference[i] and target[i + lag]. Positive lag
// means the target trails the reference. Near-ties (within 1e-12) resolve to
// the smallest |lag|, then to the positive lag.
Alignment align_phase(const Waveform& reference, const Waveform& target, double max_lag);

// Same lag applied to an arbitrary channel (used to keep multi-channel inputs
// in register with the channel that was aligned).
Waveform shift_and_trim(const Waveform& w, long lag_samples, std::size_t length);

inline constexpr double kRefractorySeconds = 0.3;

// Feet are the minima preceding each steepest upstroke, separated by at least
// kRefractorySeconds. Each cycle runs foot to next foot; sbp is the cycle
// maximum, dbp the value at the foot. Throws SignalError("no cycles") when
// fewer than two feet are found.
std::vector<CardiacCycle> segment_cycles(const Waveform& w);

// Fiducials for an already delimited cycle [start, end).
CardiacCycle cycle_fiducials(std::span<const double> samples, std::size_t start,
                             std::size_t end);

struct PttResult {
  std::vector<double> ptt;                   // seconds, one per matched cycle
  std::vector<std::size_t> proximal_idx;     // fiducial sample of each match
  std::vector<std::size_t> distal_idx;       // distal foot sample of each match
};

inline constexpr double kPairingSeconds = 0.5;

// PTT = distal foot time - proximal fiducial time. The proximal fiducial is
// the R-peak (cycle maximum) when the proximal label names an ECG, otherwise
// the foot. Each proximal fiducial pairs with the earliest distal foot at or
// after it within kPairingSeconds; unmatched cycles are dropped.
PttResult compute_ptt(const Waveform& proximal, const std::vector<CardiacCycle>& proximal_cycles,
                      const Waveform& distal, const std::vector<CardiacCycle>& distal_cycles);

// Rows: x, dx/dt, d2x/dt2 (central differences inside, one-sided at edges).
std::array<std::vector<double>, 3> expand_gradients(std::span<const double> x, double rate);
std::array<std::vector<double>, 3> expand_gradients(const Waveform& w);

inline constexpr std::size_t kMorphologyFeatures = 11;

// Order: duration s, amplitude, rise time s, fall time s, area, systolic area,
// diastolic area, max upslope /s, max downslope /s (magnitude), peak relative
// position, half-amplitude width s. Areas are sample-and-hold integrals.
struct MorphologyVector {
  std::array<double, kMorphologyFeatures> values{};
  bool degenerate = false;  // flat cycle: only duration and area are filled
};

MorphologyVector morphology_features(std::span<const double> cycle, double rate);

// Linear interpolation onto `out_len` points spanning the first to the last sample.
std::vector<double> resample_linear(std::span<const double> x, std::size_t out_len);

// Position of native sample `idx` (relative to a segment of `native_len`
// samples) on a grid of `out_len` points produced by resample_linear.
double resampled_position(double idx, std::size_t native_len, std::size_t out_len);

}  // namespace arterialnet::signal
