// Synthetic paired pulsatile/ABP recordings.
//
// ABP is a per-beat template (raised-cosine upstroke, exponential diastolic
// decay, dicrotic bump) scaled by a slowly varying SBP/DBP trajectory that
// runs rest -> pressor ramp -> elevated -> recovery. Input channels are the
// ABP sampled with a delay, passed through a first-order low-pass, scaled,
// and corrupted by drift and white noise. A distal channel adds a transit
// time that shortens as pressure rises.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "arterialnet/dataset.hpp"

namespace arterialnet::synth {

struct SubjectProfile {
  double heart_rate = 1.2;   // Hz
  double sbp_base = 120.0;   // mmHg
  double dbp_base = 75.0;    // mmHg
  double pressor_rise = 30.0;  // SBP increase at the top of the ramp (DBP gets half)
  double ptt_base = 0.20;    // s, proximal to distal at rest
  double gain = 0.02;        // input units per mmHg
  double delay = 0.10;       // s, ABP to proximal input
  double damping = 0.02;     // s, low-pass time constant (0 = none)
  double drift = 0.2;        // amplitude of a 0.05 Hz baseline wander
  double noise = 0.005;      // white-noise standard deviation
  double hrv = 0.03;         // relative beat-to-beat period jitter
  bool distal_channel = true;

  void validate() const;  // throws std::invalid_argument
};

struct BeatTruth {
  double onset = 0.0;          // s
  std::size_t peak_idx = 0;    // sample of the sampled maximum
  double sbp_commanded = 0.0;
  double dbp_commanded = 0.0;
  double sbp_sampled = 0.0;    // maximum ABP sample inside the beat
};

struct SyntheticSubject {
  data::RawSubject raw;
  SubjectProfile profile;
  std::vector<BeatTruth> beats;  // beats fully inside the recording
};

// Pressor trajectory in [0, 1] at fraction `u` of the recording.
double pressor_level(double u);

SyntheticSubject generate_subject(const SubjectProfile& profile, double duration, double rate,
                                  std::uint64_t seed, const std::string& id = "S1");

// Half-widths of the uniform draws around the base profile.
struct Spread {
  double heart_rate = 0.25;
  double sbp = 15.0;
  double dbp = 8.0;
  double pressor_rise = 10.0;
  double ptt = 0.05;
  double gain = 0.005;
  double delay = 0.05;
  double damping = 0.015;
};

struct CohortSpec {
  SubjectProfile base;
  Spread spread;
  double variability = 1.0;  // scales every spread entry; 0 gives identical subjects
};

// Subjects S1..Sn. Deterministic in `seed`.
std::vector<SyntheticSubject> generate_cohort(std::size_t n, const CohortSpec& spec,
                                              double duration, double rate, std::uint64_t seed);

// Raw channel files plus beats.txt (per-beat truth) and profile.txt.
void write_subject(const SyntheticSubject& s, const std::filesystem::path& dir);

}  // namespace arterialnet::synth
