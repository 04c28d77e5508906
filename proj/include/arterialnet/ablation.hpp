// Robustness harness: data-availability splits, calibration sweeps, BP-range
// masking and test-time waveform perturbations, plus the experiment drivers.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "arterialnet/dataset.hpp"
#include "arterialnet/evaluation.hpp"
#include "arterialnet/io.hpp"
#include "arterialnet/models.hpp"
#include "arterialnet/training.hpp"

namespace arterialnet::ablation {

using train::sequential_split;
using train::Split;

// Training windows exclude every window holding a reference beat with SBP in
// [lo, hi); the test set is exactly the excluded windows. Throws
// std::runtime_error("range not represented ...") when nothing falls in the
// range and std::runtime_error when no training window is left.
Split mask_bp_range(const data::SubjectRecord& rec, double lo, double hi);

// window + multiplier * N(mean(window), std(window) / 2). Multiplier 0 returns
// the input unchanged.
std::vector<double> embed_gaussian_noise(std::span<const double> window, double multiplier,
                                         std::uint64_t seed);

enum class CycleHalf { kPulse, kReflection };
enum class BeatSelection { kPrevious, kCurrent };

// `bounds` lists cycle starts within the window followed by the window length.
// Each cycle's first ceil(n/2) samples are the pulse half.
std::vector<double> mask_cycle_half(std::span<const double> window,
                                    const std::vector<std::size_t>& bounds, CycleHalf which);
// Current = the final cycle, previous = all earlier ones. Needs two or more cycles.
std::vector<double> mask_adjacent_beats(std::span<const double> window,
                                        const std::vector<std::size_t>& bounds, BeatSelection which);

// Cycle boundaries of a window on its resampled grid.
std::vector<std::size_t> window_cycle_bounds(const data::SubjectRecord& rec, const data::Window& w);

struct CalibrationWindows {
  std::vector<std::size_t> train;
  std::vector<std::vector<std::size_t>> buckets;  // one per evaluation unit after calibration
};

// Calibration on the first `hours * unit_seconds` of the recording, then one
// test bucket per following unit, at most `horizon` of them. horizon 0 puts
// every remaining window in a single bucket.
CalibrationWindows calibration_windows(const data::SubjectRecord& rec, double hours,
                                       double unit_seconds, std::size_t horizon);

struct AblationSpec {
  // split | calibration_sweep | mask_bp_range | gaussian_noise | mask_cycle_half | mask_adjacent_beats
  std::string kind = "split";
  std::vector<double> values;         // fractions, hours, range starts or multipliers
  std::vector<std::string> variants;  // masking variants; "none" adds the unmasked row
  double range_width = 10.0;          // mmHg
  double split = 0.8;                 // training fraction for test-time perturbations
  double unit_seconds = 3600.0;       // length of one calibration "hour"
  std::size_t horizon = 12;
  std::uint64_t seed = 0;

  void validate() const;  // throws io::ConfigError
  // Keys ablation.*; unset values fall back to the documented grid of `kind`.
  static AblationSpec from(const io::KeyValues& kv);
  void write(io::KeyValues& kv) const;
};

struct Arm {
  std::string label;
  eval::MetricsReport report;
  std::vector<std::string> skipped;  // "subject: reason"
};

struct DecayCurve {
  std::string subject_id;
  double hours = 0.0;
  std::vector<double> abp_rmse;  // one per bucket
};

struct AblationResult {
  AblationSpec spec;
  std::vector<Arm> arms;
  std::vector<DecayCurve> curves;
};

AblationResult run_ablation(const AblationSpec& spec, const model::ModelBundle& pretrained,
                            const std::vector<const data::SubjectRecord*>& subjects,
                            const train::TrainConfig& cfg);

std::string summary_table(const AblationResult& r);
std::string curves_csv(const AblationResult& r);

}  // namespace arterialnet::ablation
