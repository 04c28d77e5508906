// Waveform and vitals metrics, cohort aggregation and Bland-Altman export.
#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "arterialnet/dataset.hpp"
#include "arterialnet/models.hpp"
#include "arterialnet/signal.hpp"

namespace arterialnet::eval {

// Matched per-beat series.
struct Vitals {
  std::vector<double> sbp_hat, dbp_hat, sbp_ref, dbp_ref;
};

// Segments `yhat` and pairs every reference cycle with the predicted cycle
// whose foot is nearest, within 0.5 s. Throws std::runtime_error when no cycle
// can be matched.
Vitals derive_vitals(const signal::Waveform& yhat, const std::vector<signal::CardiacCycle>& reference_cycles);

struct Metric {
  double rmse = 0.0;
  double mae = 0.0;
  std::optional<double> r;  // empty when either series is constant
};

// Throws std::invalid_argument on empty or mismatched input.
Metric score_series(std::span<const double> pred, std::span<const double> ref);

struct SubjectScore {
  std::string subject_id;
  Metric abp, sbp, dbp;
  std::size_t beats = 0;
};

SubjectScore score(const std::string& subject_id, std::span<const double> yhat,
                   std::span<const double> y, const Vitals& vitals);

struct Summary {
  double mean = 0.0;
  double sd = 0.0;  // population
  std::size_t n = 0;  // subjects contributing (null r values are skipped)
};

struct MetricsReport {
  std::vector<SubjectScore> subjects;

  // target: "abp", "sbp" or "dbp"; metric: "rmse", "mae" or "r".
  Summary cohort(const std::string& target, const std::string& metric) const;
  // One row per subject then `mean` and `sd` rows.
  std::string to_csv() const;
};

// Human table, one row per labelled report, cells rendered as "5.41 (1.35)".
std::string render_table(const std::vector<std::pair<std::string, MetricsReport>>& rows);
std::string mean_sd(const Summary& s);

struct BlandAltman {
  double bias = 0.0;
  double loa_low = 0.0;
  double loa_high = 0.0;
  std::vector<double> mean, diff;  // per point
};

// bias = mean(pred - ref), limits bias +- 1.96 * population std.
BlandAltman bland_altman(std::span<const double> pred, std::span<const double> ref);
std::string bland_altman_csv(const BlandAltman& ba);

// Window predictions mapped back onto the native ABP clock.
struct Stitched {
  std::size_t offset = 0;  // native index of the first sample
  signal::Waveform pred, ref;
  std::vector<signal::CardiacCycle> ref_cycles;  // relative to offset
};

// `window_ids` must be consecutive. The first window contributes all of its
// samples, every later one only its final cycle.
Stitched stitch(const data::SubjectRecord& rec, const std::vector<std::size_t>& window_ids,
                const std::vector<std::vector<double>>& predictions);

struct SubjectEvaluation {
  SubjectScore score;
  Vitals vitals;
  Stitched stitched;  // first consecutive run of test windows
};

// Predicts the test windows, stitches each consecutive run onto the native
// clock and scores the concatenation.
SubjectEvaluation evaluate_subject(const model::ModelBundle& bundle, const data::SubjectRecord& rec,
                                   const std::vector<std::size_t>& test_ids);

}  // namespace arterialnet::eval
