#include "arterialnet/ablation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>

namespace arterialnet::ablation {

using data::SubjectRecord;

Split mask_bp_range(const SubjectRecord& rec, double lo, double hi) {
  if (!(lo < hi)) throw std::invalid_argument("mask_bp_range: need lo < hi");
  Split s;
  for (std::size_t i = 0; i < rec.windows.size(); ++i) {
    const auto& w = rec.windows[i];
    auto it = std::lower_bound(rec.cycles.begin(), rec.cycles.end(), w.start,
                               [](const signal::CardiacCycle& c, std::size_t v) { return c.sbp_idx < v; });
    bool inside = false;
    for (; it != rec.cycles.end() && it->sbp_idx < w.end; ++it) {
      if (it->sbp_value >= lo && it->sbp_value < hi) {
        inside = true;
        break;
      }
    }
    (inside ? s.test : s.train).push_back(i);
  }
  const std::string range = "[" + io::format_double(lo) + ", " + io::format_double(hi) + ")";
  if (s.test.empty()) throw std::runtime_error("range not represented: no beat of " + rec.subject_id + " has SBP in " + range);
  if (s.train.empty()) throw std::runtime_error("mask_bp_range: every window of " + rec.subject_id + " has a beat in " + range);
  return s;
}

std::vector<double> embed_gaussian_noise(std::span<const double> window, double multiplier,
                                         std::uint64_t seed) {
  if (!(multiplier >= 0.0)) throw std::invalid_argument("embed_gaussian_noise: multiplier must be >= 0");
  std::vector<double> out(window.begin(), window.end());
  if (multiplier == 0.0 || window.empty()) return out;
  double mean = 0.0, var = 0.0;
  for (double v : window) mean += v;
  mean /= static_cast<double>(window.size());
  for (double v : window) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(window.size())) / 2.0;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  for (auto& v : out) v += multiplier * (mean + sd * g(rng));
  return out;
}

namespace {

void check_bounds(std::span<const double> window, const std::vector<std::size_t>& bounds) {
  if (bounds.size() < 2 || bounds.back() != window.size()) {
    throw std::invalid_argument("cycle bounds must end at the window length");
  }
  if (!std::is_sorted(bounds.begin(), bounds.end())) throw std::invalid_argument("cycle bounds must be sorted");
}

}  // namespace

std::vector<double> mask_cycle_half(std::span<const double> window,
                                    const std::vector<std::size_t>& bounds, CycleHalf which) {
  check_bounds(window, bounds);
  std::vector<double> out(window.begin(), window.end());
  for (std::size_t k = 0; k + 1 < bounds.size(); ++k) {
    const std::size_t a = bounds[k], b = bounds[k + 1];
    const std::size_t mid = a + (b - a + 1) / 2;
    const auto [lo, hi] = which == CycleHalf::kPulse ? std::pair{a, mid} : std::pair{mid, b};
    std::fill(out.begin() + static_cast<long>(lo), out.begin() + static_cast<long>(hi), 0.0);
  }
  return out;
}

std::vector<double> mask_adjacent_beats(std::span<const double> window,
                                        const std::vector<std::size_t>& bounds, BeatSelection which) {
  check_bounds(window, bounds);
  const std::size_t k = bounds.size() - 1;
  if (k < 2) throw std::invalid_argument("mask_adjacent_beats: window needs at least 2 cycles");
  std::vector<double> out(window.begin(), window.end());
  const auto [lo, hi] = which == BeatSelection::kCurrent ? std::pair{bounds[k - 1], bounds[k]}
                                                         : std::pair{bounds[0], bounds[k - 1]};
  std::fill(out.begin() + static_cast<long>(lo), out.begin() + static_cast<long>(hi), 0.0);
  return out;
}

std::vector<std::size_t> window_cycle_bounds(const SubjectRecord& rec, const data::Window& w) {
  const std::size_t L = rec.window_len;
  std::vector<std::size_t> bounds;
  for (std::size_t c = 0; c < rec.cycles_per_window; ++c) {
    const auto& cyc = rec.input_cycles.at(w.first_cycle + c);
    const double pos = signal::resampled_position(static_cast<double>(cyc.start_idx - w.start), w.length(), L);
    const auto b = static_cast<std::size_t>(std::clamp(std::round(pos), 0.0, static_cast<double>(L)));
    bounds.push_back(bounds.empty() ? 0 : std::max(b, bounds.back()));
  }
  bounds.push_back(L);
  return bounds;
}

CalibrationWindows calibration_windows(const SubjectRecord& rec, double hours, double unit_seconds,
                                       std::size_t horizon) {
  if (!(hours > 0.0) || !(unit_seconds > 0.0)) {
    throw std::invalid_argument("calibration: hours and unit_seconds must be positive");
  }
  const double rate = rec.rate();
  const double duration = static_cast<double>(rec.abp.size()) / rate;
  if (duration <= hours * unit_seconds) {
    throw std::runtime_error("calibration: insufficient data for " + io::format_double(hours) +
                             " units of calibration (" + io::format_double(duration) + " s recorded)");
  }
  const double cal_end = hours * unit_seconds * rate;
  const double unit = unit_seconds * rate;
  CalibrationWindows out;
  out.buckets.resize(horizon == 0 ? 1 : horizon);
  for (std::size_t i = 0; i < rec.windows.size(); ++i) {
    const auto& w = rec.windows[i];
    if (static_cast<double>(w.end) <= cal_end) {
      out.train.push_back(i);
      continue;
    }
    if (static_cast<double>(w.start) < cal_end) continue;
    const auto k = horizon == 0 ? 0 : static_cast<std::size_t>((static_cast<double>(w.start) - cal_end) / unit);
    if (k < out.buckets.size()) out.buckets[k].push_back(i);
  }
  auto first_empty = std::find_if(out.buckets.begin(), out.buckets.end(), [](const auto& b) { return b.empty(); });
  out.buckets.erase(first_empty, out.buckets.end());
  if (out.train.size() < 2 || out.buckets.empty()) {
    throw std::runtime_error("calibration: insufficient data for " + io::format_double(hours) + " units");
  }
  return out;
}

namespace {

const std::vector<std::string> kKinds{"split", "calibration_sweep", "mask_bp_range",
                                      "gaussian_noise", "mask_cycle_half", "mask_adjacent_beats"};

std::vector<double> default_values(const std::string& kind) {
  if (kind == "split") return {0.1, 0.3, 0.5, 0.7, 0.8, 0.9};
  if (kind == "calibration_sweep") return {3, 5, 7, 9, 12};
  if (kind == "mask_bp_range") return {90, 100, 110, 120, 130};
  if (kind == "gaussian_noise") return {0.1, 0.3, 0.5, 0.7, 0.9};
  return {};
}

std::vector<std::string> default_variants(const std::string& kind) {
  if (kind == "mask_cycle_half") return {"pulse", "reflection", "none"};
  if (kind == "mask_adjacent_beats") return {"previous", "current", "none"};
  return {};
}

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (const auto& x : v) s += (s.empty() ? "" : ",") + x;
  return s;
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : ",") + io::format_double(x);
  return s;
}

}  // namespace

void AblationSpec::validate() const {
  if (std::find(kKinds.begin(), kKinds.end(), kind) == kKinds.end()) {
    throw io::ConfigError("ablation.kind '" + kind + "' is not one of " + join(kKinds));
  }
  const bool masking = kind == "mask_cycle_half" || kind == "mask_adjacent_beats";
  if (masking) {
    if (variants.empty()) throw io::ConfigError("ablation.variants must not be empty");
    const auto allowed = default_variants(kind);
    for (const auto& v : variants) {
      if (std::find(allowed.begin(), allowed.end(), v) == allowed.end()) {
        throw io::ConfigError("ablation.variants: '" + v + "' is not valid for " + kind);
      }
    }
  } else if (values.empty()) {
    throw io::ConfigError("ablation.values must not be empty");
  }
  for (double v : values) {
    if (kind == "split" && !(v > 0.0 && v < 1.0)) throw io::ConfigError("ablation.values: split fractions lie in (0, 1)");
    if (kind == "calibration_sweep" && !(v > 0.0)) throw io::ConfigError("ablation.values: hours must be positive");
    if (kind == "gaussian_noise" && !(v >= 0.0)) throw io::ConfigError("ablation.values: multipliers must be >= 0");
    if (!std::isfinite(v)) throw io::ConfigError("ablation.values must be finite");
  }
  if (!(range_width > 0.0)) throw io::ConfigError("ablation.range_width must be positive");
  if (!(split > 0.0 && split < 1.0)) throw io::ConfigError("ablation.split must lie in (0, 1)");
  if (!(unit_seconds > 0.0)) throw io::ConfigError("ablation.unit_seconds must be positive");
}

AblationSpec AblationSpec::from(const io::KeyValues& kv) {
  AblationSpec s;
  s.kind = kv.get("ablation.kind", s.kind);
  s.values = kv.get_doubles("ablation.values", default_values(s.kind));
  const auto variants = kv.get("ablation.variants", "");
  s.variants = variants.empty() ? default_variants(s.kind) : io::split(variants, ',');
  s.range_width = kv.get_double("ablation.range_width", s.range_width);
  s.split = kv.get_double("ablation.split", s.split);
  s.unit_seconds = kv.get_double("ablation.unit_seconds", s.unit_seconds);
  const long horizon = kv.get_int("ablation.horizon", static_cast<long>(s.horizon));
  if (horizon < 0) throw io::ConfigError("ablation.horizon must be >= 0");
  s.horizon = static_cast<std::size_t>(horizon);
  s.seed = kv.get_u64("ablation.seed", s.seed);
  s.validate();
  return s;
}

void AblationSpec::write(io::KeyValues& kv) const {
  kv.set("ablation.kind", kind);
  if (!values.empty()) kv.set("ablation.values", join(values));
  if (!variants.empty()) kv.set("ablation.variants", join(variants));
  kv.set("ablation.range_width", io::format_double(range_width));
  kv.set("ablation.split", io::format_double(split));
  kv.set("ablation.unit_seconds", io::format_double(unit_seconds));
  kv.set("ablation.horizon", std::to_string(horizon));
  kv.set("ablation.seed", std::to_string(seed));
}

namespace {

std::string percent_label(double f) {
  char buf[32];
  const long a = std::lround(f * 100.0);
  std::snprintf(buf, sizeof buf, "%ld-%ld", a, 100 - a);
  return buf;
}

// Copy of `rec` whose listed windows have every input channel transformed.
template <class Fn>
SubjectRecord transform_inputs(const SubjectRecord& rec, const std::vector<std::size_t>& ids, Fn fn) {
  SubjectRecord out = rec;
  const std::size_t L = rec.window_len;
  for (auto id : ids) {
    auto& w = out.windows.at(id);
    const auto bounds = window_cycle_bounds(rec, w);
    for (std::size_t c = 0; c < rec.num_channels(); ++c) {
      std::span<const double> row(w.inputs.data() + c * L, L);
      const auto t = fn(row, bounds, id, c);
      std::copy(t.begin(), t.end(), w.inputs.begin() + static_cast<long>(c * L));
    }
  }
  return out;
}

bool recoverable(const std::exception& e) {
  return dynamic_cast<const std::invalid_argument*>(&e) || dynamic_cast<const std::runtime_error*>(&e);
}

}  // namespace

AblationResult run_ablation(const AblationSpec& spec, const model::ModelBundle& pretrained,
                            const std::vector<const SubjectRecord*>& subjects,
                            const train::TrainConfig& cfg) {
  spec.validate();
  if (subjects.empty()) throw std::invalid_argument("run_ablation: no subjects");
  AblationResult res;
  res.spec = spec;

  // Runs `body` for one subject, recording recoverable failures as skips.
  auto guarded = [](Arm& arm, const SubjectRecord& rec, auto&& body) {
    try {
      body();
    } catch (const std::exception& e) {
      if (!recoverable(e)) throw;
      arm.skipped.push_back(rec.subject_id + ": " + e.what());
    }
  };

  if (spec.kind == "split") {
    for (double f : spec.values) {
      Arm arm{percent_label(f), {}, {}};
      for (const auto* rec : subjects) {
        guarded(arm, *rec, [&] {
          const auto split = sequential_split(*rec, f);
          const auto tuned = train::finetune_subject(pretrained, *rec, f, cfg);
          arm.report.subjects.push_back(eval::evaluate_subject(tuned.bundle, *rec, split.test).score);
        });
      }
      res.arms.push_back(std::move(arm));
    }
    return res;
  }

  if (spec.kind == "calibration_sweep") {
    for (double h : spec.values) {
      Arm arm{io::format_double(h) + " h", {}, {}};
      for (const auto* rec : subjects) {
        guarded(arm, *rec, [&] {
          const auto cw = calibration_windows(*rec, h, spec.unit_seconds, spec.horizon);
          const auto tuned = train::finetune_windows(pretrained, *rec, cw.train, cfg);
          std::vector<std::size_t> test;
          DecayCurve curve{rec->subject_id, h, {}};
          for (const auto& b : cw.buckets) {
            test.insert(test.end(), b.begin(), b.end());
            try {
              curve.abp_rmse.push_back(eval::evaluate_subject(tuned.bundle, *rec, b).score.abp.rmse);
            } catch (const std::runtime_error&) {
              curve.abp_rmse.push_back(std::numeric_limits<double>::quiet_NaN());
            }
          }
          arm.report.subjects.push_back(eval::evaluate_subject(tuned.bundle, *rec, test).score);
          res.curves.push_back(std::move(curve));
        });
      }
      res.arms.push_back(std::move(arm));
    }
    return res;
  }

  if (spec.kind == "mask_bp_range") {
    for (double lo : spec.values) {
      const double hi = lo + spec.range_width;
      Arm arm{"[" + io::format_double(lo) + "," + io::format_double(hi) + ")", {}, {}};
      for (const auto* rec : subjects) {
        guarded(arm, *rec, [&] {
          const auto split = mask_bp_range(*rec, lo, hi);
          const auto tuned = train::finetune_windows(pretrained, *rec, split.train, cfg);
          arm.report.subjects.push_back(eval::evaluate_subject(tuned.bundle, *rec, split.test).score);
        });
      }
      res.arms.push_back(std::move(arm));
    }
    return res;
  }

  // Test-time perturbations: one finetune per subject on clean data.
  struct Tuned {
    const SubjectRecord* rec;
    model::ModelBundle bundle;
    std::vector<std::size_t> test;
  };
  std::vector<Tuned> tuned;
  std::vector<std::string> failed;
  for (const auto* rec : subjects) {
    try {
      const auto split = sequential_split(*rec, spec.split);
      tuned.push_back({rec, train::finetune_subject(pretrained, *rec, spec.split, cfg).bundle, split.test});
    } catch (const std::exception& e) {
      if (!recoverable(e)) throw;
      failed.push_back(rec->subject_id + ": " + e.what());
    }
  }

  std::vector<std::pair<std::string, std::function<std::vector<double>(std::span<const double>, const std::vector<std::size_t>&, std::size_t, std::size_t)>>> arms;
  if (spec.kind == "gaussian_noise") {
    for (double m : spec.values) {
      arms.emplace_back("x" + io::format_double(m), [m, &spec](std::span<const double> row, const std::vector<std::size_t>&,
                                                                std::size_t id, std::size_t c) {
        return embed_gaussian_noise(row, m, spec.seed * 1000003ULL + id * 64 + c);
      });
    }
  } else {
    for (const auto& v : spec.variants) {
      arms.emplace_back(v, [v](std::span<const double> row, const std::vector<std::size_t>& bounds, std::size_t,
                               std::size_t) {
        if (v == "pulse") return mask_cycle_half(row, bounds, CycleHalf::kPulse);
        if (v == "reflection") return mask_cycle_half(row, bounds, CycleHalf::kReflection);
        if (v == "previous") return mask_adjacent_beats(row, bounds, BeatSelection::kPrevious);
        if (v == "current") return mask_adjacent_beats(row, bounds, BeatSelection::kCurrent);
        return std::vector<double>(row.begin(), row.end());
      });
    }
  }
  for (const auto& [label, fn] : arms) {
    Arm arm{label, {}, failed};
    for (const auto& t : tuned) {
      guarded(arm, *t.rec, [&] {
        const auto perturbed = transform_inputs(*t.rec, t.test, fn);
        arm.report.subjects.push_back(eval::evaluate_subject(t.bundle, perturbed, t.test).score);
      });
    }
    res.arms.push_back(std::move(arm));
  }
  return res;
}

std::string summary_table(const AblationResult& r) {
  std::vector<std::pair<std::string, eval::MetricsReport>> rows;
  for (const auto& a : r.arms) rows.emplace_back(a.label, a.report);
  std::ostringstream os;
  os << eval::render_table(rows);
  for (const auto& a : r.arms) {
    for (const auto& s : a.skipped) os << "skipped in " << a.label << ": " << s << '\n';
  }
  return os.str();
}

std::string curves_csv(const AblationResult& r) {
  std::ostringstream os;
  os << "subject,hours,bucket,abp_rmse\n";
  for (const auto& c : r.curves) {
    for (std::size_t k = 0; k < c.abp_rmse.size(); ++k) {
      os << c.subject_id << ',' << io::format_double(c.hours) << ',' << k + 1 << ','
         << (std::isnan(c.abp_rmse[k]) ? "null" : io::format_double(c.abp_rmse[k])) << '\n';
    }
  }
  return os.str();
}

}  // namespace arterialnet::ablation
