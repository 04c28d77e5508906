#include "arterialnet/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace arterialnet::eval {

Vitals derive_vitals(const signal::Waveform& yhat,
                     const std::vector<signal::CardiacCycle>& reference_cycles) {
  std::vector<signal::CardiacCycle> pred;
  try {
    pred = signal::segment_cycles(yhat);
  } catch (const std::invalid_argument&) {
    throw std::runtime_error("derive_vitals: no matched cycles (prediction could not be segmented)");
  }
  const auto tol = static_cast<long>(std::floor(signal::kPairingSeconds * yhat.rate));
  Vitals v;
  for (const auto& ref : reference_cycles) {
    auto it = std::lower_bound(pred.begin(), pred.end(), ref.start_idx,
                               [](const signal::CardiacCycle& c, std::size_t s) { return c.start_idx < s; });
    const signal::CardiacCycle* best = nullptr;
    long best_d = tol + 1;
    for (auto cand : {it, it == pred.begin() ? pred.end() : std::prev(it)}) {
      if (cand == pred.end()) continue;
      const long d = std::abs(static_cast<long>(cand->start_idx) - static_cast<long>(ref.start_idx));
      if (d < best_d) {
        best_d = d;
        best = &*cand;
      }
    }
    if (!best) continue;
    v.sbp_hat.push_back(best->sbp_value);
    v.dbp_hat.push_back(best->dbp_value);
    v.sbp_ref.push_back(ref.sbp_value);
    v.dbp_ref.push_back(ref.dbp_value);
  }
  if (v.sbp_ref.empty()) throw std::runtime_error("derive_vitals: no matched cycles");
  return v;
}

Metric score_series(std::span<const double> pred, std::span<const double> ref) {
  if (pred.empty() || pred.size() != ref.size()) {
    throw std::invalid_argument("score: series lengths " + std::to_string(pred.size()) + " and " +
                                std::to_string(ref.size()) + " differ or are empty");
  }
  const double n = static_cast<double>(pred.size());
  double se = 0.0, ae = 0.0, mp = 0.0, mr = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - ref[i];
    se += d * d;
    ae += std::abs(d);
    mp += pred[i];
    mr += ref[i];
  }
  mp /= n;
  mr /= n;
  double spp = 0.0, srr = 0.0, spr = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double a = pred[i] - mp, b = ref[i] - mr;
    spp += a * a;
    srr += b * b;
    spr += a * b;
  }
  Metric m;
  m.rmse = std::sqrt(se / n);
  m.mae = ae / n;
  // Floating-point rounding can break rmse >= mae by an ulp when all errors are equal.
  m.rmse = std::max(m.rmse, m.mae);
  if (spp > 0.0 && srr > 0.0) m.r = std::clamp(spr / std::sqrt(spp * srr), -1.0, 1.0);
  return m;
}

SubjectScore score(const std::string& subject_id, std::span<const double> yhat,
                   std::span<const double> y, const Vitals& vitals) {
  SubjectScore s;
  s.subject_id = subject_id;
  s.abp = score_series(yhat, y);
  s.sbp = score_series(vitals.sbp_hat, vitals.sbp_ref);
  s.dbp = score_series(vitals.dbp_hat, vitals.dbp_ref);
  s.beats = vitals.sbp_ref.size();
  return s;
}

namespace {

const Metric& pick(const SubjectScore& s, const std::string& target) {
  if (target == "abp") return s.abp;
  if (target == "sbp") return s.sbp;
  if (target == "dbp") return s.dbp;
  throw std::invalid_argument("unknown target '" + target + "'");
}

std::optional<double> pick(const Metric& m, const std::string& metric) {
  if (metric == "rmse") return m.rmse;
  if (metric == "mae") return m.mae;
  if (metric == "r") return m.r;
  throw std::invalid_argument("unknown metric '" + metric + "'");
}

constexpr const char* kTargets[] = {"abp", "sbp", "dbp"};
constexpr const char* kMetrics[] = {"rmse", "mae", "r"};

std::string num(std::optional<double> v) { return v ? io::format_double(*v) : "null"; }

}  // namespace

Summary MetricsReport::cohort(const std::string& target, const std::string& metric) const {
  std::vector<double> v;
  for (const auto& s : subjects) {
    if (auto x = pick(pick(s, target), metric)) v.push_back(*x);
  }
  Summary out;
  out.n = v.size();
  if (v.empty()) return out;
  for (double x : v) out.mean += x;
  out.mean /= static_cast<double>(v.size());
  for (double x : v) out.sd += (x - out.mean) * (x - out.mean);
  out.sd = std::sqrt(out.sd / static_cast<double>(v.size()));
  return out;
}

std::string MetricsReport::to_csv() const {
  std::ostringstream os;
  os << "subject";
  for (auto t : kTargets) {
    for (auto m : kMetrics) os << ',' << t << '_' << m;
  }
  os << ",beats\n";
  for (const auto& s : subjects) {
    os << s.subject_id;
    for (auto t : kTargets) {
      for (auto m : kMetrics) os << ',' << num(pick(pick(s, t), m));
    }
    os << ',' << s.beats << '\n';
  }
  for (const std::string row : {"mean", "sd"}) {
    os << row;
    for (auto t : kTargets) {
      for (auto m : kMetrics) {
        const auto c = cohort(t, m);
        os << ',' << (c.n == 0 ? "null" : io::format_double(row == "mean" ? c.mean : c.sd));
      }
    }
    os << ",\n";
  }
  return os.str();
}

std::string mean_sd(const Summary& s) {
  if (s.n == 0) return "null";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f (%.2f)", s.mean, s.sd);
  return buf;
}

std::string render_table(const std::vector<std::pair<std::string, MetricsReport>>& rows) {
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> header{""};
  for (auto t : kTargets) {
    for (auto m : kMetrics) {
      std::string h = std::string(t) + " " + m;
      std::transform(h.begin(), h.end(), h.begin(), [](unsigned char c) { return std::toupper(c); });
      header.push_back(h);
    }
  }
  cells.push_back(header);
  for (const auto& [label, report] : rows) {
    std::vector<std::string> line{label};
    for (auto t : kTargets) {
      for (auto m : kMetrics) line.push_back(mean_sd(report.cohort(t, m)));
    }
    cells.push_back(line);
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& line : cells) {
    for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
  }
  std::ostringstream os;
  for (std::size_t r = 0; r < cells.size(); ++r) {
    for (std::size_t i = 0; i < cells[r].size(); ++i) {
      os << (i ? " | " : "") << cells[r][i] << std::string(width[i] - cells[r][i].size(), ' ');
    }
    os << '\n';
    if (r == 0) {
      for (std::size_t i = 0; i < width.size(); ++i) os << (i ? "-|-" : "") << std::string(width[i], '-');
      os << '\n';
    }
  }
  return os.str();
}

BlandAltman bland_altman(std::span<const double> pred, std::span<const double> ref) {
  if (pred.size() != ref.size()) {
    throw std::invalid_argument("bland_altman: length mismatch (" + std::to_string(pred.size()) +
                                " vs " + std::to_string(ref.size()) + ")");
  }
  if (pred.size() < 2) throw std::invalid_argument("bland_altman: need at least 2 points");
  BlandAltman ba;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    ba.mean.push_back(0.5 * (pred[i] + ref[i]));
    ba.diff.push_back(pred[i] - ref[i]);
    ba.bias += ba.diff.back();
  }
  const double n = static_cast<double>(pred.size());
  ba.bias /= n;
  double var = 0.0;
  for (double d : ba.diff) var += (d - ba.bias) * (d - ba.bias);
  const double sd = std::sqrt(var / n);
  ba.loa_low = ba.bias - 1.96 * sd;
  ba.loa_high = ba.bias + 1.96 * sd;
  return ba;
}

std::string bland_altman_csv(const BlandAltman& ba) {
  std::ostringstream os;
  os << "mean_mmHg,diff_mmHg\n";
  for (std::size_t i = 0; i < ba.mean.size(); ++i) {
    os << io::format_double(ba.mean[i]) << ',' << io::format_double(ba.diff[i]) << '\n';
  }
  return os.str();
}

Stitched stitch(const data::SubjectRecord& rec, const std::vector<std::size_t>& window_ids,
                const std::vector<std::vector<double>>& predictions) {
  if (window_ids.empty() || window_ids.size() != predictions.size()) {
    throw std::invalid_argument("stitch: need one prediction per window");
  }
  Stitched out;
  out.offset = rec.windows.at(window_ids.front()).start;
  std::vector<double> pred;
  std::size_t covered = out.offset;
  for (std::size_t k = 0; k < window_ids.size(); ++k) {
    if (k > 0 && window_ids[k] != window_ids[k - 1] + 1) {
      throw std::invalid_argument("stitch: window ids must be consecutive");
    }
    const auto& w = rec.windows.at(window_ids[k]);
    const auto& p = predictions[k];
    const std::size_t L = p.size();
    if (L < 2) throw std::invalid_argument("stitch: prediction too short");
    for (std::size_t i = std::max(covered, w.start); i < w.end; ++i) {
      const double pos = signal::resampled_position(static_cast<double>(i - w.start), w.length(), L);
      const auto j = std::min(static_cast<std::size_t>(std::max(0.0, std::floor(pos))), L - 2);
      const double f = pos - static_cast<double>(j);
      pred.push_back(p[j] + f * (p[j + 1] - p[j]));
    }
    covered = std::max(covered, w.end);
  }
  const std::size_t end = out.offset + pred.size();
  out.pred = signal::Waveform(std::move(pred), rec.rate(), "abp_pred");
  out.ref = signal::Waveform(
      std::vector<double>(rec.abp.samples.begin() + static_cast<long>(out.offset),
                          rec.abp.samples.begin() + static_cast<long>(end)),
      rec.rate(), "abp");
  for (auto c : rec.cycles) {
    if (c.start_idx < out.offset || c.end_idx > end) continue;
    c.start_idx -= out.offset;
    c.end_idx -= out.offset;
    c.sbp_idx -= out.offset;
    c.dbp_idx -= out.offset;
    out.ref_cycles.push_back(c);
  }
  return out;
}

SubjectEvaluation evaluate_subject(const model::ModelBundle& bundle, const data::SubjectRecord& rec,
                                   const std::vector<std::size_t>& test_ids) {
  if (test_ids.empty()) throw std::invalid_argument("evaluate_subject: no test windows");
  const auto preds = model::predict(bundle, rec, test_ids);
  SubjectEvaluation e;
  std::vector<double> pred, ref;
  bool first_run = true;
  for (std::size_t a = 0; a < test_ids.size();) {
    std::size_t b = a + 1;
    while (b < test_ids.size() && test_ids[b] == test_ids[b - 1] + 1) ++b;
    auto run = stitch(rec, {test_ids.begin() + static_cast<long>(a), test_ids.begin() + static_cast<long>(b)},
                      {preds.begin() + static_cast<long>(a), preds.begin() + static_cast<long>(b)});
    try {
      auto v = derive_vitals(run.pred, run.ref_cycles);
      auto append = [](std::vector<double>& dst, const std::vector<double>& src) {
        dst.insert(dst.end(), src.begin(), src.end());
      };
      append(e.vitals.sbp_hat, v.sbp_hat);
      append(e.vitals.dbp_hat, v.dbp_hat);
      append(e.vitals.sbp_ref, v.sbp_ref);
      append(e.vitals.dbp_ref, v.dbp_ref);
    } catch (const std::runtime_error&) {
      // A short run may hold no complete predicted cycle; the others still count.
    }
    pred.insert(pred.end(), run.pred.samples.begin(), run.pred.samples.end());
    ref.insert(ref.end(), run.ref.samples.begin(), run.ref.samples.end());
    if (first_run) e.stitched = std::move(run);
    first_run = false;
    a = b;
  }
  if (e.vitals.sbp_ref.empty()) throw std::runtime_error("evaluate_subject: no matched cycles");
  e.score = score(rec.subject_id, pred, ref, e.vitals);
  return e;
}

}  // namespace arterialnet::eval
