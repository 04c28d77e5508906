#include "arterialnet/training.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace arterialnet::train {

using model::ModelBundle;
using data::SubjectRecord;

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.batch_size = 32;
  c.epochs = 30;
  c.lr = 1e-3;
  return c;
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw io::ConfigError("train.batch_size must be positive");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw io::ConfigError("train.lr must be >= 0");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    throw io::ConfigError("train.weight_decay must be >= 0");
  }
  if (lr * weight_decay >= 1.0) throw io::ConfigError("train.lr * train.weight_decay must be < 1");
  try {
    loss.validate();
  } catch (const std::invalid_argument& e) {
    throw io::ConfigError(e.what());
  }
}

TrainConfig TrainConfig::from(const io::KeyValues& kv, const TrainConfig& base) {
  TrainConfig c = base;
  const long batch = kv.get_int("train.batch_size", static_cast<long>(c.batch_size));
  const long epochs = kv.get_int("train.epochs", static_cast<long>(c.epochs));
  const long warmup = kv.get_int("train.reg_warmup_epochs", static_cast<long>(c.reg_warmup_epochs));
  if (batch <= 0) throw io::ConfigError("train.batch_size must be positive");
  if (epochs < 0 || warmup < 0) throw io::ConfigError("train.epochs and train.reg_warmup_epochs must be >= 0");
  c.batch_size = static_cast<std::size_t>(batch);
  c.epochs = static_cast<std::size_t>(epochs);
  c.reg_warmup_epochs = static_cast<std::size_t>(warmup);
  c.lr = kv.get_double("train.lr", c.lr);
  c.weight_decay = kv.get_double("train.weight_decay", c.weight_decay);
  c.seed = kv.get_u64("train.seed", c.seed);
  c.freeze_backbone = kv.get_bool("train.freeze_backbone", c.freeze_backbone);
  auto& l = c.loss;
  l.alpha = kv.get_double("loss.alpha", l.alpha);
  l.c = kv.get_double("loss.c", l.c);
  l.gamma = kv.get_double("loss.gamma", l.gamma);
  l.phi_w = kv.get_double("loss.phi_w", l.phi_w);
  l.phi_r = kv.get_double("loss.phi_r", l.phi_r);
  l.phi_a = kv.get_double("loss.phi_a", l.phi_a);
  l.omega = kv.get_double("loss.omega", l.omega);
  c.validate();
  return c;
}

void TrainConfig::write(io::KeyValues& kv) const {
  kv.set("train.batch_size", std::to_string(batch_size));
  kv.set("train.lr", io::format_double(lr));
  kv.set("train.weight_decay", io::format_double(weight_decay));
  kv.set("train.epochs", std::to_string(epochs));
  kv.set("train.reg_warmup_epochs", std::to_string(reg_warmup_epochs));
  kv.set("train.seed", std::to_string(seed));
  kv.set("train.freeze_backbone", freeze_backbone ? "true" : "false");
  kv.set("loss.alpha", io::format_double(loss.alpha));
  kv.set("loss.c", io::format_double(loss.c));
  kv.set("loss.gamma", io::format_double(loss.gamma));
  kv.set("loss.phi_w", io::format_double(loss.phi_w));
  kv.set("loss.phi_r", io::format_double(loss.phi_r));
  kv.set("loss.phi_a", io::format_double(loss.phi_a));
  kv.set("loss.omega", io::format_double(loss.omega));
}

bool optimizer_step(model::ParamMap& params, const std::map<std::string, std::vector<double>>& grads,
                    AdamState& state, const TrainConfig& cfg) {
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("optimizer_step: unknown parameter " + name);
    if (g.size() != it->second.size()) {
      throw std::invalid_argument("optimizer_step: gradient size mismatch for " + name);
    }
    for (double v : g) {
      if (!std::isfinite(v)) {
        std::cerr << "warning: non-finite gradient for " << name << ", step skipped\n";
        return false;
      }
    }
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(state.t));
  const double decay = 1.0 - cfg.lr * cfg.weight_decay;
  for (const auto& [name, g] : grads) {
    auto& p = params.at(name);
    auto& m = state.m[name];
    auto& v = state.v[name];
    m.resize(g.size(), 0.0);
    v.resize(g.size(), 0.0);
    std::vector<double> w(p.values().begin(), p.values().end());
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g[i];
      v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g[i] * g[i];
      w[i] = w[i] * decay - cfg.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + kEps);
    }
    p = ad::DiffArray(p.shape(), std::move(w));
  }
  return true;
}

Split sequential_split(const SubjectRecord& rec, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw std::invalid_argument("sequential_split: fraction must lie in (0, 1)");
  }
  const std::size_t n = rec.windows.size();
  const auto boundary = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
  if (boundary == 0 || boundary == n) {
    throw std::invalid_argument("sequential_split: fraction " + io::format_double(fraction) +
                                " leaves an empty side for " + std::to_string(n) + " windows");
  }
  Split s;
  s.train.resize(boundary);
  s.test.resize(n - boundary);
  std::iota(s.train.begin(), s.train.end(), std::size_t{0});
  std::iota(s.test.begin(), s.test.end(), boundary);
  return s;
}

Split purge_overlap(const SubjectRecord& rec, Split split) {
  if (split.test.empty()) return split;
  std::size_t first = std::numeric_limits<std::size_t>::max();
  for (auto id : split.test) first = std::min(first, rec.windows.at(id).start);
  std::erase_if(split.train, [&](std::size_t id) { return rec.windows.at(id).end > first; });
  return split;
}

double mean_lambda(const ModelBundle& bundle, const SubjectRecord& rec,
                   const std::vector<std::size_t>& ids, const losses::LossConfig& loss) {
  if (ids.empty()) return std::numeric_limits<double>::quiet_NaN();
  ModelBundle b = bundle;
  double total = 0.0;
  for (std::size_t i = 0; i < ids.size(); i += 64) {
    std::vector<std::size_t> chunk(ids.begin() + static_cast<long>(i),
                                   ids.begin() + static_cast<long>(std::min(ids.size(), i + 64)));
    auto batch = model::make_batch(b, rec, chunk);
    auto yhat = model::forward(b, b.params, batch.x, batch.fused, false);
    const auto rows = losses::hybrid_loss_rows(yhat, batch.y, loss);
    for (double v : rows.total.values()) total += v;
  }
  return total / static_cast<double>(ids.size());
}

namespace {

struct Group {
  const SubjectRecord* rec;
  std::vector<std::size_t> ids;
};

struct StepOutcome {
  StepLog log;
  std::vector<double> subject_lambda;
};

StepOutcome run_step(ModelBundle& bundle, AdamState& adam, const std::vector<Group>& groups,
                     double omega, const TrainConfig& cfg) {
  ad::Tape tape;
  auto p = model::bind(bundle, tape);
  std::vector<model::Batch> parts;
  for (const auto& g : groups) parts.push_back(model::make_batch(bundle, *g.rec, g.ids));
  auto batch = parts.size() == 1 ? parts[0] : model::concat_batches(parts);
  auto yhat = model::forward(bundle, p, batch.x, batch.fused, true);
  auto rows = losses::hybrid_loss_rows(yhat, batch.y, cfg.loss);

  StepOutcome out;
  std::vector<ad::DiffArray> per_subject;
  std::size_t offset = 0;
  for (const auto& g : groups) {
    per_subject.push_back(ad::mean(ad::slice(rows.total, 0, offset, offset + g.ids.size())));
    out.subject_lambda.push_back(per_subject.back()[0]);
    offset += g.ids.size();
  }
  auto objective = losses::cohort_regularized_loss(per_subject, omega);

  auto mean_of = [](const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  out.log.lambda_w = mean_of(rows.lambda_w);
  out.log.lambda_r = mean_of(rows.lambda_r);
  out.log.lambda_a = mean_of(rows.lambda_a);
  out.log.lambda = ad::mean(rows.total)[0];
  out.log.omega = objective[0];

  const auto grads = tape.backward(objective);
  std::map<std::string, std::vector<double>> g;
  for (const auto& [name, arr] : p) {
    if (cfg.freeze_backbone && name.rfind("extractor.", 0) != 0) continue;
    g.emplace(name, grads.wrt(arr));
  }
  optimizer_step(bundle.params, g, adam, cfg);
  return out;
}

// Endless reshuffled stream over a subject's training windows.
class WindowStream {
 public:
  WindowStream(std::vector<std::size_t> ids, std::mt19937_64& rng) : ids_(std::move(ids)), rng_(&rng) {
    std::shuffle(ids_.begin(), ids_.end(), *rng_);
  }
  std::vector<std::size_t> take(std::size_t n) {
    std::vector<std::size_t> out;
    while (out.size() < n) {
      if (pos_ == ids_.size()) {
        std::shuffle(ids_.begin(), ids_.end(), *rng_);
        pos_ = 0;
      }
      out.push_back(ids_[pos_++]);
    }
    return out;
  }
  std::size_t size() const { return ids_.size(); }

 private:
  std::vector<std::size_t> ids_;
  std::mt19937_64* rng_;
  std::size_t pos_ = 0;
};

std::vector<std::size_t> all_windows(const SubjectRecord& rec) {
  std::vector<std::size_t> ids(rec.windows.size());
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  return ids;
}

}  // namespace

TrainResult pretrain_cohort(const std::vector<const SubjectRecord*>& cohort,
                            const std::string& holdout, const ModelBundle& model,
                            const TrainConfig& cfg) {
  cfg.validate();
  if (cohort.size() < 2) throw std::invalid_argument("pretrain_cohort: cohort needs at least 2 subjects");
  const SubjectRecord* val = nullptr;
  std::vector<const SubjectRecord*> train_recs;
  for (const auto* r : cohort) {
    if (r->windows.empty()) throw std::invalid_argument("pretrain_cohort: subject " + r->subject_id + " has no windows");
    if (r->subject_id == holdout) {
      val = r;
    } else {
      train_recs.push_back(r);
    }
  }
  if (!val) throw std::invalid_argument("pretrain_cohort: holdout '" + holdout + "' is not in the cohort");

  TrainResult res;
  res.bundle = model;
  std::vector<std::vector<std::size_t>> train_ids;
  for (const auto* r : train_recs) {
    res.subjects.push_back(r->subject_id);
    train_ids.push_back(all_windows(*r));
  }
  res.bundle.norm = model::fit_normalization(train_recs, train_ids, model.config.extractor);
  const auto val_ids = all_windows(*val);
  res.initial_val_lambda = mean_lambda(res.bundle, *val, val_ids, cfg.loss);
  if (cfg.epochs == 0) return res;

  std::mt19937_64 rng(cfg.seed);
  std::vector<WindowStream> streams;
  for (auto& ids : train_ids) streams.emplace_back(ids, rng);
  const std::size_t per_subject = std::max<std::size_t>(1, cfg.batch_size / train_recs.size());
  std::size_t steps_per_epoch = 0;
  for (const auto& s : streams) steps_per_epoch = std::max(steps_per_epoch, (s.size() + per_subject - 1) / per_subject);

  ModelBundle current = res.bundle;
  AdamState adam;
  double best = res.initial_val_lambda;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double omega = epoch <= cfg.reg_warmup_epochs ? 0.0 : cfg.loss.omega;
    EpochLog log;
    log.epoch = epoch;
    log.subject_lambda.assign(train_recs.size(), 0.0);
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      std::vector<Group> groups;
      for (std::size_t i = 0; i < train_recs.size(); ++i) groups.push_back({train_recs[i], streams[i].take(per_subject)});
      auto out = run_step(current, adam, groups, omega, cfg);
      out.log.step = ++step;
      res.steps.push_back(out.log);
      for (std::size_t i = 0; i < train_recs.size(); ++i) log.subject_lambda[i] += out.subject_lambda[i];
      log.omega += out.log.omega;
    }
    for (auto& v : log.subject_lambda) v /= static_cast<double>(steps_per_epoch);
    log.omega /= static_cast<double>(steps_per_epoch);
    log.val_lambda = mean_lambda(current, *val, val_ids, cfg.loss);
    res.epochs.push_back(log);
    if (log.val_lambda < best) {
      best = log.val_lambda;
      res.best_epoch = epoch;
      res.bundle = current;
    }
  }
  return res;
}

TrainResult finetune_windows(const ModelBundle& pretrained, const SubjectRecord& subject,
                             const std::vector<std::size_t>& train_ids, const TrainConfig& cfg) {
  cfg.validate();
  if (train_ids.size() < 2) {
    throw std::invalid_argument("finetune: too little data to form one batch (" +
                                std::to_string(train_ids.size()) + " training windows)");
  }
  TrainResult res;
  res.subjects = {subject.subject_id};
  res.bundle = model::reinit_extractor(pretrained, cfg.seed);
  res.bundle.norm = model::fit_normalization({&subject}, {train_ids}, pretrained.config.extractor);
  res.initial_val_lambda = std::numeric_limits<double>::quiet_NaN();

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order = train_ids;
  const std::size_t batch = std::min(cfg.batch_size, order.size());
  const std::size_t steps_per_epoch = order.size() / batch;
  AdamState adam;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochLog log;
    log.epoch = epoch;
    log.subject_lambda.assign(1, 0.0);
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      std::vector<std::size_t> ids(order.begin() + static_cast<long>(s * batch),
                                   order.begin() + static_cast<long>((s + 1) * batch));
      auto out = run_step(res.bundle, adam, {{&subject, std::move(ids)}}, cfg.loss.omega, cfg);
      out.log.step = ++step;
      res.steps.push_back(out.log);
      log.subject_lambda[0] += out.subject_lambda[0];
      log.omega += out.log.omega;
    }
    log.subject_lambda[0] /= static_cast<double>(steps_per_epoch);
    log.omega /= static_cast<double>(steps_per_epoch);
    log.val_lambda = std::numeric_limits<double>::quiet_NaN();
    res.epochs.push_back(log);
  }
  res.best_epoch = cfg.epochs;
  return res;
}

TrainResult finetune_subject(const ModelBundle& pretrained, const SubjectRecord& subject,
                             double split, const TrainConfig& cfg) {
  const auto s = purge_overlap(subject, sequential_split(subject, split));
  return finetune_windows(pretrained, subject, s.train, cfg);
}

void write_step_csv(const TrainResult& r, const std::filesystem::path& path) {
  std::ostringstream os;
  os << "step,lambda_w,lambda_r,lambda_a,lambda,omega\n";
  for (const auto& s : r.steps) {
    os << s.step << ',' << io::format_double(s.lambda_w) << ',' << io::format_double(s.lambda_r) << ','
       << io::format_double(s.lambda_a) << ',' << io::format_double(s.lambda) << ','
       << io::format_double(s.omega) << '\n';
  }
  io::write_text(path, os.str());
}

void write_epoch_csv(const TrainResult& r, const std::filesystem::path& path) {
  std::ostringstream os;
  os << "epoch";
  for (const auto& id : r.subjects) os << ",lambda_" << id;
  os << ",omega,val_lambda\n";
  auto num = [](double v) { return std::isnan(v) ? std::string() : io::format_double(v); };
  os << 0;
  for (std::size_t i = 0; i < r.subjects.size(); ++i) os << ',';
  os << ",," << num(r.initial_val_lambda) << '\n';
  for (const auto& e : r.epochs) {
    os << e.epoch;
    for (double v : e.subject_lambda) os << ',' << num(v);
    os << ',' << num(e.omega) << ',' << num(e.val_lambda) << '\n';
  }
  io::write_text(path, os.str());
}

}  // namespace arterialnet::train
