// Cohort pretraining under the cohort-aware objective, then per-subject
// finetuning with a freshly initialized extractor.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "arterialnet/dataset.hpp"
#include "arterialnet/io.hpp"
#include "arterialnet/losses.hpp"
#include "arterialnet/models.hpp"

namespace arterialnet::train {

struct TrainConfig {
  std::size_t batch_size = 512;
  double lr = 1e-5;
  double weight_decay = 1e-2;
  std::size_t epochs = 75;
  std::size_t reg_warmup_epochs = 10;
  losses::LossConfig loss;
  std::uint64_t seed = 0;
  bool freeze_backbone = false;  // finetune: update the extractor only

  // batch 32, epochs 30, lr 1e-3
  static TrainConfig desk();

  void validate() const;  // throws io::ConfigError
  // Keys train.* and loss.*; missing keys keep the values of `base`.
  static TrainConfig from(const io::KeyValues& kv, const TrainConfig& base);
  static TrainConfig from(const io::KeyValues& kv) { return from(kv, TrainConfig{}); }
  void write(io::KeyValues& kv) const;
};

struct AdamState {
  std::map<std::string, std::vector<double>> m, v;
  std::uint64_t t = 0;
};

// One AdamW update (beta1 0.9, beta2 0.999, eps 1e-8). Weight decay multiplies
// the parameter by (1 - lr * weight_decay) before the Adam step. Parameters
// without an entry in `grads` are left alone. Returns false, logs a warning and
// changes nothing when any gradient is non-finite.
bool optimizer_step(model::ParamMap& params, const std::map<std::string, std::vector<double>>& grads,
                    AdamState& state, const TrainConfig& cfg);

struct StepLog {
  std::size_t step = 0;
  double lambda_w = 0.0, lambda_r = 0.0, lambda_a = 0.0;  // batch means
  double lambda = 0.0;  // mean hybrid loss
  double omega = 0.0;   // value of the optimized objective
};

struct EpochLog {
  std::size_t epoch = 0;
  std::vector<double> subject_lambda;  // one per training subject
  double omega = 0.0;
  double val_lambda = 0.0;  // NaN when there is no validation data
};

struct TrainResult {
  model::ModelBundle bundle;
  std::vector<std::string> subjects;  // training subjects, column order of subject_lambda
  std::vector<EpochLog> epochs;
  std::vector<StepLog> steps;
  double initial_val_lambda = 0.0;
  std::size_t best_epoch = 0;  // 0 = the initial parameters
};

struct Split {
  std::vector<std::size_t> train, test;
};

// First floor(fraction * n) windows train, the rest test. Throws
// std::invalid_argument if either side would be empty.
Split sequential_split(const data::SubjectRecord& rec, double fraction);
// Drops training windows that end after the first test window starts.
Split purge_overlap(const data::SubjectRecord& rec, Split split);

// Mean hybrid loss (normalized units) over the windows, eval mode.
double mean_lambda(const model::ModelBundle& bundle, const data::SubjectRecord& rec,
                   const std::vector<std::size_t>& ids, const losses::LossConfig& loss);

// Trains on every cohort member except `holdout` and keeps the parameters with
// the lowest validation loss on the holdout subject.
TrainResult pretrain_cohort(const std::vector<const data::SubjectRecord*>& cohort,
                            const std::string& holdout, const model::ModelBundle& model,
                            const TrainConfig& cfg);

// Reinitializes the extractor, refits the normalization on the training slice
// and trains on the temporally first `split` of the windows.
TrainResult finetune_subject(const model::ModelBundle& pretrained, const data::SubjectRecord& subject,
                             double split, const TrainConfig& cfg);
// Same as finetune_subject with an explicit training window list.
TrainResult finetune_windows(const model::ModelBundle& pretrained, const data::SubjectRecord& subject,
                             const std::vector<std::size_t>& train_ids, const TrainConfig& cfg);

void write_step_csv(const TrainResult& r, const std::filesystem::path& path);
void write_epoch_csv(const TrainResult& r, const std::filesystem::path& path);

}  // namespace arterialnet::train
