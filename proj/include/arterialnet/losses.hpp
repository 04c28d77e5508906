// Training objectives on DiffArrays.
//
// Single-sequence functions flatten their arguments; the *_rows variants take
// (B, L) arrays and return one value per row so that losses can be averaged
// per subject before the cohort term is applied.
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "arterialnet/autodiff.hpp"

namespace arterialnet::losses {

using ad::DiffArray;

struct LossConfig {
  double alpha = 0.3;
  double c = 1e-8;
  double gamma = 0.1;
  double phi_w = 1.0;
  double phi_r = 10.0;
  double phi_a = 0.01;
  double omega = 1.0;

  // Throws std::invalid_argument naming the offending field.
  void validate() const;
};

// Order of the entries returned by stat_features.
enum StatIndex : std::size_t { kMean = 0, kStd, kSkew, kMin, kMax, kStatCount };

DiffArray rmse(const DiffArray& yhat, const DiffArray& y);
// (mean, population std, Fisher-Pearson skewness, min, max); skewness is 0 for
// a constant sequence.
DiffArray stat_features(const DiffArray& y);
DiffArray waveform_loss(const DiffArray& yhat, const DiffArray& y, double alpha);
// 1 / (2 (r + 1) + c) with r the Pearson correlation. Throws
// std::domain_error("correlation undefined ...") for a constant input.
DiffArray correlation_loss(const DiffArray& yhat, const DiffArray& y, double c);
// Soft-DTW with squared local cost. Lengths may differ.
DiffArray softdtw_loss(const DiffArray& yhat, const DiffArray& y, double gamma);

struct HybridLoss {
  DiffArray total;
  double lambda_w = 0.0;
  double lambda_r = 0.0;
  double lambda_a = 0.0;
  // phi-weighted terms, summing to total
  double weighted_w = 0.0;
  double weighted_r = 0.0;
  double weighted_a = 0.0;
};

HybridLoss hybrid_loss(const DiffArray& yhat, const DiffArray& y, const LossConfig& config);

// omega * population_std(losses) + sum(losses), for a 1-D array of per-subject
// losses. The square root has gradient 0 when all losses are equal.
DiffArray cohort_regularized_loss(const DiffArray& losses, double omega);
DiffArray cohort_regularized_loss(const std::vector<DiffArray>& losses, double omega);

// Row-wise forms: (B, L) inputs, (B) or (B, 5) outputs.
DiffArray rmse_rows(const DiffArray& yhat, const DiffArray& y);
DiffArray stat_features_rows(const DiffArray& y);
DiffArray waveform_loss_rows(const DiffArray& yhat, const DiffArray& y, double alpha);
DiffArray correlation_loss_rows(const DiffArray& yhat, const DiffArray& y, double c);
DiffArray softdtw_loss_rows(const DiffArray& yhat, const DiffArray& y, double gamma);

struct HybridLossRows {
  DiffArray total;  // (B)
  std::vector<double> lambda_w, lambda_r, lambda_a;
};

HybridLossRows hybrid_loss_rows(const DiffArray& yhat, const DiffArray& y,
                                const LossConfig& config);

}  // namespace arterialnet::losses
