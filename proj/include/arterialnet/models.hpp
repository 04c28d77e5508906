// Personalized feature extractor and the two sequence-to-sequence backbones.
//
// Parameters live in a ModelBundle as named detached arrays. A forward pass
// takes a ParamMap so that training can substitute tape variables for the
// stored values:
//
//   ad::Tape tape;
//   auto params = model::bind(bundle, tape);
//   auto yhat = model::forward(bundle, params, batch.x, batch.fused, true);
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "arterialnet/autodiff.hpp"
#include "arterialnet/dataset.hpp"
#include "arterialnet/io.hpp"

namespace arterialnet::model {

using ad::DiffArray;
using ParamMap = std::map<std::string, DiffArray>;

struct ExtractorConfig {
  std::size_t in_channels = 1;  // recorded input channels used (first N)
  std::size_t conv_channels = 16;
  std::size_t kernel = 3;
  std::vector<std::size_t> dilations{1, 2, 4, 8};
  std::vector<std::size_t> fc_widths{256, 128, 64};  // last entry equals embed_dim
  std::size_t embed_dim = 64;
  bool use_gradients = true;
  bool use_morphology = true;
  bool ptt_mode = false;

  // Channels entering the first convolution.
  std::size_t input_planes() const { return in_channels * (use_gradients ? 3 : 1); }
  // Scalars concatenated to the pooled features before the FC stack.
  std::size_t fused_dim() const;
};

struct BackboneConfig {
  std::string kind = "unet";  // unet | transformer
  std::size_t window_len = 512;
  std::size_t unet_depth = 3;
  std::size_t unet_base_channels = 8;
  std::size_t tf_layers = 2;
  std::size_t tf_heads = 2;
  std::size_t tf_model_dim = 64;
  std::size_t tf_ff_dim = 128;
  std::size_t tf_tokens = 32;
};

struct ModelConfig {
  ExtractorConfig extractor;
  BackboneConfig backbone;

  // Throws io::ConfigError.
  void validate() const;
  static ModelConfig from(const io::KeyValues& kv);
  void write(io::KeyValues& kv) const;
  std::string to_text() const;
};

// Affine maps applied to model inputs and targets: v' = (v - shift) / scale.
struct Normalization {
  std::vector<double> input_shift, input_scale;  // per input plane
  std::vector<double> fused_shift, fused_scale;  // per fused scalar
  double target_shift = 0.0;
  double target_scale = 1.0;
};

struct ModelBundle {
  ModelConfig config;
  ParamMap params;
  std::map<std::string, ad::BatchNormState> batch_norm;
  Normalization norm;
  std::uint64_t seed = 0;

  // FNV-1a over names and values of the parameters whose name starts with prefix.
  std::uint64_t checksum(const std::string& prefix = "") const;
  std::size_t parameter_count() const;
};

ModelBundle init_bundle(const ModelConfig& config, std::uint64_t seed);
// Fresh He-uniform extractor weights (and reset extractor batch-norm
// statistics); backbone parameters are left bit-identical.
ModelBundle reinit_extractor(const ModelBundle& bundle, std::uint64_t seed);

// Registers every parameter on the tape.
ParamMap bind(const ModelBundle& bundle, ad::Tape& tape);

struct ExtractorOutput {
  DiffArray embedding;  // (B, embed_dim)
  DiffArray sequence;   // (B, conv_channels, L)
};

// x: (B, input_planes, L); fused: (B, fused_dim) or an empty array when fused_dim is 0.
ExtractorOutput extractor_forward(ModelBundle& bundle, const ParamMap& p, const DiffArray& x,
                                  const DiffArray& fused, bool training);
DiffArray unet_forward(const ModelBundle& bundle, const ParamMap& p, const DiffArray& sequence,
                       const DiffArray& embedding);
DiffArray transformer_forward(const ModelBundle& bundle, const ParamMap& p,
                              const DiffArray& sequence, const DiffArray& embedding);
// Normalized ABP prediction (B, L). Training mode updates batch-norm statistics.
DiffArray forward(ModelBundle& bundle, const ParamMap& p, const DiffArray& x,
                  const DiffArray& fused, bool training);

// Raw fused scalars of a window: 11 morphology features and/or PTT.
std::vector<double> fused_features(const data::Window& w, const ExtractorConfig& config);

struct Batch {
  DiffArray x;      // (B, planes, L), normalized
  DiffArray fused;  // (B, fused_dim), normalized
  DiffArray y;      // (B, L), normalized target
};

// Planes of one window before normalization: per channel [x, dx/dt, d2x/dt2]
// computed on the resampled window at its effective rate.
std::vector<double> window_planes(const data::SubjectRecord& rec, const data::Window& w,
                                  const ExtractorConfig& config);

// Training-slice statistics for the normalization.
Normalization fit_normalization(const std::vector<const data::SubjectRecord*>& records,
                                const std::vector<std::vector<std::size_t>>& windows,
                                const ExtractorConfig& config);

Batch make_batch(const ModelBundle& bundle, const data::SubjectRecord& rec,
                 const std::vector<std::size_t>& window_ids);
Batch concat_batches(const std::vector<Batch>& parts);

// Predicted ABP (mmHg, window grid) for the given windows, eval mode.
std::vector<std::vector<double>> predict(const ModelBundle& bundle, const data::SubjectRecord& rec,
                                         const std::vector<std::size_t>& window_ids,
                                         std::size_t batch_size = 64);

void save_checkpoint(const ModelBundle& bundle, const std::filesystem::path& path);
ModelBundle load_checkpoint(const std::filesystem::path& path);

}  // namespace arterialnet::model
