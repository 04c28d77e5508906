// Subject recordings on disk and the preprocessed window dataset.
//
// Raw layout: one directory per subject holding one file per channel, either
// `<name>.csv` with header `t_seconds,value` or `<name>.f64` (raw
// little-endian float64) next to `<name>.meta` (key=value: rate, label,
// units). The channel labelled `abp` is the reference; the remaining channels
// are inputs, ordered by file name.
//
// Preprocessed layout (see README): dataset.txt, subjects.bin, windows.bin,
// windows.idx.
#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "arterialnet/io.hpp"
#include "arterialnet/signal.hpp"

namespace arterialnet::data {

using signal::CardiacCycle;
using signal::Waveform;

struct RawSubject {
  std::string subject_id;
  std::vector<Waveform> channels;  // pulsatile inputs
  Waveform abp;                    // mmHg
};

RawSubject load_raw_subject(const std::filesystem::path& dir);
// Writes every channel as .f64 + .meta.
void write_raw_subject(const RawSubject& subject, const std::filesystem::path& dir);
// Subject directories below `root`, sorted by name.
std::vector<std::filesystem::path> subject_dirs(const std::filesystem::path& root);

struct PreprocessConfig {
  std::string filter = "fir";  // fir | iir
  double low = 0.5;            // Hz
  double high = 8.0;           // Hz
  double max_lag = 0.5;        // s, search range of the input-to-ABP alignment
  std::size_t cycles_per_window = 4;
  std::size_t stride = 1;      // cycles
  std::size_t window_len = 512;

  void validate() const;
  static PreprocessConfig from(const io::KeyValues& kv);
  void write(io::KeyValues& kv) const;
};

struct Window {
  std::size_t first_cycle = 0;  // index into SubjectRecord::input_cycles
  std::size_t start = 0;        // native samples [start, end)
  std::size_t end = 0;
  std::vector<double> inputs;   // channels x window_len, resampled
  std::vector<double> target;   // window_len, resampled ABP in mmHg
  std::array<double, signal::kMorphologyFeatures> morphology{};  // mean over the window's cycles
  double ptt = 0.0;             // mean PTT of the window's beats (s); 0 without a distal channel

  std::size_t length() const { return end - start; }
};

struct SubjectRecord {
  std::string subject_id;
  std::vector<Waveform> channels;             // filtered and aligned inputs
  Waveform abp;                               // aligned reference
  std::vector<CardiacCycle> cycles;           // reference cycles on abp
  std::vector<CardiacCycle> input_cycles;     // cycles of channels[0]; windows follow these
  std::vector<Window> windows;
  std::size_t window_len = 0;
  std::size_t cycles_per_window = 0;
  double lag_seconds = 0.0;                   // alignment applied to the inputs

  double rate() const { return abp.rate; }
  std::size_t num_channels() const { return channels.size(); }
};

// Filter, align (inputs shifted onto the ABP clock), segment and window.
SubjectRecord preprocess(const RawSubject& raw, const PreprocessConfig& config);

// Windows of `cycles_per_window` consecutive input cycles, `stride` apart,
// resampled to `window_len`.
std::vector<Window> build_windows(const SubjectRecord& record, const PreprocessConfig& config);

struct Dataset {
  PreprocessConfig config;
  std::vector<SubjectRecord> subjects;

  const SubjectRecord& subject(const std::string& id) const;
};

void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);
bool is_preprocessed(const std::filesystem::path& dir);

}  // namespace arterialnet::data
