#include "arterialnet/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace arterialnet::data {

namespace fs = std::filesystem;

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

Waveform load_csv_channel(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw io::FormatError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "t_seconds,value") {
    throw io::FormatError(path.string() + ": expected header 't_seconds,value'");
  }
  std::vector<double> t, v;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto parts = io::split(line, ',');
    if (parts.size() != 2) {
      throw io::FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 2 fields");
    }
    try {
      t.push_back(std::stod(parts[0]));
      v.push_back(std::stod(parts[1]));
    } catch (const std::exception&) {
      throw io::FormatError(path.string() + ":" + std::to_string(lineno) + ": bad number");
    }
  }
  if (t.size() < 2) throw io::FormatError(path.string() + ": fewer than two samples");
  const double dt = (t.back() - t.front()) / static_cast<double>(t.size() - 1);
  if (!(dt > 0.0)) throw io::FormatError(path.string() + ": time stamps must increase");
  for (std::size_t i = 1; i < t.size(); ++i) {
    if (std::abs((t[i] - t[i - 1]) - dt) > 1e-3 * dt) {
      throw io::FormatError(path.string() + ": non-uniform sampling at row " + std::to_string(i + 1));
    }
  }
  return Waveform(std::move(v), 1.0 / dt, path.stem().string());
}

Waveform load_f64_channel(const fs::path& path) {
  auto meta_path = path;
  meta_path.replace_extension(".meta");
  if (!fs::exists(meta_path)) throw io::FormatError(path.string() + ": missing " + meta_path.string());
  const auto meta = io::KeyValues::load(meta_path);
  const double rate = meta.get_double("rate", 0.0);
  const std::string label = meta.get("label", path.stem().string());
  meta.get("units", "");
  const auto bytes = io::read_text(path);
  if (bytes.size() % sizeof(double) != 0) {
    throw io::FormatError(path.string() + ": size is not a multiple of 8 bytes");
  }
  std::vector<double> v(bytes.size() / sizeof(double));
  std::memcpy(v.data(), bytes.data(), bytes.size());
  return Waveform(std::move(v), rate, label);
}

}  // namespace

std::vector<fs::path> subject_dirs(const fs::path& root) {
  if (!fs::is_directory(root)) throw io::FormatError("not a directory: " + root.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

RawSubject load_raw_subject(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto ext = e.path().extension();
    if (e.is_regular_file() && (ext == ".csv" || ext == ".f64")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());

  RawSubject raw;
  raw.subject_id = dir.filename().string();
  bool have_abp = false;
  for (const auto& f : files) {
    auto w = f.extension() == ".csv" ? load_csv_channel(f) : load_f64_channel(f);
    w.validate();
    if (lower(w.label) == "abp") {
      if (have_abp) throw io::FormatError(dir.string() + ": more than one abp channel");
      raw.abp = std::move(w);
      have_abp = true;
    } else {
      raw.channels.push_back(std::move(w));
    }
  }
  if (!have_abp) throw io::FormatError(dir.string() + ": no abp channel");
  if (raw.channels.empty()) throw io::FormatError(dir.string() + ": no input channel");

  // Bring every input onto the ABP rate and a common length.
  std::size_t n = raw.abp.size();
  for (auto& ch : raw.channels) {
    if (ch.rate != raw.abp.rate) {
      const auto len = static_cast<std::size_t>(
          std::llround(static_cast<double>(ch.size()) * raw.abp.rate / ch.rate));
      ch = Waveform(signal::resample_linear(ch.samples, len), raw.abp.rate, ch.label);
    }
    n = std::min(n, ch.size());
  }
  raw.abp.samples.resize(n);
  for (auto& ch : raw.channels) ch.samples.resize(n);
  return raw;
}

void write_raw_subject(const RawSubject& subject, const fs::path& dir) {
  fs::create_directories(dir);
  auto write_channel = [&](const Waveform& w, const std::string& units) {
    const auto base = dir / w.label;
    std::ofstream out(base.string() + ".f64", std::ios::binary);
    out.write(reinterpret_cast<const char*>(w.samples.data()),
              static_cast<std::streamsize>(w.samples.size() * sizeof(double)));
    io::write_text(base.string() + ".meta", "rate=" + io::format_double(w.rate) +
                                                "\nlabel=" + w.label + "\nunits=" + units + "\n");
  };
  write_channel(subject.abp, "mmHg");
  for (const auto& ch : subject.channels) write_channel(ch, "au");
}

void PreprocessConfig::validate() const {
  if (filter != "fir" && filter != "iir") {
    throw io::ConfigError("filter must be 'fir' or 'iir', got '" + filter + "'");
  }
  if (!(low > 0.0 && low < high)) throw io::ConfigError("band must satisfy 0 < low < high");
  if (!(max_lag >= 0.0)) throw io::ConfigError("max_lag must be >= 0");
  if (cycles_per_window < 1) throw io::ConfigError("cycles_per_window must be >= 1");
  if (stride < 1) throw io::ConfigError("stride must be >= 1");
  if (window_len < 8) throw io::ConfigError("window_len must be >= 8");
}

PreprocessConfig PreprocessConfig::from(const io::KeyValues& kv) {
  PreprocessConfig c;
  c.filter = kv.get("filter", c.filter);
  const bool iir = c.filter == "iir";
  c.low = kv.get_double("low", iir ? 0.6 : 0.5);
  c.high = kv.get_double("high", iir ? 3.0 : 8.0);
  c.max_lag = kv.get_double("max_lag", c.max_lag);
  c.cycles_per_window = static_cast<std::size_t>(kv.get_int("cycles_per_window", 4));
  c.stride = static_cast<std::size_t>(kv.get_int("stride", 1));
  c.window_len = static_cast<std::size_t>(kv.get_int("window_len", 128));
  c.validate();
  return c;
}

void PreprocessConfig::write(io::KeyValues& kv) const {
  kv.set("filter", filter);
  kv.set("low", io::format_double(low));
  kv.set("high", io::format_double(high));
  kv.set("max_lag", io::format_double(max_lag));
  kv.set("cycles_per_window", std::to_string(cycles_per_window));
  kv.set("stride", std::to_string(stride));
  kv.set("window_len", std::to_string(window_len));
}

SubjectRecord preprocess(const RawSubject& raw, const PreprocessConfig& config) {
  config.validate();
  if (raw.channels.empty()) throw signal::SignalError(raw.subject_id + ": no input channel");

  std::vector<Waveform> filtered;
  for (const auto& ch : raw.channels) {
    filtered.push_back(config.filter == "fir"
                           ? signal::bandpass_fir(ch, config.low, config.high)
                           : signal::bandpass_iir_zero_phase(ch, config.low, config.high));
  }
  const auto al = signal::align_phase(raw.abp, filtered[0], config.max_lag);

  SubjectRecord rec;
  rec.subject_id = raw.subject_id;
  rec.abp = al.reference;
  rec.lag_seconds = al.lag_seconds;
  for (const auto& ch : filtered) {
    rec.channels.push_back(signal::shift_and_trim(ch, al.lag_samples, al.reference.size()));
  }
  rec.cycles = signal::segment_cycles(rec.abp);
  rec.input_cycles = signal::segment_cycles(rec.channels[0]);
  rec.window_len = config.window_len;
  rec.cycles_per_window = config.cycles_per_window;
  rec.windows = build_windows(rec, config);
  if (rec.windows.empty()) {
    throw signal::SignalError(raw.subject_id + ": recording too short for one window");
  }
  return rec;
}

std::vector<Window> build_windows(const SubjectRecord& rec, const PreprocessConfig& config) {
  const double rate = rec.rate();
  const auto& cycles = rec.input_cycles;
  const std::size_t k = config.cycles_per_window;

  signal::PttResult ptt;
  if (rec.channels.size() >= 2) {
    try {
      ptt = signal::compute_ptt(rec.channels[0], cycles, rec.channels[1],
                                signal::segment_cycles(rec.channels[1]));
    } catch (const signal::SignalError&) {
      ptt = {};
    }
  }

  std::vector<signal::MorphologyVector> morph;
  morph.reserve(cycles.size());
  const std::span<const double> primary(rec.channels[0].samples);
  for (const auto& c : cycles) {
    morph.push_back(c.length() >= 5 ? signal::morphology_features(
                                          primary.subspan(c.start_idx, c.length()), rate)
                                    : signal::MorphologyVector{{}, true});
  }

  std::vector<Window> out;
  for (std::size_t first = 0; first + k <= cycles.size(); first += config.stride) {
    Window w;
    w.first_cycle = first;
    w.start = cycles[first].start_idx;
    w.end = cycles[first + k - 1].end_idx;
    for (const auto& ch : rec.channels) {
      auto r = signal::resample_linear(
          std::span<const double>(ch.samples).subspan(w.start, w.length()), config.window_len);
      w.inputs.insert(w.inputs.end(), r.begin(), r.end());
    }
    w.target = signal::resample_linear(
        std::span<const double>(rec.abp.samples).subspan(w.start, w.length()), config.window_len);
    for (std::size_t c = first; c < first + k; ++c) {
      for (std::size_t f = 0; f < signal::kMorphologyFeatures; ++f) {
        w.morphology[f] += morph[c].values[f] / static_cast<double>(k);
      }
    }
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < ptt.ptt.size(); ++i) {
      if (ptt.proximal_idx[i] >= w.start && ptt.proximal_idx[i] < w.end) {
        sum += ptt.ptt[i];
        ++count;
      }
    }
    w.ptt = count ? sum / static_cast<double>(count) : 0.0;
    out.push_back(std::move(w));
  }
  return out;
}

const SubjectRecord& Dataset::subject(const std::string& id) const {
  for (const auto& s : subjects) {
    if (s.subject_id == id) return s;
  }
  throw io::ConfigError("unknown subject '" + id + "'");
}

namespace {

std::vector<double> flatten_cycles(const std::vector<CardiacCycle>& cycles) {
  std::vector<double> out;
  out.reserve(cycles.size() * 6);
  for (const auto& c : cycles) {
    out.insert(out.end(), {static_cast<double>(c.start_idx), static_cast<double>(c.end_idx),
                           static_cast<double>(c.sbp_idx), static_cast<double>(c.dbp_idx),
                           c.sbp_value, c.dbp_value});
  }
  return out;
}

std::vector<CardiacCycle> unflatten_cycles(const std::vector<double>& v) {
  if (v.size() % 6 != 0) throw io::FormatError("cycle table size is not a multiple of 6");
  std::vector<CardiacCycle> out(v.size() / 6);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double* p = v.data() + 6 * i;
    out[i] = {static_cast<std::size_t>(p[0]), static_cast<std::size_t>(p[1]),
              static_cast<std::size_t>(p[2]), static_cast<std::size_t>(p[3]), p[4], p[5]};
  }
  return out;
}

constexpr const char* kFormat = "arterialnet-windows";
constexpr long kVersion = 1;

}  // namespace

bool is_preprocessed(const fs::path& dir) { return fs::exists(dir / "dataset.txt"); }

void save_dataset(const Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  io::KeyValues header;
  header.set("format", kFormat);
  header.set("version", std::to_string(kVersion));
  ds.config.write(header);
  std::string ids;
  std::size_t total = 0;
  for (const auto& s : ds.subjects) {
    ids += (ids.empty() ? "" : ",") + s.subject_id;
    total += s.windows.size();
  }
  header.set("subjects", ids);
  header.set("windows", std::to_string(total));

  std::ofstream sb(dir / "subjects.bin", std::ios::binary);
  std::ofstream wb(dir / "windows.bin", std::ios::binary);
  std::ostringstream idx;
  for (const auto& s : ds.subjects) {
    io::write_string(sb, s.subject_id);
    io::write_f64(sb, s.rate());
    io::write_f64(sb, s.lag_seconds);
    io::write_u64(sb, s.channels.size());
    for (const auto& ch : s.channels) {
      io::write_string(sb, ch.label);
      io::write_array(sb, ch.samples);
    }
    io::write_string(sb, s.abp.label);
    io::write_array(sb, s.abp.samples);
    io::write_array(sb, flatten_cycles(s.cycles));
    io::write_array(sb, flatten_cycles(s.input_cycles));

    for (std::size_t i = 0; i < s.windows.size(); ++i) {
      const auto& w = s.windows[i];
      idx << s.subject_id << ' ' << i << ' ' << w.first_cycle << ' ' << w.start << ' ' << w.end
          << ' ' << static_cast<long long>(wb.tellp()) << '\n';
      const std::vector<double> meta{static_cast<double>(w.first_cycle),
                                     static_cast<double>(w.start), static_cast<double>(w.end),
                                     w.ptt};
      io::write_array(wb, meta);
      io::write_array(wb, w.inputs);
      io::write_array(wb, w.target);
      io::write_array(wb, w.morphology);
    }
  }
  if (!sb || !wb) throw std::runtime_error("failed writing dataset to " + dir.string());
  io::write_text(dir / "windows.idx", idx.str());
  io::write_text(dir / "dataset.txt", header.to_text());
}

Dataset load_dataset(const fs::path& dir) {
  if (!is_preprocessed(dir)) throw io::FormatError(dir.string() + ": no dataset.txt");
  const auto header = io::KeyValues::load(dir / "dataset.txt");
  if (header.get("format", "") != kFormat) throw io::FormatError("not a window dataset");
  if (header.get_int("version", 0) != kVersion) throw io::FormatError("unsupported dataset version");
  Dataset ds;
  ds.config = PreprocessConfig::from(header);

  std::map<std::string, std::size_t> counts;
  {
    std::istringstream idx(io::read_text(dir / "windows.idx"));
    std::string line;
    while (std::getline(idx, line)) {
      std::istringstream ls(line);
      std::string id;
      std::size_t i, fc, st, en;
      long long off;
      if (!(ls >> id >> i >> fc >> st >> en >> off)) throw io::FormatError("bad windows.idx line");
      ++counts[id];
    }
  }

  std::ifstream sb(dir / "subjects.bin", std::ios::binary);
  std::ifstream wb(dir / "windows.bin", std::ios::binary);
  if (!sb || !wb) throw io::FormatError(dir.string() + ": missing binary files");
  for (const auto& id : io::split(header.get("subjects", ""), ',')) {
    SubjectRecord s;
    s.subject_id = io::read_string(sb);
    if (s.subject_id != id) throw io::FormatError("subject order mismatch at '" + id + "'");
    const double rate = io::read_f64(sb);
    s.lag_seconds = io::read_f64(sb);
    const auto nch = io::read_u64(sb);
    for (std::uint64_t c = 0; c < nch; ++c) {
      auto label = io::read_string(sb);
      s.channels.emplace_back(io::read_array(sb), rate, std::move(label));
    }
    auto abp_label = io::read_string(sb);
    s.abp = Waveform(io::read_array(sb), rate, std::move(abp_label));
    s.cycles = unflatten_cycles(io::read_array(sb));
    s.input_cycles = unflatten_cycles(io::read_array(sb));
    s.window_len = ds.config.window_len;
    s.cycles_per_window = ds.config.cycles_per_window;
    for (std::size_t i = 0; i < counts[id]; ++i) {
      Window w;
      const auto meta = io::read_array(wb);
      if (meta.size() != 4) throw io::FormatError("bad window header");
      w.first_cycle = static_cast<std::size_t>(meta[0]);
      w.start = static_cast<std::size_t>(meta[1]);
      w.end = static_cast<std::size_t>(meta[2]);
      w.ptt = meta[3];
      w.inputs = io::read_array(wb);
      w.target = io::read_array(wb);
      const auto m = io::read_array(wb);
      if (m.size() != signal::kMorphologyFeatures || w.target.size() != s.window_len ||
          w.inputs.size() != s.window_len * s.channels.size()) {
        throw io::FormatError("window size mismatch for subject '" + id + "'");
      }
      std::copy(m.begin(), m.end(), w.morphology.begin());
      s.windows.push_back(std::move(w));
    }
    ds.subjects.push_back(std::move(s));
  }
  const auto expected = static_cast<std::size_t>(header.get_int("windows", 0));
  std::size_t total = 0;
  for (const auto& s : ds.subjects) total += s.windows.size();
  if (total != expected) throw io::FormatError("window count does not match windows.idx");
  return ds;
}

}  // namespace arterialnet::data
