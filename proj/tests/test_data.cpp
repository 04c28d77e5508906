#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "arterialnet/dataset.hpp"
#include "arterialnet/synthetic.hpp"
#include "doctest.h"

using namespace arterialnet;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("arterialnet_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

synth::SubjectProfile clean_profile() {
  synth::SubjectProfile p;
  p.noise = 0.0;
  p.drift = 0.0;
  p.damping = 0.0;
  p.gain = 1.0;
  p.delay = 0.0;
  return p;
}

}  // namespace

TEST_CASE("identity transfer reproduces the ABP exactly") {
  auto s = synth::generate_subject(clean_profile(), 30.0, 125.0, 1);
  REQUIRE(s.raw.channels.size() == 2);
  CHECK(s.raw.channels[0].samples == s.raw.abp.samples);
  CHECK(s.raw.channels[0].rate == s.raw.abp.rate);
  CHECK(s.raw.channels[1].size() == s.raw.abp.size());
}

TEST_CASE("a 60 ms transfer delay is recovered as PTT") {
  auto p = clean_profile();
  p.delay = 0.060;
  auto s = synth::generate_subject(p, 60.0, 125.0, 2);
  const auto& abp = s.raw.abp;
  const auto& ppg = s.raw.channels[0];
  auto r = signal::compute_ptt(abp, signal::segment_cycles(abp), ppg, signal::segment_cycles(ppg));
  REQUIRE(r.ptt.size() > 50);
  for (double v : r.ptt) CHECK(std::abs(v - 0.060) <= 1.0 / 125.0 + 1e-9);
}

TEST_CASE("stored beat maxima match segmentation beat for beat") {
  auto s = synth::generate_subject(synth::SubjectProfile{}, 120.0, 125.0, 3);
  auto cycles = signal::segment_cycles(s.raw.abp);
  REQUIRE(cycles.size() + 2 >= s.beats.size());
  std::size_t matched = 0;
  for (const auto& c : cycles) {
    for (const auto& b : s.beats) {
      if (b.peak_idx == c.sbp_idx) {
        CHECK(b.sbp_sampled == c.sbp_value);
        ++matched;
      }
    }
  }
  CHECK(matched == cycles.size());
}

TEST_CASE("beat maxima follow the commanded trajectory within 0.5 mmHg") {
  auto s = synth::generate_subject(synth::SubjectProfile{}, 300.0, 125.0, 4);
  REQUIRE(!s.beats.empty());
  for (const auto& b : s.beats) CHECK(std::abs(b.sbp_sampled - b.sbp_commanded) <= 0.5);
}

TEST_CASE("pressor trajectory phases") {
  CHECK(synth::pressor_level(0.0) == 0.0);
  CHECK(synth::pressor_level(0.05) == 0.0);
  CHECK(synth::pressor_level(0.5) == 1.0);
  CHECK(synth::pressor_level(1.0) == doctest::Approx(0.0));
  CHECK(synth::pressor_level(0.25) > 0.0);
  CHECK(synth::pressor_level(0.25) < 1.0);
}

TEST_CASE("invalid profiles are rejected") {
  synth::SubjectProfile p;
  p.sbp_base = 70.0;
  CHECK_THROWS_AS(synth::generate_subject(p, 30.0, 125.0, 1), std::invalid_argument);
  p = {};
  p.heart_rate = 5.0;
  CHECK_THROWS_AS(synth::generate_subject(p, 30.0, 125.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(synth::generate_subject({}, 1.0, 125.0, 1), std::invalid_argument);
}

TEST_CASE("cohort generation") {
  synth::CohortSpec spec;
  auto a = synth::generate_cohort(5, spec, 20.0, 125.0, 9);
  auto b = synth::generate_cohort(5, spec, 20.0, 125.0, 9);
  REQUIRE(a.size() == 5);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].raw.abp.samples == b[i].raw.abp.samples);
    CHECK(a[i].raw.channels[0].samples == b[i].raw.channels[0].samples);
    for (std::size_t j = 0; j < i; ++j) CHECK(a[i].profile.sbp_base != a[j].profile.sbp_base);
  }
  spec.variability = 0.0;
  auto same = synth::generate_cohort(3, spec, 20.0, 125.0, 9);
  CHECK(same[0].raw.abp.samples == same[2].raw.abp.samples);
  CHECK(same[0].raw.channels[1].samples == same[1].raw.channels[1].samples);
  CHECK_THROWS(synth::generate_cohort(1, spec, 20.0, 125.0, 9));
}

TEST_CASE("raw subject files round trip") {
  auto dir = scratch("raw");
  auto s = synth::generate_subject(synth::SubjectProfile{}, 20.0, 125.0, 5, "S7");
  synth::write_subject(s, dir / "S7");
  auto raw = data::load_raw_subject(dir / "S7");
  CHECK(raw.subject_id == "S7");
  CHECK(raw.abp.samples == s.raw.abp.samples);
  REQUIRE(raw.channels.size() == 2);
  CHECK(raw.channels[0].label == "ppg_distal");
  CHECK(raw.channels[1].samples == s.raw.channels[0].samples);
  CHECK(raw.abp.rate == 125.0);
}

TEST_CASE("csv channels load with their rate") {
  auto dir = scratch("csv") / "P1";
  fs::create_directories(dir);
  {
    std::ofstream abp(dir / "abp.csv");
    std::ofstream ppg(dir / "ppg.csv");
    abp << "t_seconds,value\n";
    ppg << "t_seconds,value\n";
    for (int i = 0; i < 500; ++i) {
      abp << i / 100.0 << ',' << 80 + 40 * std::sin(i * 0.06) << '\n';
      ppg << i / 100.0 << ',' << std::sin(i * 0.06 - 0.3) << '\n';
    }
  }
  auto raw = data::load_raw_subject(dir);
  CHECK(raw.abp.rate == doctest::Approx(100.0));
  CHECK(raw.abp.size() == 500);
  CHECK(raw.channels.size() == 1);
  {
    std::ofstream bad(dir / "x.csv");
    bad << "time,value\n0,1\n";
  }
  CHECK_THROWS_AS(data::load_raw_subject(dir), io::FormatError);
}

TEST_CASE("preprocessing yields windows of whole cycles") {
  auto s = synth::generate_subject(synth::SubjectProfile{}, 60.0, 125.0, 6);
  data::PreprocessConfig cfg;
  auto rec = data::preprocess(s.raw, cfg);
  REQUIRE(!rec.windows.empty());
  CHECK(rec.abp.size() == rec.channels[0].size());
  CHECK(rec.windows.size() == rec.input_cycles.size() - cfg.cycles_per_window + 1);
  for (std::size_t i = 0; i < rec.windows.size(); ++i) {
    const auto& w = rec.windows[i];
    CHECK(w.first_cycle == i);
    CHECK(w.start == rec.input_cycles[i].start_idx);
    CHECK(w.end == rec.input_cycles[i + cfg.cycles_per_window - 1].end_idx);
    CHECK(w.target.size() == cfg.window_len);
    CHECK(w.inputs.size() == cfg.window_len * rec.channels.size());
    CHECK(w.ptt > 0.0);
    CHECK(w.morphology[0] > 0.0);
  }
  // The filtered input is shifted onto the ABP clock: the transfer delay is undone.
  CHECK(rec.lag_seconds == doctest::Approx(s.profile.delay + s.profile.damping).epsilon(0.5));
}

TEST_CASE("dataset files round trip") {
  auto dir = scratch("ds");
  data::Dataset ds;
  for (int i = 0; i < 2; ++i) {
    auto s = synth::generate_subject(synth::SubjectProfile{}, 30.0, 125.0, 10 + i,
                                     "S" + std::to_string(i + 1));
    ds.subjects.push_back(data::preprocess(s.raw, ds.config));
  }
  data::save_dataset(ds, dir);
  CHECK(data::is_preprocessed(dir));
  auto back = data::load_dataset(dir);
  REQUIRE(back.subjects.size() == 2);
  std::size_t lines = 0;
  {
    std::ifstream idx(dir / "windows.idx");
    std::string line;
    while (std::getline(idx, line)) ++lines;
  }
  CHECK(lines == ds.subjects[0].windows.size() + ds.subjects[1].windows.size());
  for (std::size_t s = 0; s < 2; ++s) {
    const auto& a = ds.subjects[s];
    const auto& b = back.subjects[s];
    CHECK(a.subject_id == b.subject_id);
    CHECK(a.abp.samples == b.abp.samples);
    CHECK(a.channels[1].samples == b.channels[1].samples);
    CHECK(a.cycles.size() == b.cycles.size());
    REQUIRE(a.windows.size() == b.windows.size());
    for (std::size_t i = 0; i < a.windows.size(); ++i) {
      CHECK(a.windows[i].inputs == b.windows[i].inputs);
      CHECK(a.windows[i].target == b.windows[i].target);
      CHECK(a.windows[i].morphology == b.windows[i].morphology);
      CHECK(a.windows[i].ptt == b.windows[i].ptt);
    }
  }
}
