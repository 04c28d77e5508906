// arterialnet: synthetic data, preprocessing, training, evaluation and
// ablation from the command line.
//
// Every command takes key=value configuration (--config FILE, then --set
// key=value and the dedicated flags, later sources winning) and writes
// manifest.txt into its output directory. The manifest echoes the full
// effective configuration, so
//
//   arterialnet <command> --config out/manifest.txt --out rerun/
//
// repeats the run. Exit codes: 0 success, 1 runtime failure, 2 config error.
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "arterialnet/ablation.hpp"
#include "arterialnet/dataset.hpp"
#include "arterialnet/evaluation.hpp"
#include "arterialnet/io.hpp"
#include "arterialnet/models.hpp"
#include "arterialnet/synthetic.hpp"
#include "arterialnet/training.hpp"

namespace fs = std::filesystem;
using namespace arterialnet;

namespace {

struct Options {
  std::vector<std::string> configs;
  std::vector<std::string> sets;
  std::map<std::string, std::string> flags;  // key -> value from dedicated flags
  std::string out;
};

// Effective configuration of one invocation plus the manifest being built.
struct Run {
  std::string command;
  io::KeyValues kv;
  io::KeyValues echo;
  std::vector<std::pair<std::string, std::string>> inputs;  // path, digest
  fs::path out;

  void input(const fs::path& p) {
    const auto digest = fs::is_directory(p) ? io::tree_digest(p) : io::file_digest(p);
    inputs.emplace_back(p.generic_string(), io::hex64(digest));
  }

  std::string path_key(const std::string& key) {
    const auto v = kv.get(key, "");
    if (v.empty()) throw io::ConfigError(key + " is required");
    echo.set(key, v);
    return v;
  }
};

Run make_run(const std::string& command, const Options& o) {
  Run r;
  r.command = command;
  for (const auto& c : o.configs) r.kv.merge(io::KeyValues::load(c));
  io::KeyValues overrides;
  for (const auto& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw io::ConfigError("--set expects key=value, got '" + s + "'");
    overrides.set(s.substr(0, eq), s.substr(eq + 1));
  }
  for (const auto& [k, v] : o.flags) overrides.set(k, v);
  r.kv.merge(overrides);
  const auto cmd = r.kv.get("run.command", command);
  if (cmd != command) throw io::ConfigError("configuration is for '" + cmd + "', not '" + command + "'");
  r.echo.set("run.command", command);
  if (o.out.empty()) throw io::ConfigError("--out is required");
  r.out = o.out;
  return r;
}

void write_manifest(const Run& r, std::uint64_t seed) {
  std::string text = "# arterialnet " + r.command + " run manifest\n";
  text += "# seed " + std::to_string(seed) + "\n";
  for (const auto& [path, digest] : r.inputs) text += "# input " + path + " " + digest + "\n";
  text += r.echo.to_text();
  io::write_text(r.out / "manifest.txt", text);
}

// PreprocessConfig keys live under preprocess.* on the command line.
const std::vector<std::string> kPreprocessKeys{"filter", "low", "high", "max_lag",
                                               "cycles_per_window", "stride", "window_len"};

data::PreprocessConfig preprocess_config(Run& r) {
  io::KeyValues sub;
  for (const auto& k : kPreprocessKeys) {
    if (r.kv.contains("preprocess." + k)) sub.set(k, r.kv.get("preprocess." + k, ""));
  }
  const auto cfg = data::PreprocessConfig::from(sub);
  io::KeyValues written;
  cfg.write(written);
  for (const auto& [k, v] : written.entries()) r.echo.set("preprocess." + k, v);
  return cfg;
}

train::TrainConfig train_config(Run& r) {
  const auto profile = r.kv.get("train.profile", "paper");
  if (profile != "paper" && profile != "desk") {
    throw io::ConfigError("train.profile must be 'paper' or 'desk', got '" + profile + "'");
  }
  const auto cfg = train::TrainConfig::from(r.kv, profile == "desk" ? train::TrainConfig::desk() : train::TrainConfig{});
  r.echo.set("train.profile", profile);
  cfg.write(r.echo);
  return cfg;
}

double split_fraction(Run& r) {
  const double f = r.kv.get_double("run.split", 0.8);
  if (!(f > 0.0 && f < 1.0)) throw io::ConfigError("run.split must lie in (0, 1)");
  r.echo.set("run.split", io::format_double(f));
  return f;
}

data::Dataset load_data(Run& r) {
  const fs::path dir = r.path_key("run.data");
  if (!data::is_preprocessed(dir)) throw io::ConfigError(dir.string() + " is not a preprocessed dataset");
  r.input(dir);
  return data::load_dataset(dir);
}

// run.subjects (comma list) or every subject accepted by `keep`.
std::vector<const data::SubjectRecord*> select_subjects(Run& r, const data::Dataset& ds,
                                                        const std::function<bool(const std::string&)>& keep) {
  const auto list = r.kv.get("run.subjects", "");
  std::vector<const data::SubjectRecord*> out;
  if (!list.empty()) {
    for (const auto& id : io::split(list, ',')) {
      try {
        out.push_back(&ds.subject(id));
      } catch (const std::exception&) {
        throw io::ConfigError("run.subjects: unknown subject '" + id + "'");
      }
    }
    r.echo.set("run.subjects", list);
  } else {
    for (const auto& s : ds.subjects) {
      if (keep(s.subject_id)) out.push_back(&s);
    }
  }
  if (out.empty()) throw io::ConfigError("no subjects selected");
  return out;
}

model::ModelBundle load_model(Run& r, const std::string& key, const data::Dataset& ds) {
  const fs::path path = r.path_key(key);
  r.input(path);
  auto bundle = model::load_checkpoint(path);
  if (bundle.config.backbone.window_len != ds.config.window_len) {
    throw io::ConfigError(path.string() + " expects windows of " + std::to_string(bundle.config.backbone.window_len) +
                          " samples, dataset has " + std::to_string(ds.config.window_len));
  }
  return bundle;
}

void prepare_out(const Run& r) {
  for (const auto& [path, digest] : r.inputs) {
    std::error_code ec;
    if (fs::exists(r.out) && fs::equivalent(r.out, path, ec)) {
      throw io::ConfigError("--out must differ from the input " + path);
    }
  }
  fs::create_directories(r.out);
}

int cmd_synth(Run& r) {
  const long n = r.kv.get_int("synth.subjects", 5);
  if (n < 2) throw io::ConfigError("synth.subjects must be >= 2 (a cohort needs a holdout), got " + std::to_string(n));
  const double duration = r.kv.get_double("synth.duration", 1800.0);
  const double rate = r.kv.get_double("synth.rate", 125.0);
  const auto seed = r.kv.get_u64("synth.seed", 0);
  if (!(duration > 0.0) || !(rate > 0.0)) throw io::ConfigError("synth.duration and synth.rate must be positive");
  synth::CohortSpec spec;
  spec.variability = r.kv.get_double("synth.variability", spec.variability);
  auto& p = spec.base;
  p.noise = r.kv.get_double("synth.noise", p.noise);
  p.drift = r.kv.get_double("synth.drift", p.drift);
  p.gain = r.kv.get_double("synth.gain", p.gain);
  p.delay = r.kv.get_double("synth.delay", p.delay);
  p.damping = r.kv.get_double("synth.damping", p.damping);
  p.heart_rate = r.kv.get_double("synth.heart_rate", p.heart_rate);
  p.distal_channel = r.kv.get_bool("synth.distal_channel", p.distal_channel);
  if (!(spec.variability >= 0.0)) throw io::ConfigError("synth.variability must be >= 0");
  try {
    p.validate();
  } catch (const std::invalid_argument& e) {
    throw io::ConfigError(e.what());
  }
  r.kv.reject_unknown();

  r.echo.set("synth.subjects", std::to_string(n));
  r.echo.set("synth.duration", io::format_double(duration));
  r.echo.set("synth.rate", io::format_double(rate));
  r.echo.set("synth.seed", std::to_string(seed));
  r.echo.set("synth.variability", io::format_double(spec.variability));
  r.echo.set("synth.noise", io::format_double(p.noise));
  r.echo.set("synth.drift", io::format_double(p.drift));
  r.echo.set("synth.gain", io::format_double(p.gain));
  r.echo.set("synth.delay", io::format_double(p.delay));
  r.echo.set("synth.damping", io::format_double(p.damping));
  r.echo.set("synth.heart_rate", io::format_double(p.heart_rate));
  r.echo.set("synth.distal_channel", p.distal_channel ? "true" : "false");

  prepare_out(r);
  const auto cohort = synth::generate_cohort(static_cast<std::size_t>(n), spec, duration, rate, seed);
  for (const auto& s : cohort) synth::write_subject(s, r.out / s.raw.subject_id);
  write_manifest(r, seed);
  std::cout << "subjects: " << cohort.size() << "\n";
  return 0;
}

int cmd_preprocess(Run& r) {
  const fs::path in = r.path_key("run.input");
  if (data::is_preprocessed(in)) throw io::ConfigError(in.string() + " is already preprocessed");
  const auto cfg = preprocess_config(r);
  r.kv.reject_unknown();
  r.input(in);
  const auto dirs = data::subject_dirs(in);
  if (dirs.empty()) throw std::runtime_error(in.string() + ": no subject directories");
  prepare_out(r);

  data::Dataset ds;
  ds.config = cfg;
  std::size_t windows = 0;
  for (const auto& d : dirs) {
    ds.subjects.push_back(data::preprocess(data::load_raw_subject(d), cfg));
    windows += ds.subjects.back().windows.size();
    std::cerr << ds.subjects.back().subject_id << ": " << ds.subjects.back().windows.size() << " windows\n";
  }
  data::save_dataset(ds, r.out);
  write_manifest(r, 0);
  std::cout << "windows: " << windows << "\n";
  return 0;
}

int cmd_pretrain(Run& r) {
  const auto ds = load_data(r);
  if (!r.kv.contains("model.window_len")) r.kv.set("model.window_len", std::to_string(ds.config.window_len));
  const auto mc = model::ModelConfig::from(r.kv);
  if (mc.backbone.window_len != ds.config.window_len) {
    throw io::ConfigError("model.window_len must equal the dataset window length " + std::to_string(ds.config.window_len));
  }
  mc.write(r.echo);
  const auto cfg = train_config(r);
  auto cohort = select_subjects(r, ds, [](const std::string&) { return true; });
  const auto holdout = r.kv.get("run.holdout", cohort.back()->subject_id);
  r.echo.set("run.holdout", holdout);
  r.kv.reject_unknown();

  prepare_out(r);
  const auto result = train::pretrain_cohort(cohort, holdout, model::init_bundle(mc, cfg.seed), cfg);
  model::save_checkpoint(result.bundle, r.out / "model.ckpt");
  train::write_epoch_csv(result, r.out / "epochs.csv");
  train::write_step_csv(result, r.out / "steps.csv");
  write_manifest(r, cfg.seed);
  std::cout << "best epoch: " << result.best_epoch << "\n";
  return 0;
}

int cmd_finetune(Run& r) {
  const auto ds = load_data(r);
  const auto pretrained = load_model(r, "run.checkpoint", ds);
  const auto cfg = train_config(r);
  const double split = split_fraction(r);
  const auto subjects = select_subjects(r, ds, [](const std::string&) { return true; });
  r.kv.reject_unknown();

  prepare_out(r);
  for (const auto* rec : subjects) {
    const auto result = train::finetune_subject(pretrained, *rec, split, cfg);
    model::save_checkpoint(result.bundle, r.out / (rec->subject_id + ".ckpt"));
    train::write_epoch_csv(result, r.out / (rec->subject_id + "_epochs.csv"));
    train::write_step_csv(result, r.out / (rec->subject_id + "_steps.csv"));
    std::cerr << rec->subject_id << ": " << result.steps.size() << " steps\n";
  }
  write_manifest(r, cfg.seed);
  return 0;
}

int cmd_evaluate(Run& r) {
  const auto ds = load_data(r);
  const fs::path models = r.path_key("run.models");
  if (!fs::is_directory(models)) throw io::ConfigError("run.models must be a directory of checkpoints");
  const double split = split_fraction(r);
  const auto subjects =
      select_subjects(r, ds, [&](const std::string& id) { return fs::exists(models / (id + ".ckpt")); });
  const auto label = r.kv.get("run.label", "ArterialNet");
  r.echo.set("run.label", label);
  r.kv.reject_unknown();
  for (const auto* rec : subjects) r.input(models / (rec->subject_id + ".ckpt"));

  prepare_out(r);
  eval::MetricsReport report;
  std::vector<double> sbp_hat, sbp_ref, dbp_hat, dbp_ref;
  for (const auto* rec : subjects) {
    const auto bundle = model::load_checkpoint(models / (rec->subject_id + ".ckpt"));
    const auto test = train::sequential_split(*rec, split).test;
    const auto e = eval::evaluate_subject(bundle, *rec, test);
    report.subjects.push_back(e.score);
    sbp_hat.insert(sbp_hat.end(), e.vitals.sbp_hat.begin(), e.vitals.sbp_hat.end());
    sbp_ref.insert(sbp_ref.end(), e.vitals.sbp_ref.begin(), e.vitals.sbp_ref.end());
    dbp_hat.insert(dbp_hat.end(), e.vitals.dbp_hat.begin(), e.vitals.dbp_hat.end());
    dbp_ref.insert(dbp_ref.end(), e.vitals.dbp_ref.begin(), e.vitals.dbp_ref.end());

    std::string wave = "t_seconds,abp_ref,abp_pred\n";
    const auto& st = e.stitched;
    for (std::size_t i = 0; i < st.pred.size(); ++i) {
      wave += io::format_double(static_cast<double>(st.offset + i) / st.pred.rate) + ',' +
              io::format_double(st.ref.samples[i]) + ',' + io::format_double(st.pred.samples[i]) + '\n';
    }
    io::write_text(r.out / (rec->subject_id + "_waveform.csv"), wave);
  }
  io::write_text(r.out / "metrics.csv", report.to_csv());
  const auto table = eval::render_table({{label, report}});
  io::write_text(r.out / "table.txt", table);
  io::write_text(r.out / "bland_altman_sbp.csv", eval::bland_altman_csv(eval::bland_altman(sbp_hat, sbp_ref)));
  io::write_text(r.out / "bland_altman_dbp.csv", eval::bland_altman_csv(eval::bland_altman(dbp_hat, dbp_ref)));
  write_manifest(r, 0);
  std::cout << table;
  return 0;
}

std::string file_label(std::size_t index, const std::string& label) {
  std::string s;
  for (char c : label) s += std::isalnum(static_cast<unsigned char>(c)) || c == '.' ? c : '_';
  char buf[16];
  std::snprintf(buf, sizeof buf, "arm%02zu_", index + 1);
  return buf + s + ".csv";
}

int cmd_ablate(Run& r) {
  const auto ds = load_data(r);
  const auto pretrained = load_model(r, "run.checkpoint", ds);
  const auto cfg = train_config(r);
  const auto spec = ablation::AblationSpec::from(r.kv);
  spec.write(r.echo);
  const auto subjects = select_subjects(r, ds, [](const std::string&) { return true; });
  r.kv.reject_unknown();

  prepare_out(r);
  const auto result = ablation::run_ablation(spec, pretrained, subjects, cfg);
  for (std::size_t i = 0; i < result.arms.size(); ++i) {
    io::write_text(r.out / file_label(i, result.arms[i].label), result.arms[i].report.to_csv());
  }
  const auto table = ablation::summary_table(result);
  io::write_text(r.out / "summary.txt", table);
  if (spec.kind == "calibration_sweep") io::write_text(r.out / "curves.csv", ablation::curves_csv(result));
  write_manifest(r, spec.seed);
  std::cout << table;
  return 0;
}

// Flag bound to a configuration key.
void key_option(CLI::App* app, Options& o, const std::string& flag, const std::string& key, const std::string& help) {
  app->add_option_function<std::string>(flag, [&o, key](const std::string& v) { o.flags[key] = v; }, help + " [" + key + "]");
}

CLI::App* command(CLI::App& app, Options& o, const std::string& name, const std::string& help) {
  auto* sub = app.add_subcommand(name, help);
  sub->add_option("--config", o.configs, "key=value configuration file (repeatable, later wins)");
  sub->add_option("--set", o.sets, "override one key, key=value (repeatable)");
  sub->add_option("--out", o.out, "output directory")->required();
  return sub;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"arterialnet: pulsatile-to-ABP translation with cohort pretraining and per-subject finetuning"};
  app.require_subcommand(1);
  Options o;

  auto* synth = command(app, o, "synth", "generate a synthetic cohort of raw recordings");
  key_option(synth, o, "--subjects", "synth.subjects", "number of subjects (>= 2)");
  key_option(synth, o, "--duration", "synth.duration", "seconds per subject");
  key_option(synth, o, "--rate", "synth.rate", "sampling rate in Hz");
  key_option(synth, o, "--seed", "synth.seed", "random seed");
  key_option(synth, o, "--variability", "synth.variability", "scale of inter-subject spread, 0 = identical");

  auto* prep = command(app, o, "preprocess", "filter, align, segment and window raw recordings");
  key_option(prep, o, "--in", "run.input", "directory of raw subject directories");
  key_option(prep, o, "--filter", "preprocess.filter", "fir (0.5-8 Hz) or iir (0.6-3 Hz)");
  key_option(prep, o, "--low", "preprocess.low", "band-pass low edge in Hz");
  key_option(prep, o, "--high", "preprocess.high", "band-pass high edge in Hz");
  key_option(prep, o, "--window-len", "preprocess.window_len", "resampled window length");

  auto* pre = command(app, o, "pretrain", "cohort pretraining with a holdout validation subject");
  key_option(pre, o, "--data", "run.data", "preprocessed dataset");
  key_option(pre, o, "--holdout", "run.holdout", "validation subject (default: last)");
  key_option(pre, o, "--subjects", "run.subjects", "comma list of cohort subjects (default: all)");
  key_option(pre, o, "--backbone", "model.kind", "unet or transformer");
  key_option(pre, o, "--profile", "train.profile", "paper or desk hyperparameters");
  key_option(pre, o, "--epochs", "train.epochs", "training epochs");
  key_option(pre, o, "--seed", "train.seed", "initialization and shuffling seed");

  auto* fine = command(app, o, "finetune", "per-subject finetuning from a pretrained checkpoint");
  key_option(fine, o, "--data", "run.data", "preprocessed dataset");
  key_option(fine, o, "--checkpoint", "run.checkpoint", "pretrained checkpoint");
  key_option(fine, o, "--subjects", "run.subjects", "comma list of subjects (default: all)");
  key_option(fine, o, "--split", "run.split", "training fraction of each recording");
  key_option(fine, o, "--profile", "train.profile", "paper or desk hyperparameters");
  key_option(fine, o, "--epochs", "train.epochs", "training epochs");
  key_option(fine, o, "--seed", "train.seed", "extractor initialization and shuffling seed");
  fine->add_flag_function("--freeze-backbone", [&o](std::int64_t) { o.flags["train.freeze_backbone"] = "true"; },
                          "train the feature extractor only [train.freeze_backbone]");

  auto* ev = command(app, o, "evaluate", "score finetuned models on the held-out end of each recording");
  key_option(ev, o, "--data", "run.data", "preprocessed dataset");
  key_option(ev, o, "--models", "run.models", "directory of <subject>.ckpt files");
  key_option(ev, o, "--subjects", "run.subjects", "comma list (default: every subject with a checkpoint)");
  key_option(ev, o, "--split", "run.split", "training fraction used when finetuning");
  key_option(ev, o, "--label", "run.label", "row label of the table");

  auto* abl = command(app, o, "ablate", "robustness experiments");
  key_option(abl, o, "--data", "run.data", "preprocessed dataset");
  key_option(abl, o, "--checkpoint", "run.checkpoint", "pretrained checkpoint");
  key_option(abl, o, "--subjects", "run.subjects", "comma list (default: all)");
  key_option(abl, o, "--kind", "ablation.kind",
             "split, calibration_sweep, mask_bp_range, gaussian_noise, mask_cycle_half or mask_adjacent_beats");
  key_option(abl, o, "--values", "ablation.values", "fractions, hours, range starts or multipliers");
  key_option(abl, o, "--multipliers", "ablation.values", "noise multipliers");
  key_option(abl, o, "--variants", "ablation.variants", "masking variants, e.g. pulse,reflection,none");
  key_option(abl, o, "--profile", "train.profile", "paper or desk hyperparameters");
  key_option(abl, o, "--epochs", "train.epochs", "finetune epochs");

  const std::map<CLI::App*, std::function<int(Run&)>> handlers{
      {synth, cmd_synth}, {prep, cmd_preprocess}, {pre, cmd_pretrain},
      {fine, cmd_finetune}, {ev, cmd_evaluate},   {abl, cmd_ablate}};

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    for (const auto& [sub, fn] : handlers) {
      if (sub->parsed()) {
        auto run = make_run(sub->get_name(), o);
        return fn(run);
      }
    }
    return 2;
  } catch (const io::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
