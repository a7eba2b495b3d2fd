#pragma once

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "tssan/checkpoint.hpp"
#include "tssan/config.hpp"
#include "tssan/dataset.hpp"
#include "tssan/error.hpp"
#include "tssan/training.hpp"

namespace tssan::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumeric = 3;

/// Decimal text that always shows a fractional part, e.g. `1.0`, `0.975`.
inline std::string format_metric(double v) {
  std::string s = io::format_real(v);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

// ---------------------------------------------------------------------------
// prepare

struct PrepareArgs {
  bool synthetic = false;
  std::string input;
  std::string kind = "ntu";
  std::size_t labels = 4;
  std::size_t per_label = 50;
  std::size_t frames = 48;
  std::size_t joints = 5;
  std::size_t persons = 2;
  double noise = 0.02;
  std::uint64_t seed = 1;
  double val_fraction = 0.0;
  std::string out;
};

/// Pads with empty persons or keeps the first `persons`.
inline SkeletonClip fit_persons(const SkeletonClip& clip, std::size_t persons) {
  ClipShape sh = clip.shape;
  sh.persons = persons;
  SkeletonClip out = SkeletonClip::zeros(sh);
  const std::size_t keep = std::min(persons, clip.shape.persons);
  for (std::size_t f = 0; f < sh.frames; ++f)
    for (std::size_t s = 0; s < keep; ++s)
      for (std::size_t j = 0; j < sh.joints; ++j)
        for (std::size_t c = 0; c < sh.coords; ++c) out.at(f, s, j, c) = clip.at(f, s, j, c);
  out.refresh_mask();
  return out;
}

/// Per label, the last round(fraction * count) samples in manifest order go
/// to the held-out split.
inline std::pair<DatasetManifest, DatasetManifest> split_manifest(const DatasetManifest& m,
                                                                  double fraction) {
  std::map<std::size_t, std::size_t> count, seen;
  for (const auto& e : m.entries) ++count[e.label];
  DatasetManifest train = m, val = m;
  train.entries.clear();
  val.entries.clear();
  train.split = "train";
  val.split = "val";
  for (const auto& e : m.entries) {
    const std::size_t n = count[e.label];
    const auto held = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(n)));
    (seen[e.label]++ >= n - held ? val : train).entries.push_back(e);
  }
  return {train, val};
}

inline void print_label_counts(std::ostream& out, const std::string& name, const DatasetManifest& m) {
  std::vector<std::size_t> counts(m.num_labels, 0);
  for (const auto& e : m.entries) ++counts[e.label];
  out << name << ": samples=" << m.entries.size() << " labels=" << m.num_labels << '\n';
  for (std::size_t l = 0; l < counts.size(); ++l) out << "  label " << l << ": " << counts[l] << '\n';
}

inline int cmd_prepare(const PrepareArgs& a, std::ostream& out) {
  if (!(a.val_fraction >= 0.0 && a.val_fraction < 1.0)) {
    throw ConfigError("prepare: --val-fraction must be in [0,1)");
  }
  const fs::path dir(a.out);
  DatasetManifest m;
  if (a.synthetic) {
    SyntheticSpec spec{a.labels, a.per_label, a.frames, a.joints, a.persons, a.noise};
    synthesize_samples(spec, a.seed);  // validates before anything is written
    m = make_synthetic_dataset(spec, a.seed, dir, "all");
  } else {
    if (a.input.empty()) throw ConfigError("prepare: need --input DIR or --synthetic");
    const DatasetKind kind = parse_dataset_kind(a.kind);
    const fs::path in(a.input);
    if (!fs::is_directory(in)) throw InputError("prepare: cannot read input directory '" + a.input + "'");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(in))
      if (e.is_regular_file() && e.path().extension() == ".txt") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw InputError("prepare: no .txt samples in '" + a.input + "'");
    m.kind = kind;
    m.num_labels = a.labels;
    m.split = "all";
    m.base_dir = dir;
    for (const auto& f : files) {
      LabeledSample s = load_sample(f);
      if (s.label >= a.labels) {
        throw ValidationError(f.string() + ": label " + std::to_string(s.label) + " >= --labels");
      }
      if (kind == DatasetKind::kinetics) {
        s.clip = repeat_pad_frames(select_top_people(s.clip, 2), 300);
      } else {
        s.clip = fit_persons(s.clip, 2);
      }
      validate_for_kind(s, kind, f.string());
      const std::string name = "samples/" + f.filename().string();
      write_sample(dir / name, s);
      m.entries.push_back({name, s.label});
    }
    write_manifest(dir / "manifest.tsv", m);
  }
  print_label_counts(out, "manifest.tsv", m);
  if (a.val_fraction > 0.0) {
    auto [train, val] = split_manifest(m, a.val_fraction);
    write_manifest(dir / "train.tsv", train);
    write_manifest(dir / "val.tsv", val);
    print_label_counts(out, "train.tsv", train);
    print_label_counts(out, "val.tsv", val);
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train / eval / export

/// Fills data-derived model fields left at 0 and rejects explicit values
/// that disagree with the data.
inline void resolve_data_fields(RunConfig& cfg, const LabeledSample& first, std::size_t num_labels) {
  auto fill = [](std::size_t& field, std::size_t actual, const char* key) {
    if (field == 0) field = actual;
    else if (field != actual) {
      throw ConfigError(std::string("config: ") + key + " = " + std::to_string(field) +
                        " but the data has " + std::to_string(actual));
    }
  };
  fill(cfg.model.persons, first.clip.shape.persons, "persons");
  fill(cfg.model.joints, first.clip.shape.joints, "joints");
  fill(cfg.model.coords, first.clip.shape.coords, "coords");
  fill(cfg.model.num_labels, num_labels, "labels");
}

/// Rejects data a checkpointed model cannot consume.
inline void check_data_matches(const VariantConfig& m, const ClipShape& sh, std::size_t num_labels,
                               const std::string& what) {
  if (sh.persons != m.persons || sh.joints != m.joints || sh.coords != m.coords) {
    throw ConfigError(what + " (" + to_string(sh) + ") does not match the checkpoint model (S=" +
                      std::to_string(m.persons) + " J=" + std::to_string(m.joints) +
                      " C=" + std::to_string(m.coords) + ")");
  }
  if (num_labels > m.num_labels) {
    throw ConfigError(what + " has " + std::to_string(num_labels) + " labels, the model " +
                      std::to_string(m.num_labels));
  }
}

struct TrainArgs {
  std::string config;
  std::string out;
  bool resume = false;
  std::vector<std::pair<std::string, std::string>> overrides;  // key, value
};

inline DatasetManifest load_manifest_checked(const std::string& path) {
  if (path.empty()) throw ConfigError("train: no training manifest (--train or data.train_manifest)");
  return load_manifest(path);
}

inline int cmd_train(const TrainArgs& a, std::ostream& out) {
  RunConfig cfg;
  cfg.model.persons = cfg.model.joints = cfg.model.coords = cfg.model.num_labels = 0;
  if (!a.config.empty()) apply_ini(cfg, read_text_file(a.config));
  for (const auto& [key, value] : a.overrides) apply_config_value(cfg, "", key, value);

  const DatasetManifest train_m = load_manifest_checked(cfg.train_manifest);
  const auto train = load_dataset(train_m);
  if (train.empty()) throw InputError("train: training manifest is empty");
  std::vector<LabeledSample> val;
  if (!cfg.val_manifest.empty()) {
    const DatasetManifest val_m = load_manifest(cfg.val_manifest);
    if (val_m.num_labels != train_m.num_labels) throw ConfigError("train: label counts of train and val differ");
    val = load_dataset(val_m);
    if (!val.empty() && !(val[0].clip.shape.persons == train[0].clip.shape.persons &&
                          val[0].clip.shape.joints == train[0].clip.shape.joints &&
                          val[0].clip.shape.coords == train[0].clip.shape.coords)) {
      throw ConfigError("train: val samples differ in layout from train samples");
    }
  }
  resolve_data_fields(cfg, train[0], train_m.num_labels);
  cfg.validate();

  const fs::path dir(a.out);
  fs::create_directories(dir);
  {
    std::ofstream echo(dir / "config.ini", std::ios::binary | std::ios::trunc);
    echo << to_ini(cfg);
  }

  std::mt19937_64 init(cfg.train.seed);
  Trainer trainer(Model::create(cfg.effective_model(), init), cfg.tsn, cfg.train);
  const fs::path last = dir / "last.ckpt", best = dir / "best.ckpt", log_path = dir / "metrics.log";
  if (a.resume && fs::exists(last)) {
    CheckpointData d = read_checkpoint(last);
    RunConfig saved = parse_ini(d.config);
    saved.train.epochs = cfg.train.epochs;  // extending a run is allowed
    if (to_ini(saved) != to_ini(cfg)) throw ConfigError("train: --resume config differs from " + last.string());
    restore(trainer, d);
    out << "resumed at epoch " << trainer.epoch() << '\n';
  }
  std::ofstream log(log_path, std::ios::binary | (trainer.epoch() > 0 ? std::ios::app : std::ios::trunc));
  if (!log) throw InputError("train: cannot write " + log_path.string());

  while (trainer.epoch() < cfg.train.epochs) {
    const double prev_best = trainer.scheduler().best;
    const EpochReport r = trainer.train_epoch(train, val);
    const std::string line = format_metrics(r.metrics);
    log << line << '\n' << std::flush;
    out << line << '\n' << std::flush;
    if (r.metrics.top1 > prev_best) save_checkpoint(best, trainer, cfg);
    save_checkpoint(last, trainer, cfg);
  }
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string manifest;
  std::size_t batch_size = 64;
};

inline int cmd_eval(const EvalArgs& a, std::ostream& out) {
  if (!fs::exists(a.checkpoint)) throw InputError("eval: checkpoint '" + a.checkpoint + "' not found");
  RunConfig cfg;
  const Model model = model_from_checkpoint(read_checkpoint(a.checkpoint), &cfg);
  const DatasetManifest m = load_manifest(a.manifest);
  const auto data = load_dataset(m);
  if (data.empty()) throw InputError("eval: manifest is empty");
  check_data_matches(model.config(), data[0].clip.shape, m.num_labels, "eval data");
  const TopK acc = evaluate(model, cfg.tsn, data, a.batch_size);
  out << "top1=" << format_metric(acc.top1) << " top5=" << format_metric(acc.top5) << '\n';
  return kExitOk;
}

struct ExportArgs {
  std::string checkpoint;
  std::string sample;
  std::string out;
  bool all_layers = false;
  std::optional<std::size_t> layer;
  std::optional<std::size_t> head;
  std::size_t segment = 0;
  std::size_t trace = 0;
  std::size_t scale = 16;
};

/// Rows are query frames; values in shortest round-trip form.
inline void write_matrix_csv(const fs::path& path, std::span<const double> m, std::size_t n) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) os << (c ? "," : "") << io::format_real(m[r * n + c]);
    os << '\n';
  }
  if (!os) throw InputError("cannot write " + path.string());
}

/// Binary graymap, each cell a `scale` x `scale` block; the matrix maximum
/// maps to white.
inline void write_matrix_pgm(const fs::path& path, std::span<const double> m, std::size_t n,
                             std::size_t scale) {
  const double peak = *std::max_element(m.begin(), m.end());
  const std::size_t side = n * scale;
  std::string pixels(side * side, '\0');
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      const double v = peak > 0.0 ? m[(y / scale) * n + x / scale] / peak : 0.0;
      pixels[y * side + x] = static_cast<char>(std::lround(255.0 * std::clamp(v, 0.0, 1.0)));
    }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  os << "P5\n" << side << ' ' << side << "\n255\n" << pixels;
  if (!os) throw InputError("cannot write " + path.string());
}

inline int cmd_export_attention(const ExportArgs& a, std::ostream& out) {
  if (!fs::exists(a.checkpoint)) throw InputError("export-attention: checkpoint '" + a.checkpoint + "' not found");
  if (a.scale == 0) throw ConfigError("export-attention: --scale must be positive");
  RunConfig cfg;
  const Model model = model_from_checkpoint(read_checkpoint(a.checkpoint), &cfg);
  const LabeledSample s = load_sample(a.sample);
  check_data_matches(model.config(), s.clip.shape, 0, "sample");
  if (a.segment >= cfg.tsn.segments) {
    throw IndexError("export-attention: segment " + std::to_string(a.segment) + " out of range (K=" +
                     std::to_string(cfg.tsn.segments) + ")");
  }
  std::mt19937_64 unused(0);
  const std::vector<SkeletonClip> clips{s.clip};
  const TsOutput ts = ts_forward(model, prepare_segments(clips, cfg.tsn, false, unused), cfg.tsn, false, unused);
  const auto& traces = ts.segments.traces;
  if (a.trace >= traces.size()) {
    throw IndexError("export-attention: trace " + std::to_string(a.trace) + " out of range (" +
                     std::to_string(traces.size()) + " available)");
  }
  const AttentionTrace& tr = traces[a.trace];
  const std::size_t L = tr.layers.size(), H = tr.heads(), F = tr.frames();
  if (a.layer && *a.layer >= L) {
    throw IndexError("export-attention: layer " + std::to_string(*a.layer) + " out of range (" +
                     std::to_string(L) + " layers)");
  }
  if (a.head && *a.head >= H) {
    throw IndexError("export-attention: head " + std::to_string(*a.head) + " out of range (" +
                     std::to_string(H) + " heads)");
  }
  std::vector<std::size_t> layers;
  if (a.layer) layers = {*a.layer};
  else if (a.all_layers) for (std::size_t l = 0; l < L; ++l) layers.push_back(l);
  else layers = {L - 1};

  const fs::path dir(a.out);
  fs::create_directories(dir);
  std::size_t written = 0;
  for (std::size_t l : layers) {
    for (std::size_t h = 0; h < H; ++h) {
      if (a.head && h != *a.head) continue;
      const std::vector<double> m = tr.matrix(l, a.segment, h);
      const std::string stem = "layer" + std::to_string(l) + "_head" + std::to_string(h);
      write_matrix_csv(dir / (stem + ".csv"), m, F);
      write_matrix_pgm(dir / (stem + ".pgm"), m, F, a.scale);
      ++written;
    }
  }
  out << "wrote " << written << " matrices (" << F << "x" << F << ") to " << dir.string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// entry point

struct OverrideFlag {
  const char* flag;
  const char* key;
  const char* help;
};

inline const std::vector<OverrideFlag>& override_flags() {
  static const std::vector<OverrideFlag> flags = {
      {"--train", "train_manifest", "Training manifest"},
      {"--val", "val_manifest", "Validation manifest (default: evaluate on train)"},
      {"--variant", "variant", "v1, v2 or v3"},
      {"--encoder", "encoder", "ff or cnn"},
      {"--ff-hidden", "ff_hidden", "Hidden width C' of the ff encoder"},
      {"--layers", "layers", "Self-attention layers N"},
      {"--heads", "heads", "Attention heads h"},
      {"--ff-width", "ff_width", "Feed-forward width (0 = 2H)"},
      {"--max-frames", "max_frames", "Position table length (0 = frames per segment)"},
      {"--san-dropout", "san_dropout", "Dropout inside the attention block"},
      {"--classifier-dropout", "classifier_dropout", "Dropout before the classifier"},
      {"--encoder-dropout", "encoder_dropout", "Dropout after the cnn encoder"},
      {"--v3-inference", "v3_inference", "cat or mean"},
      {"--segments", "segments", "Temporal segments K"},
      {"--frames", "frames", "Frames sampled per segment"},
      {"--consensus", "consensus", "avg or max"},
      {"--sampling", "train_sampling", "Training frame sampling: random or uniform"},
      {"--eval-crop", "eval_crop", "Centre crop ratio at evaluation"},
      {"--lr", "lr", "Initial learning rate"},
      {"--patience", "patience", "Epochs without improvement before the rate is cut"},
      {"--lr-factor", "lr_factor", "Rate multiplier on plateau"},
      {"--weight-decay", "weight_decay", "L2 weight decay"},
      {"--batch-size", "batch_size", "Mini-batch size"},
      {"--epochs", "epochs", "Number of epochs"},
      {"--seed", "seed", "Random seed for initialisation and sampling"},
  };
  return flags;
}

/// Runs the command line; returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"Temporal-segment self-attention networks for skeleton action recognition", "tssan"};
  app.require_subcommand(1);
  std::function<int()> action;

  PrepareArgs prep;
  auto* p = app.add_subcommand("prepare", "Write a sample directory and manifest");
  p->add_flag("--synthetic", prep.synthetic, "Generate the separable synthetic benchmark");
  p->add_option("--input", prep.input, "Directory of raw sample files (*.txt)");
  p->add_option("--kind", prep.kind, "Raw data kind: ntu or kinetics")->capture_default_str();
  p->add_option("--labels", prep.labels, "Number of labels")->capture_default_str();
  p->add_option("--per-label", prep.per_label, "Synthetic samples per label")->capture_default_str();
  p->add_option("--frames", prep.frames, "Synthetic frames per sample")->capture_default_str();
  p->add_option("--joints", prep.joints, "Synthetic joints per person")->capture_default_str();
  p->add_option("--persons", prep.persons, "Synthetic persons")->capture_default_str();
  p->add_option("--noise", prep.noise, "Synthetic noise stddev")->capture_default_str();
  p->add_option("--seed", prep.seed, "Synthetic generator seed")->capture_default_str();
  p->add_option("--val-fraction", prep.val_fraction, "Also write train.tsv/val.tsv with this held-out share per label")
      ->capture_default_str();
  p->add_option("--out", prep.out, "Output directory")->required();
  p->callback([&] { action = [&] { return cmd_prepare(prep, out); }; });

  TrainArgs train;
  std::map<std::string, std::string> train_values;
  bool per_segment_loss = false, no_wall_time = false;
  auto* t = app.add_subcommand("train", "Train a model; writes config.ini, metrics.log, best.ckpt, last.ckpt");
  t->add_option("--config", train.config, "INI config file; flags override its values");
  t->add_option("--out", train.out, "Output directory")->required();
  t->add_flag("--resume", train.resume, "Continue from last.ckpt in the output directory");
  for (const auto& f : override_flags()) {
    t->add_option_function<std::string>(
        f.flag, [&train_values, key = std::string(f.key)](const std::string& v) { train_values[key] = v; }, f.help)
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  }
  t->add_flag("--per-segment-loss", per_segment_loss, "Cross-entropy per segment instead of on the fused output");
  t->add_flag("--no-wall-time", no_wall_time, "Log seconds=0 so logs compare byte for byte");
  t->callback([&] {
    for (const auto& f : override_flags()) {
      auto it = train_values.find(f.key);
      if (it != train_values.end()) train.overrides.emplace_back(it->first, it->second);
    }
    if (per_segment_loss) train.overrides.emplace_back("per_segment_loss", "true");
    if (no_wall_time) train.overrides.emplace_back("log_wall_time", "false");
    action = [&] { return cmd_train(train, out); };
  });

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Print top1=<v> top5=<v> for a checkpoint on a manifest");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  e->add_option("--manifest", ev.manifest, "Manifest to evaluate")->required();
  e->add_option("--batch-size", ev.batch_size, "Evaluation batch size")->capture_default_str();
  e->callback([&] { action = [&] { return cmd_eval(ev, out); }; });

  ExportArgs ex;
  auto* x = app.add_subcommand("export-attention", "Write per-head attention matrices as CSV and PGM");
  x->add_option("--checkpoint", ex.checkpoint, "Checkpoint file")->required();
  x->add_option("--sample", ex.sample, "Sample file")->required();
  x->add_option("--out", ex.out, "Output directory")->required();
  x->add_flag("--all-layers", ex.all_layers, "Export every layer instead of the last");
  x->add_option("--layer", ex.layer, "Export only this layer (0-based)");
  x->add_option("--head", ex.head, "Export only this head (0-based)");
  x->add_option("--segment", ex.segment, "Temporal segment to show")->capture_default_str();
  x->add_option("--trace", ex.trace, "Attention block: person for v2, 0 position / 1 motion for v3")
      ->capture_default_str();
  x->add_option("--scale", ex.scale, "Pixels per matrix cell in the PGM")->capture_default_str();
  x->callback([&] { action = [&] { return cmd_export_attention(ex, out); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& pe) {
    const int code = app.exit(pe, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }
  try {
    return action();
  } catch (const NumericError& ne) {
    err << "error: " << ne.what() << '\n';
    return kExitNumeric;
  } catch (const Error& ue) {
    err << "error: " << ue.what() << '\n';
    return kExitUsage;
  } catch (const fs::filesystem_error& fe) {
    err << "error: " << fe.what() << '\n';
    return kExitUsage;
  }
}

}  // namespace tssan::cli
