#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "tssan/error.hpp"
#include "tssan/skeleton.hpp"

namespace tssan {

namespace fs = std::filesystem;

struct LabeledSample {
  SkeletonClip clip;
  std::size_t label = 0;
  std::string source_id;
};

enum class DatasetKind { ntu, kinetics, synthetic };

inline std::string to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::ntu: return "ntu";
    case DatasetKind::kinetics: return "kinetics";
    case DatasetKind::synthetic: return "synthetic";
  }
  return "?";
}

inline DatasetKind parse_dataset_kind(std::string_view s) {
  if (s == "ntu") return DatasetKind::ntu;
  if (s == "kinetics") return DatasetKind::kinetics;
  if (s == "synthetic") return DatasetKind::synthetic;
  throw ConfigError("unknown dataset kind '" + std::string(s) + "'");
}

struct ManifestEntry {
  std::string path;  // relative to the manifest directory unless absolute
  std::size_t label = 0;
  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  DatasetKind kind = DatasetKind::synthetic;
  std::size_t num_labels = 0;
  std::string split = "train";
  std::vector<ManifestEntry> entries;
  fs::path base_dir;

  fs::path resolve(const ManifestEntry& e) const {
    fs::path p(e.path);
    return p.is_absolute() ? p : base_dir / p;
  }
  bool operator==(const DatasetManifest&) const = default;
};

namespace io {

/// Shortest text form that parses back to the identical double.
inline std::string format_real(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string_view strip_comment(std::string_view line) {
  if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
  while (!line.empty() && (line.back() == ' ' || line.back() == '\t' || line.back() == '\r'))
    line.remove_suffix(1);
  while (!line.empty() && (line.front() == ' ' || line.front() == '\t')) line.remove_prefix(1);
  return line;
}

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

template <class T>
T parse_number(std::string_view tok, const std::string& where) {
  T v{};
  auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) {
    throw ParseError(where + ": invalid number '" + std::string(tok) + "'");
  }
  return v;
}

}  // namespace io

/// Sample text format: header `F S J C label`, then F*S*J lines of C reals in
/// frame -> person -> joint order. `#` starts a comment.
inline void write_sample(const fs::path& path, const LabeledSample& sample) {
  const auto& sh = sample.clip.shape;
  std::ostringstream os;
  os << sh.frames << ' ' << sh.persons << ' ' << sh.joints << ' ' << sh.coords << ' '
     << sample.label << '\n';
  for (std::size_t row = 0; row < sh.frames * sh.persons * sh.joints; ++row) {
    for (std::size_t c = 0; c < sh.coords; ++c) {
      if (c) os << ' ';
      os << io::format_real(sample.clip.positions[row * sh.coords + c]);
    }
    os << '\n';
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write sample '" + path.string() + "'");
  out << os.str();
}

inline LabeledSample parse_sample(std::string_view text, const std::string& name) {
  LabeledSample sample;
  sample.source_id = name;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  bool have_header = false;
  std::size_t rows_expected = 0, rows_read = 0;
  auto& clip = sample.clip;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = io::strip_comment(text.substr(pos, nl - pos));
    pos = nl + 1;
    ++line_no;
    if (line.empty()) continue;
    const std::string where = name + ":" + std::to_string(line_no);
    auto toks = io::split_ws(line);
    if (!have_header) {
      if (toks.size() != 5) throw ParseError(where + ": header must be 'F S J C label'");
      ClipShape sh{io::parse_number<std::size_t>(toks[0], where),
                   io::parse_number<std::size_t>(toks[1], where),
                   io::parse_number<std::size_t>(toks[2], where),
                   io::parse_number<std::size_t>(toks[3], where)};
      if (!sh.frames || !sh.persons || !sh.joints || !sh.coords) {
        throw ParseError(where + ": extents must be positive");
      }
      sample.label = io::parse_number<std::size_t>(toks[4], where);
      clip.shape = sh;
      clip.positions.reserve(sh.size());
      rows_expected = sh.frames * sh.persons * sh.joints;
      have_header = true;
      continue;
    }
    if (rows_read == rows_expected) throw ParseError(where + ": data beyond declared extents");
    if (toks.size() != clip.shape.coords) {
      throw ParseError(where + ": expected " + std::to_string(clip.shape.coords) +
                       " values, found " + std::to_string(toks.size()));
    }
    for (auto t : toks) clip.positions.push_back(io::parse_number<double>(t, where));
    ++rows_read;
  }
  if (!have_header) throw ParseError(name + ": missing header");
  if (rows_read != rows_expected) {
    throw ParseError(name + ":" + std::to_string(line_no) + ": truncated, read " +
                     std::to_string(rows_read) + " of " + std::to_string(rows_expected) +
                     " joint rows");
  }
  clip.refresh_mask();
  clip.validate();
  return sample;
}

inline std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline LabeledSample load_sample(const fs::path& path) {
  return parse_sample(read_text_file(path), path.string());
}

/// Manifest format: first non-comment line `kind=<k> num_labels=<n> split=<s>`,
/// then one `path<TAB>label` line per sample.
inline void write_manifest(const fs::path& path, const DatasetManifest& m) {
  std::ostringstream os;
  os << "# tssan dataset manifest\n";
  os << "kind=" << to_string(m.kind) << " num_labels=" << m.num_labels << " split=" << m.split
     << '\n';
  for (const auto& e : m.entries) os << e.path << '\t' << e.label << '\n';
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write manifest '" + path.string() + "'");
  out << os.str();
}

inline DatasetManifest load_manifest(const fs::path& path) {
  const std::string text = read_text_file(path);
  DatasetManifest m;
  m.base_dir = path.parent_path();
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    std::string_view line = io::strip_comment(raw);
    if (line.empty()) continue;
    if (!have_header) {
      bool kind = false, labels = false;
      for (auto tok : io::split_ws(line)) {
        auto eq = tok.find('=');
        if (eq == std::string_view::npos) throw ParseError(where + ": expected key=value header");
        auto key = tok.substr(0, eq), val = tok.substr(eq + 1);
        if (key == "kind") {
          try {
            m.kind = parse_dataset_kind(val);
          } catch (const ConfigError& e) {
            throw ParseError(where + ": " + e.what());
          }
          kind = true;
        } else if (key == "num_labels") {
          m.num_labels = io::parse_number<std::size_t>(val, where);
          labels = true;
        } else if (key == "split") {
          m.split = std::string(val);
        } else {
          throw ParseError(where + ": unknown header key '" + std::string(key) + "'");
        }
      }
      if (!kind || !labels || m.num_labels == 0) {
        throw ParseError(where + ": header needs kind and positive num_labels");
      }
      have_header = true;
      continue;
    }
    auto tab = line.rfind('\t');
    if (tab == std::string_view::npos) throw ParseError(where + ": expected path<TAB>label");
    ManifestEntry e{std::string(line.substr(0, tab)),
                    io::parse_number<std::size_t>(line.substr(tab + 1), where)};
    if (e.label >= m.num_labels) {
      throw ValidationError(where + ": label " + std::to_string(e.label) + " >= num_labels " +
                            std::to_string(m.num_labels));
    }
    if (!fs::exists(m.resolve(e))) {
      throw ValidationError(where + ": missing sample file '" + m.resolve(e).string() + "'");
    }
    m.entries.push_back(std::move(e));
  }
  if (!have_header) throw ParseError(path.string() + ": missing header");
  return m;
}

/// Shape constraints implied by a dataset kind.
inline void validate_for_kind(const LabeledSample& s, DatasetKind kind, const std::string& where) {
  const auto& sh = s.clip.shape;
  auto fail = [&](const std::string& why) {
    throw ValidationError(where + ": " + why + " (" + to_string(sh) + ")");
  };
  switch (kind) {
    case DatasetKind::ntu:
      if (sh.joints != 25 || sh.coords != 3) fail("ntu samples need J=25, C=3");
      break;
    case DatasetKind::kinetics:
      if (sh.joints != 18 || sh.coords != 3) fail("kinetics samples need J=18, C=3 (x,y,c)");
      break;
    case DatasetKind::synthetic:
      break;
  }
}

/// Loads and validates every sample listed in the manifest.
inline std::vector<LabeledSample> load_dataset(const DatasetManifest& m) {
  std::vector<LabeledSample> out;
  out.reserve(m.entries.size());
  for (const auto& e : m.entries) {
    auto path = m.resolve(e);
    LabeledSample s = load_sample(path);
    if (s.label != e.label) {
      throw ValidationError(path.string() + ": file label " + std::to_string(s.label) +
                            " disagrees with manifest label " + std::to_string(e.label));
    }
    if (s.label >= m.num_labels) {
      throw ValidationError(path.string() + ": label out of range");
    }
    validate_for_kind(s, m.kind, path.string());
    if (!out.empty() && !(out.front().clip.shape.persons == s.clip.shape.persons &&
                          out.front().clip.shape.joints == s.clip.shape.joints &&
                          out.front().clip.shape.coords == s.clip.shape.coords)) {
      throw ValidationError(path.string() + ": per-frame layout differs from first sample");
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticSpec {
  std::size_t num_labels = 4;
  std::size_t samples_per_label = 50;
  std::size_t frames = 48;
  std::size_t joints = 5;
  std::size_t persons = 2;
  /// Observation noise stddev. Zero also disables per-sample jitter, so every
  /// sample of a label is identical.
  double noise = 0.02;
};

/// One sample of label `label`. Each label oscillates all joints along its
/// own direction (angle pi*label/L in the xy plane) with 1 or 2 cycles per
/// clip; samples differ by phase, amplitude, translation and noise.
inline SkeletonClip synthesize_clip(const SyntheticSpec& spec, std::size_t label,
                                    std::mt19937_64& rng) {
  ClipShape sh{spec.frames, spec.persons, spec.joints, 3};
  SkeletonClip clip = SkeletonClip::zeros(sh);
  const bool jitter = spec.noise > 0.0;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, jitter ? spec.noise : 1.0);
  const double angle = std::numbers::pi * static_cast<double>(label) /
                       static_cast<double>(spec.num_labels);
  const double dir[3] = {std::cos(angle), std::sin(angle), 0.0};
  const double cycles = 1.0 + static_cast<double>(label % 2);
  for (std::size_t s = 0; s < sh.persons; ++s) {
    const bool present = s == 0 || !jitter || unit(rng) < 0.5;
    const double phase = jitter ? 2.0 * std::numbers::pi * unit(rng) : 0.0;
    const double amp = 0.3 * (jitter ? 0.8 + 0.4 * unit(rng) : 1.0);
    const double shift[3] = {jitter ? unit(rng) - 0.5 : 0.0, jitter ? unit(rng) - 0.5 : 0.0,
                             jitter ? unit(rng) - 0.5 : 0.0};
    if (!present) continue;
    for (std::size_t f = 0; f < sh.frames; ++f) {
      const double t = static_cast<double>(f) / static_cast<double>(sh.frames);
      for (std::size_t j = 0; j < sh.joints; ++j) {
        const double wave =
            amp * std::sin(2.0 * std::numbers::pi * cycles * t + phase + 0.3 * static_cast<double>(j));
        const double base[3] = {static_cast<double>(s) * 1.0, 0.2 * static_cast<double>(j), 1.0};
        for (std::size_t c = 0; c < 3; ++c) {
          double v = base[c] + shift[c] + wave * dir[c];
          if (jitter) v += gauss(rng);
          clip.at(f, s, j, c) = v;
        }
      }
    }
  }
  clip.refresh_mask();
  return clip;
}

inline std::vector<LabeledSample> synthesize_samples(const SyntheticSpec& spec, std::uint64_t seed) {
  if (!spec.num_labels || !spec.samples_per_label || spec.frames < 2 || !spec.joints ||
      !spec.persons) {
    throw InputError("synthetic dataset: parameters must be positive (frames >= 2)");
  }
  std::mt19937_64 rng(seed);
  std::vector<LabeledSample> out;
  for (std::size_t i = 0; i < spec.samples_per_label; ++i) {
    for (std::size_t l = 0; l < spec.num_labels; ++l) {
      LabeledSample s;
      s.clip = synthesize_clip(spec, l, rng);
      s.label = l;
      s.source_id = "synthetic-" + std::to_string(out.size());
      out.push_back(std::move(s));
    }
  }
  return out;
}

/// Generates the samples, persists them under `out_dir/samples/`, writes
/// `out_dir/manifest.tsv` and returns the manifest.
inline DatasetManifest make_synthetic_dataset(const SyntheticSpec& spec, std::uint64_t seed,
                                              const fs::path& out_dir,
                                              const std::string& split = "train") {
  auto samples = synthesize_samples(spec, seed);
  DatasetManifest m;
  m.kind = DatasetKind::synthetic;
  m.num_labels = spec.num_labels;
  m.split = split;
  m.base_dir = out_dir;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "samples/%06zu.txt", i);
    write_sample(out_dir / name, samples[i]);
    m.entries.push_back({name, samples[i].label});
  }
  write_manifest(out_dir / "manifest.tsv", m);
  return m;
}

}  // namespace tssan
