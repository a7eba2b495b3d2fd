#pragma once

#include <CLI11.hpp>

#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "tssan/consensus.hpp"
#include "tssan/dataset.hpp"
#include "tssan/error.hpp"
#include "tssan/training.hpp"
#include "tssan/variants.hpp"

namespace tssan {

/// Everything a training run needs, grouped as in the config file.
struct RunConfig {
  VariantConfig model;
  TsnConfig tsn;
  TrainConfig train;
  std::string train_manifest;
  std::string val_manifest;

  RunConfig() {
    model.san.max_frames = 0;  // 0 follows tsn.frames_per_segment
  }

  /// Model config with derived fields resolved.
  VariantConfig effective_model() const {
    VariantConfig m = model;
    if (m.san.max_frames == 0) m.san.max_frames = tsn.frames_per_segment;
    return m;
  }

  void validate() const {
    effective_model().validate();
    tsn.validate();
    train.validate();
    if (effective_model().san.max_frames < tsn.frames_per_segment) {
      throw ConfigError("max_frames is smaller than frames per segment");
    }
  }
};

namespace detail {

struct ConfigField {
  std::string section;
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class T>
T parse_field(const std::string& key, const std::string& text) {
  if constexpr (std::is_same_v<T, bool>) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw ConfigError("config: " + key + " expects true or false, got '" + text + "'");
  } else {
    try {
      return io::parse_number<T>(text, "config");
    } catch (const ParseError&) {
      throw ConfigError("config: " + key + " has invalid value '" + text + "'");
    }
  }
}

template <class T>
std::string show_field(const T& v) {
  if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_floating_point_v<T>) {
    return io::format_real(v);
  } else {
    return std::to_string(v);
  }
}

/// Field accessor for a plain member reached through `member(cfg)`.
template <class T, class Member>
ConfigField field(std::string section, std::string key, Member member) {
  return {section, key,
          [member](const RunConfig& c) { return show_field<T>(member(const_cast<RunConfig&>(c))); },
          [member, key](RunConfig& c, const std::string& s) { member(c) = parse_field<T>(key, s); }};
}

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = [] {
    using R = RunConfig;
    std::vector<ConfigField> f;
    auto text = [&](std::string section, std::string key, auto get, auto set) {
      f.push_back({std::move(section), std::move(key), get, set});
    };
    text("model", "variant", [](const R& c) { return to_string(c.model.variant); },
         [](R& c, const std::string& s) { c.model.variant = parse_variant(s); });
    text("model", "encoder", [](const R& c) { return to_string(c.model.encoder); },
         [](R& c, const std::string& s) { c.model.encoder = parse_encoder_kind(s); });
    f.push_back(field<std::size_t>("model", "persons", [](R& c) -> auto& { return c.model.persons; }));
    f.push_back(field<std::size_t>("model", "joints", [](R& c) -> auto& { return c.model.joints; }));
    f.push_back(field<std::size_t>("model", "coords", [](R& c) -> auto& { return c.model.coords; }));
    f.push_back(field<std::size_t>("model", "labels", [](R& c) -> auto& { return c.model.num_labels; }));
    f.push_back(field<std::size_t>("model", "ff_hidden", [](R& c) -> auto& { return c.model.ff_hidden; }));
    f.push_back(field<std::size_t>("model", "layers", [](R& c) -> auto& { return c.model.san.layers; }));
    f.push_back(field<std::size_t>("model", "heads", [](R& c) -> auto& { return c.model.san.heads; }));
    f.push_back(field<std::size_t>("model", "ff_width", [](R& c) -> auto& { return c.model.san.ff_width; }));
    f.push_back(field<std::size_t>("model", "max_frames", [](R& c) -> auto& { return c.model.san.max_frames; }));
    f.push_back(field<double>("model", "san_dropout", [](R& c) -> auto& { return c.model.san.dropout; }));
    f.push_back(field<double>("model", "classifier_dropout", [](R& c) -> auto& { return c.model.classifier_dropout; }));
    f.push_back(field<double>("model", "encoder_dropout", [](R& c) -> auto& { return c.model.encoder_dropout; }));
    text("model", "v3_inference",
         [](const R& c) { return std::string(c.model.v3_inference == V3Inference::cat ? "cat" : "mean"); },
         [](R& c, const std::string& s) {
           if (s == "cat") c.model.v3_inference = V3Inference::cat;
           else if (s == "mean") c.model.v3_inference = V3Inference::mean;
           else throw ConfigError("config: v3_inference must be cat or mean, got '" + s + "'");
         });
    f.push_back(field<std::size_t>("tsn", "segments", [](R& c) -> auto& { return c.tsn.segments; }));
    f.push_back(field<std::size_t>("tsn", "frames", [](R& c) -> auto& { return c.tsn.frames_per_segment; }));
    text("tsn", "consensus", [](const R& c) { return to_string(c.tsn.consensus); },
         [](R& c, const std::string& s) { c.tsn.consensus = parse_consensus(s); });
    text("tsn", "train_sampling", [](const R& c) { return to_string(c.tsn.train_sampling); },
         [](R& c, const std::string& s) { c.tsn.train_sampling = parse_sampling(s); });
    f.push_back(field<double>("tsn", "crop_min", [](R& c) -> auto& { return c.tsn.train_crop.min_ratio; }));
    f.push_back(field<double>("tsn", "crop_max", [](R& c) -> auto& { return c.tsn.train_crop.max_ratio; }));
    f.push_back(field<double>("tsn", "eval_crop", [](R& c) -> auto& { return c.tsn.eval_crop; }));
    f.push_back(field<bool>("tsn", "per_segment_loss", [](R& c) -> auto& { return c.tsn.per_segment_loss; }));
    f.push_back(field<double>("train", "lr", [](R& c) -> auto& { return c.train.lr; }));
    f.push_back(field<std::size_t>("train", "patience", [](R& c) -> auto& { return c.train.patience; }));
    f.push_back(field<double>("train", "lr_factor", [](R& c) -> auto& { return c.train.lr_factor; }));
    f.push_back(field<double>("train", "weight_decay", [](R& c) -> auto& { return c.train.weight_decay; }));
    f.push_back(field<std::size_t>("train", "batch_size", [](R& c) -> auto& { return c.train.batch_size; }));
    f.push_back(field<std::size_t>("train", "epochs", [](R& c) -> auto& { return c.train.epochs; }));
    f.push_back(field<std::uint64_t>("train", "seed", [](R& c) -> auto& { return c.train.seed; }));
    f.push_back(field<bool>("train", "log_wall_time", [](R& c) -> auto& { return c.train.log_wall_time; }));
    text("data", "train_manifest", [](const R& c) { return c.train_manifest; },
         [](R& c, const std::string& s) { c.train_manifest = s; });
    text("data", "val_manifest", [](const R& c) { return c.val_manifest; },
         [](R& c, const std::string& s) { c.val_manifest = s; });
    return f;
  }();
  return fields;
}

}  // namespace detail

/// Sets `section.key` (or a bare key that is unique across sections).
inline void apply_config_value(RunConfig& cfg, const std::string& section, const std::string& key,
                               const std::string& value) {
  for (const auto& f : detail::config_fields()) {
    if (f.key == key && (section.empty() || f.section == section)) {
      f.set(cfg, value);
      return;
    }
  }
  throw ConfigError("config: unknown key '" + (section.empty() ? key : section + "." + key) + "'");
}

/// INI text with one section per group; parses back to the same config.
inline std::string to_ini(const RunConfig& cfg) {
  std::string out, current;
  for (const auto& f : detail::config_fields()) {
    if (f.section != current) {
      if (!current.empty()) out += '\n';
      out += "[" + f.section + "]\n";
      current = f.section;
    }
    out += f.key + " = " + f.get(cfg) + "\n";
  }
  return out;
}

/// Applies INI text on top of `cfg`. Unknown keys are rejected.
inline void apply_ini(RunConfig& cfg, const std::string& text) {
  std::istringstream in(text);
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigINI().from_config(in);
  } catch (const CLI::Error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  for (const auto& item : items) {
    if (item.name == "++" || item.name == "--") continue;  // section markers
    if (item.parents.size() > 1) throw ConfigError("config: nested section in '" + item.fullname() + "'");
    const std::string section = item.parents.empty() ? "" : item.parents[0];
    std::string value;
    for (std::size_t i = 0; i < item.inputs.size(); ++i) value += (i ? " " : "") + item.inputs[i];
    apply_config_value(cfg, section, item.name, value);
  }
}

inline RunConfig parse_ini(const std::string& text) {
  RunConfig cfg;
  apply_ini(cfg, text);
  return cfg;
}

}  // namespace tssan
