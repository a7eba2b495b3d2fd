#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tssan/encoders.hpp"
#include "tssan/error.hpp"
#include "tssan/ops.hpp"
#include "tssan/params.hpp"
#include "tssan/san.hpp"
#include "tssan/skeleton.hpp"

namespace tssan {

enum class Variant { v1, v2, v3 };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::v1: return "v1";
    case Variant::v2: return "v2";
    default: return "v3";
  }
}

inline Variant parse_variant(const std::string& s) {
  if (s == "v1") return Variant::v1;
  if (s == "v2") return Variant::v2;
  if (s == "v3") return Variant::v3;
  throw ConfigError("unknown variant '" + s + "' (expected v1, v2 or v3)");
}

/// Test-time head for V3: the concatenated branch, or the mean of all
/// three softmax outputs.
enum class V3Inference { cat, mean };

struct VariantConfig {
  Variant variant = Variant::v2;
  EncoderKind encoder = EncoderKind::cnn;
  std::size_t persons = 2;  // S_max
  std::size_t joints = 25;  // J per person
  std::size_t coords = 3;
  std::size_t num_labels = 60;
  std::size_t ff_hidden = 64;  // C'
  SanConfig san;               // width is derived, see san_width()
  double classifier_dropout = 0.5;
  double encoder_dropout = 0.5;
  V3Inference v3_inference = V3Inference::cat;

  /// Joint-axis extent seen by one encoder instance.
  std::size_t encoder_joints() const {
    return variant == Variant::v1 ? 2 * persons * joints : joints;
  }
  std::size_t encoder_width() const {
    return encoder == EncoderKind::cnn ? kCnnFeatureWidth : encoder_joints() * ff_hidden;
  }
  std::size_t san_width() const {
    return variant == Variant::v2 ? 2 * encoder_width() : encoder_width();
  }
  SanConfig effective_san() const {
    SanConfig c = san;
    c.width = san_width();
    return c;
  }

  void validate() const {
    if (persons == 0 || joints == 0 || coords == 0 || ff_hidden == 0) {
      throw ConfigError("model: persons, joints, coords and ff_hidden must be positive");
    }
    if (num_labels < 2) throw ConfigError("model: need at least 2 labels");
    for (double r : {classifier_dropout, encoder_dropout}) {
      if (!(r >= 0.0 && r < 1.0)) throw ConfigError("model: dropout must be in [0,1)");
    }
    effective_san().validate();
  }
};

/// Rectifier, dropout, then linear map to label scores.
struct ClassifierHead {
  Tensor weight, bias;
  double dropout = 0.5;

  static ClassifierHead create(ParamStore& store, const std::string& prefix, std::size_t in,
                               std::size_t labels, double dropout, std::mt19937_64& rng) {
    ClassifierHead h;
    h.weight = store.add(prefix + ".w", init::glorot_uniform({in, labels}, in, labels, rng));
    h.bias = store.add(prefix + ".b", init::constant({labels}, 0.0));
    h.dropout = dropout;
    return h;
  }

  Tensor operator()(const Tensor& x, bool training, std::mt19937_64& rng) const {
    return linear(tssan::dropout(relu(x), dropout, training, rng), weight, bias);
  }
};

/// Positions and motion as [B, F, S, J, C].
struct ModelInput {
  Tensor positions;
  Tensor motion;
};

struct ModelOutput {
  /// Raw scores [B, L]; V3 yields position, motion and concatenated heads.
  std::vector<Tensor> logits;
  /// One trace per SAN application: V1 one, V2 one per person, V3 one per
  /// modality (position, motion).
  std::vector<AttentionTrace> traces;
};

class Model {
 public:
  static Model create(const VariantConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    Model m;
    m.config_ = cfg;
    const SanConfig san = cfg.effective_san();
    const std::size_t ej = cfg.encoder_joints();
    auto encoder = [&](const std::string& name) {
      Encoder e = Encoder::create(cfg.encoder, m.params_, name, ej, cfg.coords, cfg.ff_hidden, rng);
      e.cnn.dropout = cfg.encoder_dropout;
      return e;
    };
    auto head = [&](const std::string& name, std::size_t in) {
      return ClassifierHead::create(m.params_, name, in, cfg.num_labels, cfg.classifier_dropout,
                                    rng);
    };
    switch (cfg.variant) {
      case Variant::v1:
        m.enc_pos_ = encoder("enc");
        m.san_.push_back(SanParams::create(m.params_, "san", san, rng));
        m.heads_.push_back(head("head", san.width));
        break;
      case Variant::v2:
        m.enc_pos_ = encoder("enc_pos");
        m.enc_mot_ = encoder("enc_mot");
        m.san_.push_back(SanParams::create(m.params_, "san", san, rng));
        m.heads_.push_back(head("head", san.width));
        break;
      case Variant::v3:
        m.enc_pos_ = encoder("enc_pos");
        m.enc_mot_ = encoder("enc_mot");
        m.san_.push_back(SanParams::create(m.params_, "san_pos", san, rng));
        m.san_.push_back(SanParams::create(m.params_, "san_mot", san, rng));
        m.heads_.push_back(head("head_pos", san.width));
        m.heads_.push_back(head("head_mot", san.width));
        m.heads_.push_back(head("head_cat", 2 * san.width));
        break;
    }
    return m;
  }

  const VariantConfig& config() const { return config_; }
  const ParamStore& params() const { return params_; }
  ParamStore& params() { return params_; }
  const std::vector<SanParams>& san_blocks() const { return san_; }

  ModelOutput forward(const ModelInput& in, bool training, std::mt19937_64& rng) const {
    check_input(in);
    switch (config_.variant) {
      case Variant::v1: return forward_v1(in, training, rng);
      case Variant::v2: return forward_v2(in, training, rng);
      default: return forward_v3(in, training, rng);
    }
  }

 private:
  void check_input(const ModelInput& in) const {
    const Shape want_tail{config_.persons, config_.joints, config_.coords};
    for (const Tensor* t : {&in.positions, &in.motion}) {
      if (!t->defined() || t->rank() != 5 ||
          Shape(t->shape().begin() + 2, t->shape().end()) != want_tail) {
        throw DimensionError("model: input must be [B,F," + std::to_string(config_.persons) + "," +
                             std::to_string(config_.joints) + "," +
                             std::to_string(config_.coords) + "], got " +
                             (t->defined() ? to_string(t->shape()) : std::string("undefined")));
      }
    }
    if (in.positions.shape() != in.motion.shape()) {
      throw DimensionError("model: position and motion shapes differ");
    }
  }

  /// Person s as [B, F, J, C].
  Tensor person(const Tensor& x, std::size_t s) const {
    const Shape& sh = x.shape();
    return reshape(slice(x, 2, s, s + 1), {sh[0], sh[1], sh[3], sh[4]});
  }

  /// Element-wise max over a list of equally shaped tensors.
  static Tensor elementwise_max(const std::vector<Tensor>& parts) {
    if (parts.size() == 1) return parts[0];
    std::vector<Tensor> stacked;
    for (const auto& p : parts) {
      Shape s = p.shape();
      s.insert(s.begin(), 1);
      stacked.push_back(reshape(p, s));
    }
    return max_axis(concat(stacked, 0), 0);
  }

  ModelOutput forward_v1(const ModelInput& in, bool training, std::mt19937_64& rng) const {
    const Shape& sh = in.positions.shape();
    const Shape fused{sh[0], sh[1], sh[2] * sh[3], sh[4]};
    Tensor x = concat({reshape(in.positions, fused), reshape(in.motion, fused)}, 2);
    SanOutput s = san_block(enc_pos_(x, training, rng), san_[0], training, rng);
    return {{heads_[0](s.o, training, rng)}, {std::move(s.trace)}};
  }

  ModelOutput forward_v2(const ModelInput& in, bool training, std::mt19937_64& rng) const {
    ModelOutput out;
    std::vector<Tensor> per_person;
    for (std::size_t s = 0; s < config_.persons; ++s) {
      Tensor f = concat({enc_pos_(person(in.positions, s), training, rng),
                         enc_mot_(person(in.motion, s), training, rng)},
                        2);
      SanOutput o = san_block(f, san_[0], training, rng);
      per_person.push_back(o.o);
      out.traces.push_back(std::move(o.trace));
    }
    out.logits.push_back(heads_[0](elementwise_max(per_person), training, rng));
    return out;
  }

  ModelOutput forward_v3(const ModelInput& in, bool training, std::mt19937_64& rng) const {
    ModelOutput out;
    std::vector<Tensor> pos, mot;
    for (std::size_t s = 0; s < config_.persons; ++s) {
      pos.push_back(enc_pos_(person(in.positions, s), training, rng));
      mot.push_back(enc_mot_(person(in.motion, s), training, rng));
    }
    SanOutput sp = san_block(elementwise_max(pos), san_[0], training, rng);
    SanOutput sm = san_block(elementwise_max(mot), san_[1], training, rng);
    out.logits.push_back(heads_[0](sp.o, training, rng));
    out.logits.push_back(heads_[1](sm.o, training, rng));
    out.logits.push_back(heads_[2](concat({sp.o, sm.o}, 1), training, rng));
    out.traces.push_back(std::move(sp.trace));
    out.traces.push_back(std::move(sm.trace));
    return out;
  }

  VariantConfig config_;
  ParamStore params_;
  Encoder enc_pos_, enc_mot_;
  std::vector<SanParams> san_;
  std::vector<ClassifierHead> heads_;
};

/// Sum of cross-entropy over every head of the output.
inline Tensor variant_loss(const ModelOutput& out, std::span<const std::size_t> labels) {
  Tensor total = cross_entropy(out.logits[0], labels);
  for (std::size_t i = 1; i < out.logits.size(); ++i) {
    total = add(total, cross_entropy(out.logits[i], labels));
  }
  return total;
}

/// Class probabilities [B, L] used for prediction.
inline Tensor prediction_probs(const ModelOutput& out, V3Inference mode = V3Inference::cat) {
  if (out.logits.size() == 1) return softmax(out.logits[0]);
  if (mode == V3Inference::cat) return softmax(out.logits.back());
  Tensor acc = softmax(out.logits[0]);
  for (std::size_t i = 1; i < out.logits.size(); ++i) acc = add(acc, softmax(out.logits[i]));
  return scale(acc, 1.0 / static_cast<double>(out.logits.size()));
}

/// Index of the largest value; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

struct Prediction {
  std::size_t label = 0;
  std::vector<double> probs;
};

inline Prediction predict(std::span<const double> logits) {
  if (logits.empty()) throw DimensionError("predict: empty logits");
  Tensor p = softmax(Tensor({logits.size()}, std::vector<double>(logits.begin(), logits.end())));
  Prediction out{0, {p.values().begin(), p.values().end()}};
  out.label = argmax(out.probs);
  return out;
}

/// Stacks clips into [B, F, S, J, C]; all clips must share one shape.
inline Tensor stack_positions(std::span<const SkeletonClip> clips) {
  if (clips.empty()) throw InputError("stack_positions: no clips");
  const ClipShape& sh = clips[0].shape;
  std::vector<double> data;
  data.reserve(clips.size() * sh.size());
  for (const auto& c : clips) {
    if (!(c.shape == sh)) {
      throw DimensionError("stack_positions: clip " + to_string(c.shape) + " differs from " +
                           to_string(sh));
    }
    data.insert(data.end(), c.positions.begin(), c.positions.end());
  }
  return Tensor({clips.size(), sh.frames, sh.persons, sh.joints, sh.coords}, std::move(data));
}

/// Model input with motion derived per clip.
inline ModelInput make_input(std::span<const SkeletonClip> clips) {
  std::vector<SkeletonClip> motion;
  motion.reserve(clips.size());
  for (const auto& c : clips) {
    SkeletonClip m = c;
    m.positions = compute_motion(c).motion;
    motion.push_back(std::move(m));
  }
  return {stack_positions(clips), stack_positions(motion)};
}

}  // namespace tssan
