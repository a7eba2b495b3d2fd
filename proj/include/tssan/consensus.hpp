#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tssan/error.hpp"
#include "tssan/ops.hpp"
#include "tssan/skeleton.hpp"
#include "tssan/variants.hpp"

namespace tssan {

enum class Consensus { average, max };
enum class SegmentSampling { random_window, uniform };

inline std::string to_string(Consensus c) { return c == Consensus::average ? "avg" : "max"; }

inline Consensus parse_consensus(const std::string& s) {
  if (s == "avg" || s == "average") return Consensus::average;
  if (s == "max") return Consensus::max;
  throw ConfigError("unknown consensus '" + s + "' (expected avg or max)");
}

inline std::string to_string(SegmentSampling s) {
  return s == SegmentSampling::random_window ? "random" : "uniform";
}

inline SegmentSampling parse_sampling(const std::string& s) {
  if (s == "random" || s == "random-window") return SegmentSampling::random_window;
  if (s == "uniform") return SegmentSampling::uniform;
  throw ConfigError("unknown sampling '" + s + "' (expected random or uniform)");
}

struct TsnConfig {
  std::size_t segments = 3;             // K
  std::size_t frames_per_segment = 32;  // n
  Consensus consensus = Consensus::average;
  SegmentSampling train_sampling = SegmentSampling::random_window;
  CropRange train_crop{};
  double eval_crop = 0.9;
  bool per_segment_loss = false;

  void validate() const {
    if (segments == 0) throw ConfigError("tsn: segments must be positive");
    if (frames_per_segment < 2) throw ConfigError("tsn: frames_per_segment must be at least 2");
    if (!(train_crop.min_ratio > 0.0 && train_crop.min_ratio <= train_crop.max_ratio &&
          train_crop.max_ratio <= 1.0)) {
      throw ConfigError("tsn: crop ratios must satisfy 0 < min <= max <= 1");
    }
    if (!(eval_crop > 0.0 && eval_crop <= 1.0)) throw ConfigError("tsn: eval_crop must be in (0,1]");
  }
};

/// K contiguous spans; the first F mod K spans get one extra frame.
inline std::vector<SkeletonClip> segment_video(const SkeletonClip& clip, std::size_t k) {
  const std::size_t frames = clip.shape.frames;
  if (k == 0 || frames < k) {
    throw InputError("segment_video: cannot split " + std::to_string(frames) + " frames into " +
                     std::to_string(k) + " segments");
  }
  std::vector<SkeletonClip> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t len = frames / k + (i < frames % k ? 1 : 0);
    out.push_back(crop_frames(clip, start, len));
    start += len;
  }
  return out;
}

/// Crop (random window or centered) then resample to exactly n frames.
inline SkeletonClip sample_segment_frames(const SkeletonClip& sub, std::size_t n,
                                          SegmentSampling mode, std::mt19937_64& rng,
                                          CropRange train_crop = {}, double eval_crop = 0.9) {
  if (sub.shape.frames == 0) throw InputError("sample_segment_frames: empty segment");
  SkeletonClip window = mode == SegmentSampling::random_window ? random_crop(sub, rng, train_crop)
                                                               : center_crop(sub, eval_crop);
  if (window.shape.frames == 1) return repeat_pad_frames(window, n);
  return resample_sequence(window, n);
}

/// Segments every clip and stacks the sampled segments item-major, so
/// segment k of clip b sits at batch index b*K + k. Motion is derived on the
/// sampled frames.
inline ModelInput prepare_segments(std::span<const SkeletonClip> clips, const TsnConfig& tsn,
                                   bool training, std::mt19937_64& rng) {
  const SegmentSampling mode = training ? tsn.train_sampling : SegmentSampling::uniform;
  std::vector<SkeletonClip> sampled;
  sampled.reserve(clips.size() * tsn.segments);
  for (const auto& clip : clips) {
    for (const auto& seg : segment_video(clip, tsn.segments)) {
      sampled.push_back(sample_segment_frames(seg, tsn.frames_per_segment, mode, rng,
                                              tsn.train_crop, tsn.eval_crop));
    }
  }
  return make_input(sampled);
}

/// probs: [B*K, L] -> fused [B, L].
inline Tensor fuse_segments(const Tensor& probs, std::size_t segments, Consensus c) {
  if (probs.rank() != 2 || segments == 0 || probs.dim(0) % segments != 0) {
    throw DimensionError("fuse_segments: expected [B*K, L] with K=" + std::to_string(segments) +
                         ", got " + to_string(probs.shape()));
  }
  const std::size_t batch = probs.dim(0) / segments, labels = probs.dim(1);
  Tensor grouped = reshape(probs, {batch, segments, labels});
  if (c == Consensus::average) return mean_axis(grouped, 1);
  return normalize_last(max_axis(grouped, 1));
}

struct TsOutput {
  ModelOutput segments;  // per-segment logits, batch B*K
  Tensor fused;          // [B, L] fused prediction probabilities
};

/// Shared-weight variant forward over every segment, then consensus.
inline TsOutput ts_forward(const Model& model, const ModelInput& in, const TsnConfig& tsn,
                           bool training, std::mt19937_64& rng) {
  TsOutput out;
  out.segments = model.forward(in, training, rng);
  out.fused = fuse_segments(prediction_probs(out.segments, model.config().v3_inference),
                            tsn.segments, tsn.consensus);
  return out;
}

/// Fused mode: negative log of each head's fused probability, summed over
/// heads. Per-segment mode: cross-entropy of every segment against its
/// clip label, summed over heads.
inline Tensor ts_loss(const TsOutput& out, std::span<const std::size_t> labels,
                      const TsnConfig& tsn) {
  Tensor total;
  for (const auto& logits : out.segments.logits) {
    Tensor term;
    if (tsn.per_segment_loss) {
      std::vector<std::size_t> expanded;
      for (std::size_t y : labels) expanded.insert(expanded.end(), tsn.segments, y);
      term = cross_entropy(logits, expanded);
    } else {
      term = nll_of_probs(fuse_segments(softmax(logits), tsn.segments, tsn.consensus), labels);
    }
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

}  // namespace tssan
