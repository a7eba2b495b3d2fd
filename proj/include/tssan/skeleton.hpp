#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "tssan/error.hpp"

namespace tssan {

/// Extents of a skeleton array laid out frame -> person -> joint -> coord.
struct ClipShape {
  std::size_t frames = 0;
  std::size_t persons = 0;
  std::size_t joints = 0;
  std::size_t coords = 0;

  std::size_t frame_size() const { return persons * joints * coords; }
  std::size_t person_size() const { return joints * coords; }
  std::size_t size() const { return frames * frame_size(); }
  /// J' = S * J
  std::size_t total_joints() const { return persons * joints; }
  std::size_t index(std::size_t f, std::size_t s, std::size_t j, std::size_t c) const {
    return ((f * persons + s) * joints + j) * coords + c;
  }
  bool operator==(const ClipShape&) const = default;
};

inline std::string to_string(const ClipShape& s) {
  return "F=" + std::to_string(s.frames) + " S=" + std::to_string(s.persons) +
         " J=" + std::to_string(s.joints) + " C=" + std::to_string(s.coords);
}

/// Raw joint positions with a per-person validity mask. Padded persons are
/// all-zero and masked invalid.
struct SkeletonClip {
  ClipShape shape;
  std::vector<double> positions;
  std::vector<bool> valid_person;

  static SkeletonClip zeros(ClipShape shape) {
    SkeletonClip c;
    c.shape = shape;
    c.positions.assign(shape.size(), 0.0);
    c.valid_person.assign(shape.persons, false);
    return c;
  }

  double& at(std::size_t f, std::size_t s, std::size_t j, std::size_t c) {
    return positions[shape.index(f, s, j, c)];
  }
  double at(std::size_t f, std::size_t s, std::size_t j, std::size_t c) const {
    return positions[shape.index(f, s, j, c)];
  }

  /// Marks each person valid iff any of its coordinates is nonzero.
  void refresh_mask() {
    valid_person.assign(shape.persons, false);
    for (std::size_t f = 0; f < shape.frames; ++f)
      for (std::size_t s = 0; s < shape.persons; ++s)
        for (std::size_t k = 0; k < shape.person_size(); ++k)
          if (positions[(f * shape.persons + s) * shape.person_size() + k] != 0.0)
            valid_person[s] = true;
  }

  void validate() const {
    if (positions.size() != shape.size()) {
      throw ValidationError("skeleton clip: " + std::to_string(positions.size()) +
                            " values for " + to_string(shape));
    }
    if (valid_person.size() != shape.persons) {
      throw ValidationError("skeleton clip: mask length differs from person count");
    }
    for (double v : positions) {
      if (!std::isfinite(v)) throw ValidationError("skeleton clip: non-finite coordinate");
    }
  }

  bool operator==(const SkeletonClip&) const = default;
};

/// Frame-to-frame joint differences; same layout as SkeletonClip.
struct MotionClip {
  ClipShape shape;
  std::vector<double> motion;

  double at(std::size_t f, std::size_t s, std::size_t j, std::size_t c) const {
    return motion[shape.index(f, s, j, c)];
  }
};

/// Forward difference per joint and coordinate; the final frame is zero.
inline MotionClip compute_motion(const SkeletonClip& clip) {
  const auto& sh = clip.shape;
  if (sh.frames < 2) {
    throw InputError("compute_motion: need at least 2 frames, got " +
                     std::to_string(sh.frames));
  }
  MotionClip m{sh, std::vector<double>(sh.size(), 0.0)};
  const std::size_t fs = sh.frame_size();
  for (std::size_t f = 0; f + 1 < sh.frames; ++f) {
    for (std::size_t k = 0; k < fs; ++k) {
      m.motion[f * fs + k] = clip.positions[(f + 1) * fs + k] - clip.positions[f * fs + k];
    }
  }
  return m;
}

/// Endpoint-aligned linear interpolation along the frame axis:
/// output frame i samples source position i * (F - 1) / (target - 1).
inline SkeletonClip resample_sequence(const SkeletonClip& clip, std::size_t target_frames) {
  const auto& sh = clip.shape;
  if (sh.frames < 2 || target_frames < 2) {
    throw InputError("resample_sequence: need F >= 2 and target >= 2, got F=" +
                     std::to_string(sh.frames) + " target=" + std::to_string(target_frames));
  }
  SkeletonClip out = clip;
  out.shape.frames = target_frames;
  out.positions.assign(out.shape.size(), 0.0);
  const std::size_t fs = sh.frame_size();
  for (std::size_t i = 0; i < target_frames; ++i) {
    const double src = static_cast<double>(i * (sh.frames - 1)) /
                       static_cast<double>(target_frames - 1);
    std::size_t lo = static_cast<std::size_t>(std::floor(src));
    if (lo >= sh.frames - 1) lo = sh.frames - 1;
    const double t = src - static_cast<double>(lo);
    const std::size_t hi = std::min(lo + 1, sh.frames - 1);
    for (std::size_t k = 0; k < fs; ++k) {
      const double a = clip.positions[lo * fs + k];
      const double b = clip.positions[hi * fs + k];
      double v = (t == 0.0 || a == b) ? a : a + t * (b - a);
      v = std::clamp(v, std::min(a, b), std::max(a, b));
      out.positions[i * fs + k] = v;
    }
  }
  return out;
}

/// Contiguous frames [start, start + length).
inline SkeletonClip crop_frames(const SkeletonClip& clip, std::size_t start, std::size_t length) {
  if (length == 0 || start + length > clip.shape.frames) {
    throw InputError("crop_frames: window [" + std::to_string(start) + "," +
                     std::to_string(start + length) + ") exceeds " +
                     std::to_string(clip.shape.frames) + " frames");
  }
  SkeletonClip out = clip;
  out.shape.frames = length;
  const std::size_t fs = clip.shape.frame_size();
  out.positions.assign(clip.positions.begin() + static_cast<std::ptrdiff_t>(start * fs),
                       clip.positions.begin() + static_cast<std::ptrdiff_t>((start + length) * fs));
  return out;
}

inline std::size_t round_half_up(double v) {
  return static_cast<std::size_t>(std::floor(v + 0.5));
}

/// Crop length round(ratio * F), at least min(2, F) so the result can be
/// resampled.
inline std::size_t crop_length(std::size_t frames, double ratio) {
  std::size_t len = round_half_up(ratio * static_cast<double>(frames));
  len = std::clamp<std::size_t>(len, std::min<std::size_t>(2, frames), frames);
  return len;
}

struct CropRange {
  double min_ratio = 0.5;
  double max_ratio = 1.0;
};

/// Training augmentation: ratio r ~ U[min,max], window of round(r*F) frames
/// at a uniformly random valid start. The caller resamples afterwards.
inline SkeletonClip random_crop(const SkeletonClip& clip, std::mt19937_64& rng,
                                CropRange range = {}) {
  const double r = range.min_ratio == range.max_ratio
                       ? range.min_ratio
                       : std::uniform_real_distribution<double>(range.min_ratio,
                                                                range.max_ratio)(rng);
  const std::size_t len = crop_length(clip.shape.frames, r);
  const std::size_t start =
      std::uniform_int_distribution<std::size_t>(0, clip.shape.frames - len)(rng);
  return crop_frames(clip, start, len);
}

/// Evaluation crop: central round(ratio*F) frames, start floor((F-len)/2).
inline SkeletonClip center_crop(const SkeletonClip& clip, double ratio = 0.9) {
  const std::size_t len = crop_length(clip.shape.frames, ratio);
  return crop_frames(clip, (clip.shape.frames - len) / 2, len);
}

/// Cyclic repetition from the start until `target` frames.
inline SkeletonClip repeat_pad_frames(const SkeletonClip& clip, std::size_t target = 300) {
  if (clip.shape.frames == 0 || target == 0) {
    throw InputError("repeat_pad_frames: empty clip or target");
  }
  SkeletonClip out = clip;
  out.shape.frames = target;
  out.positions.assign(out.shape.size(), 0.0);
  const std::size_t fs = clip.shape.frame_size();
  for (std::size_t t = 0; t < target; ++t) {
    const std::size_t src = t % clip.shape.frames;
    std::copy_n(clip.positions.begin() + static_cast<std::ptrdiff_t>(src * fs), fs,
                out.positions.begin() + static_cast<std::ptrdiff_t>(t * fs));
  }
  return out;
}

/// Keeps the `max_persons` persons with highest mean confidence (coordinate
/// `confidence_channel`, averaged over joints and frames); ties go to the
/// lower original index. Missing slots are zero-padded and masked invalid.
inline SkeletonClip select_top_people(const SkeletonClip& raw, std::size_t max_persons = 2,
                                      std::size_t confidence_channel = 2) {
  const auto& sh = raw.shape;
  if (confidence_channel >= sh.coords) {
    throw InputError("select_top_people: clip has no confidence channel");
  }
  std::vector<double> score(sh.persons, 0.0);
  std::vector<bool> present(sh.persons, false);
  for (std::size_t f = 0; f < sh.frames; ++f)
    for (std::size_t s = 0; s < sh.persons; ++s)
      for (std::size_t j = 0; j < sh.joints; ++j) {
        score[s] += raw.at(f, s, j, confidence_channel);
        for (std::size_t c = 0; c < sh.coords; ++c)
          if (raw.at(f, s, j, c) != 0.0) present[s] = true;
      }
  std::vector<std::size_t> order;
  for (std::size_t s = 0; s < sh.persons; ++s)
    if (present[s]) order.push_back(s);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  if (order.size() > max_persons) order.resize(max_persons);

  ClipShape out_shape = sh;
  out_shape.persons = max_persons;
  SkeletonClip out = SkeletonClip::zeros(out_shape);
  for (std::size_t slot = 0; slot < order.size(); ++slot) {
    out.valid_person[slot] = true;
    for (std::size_t f = 0; f < sh.frames; ++f)
      for (std::size_t j = 0; j < sh.joints; ++j)
        for (std::size_t c = 0; c < sh.coords; ++c)
          out.at(f, slot, j, c) = raw.at(f, order[slot], j, c);
  }
  return out;
}

/// Reorders persons: output slot i holds input person perm[i].
inline SkeletonClip permute_persons(const SkeletonClip& clip, const std::vector<std::size_t>& perm) {
  const auto& sh = clip.shape;
  if (perm.size() != sh.persons) throw InputError("permute_persons: permutation size mismatch");
  SkeletonClip out = clip;
  for (std::size_t s = 0; s < sh.persons; ++s) {
    out.valid_person[s] = clip.valid_person[perm[s]];
    for (std::size_t f = 0; f < sh.frames; ++f)
      for (std::size_t k = 0; k < sh.person_size(); ++k)
        out.positions[(f * sh.persons + s) * sh.person_size() + k] =
            clip.positions[(f * sh.persons + perm[s]) * sh.person_size() + k];
  }
  return out;
}

}  // namespace tssan
