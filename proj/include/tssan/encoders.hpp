#pragma once

#include <cstddef>
#include <random>
#include <string>

#include "tssan/error.hpp"
#include "tssan/ops.hpp"
#include "tssan/params.hpp"

namespace tssan {

enum class EncoderKind { ff, cnn };

inline std::string to_string(EncoderKind k) { return k == EncoderKind::ff ? "ff" : "cnn"; }

inline EncoderKind parse_encoder_kind(const std::string& s) {
  if (s == "ff") return EncoderKind::ff;
  if (s == "cnn") return EncoderKind::cnn;
  throw ConfigError("unknown encoder '" + s + "' (expected ff or cnn)");
}

inline constexpr std::size_t kCnnFeatureWidth = 512;

namespace detail {

/// Accepts [F,J,C] or [N,F,J,C]; returns the batched view.
inline Tensor as_batched_clip(const char* op, const Tensor& x, std::size_t joints,
                              std::size_t coords) {
  if (x.rank() != 3 && x.rank() != 4) {
    throw DimensionError(std::string(op) + ": input must be [F,J,C] or [N,F,J,C], got " +
                         to_string(x.shape()));
  }
  const std::size_t r = x.rank();
  if (x.dim(r - 2) != joints || x.dim(r - 1) != coords) {
    throw DimensionError(std::string(op) + ": expected J=" + std::to_string(joints) +
                         " C=" + std::to_string(coords) + ", got " + to_string(x.shape()));
  }
  return r == 4 ? x : reshape(x, {1, x.dim(0), joints, coords});
}

}  // namespace detail

/// Per-joint affine C -> C' with rectifier, flattened per frame.
struct FfEncoderParams {
  Tensor weight;  // [C, C']
  Tensor bias;    // [C']
  std::size_t joints = 0;

  std::size_t coords() const { return weight.dim(0); }
  std::size_t hidden() const { return weight.dim(1); }
  std::size_t output_width() const { return joints * hidden(); }

  static FfEncoderParams create(ParamStore& store, const std::string& prefix, std::size_t joints,
                                std::size_t coords, std::size_t hidden, std::mt19937_64& rng) {
    FfEncoderParams p;
    p.joints = joints;
    p.weight = store.add(prefix + ".w", init::glorot_uniform({coords, hidden}, coords, hidden, rng));
    p.bias = store.add(prefix + ".b", init::constant({hidden}, 0.0));
    return p;
  }
};

/// x: [F,J,C] or [N,F,J,C] -> [F,J*C'] or [N,F,J*C'].
inline Tensor ff_encode(const Tensor& x, const FfEncoderParams& p) {
  Tensor xb = detail::as_batched_clip("ff_encode", x, p.joints, p.coords());
  Tensor h = relu(linear(xb, p.weight, p.bias));
  Shape out{xb.dim(0), xb.dim(1), p.output_width()};
  if (x.rank() == 3) out.erase(out.begin());
  return reshape(h, out);
}

/// Four same-padded convolutions; joints become channels before the third.
struct CnnEncoderParams {
  Tensor w1, b1;  // [64, C, 1, 1]
  Tensor w2, b2;  // [32, 64, 3, 1]
  Tensor w3, b3;  // [32, J, 3, 3]
  Tensor w4, b4;  // [64, 32, 3, 3]
  double dropout = 0.5;

  std::size_t joints() const { return w3.dim(1); }
  std::size_t coords() const { return w1.dim(1); }
  static constexpr std::size_t output_width() { return kCnnFeatureWidth; }

  static CnnEncoderParams create(ParamStore& store, const std::string& prefix, std::size_t joints,
                                 std::size_t coords, std::mt19937_64& rng) {
    auto conv = [&](const std::string& name, std::size_t cout, std::size_t cin, std::size_t kh,
                    std::size_t kw, Tensor& w, Tensor& b) {
      w = store.add(prefix + "." + name + ".w",
                    init::glorot_uniform({cout, cin, kh, kw}, cin * kh * kw, cout * kh * kw, rng));
      b = store.add(prefix + "." + name + ".b", init::constant({cout}, 0.0));
    };
    CnnEncoderParams p;
    conv("conv1", 64, coords, 1, 1, p.w1, p.b1);
    conv("conv2", 32, 64, 3, 1, p.w2, p.b2);
    conv("conv3", 32, joints, 3, 3, p.w3, p.b3);
    conv("conv4", 64, 32, 3, 3, p.w4, p.b4);
    return p;
  }
};

/// x: [F,J,C] or [N,F,J,C] -> [F,512] or [N,F,512].
inline Tensor cnn_encode(const Tensor& x, const CnnEncoderParams& p, bool training,
                         std::mt19937_64& rng) {
  Tensor xb = detail::as_batched_clip("cnn_encode", x, p.joints(), p.coords());
  const std::size_t n = xb.dim(0), frames = xb.dim(1);
  Tensor h = permute(xb, {0, 3, 1, 2});                 // [N, C, F, J]
  h = relu(conv2d(h, p.w1, p.b1));                      // [N, 64, F, J]
  h = relu(conv2d(h, p.w2, p.b2));                      // [N, 32, F, J]
  h = permute(h, {0, 3, 2, 1});                         // [N, J, F, 32]
  h = maxpool2d(relu(conv2d(h, p.w3, p.b3)));           // [N, 32, F, 16]
  h = maxpool2d(relu(conv2d(h, p.w4, p.b4)));           // [N, 64, F, 8]
  h = dropout(h, p.dropout, training, rng);
  h = permute(h, {0, 2, 3, 1});                         // [N, F, 8, 64]
  Shape out{n, frames, kCnnFeatureWidth};
  if (x.rank() == 3) out.erase(out.begin());
  return reshape(h, out);
}

/// One encoder instance of either kind.
struct Encoder {
  EncoderKind kind = EncoderKind::cnn;
  FfEncoderParams ff;
  CnnEncoderParams cnn;

  static Encoder create(EncoderKind kind, ParamStore& store, const std::string& prefix,
                        std::size_t joints, std::size_t coords, std::size_t ff_hidden,
                        std::mt19937_64& rng) {
    Encoder e;
    e.kind = kind;
    if (kind == EncoderKind::ff) {
      e.ff = FfEncoderParams::create(store, prefix, joints, coords, ff_hidden, rng);
    } else {
      e.cnn = CnnEncoderParams::create(store, prefix, joints, coords, rng);
    }
    return e;
  }

  std::size_t output_width() const {
    return kind == EncoderKind::ff ? ff.output_width() : CnnEncoderParams::output_width();
  }

  Tensor operator()(const Tensor& x, bool training, std::mt19937_64& rng) const {
    return kind == EncoderKind::ff ? ff_encode(x, ff) : cnn_encode(x, cnn, training, rng);
  }
};

}  // namespace tssan
