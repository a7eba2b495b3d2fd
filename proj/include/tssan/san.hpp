#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "tssan/error.hpp"
#include "tssan/ops.hpp"
#include "tssan/params.hpp"

namespace tssan {

struct SanConfig {
  std::size_t layers = 4;      // N
  std::size_t heads = 8;       // h
  std::size_t width = 512;     // H
  std::size_t ff_width = 0;    // d_ff; 0 means 2H
  std::size_t max_frames = 32;
  double dropout = 0.2;

  std::size_t head_dim() const { return width / heads; }
  std::size_t hidden() const { return ff_width ? ff_width : 2 * width; }

  void validate() const {
    if (layers == 0 || heads == 0 || width == 0 || max_frames == 0) {
      throw ConfigError("san: layers, heads, width and max_frames must be positive");
    }
    if (width % heads != 0) {
      throw ConfigError("san: width " + std::to_string(width) + " is not divisible by " +
                        std::to_string(heads) + " heads");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("san: dropout must be in [0,1)");
  }
};

struct SanLayerParams {
  Tensor wq, wk, wv;  // [H, H]
  Tensor wo, bo;      // [H, H], [H]
  Tensor ln1_gamma, ln1_beta;
  Tensor ff1_w, ff1_b;  // [H, d_ff], [d_ff]
  Tensor ff2_w, ff2_b;  // [d_ff, H], [H]
  Tensor ln2_gamma, ln2_beta;
};

struct SanParams {
  SanConfig config;
  Tensor position;  // [max_F, H]
  std::vector<SanLayerParams> layers;
  Tensor proj_w, proj_b;  // [H*N, H], [H]

  static SanParams create(ParamStore& store, const std::string& prefix, const SanConfig& cfg,
                          std::mt19937_64& rng) {
    cfg.validate();
    const std::size_t H = cfg.width, D = cfg.hidden();
    auto glorot = [&](const std::string& name, std::size_t in, std::size_t out) {
      return store.add(prefix + "." + name, init::glorot_uniform({in, out}, in, out, rng));
    };
    auto fill = [&](const std::string& name, std::size_t n, double v) {
      return store.add(prefix + "." + name, init::constant({n}, v));
    };
    SanParams p;
    p.config = cfg;
    p.position = store.add(prefix + ".position", init::normal({cfg.max_frames, H}, 0.02, rng));
    for (std::size_t i = 0; i < cfg.layers; ++i) {
      const std::string l = "layer" + std::to_string(i) + ".";
      SanLayerParams lp;
      lp.wq = glorot(l + "wq", H, H);
      lp.wk = glorot(l + "wk", H, H);
      lp.wv = glorot(l + "wv", H, H);
      lp.wo = glorot(l + "wo", H, H);
      lp.bo = fill(l + "bo", H, 0.0);
      lp.ln1_gamma = fill(l + "ln1.gamma", H, 1.0);
      lp.ln1_beta = fill(l + "ln1.beta", H, 0.0);
      lp.ff1_w = glorot(l + "ff1.w", H, D);
      lp.ff1_b = fill(l + "ff1.b", D, 0.0);
      lp.ff2_w = glorot(l + "ff2.w", D, H);
      lp.ff2_b = fill(l + "ff2.b", H, 0.0);
      lp.ln2_gamma = fill(l + "ln2.gamma", H, 1.0);
      lp.ln2_beta = fill(l + "ln2.beta", H, 0.0);
      p.layers.push_back(std::move(lp));
    }
    p.proj_w = glorot("proj.w", H * cfg.layers, H);
    p.proj_b = fill("proj.b", H, 0.0);
    return p;
  }
};

/// Attention probabilities of every layer; layer i is [B, h, F, F] with
/// rows indexed by query frame.
struct AttentionTrace {
  std::vector<Tensor> layers;

  std::size_t batch() const { return layers.empty() ? 0 : layers[0].dim(0); }
  std::size_t heads() const { return layers.empty() ? 0 : layers[0].dim(1); }
  std::size_t frames() const { return layers.empty() ? 0 : layers[0].dim(2); }

  /// Row-major F x F matrix for (layer, item, head).
  std::vector<double> matrix(std::size_t layer, std::size_t item, std::size_t head) const {
    if (layer >= layers.size() || item >= batch() || head >= heads()) {
      throw IndexError("attention trace: layer/item/head out of range");
    }
    const std::size_t ff = frames() * frames();
    auto v = layers[layer].values();
    auto first = v.begin() + static_cast<std::ptrdiff_t>((item * heads() + head) * ff);
    return {first, first + static_cast<std::ptrdiff_t>(ff)};
  }
};

namespace detail {

/// [F,H] -> [1,F,H]; [B,F,H] unchanged.
inline Tensor batch_view(const char* op, const Tensor& x, std::size_t width) {
  if ((x.rank() != 2 && x.rank() != 3) || x.shape().back() != width) {
    throw DimensionError(std::string(op) + ": expected [F," + std::to_string(width) + "] or [B,F," +
                         std::to_string(width) + "], got " + to_string(x.shape()));
  }
  return x.rank() == 3 ? x : reshape(x, {1, x.dim(0), width});
}

inline Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t B = x.dim(0), F = x.dim(1), d = x.dim(2) / heads;
  return reshape(permute(reshape(x, {B, F, heads, d}), {0, 2, 1, 3}), {B * heads, F, d});
}

inline Tensor merge_heads(const Tensor& x, std::size_t batch, std::size_t heads) {
  const std::size_t F = x.dim(1), d = x.dim(2);
  return reshape(permute(reshape(x, {batch, heads, F, d}), {0, 2, 1, 3}), {batch, F, heads * d});
}

inline Tensor restore_rank(const Tensor& out, const Tensor& like) {
  return like.rank() == 2 ? reshape(out, {out.dim(1), out.dim(2)}) : out;
}

}  // namespace detail

/// y[t] = x[t] + p[t] for t < F.
inline Tensor position_embed(const Tensor& x, const Tensor& position) {
  const std::size_t frames = x.dim(x.rank() - 2);
  if (frames > position.dim(0)) {
    throw ConfigError("position_embed: " + std::to_string(frames) +
                      " frames exceed the position table length " +
                      std::to_string(position.dim(0)));
  }
  Tensor xb = detail::batch_view("position_embed", x, position.dim(1));
  return detail::restore_rank(add(xb, slice(position, 0, 0, frames)), x);
}

/// Scaled dot-product attention over `heads` slices of learned Q/K/V
/// projections, then the output projection. `probs` receives [B,h,F,F].
inline Tensor multi_head_attention(const Tensor& y, const SanLayerParams& p, std::size_t heads,
                                   Tensor* probs = nullptr) {
  const std::size_t width = p.wq.dim(0);
  if (heads == 0 || width % heads != 0) {
    throw DimensionError("multi_head_attention: width not divisible by heads");
  }
  Tensor yb = detail::batch_view("multi_head_attention", y, width);
  const std::size_t B = yb.dim(0), F = yb.dim(1), dk = width / heads;
  Tensor q = detail::split_heads(linear(yb, p.wq), heads);
  Tensor k = detail::split_heads(linear(yb, p.wk), heads);
  Tensor v = detail::split_heads(linear(yb, p.wv), heads);
  Tensor att = softmax(scale(bmm(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(dk))));
  if (probs) *probs = reshape(att, {B, heads, F, F});
  Tensor z = detail::merge_heads(bmm(att, v), B, heads);
  return detail::restore_rank(linear(z, p.wo, p.bo), y);
}

/// Post-norm layer: a = LN(y + drop(MHA(y))); out = LN(a + drop(FFN(a))).
inline Tensor san_layer(const Tensor& y, const SanLayerParams& p, const SanConfig& cfg,
                        bool training, std::mt19937_64& rng, Tensor* probs = nullptr) {
  Tensor attn = multi_head_attention(y, p, cfg.heads, probs);
  Tensor a = layer_norm(add(y, dropout(attn, cfg.dropout, training, rng)), p.ln1_gamma,
                        p.ln1_beta);
  Tensor ff = linear(relu(linear(a, p.ff1_w, p.ff1_b)), p.ff2_w, p.ff2_b);
  return layer_norm(add(a, dropout(ff, cfg.dropout, training, rng)), p.ln2_gamma, p.ln2_beta);
}

struct SanOutput {
  Tensor o;  // [B, H] or [H]
  AttentionTrace trace;
};

/// Position embedding, N layers, concatenation of every layer output,
/// frame average, then rectified projection back to width H.
inline SanOutput san_block(const Tensor& x, const SanParams& p, bool training,
                           std::mt19937_64& rng) {
  const SanConfig& cfg = p.config;
  Tensor xb = detail::batch_view("san_block", x, cfg.width);
  Tensor z = position_embed(xb, p.position);
  SanOutput out;
  std::vector<Tensor> outputs;
  for (const auto& layer : p.layers) {
    Tensor probs;
    z = san_layer(z, layer, cfg, training, rng, &probs);
    outputs.push_back(z);
    out.trace.layers.push_back(probs);
  }
  Tensor c = outputs.size() == 1 ? outputs[0] : concat(outputs, 2);
  out.o = relu(linear(mean_axis(c, 1), p.proj_w, p.proj_b));
  if (x.rank() == 2) out.o = reshape(out.o, {cfg.width});
  return out;
}

}  // namespace tssan
