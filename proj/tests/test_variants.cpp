#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "tssan/variants.hpp"
#include "weights.hpp"

using namespace tssan;
namespace tt = tssan::testing;
using tt::random_tensor;
using tt::vec;

namespace {

VariantConfig toy(Variant v, EncoderKind e = EncoderKind::ff, std::size_t persons = 2) {
  VariantConfig c;
  c.variant = v;
  c.encoder = e;
  c.persons = persons;
  c.joints = 3;
  c.coords = 3;
  c.num_labels = 4;
  c.ff_hidden = 2;
  c.san.layers = 2;
  c.san.heads = 2;
  c.san.max_frames = 8;
  return c;
}

Model make_model(const VariantConfig& cfg, std::uint64_t seed, bool randomize = true) {
  std::mt19937_64 rng(seed);
  Model m = Model::create(cfg, rng);
  if (randomize) tt::randomize_all(m.params(), rng, 0.5);
  return m;
}

ModelInput random_input(const VariantConfig& c, std::size_t batch, std::size_t frames,
                        std::mt19937_64& rng) {
  Shape s{batch, frames, c.persons, c.joints, c.coords};
  return {random_tensor(s, rng, -1, 1, false), random_tensor(s, rng, -1, 1, false)};
}

ModelInput swap_persons(const ModelInput& in) {
  auto swap = [](const Tensor& x) {
    const std::size_t B = x.dim(0), F = x.dim(1), S = x.dim(2), K = x.dim(3) * x.dim(4);
    Tensor out(x.shape());
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t f = 0; f < F; ++f)
        for (std::size_t s = 0; s < S; ++s)
          for (std::size_t k = 0; k < K; ++k)
            out[((b * F + f) * S + s) * K + k] = x[((b * F + f) * S + (S - 1 - s)) * K + k];
    return out;
  };
  return {swap(in.positions), swap(in.motion)};
}

// Oracle evaluation of one item in eval mode, ff encoder only.

using oracle::Vec;

Vec person_frames(const Tensor& x, std::size_t b, std::size_t s) {
  const std::size_t F = x.dim(1), S = x.dim(2), K = x.dim(3) * x.dim(4);
  Vec out;
  for (std::size_t f = 0; f < F; ++f)
    for (std::size_t k = 0; k < K; ++k) out.push_back(x[((b * F + f) * S + s) * K + k]);
  return out;
}

/// [F, J*C] rows -> [F, J*C'] via per-joint affine + rectifier.
Vec ff_oracle(const Vec& x, const Tensor& w, const Tensor& b, std::size_t rows_joints,
              std::size_t C) {
  const std::size_t Cp = b.numel();
  Vec out;
  for (std::size_t r = 0; r < rows_joints; ++r) {
    Vec in(x.begin() + r * C, x.begin() + (r + 1) * C);
    Vec h = oracle::relu(oracle::affine(in, vec(w), vec(b), Cp));
    out.insert(out.end(), h.begin(), h.end());
  }
  return out;
}

Vec head_oracle(const Model& m, const std::string& name, const Vec& o) {
  const std::size_t L = m.config().num_labels;
  return oracle::affine(oracle::relu(o), vec(m.params().at(name + ".w")),
                        vec(m.params().at(name + ".b")), L);
}

Vec ff_enc(const Model& m, const std::string& name, const Vec& x, std::size_t F) {
  const auto& c = m.config();
  return ff_oracle(x, m.params().at(name + ".w"), m.params().at(name + ".b"),
                   F * c.encoder_joints(), c.coords);
}

std::vector<Vec> oracle_logits(const Model& m, const ModelInput& in, std::size_t b) {
  const auto& c = m.config();
  const std::size_t F = in.positions.dim(1), S = c.persons, H = c.san_width();
  const std::size_t h = c.san.heads;
  if (c.variant == Variant::v1) {
    const std::size_t JC = S * c.joints * c.coords;
    Vec fused;
    for (std::size_t f = 0; f < F; ++f) {
      for (std::size_t k = 0; k < JC; ++k) fused.push_back(in.positions[(b * F + f) * JC + k]);
      for (std::size_t k = 0; k < JC; ++k) fused.push_back(in.motion[(b * F + f) * JC + k]);
    }
    Vec o = oracle::san_block(ff_enc(m, "enc", fused, F), tt::to_oracle(m.san_blocks()[0]), F, H, h);
    return {head_oracle(m, "head", o)};
  }
  const std::size_t E = c.encoder_width();
  if (c.variant == Variant::v2) {
    Vec best;
    for (std::size_t s = 0; s < S; ++s) {
      Vec p = ff_enc(m, "enc_pos", person_frames(in.positions, b, s), F);
      Vec q = ff_enc(m, "enc_mot", person_frames(in.motion, b, s), F);
      Vec cat;
      for (std::size_t f = 0; f < F; ++f) {
        cat.insert(cat.end(), p.begin() + f * E, p.begin() + (f + 1) * E);
        cat.insert(cat.end(), q.begin() + f * E, q.begin() + (f + 1) * E);
      }
      Vec o = oracle::san_block(cat, tt::to_oracle(m.san_blocks()[0]), F, H, h);
      if (best.empty()) best = o;
      for (std::size_t i = 0; i < H; ++i) best[i] = std::max(best[i], o[i]);
    }
    return {head_oracle(m, "head", best)};
  }
  Vec pos, mot;
  for (std::size_t s = 0; s < S; ++s) {
    Vec p = ff_enc(m, "enc_pos", person_frames(in.positions, b, s), F);
    Vec q = ff_enc(m, "enc_mot", person_frames(in.motion, b, s), F);
    if (s == 0) {
      pos = p;
      mot = q;
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      pos[i] = std::max(pos[i], p[i]);
      mot[i] = std::max(mot[i], q[i]);
    }
  }
  Vec op = oracle::san_block(pos, tt::to_oracle(m.san_blocks()[0]), F, H, h);
  Vec om = oracle::san_block(mot, tt::to_oracle(m.san_blocks()[1]), F, H, h);
  Vec cat = op;
  cat.insert(cat.end(), om.begin(), om.end());
  return {head_oracle(m, "head_pos", op), head_oracle(m, "head_mot", om),
          head_oracle(m, "head_cat", cat)};
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  EXPECT_EQ(a.size(), b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i)
    m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(VariantConfig, DerivedWidths) {
  VariantConfig c = toy(Variant::v1);
  EXPECT_EQ(c.encoder_joints(), 12u);
  EXPECT_EQ(c.san_width(), 24u);
  c.variant = Variant::v2;
  EXPECT_EQ(c.san_width(), 12u);
  c.encoder = EncoderKind::cnn;
  EXPECT_EQ(c.san_width(), 1024u);
  c.variant = Variant::v3;
  EXPECT_EQ(c.san_width(), 512u);
  EXPECT_EQ(parse_variant("v2"), Variant::v2);
  EXPECT_THROW(parse_variant("v4"), ConfigError);
  c.san.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Variants, LogitShapes) {
  std::mt19937_64 rng(1);
  for (Variant v : {Variant::v1, Variant::v2, Variant::v3}) {
    Model m = make_model(toy(v), 2);
    ModelOutput out = m.forward(random_input(m.config(), 3, 5, rng), false, rng);
    ASSERT_EQ(out.logits.size(), v == Variant::v3 ? 3u : 1u);
    for (const auto& l : out.logits) EXPECT_EQ(l.shape(), (Shape{3, 4}));
    EXPECT_EQ(out.traces.size(), v == Variant::v1 ? 1u : 2u);
  }
}

TEST(Variants, ZeroInputGivesFiniteLogits) {
  std::mt19937_64 rng(3);
  for (EncoderKind e : {EncoderKind::ff, EncoderKind::cnn})
    for (Variant v : {Variant::v1, Variant::v2, Variant::v3}) {
      VariantConfig c = toy(v, e);
      c.san.layers = 1;
      Model m = make_model(c, 4, false);
      Shape s{2, 4, c.persons, c.joints, c.coords};
      ModelOutput out = m.forward({Tensor(s), Tensor(s)}, false, rng);
      for (const auto& l : out.logits)
        for (double x : l.values()) EXPECT_TRUE(std::isfinite(x));
    }
}

TEST(Variants, MatchComposedOracles) {
  std::mt19937_64 rng(5);
  for (Variant v : {Variant::v1, Variant::v2, Variant::v3}) {
    Model m = make_model(toy(v), 6);
    ModelInput in = random_input(m.config(), 2, 4, rng);
    ModelOutput out = m.forward(in, false, rng);
    for (std::size_t b = 0; b < 2; ++b) {
      auto ref = oracle_logits(m, in, b);
      ASSERT_EQ(ref.size(), out.logits.size());
      for (std::size_t k = 0; k < ref.size(); ++k)
        EXPECT_LE(max_abs_diff(out.logits[k].values().subspan(b * 4, 4), ref[k]), 1e-9)
            << to_string(v) << " head " << k;
    }
  }
}

TEST(Variants, V2CnnMatchesComposedOracle) {
  VariantConfig c = toy(Variant::v2, EncoderKind::cnn);
  c.joints = 2;
  c.coords = 1;
  c.san.layers = 1;
  Model m = make_model(c, 7, false);
  std::mt19937_64 rng(8);
  ModelInput in = random_input(c, 1, 4, rng);
  ModelOutput out = m.forward(in, false, rng);
  // encoders from their own oracle, SAN and head as above
  Vec best;
  for (std::size_t s = 0; s < 2; ++s) {
    CnnEncoderParams pp, mp;
    auto get = [&](const std::string& n) { return m.params().at(n); };
    for (auto [p, pre] : {std::pair<CnnEncoderParams*, std::string>{&pp, "enc_pos"}, {&mp, "enc_mot"}}) {
      p->w1 = get(pre + ".conv1.w"), p->b1 = get(pre + ".conv1.b");
      p->w2 = get(pre + ".conv2.w"), p->b2 = get(pre + ".conv2.b");
      p->w3 = get(pre + ".conv3.w"), p->b3 = get(pre + ".conv3.b");
      p->w4 = get(pre + ".conv4.w"), p->b4 = get(pre + ".conv4.b");
    }
    Vec ep = oracle::cnn_encode(person_frames(in.positions, 0, s), tt::to_oracle(pp), 4, 2, 1);
    Vec em = oracle::cnn_encode(person_frames(in.motion, 0, s), tt::to_oracle(mp), 4, 2, 1);
    Vec cat;
    for (std::size_t f = 0; f < 4; ++f) {
      cat.insert(cat.end(), ep.begin() + f * 512, ep.begin() + (f + 1) * 512);
      cat.insert(cat.end(), em.begin() + f * 512, em.begin() + (f + 1) * 512);
    }
    Vec o = oracle::san_block(cat, tt::to_oracle(m.san_blocks()[0]), 4, 1024, 2);
    if (best.empty()) best = o;
    for (std::size_t i = 0; i < o.size(); ++i) best[i] = std::max(best[i], o[i]);
  }
  EXPECT_LE(max_abs_diff(out.logits[0].values(), head_oracle(m, "head", best)), 1e-9);
}

TEST(Variants, PersonSwapIsBitwiseInvariant) {
  std::mt19937_64 rng(9);
  for (EncoderKind e : {EncoderKind::ff, EncoderKind::cnn})
    for (Variant v : {Variant::v2, Variant::v3}) {
      VariantConfig c = toy(v, e);
      c.san.layers = 1;
      Model m = make_model(c, 10, e == EncoderKind::ff);
      ModelInput in = random_input(c, 3, 6, rng);
      ModelOutput a = m.forward(in, false, rng);
      ModelOutput b = m.forward(swap_persons(in), false, rng);
      for (std::size_t k = 0; k < a.logits.size(); ++k)
        EXPECT_EQ(vec(a.logits[k]), vec(b.logits[k])) << to_string(v) << " " << to_string(e);
    }
}

TEST(Variants, V2CopiedPersonEqualsSinglePerson) {
  std::mt19937_64 rng(11);
  VariantConfig one = toy(Variant::v2, EncoderKind::ff, 1);
  VariantConfig two = toy(Variant::v2, EncoderKind::ff, 2);
  Model m1 = make_model(one, 12);
  Model m2 = make_model(two, 12);
  ModelInput in1 = random_input(one, 2, 5, rng);
  auto duplicate = [](const Tensor& x) {
    Shape s = x.shape();
    s[2] = 2;
    return reshape(concat({x, x}, 2), s);
  };
  ModelInput in2{duplicate(in1.positions), duplicate(in1.motion)};
  EXPECT_EQ(vec(m1.forward(in1, false, rng).logits[0]), vec(m2.forward(in2, false, rng).logits[0]));
}

TEST(Variants, SingleSanParameterSetRegardlessOfPersons) {
  std::size_t expected = 0;
  for (std::size_t s : {1u, 2u, 3u}) {
    Model m = make_model(toy(Variant::v2, EncoderKind::ff, s), 13, false);
    const std::size_t n = m.params().count_with_prefix("san.");
    if (!expected) expected = n;
    EXPECT_EQ(n, expected);
    EXPECT_EQ(m.san_blocks().size(), 1u);
  }
  EXPECT_EQ(expected, 1u + 2u * 13u + 2u);
}

TEST(Variants, V3LossOfUniformHeadsIsThreeLn4) {
  ModelOutput out;
  for (int i = 0; i < 3; ++i) out.logits.push_back(Tensor({2, 4}, 0.7));
  const std::vector<std::size_t> labels{1, 3};
  EXPECT_NEAR(variant_loss(out, labels).item(), 3.0 * std::log(4.0), 1e-12);
}

TEST(Variants, TrainingDropoutDivergesAndEvalIsDeterministic) {
  std::mt19937_64 rng(14);
  VariantConfig c = toy(Variant::v2, EncoderKind::cnn);
  c.san.layers = 1;
  Model m = make_model(c, 15, false);
  ModelInput in = random_input(c, 2, 4, rng);
  std::mt19937_64 a(1), b(2);
  Tensor e1 = m.forward(in, false, a).logits[0];
  Tensor e2 = m.forward(in, false, b).logits[0];
  EXPECT_EQ(vec(e1), vec(e2));
  Tensor t1 = m.forward(in, true, a).logits[0];
  EXPECT_GT(max_abs_diff(e1.values(), t1.values()), 1e-6);
}

TEST(Predict, HandCases) {
  EXPECT_EQ(predict(std::vector<double>{0, 0, 1}).label, 2u);
  EXPECT_EQ(predict(std::vector<double>{0.5, 0.5, 0.5, 0.5}).label, 0u);
  Prediction p = predict(std::vector<double>{3, -1, 2, 0.25});
  double s = 0.0;
  for (double v : p.probs) s += v;
  EXPECT_NEAR(s, 1.0, 1e-9);
}

TEST(Predict, ArgmaxInvariantUnderConstantShift) {
  std::mt19937_64 rng(16);
  std::uniform_real_distribution<double> d(-5, 5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> l(6);
    for (auto& v : l) v = d(rng);
    const double shift = d(rng) * 100;
    std::vector<double> s = l;
    for (auto& v : s) v += shift;
    EXPECT_EQ(predict(l).label, predict(s).label);
  }
}

TEST(Predict, V3InferenceModes) {
  ModelOutput out;
  out.logits.push_back(Tensor({1, 2}, std::vector<double>{4, 0}));
  out.logits.push_back(Tensor({1, 2}, std::vector<double>{4, 0}));
  out.logits.push_back(Tensor({1, 2}, std::vector<double>{0, 1}));
  EXPECT_EQ(argmax(prediction_probs(out, V3Inference::cat).values()), 1u);
  Tensor mean = prediction_probs(out, V3Inference::mean);
  EXPECT_EQ(argmax(mean.values()), 0u);
  EXPECT_NEAR(mean[0] + mean[1], 1.0, 1e-12);
}

TEST(Variants, V1GradientsMatchFiniteDifferences) {
  VariantConfig c = toy(Variant::v1);
  c.persons = 1;
  c.joints = 2;
  c.ff_hidden = 2;  // width 2*2*2 = 8
  Model m = make_model(c, 17);
  std::mt19937_64 rng(18);
  ModelInput in = random_input(c, 2, 4, rng);
  const std::vector<std::size_t> labels{1, 3};
  auto loss = [&] { return variant_loss(m.forward(in, false, rng), labels); };
  auto r = tt::check_gradients(loss, m.params().tensors(), 1e-6);
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Variants, InputShapeChecked) {
  Model m = make_model(toy(Variant::v2), 19, false);
  std::mt19937_64 rng(20);
  Shape bad{1, 4, 3, 3, 3};
  EXPECT_THROW(m.forward({Tensor(bad), Tensor(bad)}, false, rng), DimensionError);
}

TEST(Variants, MakeInputDerivesMotion) {
  std::vector<SkeletonClip> clips(2, SkeletonClip::zeros({3, 1, 1, 1}));
  clips[0].positions = {0, 1, 3};
  clips[1].positions = {5, 5, 4};
  ModelInput in = make_input(clips);
  EXPECT_EQ(in.positions.shape(), (Shape{2, 3, 1, 1, 1}));
  EXPECT_EQ(vec(in.motion), (std::vector<double>{1, 2, 0, 0, -1, 0}));
}
