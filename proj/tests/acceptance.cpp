// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "tssan/cli.hpp"
#include "weights.hpp"

using namespace tssan;
namespace tt = tssan::testing;
namespace fs = std::filesystem;
using tt::random_tensor;
using tt::vec;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    if (!detail.empty()) detail += "; ";
    detail += (ok ? "" : "FAILED ") + what;
  }
};

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

SkeletonClip random_clip(ClipShape sh, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  SkeletonClip c = SkeletonClip::zeros(sh);
  for (auto& v : c.positions) v = d(rng);
  c.refresh_mask();
  return c;
}

Model random_model(const VariantConfig& cfg, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  Model m = Model::create(cfg, rng);
  tt::randomize_all(m.params(), rng, scale);
  return m;
}

SanParams random_block(ParamStore& store, SanConfig cfg, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  SanParams p = SanParams::create(store, "san", cfg, rng);
  tt::randomize_all(store, rng, scale);
  return p;
}

// ---------------------------------------------------------------------------

Outcome gradient_soundness() {
  const auto t0 = std::chrono::steady_clock::now();
  VariantConfig c;
  c.variant = Variant::v2;
  c.encoder = EncoderKind::ff;
  c.persons = 2;
  c.joints = 4;
  c.coords = 3;
  c.num_labels = 4;
  c.ff_hidden = 2;  // H = 2 (pos|mot) * J * C' = 16
  c.san.layers = 2;
  c.san.heads = 2;
  c.san.max_frames = 8;
  TsnConfig tsn;
  tsn.segments = 2;
  tsn.frames_per_segment = 8;
  Outcome r;
  r.require(c.effective_san().width == 16, "H=" + std::to_string(c.effective_san().width));

  Model m = random_model(c, 1, 0.5);
  std::mt19937_64 rng(2);
  const std::vector<SkeletonClip> clips{random_clip({16, 2, 4, 3}, rng), random_clip({19, 2, 4, 3}, rng)};
  const ModelInput in = prepare_segments(clips, tsn, false, rng);
  const std::vector<std::size_t> labels{1, 3};
  for (bool training : {false, true}) {
    auto loss = [&] {
      std::mt19937_64 masks(3);  // same dropout masks on every evaluation
      return ts_loss(ts_forward(m, in, tsn, training, masks), labels, tsn);
    };
    // step 1e-6 keeps central differences off relu and max kinks
    const auto rep = tt::check_gradients(loss, m.params().tensors(), 1e-6);
    r.require(rep.max_rel_error <= 1e-4, std::string(training ? "train" : "eval") + " mode " +
                                             std::to_string(rep.checked) + " entries max rel err " +
                                             fmt("%.2e", rep.max_rel_error));
  }
  const double secs = seconds_since(t0);
  r.require(secs <= 120.0, fmt("%.1f s", secs) + " <= 120 s");
  return r;
}

Outcome cnn_shape_oracle() {
  Outcome r;
  ParamStore store;
  std::mt19937_64 rng(4);
  auto p = CnnEncoderParams::create(store, "cnn", 50, 3, rng);
  Tensor x = random_tensor({32, 50, 3}, rng, -1, 1, false);
  const Tensor y = cnn_encode(x, p, false, rng);
  r.require(y.shape() == Shape{32, 512}, "F x J' x C = 32x50x3 -> " + to_string(y.shape()));
  r.require(kCnnFeatureWidth == 8 * 64, "512 = 8 x 64");
  const Tensor batched = cnn_encode(reshape(x, {1, 32, 50, 3}), p, false, rng);
  r.require(batched.shape() == Shape{1, 32, 512}, "batched -> " + to_string(batched.shape()));
  return r;
}

Outcome attention_invariants() {
  Outcome r;
  ParamStore store;
  SanParams p = random_block(store, {3, 4, 8, 0, 7, 0.2}, 5, 1.5);
  std::mt19937_64 rng(6);
  SanOutput out = san_block(random_tensor({2, 7, 8}, rng, -3, 3, false), p, false, rng);
  double worst = 0.0;
  for (const auto& layer : out.trace.layers)
    for (std::size_t row = 0; row < layer.numel() / 7; ++row) {
      double s = 0.0;
      for (std::size_t col = 0; col < 7; ++col) s += layer[row * 7 + col];
      worst = std::max(worst, std::abs(s - 1.0));
    }
  r.require(worst <= 1e-9, "N=3 h=4 row sums within " + fmt("%.1e", worst));

  for (auto& v : p.position.values()) v = 0.0;
  Tensor frame = random_tensor({1, 8}, rng, -2, 2, false);
  Tensor same = concat(std::vector<Tensor>(7, frame), 0);
  SanOutput u = san_block(same, p, false, rng);
  double dev = 0.0;
  for (const auto& layer : u.trace.layers)
    for (double v : layer.values()) dev = std::max(dev, std::abs(v - 1.0 / 7.0));
  r.require(dev <= 1e-9, "identical frames, zero table: uniform within " + fmt("%.1e", dev));

  ParamStore s1;
  SanParams p1 = random_block(s1, {2, 4, 8, 0, 4, 0.2}, 7, 1.0);
  SanOutput one = san_block(random_tensor({1, 8}, rng, -1, 1, false), p1, false, rng);
  bool unit = true;
  for (const auto& layer : one.trace.layers)
    for (double v : layer.values()) unit = unit && v == 1.0;
  r.require(unit, "F=1 gives [[1.0]] in every layer and head");
  return r;
}

Outcome brute_force_equivalence() {
  Outcome r;
  std::mt19937_64 rng(8);
  {
    ParamStore store;
    SanParams p = random_block(store, {1, 2, 6, 0, 5, 0.2}, 9, 1.0);
    Tensor y = random_tensor({5, 6}, rng, -1, 1, false);
    Tensor probs;
    Tensor z = multi_head_attention(y, p.layers[0], 2, &probs);
    std::vector<oracle::Vec> ref_probs;
    auto ref = oracle::attention(vec(y), tt::to_oracle(p.layers[0]).attn, 5, 6, 2, &ref_probs);
    double d = max_abs_diff(z.values(), ref);
    for (std::size_t h = 0; h < 2; ++h) d = std::max(d, max_abs_diff(probs.values().subspan(h * 25, 25), ref_probs[h]));
    r.require(d <= 1e-9, "attention " + fmt("%.1e", d));
  }
  {
    double d = 0.0;
    for (auto [kh, kw] : {std::pair{3, 3}, {1, 1}, {3, 1}, {1, 5}}) {
      const std::size_t cin = 3, cout = 4, H = 6, W = 7;
      Tensor x = random_tensor({cin, H, W}, rng, -1, 1, false);
      Tensor w = random_tensor({cout, cin, std::size_t(kh), std::size_t(kw)}, rng, -1, 1, false);
      Tensor b = random_tensor({cout}, rng, -1, 1, false);
      auto ref = oracle::conv2d(vec(x), vec(w), vec(b), cin, H, W, cout, kh, kw);
      d = std::max(d, max_abs_diff(conv2d(x, w, b).values(), ref));
    }
    r.require(d <= 1e-9, "conv2d " + fmt("%.1e", d));
  }
  {
    Tensor x = random_tensor({3, 5, 8}, rng, -1, 1, false);
    const double d = max_abs_diff(maxpool2d(x).values(), oracle::maxpool_1x2(vec(x), 3, 5, 8));
    r.require(d <= 1e-9, "maxpool " + fmt("%.1e", d));
  }
  {
    ParamStore store;
    SanParams p = random_block(store, {2, 2, 8, 0, 6, 0.2}, 10, 0.5);
    Tensor x = random_tensor({6, 8}, rng, -1, 1, false);
    SanOutput out = san_block(x, p, false, rng);
    std::vector<std::vector<oracle::Vec>> probs;
    auto ref = oracle::san_block(vec(x), tt::to_oracle(p), 6, 8, 2, &probs);
    double d = max_abs_diff(out.o.values(), ref);
    for (std::size_t l = 0; l < 2; ++l)
      for (std::size_t h = 0; h < 2; ++h) d = std::max(d, max_abs_diff(out.trace.matrix(l, 0, h), probs[l][h]));
    r.require(d <= 1e-9, "san_block " + fmt("%.1e", d));
  }
  {
    ParamStore store;
    auto p = CnnEncoderParams::create(store, "cnn", 4, 3, rng);
    for (auto* b : {&p.b1, &p.b2, &p.b3, &p.b4}) tt::randomize(*b, rng, 0.1);
    Tensor x = random_tensor({5, 4, 3}, rng, -1, 1, false);
    const double d = max_abs_diff(cnn_encode(x, p, false, rng).values(),
                                  oracle::cnn_encode(vec(x), tt::to_oracle(p), 5, 4, 3));
    r.require(d <= 1e-9, "cnn encoder " + fmt("%.1e", d));
  }
  return r;
}

Outcome symmetry_suite() {
  Outcome r;
  std::mt19937_64 rng(11);
  for (EncoderKind e : {EncoderKind::ff, EncoderKind::cnn})
    for (Variant v : {Variant::v2, Variant::v3}) {
      VariantConfig c;
      c.variant = v;
      c.encoder = e;
      c.persons = 2;
      c.joints = 3;
      c.coords = 3;
      c.num_labels = 5;
      c.ff_hidden = 4;
      c.san.layers = 2;
      c.san.heads = 2;
      c.san.max_frames = 6;
      Model m = random_model(c, 12, e == EncoderKind::ff ? 0.5 : 0.1);
      std::vector<SkeletonClip> clips, swapped;
      for (int i = 0; i < 3; ++i) {
        clips.push_back(random_clip({6, 2, 3, 3}, rng));
        swapped.push_back(permute_persons(clips.back(), {1, 0}));
      }
      const ModelOutput a = m.forward(make_input(clips), false, rng);
      const ModelOutput b = m.forward(make_input(swapped), false, rng);
      bool same = true;
      for (std::size_t k = 0; k < a.logits.size(); ++k) same = same && vec(a.logits[k]) == vec(b.logits[k]);
      r.require(same, to_string(v) + "/" + to_string(e) + " person swap bit-exact");
    }

  VariantConfig c;
  c.variant = Variant::v2;
  c.encoder = EncoderKind::ff;
  c.persons = 2;
  c.joints = 3;
  c.coords = 3;
  c.num_labels = 5;
  c.ff_hidden = 4;
  c.san.layers = 1;
  c.san.heads = 2;
  c.san.max_frames = 6;
  Model m = random_model(c, 13, 0.5);
  TsnConfig tsn;
  tsn.segments = 3;
  tsn.frames_per_segment = 6;
  const std::vector<SkeletonClip> clips{random_clip({24, 2, 3, 3}, rng), random_clip({20, 2, 3, 3}, rng)};
  const ModelInput in = prepare_segments(clips, tsn, false, rng);
  auto reorder = [](const Tensor& x) {  // segment order 2,0,1 within each item
    const std::size_t per = x.numel() / 6;
    Tensor out(x.shape());
    const std::size_t order[3] = {2, 0, 1};
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t i = 0; i < per; ++i) out[(b * 3 + k) * per + i] = x[(b * 3 + order[k]) * per + i];
    return out;
  };
  for (Consensus cons : {Consensus::average, Consensus::max}) {
    tsn.consensus = cons;
    const Tensor f1 = ts_forward(m, in, tsn, false, rng).fused;
    const Tensor f2 = ts_forward(m, {reorder(in.positions), reorder(in.motion)}, tsn, false, rng).fused;
    const double d = max_abs_diff(f1.values(), f2.values());
    r.require(d <= 1e-12, to_string(cons) + " segment permutation " + fmt("%.1e", d));
  }

  std::uniform_real_distribution<double> u(-5, 5);
  std::size_t agree = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> l(8), s(8);
    const double shift = 100.0 * u(rng);
    for (std::size_t i = 0; i < 8; ++i) {
      l[i] = u(rng);
      s[i] = l[i] + shift;
    }
    agree += predict(l).label == predict(s).label;
  }
  r.require(agree == 1000, "argmax under constant shift " + std::to_string(agree) + "/1000");
  return r;
}

// ---------------------------------------------------------------------------
// desk-scale training on the synthetic benchmark

struct DeskSplit {
  std::vector<LabeledSample> train, val;
};

/// 4 labels x 50 samples; every fifth sample is held out (10 per label).
DeskSplit desk_split() {
  DeskSplit s;
  const auto all = synthesize_samples(SyntheticSpec{}, 7);
  for (std::size_t i = 0; i < all.size(); ++i) (i % 5 == 4 ? s.val : s.train).push_back(all[i]);
  return s;
}

RunConfig desk_config(EncoderKind enc, Consensus cons) {
  RunConfig cfg;
  cfg.model.variant = Variant::v2;
  cfg.model.encoder = enc;
  cfg.model.persons = 2;
  cfg.model.joints = SyntheticSpec{}.joints;
  cfg.model.coords = 3;
  cfg.model.num_labels = 4;
  cfg.model.san.layers = 1;
  cfg.model.san.heads = 8;
  cfg.tsn.segments = 3;
  cfg.tsn.frames_per_segment = 4;
  cfg.tsn.consensus = cons;
  cfg.train.lr = 1e-4;
  cfg.train.batch_size = 16;
  cfg.train.seed = 1;
  cfg.validate();
  return cfg;
}

Trainer make_trainer(const RunConfig& cfg) {
  std::mt19937_64 init(cfg.train.seed);
  return Trainer(Model::create(cfg.effective_model(), init), cfg.tsn, cfg.train);
}

Outcome overfit() {
  const auto t0 = std::chrono::steady_clock::now();
  const DeskSplit d = desk_split();
  const RunConfig cfg = desk_config(EncoderKind::cnn, Consensus::average);
  Trainer t = make_trainer(cfg);
  TopK train_acc, val_acc;
  std::size_t epoch = 0;
  while (epoch < 300 && seconds_since(t0) < 900.0) {
    const EpochReport rep = t.train_epoch(d.train, d.val);
    epoch = rep.metrics.epoch;
    val_acc = {rep.metrics.top1, rep.metrics.top5};
    std::cout << "  [6] " << format_metrics(rep.metrics) << '\n' << std::flush;
    if (val_acc.top1 >= 0.95) {
      train_acc = evaluate(t.model(), cfg.tsn, d.train);
      if (train_acc.top1 >= 0.99) break;
    }
  }
  Outcome r;
  const double secs = seconds_since(t0);
  r.require(train_acc.top1 >= 0.99, "train top1 " + fmt("%.4f", train_acc.top1) + " >= 0.99");
  r.require(val_acc.top1 >= 0.95, "held-out top1 " + fmt("%.4f", val_acc.top1) + " >= 0.95");
  r.require(epoch <= 300, "epoch " + std::to_string(epoch) + " <= 300");
  r.require(secs <= 900.0, fmt("%.0f s", secs) + " <= 900 s");
  return r;
}

Outcome ablation_direction() {
  constexpr std::size_t kBudget = 15;
  const DeskSplit d = desk_split();
  SyntheticSpec spec;
  const auto test = synthesize_samples(spec, 11);  // 200 unseen samples
  auto arm = [&](EncoderKind e, Consensus c) {
    RunConfig cfg = desk_config(e, c);
    Trainer t = make_trainer(cfg);
    for (std::size_t i = 0; i < kBudget; ++i) t.train_epoch(d.train, d.val);
    const double acc = evaluate(t.model(), cfg.tsn, test).top1;
    std::cout << "  [7] " << to_string(e) << "/" << to_string(c) << " test top1=" << acc << '\n' << std::flush;
    return acc;
  };
  const double cnn_avg = arm(EncoderKind::cnn, Consensus::average);
  const double ff_avg = arm(EncoderKind::ff, Consensus::average);
  const double cnn_max = arm(EncoderKind::cnn, Consensus::max);
  Outcome r;
  r.require(cnn_avg >= ff_avg - 0.02, "cnn " + fmt("%.3f", cnn_avg) + " vs ff " + fmt("%.3f", ff_avg));
  r.require(cnn_avg >= cnn_max - 0.02, "avg " + fmt("%.3f", cnn_avg) + " vs max " + fmt("%.3f", cnn_max));
  r.detail += "; " + std::to_string(kBudget) + " epochs per arm";
  return r;
}

Outcome recipe_fidelity() {
  Outcome r;
  const TrainConfig defaults;
  PlateauScheduler s{defaults.lr, defaults.lr_factor, defaults.patience};
  std::vector<std::size_t> halvings;
  double prev = s.lr;
  for (std::size_t e = 1; e <= 20; ++e) {
    const double lr = s.step(0.5);
    if (lr == prev / 2) halvings.push_back(e);
    else if (lr != prev) r.require(false, "epoch " + std::to_string(e) + " rate changed by other than half");
    prev = lr;
  }
  r.require(halvings == std::vector<std::size_t>{6, 11, 16} && prev == 1e-4 / 8,
            "flat history halves 1e-4 at epochs 6, 11, 16");

  const VariantConfig vc;
  r.require(vc.classifier_dropout == 0.5 && vc.encoder_dropout == 0.5 && vc.san.dropout == 0.2,
            "configured rates 0.5 / 0.5 / 0.2");
  std::mt19937_64 rng(14);
  for (double rate : {0.5, 0.2}) {
    Tensor ones({200000}, 1.0);
    const Tensor y = dropout(ones, rate, true, rng);
    std::size_t dropped = 0;
    bool scaled = true;
    for (double v : y.values()) {
      dropped += v == 0.0;
      scaled = scaled && (v == 0.0 || std::abs(v - 1.0 / (1.0 - rate)) < 1e-15);
    }
    const double frac = static_cast<double>(dropped) / 200000.0;
    r.require(std::abs(frac - rate) < 0.005 && scaled, "rate " + fmt("%.1f", rate) + " drops " + fmt("%.4f", frac));
  }

  VariantConfig c;
  c.variant = Variant::v2;
  c.encoder = EncoderKind::cnn;
  c.persons = 2;
  c.joints = 4;
  c.coords = 3;
  c.num_labels = 4;
  c.san.layers = 1;
  c.san.heads = 4;
  c.san.max_frames = 6;
  std::mt19937_64 init(15);
  Model m = Model::create(c, init);
  std::vector<SkeletonClip> clips{random_clip({6, 2, 4, 3}, rng), random_clip({6, 2, 4, 3}, rng)};
  const ModelInput in = make_input(clips);
  std::mt19937_64 a(1), b(2);
  const Tensor e1 = m.forward(in, false, a).logits[0];
  const Tensor e2 = m.forward(in, false, b).logits[0];
  const Tensor t1 = m.forward(in, true, a).logits[0];
  r.require(vec(e1) == vec(e2), "eval deterministic");
  r.require(max_abs_diff(e1.values(), t1.values()) > 1e-6,
            "train differs from eval by " + fmt("%.2e", max_abs_diff(e1.values(), t1.values())));
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "tssan");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  if (code != 0) std::cout << "  [9] tssan exited " << code << ": " << err.str();
  return code;
}

Outcome reproducibility() {
  Outcome r;
  const fs::path root = fs::temp_directory_path() / "tssan_acceptance_repro";
  fs::remove_all(root);
  r.require(run_cli({"prepare", "--synthetic", "--labels", "4", "--per-label", "4", "--seed", "3", "--out",
                     (root / "data").string()}) == 0,
            "prepare");
  auto train = [&](const std::string& out, const std::string& epochs, bool resume) {
    std::vector<std::string> a{"train", "--train", (root / "data" / "manifest.tsv").string(), "--out",
                               (root / out).string(), "--variant", "v2", "--encoder", "cnn", "--layers", "1",
                               "--heads", "8", "--segments", "3", "--frames", "4", "--batch-size", "4",
                               "--epochs", epochs, "--seed", "9", "--no-wall-time"};
    if (resume) a.push_back("--resume");
    return run_cli(a);
  };
  r.require(train("a", "4", false) == 0 && train("b", "4", false) == 0, "two runs");
  r.require(train("c", "2", false) == 0 && train("c", "4", true) == 0, "split run with resume");
  for (const char* f : {"metrics.log", "best.ckpt", "last.ckpt"}) {
    const std::string a = slurp(root / "a" / f);
    r.require(!a.empty() && a == slurp(root / "b" / f), std::string(f) + " identical across runs");
    r.require(a == slurp(root / "c" / f), std::string(f) + " identical after resume");
  }
  fs::remove_all(root);
  return r;
}

Outcome motion_consistency() {
  Outcome r;
  std::mt19937_64 rng(16);
  std::uniform_int_distribution<int> grid(-512, 512);
  bool exact = true;
  for (int trial = 0; trial < 20; ++trial) {
    SkeletonClip c = SkeletonClip::zeros({30, 2, 25, 3});
    for (auto& v : c.positions) v = grid(rng) / 256.0;  // dyadic grid: differences are exact
    c.refresh_mask();
    const MotionClip m = compute_motion(c);
    const std::size_t fs = c.shape.frame_size();
    std::vector<double> acc(c.positions.begin(), c.positions.begin() + static_cast<std::ptrdiff_t>(fs));
    for (std::size_t t = 0; t < c.shape.frames; ++t) {
      for (std::size_t k = 0; k < fs; ++k) exact = exact && acc[k] == c.positions[t * fs + k];
      for (std::size_t k = 0; k < fs; ++k) acc[k] += m.motion[t * fs + k];
    }
  }
  r.require(exact, "prefix sum of motion reconstructs positions bit-exactly");
  bool identity = true;
  for (std::size_t F : {2u, 7u, 32u, 300u}) {
    const SkeletonClip c = random_clip({F, 2, 5, 3}, rng);
    identity = identity && resample_sequence(c, F) == c;
  }
  r.require(identity, "resample to the same length is the identity");
  return r;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient soundness", gradient_soundness},
      {"cnn shape oracle", cnn_shape_oracle},
      {"attention invariants", attention_invariants},
      {"brute-force equivalence", brute_force_equivalence},
      {"symmetry suite", symmetry_suite},
      {"overfit", overfit},
      {"ablation direction", ablation_direction},
      {"recipe fidelity", recipe_fidelity},
      {"reproducibility", reproducibility},
      {"motion consistency", motion_consistency},
  };
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(std::stoul(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << i + 1 << " " << criteria[i].first << ": " << o.detail
              << " (" << fmt("%.1f", seconds_since(t0)) << " s)\n"
              << std::flush;
  }
  return failed == 0 ? 0 : 1;
}
