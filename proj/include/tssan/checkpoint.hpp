#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tssan/config.hpp"
#include "tssan/error.hpp"
#include "tssan/training.hpp"

namespace tssan {

inline constexpr char kCheckpointMagic[8] = {'T', 'S', 'S', 'A', 'N', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Decoded checkpoint contents; nothing is applied until the whole file has
/// been read and checked.
struct CheckpointData {
  std::uint32_t version = kCheckpointVersion;
  std::string config;  // INI text of the run config
  std::uint64_t epoch = 0;
  std::uint64_t steps = 0;
  std::vector<std::pair<std::string, Tensor>> params;
  AdamState adam;
  PlateauScheduler scheduler;
  std::string rng_state;
};

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    bytes_.append(s);
  }
  void raw(const char* p, std::size_t n) { bytes_.append(p, n); }
  void f64s(std::span<const double> v) {
    for (double x : v) f64(x);
  }
  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string bytes) : bytes_(std::move(bytes)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(bytes_[pos_++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(bytes_[pos_++])) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint64_t n = u64();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void f64s(std::span<double> out) {
    need(8 * out.size());
    for (auto& x : out) x = f64();
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > bytes_.size() - pos_) throw CheckpointError("checkpoint: truncated file");
  }
  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const CheckpointData& d) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(d.version);
  w.str(d.config);
  w.u64(d.epoch);
  w.u64(d.steps);
  w.u64(d.params.size());
  for (const auto& [name, t] : d.params) {
    w.str(name);
    w.u64(t.rank());
    for (auto e : t.shape()) w.u64(e);
    w.f64s(t.values());
  }
  w.u64(d.adam.step);
  w.f64(d.adam.options.beta1);
  w.f64(d.adam.options.beta2);
  w.f64(d.adam.options.eps);
  w.u64(d.adam.first_moment.size());
  for (std::size_t i = 0; i < d.adam.first_moment.size(); ++i) {
    w.u64(d.adam.first_moment[i].size());
    w.f64s(d.adam.first_moment[i]);
    w.f64s(d.adam.second_moment[i]);
  }
  w.f64(d.scheduler.lr);
  w.f64(d.scheduler.factor);
  w.u64(d.scheduler.patience);
  w.f64(d.scheduler.best);
  w.u64(d.scheduler.stale_epochs);
  w.str(d.rng_state);
  return w.bytes();
}

inline CheckpointData decode_checkpoint(std::string bytes) {
  detail::ByteReader r(std::move(bytes));
  if (r.raw(sizeof kCheckpointMagic) != std::string(kCheckpointMagic, sizeof kCheckpointMagic)) {
    throw CheckpointError("checkpoint: not a checkpoint file");
  }
  CheckpointData d;
  d.version = r.u32();
  if (d.version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: version " + std::to_string(d.version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  d.config = r.str();
  d.epoch = r.u64();
  d.steps = r.u64();
  const std::uint64_t count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const std::uint64_t rank = r.u64();
    if (rank == 0 || rank > 8) throw CheckpointError("checkpoint: bad rank for '" + name + "'");
    Shape shape(rank);
    for (auto& e : shape) {
      e = r.u64();
      if (e == 0 || e > (1ull << 32)) throw CheckpointError("checkpoint: bad extent for '" + name + "'");
    }
    if (numel(shape) > (1ull << 32)) throw CheckpointError("checkpoint: tensor '" + name + "' too large");
    Tensor t(shape);
    r.f64s(t.values());
    d.params.emplace_back(std::move(name), std::move(t));
  }
  d.adam.step = r.u64();
  d.adam.options.beta1 = r.f64();
  d.adam.options.beta2 = r.f64();
  d.adam.options.eps = r.f64();
  const std::uint64_t moments = r.u64();
  if (moments != 0 && moments != count) throw CheckpointError("checkpoint: optimizer state does not match parameters");
  for (std::uint64_t i = 0; i < moments; ++i) {
    const std::uint64_t n = r.u64();
    if (n != d.params[i].second.numel()) throw CheckpointError("checkpoint: optimizer moment size mismatch");
    d.adam.first_moment.emplace_back(n);
    d.adam.second_moment.emplace_back(n);
    r.f64s(d.adam.first_moment.back());
    r.f64s(d.adam.second_moment.back());
  }
  d.scheduler.lr = r.f64();
  d.scheduler.factor = r.f64();
  d.scheduler.patience = r.u64();
  d.scheduler.best = r.f64();
  d.scheduler.stale_epochs = r.u64();
  d.rng_state = r.str();
  if (!r.done()) throw CheckpointError("checkpoint: trailing bytes after payload");
  return d;
}

inline CheckpointData snapshot(const Trainer& t, const RunConfig& cfg) {
  CheckpointData d;
  d.config = to_ini(cfg);
  d.epoch = t.epoch();
  d.steps = t.steps();
  for (const auto& [name, tensor] : t.model().params().entries()) d.params.emplace_back(name, tensor.clone());
  d.adam = t.adam();
  d.scheduler = t.scheduler();
  std::ostringstream rng;
  rng << t.rng();
  d.rng_state = rng.str();
  return d;
}

inline void save_checkpoint(const std::filesystem::path& path, const Trainer& t, const RunConfig& cfg) {
  const std::string bytes = encode_checkpoint(snapshot(t, cfg));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("checkpoint: cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open " + path.string());
  return decode_checkpoint(std::string(std::istreambuf_iterator<char>(in), {}));
}

/// Copies parameter values into `model` after checking every name and
/// shape; the model is untouched on mismatch.
inline void load_parameters(Model& model, const CheckpointData& d) {
  const auto& entries = model.params().entries();
  if (entries.size() != d.params.size()) {
    throw CheckpointError("checkpoint: has " + std::to_string(d.params.size()) + " parameters, model has " +
                          std::to_string(entries.size()));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].first != d.params[i].first || entries[i].second.shape() != d.params[i].second.shape()) {
      throw CheckpointError("checkpoint: parameter '" + d.params[i].first + "' " +
                            to_string(d.params[i].second.shape()) + " does not match model '" + entries[i].first +
                            "' " + to_string(entries[i].second.shape()));
    }
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor dst = entries[i].second;
    auto src = d.params[i].second.values();
    std::copy(src.begin(), src.end(), dst.values().begin());
  }
}

/// Restores parameters, optimizer, schedule, progress and generator.
inline void restore(Trainer& t, const CheckpointData& d) {
  std::mt19937_64 rng;
  std::istringstream in(d.rng_state);
  in >> rng;
  if (!in) throw CheckpointError("checkpoint: corrupt generator state");
  if (d.adam.first_moment.size() != d.params.size()) {
    throw CheckpointError("checkpoint: optimizer state does not match parameters");
  }
  load_parameters(t.model(), d);
  t.adam() = d.adam;
  t.scheduler() = d.scheduler;
  t.rng() = rng;
  t.set_progress(d.epoch, d.steps);
}

/// Rebuilds the model described by a checkpoint's config and loads it.
inline Model model_from_checkpoint(const CheckpointData& d, RunConfig* cfg_out = nullptr) {
  RunConfig cfg = parse_ini(d.config);
  cfg.validate();
  std::mt19937_64 rng(cfg.train.seed);
  Model m = Model::create(cfg.effective_model(), rng);
  load_parameters(m, d);
  if (cfg_out) *cfg_out = cfg;
  return m;
}

}  // namespace tssan
