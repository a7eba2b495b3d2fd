#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tssan/adam.hpp"
#include "tssan/consensus.hpp"
#include "tssan/dataset.hpp"
#include "tssan/error.hpp"
#include "tssan/variants.hpp"

namespace tssan {

struct TrainConfig {
  double lr = 1e-4;
  std::size_t patience = 5;
  double lr_factor = 0.5;
  double weight_decay = 5e-5;
  std::size_t batch_size = 64;
  std::size_t epochs = 200;
  std::uint64_t seed = 1;
  /// When false the metrics log records seconds=0 so logs can be compared
  /// byte for byte.
  bool log_wall_time = true;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("train: lr must be positive");
    if (patience == 0) throw ConfigError("train: patience must be positive");
    if (!(lr_factor > 0.0 && lr_factor < 1.0)) throw ConfigError("train: lr_factor must be in (0,1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be nonnegative");
    if (batch_size == 0 || epochs == 0) throw ConfigError("train: batch_size and epochs must be positive");
  }
};

struct MetricsRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double top1 = 0.0;
  double top5 = 0.0;
  double lr = 0.0;
  double seconds = 0.0;

  bool operator==(const MetricsRecord&) const = default;
};

/// One line: `epoch=3 loss=0.71 top1=0.5 top5=1 lr=0.0001 seconds=2.5`.
inline std::string format_metrics(const MetricsRecord& r) {
  using io::format_real;
  return "epoch=" + std::to_string(r.epoch) + " loss=" + format_real(r.loss) +
         " top1=" + format_real(r.top1) + " top5=" + format_real(r.top5) +
         " lr=" + format_real(r.lr) + " seconds=" + format_real(r.seconds);
}

inline MetricsRecord parse_metrics(const std::string& line) {
  std::map<std::string, std::string_view> kv;
  for (auto tok : io::split_ws(line)) {
    auto eq = tok.find('=');
    if (eq == std::string_view::npos) throw ParseError("metrics: malformed field '" + std::string(tok) + "'");
    kv[std::string(tok.substr(0, eq))] = tok.substr(eq + 1);
  }
  auto get = [&](const char* key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw ParseError(std::string("metrics: missing field ") + key);
    return it->second;
  };
  MetricsRecord r;
  r.epoch = io::parse_number<std::size_t>(get("epoch"), "metrics");
  r.loss = io::parse_number<double>(get("loss"), "metrics");
  r.top1 = io::parse_number<double>(get("top1"), "metrics");
  r.top5 = io::parse_number<double>(get("top5"), "metrics");
  r.lr = io::parse_number<double>(get("lr"), "metrics");
  r.seconds = io::parse_number<double>(get("seconds"), "metrics");
  return r;
}

/// Halves (by `factor`) the rate once the best validation top-1 has not
/// strictly improved for `patience` consecutive epochs; the count then
/// restarts.
struct PlateauScheduler {
  double lr = 1e-4;
  double factor = 0.5;
  std::size_t patience = 5;
  double best = -std::numeric_limits<double>::infinity();
  std::size_t stale_epochs = 0;

  double step(double top1) {
    if (top1 > best) {
      best = top1;
      stale_epochs = 0;
    } else if (++stale_epochs >= patience) {
      lr *= factor;
      stale_epochs = 0;
    }
    return lr;
  }
};

struct TopK {
  double top1 = 0.0;
  double top5 = 0.0;
};

/// Rank of the true label counts every label with a larger probability,
/// and equal probabilities at lower indices.
inline std::size_t label_rank(std::span<const double> probs, std::size_t label) {
  std::size_t rank = 0;
  for (std::size_t j = 0; j < probs.size(); ++j) {
    if (probs[j] > probs[label] || (probs[j] == probs[label] && j < label)) ++rank;
  }
  return rank;
}

/// Hit counts of top-1 and top-5 for probabilities [B, L].
inline std::pair<std::size_t, std::size_t> topk_hits(const Tensor& probs,
                                                     std::span<const std::size_t> labels) {
  const std::size_t L = probs.dim(1);
  std::size_t h1 = 0, h5 = 0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    const std::size_t r = label_rank(probs.values().subspan(b * L, L), labels[b]);
    h1 += r < 1;
    h5 += r < 5;
  }
  return {h1, h5};
}

inline TopK topk_accuracy(const Tensor& probs, std::span<const std::size_t> labels) {
  if (probs.rank() != 2 || probs.dim(0) != labels.size()) {
    throw DimensionError("topk_accuracy: probabilities do not match label count");
  }
  auto [h1, h5] = topk_hits(probs, labels);
  const double n = static_cast<double>(labels.size());
  return {static_cast<double>(h1) / n, static_cast<double>(h5) / n};
}

/// Fused probabilities [N, L] for a dataset in eval mode.
inline Tensor predict_dataset(const Model& model, const TsnConfig& tsn,
                              std::span<const LabeledSample> data, std::size_t batch_size = 64) {
  if (data.empty()) throw InputError("predict_dataset: empty dataset");
  std::mt19937_64 unused(0);  // eval sampling draws no random numbers
  std::vector<Tensor> parts;
  for (std::size_t begin = 0; begin < data.size(); begin += batch_size) {
    const std::size_t end = std::min(data.size(), begin + batch_size);
    std::vector<SkeletonClip> clips;
    for (std::size_t i = begin; i < end; ++i) clips.push_back(data[i].clip);
    ModelInput in = prepare_segments(clips, tsn, false, unused);
    parts.push_back(ts_forward(model, in, tsn, false, unused).fused);
  }
  return parts.size() == 1 ? parts[0] : concat(parts, 0);
}

inline TopK evaluate(const Model& model, const TsnConfig& tsn, std::span<const LabeledSample> data,
                     std::size_t batch_size = 64) {
  Tensor probs = predict_dataset(model, tsn, data, batch_size);
  std::vector<std::size_t> labels;
  for (const auto& s : data) labels.push_back(s.label);
  return topk_accuracy(probs, labels);
}

/// Shuffled index batches; a trailing batch of exactly one sample is
/// dropped unless it is the only batch.
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size,
                                                          std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t begin = 0; begin < n; begin += batch_size) {
    const std::size_t end = std::min(n, begin + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(begin),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  if (batches.size() > 1 && batches.back().size() == 1) batches.pop_back();
  return batches;
}

struct EpochReport {
  MetricsRecord metrics;
  std::vector<double> step_losses;
};

/// Model, optimizer, schedule and generator state of one training run.
class Trainer {
 public:
  Trainer(Model model, TsnConfig tsn, TrainConfig cfg)
      : model_(std::move(model)), tsn_(tsn), cfg_(cfg), rng_(cfg.seed ^ 0x7473'7361'6eULL) {
    tsn_.validate();
    cfg_.validate();
    params_ = model_.params().tensors();
    adam_ = AdamState(params_);
    sched_.lr = cfg_.lr;
    sched_.factor = cfg_.lr_factor;
    sched_.patience = cfg_.patience;
  }

  /// One pass over `train` in shuffled mini-batches, then validation and a
  /// schedule step. Throws NumericError on a non-finite loss.
  EpochReport train_epoch(std::span<const LabeledSample> train,
                          std::span<const LabeledSample> val) {
    if (train.empty()) throw InputError("train_epoch: empty training set");
    const auto started = std::chrono::steady_clock::now();
    ++epoch_;
    EpochReport report;
    report.metrics.epoch = epoch_;
    report.metrics.lr = sched_.lr;
    double weighted = 0.0;
    std::size_t seen = 0;
    for (const auto& batch : make_batches(train.size(), cfg_.batch_size, rng_)) {
      std::vector<SkeletonClip> clips;
      std::vector<std::size_t> labels;
      for (std::size_t i : batch) {
        clips.push_back(train[i].clip);
        labels.push_back(train[i].label);
      }
      const double loss = step(clips, labels);
      report.step_losses.push_back(loss);
      weighted += loss * static_cast<double>(batch.size());
      seen += batch.size();
    }
    report.metrics.loss = weighted / static_cast<double>(seen);
    const TopK acc = evaluate(model_, tsn_, val.empty() ? train : val, cfg_.batch_size);
    report.metrics.top1 = acc.top1;
    report.metrics.top5 = acc.top5;
    sched_.step(acc.top1);
    if (cfg_.log_wall_time) {
      report.metrics.seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    }
    return report;
  }

  /// Forward, loss, backward and one Adam update on a batch of clips.
  double step(std::span<const SkeletonClip> clips, std::span<const std::size_t> labels) {
    model_.params().zero_grad();
    ModelInput in = prepare_segments(clips, tsn_, true, rng_);
    Tape tape;
    Tensor loss;
    {
      Tape::Scope scope(tape);
      loss = ts_loss(ts_forward(model_, in, tsn_, true, rng_), labels, tsn_);
    }
    ++steps_;
    if (!std::isfinite(loss.item())) {
      throw NumericError("non-finite loss at epoch " + std::to_string(epoch_) + " step " +
                         std::to_string(steps_));
    }
    backward(loss, tape);
    adam_step(params_, adam_, sched_.lr, cfg_.weight_decay);
    return loss.item();
  }

  const Model& model() const { return model_; }
  Model& model() { return model_; }
  const TsnConfig& tsn() const { return tsn_; }
  const TrainConfig& config() const { return cfg_; }
  std::size_t epoch() const { return epoch_; }
  std::uint64_t steps() const { return steps_; }
  double lr() const { return sched_.lr; }

  // Resumable state, exposed for checkpointing.
  AdamState& adam() { return adam_; }
  const AdamState& adam() const { return adam_; }
  PlateauScheduler& scheduler() { return sched_; }
  const PlateauScheduler& scheduler() const { return sched_; }
  std::mt19937_64& rng() { return rng_; }
  const std::mt19937_64& rng() const { return rng_; }
  void set_progress(std::size_t epoch, std::uint64_t steps) {
    epoch_ = epoch;
    steps_ = steps;
  }

 private:
  Model model_;
  TsnConfig tsn_;
  TrainConfig cfg_;
  std::vector<Tensor> params_;
  AdamState adam_;
  PlateauScheduler sched_;
  std::mt19937_64 rng_;
  std::size_t epoch_ = 0;
  std::uint64_t steps_ = 0;
};

}  // namespace tssan
