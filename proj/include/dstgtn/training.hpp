#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dstgtn/dataset.hpp"
#include "dstgtn/errors.hpp"
#include "dstgtn/model.hpp"
#include "dstgtn/ops.hpp"
#include "dstgtn/random.hpp"

namespace dstgtn {

/// Mean / population std over the observed values of a time range.
struct ZScoreStats {
  double mean = 0.0;
  double std = 1.0;

  double apply(double x) const { return (x - mean) / std; }
  double invert(double z) const { return z * std + mean; }
};

inline ZScoreStats compute_zscore(const Dataset& ds, IndexRange range) {
  double sum = 0, sum_sq = 0;
  std::size_t count = 0;
  for (std::size_t i = ds.index(range.begin, 0); i < ds.index(range.end, 0); ++i) {
    if (!ds.mask[i]) continue;
    sum += ds.values[i];
    ++count;
  }
  if (count == 0) throw DataError("no observed values in the training split");
  const double mean = sum / static_cast<double>(count);
  for (std::size_t i = ds.index(range.begin, 0); i < ds.index(range.end, 0); ++i) {
    if (!ds.mask[i]) continue;
    const double d = ds.values[i] - mean;
    sum_sq += d * d;
  }
  const double sd = std::sqrt(sum_sq / static_cast<double>(count));
  if (!(sd > 0)) throw DataError("training split is constant; Z-score std is zero");
  return {mean, sd};
}

struct MetricReport {
  double mae = 0, rmse = 0, mape_percent = 0;
  std::size_t count = 0;       // observed points evaluated
  std::size_t mape_count = 0;  // observed points with non-zero target
};

inline void to_json(nlohmann::json& j, const MetricReport& m) {
  j = nlohmann::json{{"mae", m.mae}, {"rmse", m.rmse}, {"mape", m.mape_percent}, {"count", m.count}};
}

/// Streaming accumulator so metrics do not depend on how points are batched.
class MetricAccumulator {
 public:
  void add(double pred, double target, bool observed) {
    if (!observed) return;
    const double e = pred - target;
    abs_ += std::abs(e);
    sq_ += e * e;
    ++count_;
    if (target != 0.0) {
      ape_ += std::abs(e / target);
      ++mape_count_;
    }
  }

  MetricReport report() const {
    if (count_ == 0) throw ContractError("metrics: no observed points to evaluate");
    if (mape_count_ == 0) throw ContractError("metrics: every observed target is zero, MAPE undefined");
    MetricReport r;
    r.count = count_;
    r.mape_count = mape_count_;
    r.mae = abs_ / static_cast<double>(count_);
    r.rmse = std::sqrt(sq_ / static_cast<double>(count_));
    r.mape_percent = 100.0 * ape_ / static_cast<double>(mape_count_);
    return r;
  }

 private:
  double abs_ = 0, sq_ = 0, ape_ = 0;
  std::size_t count_ = 0, mape_count_ = 0;
};

/// MAE / RMSE / MAPE over observed points; MAPE also skips zero targets.
template <class P, class Y, class M>
MetricReport metrics(std::span<const P> pred, std::span<const Y> target, std::span<const M> mask) {
  if (pred.size() != target.size() || pred.size() != mask.size()) throw DimensionError("metrics: size mismatch");
  MetricAccumulator acc;
  for (std::size_t i = 0; i < pred.size(); ++i)
    acc.add(static_cast<double>(pred[i]), static_cast<double>(target[i]), mask[i] != M(0));
  return acc.report();
}

/// sum(mask * |pred - target|) / sum(mask), on whatever units the inputs carry.
template <class T>
Tensor<T> mae_loss(const Tensor<T>& pred, const Tensor<T>& target, const Tensor<T>& mask) {
  return masked_mae(pred, target, mask);
}

// ---------------------------------------------------------------------------
// Optimiser

struct TrainConfig {
  double lr = 0.001;
  std::size_t batch_size = 16;
  std::size_t max_epochs = 200;
  std::size_t patience = 20;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  bool record_timing = false;  // wall-clock seconds in the log make it non-reproducible

  void validate() const {
    if (!(lr > 0) || batch_size == 0 || max_epochs == 0 || patience == 0 || !(beta1 > 0 && beta1 < 1) ||
        !(beta2 > 0 && beta2 < 1) || !(eps > 0)) {
      throw ConfigError("train config values must be positive (and betas in (0,1))");
    }
    if (patience > max_epochs) throw ConfigError("patience must not exceed max_epochs");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"lr", c.lr},         {"batch_size", c.batch_size}, {"max_epochs", c.max_epochs},
                     {"patience", c.patience}, {"beta1", c.beta1},       {"beta2", c.beta2},
                     {"eps", c.eps},       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("lr", c.lr);
    get("batch_size", c.batch_size);
    get("max_epochs", c.max_epochs);
    get("patience", c.patience);
    get("beta1", c.beta1);
    get("beta2", c.beta2);
    get("eps", c.eps);
    get("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
}

/// Bias-corrected Adam over a registry, in registry order.
template <class T>
class Adam {
 public:
  explicit Adam(const ParameterRegistry<T>& registry) {
    for (const auto& p : registry.params()) {
      m_.emplace_back(p.tensor.size(), 0.0);
      v_.emplace_back(p.tensor.size(), 0.0);
    }
  }

  std::uint64_t steps() const { return step_; }
  const std::vector<std::vector<double>>& first_moment() const { return m_; }
  const std::vector<std::vector<double>>& second_moment() const { return v_; }

  void step(ParameterRegistry<T>& registry, const TrainConfig& cfg) {
    auto& params = registry.params();
    if (params.size() != m_.size()) throw ContractError("Adam: registry changed after construction");
    for (const auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (auto g : p.tensor.grad())
        if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + p.name);
    }
    ++step_;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& p = params[k].tensor;
      if (!p.has_grad()) continue;
      const auto grad = p.grad();
      auto values = p.mutable_values();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        const double mhat = m[i] / c1, vhat = v[i] / c2;
        values[i] = static_cast<T>(static_cast<double>(values[i]) - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
      }
    }
  }

 private:
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t step_ = 0;
};

// ---------------------------------------------------------------------------
// Batches

template <class T>
struct Batch {
  Tensor<T> x;       // B x T_in x N x C, normalised, missing -> 0
  Tensor<T> target;  // B x T_out x N x C, original units, missing -> 0
  Tensor<T> mask;    // B x T_out x N x C
  std::vector<std::int64_t> timestamps;  // B x T_in
};

template <class T>
Batch<T> make_batch(const Dataset& ds, const ZScoreStats& stats, const WindowSet& windows,
                    std::span<const std::size_t> which) {
  const std::size_t B = which.size(), Ti = windows.steps_in, To = windows.steps_out;
  const std::size_t slab = ds.nodes * ds.channels;
  std::vector<T> x(B * Ti * slab), y(B * To * slab), m(B * To * slab);
  Batch<T> batch;
  batch.timestamps.reserve(B * Ti);
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t s = windows.starts.at(which[b]);
    for (std::size_t t = 0; t < Ti; ++t) {
      batch.timestamps.push_back(ds.timestamp(s + t));
      for (std::size_t k = 0; k < slab; ++k) {
        const std::size_t src = (s + t) * slab + k;
        x[(b * Ti + t) * slab + k] = ds.mask[src] ? static_cast<T>(stats.apply(ds.values[src])) : T(0);
      }
    }
    for (std::size_t t = 0; t < To; ++t) {
      for (std::size_t k = 0; k < slab; ++k) {
        const std::size_t src = (s + Ti + t) * slab + k;
        const std::size_t dst = (b * To + t) * slab + k;
        m[dst] = ds.mask[src] ? T(1) : T(0);
        y[dst] = ds.mask[src] ? static_cast<T>(ds.values[src]) : T(0);
      }
    }
  }
  batch.x = Tensor<T>({B, Ti, ds.nodes, ds.channels}, std::move(x));
  batch.target = Tensor<T>({B, To, ds.nodes, ds.channels}, std::move(y));
  batch.mask = Tensor<T>({B, To, ds.nodes, ds.channels}, std::move(m));
  return batch;
}

/// Forecast in original units.
template <class T>
Tensor<T> forecast(const Model<T>& model, const Batch<T>& batch, const ZScoreStats& stats) {
  return affine(model.forward(batch.x, batch.timestamps), static_cast<T>(stats.std), static_cast<T>(stats.mean));
}

/// Metrics over every window, horizon and node of a split (inference mode).
template <class T>
MetricReport evaluate(const Model<T>& model, const Dataset& ds, const WindowSet& windows, const ZScoreStats& stats,
                      std::size_t batch_size = 16) {
  if (windows.size() == 0) throw ContractError("evaluate: empty split");
  NoGradGuard no_grad;
  MetricAccumulator acc;
  std::vector<std::size_t> idx;
  for (std::size_t begin = 0; begin < windows.size(); begin += batch_size) {
    idx.clear();
    for (std::size_t w = begin; w < std::min(windows.size(), begin + batch_size); ++w) idx.push_back(w);
    auto batch = make_batch<T>(ds, stats, windows, idx);
    auto pred = forecast(model, batch, stats);
    for (std::size_t i = 0; i < pred.size(); ++i)
      acc.add(pred.vec()[i], batch.target.vec()[i], batch.mask.vec()[i] != T(0));
  }
  return acc.report();
}

/// Metrics of predicting the training mean everywhere.
inline MetricReport evaluate_constant_mean(const Dataset& ds, const WindowSet& windows, const ZScoreStats& stats) {
  MetricAccumulator acc;
  for (std::size_t w = 0; w < windows.size(); ++w)
    for (std::size_t t = 0; t < windows.steps_out; ++t)
      for (std::size_t k = 0; k < ds.nodes * ds.channels; ++k) {
        const std::size_t src = (windows.target_begin(w) + t) * ds.nodes * ds.channels + k;
        acc.add(stats.mean, ds.values[src], ds.mask[src] != 0);
      }
  return acc.report();
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  std::size_t epoch = 0;
  double train_mae = 0, val_mae = 0, val_rmse = 0, val_mape = 0, seconds = 0;
};

inline std::string to_jsonl(const EpochRecord& r) {
  nlohmann::json j{{"epoch", r.epoch},       {"train_mae", r.train_mae}, {"val_mae", r.val_mae},
                   {"val_rmse", r.val_rmse}, {"val_mape", r.val_mape},   {"seconds", r.seconds}};
  return j.dump();
}

/// Tracks the strictly best validation score and the epochs since it.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

  /// Returns true if `score` is a strict improvement.
  bool update(double score) {
    if (score < best_) {
      best_ = score;
      stale_ = 0;
      return true;
    }
    ++stale_;
    return false;
  }
  bool should_stop() const { return stale_ >= patience_; }
  double best() const { return best_; }

 private:
  std::size_t patience_;
  std::size_t stale_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
};

/// Dataset with its split, windows and training statistics.
struct PreparedData {
  const Dataset* dataset = nullptr;
  SplitRanges ranges;
  WindowSet train, val, test;
  ZScoreStats stats;
};

inline PreparedData prepare_data(const Dataset& ds, std::size_t steps_in = 12, std::size_t steps_out = 12) {
  ds.validate();
  PreparedData p;
  p.dataset = &ds;
  p.ranges = chronological_split(ds.steps, steps_in, steps_out);
  p.train = make_windows(p.ranges.train, steps_in, steps_out);
  p.val = make_windows(p.ranges.val, steps_in, steps_out);
  p.test = make_windows(p.ranges.test, steps_in, steps_out);
  p.stats = compute_zscore(ds, p.ranges.train);
  return p;
}

template <class T>
struct TrainResult {
  std::vector<EpochRecord> log;
  std::vector<std::vector<T>> best_parameters;
  std::size_t best_epoch = 0;
  double best_val_mae = std::numeric_limits<double>::infinity();
  bool diverged = false;
  std::string message;
};

/// Seeded shuffled mini-batches, Adam on the denormalised masked MAE, validation after each
/// epoch, strictly-best checkpoint retained and restored into `model` at the end.
/// `on_epoch` may return false to stop early. A non-finite loss or gradient ends training
/// with `diverged` set and the log so far.
template <class T>
TrainResult<T> train(Model<T>& model, const PreparedData& data, const TrainConfig& cfg,
                     const std::function<bool(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  const Dataset& ds = *data.dataset;
  TrainResult<T> result;
  Adam<T> adam(model.registry());
  Lcg64 shuffle_rng(cfg.seed ^ 0xD1B54A32D192ED03ULL);
  EarlyStopping stopper(cfg.patience);
  std::vector<std::size_t> order(data.train.size());
  std::vector<std::size_t> idx;
  const T std_t = static_cast<T>(data.stats.std), mean_t = static_cast<T>(data.stats.mean);

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle_rng.shuffle(order);
    double abs_sum = 0, weight_sum = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      idx.assign(order.begin() + static_cast<std::ptrdiff_t>(begin),
                 order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), begin + cfg.batch_size)));
      auto batch = make_batch<T>(ds, data.stats, data.train, idx);
      double weight = 0;
      for (auto v : batch.mask.vec()) weight += v;
      if (weight == 0) continue;
      double lv = 0;
      try {
        model.registry().zero_grad();
        auto pred = affine(model.forward(batch.x, batch.timestamps), std_t, mean_t);
        auto loss = mae_loss(pred, batch.target, batch.mask);
        lv = loss.item();
        if (!std::isfinite(lv)) throw NumericError("non-finite training loss at epoch " + std::to_string(epoch));
        backward(loss);
        adam.step(model.registry(), cfg);
      } catch (const NumericError& e) {
        result.diverged = true;
        result.message = e.what();
        if (!result.best_parameters.empty()) model.registry().restore(result.best_parameters);
        return result;
      }
      abs_sum += lv * weight;
      weight_sum += weight;
    }
    model.registry().zero_grad();
    const auto val = evaluate(model, ds, data.val, data.stats, cfg.batch_size);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_mae = weight_sum > 0 ? abs_sum / weight_sum : 0.0;
    rec.val_mae = val.mae;
    rec.val_rmse = val.rmse;
    rec.val_mape = val.mape_percent;
    if (cfg.record_timing) {
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    result.log.push_back(rec);
    if (stopper.update(val.mae)) {
      result.best_epoch = epoch;
      result.best_val_mae = val.mae;
      result.best_parameters = model.registry().snapshot();
    }
    const bool keep_going = on_epoch ? on_epoch(rec) : true;
    if (!keep_going || stopper.should_stop()) break;
  }
  if (!result.best_parameters.empty()) model.registry().restore(result.best_parameters);
  return result;
}

}  // namespace dstgtn
