#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dstgtn/errors.hpp"
#include "dstgtn/ops.hpp"
#include "dstgtn/parameter.hpp"

namespace dstgtn {

inline constexpr std::int64_t kSecondsPerDay = 86400;
inline constexpr std::size_t kDaysPerWeek = 7;

/// Samples per day for a sampling interval; the interval must divide a day exactly.
inline std::size_t steps_per_day(std::int64_t interval_seconds) {
  if (interval_seconds <= 0 || kSecondsPerDay % interval_seconds != 0) {
    throw DataError("sampling interval " + std::to_string(interval_seconds) +
                    " s does not divide a day");
  }
  return static_cast<std::size_t>(kSecondsPerDay / interval_seconds);
}

inline std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  const std::int64_t q = a / b;
  return (a % b != 0 && ((a < 0) != (b < 0))) ? q - 1 : q;
}

/// Within-day slot and weekday (0 = Monday) of each timestamp, in UTC.
struct TemporalSlots {
  std::vector<std::size_t> day;
  std::vector<std::size_t> week;
};

/// Slots for one window of strictly consecutive timestamps.
inline TemporalSlots temporal_slots(std::span<const std::int64_t> timestamps,
                                    std::int64_t interval_seconds) {
  const auto per_day = static_cast<std::int64_t>(steps_per_day(interval_seconds));
  TemporalSlots slots;
  slots.day.reserve(timestamps.size());
  slots.week.reserve(timestamps.size());
  for (std::size_t i = 0; i < timestamps.size(); ++i) {
    const std::int64_t ts = timestamps[i];
    if (i > 0 && ts - timestamps[i - 1] != interval_seconds) {
      throw DataError("timestamps are not consecutive at position " + std::to_string(i));
    }
    const std::int64_t days = floor_div(ts, kSecondsPerDay);
    const std::int64_t second_of_day = ts - days * kSecondsPerDay;
    if (second_of_day % interval_seconds != 0) {
      throw DataError("timestamp " + std::to_string(ts) + " is not aligned to a " +
                      std::to_string(interval_seconds) + " s interval");
    }
    slots.day.push_back(static_cast<std::size_t>((second_of_day / interval_seconds) % per_day));
    // 1970-01-01 was a Thursday.
    slots.week.push_back(static_cast<std::size_t>(((days + 3) % 7 + 7) % 7));
  }
  return slots;
}

/// Learnable daily (T^d x d1) and weekly (7 x d1) identity tables.
template <class T>
struct TemporalIdentityTable {
  Tensor<T> day;
  Tensor<T> week;
  std::int64_t interval_seconds = 300;

  std::size_t width() const { return day.dim(1); }
};

/// Learnable T x N x d2 tensor describing each node's spatial character at each window position.
template <class T>
struct DynSTEmbedding {
  Tensor<T> values;
};

/// Embedding output with the fixed segment layout [H | E_day | E_week | E_st].
template <class T>
struct EmbeddedWindow {
  Tensor<T> z;                          // B x T x N x D
  std::array<std::size_t, 5> bounds{};  // segment k spans [bounds[k], bounds[k+1])
};

/// H = x W_in + b_in at every (b, t, n) position.
template <class T>
Tensor<T> project_input(const Tensor<T>& x, const Tensor<T>& w_in, const Tensor<T>& b_in) {
  if (x.rank() != 4 || w_in.rank() != 2 || x.dim(3) != w_in.dim(0)) {
    throw DimensionError("project_input: input " + to_string(x.shape()) + " vs weight " +
                         to_string(w_in.shape()));
  }
  return linear(x, w_in, b_in);
}

/// Rows of I_day / I_week for one window; each result is T x d1.
template <class T>
std::pair<Tensor<T>, Tensor<T>> lookup_temporal_identity(std::span<const std::int64_t> timestamps,
                                                         const TemporalIdentityTable<T>& table) {
  const auto slots = temporal_slots(timestamps, table.interval_seconds);
  if (table.day.dim(0) != steps_per_day(table.interval_seconds)) {
    throw ConfigError("daily identity table has " + std::to_string(table.day.dim(0)) +
                      " rows, expected " + std::to_string(steps_per_day(table.interval_seconds)));
  }
  return {gather_rows(table.day, slots.day), gather_rows(table.week, slots.week)};
}

/// Per-window lookup for a batch: `timestamps` holds B consecutive windows of length T.
/// Results are B x T x d1.
template <class T>
std::pair<Tensor<T>, Tensor<T>> lookup_temporal_identity(std::span<const std::int64_t> timestamps,
                                                         std::size_t batch,
                                                         const TemporalIdentityTable<T>& table) {
  if (batch == 0 || timestamps.size() % batch != 0) {
    throw DimensionError("timestamp count " + std::to_string(timestamps.size()) +
                         " is not a multiple of batch " + std::to_string(batch));
  }
  const std::size_t steps = timestamps.size() / batch;
  std::vector<std::size_t> day, week;
  day.reserve(timestamps.size());
  week.reserve(timestamps.size());
  for (std::size_t b = 0; b < batch; ++b) {
    const auto s = temporal_slots(timestamps.subspan(b * steps, steps), table.interval_seconds);
    day.insert(day.end(), s.day.begin(), s.day.end());
    week.insert(week.end(), s.week.begin(), s.week.end());
  }
  const std::size_t d1 = table.width();
  return {reshape(gather_rows(table.day, day), {batch, steps, d1}),
          reshape(gather_rows(table.week, week), {batch, steps, d1})};
}

/// Z[b,t,n] = H[b,t,n] | E_day[t] | E_week[t] | E_st[t,n].
/// E_day / E_week may be T x d1 (shared) or B x T x d1 (per window).
template <class T>
EmbeddedWindow<T> assemble_embedding(const Tensor<T>& h, const Tensor<T>& e_day,
                                     const Tensor<T>& e_week, const Tensor<T>& e_st) {
  if (h.rank() != 4) throw DimensionError("assemble_embedding: H must be B x T x N x d");
  const std::size_t B = h.dim(0), Tn = h.dim(1), N = h.dim(2);
  auto lift_time = [&](const Tensor<T>& e, const char* what) {
    const bool shared = e.rank() == 2 && e.dim(0) == Tn;
    const bool per_window = e.rank() == 3 && e.dim(0) == B && e.dim(1) == Tn;
    if (!shared && !per_window) {
      throw DimensionError(std::string("assemble_embedding: ") + what + " " + to_string(e.shape()) +
                           " does not match H " + to_string(h.shape()));
    }
    const std::size_t w = e.dim(-1);
    auto e4 = reshape(e, {shared ? std::size_t{1} : B, Tn, 1, w});
    return broadcast_to(e4, {B, Tn, N, w});
  };
  if (e_st.rank() != 3 || e_st.dim(0) != Tn || e_st.dim(1) != N) {
    throw DimensionError("assemble_embedding: E_st " + to_string(e_st.shape()) +
                         " does not match H " + to_string(h.shape()));
  }
  const std::size_t d = h.dim(3), d1 = e_day.dim(-1), d1w = e_week.dim(-1), d2 = e_st.dim(2);
  EmbeddedWindow<T> out;
  out.z = concat_last<T>({h, lift_time(e_day, "E_day"), lift_time(e_week, "E_week"),
                          broadcast_to(e_st, {B, Tn, N, d2})});
  out.bounds = {0, d, d + d1, d + d1 + d1w, d + d1 + d1w + d2};
  return out;
}

/// Owns the input projection, temporal identity tables and Dyn-ST embedding.
template <class T>
class EmbeddingLayer {
 public:
  EmbeddingLayer(ParameterRegistry<T>& registry, Lcg64& rng, std::size_t steps, std::size_t nodes,
                 std::size_t channels, std::size_t d, std::size_t d1, std::size_t d2,
                 std::int64_t interval_seconds) {
    w_in_ = registry.uniform("embedding.W_in", {channels, d}, channels, rng);
    b_in_ = registry.constant("embedding.b_in", {d}, T(0));
    table_.interval_seconds = interval_seconds;
    table_.day = registry.uniform("embedding.I_day", {steps_per_day(interval_seconds), d1}, d1, rng);
    table_.week = registry.uniform("embedding.I_week", {kDaysPerWeek, d1}, d1, rng);
    e_st_.values = registry.uniform("embedding.E_st", {steps, nodes, d2}, d2, rng);
  }

  /// x: B x T x N x C; timestamps: B windows of T epoch seconds each.
  EmbeddedWindow<T> forward(const Tensor<T>& x, std::span<const std::int64_t> timestamps) const {
    auto h = project_input(x, w_in_, b_in_);
    auto [e_day, e_week] = lookup_temporal_identity(timestamps, x.dim(0), table_);
    return assemble_embedding(h, e_day, e_week, e_st_.values);
  }

  const Tensor<T>& dyn_st() const { return e_st_.values; }
  const TemporalIdentityTable<T>& identity_table() const { return table_; }

 private:
  Tensor<T> w_in_, b_in_;
  TemporalIdentityTable<T> table_;
  DynSTEmbedding<T> e_st_;
};

}  // namespace dstgtn
