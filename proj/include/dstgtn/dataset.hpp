#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dstgtn/embedding.hpp"
#include "dstgtn/errors.hpp"
#include "dstgtn/random.hpp"

namespace dstgtn {

/// T_total x N x C traffic series with observation mask and uniform timestamps.
struct Dataset {
  std::size_t steps = 0;
  std::size_t nodes = 0;
  std::size_t channels = 1;
  std::int64_t start_epoch_seconds = 0;
  std::uint32_t interval_seconds = 300;
  bool zero_is_missing = false;
  std::vector<std::string> node_ids;
  std::vector<double> coordinates;     // empty or N x 2
  std::vector<float> values;           // T x N x C, row-major
  std::vector<std::uint8_t> explicit_mask;  // as stored on disk; empty when none was stored
  std::vector<std::uint8_t> mask;      // effective: 1 = observed

  std::size_t index(std::size_t t, std::size_t n, std::size_t c = 0) const {
    return (t * nodes + n) * channels + c;
  }
  std::int64_t timestamp(std::size_t t) const {
    return start_epoch_seconds + static_cast<std::int64_t>(t) * interval_seconds;
  }

  /// Recomputes the effective mask: explicit mask AND finite AND (non-zero if zeros are missing).
  void refresh_mask() {
    mask.assign(values.size(), 1);
    for (std::size_t i = 0; i < values.size(); ++i) {
      bool ok = std::isfinite(values[i]);
      if (!explicit_mask.empty() && !explicit_mask[i]) ok = false;
      if (zero_is_missing && values[i] == 0.0f) ok = false;
      mask[i] = ok ? 1 : 0;
    }
  }

  void validate() const {
    if (steps < 24) throw DataError("dataset needs at least 24 time steps, has " + std::to_string(steps));
    if (nodes == 0 || channels == 0) throw DataError("dataset has no nodes or channels");
    if (values.size() != steps * nodes * channels) throw DataError("dataset value count mismatch");
    if (mask.size() != values.size()) throw DataError("dataset mask size mismatch");
    if (node_ids.size() != nodes) throw DataError("dataset node-id count mismatch");
    if (!coordinates.empty() && coordinates.size() != 2 * nodes) throw DataError("coordinate table must be N x 2");
    steps_per_day(interval_seconds);
  }
};

// ---------------------------------------------------------------------------
// STTS binary container (little-endian):
//   "STTS" u32 version=1 u64 T u64 N u64 C i64 start u32 interval u8 zero_is_missing
//   N x (u32 byte length, UTF-8 node id)
//   u8 has_coordinates [N x 2 f64]
//   T*N*C f32 values
//   u8 has_mask [ceil(T*N*C / 8) bytes, bit i of byte k is element 8k+i, 1 = observed]

inline constexpr std::uint32_t kSttsVersion = 1;

namespace detail {

class ByteWriter {
 public:
  template <class U>
  void put(U v) {
    using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t,
                                    std::conditional_t<sizeof(U) == 4, std::uint32_t,
                                                       std::conditional_t<sizeof(U) == 2, std::uint16_t, std::uint8_t>>>;
    const auto bits = std::bit_cast<Bits>(v);
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes_.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
  }
  void raw(const void* p, std::size_t n) {
    const char* c = static_cast<const char*>(p);
    bytes_.insert(bytes_.end(), c, c + n);
  }
  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes) : bytes_(bytes) {}

  void need(std::uint64_t n, const char* what) const {
    if (n > bytes_.size() - pos_) {
      throw FormatError(std::string("truncated ") + what + ": expected " + std::to_string(n) +
                            " more bytes, file has " + std::to_string(bytes_.size() - pos_) + " (total " +
                            std::to_string(bytes_.size()) + ")",
                        pos_);
    }
  }

  template <class U>
  U get(const char* what) {
    need(sizeof(U), what);
    using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t,
                                    std::conditional_t<sizeof(U) == 4, std::uint32_t,
                                                       std::conditional_t<sizeof(U) == 2, std::uint16_t, std::uint8_t>>>;
    Bits bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      bits |= static_cast<Bits>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return std::bit_cast<U>(bits);
  }

  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path);
}

}  // namespace detail

inline std::string encode_stts(const Dataset& ds) {
  detail::ByteWriter w;
  w.raw("STTS", 4);
  w.put(kSttsVersion);
  w.put(static_cast<std::uint64_t>(ds.steps));
  w.put(static_cast<std::uint64_t>(ds.nodes));
  w.put(static_cast<std::uint64_t>(ds.channels));
  w.put(ds.start_epoch_seconds);
  w.put(ds.interval_seconds);
  w.put(static_cast<std::uint8_t>(ds.zero_is_missing ? 1 : 0));
  for (const auto& id : ds.node_ids) {
    w.put(static_cast<std::uint32_t>(id.size()));
    w.raw(id.data(), id.size());
  }
  w.put(static_cast<std::uint8_t>(ds.coordinates.empty() ? 0 : 1));
  for (double c : ds.coordinates) w.put(c);
  for (float v : ds.values) w.put(v);
  w.put(static_cast<std::uint8_t>(ds.explicit_mask.empty() ? 0 : 1));
  if (!ds.explicit_mask.empty()) {
    std::vector<std::uint8_t> packed((ds.explicit_mask.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < ds.explicit_mask.size(); ++i)
      if (ds.explicit_mask[i]) packed[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
    w.raw(packed.data(), packed.size());
  }
  return w.bytes();
}

inline Dataset decode_stts(const std::string& bytes) {
  detail::ByteReader r(bytes);
  if (r.remaining() < 4 || bytes.compare(0, 4, "STTS") != 0) throw FormatError("bad magic, expected STTS", 0);
  r.str(4, "magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kSttsVersion) {
    throw FormatError("unsupported STTS version " + std::to_string(version), 4);
  }
  Dataset ds;
  const auto extent_at = r.pos();
  const auto steps = r.get<std::uint64_t>("header");
  const auto nodes = r.get<std::uint64_t>("header");
  const auto channels = r.get<std::uint64_t>("header");
  constexpr std::uint64_t kLimit = std::uint64_t{1} << 40;
  if (steps == 0 || nodes == 0 || channels == 0 || steps > kLimit || nodes > kLimit || channels > kLimit ||
      steps * nodes > kLimit || steps * nodes * channels > kLimit) {
    throw FormatError("extent overflow or zero extent in header (T=" + std::to_string(steps) + ", N=" +
                          std::to_string(nodes) + ", C=" + std::to_string(channels) + ")",
                      extent_at);
  }
  ds.steps = steps;
  ds.nodes = nodes;
  ds.channels = channels;
  ds.start_epoch_seconds = r.get<std::int64_t>("header");
  ds.interval_seconds = r.get<std::uint32_t>("header");
  ds.zero_is_missing = r.get<std::uint8_t>("header") != 0;
  for (std::size_t n = 0; n < ds.nodes; ++n) {
    const auto len = r.get<std::uint32_t>("node-id table");
    ds.node_ids.push_back(r.str(len, "node-id table"));
  }
  if (r.get<std::uint8_t>("coordinate flag")) {
    r.need(16 * ds.nodes, "coordinate table");
    for (std::size_t i = 0; i < 2 * ds.nodes; ++i) ds.coordinates.push_back(r.get<double>("coordinate table"));
  }
  const std::size_t count = ds.steps * ds.nodes * ds.channels;
  r.need(4 * static_cast<std::uint64_t>(count), "value payload");
  ds.values.resize(count);
  for (auto& v : ds.values) v = r.get<float>("value payload");
  if (r.get<std::uint8_t>("mask flag")) {
    const std::size_t packed = (count + 7) / 8;
    r.need(packed, "mask payload");
    ds.explicit_mask.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      const auto byte = static_cast<unsigned char>(bytes[r.pos() + i / 8]);
      ds.explicit_mask[i] = static_cast<std::uint8_t>((byte >> (i % 8)) & 1u);
    }
    r.str(packed, "mask payload");
  }
  if (r.remaining() != 0) {
    throw FormatError(std::to_string(r.remaining()) + " trailing bytes after payload", r.pos());
  }
  ds.refresh_mask();
  ds.validate();
  return ds;
}

inline void save_stts(const std::string& path, const Dataset& ds) { detail::write_file(path, encode_stts(ds)); }

/// CSV layout (C = 1): header `timestamp,<node id>...`, then one row per step with epoch
/// seconds followed by one value per node. Empty cells and `nan` are missing. The interval
/// is the difference of the first two timestamps and must be constant.
inline Dataset parse_csv(const std::string& text, bool zero_is_missing) {
  std::istringstream in(text);
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ls(s);
    while (std::getline(ls, cell, ',')) {
      while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
      out.push_back(cell);
    }
    if (!s.empty() && s.back() == ',') out.emplace_back();
    return out;
  };
  std::size_t offset = 0;
  if (!std::getline(in, line)) throw FormatError("empty CSV", 0);
  auto header = split(line);
  if (header.size() < 2 || header[0] != "timestamp") throw FormatError("CSV header must start with 'timestamp'", 0);
  Dataset ds;
  ds.channels = 1;
  ds.zero_is_missing = zero_is_missing;
  ds.node_ids.assign(header.begin() + 1, header.end());
  ds.nodes = ds.node_ids.size();
  std::vector<std::int64_t> stamps;
  offset += line.size() + 1;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") { offset += line.size() + 1; continue; }
    auto cells = split(line);
    if (cells.size() != ds.nodes + 1) {
      throw FormatError("CSV row has " + std::to_string(cells.size()) + " cells, expected " +
                            std::to_string(ds.nodes + 1),
                        offset);
    }
    try {
      stamps.push_back(std::stoll(cells[0]));
    } catch (const std::exception&) {
      throw FormatError("bad timestamp '" + cells[0] + "'", offset);
    }
    for (std::size_t n = 0; n < ds.nodes; ++n) {
      const auto& c = cells[n + 1];
      if (c.empty() || c == "nan" || c == "NaN") {
        ds.values.push_back(std::numeric_limits<float>::quiet_NaN());
        continue;
      }
      try {
        ds.values.push_back(std::stof(c));
      } catch (const std::exception&) {
        throw FormatError("bad value '" + c + "'", offset);
      }
    }
    offset += line.size() + 1;
  }
  ds.steps = stamps.size();
  if (ds.steps < 2) throw DataError("CSV needs at least two rows");
  const std::int64_t interval = stamps[1] - stamps[0];
  if (interval <= 0 || interval > std::numeric_limits<std::uint32_t>::max()) throw DataError("CSV timestamps must increase");
  for (std::size_t t = 1; t < stamps.size(); ++t) {
    if (stamps[t] - stamps[t - 1] != interval) {
      throw DataError("CSV timestamps are not evenly spaced at row " + std::to_string(t + 1));
    }
  }
  ds.start_epoch_seconds = stamps[0];
  ds.interval_seconds = static_cast<std::uint32_t>(interval);
  ds.refresh_mask();
  ds.validate();
  return ds;
}

/// Loads an STTS file, or a CSV file (by `.csv` extension).
inline Dataset load_dataset(const std::string& path, bool csv_zero_is_missing = false) {
  const auto bytes = detail::read_file(path);
  if (bytes.size() >= 4 && bytes.compare(0, 4, "STTS") == 0) return decode_stts(bytes);
  if (path.size() >= 4 && path.compare(path.size() - 4, 4, ".csv") == 0) return parse_csv(bytes, csv_zero_is_missing);
  throw FormatError("bad magic in " + path + ", expected STTS", 0);
}

// ---------------------------------------------------------------------------
// Splits and windows

struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool operator==(const IndexRange&) const = default;
};

struct SplitRanges {
  IndexRange train, val, test;
};

/// Contiguous chronological split; each share is floor(T * r_k / sum r), the remainder goes to test.
inline SplitRanges chronological_split(std::size_t total_steps, std::size_t steps_in = 12,
                                       std::size_t steps_out = 12, double train_ratio = 6,
                                       double val_ratio = 2, double test_ratio = 2) {
  if (!(train_ratio > 0 && val_ratio > 0 && test_ratio > 0)) throw ConfigError("split ratios must be positive");
  const double sum = train_ratio + val_ratio + test_ratio;
  const auto n = static_cast<double>(total_steps);
  const auto train_len = static_cast<std::size_t>(std::floor(n * train_ratio / sum));
  const auto val_len = static_cast<std::size_t>(std::floor(n * val_ratio / sum));
  SplitRanges s{{0, train_len}, {train_len, train_len + val_len}, {train_len + val_len, total_steps}};
  const std::size_t need = steps_in + steps_out;
  for (const auto* r : {&s.train, &s.val, &s.test}) {
    if (r->size() < need) {
      throw DataError("split of " + std::to_string(r->size()) + " steps cannot hold one " +
                      std::to_string(steps_in) + "+" + std::to_string(steps_out) + " window (T_total = " +
                      std::to_string(total_steps) + ")");
    }
  }
  return s;
}

/// Stride-1 windows inside one range: input [s, s+T_in), target [s+T_in, s+T_in+T_out).
struct WindowSet {
  IndexRange range;
  std::size_t steps_in = 12;
  std::size_t steps_out = 12;
  std::vector<std::size_t> starts;

  std::size_t size() const { return starts.size(); }
  std::size_t target_begin(std::size_t w) const { return starts[w] + steps_in; }
};

inline WindowSet make_windows(IndexRange range, std::size_t steps_in = 12, std::size_t steps_out = 12) {
  if (range.end < range.begin || range.size() < steps_in + steps_out) {
    throw DataError("range of " + std::to_string(range.size()) + " steps is shorter than T_in + T_out = " +
                    std::to_string(steps_in + steps_out));
  }
  WindowSet ws{range, steps_in, steps_out, {}};
  for (std::size_t s = range.begin; s + steps_in + steps_out <= range.end; ++s) ws.starts.push_back(s);
  return ws;
}

// ---------------------------------------------------------------------------
// Synthetic data

/// x_t = alpha * G x_{t-lag} + (1 - alpha) * s(t) + sigma * eps, with x_t = s(t) for t < 0,
/// s_n(t) = base_n + amp_n * sin(2 pi t / T^d + phase_n).
/// Nodes sit at random points of the unit square. With `neighbors` = k > 0 every node is
/// driven by k distinct random other nodes (random weights, rows sum to 1); with k = 0, G is
/// a row-normalised Gaussian kernel of the distances between distinct nodes. Values reach a
/// node `lag` steps after they leave its sources, so with a sparse G and lag 12 the next 12
/// steps of a node are set by its sources' last 12 values, which its own history does not reveal.
struct SyntheticConfig {
  std::size_t nodes = 8;
  std::size_t steps = 2016;
  std::uint64_t seed = 0;
  double alpha = 0.8;
  double sigma = 0.05;
  std::uint32_t interval_seconds = 300;
  std::int64_t start_epoch_seconds = 1704067200;  // Monday 2024-01-01 00:00 UTC
  std::size_t neighbors = 1;
  std::size_t lag = 1;
  double kernel_width = 0.3;
  double amplitude_min = 1.0, amplitude_max = 2.0;
  bool identity_graph = false;
};

struct SyntheticData {
  Dataset dataset;
  std::vector<double> graph;  // N x N hidden row-stochastic matrix
};

inline SyntheticData generate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.nodes == 0) throw ConfigError("synthetic data needs at least one node");
  if (cfg.neighbors >= cfg.nodes && !cfg.identity_graph && cfg.nodes > 1) {
    throw ConfigError("neighbors must be below the node count");
  }
  if (cfg.lag == 0) throw ConfigError("lag must be at least one step");
  Lcg64 rng(cfg.seed);
  const std::size_t N = cfg.nodes;
  SyntheticData out;
  auto& ds = out.dataset;
  ds.steps = cfg.steps;
  ds.nodes = N;
  ds.channels = 1;
  ds.start_epoch_seconds = cfg.start_epoch_seconds;
  ds.interval_seconds = cfg.interval_seconds;
  for (std::size_t n = 0; n < N; ++n) ds.node_ids.push_back("node" + std::to_string(n));
  for (std::size_t i = 0; i < 2 * N; ++i) ds.coordinates.push_back(rng.uniform());

  out.graph.assign(N * N, 0.0);
  for (std::size_t i = 0; i < N; ++i) {
    auto row = out.graph.begin() + static_cast<std::ptrdiff_t>(i * N);
    if (cfg.identity_graph || N == 1) {
      row[static_cast<std::ptrdiff_t>(i)] = 1.0;
      continue;
    }
    if (cfg.neighbors > 0) {
      std::vector<std::size_t> others;
      for (std::size_t j = 0; j < N; ++j)
        if (j != i) others.push_back(j);
      rng.shuffle(others);
      for (std::size_t r = 0; r < cfg.neighbors; ++r) row[static_cast<std::ptrdiff_t>(others[r])] = rng.uniform(0.5, 1.5);
    } else {
      for (std::size_t j = 0; j < N; ++j) {
        if (j == i) continue;
        const double dx = ds.coordinates[2 * i] - ds.coordinates[2 * j];
        const double dy = ds.coordinates[2 * i + 1] - ds.coordinates[2 * j + 1];
        row[static_cast<std::ptrdiff_t>(j)] = std::exp(-(dx * dx + dy * dy) / (cfg.kernel_width * cfg.kernel_width));
      }
    }
    double total = 0;
    for (std::size_t j = 0; j < N; ++j) total += row[static_cast<std::ptrdiff_t>(j)];
    for (std::size_t j = 0; j < N; ++j) row[static_cast<std::ptrdiff_t>(j)] /= total;
  }

  std::vector<double> base(N), amp(N), phase(N);
  for (std::size_t n = 0; n < N; ++n) {
    base[n] = rng.uniform(8.0, 12.0);
    amp[n] = rng.uniform(cfg.amplitude_min, cfg.amplitude_max);
    phase[n] = rng.uniform(0.0, 6.283185307179586);
  }
  const double period = static_cast<double>(steps_per_day(cfg.interval_seconds));
  auto seasonal_at = [&](double t, std::size_t n) {
    return base[n] + amp[n] * std::sin(6.283185307179586 * t / period + phase[n]);
  };
  auto seasonal = [&](std::size_t t, std::size_t n) { return seasonal_at(static_cast<double>(t), n); };
  std::vector<double> x_hist(cfg.steps * N);

  const std::size_t lag = cfg.lag;
  ds.values.resize(cfg.steps * N);
  for (std::size_t t = 0; t < cfg.steps; ++t) {
    for (std::size_t i = 0; i < N; ++i) {
      double mixed = 0;
      for (std::size_t j = 0; j < N; ++j) {
        const double src = t >= lag ? x_hist[(t - lag) * N + j] : seasonal_at(static_cast<double>(t) - static_cast<double>(lag), j);
        mixed += out.graph[i * N + j] * src;
      }
      double v = cfg.alpha * mixed + (1.0 - cfg.alpha) * seasonal(t, i);
      if (cfg.sigma > 0) v += cfg.sigma * rng.normal();
      x_hist[t * N + i] = v;
      ds.values[t * N + i] = static_cast<float>(v);
    }
  }
  ds.refresh_mask();
  ds.validate();
  return out;
}

}  // namespace dstgtn
