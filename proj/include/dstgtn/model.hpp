#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dstgtn/dstm.hpp"
#include "dstgtn/embedding.hpp"
#include "dstgtn/errors.hpp"
#include "dstgtn/ops.hpp"
#include "dstgtn/parameter.hpp"
#include "dstgtn/temporal_transformer.hpp"

namespace dstgtn {

enum class Variant { full, no_tt, no_tt_st, reverse, static_graph, no_nfl };

inline constexpr Variant kAllVariants[] = {Variant::full,    Variant::no_tt,        Variant::no_tt_st,
                                           Variant::reverse, Variant::static_graph, Variant::no_nfl};

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::no_tt: return "no_tt";
    case Variant::no_tt_st: return "no_tt_st";
    case Variant::reverse: return "reverse";
    case Variant::static_graph: return "static_graph";
    case Variant::no_nfl: return "no_nfl";
  }
  return "full";
}

inline Variant parse_variant(const std::string& name) {
  for (auto v : kAllVariants)
    if (variant_name(v) == name) return v;
  throw ConfigError("unknown variant '" + name +
                    "' (expected full, no_tt, no_tt_st, reverse, static_graph, no_nfl)");
}

struct ModelConfig {
  std::size_t nodes = 0;
  std::size_t steps_in = 12;
  std::size_t steps_out = 12;
  std::size_t channels = 1;
  std::size_t d = 24;   // traffic embedding
  std::size_t d1 = 24;  // each temporal identity embedding
  std::size_t d2 = 80;  // Dyn-ST embedding
  std::size_t heads = 4;
  std::size_t temporal_layers = 3;
  std::size_t dstm_layers = 3;
  std::int64_t interval_seconds = 300;
  Variant variant = Variant::full;
  std::vector<double> static_adjacency;  // N x N row-major, only for Variant::static_graph

  std::size_t width() const { return d + 2 * d1 + d2; }
  std::size_t output_hidden() const { return std::max<std::size_t>(1, steps_in * width() / 2); }

  /// Checks every invariant and renormalises static adjacency rows to sum to 1.
  void validate() {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string(name) + " must be positive");
    };
    positive(nodes, "N");
    positive(steps_in, "T_in");
    positive(channels, "C");
    positive(d, "d");
    positive(d1, "d1");
    positive(d2, "d2");
    positive(heads, "h");
    if (steps_in != steps_out) throw ConfigError("T_in must equal T_out");
    if (width() % heads != 0) {
      throw ConfigError("D = d + 2*d1 + d2 = " + std::to_string(width()) + " is not divisible by h = " +
                        std::to_string(heads));
    }
    if (d2 % heads != 0) throw ConfigError("d2 must be divisible by h");
    steps_per_day(interval_seconds);
    const bool wants_static = variant == Variant::static_graph;
    if (wants_static && static_adjacency.empty()) {
      throw ConfigError("variant static_graph requires a static adjacency matrix");
    }
    if (!wants_static && !static_adjacency.empty()) {
      throw ConfigError("static adjacency given for variant " + variant_name(variant));
    }
    if (wants_static) {
      if (static_adjacency.size() != nodes * nodes) {
        throw ConfigError("static adjacency must be N x N");
      }
      for (std::size_t i = 0; i < nodes; ++i) {
        double row = 0;
        for (std::size_t j = 0; j < nodes; ++j) {
          const double a = static_adjacency[i * nodes + j];
          if (!(a >= 0) || !std::isfinite(a)) throw ConfigError("static adjacency has invalid entry");
          row += a;
        }
        if (row <= 0) throw ConfigError("static adjacency row " + std::to_string(i) + " is empty");
        for (std::size_t j = 0; j < nodes; ++j) static_adjacency[i * nodes + j] /= row;
      }
    }
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"N", c.nodes},
                     {"T_in", c.steps_in},
                     {"T_out", c.steps_out},
                     {"C", c.channels},
                     {"d", c.d},
                     {"d1", c.d1},
                     {"d2", c.d2},
                     {"h", c.heads},
                     {"L_temporal", c.temporal_layers},
                     {"L_dstm", c.dstm_layers},
                     {"interval_seconds", c.interval_seconds},
                     {"variant", variant_name(c.variant)}};
  if (!c.static_adjacency.empty()) j["static_adjacency"] = c.static_adjacency;
}

/// Reads the keys present in `j`; absent keys keep their current value.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("N", c.nodes);
    get("T_in", c.steps_in);
    get("T_out", c.steps_out);
    get("C", c.channels);
    get("d", c.d);
    get("d1", c.d1);
    get("d2", c.d2);
    get("h", c.heads);
    get("L_temporal", c.temporal_layers);
    get("L_dstm", c.dstm_layers);
    get("interval_seconds", c.interval_seconds);
    get("static_adjacency", c.static_adjacency);
    if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
}

/// Closed-form parameter count; must equal Model::registry().scalar_count().
inline std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t D = c.width();
  const std::size_t per_day = steps_per_day(c.interval_seconds);
  std::size_t n = c.channels * c.d + c.d + per_day * c.d1 + kDaysPerWeek * c.d1 +
                  c.steps_in * c.nodes * c.d2;
  const bool temporal = c.variant != Variant::no_tt && c.variant != Variant::no_tt_st;
  const bool spatial = c.variant != Variant::no_tt_st;
  if (temporal) n += c.temporal_layers * (12 * D * D + 9 * D);
  if (spatial) {
    std::size_t layer = D * D + 2 * D;
    if (c.variant != Variant::static_graph) layer += 2 * c.d2 * c.d2 + c.heads;
    if (c.variant != Variant::no_nfl) layer += c.d2 * c.d2 + 2 * c.d2 + 1;
    n += c.dstm_layers * layer;
  }
  const std::size_t TD = c.steps_in * c.width(), H = c.output_hidden();
  n += TD * H + H + H * c.steps_out * c.channels + c.steps_out * c.channels;
  return n;
}

// ---------------------------------------------------------------------------
// Static graphs for the static_graph variant

namespace detail {

inline std::vector<double> softmax_over_nonzero(const std::vector<double>& w, std::size_t n) {
  std::vector<double> out(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -1e300;
    bool any = false;
    for (std::size_t j = 0; j < n; ++j)
      if (w[i * n + j] > 0) { mx = std::max(mx, w[i * n + j]); any = true; }
    if (!any) { out[i * n + i] = 1.0; continue; }
    double z = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (w[i * n + j] > 0) z += (out[i * n + j] = std::exp(w[i * n + j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  return out;
}

}  // namespace detail

/// Gaussian kernel exp(-dist^2 / sigma^2) on pairwise distances, sigma = std of all
/// pairwise distances, entries below 0.1 dropped, rows softmax-normalised over the
/// remaining entries. `coords` is N x 2.
inline std::vector<double> static_adjacency_from_coordinates(std::span<const double> coords) {
  const std::size_t n = coords.size() / 2;
  std::vector<double> dist(n * n);
  double s = 0, s2 = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double dx = coords[2 * i] - coords[2 * j], dy = coords[2 * i + 1] - coords[2 * j + 1];
      dist[i * n + j] = std::sqrt(dx * dx + dy * dy);
      s += dist[i * n + j];
      s2 += dist[i * n + j] * dist[i * n + j];
    }
  const double m = s / static_cast<double>(n * n);
  double sigma = std::sqrt(std::max(0.0, s2 / static_cast<double>(n * n) - m * m));
  if (sigma <= 0) sigma = 1.0;
  std::vector<double> w(n * n);
  for (std::size_t k = 0; k < w.size(); ++k) {
    const double v = std::exp(-(dist[k] * dist[k]) / (sigma * sigma));
    w[k] = v < 0.1 ? 0.0 : v;
  }
  return detail::softmax_over_nonzero(w, n);
}

/// Binary adjacency from directed edges (from, to), softmax-normalised over each row's edges.
inline std::vector<double> static_adjacency_from_edges(std::size_t n,
                                                       std::span<const std::pair<std::size_t, std::size_t>> edges) {
  std::vector<double> w(n * n, 0.0);
  for (auto [a, b] : edges) {
    if (a >= n || b >= n) throw DataError("edge references node outside [0, N)");
    w[a * n + b] = 1.0;
  }
  return detail::softmax_over_nonzero(w, n);
}

// ---------------------------------------------------------------------------

template <class T>
struct OutputLayerParams {
  Tensor<T> w1, b1, w2, b2;
};

/// Per node: flatten T x D, then T*D -> T*D/2 (ReLU) -> T*C, reshaped to T x C.
template <class T>
Tensor<T> output_layer(const Tensor<T>& z, const OutputLayerParams<T>& p, std::size_t channels) {
  const std::size_t B = z.dim(0), Tn = z.dim(1), N = z.dim(2), D = z.dim(3);
  if (p.w1.dim(0) != Tn * D) {
    throw DimensionError("output_layer: input " + to_string(z.shape()) + " vs weight " +
                         to_string(p.w1.shape()));
  }
  const std::size_t steps_out = p.w2.dim(1) / channels;
  auto flat = reshape(permute(z, {0, 2, 1, 3}), {B, N, Tn * D});
  auto y = linear(relu(linear(flat, p.w1, p.b1)), p.w2, p.b2);  // B,N,T*C
  return permute(reshape(y, {B, N, steps_out, channels}), {0, 2, 1, 3});
}

/// Module-level probe filled by Model::forward when requested.
template <class T>
struct ForwardTrace {
  std::vector<std::string> calls;
  Tensor<T> embedded;
  Tensor<T> after_temporal;
  Tensor<T> after_dstm;
};

template <class T>
class Model {
 public:
  explicit Model(ModelConfig cfg, std::uint64_t seed = 0) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Lcg64 rng(seed);
    const std::size_t D = cfg_.width();
    embedding_.emplace(registry_, rng, cfg_.steps_in, cfg_.nodes, cfg_.channels, cfg_.d, cfg_.d1,
                       cfg_.d2, cfg_.interval_seconds);
    if (has_temporal()) {
      for (std::size_t l = 0; l < cfg_.temporal_layers; ++l)
        temporal_.push_back(TemporalBlockParams<T>::create(registry_, rng, "temporal." + std::to_string(l),
                                                           D, cfg_.heads));
    }
    if (has_dstm()) {
      Tensor<T> fixed;
      if (cfg_.variant == Variant::static_graph) fixed = tiled_static_graph();
      for (std::size_t l = 0; l < cfg_.dstm_layers; ++l) {
        const std::string prefix = "dstm." + std::to_string(l);
        DstmLayerParams<T> layer;
        if (cfg_.variant == Variant::static_graph) {
          layer.static_graph = fixed;
        } else {
          layer.dstgg = DSTGGParams<T>::create(registry_, rng, prefix + ".dstgg", cfg_.d2, cfg_.heads);
        }
        if (cfg_.variant != Variant::no_nfl) {
          layer.nfl = NFLParams<T>::create(registry_, rng, prefix + ".nfl", cfg_.d2);
        }
        layer.w = registry_.uniform(prefix + ".W", {D, D}, D, rng);
        layer.ln_gain = registry_.constant(prefix + ".ln.gain", {D}, T(1));
        layer.ln_bias = registry_.constant(prefix + ".ln.bias", {D}, T(0));
        dstm_.push_back(std::move(layer));
      }
    }
    const std::size_t TD = cfg_.steps_in * D, H = cfg_.output_hidden();
    output_.w1 = registry_.uniform("output.W1", {TD, H}, TD, rng);
    output_.b1 = registry_.constant("output.b1", {H}, T(0));
    output_.w2 = registry_.uniform("output.W2", {H, cfg_.steps_out * cfg_.channels}, H, rng);
    output_.b2 = registry_.constant("output.b2", {cfg_.steps_out * cfg_.channels}, T(0));
  }

  // Layer structs alias registry tensors, so a copy would share parameters.
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelConfig& config() const { return cfg_; }
  ParameterRegistry<T>& registry() { return registry_; }
  const ParameterRegistry<T>& registry() const { return registry_; }
  const EmbeddingLayer<T>& embedding() const { return *embedding_; }
  const std::vector<TemporalBlockParams<T>>& temporal_blocks() const { return temporal_; }
  const std::vector<DstmLayerParams<T>>& dstm_layers() const { return dstm_; }
  const OutputLayerParams<T>& output_params() const { return output_; }

  bool has_temporal() const {
    return cfg_.variant != Variant::no_tt && cfg_.variant != Variant::no_tt_st;
  }
  bool has_dstm() const { return cfg_.variant != Variant::no_tt_st; }

  /// x: B x T x N x C (Z-score normalised); timestamps: B windows of T epoch seconds.
  /// Returns B x T x N x C in normalised units.
  Tensor<T> forward(const Tensor<T>& x, std::span<const std::int64_t> timestamps,
                    ForwardTrace<T>* trace = nullptr) const {
    if (x.rank() != 4 || x.dim(1) != cfg_.steps_in || x.dim(2) != cfg_.nodes || x.dim(3) != cfg_.channels) {
      throw DimensionError("forward: input " + to_string(x.shape()) + " does not match config (B," +
                           std::to_string(cfg_.steps_in) + "," + std::to_string(cfg_.nodes) + "," +
                           std::to_string(cfg_.channels) + ")");
    }
    if (timestamps.size() != x.dim(0) * cfg_.steps_in) {
      throw DimensionError("forward: expected " + std::to_string(x.dim(0) * cfg_.steps_in) + " timestamps");
    }
    auto z = embedding_->forward(x, timestamps).z;
    if (trace) { trace->calls.push_back("embedding"); trace->embedded = z; }

    auto run_temporal = [&](const Tensor<T>& in) {
      auto out = temporal_stack(in, temporal_);
      if (trace) { trace->calls.push_back("temporal"); trace->after_temporal = out; }
      return out;
    };
    auto run_dstm = [&](const Tensor<T>& in) {
      Tensor<T> out = in;
      for (const auto& layer : dstm_) out = dstm_block(out, embedding_->dyn_st(), layer);
      if (trace) { trace->calls.push_back("dstm"); trace->after_dstm = out; }
      return out;
    };

    switch (cfg_.variant) {
      case Variant::full:
      case Variant::static_graph:
      case Variant::no_nfl:
        z = run_dstm(run_temporal(z));
        break;
      case Variant::no_tt: z = run_dstm(z); break;
      case Variant::reverse: z = run_temporal(run_dstm(z)); break;
      case Variant::no_tt_st: break;
    }
    auto y = output_layer(z, output_, cfg_.channels);
    if (trace) trace->calls.push_back("output");
    return y;
  }

  /// Per-layer graphs and filter weights from the current parameters.
  std::vector<STGraphPair<T>> graphs() const {
    std::vector<STGraphPair<T>> out;
    NoGradGuard no_grad;
    for (const auto& layer : dstm_) out.push_back(build_graph_pair(embedding_->dyn_st(), layer));
    return out;
  }

 private:
  Tensor<T> tiled_static_graph() const {
    const std::size_t N = cfg_.nodes;
    std::vector<T> v(cfg_.steps_in * N * N);
    for (std::size_t t = 0; t < cfg_.steps_in; ++t)
      for (std::size_t k = 0; k < N * N; ++k) v[t * N * N + k] = static_cast<T>(cfg_.static_adjacency[k]);
    return Tensor<T>({cfg_.steps_in, N, N}, std::move(v));
  }

  ModelConfig cfg_;
  ParameterRegistry<T> registry_;
  std::optional<EmbeddingLayer<T>> embedding_;
  std::vector<TemporalBlockParams<T>> temporal_;
  std::vector<DstmLayerParams<T>> dstm_;
  OutputLayerParams<T> output_;
};

/// Builds the model for `cfg.variant` (full pipeline or one of the five ablations).
template <class T>
Model<T> build_variant(const ModelConfig& cfg, std::uint64_t seed = 0) {
  return Model<T>(cfg, seed);
}

}  // namespace dstgtn
