#pragma once

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dstgtn/dataset.hpp"
#include "dstgtn/errors.hpp"
#include "dstgtn/model.hpp"
#include "dstgtn/training.hpp"

namespace dstgtn {

// Checkpoint container (little-endian):
//   "DSTG" u32 version=1
//   u32 length, UTF-8 JSON (model config; an optional "zscore" {mean, std} object)
//   u32 parameter count, then per parameter:
//     u32 name length, UTF-8 name, u32 rank, rank x u64 extents, f32 values

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
std::string encode_checkpoint(const Model<T>& model, const std::optional<ZScoreStats>& stats = std::nullopt) {
  nlohmann::json meta = model.config();
  if (stats) meta["zscore"] = {{"mean", stats->mean}, {"std", stats->std}};
  const std::string text = meta.dump();
  detail::ByteWriter w;
  w.raw("DSTG", 4);
  w.put(kCheckpointVersion);
  w.put(static_cast<std::uint32_t>(text.size()));
  w.raw(text.data(), text.size());
  const auto& params = model.registry().params();
  w.put(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.put(static_cast<std::uint32_t>(p.name.size()));
    w.raw(p.name.data(), p.name.size());
    w.put(static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto e : p.tensor.shape()) w.put(static_cast<std::uint64_t>(e));
    for (auto v : p.tensor.vec()) w.put(static_cast<float>(v));
  }
  return w.bytes();
}

template <class T>
struct LoadedCheckpoint {
  std::unique_ptr<Model<T>> model;
  std::optional<ZScoreStats> stats;
};

/// Rebuilds the model from the stored config and overwrites every parameter,
/// validating names and extents against the rebuilt registry.
template <class T>
LoadedCheckpoint<T> decode_checkpoint(const std::string& bytes) {
  detail::ByteReader r(bytes);
  if (r.remaining() < 4 || bytes.compare(0, 4, "DSTG") != 0) throw FormatError("bad magic, expected DSTG", 0);
  r.str(4, "magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  const auto json_at = r.pos();
  const auto len = r.get<std::uint32_t>("config length");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.str(len, "config"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid config JSON: ") + e.what(), json_at);
  }
  ModelConfig cfg;
  from_json(meta, cfg);
  LoadedCheckpoint<T> out;
  if (meta.contains("zscore")) out.stats = ZScoreStats{meta["zscore"].at("mean").get<double>(), meta["zscore"].at("std").get<double>()};
  out.model = std::make_unique<Model<T>>(cfg);
  auto& params = out.model->registry().params();
  const auto count_at = r.pos();
  const auto count = r.get<std::uint32_t>("parameter count");
  if (count != params.size()) {
    throw FormatError("checkpoint has " + std::to_string(count) + " parameters, config implies " +
                          std::to_string(params.size()),
                      count_at);
  }
  for (auto& p : params) {
    const auto at = r.pos();
    const auto nlen = r.get<std::uint32_t>("parameter name");
    const auto name = r.str(nlen, "parameter name");
    if (name != p.name) throw FormatError("expected parameter '" + p.name + "', found '" + name + "'", at);
    const auto rank = r.get<std::uint32_t>("parameter rank");
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>("extent")));
    if (shape != p.tensor.shape()) {
      throw FormatError("parameter '" + name + "' has extents " + to_string(shape) + ", config implies " +
                            to_string(p.tensor.shape()),
                        at);
    }
    r.need(4 * static_cast<std::uint64_t>(p.tensor.size()), "parameter values");
    for (auto& v : p.tensor.mutable_values()) v = static_cast<T>(r.get<float>("parameter values"));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after parameters", r.pos());
  return out;
}

template <class T>
void save_checkpoint(const std::string& path, const Model<T>& model,
                     const std::optional<ZScoreStats>& stats = std::nullopt) {
  detail::write_file(path, encode_checkpoint(model, stats));
}

template <class T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
  return decode_checkpoint<T>(detail::read_file(path));
}

/// One JSON object per DSTM layer: {"layer", "A_st", "lambda_local", "lambda_global"}.
template <class T>
std::string graph_dump_jsonl(const Model<T>& model) {
  std::string out;
  const auto pairs = model.graphs();
  const std::size_t Tn = model.config().steps_in, N = model.config().nodes;
  for (std::size_t l = 0; l < pairs.size(); ++l) {
    nlohmann::json a = nlohmann::json::array(), ll = nlohmann::json::array(), lg = nlohmann::json::array();
    for (std::size_t t = 0; t < Tn; ++t) {
      nlohmann::json slice = nlohmann::json::array();
      for (std::size_t i = 0; i < N; ++i) {
        std::vector<double> row(N);
        for (std::size_t j = 0; j < N; ++j) row[j] = pairs[l].a_st.vec()[(t * N + i) * N + j];
        slice.push_back(row);
      }
      a.push_back(slice);
      std::vector<double> rl(N), rg(N);
      for (std::size_t i = 0; i < N; ++i) {
        rl[i] = pairs[l].lambda_local.vec()[t * N + i];
        rg[i] = pairs[l].lambda_global.vec()[t * N + i];
      }
      ll.push_back(rl);
      lg.push_back(rg);
    }
    nlohmann::json rec{{"layer", l}, {"A_st", a}, {"lambda_local", ll}, {"lambda_global", lg}};
    out += rec.dump();
    out += '\n';
  }
  return out;
}

}  // namespace dstgtn
