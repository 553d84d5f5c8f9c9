#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "json.hpp"

#include "dstgtn/dataset.hpp"
#include "dstgtn/model.hpp"
#include "dstgtn/training.hpp"

namespace dstgtn {

struct AblationRow {
  Variant variant = Variant::full;
  std::size_t parameters = 0;
  bool structure_ok = false;
  std::string structure_note;
  std::size_t epochs = 0;
  std::size_t best_epoch = 0;
  MetricReport test;
};

/// Checks the registry against the closed-form count and the components the variant must omit.
template <class T>
bool check_variant_structure(const Model<T>& model, std::string* note = nullptr) {
  const auto& cfg = model.config();
  auto fail = [&](const std::string& why) {
    if (note) *note = why;
    return false;
  };
  auto any_prefix = [&](const std::string& needle) {
    for (const auto& p : model.registry().params())
      if (p.name.find(needle) != std::string::npos) return true;
    return false;
  };
  const auto expected = expected_parameter_count(cfg);
  if (model.registry().scalar_count() != expected)
    return fail("parameter count " + std::to_string(model.registry().scalar_count()) + " != " +
                std::to_string(expected));
  const bool temporal = any_prefix("temporal."), dstm = any_prefix("dstm."), dstgg = any_prefix(".dstgg."),
             nfl = any_prefix(".nfl.");
  switch (cfg.variant) {
    case Variant::full:
    case Variant::reverse:
      if (!temporal || !dstgg || !nfl) return fail("missing component");
      break;
    case Variant::no_tt:
      if (temporal || !dstm) return fail("temporal stack present");
      break;
    case Variant::no_tt_st:
      if (temporal || dstm) return fail("temporal or spatial stack present");
      break;
    case Variant::static_graph:
      if (dstgg || !nfl) return fail("graph generator present");
      break;
    case Variant::no_nfl:
      if (nfl || !dstgg) return fail("frequency learning present");
      break;
  }
  if (note) note->clear();
  return true;
}

/// Trains full + the five ablations with identical seed and budget; metrics are on the test split.
template <class T>
std::vector<AblationRow> run_ablation(const Dataset& ds, const ModelConfig& base, const TrainConfig& train_cfg,
                                      const std::vector<double>& static_adjacency) {
  const auto data = prepare_data(ds, base.steps_in, base.steps_out);
  std::vector<AblationRow> rows;
  for (auto v : kAllVariants) {
    ModelConfig cfg = base;
    cfg.variant = v;
    cfg.static_adjacency = v == Variant::static_graph ? static_adjacency : std::vector<double>{};
    Model<T> model(cfg, train_cfg.seed);
    AblationRow row;
    row.variant = v;
    row.parameters = model.registry().scalar_count();
    row.structure_ok = check_variant_structure(model, &row.structure_note);
    const auto result = train(model, data, train_cfg);
    if (result.diverged) throw NumericError(variant_name(v) + ": " + result.message);
    row.epochs = result.log.size();
    row.best_epoch = result.best_epoch;
    row.test = evaluate(model, ds, data.test, data.stats, train_cfg.batch_size);
    rows.push_back(row);
  }
  return rows;
}

inline std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::string out = "| variant | parameters | structure | epochs | best_epoch | test_MAE | test_RMSE | test_MAPE% |\n";
  out += "|---|---|---|---|---|---|---|---|\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "| %s | %zu | %s | %zu | %zu | %.4f | %.4f | %.3f |\n",
                  variant_name(r.variant).c_str(), r.parameters, r.structure_ok ? "ok" : "FAIL", r.epochs,
                  r.best_epoch, r.test.mae, r.test.rmse, r.test.mape_percent);
    out += buf;
  }
  return out;
}

inline nlohmann::json ablation_json(const std::vector<AblationRow>& rows) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows) {
    arr.push_back({{"variant", variant_name(r.variant)},
                   {"parameters", r.parameters},
                   {"structure_ok", r.structure_ok},
                   {"epochs", r.epochs},
                   {"best_epoch", r.best_epoch},
                   {"test", r.test}});
  }
  return arr;
}

}  // namespace dstgtn
