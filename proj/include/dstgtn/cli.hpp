#pragma once

// Command-line surface: synth, train, eval, forecast, gradcheck, ablate.
// Exit codes: 0 success, 1 usage/config, 2 data or file format, 3 numeric failure.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dstgtn/ablation.hpp"
#include "dstgtn/checkpoint.hpp"
#include "dstgtn/dataset.hpp"
#include "dstgtn/errors.hpp"
#include "dstgtn/gradcheck_suite.hpp"
#include "dstgtn/model.hpp"
#include "dstgtn/training.hpp"

namespace dstgtn {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumeric = 3 };

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

/// {"model": {...ModelConfig keys}, "train": {...TrainConfig keys}}; missing keys keep defaults.
inline RunConfig load_run_config(const std::string& path) {
  RunConfig rc;
  if (path.empty()) return rc;
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  if (j.contains("model")) from_json(j["model"], rc.model);
  if (j.contains("train")) from_json(j["train"], rc.train);
  return rc;
}

/// Directed edge list CSV: `from,to` rows of node indices (header optional).
inline std::vector<std::pair<std::size_t, std::size_t>> load_edge_list(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open adjacency file " + path);
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    std::size_t a = 0, b = 0;
    char comma = 0;
    std::istringstream ls(line);
    if (!(ls >> a >> comma >> b) || comma != ',') {
      if (edges.empty()) continue;  // header
      throw DataError("bad edge row '" + line + "' in " + path);
    }
    edges.emplace_back(a, b);
  }
  return edges;
}

namespace detail {

inline std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline void write_text(const std::string& path, const std::string& text) { write_file(path, text); }

/// Fills dataset-dependent model fields and the static graph when the variant needs one.
inline void bind_to_dataset(ModelConfig& cfg, const Dataset& ds, const std::string& adjacency_path) {
  cfg.nodes = ds.nodes;
  cfg.channels = ds.channels;
  cfg.interval_seconds = ds.interval_seconds;
  if (cfg.variant != Variant::static_graph) {
    cfg.static_adjacency.clear();
    return;
  }
  if (!cfg.static_adjacency.empty()) return;
  if (!adjacency_path.empty()) {
    const auto edges = load_edge_list(adjacency_path);
    cfg.static_adjacency = static_adjacency_from_edges(ds.nodes, edges);
  } else if (!ds.coordinates.empty()) {
    cfg.static_adjacency = static_adjacency_from_coordinates(ds.coordinates);
  } else {
    throw DataError("static_graph variant needs node coordinates in the dataset or --adjacency");
  }
}

inline nlohmann::json metrics_json(const MetricReport& m, const std::string& split) {
  nlohmann::json j = m;
  j["split"] = split;
  return j;
}

}  // namespace detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Dynamic spatio-temporal graph transformer for traffic forecasting", "dstgtn"};
  app.require_subcommand(1);

  // synth
  SyntheticConfig synth_cfg;
  std::string synth_out, synth_graph_out;
  auto* synth = app.add_subcommand("synth", "Write a seeded synthetic diffusion-plus-sinusoid dataset");
  synth->add_option("--out", synth_out, "Output STTS file")->required();
  synth->add_option("--nodes", synth_cfg.nodes, "Number of nodes")->capture_default_str();
  synth->add_option("--steps", synth_cfg.steps, "Number of time steps")->capture_default_str();
  synth->add_option("--seed", synth_cfg.seed, "Random seed")->capture_default_str();
  synth->add_option("--alpha", synth_cfg.alpha, "Diffusion weight")->capture_default_str();
  synth->add_option("--sigma", synth_cfg.sigma, "Noise standard deviation")->capture_default_str();
  synth->add_option("--neighbors", synth_cfg.neighbors, "Random in-neighbours per node (0 = distance kernel)")
      ->capture_default_str();
  synth->add_option("--lag", synth_cfg.lag, "Steps for a value to travel along an edge")->capture_default_str();
  synth->add_option("--kernel-width", synth_cfg.kernel_width, "Gaussian kernel width when --neighbors 0")
      ->capture_default_str();
  synth->add_option("--interval", synth_cfg.interval_seconds, "Sampling interval in seconds")->capture_default_str();
  synth->add_option("--graph-out", synth_graph_out, "Write the hidden graph as CSV");

  // shared flags
  std::string data_path, config_path, variant_name_opt, adjacency_path, checkpoint_path;
  std::optional<std::uint64_t> seed_opt;
  bool dump_graphs = false, zero_is_missing = false;
  std::string graphs_out;
  auto add_data = [&](CLI::App* sub) {
    sub->add_option("--data", data_path, "Dataset (STTS, or CSV by extension)")->required();
    sub->add_flag("--zero-is-missing", zero_is_missing, "Treat zeros in CSV input as missing");
  };
  auto add_graph_dump = [&](CLI::App* sub) {
    sub->add_flag("--dump-graphs", dump_graphs, "Write per-layer A_st and lambda as JSON lines");
    sub->add_option("--graphs-out", graphs_out, "Graph dump path (default graphs.jsonl)");
  };

  // train
  std::string train_out, log_path;
  std::optional<std::size_t> epochs_opt;
  bool log_timing = false;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write the best checkpoint");
  add_data(train_cmd);
  train_cmd->add_option("--config", config_path, "JSON config {model, train}");
  train_cmd->add_option("--seed", seed_opt, "Seed for initialisation and shuffling");
  train_cmd->add_option("--variant", variant_name_opt, "full|no_tt|no_tt_st|reverse|static_graph|no_nfl");
  train_cmd->add_option("--adjacency", adjacency_path, "Edge-list CSV for the static_graph variant");
  train_cmd->add_option("--out", train_out, "Checkpoint path")->required();
  train_cmd->add_option("--log", log_path, "Training log (JSON lines)");
  train_cmd->add_option("--epochs", epochs_opt, "Override max_epochs");
  train_cmd->add_flag("--log-timing", log_timing, "Record wall-clock seconds per epoch in the log");
  add_graph_dump(train_cmd);

  // eval
  std::string split_name = "test", eval_out;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on one split");
  add_data(eval_cmd);
  eval_cmd->add_option("--checkpoint", checkpoint_path, "Checkpoint path")->required();
  eval_cmd->add_option("--split", split_name, "train|val|test")->capture_default_str();
  eval_cmd->add_option("--out", eval_out, "Also write the metrics JSON here");
  add_graph_dump(eval_cmd);

  // forecast
  std::size_t offset = 0;
  std::string forecast_out;
  auto* forecast_cmd = app.add_subcommand("forecast", "Forecast one window and write predictions CSV");
  add_data(forecast_cmd);
  forecast_cmd->add_option("--checkpoint", checkpoint_path, "Checkpoint path")->required();
  forecast_cmd->add_option("--offset", offset, "First time step of the input window")->required();
  forecast_cmd->add_option("--out", forecast_out, "CSV path (default stdout)");
  add_graph_dump(forecast_cmd);

  // gradcheck
  std::uint64_t gradcheck_seed = 1;
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient checks on micro configs");
  gradcheck_cmd->add_option("--seed", gradcheck_seed, "Seed")->capture_default_str();

  // ablate
  std::string ablate_out;
  auto* ablate_cmd = app.add_subcommand("ablate", "Train full + five ablation variants and compare test metrics");
  add_data(ablate_cmd);
  ablate_cmd->add_option("--config", config_path, "JSON config {model, train}");
  ablate_cmd->add_option("--seed", seed_opt, "Seed");
  ablate_cmd->add_option("--epochs", epochs_opt, "Override max_epochs");
  ablate_cmd->add_option("--adjacency", adjacency_path, "Edge-list CSV for the static_graph variant");
  ablate_cmd->add_option("--out", ablate_out, "Also write the table as JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  }

  auto graph_path = [&] { return graphs_out.empty() ? std::string("graphs.jsonl") : graphs_out; };

  try {
    if (*synth) {
      const auto data = generate_synthetic(synth_cfg);
      save_stts(synth_out, data.dataset);
      if (!synth_graph_out.empty()) {
        std::ostringstream g;
        for (std::size_t i = 0; i < synth_cfg.nodes; ++i) {
          for (std::size_t j = 0; j < synth_cfg.nodes; ++j)
            g << (j ? "," : "") << data.graph[i * synth_cfg.nodes + j];
          g << "\n";
        }
        detail::write_text(synth_graph_out, g.str());
      }
      out << nlohmann::json{{"out", synth_out}, {"steps", synth_cfg.steps}, {"nodes", synth_cfg.nodes}}.dump() << "\n";
      return kExitOk;
    }

    if (*gradcheck_cmd) {
      const auto cases = run_gradcheck_suite(gradcheck_seed);
      bool ok = true;
      for (const auto& c : cases) {
        out << (c.passed ? "PASS " : "FAIL ") << c.name << "  max_rel_error=" << c.max_rel_error << "\n";
        ok = ok && c.passed;
      }
      out << (ok ? "all gradient checks passed" : "gradient check FAILED") << " (tolerance "
          << kGradCheckTolerance << ")\n";
      return ok ? kExitOk : kExitNumeric;
    }

    const Dataset ds = load_dataset(data_path, zero_is_missing);

    if (*train_cmd || *ablate_cmd) {
      auto rc = load_run_config(config_path);
      if (seed_opt) rc.train.seed = *seed_opt;
      if (epochs_opt) {
        rc.train.max_epochs = *epochs_opt;
        rc.train.patience = std::min(rc.train.patience, rc.train.max_epochs);
      }
      rc.train.record_timing = log_timing;
      if (!variant_name_opt.empty()) rc.model.variant = parse_variant(variant_name_opt);

      if (*ablate_cmd) {
        detail::bind_to_dataset(rc.model, ds, "");
        std::vector<double> static_adj;
        {
          ModelConfig probe = rc.model;
          probe.variant = Variant::static_graph;
          detail::bind_to_dataset(probe, ds, adjacency_path);
          static_adj = probe.static_adjacency;
        }
        const auto rows = run_ablation<float>(ds, rc.model, rc.train, static_adj);
        out << format_ablation_table(rows);
        if (!ablate_out.empty()) detail::write_text(ablate_out, ablation_json(rows).dump(2) + "\n");
        return kExitOk;
      }

      detail::bind_to_dataset(rc.model, ds, adjacency_path);
      const auto prepared = prepare_data(ds, rc.model.steps_in, rc.model.steps_out);
      Model<float> model(rc.model, rc.train.seed);
      const auto result = train(model, prepared, rc.train);
      if (!log_path.empty()) {
        std::string log;
        for (const auto& rec : result.log) log += to_jsonl(rec) + "\n";
        detail::write_text(log_path, log);
      }
      if (result.diverged) {
        err << "error: " << result.message << "\n";
        return kExitNumeric;
      }
      save_checkpoint(train_out, model, prepared.stats);
      if (dump_graphs) detail::write_text(graph_path(), graph_dump_jsonl(model));
      out << nlohmann::json{{"checkpoint", train_out},
                            {"epochs", result.log.size()},
                            {"best_epoch", result.best_epoch},
                            {"best_val_mae", result.best_val_mae},
                            {"parameters", model.registry().scalar_count()}}
                 .dump()
          << "\n";
      return kExitOk;
    }

    auto loaded = load_checkpoint<float>(checkpoint_path);
    const auto& model = *loaded.model;
    if (model.config().nodes != ds.nodes || model.config().channels != ds.channels) {
      throw DataError("checkpoint expects N=" + std::to_string(model.config().nodes) + ", C=" +
                      std::to_string(model.config().channels) + "; dataset has N=" + std::to_string(ds.nodes) +
                      ", C=" + std::to_string(ds.channels));
    }
    const auto& cfg = model.config();
    const auto prepared = prepare_data(ds, cfg.steps_in, cfg.steps_out);
    const ZScoreStats stats = loaded.stats.value_or(prepared.stats);
    if (dump_graphs) detail::write_text(graph_path(), graph_dump_jsonl(model));

    if (*eval_cmd) {
      const WindowSet* windows = split_name == "train" ? &prepared.train
                                 : split_name == "val" ? &prepared.val
                                 : split_name == "test" ? &prepared.test
                                                        : nullptr;
      if (!windows) throw ConfigError("unknown split '" + split_name + "'");
      const auto report = evaluate(model, ds, *windows, stats);
      const auto j = detail::metrics_json(report, split_name);
      out << j.dump() << "\n";
      if (!eval_out.empty()) detail::write_text(eval_out, j.dump(2) + "\n");
      return kExitOk;
    }

    if (*forecast_cmd) {
      if (offset + cfg.steps_in + cfg.steps_out > ds.steps) {
        throw DataError("offset " + std::to_string(offset) + " leaves no full window in " +
                        std::to_string(ds.steps) + " steps");
      }
      WindowSet one{{offset, offset + cfg.steps_in + cfg.steps_out}, cfg.steps_in, cfg.steps_out, {offset}};
      NoGradGuard no_grad;
      const std::vector<std::size_t> which{0};
      const auto batch = make_batch<float>(ds, stats, one, which);
      const auto pred = forecast(model, batch, stats);
      std::ostringstream csv;
      csv << "timestamp,node_id,horizon,prediction,truth,mask\n";
      for (std::size_t h = 0; h < cfg.steps_out; ++h)
        for (std::size_t n = 0; n < ds.nodes; ++n)
          for (std::size_t c = 0; c < ds.channels; ++c) {
            const std::size_t src = ds.index(offset + cfg.steps_in + h, n, c);
            const std::size_t k = (h * ds.nodes + n) * ds.channels + c;
            csv << ds.timestamp(offset + cfg.steps_in + h) << ',' << ds.node_ids[n] << ',' << (h + 1) << ','
                << detail::fmt(pred.vec()[k], 6) << ',' << detail::fmt(ds.values[src], 6) << ','
                << static_cast<int>(ds.mask[src]) << "\n";
          }
      if (forecast_out.empty()) out << csv.str();
      else detail::write_text(forecast_out, csv.str());
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
  return kExitUsage;
}

inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"dstgtn"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace dstgtn
