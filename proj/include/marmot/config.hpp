#pragma once

// Run configuration file: model and optimizer settings plus operational knobs
// for the command-line tool.

#include <algorithm>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "marmot/serialize.hpp"
#include "marmot/training.hpp"

namespace marmot {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  bool image_channels_set = false;  // otherwise taken from the data
  std::string vocab_path;           // resolved against the config file's directory
  std::optional<GridSpec> grid;
  SelectionMetric grid_metric = SelectionMetric::f1;
  std::vector<std::string> trace_ids;
  std::string output_dir;
  double threshold = 0.5;
  std::size_t ensemble = 1;
  std::size_t threads = 1;
};

inline const char* to_string(SelectionMetric m) {
  switch (m) {
    case SelectionMetric::f1: return "f1";
    case SelectionMetric::auc: return "auc";
    case SelectionMetric::accuracy: return "accuracy";
  }
  return "?";
}

inline SelectionMetric selection_metric_from_string(const std::string& s) {
  if (s == "f1") return SelectionMetric::f1;
  if (s == "auc") return SelectionMetric::auc;
  if (s == "accuracy") return SelectionMetric::accuracy;
  throw InputError("grid metric must be one of f1, auc, accuracy; got '" + s + "'");
}

namespace detail {

template <typename T>
std::vector<T> list_or_throw(const Json& j, const char* key) {
  if (!j.contains(key)) throw InputError(std::string("grid: missing '") + key + "'");
  if (!j[key].is_array() || j[key].empty())
    throw InputError(std::string("grid: '") + key + "' must be a non-empty array");
  try {
    return j[key].template get<std::vector<T>>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("grid: '") + key + "': " + e.what());
  }
}

}  // namespace detail

inline RunConfig run_config_from_json(const Json& j, const std::filesystem::path& base_dir = {}) {
  if (!j.is_object()) throw InputError("config must be a JSON object");
  if (j.contains("format")) detail::check_format(j, "marmot-config");
  static const std::vector<std::string> known{"format", "format_version", "model", "train", "vocab_path",
                                              "grid", "trace_ids", "output_dir", "threshold", "ensemble",
                                              "threads"};
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw InputError("config: unknown key '" + key + "'");

  RunConfig rc;
  try {
    if (j.contains("model")) {
      rc.model = model_config_from_json(j["model"]);
      rc.image_channels_set = j["model"].contains("image_channels");
    }
    if (j.contains("train")) rc.train = train_config_from_json(j["train"]);
    if (j.contains("vocab_path")) {
      std::filesystem::path p = j["vocab_path"].get<std::string>();
      if (p.is_relative()) p = base_dir / p;
      if (!std::filesystem::exists(p)) throw InputError("vocab_path does not exist: " + p.string());
      rc.vocab_path = p.string();
    }
    if (j.contains("grid")) {
      const auto& g = j["grid"];
      GridSpec cells;
      cells.learning_rates = detail::list_or_throw<double>(g, "learning_rates");
      cells.batch_sizes = detail::list_or_throw<std::size_t>(g, "batch_sizes");
      cells.epochs = detail::list_or_throw<std::size_t>(g, "epochs");
      rc.grid = cells;
      if (g.contains("metric")) rc.grid_metric = selection_metric_from_string(g["metric"].get<std::string>());
    }
    if (j.contains("trace_ids")) rc.trace_ids = j["trace_ids"].get<std::vector<std::string>>();
    if (j.contains("output_dir")) rc.output_dir = j["output_dir"].get<std::string>();
    if (j.contains("threshold")) rc.threshold = j["threshold"].get<double>();
    if (j.contains("ensemble")) rc.ensemble = j["ensemble"].get<std::size_t>();
    if (j.contains("threads")) rc.threads = j["threads"].get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("config: ") + e.what());
  }
  if (!(rc.threshold >= 0.0 && rc.threshold <= 1.0)) throw InputError("threshold must lie in [0, 1]");
  if (rc.ensemble == 0 || rc.ensemble % 2 == 0) throw InputError("ensemble size must be odd");
  if (rc.threads == 0) throw InputError("threads must be positive");
  rc.train.validate();
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  return run_config_from_json(read_json_file(path), std::filesystem::path(path).parent_path());
}

inline Json run_config_to_json(const RunConfig& rc) {
  Json j{{"format", "marmot-config"},
         {"format_version", kFormatVersion},
         {"model", model_config_to_json(rc.model)},
         {"train", train_config_to_json(rc.train)}};
  if (!rc.vocab_path.empty()) j["vocab_path"] = rc.vocab_path;
  if (rc.grid) {
    j["grid"] = Json{{"learning_rates", rc.grid->learning_rates},
                     {"batch_sizes", rc.grid->batch_sizes},
                     {"epochs", rc.grid->epochs},
                     {"metric", to_string(rc.grid_metric)}};
  }
  j["trace_ids"] = rc.trace_ids;
  j["output_dir"] = rc.output_dir;
  j["threshold"] = rc.threshold;
  j["ensemble"] = rc.ensemble;
  j["threads"] = rc.threads;
  return j;
}

}  // namespace marmot
