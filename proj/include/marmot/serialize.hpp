#pragma once

// JSON forms of configs, parameters, training reports and metrics. Every file
// carries "format" and "format_version" keys.

#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "marmot/dataset.hpp"
#include "marmot/metrics.hpp"
#include "marmot/tokenizer.hpp"
#include "marmot/training.hpp"

namespace marmot {

namespace detail {

template <typename T>
T get_or(const Json& j, const char* key, T fallback) {
  if (!j.contains(key) || j[key].is_null()) return fallback;
  try {
    return j[key].get<T>();
  } catch (const nlohmann::json::exception&) {
    throw InputError(std::string("config key '") + key + "' has the wrong type");
  }
}

inline Json optional_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

inline void check_format(const Json& j, const char* format) {
  if (!j.is_object() || !j.contains("format") || j["format"] != format) {
    throw InputError(std::string("expected a '") + format + "' file");
  }
  if (!j.contains("format_version") || j["format_version"] != kFormatVersion) {
    throw InputError(std::string("unsupported format_version in '") + format + "' file");
  }
}

}  // namespace detail

inline Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open '" + path + "'");
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError("'" + path + "' is not valid JSON: " + e.what());
  }
}

inline void write_json_file(const std::string& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write '" + path + "'");
  out << j.dump(1) << '\n';
}

inline const char* to_string(Pooling p) { return p == Pooling::cls ? "cls" : "mean"; }
inline const char* to_string(Variant v) { return v == Variant::full ? "full" : "text_only"; }

inline Json model_config_to_json(const ModelConfig& c) {
  return Json{{"d", c.d},
              {"heads", c.heads},
              {"encoder_layers", c.encoder_layers},
              {"decoder_layers", c.decoder_layers},
              {"d_ff", c.d_ff},
              {"vocab", c.vocab},
              {"max_positions", c.max_positions},
              {"k_hidden", c.k_hidden},
              {"image_channels", c.image_channels},
              {"pooling", to_string(c.pooling)},
              {"variant", to_string(c.variant)},
              {"init_std", c.init_std},
              {"layer_norm_eps", c.layer_norm_eps},
              {"token_type_noise_variance", c.token_type_noise_variance}};
}

inline ModelConfig model_config_from_json(const Json& j, ModelConfig c = {}) {
  using detail::get_or;
  c.d = get_or(j, "d", c.d);
  c.heads = get_or(j, "heads", c.heads);
  c.encoder_layers = get_or(j, "encoder_layers", c.encoder_layers);
  c.decoder_layers = get_or(j, "decoder_layers", c.decoder_layers);
  c.d_ff = get_or(j, "d_ff", c.d_ff);
  c.vocab = get_or(j, "vocab", c.vocab);
  c.max_positions = get_or(j, "max_positions", c.max_positions);
  c.k_hidden = get_or(j, "k_hidden", c.k_hidden);
  c.image_channels = get_or(j, "image_channels", c.image_channels);
  const auto pooling = get_or<std::string>(j, "pooling", to_string(c.pooling));
  if (pooling != "cls" && pooling != "mean") throw InputError("pooling must be 'cls' or 'mean'");
  c.pooling = pooling == "cls" ? Pooling::cls : Pooling::mean;
  const auto variant = get_or<std::string>(j, "variant", to_string(c.variant));
  if (variant != "full" && variant != "text_only")
    throw InputError("variant must be 'full' or 'text_only'");
  c.variant = variant == "full" ? Variant::full : Variant::text_only;
  c.init_std = get_or(j, "init_std", c.init_std);
  c.layer_norm_eps = get_or(j, "layer_norm_eps", c.layer_norm_eps);
  c.token_type_noise_variance = get_or(j, "token_type_noise_variance", c.token_type_noise_variance);
  return c;
}

inline Json train_config_to_json(const TrainConfig& c) {
  return Json{{"learning_rate", c.learning_rate},
              {"batch_size", c.batch_size},
              {"epochs", c.epochs},
              {"warmup_fraction", c.warmup_fraction},
              {"freeze_decoder_epochs", c.freeze_decoder_epochs},
              {"freeze_encoder_epochs", c.freeze_encoder_epochs},
              {"adam",
               {{"eps", c.adam.eps},
                {"beta1", c.adam.beta1},
                {"beta2", c.adam.beta2},
                {"weight_decay", c.adam.weight_decay}}},
              {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const Json& j, TrainConfig c = {}) {
  using detail::get_or;
  c.learning_rate = get_or(j, "learning_rate", c.learning_rate);
  c.batch_size = get_or(j, "batch_size", c.batch_size);
  c.epochs = get_or(j, "epochs", c.epochs);
  c.warmup_fraction = get_or(j, "warmup_fraction", c.warmup_fraction);
  c.freeze_decoder_epochs = get_or(j, "freeze_decoder_epochs", c.freeze_decoder_epochs);
  c.freeze_encoder_epochs = get_or(j, "freeze_encoder_epochs", c.freeze_encoder_epochs);
  c.seed = get_or(j, "seed", c.seed);
  if (j.contains("adam")) {
    const auto& a = j["adam"];
    c.adam.eps = get_or(a, "eps", c.adam.eps);
    c.adam.beta1 = get_or(a, "beta1", c.adam.beta1);
    c.adam.beta2 = get_or(a, "beta2", c.adam.beta2);
    c.adam.weight_decay = get_or(a, "weight_decay", c.adam.weight_decay);
  }
  return c;
}

/// Trained parameters plus the vocabulary they were trained with.
struct SavedModel {
  MarmotParams params;
  Vocabulary vocab;
};

inline Json params_to_json(const MarmotParams& params, const Vocabulary& vocab) {
  Json tensors = Json::array();
  params.for_each([&](const std::string& name, const Tensor& t, ParamGroup) {
    tensors.push_back(Json{{"name", name},
                           {"shape", t.shape()},
                           {"values", std::vector<double>(t.values().begin(), t.values().end())}});
  });
  return Json{{"format", "marmot-params"},
              {"format_version", kFormatVersion},
              {"model", model_config_to_json(params.config)},
              {"vocab", vocab.tokens()},
              {"tensors", std::move(tensors)}};
}

inline SavedModel params_from_json(const Json& j) {
  detail::check_format(j, "marmot-params");
  const auto cfg = model_config_from_json(j.at("model"));
  Vocabulary vocab(j.at("vocab").get<std::vector<std::string>>());
  if (vocab.size() != cfg.vocab) throw InputError("params vocabulary size does not match the model");
  Rng scratch(0);
  auto params = MarmotParams::random(cfg, scratch);
  std::map<std::string, const Json*> by_name;
  for (const auto& t : j.at("tensors")) by_name[t.at("name").get<std::string>()] = &t;
  params.for_each([&](const std::string& name, Tensor& t, ParamGroup) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw InputError("params file lacks tensor '" + name + "'");
    const auto shape = it->second->at("shape").get<Shape>();
    const auto values = it->second->at("values").get<std::vector<double>>();
    if (shape != t.shape() || values.size() != t.size()) {
      throw InputError("tensor '" + name + "' has shape " + shape_str(shape) + ", expected " +
                       shape_str(t.shape()));
    }
    std::copy(values.begin(), values.end(), t.mutable_values().begin());
  });
  if (by_name.size() != params.tensors().size()) throw InputError("params file has unknown tensors");
  return {std::move(params), std::move(vocab)};
}

inline void save_params(const std::string& path, const MarmotParams& params, const Vocabulary& vocab) {
  write_json_file(path, params_to_json(params, vocab));
}

inline SavedModel load_params(const std::string& path) { return params_from_json(read_json_file(path)); }

inline Json train_report_to_json(const TrainReport& r, const std::string& params_file = "") {
  Json epochs = Json::array();
  for (std::size_t i = 0; i < r.epochs.size(); ++i) {
    const auto& e = r.epochs[i];
    epochs.push_back(Json{{"epoch", i},
                          {"train_loss", e.train_loss},
                          {"train_accuracy", e.train_accuracy},
                          {"val_accuracy", detail::optional_json(e.val_accuracy)},
                          {"last_lr", e.last_lr}});
  }
  Json j{{"format", "marmot-train-report"},
         {"format_version", kFormatVersion},
         {"model", model_config_to_json(r.model)},
         {"train", train_config_to_json(r.config)},
         {"seed", r.config.seed},
         {"rng", Rng::algorithm()},
         {"epochs", std::move(epochs)},
         {"diverged", r.diverged},
         {"message", r.message}};
  if (!params_file.empty()) j["params_file"] = params_file;
  return j;
}

inline Json metrics_to_json(const MetricsReport& m) {
  using detail::optional_json;
  Json roc = Json::array();
  for (const auto& p : m.roc) roc.push_back(Json::array({p.fpr, p.tpr}));
  return Json{{"format", "marmot-metrics"},
              {"format_version", kFormatVersion},
              {"counts", {{"tp", m.counts.tp}, {"tn", m.counts.tn}, {"fp", m.counts.fp}, {"fn", m.counts.fn}}},
              {"accuracy", optional_json(m.accuracy)},
              {"precision_0", optional_json(m.precision0)},
              {"precision_1", optional_json(m.precision1)},
              {"recall_0", optional_json(m.recall0)},
              {"recall_1", optional_json(m.recall1)},
              {"f1_0", optional_json(m.f1_0)},
              {"f1_1", optional_json(m.f1_1)},
              {"macro_f1", optional_json(m.macro_f1)},
              {"micro_f1", optional_json(m.micro_f1)},
              {"auc", optional_json(m.auc)},
              {"roc", std::move(roc)},
              {"warnings", m.warnings}};
}

}  // namespace marmot
