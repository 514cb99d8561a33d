// marmot: train, evaluate and inspect the multimodal classifier.
//
// Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include "marmot/config.hpp"
#include "marmot/trace.hpp"

namespace fs = std::filesystem;
using namespace marmot;

namespace {

/// Raised for bad input discovered after argument parsing.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config;
  std::string data;
  std::string val;
  std::string out;
  std::string model;
  std::optional<std::uint64_t> seed;
  std::optional<double> threshold;
  std::optional<std::size_t> ensemble;
  std::optional<std::size_t> threads;
  std::vector<std::string> ids;
  // gen-synth
  SynthOptions synth;
  bool sidecar = false;
};

RunConfig run_config(const Options& o) {
  RunConfig rc = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (o.seed) rc.train.seed = *o.seed;
  if (o.threshold) rc.threshold = *o.threshold;
  if (o.ensemble) rc.ensemble = *o.ensemble;
  if (o.threads) rc.threads = *o.threads;
  if (!o.out.empty()) rc.output_dir = o.out;
  if (!o.ids.empty()) rc.trace_ids = o.ids;
  if (!(rc.threshold >= 0.0 && rc.threshold <= 1.0)) throw UsageError("--threshold must lie in [0, 1]");
  if (rc.ensemble == 0 || rc.ensemble % 2 == 0) throw UsageError("--ensemble must be odd");
  return rc;
}

std::vector<MultimodalExample> load_examples(const std::string& path, const Vocabulary& vocab,
                                             std::size_t max_positions, bool need_labels) {
  auto loaded = load_dataset(path, vocab, max_positions);
  for (const auto& w : loaded.warnings) std::cerr << path << ": warning: " << w << '\n';
  if (!loaded.ok()) {
    for (const auto& e : loaded.errors) std::cerr << path << ": " << e << '\n';
    throw UsageError(path + ": " + std::to_string(loaded.errors.size()) + " invalid record(s)");
  }
  if (need_labels)
    for (const auto& ex : loaded.examples)
      if (!ex.label) throw UsageError(path + ": record '" + ex.id + "' has no label");
  return std::move(loaded.examples);
}

std::vector<int> labels_of(const std::vector<MultimodalExample>& data) {
  std::vector<int> y;
  for (const auto& ex : data) y.push_back(*ex.label);
  return y;
}

void ensure_dir(const std::string& dir) {
  if (dir.empty()) throw UsageError("no output directory; pass --out");
  fs::create_directories(dir);
}

/// A params file, or an ensemble manifest listing params files.
struct LoadedModel {
  std::vector<MarmotParams> members;
  Vocabulary vocab;
};

LoadedModel load_model(const std::string& path) {
  const Json j = read_json_file(path);
  LoadedModel m;
  if (j.value("format", "") == "marmot-ensemble") {
    detail::check_format(j, "marmot-ensemble");
    const fs::path base = fs::path(path).parent_path();
    for (const auto& member : j.at("members")) {
      auto saved = load_params((base / member.get<std::string>()).string());
      if (!m.members.empty() && !(saved.vocab == m.vocab))
        throw InputError("ensemble members use different vocabularies");
      m.vocab = saved.vocab;
      m.members.push_back(std::move(saved.params));
    }
    if (m.members.empty() || m.members.size() % 2 == 0)
      throw InputError("ensemble manifest must list an odd number of members");
  } else {
    auto saved = params_from_json(j);
    m.vocab = std::move(saved.vocab);
    m.members.push_back(std::move(saved.params));
  }
  return m;
}

struct Scored {
  std::vector<int> labels;
  std::vector<double> p_positive;
  std::vector<std::size_t> votes;
};

Scored score(const LoadedModel& m, const std::vector<MultimodalExample>& data, double threshold) {
  Scored s;
  for (const auto& ex : data) {
    if (m.members.size() == 1) {
      const auto p = predict(ex, m.members[0], threshold);
      s.labels.push_back(p.label);
      s.p_positive.push_back(p.p_positive);
    } else {
      const auto p = ensemble_predict(m.members, ex, threshold);
      s.labels.push_back(p.label);
      s.p_positive.push_back(p.mean_p_positive);
      s.votes.push_back(p.positive_votes);
    }
  }
  return s;
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write '" + path + "'");
  out << text;
}

int cmd_train(const Options& o) {
  RunConfig rc = run_config(o);
  ensure_dir(rc.output_dir);
  auto raw = load_records(o.data);
  if (!raw.ok()) {
    for (const auto& e : raw.errors) std::cerr << o.data << ": " << e << '\n';
    throw UsageError(o.data + ": invalid records");
  }
  const Vocabulary vocab =
      rc.vocab_path.empty() ? build_vocabulary(record_texts(raw.records)) : Vocabulary::load(rc.vocab_path);
  rc.model.vocab = vocab.size();
  if (!rc.image_channels_set)
    for (const auto& r : raw.records)
      if (r.image) {
        rc.model.image_channels = r.image->channels;
        break;
      }
  rc.model.validate();

  const auto train_set = load_examples(o.data, vocab, rc.model.max_positions, true);
  const auto val_set =
      o.val.empty() ? std::vector<MultimodalExample>{} : load_examples(o.val, vocab, rc.model.max_positions, true);

  TrainConfig cfg = rc.train;
  Rng rng(cfg.seed);
  const MarmotParams init = MarmotParams::random(rc.model, rng);

  if (rc.grid) {
    if (val_set.empty()) throw UsageError("grid search needs --val");
    const auto result = grid_search(*rc.grid, cfg, init, train_set, val_set, rc.grid_metric, rc.threads);
    Json cells = Json::array();
    for (const auto& c : result.cells)
      cells.push_back(Json{{"learning_rate", c.config.learning_rate},
                           {"batch_size", c.config.batch_size},
                           {"epochs", c.config.epochs},
                           {"score", c.score}});
    write_json_file((fs::path(rc.output_dir) / "grid.json").string(),
                    Json{{"format", "marmot-grid"},
                         {"format_version", kFormatVersion},
                         {"metric", to_string(rc.grid_metric)},
                         {"cells", std::move(cells)},
                         {"best", result.best}});
    cfg = result.best_config();
  }

  bool diverged = false;
  auto write_member = [&](const TrainReport& report, const fs::path& dir) {
    fs::create_directories(dir);
    save_params((dir / "params.json").string(), report.params, vocab);
    write_json_file((dir / "train_report.json").string(), train_report_to_json(report, "params.json"));
    if (report.diverged) {
      std::cerr << "training diverged: " << report.message << '\n';
      diverged = true;
    }
  };

  if (rc.ensemble == 1) {
    write_member(train(train_set, val_set, init, cfg), rc.output_dir);
  } else {
    const auto reports = deep_ensemble(rc.model, cfg, train_set, val_set, rc.ensemble, rc.threads);
    Json members = Json::array();
    for (std::size_t i = 0; i < reports.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "member-%02zu", i);
      write_member(reports[i], fs::path(rc.output_dir) / name);
      members.push_back(std::string(name) + "/params.json");
    }
    write_json_file((fs::path(rc.output_dir) / "ensemble.json").string(),
                    Json{{"format", "marmot-ensemble"},
                         {"format_version", kFormatVersion},
                         {"members", std::move(members)}});
  }
  return diverged ? 2 : 0;
}

int cmd_eval(const Options& o) {
  const RunConfig rc = run_config(o);
  const auto model = load_model(o.model);
  const auto data = load_examples(o.data, model.vocab, model.members[0].config.max_positions, true);
  const auto s = score(model, data, rc.threshold);
  const auto labels = labels_of(data);
  auto report = evaluate(s.p_positive, labels, rc.threshold);
  if (model.members.size() > 1) {
    // Class decisions come from the member vote; the ROC uses the mean probability.
    const auto c = confusion(s.labels, labels);
    auto voted = scores(c, c.negatives(), c.positives());
    voted.roc = std::move(report.roc);
    voted.auc = report.auc;
    for (auto& w : report.warnings)
      if (std::find(voted.warnings.begin(), voted.warnings.end(), w) == voted.warnings.end())
        voted.warnings.push_back(w);
    report = std::move(voted);
  }
  auto j = metrics_to_json(report);
  j["threshold"] = rc.threshold;
  j["examples"] = data.size();
  j["ensemble_members"] = model.members.size();
  write_text(o.out, j.dump(1) + "\n");
  return 0;
}

int cmd_predict(const Options& o) {
  const RunConfig rc = run_config(o);
  const auto model = load_model(o.model);
  const auto data = load_examples(o.data, model.vocab, model.members[0].config.max_positions, false);
  const auto s = score(model, data, rc.threshold);
  std::string text = Json{{"format", "marmot-predictions"}, {"format_version", kFormatVersion}}.dump() + "\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    Json line{{"id", data[i].id}, {"class", s.labels[i]}, {"p_positive", s.p_positive[i]}};
    if (!s.votes.empty()) line["positive_votes"] = s.votes[i];
    text += line.dump() + "\n";
  }
  write_text(o.out, text);
  return 0;
}

int cmd_export_attention(const Options& o) {
  const RunConfig rc = run_config(o);
  ensure_dir(rc.output_dir);
  if (rc.trace_ids.empty()) throw UsageError("no example ids; pass --ids or set trace_ids");
  const auto model = load_model(o.model);
  if (model.members.size() != 1) throw UsageError("export-attention takes a single params file");
  const auto data = load_examples(o.data, model.vocab, model.members[0].config.max_positions, false);
  std::set<std::string> wanted(rc.trace_ids.begin(), rc.trace_ids.end());
  for (const auto& id : wanted) {
    const auto it = std::find_if(data.begin(), data.end(), [&](const auto& ex) { return ex.id == id; });
    if (it == data.end()) throw UsageError("no example with id '" + id + "' in " + o.data);
  }
  for (const auto& ex : data) {
    if (!wanted.count(ex.id)) continue;
    for (const auto& t : trace_example(ex, model.members[0], model.vocab))
      write_json_file((fs::path(rc.output_dir) / t.file_name()).string(), trace_to_json(t));
  }
  return 0;
}

int cmd_gen_synth(const Options& o) {
  SynthOptions opt = o.synth;
  if (o.seed) opt.seed = *o.seed;
  if (o.out.empty()) throw UsageError("gen-synth needs --out");
  if (fs::path(o.out).has_parent_path()) fs::create_directories(fs::path(o.out).parent_path());
  write_records(o.out, gen_synth(opt), {o.sidecar});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MARMOT multimodal classifier"};
  app.require_subcommand(1);
  Options o;

  auto add_config = [&](CLI::App* c) {
    c->add_option("--config", o.config, "Run configuration (JSON)")->check(CLI::ExistingFile);
  };
  auto add_threshold = [&](CLI::App* c) {
    c->add_option("--threshold", o.threshold, "Class 1 iff p_positive >= threshold")->check(CLI::Range(0.0, 1.0));
  };

  auto* train_cmd = app.add_subcommand("train", "Train a model (or an ensemble) and write params + report");
  add_config(train_cmd);
  train_cmd->add_option("--data", o.data, "Training dataset")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--val", o.val, "Validation dataset")->check(CLI::ExistingFile);
  train_cmd->add_option("--out", o.out, "Output directory");
  train_cmd->add_option("--seed", o.seed, "Training seed");
  train_cmd->add_option("--ensemble", o.ensemble, "Number of ensemble members (odd)");
  train_cmd->add_option("--threads", o.threads, "Worker threads for grid search and ensembles");

  auto* eval_cmd = app.add_subcommand("eval", "Score a labelled dataset and write a metrics report");
  add_config(eval_cmd);
  eval_cmd->add_option("--model", o.model, "Params file or ensemble manifest")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", o.data, "Labelled dataset")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--out", o.out, "Metrics file (default stdout)");
  add_threshold(eval_cmd);

  auto* predict_cmd = app.add_subcommand("predict", "Write per-example class and p_positive");
  add_config(predict_cmd);
  predict_cmd->add_option("--model", o.model, "Params file or ensemble manifest")->required()->check(CLI::ExistingFile);
  predict_cmd->add_option("--data", o.data, "Dataset")->required()->check(CLI::ExistingFile);
  predict_cmd->add_option("--out", o.out, "Predictions file (default stdout)");
  add_threshold(predict_cmd);

  auto* attn_cmd = app.add_subcommand("export-attention", "Write attention traces for chosen examples");
  add_config(attn_cmd);
  attn_cmd->add_option("--model", o.model, "Params file")->required()->check(CLI::ExistingFile);
  attn_cmd->add_option("--data", o.data, "Dataset holding the examples")->required()->check(CLI::ExistingFile);
  attn_cmd->add_option("--ids", o.ids, "Example ids to trace")->delimiter(',');
  attn_cmd->add_option("--out", o.out, "Output directory");

  auto* synth_cmd = app.add_subcommand("gen-synth", "Write the synthetic XOR dataset");
  synth_cmd->add_option("--out", o.out, "Dataset file")->required();
  synth_cmd->add_option("--n", o.synth.n, "Number of examples (even)");
  synth_cmd->add_option("--seed", o.seed, "Generator seed");
  synth_cmd->add_option("--channels", o.synth.channels, "Feature-map channels");
  synth_cmd->add_option("--height", o.synth.height, "Feature-map height");
  synth_cmd->add_option("--width", o.synth.width, "Feature-map width");
  synth_cmd->add_option("--missing-fraction", o.synth.missing_fraction, "Fraction of text-only examples");
  synth_cmd->add_flag("--sidecar", o.sidecar, "Store feature maps in binary sidecar files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*train_cmd) return cmd_train(o);
    if (*eval_cmd) return cmd_eval(o);
    if (*predict_cmd) return cmd_predict(o);
    if (*attn_cmd) return cmd_export_attention(o);
    if (*synth_cmd) return cmd_gen_synth(o);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
