#pragma once

// Line-delimited JSON dataset files, binary feature-map sidecars, and the
// synthetic text x image interaction task.
//
// File layout (one JSON object per line):
//   {"format": "marmot-dataset", "format_version": 1}
//   {"id": "...", "text": "...", "captions": ["..."], "image_features": <C x H x W
//    nested array | "relative/path.bin">, "label": 0}

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "marmot/model.hpp"
#include "marmot/rng.hpp"
#include "marmot/tokenizer.hpp"

namespace marmot {

using Json = nlohmann::ordered_json;

inline constexpr int kFormatVersion = 1;

/// One raw dataset record, before tokenization.
struct DatasetRecord {
  std::string id;
  std::string text;
  std::vector<std::string> captions;
  std::optional<ImageFeatureMap> image;
  std::optional<int> label;

  bool operator==(const DatasetRecord&) const = default;
};

// ---------------------------------------------------------------------------
// Binary feature maps: "MRMTNSR1", u32 rank (=3), u64 C, H, W, then f64 values,
// all little-endian.

namespace detail {

template <typename T>
void write_le(std::ostream& out, T v) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
  unsigned char buf[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(T))) throw InputError("truncated tensor file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

inline constexpr char kTensorMagic[8] = {'M', 'R', 'M', 'T', 'N', 'S', 'R', '1'};

}  // namespace detail

inline void write_feature_map(const std::string& path, const ImageFeatureMap& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write tensor file '" + path + "'");
  out.write(detail::kTensorMagic, sizeof(detail::kTensorMagic));
  detail::write_le<std::uint32_t>(out, 3);
  detail::write_le<std::uint64_t>(out, img.channels);
  detail::write_le<std::uint64_t>(out, img.height);
  detail::write_le<std::uint64_t>(out, img.width);
  for (double v : img.values) detail::write_le<double>(out, v);
}

inline ImageFeatureMap read_feature_map(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open tensor file '" + path + "'");
  char magic[sizeof(detail::kTensorMagic)];
  if (!in.read(magic, sizeof(magic)) ||
      std::memcmp(magic, detail::kTensorMagic, sizeof(magic)) != 0) {
    throw InputError("'" + path + "' is not a feature-map file");
  }
  if (detail::read_le<std::uint32_t>(in) != 3) throw InputError("'" + path + "' is not rank 3");
  const auto c = detail::read_le<std::uint64_t>(in);
  const auto h = detail::read_le<std::uint64_t>(in);
  const auto w = detail::read_le<std::uint64_t>(in);
  if (c == 0 || h == 0 || w == 0 || c * h * w > (std::uint64_t{1} << 32)) {
    throw InputError("'" + path + "' has invalid dimensions");
  }
  std::vector<double> values(c * h * w);
  for (auto& v : values) v = detail::read_le<double>(in);
  return {c, h, w, std::move(values)};
}

// ---------------------------------------------------------------------------

inline Json feature_map_to_json(const ImageFeatureMap& img) {
  Json chans = Json::array();
  for (std::size_t c = 0; c < img.channels; ++c) {
    Json rows = Json::array();
    for (std::size_t y = 0; y < img.height; ++y) {
      Json row = Json::array();
      for (std::size_t x = 0; x < img.width; ++x) row.push_back(img.at(c, y, x));
      rows.push_back(std::move(row));
    }
    chans.push_back(std::move(rows));
  }
  return chans;
}

inline ImageFeatureMap feature_map_from_json(const Json& j) {
  if (!j.is_array() || j.empty()) throw InputError("image_features must be a nested C x H x W array");
  const std::size_t c = j.size();
  if (!j[0].is_array() || j[0].empty() || !j[0][0].is_array() || j[0][0].empty()) {
    throw InputError("image_features must be a nested C x H x W array");
  }
  const std::size_t h = j[0].size(), w = j[0][0].size();
  std::vector<double> values;
  values.reserve(c * h * w);
  for (const auto& ch : j) {
    if (!ch.is_array() || ch.size() != h) throw InputError("image_features rows are ragged");
    for (const auto& row : ch) {
      if (!row.is_array() || row.size() != w) throw InputError("image_features columns are ragged");
      for (const auto& v : row) {
        if (!v.is_number()) throw InputError("image_features holds a non-number");
        values.push_back(v.get<double>());
      }
    }
  }
  return {c, h, w, std::move(values)};
}

struct RecordWriteOptions {
  // Write feature maps to "<dataset stem>.<index>.bin" next to the dataset.
  bool sidecar_images = false;
};

inline void write_records(const std::string& path, const std::vector<DatasetRecord>& records,
                          const RecordWriteOptions& opts = {}) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write dataset file '" + path + "'");
  const std::filesystem::path p(path);
  out << Json{{"format", "marmot-dataset"}, {"format_version", kFormatVersion}}.dump() << '\n';
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    Json j;
    j["id"] = r.id;
    j["text"] = r.text;
    if (!r.captions.empty()) j["captions"] = r.captions;
    if (r.image) {
      if (opts.sidecar_images) {
        const std::string name = p.stem().string() + "." + std::to_string(i) + ".bin";
        write_feature_map((p.parent_path() / name).string(), *r.image);
        j["image_features"] = name;
      } else {
        j["image_features"] = feature_map_to_json(*r.image);
      }
    }
    if (r.label) j["label"] = *r.label;
    out << j.dump() << '\n';
  }
}

struct RecordLoadResult {
  std::vector<DatasetRecord> records;
  std::vector<std::string> errors;  // "line N: message"
  std::vector<std::string> warnings;

  bool ok() const { return errors.empty(); }
};

/// Parses and validates every record, collecting per-line errors instead of
/// stopping at the first one. Invalid records are dropped from `records`.
inline RecordLoadResult load_records(const std::string& path) {
  RecordLoadResult result;
  std::ifstream in(path);
  if (!in) throw InputError("cannot open dataset file '" + path + "'");
  const std::filesystem::path base = std::filesystem::path(path).parent_path();
  std::optional<std::array<std::size_t, 3>> dims;
  std::string line;
  std::size_t lineno = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fail = [&](const std::string& msg) {
      result.errors.push_back("line " + std::to_string(lineno) + ": " + msg);
    };
    Json j;
    try {
      j = Json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      fail(std::string("malformed JSON (") + e.what() + ")");
      continue;
    }
    if (!j.is_object()) {
      fail("record is not a JSON object");
      continue;
    }
    if (!header_seen && j.contains("format")) {
      header_seen = true;
      if (j["format"] != "marmot-dataset") fail("unexpected file format " + j["format"].dump());
      if (!j.contains("format_version") || j["format_version"] != kFormatVersion)
        fail("unsupported format_version");
      continue;
    }
    header_seen = true;
    try {
      DatasetRecord r;
      if (!j.contains("id") || !j["id"].is_string() || j["id"].get<std::string>().empty())
        throw InputError("missing string 'id'");
      r.id = j["id"].get<std::string>();
      if (j.contains("text") && !j["text"].is_null()) {
        if (!j["text"].is_string()) throw InputError("'text' must be a string");
        r.text = j["text"].get<std::string>();
      }
      if (j.contains("captions") && !j["captions"].is_null()) {
        if (!j["captions"].is_array()) throw InputError("'captions' must be a list of strings");
        for (const auto& c : j["captions"]) {
          if (!c.is_string()) throw InputError("'captions' must be a list of strings");
          r.captions.push_back(c.get<std::string>());
        }
      }
      if (j.contains("image_features") && !j["image_features"].is_null()) {
        const auto& f = j["image_features"];
        r.image = f.is_string() ? read_feature_map((base / f.get<std::string>()).string())
                                : feature_map_from_json(f);
      }
      if (j.contains("label") && !j["label"].is_null()) {
        if (!j["label"].is_number_integer() || (j["label"] != 0 && j["label"] != 1))
          throw InputError("'label' must be 0 or 1");
        r.label = j["label"].get<int>();
      }
      if (!r.captions.empty() && !r.image) throw InputError("captions given without image_features");
      if (r.image && r.captions.empty()) throw InputError("image_features given without captions");
      if (split_words(r.text).empty() && !r.image) throw InputError("record has neither text nor image");
      if (r.image) {
        const std::array<std::size_t, 3> d{r.image->channels, r.image->height, r.image->width};
        if (!dims) {
          dims = d;
        } else if (*dims != d) {
          throw InputError("image_features shape " + shape_str({d[0], d[1], d[2]}) +
                           " differs from earlier " + shape_str({(*dims)[0], (*dims)[1], (*dims)[2]}));
        }
      }
      result.records.push_back(std::move(r));
    } catch (const std::exception& e) {
      fail(e.what());
    }
  }
  if (result.records.empty() && result.errors.empty()) {
    result.warnings.push_back("dataset '" + path + "' contains no records");
  }
  return result;
}

/// Tokenizes one record. Captions that tokenize to nothing are an error.
inline MultimodalExample to_example(const DatasetRecord& r, const Vocabulary& vocab,
                                    std::size_t max_positions) {
  MultimodalExample ex;
  ex.id = r.id;
  ex.text = tokenize(r.text, vocab, max_positions);
  for (std::size_t i = 0; i < r.captions.size(); ++i) {
    auto ids = tokenize(r.captions[i], vocab, max_positions - 1);
    if (ids.empty()) throw InputError("caption " + std::to_string(i) + " has no words");
    ex.captions.push_back(std::move(ids));
  }
  ex.image = r.image;
  ex.label = r.label;
  return ex;
}

struct DatasetLoadResult {
  std::vector<MultimodalExample> examples;
  std::vector<std::string> errors;
  std::vector<std::string> warnings;

  bool ok() const { return errors.empty(); }
};

inline DatasetLoadResult tokenize_records(const std::vector<DatasetRecord>& records,
                                          const Vocabulary& vocab, std::size_t max_positions) {
  DatasetLoadResult out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    try {
      out.examples.push_back(to_example(records[i], vocab, max_positions));
    } catch (const std::exception& e) {
      out.errors.push_back("record '" + records[i].id + "': " + e.what());
    }
  }
  return out;
}

inline DatasetLoadResult load_dataset(const std::string& path, const Vocabulary& vocab,
                                      std::size_t max_positions) {
  auto raw = load_records(path);
  auto out = tokenize_records(raw.records, vocab, max_positions);
  out.errors.insert(out.errors.begin(), raw.errors.begin(), raw.errors.end());
  out.warnings.insert(out.warnings.begin(), raw.warnings.begin(), raw.warnings.end());
  return out;
}

inline std::vector<std::string> record_texts(const std::vector<DatasetRecord>& records) {
  std::vector<std::string> texts;
  for (const auto& r : records) {
    texts.push_back(r.text);
    texts.insert(texts.end(), r.captions.begin(), r.captions.end());
  }
  return texts;
}

// ---------------------------------------------------------------------------
// Synthetic interaction task.

struct SynthOptions {
  std::size_t n = 64;
  std::uint64_t seed = 0;
  std::size_t channels = 4, height = 2, width = 2;
  double missing_fraction = 0.25;
  double image_noise = 0.5;
};

/// XOR task. Bit a picks the text word ("alpha" = 1, "beta" = 0); bit b sets
/// the image mean (+1 / -1) and its caption ("bright scene" / "dark scene");
/// label = a XOR b. A text-only subset (missing_fraction of n, rounded down to
/// even) carries label = a. The four (a, b) cells of the multimodal subset are
/// filled round-robin, so each text word sees both labels equally often there.
inline std::vector<DatasetRecord> gen_synth(const SynthOptions& opt) {
  if (opt.n == 0 || opt.n % 2 != 0) {
    throw ContractError("gen_synth needs a positive even n, got " + std::to_string(opt.n));
  }
  if (!(opt.missing_fraction >= 0.0 && opt.missing_fraction < 1.0)) {
    throw ContractError("missing_fraction must lie in [0, 1)");
  }
  Rng rng(opt.seed);
  const std::size_t text_only =
      2 * static_cast<std::size_t>(opt.missing_fraction * static_cast<double>(opt.n) / 2.0);
  const std::size_t multimodal = opt.n - text_only;
  std::vector<DatasetRecord> records;
  records.reserve(opt.n);

  auto text_for = [](int a) { return std::string("the post mentions ") + (a ? "alpha" : "beta"); };

  for (std::size_t k = 0; k < multimodal; ++k) {
    const int a = static_cast<int>(k % 2);
    const int b = static_cast<int>((k / 2) % 2);
    DatasetRecord r;
    r.text = text_for(a);
    r.captions = {b ? "bright scene" : "dark scene"};
    std::vector<double> v(opt.channels * opt.height * opt.width);
    for (auto& x : v) x = (b ? 1.0 : -1.0) + rng.normal(0.0, opt.image_noise);
    r.image = ImageFeatureMap(opt.channels, opt.height, opt.width, std::move(v));
    r.label = a ^ b;
    records.push_back(std::move(r));
  }
  for (std::size_t k = 0; k < text_only; ++k) {
    const int a = static_cast<int>(k % 2);
    DatasetRecord r;
    r.text = text_for(a);
    r.label = a;
    records.push_back(std::move(r));
  }
  rng.shuffle(std::span<DatasetRecord>(records));
  for (std::size_t i = 0; i < records.size(); ++i) {
    std::ostringstream id;
    id << "synth-" << opt.seed << '-' << i;
    records[i].id = id.str();
  }
  return records;
}

}  // namespace marmot
