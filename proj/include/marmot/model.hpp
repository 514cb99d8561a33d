#pragma once

// The multimodal classifier: image-feature projection, modality translation
// (captions cross-attending to image cells), segment assembly, masked fusion
// encoder, pooling, and a two-layer classifier head.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "marmot/transformer.hpp"

namespace marmot {

/// Reserved vocabulary ids, identical for every vocabulary.
namespace special {
inline constexpr std::size_t pad = 0;
inline constexpr std::size_t unk = 1;
inline constexpr std::size_t cls = 2;
inline constexpr std::size_t sep = 3;
inline constexpr std::size_t mask = 4;
inline constexpr std::size_t count = 5;
}  // namespace special

/// C x H x W activation map, channel-major.
struct ImageFeatureMap {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<double> values;

  ImageFeatureMap() = default;
  ImageFeatureMap(std::size_t c, std::size_t h, std::size_t w, std::vector<double> v)
      : channels(c), height(h), width(w), values(std::move(v)) {
    if (c == 0 || h == 0 || w == 0) throw ShapeError("image feature map dimensions must be >= 1");
    if (values.size() != c * h * w) {
      throw ShapeError("image feature map " + shape_str({c, h, w}) + " needs " +
                       std::to_string(c * h * w) + " values, got " + std::to_string(values.size()));
    }
  }

  static ImageFeatureMap zeros(std::size_t c, std::size_t h, std::size_t w) {
    return {c, h, w, std::vector<double>(c * h * w, 0.0)};
  }

  std::size_t cells() const { return height * width; }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return values[(c * height + y) * width + x];
  }

  bool operator==(const ImageFeatureMap&) const = default;
};

struct MultimodalExample {
  std::string id;
  std::vector<std::size_t> text;
  std::vector<std::vector<std::size_t>> captions;
  std::optional<ImageFeatureMap> image;
  std::optional<int> label;

  bool has_image() const { return image.has_value(); }
  bool has_text() const { return !text.empty(); }

  bool operator==(const MultimodalExample&) const = default;
};

enum class Pooling { cls, mean };

// text_only masks the caption and image segments of every example.
enum class Variant { full, text_only };

struct ModelConfig {
  std::size_t d = 32;
  std::size_t heads = 2;
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 1;
  std::size_t d_ff = 0;      // 0 -> 4d
  std::size_t vocab = 64;
  std::size_t max_positions = 64;
  std::size_t k_hidden = 0;  // 0 -> d/2
  std::size_t image_channels = 4;
  Pooling pooling = Pooling::mean;
  Variant variant = Variant::full;
  double init_std = 0.02;
  double layer_norm_eps = 1e-12;
  double token_type_noise_variance = 1e-4;

  std::size_t ff_width() const { return d_ff ? d_ff : 4 * d; }
  std::size_t hidden_width() const { return k_hidden ? k_hidden : std::max<std::size_t>(1, d / 2); }

  void validate() const {
    if (d == 0 || heads == 0 || d % heads != 0) {
      throw ContractError("model width " + std::to_string(d) + " must be a positive multiple of " +
                          std::to_string(heads) + " heads");
    }
    if (vocab <= special::count) throw ContractError("vocabulary must extend past the reserved ids");
    if (max_positions < 2) throw ContractError("max_positions must be at least 2");
    if (image_channels == 0) throw ContractError("image_channels must be positive");
    if (!(layer_norm_eps > 0.0)) throw ContractError("layer_norm_eps must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Optimizer phases group parameters by sub-network.
enum class ParamGroup { image_path, translation_decoder, fusion, head };

inline const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::image_path: return "image_path";
    case ParamGroup::translation_decoder: return "translation_decoder";
    case ParamGroup::fusion: return "fusion";
    case ParamGroup::head: return "head";
  }
  return "?";
}

/// t3 = (t1 + t2) / 2 + noise, noise ~ N(0, noise_variance) per dimension.
inline std::vector<double> init_third_token_type(std::span<const double> t1,
                                                 std::span<const double> t2, Rng& rng,
                                                 double noise_variance = 1e-4) {
  if (t1.size() != t2.size()) {
    throw ShapeError("init_third_token_type: widths " + std::to_string(t1.size()) + " and " +
                     std::to_string(t2.size()) + " differ");
  }
  const double sd = std::sqrt(noise_variance);
  std::vector<double> t3(t1.size());
  for (std::size_t i = 0; i < t1.size(); ++i) {
    const double noise = noise_variance > 0.0 ? rng.normal(0.0, sd) : 0.0;
    t3[i] = 0.5 * (t1[i] + t2[i]) + noise;
  }
  return t3;
}

struct MarmotParams {
  ModelConfig config;
  Tensor proj_w;  // C x d, the 1x1 convolution
  Tensor proj_b;  // d
  std::vector<DecoderBlockParams> decoder;
  std::vector<EncoderBlockParams> encoder;
  EmbeddingTables tables;
  Tensor cls_embedding;  // d
  Tensor head_w1, head_b1, head_w2, head_b2;

  static MarmotParams random(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    const double sd = cfg.init_std;
    MarmotParams p;
    p.config = cfg;
    p.proj_w = Tensor::randn({cfg.image_channels, cfg.d}, rng, sd, true);
    p.proj_b = Tensor::zeros({cfg.d}, true);
    for (std::size_t i = 0; i < cfg.decoder_layers; ++i)
      p.decoder.push_back(
          DecoderBlockParams::random(cfg.d, cfg.heads, cfg.ff_width(), rng, sd, cfg.layer_norm_eps));
    for (std::size_t i = 0; i < cfg.encoder_layers; ++i)
      p.encoder.push_back(
          EncoderBlockParams::random(cfg.d, cfg.heads, cfg.ff_width(), rng, sd, cfg.layer_norm_eps));
    p.tables = EmbeddingTables::random(cfg.vocab, cfg.max_positions, cfg.d, rng, sd);
    {
      auto types = p.tables.token_type.mutable_values();
      const std::size_t d = cfg.d;
      auto t3 = init_third_token_type(types.subspan(0, d), types.subspan(d, d), rng,
                                      cfg.token_type_noise_variance);
      std::copy(t3.begin(), t3.end(), types.begin() + 2 * d);
    }
    p.cls_embedding = Tensor::randn({cfg.d}, rng, sd, true);
    const std::size_t k = cfg.hidden_width();
    p.head_w1 = Tensor::randn({cfg.d, k}, rng, sd, true);
    p.head_b1 = Tensor::zeros({k}, true);
    p.head_w2 = Tensor::randn({k, 2}, rng, sd, true);
    p.head_b2 = Tensor::zeros({2}, true);
    return p;
  }

  /// Visits every learnable tensor as f(name, tensor, group) in a fixed order.
  template <typename F>
  void for_each(F&& f) {
    f(std::string("proj.w"), proj_w, ParamGroup::image_path);
    f(std::string("proj.b"), proj_b, ParamGroup::image_path);
    for (std::size_t i = 0; i < decoder.size(); ++i)
      decoder[i].for_each("decoder" + std::to_string(i),
                          [&](const std::string& n, Tensor& t) { f(n, t, ParamGroup::translation_decoder); });
    for (std::size_t i = 0; i < encoder.size(); ++i)
      encoder[i].for_each("encoder" + std::to_string(i),
                          [&](const std::string& n, Tensor& t) { f(n, t, ParamGroup::fusion); });
    tables.for_each("embeddings", [&](const std::string& n, Tensor& t) { f(n, t, ParamGroup::fusion); });
    f(std::string("embeddings.cls"), cls_embedding, ParamGroup::fusion);
    f(std::string("head.w1"), head_w1, ParamGroup::head);
    f(std::string("head.b1"), head_b1, ParamGroup::head);
    f(std::string("head.w2"), head_w2, ParamGroup::head);
    f(std::string("head.b2"), head_b2, ParamGroup::head);
  }

  template <typename F>
  void for_each(F&& f) const {
    const_cast<MarmotParams*>(this)->for_each(
        [&](const std::string& n, Tensor& t, ParamGroup g) { f(n, static_cast<const Tensor&>(t), g); });
  }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    for_each([&](const std::string&, const Tensor& t, ParamGroup) { out.push_back(t); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor& t, ParamGroup) { n += t.size(); });
    return n;
  }

  void zero_grads() {
    for_each([](const std::string&, Tensor& t, ParamGroup) { t.zero_grad(); });
  }

  /// Deep copy; the clone shares no storage with this object.
  MarmotParams clone() const {
    MarmotParams copy = *this;
    copy.for_each([](const std::string&, Tensor& t, ParamGroup) { t = t.clone(); });
    return copy;
  }
};

/// Projects each spatial cell's channel vector to width d and flattens the
/// grid row-major: output row y * W + x holds cell (y, x).
inline Tensor project_and_flatten(const ImageFeatureMap& img, const Tensor& proj_w,
                                  const Tensor& proj_b) {
  if (proj_w.dim(0) != img.channels) {
    throw ShapeError("project_and_flatten: projection expects " + std::to_string(proj_w.dim(0)) +
                     " channels, image has " + std::to_string(img.channels));
  }
  const std::size_t cells = img.cells();
  std::vector<double> rows(cells * img.channels);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t cell = 0; cell < cells; ++cell)
      rows[cell * img.channels + c] = img.values[c * cells + cell];
  return add_rowwise(matmul(Tensor({cells, img.channels}, std::move(rows)), proj_w), proj_b);
}

inline Tensor project_and_flatten(const ImageFeatureMap& img, const MarmotParams& p) {
  return project_and_flatten(img, p.proj_w, p.proj_b);
}

/// Captions joined by [SEP]; positions restart at 0 after each separator.
struct CaptionSequence {
  std::vector<std::size_t> ids;
  std::vector<std::size_t> positions;
};

inline CaptionSequence join_captions(const std::vector<std::vector<std::size_t>>& captions,
                                     std::size_t max_positions) {
  CaptionSequence seq;
  for (std::size_t c = 0; c < captions.size(); ++c) {
    if (c > 0 && !seq.ids.empty()) {
      seq.ids.push_back(special::sep);
      seq.positions.push_back(seq.positions.back() + 1);
    }
    const std::size_t len = std::min(captions[c].size(), max_positions - 1);
    for (std::size_t i = 0; i < len; ++i) {
      seq.ids.push_back(captions[c][i]);
      seq.positions.push_back(i);
    }
  }
  return seq;
}

inline Tensor embed_segment(std::span<const std::size_t> ids, std::span<const std::size_t> positions,
                            TokenType type, const EmbeddingTables& tables) {
  const std::vector<std::size_t> types(ids.size(), static_cast<std::size_t>(type));
  return embed(ids, types, positions, tables);
}

/// Caption tokens are the decoder queries; every decoder block cross-attends
/// to the projected image rows. One output row per caption token.
inline Tensor modality_translation(const std::vector<std::vector<std::size_t>>& captions,
                                   const Tensor& img_rows, const MarmotParams& p,
                                   std::vector<BlockTrace>* traces = nullptr) {
  const auto seq = join_captions(captions, p.config.max_positions);
  if (seq.ids.empty()) throw ContractError("modality_translation: no caption tokens");
  auto x = embed_segment(seq.ids, seq.positions, TokenType::caption, p.tables);
  const std::size_t n = seq.ids.size();
  return decoder_stack(p.decoder, x, img_rows, AttentionMask::all(n, n),
                       AttentionMask::all(n, img_rows.dim(0)), traces);
}

enum class SegmentTag : std::uint8_t { cls, text, caption, image };

/// Fusion-encoder input: [CLS | text | captions | translated image].
struct SegmentedSequence {
  Tensor embeddings;  // n x d
  std::vector<SegmentTag> tags;
  std::vector<std::size_t> token_types;
  std::vector<std::size_t> positions;
  std::vector<std::uint8_t> present;
  std::vector<std::size_t> token_ids;  // vocabulary id, or the row index for image rows

  std::size_t size() const { return tags.size(); }
};

inline AttentionMask build_fusion_mask(const SegmentedSequence& seq) {
  return build_fusion_mask(std::span<const std::uint8_t>(seq.present));
}

/// Stand-in content for a missing image. It is always masked out, so any
/// values work; the defaults are an all-zero 1x1 map and a single [PAD].
struct MissingImageFill {
  std::optional<ImageFeatureMap> image;
  std::vector<std::size_t> caption{special::pad};
};

/// The caption list fed to translation: the real captions, or the stand-in
/// caption when the image is missing.
inline std::vector<std::vector<std::size_t>> effective_captions(
    const MultimodalExample& ex, const MissingImageFill* fill = nullptr) {
  if (ex.has_image() && !ex.captions.empty()) return ex.captions;
  if (fill && !fill->caption.empty()) return {fill->caption};
  return {{special::pad}};
}

/// Builds the fused sequence. Without an image the caption and image segments
/// hold stand-in content and are marked absent; empty text becomes one absent
/// [PAD]. Translated-image rows get the image token type but no position row.
inline SegmentedSequence assemble(const MultimodalExample& ex, const std::optional<Tensor>& translated,
                                  const EmbeddingTables& tables, const Tensor& cls_embedding,
                                  const MissingImageFill* fill = nullptr) {
  if (!ex.has_text() && !ex.has_image()) {
    throw ContractError("example '" + ex.id + "' has neither text nor image");
  }
  const std::size_t d = tables.model_dim();
  SegmentedSequence seq;
  std::vector<Tensor> parts;

  // [CLS]: its own vector plus position 0 and token type 0.
  {
    const std::size_t zero = 0;
    auto cls_row = add(add(reshape(cls_embedding, {1, d}),
                           gather_rows(tables.position, std::span<const std::size_t>(&zero, 1))),
                       gather_rows(tables.token_type, std::span<const std::size_t>(&zero, 1)));
    parts.push_back(cls_row);
    seq.tags.push_back(SegmentTag::cls);
    seq.token_types.push_back(0);
    seq.positions.push_back(0);
    seq.present.push_back(1);
    seq.token_ids.push_back(special::cls);
  }

  const bool text_present = ex.has_text();
  const std::vector<std::size_t> text_ids =
      text_present ? ex.text : std::vector<std::size_t>{special::pad};
  {
    std::vector<std::size_t> pos(text_ids.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
    parts.push_back(embed_segment(text_ids, pos, TokenType::text, tables));
    for (std::size_t i = 0; i < text_ids.size(); ++i) {
      seq.tags.push_back(SegmentTag::text);
      seq.token_types.push_back(static_cast<std::size_t>(TokenType::text));
      seq.positions.push_back(i);
      seq.present.push_back(text_present ? 1 : 0);
      seq.token_ids.push_back(text_ids[i]);
    }
  }

  const bool image_present = ex.has_image();
  const auto caps = join_captions(effective_captions(ex, fill), tables.max_len());
  {
    parts.push_back(embed_segment(caps.ids, caps.positions, TokenType::caption, tables));
    for (std::size_t i = 0; i < caps.ids.size(); ++i) {
      seq.tags.push_back(SegmentTag::caption);
      seq.token_types.push_back(static_cast<std::size_t>(TokenType::caption));
      seq.positions.push_back(caps.positions[i]);
      seq.present.push_back(image_present ? 1 : 0);
      seq.token_ids.push_back(caps.ids[i]);
    }
  }

  {
    Tensor rows = translated ? *translated : Tensor::zeros({caps.ids.size(), d});
    if (rows.rank() != 2 || rows.dim(1) != d) {
      throw ShapeError("assemble: translated image " + shape_str(rows.shape()) + " vs width " +
                       std::to_string(d));
    }
    const std::size_t image_type = static_cast<std::size_t>(TokenType::image);
    parts.push_back(add_rowwise(rows, gather_rows(tables.token_type,
                                                  std::span<const std::size_t>(&image_type, 1))));
    for (std::size_t i = 0; i < rows.dim(0); ++i) {
      seq.tags.push_back(SegmentTag::image);
      seq.token_types.push_back(image_type);
      seq.positions.push_back(i);
      seq.present.push_back(image_present ? 1 : 0);
      seq.token_ids.push_back(i);
    }
  }

  seq.embeddings = concat_rows(parts);
  return seq;
}

/// Attention weights captured during one forward pass.
struct MarmotTrace {
  std::vector<BlockTrace> decoder;
  std::vector<BlockTrace> fusion;
  CaptionSequence caption_input;
  std::size_t image_cells = 0;
  SegmentedSequence sequence;
};

struct ForwardResult {
  Tensor logits;          // [2]
  Tensor representation;  // [d]
};

/// Present, non-[CLS] rows (the rows mean pooling averages over).
inline std::vector<std::size_t> pooled_rows(const SegmentedSequence& seq) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < seq.size(); ++i)
    if (seq.tags[i] != SegmentTag::cls && seq.present[i]) rows.push_back(i);
  return rows;
}

inline Tensor classifier_head(const Tensor& rep, const MarmotParams& p) {
  const std::size_t d = p.config.d;
  auto row = reshape(rep, {1, d});
  auto hidden = relu(add_rowwise(matmul(row, p.head_w1), p.head_b1));
  return reshape(add_rowwise(matmul(hidden, p.head_w2), p.head_b2), {2});
}

/// Full pipeline: project -> translate -> assemble -> fusion encoder -> pool -> head.
/// Missing images are replaced by an all-zero map and a [PAD] caption, then masked.
inline ForwardResult forward(const MultimodalExample& example, const MarmotParams& p,
                             MarmotTrace* trace = nullptr, const MissingImageFill* fill = nullptr) {
  const ModelConfig& cfg = p.config;
  const MultimodalExample* ex = &example;
  MultimodalExample masked;
  if (cfg.variant == Variant::text_only && example.has_image()) {
    masked = example;
    masked.image.reset();
    masked.captions.clear();
    ex = &masked;
  }
  if (!ex->has_text() && !ex->has_image()) {
    throw ContractError("example '" + example.id + "' has no usable modality for this variant");
  }

  ImageFeatureMap dummy;
  if (!ex->has_image()) {
    dummy = fill && fill->image ? *fill->image : ImageFeatureMap::zeros(cfg.image_channels, 1, 1);
  }
  const ImageFeatureMap& image = ex->has_image() ? *ex->image : dummy;
  const auto captions = effective_captions(*ex, fill);

  auto img_rows = project_and_flatten(image, p);
  auto translated =
      modality_translation(captions, img_rows, p, trace ? &trace->decoder : nullptr);
  auto seq = assemble(*ex, translated, p.tables, p.cls_embedding, fill);
  const auto mask = build_fusion_mask(seq);
  auto encoded = encoder_stack(p.encoder, seq.embeddings, mask, trace ? &trace->fusion : nullptr);

  Tensor rep;
  if (cfg.pooling == Pooling::cls) {
    const std::size_t zero = 0;
    rep = reshape(gather_rows(encoded, std::span<const std::size_t>(&zero, 1)), {cfg.d});
  } else {
    rep = reshape(mean_rows(encoded, pooled_rows(seq)), {cfg.d});
  }
  auto logits = classifier_head(rep, p);
  if (trace) {
    trace->caption_input = join_captions(captions, cfg.max_positions);
    trace->image_cells = image.cells();
    trace->sequence = std::move(seq);
  }
  return {std::move(logits), std::move(rep)};
}

struct Prediction {
  int label = 0;
  double p_positive = 0.0;
};

/// p = softmax(logits)[1]; class 1 iff p >= threshold.
inline Prediction predict_from_logits(std::span<const double> logits, double threshold = 0.5) {
  const double p = 1.0 / (1.0 + std::exp(logits[0] - logits[1]));
  return {p >= threshold ? 1 : 0, p};
}

inline Prediction predict(const MultimodalExample& example, const MarmotParams& p,
                          double threshold = 0.5) {
  NoGradGuard no_grad;
  const auto out = forward(example, p);
  return predict_from_logits(out.logits.values(), threshold);
}

}  // namespace marmot
