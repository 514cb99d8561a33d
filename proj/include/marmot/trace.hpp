#pragma once

// Attention-weight traces for per-example inspection. Data only; drawing
// heatmaps is left to downstream tools.

#include <string>
#include <vector>

#include "marmot/serialize.hpp"

namespace marmot {

struct AttentionTrace {
  std::string example_id;
  std::string subnetwork;  // fusion | translation-decoder-self | translation-decoder-cross
  std::size_t layer = 0;
  std::size_t head = 0;
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  std::vector<double> weights;  // row-major, rows x cols

  std::string file_name() const {
    return example_id + "." + subnetwork + ".layer" + std::to_string(layer) + ".head" +
           std::to_string(head) + ".json";
  }
};

inline std::string image_label(std::size_t k) { return "ImgFeat-" + std::to_string(k); }

/// Labels and matrices for every (sub-network, layer, head) recorded in `t`.
inline std::vector<AttentionTrace> collect_traces(const std::string& example_id, const MarmotTrace& t,
                                                  const Vocabulary& vocab) {
  std::vector<std::string> caption_labels;
  for (auto id : t.caption_input.ids) caption_labels.push_back(vocab.token(id));
  std::vector<std::string> cell_labels;
  for (std::size_t k = 0; k < t.image_cells; ++k) cell_labels.push_back(image_label(k));
  std::vector<std::string> fused_labels;
  for (std::size_t i = 0; i < t.sequence.size(); ++i) {
    switch (t.sequence.tags[i]) {
      case SegmentTag::cls: fused_labels.push_back("CLS"); break;
      case SegmentTag::image: fused_labels.push_back(image_label(t.sequence.positions[i])); break;
      default: fused_labels.push_back(vocab.token(t.sequence.token_ids[i])); break;
    }
  }

  std::vector<AttentionTrace> out;
  auto emit = [&](const char* sub, std::size_t layer, const std::vector<Tensor>& heads,
                  const std::vector<std::string>& rows, const std::vector<std::string>& cols) {
    for (std::size_t h = 0; h < heads.size(); ++h) {
      if (heads[h].dim(0) != rows.size() || heads[h].dim(1) != cols.size()) {
        throw ShapeError("attention trace labels do not match the weight matrix");
      }
      out.push_back({example_id, sub, layer, h, rows, cols,
                     std::vector<double>(heads[h].values().begin(), heads[h].values().end())});
    }
  };
  for (std::size_t l = 0; l < t.decoder.size(); ++l) {
    emit("translation-decoder-self", l, t.decoder[l].self_attn, caption_labels, caption_labels);
    emit("translation-decoder-cross", l, t.decoder[l].cross_attn, caption_labels, cell_labels);
  }
  for (std::size_t l = 0; l < t.fusion.size(); ++l)
    emit("fusion", l, t.fusion[l].self_attn, fused_labels, fused_labels);
  return out;
}

inline std::vector<AttentionTrace> trace_example(const MultimodalExample& ex, const MarmotParams& params,
                                                 const Vocabulary& vocab) {
  NoGradGuard no_grad;
  MarmotTrace t;
  forward(ex, params, &t);
  return collect_traces(ex.id, t, vocab);
}

inline Json trace_to_json(const AttentionTrace& t) {
  Json rows = Json::array();
  const std::size_t cols = t.col_labels.size();
  for (std::size_t i = 0; i < t.row_labels.size(); ++i) {
    rows.push_back(std::vector<double>(t.weights.begin() + static_cast<std::ptrdiff_t>(i * cols),
                                       t.weights.begin() + static_cast<std::ptrdiff_t>((i + 1) * cols)));
  }
  return Json{{"format", "marmot-attention-trace"},
              {"format_version", kFormatVersion},
              {"example_id", t.example_id},
              {"subnetwork", t.subnetwork},
              {"layer", t.layer},
              {"head", t.head},
              {"row_labels", t.row_labels},
              {"col_labels", t.col_labels},
              {"weights", std::move(rows)}};
}

}  // namespace marmot
