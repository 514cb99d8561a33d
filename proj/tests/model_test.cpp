#include <gtest/gtest.h>

#include <cmath>

#include "reference_model.hpp"
#include "test_support.hpp"

namespace marmot {
namespace {

using testing::bitwise_equal;
using testing::check_gradients;
using testing::image_example;
using testing::named_leaves;
using testing::text_example;
using testing::tiny_config;

ImageFeatureMap random_map(std::size_t c, std::size_t h, std::size_t w, Rng& rng) {
  std::vector<double> v(c * h * w);
  for (auto& x : v) x = rng.normal();
  return {c, h, w, std::move(v)};
}

TEST(ProjectAndFlatten, IdentityGivesRawCellVectors) {
  Rng rng(1);
  const auto img = random_map(4, 2, 3, rng);
  auto rows = project_and_flatten(img, Tensor::identity(4), Tensor::zeros({4}));
  ASSERT_EQ(rows.shape(), (Shape{6, 4}));
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 3; ++x)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(rows.at(y * 3 + x, c), img.at(c, y, x));
}

TEST(ProjectAndFlatten, SevenBySevenGivesFortyNineRows) {
  Rng rng(2);
  const auto img = random_map(3, 7, 7, rng);
  EXPECT_EQ(project_and_flatten(img, Tensor::randn({3, 5}, rng), Tensor::zeros({5})).dim(0), 49u);
}

TEST(ProjectAndFlatten, MatchesPerCellLoop) {
  Rng rng(3);
  const auto img = random_map(3, 2, 2, rng);
  auto w = Tensor::randn({3, 5}, rng);
  auto b = Tensor::randn({5}, rng);
  auto rows = project_and_flatten(img, w, b);
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 2; ++x)
      for (std::size_t j = 0; j < 5; ++j) {
        double s = b.at(j);
        for (std::size_t c = 0; c < 3; ++c) s += img.at(c, y, x) * w.at(c, j);
        EXPECT_NEAR(rows.at(y * 2 + x, j), s, 1e-12);
      }
}

TEST(ProjectAndFlatten, ChannelMismatch) {
  Rng rng(4);
  EXPECT_THROW(project_and_flatten(random_map(3, 2, 2, rng), Tensor::zeros({4, 5}), Tensor::zeros({5})),
               ShapeError);
}

TEST(ModalityTranslation, EmptyDecoderReturnsCaptionEmbedding) {
  Rng rng(5);
  auto p = MarmotParams::random(tiny_config(1, 0), rng);
  const std::vector<std::vector<std::size_t>> caps{{7, 8}, {9}};
  auto img_rows = Tensor::randn({4, 16}, rng);
  auto out = modality_translation(caps, img_rows, p);
  const std::vector<std::size_t> ids{7, 8, special::sep, 9}, pos{0, 1, 2, 0};
  auto ref = embed_segment(ids, pos, TokenType::caption, p.tables);
  EXPECT_TRUE(bitwise_equal(out.values(), ref.values()));
}

TEST(ModalityTranslation, LengthIsCaptionTokenCount) {
  Rng rng(6);
  auto p = MarmotParams::random(tiny_config(1, 2), rng);
  const std::vector<std::vector<std::size_t>> caps{{7, 8, 9}};
  for (std::size_t cells : {1u, 4u, 49u})
    EXPECT_EQ(modality_translation(caps, Tensor::randn({cells, 16}, rng), p).dim(0), 3u);
}

TEST(ModalityTranslation, OneBlockMatchesManualDecoder) {
  Rng rng(7);
  auto p = MarmotParams::random(tiny_config(1, 1), rng);
  const std::vector<std::vector<std::size_t>> caps{{10, 11}};
  auto img_rows = Tensor::randn({4, 16}, rng);
  auto out = modality_translation(caps, img_rows, p);
  std::vector<double> x(2 * 16);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 16; ++j)
      x[i * 16 + j] = p.tables.token.at(caps[0][i], j) + p.tables.position.at(i, j) +
                      p.tables.token_type.at(1, j);
  const auto ref = reference::manual_decoder(x, 2, reference::to_vec(img_rows), 4, 16, p.decoder[0]);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out.values()[i], ref[i], 1e-12);
}

TEST(JoinCaptions, SeparatorTakesNextPosition) {
  const auto seq = join_captions({{7, 8}, {9, 10, 11}}, 64);
  EXPECT_EQ(seq.ids, (std::vector<std::size_t>{7, 8, special::sep, 9, 10, 11}));
  EXPECT_EQ(seq.positions, (std::vector<std::size_t>{0, 1, 2, 0, 1, 2}));
}

TEST(ThirdTokenType, Examples) {
  Rng rng(8);
  const std::vector<double> zero{0.0, 0.0};
  EXPECT_EQ(init_third_token_type(zero, zero, rng, 0.0), zero);
  const std::vector<double> a{2.0}, b{4.0};
  EXPECT_EQ(init_third_token_type(a, b, rng, 0.0), (std::vector<double>{3.0}));
  EXPECT_THROW(init_third_token_type(a, zero, rng), ShapeError);

  const std::vector<double> t1(10000, 1.0), t2(10000, -3.0);
  const auto t3 = init_third_token_type(t1, t2, rng, 1e-4);
  double var = 0.0;
  for (double v : t3) var += (v + 1.0) * (v + 1.0);
  var /= 10000.0;
  EXPECT_NEAR(var, 1e-4, 0.2e-4);
}

TEST(Assemble, LayoutAndPositions) {
  Rng rng(9);
  auto p = MarmotParams::random(tiny_config(), rng);
  MultimodalExample ex;
  ex.text = {5, 6, 7};
  ex.captions = {{8, 9}};
  ex.image = ImageFeatureMap::zeros(4, 7, 7);
  auto translated = Tensor::randn({49, 16}, rng);
  auto seq = assemble(ex, translated, p.tables, p.cls_embedding);
  ASSERT_EQ(seq.size(), 1u + 3u + 2u + 49u);
  std::vector<std::size_t> expected{0, 0, 1, 2, 0, 1};
  for (std::size_t i = 0; i < 49; ++i) expected.push_back(i);
  EXPECT_EQ(seq.positions, expected);
  EXPECT_EQ(seq.tags[0], SegmentTag::cls);
  EXPECT_EQ(seq.token_types[0], 0u);
  EXPECT_EQ(seq.token_types[1], 0u);
  EXPECT_EQ(seq.token_types[4], 1u);
  EXPECT_EQ(seq.token_types[6], 2u);
  for (auto v : seq.present) EXPECT_EQ(v, 1);
  // Translated rows carry t3 but no position row.
  for (std::size_t j = 0; j < 16; ++j)
    EXPECT_EQ(seq.embeddings.at(6, j), translated.at(0, j) + p.tables.token_type.at(2, j));
}

TEST(Assemble, ImageAbsentMasksCaptionAndImage) {
  Rng rng(10);
  auto p = MarmotParams::random(tiny_config(), rng);
  auto ex = text_example();
  auto seq = assemble(ex, std::nullopt, p.tables, p.cls_embedding);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const bool expected = seq.tags[i] == SegmentTag::cls || seq.tags[i] == SegmentTag::text;
    EXPECT_EQ(seq.present[i] != 0, expected) << i;
  }
}

TEST(Assemble, TextAbsentMasksText) {
  Rng rng(11);
  auto p = MarmotParams::random(tiny_config(), rng);
  auto ex = image_example(rng);
  ex.text.clear();
  auto seq = assemble(ex, Tensor::randn({4, 16}, rng), p.tables, p.cls_embedding);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const bool expected = seq.tags[i] != SegmentTag::text;
    EXPECT_EQ(seq.present[i] != 0, expected) << i;
  }
}

TEST(Assemble, RejectsExampleWithoutModalities) {
  Rng rng(12);
  auto p = MarmotParams::random(tiny_config(), rng);
  MultimodalExample ex;
  EXPECT_THROW(assemble(ex, std::nullopt, p.tables, p.cls_embedding), ContractError);
}

TEST(Assemble, Deterministic) {
  Rng rng(13);
  auto p = MarmotParams::random(tiny_config(), rng);
  auto ex = image_example(rng);
  auto tr = Tensor::randn({4, 16}, rng);
  auto a = assemble(ex, tr, p.tables, p.cls_embedding);
  auto b = assemble(ex, tr, p.tables, p.cls_embedding);
  EXPECT_TRUE(bitwise_equal(a.embeddings.values(), b.embeddings.values()));
  EXPECT_EQ(a.positions, b.positions);
  EXPECT_EQ(a.present, b.present);
}

TEST(Forward, FiniteTwoLogits) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    auto p = MarmotParams::random(tiny_config(), rng);
    for (const auto& ex : {image_example(rng), text_example()}) {
      auto out = forward(ex, p);
      ASSERT_EQ(out.logits.shape(), (Shape{2}));
      for (double v : out.logits.values()) EXPECT_TRUE(std::isfinite(v));
    }
  }
}

TEST(Forward, MatchesStraightLinePipeline) {
  for (auto pooling : {Pooling::mean, Pooling::cls}) {
    for (std::uint64_t seed = 1; seed <= 4; ++seed) {
      Rng rng(seed);
      auto cfg = tiny_config();
      cfg.pooling = pooling;
      auto p = MarmotParams::random(cfg, rng);
      auto img_text_missing = image_example(rng);
      img_text_missing.text.clear();
      for (const auto& ex : {image_example(rng), text_example(), img_text_missing}) {
        auto out = forward(ex, p);
        const auto ref = reference::manual_forward(ex, p);
        for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(out.logits.at(c), ref.logits[c], 1e-12);
        for (std::size_t j = 0; j < 16; ++j)
          EXPECT_NEAR(out.representation.at(j), ref.representation[j], 1e-12);
      }
    }
  }
}

TEST(Forward, MeanPoolingIsLoopAverageOfPresentRows) {
  Rng rng(14);
  auto p = MarmotParams::random(tiny_config(), rng);
  auto ex = text_example();
  MarmotTrace trace;
  auto out = forward(ex, p, &trace);
  // Re-run the encoder to get its output rows.
  auto encoded = encoder_stack(p.encoder, trace.sequence.embeddings, build_fusion_mask(trace.sequence));
  std::vector<double> mean(16, 0.0);
  std::size_t count = 0;
  for (std::size_t i = 1; i < trace.sequence.size(); ++i) {
    if (!trace.sequence.present[i]) continue;
    ++count;
    for (std::size_t j = 0; j < 16; ++j) mean[j] += encoded.at(i, j);
  }
  EXPECT_EQ(count, ex.text.size());
  for (std::size_t j = 0; j < 16; ++j) EXPECT_NEAR(out.representation.at(j), mean[j] / 4.0, 1e-12);
}

struct RunCapture {
  std::vector<double> logits, rep, grads;
  std::vector<double> decoder_and_proj_grads;
};

RunCapture run_with_fill(const MultimodalExample& ex, MarmotParams& p, const MissingImageFill* fill) {
  p.zero_grads();
  auto out = forward(ex, p, nullptr, fill);
  backward(cross_entropy(out.logits, 1));
  RunCapture r;
  r.logits = reference::to_vec(out.logits);
  r.rep = reference::to_vec(out.representation);
  p.for_each([&](const std::string&, const Tensor& t, ParamGroup g) {
    const auto grad = t.grad();
    r.grads.insert(r.grads.end(), grad.begin(), grad.end());
    if (g == ParamGroup::translation_decoder || g == ParamGroup::image_path)
      r.decoder_and_proj_grads.insert(r.decoder_and_proj_grads.end(), grad.begin(), grad.end());
  });
  return r;
}

TEST(Forward, TextOnlyInvariantToDummyContent) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    auto p = MarmotParams::random(tiny_config(), rng);
    const auto ex = text_example();
    const auto base = run_with_fill(ex, p, nullptr);

    MissingImageFill noisy;
    noisy.image = random_map(4, 3, 2, rng);
    for (auto& v : noisy.image->values) v *= 25.0;
    noisy.caption = {17, 18, 19};
    const auto other = run_with_fill(ex, p, &noisy);

    EXPECT_TRUE(bitwise_equal(base.logits, other.logits));
    EXPECT_TRUE(bitwise_equal(base.rep, other.rep));
    EXPECT_TRUE(bitwise_equal(base.grads, other.grads));
    for (double g : base.decoder_and_proj_grads) ASSERT_EQ(g, 0.0);
    for (double g : other.decoder_and_proj_grads) ASSERT_EQ(g, 0.0);
  }
}

TEST(Forward, TextOnlyVariantIgnoresImage) {
  Rng rng(15);
  auto cfg = tiny_config();
  cfg.variant = Variant::text_only;
  auto p = MarmotParams::random(cfg, rng);
  auto with_image = image_example(rng);
  auto without = with_image;
  without.image.reset();
  without.captions.clear();
  EXPECT_TRUE(bitwise_equal(forward(with_image, p).logits.values(), forward(without, p).logits.values()));
}

TEST(Forward, ImagePathReceivesGradientWhenPresent) {
  Rng rng(16);
  auto p = MarmotParams::random(tiny_config(), rng);
  const auto r = run_with_fill(image_example(rng), p, nullptr);
  double norm = 0.0;
  for (double g : r.decoder_and_proj_grads) norm += g * g;
  EXPECT_GT(norm, 0.0);
}

TEST(Predict, Examples) {
  const std::vector<double> tie{0.0, 0.0};
  auto p = predict_from_logits(tie);
  EXPECT_EQ(p.p_positive, 0.5);
  EXPECT_EQ(p.label, 1);
  const std::vector<double> sure{-10.0, 10.0};
  auto q = predict_from_logits(sure);
  EXPECT_EQ(q.label, 1);
  EXPECT_NEAR(q.p_positive, 1.0, 1e-8);
  EXPECT_EQ(predict_from_logits(sure, 1.0).label, 0);
  const std::vector<double> certain{-1000.0, 1000.0};
  EXPECT_EQ(predict_from_logits(certain, 1.0).label, 1);
}

class ModelGradients : public ::testing::TestWithParam<int> {};

TEST_P(ModelGradients, FullPipelineMatchesFiniteDifferences) {
  Rng rng(static_cast<std::uint64_t>(GetParam()));
  auto cfg = tiny_config(2, 2);
  cfg.pooling = GetParam() % 2 ? Pooling::mean : Pooling::cls;
  auto p = MarmotParams::random(cfg, rng);
  for (auto& t : p.tensors()) {
    if (t.dim(0) == 16 && t.rank() == 1)
      for (auto& v : t.mutable_values()) v += 0.1 * rng.normal();
  }
  const auto ex = image_example(rng);
  const auto r = check_gradients([&] { return cross_entropy(forward(ex, p).logits, 1); },
                                 named_leaves(p), 1e-5, 6, static_cast<std::uint64_t>(GetParam()));
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst;
}

INSTANTIATE_TEST_SUITE_P(TenSeeds, ModelGradients, ::testing::Range(1, 11));

}  // namespace
}  // namespace marmot
