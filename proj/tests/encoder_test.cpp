#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "multirep/autodiff/gradcheck.hpp"
#include "multirep/encoder.hpp"
#include "multirep/errors.hpp"

using namespace multirep;
using ad::Tensor;

namespace {

EncoderConfig tiny(std::size_t vocab = 20) {
  EncoderConfig c;
  c.layers = 1;
  c.hidden = 8;
  c.heads = 2;
  c.ffn = 12;
  c.max_positions = 6;
  c.vocab_size = vocab;
  return c;
}

struct Batch {
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> mask;
  std::size_t batch, width;
};

// Two sequences of width 6; the second has two padding slots.
Batch two_rows() {
  return {{0, 9, 2, 11, 12, 1, 0, 13, 2, 14, 3, 3}, {1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0}, 2, 6};
}

template <typename T>
HiddenStates<T> run(const EncoderParams<T>& p, const Batch& b, Mode mode, SeedStream s = {7, 1}) {
  return encode(p, std::span<const TokenId>(b.ids), std::span<const std::uint8_t>(b.mask), b.batch, b.width,
                mode, s);
}

}  // namespace

TEST(EncoderConfig, Validation) {
  EncoderConfig c = tiny();
  EXPECT_NO_THROW(c.validate());
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.vocab_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(InitParams, Deterministic) {
  auto a = init_params<float>(tiny(), 3), b = init_params<float>(tiny(), 3), c = init_params<float>(tiny(), 4);
  auto na = a.named(), nb = b.named(), nc = c.named();
  ASSERT_EQ(na.size(), nb.size());
  bool any_differs = false;
  for (std::size_t i = 0; i < na.size(); ++i) {
    EXPECT_EQ(na[i].first, nb[i].first);
    EXPECT_TRUE(std::equal(na[i].second.data().begin(), na[i].second.data().end(), nb[i].second.data().begin()));
    if (!std::equal(na[i].second.data().begin(), na[i].second.data().end(), nc[i].second.data().begin())) {
      any_differs = true;
    }
  }
  EXPECT_TRUE(any_differs);
}

TEST(InitParams, ShapesAndScheme) {
  EncoderConfig c;
  c.vocab_size = 300;
  auto p = init_params<float>(c, 0);
  EXPECT_EQ(p.token_embedding.shape(), (ad::Shape{300, 64}));
  EXPECT_EQ(p.position_embedding.shape(), (ad::Shape{128, 64}));
  EXPECT_EQ(p.layers.size(), 2u);
  for (const auto& [name, t] : p.named()) {
    EXPECT_TRUE(t.requires_grad()) << name;
    if (name.ends_with(".gamma")) {
      for (float v : t.data()) EXPECT_EQ(v, 1.0f) << name;
    } else if (name.ends_with(".beta") || name.ends_with(".bias")) {
      for (float v : t.data()) EXPECT_EQ(v, 0.0f) << name;
    }
  }
  EXPECT_EQ(p.layers[0].w1.shape(), (ad::Shape{64, 128}));
  EXPECT_EQ(p.layers[0].w2.shape(), (ad::Shape{128, 64}));
}

TEST(Encode, OutputShape) {
  auto p = init_params<float>(tiny(), 1);
  auto h = run(p, two_rows(), Mode::kEval);
  EXPECT_EQ(h.states.shape(), (ad::Shape{12, 8}));
  EXPECT_EQ(h.batch, 2u);
  EXPECT_EQ(h.width, 6u);
  EXPECT_EQ(h.dim, 8u);
}

TEST(Encode, EvalModeIsDeterministic) {
  auto p = init_params<float>(tiny(), 1);
  auto a = run(p, two_rows(), Mode::kEval, {1, 1}), b = run(p, two_rows(), Mode::kEval, {2, 5});
  EXPECT_TRUE(std::equal(a.states.data().begin(), a.states.data().end(), b.states.data().begin()));
}

TEST(Encode, TrainModeReproducibleForFixedStream) {
  auto p = init_params<float>(tiny(), 1);
  auto a = run(p, two_rows(), Mode::kTrain, {5, 2}), b = run(p, two_rows(), Mode::kTrain, {5, 2});
  auto c = run(p, two_rows(), Mode::kTrain, {5, 3});
  auto e = run(p, two_rows(), Mode::kEval);
  EXPECT_TRUE(std::equal(a.states.data().begin(), a.states.data().end(), b.states.data().begin()));
  EXPECT_FALSE(std::equal(a.states.data().begin(), a.states.data().end(), c.states.data().begin()));
  EXPECT_FALSE(std::equal(a.states.data().begin(), a.states.data().end(), e.states.data().begin()));
}

TEST(Encode, PaddingReceivesNoAttention) {
  auto p = init_params<float>(tiny(), 1);
  auto b = two_rows();
  AttentionProbe<float> probe;
  SeedStream s;
  encode(p, std::span<const TokenId>(b.ids), std::span<const std::uint8_t>(b.mask), b.batch, b.width, Mode::kEval, s,
         &probe);
  ASSERT_EQ(probe.probabilities.size(), 1u);
  const auto& probs = probe.probabilities[0];
  // Sequence 1, both heads, every query row: key columns 4 and 5 are padding.
  for (std::size_t h = 0; h < 2; ++h) {
    for (std::size_t i = 0; i < 6; ++i) {
      const std::size_t row = (1 * 2 + h) * 6 + i;
      EXPECT_EQ(probs.at(row, 4), 0.0f);
      EXPECT_EQ(probs.at(row, 5), 0.0f);
    }
  }
}

TEST(Encode, PaddingIdsDoNotLeak) {
  auto p = init_params<float>(tiny(), 1);
  auto b = two_rows();
  auto before = run(p, b, Mode::kTrain, {3, 3});
  b.ids[10] = 17;
  b.ids[11] = 5;
  auto after = run(p, b, Mode::kTrain, {3, 3});
  for (std::size_t r = 0; r < 12; ++r) {
    if (r == 10 || r == 11) continue;
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(before.states.at(r, c), after.states.at(r, c)) << r;
  }
}

TEST(Encode, TooLongIsAnError) {
  auto p = init_params<float>(tiny(), 1);
  Batch b{std::vector<TokenId>(7, 1), std::vector<std::uint8_t>(7, 1), 1, 7};
  EXPECT_THROW(run(p, b, Mode::kEval), EncodingError);
}

TEST(Encode, CallCounter) {
  auto p = init_params<float>(tiny(), 1);
  const auto before = encoder_call_count();
  run(p, two_rows(), Mode::kEval);
  run(p, two_rows(), Mode::kEval);
  EXPECT_EQ(encoder_call_count(), before + 2);
}

class EncoderGradCheck : public ::testing::TestWithParam<Mode> {};

TEST_P(EncoderGradCheck, AllParametersMatchFiniteDifferences) {
  auto p = init_params<double>(tiny(), 11);
  auto b = two_rows();
  std::vector<double> weights(12 * 8);
  for (std::size_t i = 0; i < weights.size(); ++i) weights[i] = 2.0 * SeedStream::uniform(99, i) - 1.0;
  auto w = Tensor<double>::matrix(12, 8, weights);
  const Mode mode = GetParam();
  auto loss = [&] {
    SeedStream s{21, 4};
    auto h = run(p, b, mode, s);
    return ad::sum(ad::mul(h.states, w));
  };
  std::vector<ad::NamedTensor> named;
  for (auto& [name, t] : p.named()) named.push_back({name, t});
  auto report = ad::check_gradients(loss, named);
  for (const auto& e : report) EXPECT_LT(e.relative_error, 1e-4) << e.name;
}

INSTANTIATE_TEST_SUITE_P(Modes, EncoderGradCheck, ::testing::Values(Mode::kEval, Mode::kTrain));

TEST(Checkpoint, RoundTrip) {
  auto p = init_params<float>(tiny(), 8);
  auto path = std::filesystem::temp_directory_path() / "multirep_encoder.ckpt";
  save_checkpoint(path, p, {{"note", "x"}});
  auto ck = load_checkpoint(path);
  EXPECT_EQ(ck.params.config, p.config);
  EXPECT_EQ(ck.metadata.at("note"), "x");
  auto a = p.named(), b = ck.params.named();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    EXPECT_TRUE(std::equal(a[i].second.data().begin(), a[i].second.data().end(), b[i].second.data().begin()));
  }
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsForeignFile) {
  auto path = std::filesystem::temp_directory_path() / "multirep_not_a.ckpt";
  { std::ofstream(path) << "hello world, this is not a checkpoint"; }
  EXPECT_THROW(load_checkpoint(path), DataError);
  std::filesystem::remove(path);
}

TEST(ConvertParams, CopiesValues) {
  auto p = init_params<float>(tiny(), 2);
  auto d = convert_params<double>(p);
  auto a = p.named();
  auto b = d.named();
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < a[i].second.numel(); ++j) {
      EXPECT_EQ(static_cast<double>(a[i].second[j]), b[i].second[j]);
    }
  }
}
