#include <chrono>
#include <random>

#include "multirep/autodiff/ops.hpp"
#include "multirep/harness.hpp"

namespace multirep {

namespace {

using TensorD = ad::Tensor<double>;
using Op = std::function<TensorD(std::vector<TensorD>&)>;

struct OpCase {
  std::string name;
  std::vector<ad::Shape> shapes;
  Op op;
  double lo = -2.0, hi = 2.0;
};

TensorD random_tensor(std::mt19937_64& rng, ad::Shape shape, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(ad::shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return TensorD::from(std::move(shape), std::move(v), true);
}

std::vector<OpCase> op_cases() {
  static const std::vector<std::size_t> rows{2, 0, 2};
  static const std::vector<std::int32_t> ids{4, 1, 1, 0};
  static const std::vector<std::size_t> cols{3, 0, 1};
  static const std::vector<std::uint8_t> key_mask{1, 0, 1, 1, 1, 0};
  return {
      {"matmul", {{3, 4}, {4, 2}}, [](auto& in) { return ad::matmul(in[0], in[1]); }},
      {"matmul_nt", {{3, 4}, {5, 4}}, [](auto& in) { return ad::matmul_nt(in[0], in[1]); }},
      {"transpose", {{3, 4}}, [](auto& in) { return ad::transpose(in[0]); }},
      {"add", {{3, 2}, {3, 2}}, [](auto& in) { return ad::add(in[0], in[1]); }},
      {"sub", {{3, 2}, {3, 2}}, [](auto& in) { return ad::sub(in[0], in[1]); }},
      {"mul", {{3, 2}, {3, 2}}, [](auto& in) { return ad::mul(in[0], in[1]); }},
      {"add_bias", {{3, 4}, {4}}, [](auto& in) { return ad::add_bias(in[0], in[1]); }},
      {"scale", {{5}}, [](auto& in) { return ad::scale(in[0], -1.7); }},
      {"exp", {{6}}, [](auto& in) { return ad::exp(in[0]); }},
      {"log", {{6}}, [](auto& in) { return ad::log(in[0]); }, 0.2, 2.0},
      {"gelu", {{8}}, [](auto& in) { return ad::gelu(in[0]); }},
      {"sum", {{2, 3}}, [](auto& in) { return ad::sum(in[0]); }},
      {"sum_axis", {{2, 3, 4}}, [](auto& in) { return ad::sum_axis(in[0], 1); }},
      {"mean_axis", {{3, 4}}, [](auto& in) { return ad::mean_axis(in[0], 0); }},
      {"concat", {{2, 3}, {2, 1}, {2, 2}},
       [](auto& in) { return ad::concat(std::vector<TensorD>{in[0], in[1], in[2]}, 1); }},
      {"reshape", {{2, 6}}, [](auto& in) { return ad::reshape(in[0], {3, 4}); }},
      {"gather_rows", {{4, 3}}, [](auto& in) { return ad::gather_rows(in[0], std::span<const std::size_t>(rows)); }},
      {"embedding", {{5, 3}}, [](auto& in) { return ad::embedding(in[0], std::span<const std::int32_t>(ids)); }},
      {"pick", {{3, 4}}, [](auto& in) { return ad::pick(in[0], std::span<const std::size_t>(cols)); }},
      {"diag_embed", {{4}}, [](auto& in) { return ad::diag_embed(in[0]); }},
      {"layer_norm", {{3, 5}, {5}, {5}}, [](auto& in) { return ad::layer_norm(in[0], in[1], in[2], 1e-5); }},
      {"softmax", {{3, 4}}, [](auto& in) { return ad::softmax(in[0], 0); }},
      {"masked_softmax", {{4, 3}},
       [](auto& in) { return ad::masked_softmax(in[0], std::span<const std::uint8_t>(key_mask), 2); }},
      {"logsumexp_rows", {{3, 4}}, [](auto& in) { return ad::logsumexp_rows(in[0]); }},
      {"cosine", {{6}, {6}}, [](auto& in) { return ad::cosine(in[0], in[1]); }},
      {"l2_normalize_rows", {{3, 4}}, [](auto& in) { return ad::l2_normalize_rows(in[0]); }},
      {"dropout", {{10}},
       [](auto& in) {
         SeedStream stream(9, 3);
         return ad::dropout(in[0], 0.4, Mode::kTrain, stream);
       }},
      {"attention_scores", {{6, 4}, {6, 4}}, [](auto& in) { return ad::attention_scores(in[0], in[1], 2, 3, 2); }},
      {"attention_context", {{12, 3}, {6, 4}},
       [](auto& in) { return ad::attention_context(in[0], in[1], 2, 3, 2); }},
  };
}

void append(std::vector<ad::GradCheckEntry>& out, std::vector<ad::GradCheckEntry> entries) {
  out.insert(out.end(), std::make_move_iterator(entries.begin()), std::make_move_iterator(entries.end()));
}

// Each op output is reduced through a fixed random weighting so every output
// element carries a distinct gradient.
void check_ops(std::vector<ad::GradCheckEntry>& out, const ad::GradCheckOptions& options) {
  std::mt19937_64 rng(20240);
  for (const auto& c : op_cases()) {
    std::vector<TensorD> inputs;
    for (const auto& s : c.shapes) inputs.push_back(random_tensor(rng, s, c.lo, c.hi));
    const TensorD weights = random_tensor(rng, c.op(inputs).shape(), -2.0, 2.0).detach();
    std::vector<ad::NamedTensor> named;
    for (std::size_t i = 0; i < inputs.size(); ++i) named.push_back({"op." + c.name + ".in" + std::to_string(i), inputs[i]});
    append(out, ad::check_gradients([&] { return ad::sum(ad::mul(c.op(inputs), weights)); }, named, options));
  }
}

EncoderConfig tiny_encoder(std::size_t vocab, std::size_t positions) {
  EncoderConfig c;
  c.layers = 1;
  c.hidden = 8;
  c.heads = 2;
  c.ffn = 12;
  c.max_positions = positions;
  c.vocab_size = vocab;
  return c;
}

void check_encoder(std::vector<ad::GradCheckEntry>& out, const ad::GradCheckOptions& options) {
  constexpr std::size_t kVocab = 20, kWidth = 6, kBatch = 2;
  auto params = init_params<double>(tiny_encoder(kVocab, kWidth), 11);
  const std::vector<TokenId> ids{0, 9, 2, 12, 5, 3, 0, 14, 2, 7, 3, 3};
  const std::vector<std::uint8_t> mask{1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0};
  std::vector<double> w(kBatch * kWidth * 8);
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = 2.0 * SeedStream::uniform(99, i) - 1.0;
  const TensorD weights = TensorD::matrix(kBatch * kWidth, 8, w);
  for (Mode mode : {Mode::kEval, Mode::kTrain}) {
    const std::string prefix = mode == Mode::kEval ? "encoder.eval." : "encoder.train.";
    auto loss = [&] {
      SeedStream stream(21, 4);
      return ad::sum(ad::mul(encode(params, ids, mask, kBatch, kWidth, mode, stream).states, weights));
    };
    std::vector<ad::NamedTensor> named;
    for (auto& [name, t] : params.named()) named.push_back({prefix + name, t});
    append(out, ad::check_gradients(loss, named, options));
  }
}

// 2-way 1-shot episode through encoder, representations, prototypes, every
// loss term and description scoring, in train mode with fixed dropout masks.
void check_total_loss(std::vector<ad::GradCheckEntry>& out, const ad::GradCheckOptions& options) {
  DatasetSplit split;
  split.relations["P1"] = {{{"ann", "lives", "in", "rome"}, {0, 0}, {3, 3}, "P1"},
                           {{"bob", "lives", "in", "oslo"}, {0, 0}, {3, 3}, "P1"}};
  split.relations["P2"] = {{{"cat", "eats", "fish"}, {0, 0}, {2, 2}, "P2"},
                           {{"dog", "eats", "meat"}, {0, 0}, {2, 2}, "P2"}};
  DescriptionSet descriptions{{"P1", {"P1", "residence", "place lived"}},
                              {"P2", {"P2", "diet", "food eaten"}}};
  const Vocab vocab = build_vocab({&split}, &descriptions);
  constexpr std::size_t kMaxLen = 18;
  const EncodedSplit encoded = encode_split(split, &descriptions, vocab, kMaxLen);
  const Episode episode = episode_at(split, {.n = 2, .k = 1, .q = 1}, 5, 0);

  auto params = init_params<double>(tiny_encoder(vocab.size(), kMaxLen), 13);
  const RepSelector selector;
  LossConfig cfg;
  auto loss = [&] {
    SeedStream stream(31, 2);
    return forward_episode(params, episode, encoded, selector, cfg, Mode::kTrain, stream).losses.total;
  };
  std::vector<ad::NamedTensor> named;
  for (auto& [name, t] : params.named()) named.push_back({"total_loss." + name, t});
  append(out, ad::check_gradients(loss, named, options));
}

}  // namespace

GradCheckReport run_gradcheck_suite(const ad::GradCheckOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  GradCheckReport report;
  check_ops(report.entries, options);
  check_encoder(report.entries, options);
  check_total_loss(report.entries, options);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace multirep
