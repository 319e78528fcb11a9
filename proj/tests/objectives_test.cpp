#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "multirep/autodiff/gradcheck.hpp"
#include "multirep/errors.hpp"
#include "multirep/objectives.hpp"
#include "oracles.hpp"

using namespace multirep;
using TensorD = ad::Tensor<double>;

namespace {

TensorD rows_of(const std::vector<oracle::Vec>& rows, bool requires_grad = false) {
  std::vector<double> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  return TensorD::matrix(rows.size(), rows.front().size(), std::move(flat), requires_grad);
}

// components[m] = rows (i) of representation m.
std::vector<TensorD> components_of(const std::vector<std::vector<oracle::Vec>>& reps) {
  std::vector<TensorD> out;
  for (std::size_t m = 0; m < reps.front().size(); ++m) {
    std::vector<oracle::Vec> rows;
    for (const auto& sentence : reps) rows.push_back(sentence[m]);
    out.push_back(rows_of(rows));
  }
  return out;
}

std::vector<std::vector<oracle::Vec>> random_reps(std::mt19937_64& rng, std::size_t n, std::size_t m,
                                                  std::size_t dim) {
  std::vector<std::vector<oracle::Vec>> reps(n);
  for (auto& s : reps) {
    for (std::size_t k = 0; k < m; ++k) s.push_back(oracle::random_vec(rng, dim));
  }
  return reps;
}

}  // namespace

TEST(LossRcl, SingleSentenceIsZero) {
  std::mt19937_64 rng(1);
  for (std::size_t m = 1; m <= 5; ++m) {
    EXPECT_EQ(ad::Tensor<double>(loss_rcl(components_of(random_reps(rng, 1, m, 6)), 0.1)).item(), 0.0);
  }
}

TEST(LossRcl, SingleRepresentationIsZero) {
  std::mt19937_64 rng(2);
  for (std::size_t n = 1; n <= 6; ++n) {
    EXPECT_EQ(loss_rcl(components_of(random_reps(rng, n, 1, 5)), 0.1).item(), 0.0);
    EXPECT_EQ(loss_rcl(components_of(random_reps(rng, n, 1, 5)), 0.1, true).item(), 0.0);
  }
}

TEST(LossRcl, IdenticalTwoByTwoIsFourLn2) {
  oracle::Vec v{0.3, -1.2, 2.0};
  std::vector<std::vector<oracle::Vec>> reps{{v, v}, {v, v}};
  EXPECT_NEAR(loss_rcl(components_of(reps), 1.0).item(), 4 * std::log(2.0), 1e-9);
}

TEST(LossRcl, MatchesBruteForce) {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng() % 8, m = 1 + rng() % 5, dim = 1 + rng() % 16;
    const double tau = 0.05 + 0.95 * std::uniform_real_distribution<double>()(rng);
    auto reps = random_reps(rng, n, m, dim);
    EXPECT_NEAR(loss_rcl(components_of(reps), tau).item(), oracle::rcl(reps, tau), 1e-6)
        << "n=" << n << " m=" << m << " dim=" << dim;
  }
}

TEST(LossRcl, NonNegativeAndPermutationInvariant) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto reps = random_reps(rng, 4, 3, 5);
    const double base = loss_rcl(components_of(reps), 0.1).item();
    EXPECT_GE(base, 0.0);
    std::reverse(reps.begin(), reps.end());
    std::swap(reps[0], reps[2]);
    EXPECT_NEAR(loss_rcl(components_of(reps), 0.1).item(), base, 1e-9);
  }
}

TEST(LossRcl, ScaleInvariant) {
  std::mt19937_64 rng(4);
  auto reps = random_reps(rng, 3, 3, 4);
  const double base = loss_rcl(components_of(reps), 0.2).item();
  for (auto& x : reps[1][2]) x *= 37.5;
  EXPECT_NEAR(loss_rcl(components_of(reps), 0.2).item(), base, 1e-9);
}

TEST(LossRcl, ZeroVectorIsDegenerate) {
  std::vector<std::vector<oracle::Vec>> reps{{{1, 0}, {0, 0}}, {{1, 1}, {2, 1}}};
  EXPECT_THROW(loss_rcl(components_of(reps), 0.1), DegenerateVectorError);
}

TEST(LossRcl, LiteralFormIsUnnormalizedDifference) {
  oracle::Vec a{1, 0}, b{0, 1};
  std::vector<std::vector<oracle::Vec>> reps{{a, a}, {b, a}};
  // m=0: i=0 φ=1 neg=0; i=1 φ=0 neg=0. m=1: i=0 φ=1 neg=1; i=1 φ=0 neg=1.
  EXPECT_NEAR(loss_rcl(components_of(reps), 1.0, true).item(), (0 - 1) + (0 - 0) + (1 - 1) + (1 - 0), 1e-12);
}

TEST(LossRdcl, SingleClassIsZero) {
  auto r = rows_of({{1, 2, 3}, {0, 1, 1}});
  std::vector<std::size_t> labels{0, 0};
  EXPECT_EQ(loss_rdcl(r, labels, rows_of({{3, 1, 0}}), 0.1).item(), 0.0);
}

TEST(LossRdcl, TwoClassClosedForm) {
  auto r = rows_of({{1, 0}});
  std::vector<std::size_t> labels{0};
  const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  EXPECT_NEAR(loss_rdcl(r, labels, rows_of({{2, 0}, {0, 5}}), 1.0).item(), expected, 1e-12);
  EXPECT_NEAR(expected, 0.3133, 5e-5);
}

TEST(LossRdcl, MatchesBruteForce) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng() % 5, k = 1 + rng() % 3, dim = 1 + rng() % 16;
    std::vector<oracle::Vec> inst, desc;
    std::vector<std::size_t> labels;
    for (std::size_t c = 0; c < n; ++c) {
      desc.push_back(oracle::random_vec(rng, dim));
      for (std::size_t j = 0; j < k; ++j) {
        inst.push_back(oracle::random_vec(rng, dim));
        labels.push_back(c);
      }
    }
    EXPECT_NEAR(loss_rdcl(rows_of(inst), labels, rows_of(desc), 0.1).item(),
                oracle::rdcl(inst, labels, desc, 0.1), 1e-6);
  }
}

TEST(LossRdcl, RelabelingInvariant) {
  std::mt19937_64 rng(8);
  std::vector<oracle::Vec> inst{oracle::random_vec(rng, 4), oracle::random_vec(rng, 4), oracle::random_vec(rng, 4)};
  std::vector<oracle::Vec> desc{oracle::random_vec(rng, 4), oracle::random_vec(rng, 4), oracle::random_vec(rng, 4)};
  std::vector<std::size_t> labels{0, 1, 2};
  const double base = loss_rdcl(rows_of(inst), labels, rows_of(desc), 0.1).item();
  std::vector<oracle::Vec> permuted{desc[2], desc[0], desc[1]};
  std::vector<std::size_t> relabeled{1, 2, 0};
  EXPECT_NEAR(loss_rdcl(rows_of(inst), relabeled, rows_of(permuted), 0.1).item(), base, 1e-12);
}

TEST(LossRdcl, LabelWithoutDescriptionIsConfigError) {
  std::vector<std::size_t> labels{2};
  EXPECT_THROW(loss_rdcl(rows_of({{1, 0}}), labels, rows_of({{1, 1}, {0, 1}}), 0.1), ConfigError);
}

TEST(Prototypes, Means) {
  std::vector<std::size_t> one{0, 1};
  auto p1 = compute_prototypes(rows_of({{1, 2}, {3, 4}}), one, 2);
  EXPECT_EQ(std::vector<double>(p1.data().begin(), p1.data().end()), (std::vector<double>{1, 2, 3, 4}));
  std::vector<std::size_t> two{0, 0};
  auto p2 = compute_prototypes(rows_of({{0, 2}, {2, 0}}), two, 1);
  EXPECT_EQ(std::vector<double>(p2.data().begin(), p2.data().end()), (std::vector<double>{1, 1}));
  auto p3 = compute_prototypes(rows_of({{2, 0}, {0, 2}}), two, 1);
  EXPECT_EQ(std::vector<double>(p3.data().begin(), p3.data().end()), (std::vector<double>{1, 1}));
  std::vector<std::size_t> ragged{0, 0, 1};
  EXPECT_THROW(compute_prototypes(rows_of({{0, 2}, {2, 0}, {1, 1}}), ragged, 2), ContractError);
}

TEST(ScoreQueries, ModesAgreeByBilinearity) {
  std::mt19937_64 rng(9);
  auto q = rows_of({oracle::random_vec(rng, 6), oracle::random_vec(rng, 6)});
  auto p = rows_of({oracle::random_vec(rng, 6), oracle::random_vec(rng, 6), oracle::random_vec(rng, 6)});
  auto d = rows_of({oracle::random_vec(rng, 6), oracle::random_vec(rng, 6), oracle::random_vec(rng, 6)});
  auto a = score_queries(q, p, d, ScoreMode::kSeparate);
  auto b = score_queries(q, p, d, ScoreMode::kPrototypeAddition);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
}

TEST(ScoreQueries, ZeroDescriptionSimilarityIsPrototypeOnly) {
  auto q = rows_of({{1, 0, 0}});
  auto p = rows_of({{2, 0, 0}, {0, 1, 0}});
  auto d = rows_of({{0, 5, 0}, {0, 0, 7}});
  auto with = score_queries(q, p, d, ScoreMode::kSeparate);
  auto without = score_queries(q, p, TensorD(), ScoreMode::kSeparate);
  EXPECT_EQ(std::vector<double>(with.data().begin(), with.data().end()),
            std::vector<double>(without.data().begin(), without.data().end()));
}

TEST(ScoreQueries, SelfSimilarityWins) {
  auto p = rows_of({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  auto q = rows_of({{0, 0, 1}});
  EXPECT_EQ(predict(score_queries(q, p, TensorD(), ScoreMode::kSeparate)), (std::vector<std::size_t>{2}));
}

TEST(Predict, TiesGoToLowestIndexAndShiftInvariant) {
  auto s = TensorD::matrix(2, 3, {1, 3, 3, 0.5, 0.5, 0.5});
  EXPECT_EQ(predict(s), (std::vector<std::size_t>{1, 0}));
  auto shifted = TensorD::matrix(2, 3, {101, 103, 103, 100.5, 100.5, 100.5});
  EXPECT_EQ(predict(shifted), predict(s));
}

TEST(LossCe, UniformScoresGiveLogN) {
  std::vector<std::size_t> labels{3};
  EXPECT_NEAR(loss_ce(TensorD::matrix(1, 5, {0.7, 0.7, 0.7, 0.7, 0.7}), labels).item(), std::log(5.0), 1e-12);
  EXPECT_NEAR(std::log(5.0), 1.6094, 1e-4);
}

TEST(LossCe, SaturationAndShift) {
  std::vector<std::size_t> labels{0, 1};
  EXPECT_LT(loss_ce(TensorD::matrix(2, 2, {80, 0, 0, 80}), labels).item(), 1e-30);
  auto a = loss_ce(TensorD::matrix(2, 2, {1, 2, 3, 4}), labels).item();
  auto b = loss_ce(TensorD::matrix(2, 2, {11, 12, 13, 14}), labels).item();
  EXPECT_NEAR(a, b, 1e-12);
}

TEST(TotalLoss, SumAndDisabledTerms) {
  LossConfig c;
  auto b = total_loss(TensorD::scalar(1.0), TensorD::scalar(0.5), TensorD::scalar(0.25), c);
  EXPECT_DOUBLE_EQ(b.total.item(), 1.75);
  auto v = values_of(b);
  EXPECT_DOUBLE_EQ(v.total, v.l_ce + v.l_rcl + v.l_rdcl);
  c.use_rcl = false;
  c.use_rdcl = false;
  auto only_ce = total_loss(TensorD::scalar(1.0), TensorD::scalar(0.5), TensorD::scalar(0.25), c);
  EXPECT_EQ(only_ce.total.item(), 1.0);
  EXPECT_EQ(only_ce.l_rcl.item(), 0.0);
  EXPECT_EQ(only_ce.l_rdcl.item(), 0.0);
}

TEST(LossConfig, Validation) {
  LossConfig c;
  EXPECT_NO_THROW(c.validate());
  c.use_descriptions = false;
  EXPECT_THROW(c.validate(), ConfigError);
  c.use_rdcl = false;
  EXPECT_NO_THROW(c.validate());
  c.temperature = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  nlohmann::json j = LossConfig{};
  EXPECT_EQ(j.get<LossConfig>(), LossConfig{});
  EXPECT_THROW(parse_score_mode("bogus"), ConfigError);
}

TEST(Gradients, ContrastiveLossesMatchFiniteDifferences) {
  std::mt19937_64 rng(10);
  auto reps = random_reps(rng, 3, 3, 4);
  auto comps = components_of(reps);
  std::vector<ad::NamedTensor> named;
  for (std::size_t m = 0; m < comps.size(); ++m) {
    comps[m] = TensorD::from(comps[m].shape(), std::vector<double>(comps[m].data().begin(), comps[m].data().end()),
                             true);
    named.push_back({"r" + std::to_string(m), comps[m]});
  }
  auto desc = TensorD::from({2, 4}, {0.5, -1, 2, 0.1, 1, 1, -0.3, 0.7}, true);
  named.push_back({"desc", desc});
  std::vector<std::size_t> labels{0, 1, 1};
  auto loss = [&] {
    auto r = ad::concat(std::vector<TensorD>{comps[0], comps[1]}, 1);
    auto d = ad::concat(std::vector<TensorD>{desc, desc}, 1);
    auto protos = compute_prototypes(TensorD(ad::gather_rows(r, std::vector<std::size_t>{0, 1})),
                                     std::vector<std::size_t>{0, 1}, 2);
    auto scores = score_queries(TensorD(ad::gather_rows(r, std::vector<std::size_t>{2})), protos, d,
                                ScoreMode::kSeparate);
    return total_loss(loss_ce(scores, std::vector<std::size_t>{1}), loss_rcl(comps, 0.1),
                      loss_rdcl(r, labels, d, 0.1), LossConfig{})
        .total;
  };
  for (const auto& e : ad::check_gradients(loss, named)) EXPECT_LT(e.relative_error, 1e-4) << e.name;
}
