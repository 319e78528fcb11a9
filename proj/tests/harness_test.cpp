#include <gtest/gtest.h>

#include <algorithm>
#include <set>
#include <sstream>

#include "multirep/autodiff/ops.hpp"
#include "multirep/errors.hpp"
#include "multirep/harness.hpp"

using namespace multirep;

namespace {

RunConfig tiny_config() {
  RunConfig c;
  c.encoder.layers = 1;
  c.encoder.hidden = 16;
  c.encoder.heads = 2;
  c.encoder.ffn = 32;
  c.encoder.max_positions = 64;
  c.max_len = 64;
  c.iterations = 4;
  c.episodes_per_step = 1;
  c.eval_episodes = 20;
  c.log_interval = 2;
  c.seeds = {0};
  c.data.synthetic.instances_per_relation = 12;
  return c;
}

std::vector<float> flat(const EncoderParams<float>& p) {
  std::vector<float> out;
  for (const auto& [_, t] : p.named()) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

}  // namespace

TEST(RunConfig, DefaultsValidate) {
  RunConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.iterations, 2000u);
  EXPECT_EQ(c.eval_episodes, 1000u);
  EXPECT_EQ(c.seeds.size(), 3u);
}

TEST(RunConfig, JsonRoundTrip) {
  RunConfig c = tiny_config();
  c.selector = RepSelector::parse("cls,entity_pair", 0.2);
  c.loss.score_mode = ScoreMode::kPrototypeAddition;
  c.episode.q = 3;
  c.optimizer.lr = 5e-4;
  nlohmann::json j = c;
  RunConfig back = j.get<RunConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  EXPECT_EQ(back.selector, c.selector);
  EXPECT_EQ(back.loss, c.loss);
  EXPECT_EQ(back.episode, c.episode);
}

TEST(RunConfig, UnknownKeysAreRejected) {
  EXPECT_THROW(nlohmann::json({{"iteration", 5}}).get<RunConfig>(), ConfigError);
  EXPECT_THROW(nlohmann::json({{"encoder", {{"layer", 1}}}}).get<RunConfig>(), ConfigError);
  EXPECT_THROW(nlohmann::json({{"data", {{"synthetic", {{"relation", 4}}}}}}).get<RunConfig>(), ConfigError);
  EXPECT_THROW(nlohmann::json({{"iterations", "many"}}).get<RunConfig>(), ConfigError);
}

TEST(RunConfig, InvariantsEnforced) {
  auto bad = [](auto mutate) {
    RunConfig c;
    mutate(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  bad([](RunConfig& c) { c.optimizer.lr = 0; });
  bad([](RunConfig& c) { c.iterations = 0; });
  bad([](RunConfig& c) { c.seeds.clear(); });
  bad([](RunConfig& c) { c.optimizer.kind = "sgd"; });
  bad([](RunConfig& c) { c.loss.use_descriptions = false; });
  bad([](RunConfig& c) { c.max_len = c.encoder.max_positions + 1; });
}

TEST(RunConfig, DisablingDescriptionsTurnsOffScoringAndLoss) {
  RunConfig c;
  disable_descriptions(c);
  EXPECT_NO_THROW(c.validate());
  EXPECT_FALSE(c.loss.use_descriptions);
  EXPECT_FALSE(c.loss.use_rdcl);
  EXPECT_FALSE(c.episode.with_descriptions);
}

TEST(Dataset, SyntheticSplitsAreDisjointAndDescribed) {
  const Dataset d = load_dataset(tiny_config());
  std::set<std::string> train = d.train.relation_ids(), eval = d.eval.relation_ids();
  for (const auto& id : eval) EXPECT_FALSE(train.contains(id));
  for (const auto* s : {&d.train, &d.eval}) {
    for (const auto& [id, _] : s->relations) EXPECT_TRUE(d.descriptions.contains(id));
  }
  const Vocab v = dataset_vocab(d, 1);
  const auto& word = d.eval.relations.begin()->second.front().tokens.front();
  EXPECT_NE(v.id(word), Vocab::kUnk);
}

TEST(ForwardEpisode, ShapesAndLossTerms) {
  RunConfig c = tiny_config();
  const Dataset d = load_dataset(c);
  const Vocab v = dataset_vocab(d, 1);
  const Model m = init_model(c, v, 3);
  const EncodedSplit enc = encode_split(d.train, &d.descriptions, v, c.max_len);
  const Episode ep = episode_at(d.train, {.n = 3, .k = 2, .q = 2}, 1, 0);
  SeedStream s(1, 1);
  const auto out = forward_episode(m.params, ep, enc, m.selector, m.loss, Mode::kEval, s);
  EXPECT_EQ(out.scores.shape(), (ad::Shape{6, 3}));
  const LossValues lv = values_of(out.losses);
  EXPECT_GT(lv.l_ce, 0.0);
  EXPECT_NE(lv.l_rdcl, 0.0);
  EXPECT_NEAR(lv.total, lv.l_ce + lv.l_rcl + lv.l_rdcl, 1e-3);

  LossConfig no_desc = m.loss;
  no_desc.use_descriptions = false;
  no_desc.use_rdcl = false;
  const auto plain = forward_episode(m.params, ep, enc, m.selector, no_desc, Mode::kEval, s);
  EXPECT_EQ(values_of(plain.losses).l_rdcl, 0.0);
}

TEST(Training, OneStepReducesLossOnTheSameEpisode) {
  RunConfig c = tiny_config();
  const Dataset d = load_dataset(c);
  const Vocab v = dataset_vocab(d, 1);
  Model m = init_model(c, v, 5);
  const EncodedSplit enc = encode_split(d.train, &d.descriptions, v, c.max_len);
  const Episode ep = episode_at(d.train, {.n = 2, .k = 1, .q = 1}, 4, 0);
  std::vector<ad::Tensor<float>> leaves;
  for (auto& [_, t] : m.params.named()) leaves.push_back(t);
  Adam adam({.lr = 1e-3}, leaves);

  auto loss_at = [&](bool step) {
    ad::Tape<float> tape;
    ad::TapeScope<float> scope(tape);
    SeedStream s(7, 7);
    auto out = forward_episode(m.params, ep, enc, m.selector, m.loss, Mode::kTrain, s);
    if (step) tape.backward(out.losses.total);
    return static_cast<double>(out.losses.total.item());
  };
  const double before = loss_at(true);
  adam.step();
  EXPECT_EQ(adam.steps(), 1u);
  EXPECT_LT(loss_at(false), before);
}

TEST(Adam, FirstStepMovesEachCoordinateByTheLearningRate) {
  auto x = ad::Tensor<float>::vector({1.0f, -2.0f, 0.5f}, true);
  Adam adam({.lr = 0.1}, {x});
  {
    ad::Tape<float> tape;
    ad::TapeScope<float> scope(tape);
    auto target = ad::Tensor<float>::vector({3.0f, 3.0f, 3.0f});
    auto diff = ad::sub(x, target);
    tape.backward(ad::sum(ad::mul(diff, diff)));
  }
  adam.step();
  EXPECT_NEAR(x[0], 1.1f, 1e-5);
  EXPECT_NEAR(x[1], -1.9f, 1e-5);
  EXPECT_NEAR(x[2], 0.6f, 1e-5);
  EXPECT_EQ(x.grad()[0], 0.0f);
}

TEST(Adam, MinimizesAQuadratic) {
  auto x = ad::Tensor<float>::vector({4.0f, -4.0f}, true);
  Adam adam({.lr = 0.05}, {x});
  for (int i = 0; i < 500; ++i) {
    ad::Tape<float> tape;
    ad::TapeScope<float> scope(tape);
    auto target = ad::Tensor<float>::vector({1.0f, 2.0f});
    auto diff = ad::sub(x, target);
    tape.backward(ad::sum(ad::mul(diff, diff)));
    adam.step();
  }
  EXPECT_NEAR(x[0], 1.0f, 1e-2);
  EXPECT_NEAR(x[1], 2.0f, 1e-2);
}

TEST(Training, DeterministicForSeed) {
  const RunConfig c = tiny_config();
  const Dataset d = load_dataset(c);
  const TrainResult a = train(c, d, 3), b = train(c, d, 3), other = train(c, d, 4);
  EXPECT_EQ(flat(a.model.params), flat(b.model.params));
  EXPECT_NE(flat(a.model.params), flat(other.model.params));
  ASSERT_EQ(a.history.size(), 2u);
  EXPECT_EQ(a.history[1].step, 4u);
  EXPECT_EQ(a.history[1].loss.total, b.history[1].loss.total);
}

TEST(Training, HooksSeeLogsAndCheckpoints) {
  RunConfig c = tiny_config();
  c.checkpoint_interval = 2;
  const Dataset d = load_dataset(c);
  std::vector<std::size_t> logged, saved;
  TrainHooks hooks;
  hooks.on_log = [&](const LogRecord& r) { logged.push_back(r.step); };
  hooks.on_checkpoint = [&](std::size_t step, const Model&) { saved.push_back(step); };
  train(c, d, 0, hooks);
  EXPECT_EQ(logged, (std::vector<std::size_t>{2, 4}));
  EXPECT_EQ(saved, (std::vector<std::size_t>{2, 4}));
  nlohmann::json j = LogRecord{4, {1, 2, 3, 6}};
  EXPECT_EQ(j.at("l_rdcl"), 3);
  EXPECT_EQ(j.at("step"), 4);
}

TEST(Training, DivergenceNamesTheStep) {
  RunConfig c = tiny_config();
  c.optimizer.lr = 1e30;
  const Dataset d = load_dataset(c);
  try {
    train(c, d, 0);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("step"), std::string::npos);
    EXPECT_NE(msg.find("l_ce="), std::string::npos);
  }
}

TEST(Training, ValidationSelectsAStep) {
  RunConfig c = tiny_config();
  c.validation_interval = 2;
  c.validation_episodes = 10;
  Dataset d = load_dataset(c);
  d.validation = d.eval;
  d.validation->role = SplitRole::kValidation;
  d.eval = {};
  const TrainResult r = train(c, d, 0);
  ASSERT_TRUE(r.best_validation.has_value());
  EXPECT_TRUE(r.selected_step == 2 || r.selected_step == 4);
}

TEST(Evaluate, DeterministicAndBounded) {
  const RunConfig c = tiny_config();
  const Dataset d = load_dataset(c);
  const Model m = init_model(c, dataset_vocab(d, 1), 1);
  const auto a = evaluate(m, d.eval, d.descriptions, c.episode, 30, 9);
  const auto b = evaluate(m, d.eval, d.descriptions, c.episode, 30, 9);
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_EQ(a.queries, 150u);
  EXPECT_GE(a.accuracy, 0.0);
  EXPECT_LE(a.accuracy, 1.0);
  EXPECT_THROW(evaluate(m, d.eval, d.descriptions, {.n = 6}, 1, 0), ConfigError);
}

TEST(Evaluate, AccuracyInvariantToClassOrder) {
  const RunConfig c = tiny_config();
  const Dataset d = load_dataset(c);
  const Model m = init_model(c, dataset_vocab(d, 1), 2);
  const EmbeddingTable table = embed_split(m, d.eval, &d.descriptions);
  auto stack = [&](const std::vector<const std::vector<float>*>& rows) {
    std::vector<float> v;
    for (const auto* r : rows) v.insert(v.end(), r->begin(), r->end());
    return ad::Tensor<float>::matrix(rows.size(), table.dim, v);
  };
  for (std::uint64_t i = 0; i < 20; ++i) {
    const Episode ep = episode_at(d.eval, c.episode, 3, i);
    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    auto correct = [&](bool permuted) {
      std::vector<const std::vector<float>*> s, q, desc(5);
      std::vector<std::size_t> labels, qlabels;
      for (std::size_t j = 0; j < ep.support.size(); ++j) {
        s.push_back(&table.instances.at(ep.support[j].relation_id).at(ep.support[j].index));
        labels.push_back(permuted ? perm[ep.support_labels[j]] : ep.support_labels[j]);
      }
      for (std::size_t j = 0; j < ep.query.size(); ++j) {
        q.push_back(&table.instances.at(ep.query[j].relation_id).at(ep.query[j].index));
        qlabels.push_back(permuted ? perm[ep.query_labels[j]] : ep.query_labels[j]);
      }
      for (std::size_t n = 0; n < 5; ++n) desc[permuted ? perm[n] : n] = &table.descriptions.at(ep.relations[n]);
      const auto p = predict(score_queries(stack(q), compute_prototypes(stack(s), labels, 5), stack(desc),
                                           ScoreMode::kSeparate));
      std::size_t hits = 0;
      for (std::size_t j = 0; j < p.size(); ++j) hits += p[j] == qlabels[j];
      return hits;
    };
    EXPECT_EQ(correct(false), correct(true));
  }
}

TEST(Metrics, SampleStandardDeviation) {
  const Metrics one = summarize({0.5});
  EXPECT_EQ(one.mean, 0.5);
  EXPECT_EQ(one.std, 0.0);
  const Metrics three = summarize({0.7, 0.8, 0.9});
  EXPECT_NEAR(three.mean, 0.8, 1e-12);
  EXPECT_NEAR(three.std, 0.1, 1e-12);
}

TEST(ModelIo, RoundTrip) {
  const RunConfig c = tiny_config();
  const Dataset d = load_dataset(c);
  Model m = init_model(c, dataset_vocab(d, 1), 6);
  m.selector = RepSelector::parse("mask,avg_pool", 0.3);
  const auto path = std::filesystem::temp_directory_path() / "multirep_model_io.ckpt";
  save_model(path, m, {{"seed", 6}});
  const Model back = load_model(path);
  EXPECT_EQ(back.selector, m.selector);
  EXPECT_EQ(back.loss, m.loss);
  EXPECT_EQ(back.max_len, m.max_len);
  EXPECT_EQ(back.vocab.tokens(), m.vocab.tokens());
  EXPECT_EQ(flat(back.params), flat(m.params));
  std::filesystem::remove(path);
}

TEST(Ablation, EachArmChangesOneThing) {
  const RunConfig base;
  EXPECT_EQ(kAllArms.size(), 7u);
  std::set<std::string> names;
  for (AblationArm arm : kAllArms) {
    names.insert(std::string(to_string(arm)));
    EXPECT_EQ(parse_ablation_arm(to_string(arm)), arm);
    const RunConfig c = apply_arm(base, arm);
    EXPECT_NO_THROW(c.validate());
    const int changes = (c.loss.use_rcl != base.loss.use_rcl) + (c.loss.use_rdcl != base.loss.use_rdcl) +
                        (c.loss.score_mode != base.loss.score_mode) + !(c.selector == base.selector);
    EXPECT_EQ(changes, 1) << to_string(arm);
  }
  EXPECT_EQ(names.size(), 7u);
  EXPECT_THROW(parse_ablation_arm("no_everything"), ConfigError);
  EXPECT_EQ(apply_arm(base, AblationArm::kNoEntityPair).selector.vector_count(), 3u);
  EXPECT_EQ(apply_arm(base, AblationArm::kNoCls).selector.vector_count(), 4u);
}

TEST(Ablation, CsvSchema) {
  AblationReport r{5, 1, {"full", summarize({0.8, 0.9})}, {}};
  for (AblationArm arm : kAllArms) r.arms.push_back({std::string(to_string(arm)), summarize({0.5})});
  std::ostringstream out;
  write_ablation_csv(out, r);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "arm,n_way,k_shot,mean,std");
  std::getline(in, line);
  EXPECT_EQ(line, "full,5,1,0.850000,0.070711");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 7u);
}

TEST(Ablation, RunsEveryArmEndToEnd) {
  RunConfig c = tiny_config();
  c.iterations = 1;
  const Dataset d = load_dataset(c);
  const auto report = ablate(c, d, std::vector<AblationArm>(kAllArms.begin(), kAllArms.end()));
  EXPECT_EQ(report.arms.size(), 7u);
  EXPECT_EQ(report.full.arm, "full");
}

TEST(Sweep, SummaryAndCsv) {
  std::vector<SweepRow> rows;
  for (const auto& s : enumerate_selectors()) {
    for (std::uint64_t seed : {0, 1}) rows.push_back({s.vector_count(), s.name(), seed, 0.1 * s.vector_count() + 0.01 * seed});
  }
  const SweepReport r = summarize_sweep(rows);
  ASSERT_EQ(r.summary.size(), 5u);
  std::vector<std::size_t> subsets;
  for (const auto& s : r.summary) subsets.push_back(s.subsets);
  EXPECT_EQ(subsets, (std::vector<std::size_t>{3, 4, 4, 3, 1}));
  EXPECT_EQ(r.summary.front().m, 1u);
  EXPECT_EQ(r.summary.back().m, 5u);
  EXPECT_NEAR(r.summary[0].mean, 0.105, 1e-12);
  EXPECT_NEAR(r.summary[0].subset_std, 0.0, 1e-12);
  EXPECT_EQ(r.summary[4].subset_std, 0.0);

  std::ostringstream out;
  write_sweep_csv(out, r);
  const std::string csv = out.str();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "M,subset,seed,accuracy");
  EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), rows.size() + 1);
}

TEST(Sweep, StdAcrossSubsetsAveragedOverSeeds) {
  const SweepReport r = summarize_sweep({{1, "a", 0, 0.2}, {1, "b", 0, 0.4}, {1, "a", 1, 0.5}, {1, "b", 1, 0.5}});
  ASSERT_EQ(r.summary.size(), 1u);
  EXPECT_NEAR(r.summary[0].subset_std, (std::sqrt(0.02) + 0.0) / 2.0, 1e-12);
  EXPECT_NEAR(r.summary[0].mean, 0.4, 1e-12);
}

TEST(Export, SampledSupportEmbeddings) {
  const RunConfig c = tiny_config();
  const Dataset d = load_dataset(c);
  const Model m = init_model(c, dataset_vocab(d, 1), 0);
  const auto rows = export_embeddings(m, d.eval, "eval", c.episode, 40, 8);
  ASSERT_EQ(rows.size(), 40u);
  std::set<std::pair<std::string, std::size_t>> distinct;
  for (const auto& r : rows) {
    distinct.emplace(r.relation_id, r.instance_index);
    EXPECT_EQ(r.values.size(), 5u * c.encoder.hidden);
    EXPECT_EQ(r.component, "full");
  }
  EXPECT_EQ(distinct.size(), 40u);
  const auto again = export_embeddings(m, d.eval, "eval", c.episode, 40, 8);
  for (std::size_t i = 0; i < rows.size(); ++i) EXPECT_EQ(rows[i].values, again[i].values);

  std::ostringstream out;
  write_embeddings_csv(out, rows);
  const std::string header = out.str().substr(0, out.str().find('\n'));
  EXPECT_EQ(static_cast<std::size_t>(std::count(header.begin(), header.end(), ',')), 4u + 5u * c.encoder.hidden - 1u);
  EXPECT_THROW(export_embeddings(m, d.eval, "eval", c.episode, 10000, 8), SamplingError);
}

TEST(GradCheckSuite, PassesAndReportsCorruption) {
  const GradCheckReport clean = run_gradcheck_suite();
  EXPECT_TRUE(clean.passed());
  EXPECT_GT(clean.entries.size(), 60u);
  EXPECT_LT(clean.seconds, 60.0);

  ad::GradCheckOptions opts;
  opts.corrupt = [](const std::string& name, std::span<double> g) {
    if (name == "total_loss.layer0.ffn.out.weight") g[0] += 1.0;
  };
  const GradCheckReport bad = run_gradcheck_suite(opts);
  EXPECT_FALSE(bad.passed());
  for (const auto& e : bad.entries) {
    EXPECT_EQ(e.passed, e.name != "total_loss.layer0.ffn.out.weight") << e.name;
  }
}
