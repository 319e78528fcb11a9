// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails.
//
//   acceptance --cli <path to multirep> [--only name,name] [--work <dir>]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <CLI11.hpp>

#include "../oracles.hpp"
#include "multirep/harness.hpp"

using namespace multirep;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string fmt(double x, int precision = 4) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(precision);
  s << x;
  return s.str();
}

std::string sci(double x) {
  std::ostringstream s;
  s.setf(std::ios::scientific);
  s.precision(2);
  s << x;
  return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

// Held-out accuracy per (config, seed), computed once.
class RunCache {
 public:
  double accuracy(const RunConfig& config, const Dataset& data, std::uint64_t seed) {
    const std::string key = nlohmann::json(config).dump() + "#" + std::to_string(seed);
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    const auto start = std::chrono::steady_clock::now();
    const double acc = train_and_evaluate(config, data, seed);
    std::cerr << "  [run] seed " << seed << " " << config.selector.name() << " rcl=" << config.loss.use_rcl
              << " rdcl=" << config.loss.use_rdcl << " iters=" << config.iterations << " acc=" << fmt(acc) << " ("
              << fmt(seconds_since(start), 1) << " s)\n";
    return cache_[key] = acc;
  }

  Metrics metrics(const RunConfig& config, const Dataset& data) {
    std::vector<double> accs;
    for (std::uint64_t seed : config.seeds) accs.push_back(accuracy(config, data, seed));
    return summarize(accs);
  }

 private:
  std::map<std::string, double> cache_;
};

struct Context {
  RunConfig defaults;
  Dataset data;
  RunCache runs;
  std::string cli;
  fs::path work;
};

constexpr std::size_t kAblationIterations = 600;

Outcome gradient_integrity(Context&) {
  const GradCheckReport report = run_gradcheck_suite();
  double worst = 0.0;
  std::string worst_name;
  std::size_t failed = 0;
  for (const auto& e : report.entries) {
    if (!e.passed) ++failed;
    if (e.relative_error > worst) {
      worst = e.relative_error;
      worst_name = e.name;
    }
  }
  const bool ok = report.passed() && report.seconds < 60.0;
  return {ok, std::to_string(report.entries.size()) + " tensors, " + std::to_string(failed) +
                  " failed, max rel err " + sci(worst) + " (" + worst_name + "), " +
                  fmt(report.seconds, 2) + " s"};
}

ad::Tensor<double> rows_of(const std::vector<oracle::Vec>& rows) {
  std::vector<double> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  return ad::Tensor<double>::matrix(rows.size(), rows.front().size(), std::move(flat));
}

Outcome loss_oracle(Context&) {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng() % 5, k = 1 + rng() % (8 / n), m = 1 + rng() % 5, dim = 1 + rng() % 16;
    const double tau = 0.05 + 0.95 * unit(rng);
    std::vector<std::vector<oracle::Vec>> reps(n * k);
    for (auto& s : reps) {
      for (std::size_t j = 0; j < m; ++j) s.push_back(oracle::random_vec(rng, dim));
    }
    std::vector<ad::Tensor<double>> components;
    for (std::size_t j = 0; j < m; ++j) {
      std::vector<oracle::Vec> rows;
      for (const auto& s : reps) rows.push_back(s[j]);
      components.push_back(rows_of(rows));
    }
    worst = std::max(worst, std::abs(loss_rcl(components, tau).item() - oracle::rcl(reps, tau)));

    std::vector<oracle::Vec> instances, descriptions;
    std::vector<std::size_t> labels;
    for (std::size_t c = 0; c < n; ++c) {
      descriptions.push_back(oracle::random_vec(rng, dim * m));
      for (std::size_t j = 0; j < k; ++j) {
        instances.push_back(oracle::random_vec(rng, dim * m));
        labels.push_back(c);
      }
    }
    worst = std::max(worst, std::abs(loss_rdcl(rows_of(instances), labels, rows_of(descriptions), tau).item() -
                                     oracle::rdcl(instances, labels, descriptions, tau)));
  }

  double closed = 0.0;
  {
    std::vector<ad::Tensor<double>> single{rows_of({{0.4, -1.0, 2.0}}), rows_of({{1.5, 0.2, -0.3}})};
    closed = std::max(closed, std::abs(loss_rcl(single, 0.1).item()));
    const std::vector<std::size_t> one_class{0, 0};
    closed = std::max(closed, std::abs(loss_rdcl(rows_of({{1, 2}, {3, -1}}), one_class, rows_of({{0.5, 0.5}}), 0.1)
                                           .item()));
    const oracle::Vec v{0.3, -1.2, 2.0};
    std::vector<ad::Tensor<double>> identical{rows_of({v, v}), rows_of({v, v})};
    closed = std::max(closed, std::abs(loss_rcl(identical, 1.0).item() - 4.0 * std::log(2.0)));
  }
  return {worst <= 1e-6 && closed <= 1e-9,
          "100 random cases, max |diff| " + sci(worst) + "; closed forms max |diff| " + sci(closed)};
}

Outcome learning_signal(Context& ctx) {
  const auto start = std::chrono::steady_clock::now();
  const double acc = ctx.runs.accuracy(ctx.defaults, ctx.data, ctx.defaults.seeds.front());
  const double secs = seconds_since(start);
  return {acc >= 0.80 && secs < 15 * 60,
          std::to_string(ctx.defaults.episode.n) + "-way " + std::to_string(ctx.defaults.episode.k) +
              "-shot held-out accuracy " + fmt(acc) + " after " + std::to_string(ctx.defaults.iterations) +
              " iterations (chance 0.2000), " + fmt(secs, 1) + " s"};
}

Outcome contrastive_benefit(Context& ctx) {
  RunConfig plain = ctx.defaults;
  plain.loss.use_rcl = false;
  plain.loss.use_rdcl = false;
  const Metrics full = ctx.runs.metrics(ctx.defaults, ctx.data);
  const Metrics without = ctx.runs.metrics(plain, ctx.data);
  const double gain = 100.0 * (full.mean - without.mean);
  return {gain >= 2.0, "full " + fmt(full.mean) + " vs without both contrastive losses " + fmt(without.mean) +
                           " over " + std::to_string(ctx.defaults.seeds.size()) + " seeds, gain " + fmt(gain, 2) +
                           " points"};
}

Outcome m_sweep(Context& ctx) {
  const RunConfig& base = ctx.defaults;
  std::vector<SweepRow> rows;
  for (const RepSelector& subset : enumerate_selectors()) {
    RunConfig c = base;
    c.selector = RepSelector(subset.units(), base.selector.description_dropout());
    for (std::uint64_t seed : base.seeds) {
      rows.push_back({c.selector.vector_count(), c.selector.name(), seed, ctx.runs.accuracy(c, ctx.data, seed)});
    }
  }
  const SweepReport report = summarize_sweep(std::move(rows));
  std::ofstream(ctx.work / "sweep_summary.csv") << [&] {
    std::ostringstream s;
    write_sweep_summary_csv(s, report);
    return s.str();
  }();
  std::map<std::size_t, SweepSummary> by_m;
  for (const auto& s : report.summary) by_m[s.m] = s;
  const double gain = 100.0 * (by_m[5].mean - by_m[1].mean);
  std::string means;
  for (const auto& [m, s] : by_m) means += (means.empty() ? "" : " ") + std::to_string(m) + ":" + fmt(s.mean);
  return {gain >= 3.0 && by_m[4].subset_std < by_m[1].subset_std,
          "mean by M " + means + "; M=5 minus M=1 " + fmt(gain, 2) + " points; subset std M=4 " +
              fmt(by_m[4].subset_std) + " vs M=1 " + fmt(by_m[1].subset_std) + " (" +
              std::to_string(base.iterations) + " iterations)"};
}

Outcome ablation_structure(Context& ctx) {
  RunConfig base = ctx.defaults;
  base.iterations = kAblationIterations;
  const Metrics full = ctx.runs.metrics(base, ctx.data);
  bool ok = std::isfinite(full.mean);
  std::string detail = "full " + fmt(full.mean) + "±" + fmt(full.std);
  for (AblationArm arm : kAllArms) {
    const Metrics m = ctx.runs.metrics(apply_arm(base, arm), ctx.data);
    ok = ok && std::isfinite(m.mean);
    const bool removal = arm == AblationArm::kNoAvgPool || arm == AblationArm::kNoEntityPair ||
                         arm == AblationArm::kNoCls || arm == AblationArm::kNoMask;
    const bool within = m.mean <= full.mean + std::max(full.std, m.std);
    if (removal && !within) ok = false;
    detail += "; " + std::string(to_string(arm)) + " " + fmt(m.mean) + "±" + fmt(m.std) +
              (removal && !within ? " (above full)" : "");
  }
  return {ok, detail + " (" + std::to_string(kAblationIterations) + " iterations)"};
}

Outcome protocol_invariants(Context& ctx) {
  const std::set<std::string> train_ids = ctx.data.train.relation_ids(), eval_ids = ctx.data.eval.relation_ids();
  std::size_t overlap = 0, wrong_n = 0, leaked = 0;
  constexpr std::size_t kEpisodes = 10000;
  const EpisodeSpec spec = ctx.defaults.episode;
  for (const auto& [split, own, other] : {std::tuple{&ctx.data.train, &train_ids, &eval_ids},
                                          std::tuple{&ctx.data.eval, &eval_ids, &train_ids}}) {
    for (std::size_t i = 0; i < kEpisodes / 2; ++i) {
      const Episode e = episode_at(*split, spec, 77, i);
      std::set<std::pair<std::string, std::size_t>> support;
      for (const auto& r : e.support) support.emplace(r.relation_id, r.index);
      for (const auto& r : e.query) overlap += support.contains({r.relation_id, r.index});
      const std::set<std::string> rels(e.relations.begin(), e.relations.end());
      if (rels.size() != spec.n || e.relations.size() != spec.n) ++wrong_n;
      for (const auto& id : rels) leaked += other->contains(id) || !own->contains(id);
      for (const auto* refs : {&e.support, &e.query}) {
        for (const auto& r : *refs) leaked += !rels.contains(r.relation_id);
      }
    }
  }

  const Vocab vocab = dataset_vocab(ctx.data, ctx.defaults.min_freq);
  const Model untrained = init_model(ctx.defaults, vocab, ctx.defaults.seeds.front());
  const EvalResult r = evaluate(untrained, ctx.data.eval, ctx.data.descriptions, spec, 2000,
                                eval_stream_seed(ctx.defaults.seeds.front()));
  const bool ok = overlap == 0 && wrong_n == 0 && leaked == 0 && r.accuracy >= 0.17 && r.accuracy <= 0.23;
  return {ok, std::to_string(kEpisodes) + " episodes: " + std::to_string(overlap) + " support/query overlaps, " +
                  std::to_string(wrong_n) + " with wrong relation count, " + std::to_string(leaked) +
                  " leaked relations; untrained accuracy " + fmt(r.accuracy) + " over " +
                  std::to_string(r.episodes) + " episodes"};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return "<missing " + p.string() + ">";
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome determinism(Context& ctx) {
  RunConfig c = ctx.defaults;
  c.iterations = 40;
  c.log_interval = 10;
  c.checkpoint_interval = 20;
  c.eval_episodes = 100;
  c.seeds = {3};
  const fs::path dir = ctx.work / "determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream(dir / "config.json") << nlohmann::json(c).dump(2);

  std::vector<std::string> files{"metrics.json", "train_seed3.jsonl", "model_seed3.ckpt", "checkpoints/seed3_step20.ckpt",
                                 "checkpoints/seed3_step40.ckpt"};
  for (const char* run : {"a", "b"}) {
    const std::string cmd = "\"" + ctx.cli + "\" train --config \"" + (dir / "config.json").string() + "\" --out \"" +
                            (dir / run).string() + "\" > \"" + (dir / run).string() + ".log\" 2>&1";
    if (std::system(cmd.c_str()) != 0) return {false, "cli train failed: " + slurp(dir / (std::string(run) + ".log"))};
  }
  std::size_t bytes = 0;
  for (const auto& f : files) {
    const std::string a = slurp(dir / "a" / f), b = slurp(dir / "b" / f);
    if (a != b || a.starts_with("<missing")) return {false, f + " differs between runs"};
    bytes += a.size();
  }
  return {true, std::to_string(files.size()) + " files byte-identical across two runs (" + std::to_string(bytes) +
                    " bytes)"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multirep acceptance checks"};
  std::string cli, only, work = "acceptance_work";
  app.add_option("--cli", cli, "path to the multirep executable")->required();
  app.add_option("--only", only, "comma-separated criteria to run");
  app.add_option("--work", work, "scratch directory");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome(Context&)>>> criteria{
      {"gradient_integrity", gradient_integrity},
      {"loss_oracle_equivalence", loss_oracle},
      {"protocol_invariants", protocol_invariants},
      {"determinism", determinism},
      {"learning_signal", learning_signal},
      {"contrastive_benefit", contrastive_benefit},
      {"ablation_structure", ablation_structure},
      {"m_sweep", m_sweep},
  };
  std::set<std::string> selected;
  for (std::stringstream s(only); std::getline(s, only, ',');) {
    if (!only.empty()) selected.insert(only);
  }

  Context ctx;
  ctx.cli = cli;
  ctx.work = fs::absolute(work);
  fs::create_directories(ctx.work);
  ctx.data = load_dataset(ctx.defaults);

  int failures = 0;
  for (const auto& [name, check] : criteria) {
    if (!selected.empty() && !selected.contains(name)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = check(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.passed;
    std::cout << (o.passed ? "PASS " : "FAIL ") << name << ": " << o.detail << " [" << fmt(seconds_since(start), 1)
              << " s]" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
