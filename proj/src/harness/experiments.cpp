#include <algorithm>
#include <cmath>
#include <iomanip>
#include <set>

#include "multirep/errors.hpp"
#include "multirep/harness.hpp"

namespace multirep {

namespace {

RepSelector without(const RepSelector& selector, RepUnit unit) {
  std::vector<RepUnit> units;
  for (RepUnit u : selector.units()) {
    if (u != unit) units.push_back(u);
  }
  if (units.empty()) throw ConfigError("removing " + std::string(to_string(unit)) + " leaves no representation");
  return RepSelector(std::move(units), selector.description_dropout());
}

double sample_std(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

}  // namespace

std::string_view to_string(AblationArm arm) {
  switch (arm) {
    case AblationArm::kNoRcl: return "no_rcl";
    case AblationArm::kNoRdcl: return "no_rdcl";
    case AblationArm::kNoAvgPool: return "no_avg_pool";
    case AblationArm::kNoEntityPair: return "no_entity_pair";
    case AblationArm::kNoCls: return "no_cls";
    case AblationArm::kNoMask: return "no_mask";
    case AblationArm::kPrototypeAddition: return "prototype_addition";
  }
  return "?";
}

AblationArm parse_ablation_arm(std::string_view name) {
  for (AblationArm arm : kAllArms) {
    if (to_string(arm) == name) return arm;
  }
  throw ConfigError("unknown ablation arm '" + std::string(name) + "'");
}

RunConfig apply_arm(RunConfig config, AblationArm arm) {
  switch (arm) {
    case AblationArm::kNoRcl: config.loss.use_rcl = false; break;
    case AblationArm::kNoRdcl: config.loss.use_rdcl = false; break;
    case AblationArm::kNoAvgPool: config.selector = without(config.selector, RepUnit::kAvgPool); break;
    case AblationArm::kNoEntityPair: config.selector = without(config.selector, RepUnit::kEntityPair); break;
    case AblationArm::kNoCls: config.selector = without(config.selector, RepUnit::kCls); break;
    case AblationArm::kNoMask: config.selector = without(config.selector, RepUnit::kMask); break;
    case AblationArm::kPrototypeAddition: config.loss.score_mode = ScoreMode::kPrototypeAddition; break;
  }
  return config;
}

AblationReport ablate(const RunConfig& config, const Dataset& data, const std::vector<AblationArm>& arms) {
  AblationReport report;
  report.n = config.episode.n;
  report.k = config.episode.k;
  report.full = {"full", run_experiment(config, data)};
  for (AblationArm arm : arms) {
    report.arms.push_back({std::string(to_string(arm)), run_experiment(apply_arm(config, arm), data)});
  }
  return report;
}

void write_ablation_csv(std::ostream& out, const AblationReport& report) {
  out << "arm,n_way,k_shot,mean,std\n" << std::fixed << std::setprecision(6);
  auto row = [&](const AblationRow& r) {
    out << r.arm << ',' << report.n << ',' << report.k << ',' << r.metrics.mean << ',' << r.metrics.std << '\n';
  };
  row(report.full);
  for (const auto& r : report.arms) row(r);
  out.unsetf(std::ios::floatfield);
}

SweepReport sweep_m(const RunConfig& config, const Dataset& data) {
  std::vector<SweepRow> rows;
  for (const RepSelector& subset : enumerate_selectors()) {
    RunConfig c = config;
    c.selector = RepSelector(subset.units(), config.selector.description_dropout());
    for (std::uint64_t seed : config.seeds) {
      rows.push_back({c.selector.vector_count(), c.selector.name(), seed, train_and_evaluate(c, data, seed)});
    }
  }
  return summarize_sweep(std::move(rows));
}

SweepReport summarize_sweep(std::vector<SweepRow> rows) {
  SweepReport report;
  std::map<std::size_t, std::vector<const SweepRow*>> by_m;
  for (const auto& r : rows) by_m[r.m].push_back(&r);
  for (const auto& [m, list] : by_m) {
    SweepSummary s;
    s.m = m;
    std::set<std::string> subsets;
    std::map<std::uint64_t, std::vector<double>> by_seed;
    for (const SweepRow* r : list) {
      subsets.insert(r->subset);
      by_seed[r->seed].push_back(r->accuracy);
      s.mean += r->accuracy;
    }
    s.subsets = subsets.size();
    s.mean /= static_cast<double>(list.size());
    for (const auto& [_, accs] : by_seed) s.subset_std += sample_std(accs);
    s.subset_std /= static_cast<double>(by_seed.size());
    report.summary.push_back(s);
  }
  report.rows = std::move(rows);
  return report;
}

void write_sweep_csv(std::ostream& out, const SweepReport& report) {
  out << "M,subset,seed,accuracy\n" << std::fixed << std::setprecision(6);
  for (const auto& r : report.rows) out << r.m << ',' << r.subset << ',' << r.seed << ',' << r.accuracy << '\n';
  out.unsetf(std::ios::floatfield);
}

void write_sweep_summary_csv(std::ostream& out, const SweepReport& report) {
  out << "M,subsets,mean,subset_std\n" << std::fixed << std::setprecision(6);
  for (const auto& s : report.summary) out << s.m << ',' << s.subsets << ',' << s.mean << ',' << s.subset_std << '\n';
  out.unsetf(std::ios::floatfield);
}

std::vector<EmbeddingRow> export_embeddings(const Model& model, const DatasetSplit& split, const std::string& split_name,
                                            const EpisodeSpec& spec, std::size_t count, std::uint64_t seed) {
  const std::size_t available = split.instance_count();
  if (count > available) {
    throw SamplingError("split has " + std::to_string(available) + " instances, " + std::to_string(count) +
                        " requested");
  }
  std::vector<InstanceRef> picked;
  std::set<std::pair<std::string, std::size_t>> seen;
  // Support sets overlap across episodes; give up once new instances stop appearing.
  const std::uint64_t limit = 1000 + 100 * static_cast<std::uint64_t>(count);
  for (std::uint64_t i = 0; picked.size() < count; ++i) {
    if (i == limit) throw SamplingError("could not collect " + std::to_string(count) + " distinct support instances");
    for (const auto& ref : episode_at(split, spec, seed, i).support) {
      if (picked.size() < count && seen.emplace(ref.relation_id, ref.index).second) picked.push_back(ref);
    }
  }

  std::vector<EmbeddingRow> rows;
  SeedStream unused;
  constexpr std::size_t kBatch = 32;
  for (std::size_t start = 0; start < picked.size(); start += kBatch) {
    const std::size_t end = std::min(picked.size(), start + kBatch);
    std::vector<EncodedInput> inputs;
    for (std::size_t i = start; i < end; ++i) {
      inputs.push_back(encode_instance(split.relations.at(picked[i].relation_id).at(picked[i].index), model.vocab,
                                       model.max_len));
    }
    const PaddedBatch batch = pad_batch(inputs);
    const auto r = build_instance_embedding(
        extract_instance_reps(encode(model.params, batch, Mode::kEval, unused), batch), model.selector);
    const std::size_t d = r.dim(1);
    for (std::size_t i = start; i < end; ++i) {
      const auto first = r.data().begin() + static_cast<std::ptrdiff_t>((i - start) * d);
      rows.push_back({split_name, picked[i].relation_id, picked[i].index, "full", std::vector<float>(first, first + static_cast<std::ptrdiff_t>(d))});
    }
  }
  return rows;
}

}  // namespace multirep
