#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "multirep/errors.hpp"
#include "multirep/harness.hpp"

namespace fs = std::filesystem;
using namespace multirep;

namespace {

struct Options {
  std::string config;
  std::string data;
  std::string eval_data;
  std::string validation_data;
  std::string descriptions;
  std::string out;
  std::uint64_t seed = 0;
  std::size_t n = 0, k = 0, q = 0, iterations = 0;
  bool no_descriptions = false;
  std::string score_mode;
  double tau = 0.0;

  CLI::Option* seed_opt = nullptr;
  CLI::Option* n_opt = nullptr;
  CLI::Option* k_opt = nullptr;
  CLI::Option* q_opt = nullptr;
  CLI::Option* iterations_opt = nullptr;
  CLI::Option* tau_opt = nullptr;
};

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config, "JSON run config");
  cmd->add_option("--data", o.data, "training split (FewRel JSON); omit for the synthetic corpus");
  cmd->add_option("--eval-data", o.eval_data, "evaluation split (FewRel JSON)");
  cmd->add_option("--validation-data", o.validation_data, "validation split for checkpoint selection");
  cmd->add_option("--descriptions", o.descriptions, "relation descriptions (JSON)");
  cmd->add_option("--out", o.out, "output directory");
  o.seed_opt = cmd->add_option("--seed", o.seed, "run a single seed instead of the configured list");
  o.n_opt = cmd->add_option("--n", o.n, "classes per episode");
  o.k_opt = cmd->add_option("--k", o.k, "support instances per class");
  o.q_opt = cmd->add_option("--q", o.q, "query instances per class");
  o.iterations_opt = cmd->add_option("--iterations", o.iterations, "training steps");
  cmd->add_flag("--no-descriptions", o.no_descriptions, "disable description scoring and its loss");
  cmd->add_option("--score-mode", o.score_mode, "separate | prototype_addition");
  o.tau_opt = cmd->add_option("--tau", o.tau, "contrastive temperature");
}

RunConfig resolve(const Options& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (!o.data.empty()) c.data.train_path = o.data;
  if (!o.eval_data.empty()) c.data.eval_path = o.eval_data;
  if (!o.validation_data.empty()) c.data.validation_path = o.validation_data;
  if (!o.descriptions.empty()) c.data.descriptions_path = o.descriptions;
  if (!o.out.empty()) c.out_dir = o.out;
  if (c.out_dir.empty()) c.out_dir = "out";
  if (o.seed_opt->count()) c.seeds = {o.seed};
  if (o.n_opt->count()) c.episode.n = o.n;
  if (o.k_opt->count()) c.episode.k = o.k;
  if (o.q_opt->count()) c.episode.q = o.q;
  if (o.iterations_opt->count()) c.iterations = o.iterations;
  if (!o.score_mode.empty()) c.loss.score_mode = parse_score_mode(o.score_mode);
  if (o.tau_opt->count()) c.loss.temperature = o.tau;
  if (o.no_descriptions) disable_descriptions(c);
  c.validate();
  return c;
}

fs::path out_dir(const RunConfig& c) {
  fs::path dir(c.out_dir);
  fs::create_directories(dir);
  return dir;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

std::string cell(const EpisodeSpec& spec) { return std::to_string(spec.n) + "-" + std::to_string(spec.k); }

nlohmann::json embedded_config(RunConfig c) {
  c.out_dir.clear();
  return c;
}

int cmd_train(const Options& o) {
  const RunConfig c = resolve(o);
  const fs::path dir = out_dir(c);
  const Dataset data = load_dataset(c);

  nlohmann::json runs = nlohmann::json::array();
  std::vector<double> accuracies;
  for (std::uint64_t seed : c.seeds) {
    auto log = open_out(dir / ("train_seed" + std::to_string(seed) + ".jsonl"));
    TrainHooks hooks;
    hooks.on_log = [&](const LogRecord& r) {
      nlohmann::json j = r;
      j["seed"] = seed;
      log << j.dump() << '\n';
      std::cout << j.dump() << std::endl;
    };
    hooks.on_checkpoint = [&](std::size_t step, const Model& m) {
      fs::create_directories(dir / "checkpoints");
      save_model(dir / "checkpoints" / ("seed" + std::to_string(seed) + "_step" + std::to_string(step) + ".ckpt"), m,
                 {{"seed", seed}, {"step", step}, {"config", embedded_config(c)}});
    };
    const TrainResult result = train(c, data, seed, hooks);
    save_model(dir / ("model_seed" + std::to_string(seed) + ".ckpt"), result.model,
               {{"seed", seed}, {"step", result.selected_step}, {"config", embedded_config(c)}});

    const double acc = evaluate(result.model, data.eval, data.descriptions, c.episode, c.eval_episodes,
                                eval_stream_seed(seed))
                           .accuracy;
    accuracies.push_back(acc);
    nlohmann::json run{{"seed", seed}, {"accuracy", acc}, {"selected_step", result.selected_step},
                       {"history", result.history}};
    run["best_validation"] = result.best_validation ? nlohmann::json(*result.best_validation) : nlohmann::json();
    runs.push_back(run);
  }
  const Metrics m = summarize(accuracies);
  write_json(dir / "metrics.json",
             {{"cell", cell(c.episode)}, {"eval_episodes", c.eval_episodes}, {"accuracy", m}, {"runs", runs}});
  std::cout << "accuracy " << cell(c.episode) << ": mean " << m.mean << " std " << m.std << std::endl;
  return 0;
}

DatasetSplit eval_split(const RunConfig& c, DescriptionSet& descriptions) {
  if (c.data.eval_path.empty()) {
    SyntheticCorpus corpus = generate_synthetic(c.data.synthetic);
    descriptions = std::move(corpus.descriptions);
    return std::move(corpus.eval);
  }
  if (!c.data.descriptions_path.empty()) descriptions = load_descriptions_json(c.data.descriptions_path);
  return load_fewrel_json(c.data.eval_path, SplitRole::kTest);
}

int cmd_eval(const Options& o, const std::string& checkpoint) {
  const RunConfig c = resolve(o);
  const fs::path dir = out_dir(c);
  Model model = load_model(checkpoint);
  if (!o.score_mode.empty()) model.loss.score_mode = parse_score_mode(o.score_mode);
  if (o.no_descriptions) model.loss.use_descriptions = false;
  DescriptionSet descriptions;
  const DatasetSplit split = eval_split(c, descriptions);

  std::vector<double> accuracies;
  for (std::uint64_t seed : c.seeds) {
    accuracies.push_back(
        evaluate(model, split, descriptions, c.episode, c.eval_episodes, eval_stream_seed(seed)).accuracy);
  }
  const Metrics m = summarize(accuracies);
  write_json(dir / "eval_metrics.json",
             {{"cell", cell(c.episode)}, {"eval_episodes", c.eval_episodes}, {"accuracy", m}});
  std::cout << "accuracy " << cell(c.episode) << ": mean " << m.mean << " std " << m.std << std::endl;
  return 0;
}

int cmd_ablate(const Options& o, const std::string& arm_list) {
  const RunConfig c = resolve(o);
  const fs::path dir = out_dir(c);
  std::vector<AblationArm> arms;
  if (arm_list.empty()) {
    arms.assign(kAllArms.begin(), kAllArms.end());
  } else {
    std::stringstream ss(arm_list);
    for (std::string name; std::getline(ss, name, ',');) arms.push_back(parse_ablation_arm(name));
  }
  const AblationReport report = ablate(c, load_dataset(c), arms);
  auto out = open_out(dir / "ablation.csv");
  write_ablation_csv(out, report);
  write_ablation_csv(std::cout, report);
  return 0;
}

int cmd_sweep(const Options& o) {
  const RunConfig c = resolve(o);
  const fs::path dir = out_dir(c);
  const SweepReport report = sweep_m(c, load_dataset(c));
  auto rows = open_out(dir / "sweep.csv");
  write_sweep_csv(rows, report);
  auto summary = open_out(dir / "sweep_summary.csv");
  write_sweep_summary_csv(summary, report);
  write_sweep_summary_csv(std::cout, report);
  return 0;
}

int cmd_export(const Options& o, const std::string& checkpoint, const std::string& split_name, std::size_t count) {
  const RunConfig c = resolve(o);
  const fs::path dir = out_dir(c);
  const Model model = load_model(checkpoint);
  const Dataset data = load_dataset(c);
  const DatasetSplit* split = nullptr;
  if (split_name == "train") {
    split = &data.train;
  } else if (split_name == "eval") {
    split = &data.eval;
  } else if (split_name == "validation" && data.validation) {
    split = &*data.validation;
  } else {
    throw ConfigError("no split named '" + split_name + "'");
  }
  const auto rows = export_embeddings(model, *split, split_name, c.episode, count, c.seeds.front());
  auto out = open_out(dir / "embeddings.csv");
  write_embeddings_csv(out, rows);
  std::cout << rows.size() << " embeddings written to " << (dir / "embeddings.csv").string() << std::endl;
  return 0;
}

int cmd_gradcheck(bool verbose) {
  const GradCheckReport report = run_gradcheck_suite();
  std::size_t failed = 0;
  for (const auto& e : report.entries) {
    if (!e.passed) ++failed;
    if (verbose || !e.passed) {
      std::cout << (e.passed ? "ok   " : "FAIL ") << e.name << " relative_error=" << e.relative_error << '\n';
    }
  }
  std::cout << report.entries.size() - failed << "/" << report.entries.size() << " tensors passed in "
            << report.seconds << " s" << std::endl;
  return failed == 0 ? 0 : 2;
}

int cmd_gen_synthetic(const SyntheticSpec& spec, const std::string& out) {
  const fs::path dir(out.empty() ? "synthetic" : out);
  fs::create_directories(dir);
  const SyntheticCorpus corpus = generate_synthetic(spec);
  save_fewrel_json(corpus.train, dir / "train.json");
  save_fewrel_json(corpus.eval, dir / "eval.json");
  save_descriptions_json(corpus.descriptions, dir / "descriptions.json");
  std::cout << corpus.train.relations.size() << " train and " << corpus.eval.relations.size()
            << " eval relations written to " << dir.string() << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot relation classification with multiple sentence representations"};
  app.require_subcommand(1);

  Options train_o, eval_o, ablate_o, sweep_o, export_o;
  auto* train_cmd = app.add_subcommand("train", "train and evaluate for every seed");
  add_common(train_cmd, train_o);

  std::string checkpoint;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the eval split");
  add_common(eval_cmd, eval_o);
  eval_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();

  std::string arms;
  auto* ablate_cmd = app.add_subcommand("ablate", "full model against ablation arms");
  add_common(ablate_cmd, ablate_o);
  ablate_cmd->add_option("--arms", arms, "comma-separated arms (default: all)");

  auto* sweep_cmd = app.add_subcommand("sweep-m", "accuracy for every representation subset");
  add_common(sweep_cmd, sweep_o);

  std::string export_checkpoint, split_name = "eval";
  std::size_t count = 120;
  auto* export_cmd = app.add_subcommand("export-embeddings", "write support embeddings as CSV");
  add_common(export_cmd, export_o);
  export_cmd->add_option("--checkpoint", export_checkpoint, "model checkpoint")->required();
  export_cmd->add_option("--split", split_name, "train | eval | validation");
  export_cmd->add_option("--count", count, "number of distinct support instances");

  bool verbose = false;
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of every gradient");
  grad_cmd->add_flag("--verbose", verbose, "list every tensor");

  SyntheticSpec synthetic;
  std::string synthetic_out;
  auto* gen_cmd = app.add_subcommand("gen-synthetic", "write the synthetic corpus as FewRel JSON");
  gen_cmd->add_option("--relations", synthetic.relations, "number of relations");
  gen_cmd->add_option("--instances", synthetic.instances_per_relation, "instances per relation");
  gen_cmd->add_option("--train-relations", synthetic.train_relations, "relations in the train split");
  gen_cmd->add_option("--seed", synthetic.seed, "generator seed");
  gen_cmd->add_option("--out", synthetic_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*train_cmd) return cmd_train(train_o);
    if (*eval_cmd) return cmd_eval(eval_o, checkpoint);
    if (*ablate_cmd) return cmd_ablate(ablate_o, arms);
    if (*sweep_cmd) return cmd_sweep(sweep_o);
    if (*export_cmd) return cmd_export(export_o, export_checkpoint, split_name, count);
    if (*grad_cmd) return cmd_gradcheck(verbose);
    if (*gen_cmd) return cmd_gen_synthetic(synthetic, synthetic_out);
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << std::endl;
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << std::endl;
    return 1;
  } catch (const SamplingError& e) {
    std::cerr << "sampling error: " << e.what() << std::endl;
    return 1;
  } catch (const EncodingError& e) {
    std::cerr << "encoding error: " << e.what() << std::endl;
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << std::endl;
    return 1;
  }
  return 1;
}
