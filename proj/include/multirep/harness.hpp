#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "multirep/autodiff/gradcheck.hpp"
#include "multirep/corpus.hpp"
#include "multirep/encoder.hpp"
#include "multirep/episodes.hpp"
#include "multirep/multirep.hpp"
#include "multirep/objectives.hpp"
#include "multirep/textproc.hpp"

namespace multirep {

struct OptimizerConfig {
  std::string kind = "adam";
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  bool operator==(const OptimizerConfig&) const = default;
};

/// Where the data comes from. An empty train path selects the synthetic
/// corpus described by `synthetic`.
struct DataConfig {
  std::string train_path;
  std::string eval_path;
  std::string validation_path;
  std::string descriptions_path;
  SyntheticSpec synthetic;
};

struct RunConfig {
  EncoderConfig encoder;  // vocab_size is filled from the built vocabulary
  LossConfig loss;
  EpisodeSpec episode;
  RepSelector selector;
  OptimizerConfig optimizer;
  std::size_t iterations = 2000;
  std::size_t episodes_per_step = 2;
  std::size_t eval_episodes = 1000;
  std::size_t log_interval = 50;
  /// Save an intermediate checkpoint every this many steps (0: final only).
  std::size_t checkpoint_interval = 0;
  /// Evaluate on the validation split every this many steps and keep the
  /// best parameters (0 or no validation split: keep the final ones).
  std::size_t validation_interval = 0;
  std::size_t validation_episodes = 200;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t max_len = 128;
  std::size_t min_freq = 1;
  DataConfig data;
  std::string out_dir;

  /// Throws ConfigError on any inconsistent field.
  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
/// Missing keys keep their defaults; unknown keys are a ConfigError.
void from_json(const nlohmann::json& j, RunConfig& c);
RunConfig load_run_config(const std::filesystem::path& path);

/// Turns descriptions off everywhere: no description scoring, no L_RDCL and
/// no descriptions in episodes.
void disable_descriptions(RunConfig& config);

struct Dataset {
  DatasetSplit train;
  DatasetSplit eval;
  std::optional<DatasetSplit> validation;
  DescriptionSet descriptions;
};

/// Reads or generates the splits, checks that they are relation-disjoint and
/// that every relation has a description when descriptions are in use.
Dataset load_dataset(const RunConfig& config);

/// Vocabulary over the surface tokens of every split and every description.
Vocab dataset_vocab(const Dataset& data, std::size_t min_freq);

/// Every instance and description of a split, encoded once.
struct EncodedSplit {
  std::map<std::string, std::vector<EncodedInput>> instances;
  std::map<std::string, EncodedInput> descriptions;
};

EncodedSplit encode_split(const DatasetSplit& split, const DescriptionSet* descriptions, const Vocab& vocab,
                          std::size_t max_len);

template <typename T>
struct EpisodeOutput {
  LossBreakdown<T> losses;
  ad::Tensor<T> scores;  // [queries × n]
};

/// One episode through encoder, representations, prototypes and losses.
/// Support and query instances share one encoder pass; descriptions get a
/// second one.
template <typename T>
EpisodeOutput<T> forward_episode(const EncoderParams<T>& params, const Episode& episode, const EncodedSplit& data,
                                 const RepSelector& selector, const LossConfig& loss, Mode mode, SeedStream& stream);

struct Model {
  EncoderParams<float> params;
  Vocab vocab;
  RepSelector selector;
  LossConfig loss;
  std::size_t max_len = 128;
};

Model init_model(const RunConfig& config, const Vocab& vocab, std::uint64_t seed);
void save_model(const std::filesystem::path& path, const Model& model, const nlohmann::json& extra = {});
Model load_model(const std::filesystem::path& path);

class Adam {
 public:
  Adam(const OptimizerConfig& config, std::vector<ad::Tensor<float>> params);
  /// Applies the accumulated gradients and clears them.
  void step();
  std::size_t steps() const { return t_; }

 private:
  OptimizerConfig config_;
  std::vector<ad::Tensor<float>> params_;
  std::vector<std::vector<float>> m_, v_;
  std::size_t t_ = 0;
};

struct LogRecord {
  std::size_t step = 0;
  LossValues loss;  // mean over the steps since the previous record
};

void to_json(nlohmann::json& j, const LogRecord& r);

struct TrainResult {
  Model model;
  std::vector<LogRecord> history;
  std::optional<double> best_validation;
  std::size_t selected_step = 0;
};

struct TrainHooks {
  /// Called with every log record as it is produced.
  std::function<void(const LogRecord&)> on_log;
  /// Called every checkpoint_interval steps with the current model.
  std::function<void(std::size_t step, const Model&)> on_checkpoint;
};

/// Trains one model. A non-finite loss raises NumericalError naming the step
/// and the loss breakdown.
TrainResult train(const RunConfig& config, const Dataset& data, std::uint64_t seed, const TrainHooks& hooks = {});

/// Eval-mode embeddings of every instance and description of a split.
struct EmbeddingTable {
  std::map<std::string, std::vector<std::vector<float>>> instances;
  std::map<std::string, std::vector<float>> descriptions;
  std::size_t dim = 0;
};

EmbeddingTable embed_split(const Model& model, const DatasetSplit& split, const DescriptionSet* descriptions);

struct EvalResult {
  double accuracy = 0.0;
  std::size_t episodes = 0;
  std::size_t queries = 0;
};

/// Accuracy over `episodes` episodes of the stream keyed by `seed`. Eval mode
/// throughout; descriptions are used when both the model's loss config and
/// the spec ask for them.
EvalResult evaluate(const Model& model, const DatasetSplit& split, const DescriptionSet& descriptions,
                    const EpisodeSpec& spec, std::size_t episodes, std::uint64_t seed);

/// Accuracy mean and standard deviation over seeds (sample std, 0 for one
/// seed).
struct Metrics {
  double mean = 0.0;
  double std = 0.0;
  std::vector<double> per_seed;
};

Metrics summarize(const std::vector<double>& accuracies);
void to_json(nlohmann::json& j, const Metrics& m);

/// Key of the evaluation episode stream used for a model trained with `seed`.
std::uint64_t eval_stream_seed(std::uint64_t seed);

/// Accuracy on data.eval of a model trained on data.train with one seed.
double train_and_evaluate(const RunConfig& config, const Dataset& data, std::uint64_t seed);

/// Train on data.train and evaluate on data.eval for every configured seed.
Metrics run_experiment(const RunConfig& config, const Dataset& data);

enum class AblationArm { kNoRcl, kNoRdcl, kNoAvgPool, kNoEntityPair, kNoCls, kNoMask, kPrototypeAddition };

std::string_view to_string(AblationArm arm);
AblationArm parse_ablation_arm(std::string_view name);
inline constexpr std::array<AblationArm, 7> kAllArms = {
    AblationArm::kNoRcl, AblationArm::kNoRdcl, AblationArm::kNoCls,        AblationArm::kNoMask,
    AblationArm::kNoAvgPool, AblationArm::kNoEntityPair, AblationArm::kPrototypeAddition};

/// The config with exactly the arm's change applied.
RunConfig apply_arm(RunConfig config, AblationArm arm);

struct AblationRow {
  std::string arm;
  Metrics metrics;
};

struct AblationReport {
  std::size_t n = 0, k = 0;
  AblationRow full;
  std::vector<AblationRow> arms;
};

AblationReport ablate(const RunConfig& config, const Dataset& data, const std::vector<AblationArm>& arms);
/// Columns arm,n_way,k_shot,mean,std; the unmodified model is the "full" row.
void write_ablation_csv(std::ostream& out, const AblationReport& report);

struct SweepRow {
  std::size_t m = 0;
  std::string subset;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
};

struct SweepSummary {
  std::size_t m = 0;
  std::size_t subsets = 0;
  double mean = 0.0;          // over subsets and seeds
  double subset_std = 0.0;    // std across subsets, averaged over seeds
};

struct SweepReport {
  std::vector<SweepRow> rows;
  std::vector<SweepSummary> summary;
};

/// Trains and evaluates every non-empty representation subset for every seed.
SweepReport sweep_m(const RunConfig& config, const Dataset& data);
SweepReport summarize_sweep(std::vector<SweepRow> rows);
/// Columns M,subset,seed,accuracy.
void write_sweep_csv(std::ostream& out, const SweepReport& report);
/// Columns M,subsets,mean,subset_std.
void write_sweep_summary_csv(std::ostream& out, const SweepReport& report);

/// Support embeddings drawn from successive episodes of the stream keyed by
/// `seed` until `count` distinct instances are collected.
std::vector<EmbeddingRow> export_embeddings(const Model& model, const DatasetSplit& split, const std::string& split_name,
                                            const EpisodeSpec& spec, std::size_t count, std::uint64_t seed);

struct GradCheckReport {
  std::vector<ad::GradCheckEntry> entries;
  double seconds = 0.0;
  bool passed() const { return ad::all_passed(entries); }
};

/// Finite-difference checks of every autodiff op, the encoder (one layer,
/// d = 8, two heads, six tokens) and the total loss of a 2-way 1-shot episode,
/// all in double precision.
GradCheckReport run_gradcheck_suite(const ad::GradCheckOptions& options = {});

}  // namespace multirep
