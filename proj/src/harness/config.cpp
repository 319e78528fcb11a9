#include <fstream>
#include <set>

#include "multirep/errors.hpp"
#include "multirep/harness.hpp"

namespace multirep {

namespace {

void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.contains(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

nlohmann::json synthetic_json(const SyntheticSpec& s) {
  return {{"relations", s.relations},
          {"instances_per_relation", s.instances_per_relation},
          {"train_relations", s.train_relations},
          {"vocab_size", s.vocab_size},
          {"min_length", s.min_length},
          {"max_length", s.max_length},
          {"connectives_per_relation", s.connectives_per_relation},
          {"entities_per_pool", s.entities_per_pool},
          {"entity_types", s.entity_types},
          {"predicate_words", s.predicate_words},
          {"predicate_synonyms", s.predicate_synonyms},
          {"function_words", s.function_words},
          {"shared_connective_rate", s.shared_connective_rate},
          {"seed", s.seed}};
}

SyntheticSpec synthetic_from(const nlohmann::json& j) {
  SyntheticSpec s;
  check_keys(j, {"relations", "instances_per_relation", "train_relations", "vocab_size", "min_length",
                 "max_length", "connectives_per_relation", "entities_per_pool", "entity_types", "predicate_words", "predicate_synonyms",
                 "function_words", "shared_connective_rate", "seed"},
             "data.synthetic");
  s.relations = j.value("relations", s.relations);
  s.instances_per_relation = j.value("instances_per_relation", s.instances_per_relation);
  s.train_relations = j.value("train_relations", s.train_relations);
  s.vocab_size = j.value("vocab_size", s.vocab_size);
  s.min_length = j.value("min_length", s.min_length);
  s.max_length = j.value("max_length", s.max_length);
  s.connectives_per_relation = j.value("connectives_per_relation", s.connectives_per_relation);
  s.entities_per_pool = j.value("entities_per_pool", s.entities_per_pool);
  s.entity_types = j.value("entity_types", s.entity_types);
  s.predicate_words = j.value("predicate_words", s.predicate_words);
  s.predicate_synonyms = j.value("predicate_synonyms", s.predicate_synonyms);
  s.function_words = j.value("function_words", s.function_words);
  s.shared_connective_rate = j.value("shared_connective_rate", s.shared_connective_rate);
  s.seed = j.value("seed", s.seed);
  return s;
}

}  // namespace

void RunConfig::validate() const {
  EncoderConfig enc = encoder;
  if (enc.vocab_size == 0) enc.vocab_size = 1;
  enc.validate();
  loss.validate();
  if (loss.use_descriptions != episode.with_descriptions) {
    throw ConfigError("loss.use_descriptions and episode.with_descriptions must agree");
  }
  if (episode.n < 2 || episode.k < 1 || episode.queries_per_class() < 1) {
    throw ConfigError("episode needs n >= 2, k >= 1, q >= 1");
  }
  if (optimizer.kind != "adam") throw ConfigError("unsupported optimizer '" + optimizer.kind + "'");
  if (!(optimizer.lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0 && optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) {
    throw ConfigError("adam betas must lie in [0, 1)");
  }
  if (!(optimizer.eps > 0.0)) throw ConfigError("adam eps must be positive");
  if (iterations < 1) throw ConfigError("iterations must be at least 1");
  if (episodes_per_step < 1) throw ConfigError("episodes_per_step must be at least 1");
  if (eval_episodes < 1) throw ConfigError("eval_episodes must be at least 1");
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  if (max_len < 4 || max_len > encoder.max_positions) {
    throw ConfigError("max_len must lie in [4, encoder.max_positions]");
  }
  if (min_freq < 1) throw ConfigError("min_freq must be at least 1");
  if (log_interval < 1) throw ConfigError("log_interval must be at least 1");
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  nlohmann::json units = nlohmann::json::array();
  for (RepUnit u : c.selector.units()) units.push_back(to_string(u));
  j = nlohmann::json{
      {"encoder", c.encoder},
      {"loss", c.loss},
      {"episode", c.episode},
      {"selector", {{"units", units}, {"description_dropout", c.selector.description_dropout()}}},
      {"optimizer",
       {{"kind", c.optimizer.kind},
        {"lr", c.optimizer.lr},
        {"beta1", c.optimizer.beta1},
        {"beta2", c.optimizer.beta2},
        {"eps", c.optimizer.eps}}},
      {"iterations", c.iterations},
      {"episodes_per_step", c.episodes_per_step},
      {"eval_episodes", c.eval_episodes},
      {"log_interval", c.log_interval},
      {"checkpoint_interval", c.checkpoint_interval},
      {"validation_interval", c.validation_interval},
      {"validation_episodes", c.validation_episodes},
      {"seeds", c.seeds},
      {"max_len", c.max_len},
      {"min_freq", c.min_freq},
      {"data",
       {{"train", c.data.train_path},
        {"eval", c.data.eval_path},
        {"validation", c.data.validation_path},
        {"descriptions", c.data.descriptions_path},
        {"synthetic", synthetic_json(c.data.synthetic)}}},
      {"out_dir", c.out_dir}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  try {
    check_keys(j, {"encoder", "loss", "episode", "selector", "optimizer", "iterations", "episodes_per_step",
                   "eval_episodes", "log_interval", "checkpoint_interval", "validation_interval",
                   "validation_episodes", "seeds", "max_len", "min_freq", "data", "out_dir"},
               "run config");
    RunConfig d;
    c = d;
    if (j.contains("encoder")) {
      check_keys(j.at("encoder"), {"layers", "hidden", "heads", "ffn", "dropout", "max_positions", "vocab_size"},
                 "encoder");
      c.encoder = j.at("encoder").get<EncoderConfig>();
    }
    if (j.contains("loss")) {
      check_keys(j.at("loss"),
                 {"temperature", "use_rcl", "use_rdcl", "use_descriptions", "score_mode", "literal_contrastive"},
                 "loss");
      c.loss = j.at("loss").get<LossConfig>();
    }
    if (j.contains("episode")) {
      check_keys(j.at("episode"), {"n", "k", "q", "with_descriptions"}, "episode");
      c.episode = j.at("episode").get<EpisodeSpec>();
    }
    if (j.contains("selector")) {
      const auto& s = j.at("selector");
      check_keys(s, {"units", "description_dropout"}, "selector");
      std::vector<RepUnit> units;
      for (const auto& name : s.value("units", std::vector<std::string>{"avg_pool", "cls", "mask", "entity_pair"})) {
        units.push_back(parse_rep_unit(name));
      }
      c.selector = RepSelector(std::move(units), s.value("description_dropout", 0.10));
    }
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      check_keys(o, {"kind", "lr", "beta1", "beta2", "eps"}, "optimizer");
      c.optimizer.kind = o.value("kind", d.optimizer.kind);
      c.optimizer.lr = o.value("lr", d.optimizer.lr);
      c.optimizer.beta1 = o.value("beta1", d.optimizer.beta1);
      c.optimizer.beta2 = o.value("beta2", d.optimizer.beta2);
      c.optimizer.eps = o.value("eps", d.optimizer.eps);
    }
    c.iterations = j.value("iterations", d.iterations);
    c.episodes_per_step = j.value("episodes_per_step", d.episodes_per_step);
    c.eval_episodes = j.value("eval_episodes", d.eval_episodes);
    c.log_interval = j.value("log_interval", d.log_interval);
    c.checkpoint_interval = j.value("checkpoint_interval", d.checkpoint_interval);
    c.validation_interval = j.value("validation_interval", d.validation_interval);
    c.validation_episodes = j.value("validation_episodes", d.validation_episodes);
    c.seeds = j.value("seeds", d.seeds);
    c.max_len = j.value("max_len", d.max_len);
    c.min_freq = j.value("min_freq", d.min_freq);
    if (j.contains("data")) {
      const auto& dj = j.at("data");
      check_keys(dj, {"train", "eval", "validation", "descriptions", "synthetic"}, "data");
      c.data.train_path = dj.value("train", std::string());
      c.data.eval_path = dj.value("eval", std::string());
      c.data.validation_path = dj.value("validation", std::string());
      c.data.descriptions_path = dj.value("descriptions", std::string());
      if (dj.contains("synthetic")) c.data.synthetic = synthetic_from(dj.at("synthetic"));
    }
    c.out_dir = j.value("out_dir", d.out_dir);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed run config: ") + e.what());
  }
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  RunConfig c = j.get<RunConfig>();
  c.validate();
  return c;
}

void disable_descriptions(RunConfig& config) {
  config.loss.use_descriptions = false;
  config.loss.use_rdcl = false;
  config.episode.with_descriptions = false;
}

Dataset load_dataset(const RunConfig& config) {
  Dataset data;
  const DataConfig& dc = config.data;
  if (dc.train_path.empty()) {
    SyntheticCorpus corpus = generate_synthetic(dc.synthetic);
    data.train = std::move(corpus.train);
    data.eval = std::move(corpus.eval);
    data.descriptions = std::move(corpus.descriptions);
  } else {
    data.train = load_fewrel_json(dc.train_path, SplitRole::kTrain);
    if (!dc.eval_path.empty()) data.eval = load_fewrel_json(dc.eval_path, SplitRole::kTest);
    if (!dc.descriptions_path.empty()) data.descriptions = load_descriptions_json(dc.descriptions_path);
  }
  if (!dc.validation_path.empty()) data.validation = load_fewrel_json(dc.validation_path, SplitRole::kValidation);

  std::vector<const DatasetSplit*> splits{&data.train};
  if (!data.eval.relations.empty()) splits.push_back(&data.eval);
  if (data.validation) splits.push_back(&*data.validation);
  require_disjoint(splits);

  if (config.loss.use_descriptions) {
    for (const DatasetSplit* s : splits) {
      for (const auto& [id, _] : s->relations) {
        if (!data.descriptions.contains(id)) {
          throw ConfigError("relation " + id + " has no description; pass --no-descriptions or a descriptions file");
        }
      }
    }
  }
  return data;
}

Vocab dataset_vocab(const Dataset& data, std::size_t min_freq) {
  std::vector<const DatasetSplit*> splits{&data.train, &data.eval};
  if (data.validation) splits.push_back(&*data.validation);
  return build_vocab(splits, &data.descriptions, min_freq);
}

}  // namespace multirep
