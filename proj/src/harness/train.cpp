#include <cmath>
#include <numeric>

#include "multirep/errors.hpp"
#include "multirep/harness.hpp"

namespace multirep {

namespace {

// Stream ids that keep the independent random sequences of one seed apart.
constexpr std::uint64_t kDropoutStream = 0xd50;
constexpr std::uint64_t kTrainEpisodes = 0x7a1;
constexpr std::uint64_t kValidationEpisodes = 0x7a2;
constexpr std::uint64_t kEvalEpisodes = 0x7a3;

constexpr std::size_t kEmbedBatch = 32;

std::vector<std::size_t> index_range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> out(end - begin);
  std::iota(out.begin(), out.end(), begin);
  return out;
}

bool finite(const LossValues& v) {
  return std::isfinite(v.l_ce) && std::isfinite(v.l_rcl) && std::isfinite(v.l_rdcl) && std::isfinite(v.total);
}

std::string describe(const LossValues& v) {
  return "l_ce=" + std::to_string(v.l_ce) + " l_rcl=" + std::to_string(v.l_rcl) +
         " l_rdcl=" + std::to_string(v.l_rdcl) + " total=" + std::to_string(v.total);
}

}  // namespace

EncodedSplit encode_split(const DatasetSplit& split, const DescriptionSet* descriptions, const Vocab& vocab,
                          std::size_t max_len) {
  EncodedSplit out;
  for (const auto& [id, list] : split.relations) {
    auto& encoded = out.instances[id];
    encoded.reserve(list.size());
    for (const auto& inst : list) encoded.push_back(encode_instance(inst, vocab, max_len));
    if (descriptions) {
      auto it = descriptions->find(id);
      if (it == descriptions->end()) throw ConfigError("relation " + id + " has no description");
      out.descriptions.emplace(id, encode_description(it->second, vocab, max_len));
    }
  }
  return out;
}

template <typename T>
EpisodeOutput<T> forward_episode(const EncoderParams<T>& params, const Episode& episode, const EncodedSplit& data,
                                 const RepSelector& selector, const LossConfig& loss, Mode mode, SeedStream& stream) {
  const std::size_t classes = episode.relations.size();
  const std::size_t s = episode.support.size(), q = episode.query.size();
  std::vector<EncodedInput> inputs;
  inputs.reserve(s + q);
  for (const auto* list : {&episode.support, &episode.query}) {
    for (const auto& ref : *list) inputs.push_back(data.instances.at(ref.relation_id).at(ref.index));
  }
  const PaddedBatch batch = pad_batch(inputs);
  const RepSet<T> reps = extract_instance_reps(encode(params, batch, mode, stream), batch);

  const auto support_rows = index_range(0, s), query_rows = index_range(s, s + q);
  std::vector<ad::Tensor<T>> support_components;
  for (const auto& c : instance_components(reps, selector)) support_components.push_back(ad::gather_rows(c, support_rows));
  const ad::Tensor<T> r_all = build_instance_embedding(reps, selector);
  const ad::Tensor<T> r_support = ad::gather_rows(r_all, support_rows);
  const ad::Tensor<T> r_query = ad::gather_rows(r_all, query_rows);

  ad::Tensor<T> desc;
  const bool use_descriptions = loss.use_descriptions && episode.with_descriptions;
  if (use_descriptions) {
    std::vector<EncodedInput> d_inputs;
    for (const auto& id : episode.relations) {
      auto it = data.descriptions.find(id);
      if (it == data.descriptions.end()) throw ConfigError("relation " + id + " has no description");
      d_inputs.push_back(it->second);
    }
    const PaddedBatch d_batch = pad_batch(d_inputs);
    desc = build_description_embedding(encode(params, d_batch, mode, stream), d_batch, selector, mode, stream);
  }

  const auto prototypes = compute_prototypes(r_support, episode.support_labels, classes);
  EpisodeOutput<T> out;
  out.scores = score_queries(r_query, prototypes, desc, loss.score_mode);
  const auto l_ce = loss_ce(out.scores, episode.query_labels);
  ad::Tensor<T> l_rcl, l_rdcl;
  if (loss.use_rcl) l_rcl = loss_rcl(support_components, loss.temperature, loss.literal_contrastive);
  if (use_descriptions && loss.use_rdcl) {
    l_rdcl = loss_rdcl(r_support, episode.support_labels, desc, loss.temperature, loss.literal_contrastive);
  }
  out.losses = total_loss(l_ce, l_rcl, l_rdcl, loss);
  return out;
}

template EpisodeOutput<float> forward_episode<float>(const EncoderParams<float>&, const Episode&, const EncodedSplit&,
                                                     const RepSelector&, const LossConfig&, Mode, SeedStream&);
template EpisodeOutput<double> forward_episode<double>(const EncoderParams<double>&, const Episode&,
                                                       const EncodedSplit&, const RepSelector&, const LossConfig&,
                                                       Mode, SeedStream&);

Model init_model(const RunConfig& config, const Vocab& vocab, std::uint64_t seed) {
  EncoderConfig enc = config.encoder;
  enc.vocab_size = vocab.size();
  Model m;
  m.params = init_params<float>(enc, seed);
  m.vocab = vocab;
  m.selector = config.selector;
  m.loss = config.loss;
  m.max_len = config.max_len;
  return m;
}

void save_model(const std::filesystem::path& path, const Model& model, const nlohmann::json& extra) {
  nlohmann::json units = nlohmann::json::array();
  for (RepUnit u : model.selector.units()) units.push_back(to_string(u));
  nlohmann::json meta{{"vocab", model.vocab.tokens()},
                      {"selector", {{"units", units}, {"description_dropout", model.selector.description_dropout()}}},
                      {"loss", model.loss},
                      {"max_len", model.max_len}};
  if (!extra.is_null()) meta["extra"] = extra;
  save_checkpoint(path, model.params, meta);
}

Model load_model(const std::filesystem::path& path) {
  Checkpoint ck = load_checkpoint(path);
  Model m;
  try {
    const auto& meta = ck.metadata;
    m.vocab = Vocab::from_tokens(meta.at("vocab").get<std::vector<std::string>>());
    std::vector<RepUnit> units;
    for (const auto& name : meta.at("selector").at("units")) units.push_back(parse_rep_unit(name.get<std::string>()));
    m.selector = RepSelector(std::move(units), meta.at("selector").at("description_dropout").get<double>());
    m.loss = meta.at("loss").get<LossConfig>();
    m.max_len = meta.at("max_len").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint " + path.string() + " lacks model metadata: " + e.what());
  }
  if (m.vocab.size() != ck.params.config.vocab_size) {
    throw DataError("checkpoint vocabulary does not match its embedding table");
  }
  m.params = std::move(ck.params);
  return m;
}

Adam::Adam(const OptimizerConfig& config, std::vector<ad::Tensor<float>> params)
    : config_(config), params_(std::move(params)) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0f);
    v_.emplace_back(p.numel(), 0.0f);
  }
}

void Adam::step() {
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const double lr = config_.lr;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto data = params_[i].mutable_data();
    auto grad = params_[i].mutable_grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = grad[j];
      m[j] = static_cast<float>(b1 * m[j] + (1.0 - b1) * g);
      v[j] = static_cast<float>(b2 * v[j] + (1.0 - b2) * g * g);
      const double mhat = m[j] / c1, vhat = v[j] / c2;
      data[j] = static_cast<float>(data[j] - lr * mhat / (std::sqrt(vhat) + config_.eps));
      grad[j] = 0.0f;
    }
  }
}

void to_json(nlohmann::json& j, const LogRecord& r) {
  j = nlohmann::json{{"step", r.step},
                     {"l_ce", r.loss.l_ce},
                     {"l_rcl", r.loss.l_rcl},
                     {"l_rdcl", r.loss.l_rdcl},
                     {"total", r.loss.total}};
}

TrainResult train(const RunConfig& config, const Dataset& data, std::uint64_t seed, const TrainHooks& hooks) {
  config.validate();
  config.episode.validate(data.train.relations.size());
  const bool use_descriptions = config.loss.use_descriptions;
  const Vocab vocab = dataset_vocab(data, config.min_freq);

  TrainResult result;
  result.model = init_model(config, vocab, seed);
  Model& model = result.model;
  const EncodedSplit encoded = encode_split(data.train, use_descriptions ? &data.descriptions : nullptr, vocab,
                                            config.max_len);

  std::vector<ad::Tensor<float>> leaves;
  for (auto& [_, t] : model.params.named()) leaves.push_back(t);
  Adam adam(config.optimizer, leaves);

  SeedStream dropout_stream(seed, kDropoutStream);
  const std::uint64_t episode_seed = hash_combine(seed, kTrainEpisodes);
  const bool validate_periodically = data.validation && config.validation_interval > 0;
  std::optional<EncoderParams<float>> best;

  std::uint64_t episode_index = 0;
  LossValues window;
  std::size_t window_steps = 0;
  for (std::size_t step = 1; step <= config.iterations; ++step) {
    LossValues step_values;
    try {
      ad::Tape<float> tape;
      ad::TapeScope<float> scope(tape);
      ad::Tensor<float> total;
      for (std::size_t e = 0; e < config.episodes_per_step; ++e) {
        const Episode ep = episode_at(data.train, config.episode, episode_seed, episode_index++);
        auto out = forward_episode(model.params, ep, encoded, model.selector, model.loss, Mode::kTrain,
                                   dropout_stream);
        step_values += values_of(out.losses);
        total = total.defined() ? ad::add(total, out.losses.total) : out.losses.total;
      }
      if (!finite(step_values)) throw NumericalError("non-finite loss");
      tape.backward(total);
    } catch (const NumericalError& e) {
      throw NumericalError("training diverged at step " + std::to_string(step) + " (" + describe(step_values) +
                           "): " + e.what());
    }
    adam.step();

    window += step_values;
    ++window_steps;
    if (step % config.log_interval == 0 || step == config.iterations) {
      const double k = static_cast<double>(window_steps);
      LogRecord rec{step, {window.l_ce / k, window.l_rcl / k, window.l_rdcl / k, window.total / k}};
      result.history.push_back(rec);
      if (hooks.on_log) hooks.on_log(rec);
      window = {};
      window_steps = 0;
    }
    if (config.checkpoint_interval > 0 && step % config.checkpoint_interval == 0 && hooks.on_checkpoint) {
      hooks.on_checkpoint(step, model);
    }
    if (validate_periodically && (step % config.validation_interval == 0 || step == config.iterations)) {
      const double acc = evaluate(model, *data.validation, data.descriptions, config.episode,
                                  config.validation_episodes, hash_combine(seed, kValidationEpisodes))
                             .accuracy;
      if (!result.best_validation || acc > *result.best_validation) {
        result.best_validation = acc;
        result.selected_step = step;
        best = convert_params<float>(model.params);
      }
    }
  }
  if (best) {
    model.params = std::move(*best);
  } else {
    result.selected_step = config.iterations;
  }
  return result;
}

EmbeddingTable embed_split(const Model& model, const DatasetSplit& split, const DescriptionSet* descriptions) {
  EmbeddingTable table;
  SeedStream unused;
  auto rows_of = [](const ad::Tensor<float>& m, std::size_t r) {
    const std::size_t d = m.dim(1);
    return std::vector<float>(m.data().begin() + static_cast<std::ptrdiff_t>(r * d),
                              m.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
  };

  for (const auto& [id, list] : split.relations) {
    auto& out = table.instances[id];
    for (std::size_t start = 0; start < list.size(); start += kEmbedBatch) {
      std::vector<EncodedInput> inputs;
      for (std::size_t i = start; i < std::min(list.size(), start + kEmbedBatch); ++i) {
        inputs.push_back(encode_instance(list[i], model.vocab, model.max_len));
      }
      const PaddedBatch batch = pad_batch(inputs);
      const auto r = build_instance_embedding(extract_instance_reps(encode(model.params, batch, Mode::kEval, unused),
                                                                    batch),
                                              model.selector);
      table.dim = r.dim(1);
      for (std::size_t b = 0; b < batch.size; ++b) out.push_back(rows_of(r, b));
    }
  }

  if (descriptions) {
    const auto id_set = split.relation_ids();
    const std::vector<std::string> ids(id_set.begin(), id_set.end());
    for (std::size_t start = 0; start < ids.size(); start += kEmbedBatch) {
      std::vector<EncodedInput> inputs;
      const std::size_t end = std::min(ids.size(), start + kEmbedBatch);
      for (std::size_t i = start; i < end; ++i) {
        auto it = descriptions->find(ids[i]);
        if (it == descriptions->end()) throw ConfigError("relation " + ids[i] + " has no description");
        inputs.push_back(encode_description(it->second, model.vocab, model.max_len));
      }
      const PaddedBatch batch = pad_batch(inputs);
      const auto d = build_description_embedding(encode(model.params, batch, Mode::kEval, unused), batch,
                                                 model.selector, Mode::kEval, unused);
      for (std::size_t i = start; i < end; ++i) table.descriptions[ids[i]] = rows_of(d, i - start);
    }
  }
  return table;
}

EvalResult evaluate(const Model& model, const DatasetSplit& split, const DescriptionSet& descriptions,
                    const EpisodeSpec& spec, std::size_t episodes, std::uint64_t seed) {
  spec.validate(split.relations.size());
  const bool use_descriptions = model.loss.use_descriptions && spec.with_descriptions;
  const EmbeddingTable table = embed_split(model, split, use_descriptions ? &descriptions : nullptr);
  const std::size_t dim = table.dim;

  auto stack = [&](const std::vector<const std::vector<float>*>& rows) {
    std::vector<float> flat;
    flat.reserve(rows.size() * dim);
    for (const auto* r : rows) flat.insert(flat.end(), r->begin(), r->end());
    return ad::Tensor<float>::matrix(rows.size(), dim, std::move(flat));
  };

  EvalResult result;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < episodes; ++i) {
    const Episode ep = episode_at(split, spec, seed, i);
    std::vector<const std::vector<float>*> support, query, desc;
    for (const auto& ref : ep.support) support.push_back(&table.instances.at(ref.relation_id).at(ref.index));
    for (const auto& ref : ep.query) query.push_back(&table.instances.at(ref.relation_id).at(ref.index));
    ad::Tensor<float> d;
    if (use_descriptions) {
      for (const auto& id : ep.relations) desc.push_back(&table.descriptions.at(id));
      d = stack(desc);
    }
    const auto prototypes = compute_prototypes(stack(support), ep.support_labels, ep.relations.size());
    const auto predicted = predict(score_queries(stack(query), prototypes, d, model.loss.score_mode));
    for (std::size_t j = 0; j < predicted.size(); ++j) correct += predicted[j] == ep.query_labels[j] ? 1 : 0;
    result.queries += predicted.size();
  }
  result.episodes = episodes;
  result.accuracy = result.queries ? static_cast<double>(correct) / static_cast<double>(result.queries) : 0.0;
  return result;
}

Metrics summarize(const std::vector<double>& accuracies) {
  Metrics m;
  m.per_seed = accuracies;
  if (accuracies.empty()) return m;
  const double n = static_cast<double>(accuracies.size());
  m.mean = std::accumulate(accuracies.begin(), accuracies.end(), 0.0) / n;
  if (accuracies.size() > 1) {
    double ss = 0.0;
    for (double a : accuracies) ss += (a - m.mean) * (a - m.mean);
    m.std = std::sqrt(ss / (n - 1.0));
  }
  return m;
}

void to_json(nlohmann::json& j, const Metrics& m) {
  j = nlohmann::json{{"mean", m.mean}, {"std", m.std}, {"per_seed", m.per_seed}};
}

std::uint64_t eval_stream_seed(std::uint64_t seed) { return hash_combine(seed, kEvalEpisodes); }

double train_and_evaluate(const RunConfig& config, const Dataset& data, std::uint64_t seed) {
  const TrainResult trained = train(config, data, seed);
  return evaluate(trained.model, data.eval, data.descriptions, config.episode, config.eval_episodes,
                  eval_stream_seed(seed))
      .accuracy;
}

Metrics run_experiment(const RunConfig& config, const Dataset& data) {
  std::vector<double> accuracies;
  for (std::uint64_t seed : config.seeds) accuracies.push_back(train_and_evaluate(config, data, seed));
  return summarize(accuracies);
}

}  // namespace multirep
