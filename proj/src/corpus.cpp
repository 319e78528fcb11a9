#include "multirep/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <optional>
#include <nlohmann/json.hpp>
#include <sstream>
#include <unordered_set>

#include "multirep/errors.hpp"
#include "multirep/random.hpp"

namespace multirep {

using nlohmann::json;

std::string to_string(SplitRole role) {
  switch (role) {
    case SplitRole::kTrain:
      return "train";
    case SplitRole::kValidation:
      return "validation";
    case SplitRole::kTest:
      return "test";
  }
  return "unknown";
}

std::set<std::string> DatasetSplit::relation_ids() const {
  std::set<std::string> ids;
  for (const auto& [id, _] : relations) ids.insert(id);
  return ids;
}

std::size_t DatasetSplit::instance_count() const {
  std::size_t n = 0;
  for (const auto& [_, instances] : relations) n += instances.size();
  return n;
}

void validate_instance(const RelationInstance& instance) {
  const std::size_t n = instance.tokens.size();
  auto check = [&](const Span& s, const char* which) {
    if (s.start > s.end) throw DataError(std::string(which) + " span is reversed");
    if (s.end >= n) {
      throw DataError(std::string(which) + " span end " + std::to_string(s.end) +
                      " exceeds token count " + std::to_string(n));
    }
  };
  check(instance.head, "head");
  check(instance.tail, "tail");
  if (instance.head.start <= instance.tail.end && instance.tail.start <= instance.head.end) {
    throw DataError("head and tail spans overlap");
  }
}

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

// Parses a top-level object, rejecting repeated keys (which the default
// parser would silently collapse).
json parse_unique_object(const std::string& text, const char* what) {
  std::set<std::string> seen;
  json::parser_callback_t cb = [&](int depth, json::parse_event_t event, json& parsed) {
    if (depth == 1 && event == json::parse_event_t::key) {
      const auto key = parsed.get<std::string>();
      if (!seen.insert(key).second) {
        throw DataError(std::string(what) + ": duplicate relation id '" + key + "'");
      }
    }
    return true;
  };
  json doc;
  try {
    doc = json::parse(text, cb);
  } catch (const json::exception& e) {
    throw DataError(std::string(what) + ": " + e.what());
  }
  if (!doc.is_object()) throw DataError(std::string(what) + ": top level must be an object");
  return doc;
}

Span parse_mention(const json& mention) {
  if (!mention.is_array() || mention.size() < 3 || !mention[2].is_array() || mention[2].empty()) {
    throw DataError("mention must be [name, id, [[indices], ...]]");
  }
  const json& first = mention[2][0];
  if (!first.is_array() || first.empty()) throw DataError("mention index list is empty");
  const auto front = first.front().get<long long>();
  const auto back = first.back().get<long long>();
  if (front < 0 || back < 0) throw DataError("negative token index");
  return Span{static_cast<std::size_t>(front), static_cast<std::size_t>(back)};
}

json mention_json(const RelationInstance& inst, const Span& span) {
  std::string name;
  json indices = json::array();
  for (std::size_t i = span.start; i <= span.end; ++i) {
    if (i > span.start) name += " ";
    name += inst.tokens[i];
    indices.push_back(i);
  }
  return json::array({name, "", json::array({indices})});
}

}  // namespace

DatasetSplit parse_fewrel_json(const std::string& text, SplitRole role) {
  const json doc = parse_unique_object(text, "FewRel data");
  DatasetSplit split;
  split.role = role;
  for (const auto& [rel, list] : doc.items()) {
    if (!list.is_array()) throw DataError("relation " + rel + ": expected a list of instances");
    auto& out = split.relations[rel];
    for (std::size_t i = 0; i < list.size(); ++i) {
      try {
        const json& item = list[i];
        RelationInstance inst;
        inst.tokens = item.at("tokens").get<std::vector<std::string>>();
        inst.head = parse_mention(item.at("h"));
        inst.tail = parse_mention(item.at("t"));
        inst.relation_id = rel;
        validate_instance(inst);
        out.push_back(std::move(inst));
      } catch (const json::exception& e) {
        throw DataError("relation " + rel + " instance " + std::to_string(i) + ": " + e.what());
      } catch (const DataError& e) {
        throw DataError("relation " + rel + " instance " + std::to_string(i) + ": " + e.what());
      }
    }
  }
  return split;
}

DatasetSplit load_fewrel_json(const std::filesystem::path& path, SplitRole role) {
  return parse_fewrel_json(read_file(path), role);
}

std::string dump_fewrel_json(const DatasetSplit& split) {
  json doc = json::object();
  for (const auto& [rel, instances] : split.relations) {
    json list = json::array();
    for (const auto& inst : instances) {
      list.push_back({{"tokens", inst.tokens},
                      {"h", mention_json(inst, inst.head)},
                      {"t", mention_json(inst, inst.tail)}});
    }
    doc[rel] = std::move(list);
  }
  return doc.dump();
}

void save_fewrel_json(const DatasetSplit& split, const std::filesystem::path& path) {
  write_file(path, dump_fewrel_json(split));
}

DescriptionSet parse_descriptions_json(const std::string& text) {
  if (std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isspace(c); })) {
    return {};
  }
  const json doc = parse_unique_object(text, "relation descriptions");
  DescriptionSet out;
  for (const auto& [rel, entry] : doc.items()) {
    if (!entry.is_array() || entry.size() != 2 || !entry[0].is_string() || !entry[1].is_string()) {
      throw DataError("description " + rel + ": expected [name, description]");
    }
    out[rel] = RelationDescription{rel, entry[0].get<std::string>(), entry[1].get<std::string>()};
  }
  return out;
}

DescriptionSet load_descriptions_json(const std::filesystem::path& path) {
  return parse_descriptions_json(read_file(path));
}

void save_descriptions_json(const DescriptionSet& descriptions, const std::filesystem::path& path) {
  json doc = json::object();
  for (const auto& [rel, d] : descriptions) doc[rel] = json::array({d.name, d.text});
  write_file(path, doc.dump(1));
}

std::pair<DatasetSplit, DatasetSplit> split_relations(const DatasetSplit& split,
                                                      const std::set<std::string>& ids) {
  DatasetSplit selected, rest;
  selected.role = rest.role = split.role;
  for (const auto& id : ids) {
    if (!split.relations.contains(id)) throw ConfigError("unknown relation id '" + id + "'");
  }
  for (const auto& [rel, instances] : split.relations) {
    (ids.contains(rel) ? selected : rest).relations[rel] = instances;
  }
  return {std::move(selected), std::move(rest)};
}

void require_disjoint(const std::vector<const DatasetSplit*>& splits) {
  std::map<std::string, std::size_t> owner;
  for (std::size_t i = 0; i < splits.size(); ++i) {
    for (const auto& [rel, _] : splits[i]->relations) {
      auto [it, inserted] = owner.emplace(rel, i);
      if (!inserted) {
        throw ConfigError("relation '" + rel + "' appears in both " +
                          to_string(splits[it->second]->role) + " and " +
                          to_string(splits[i]->role) + " splits");
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Synthetic corpus

namespace {

std::vector<std::string> pseudo_words(std::size_t count, std::mt19937_64& rng) {
  static constexpr std::string_view kOnsets = "bdfgklmnprstvz";
  static constexpr std::string_view kVowels = "aeiou";
  std::vector<std::string> words;
  std::unordered_set<std::string> seen;
  while (words.size() < count) {
    const std::size_t syllables = 2 + uniform_index(rng, 2);
    std::string w;
    for (std::size_t s = 0; s < syllables; ++s) {
      w += kOnsets[uniform_index(rng, kOnsets.size())];
      w += kVowels[uniform_index(rng, kVowels.size())];
    }
    if (seen.insert(w).second) words.push_back(std::move(w));
  }
  return words;
}

struct Connective {
  std::vector<std::string> words;
  bool inverse = false;  // tail mentioned before head
  // Position of the predicate in `words`, filled per instance by one of the
  // predicate's synonyms.
  std::optional<std::size_t> slot;
  std::size_t predicate = 0;
};

std::string relation_id(std::size_t r) {
  return (r < 10 ? "S0" : "S") + std::to_string(r);
}

}  // namespace

SyntheticCorpus generate_synthetic(const SyntheticSpec& spec) {
  if (spec.relations < 4) throw ConfigError("synthetic corpus needs at least 4 relations");
  if (spec.train_relations > spec.relations) {
    throw ConfigError("train_relations exceeds relation count");
  }
  if (spec.instances_per_relation == 0 || spec.connectives_per_relation == 0 ||
      spec.entities_per_pool == 0 || spec.predicate_words < 2 || spec.predicate_synonyms == 0 ||
      spec.function_words == 0) {
    throw ConfigError("synthetic counts must be positive (and predicate_words >= 2)");
  }
  if (spec.min_length > spec.max_length) throw ConfigError("min_length exceeds max_length");
  if (!(spec.shared_connective_rate >= 0.0 && spec.shared_connective_rate <= 1.0)) {
    throw ConfigError("shared_connective_rate must lie in [0, 1]");
  }
  const std::size_t pairs = (spec.relations + 1) / 2;
  const std::size_t types = spec.entity_types;
  if (types < 2 || pairs > types * (types - 1)) {
    throw ConfigError(std::to_string(pairs) + " relation pairs need distinct entity type combinations; " +
                      std::to_string(types) + " types give " + std::to_string(types < 2 ? 0 : types * (types - 1)));
  }

  const std::size_t cpr = spec.connectives_per_relation;
  const std::size_t type_words = spec.entities_per_pool + (spec.entities_per_pool + 1) / 2;
  const std::size_t reserved = types * (type_words + 1) + spec.predicate_words * spec.predicate_synonyms +
                               spec.function_words + pairs + spec.relations;
  constexpr std::size_t kMinFillers = 20;
  if (spec.vocab_size < reserved + kMinFillers) {
    throw ConfigError("vocab_size " + std::to_string(spec.vocab_size) + " too small; need " +
                      std::to_string(reserved + kMinFillers));
  }

  std::mt19937_64 rng = make_engine(spec.seed, 0x5e7);
  const std::vector<std::string> words = pseudo_words(spec.vocab_size, rng);
  std::size_t next = 0;
  auto take = [&] { return words[next++]; };
  auto take_n = [&](std::size_t n) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(take());
    return out;
  };

  // Shared lexicon: entity types with their word lists, predicate words and
  // function words. Relations differ in how they combine these.
  std::vector<std::vector<std::string>> type_lexicon(types);
  std::vector<std::string> type_names;
  for (auto& list : type_lexicon) {
    list = take_n(type_words);
    type_names.push_back(take());
  }
  std::vector<std::vector<std::string>> predicates(spec.predicate_words);
  for (auto& synonyms : predicates) synonyms = take_n(spec.predicate_synonyms);
  const std::vector<std::string> function = take_n(spec.function_words);
  const std::vector<std::string> pair_words = take_n(pairs);

  // Pair p: head and tail type, distinct combination per pair. Pools are
  // per-pair subsets of the type word lists.
  struct Pair {
    std::size_t head_type = 0, tail_type = 0;
    std::vector<std::vector<std::string>> head_pool, tail_pool;
    Connective shared;
  };
  std::vector<Pair> pair_info(pairs);
  auto make_pool = [&](const std::vector<std::string>& lexicon) {
    std::vector<std::string> chosen = lexicon;
    shuffle(chosen, rng);
    chosen.resize(spec.entities_per_pool);
    std::vector<std::vector<std::string>> pool;
    for (std::size_t k = 0; k < chosen.size(); ++k) {
      std::vector<std::string> name{chosen[k]};
      if (chosen.size() > 1 && uniform_real(rng) < 0.3) name.push_back(chosen[(k + 1) % chosen.size()]);
      pool.push_back(std::move(name));
    }
    return pool;
  };
  for (std::size_t p = 0; p < pairs; ++p) {
    Pair& pi = pair_info[p];
    pi.head_type = p % types;
    pi.tail_type = (p + 1 + p / types) % types;
    pi.head_pool = make_pool(type_lexicon[pi.head_type]);
    pi.tail_pool = make_pool(type_lexicon[pi.tail_type]);
    pi.shared = {{function[p % function.size()], pair_words[p]}, false, std::nullopt, 0};
  }

  // Own connectives of relation r all carry its predicate; variants differ in
  // the function word, word order and argument order.
  std::vector<std::vector<Connective>> own(spec.relations);
  for (std::size_t r = 0; r < spec.relations; ++r) {
    const std::size_t pred = r % predicates.size();
    for (std::size_t v = 0; v < cpr; ++v) {
      const std::string& fn = function[(r + v) % function.size()];
      Connective c;
      c.words = v % 2 == 0 ? std::vector<std::string>{fn, predicates[pred][0]}
                           : std::vector<std::string>{predicates[pred][0], fn};
      c.slot = v % 2 == 0 ? 1 : 0;
      c.predicate = pred;
      c.inverse = cpr >= 2 && v == cpr - 1;
      own[r].push_back(std::move(c));
    }
  }
  std::vector<std::string> names = take_n(spec.relations);
  const std::vector<std::string> fillers(words.begin() + static_cast<std::ptrdiff_t>(next), words.end());

  SyntheticCorpus corpus;
  corpus.train.role = SplitRole::kTrain;
  corpus.eval.role = SplitRole::kValidation;

  for (std::size_t r = 0; r < spec.relations; ++r) {
    const std::size_t p = r / 2;
    const Pair& pi = pair_info[p];
    const bool has_partner = (r ^ 1U) < spec.relations;

    const std::string id = relation_id(r);
    auto& out = (r < spec.train_relations ? corpus.train : corpus.eval).relations[id];

    for (std::size_t i = 0; i < spec.instances_per_relation; ++i) {
      Connective conn = (has_partner && uniform_real(rng) < spec.shared_connective_rate)
                            ? pi.shared
                            : own[r][uniform_index(rng, cpr)];
      if (conn.slot) {
        const auto& synonyms = predicates[conn.predicate];
        conn.words[*conn.slot] = synonyms[uniform_index(rng, synonyms.size())];
      }
      const auto& head = pi.head_pool[uniform_index(rng, pi.head_pool.size())];
      const auto& tail = pi.tail_pool[uniform_index(rng, pi.tail_pool.size())];
      const auto& first = conn.inverse ? tail : head;
      const auto& second = conn.inverse ? head : tail;
      const bool gap = uniform_real(rng) < 0.3;

      const std::size_t core = first.size() + conn.words.size() + second.size() + (gap ? 1 : 0);
      const std::size_t length =
          std::max(core, spec.min_length + uniform_index(rng, spec.max_length - spec.min_length + 1));
      const std::size_t filler_count = length - core;
      const std::size_t prefix = uniform_index(rng, filler_count + 1);
      auto filler = [&] { return fillers[uniform_index(rng, fillers.size())]; };

      RelationInstance inst;
      inst.relation_id = id;
      for (std::size_t k = 0; k < prefix; ++k) inst.tokens.push_back(filler());
      const Span first_span{inst.tokens.size(), inst.tokens.size() + first.size() - 1};
      inst.tokens.insert(inst.tokens.end(), first.begin(), first.end());
      if (gap) inst.tokens.push_back(filler());
      inst.tokens.insert(inst.tokens.end(), conn.words.begin(), conn.words.end());
      const Span second_span{inst.tokens.size(), inst.tokens.size() + second.size() - 1};
      inst.tokens.insert(inst.tokens.end(), second.begin(), second.end());
      for (std::size_t k = prefix; k < filler_count; ++k) inst.tokens.push_back(filler());
      inst.head = conn.inverse ? second_span : first_span;
      inst.tail = conn.inverse ? first_span : second_span;
      validate_instance(inst);
      out.push_back(std::move(inst));
    }

    // Verbalized generating templates, with the entity types named and each
    // predicate given by its first synonym.
    std::string text;
    auto verbalize = [&](const Connective& c) {
      if (!text.empty()) text += " or ";
      const std::string subject = "subject " + type_names[pi.head_type];
      const std::string object = "object " + type_names[pi.tail_type];
      text += c.inverse ? object : subject;
      for (const auto& w : c.words) text += " " + w;
      text += " " + (c.inverse ? subject : object);
    };
    for (const auto& c : own[r]) verbalize(c);
    if (has_partner) verbalize(pi.shared);
    corpus.descriptions[id] = RelationDescription{id, names[r], text};
  }
  return corpus;
}

}  // namespace multirep
