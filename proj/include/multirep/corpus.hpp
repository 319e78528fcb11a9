#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace multirep {

/// Inclusive token span.
struct Span {
  std::size_t start = 0;
  std::size_t end = 0;

  bool contains(std::size_t i) const { return i >= start && i <= end; }
  std::size_t length() const { return end - start + 1; }
  friend bool operator==(const Span&, const Span&) = default;
};

struct RelationInstance {
  std::vector<std::string> tokens;
  Span head;
  Span tail;
  std::string relation_id;

  friend bool operator==(const RelationInstance&, const RelationInstance&) = default;
};

struct RelationDescription {
  std::string relation_id;
  std::string name;
  std::string text;

  friend bool operator==(const RelationDescription&, const RelationDescription&) = default;
};

using DescriptionSet = std::map<std::string, RelationDescription>;

enum class SplitRole { kTrain, kValidation, kTest };

std::string to_string(SplitRole role);

struct DatasetSplit {
  std::map<std::string, std::vector<RelationInstance>> relations;
  SplitRole role = SplitRole::kTrain;

  std::set<std::string> relation_ids() const;
  std::size_t instance_count() const;
  friend bool operator==(const DatasetSplit&, const DatasetSplit&) = default;
};

/// Throws DataError when spans fall outside the tokens, are reversed, or
/// overlap.
void validate_instance(const RelationInstance& instance);

/// Reads the FewRel release layout: relation id → [{tokens, h, t}], where h
/// and t are [name, entity id, [[token indices], ...]]. The first mention is
/// used; its first and last index give the span.
DatasetSplit load_fewrel_json(const std::filesystem::path& path, SplitRole role = SplitRole::kTrain);
DatasetSplit parse_fewrel_json(const std::string& text, SplitRole role = SplitRole::kTrain);
void save_fewrel_json(const DatasetSplit& split, const std::filesystem::path& path);
std::string dump_fewrel_json(const DatasetSplit& split);

/// Reads relation id → [name, description]. An empty file is an empty set.
DescriptionSet load_descriptions_json(const std::filesystem::path& path);
DescriptionSet parse_descriptions_json(const std::string& text);
void save_descriptions_json(const DescriptionSet& descriptions, const std::filesystem::path& path);

/// Splits off the relations in `ids`: returns (selected, remainder).
std::pair<DatasetSplit, DatasetSplit> split_relations(const DatasetSplit& split,
                                                      const std::set<std::string>& ids);

/// Throws ConfigError if any relation id appears in more than one split.
void require_disjoint(const std::vector<const DatasetSplit*>& splits);

struct SyntheticSpec {
  std::size_t relations = 12;
  std::size_t instances_per_relation = 50;
  /// The first `train_relations` relation ids go to the train split, the rest
  /// to the eval split.
  std::size_t train_relations = 7;
  /// Number of distinct surface words available to the generator.
  std::size_t vocab_size = 400;
  std::size_t min_length = 6;
  std::size_t max_length = 10;
  std::size_t connectives_per_relation = 3;
  std::size_t entities_per_pool = 10;
  /// Entity types; each relation pair draws its head and tail pools from a
  /// distinct ordered pair of types.
  std::size_t entity_types = 3;
  /// Predicates shared across relations; relation r uses predicate r mod
  /// this. Each predicate is realized by one of `predicate_synonyms` words.
  std::size_t predicate_words = 6;
  std::size_t predicate_synonyms = 1;
  std::size_t function_words = 6;
  /// Probability that an instance uses the connective shared with its paired
  /// relation instead of one of its own.
  double shared_connective_rate = 0.15;
  std::uint64_t seed = 0;
};

struct SyntheticCorpus {
  DatasetSplit train;
  DatasetSplit eval;
  DescriptionSet descriptions;
};

/// Templated relation grammar. Relations come in confusable pairs (2r, 2r+1)
/// that draw head and tail names from the same entity pools and differ only
/// in their connective phrases; one connective per pair is shared. Held-out
/// relations are new combinations of entity types and predicate words that
/// also occur in training relations.
SyntheticCorpus generate_synthetic(const SyntheticSpec& spec);

}  // namespace multirep
