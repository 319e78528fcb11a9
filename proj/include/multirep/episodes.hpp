#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "multirep/corpus.hpp"

namespace multirep {

struct EpisodeSpec {
  std::size_t n = 5;
  std::size_t k = 1;
  /// Queries per class; unset means k.
  std::optional<std::size_t> q;
  bool with_descriptions = true;

  std::size_t queries_per_class() const { return q.value_or(k); }
  /// Throws ConfigError unless n >= 2, k >= 1, q >= 1 and n <= available.
  void validate(std::size_t available_relations) const;

  bool operator==(const EpisodeSpec&) const = default;
};

void to_json(nlohmann::json& j, const EpisodeSpec& s);
void from_json(const nlohmann::json& j, EpisodeSpec& s);

struct InstanceRef {
  std::string relation_id;
  std::size_t index = 0;  // position within the relation's instance list

  bool operator==(const InstanceRef&) const = default;
};

/// Class c of the episode is relations[c]. Support and query lists are
/// class-major: entries c*k .. c*k+k-1 belong to class c.
struct Episode {
  std::vector<std::string> relations;
  std::vector<InstanceRef> support;
  std::vector<std::size_t> support_labels;
  std::vector<InstanceRef> query;
  std::vector<std::size_t> query_labels;
  bool with_descriptions = true;
  std::uint64_t seed = 0;
  std::uint64_t index = 0;

  bool operator==(const Episode&) const = default;
};

void to_json(nlohmann::json& j, const Episode& e);

/// Draws n relations uniformly without replacement, then k + q instances of
/// each without replacement; the first k are support. A relation with fewer
/// than k + q instances is a SamplingError naming it.
Episode sample_episode(const DatasetSplit& split, const EpisodeSpec& spec, std::mt19937_64& rng);

/// The episode at position `index` of the stream keyed by `seed`.
Episode episode_at(const DatasetSplit& split, const EpisodeSpec& spec, std::uint64_t seed, std::uint64_t index);

/// Episodes 0 .. count-1 of the stream keyed by `seed`.
std::vector<Episode> episode_stream(const DatasetSplit& split, const EpisodeSpec& spec, std::uint64_t seed,
                                    std::size_t count);

}  // namespace multirep
