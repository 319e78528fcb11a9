#include "multirep/episodes.hpp"

#include <numeric>

#include "multirep/errors.hpp"
#include "multirep/random.hpp"

namespace multirep {

void EpisodeSpec::validate(std::size_t available_relations) const {
  if (n < 2) throw ConfigError("episodes need at least 2 classes");
  if (k < 1 || queries_per_class() < 1) throw ConfigError("k and q must be at least 1");
  if (n > available_relations) {
    throw ConfigError(std::to_string(n) + "-way episodes need " + std::to_string(n) + " relations, split has " +
                      std::to_string(available_relations));
  }
}

void to_json(nlohmann::json& j, const EpisodeSpec& s) {
  j = nlohmann::json{{"n", s.n}, {"k", s.k}, {"with_descriptions", s.with_descriptions}};
  j["q"] = s.q ? nlohmann::json(*s.q) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, EpisodeSpec& s) {
  EpisodeSpec d;
  s.n = j.value("n", d.n);
  s.k = j.value("k", d.k);
  s.q = j.contains("q") && !j.at("q").is_null() ? std::optional<std::size_t>(j.at("q").get<std::size_t>())
                                                : std::nullopt;
  s.with_descriptions = j.value("with_descriptions", d.with_descriptions);
}

void to_json(nlohmann::json& j, const Episode& e) {
  auto refs = [](const std::vector<InstanceRef>& list) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : list) out.push_back({{"relation", r.relation_id}, {"index", r.index}});
    return out;
  };
  j = nlohmann::json{{"seed", e.seed},
                     {"index", e.index},
                     {"relations", e.relations},
                     {"support", refs(e.support)},
                     {"support_labels", e.support_labels},
                     {"query", refs(e.query)},
                     {"query_labels", e.query_labels},
                     {"with_descriptions", e.with_descriptions}};
}

Episode sample_episode(const DatasetSplit& split, const EpisodeSpec& spec, std::mt19937_64& rng) {
  spec.validate(split.relations.size());
  const std::size_t q = spec.queries_per_class();
  std::vector<const std::string*> ids;
  for (const auto& [id, _] : split.relations) ids.push_back(&id);

  // Partial Fisher-Yates: the first n slots become the episode's classes.
  for (std::size_t i = 0; i < spec.n; ++i) {
    std::swap(ids[i], ids[i + uniform_index(rng, ids.size() - i)]);
  }

  Episode e;
  e.with_descriptions = spec.with_descriptions;
  for (std::size_t c = 0; c < spec.n; ++c) {
    const std::string& id = *ids[c];
    const std::size_t available = split.relations.at(id).size();
    if (available < spec.k + q) {
      throw SamplingError("relation " + id + " has " + std::to_string(available) + " instances, episode needs " +
                          std::to_string(spec.k + q));
    }
    std::vector<std::size_t> pick(available);
    std::iota(pick.begin(), pick.end(), 0);
    for (std::size_t i = 0; i < spec.k + q; ++i) {
      std::swap(pick[i], pick[i + uniform_index(rng, available - i)]);
    }
    e.relations.push_back(id);
    for (std::size_t i = 0; i < spec.k; ++i) {
      e.support.push_back({id, pick[i]});
      e.support_labels.push_back(c);
    }
    for (std::size_t i = spec.k; i < spec.k + q; ++i) {
      e.query.push_back({id, pick[i]});
      e.query_labels.push_back(c);
    }
  }
  return e;
}

Episode episode_at(const DatasetSplit& split, const EpisodeSpec& spec, std::uint64_t seed, std::uint64_t index) {
  auto rng = make_engine(seed, index);
  Episode e = sample_episode(split, spec, rng);
  e.seed = seed;
  e.index = index;
  return e;
}

std::vector<Episode> episode_stream(const DatasetSplit& split, const EpisodeSpec& spec, std::uint64_t seed,
                                    std::size_t count) {
  std::vector<Episode> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(episode_at(split, spec, seed, i));
  return out;
}

}  // namespace multirep
