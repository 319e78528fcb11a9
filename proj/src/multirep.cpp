#include "multirep/multirep.hpp"

#include <algorithm>
#include <iomanip>
#include <sstream>

#include "multirep/errors.hpp"

namespace multirep {

std::string_view to_string(RepUnit unit) {
  switch (unit) {
    case RepUnit::kAvgPool: return "avg_pool";
    case RepUnit::kCls: return "cls";
    case RepUnit::kMask: return "mask";
    case RepUnit::kEntityPair: return "entity_pair";
  }
  return "?";
}

std::string_view to_string(RepTag tag) {
  switch (tag) {
    case RepTag::kAvgPool: return "avg_pool";
    case RepTag::kCls: return "cls";
    case RepTag::kMask: return "mask";
    case RepTag::kE1S: return "e1s";
    case RepTag::kE2S: return "e2s";
    case RepTag::kClsDrop: return "cls_drop";
    case RepTag::kMaskDrop: return "mask_drop";
  }
  return "?";
}

RepUnit parse_rep_unit(std::string_view name) {
  for (RepUnit u : kAllUnits) {
    if (to_string(u) == name) return u;
  }
  throw ConfigError("unknown representation '" + std::string(name) + "'");
}

RepSelector::RepSelector() : units_(kAllUnits.begin(), kAllUnits.end()) {}

RepSelector::RepSelector(std::vector<RepUnit> units, double description_dropout)
    : description_dropout_(description_dropout) {
  if (units.empty()) throw ConfigError("representation selector must not be empty");
  if (!(description_dropout >= 0.0 && description_dropout < 1.0)) {
    throw ConfigError("description dropout must lie in [0, 1)");
  }
  for (RepUnit u : kAllUnits) {
    if (std::find(units.begin(), units.end(), u) != units.end()) units_.push_back(u);
  }
}

RepSelector RepSelector::parse(std::string_view text, double description_dropout) {
  std::vector<RepUnit> units;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find_first_of(",+", start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view item = text.substr(start, end - start);
    if (!item.empty()) units.push_back(parse_rep_unit(item));
    start = end + 1;
  }
  return RepSelector(std::move(units), description_dropout);
}

bool RepSelector::contains(RepUnit unit) const {
  return std::find(units_.begin(), units_.end(), unit) != units_.end();
}

std::vector<RepTag> RepSelector::instance_tags() const {
  std::vector<RepTag> out;
  if (contains(RepUnit::kAvgPool)) out.push_back(RepTag::kAvgPool);
  if (contains(RepUnit::kCls)) out.push_back(RepTag::kCls);
  if (contains(RepUnit::kMask)) out.push_back(RepTag::kMask);
  if (contains(RepUnit::kEntityPair)) {
    out.push_back(RepTag::kE1S);
    out.push_back(RepTag::kE2S);
  }
  return out;
}

std::vector<RepTag> RepSelector::description_tags() const {
  std::vector<RepTag> out = instance_tags();
  for (RepTag& t : out) {
    if (t == RepTag::kE1S) t = RepTag::kClsDrop;
    if (t == RepTag::kE2S) t = RepTag::kMaskDrop;
  }
  return out;
}

std::string RepSelector::name() const {
  std::string out;
  for (RepUnit u : units_) {
    if (!out.empty()) out += '+';
    out += to_string(u);
  }
  return out;
}

std::vector<RepSelector> enumerate_selectors(double description_dropout) {
  std::vector<RepSelector> out;
  for (unsigned bits = 1; bits < (1U << kAllUnits.size()); ++bits) {
    std::vector<RepUnit> units;
    for (std::size_t i = 0; i < kAllUnits.size(); ++i) {
      if (bits & (1U << i)) units.push_back(kAllUnits[i]);
    }
    out.emplace_back(std::move(units), description_dropout);
  }
  std::stable_sort(out.begin(), out.end(), [](const RepSelector& a, const RepSelector& b) {
    return a.vector_count() < b.vector_count();
  });
  return out;
}

template <typename T>
const ad::Tensor<T>& RepSet<T>::at(RepTag tag) const {
  auto it = components.find(tag);
  if (it == components.end()) {
    throw ContractError("representation '" + std::string(to_string(tag)) + "' was not extracted");
  }
  return it->second;
}

namespace {

template <typename T>
void check_batch(const HiddenStates<T>& hidden, const PaddedBatch& batch) {
  if (hidden.batch != batch.size || hidden.width != batch.width || batch.rows.size() != batch.size) {
    throw DimensionError("hidden states do not match the padded batch");
  }
}

template <typename T, typename Pick>
ad::Tensor<T> gather_positions(const HiddenStates<T>& hidden, const PaddedBatch& batch, Pick pick) {
  check_batch(hidden, batch);
  std::vector<std::size_t> rows(batch.size);
  for (std::size_t b = 0; b < batch.size; ++b) {
    const std::size_t pos = pick(batch.rows[b]);
    if (pos >= batch.width || !batch.attn_mask[b * batch.width + pos]) {
      throw ContractError("recorded position " + std::to_string(pos) + " is not a real token");
    }
    rows[b] = hidden.row(b, pos);
  }
  return ad::gather_rows(hidden.states, rows);
}

}  // namespace

template <typename T>
ad::Tensor<T> extract_avg(const HiddenStates<T>& hidden, const PaddedBatch& batch) {
  check_batch(hidden, batch);
  const std::size_t n = batch.size * batch.width;
  std::vector<T> pool(batch.size * n, T(0));
  for (std::size_t b = 0; b < batch.size; ++b) {
    std::size_t count = 0;
    for (std::size_t t = 0; t < batch.width; ++t) count += batch.attn_mask[b * batch.width + t] ? 1 : 0;
    if (count == 0) throw ContractError("sequence " + std::to_string(b) + " has no unmasked position");
    for (std::size_t t = 0; t < batch.width; ++t) {
      if (batch.attn_mask[b * batch.width + t]) pool[b * n + hidden.row(b, t)] = T(1) / static_cast<T>(count);
    }
  }
  return ad::matmul(ad::Tensor<T>::matrix(batch.size, n, std::move(pool)), hidden.states);
}

template <typename T>
ad::Tensor<T> extract_cls(const HiddenStates<T>& hidden, const PaddedBatch& batch) {
  return gather_positions(hidden, batch, [](const EncodedInput& in) { return in.pos_cls; });
}

template <typename T>
ad::Tensor<T> extract_mask(const HiddenStates<T>& hidden, const PaddedBatch& batch) {
  return gather_positions(hidden, batch, [](const EncodedInput& in) { return in.pos_mask; });
}

template <typename T>
std::pair<ad::Tensor<T>, ad::Tensor<T>> extract_entity_markers(const HiddenStates<T>& hidden,
                                                               const PaddedBatch& batch) {
  for (const auto& in : batch.rows) {
    if (in.kind != InputKind::kInstance || !in.pos_e1s || !in.pos_e2s) {
      throw ContractError("entity markers exist only for instance inputs");
    }
  }
  return {gather_positions(hidden, batch, [](const EncodedInput& in) { return *in.pos_e1s; }),
          gather_positions(hidden, batch, [](const EncodedInput& in) { return *in.pos_e2s; })};
}

template <typename T>
RepSet<T> extract_instance_reps(const HiddenStates<T>& hidden, const PaddedBatch& batch) {
  RepSet<T> reps;
  reps.components[RepTag::kAvgPool] = extract_avg(hidden, batch);
  reps.components[RepTag::kCls] = extract_cls(hidden, batch);
  reps.components[RepTag::kMask] = extract_mask(hidden, batch);
  auto [e1, e2] = extract_entity_markers(hidden, batch);
  reps.components[RepTag::kE1S] = e1;
  reps.components[RepTag::kE2S] = e2;
  return reps;
}

template <typename T>
RepSet<T> extract_description_reps(const HiddenStates<T>& hidden, const PaddedBatch& batch, double dropout_rate,
                                   Mode mode, SeedStream& stream) {
  for (const auto& in : batch.rows) {
    if (in.kind != InputKind::kDescription) throw ContractError("expected description inputs");
  }
  RepSet<T> reps;
  reps.components[RepTag::kAvgPool] = extract_avg(hidden, batch);
  const auto cls = extract_cls(hidden, batch);
  const auto mask = extract_mask(hidden, batch);
  reps.components[RepTag::kCls] = cls;
  reps.components[RepTag::kMask] = mask;
  reps.components[RepTag::kClsDrop] = ad::dropout(cls, dropout_rate, mode, stream);
  reps.components[RepTag::kMaskDrop] = ad::dropout(mask, dropout_rate, mode, stream);
  return reps;
}

template <typename T>
std::vector<ad::Tensor<T>> instance_components(const RepSet<T>& reps, const RepSelector& selector) {
  std::vector<ad::Tensor<T>> out;
  for (RepTag tag : selector.instance_tags()) out.push_back(reps.at(tag));
  return out;
}

template <typename T>
ad::Tensor<T> build_instance_embedding(const RepSet<T>& reps, const RepSelector& selector) {
  auto parts = instance_components(reps, selector);
  return parts.size() == 1 ? parts.front() : ad::concat(parts, 1);
}

template <typename T>
ad::Tensor<T> build_description_embedding(const RepSet<T>& reps, const RepSelector& selector) {
  std::vector<ad::Tensor<T>> parts;
  for (RepTag tag : selector.description_tags()) parts.push_back(reps.at(tag));
  return parts.size() == 1 ? parts.front() : ad::concat(parts, 1);
}

template <typename T>
ad::Tensor<T> build_description_embedding(const HiddenStates<T>& hidden, const PaddedBatch& batch,
                                          const RepSelector& selector, Mode mode, SeedStream& stream) {
  return build_description_embedding(
      extract_description_reps(hidden, batch, selector.description_dropout(), mode, stream), selector);
}

void write_embeddings_csv(std::ostream& out, std::span<const EmbeddingRow> rows) {
  const std::size_t dim = rows.empty() ? 0 : rows.front().values.size();
  out << "split,relation_id,instance_index,component";
  for (std::size_t i = 0; i < dim; ++i) out << ",v" << i;
  out << '\n';
  std::ostringstream line;
  line << std::setprecision(9);
  for (const auto& row : rows) {
    if (row.values.size() != dim) throw DimensionError("embedding rows differ in dimension");
    line.str("");
    line << row.split << ',' << row.relation_id << ',' << row.instance_index << ',' << row.component;
    for (float v : row.values) line << ',' << v;
    out << line.str() << '\n';
  }
}

#define MULTIREP_INSTANTIATE(T)                                                                               \
  template struct RepSet<T>;                                                                                  \
  template ad::Tensor<T> extract_avg<T>(const HiddenStates<T>&, const PaddedBatch&);                          \
  template ad::Tensor<T> extract_cls<T>(const HiddenStates<T>&, const PaddedBatch&);                          \
  template ad::Tensor<T> extract_mask<T>(const HiddenStates<T>&, const PaddedBatch&);                         \
  template std::pair<ad::Tensor<T>, ad::Tensor<T>> extract_entity_markers<T>(const HiddenStates<T>&,          \
                                                                             const PaddedBatch&);             \
  template RepSet<T> extract_instance_reps<T>(const HiddenStates<T>&, const PaddedBatch&);                    \
  template RepSet<T> extract_description_reps<T>(const HiddenStates<T>&, const PaddedBatch&, double, Mode,    \
                                                 SeedStream&);                                                \
  template std::vector<ad::Tensor<T>> instance_components<T>(const RepSet<T>&, const RepSelector&);           \
  template ad::Tensor<T> build_instance_embedding<T>(const RepSet<T>&, const RepSelector&);                   \
  template ad::Tensor<T> build_description_embedding<T>(const RepSet<T>&, const RepSelector&);                \
  template ad::Tensor<T> build_description_embedding<T>(const HiddenStates<T>&, const PaddedBatch&,           \
                                                        const RepSelector&, Mode, SeedStream&);

MULTIREP_INSTANTIATE(float)
MULTIREP_INSTANTIATE(double)
#undef MULTIREP_INSTANTIATE

}  // namespace multirep
