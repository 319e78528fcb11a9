#pragma once

#include <array>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "multirep/encoder.hpp"

namespace multirep {

/// Selectable representation units. entity_pair contributes two vectors.
enum class RepUnit { kAvgPool, kCls, kMask, kEntityPair };

/// Individual representation vectors, in embedding order.
enum class RepTag { kAvgPool, kCls, kMask, kE1S, kE2S, kClsDrop, kMaskDrop };

std::string_view to_string(RepUnit unit);
std::string_view to_string(RepTag tag);
RepUnit parse_rep_unit(std::string_view name);

inline constexpr std::array<RepUnit, 4> kAllUnits = {RepUnit::kAvgPool, RepUnit::kCls, RepUnit::kMask,
                                                     RepUnit::kEntityPair};

class RepSelector {
 public:
  /// All four units.
  RepSelector();
  /// Units are stored in canonical order whatever order they are given in.
  explicit RepSelector(std::vector<RepUnit> units, double description_dropout = 0.10);

  static RepSelector parse(std::string_view comma_separated, double description_dropout = 0.10);

  const std::vector<RepUnit>& units() const { return units_; }
  bool contains(RepUnit unit) const;
  double description_dropout() const { return description_dropout_; }

  /// Instance tags in embedding order, e.g. {cls, e1s, e2s} for {cls, entity_pair}.
  std::vector<RepTag> instance_tags() const;
  /// Description tags aligned slot by slot with instance_tags(): avg, cls
  /// and mask pair with themselves, e1s with cls_drop and e2s with mask_drop.
  std::vector<RepTag> description_tags() const;
  /// Number of d-vectors in an instance embedding (M).
  std::size_t vector_count() const { return instance_tags().size(); }
  /// "avg_pool+cls+mask+entity_pair" style name.
  std::string name() const;

  bool operator==(const RepSelector&) const = default;

 private:
  std::vector<RepUnit> units_;
  double description_dropout_ = 0.10;
};

/// Every non-empty selector, ordered by vector count, then canonical unit order.
std::vector<RepSelector> enumerate_selectors(double description_dropout = 0.10);

/// Per-tag representation matrices for a batch: row b belongs to sequence b.
template <typename T>
struct RepSet {
  std::map<RepTag, ad::Tensor<T>> components;  // each [batch × d]

  const ad::Tensor<T>& at(RepTag tag) const;
};

/// Mean of the hidden rows with attn_mask 1. A sequence without any
/// unmasked position is a ContractError.
template <typename T>
ad::Tensor<T> extract_avg(const HiddenStates<T>& hidden, const PaddedBatch& batch);
template <typename T>
ad::Tensor<T> extract_cls(const HiddenStates<T>& hidden, const PaddedBatch& batch);
template <typename T>
ad::Tensor<T> extract_mask(const HiddenStates<T>& hidden, const PaddedBatch& batch);
/// ([E1S] rows, [E2S] rows). Description inputs are a ContractError.
template <typename T>
std::pair<ad::Tensor<T>, ad::Tensor<T>> extract_entity_markers(const HiddenStates<T>& hidden,
                                                               const PaddedBatch& batch);

/// avg, cls, mask, e1s and e2s for an instance batch.
template <typename T>
RepSet<T> extract_instance_reps(const HiddenStates<T>& hidden, const PaddedBatch& batch);

/// avg, cls, mask, cls_drop and mask_drop for a description batch. The
/// dropped copies draw from `stream` in train mode and equal cls/mask in eval.
template <typename T>
RepSet<T> extract_description_reps(const HiddenStates<T>& hidden, const PaddedBatch& batch, double dropout_rate,
                                   Mode mode, SeedStream& stream);

/// The selected component matrices, in embedding order.
template <typename T>
std::vector<ad::Tensor<T>> instance_components(const RepSet<T>& reps, const RepSelector& selector);

/// [batch × M·d] concatenation in fixed order.
template <typename T>
ad::Tensor<T> build_instance_embedding(const RepSet<T>& reps, const RepSelector& selector);

template <typename T>
ad::Tensor<T> build_description_embedding(const RepSet<T>& reps, const RepSelector& selector);

/// Convenience: extraction plus assembly for description batches.
template <typename T>
ad::Tensor<T> build_description_embedding(const HiddenStates<T>& hidden, const PaddedBatch& batch,
                                          const RepSelector& selector, Mode mode, SeedStream& stream);

struct EmbeddingRow {
  std::string split;
  std::string relation_id;
  std::size_t instance_index = 0;
  std::string component;  // a tag name or "full"
  std::vector<float> values;
};

/// CSV with header split,relation_id,instance_index,component,v0,...,v{D-1}.
/// All rows must share one dimension.
void write_embeddings_csv(std::ostream& out, std::span<const EmbeddingRow> rows);

}  // namespace multirep
