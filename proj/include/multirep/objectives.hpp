#pragma once

#include <span>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "multirep/autodiff/ops.hpp"

namespace multirep {

enum class ScoreMode { kSeparate, kPrototypeAddition };

std::string_view to_string(ScoreMode mode);
ScoreMode parse_score_mode(std::string_view name);

struct LossConfig {
  double temperature = 0.1;
  bool use_rcl = true;
  bool use_rdcl = true;
  bool use_descriptions = true;
  ScoreMode score_mode = ScoreMode::kSeparate;
  /// Replaces both contrastive losses by the unnormalized difference
  /// (Σ negative similarities − positive similarity) / τ. Unbounded below;
  /// for inspection only.
  bool literal_contrastive = false;

  /// temperature > 0 and use_rdcl requires use_descriptions.
  void validate() const;

  bool operator==(const LossConfig&) const = default;
};

void to_json(nlohmann::json& j, const LossConfig& c);
void from_json(const nlohmann::json& j, LossConfig& c);

/// Representation contrastive loss. `components[m]` is [S×d] and row i holds
/// representation m of sentence i. For every (i, m) the positive score is the
/// summed cosine of r_i^m with the sentence's other representations and the
/// negatives are cos(r_i^m, r_j^m) for j ≠ i. Returns the sum over (i, m) of
/// −log(e^{φ⁺/τ} / (e^{φ⁺/τ} + Σ_j e^{cos/τ})). A single representation has no
/// positives and gives 0.
template <typename T>
ad::Tensor<T> loss_rcl(const std::vector<ad::Tensor<T>>& components, double temperature,
                       bool literal = false);

/// Instance-description contrastive loss. R [S×D], descriptions [N×D] in class
/// order, labels[i] in [0, N). Sum over instances of the cross-entropy of the
/// cosine scores over the N descriptions.
template <typename T>
ad::Tensor<T> loss_rdcl(const ad::Tensor<T>& instances, std::span<const std::size_t> labels,
                        const ad::Tensor<T>& descriptions, double temperature, bool literal = false);

/// Per-class mean of support rows. Every class in [0, classes) must have the
/// same positive number of rows.
template <typename T>
ad::Tensor<T> compute_prototypes(const ad::Tensor<T>& support, std::span<const std::size_t> labels,
                                 std::size_t classes);

/// [Q×N] dot-product scores of queries against prototypes, plus description
/// similarities when `descriptions` is defined.
template <typename T>
ad::Tensor<T> score_queries(const ad::Tensor<T>& queries, const ad::Tensor<T>& prototypes,
                            const ad::Tensor<T>& descriptions, ScoreMode mode);

/// Summed softmax cross-entropy of [Q×N] scores.
template <typename T>
ad::Tensor<T> loss_ce(const ad::Tensor<T>& scores, std::span<const std::size_t> labels);

/// Row-wise argmax; ties go to the lowest index.
template <typename T>
std::vector<std::size_t> predict(const ad::Tensor<T>& scores);

template <typename T>
struct LossBreakdown {
  ad::Tensor<T> l_ce, l_rcl, l_rdcl, total;
};

/// Unweighted sum. Undefined or disabled terms become an exact 0.
template <typename T>
LossBreakdown<T> total_loss(const ad::Tensor<T>& l_ce, const ad::Tensor<T>& l_rcl, const ad::Tensor<T>& l_rdcl,
                            const LossConfig& config);

/// Plain values of a breakdown, for logging.
struct LossValues {
  double l_ce = 0, l_rcl = 0, l_rdcl = 0, total = 0;

  LossValues& operator+=(const LossValues& o) {
    l_ce += o.l_ce;
    l_rcl += o.l_rcl;
    l_rdcl += o.l_rdcl;
    total += o.total;
    return *this;
  }
};

template <typename T>
LossValues values_of(const LossBreakdown<T>& b);

}  // namespace multirep
