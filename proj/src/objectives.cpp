#include "multirep/objectives.hpp"

#include "multirep/errors.hpp"

namespace multirep {

std::string_view to_string(ScoreMode mode) {
  return mode == ScoreMode::kSeparate ? "separate" : "prototype_addition";
}

ScoreMode parse_score_mode(std::string_view name) {
  if (name == "separate" || name == "separate_similarities") return ScoreMode::kSeparate;
  if (name == "prototype_addition") return ScoreMode::kPrototypeAddition;
  throw ConfigError("unknown score mode '" + std::string(name) + "'");
}

void LossConfig::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (use_rdcl && !use_descriptions) throw ConfigError("use_rdcl requires use_descriptions");
}

void to_json(nlohmann::json& j, const LossConfig& c) {
  j = nlohmann::json{{"temperature", c.temperature},
                     {"use_rcl", c.use_rcl},
                     {"use_rdcl", c.use_rdcl},
                     {"use_descriptions", c.use_descriptions},
                     {"score_mode", to_string(c.score_mode)},
                     {"literal_contrastive", c.literal_contrastive}};
}

void from_json(const nlohmann::json& j, LossConfig& c) {
  LossConfig d;
  c.temperature = j.value("temperature", d.temperature);
  c.use_rcl = j.value("use_rcl", d.use_rcl);
  c.use_rdcl = j.value("use_rdcl", d.use_rdcl);
  c.use_descriptions = j.value("use_descriptions", d.use_descriptions);
  c.score_mode = parse_score_mode(j.value("score_mode", std::string(to_string(d.score_mode))));
  c.literal_contrastive = j.value("literal_contrastive", d.literal_contrastive);
}

namespace {

template <typename T>
ad::Tensor<T> off_diagonal_mask(std::size_t n) {
  std::vector<T> m(n * n, T(1));
  for (std::size_t i = 0; i < n; ++i) m[i * n + i] = T(0);
  return ad::Tensor<T>::matrix(n, n, std::move(m));
}

}  // namespace

template <typename T>
ad::Tensor<T> loss_rcl(const std::vector<ad::Tensor<T>>& components, double temperature, bool literal) {
  if (components.empty()) throw ContractError("loss_rcl needs at least one representation");
  const std::size_t sentences = components.front().dim(0);
  std::vector<ad::Tensor<T>> unit;
  for (const auto& c : components) {
    if (c.rank() != 2 || c.dim(0) != sentences) {
      throw DimensionError("representation matrices must all be [sentences × d]");
    }
    unit.push_back(ad::l2_normalize_rows(c));
  }
  // Anchors without positives contribute nothing.
  if (unit.size() == 1) return ad::Tensor<T>::scalar(T(0));
  const T inv_tau = T(1) / static_cast<T>(temperature);
  const auto off = off_diagonal_mask<T>(sentences);

  ad::Tensor<T> total;
  for (std::size_t m = 0; m < unit.size(); ++m) {
    ad::Tensor<T> positive;
    for (std::size_t k = 0; k < unit.size(); ++k) {
      if (k == m) continue;
      auto cos_mk = ad::sum_axis(ad::mul(unit[m], unit[k]), 1);
      positive = positive.defined() ? ad::add(positive, cos_mk) : cos_mk;
    }
    auto negatives = ad::mul(ad::matmul_nt(unit[m], unit[m]), off);
    ad::Tensor<T> term;
    if (literal) {
      term = ad::scale(ad::sub(ad::sum(negatives), ad::sum(positive)), inv_tau);
    } else {
      auto logits = ad::scale(ad::add(negatives, ad::diag_embed(positive)), inv_tau);
      term = ad::sub(ad::sum(ad::logsumexp_rows(logits)), ad::scale(ad::sum(positive), inv_tau));
    }
    total = total.defined() ? ad::add(total, term) : term;
  }
  return total;
}

template <typename T>
ad::Tensor<T> loss_rdcl(const ad::Tensor<T>& instances, std::span<const std::size_t> labels,
                        const ad::Tensor<T>& descriptions, double temperature, bool literal) {
  if (instances.rank() != 2 || descriptions.rank() != 2 || instances.dim(1) != descriptions.dim(1)) {
    throw DimensionError("instance and description embeddings must share a dimension");
  }
  if (labels.size() != instances.dim(0)) throw DimensionError("one label per instance required");
  for (std::size_t y : labels) {
    if (y >= descriptions.dim(0)) {
      throw ConfigError("label " + std::to_string(y) + " has no description");
    }
  }
  const T inv_tau = T(1) / static_cast<T>(temperature);
  auto cos = ad::matmul_nt(ad::l2_normalize_rows(instances), ad::l2_normalize_rows(descriptions));
  auto positive = ad::sum(ad::pick(cos, labels));
  if (literal) {
    return ad::scale(ad::sub(ad::sum(cos), ad::scale(positive, T(2))), inv_tau);
  }
  return ad::sub(ad::sum(ad::logsumexp_rows(ad::scale(cos, inv_tau))), ad::scale(positive, inv_tau));
}

template <typename T>
ad::Tensor<T> compute_prototypes(const ad::Tensor<T>& support, std::span<const std::size_t> labels,
                                 std::size_t classes) {
  if (support.rank() != 2 || labels.size() != support.dim(0)) {
    throw DimensionError("one label per support row required");
  }
  std::vector<std::size_t> count(classes, 0);
  for (std::size_t y : labels) {
    if (y >= classes) throw ContractError("support label out of range");
    ++count[y];
  }
  for (std::size_t c : count) {
    if (c == 0 || c != count.front()) throw ContractError("support classes must all have the same size");
  }
  const std::size_t n = labels.size();
  std::vector<T> avg(classes * n, T(0));
  for (std::size_t i = 0; i < n; ++i) avg[labels[i] * n + i] = T(1) / static_cast<T>(count[labels[i]]);
  return ad::matmul(ad::Tensor<T>::matrix(classes, n, std::move(avg)), support);
}

template <typename T>
ad::Tensor<T> score_queries(const ad::Tensor<T>& queries, const ad::Tensor<T>& prototypes,
                            const ad::Tensor<T>& descriptions, ScoreMode mode) {
  if (!descriptions.defined()) return ad::matmul_nt(queries, prototypes);
  if (mode == ScoreMode::kPrototypeAddition) {
    return ad::matmul_nt(queries, ad::add(prototypes, descriptions));
  }
  return ad::add(ad::matmul_nt(queries, prototypes), ad::matmul_nt(queries, descriptions));
}

template <typename T>
ad::Tensor<T> loss_ce(const ad::Tensor<T>& scores, std::span<const std::size_t> labels) {
  if (scores.rank() != 2 || labels.size() != scores.dim(0)) {
    throw DimensionError("one label per query required");
  }
  for (std::size_t y : labels) {
    if (y >= scores.dim(1)) throw ContractError("query label out of range");
  }
  return ad::sub(ad::sum(ad::logsumexp_rows(scores)), ad::sum(ad::pick(scores, labels)));
}

template <typename T>
std::vector<std::size_t> predict(const ad::Tensor<T>& scores) {
  const std::size_t rows = scores.dim(0), cols = scores.dim(1);
  std::vector<std::size_t> out(rows, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 1; c < cols; ++c) {
      if (scores.at(r, c) > scores.at(r, out[r])) out[r] = c;
    }
  }
  return out;
}

template <typename T>
LossBreakdown<T> total_loss(const ad::Tensor<T>& l_ce, const ad::Tensor<T>& l_rcl, const ad::Tensor<T>& l_rdcl,
                            const LossConfig& config) {
  auto zero = [] { return ad::Tensor<T>::scalar(T(0)); };
  LossBreakdown<T> b;
  b.l_ce = l_ce.defined() ? l_ce : zero();
  b.l_rcl = config.use_rcl && l_rcl.defined() ? l_rcl : zero();
  b.l_rdcl = config.use_rdcl && config.use_descriptions && l_rdcl.defined() ? l_rdcl : zero();
  b.total = ad::add(ad::add(b.l_ce, b.l_rcl), b.l_rdcl);
  return b;
}

template <typename T>
LossValues values_of(const LossBreakdown<T>& b) {
  return {static_cast<double>(b.l_ce.item()), static_cast<double>(b.l_rcl.item()),
          static_cast<double>(b.l_rdcl.item()), static_cast<double>(b.total.item())};
}

#define MULTIREP_INSTANTIATE(T)                                                                                \
  template ad::Tensor<T> loss_rcl<T>(const std::vector<ad::Tensor<T>>&, double, bool);                         \
  template ad::Tensor<T> loss_rdcl<T>(const ad::Tensor<T>&, std::span<const std::size_t>, const ad::Tensor<T>&, \
                                      double, bool);                                                           \
  template ad::Tensor<T> compute_prototypes<T>(const ad::Tensor<T>&, std::span<const std::size_t>,             \
                                               std::size_t);                                                   \
  template ad::Tensor<T> score_queries<T>(const ad::Tensor<T>&, const ad::Tensor<T>&, const ad::Tensor<T>&,    \
                                          ScoreMode);                                                          \
  template ad::Tensor<T> loss_ce<T>(const ad::Tensor<T>&, std::span<const std::size_t>);                       \
  template std::vector<std::size_t> predict<T>(const ad::Tensor<T>&);                                          \
  template LossBreakdown<T> total_loss<T>(const ad::Tensor<T>&, const ad::Tensor<T>&, const ad::Tensor<T>&,    \
                                          const LossConfig&);                                                  \
  template LossValues values_of<T>(const LossBreakdown<T>&);

MULTIREP_INSTANTIATE(float)
MULTIREP_INSTANTIATE(double)
#undef MULTIREP_INSTANTIATE

}  // namespace multirep
