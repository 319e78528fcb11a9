#include "multirep/textproc.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>

#include "multirep/errors.hpp"

namespace multirep {

Vocab::Vocab() {
  for (std::size_t i = 0; i < kSpecials.size(); ++i) {
    tokens_.emplace_back(kSpecials[i]);
    index_.emplace(tokens_.back(), static_cast<TokenId>(i));
  }
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < kSpecials.size()) throw DataError("vocabulary is missing special tokens");
  Vocab v;
  v.tokens_ = std::move(tokens);
  v.index_.clear();
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    if (i < kSpecials.size() && v.tokens_[i] != kSpecials[i]) {
      throw DataError("vocabulary entry " + std::to_string(i) + " must be " +
                      std::string(kSpecials[i]));
    }
    if (!v.index_.emplace(v.tokens_[i], static_cast<TokenId>(i)).second) {
      throw DataError("duplicate vocabulary token '" + v.tokens_[i] + "'");
    }
  }
  return v;
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::string> tokens;
  for (std::string line; std::getline(in, line);) tokens.push_back(line);
  return from_tokens(std::move(tokens));
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

bool Vocab::is_special(std::string_view token) {
  return std::find(kSpecials.begin(), kSpecials.end(), token) != kSpecials.end();
}

TokenId Vocab::id(std::string_view token) const {
  auto it = is_special(token) ? index_.find(std::string(token)) : index_.find(lowercase(token));
  return it == index_.end() ? kUnk : it->second;
}

std::string lowercase(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::vector<std::string> split_whitespace(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    std::size_t j = i;
    while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
    if (j > i) out.emplace_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

Vocab build_vocab(const std::vector<const DatasetSplit*>& corpora, const DescriptionSet* descriptions,
                  std::size_t min_freq) {
  std::map<std::string, std::size_t> counts;
  auto count = [&](std::string_view token) {
    if (!Vocab::is_special(token)) ++counts[lowercase(token)];
  };
  for (const DatasetSplit* split : corpora) {
    for (const auto& [_, instances] : split->relations) {
      for (const auto& inst : instances) {
        for (const auto& t : inst.tokens) count(t);
      }
    }
  }
  if (descriptions) {
    for (const auto& [_, d] : *descriptions) {
      for (const auto& t : split_whitespace(d.name)) count(t);
      for (const auto& t : split_whitespace(d.text)) count(t);
    }
  }
  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [token, n] : counts) {
    if (n >= min_freq) ranked.emplace_back(token, n);
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens(Vocab::kSpecials.begin(), Vocab::kSpecials.end());
  for (auto& [token, _] : ranked) tokens.push_back(token);
  return Vocab::from_tokens(std::move(tokens));
}

std::vector<std::string> apply_entity_markers(const RelationInstance& instance) {
  validate_instance(instance);
  std::vector<std::string> out;
  out.reserve(instance.tokens.size() + 4);
  for (std::size_t i = 0; i < instance.tokens.size(); ++i) {
    if (i == instance.head.start) out.emplace_back("[E1S]");
    if (i == instance.tail.start) out.emplace_back("[E2S]");
    out.push_back(instance.tokens[i]);
    if (i == instance.head.end) out.emplace_back("[E1E]");
    if (i == instance.tail.end) out.emplace_back("[E2E]");
  }
  return out;
}

std::vector<std::string> render_instance_template(const RelationInstance& instance) {
  std::vector<std::string> out{"[CLS]"};
  for (std::size_t i = instance.head.start; i <= instance.head.end; ++i) {
    out.push_back(instance.tokens.at(i));
  }
  out.insert(out.end(), {",", "[MASK]", ","});
  for (std::size_t i = instance.tail.start; i <= instance.tail.end; ++i) {
    out.push_back(instance.tokens.at(i));
  }
  out.emplace_back("[SEP]");
  auto text = apply_entity_markers(instance);
  out.insert(out.end(), text.begin(), text.end());
  return out;
}

std::vector<std::string> render_description_template(const RelationDescription& description) {
  std::vector<std::string> out{"[CLS]", "[MASK]", ":"};
  for (auto& t : split_whitespace(description.name)) out.push_back(std::move(t));
  auto text = split_whitespace(description.text);
  if (!text.empty()) {
    out.emplace_back(",");
    for (auto& t : text) out.push_back(std::move(t));
  }
  return out;
}

EncodedInput tokenize_encode(std::span<const std::string> tokens, const Vocab& vocab,
                             std::size_t max_len) {
  if (tokens.empty() || tokens.front() != "[CLS]") {
    throw EncodingError("rendered sequence must start with [CLS]");
  }
  std::optional<std::size_t> pos_mask, pos_e1s, pos_e2s;
  std::size_t last_protected = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::string& t = tokens[i];
    if (t == "[CLS]" && i != 0) throw EncodingError("[CLS] may only appear at position 0");
    if (t == "[MASK]") {
      if (pos_mask) throw EncodingError("more than one [MASK] in rendered sequence");
      pos_mask = i;
    }
    if (t == "[E1S]") pos_e1s = i;
    if (t == "[E2S]") pos_e2s = i;
    if (t == "[MASK]" || t == "[E1S]" || t == "[E1E]" || t == "[E2S]" || t == "[E2E]") {
      last_protected = i;
    }
  }
  if (!pos_mask) throw EncodingError("rendered sequence has no [MASK]");
  if (pos_e1s.has_value() != pos_e2s.has_value()) {
    throw EncodingError("entity markers must come in pairs");
  }
  if (last_protected >= max_len) {
    throw EncodingError("special token at position " + std::to_string(last_protected) +
                        " does not fit max_len " + std::to_string(max_len));
  }
  const std::size_t n = std::min(tokens.size(), max_len);
  EncodedInput out;
  out.kind = pos_e1s ? InputKind::kInstance : InputKind::kDescription;
  out.ids.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.ids.push_back(vocab.id(tokens[i]));
  out.attn_mask.assign(n, 1);
  out.pos_cls = 0;
  out.pos_mask = *pos_mask;
  out.pos_e1s = pos_e1s;
  out.pos_e2s = pos_e2s;
  return out;
}

std::vector<std::string> decode(std::span<const TokenId> ids, const Vocab& vocab) {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (TokenId id : ids) out.push_back(vocab.token(id));
  return out;
}

EncodedInput encode_instance(const RelationInstance& instance, const Vocab& vocab,
                             std::size_t max_len) {
  const auto tokens = render_instance_template(instance);
  return tokenize_encode(tokens, vocab, max_len);
}

EncodedInput encode_description(const RelationDescription& description, const Vocab& vocab,
                                std::size_t max_len) {
  const auto tokens = render_description_template(description);
  return tokenize_encode(tokens, vocab, max_len);
}

PaddedBatch pad_batch(std::span<const EncodedInput> inputs) {
  if (inputs.empty()) throw ContractError("pad_batch needs at least one input");
  PaddedBatch batch;
  batch.size = inputs.size();
  for (const auto& in : inputs) batch.width = std::max(batch.width, in.length());
  batch.ids.assign(batch.size * batch.width, Vocab::kPad);
  batch.attn_mask.assign(batch.size * batch.width, 0);
  for (std::size_t b = 0; b < batch.size; ++b) {
    std::copy(inputs[b].ids.begin(), inputs[b].ids.end(), batch.ids.begin() + b * batch.width);
    std::copy(inputs[b].attn_mask.begin(), inputs[b].attn_mask.end(),
              batch.attn_mask.begin() + b * batch.width);
  }
  batch.rows.assign(inputs.begin(), inputs.end());
  return batch;
}

}  // namespace multirep
