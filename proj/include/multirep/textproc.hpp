#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "multirep/corpus.hpp"

namespace multirep {

using TokenId = std::int32_t;

/// Token ↔ id map. The nine special tokens always occupy ids 0..8 in the
/// order of kSpecials; surface tokens follow by descending frequency, ties
/// broken lexicographically.
class Vocab {
 public:
  static constexpr std::array<std::string_view, 9> kSpecials = {
      "[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]", "[E1S]", "[E1E]", "[E2S]", "[E2E]"};
  static constexpr TokenId kCls = 0, kSep = 1, kMask = 2, kPad = 3, kUnk = 4, kE1S = 5,
                           kE1E = 6, kE2S = 7, kE2E = 8;

  Vocab();
  /// From an ordered token list that starts with the specials.
  static Vocab from_tokens(std::vector<std::string> tokens);
  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  /// Specials map to themselves; other tokens are lowercased, unknown ones
  /// map to [UNK].
  TokenId id(std::string_view token) const;
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  static bool is_special(std::string_view token);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

std::string lowercase(std::string_view s);
std::vector<std::string> split_whitespace(std::string_view s);

/// Counts lowercased surface tokens of every instance and of description
/// names and texts; tokens seen fewer than `min_freq` times are left out.
Vocab build_vocab(const std::vector<const DatasetSplit*>& corpora, const DescriptionSet* descriptions,
                  std::size_t min_freq = 1);

/// Wraps the head span in [E1S]/[E1E] and the tail span in [E2S]/[E2E].
std::vector<std::string> apply_entity_markers(const RelationInstance& instance);

/// "[CLS] <head> , [MASK] , <tail> [SEP] <marked sentence>"
std::vector<std::string> render_instance_template(const RelationInstance& instance);

/// "[CLS] [MASK] : <name> , <description>"
std::vector<std::string> render_description_template(const RelationDescription& description);

enum class InputKind { kInstance, kDescription };

struct EncodedInput {
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> attn_mask;
  std::size_t pos_cls = 0;
  std::size_t pos_mask = 0;
  std::optional<std::size_t> pos_e1s;
  std::optional<std::size_t> pos_e2s;
  InputKind kind = InputKind::kInstance;

  std::size_t length() const { return ids.size(); }
};

/// Maps a rendered template to ids. Sequences longer than max_len lose their
/// trailing tokens; it is an EncodingError if that would drop [CLS], [MASK]
/// or an entity marker. The kind is inferred from the presence of markers.
EncodedInput tokenize_encode(std::span<const std::string> tokens, const Vocab& vocab,
                             std::size_t max_len);

std::vector<std::string> decode(std::span<const TokenId> ids, const Vocab& vocab);

EncodedInput encode_instance(const RelationInstance& instance, const Vocab& vocab, std::size_t max_len);
EncodedInput encode_description(const RelationDescription& description, const Vocab& vocab,
                                std::size_t max_len);

/// Right-padded batch. Row b occupies ids[b*width, (b+1)*width).
struct PaddedBatch {
  std::size_t size = 0;
  std::size_t width = 0;
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> attn_mask;
  std::vector<EncodedInput> rows;
};

PaddedBatch pad_batch(std::span<const EncodedInput> inputs);

}  // namespace multirep
