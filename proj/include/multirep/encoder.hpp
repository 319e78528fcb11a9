#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "multirep/autodiff/ops.hpp"
#include "multirep/textproc.hpp"

namespace multirep {

using ad::Mode;

struct EncoderConfig {
  std::size_t layers = 2;
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t ffn = 128;
  double dropout = 0.1;
  std::size_t max_positions = 128;
  std::size_t vocab_size = 0;

  /// Throws ConfigError unless every size is positive, hidden % heads == 0
  /// and 0 <= dropout < 1.
  void validate() const;

  bool operator==(const EncoderConfig&) const = default;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

template <typename T>
struct EncoderLayer {
  ad::Tensor<T> wq, bq, wk, wv, bv, wo, bo;
  ad::Tensor<T> attn_gamma, attn_beta;
  ad::Tensor<T> w1, b1, w2, b2;
  ad::Tensor<T> ffn_gamma, ffn_beta;
};

template <typename T>
struct EncoderParams {
  EncoderConfig config;
  ad::Tensor<T> token_embedding;     // [V×d]
  ad::Tensor<T> position_embedding;  // [P×d]
  ad::Tensor<T> embed_gamma, embed_beta;
  std::vector<EncoderLayer<T>> layers;

  /// Every parameter with a stable dotted name, in a fixed order.
  std::vector<std::pair<std::string, ad::Tensor<T>>> named() const;
  std::size_t parameter_count() const;
};

template <typename T>
EncoderParams<T> init_params(const EncoderConfig& config, std::uint64_t seed);

/// Copies values (not graph state) into a fresh set of leaves of another
/// scalar type.
template <typename To, typename From>
EncoderParams<To> convert_params(const EncoderParams<From>& params);

/// Hidden states of a padded batch, packed so that row b*width + t holds
/// token t of sequence b.
template <typename T>
struct HiddenStates {
  ad::Tensor<T> states;  // [batch*width × d]
  std::size_t batch = 0;
  std::size_t width = 0;
  std::size_t dim = 0;

  std::size_t row(std::size_t b, std::size_t t) const { return b * width + t; }
};

/// Optional capture of the attention probabilities of every layer, each
/// [batch*heads*width × width].
template <typename T>
struct AttentionProbe {
  std::vector<ad::Tensor<T>> probabilities;
};

template <typename T>
HiddenStates<T> encode(const EncoderParams<T>& params, std::span<const TokenId> ids,
                       std::span<const std::uint8_t> attn_mask, std::size_t batch,
                       std::size_t width, Mode mode, SeedStream& stream,
                       AttentionProbe<T>* probe = nullptr);

template <typename T>
HiddenStates<T> encode(const EncoderParams<T>& params, const PaddedBatch& batch, Mode mode,
                       SeedStream& stream, AttentionProbe<T>* probe = nullptr);

/// Number of encode() calls made by this process.
std::size_t encoder_call_count();

inline constexpr double kLayerNormEps = 1e-5;

// Checkpoint container: the bytes "MREPCKPT", a little-endian u32 format
// version, a u64 header length, a JSON header (config, tensor names, shapes
// and offsets, plus caller metadata), then the float32 payload.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const EncoderParams<float>& params,
                     const nlohmann::json& metadata = nlohmann::json::object());

struct Checkpoint {
  EncoderParams<float> params;
  nlohmann::json metadata;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace multirep
