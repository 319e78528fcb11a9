#include "multirep/encoder.hpp"

#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "multirep/errors.hpp"

namespace multirep {

namespace {

std::atomic<std::size_t> g_encode_calls{0};

std::uint64_t name_hash(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
ad::Tensor<T> uniform_leaf(ad::Shape shape, double bound, std::uint64_t seed, std::string_view name) {
  const std::uint64_t key = hash_combine(seed, name_hash(name));
  std::vector<T> data(ad::shape_numel(shape));
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i] = static_cast<T>((2.0 * SeedStream::uniform(key, i) - 1.0) * bound);
  }
  return ad::Tensor<T>::from(std::move(shape), std::move(data), true);
}

double xavier(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

template <typename T>
std::vector<std::pair<std::string, ad::Tensor<T>*>> mutable_named(EncoderParams<T>& p) {
  std::vector<std::pair<std::string, ad::Tensor<T>*>> out{
      {"embeddings.token", &p.token_embedding},
      {"embeddings.position", &p.position_embedding},
      {"embeddings.norm.gamma", &p.embed_gamma},
      {"embeddings.norm.beta", &p.embed_beta},
  };
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& L = p.layers[l];
    const std::string pre = "layer" + std::to_string(l) + ".";
    for (auto [suffix, t] : std::initializer_list<std::pair<const char*, ad::Tensor<T>*>>{
             {"attention.query.weight", &L.wq},  {"attention.query.bias", &L.bq},
             {"attention.key.weight", &L.wk},
             {"attention.value.weight", &L.wv},  {"attention.value.bias", &L.bv},
             {"attention.output.weight", &L.wo}, {"attention.output.bias", &L.bo},
             {"attention.norm.gamma", &L.attn_gamma}, {"attention.norm.beta", &L.attn_beta},
             {"ffn.in.weight", &L.w1},           {"ffn.in.bias", &L.b1},
             {"ffn.out.weight", &L.w2},          {"ffn.out.bias", &L.b2},
             {"ffn.norm.gamma", &L.ffn_gamma},   {"ffn.norm.beta", &L.ffn_beta}}) {
      out.emplace_back(pre + suffix, t);
    }
  }
  return out;
}

}  // namespace

void EncoderConfig::validate() const {
  if (layers == 0 || hidden == 0 || heads == 0 || ffn == 0 || max_positions == 0 || vocab_size == 0) {
    throw ConfigError("encoder sizes must all be positive");
  }
  if (hidden % heads != 0) {
    throw ConfigError("hidden size " + std::to_string(hidden) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"layers", c.layers},   {"hidden", c.hidden},
                     {"heads", c.heads},     {"ffn", c.ffn},
                     {"dropout", c.dropout}, {"max_positions", c.max_positions},
                     {"vocab_size", c.vocab_size}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  EncoderConfig d;
  c.layers = j.value("layers", d.layers);
  c.hidden = j.value("hidden", d.hidden);
  c.heads = j.value("heads", d.heads);
  c.ffn = j.value("ffn", d.ffn);
  c.dropout = j.value("dropout", d.dropout);
  c.max_positions = j.value("max_positions", d.max_positions);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
}

template <typename T>
std::vector<std::pair<std::string, ad::Tensor<T>>> EncoderParams<T>::named() const {
  auto& self = const_cast<EncoderParams<T>&>(*this);
  std::vector<std::pair<std::string, ad::Tensor<T>>> out;
  for (auto& [name, t] : mutable_named(self)) out.emplace_back(name, *t);
  return out;
}

template <typename T>
std::size_t EncoderParams<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : named()) n += t.numel();
  return n;
}

template <typename T>
EncoderParams<T> init_params(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t d = config.hidden, f = config.ffn;
  EncoderParams<T> p;
  p.config = config;
  p.layers.resize(config.layers);
  for (auto& [name, t] : mutable_named(p)) {
    const bool is_bias = name.ends_with(".bias") || name.ends_with(".beta");
    const bool is_gamma = name.ends_with(".gamma");
    if (name == "embeddings.token") {
      *t = uniform_leaf<T>({config.vocab_size, d}, 0.5 * std::sqrt(3.0 / static_cast<double>(d)), seed, name);
    } else if (name == "embeddings.position") {
      *t = uniform_leaf<T>({config.max_positions, d}, std::sqrt(3.0 / static_cast<double>(d)), seed, name);
    } else if (is_gamma) {
      *t = ad::Tensor<T>::full({d}, T(1), true);
    } else if (is_bias) {
      *t = ad::Tensor<T>::zeros({name.ends_with("ffn.in.bias") ? f : d}, true);
    } else if (name.ends_with("ffn.in.weight")) {
      *t = uniform_leaf<T>({d, f}, xavier(d, f), seed, name);
    } else if (name.ends_with("ffn.out.weight")) {
      *t = uniform_leaf<T>({f, d}, xavier(f, d), seed, name);
    } else {
      *t = uniform_leaf<T>({d, d}, xavier(d, d), seed, name);
    }
  }
  return p;
}

template <typename To, typename From>
EncoderParams<To> convert_params(const EncoderParams<From>& params) {
  EncoderParams<To> out;
  out.config = params.config;
  out.layers.resize(params.layers.size());
  auto src = params.named();
  auto dst = mutable_named(out);
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto values = src[i].second.data();
    *dst[i].second = ad::Tensor<To>::from(src[i].second.shape(), std::vector<To>(values.begin(), values.end()), true);
  }
  return out;
}

template <typename T>
HiddenStates<T> encode(const EncoderParams<T>& params, std::span<const TokenId> ids,
                       std::span<const std::uint8_t> attn_mask, std::size_t batch,
                       std::size_t width, Mode mode, SeedStream& stream, AttentionProbe<T>* probe) {
  g_encode_calls.fetch_add(1, std::memory_order_relaxed);
  const EncoderConfig& c = params.config;
  if (width > c.max_positions) {
    throw EncodingError("sequence width " + std::to_string(width) + " exceeds max positions " +
                        std::to_string(c.max_positions));
  }
  if (batch == 0 || width == 0 || ids.size() != batch * width || attn_mask.size() != ids.size()) {
    throw DimensionError("ids and attention mask must both hold batch*width entries");
  }
  std::vector<std::size_t> positions(batch * width);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i % width;

  using namespace ad;
  Tensor<T> x = add(embedding(params.token_embedding, ids), gather_rows(params.position_embedding, positions));
  x = layer_norm(x, params.embed_gamma, params.embed_beta, kLayerNormEps);
  x = dropout(x, c.dropout, mode, stream);

  for (const auto& L : params.layers) {
    Tensor<T> q = add_bias(matmul(x, L.wq), L.bq);
    Tensor<T> k = matmul(x, L.wk);
    Tensor<T> v = add_bias(matmul(x, L.wv), L.bv);
    Tensor<T> probs = masked_softmax(attention_scores(q, k, batch, width, c.heads), attn_mask, c.heads * width);
    if (probe) probe->probabilities.push_back(probs);
    probs = dropout(probs, c.dropout, mode, stream);
    Tensor<T> attended = add_bias(matmul(attention_context(probs, v, batch, width, c.heads), L.wo), L.bo);
    attended = dropout(attended, c.dropout, mode, stream);
    x = layer_norm(add(x, attended), L.attn_gamma, L.attn_beta, kLayerNormEps);

    Tensor<T> h = gelu(add_bias(matmul(x, L.w1), L.b1));
    h = dropout(add_bias(matmul(h, L.w2), L.b2), c.dropout, mode, stream);
    x = layer_norm(add(x, h), L.ffn_gamma, L.ffn_beta, kLayerNormEps);
  }
  return HiddenStates<T>{x, batch, width, c.hidden};
}

template <typename T>
HiddenStates<T> encode(const EncoderParams<T>& params, const PaddedBatch& batch, Mode mode,
                       SeedStream& stream, AttentionProbe<T>* probe) {
  return encode(params, std::span<const TokenId>(batch.ids), std::span<const std::uint8_t>(batch.attn_mask),
                batch.size, batch.width, mode, stream, probe);
}

std::size_t encoder_call_count() { return g_encode_calls.load(std::memory_order_relaxed); }

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {
constexpr char kMagic[8] = {'M', 'R', 'E', 'P', 'C', 'K', 'P', 'T'};
}

void save_checkpoint(const std::filesystem::path& path, const EncoderParams<float>& params,
                     const nlohmann::json& metadata) {
  nlohmann::json header;
  header["config"] = params.config;
  header["metadata"] = metadata;
  header["tensors"] = nlohmann::json::array();
  std::size_t offset = 0;
  const auto named = params.named();
  for (const auto& [name, t] : named) {
    header["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.numel();
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t length = text.size();
  out.write(kMagic, sizeof kMagic);
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  out.write(reinterpret_cast<const char*>(&length), sizeof length);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [_, t] : named) {
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.numel() * sizeof(float)));
  }
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t length = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&length), sizeof length);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw DataError(path.string() + " is not a checkpoint");
  }
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  std::vector<float> payload;
  for (float buf[1024]; in.read(reinterpret_cast<char*>(buf), sizeof buf) || in.gcount() > 0;) {
    payload.insert(payload.end(), buf, buf + in.gcount() / static_cast<std::streamsize>(sizeof(float)));
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt checkpoint header: " + std::string(e.what()));
  }

  Checkpoint ck;
  ck.params = init_params<float>(header.at("config").get<EncoderConfig>(), 0);
  ck.metadata = header.value("metadata", nlohmann::json::object());
  std::map<std::string, ad::Tensor<float>*> slots;
  for (auto& [name, t] : mutable_named(ck.params)) slots[name] = t;
  std::size_t seen = 0;
  for (const auto& entry : header.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<ad::Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    auto it = slots.find(name);
    if (it == slots.end()) throw DataError("checkpoint has unknown tensor " + name);
    if (shape != it->second->shape()) {
      throw DataError("checkpoint tensor " + name + " has shape " + ad::shape_string(shape) +
                      ", expected " + ad::shape_string(it->second->shape()));
    }
    const std::size_t n = ad::shape_numel(shape);
    if (offset + n > payload.size()) throw DataError("checkpoint payload truncated at " + name);
    *it->second = ad::Tensor<float>::from(shape, std::vector<float>(payload.begin() + static_cast<std::ptrdiff_t>(offset),
                                                                    payload.begin() + static_cast<std::ptrdiff_t>(offset + n)),
                                          true);
    ++seen;
  }
  if (seen != slots.size()) throw DataError("checkpoint is missing tensors");
  return ck;
}

#define MULTIREP_INSTANTIATE(T)                                                                          \
  template struct EncoderParams<T>;                                                                      \
  template EncoderParams<T> init_params<T>(const EncoderConfig&, std::uint64_t);                         \
  template HiddenStates<T> encode<T>(const EncoderParams<T>&, std::span<const TokenId>,                  \
                                     std::span<const std::uint8_t>, std::size_t, std::size_t, Mode,      \
                                     SeedStream&, AttentionProbe<T>*);                                   \
  template HiddenStates<T> encode<T>(const EncoderParams<T>&, const PaddedBatch&, Mode, SeedStream&,     \
                                     AttentionProbe<T>*);

MULTIREP_INSTANTIATE(float)
MULTIREP_INSTANTIATE(double)
#undef MULTIREP_INSTANTIATE

template EncoderParams<double> convert_params<double, float>(const EncoderParams<float>&);
template EncoderParams<float> convert_params<float, double>(const EncoderParams<double>&);
template EncoderParams<float> convert_params<float, float>(const EncoderParams<float>&);

}  // namespace multirep
