#pragma once

// Learned identity/style concepts and the ".dcc" container.
//
// Container layout (all integers and floats little-endian):
//
//   bytes 0..3   magic "DCC1"
//   bytes 4..7   u32 header length H
//   next H bytes UTF-8 JSON header
//   remainder    f32 payloads, contiguous, in the order of header["tensors"]

#include <bit>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dcc/prompt.hpp"
#include "json.hpp"

namespace dcc {

enum class ConceptKind { identity, style };

inline std::string to_string(ConceptKind k) { return k == ConceptKind::identity ? "identity" : "style"; }

inline ConceptKind concept_kind_from_string(std::string_view s) {
  if (s == "identity" || s == "id") return ConceptKind::identity;
  if (s == "style") return ConceptKind::style;
  throw std::invalid_argument("unknown concept kind '" + std::string(s) + "' (expected identity/id or style)");
}

inline constexpr float kDefaultConceptScale = 1.2f;

// Prompts used while fine-tuning each kind of concept.
inline std::string training_prompt(ConceptKind k) {
  return k == ConceptKind::identity ? "a photo of a [id*]" : "an illustration in the style of [style*]";
}

inline std::string placeholder_name(ConceptKind k) { return k == ConceptKind::identity ? "id*" : "style*"; }

struct LayerOutputs {
  std::vector<float> key;    // o*_K
  std::vector<float> value;  // o*_V
};

struct Concept {
  ConceptKind kind = ConceptKind::identity;
  std::string superclass_word;
  std::vector<float> v_star;
  std::vector<float> i_star;
  std::vector<LayerOutputs> outputs;
  float default_scale = kDefaultConceptScale;
  std::string backbone_fingerprint;
  nlohmann::json training = nlohmann::json::object();

  std::size_t parameter_count() const {
    std::size_t n = v_star.size();
    for (const auto& o : outputs) n += o.key.size() + o.value.size();
    return n;
  }

  std::vector<std::size_t> layer_dims() const {
    std::vector<std::size_t> d;
    for (const auto& o : outputs) d.push_back(o.key.size());
    return d;
  }
};

// len(v*) + sum_l 2 d_l for a backbone layout.
inline std::size_t concept_parameter_count(const BackboneInfo& info) {
  std::size_t n = info.word_dim;
  for (const auto& l : info.layers) n += 2 * l.dim;
  return n;
}

template <class T>
std::vector<double> to_double(const std::vector<T>& v) {
  return {v.begin(), v.end()};
}

template <class T>
std::vector<float> to_float(const std::vector<T>& v) {
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i]);
  return out;
}

// v* from the superclass word embedding, every o* zero, i* from the encoded
// training prompt at the concept position.
inline Concept init_concept(const std::string& superclass_word, ConceptKind kind, const Backbone& backbone) {
  const TokenId sc = backbone.tokenizer().superclass_token(superclass_word);
  Concept c;
  c.kind = kind;
  c.superclass_word = superclass_word;
  const auto emb = backbone.word_embedding(sc);
  c.v_star = to_float(emb);
  for (const auto& layer : backbone.info().layers)
    c.outputs.push_back({std::vector<float>(layer.dim, 0.0f), std::vector<float>(layer.dim, 0.0f)});
  c.backbone_fingerprint = backbone.info().fingerprint();

  const auto prompt = tokenize_prompt(training_prompt(kind), backbone.tokenizer());
  const std::size_t ci = prompt.placeholders.front().token_index;
  const Matrix tp = encode_with_injections(backbone, prompt.token_ids, {{ci, to_double(c.v_star)}});
  auto row = tp.row(ci);
  c.i_star = to_float(std::vector<double>(row.begin(), row.end()));
  return c;
}

inline constexpr char kConceptMagic[4] = {'D', 'C', 'C', '1'};
inline constexpr int kConceptFormatVersion = 1;

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void put_floats(std::vector<unsigned char>& out, const std::vector<float>& v) {
  for (float f : v) put_u32(out, std::bit_cast<std::uint32_t>(f));
}

}  // namespace detail

inline std::vector<unsigned char> serialize_concept(const Concept& c) {
  nlohmann::json tensors = nlohmann::json::array();
  tensors.push_back({{"name", "v_star"}, {"length", c.v_star.size()}});
  tensors.push_back({{"name", "i_star"}, {"length", c.i_star.size()}});
  for (std::size_t l = 0; l < c.outputs.size(); ++l) {
    tensors.push_back({{"name", "outputs." + std::to_string(l) + ".key"}, {"length", c.outputs[l].key.size()}});
    tensors.push_back({{"name", "outputs." + std::to_string(l) + ".value"}, {"length", c.outputs[l].value.size()}});
  }
  nlohmann::json header = {
      {"format_version", kConceptFormatVersion},
      {"kind", to_string(c.kind)},
      {"superclass", c.superclass_word},
      {"layer_dims", c.layer_dims()},
      {"fingerprint", c.backbone_fingerprint},
      {"default_scale", c.default_scale},
      {"training", c.training},
      {"tensors", tensors},
  };
  const std::string text = header.dump();
  std::vector<unsigned char> out(kConceptMagic, kConceptMagic + 4);
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  detail::put_floats(out, c.v_star);
  detail::put_floats(out, c.i_star);
  for (const auto& o : c.outputs) {
    detail::put_floats(out, o.key);
    detail::put_floats(out, o.value);
  }
  return out;
}

inline Concept deserialize_concept(std::span<const unsigned char> bytes) {
  if (bytes.size() < 8 || !std::equal(kConceptMagic, kConceptMagic + 4, bytes.begin()))
    throw FormatError("not a concept file: missing DCC1 magic");
  const std::uint32_t hlen = detail::get_u32(bytes.data() + 4);
  if (bytes.size() < 8 + static_cast<std::size_t>(hlen)) throw FormatError("concept file truncated inside header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + hlen);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("concept header is not valid JSON: ") + e.what());
  }
  try {
    if (header.at("format_version").get<int>() != kConceptFormatVersion)
      throw FormatError("unsupported concept format version " + header.at("format_version").dump());
    Concept c;
    c.kind = concept_kind_from_string(header.at("kind").get<std::string>());
    c.superclass_word = header.at("superclass").get<std::string>();
    c.backbone_fingerprint = header.at("fingerprint").get<std::string>();
    c.default_scale = header.at("default_scale").get<float>();
    c.training = header.value("training", nlohmann::json::object());
    const auto dims = header.at("layer_dims").get<std::vector<std::size_t>>();
    c.outputs.resize(dims.size());

    std::size_t pos = 8 + hlen;
    auto take = [&](std::size_t n) {
      if (pos + 4 * n > bytes.size()) throw FormatError("concept file truncated inside payload");
      std::vector<float> v(n);
      for (std::size_t i = 0; i < n; ++i) v[i] = std::bit_cast<float>(detail::get_u32(bytes.data() + pos + 4 * i));
      pos += 4 * n;
      return v;
    };
    for (const auto& t : header.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto len = t.at("length").get<std::size_t>();
      if (name == "v_star") {
        c.v_star = take(len);
      } else if (name == "i_star") {
        c.i_star = take(len);
      } else if (name.rfind("outputs.", 0) == 0) {
        const auto dot = name.find('.', 8);
        const std::size_t layer = std::stoul(name.substr(8, dot - 8));
        const std::string which = name.substr(dot + 1);
        if (layer >= c.outputs.size() || len != dims[layer])
          throw FormatError("tensor " + name + " does not match the declared layer dims");
        (which == "key" ? c.outputs[layer].key : c.outputs[layer].value) = take(len);
      } else {
        throw FormatError("unknown tensor '" + name + "' in concept header");
      }
    }
    if (pos != bytes.size()) throw FormatError("concept file has " + std::to_string(bytes.size() - pos) + " trailing bytes");
    for (std::size_t l = 0; l < dims.size(); ++l)
      if (c.outputs[l].key.size() != dims[l] || c.outputs[l].value.size() != dims[l])
        throw FormatError("layer " + std::to_string(l) + " outputs missing from payload");
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed concept header: ") + e.what());
  }
}

inline void check_compatible(const Concept& c, const Backbone& backbone) {
  const auto expected = backbone.info().fingerprint();
  if (c.backbone_fingerprint != expected) {
    throw IncompatibleBackbone("concept was trained on backbone " + c.backbone_fingerprint +
                               " but the loaded backbone is " + expected + " (" + backbone.info().signature() + ")");
  }
  if (c.outputs.size() != backbone.info().layers.size())
    throw IncompatibleBackbone("concept has " + std::to_string(c.outputs.size()) + " layer outputs, backbone has " +
                               std::to_string(backbone.info().layers.size()) + " cross-attention layers");
}

inline void save_concept(const Concept& c, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_concept(c));
}

inline Concept load_concept(const std::filesystem::path& path) {
  try {
    return deserialize_concept(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline Concept load_concept(const std::filesystem::path& path, const Backbone& backbone) {
  Concept c = load_concept(path);
  check_compatible(c, backbone);
  return c;
}

}  // namespace dcc
