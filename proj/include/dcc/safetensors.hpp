#pragma once

// Minimal safetensors reader/writer.
//
//   u64 LE header length N | N bytes JSON header | raw tensor bytes
//
// Header entries: name -> {"dtype", "shape", "data_offsets": [begin, end)}
// plus an optional "__metadata__" string map.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "dcc/tensor.hpp"
#include "dcc/util.hpp"
#include "json.hpp"

namespace dcc::safetensors {

struct TensorInfo {
  std::string dtype;
  std::vector<std::size_t> shape;
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t elements() const {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

inline std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "F64") return 8;
  if (dtype == "F32") return 4;
  if (dtype == "F16" || dtype == "BF16") return 2;
  throw FormatError("safetensors: unsupported dtype " + dtype);
}

inline float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000) << 16;
  std::uint32_t exp = (h >> 10) & 0x1F;
  std::uint32_t mant = h & 0x3FF;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      exp = 127 - 15 + 1;
      while ((mant & 0x400) == 0) {
        mant <<= 1;
        --exp;
      }
      mant &= 0x3FF;
      bits = sign | (exp << 23) | (mant << 13);
    }
  } else if (exp == 0x1F) {
    bits = sign | 0x7F800000 | (mant << 13);
  } else {
    bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

// Parsed file held in memory.
class File {
 public:
  static File parse(std::vector<unsigned char> bytes, const std::string& origin = "<memory>") {
    if (bytes.size() < 8) throw FormatError(origin + ": too short for a safetensors file");
    const std::uint64_t n = read_u64(bytes.data());
    if (n > bytes.size() - 8) throw FormatError(origin + ": header length exceeds file size");
    File f;
    f.origin_ = origin;
    const std::size_t data_start = 8 + static_cast<std::size_t>(n);
    f.parse_header(std::string(bytes.begin() + 8, bytes.begin() + static_cast<std::ptrdiff_t>(data_start)),
                   bytes.size() - data_start);
    bytes.erase(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(data_start));
    f.data_ = std::move(bytes);
    f.in_memory_ = true;
    return f;
  }

  static File load(const std::filesystem::path& p) {
    if (!std::filesystem::exists(p)) throw std::runtime_error("safetensors file not found: " + p.string());
    return parse(read_file(p), p.string());
  }

  // Parses only the header; tensor values are read from disk on demand.
  static File open(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("safetensors file not found: " + p.string());
    unsigned char len[8];
    if (!in.read(reinterpret_cast<char*>(len), 8)) throw FormatError(p.string() + ": too short for a safetensors file");
    const std::uint64_t n = read_u64(len);
    const auto file_size = static_cast<std::uint64_t>(std::filesystem::file_size(p));
    if (n > file_size - 8) throw FormatError(p.string() + ": header length exceeds file size");
    std::string header(static_cast<std::size_t>(n), '\0');
    if (!in.read(header.data(), static_cast<std::streamsize>(n))) throw FormatError(p.string() + ": truncated header");
    File f;
    f.origin_ = p.string();
    f.path_ = p;
    f.data_start_ = 8 + static_cast<std::size_t>(n);
    f.parse_header(header, static_cast<std::size_t>(file_size) - f.data_start_);
    return f;
  }

  const std::map<std::string, TensorInfo>& tensors() const { return tensors_; }
  const std::map<std::string, std::string>& metadata() const { return metadata_; }
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  const TensorInfo& info(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw FormatError(origin_ + ": missing tensor " + name);
    return it->second;
  }

  std::vector<double> values(const std::string& name) const {
    const auto& t = info(name);
    std::vector<double> out(t.elements());
    std::vector<unsigned char> buffer;
    const unsigned char* p = nullptr;
    if (in_memory_) {
      p = data_.data() + t.begin;
    } else {
      buffer.resize(t.end - t.begin);
      std::ifstream in(path_, std::ios::binary);
      in.seekg(static_cast<std::streamoff>(data_start_ + t.begin));
      if (!in.read(reinterpret_cast<char*>(buffer.data()), static_cast<std::streamsize>(buffer.size())))
        throw FormatError(origin_ + ": could not read tensor " + name);
      p = buffer.data();
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (t.dtype == "F32") {
        std::uint32_t u;
        std::memcpy(&u, p + 4 * i, 4);
        out[i] = std::bit_cast<float>(u);
      } else if (t.dtype == "F64") {
        std::uint64_t u;
        std::memcpy(&u, p + 8 * i, 8);
        out[i] = std::bit_cast<double>(u);
      } else if (t.dtype == "F16") {
        std::uint16_t u;
        std::memcpy(&u, p + 2 * i, 2);
        out[i] = half_to_float(u);
      } else {
        std::uint16_t u;
        std::memcpy(&u, p + 2 * i, 2);
        out[i] = std::bit_cast<float>(static_cast<std::uint32_t>(u) << 16);
      }
    }
    return out;
  }

  // Tensors of rank 1 or 2 as a matrix (rank 1 becomes a single row).
  Matrix matrix(const std::string& name) const {
    const auto& t = info(name);
    if (t.shape.empty() || t.shape.size() > 2)
      throw FormatError(origin_ + ": tensor " + name + " is not rank 1 or 2");
    Matrix m(t.shape.size() == 1 ? 1 : t.shape[0], t.shape.back());
    m.data = values(name);
    return m;
  }

 private:
  static std::uint64_t read_u64(const unsigned char* b) {
    std::uint64_t n = 0;
    for (int i = 0; i < 8; ++i) n |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return n;
  }

  void parse_header(const std::string& text, std::size_t data_size) {
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(origin_ + ": header is not valid JSON: " + e.what());
    }
    try {
      for (auto it = header.begin(); it != header.end(); ++it) {
        if (it.key() == "__metadata__") {
          for (auto m = it->begin(); m != it->end(); ++m) metadata_[m.key()] = m->get<std::string>();
          continue;
        }
        TensorInfo t;
        t.dtype = it->at("dtype").get<std::string>();
        t.shape = it->at("shape").get<std::vector<std::size_t>>();
        const auto off = it->at("data_offsets").get<std::vector<std::size_t>>();
        if (off.size() != 2 || off[0] > off[1] || off[1] > data_size)
          throw FormatError(origin_ + ": tensor " + it.key() + " has out-of-range offsets");
        t.begin = off[0];
        t.end = off[1];
        if (t.end - t.begin != t.elements() * dtype_size(t.dtype))
          throw FormatError(origin_ + ": tensor " + it.key() + " byte size does not match its shape");
        tensors_[it.key()] = t;
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(origin_ + ": malformed header: " + e.what());
    }
  }

  std::string origin_;
  std::filesystem::path path_;
  std::size_t data_start_ = 0;
  bool in_memory_ = false;
  std::map<std::string, TensorInfo> tensors_;
  std::map<std::string, std::string> metadata_;
  std::vector<unsigned char> data_;
};

// Writes F32 or F64 tensors in name order (the host is assumed little-endian).
inline std::vector<unsigned char> serialize(const std::map<std::string, Matrix>& tensors,
                                            const std::map<std::string, std::string>& metadata = {},
                                            const std::string& dtype = "F32") {
  if (dtype != "F32" && dtype != "F64") throw std::invalid_argument("safetensors: can only write F32 or F64");
  const std::size_t width = dtype_size(dtype);
  static_assert(std::endian::native == std::endian::little);
  nlohmann::json header = nlohmann::json::object();
  if (!metadata.empty()) header["__metadata__"] = metadata;
  std::size_t offset = 0;
  for (const auto& [name, m] : tensors) {
    const std::size_t bytes = width * m.data.size();
    header[name] = {{"dtype", dtype}, {"shape", {m.rows, m.cols}}, {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  std::string text = header.dump();
  while (text.size() % 8 != 0) text.push_back(' ');
  std::vector<unsigned char> out;
  out.reserve(8 + text.size() + offset);
  const std::uint64_t n = text.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((n >> (8 * i)) & 0xFF));
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& [name, m] : tensors) {
    for (double v : m.data) {
      const std::uint64_t u = width == 8 ? std::bit_cast<std::uint64_t>(v)
                                         : std::bit_cast<std::uint32_t>(static_cast<float>(v));
      for (std::size_t i = 0; i < width; ++i) out.push_back(static_cast<unsigned char>((u >> (8 * i)) & 0xFF));
    }
  }
  return out;
}

inline void save(const std::filesystem::path& p, const std::map<std::string, Matrix>& tensors,
                 const std::map<std::string, std::string>& metadata = {}, const std::string& dtype = "F32") {
  write_file_atomic(p, serialize(tensors, metadata, dtype));
}

}  // namespace dcc::safetensors
