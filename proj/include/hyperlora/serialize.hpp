#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "hyperlora/errors.hpp"
#include "hyperlora/rng.hpp"
#include "hyperlora/tensor.hpp"

namespace hyperlora {

// Binary weight-file container shared by checkpoints, token grids and trained
// generators: magic + version, string metadata (task_id, step_id, rank, ...),
// a tensor table (name, shape, offset) and one little-endian float32 payload,
// row-major.
struct WeightFile {
  static constexpr char kMagic[8] = {'H', 'L', 'W', 'F', '0', '0', '0', '1'};
  static constexpr std::uint32_t kVersion = 1;

  std::map<std::string, std::string> meta;
  struct Entry {
    std::string name;
    std::vector<std::int64_t> shape;
    std::uint64_t offset = 0;  // in floats, from payload start
  };
  std::vector<Entry> tensors;
  std::vector<float> payload;

  void add(const std::string& name, const Tensor<float>& t) {
    Entry e;
    e.name = name;
    e.shape = t.shape();
    e.offset = payload.size();
    tensors.push_back(e);
    payload.insert(payload.end(), t.data(), t.data() + t.numel());
  }

  bool has(const std::string& name) const {
    for (const auto& e : tensors)
      if (e.name == name) return true;
    return false;
  }

  Tensor<float> get(const std::string& name) const {
    for (const auto& e : tensors) {
      if (e.name != name) continue;
      Tensor<float> t(e.shape);
      std::memcpy(t.data(), payload.data() + e.offset,
                  sizeof(float) * static_cast<std::size_t>(t.numel()));
      return t;
    }
    throw StructuralError("weight file has no tensor named '" + name + "'");
  }

  std::string meta_or(const std::string& key, const std::string& fallback) const {
    auto it = meta.find(key);
    return it == meta.end() ? fallback : it->second;
  }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_str(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.append(s);
}

struct Reader {
  const char* p;
  const char* end;
  void need(std::size_t n) const {
    if (static_cast<std::size_t>(end - p) < n)
      throw IoError("weight file truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    p += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    p += 8;
    return v;
  }
  std::string str() {
    std::uint32_t n = u32();
    need(n);
    std::string s(p, p + n);
    p += n;
    return s;
  }
};

inline std::uint32_t float_bits(float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  return u;
}
inline float bits_float(std::uint32_t u) {
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

}  // namespace detail

inline std::string encode_weight_file(const WeightFile& wf) {
  std::string out;
  out.append(WeightFile::kMagic, 8);
  detail::put_u32(out, WeightFile::kVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(wf.meta.size()));
  for (const auto& [k, v] : wf.meta) {
    detail::put_str(out, k);
    detail::put_str(out, v);
  }
  detail::put_u32(out, static_cast<std::uint32_t>(wf.tensors.size()));
  for (const auto& e : wf.tensors) {
    detail::put_str(out, e.name);
    detail::put_u32(out, static_cast<std::uint32_t>(e.shape.size()));
    for (std::int64_t d : e.shape) detail::put_u64(out, static_cast<std::uint64_t>(d));
    detail::put_u64(out, e.offset);
  }
  detail::put_u64(out, wf.payload.size());
  for (float f : wf.payload) detail::put_u32(out, detail::float_bits(f));
  return out;
}

inline WeightFile decode_weight_file(const std::string& bytes) {
  detail::Reader r{bytes.data(), bytes.data() + bytes.size()};
  r.need(8);
  if (std::memcmp(r.p, WeightFile::kMagic, 8) != 0)
    throw IoError("bad weight file magic");
  r.p += 8;
  std::uint32_t version = r.u32();
  if (version != WeightFile::kVersion)
    throw IoError("unsupported weight file version " + std::to_string(version));
  WeightFile wf;
  std::uint32_t n_meta = r.u32();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.str();
    wf.meta[k] = r.str();
  }
  std::uint32_t n_tensors = r.u32();
  wf.tensors.resize(n_tensors);
  for (auto& e : wf.tensors) {
    e.name = r.str();
    std::uint32_t nd = r.u32();
    e.shape.resize(nd);
    for (auto& d : e.shape) d = static_cast<std::int64_t>(r.u64());
    e.offset = r.u64();
  }
  std::uint64_t n_payload = r.u64();
  wf.payload.resize(n_payload);
  for (auto& f : wf.payload) f = detail::bits_float(r.u32());
  return wf;
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::filesystem::path dir = path.parent_path();
  if (!dir.empty()) std::filesystem::create_directories(dir);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return bytes;
}

inline void save_weight_file(const WeightFile& wf, const std::filesystem::path& path) {
  write_file(path, encode_weight_file(wf));
}

inline WeightFile load_weight_file(const std::filesystem::path& path) {
  return decode_weight_file(read_file(path));
}

inline std::uint64_t file_content_hash(const std::filesystem::path& path) {
  std::string bytes = read_file(path);
  return fnv1a64_bytes(bytes.data(), bytes.size());
}

inline std::string hash_hex(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[h & 0xf];
    h >>= 4;
  }
  return s;
}

}  // namespace hyperlora
