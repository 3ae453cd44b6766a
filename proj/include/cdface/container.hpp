#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdface/common.hpp"
#include "cdface/tensor.hpp"

namespace cdface::io {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[i] = digits[v & 0xF];
  return s;
}

inline std::uint64_t parse_hex64(const std::string& s) {
  require_io(s.size() == 16, "checksum: expected 16 hex digits");
  std::uint64_t v = 0;
  for (char c : s) {
    v <<= 4;
    if (c >= '0' && c <= '9') v |= static_cast<std::uint64_t>(c - '0');
    else if (c >= 'a' && c <= 'f') v |= static_cast<std::uint64_t>(c - 'a' + 10);
    else throw IoError("checksum: invalid hex digit");
  }
  return v;
}

/// Little-endian encoding of a float tensor; the checksum in manifests is
/// FNV-1a over exactly these bytes, so it is platform-independent.
inline std::vector<unsigned char> encode_f32(const Tensor<float>& t) {
  std::vector<unsigned char> buf(t.size() * 4);
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, &t.data()[i], 4);
    buf[4 * i + 0] = static_cast<unsigned char>(bits & 0xFF);
    buf[4 * i + 1] = static_cast<unsigned char>((bits >> 8) & 0xFF);
    buf[4 * i + 2] = static_cast<unsigned char>((bits >> 16) & 0xFF);
    buf[4 * i + 3] = static_cast<unsigned char>((bits >> 24) & 0xFF);
  }
  return buf;
}

inline Tensor<float> decode_f32(const std::vector<unsigned char>& buf,
                                std::size_t rows, std::size_t cols) {
  require_io(buf.size() == rows * cols * 4,
             "array file length disagrees with manifest shape");
  Tensor<float> t(rows, cols);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const std::uint32_t bits =
        static_cast<std::uint32_t>(buf[4 * i + 0]) |
        (static_cast<std::uint32_t>(buf[4 * i + 1]) << 8) |
        (static_cast<std::uint32_t>(buf[4 * i + 2]) << 16) |
        (static_cast<std::uint32_t>(buf[4 * i + 3]) << 24);
    std::memcpy(&t.data()[i], &bits, 4);
  }
  return t;
}

inline void write_bytes(const fs::path& path,
                        const std::vector<unsigned char>& buf) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require_io(out.good(), "cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
  require_io(out.good(), "write failed: " + path.string());
}

inline std::vector<unsigned char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require_io(in.good(), "cannot open: " + path.string());
  std::vector<unsigned char> buf(
      (std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return buf;
}

inline void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  require_io(out.good(), "cannot open for writing: " + path.string());
  out << j.dump(2) << '\n';
  require_io(out.good(), "write failed: " + path.string());
}

inline json read_json(const fs::path& path) {
  std::ifstream in(path);
  require_io(in.good(), "cannot open: " + path.string());
  json j = json::parse(in, nullptr, /*allow_exceptions=*/false);
  require_io(!j.is_discarded(), "malformed JSON: " + path.string());
  return j;
}

/// Writes one named array next to the manifest and records its shape and
/// checksum under manifest["arrays"][name].
inline void save_array(const fs::path& dir, json& manifest,
                       const std::string& name, const Tensor<float>& t) {
  const std::string file = name + ".f32";
  const std::vector<unsigned char> buf = encode_f32(t);
  Fnv1a h;
  h.update(buf.data(), buf.size());
  write_bytes(dir / file, buf);
  manifest["arrays"][name] = {{"file", file},
                              {"rows", t.rows()},
                              {"cols", t.cols()},
                              {"dtype", "f32-le"},
                              {"fnv1a", hex64(h.digest())}};
}

inline Tensor<float> load_array(const fs::path& dir, const json& manifest,
                                const std::string& name) {
  require_io(manifest.contains("arrays") && manifest["arrays"].contains(name),
             "manifest is missing array entry: " + name);
  const json& e = manifest["arrays"][name];
  require_io(e.value("dtype", "") == std::string("f32-le"),
             "array " + name + ": unsupported dtype tag");
  const std::vector<unsigned char> buf =
      read_bytes(dir / e["file"].get<std::string>());
  Fnv1a h;
  h.update(buf.data(), buf.size());
  require_io(h.digest() == parse_hex64(e["fnv1a"].get<std::string>()),
             "array " + name + ": checksum mismatch");
  return decode_f32(buf, e["rows"].get<std::size_t>(),
                    e["cols"].get<std::size_t>());
}

}  // namespace cdface::io
