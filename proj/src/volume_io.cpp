#include "abus/volume_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <zlib.h>

#include "abus/errors.hpp"

namespace abus {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "payloads are written in host byte order");

namespace {

std::uint32_t crc32_of(const std::vector<char>& bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + done), chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::string hex32(std::uint32_t v) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

std::vector<char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, const char* data, std::size_t size) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(data, static_cast<std::streamsize>(size));
  if (!out) throw IoError("failed writing " + path.string());
}

Vec3 vec3_field(const nlohmann::json& h, const char* key, const fs::path& path) {
  const auto& a = h.at(key);
  if (!a.is_array() || a.size() != 3) throw IoError(path.string() + ": header field '" + key + "' needs 3 numbers");
  return {a[0].get<double>(), a[1].get<double>(), a[2].get<double>()};
}

}  // namespace

fs::path payload_path(const fs::path& header) {
  fs::path p = header;
  p.replace_extension(".raw");
  return p;
}

void write_volume(const Volume& v, const fs::path& header) {
  v.validate();
  std::vector<char> payload;
  if (v.is_mask()) {
    payload.resize(v.data.size());
    for (std::size_t i = 0; i < v.data.size(); ++i) payload[i] = static_cast<char>(v.data[i] > 0.5f ? 1 : 0);
  } else {
    payload.resize(v.data.size() * sizeof(float));
    std::memcpy(payload.data(), v.data.data(), payload.size());
  }
  const fs::path raw = payload_path(header);
  nlohmann::json h = {{"format", "vraw"},
                      {"version", 1},
                      {"extents", {v.extents.d, v.extents.h, v.extents.w}},
                      {"spacing_mm", v.spacing},
                      {"origin_mm", v.origin},
                      {"dtype", v.is_mask() ? "u8" : "r32"},
                      {"byte_order", "little"},
                      {"payload", raw.filename().string()},
                      {"payload_bytes", payload.size()},
                      {"crc32", hex32(crc32_of(payload))}};
  write_bytes(raw, payload.data(), payload.size());
  write_text(header, h.dump(2) + "\n");
}

Volume read_volume(const fs::path& header) {
  const std::string text = read_text(header);
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(header.string() + ": malformed header at byte offset " + std::to_string(e.byte) + ": " + e.what());
  }
  Volume v;
  std::size_t expected = 0;
  std::string crc;
  fs::path raw;
  try {
    if (h.value("format", std::string()) != "vraw") throw IoError(header.string() + ": not a vraw header");
    if (h.value("byte_order", std::string("little")) != "little")
      throw IoError(header.string() + ": only little-endian payloads are supported");
    const auto& e = h.at("extents");
    if (!e.is_array() || e.size() != 3) throw IoError(header.string() + ": header field 'extents' needs 3 integers");
    v.extents = {e[0].get<Index>(), e[1].get<Index>(), e[2].get<Index>()};
    if (v.extents.d < 1 || v.extents.h < 1 || v.extents.w < 1)
      throw IoError(header.string() + ": extents must be positive, got " + to_string(v.extents));
    v.spacing = vec3_field(h, "spacing_mm", header);
    v.origin = vec3_field(h, "origin_mm", header);
    for (double s : v.spacing)
      if (!(s > 0.0)) throw IoError(header.string() + ": spacing must be positive");
    const std::string dtype = h.at("dtype").get<std::string>();
    if (dtype == "u8") {
      v.dtype = VoxelType::u8;
    } else if (dtype == "r32") {
      v.dtype = VoxelType::r32;
    } else {
      throw IoError(header.string() + ": unknown dtype '" + dtype + "'");
    }
    expected = static_cast<std::size_t>(v.extents.volume()) * (v.is_mask() ? 1 : sizeof(float));
    crc = h.at("crc32").get<std::string>();
    raw = header.parent_path() / h.at("payload").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(header.string() + ": invalid header: " + e.what());
  }
  const std::vector<char> payload = read_bytes(raw);
  if (payload.size() != expected)
    throw IoError(raw.string() + ": payload " + (payload.size() < expected ? "truncated" : "oversized") +
                  ": expected " + std::to_string(expected) + " bytes, got " + std::to_string(payload.size()));
  const std::string actual = hex32(crc32_of(payload));
  if (actual != crc)
    throw IoError(raw.string() + ": checksum mismatch over bytes [0, " + std::to_string(payload.size()) +
                  "): header says " + crc + ", payload is " + actual);
  v.data.resize(static_cast<std::size_t>(v.extents.volume()));
  if (v.is_mask()) {
    for (std::size_t i = 0; i < payload.size(); ++i) {
      const auto b = static_cast<unsigned char>(payload[i]);
      if (b > 1) throw IoError(raw.string() + ": mask byte at offset " + std::to_string(i) + " is " + std::to_string(b));
      v.data[i] = static_cast<float>(b);
    }
  } else {
    std::memcpy(v.data.data(), payload.data(), payload.size());
  }
  return v;
}

const ManifestEntry& Manifest::find(const std::string& case_id) const {
  for (const auto& c : cases)
    if (c.case_id == case_id) return c;
  throw ConfigError("manifest has no case '" + case_id + "'");
}

void write_manifest(const Manifest& m, const fs::path& path) {
  nlohmann::json cases = nlohmann::json::array();
  for (const auto& c : m.cases)
    cases.push_back({{"case_id", c.case_id}, {"image", c.image}, {"mask", c.mask}, {"lesions", c.lesions}});
  write_text(path, nlohmann::json{{"cases", cases}}.dump(2) + "\n");
}

Manifest read_manifest(const fs::path& path) {
  Manifest m;
  try {
    const nlohmann::json j = nlohmann::json::parse(read_text(path));
    for (const auto& c : j.at("cases")) {
      ManifestEntry e;
      e.case_id = c.at("case_id").get<std::string>();
      e.image = c.at("image").get<std::string>();
      e.mask = c.value("mask", std::string());
      e.lesions = c.value("lesions", std::vector<LesionAnnotation>{});
      m.cases.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": invalid manifest: " + e.what());
  }
  return m;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  write_bytes(path, text.data(), text.size());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace abus
