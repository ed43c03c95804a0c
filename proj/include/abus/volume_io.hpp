#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "abus/volume.hpp"

namespace abus {

// A volume is stored as a JSON header (`name.vraw`) next to a raw
// little-endian payload (`name.raw`). The header carries extents, spacing,
// origin, dtype (r32 | u8), payload size and a CRC-32 of the payload.
void write_volume(const Volume& v, const std::filesystem::path& header);
Volume read_volume(const std::filesystem::path& header);

std::filesystem::path payload_path(const std::filesystem::path& header);

struct ManifestEntry {
  std::string case_id;
  std::string image;  // header paths, relative to the manifest directory
  std::string mask;
  std::vector<LesionAnnotation> lesions;

  bool operator==(const ManifestEntry&) const = default;
};

struct Manifest {
  std::vector<ManifestEntry> cases;

  const ManifestEntry& find(const std::string& case_id) const;
  bool operator==(const Manifest&) const = default;
};

void write_manifest(const Manifest& m, const std::filesystem::path& path);
Manifest read_manifest(const std::filesystem::path& path);

// Truncates and rewrites `path`, creating missing parent directories.
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace abus
