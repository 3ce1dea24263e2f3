#pragma once

// Run manifests: every file an output directory holds, with its SHA-256.
// Manifests carry no timestamps, so identical runs produce identical bytes.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace dcollapse {

inline constexpr const char* kManifestName = "manifest.json";

std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_hex(const std::string& text);
std::string file_sha256(const std::filesystem::path& path);

struct ManifestEntry {
  std::string path;  // relative to the manifest's directory, '/' separated
  std::string sha256;
  std::uintmax_t bytes = 0;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct RunManifest {
  std::string run_id;
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json inputs = nlohmann::json::object();  // path -> sha256
  nlohmann::json report = nlohmann::json::object();  // command-specific summary values
  std::vector<ManifestEntry> files;

  friend bool operator==(const RunManifest&, const RunManifest&) = default;
};

void to_json(nlohmann::json& j, const ManifestEntry& e);
void from_json(const nlohmann::json& j, ManifestEntry& e);
void to_json(nlohmann::json& j, const RunManifest& m);
void from_json(const nlohmann::json& j, RunManifest& m);

/// First 16 hex digits of the hash over command, config and inputs.
std::string make_run_id(const std::string& command, const nlohmann::json& config, const nlohmann::json& inputs);

/// Hashes every regular file below dir except the manifest itself, sorted by path.
std::vector<ManifestEntry> scan_files(const std::filesystem::path& dir);

/// Fills run_id and files, then writes dir/manifest.json.
RunManifest write_manifest(const std::filesystem::path& dir, RunManifest manifest);
RunManifest read_manifest(const std::filesystem::path& dir);

/// True when every listed file exists with the listed hash.
bool verify_manifest(const std::filesystem::path& dir, const RunManifest& manifest);

}  // namespace dcollapse
