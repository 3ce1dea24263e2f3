#include "dcollapse/manifest.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <memory>

#include <openssl/evp.h>

#include "dcollapse/error.hpp"

namespace dcollapse {

namespace {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) throw Error("sha256: init failed");
  }
  void update(const void* data, std::size_t n) {
    if (EVP_DigestUpdate(ctx_.get(), data, n) != 1) throw Error("sha256: update failed");
  }
  std::string hex() {
    unsigned char out[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_.get(), out, &len) != 1) throw Error("sha256: final failed");
    static const char* digits = "0123456789abcdef";
    std::string s;
    for (unsigned int i = 0; i < len; ++i) {
      s += digits[out[i] >> 4];
      s += digits[out[i] & 0xf];
    }
    return s;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

}  // namespace

std::string sha256_hex(std::span<const unsigned char> bytes) {
  Sha256 h;
  h.update(bytes.data(), bytes.size());
  return h.hex();
}

std::string sha256_hex(const std::string& text) {
  Sha256 h;
  h.update(text.data(), text.size());
  return h.hex();
}

std::string file_sha256(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open " + path.string());
  Sha256 h;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) h.update(buf, static_cast<std::size_t>(in.gcount()));
  return h.hex();
}

void to_json(nlohmann::json& j, const ManifestEntry& e) {
  j = nlohmann::json{{"path", e.path}, {"sha256", e.sha256}, {"bytes", e.bytes}};
}

void from_json(const nlohmann::json& j, ManifestEntry& e) {
  j.at("path").get_to(e.path);
  j.at("sha256").get_to(e.sha256);
  j.at("bytes").get_to(e.bytes);
}

void to_json(nlohmann::json& j, const RunManifest& m) {
  j = nlohmann::json{{"run_id", m.run_id}, {"command", m.command}, {"config", m.config},
                     {"inputs", m.inputs}, {"report", m.report},   {"files", m.files}};
}

void from_json(const nlohmann::json& j, RunManifest& m) {
  j.at("run_id").get_to(m.run_id);
  j.at("command").get_to(m.command);
  m.config = j.at("config");
  m.inputs = j.at("inputs");
  m.report = j.value("report", nlohmann::json::object());
  j.at("files").get_to(m.files);
}

std::string make_run_id(const std::string& command, const nlohmann::json& config, const nlohmann::json& inputs) {
  return sha256_hex(command + '\n' + config.dump() + '\n' + inputs.dump()).substr(0, 16);
}

std::vector<ManifestEntry> scan_files(const std::filesystem::path& dir) {
  std::vector<ManifestEntry> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(e.path(), dir).generic_string();
    if (rel == kManifestName) continue;
    out.push_back({rel, file_sha256(e.path()), e.file_size()});
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.path < b.path; });
  return out;
}

RunManifest write_manifest(const std::filesystem::path& dir, RunManifest manifest) {
  manifest.run_id = make_run_id(manifest.command, manifest.config, manifest.inputs);
  manifest.files = scan_files(dir);
  std::ofstream out(dir / kManifestName, std::ios::trunc);
  if (!out) throw InvalidInput("cannot write " + (dir / kManifestName).string());
  out << nlohmann::json(manifest).dump(2) << '\n';
  if (!out) throw InvalidInput("write failed for " + (dir / kManifestName).string());
  return manifest;
}

RunManifest read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / kManifestName);
  if (!in) throw InvalidInput("cannot open " + (dir / kManifestName).string());
  try {
    return nlohmann::json::parse(in).get<RunManifest>();
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput("malformed manifest in " + dir.string() + ": " + e.what());
  }
}

bool verify_manifest(const std::filesystem::path& dir, const RunManifest& manifest) {
  for (const auto& f : manifest.files) {
    const auto p = dir / f.path;
    if (!std::filesystem::is_regular_file(p)) return false;
    if (std::filesystem::file_size(p) != f.bytes || file_sha256(p) != f.sha256) return false;
  }
  return true;
}

}  // namespace dcollapse
