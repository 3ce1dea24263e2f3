#include "dcollapse/teacher.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "dcollapse/error.hpp"
#include "dcollapse/rng.hpp"

namespace dcollapse {

std::string TeacherStore::kind() const {
  if (meta.is_object() && meta.contains("kind") && meta["kind"].is_string()) return meta["kind"].get<std::string>();
  return "external";
}

EmbeddingMatrix TeacherStore::as_matrix() const { return EmbeddingMatrix(n, dim, values, labels); }

void TeacherStore::validate() const {
  if (n == 0) throw InvalidInput("teacher store: no rows");
  if (dim < 2) throw InvalidInput("teacher store: dimension must be >= 2, got " + std::to_string(dim));
  if (values.size() != n * dim) throw InvalidInput("teacher store: value count does not match n*D");
  if (labels && labels->size() != n) throw InvalidInput("teacher store: label count does not match n");
  for (std::size_t k = 0; k < values.size(); ++k)
    if (!std::isfinite(values[k])) throw InvalidInput("teacher store: non-finite value in row " + std::to_string(k / dim));
}

std::span<const double> lookup(const TeacherStore& store, std::size_t index) {
  if (index >= store.n)
    throw InvalidInput("teacher lookup: index " + std::to_string(index) + " out of range [0, " +
                       std::to_string(store.n) + ")");
  return {store.values.data() + index * store.dim, store.dim};
}

void ConeConfig::validate() const {
  if (dim < 2) throw InvalidInput("cone teacher: dim must be >= 2");
  if (!(cone_offset >= 0.0)) throw InvalidInput("cone teacher: cone_offset must be >= 0");
  if (!(class_scale >= 0.0)) throw InvalidInput("cone teacher: class_scale must be >= 0");
  if (!(within_class_scale >= 0.0)) throw InvalidInput("cone teacher: within_class_scale must be >= 0");
  if (!(spectral_decay >= 0.0)) throw InvalidInput("cone teacher: spectral_decay must be >= 0");
}

void to_json(nlohmann::json& j, const ConeConfig& c) {
  j = nlohmann::json{{"dim", c.dim},
                     {"cone_offset", c.cone_offset},
                     {"class_scale", c.class_scale},
                     {"within_class_scale", c.within_class_scale},
                     {"spectral_decay", c.spectral_decay}};
}

void from_json(const nlohmann::json& j, ConeConfig& c) {
  j.at("dim").get_to(c.dim);
  j.at("cone_offset").get_to(c.cone_offset);
  j.at("class_scale").get_to(c.class_scale);
  j.at("within_class_scale").get_to(c.within_class_scale);
  j.at("spectral_decay").get_to(c.spectral_decay);
}

void UniformConfig::validate() const {
  if (dim < 2) throw InvalidInput("uniform teacher: dim must be >= 2");
  if (!(class_scale >= 0.0)) throw InvalidInput("uniform teacher: class_scale must be >= 0");
  if (!(within_class_scale >= 0.0)) throw InvalidInput("uniform teacher: within_class_scale must be >= 0");
}

void to_json(nlohmann::json& j, const UniformConfig& c) {
  j = nlohmann::json{{"dim", c.dim}, {"class_scale", c.class_scale}, {"within_class_scale", c.within_class_scale}};
}

void from_json(const nlohmann::json& j, UniformConfig& c) {
  j.at("dim").get_to(c.dim);
  j.at("class_scale").get_to(c.class_scale);
  j.at("within_class_scale").get_to(c.within_class_scale);
}

namespace {

int class_count_of(std::span<const int> labels) {
  if (labels.empty()) throw InvalidInput("teacher generator: no labels");
  int max_label = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) throw InvalidInput("teacher generator: negative label at index " + std::to_string(i));
    max_label = std::max(max_label, labels[i]);
  }
  return max_label + 1;
}

std::vector<double> unit_gaussian(Rng& rng, std::size_t dim, std::span<const double> axis_scale = {}) {
  std::vector<double> v(dim);
  double s = 0.0;
  for (std::size_t j = 0; j < dim; ++j) {
    v[j] = rng.normal() * (axis_scale.empty() ? 1.0 : axis_scale[j]);
    s += v[j] * v[j];
  }
  const double r = std::sqrt(s);
  for (auto& x : v) x /= r;
  return v;
}

TeacherStore assemble(std::span<const int> labels, std::size_t dim, std::span<const double> offset,
                      const std::vector<std::vector<double>>& class_dirs, double a, double b, std::uint64_t seed) {
  TeacherStore t;
  t.n = labels.size();
  t.dim = dim;
  t.values.resize(t.n * dim);
  t.labels = std::vector<int>(labels.begin(), labels.end());
  const double noise_std = b / std::sqrt(static_cast<double>(dim));
  for (std::size_t i = 0; i < t.n; ++i) {
    Rng rng(derive_seed({seed, 0x7465u, i}));
    const auto& v = class_dirs[static_cast<std::size_t>(labels[i])];
    for (std::size_t j = 0; j < dim; ++j) {
      double x = (offset.empty() ? 0.0 : offset[j]) + a * v[j];
      if (b > 0.0) x += noise_std * rng.normal();
      t.values[i * dim + j] = static_cast<double>(static_cast<float>(x));
    }
  }
  return t;
}

}  // namespace

TeacherStore gen_cone_teacher(std::span<const int> labels, const ConeConfig& config, std::uint64_t seed) {
  config.validate();
  const int classes = class_count_of(labels);
  const auto dim = static_cast<std::size_t>(config.dim);
  Rng rng(derive_seed({seed, 0x636fu}));
  auto u = unit_gaussian(rng, dim);
  for (auto& x : u) x *= config.cone_offset;
  std::vector<double> axis_scale(dim);
  for (std::size_t j = 0; j < dim; ++j)
    axis_scale[j] = std::pow(static_cast<double>(j + 1), -0.5 * config.spectral_decay);
  std::vector<std::vector<double>> dirs;
  for (int c = 0; c < classes; ++c) dirs.push_back(unit_gaussian(rng, dim, axis_scale));

  TeacherStore t = assemble(labels, dim, u, dirs, config.class_scale, config.within_class_scale, seed);
  t.meta = {{"kind", "cone"}, {"parameters", config}, {"seed", seed}, {"source", "synthetic"}};
  return t;
}

TeacherStore gen_uniform_teacher(std::span<const int> labels, const UniformConfig& config, std::uint64_t seed) {
  config.validate();
  const int classes = class_count_of(labels);
  const auto dim = static_cast<std::size_t>(config.dim);
  Rng rng(derive_seed({seed, 0x756eu}));
  std::vector<std::vector<double>> dirs;
  for (int c = 0; c < classes; ++c) dirs.push_back(unit_gaussian(rng, dim));

  TeacherStore t = assemble(labels, dim, {}, dirs, config.class_scale, config.within_class_scale, seed);
  t.meta = {{"kind", "uniform"}, {"parameters", config}, {"seed", seed}, {"source", "synthetic"}};
  return t;
}

// ---- EMB1 -------------------------------------------------------------------

namespace {

constexpr std::uint32_t kEmb1Version = 1;

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<unsigned char>((v >> (8 * k)) & 0xffu));
}

class Reader {
 public:
  explicit Reader(std::span<const unsigned char> bytes) : bytes_(bytes) {}
  std::uint64_t offset() const { return pos_; }
  void need(std::size_t count, const char* what) const {
    if (bytes_.size() - pos_ < count)
      throw FormatError(std::string("EMB1: truncated ") + what + " (need " + std::to_string(count) + " bytes, have " +
                            std::to_string(bytes_.size() - pos_) + ")",
                        pos_);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(bytes_[pos_ + k]) << (8 * k);
    pos_ += 4;
    return v;
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return bytes_[pos_++];
  }
  std::span<const unsigned char> take(std::size_t count, const char* what) {
    need(count, what);
    auto s = bytes_.subspan(pos_, count);
    pos_ += count;
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const unsigned char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<unsigned char> encode_emb1(const TeacherStore& store) {
  store.validate();
  if (store.n > UINT32_MAX || store.dim > UINT32_MAX) throw InvalidInput("EMB1: store too large");
  std::vector<unsigned char> out;
  out.reserve(17 + store.values.size() * 4 + store.n * 4 + 64);
  for (char c : std::string("EMB1")) out.push_back(static_cast<unsigned char>(c));
  put_u32(out, kEmb1Version);
  put_u32(out, static_cast<std::uint32_t>(store.n));
  put_u32(out, static_cast<std::uint32_t>(store.dim));
  out.push_back(store.labels ? 1 : 0);
  for (double v : store.values) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  if (store.labels)
    for (int l : *store.labels) {
      if (l < 0) throw InvalidInput("EMB1: negative label");
      put_u32(out, static_cast<std::uint32_t>(l));
    }
  const std::string meta = store.meta.dump();
  put_u32(out, static_cast<std::uint32_t>(meta.size()));
  out.insert(out.end(), meta.begin(), meta.end());
  return out;
}

TeacherStore decode_emb1(std::span<const unsigned char> bytes) {
  Reader r(bytes);
  const auto magic = r.take(4, "magic");
  if (std::memcmp(magic.data(), "EMB1", 4) != 0)
    throw FormatError("EMB1: bad magic '" + std::string(magic.begin(), magic.end()) + "'", 0);
  const auto version_at = r.offset();
  const auto version = r.u32("version");
  if (version != kEmb1Version)
    throw FormatError("EMB1: unsupported version " + std::to_string(version), version_at);
  TeacherStore t;
  t.n = r.u32("row count");
  t.dim = r.u32("dimension");
  const auto flag_at = r.offset();
  const auto has_labels = r.u8("label flag");
  if (has_labels > 1) throw FormatError("EMB1: label flag must be 0 or 1", flag_at);
  if (t.n == 0 || t.dim < 2) throw FormatError("EMB1: invalid shape n=" + std::to_string(t.n) + " D=" + std::to_string(t.dim), 8);

  const std::uint64_t count = static_cast<std::uint64_t>(t.n) * t.dim;
  if (count > r.remaining() / 4)
    throw FormatError("EMB1: truncated embedding payload (need " + std::to_string(count * 4) + " bytes, have " +
                          std::to_string(r.remaining()) + ")",
                      r.offset());
  t.values.resize(static_cast<std::size_t>(count));
  for (auto& v : t.values) {
    const auto at = r.offset();
    v = static_cast<double>(std::bit_cast<float>(r.u32("embedding payload")));
    if (!std::isfinite(v)) throw FormatError("EMB1: non-finite embedding value", at);
  }
  if (has_labels) {
    std::vector<int> labels(t.n);
    for (auto& l : labels) {
      const auto at = r.offset();
      const auto v = r.u32("labels");
      if (v > static_cast<std::uint32_t>(INT32_MAX)) throw FormatError("EMB1: label out of range", at);
      l = static_cast<int>(v);
    }
    t.labels = std::move(labels);
  }
  const auto meta_len = r.u32("metadata length");
  const auto meta_at = r.offset();
  const auto meta = r.take(meta_len, "metadata");
  if (r.remaining() != 0) throw FormatError("EMB1: " + std::to_string(r.remaining()) + " trailing bytes", r.offset());
  if (meta_len == 0) {
    t.meta = nlohmann::json::object();
  } else {
    try {
      t.meta = nlohmann::json::parse(meta.begin(), meta.end());
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(std::string("EMB1: metadata is not valid JSON: ") + e.what(), meta_at);
    }
  }
  return t;
}

void write_emb1(const TeacherStore& store, const std::filesystem::path& path) {
  const auto bytes = encode_emb1(store);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InvalidInput("write failed for " + path.string());
}

TeacherStore read_emb1(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_emb1(bytes);
}

}  // namespace dcollapse
