#include "dcollapse/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

#include "dcollapse/error.hpp"
#include "dcollapse/rng.hpp"

namespace dcollapse {

std::string to_string(Split split) { return split == Split::Train ? "train" : "eval"; }

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "eval") return Split::Eval;
  throw InvalidInput("unknown split '" + s + "'");
}

ad::Tensor Dataset::as_tensor() const {
  return ad::Tensor({n, channels, size, size}, pixels);
}

ad::Tensor Dataset::gather(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw InvalidInput("dataset gather: no indices");
  std::vector<double> out;
  out.reserve(indices.size() * image_size());
  for (auto i : indices) {
    if (i >= n) throw InvalidInput("dataset gather: index " + std::to_string(i) + " out of range");
    const auto img = image(i);
    out.insert(out.end(), img.begin(), img.end());
  }
  return ad::Tensor({indices.size(), channels, size, size}, std::move(out));
}

void Dataset::validate() const {
  if (n == 0) throw InvalidInput("dataset: empty");
  if (channels == 0 || size == 0) throw InvalidInput("dataset: zero image extent");
  if (pixels.size() != n * image_size()) throw InvalidInput("dataset: pixel count does not match n*c*h*w");
  if (labels.size() != n) throw InvalidInput("dataset: label count does not match n");
  for (std::size_t i = 0; i < n; ++i)
    if (labels[i] < 0 || labels[i] >= class_count)
      throw InvalidInput("dataset: label " + std::to_string(labels[i]) + " of sample " + std::to_string(i) +
                         " outside [0, " + std::to_string(class_count) + ")");
  for (double p : pixels)
    if (!(p >= 0.0 && p <= 1.0)) throw InvalidInput("dataset: pixel outside [0, 1]");
}

void to_json(nlohmann::json& j, const SyntheticConfig& c) {
  j = nlohmann::json{{"classes", c.classes},         {"per_class", c.per_class},
                     {"size", c.size},               {"channels", c.channels},
                     {"noise_level", c.noise_level}, {"random_phase", c.random_phase},
                     {"seed", c.seed},               {"split", to_string(c.split)}};
}

void from_json(const nlohmann::json& j, SyntheticConfig& c) {
  j.at("classes").get_to(c.classes);
  j.at("per_class").get_to(c.per_class);
  j.at("size").get_to(c.size);
  j.at("channels").get_to(c.channels);
  j.at("noise_level").get_to(c.noise_level);
  j.at("random_phase").get_to(c.random_phase);
  j.at("seed").get_to(c.seed);
  c.split = parse_split(j.at("split").get<std::string>());
}

namespace {

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

constexpr double kContrastRange[2] = {0.2, 0.4};
constexpr double kOrientJitter = 0.2;  // fraction of the orientation spacing
constexpr double kBlobAmplitude = 0.3;

}  // namespace

Dataset gen_synthetic(const SyntheticConfig& c) {
  if (c.classes < 2) throw InvalidInput("gen_synthetic: classes must be >= 2");
  if (c.classes > 256) throw InvalidInput("gen_synthetic: classes must fit in one label byte");
  if (c.per_class < 1) throw InvalidInput("gen_synthetic: per_class must be >= 1");
  if (c.size < 4) throw InvalidInput("gen_synthetic: size must be >= 4");
  if (c.channels < 1) throw InvalidInput("gen_synthetic: channels must be >= 1");
  if (!(c.noise_level >= 0.0)) throw InvalidInput("gen_synthetic: noise_level must be >= 0");

  // Classes tile an (orientation x frequency) grid.
  const int n_freq = c.classes >= 4 ? 2 : 1;
  const int n_orient = (c.classes + n_freq - 1) / n_freq;
  constexpr double kFreqs[2] = {2.0, 3.5};  // cycles per image width

  Dataset d;
  d.n = static_cast<std::size_t>(c.classes) * static_cast<std::size_t>(c.per_class);
  d.channels = static_cast<std::size_t>(c.channels);
  d.size = static_cast<std::size_t>(c.size);
  d.class_count = c.classes;
  d.split = c.split;
  d.pixels.resize(d.n * d.image_size());
  d.labels.resize(d.n);

  const double two_pi = 2.0 * std::numbers::pi;
  const double sz = static_cast<double>(c.size);
  const double orient_step = std::numbers::pi / n_orient;
  for (std::size_t i = 0; i < d.n; ++i) {
    const int label = static_cast<int>(i % static_cast<std::size_t>(c.classes));
    d.labels[i] = label;
    Rng rng(derive_seed({c.seed, 0x6772u, i}));
    // Instance content: every draw happens unconditionally so that toggling
    // random_phase leaves the remaining parameters unchanged.
    const double phase = two_pi * rng.uniform();
    const double contrast = rng.uniform(kContrastRange[0], kContrastRange[1]);
    const double jitter = rng.uniform(-kOrientJitter, kOrientJitter) * orient_step;
    const double blob_x = rng.uniform(0.2, 0.8) * sz;
    const double blob_y = rng.uniform(0.2, 0.8) * sz;
    const double blob_width = rng.uniform(0.08, 0.18) * sz;
    const double blob_amp = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, kBlobAmplitude);

    const double theta = orient_step * (label % n_orient) + (c.random_phase ? jitter : 0.0);
    const double freq = kFreqs[label / n_orient];
    const double kx = two_pi * freq * std::cos(theta) / sz;
    const double ky = two_pi * freq * std::sin(theta) / sz;
    const double ph = c.random_phase ? phase : 0.0;
    const double amp = c.random_phase ? contrast : 0.5 * (kContrastRange[0] + kContrastRange[1]);
    const double bamp = c.random_phase ? blob_amp : 0.0;
    double* img = d.pixels.data() + i * d.image_size();
    for (std::size_t ch = 0; ch < d.channels; ++ch)
      for (std::size_t y = 0; y < d.size; ++y)
        for (std::size_t x = 0; x < d.size; ++x) {
          const double fx = static_cast<double>(x), fy = static_cast<double>(y);
          const double r2 = (fx - blob_x) * (fx - blob_x) + (fy - blob_y) * (fy - blob_y);
          double v = 0.5 + amp * std::sin(kx * fx + ky * fy + ph) +
                     bamp * std::exp(-r2 / (2.0 * blob_width * blob_width));
          if (c.noise_level > 0.0) v += c.noise_level * rng.normal();
          img[(ch * d.size + y) * d.size + x] = quantize(v);
        }
  }
  return d;
}

Dataset read_cifar_binary(const std::filesystem::path& path, const ReadOptions& opts) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open dataset file " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t rec = opts.layout.record_bytes();
  if (bytes.empty() && !opts.allow_empty) throw FormatError("empty dataset file " + path.string(), 0);
  if (bytes.size() % rec != 0)
    throw FormatError("truncated record " + std::to_string(bytes.size() / rec) + " (record size " +
                          std::to_string(rec) + ") in " + path.string(),
                      (bytes.size() / rec) * rec);

  Dataset d;
  d.n = bytes.size() / rec;
  d.channels = opts.layout.channels;
  d.size = opts.layout.size;
  d.class_count = opts.class_count;
  d.split = opts.split;
  d.labels.resize(d.n);
  d.pixels.resize(d.n * d.image_size());
  for (std::size_t r = 0; r < d.n; ++r) {
    const std::size_t off = r * rec;
    const int label = bytes[off];
    if (label >= opts.class_count)
      throw FormatError("record " + std::to_string(r) + " has label " + std::to_string(label) + " >= class count " +
                            std::to_string(opts.class_count),
                        off);
    d.labels[r] = label;
    for (std::size_t k = 0; k + 1 < rec; ++k) d.pixels[r * d.image_size() + k] = bytes[off + 1 + k] / 255.0;
  }
  return d;
}

void write_cifar_binary(const Dataset& data, const std::filesystem::path& path) {
  data.validate();
  std::vector<char> bytes;
  bytes.reserve(data.n * (1 + data.image_size()));
  for (std::size_t i = 0; i < data.n; ++i) {
    if (data.labels[i] > 255) throw InvalidInput("write_cifar_binary: label does not fit in one byte");
    bytes.push_back(static_cast<char>(static_cast<unsigned char>(data.labels[i])));
    for (double p : data.image(i))
      bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(p * 255.0))));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidInput("cannot write dataset file " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InvalidInput("write failed for " + path.string());
}

void AugmentConfig::validate() const {
  if (crop_padding < 0) throw InvalidInput("augment: crop_padding must be >= 0");
  if (!(flip_probability >= 0.0 && flip_probability <= 1.0))
    throw InvalidInput("augment: flip_probability must be in [0, 1]");
  if (!(brightness >= 0.0)) throw InvalidInput("augment: brightness must be >= 0");
}

void to_json(nlohmann::json& j, const AugmentConfig& c) {
  j = nlohmann::json{
      {"crop_padding", c.crop_padding}, {"flip_probability", c.flip_probability}, {"brightness", c.brightness}};
}

void from_json(const nlohmann::json& j, AugmentConfig& c) {
  j.at("crop_padding").get_to(c.crop_padding);
  j.at("flip_probability").get_to(c.flip_probability);
  j.at("brightness").get_to(c.brightness);
}

AugmentParams sample_augment(const AugmentConfig& config, const AugmentKey& key) {
  config.validate();
  Rng rng(derive_seed({key.seed, 0x6175u, key.epoch, key.sample, key.view}));
  // Fixed draw order regardless of config keeps streams aligned.
  const auto span = static_cast<std::uint64_t>(2 * config.crop_padding + 1);
  AugmentParams p;
  p.dx = static_cast<int>(rng.below(span));
  p.dy = static_cast<int>(rng.below(span));
  p.flip = rng.uniform() < config.flip_probability;
  p.brightness = config.brightness > 0.0 ? rng.uniform(-config.brightness, config.brightness) : 0.0;
  return p;
}

std::vector<double> apply_augment(std::span<const double> image, std::size_t channels, std::size_t size,
                                  const AugmentParams& params, int padding) {
  if (image.size() != channels * size * size) throw ShapeError("augment: image size does not match channels*size^2");
  std::vector<double> out(image.size(), 0.0);
  const auto sz = static_cast<std::ptrdiff_t>(size);
  for (std::size_t ch = 0; ch < channels; ++ch)
    for (std::ptrdiff_t y = 0; y < sz; ++y)
      for (std::ptrdiff_t x = 0; x < sz; ++x) {
        const std::ptrdiff_t sy = y + params.dy - padding;
        const std::ptrdiff_t sx0 = (params.flip ? sz - 1 - x : x);
        const std::ptrdiff_t sx = sx0 + params.dx - padding;
        double v = 0.0;
        if (sy >= 0 && sy < sz && sx >= 0 && sx < sz)
          v = image[(ch * size + static_cast<std::size_t>(sy)) * size + static_cast<std::size_t>(sx)];
        out[(ch * size + static_cast<std::size_t>(y)) * size + static_cast<std::size_t>(x)] =
            std::clamp(v + params.brightness, 0.0, 1.0);
      }
  return out;
}

std::vector<double> augment_view(std::span<const double> image, std::size_t channels, std::size_t size,
                                 const AugmentConfig& config, const AugmentKey& key) {
  return apply_augment(image, channels, size, sample_augment(config, key), config.crop_padding);
}

std::pair<std::vector<double>, std::vector<double>> augment_pair(std::span<const double> image, std::size_t channels,
                                                                 std::size_t size, const AugmentConfig& config,
                                                                 std::uint64_t seed, std::uint64_t epoch,
                                                                 std::uint64_t sample) {
  return {augment_view(image, channels, size, config, {seed, epoch, sample, 0}),
          augment_view(image, channels, size, config, {seed, epoch, sample, 1})};
}

std::vector<double> gaussian_noise(std::size_t count, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw InvalidInput("gaussian noise: sigma must be >= 0, got " + std::to_string(sigma));
  Rng rng(seed);
  std::vector<double> out(count);
  for (double& v : out) v = sigma * rng.normal();
  return out;
}

Dataset add_gaussian_noise(const Dataset& data, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw InvalidInput("add_gaussian_noise: sigma must be >= 0, got " + std::to_string(sigma));
  Dataset out = data;
  if (sigma == 0.0) return out;
  const std::size_t per = data.image_size();
  for (std::size_t i = 0; i < data.n; ++i) {
    const auto noise = gaussian_noise(per, sigma, derive_seed({seed, 0x6e6fu, i}));
    double* img = out.pixels.data() + i * per;
    for (std::size_t k = 0; k < per; ++k) img[k] = std::clamp(img[k] + noise[k], 0.0, 1.0);
  }
  return out;
}

}  // namespace dcollapse
