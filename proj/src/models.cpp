#include "dcollapse/models.hpp"

#include <cmath>
#include <string>

#include "dcollapse/error.hpp"
#include "dcollapse/rng.hpp"

namespace dcollapse {

void StudentConfig::validate() const {
  auto fail = [](const std::string& what) { throw InvalidInput("student config: " + what); };
  if (width_factor < 1) fail("width_factor must be >= 1, got " + std::to_string(width_factor));
  if (base_width < 1) fail("base_width must be >= 1, got " + std::to_string(base_width));
  if (stages < 1 || stages > 8) fail("stages must be in [1, 8], got " + std::to_string(stages));
  if (input_channels < 1) fail("input_channels must be >= 1, got " + std::to_string(input_channels));
  if (embed_dim < 2) fail("embed_dim must be >= 2, got " + std::to_string(embed_dim));
  if (input_size < 1 || input_size % (1 << stages) != 0)
    fail("input_size " + std::to_string(input_size) + " must be a positive multiple of 2^stages = " +
         std::to_string(1 << stages));
}

void to_json(nlohmann::json& j, const StudentConfig& c) {
  j = nlohmann::json{{"width_factor", c.width_factor}, {"base_width", c.base_width},
                     {"stages", c.stages},             {"input_channels", c.input_channels},
                     {"input_size", c.input_size},     {"embed_dim", c.embed_dim},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, StudentConfig& c) {
  j.at("width_factor").get_to(c.width_factor);
  j.at("base_width").get_to(c.base_width);
  j.at("stages").get_to(c.stages);
  j.at("input_channels").get_to(c.input_channels);
  j.at("input_size").get_to(c.input_size);
  j.at("embed_dim").get_to(c.embed_dim);
  j.at("seed").get_to(c.seed);
}

std::vector<ad::Shape> parameter_shapes(const StudentConfig& c) {
  c.validate();
  auto sz = [](int v) { return static_cast<std::size_t>(v); };
  std::vector<ad::Shape> shapes;
  auto conv = [&](int in, int out) {
    shapes.push_back({sz(out), sz(in), 3, 3});
    shapes.push_back({sz(out)});
  };
  conv(c.input_channels, c.stage_width(0));
  int prev = c.stage_width(0);
  for (int s = 0; s < c.stages; ++s) {
    conv(prev, c.stage_width(s));
    conv(c.stage_width(s), c.stage_width(s));
    prev = c.stage_width(s);
  }
  shapes.push_back({sz(prev), sz(c.embed_dim)});
  shapes.push_back({sz(c.embed_dim)});
  return shapes;
}

std::size_t param_count(const StudentConfig& config) {
  std::size_t total = 0;
  for (const auto& s : parameter_shapes(config)) total += ad::shape_size(s);
  return total;
}

void round_to_float32(std::span<ad::Parameter> params) {
  for (auto& p : params)
    for (double& v : p.value.data()) v = static_cast<double>(static_cast<float>(v));
}

StudentCNN::StudentCNN(StudentConfig config) : config_(config) {
  const auto shapes = parameter_shapes(config_);
  Rng rng(derive_seed({config_.seed, 0x5747u}));
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const bool is_weight = i % 2 == 0;
    const bool is_head = i + 2 >= shapes.size();
    ad::Parameter p;
    p.name = is_head ? (is_weight ? "head.weight" : "head.bias")
                     : "layer" + std::to_string(i / 2) + (is_weight ? ".weight" : ".bias");
    p.value = ad::Tensor(shapes[i]);
    if (is_weight) {
      // conv: fan_in = in * 3 * 3 (He, relu follows); head: fan_in = features (no relu).
      const double fan_in = is_head ? static_cast<double>(shapes[i][0])
                                    : static_cast<double>(shapes[i][1] * shapes[i][2] * shapes[i][3]);
      const double stddev = std::sqrt((is_head ? 1.0 : 2.0) / fan_in);
      for (double& v : p.value.data()) v = rng.normal(0.0, stddev);
    }
    p.grad = ad::Tensor(shapes[i]);
    params_.push_back(std::move(p));
  }
  round_to_float32(params_);
}

StudentCNN::StudentCNN(StudentConfig config, std::vector<ad::Parameter> params)
    : config_(config), params_(std::move(params)) {
  const auto shapes = parameter_shapes(config_);
  if (shapes.size() != params_.size())
    throw ShapeError("student: expected " + std::to_string(shapes.size()) + " parameter tensors, got " +
                     std::to_string(params_.size()));
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (params_[i].value.shape() != shapes[i])
      throw ShapeError("student: parameter " + std::to_string(i) + " has shape " +
                       ad::shape_str(params_[i].value.shape()) + ", expected " + ad::shape_str(shapes[i]));
    if (params_[i].grad.shape() != shapes[i]) params_[i].grad = ad::Tensor(shapes[i]);
  }
}

std::size_t StudentCNN::param_count() const {
  std::size_t total = 0;
  for (const auto& p : params_) total += p.value.size();
  return total;
}

namespace {

template <class Bind>
ad::Var run_network(const StudentConfig& c, ad::Var x, Bind bind) {
  const auto& shape = x.shape();
  const auto ch = static_cast<std::size_t>(c.input_channels);
  const auto size = static_cast<std::size_t>(c.input_size);
  if (shape.size() != 4 || shape[1] != ch || shape[2] != size || shape[3] != size)
    throw ShapeError("student forward: image batch shape " + ad::shape_str(shape) + " does not match [n," +
                     std::to_string(ch) + "," + std::to_string(size) + "," + std::to_string(size) + "]");
  const ad::Conv2dOptions same{1, 1};
  std::size_t k = 0;
  auto conv_relu = [&](ad::Var in) {
    ad::Var w = bind(k++);
    ad::Var b = bind(k++);
    return ad::relu(ad::conv2d(in, w, b, same));
  };
  ad::Var h = conv_relu(x);
  for (int s = 0; s < c.stages; ++s) {
    if (s > 0) h = ad::avgpool2d(h, 2);
    h = conv_relu(h);
    h = conv_relu(h);
  }
  h = ad::global_avgpool(h);
  ad::Var w = bind(k++);
  ad::Var b = bind(k++);
  return ad::add_bias(ad::matmul(h, w), b);
}

}  // namespace

ad::Var StudentCNN::forward(ad::Tape& tape, ad::Var images) {
  return run_network(config_, images, [&](std::size_t i) { return tape.param(params_[i]); });
}

EmbeddingMatrix StudentCNN::embed(const ad::Tensor& images) const {
  constexpr std::size_t kChunk = 128;
  if (images.rank() != 4) throw ShapeError("student embed: expected rank-4 image batch, got " + ad::shape_str(images.shape()));
  const std::size_t n = images.dim(0);
  const std::size_t per = images.size() / n;
  const auto d = static_cast<std::size_t>(config_.embed_dim);
  std::vector<double> out;
  out.reserve(n * d);
  for (std::size_t start = 0; start < n; start += kChunk) {
    const std::size_t count = std::min(kChunk, n - start);
    ad::Shape s = images.shape();
    s[0] = count;
    std::vector<double> chunk(images.data().begin() + static_cast<std::ptrdiff_t>(start * per),
                              images.data().begin() + static_cast<std::ptrdiff_t>((start + count) * per));
    ad::Tape tape;
    ad::Var x = tape.constant(ad::Tensor(s, std::move(chunk)));
    ad::Var z = run_network(config_, x, [&](std::size_t i) { return tape.constant(params_[i].value); });
    out.insert(out.end(), z.value().data().begin(), z.value().data().end());
  }
  return EmbeddingMatrix(n, d, std::move(out));
}

}  // namespace dcollapse
