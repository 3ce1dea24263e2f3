#include "doctest.h"

#include <random>

#include "dcollapse/error.hpp"
#include "dcollapse/losses.hpp"
#include "dcollapse/models.hpp"
#include "gradient_cases.hpp"

using namespace dcollapse;

namespace {

StudentConfig small_config(int factor = 1) {
  StudentConfig c;
  c.width_factor = factor;
  c.base_width = 2;
  c.stages = 2;
  c.input_size = 8;
  c.embed_dim = 6;
  c.seed = 3;
  return c;
}

ad::Tensor random_images(std::uint64_t seed, std::size_t n, const StudentConfig& c) {
  std::mt19937_64 gen(seed);
  const auto ch = static_cast<std::size_t>(c.input_channels), s = static_cast<std::size_t>(c.input_size);
  return gradcases::random_tensor(gen, {n, ch, s, s}, 0.0, 1.0);
}

}  // namespace

TEST_SUITE("models") {

TEST_CASE("parameter count matches a layer-by-layer tally") {
  StudentConfig c;
  c.width_factor = 1;
  c.base_width = 8;
  c.stages = 3;
  c.input_channels = 1;
  c.input_size = 32;
  c.embed_dim = 64;
  // stem 1->8, stage widths 8, 16, 32 with two 3x3 convs each, head 32->64
  const std::size_t stem = 8 * 1 * 9 + 8;
  const std::size_t s0 = 2 * (8 * 8 * 9 + 8);
  const std::size_t s1 = (16 * 8 * 9 + 16) + (16 * 16 * 9 + 16);
  const std::size_t s2 = (32 * 16 * 9 + 32) + (32 * 32 * 9 + 32);
  const std::size_t head = 32 * 64 + 64;
  CHECK(param_count(c) == stem + s0 + s1 + s2 + head);
  CHECK(param_count(c) == 20736);
  CHECK(build_student(c).param_count() == 20736);
}

TEST_CASE("doubling width roughly quadruples parameters") {
  for (int base : {4, 8}) {
    StudentConfig c;
    c.base_width = base;
    c.input_size = 32;
    const double one = static_cast<double>(param_count(c));
    c.width_factor = 2;
    const double two = static_cast<double>(param_count(c));
    c.width_factor = 4;
    const double four = static_cast<double>(param_count(c));
    CHECK(two / one > 3.5);
    CHECK(two / one < 4.1);
    CHECK(four > two);
  }
}

TEST_CASE("config validation names the violated constraint") {
  auto expect = [](StudentConfig c, const std::string& needle) {
    try {
      c.validate();
      FAIL("expected InvalidInput");
    } catch (const InvalidInput& e) {
      CHECK(std::string(e.what()).find(needle) != std::string::npos);
    }
  };
  auto c = small_config();
  c.width_factor = 0;
  expect(c, "width_factor");
  c = small_config();
  c.embed_dim = 1;
  expect(c, "embed_dim");
  c = small_config();
  c.input_size = 6;
  expect(c, "input_size");
  CHECK_THROWS_AS(build_student(c), InvalidInput);
}

TEST_CASE("seeded initialization is repeatable") {
  auto a = build_student(small_config());
  auto b = build_student(small_config());
  REQUIRE(a.parameters().size() == b.parameters().size());
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    CHECK(a.parameters()[i].name == b.parameters()[i].name);
    CHECK(a.parameters()[i].value == b.parameters()[i].value);
  }
  auto c = small_config();
  c.seed = 4;
  CHECK(build_student(c).parameters()[0].value != a.parameters()[0].value);
}

TEST_CASE("parameters are float32 representable and biases start at zero") {
  auto m = build_student(small_config(2));
  for (const auto& p : m.parameters()) {
    for (double v : p.value.data()) CHECK(static_cast<double>(static_cast<float>(v)) == v);
    if (p.name.find("bias") != std::string::npos)
      for (double v : p.value.data()) CHECK(v == 0.0);
  }
  CHECK(m.parameters().back().name == "head.bias");
  CHECK(m.parameters().front().name == "layer0.weight");
}

TEST_CASE("forward shapes") {
  auto m = build_student(small_config());
  auto z = m.embed(random_images(1, 1, m.config()));
  CHECK(z.n == 1);
  CHECK(z.d == 6);
  CHECK_THROWS_AS(m.embed(ad::Tensor({2, 1, 4, 4})), ShapeError);
  CHECK_THROWS_AS(m.embed(ad::Tensor({2, 2, 8, 8})), ShapeError);
}

TEST_CASE("duplicated inputs give bitwise duplicated outputs") {
  auto m = build_student(small_config());
  auto one = random_images(2, 1, m.config());
  std::vector<double> two_data = one.storage();
  two_data.insert(two_data.end(), one.storage().begin(), one.storage().end());
  auto z = m.embed(ad::Tensor({2, 1, 8, 8}, two_data));
  for (std::size_t j = 0; j < z.d; ++j) CHECK(z(0, j) == z(1, j));
  CHECK(m.embed(one).values == std::vector<double>(z.values.begin(), z.values.begin() + 6));
}

TEST_CASE("zero image through a zero-bias model embeds to zero") {
  auto m = build_student(small_config());
  auto z = m.embed(ad::Tensor({1, 1, 8, 8}, 0.0));
  for (double v : z.values) CHECK(v == 0.0);
}

TEST_CASE("embedding of a sample does not depend on its chunk position") {
  StudentConfig c = small_config();
  auto m = build_student(c);
  auto images = random_images(5, 300, c);
  auto all = m.embed(images);
  for (std::size_t i : {0u, 127u, 128u, 200u, 299u}) {
    ad::Tensor single({1, 1, 8, 8}, std::vector<double>(images.storage().begin() + static_cast<long>(i * 64),
                                                        images.storage().begin() + static_cast<long>((i + 1) * 64)));
    auto z = m.embed(single);
    for (std::size_t j = 0; j < z.d; ++j) CHECK(z(0, j) == all(i, j));
  }
}

TEST_CASE("taped forward equals inference") {
  auto m = build_student(small_config());
  auto images = random_images(6, 4, m.config());
  ad::Tape tape;
  auto z = m.forward(tape, tape.constant(images));
  CHECK(z.value().storage() == m.embed(images).values);
}

TEST_CASE("network loss gradient matches finite differences on parameter coordinates") {
  auto m = build_student(small_config());
  auto images = random_images(7, 3, m.config());
  std::mt19937_64 gen(8);
  auto target = gradcases::random_tensor(gen, {3, 6});
  // Zero biases put dead units exactly on the relu kink; move them off it.
  for (auto& p : m.parameters())
    if (p.name.find("bias") != std::string::npos) p.value = gradcases::random_tensor(gen, p.value.shape(), 0.02, 0.1);
  auto loss_of = [&](StudentCNN& model) {
    ad::Tape tape;
    auto z = model.forward(tape, tape.constant(images));
    return dcollapse::cosine_distill(z, tape.constant(target)).value().item();
  };
  {
    ad::Tape tape;
    auto z = m.forward(tape, tape.constant(images));
    tape.backward(dcollapse::cosine_distill(z, tape.constant(target)));
  }
  std::uniform_int_distribution<std::size_t> pick_param(0, m.parameters().size() - 1);
  double worst = 0.0;
  for (int k = 0; k < 20; ++k) {
    auto& p = m.parameters()[pick_param(gen)];
    std::uniform_int_distribution<std::size_t> pick(0, p.value.size() - 1);
    const std::size_t c = pick(gen);
    const double g = p.grad[c];
    const double orig = p.value[c];
    const double h = 1e-5;
    p.value[c] = orig + h;
    const double up = loss_of(m);
    p.value[c] = orig - h;
    const double down = loss_of(m);
    p.value[c] = orig;
    const double fd = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(fd - g) / std::max({std::abs(fd), std::abs(g), 1e-6}));
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("param count grows with width factor") {
  std::size_t prev = 0;
  for (int f = 1; f <= 5; ++f) {
    const auto n = param_count(small_config(f));
    CHECK(n > prev);
    prev = n;
  }
}

TEST_CASE("config JSON round trip") {
  auto c = small_config(3);
  nlohmann::json j = c;
  CHECK(j.get<StudentConfig>() == c);
}

TEST_CASE("wrapping parameters checks shapes") {
  auto m = build_student(small_config());
  std::vector<ad::Parameter> ps(m.parameters().begin(), m.parameters().end());
  CHECK_NOTHROW(StudentCNN(small_config(), ps));
  ps.pop_back();
  CHECK_THROWS_AS(StudentCNN(small_config(), ps), ShapeError);
  std::vector<ad::Parameter> wrong(m.parameters().begin(), m.parameters().end());
  wrong[0].value = ad::Tensor({1});
  CHECK_THROWS_AS(StudentCNN(small_config(), wrong), ShapeError);
}

}
