#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "tsda/model.hpp"

using namespace tsda;
using namespace tsda::model;
using testing::randn;

namespace {

ModelConfig small_config(bool frequency = true) {
  ModelConfig c;
  c.channels = 2;
  c.length = 16;
  c.modes = 4;
  c.classes = 3;
  c.frequency_branch = frequency;
  c.time_channels = {3, 4, 4};
  c.kernel = 3;
  return c;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("tsda_test_" + name)).string();
}

}  // namespace

TEST_CASE("latent sizes and shapes") {
  const auto c = small_config();
  CHECK(c.frequency_dim() == 2 * 2 * 4);
  CHECK(c.time_dim() == 4);
  CHECK(small_config(false).frequency_dim() == 0);

  Model m(c, 1);
  Tape tape;
  const auto x = randn({5, 2, 16}, 2);
  const auto enc = m.encode(tape, x, true);
  CHECK(enc.has_frequency);
  CHECK(enc.z.shape() == Shape{5, c.latent_dim()});
  CHECK(m.decode(tape, enc).shape() == Shape{5, 2, 16});
  CHECK(m.logits(tape, enc.z).shape() == Shape{5, 3});
  CHECK(m.prototypes().shape() == Shape{3, c.latent_dim()});
  CHECK(m.predict(x).size() == 5);
  CHECK_THROWS_AS(m.encode(tape, randn({5, 2, 15}, 2), true), ShapeError);

  Model no_f(small_config(false), 1);
  Tape t2;
  CHECK_FALSE(no_f.encode(t2, x, false).has_frequency);
}

TEST_CASE("config validation") {
  auto c = small_config();
  c.modes = 10;  // T/2 + 1 = 9
  CHECK_THROWS(c.validate());
  c = small_config();
  c.length = 6;
  CHECK_THROWS(c.validate());
  c = small_config();
  CHECK(ModelConfig::from_keyvalues(c.to_keyvalues()).to_keyvalues().to_text() == c.to_keyvalues().to_text());
}

TEST_CASE("classification ignores the scale of z") {
  const auto z = randn({5}, 3), w = randn({4, 5}, 4);
  Tensor z3 = z;
  for (auto& v : z3.values()) v *= 3.0;
  const auto a = classify(z, w), b = classify(z3, w);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]));
  CHECK_THROWS(classify(Tensor({5}), w));
  CHECK_THROWS_AS(classify(Tensor({4}, 1.0), w), ShapeError);
}

TEST_CASE("cross entropy") {
  Tensor logits({1, 3}, {1.0, 2.0, 3.0});
  const double lse = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
  CHECK(cross_entropy(logits, 2) == doctest::Approx(lse - 3.0));
  Tape tape;
  CHECK(cross_entropy(tape.constant(logits), {0}).value()[0] == doctest::Approx(lse - 1.0));
  CHECK_THROWS(cross_entropy(tape.constant(logits), {3}));
  auto r = testing::check_op({randn({4, 3}, 5)}, [](Tape&, std::vector<Var>& v) {
    return cross_entropy(v[0], {0, 2, 1, 2});
  });
  CHECK(r.max_rel_error < 1e-5);
  CHECK(reconstruction_loss(Tensor({2}, {1, -1}), Tensor({2}, {0, 1})) == doctest::Approx(1.5));
}

TEST_CASE("checkpoint round trip") {
  Model m(small_config(), 7);
  const auto x = randn({3, 2, 16}, 8);
  {
    Tape tape;
    m.encode(tape, x, true);  // moves running statistics off their init
  }
  const auto path = temp_path("model.ckpt");
  save_checkpoint(m, path);
  Model back = load_checkpoint(path);
  CHECK(back.config().to_keyvalues().to_text() == m.config().to_keyvalues().to_text());
  for (const auto& name : m.parameters().names()) CHECK(back.parameters().get(name).value == m.parameters().get(name).value);
  CHECK(back.embed(x) == m.embed(x));

  SUBCASE("truncated") {
    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 9);
    CHECK_THROWS_WITH(load_checkpoint(path), doctest::Contains("truncated"));
  }
  SUBCASE("wrong magic") {
    std::ofstream(path, std::ios::binary) << "nope, not a checkpoint";
    CHECK_THROWS_WITH(load_checkpoint(path), doctest::Contains("not a checkpoint"));
  }
  SUBCASE("missing") { CHECK_THROWS(load_checkpoint(temp_path("does_not_exist.ckpt"))); }
  std::remove(path.c_str());
}

TEST_CASE("gradients of the whole network") {
  // eval mode keeps normalization fixed so finite differences see the same function
  for (bool frequency : {true, false}) {
    Model m(small_config(frequency), 11);
    // beta = 0 plus an all-zero input patch puts pre-activations exactly on the ReLU kink
    for (const auto& name : m.parameters().names())
      if (name.ends_with(".beta")) m.parameters().get(name).value = randn({m.parameters().get(name).value.size()}, 13, 0.1);
    const auto x = randn({3, 2, 16}, 12);
    auto f = [&](ParameterSet& ps, bool with_grad) {
      Tape tape;
      const auto enc = m.encode(tape, x, false);
      const Var ce = cross_entropy(m.logits(tape, enc.z), {0, 1, 2});
      const Var rec = reconstruction_loss(m.decode(tape, enc), x);
      const Var loss = nn::weighted_sum({{1.0, ce}, {0.5, rec}});
      if (with_grad) {
        ps.zero_grad();
        tape.backward(loss);
      }
      return loss.value()[0];
    };
    const auto r = grad_check(f, m.parameters(), 1e-6);
    INFO("worst " << r.worst_parameter << " analytic " << r.analytic << " numeric " << r.numeric);
    CHECK(r.max_rel_error < 1e-4);
  }
}
