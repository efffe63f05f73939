#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "tsda/data.hpp"

using namespace tsda;
using namespace tsda::data;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("tsda_test_" + name)).string();
}

SyntheticSpec tiny_spec() {
  SyntheticSpec s;
  s.channels = 2;
  s.length = 32;
  s.samples = 12;
  s.recipes = default_recipes(3);
  s.seed = 4;
  return s;
}

}  // namespace

TEST_CASE("default recipes") {
  const auto r = default_recipes(2);
  REQUIRE(r.size() == 2);
  CHECK(r[1][0].mode == 5.0);
  CHECK(r[1][1].mode == 7.0);
  CHECK(r[1][1].amplitude == 0.5);
}

TEST_CASE("generation is deterministic and seed dependent") {
  const auto a = generate(tiny_spec());
  CHECK(a == generate(tiny_spec()));
  auto other = tiny_spec();
  other.seed = 5;
  CHECK_FALSE(a == generate(other));
  CHECK(a.values.shape() == Shape{12, 2, 32});
  CHECK(a.labels.size() == 12);
  for (double v : a.values.values()) CHECK(static_cast<double>(static_cast<float>(v)) == v);
}

TEST_CASE("noise-free tone has the requested amplitude") {
  SyntheticSpec s;
  s.channels = 1;
  s.length = 32;
  s.samples = 1;
  s.noise = 0.0;
  s.recipes = {{{3.0, 2.0, 0.5}}};
  const auto ds = generate(s);
  for (std::size_t t = 0; t < 32; ++t)
    CHECK(ds.values[t] == doctest::Approx(2.0 * std::cos(2 * M_PI * 3 * t / 32.0 + 0.5)).epsilon(1e-6));
  s.transform.time_scale = 2.0;
  CHECK(generate(s).values[0] == doctest::Approx(2 * ds.values[0]).epsilon(1e-6));
}

TEST_CASE("private classes and overrides") {
  const auto kv = KeyValues::parse("classes=3\nsamples=30\nlength=32\nchannels=1\ntarget.private=2\n"
                                   "target.time_scale=1.5\nclass.0=1:1:0, 2:0.5\nseed=3");
  const auto [s, t] = pair_specs(kv);
  CHECK(s.excluded_classes == std::vector<std::size_t>{2});
  CHECK(t.excluded_classes.empty());
  CHECK(t.transform.time_scale == 1.5);
  CHECK(s.recipes[0].size() == 2);
  CHECK(s.recipes[0][1].phase == 0.0);
  CHECK(s.seed != t.seed);
  CHECK_FALSE(generate(s).label_inventory().count(2));
  CHECK(generate(t).label_inventory().count(2));
  CHECK_THROWS(pair_specs(KeyValues::parse("class.0=1")));
}

TEST_CASE("binary round trip and corruption") {
  const auto ds = generate(tiny_spec());
  const auto path = temp_path("data.bin");
  save(ds, path);
  auto back = load(path);
  CHECK(back.domain == path);  // the file does not carry a domain name
  back.domain = ds.domain;
  CHECK(back == ds);
  CHECK(load_any(path).values == ds.values);

  auto unlabeled = ds;
  unlabeled.labels.clear();
  save(unlabeled, path);
  CHECK_FALSE(load(path).has_labels());

  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  CHECK_THROWS_WITH(load(path), doctest::Contains("truncated"));
  std::ofstream(path, std::ios::binary) << "garbage bytes here";
  CHECK_THROWS(load(path));
  std::remove(path.c_str());
}

TEST_CASE("text import") {
  const auto path = temp_path("data.txt");
  std::ofstream(path) << "# channels=2 length=4\n1,2,3,4,5,6,7,8,1\n0 0 0 0 0 0 0 1 0\n";
  const auto ds = load_text(path);
  CHECK(ds.values.shape() == Shape{2, 2, 4});
  CHECK(ds.labels == std::vector<std::size_t>{1, 0});
  CHECK(ds.values.at(0, 1, 0) == 5.0);
  CHECK(load_any(path) == ds);

  std::ofstream(path) << "1\t2\t3\t4\t5\n6\t7\t8\t9\t10\n";
  const auto plain = load_text(path);
  CHECK(plain.values.shape() == Shape{2, 1, 5});
  CHECK_FALSE(plain.has_labels());

  std::ofstream(path) << "1,2,3,4\n1,2,x,4\n";
  CHECK_THROWS_WITH(load_text(path), doctest::Contains(":2"));
  std::ofstream(path) << "# channels=2 length=4\n1,2,3,4,5,6,7,8,0.5\n";
  CHECK_THROWS(load_text(path));
  std::remove(path.c_str());
}

TEST_CASE("windows") {
  Tensor s({2, 10});
  for (std::size_t i = 0; i < 20; ++i) s[i] = static_cast<double>(i);
  const auto w = window(s, 4, 3);
  CHECK(w.shape() == Shape{3, 2, 4});
  CHECK(w.at(1, 0, 0) == 3.0);
  CHECK(w.at(2, 1, 3) == 19.0);
  CHECK(window(Tensor({6}), 6, 1).shape() == Shape{1, 1, 6});
  CHECK_THROWS(window(s, 11, 1));
  CHECK_THROWS(window(s, 4, 0));
}

TEST_CASE("stratified split") {
  auto spec = tiny_spec();
  spec.samples = 60;
  const auto ds = generate(spec);
  const auto [a, b] = split(ds, 0.5, 1);
  CHECK(a.size() + b.size() == 60);
  for (std::size_t c = 0; c < 3; ++c) {
    std::size_t total = 0, first = 0;
    for (auto l : ds.labels) total += l == c;
    for (auto l : a.labels) first += l == c;
    CHECK(std::abs(static_cast<double>(first) - total / 2.0) <= 1.0);
  }
  CHECK(split(ds, 0.5, 1).first == a);
  CHECK_THROWS(split(ds, 1.0, 1));
}
