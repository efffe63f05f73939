#include <doctest.h>

#include <cmath>

#include "tsda/config.hpp"

using tsda::KeyValues;

TEST_CASE("parse, comments, order") {
  const auto kv = KeyValues::parse("# top\nb = 2\n\na=x y # trailing\nlist=1, 2.5,3\nflag=yes\n");
  REQUIRE(kv.entries().size() == 4);
  CHECK(kv.entries()[0].first == "b");
  CHECK(kv.get("a") == "x y");
  CHECK(kv.get_int("b", 0) == 2);
  CHECK(kv.get_doubles("list", {}) == std::vector<double>{1, 2.5, 3});
  CHECK(kv.get_bool("flag", false));
  CHECK(kv.get_double("missing", 4.5) == 4.5);
  CHECK_THROWS(kv.get("missing"));
}

TEST_CASE("bad values name the key") {
  const auto kv = KeyValues::parse("n=abc\ni=1.5\nb=maybe");
  CHECK_THROWS_WITH(kv.get_double("n", 0), doctest::Contains("'n'"));
  CHECK_THROWS(kv.get_int("i", 0));
  CHECK_THROWS(kv.get_bool("b", false));
  CHECK_THROWS_WITH(KeyValues::parse("x=1\nnoequals", "f.cfg"), doctest::Contains("f.cfg:2"));
  CHECK_THROWS(KeyValues::load("/nonexistent/file.cfg"));
}

TEST_CASE("merge and round trip") {
  auto a = KeyValues::parse("x=1\ny=2");
  a.merge(KeyValues::parse("y=3\nz=4"));
  CHECK(a.get("y") == "3");
  CHECK(a.entries().back().first == "z");
  const auto b = KeyValues::parse(a.to_text());
  CHECK(b.entries() == a.entries());
}

TEST_CASE("format_double round trips") {
  for (double v : {0.1, 1e-300, 123456.789, -2.5, 1.0 / 3.0}) CHECK(std::stod(tsda::format_double(v)) == v);
  CHECK(tsda::format_double(0.5) == "0.5");
}
