#include <doctest.h>

#include <cmath>

#include "tsda/eval.hpp"

using namespace tsda;
using namespace tsda::eval;

TEST_CASE("accuracy, F1, H-score") {
  const std::vector<std::int64_t> y{0, 0, 1, 1, 2, 2};
  const std::vector<std::int64_t> p{0, 1, 1, 1, 2, 0};
  CHECK(accuracy(p, y) == doctest::Approx(4.0 / 6.0));
  const auto f1 = per_class_f1(p, y, 3);
  CHECK(f1[0] == doctest::Approx(0.5));
  CHECK(f1[1] == doctest::Approx(0.8));
  CHECK(f1[2] == doctest::Approx(2.0 / 3.0));
  CHECK(macro_f1(p, y, 3) == doctest::Approx((0.5 + 0.8 + 2.0 / 3.0) / 3));
  // a class missing from the labels is left out of the average
  CHECK(std::isnan(per_class_f1(p, y, 4)[3]));
  CHECK(macro_f1(p, y, 4) == doctest::Approx(macro_f1(p, y, 3)));
  CHECK(h_score(0.8, 0.6) == doctest::Approx(2 * 0.8 * 0.6 / 1.4));
  CHECK(h_score(0.0, 0.0) == 0.0);
  CHECK_THROWS(accuracy(p, std::vector<std::int64_t>{0}));
}

TEST_CASE("universal evaluation") {
  // classes 0, 1 known; 2 private. Unknown is -1.
  const std::vector<std::size_t> y{0, 0, 1, 1, 2, 2, 2, 2};
  const std::vector<std::int64_t> p{0, pipeline::kUnknown, 1, 1, pipeline::kUnknown, pipeline::kUnknown, 1,
                                    pipeline::kUnknown};
  const auto r = evaluate(p, y, 3, {0, 1}, true);
  CHECK(r.ca_c == doctest::Approx(0.75));  // the rejected known sample counts as wrong
  CHECK(r.ca_u == doctest::Approx(0.75));
  CHECK(r.h_score == doctest::Approx(0.75));
  CHECK(r.unknown_rate == doctest::Approx(0.5));
  REQUIRE(r.confusion.size() == 4);  // 3 classes + unknown; private truths land on the unknown row
  CHECK(r.confusion[3][3] == 3);
  CHECK(r.confusion[3][1] == 1);
  CHECK(r.confusion[2][0] + r.confusion[2][1] + r.confusion[2][2] + r.confusion[2][3] == 0);
  const auto kv = r.to_keyvalues();
  CHECK(kv.get("mode") == "universal");
  CHECK(kv.get_double("h_score", 0) == doctest::Approx(0.75));

  const auto closed = evaluate(std::vector<std::int64_t>{0, 1, 1}, std::vector<std::size_t>{0, 1, 0}, 2, {0, 1}, false);
  CHECK(closed.accuracy == doctest::Approx(2.0 / 3.0));
  CHECK(std::isnan(closed.ca_u));
  CHECK(closed.confusion.size() == 2);
  CHECK(closed.confusion_csv().find("truth") != std::string::npos);
}

TEST_CASE("ablation rows") {
  const auto rows = ablation_rows();
  REQUIRE(rows.size() == 6);
  CHECK_FALSE(rows[0].frequency_branch);
  CHECK(rows[0].divergence == pipeline::Divergence::mmd);
  CHECK(rows[5].frequency_branch);
  CHECK(rows[5].divergence == pipeline::Divergence::sinkhorn);
  CHECK(rows[5].correction);
  pipeline::TrainConfig base;
  const auto c = apply(base, rows[2]);
  CHECK_FALSE(c.frequency_branch);
  CHECK(c.divergence == pipeline::Divergence::sinkhorn);
  CHECK_FALSE(c.correction);
}
