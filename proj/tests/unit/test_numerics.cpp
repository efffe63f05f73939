#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "tsda/nn.hpp"

using namespace tsda;
using testing::check_op;
using testing::randn;

namespace {

// Direct loops, written independently of the library's im2col-free kernels.
Tensor conv_oracle(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  const std::size_t n = x.dim(0), cin = x.dim(1), L = x.dim(2), cout = w.dim(0), K = w.dim(2);
  const std::size_t lout = (L + 2 * pad - K) / stride + 1;
  Tensor y({n, cout, lout});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t t = 0; t < lout; ++t) {
        double s = 0;
        for (std::size_t c = 0; c < cin; ++c)
          for (std::size_t k = 0; k < K; ++k) {
            const long pos = static_cast<long>(t * stride + k) - static_cast<long>(pad);
            if (pos < 0 || pos >= static_cast<long>(L)) continue;
            s += w.at(o, c, k) * x.at(b, c, static_cast<std::size_t>(pos));
          }
        y.at(b, o, t) = s;
      }
  return y;
}

Tensor conv_transpose_oracle(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
                             std::size_t out_len) {
  const std::size_t n = x.dim(0), cin = x.dim(1), L = x.dim(2), cout = w.dim(1), K = w.dim(2);
  Tensor y({n, cout, out_len});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t t = 0; t < out_len; ++t) y.at(b, o, t) = bias[o];
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t l = 0; l < L; ++l)
        for (std::size_t o = 0; o < cout; ++o)
          for (std::size_t k = 0; k < K; ++k) {
            const std::size_t t = l * stride + k;
            if (t < out_len) y.at(b, o, t) += x.at(b, c, l) * w.at(c, o, k);
          }
  return y;
}

}  // namespace

TEST_CASE("conv1d agrees with the direct loop") {
  for (std::size_t stride : {1u, 2u})
    for (std::size_t pad : {0u, 2u}) {
      const auto x = randn({3, 2, 11}, 1 + stride + pad);
      const auto w = randn({4, 2, 5}, 7);
      Tape tape;
      const Var y = nn::conv1d(tape.constant(x), tape.constant(w), stride, pad);
      const auto want = conv_oracle(x, w, stride, pad);
      REQUIRE(y.shape() == want.shape());
      for (std::size_t i = 0; i < want.size(); ++i) CHECK(y.value()[i] == doctest::Approx(want[i]).epsilon(1e-12));
    }
}

TEST_CASE("single-sample conv1d matches the batched op") {
  const auto x = randn({1, 3, 9}, 2);
  const auto w = randn({2, 3, 3}, 3);
  const auto y = nn::conv1d(x.reshaped({3, 9}), w, 1, 1);
  const auto want = conv_oracle(x, w, 1, 1);
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(y[i] == doctest::Approx(want[i]));
}

TEST_CASE("conv_output_length") {
  CHECK(nn::conv_output_length(10, 5, 1, 2) == 10);
  CHECK(nn::conv_output_length(10, 3, 2, 0) == 4);
  CHECK_THROWS(nn::conv_output_length(2, 5, 1, 0));
}

TEST_CASE("max pool drops the tail") {
  Tensor x({1, 7}, std::vector<double>{1, 3, -2, -5, 4, 4, 9});
  const auto y = nn::max_pool1d(x, 2);
  REQUIRE(y.shape() == Shape{1, 3});
  CHECK(y[0] == 3);
  CHECK(y[1] == -2);
  CHECK(y[2] == 4);
}

TEST_CASE("batch norm in training mode standardizes each channel") {
  const auto x = randn({5, 3, 8}, 4, 3.0);
  Tape tape;
  nn::BatchNormState st(3);
  const Var y = nn::batch_norm(tape.constant(x), tape.constant(Tensor({3}, 1.0)), tape.constant(Tensor({3}, 0.0)), st,
                               true);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    for (std::size_t b = 0; b < 5; ++b)
      for (std::size_t t = 0; t < 8; ++t) m += y.value().at(b, c, t);
    m /= 40;
    for (std::size_t b = 0; b < 5; ++b)
      for (std::size_t t = 0; t < 8; ++t) v += std::pow(y.value().at(b, c, t) - m, 2);
    v /= 40;
    CHECK(m == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(v == doctest::Approx(1.0).epsilon(1e-4));  // epsilon in the denominator
  }
  // running stats moved 10% of the way
  CHECK(st.running_mean[0] != 0.0);
}

TEST_CASE("all-zero input through a block gives all-zero output") {
  Tape tape;
  nn::BatchNormState st(4);
  nn::BlockSpec spec{2, 4, 5, 1, 2, 2};
  nn::BlockParams p{tape.constant(randn({4, 2, 5}, 1)), tape.constant(Tensor({4}, 1.0)), tape.constant(Tensor({4}, 0.0))};
  const Var y = nn::nn_block(tape.constant(Tensor({3, 2, 16})), p, spec, st, true);
  REQUIRE(y.shape() == Shape{3, 4, 8});
  for (double v : y.value().values()) CHECK(v == 0.0);
}

TEST_CASE("conv_transpose1d agrees with scatter loops") {
  const auto x = randn({2, 3, 4}, 5);
  const auto w = randn({3, 2, 6}, 6);
  const auto b = randn({2}, 7);
  for (std::size_t out : {9u, 12u}) {
    Tape tape;
    const Var y = nn::conv_transpose1d(tape.constant(x), tape.constant(w), tape.constant(b), 2, out);
    const auto want = conv_transpose_oracle(x, w, b, 2, out);
    REQUIRE(y.shape() == want.shape());
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(y.value()[i] == doctest::Approx(want[i]));
  }
}

TEST_CASE("gradient checks for the tape ops") {
  const double tol = 1e-4;
  SUBCASE("conv1d") {
    auto r = check_op({randn({2, 2, 9}, 1), randn({3, 2, 4}, 2)},
                      [](Tape&, std::vector<Var>& v) { return nn::conv1d(v[0], v[1], 2, 1); });
    CHECK(r.max_rel_error < tol);
  }
  SUBCASE("batch norm, training") {
    nn::BatchNormState st(3);
    auto r = check_op({randn({4, 3, 5}, 3), randn({3}, 4), randn({3}, 5)},
                      [&](Tape&, std::vector<Var>& v) { return nn::batch_norm(v[0], v[1], v[2], st, true); });
    CHECK(r.max_rel_error < tol);
  }
  SUBCASE("batch norm, inference") {
    nn::BatchNormState st(3);
    st.running_mean = randn({3}, 8);
    st.running_var = Tensor({3}, 2.5);
    auto r = check_op({randn({4, 3, 5}, 3), randn({3}, 4), randn({3}, 5)},
                      [&](Tape&, std::vector<Var>& v) { return nn::batch_norm(v[0], v[1], v[2], st, false); });
    CHECK(r.max_rel_error < tol);
  }
  SUBCASE("relu away from the kink") {
    auto x = randn({3, 7}, 6);
    for (auto& v : x.values())
      if (std::abs(v) < 0.05) v = 0.3;
    auto r = check_op({x}, [](Tape&, std::vector<Var>& v) { return nn::relu(v[0]); });
    CHECK(r.max_rel_error < tol);
  }
  SUBCASE("max pool") {
    auto r = check_op({randn({2, 3, 9}, 7)}, [](Tape&, std::vector<Var>& v) { return nn::max_pool1d(v[0], 2); });
    CHECK(r.max_rel_error < tol);
  }
  SUBCASE("adaptive average pool") {
    for (std::size_t out : {1u, 3u}) {
      auto r = check_op({randn({2, 3, 8}, 8)},
                        [out](Tape&, std::vector<Var>& v) { return nn::adaptive_avg_pool1d(v[0], out); });
      CHECK(r.max_rel_error < tol);
    }
  }
  SUBCASE("conv_transpose1d") {
    auto r = check_op({randn({2, 3, 4}, 9), randn({3, 2, 5}, 10), randn({2}, 11)},
                      [](Tape&, std::vector<Var>& v) { return nn::conv_transpose1d(v[0], v[1], v[2], 2, 10); });
    CHECK(r.max_rel_error < tol);
  }
  SUBCASE("full block") {
    nn::BatchNormState st(4);
    nn::BlockSpec spec{2, 4, 3, 1, 1, 2};
    auto r = check_op({randn({3, 2, 10}, 12), randn({4, 2, 3}, 13), randn({4}, 14), randn({4}, 15)},
                      [&](Tape&, std::vector<Var>& v) {
                        return nn::nn_block(v[0], nn::BlockParams{v[1], v[2], v[3]}, spec, st, true);
                      });
    CHECK(r.max_rel_error < tol);
  }
  SUBCASE("reshaping and slicing") {
    auto r = check_op({randn({3, 2, 4}, 16), randn({3, 5}, 17)}, [](Tape&, std::vector<Var>& v) {
      Var f = nn::flatten(v[0]);
      Var c = nn::concat_columns(f, v[1]);
      Var s = nn::slice_columns(c, 2, 11);
      Var rows = nn::slice_rows(s, 1, 3);
      return nn::reshape(rows, {2, 9});
    });
    CHECK(r.max_rel_error < tol);
  }
  SUBCASE("add and weighted sum") {
    auto r = check_op({randn({1}, 18), randn({1}, 19)}, [](Tape&, std::vector<Var>& v) {
      return nn::weighted_sum({{0.3, v[0]}, {-2.0, nn::add(v[0], v[1])}});
    });
    CHECK(r.max_rel_error < tol);
  }
  SUBCASE("row normalization and prototype products") {
    auto r = check_op({randn({4, 6}, 20), randn({3, 6}, 21)}, [](Tape&, std::vector<Var>& v) {
      return nn::matmul_nt(nn::normalize_rows(v[0]), v[1]);
    });
    CHECK(r.max_rel_error < tol);
  }
}

TEST_CASE("normalize_rows on a zero row") {
  Tape tape;
  Tensor x({2, 3}, std::vector<double>{0, 0, 0, 3, 4, 0});
  CHECK_THROWS(nn::normalize_rows(tape.constant(x)));
  const Var y = nn::normalize_rows(tape.constant(x), true);
  CHECK(y.value()[0] == 0.0);
  CHECK(y.value()[3] == doctest::Approx(0.6));
  CHECK(y.value()[4] == doctest::Approx(0.8));
}

TEST_CASE("grad_check flags a wrong gradient") {
  ParameterSet ps;
  ps.add("w", Tensor({2}, std::vector<double>{0.5, -1.0}));
  auto f = [](ParameterSet& p, bool with_grad) {
    auto& w = p.get("w");
    if (with_grad) {
      w.grad[0] = 2 * w.value[0];
      w.grad[1] = 3 * w.value[1];  // true derivative is 2 w
    }
    return w.value[0] * w.value[0] + w.value[1] * w.value[1];
  };
  const auto bad = grad_check(f, ps, 1e-6);
  CHECK(bad.max_rel_error == doctest::Approx(0.5).epsilon(1e-6));  // |w| / max(1, |2w|)
  CHECK(bad.worst_parameter == "w");
  CHECK(bad.worst_index == 1);
}

TEST_CASE("adam first step moves each weight by the learning rate") {
  ParameterSet ps;
  auto& p = ps.add("w", Tensor({3}, std::vector<double>{1.0, 2.0, 3.0}));
  p.grad = Tensor({3}, std::vector<double>{0.5, -4.0, 0.0});
  OptimizerState st;
  st.config.learning_rate = 0.1;
  adam_step(ps, st);
  // bias-corrected first step: m_hat/sqrt(v_hat) = sign(g)
  CHECK(p.value[0] == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(p.value[1] == doctest::Approx(2.1).epsilon(1e-6));
  CHECK(p.value[2] == doctest::Approx(3.0));
  p.grad[0] = std::nan("");
  CHECK_THROWS_AS(adam_step(ps, st), std::runtime_error);
}

TEST_CASE("adam select skips parameters") {
  ParameterSet ps;
  ps.add("a", Tensor({1}, 1.0)).grad = Tensor({1}, 1.0);
  ps.add("b", Tensor({1}, 1.0)).grad = Tensor({1}, 1.0);
  OptimizerState st;
  adam_step(ps, st, [](const std::string& n) { return n != "b"; });
  CHECK(ps.get("a").value[0] < 1.0);
  CHECK(ps.get("b").value[0] == 1.0);
}
