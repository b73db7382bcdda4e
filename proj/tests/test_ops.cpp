#include <doctest.h>

#include "meshcast/ops.hpp"
#include "support/gradcheck.hpp"
#include "support/op_gradchecks.hpp"

using namespace meshcast;
using meshcast::testing::rand_tensor;

TEST_CASE("elementwise add: [1,2]+[3,4] = [4,6]") {
  auto a = Tensor<float>::from({2}, {1.f, 2.f});
  auto b = Tensor<float>::from({2}, {3.f, 4.f});
  auto c = add(a, b);
  CHECK(c.values()[0] == 4.f);
  CHECK(c.values()[1] == 6.f);
}

TEST_CASE("x * ones is exactly x") {
  Rng rng(3);
  auto x = Tensor<float>::uniform({3, 5}, -2.f, 2.f, rng);
  auto y = mul(x, Tensor<float>::ones({3, 5}));
  CHECK((x.values() == y.values()).all());
}

TEST_CASE("trailing broadcast matches an explicit tiling oracle") {
  Rng rng(11);
  auto a = rand_tensor({2, 3}, rng);
  auto b = rand_tensor({3}, rng);
  auto tiled = Tensor<double>::from(
      {2, 3}, {b.values()[0], b.values()[1], b.values()[2], b.values()[0], b.values()[1],
               b.values()[2]});
  for (auto op : {0, 1, 2, 3}) {
    Tensor<double> fast, slow;
    switch (op) {
      case 0: fast = add(a, b); slow = add(a, tiled); break;
      case 1: fast = sub(a, b); slow = sub(a, tiled); break;
      case 2: fast = mul(a, b); slow = mul(a, tiled); break;
      default: fast = div(a, b); slow = div(a, tiled); break;
    }
    for (Index i = 0; i < 6; ++i) CHECK(fast.values()[i] == doctest::Approx(slow.values()[i]));
  }
}

TEST_CASE("shape mismatch error names both shapes") {
  auto a = Tensor<float>::zeros({2, 3});
  auto b = Tensor<float>::zeros({2, 2});
  try {
    add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[2,2]") != std::string::npos);
  }
}

TEST_CASE("matmul: identity, known product, inner mismatch") {
  auto a = Tensor<float>::from({2, 2}, {1.f, 2.f, 3.f, 4.f});
  auto eye = Tensor<float>::from({2, 2}, {1.f, 0.f, 0.f, 1.f});
  auto ai = matmul(a, eye);
  CHECK((ai.values() == a.values()).all());

  auto b = Tensor<float>::from({2, 2}, {5.f, 6.f, 7.f, 8.f});
  auto c = matmul(a, b);
  CHECK(c.values()[0] == 19.f);
  CHECK(c.values()[1] == 22.f);
  CHECK(c.values()[2] == 43.f);
  CHECK(c.values()[3] == 50.f);

  CHECK_THROWS_AS(matmul(a, Tensor<float>::zeros({3, 2})), ShapeError);
}

TEST_CASE("matmul matches a naive triple-loop oracle") {
  Rng rng(5);
  auto a = rand_tensor({4, 5}, rng);
  auto b = rand_tensor({5, 3}, rng);
  auto c = matmul(a, b);
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 3; ++j) {
      double acc = 0;
      for (Index k = 0; k < 5; ++k) acc += a.at({i, k}) * b.at({k, j});
      const double got = c.at({i, j});
      CHECK(std::abs(got - acc) / std::max({std::abs(acc), std::abs(got), 1e-8}) < 1e-6);
    }
}

TEST_CASE("transpose is an involution and swaps extents") {
  Rng rng(7);
  auto x = rand_tensor({2, 3}, rng);
  auto back = transpose(transpose(x, 0, 1), 0, 1);
  CHECK((back.values() == x.values()).all());

  auto y = rand_tensor({2, 3, 4}, rng);
  auto yt = transpose(y, 0, 1);
  CHECK(yt.shape() == Shape{3, 2, 4});
  for (Index t = 0; t < 2; ++t)
    for (Index c = 0; c < 3; ++c)
      for (Index d = 0; d < 4; ++d) CHECK(y.at({t, c, d}) == yt.at({c, t, d}));

  CHECK_THROWS_AS(transpose(y, 0, 3), ShapeError);
}

TEST_CASE("reshape round-trips bit-exactly") {
  Rng rng(9);
  auto x = rand_tensor({3, 4}, rng);
  auto y = reshape(reshape(x, {2, 6}), {3, 4});
  CHECK((x.values() == y.values()).all());
  CHECK_THROWS_AS(reshape(x, {5, 2}), ShapeError);
}

TEST_CASE("activations: sigmoid(0)=0.5, softmax of constant row is uniform") {
  auto z = Tensor<double>::zeros({3});
  CHECK(sigmoid(z).values()[0] == doctest::Approx(0.5));
  auto c = Tensor<double>::full({1, 4}, 1.7);
  auto sm = softmax_lastaxis(c);
  for (Index i = 0; i < 4; ++i) CHECK(sm.values()[i] == doctest::Approx(0.25));
  CHECK(activation(c, Act::kSigmoid).values()[0] == doctest::Approx(sigmoid(c).values()[0]));
}

TEST_CASE("tanh gradient matches central differences at 1e-4 relative (64-bit)") {
  Rng rng(13);
  auto x = rand_tensor({3, 3}, rng, -2.0, 2.0);
  auto err = testing::gradcheck_max_err(
      [&] { return sum_all(mul(tanh_t(x), x)); }, {&x});
  CHECK(err < 1e-4);
}

TEST_CASE("exp clamps its exponent to +-60") {
  auto x = Tensor<double>::from({2}, {100.0, -100.0});
  auto y = exp_t(x);
  CHECK(y.values()[0] == doctest::Approx(std::exp(60.0)));
  CHECK(y.values()[1] == doctest::Approx(std::exp(-60.0)));
}

TEST_CASE("conv2d: 1x1 unit kernel is identity") {
  Rng rng(17);
  auto x = rand_tensor({1, 1, 4, 4}, rng);
  auto w = Tensor<double>::ones({1, 1, 1, 1});
  auto y = conv2d<double>(x, w, nullptr, 1, 0);
  CHECK(y.shape() == x.shape());
  CHECK((y.values() == x.values()).all());
}

TEST_CASE("conv2d: all-ones 3x3 on all-ones 4x4 gives 2x2 of 9") {
  auto x = Tensor<double>::ones({1, 1, 4, 4});
  auto w = Tensor<double>::ones({1, 1, 3, 3});
  auto y = conv2d<double>(x, w, nullptr, 1, 0);
  CHECK(y.shape() == Shape{1, 1, 2, 2});
  for (Index i = 0; i < 4; ++i) CHECK(y.values()[i] == doctest::Approx(9.0));
}

TEST_CASE("conv2d matches a six-nested-loop oracle") {
  Rng rng(19);
  const Index B = 2, Cin = 3, H = 5, W = 6, Cout = 4, k = 3, stride = 2, pad = 1;
  auto x = rand_tensor({B, Cin, H, W}, rng);
  auto w = rand_tensor({Cout, Cin, k, k}, rng);
  auto bias = rand_tensor({Cout}, rng);
  auto y = conv2d(x, w, bias, stride, pad);
  const Index Ho = (H + 2 * pad - k) / stride + 1;
  const Index Wo = (W + 2 * pad - k) / stride + 1;
  REQUIRE(y.shape() == Shape{B, Cout, Ho, Wo});
  for (Index b = 0; b < B; ++b)
    for (Index co = 0; co < Cout; ++co)
      for (Index ho = 0; ho < Ho; ++ho)
        for (Index wo = 0; wo < Wo; ++wo) {
          double acc = bias.values()[co];
          for (Index ci = 0; ci < Cin; ++ci)
            for (Index dy = 0; dy < k; ++dy)
              for (Index dx = 0; dx < k; ++dx) {
                const Index iy = ho * stride + dy - pad;
                const Index ix = wo * stride + dx - pad;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += x.at({b, ci, iy, ix}) * w.at({co, ci, dy, dx});
              }
          CHECK(std::abs(y.at({b, co, ho, wo}) - acc) < 1e-5);
        }
}

TEST_CASE("conv2d rejects kernels larger than the padded input") {
  auto x = Tensor<double>::ones({1, 1, 2, 2});
  auto w = Tensor<double>::ones({1, 1, 5, 5});
  CHECK_THROWS_AS(conv2d<double>(x, w, nullptr, 1, 1), ShapeError);
}

TEST_CASE("flip reverses one axis and is an involution") {
  auto x = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  auto f = flip(x, 1);
  CHECK(f.values()[0] == 2);
  CHECK(f.values()[1] == 1);
  CHECK((flip(f, 1).values() == x.values()).all());
}

TEST_CASE("slice and concat are inverse-ish") {
  Rng rng(23);
  auto x = rand_tensor({2, 5, 3}, rng);
  auto left = slice(x, 1, 0, 2);
  auto right = slice(x, 1, 2, 3);
  auto glued = concat<double>({left, right}, 1);
  CHECK((glued.values() == x.values()).all());
  CHECK_THROWS_AS(slice(x, 1, 4, 3), ShapeError);
}

TEST_CASE("space_to_channel / channel_to_space fold matches an index oracle") {
  Rng rng(29);
  auto x = rand_tensor({2, 3, 4, 6}, rng);
  auto folded = space_to_channel(x, 2);
  REQUIRE(folded.shape() == Shape{2, 12, 2, 3});
  for (Index t = 0; t < 2; ++t)
    for (Index c = 0; c < 3; ++c)
      for (Index y = 0; y < 4; ++y)
        for (Index w = 0; w < 6; ++w)
          CHECK(x.at({t, c, y, w}) ==
                folded.at({t, c * 4 + (y % 2) * 2 + (w % 2), y / 2, w / 2}));
  auto back = channel_to_space(folded, 2);
  CHECK((back.values() == x.values()).all());
}

TEST_CASE("every differentiable primitive passes gradcheck at 1e-4 (64-bit)") {
  for (const auto& r : testing::run_op_gradchecks()) {
    INFO(r.name);
    CHECK(r.max_rel_err < 1e-4);
  }
}
