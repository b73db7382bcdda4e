#pragma once

// One gradcheck per differentiable primitive, shared between the unit suite
// and the acceptance suite. Each entry evaluates a scalar functional of the
// op on random 64-bit inputs and returns the worst relative error against
// central finite differences.

#include <string>
#include <utility>
#include <vector>

#include "support/gradcheck.hpp"

namespace meshcast::testing {

struct GradcheckResult {
  std::string name;
  double max_rel_err;
};

inline std::vector<GradcheckResult> run_op_gradchecks() {
  std::vector<GradcheckResult> out;
  Rng rng(2024);
  auto run = [&](const std::string& name, const std::function<Tensor<double>()>& fn,
                 std::vector<Tensor<double>*> inputs) {
    out.push_back({name, gradcheck_max_err(fn, std::move(inputs))});
  };

  {  // elementwise, same shape
    auto a = rand_tensor({2, 3}, rng), b = rand_tensor({2, 3}, rng, 0.5, 2.0);
    run("add", [&] { return sum_all(mul(add(a, b), add(a, b))); }, {&a, &b});
    run("sub", [&] { return sum_all(mul(sub(a, b), sub(a, b))); }, {&a, &b});
    run("mul", [&] { return sum_all(mul(mul(a, b), a)); }, {&a, &b});
    run("div", [&] { return sum_all(mul(div(a, b), a)); }, {&a, &b});
  }
  {  // trailing-axis broadcast, both orders
    auto a = rand_tensor({2, 3}, rng), b = rand_tensor({3}, rng, 0.5, 2.0);
    run("add_broadcast", [&] { return sum_all(mul(add(a, b), add(a, b))); }, {&a, &b});
    run("sub_broadcast_rev", [&] { return sum_all(mul(sub(b, a), sub(b, a))); }, {&a, &b});
    run("mul_broadcast", [&] { return sum_all(mul(mul(a, b), a)); }, {&a, &b});
    run("div_broadcast", [&] { return sum_all(mul(div(a, b), a)); }, {&a, &b});
    run("div_broadcast_rev", [&] { return sum_all(mul(div(b, a), b)); }, {&a, &b});
  }
  {
    auto a = rand_tensor({2, 3}, rng), b = rand_tensor({2, 3}, rng);
    run("maximum", [&] { return sum_all(mul(maximum(a, b), maximum(a, b))); }, {&a, &b});
  }
  {
    auto x = rand_tensor({2, 4}, rng);
    run("scale", [&] { return sum_all(mul(scale(x, 1.7), x)); }, {&x});
    run("add_const", [&] { return sum_all(mul(add_const(x, 0.3), x)); }, {&x});
    run("sigmoid", [&] { return sum_all(mul(sigmoid(x), x)); }, {&x});
    run("tanh", [&] { return sum_all(mul(tanh_t(x), x)); }, {&x});
    run("exp", [&] { return sum_all(mul(exp_t(x), x)); }, {&x});
    run("softplus", [&] { return sum_all(mul(softplus(x), x)); }, {&x});
    run("softmax_lastaxis", [&] { return sum_all(mul(softmax_lastaxis(x), x)); }, {&x});
  }
  {  // kink ops, sampled away from their kinks
    auto x = rand_tensor({2, 4}, rng, 0.2, 1.5);
    auto y = rand_tensor({2, 4}, rng, -1.5, -0.2);
    run("relu_pos", [&] { return sum_all(mul(relu(x), x)); }, {&x});
    run("relu_neg", [&] { return sum_all(mul(relu(y), y)); }, {&y});
    run("abs", [&] { return sum_all(mul(abs_t(y), x)); }, {&x, &y});
    run("log", [&] { return sum_all(mul(log_t(x), x)); }, {&x});
    run("clamp_inside", [&] { return sum_all(mul(clamp(x, 0.05, 2.0), x)); }, {&x});
  }
  {
    auto x = rand_tensor({2, 3, 4}, rng);
    run("transpose", [&] { return sum_all(mul(transpose(x, 0, 2), transpose(x, 0, 2))); }, {&x});
    run("reshape", [&] { return sum_all(mul(reshape(x, {6, 4}), reshape(x, {6, 4}))); }, {&x});
    run("flip", [&] { return sum_all(mul(flip(x, 1), x)); }, {&x});
    run("slice", [&] { return sum_all(mul(slice(x, 1, 1, 2), slice(x, 1, 1, 2))); }, {&x});
    run("sum_last", [&] { return sum_all(mul(sum_last(x), sum_last(x))); }, {&x});
    run("mean_all", [&] { return mean_all(mul(x, x)); }, {&x});
  }
  {
    auto a = rand_tensor({2, 3, 4}, rng), b = rand_tensor({2, 2, 4}, rng);
    run("concat", [&] {
      auto c = concat<double>({a, b}, 1);
      return sum_all(mul(c, c));
    }, {&a, &b});
  }
  {
    auto x = rand_tensor({3, 4}, rng);
    run("expand_mid", [&] {
      auto e = expand_mid(x, 2);
      return sum_all(mul(e, e));
    }, {&x});
  }
  {
    auto a = rand_tensor({4, 5}, rng), b = rand_tensor({5, 3}, rng);
    run("matmul", [&] { return sum_all(mul(matmul(a, b), matmul(a, b))); }, {&a, &b});
  }
  {
    auto x = rand_tensor({2, 3, 5, 5}, rng);
    auto w = rand_tensor({4, 3, 3, 3}, rng);
    auto bias = rand_tensor({4}, rng);
    run("conv2d", [&] {
      auto y = conv2d(x, w, bias, 1, 1);
      return sum_all(mul(y, y));
    }, {&x, &w, &bias});
    run("conv2d_stride2", [&] {
      auto y = conv2d(x, w, bias, 2, 1);
      return sum_all(mul(y, y));
    }, {&x, &w, &bias});
  }
  {
    auto x = rand_tensor({3, 4}, rng);
    auto gm = rand_tensor({4}, rng, 0.5, 1.5);
    auto bt = rand_tensor({4}, rng);
    run("layer_norm_last", [&] {
      auto y = layer_norm_last(x, gm, bt);
      return sum_all(mul(y, y));
    }, {&x, &gm, &bt});
  }
  {
    auto v = rand_tensor({2, 3}, rng), k = rand_tensor({2, 4}, rng);
    run("lane_outer", [&] {
      auto y = lane_outer(v, k);
      return sum_all(mul(y, y));
    }, {&v, &k});
    auto m = rand_tensor({2, 3, 4}, rng), q = rand_tensor({2, 4}, rng);
    run("lane_matvec", [&] {
      auto y = lane_matvec(m, q);
      return sum_all(mul(y, y));
    }, {&m, &q});
    auto xs = rand_tensor({3, 5}, rng), s = rand_tensor({3}, rng);
    run("scale_rows", [&] {
      auto y = scale_rows(xs, s);
      return sum_all(mul(y, y));
    }, {&xs, &s});
    auto u = rand_tensor({2, 3}, rng, 0.05, 0.5), a2 = rand_tensor({3, 4}, rng, -2.0, -0.5);
    run("exp_outer", [&] {
      auto y = exp_outer(u, a2);
      return sum_all(mul(y, y));
    }, {&u, &a2});
  }
  {
    auto x = rand_tensor({2, 2, 4, 4}, rng);
    run("space_to_channel", [&] {
      auto y = space_to_channel(x, 2);
      return sum_all(mul(y, y));
    }, {&x});
    auto z = rand_tensor({2, 8, 2, 2}, rng);
    run("channel_to_space", [&] {
      auto y = channel_to_space(z, 2);
      return sum_all(mul(y, y));
    }, {&z});
  }
  return out;
}

}  // namespace meshcast::testing
