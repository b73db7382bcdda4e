#pragma once

// Shared test oracles: central-finite-difference gradient checking and
// random tensor construction. Test-side only; independent of the library's
// backward implementations it validates.

#include <functional>
#include <vector>

#include "meshcast/ops.hpp"

namespace meshcast::testing {

inline Tensor<double> rand_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return Tensor<double>::uniform(std::move(shape), lo, hi, rng);
}

/// Max relative error between the tape gradient and central finite
/// differences of `fn` over every (or `max_coords_per_input` sampled)
/// coordinate of each input. `fn` must recompute its scalar output from the
/// inputs' current buffer contents on every call.
inline double gradcheck_max_err(const std::function<Tensor<double>()>& fn,
                                std::vector<Tensor<double>*> inputs, double h = 1e-4,
                                Index max_coords_per_input = 0, std::uint64_t sample_seed = 0) {
  for (auto* t : inputs) t->set_requires_grad(true);
  Tape<double> tape;
  for (auto* t : inputs) tape.watch(*t);
  Tensor<double> loss = fn();
  if (loss.size() != 1) throw ShapeError("gradcheck: fn must return a scalar");
  tape.backward(loss);
  std::vector<Eigen::ArrayXd> analytic;
  analytic.reserve(inputs.size());
  for (auto* t : inputs) analytic.push_back(tape.grad(*t));
  for (auto* t : inputs) t->detach();

  Rng rng(sample_seed + 17);
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor<double>& t = *inputs[i];
    std::vector<Index> coords;
    if (max_coords_per_input > 0 && t.size() > max_coords_per_input) {
      for (Index k = 0; k < max_coords_per_input; ++k)
        coords.push_back(static_cast<Index>(rng.uniform_int(static_cast<std::uint64_t>(t.size()))));
    } else {
      for (Index c = 0; c < t.size(); ++c) coords.push_back(c);
    }
    for (Index c : coords) {
      const double orig = t.values()[c];
      t.values()[c] = orig + h;
      const double fp = fn().item();
      t.values()[c] = orig - h;
      const double fm = fn().item();
      t.values()[c] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[i][c];
      const double rel =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace meshcast::testing
