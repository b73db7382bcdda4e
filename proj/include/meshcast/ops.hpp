#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <initializer_list>
#include <vector>

#include "meshcast/tensor.hpp"

namespace meshcast {

template <class S>
using Buf = typename Tensor<S>::Buffer;

namespace detail {

// Trailing-axis broadcast: shapes equal, or the smaller shape is exactly the
// trailing suffix of the larger. Anything else needs an explicit reshape.
template <class S>
struct BinPlan {
  Shape out_shape;
  int small = 0;  // 0 none, 1 a tiled, 2 b tiled
  Index reps = 1;
  Index block = 0;
};

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

template <class S>
BinPlan<S> binary_plan(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  BinPlan<S> plan;
  if (a.shape() == b.shape()) {
    plan.out_shape = a.shape();
    plan.block = a.size();
    return plan;
  }
  if (is_suffix(b.shape(), a.shape())) {
    plan.out_shape = a.shape();
    plan.small = 2;
    plan.block = b.size();
    plan.reps = a.size() / std::max<Index>(b.size(), 1);
    return plan;
  }
  if (is_suffix(a.shape(), b.shape())) {
    plan.out_shape = b.shape();
    plan.small = 1;
    plan.block = a.size();
    plan.reps = b.size() / std::max<Index>(a.size(), 1);
    return plan;
  }
  throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()) + " are not equal nor trailing-broadcastable");
}

// Sum of `reps` consecutive blocks -> one block.
template <class S>
Buf<S> fold_blocks(const Buf<S>& g, Index reps, Index block) {
  Buf<S> out = Buf<S>::Zero(block);
  for (Index r = 0; r < reps; ++r) out += g.segment(r * block, block);
  return out;
}

template <class S, class FwdSame, class FwdTiled>
Buf<S> binary_forward(const BinPlan<S>& plan, const Tensor<S>& a, const Tensor<S>& b,
                      FwdSame same, FwdTiled tiled) {
  if (plan.small == 0) return same(a.values(), b.values());
  Buf<S> out(plan.reps * plan.block);
  const Buf<S>& big = plan.small == 2 ? a.values() : b.values();
  const Buf<S>& sml = plan.small == 2 ? b.values() : a.values();
  for (Index r = 0; r < plan.reps; ++r)
    out.segment(r * plan.block, plan.block) =
        tiled(big.segment(r * plan.block, plan.block), sml, plan.small == 2);
  return out;
}

template <class S>
Tensor<S> make_result(Shape shape, Buf<S> data, Tape<S>* tape, int node) {
  Tensor<S> t(std::move(shape), std::move(data));
  if (tape != nullptr && node >= 0) t.bind(tape, node);
  return t;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (with trailing-axis broadcast)
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  auto plan = detail::binary_plan(a, b, "add");
  Buf<S> out = detail::binary_forward(
      plan, a, b, [](const Buf<S>& x, const Buf<S>& y) -> Buf<S> { return x + y; },
      [](auto x, const Buf<S>& y, bool) -> Buf<S> { return x + y; });
  Tape<S>* tape = detail::merge_tapes<S>({&a, &b});
  int node = -1;
  if (tape) {
    const int pa = detail::node_on(a, tape), pb = detail::node_on(b, tape);
    if (pa >= 0 || pb >= 0)
      node = tape->record(out.size(), [pa, pb, plan](Tape<S>& tp, const Buf<S>& g) {
        auto reduce = [&](int side) -> Buf<S> {
          if (plan.small == side) return detail::fold_blocks<S>(g, plan.reps, plan.block);
          return g;
        };
        if (pa >= 0) tp.accum(pa, reduce(1));
        if (pb >= 0) tp.accum(pb, reduce(2));
      });
  }
  return detail::make_result(plan.out_shape, std::move(out), tape, node);
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  auto plan = detail::binary_plan(a, b, "sub");
  Buf<S> out = detail::binary_forward(
      plan, a, b, [](const Buf<S>& x, const Buf<S>& y) -> Buf<S> { return x - y; },
      [](auto big, const Buf<S>& sml, bool b_small) -> Buf<S> {
        return b_small ? Buf<S>(big - sml) : Buf<S>(sml - big);
      });
  Tape<S>* tape = detail::merge_tapes<S>({&a, &b});
  int node = -1;
  if (tape) {
    const int pa = detail::node_on(a, tape), pb = detail::node_on(b, tape);
    if (pa >= 0 || pb >= 0)
      node = tape->record(out.size(), [pa, pb, plan](Tape<S>& tp, const Buf<S>& g) {
        if (pa >= 0) {
          if (plan.small == 1)
            tp.accum(pa, detail::fold_blocks<S>(g, plan.reps, plan.block));
          else
            tp.accum(pa, g);
        }
        if (pb >= 0) {
          if (plan.small == 2)
            tp.accum(pb, (-detail::fold_blocks<S>(g, plan.reps, plan.block)).eval());
          else
            tp.accum(pb, (-g).eval());
        }
      });
  }
  return detail::make_result(plan.out_shape, std::move(out), tape, node);
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  auto plan = detail::binary_plan(a, b, "mul");
  Buf<S> out = detail::binary_forward(
      plan, a, b, [](const Buf<S>& x, const Buf<S>& y) -> Buf<S> { return x * y; },
      [](auto x, const Buf<S>& y, bool) -> Buf<S> { return x * y; });
  Tape<S>* tape = detail::merge_tapes<S>({&a, &b});
  int node = -1;
  if (tape) {
    const int pa = detail::node_on(a, tape), pb = detail::node_on(b, tape);
    if (pa >= 0 || pb >= 0) {
      auto da = a.buffer();
      auto db = b.buffer();
      node = tape->record(out.size(), [pa, pb, plan, da, db](Tape<S>& tp, const Buf<S>& g) {
        auto grad_for = [&](const Buf<S>& other, bool other_small, bool self_small) -> Buf<S> {
          if (!other_small && !self_small) return g * other;
          if (other_small) {  // self is the big side
            Buf<S> r(g.size());
            for (Index i = 0; i < plan.reps; ++i)
              r.segment(i * plan.block, plan.block) = g.segment(i * plan.block, plan.block) * other;
            return r;
          }
          Buf<S> r = Buf<S>::Zero(plan.block);  // self small: reduce
          for (Index i = 0; i < plan.reps; ++i)
            r += g.segment(i * plan.block, plan.block) * other.segment(i * plan.block, plan.block);
          return r;
        };
        if (pa >= 0) tp.accum(pa, grad_for(*db, plan.small == 2, plan.small == 1));
        if (pb >= 0) tp.accum(pb, grad_for(*da, plan.small == 1, plan.small == 2));
      });
    }
  }
  return detail::make_result(plan.out_shape, std::move(out), tape, node);
}

template <class S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  auto plan = detail::binary_plan(a, b, "div");
  Buf<S> out = detail::binary_forward(
      plan, a, b, [](const Buf<S>& x, const Buf<S>& y) -> Buf<S> { return x / y; },
      [](auto big, const Buf<S>& sml, bool b_small) -> Buf<S> {
        return b_small ? Buf<S>(big / sml) : Buf<S>(sml / big);
      });
  Tape<S>* tape = detail::merge_tapes<S>({&a, &b});
  int node = -1;
  if (tape) {
    const int pa = detail::node_on(a, tape), pb = detail::node_on(b, tape);
    if (pa >= 0 || pb >= 0) {
      auto da = a.buffer();
      auto db = b.buffer();
      node = tape->record(out.size(), [pa, pb, plan, da, db](Tape<S>& tp, const Buf<S>& g) {
        const Buf<S>& av = *da;
        const Buf<S>& bv = *db;
        auto b_at = [&](Index i) -> S { return plan.small == 2 ? bv[i % plan.block] : bv[i]; };
        auto a_at = [&](Index i) -> S { return plan.small == 1 ? av[i % plan.block] : av[i]; };
        if (pa >= 0) {
          Buf<S> r = plan.small == 1 ? Buf<S>::Zero(plan.block) : Buf<S>(g.size());
          for (Index i = 0; i < g.size(); ++i) {
            const S v = g[i] / b_at(i);
            if (plan.small == 1)
              r[i % plan.block] += v;
            else
              r[i] = v;
          }
          tp.accum(pa, r);
        }
        if (pb >= 0) {
          Buf<S> r = plan.small == 2 ? Buf<S>::Zero(plan.block) : Buf<S>(g.size());
          for (Index i = 0; i < g.size(); ++i) {
            const S bb = b_at(i);
            const S v = -g[i] * a_at(i) / (bb * bb);
            if (plan.small == 2)
              r[i % plan.block] += v;
            else
              r[i] = v;
          }
          tp.accum(pb, r);
        }
      });
    }
  }
  return detail::make_result(plan.out_shape, std::move(out), tape, node);
}

/// Elementwise max; ties take the first argument's gradient.
template <class S>
Tensor<S> maximum(const Tensor<S>& a, const Tensor<S>& b) {
  auto plan = detail::binary_plan(a, b, "maximum");
  Buf<S> out = detail::binary_forward(
      plan, a, b, [](const Buf<S>& x, const Buf<S>& y) -> Buf<S> { return x.max(y); },
      [](auto big, const Buf<S>& sml, bool b_small) -> Buf<S> {
        return b_small ? Buf<S>(big.max(sml)) : Buf<S>(sml.max(big));
      });
  Tape<S>* tape = detail::merge_tapes<S>({&a, &b});
  int node = -1;
  if (tape) {
    const int pa = detail::node_on(a, tape), pb = detail::node_on(b, tape);
    if (pa >= 0 || pb >= 0) {
      auto da = a.buffer();
      auto db = b.buffer();
      node = tape->record(out.size(), [pa, pb, plan, da, db](Tape<S>& tp, const Buf<S>& g) {
        const Buf<S>& av = *da;
        const Buf<S>& bv = *db;
        auto a_at = [&](Index i) -> S { return plan.small == 1 ? av[i % plan.block] : av[i]; };
        auto b_at = [&](Index i) -> S { return plan.small == 2 ? bv[i % plan.block] : bv[i]; };
        if (pa >= 0) {
          Buf<S> r = plan.small == 1 ? Buf<S>::Zero(plan.block) : Buf<S>::Zero(g.size());
          for (Index i = 0; i < g.size(); ++i)
            if (a_at(i) >= b_at(i)) r[plan.small == 1 ? i % plan.block : i] += g[i];
          tp.accum(pa, r);
        }
        if (pb >= 0) {
          Buf<S> r = plan.small == 2 ? Buf<S>::Zero(plan.block) : Buf<S>::Zero(g.size());
          for (Index i = 0; i < g.size(); ++i)
            if (a_at(i) < b_at(i)) r[plan.small == 2 ? i % plan.block : i] += g[i];
          tp.accum(pb, r);
        }
      });
    }
  }
  return detail::make_result(plan.out_shape, std::move(out), tape, node);
}

template <class S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <class S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <class S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }
template <class S>
Tensor<S> operator/(const Tensor<S>& a, const Tensor<S>& b) { return div(a, b); }

// ---------------------------------------------------------------------------
// Scalar-constant and simple unary ops
// ---------------------------------------------------------------------------

namespace detail {

template <class S, class Fwd, class Back>
Tensor<S> unary_op(const Tensor<S>& x, Fwd fwd, Back back_expr) {
  Buf<S> out = fwd(x.values());
  Tape<S>* tape = merge_tapes<S>({&x});
  int node = -1;
  if (tape) {
    const int px = node_on(x, tape);
    if (px >= 0) {
      auto dx = x.buffer();
      auto dout = std::make_shared<Buf<S>>(out);
      node = tape->record(out.size(), [px, dx, dout, back_expr](Tape<S>& tp, const Buf<S>& g) {
        tp.accum(px, back_expr(g, *dx, *dout));
      });
    }
  }
  return make_result(x.shape(), std::move(out), tape, node);
}

}  // namespace detail

template <class S>
Tensor<S> scale(const Tensor<S>& x, S c) {
  return detail::unary_op(
      x, [c](const Buf<S>& v) -> Buf<S> { return v * c; },
      [c](const Buf<S>& g, const Buf<S>&, const Buf<S>&) -> Buf<S> { return g * c; });
}

template <class S>
Tensor<S> add_const(const Tensor<S>& x, S c) {
  return detail::unary_op(
      x, [c](const Buf<S>& v) -> Buf<S> { return v + c; },
      [](const Buf<S>& g, const Buf<S>&, const Buf<S>&) -> Buf<S> { return g; });
}

template <class S>
Tensor<S> neg(const Tensor<S>& x) { return scale(x, S(-1)); }

template <class S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  return detail::unary_op(
      x,
      [](const Buf<S>& v) -> Buf<S> {
        return ((-v.min(S(60)).max(S(-60))).exp() + S(1)).inverse();
      },
      [](const Buf<S>& g, const Buf<S>&, const Buf<S>& y) -> Buf<S> {
        return g * y * (S(1) - y);
      });
}

template <class S>
Tensor<S> tanh_t(const Tensor<S>& x) {
  return detail::unary_op(
      x, [](const Buf<S>& v) -> Buf<S> { return v.tanh(); },
      [](const Buf<S>& g, const Buf<S>&, const Buf<S>& y) -> Buf<S> {
        return g * (S(1) - y * y);
      });
}

template <class S>
Tensor<S> relu(const Tensor<S>& x) {
  return detail::unary_op(
      x, [](const Buf<S>& v) -> Buf<S> { return v.max(S(0)); },
      [](const Buf<S>& g, const Buf<S>& v, const Buf<S>&) -> Buf<S> {
        return (v > S(0)).select(g, Buf<S>::Zero(g.size()));
      });
}

/// exp with the exponent clamped to [-60, 60]; gradient is zero in the
/// clamped region (the function is flat there).
template <class S>
Tensor<S> exp_t(const Tensor<S>& x) {
  return detail::unary_op(
      x, [](const Buf<S>& v) -> Buf<S> { return v.min(S(60)).max(S(-60)).exp(); },
      [](const Buf<S>& g, const Buf<S>& v, const Buf<S>& y) -> Buf<S> {
        return (v.abs() <= S(60)).select(g * y, Buf<S>::Zero(g.size()));
      });
}

template <class S>
Tensor<S> log_t(const Tensor<S>& x) {
  return detail::unary_op(
      x, [](const Buf<S>& v) -> Buf<S> { return v.log(); },
      [](const Buf<S>& g, const Buf<S>& v, const Buf<S>&) -> Buf<S> { return g / v; });
}

template <class S>
Tensor<S> softplus(const Tensor<S>& x) {
  return detail::unary_op(
      x,
      [](const Buf<S>& v) -> Buf<S> {
        return v.max(S(0)) + ((-v.abs()).exp() + S(1)).log();
      },
      [](const Buf<S>& g, const Buf<S>& v, const Buf<S>&) -> Buf<S> {
        return g * ((-v.min(S(60)).max(S(-60))).exp() + S(1)).inverse();
      });
}

template <class S>
Tensor<S> abs_t(const Tensor<S>& x) {
  return detail::unary_op(
      x, [](const Buf<S>& v) -> Buf<S> { return v.abs(); },
      [](const Buf<S>& g, const Buf<S>& v, const Buf<S>&) -> Buf<S> {
        return g * (v >= S(0)).select(Buf<S>::Ones(v.size()), -Buf<S>::Ones(v.size()));
      });
}

/// Clamp to [lo, hi]; gradient passes only where the input was inside.
template <class S>
Tensor<S> clamp(const Tensor<S>& x, S lo, S hi) {
  return detail::unary_op(
      x, [lo, hi](const Buf<S>& v) -> Buf<S> { return v.max(lo).min(hi); },
      [lo, hi](const Buf<S>& g, const Buf<S>& v, const Buf<S>&) -> Buf<S> {
        return (v >= lo && v <= hi).select(g, Buf<S>::Zero(g.size()));
      });
}

/// Row-stable softmax over the last axis.
template <class S>
Tensor<S> softmax_lastaxis(const Tensor<S>& x) {
  if (x.rank() == 0 || x.dim(x.rank() - 1) == 0)
    throw ShapeError("softmax_lastaxis: empty last axis in " + shape_str(x.shape()));
  const Index d = x.dim(x.rank() - 1);
  const Index rows = x.size() / d;
  Buf<S> out(x.size());
  for (Index r = 0; r < rows; ++r) {
    auto seg = x.values().segment(r * d, d);
    const S m = seg.maxCoeff();
    Buf<S> e = (seg - m).exp();
    out.segment(r * d, d) = e / e.sum();
  }
  Tape<S>* tape = detail::merge_tapes<S>({&x});
  int node = -1;
  if (tape) {
    const int px = detail::node_on(x, tape);
    if (px >= 0) {
      auto dout = std::make_shared<Buf<S>>(out);
      node = tape->record(out.size(), [px, dout, rows, d](Tape<S>& tp, const Buf<S>& g) {
        Buf<S> r(g.size());
        for (Index i = 0; i < rows; ++i) {
          auto y = dout->segment(i * d, d);
          auto gs = g.segment(i * d, d);
          const S dot = (gs * y).sum();
          r.segment(i * d, d) = y * (gs - dot);
        }
        tp.accum(px, r);
      });
    }
  }
  return detail::make_result(x.shape(), std::move(out), tape, node);
}

enum class Act { kSigmoid, kTanh, kRelu, kExp, kSoftmaxLast };

template <class S>
Tensor<S> activation(const Tensor<S>& x, Act kind) {
  switch (kind) {
    case Act::kSigmoid: return sigmoid(x);
    case Act::kTanh: return tanh_t(x);
    case Act::kRelu: return relu(x);
    case Act::kExp: return exp_t(x);
    case Act::kSoftmaxLast: return softmax_lastaxis(x);
  }
  throw ConfigError("activation: unknown kind");
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

/// Same buffer, new shape (no copy). Backward is the identity.
template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  if (numel(shape) != x.size())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape) +
                     " changes element count");
  Tensor<S> out(std::move(shape), x.values());
  Tape<S>* tape = detail::merge_tapes<S>({&x});
  if (tape) {
    const int px = detail::node_on(x, tape);
    if (px >= 0)
      out.bind(tape, tape->record(out.size(), [px](Tape<S>& tp, const Buf<S>& g) {
        tp.accum(px, g);
      }));
  }
  return out;
}

namespace detail {

// Permute copy for a single axis swap, factored as [pre, A, mid, B, post].
template <class S>
Buf<S> swap_axes_buf(const Buf<S>& v, const Shape& shape, Index a, Index b) {
  Index pre = 1, mid = 1, post = 1;
  for (Index i = 0; i < a; ++i) pre *= shape[static_cast<std::size_t>(i)];
  for (Index i = a + 1; i < b; ++i) mid *= shape[static_cast<std::size_t>(i)];
  for (Index i = b + 1; i < static_cast<Index>(shape.size()); ++i)
    post *= shape[static_cast<std::size_t>(i)];
  const Index A = shape[static_cast<std::size_t>(a)];
  const Index B = shape[static_cast<std::size_t>(b)];
  Buf<S> out(v.size());
  for (Index p = 0; p < pre; ++p)
    for (Index i = 0; i < A; ++i)
      for (Index m = 0; m < mid; ++m)
        for (Index j = 0; j < B; ++j) {
          const Index src = ((((p * A + i) * mid + m) * B + j)) * post;
          const Index dst = ((((p * B + j) * mid + m) * A + i)) * post;
          out.segment(dst, post) = v.segment(src, post);
        }
  return out;
}

}  // namespace detail

template <class S>
Tensor<S> transpose(const Tensor<S>& x, Index axis_a, Index axis_b) {
  check_axis(x.shape(), axis_a, "transpose");
  check_axis(x.shape(), axis_b, "transpose");
  if (axis_a == axis_b) return reshape(x, x.shape());
  const Index a = std::min(axis_a, axis_b), b = std::max(axis_a, axis_b);
  Shape out_shape = x.shape();
  std::swap(out_shape[static_cast<std::size_t>(a)], out_shape[static_cast<std::size_t>(b)]);
  Buf<S> out = detail::swap_axes_buf<S>(x.values(), x.shape(), a, b);
  Tape<S>* tape = detail::merge_tapes<S>({&x});
  int node = -1;
  if (tape) {
    const int px = detail::node_on(x, tape);
    if (px >= 0) {
      Shape oshape = out_shape;
      node = tape->record(out.size(), [px, oshape, a, b](Tape<S>& tp, const Buf<S>& g) {
        tp.accum(px, detail::swap_axes_buf<S>(g, oshape, a, b));
      });
    }
  }
  return detail::make_result(std::move(out_shape), std::move(out), tape, node);
}

template <class S>
Tensor<S> flip(const Tensor<S>& x, Index axis) {
  check_axis(x.shape(), axis, "flip");
  Index pre = 1, post = 1;
  for (Index i = 0; i < axis; ++i) pre *= x.dim(i);
  for (Index i = axis + 1; i < x.rank(); ++i) post *= x.dim(i);
  const Index A = x.dim(axis);
  auto flip_buf = [pre, post, A](const Buf<S>& v) {
    Buf<S> out(v.size());
    for (Index p = 0; p < pre; ++p)
      for (Index i = 0; i < A; ++i)
        out.segment((p * A + (A - 1 - i)) * post, post) = v.segment((p * A + i) * post, post);
    return out;
  };
  Buf<S> out = flip_buf(x.values());
  Tape<S>* tape = detail::merge_tapes<S>({&x});
  int node = -1;
  if (tape) {
    const int px = detail::node_on(x, tape);
    if (px >= 0)
      node = tape->record(out.size(), [px, flip_buf](Tape<S>& tp, const Buf<S>& g) {
        tp.accum(px, flip_buf(g));
      });
  }
  return detail::make_result(x.shape(), std::move(out), tape, node);
}

template <class S>
Tensor<S> slice(const Tensor<S>& x, Index axis, Index start, Index len) {
  check_axis(x.shape(), axis, "slice");
  const Index A = x.dim(axis);
  if (start < 0 || len < 1 || start + len > A)
    throw ShapeError("slice: [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") out of range for axis extent " + std::to_string(A));
  Index pre = 1, post = 1;
  for (Index i = 0; i < axis; ++i) pre *= x.dim(i);
  for (Index i = axis + 1; i < x.rank(); ++i) post *= x.dim(i);
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = len;
  Buf<S> out(pre * len * post);
  for (Index p = 0; p < pre; ++p)
    out.segment(p * len * post, len * post) = x.values().segment((p * A + start) * post, len * post);
  Tape<S>* tape = detail::merge_tapes<S>({&x});
  int node = -1;
  if (tape) {
    const int px = detail::node_on(x, tape);
    const Index total = x.size();
    if (px >= 0)
      node = tape->record(out.size(), [px, pre, post, A, start, len, total](Tape<S>& tp, const Buf<S>& g) {
        Buf<S> r = Buf<S>::Zero(total);
        for (Index p = 0; p < pre; ++p)
          r.segment((p * A + start) * post, len * post) = g.segment(p * len * post, len * post);
        tp.accum(px, r);
      });
  }
  return detail::make_result(std::move(out_shape), std::move(out), tape, node);
}

template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& xs, Index axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  check_axis(xs[0].shape(), axis, "concat");
  Shape out_shape = xs[0].shape();
  Index total_axis = 0;
  for (const auto& x : xs) {
    Shape s = x.shape();
    s[static_cast<std::size_t>(axis)] = 0;
    Shape s0 = out_shape;
    s0[static_cast<std::size_t>(axis)] = 0;
    if (s != s0)
      throw ShapeError("concat: shape " + shape_str(x.shape()) + " incompatible with " +
                       shape_str(out_shape) + " on axis " + std::to_string(axis));
    total_axis += x.dim(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = total_axis;
  Index pre = 1, post = 1;
  for (Index i = 0; i < axis; ++i) pre *= out_shape[static_cast<std::size_t>(i)];
  for (Index i = axis + 1; i < static_cast<Index>(out_shape.size()); ++i)
    post *= out_shape[static_cast<std::size_t>(i)];
  Buf<S> out(pre * total_axis * post);
  Index offset = 0;
  for (const auto& x : xs) {
    const Index A = x.dim(axis);
    for (Index p = 0; p < pre; ++p)
      out.segment((p * total_axis + offset) * post, A * post) = x.values().segment(p * A * post, A * post);
    offset += A;
  }
  Tape<S>* tape = nullptr;
  for (const auto& x : xs)
    if (x.tape() != nullptr) {
      if (tape != nullptr && tape != x.tape()) throw ShapeError("concat: inputs on different tapes");
      tape = x.tape();
    }
  int node = -1;
  if (tape) {
    struct Part { int node; Index A, off; };
    std::vector<Part> parts;
    Index off = 0;
    for (const auto& x : xs) {
      parts.push_back({detail::node_on(x, tape), x.dim(axis), off});
      off += x.dim(axis);
    }
    bool any = false;
    for (auto& p : parts) any = any || p.node >= 0;
    if (any)
      node = tape->record(out.size(), [parts, pre, post, total_axis](Tape<S>& tp, const Buf<S>& g) {
        for (const auto& part : parts) {
          if (part.node < 0) continue;
          Buf<S> r(pre * part.A * post);
          for (Index p = 0; p < pre; ++p)
            r.segment(p * part.A * post, part.A * post) =
                g.segment((p * total_axis + part.off) * post, part.A * post);
          tp.accum(part.node, r);
        }
      });
  }
  return detail::make_result(std::move(out_shape), std::move(out), tape, node);
}

/// [L,D] -> [L,B,D] by repetition along a new middle axis; backward sums it.
template <class S>
Tensor<S> expand_mid(const Tensor<S>& x, Index B) {
  if (x.rank() != 2) throw ShapeError("expand_mid: want rank-2 input, got " + shape_str(x.shape()));
  const Index L = x.dim(0), D = x.dim(1);
  Buf<S> out(L * B * D);
  for (Index l = 0; l < L; ++l)
    for (Index b = 0; b < B; ++b) out.segment((l * B + b) * D, D) = x.values().segment(l * D, D);
  Tape<S>* tape = detail::merge_tapes<S>({&x});
  int node = -1;
  if (tape) {
    const int px = detail::node_on(x, tape);
    if (px >= 0)
      node = tape->record(out.size(), [px, L, B, D](Tape<S>& tp, const Buf<S>& g) {
        Buf<S> r = Buf<S>::Zero(L * D);
        for (Index l = 0; l < L; ++l)
          for (Index b = 0; b < B; ++b) r.segment(l * D, D) += g.segment((l * B + b) * D, D);
        tp.accum(px, r);
      });
  }
  return detail::make_result({L, B, D}, std::move(out), tape, node);
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> sum_all(const Tensor<S>& x) {
  Buf<S> out = Buf<S>::Constant(1, x.values().sum());
  Tape<S>* tape = detail::merge_tapes<S>({&x});
  int node = -1;
  if (tape) {
    const int px = detail::node_on(x, tape);
    const Index n = x.size();
    if (px >= 0)
      node = tape->record(1, [px, n](Tape<S>& tp, const Buf<S>& g) {
        tp.accum(px, Buf<S>::Constant(n, g[0]));
      });
  }
  return detail::make_result({1}, std::move(out), tape, node);
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& x) {
  return scale(sum_all(x), S(1) / static_cast<S>(x.size()));
}

/// Sum over the last axis; the axis is removed from the shape.
template <class S>
Tensor<S> sum_last(const Tensor<S>& x) {
  if (x.rank() < 1) throw ShapeError("sum_last: rank-0 input");
  const Index d = x.dim(x.rank() - 1);
  const Index rows = x.size() / d;
  Buf<S> out(rows);
  for (Index r = 0; r < rows; ++r) out[r] = x.values().segment(r * d, d).sum();
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  Tape<S>* tape = detail::merge_tapes<S>({&x});
  int node = -1;
  if (tape) {
    const int px = detail::node_on(x, tape);
    if (px >= 0)
      node = tape->record(rows, [px, rows, d](Tape<S>& tp, const Buf<S>& g) {
        Buf<S> r(rows * d);
        for (Index i = 0; i < rows; ++i) r.segment(i * d, d).setConstant(g[i]);
        tp.accum(px, r);
      });
  }
  return detail::make_result(std::move(out_shape), std::move(out), tape, node);
}

// ---------------------------------------------------------------------------
// Matrix multiply (Eigen-backed)
// ---------------------------------------------------------------------------

namespace detail {
template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapRM = Eigen::Map<const RowMat<S>>;
}  // namespace detail

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: want rank-2 inputs, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  const Index M = a.dim(0), K = a.dim(1), K2 = b.dim(0), N = b.dim(1);
  if (K != K2)
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  detail::MapRM<S> A(a.values().data(), M, K);
  detail::MapRM<S> B(b.values().data(), K, N);
  detail::RowMat<S> C = A * B;
  Buf<S> out = Eigen::Map<const Buf<S>>(C.data(), M * N);
  Tape<S>* tape = detail::merge_tapes<S>({&a, &b});
  int node = -1;
  if (tape) {
    const int pa = detail::node_on(a, tape), pb = detail::node_on(b, tape);
    if (pa >= 0 || pb >= 0) {
      auto da = a.buffer();
      auto db = b.buffer();
      node = tape->record(out.size(), [pa, pb, da, db, M, K, N](Tape<S>& tp, const Buf<S>& g) {
        detail::MapRM<S> G(g.data(), M, N);
        if (pa >= 0) {
          detail::MapRM<S> B2(db->data(), K, N);
          detail::RowMat<S> dA = G * B2.transpose();
          tp.accum(pa, Eigen::Map<const Buf<S>>(dA.data(), M * K));
        }
        if (pb >= 0) {
          detail::MapRM<S> A2(da->data(), M, K);
          detail::RowMat<S> dB = A2.transpose() * G;
          tp.accum(pb, Eigen::Map<const Buf<S>>(dB.data(), K * N));
        }
      });
    }
  }
  return detail::make_result({M, N}, std::move(out), tape, node);
}

/// x [R,K] * W [K,N] + b [N].
template <class S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  return add(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// 2D convolution (cross-correlation), im2col + matmul
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
Buf<S> im2col(const Buf<S>& x, Index B, Index C, Index H, Index W, Index kh, Index kw,
              Index stride, Index pad, Index Ho, Index Wo) {
  Buf<S> cols = Buf<S>::Zero(B * Ho * Wo * C * kh * kw);
  const Index row_len = C * kh * kw;
  for (Index b = 0; b < B; ++b)
    for (Index ho = 0; ho < Ho; ++ho)
      for (Index wo = 0; wo < Wo; ++wo) {
        const Index r = (b * Ho + ho) * Wo + wo;
        for (Index c = 0; c < C; ++c)
          for (Index dy = 0; dy < kh; ++dy) {
            const Index iy = ho * stride + dy - pad;
            if (iy < 0 || iy >= H) continue;
            for (Index dx = 0; dx < kw; ++dx) {
              const Index ix = wo * stride + dx - pad;
              if (ix < 0 || ix >= W) continue;
              cols[r * row_len + (c * kh + dy) * kw + dx] = x[((b * C + c) * H + iy) * W + ix];
            }
          }
      }
  return cols;
}

template <class S>
Buf<S> col2im(const Buf<S>& cols, Index B, Index C, Index H, Index W, Index kh, Index kw,
              Index stride, Index pad, Index Ho, Index Wo) {
  Buf<S> x = Buf<S>::Zero(B * C * H * W);
  const Index row_len = C * kh * kw;
  for (Index b = 0; b < B; ++b)
    for (Index ho = 0; ho < Ho; ++ho)
      for (Index wo = 0; wo < Wo; ++wo) {
        const Index r = (b * Ho + ho) * Wo + wo;
        for (Index c = 0; c < C; ++c)
          for (Index dy = 0; dy < kh; ++dy) {
            const Index iy = ho * stride + dy - pad;
            if (iy < 0 || iy >= H) continue;
            for (Index dx = 0; dx < kw; ++dx) {
              const Index ix = wo * stride + dx - pad;
              if (ix < 0 || ix >= W) continue;
              x[((b * C + c) * H + iy) * W + ix] += cols[r * row_len + (c * kh + dy) * kw + dx];
            }
          }
      }
  return x;
}

}  // namespace detail

/// x [B,Cin,H,W] (*) w [Cout,Cin,kh,kw] + optional bias [Cout].
template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>* bias, Index stride,
                 Index pad) {
  if (x.rank() != 4 || w.rank() != 4)
    throw ShapeError("conv2d: want [B,C,H,W] and [Cout,Cin,kh,kw], got " + shape_str(x.shape()) +
                     " and " + shape_str(w.shape()));
  const Index B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Index Cout = w.dim(0), Cin = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (C != Cin)
    throw ShapeError("conv2d: input channels " + std::to_string(C) + " vs kernel " +
                     std::to_string(Cin));
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (kh > H + 2 * pad || kw > W + 2 * pad)
    throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                     " larger than padded input " + std::to_string(H + 2 * pad) + "x" +
                     std::to_string(W + 2 * pad));
  if (bias && (bias->rank() != 1 || bias->dim(0) != Cout))
    throw ShapeError("conv2d: bias must be [Cout]");
  const Index Ho = (H + 2 * pad - kh) / stride + 1;
  const Index Wo = (W + 2 * pad - kw) / stride + 1;
  const Index R = B * Ho * Wo, RL = Cin * kh * kw;
  auto cols = std::make_shared<Buf<S>>(
      detail::im2col<S>(x.values(), B, C, H, W, kh, kw, stride, pad, Ho, Wo));
  detail::MapRM<S> Cols(cols->data(), R, RL);
  detail::MapRM<S> Wm(w.values().data(), Cout, RL);
  detail::RowMat<S> Y2 = Cols * Wm.transpose();  // [R, Cout]
  Buf<S> out(B * Cout * Ho * Wo);
  for (Index b = 0; b < B; ++b)
    for (Index co = 0; co < Cout; ++co) {
      const S bv = bias ? bias->values()[co] : S(0);
      for (Index ho = 0; ho < Ho; ++ho)
        for (Index wo = 0; wo < Wo; ++wo)
          out[((b * Cout + co) * Ho + ho) * Wo + wo] = Y2((b * Ho + ho) * Wo + wo, co) + bv;
    }
  Tape<S>* tape = bias ? detail::merge_tapes<S>({&x, &w, bias}) : detail::merge_tapes<S>({&x, &w});
  int node = -1;
  if (tape) {
    const int px = detail::node_on(x, tape);
    const int pw = detail::node_on(w, tape);
    const int pb = bias ? detail::node_on(*bias, tape) : -1;
    if (px >= 0 || pw >= 0 || pb >= 0) {
      auto dw = w.buffer();
      node = tape->record(
          out.size(), [=](Tape<S>& tp, const Buf<S>& g) {
            Buf<S> g2(R * Cout);
            for (Index b = 0; b < B; ++b)
              for (Index co = 0; co < Cout; ++co)
                for (Index ho = 0; ho < Ho; ++ho)
                  for (Index wo = 0; wo < Wo; ++wo)
                    g2[((b * Ho + ho) * Wo + wo) * Cout + co] =
                        g[((b * Cout + co) * Ho + ho) * Wo + wo];
            detail::MapRM<S> G2(g2.data(), R, Cout);
            detail::MapRM<S> Cols2(cols->data(), R, RL);
            if (pw >= 0) {
              detail::RowMat<S> dW = G2.transpose() * Cols2;
              tp.accum(pw, Eigen::Map<const Buf<S>>(dW.data(), Cout * RL));
            }
            if (pb >= 0) {
              Buf<S> dbv = Buf<S>::Zero(Cout);
              for (Index r = 0; r < R; ++r)
                for (Index co = 0; co < Cout; ++co) dbv[co] += g2[r * Cout + co];
              tp.accum(pb, dbv);
            }
            if (px >= 0) {
              detail::MapRM<S> Wm2(dw->data(), Cout, RL);
              detail::RowMat<S> dCols = G2 * Wm2;
              Buf<S> dcols_flat = Eigen::Map<const Buf<S>>(dCols.data(), R * RL);
              tp.accum(px, detail::col2im<S>(dcols_flat, B, C, H, W, kh, kw, stride, pad, Ho, Wo));
            }
          });
    }
  }
  return detail::make_result({B, Cout, Ho, Wo}, std::move(out), tape, node);
}

template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias, Index stride,
                 Index pad) {
  return conv2d(x, w, &bias, stride, pad);
}

// ---------------------------------------------------------------------------
// Layer norm over the last axis
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> layer_norm_last(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                          S eps = S(1e-5)) {
  const Index d = x.dim(x.rank() - 1);
  if (gamma.size() != d || beta.size() != d)
    throw ShapeError("layer_norm_last: gamma/beta must have " + std::to_string(d) + " elements");
  const Index rows = x.size() / d;
  auto xhat = std::make_shared<Buf<S>>(x.size());
  auto inv_std = std::make_shared<Buf<S>>(rows);
  Buf<S> out(x.size());
  for (Index r = 0; r < rows; ++r) {
    auto seg = x.values().segment(r * d, d);
    const S mu = seg.mean();
    const S var = (seg - mu).square().mean();
    const S is = S(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    xhat->segment(r * d, d) = (seg - mu) * is;
    out.segment(r * d, d) = xhat->segment(r * d, d) * gamma.values() + beta.values();
  }
  Tape<S>* tape = detail::merge_tapes<S>({&x, &gamma, &beta});
  int node = -1;
  if (tape) {
    const int px = detail::node_on(x, tape);
    const int pg = detail::node_on(gamma, tape);
    const int pb = detail::node_on(beta, tape);
    if (px >= 0 || pg >= 0 || pb >= 0) {
      auto dgamma = gamma.buffer();
      node = tape->record(out.size(), [=](Tape<S>& tp, const Buf<S>& g) {
        if (pg >= 0) {
          Buf<S> r = Buf<S>::Zero(d);
          for (Index i = 0; i < rows; ++i) r += g.segment(i * d, d) * xhat->segment(i * d, d);
          tp.accum(pg, r);
        }
        if (pb >= 0) {
          Buf<S> r = Buf<S>::Zero(d);
          for (Index i = 0; i < rows; ++i) r += g.segment(i * d, d);
          tp.accum(pb, r);
        }
        if (px >= 0) {
          Buf<S> r(rows * d);
          for (Index i = 0; i < rows; ++i) {
            Buf<S> gg = g.segment(i * d, d) * (*dgamma);
            auto xh = xhat->segment(i * d, d);
            const S m1 = gg.mean();
            const S m2 = (gg * xh).mean();
            r.segment(i * d, d) = (*inv_std)[i] * (gg - m1 - xh * m2);
          }
          tp.accum(px, r);
        }
      });
    }
  }
  return detail::make_result(x.shape(), std::move(out), tape, node);
}

// ---------------------------------------------------------------------------
// Lane-wise helpers for recurrent kernels
// ---------------------------------------------------------------------------

/// out[b,p,q] = v[b,p] * k[b,q] (per-lane outer product).
template <class S>
Tensor<S> lane_outer(const Tensor<S>& v, const Tensor<S>& k) {
  if (v.rank() != 2 || k.rank() != 2 || v.dim(0) != k.dim(0))
    throw ShapeError("lane_outer: want [B,P] and [B,Q], got " + shape_str(v.shape()) + " and " +
                     shape_str(k.shape()));
  const Index B = v.dim(0), P = v.dim(1), Q = k.dim(1);
  Buf<S> out(B * P * Q);
  for (Index b = 0; b < B; ++b)
    for (Index p = 0; p < P; ++p)
      out.segment((b * P + p) * Q, Q) = v.values()[b * P + p] * k.values().segment(b * Q, Q);
  Tape<S>* tape = detail::merge_tapes<S>({&v, &k});
  int node = -1;
  if (tape) {
    const int pv = detail::node_on(v, tape), pk = detail::node_on(k, tape);
    if (pv >= 0 || pk >= 0) {
      auto dv = v.buffer();
      auto dk = k.buffer();
      node = tape->record(out.size(), [=](Tape<S>& tp, const Buf<S>& g) {
        if (pv >= 0) {
          Buf<S> r(B * P);
          for (Index b = 0; b < B; ++b)
            for (Index p = 0; p < P; ++p)
              r[b * P + p] = (g.segment((b * P + p) * Q, Q) * dk->segment(b * Q, Q)).sum();
          tp.accum(pv, r);
        }
        if (pk >= 0) {
          Buf<S> r = Buf<S>::Zero(B * Q);
          for (Index b = 0; b < B; ++b)
            for (Index p = 0; p < P; ++p)
              r.segment(b * Q, Q) += g.segment((b * P + p) * Q, Q) * (*dv)[b * P + p];
          tp.accum(pk, r);
        }
      });
    }
  }
  return detail::make_result({B, P, Q}, std::move(out), tape, node);
}

/// out[b,p] = sum_q m[b,p,q] * v[b,q] (per-lane matrix-vector product).
template <class S>
Tensor<S> lane_matvec(const Tensor<S>& m, const Tensor<S>& v) {
  if (m.rank() != 3 || v.rank() != 2 || m.dim(0) != v.dim(0) || m.dim(2) != v.dim(1))
    throw ShapeError("lane_matvec: want [B,P,Q] and [B,Q], got " + shape_str(m.shape()) + " and " +
                     shape_str(v.shape()));
  const Index B = m.dim(0), P = m.dim(1), Q = m.dim(2);
  Buf<S> out(B * P);
  for (Index b = 0; b < B; ++b)
    for (Index p = 0; p < P; ++p)
      out[b * P + p] = (m.values().segment((b * P + p) * Q, Q) * v.values().segment(b * Q, Q)).sum();
  Tape<S>* tape = detail::merge_tapes<S>({&m, &v});
  int node = -1;
  if (tape) {
    const int pm = detail::node_on(m, tape), pv = detail::node_on(v, tape);
    if (pm >= 0 || pv >= 0) {
      auto dm = m.buffer();
      auto dv = v.buffer();
      node = tape->record(out.size(), [=](Tape<S>& tp, const Buf<S>& g) {
        if (pm >= 0) {
          Buf<S> r(B * P * Q);
          for (Index b = 0; b < B; ++b)
            for (Index p = 0; p < P; ++p)
              r.segment((b * P + p) * Q, Q) = g[b * P + p] * dv->segment(b * Q, Q);
          tp.accum(pm, r);
        }
        if (pv >= 0) {
          Buf<S> r = Buf<S>::Zero(B * Q);
          for (Index b = 0; b < B; ++b)
            for (Index p = 0; p < P; ++p)
              r.segment(b * Q, Q) += g[b * P + p] * dm->segment((b * P + p) * Q, Q);
          tp.accum(pv, r);
        }
      });
    }
  }
  return detail::make_result({B, P}, std::move(out), tape, node);
}

/// out[r, ...] = x[r, ...] * s[r] — scales each leading-axis row.
template <class S>
Tensor<S> scale_rows(const Tensor<S>& x, const Tensor<S>& s) {
  if (s.rank() != 1 || x.rank() < 1 || x.dim(0) != s.dim(0))
    throw ShapeError("scale_rows: want [R,...] and [R], got " + shape_str(x.shape()) + " and " +
                     shape_str(s.shape()));
  const Index R = x.dim(0), block = x.size() / R;
  Buf<S> out(x.size());
  for (Index r = 0; r < R; ++r)
    out.segment(r * block, block) = x.values().segment(r * block, block) * s.values()[r];
  Tape<S>* tape = detail::merge_tapes<S>({&x, &s});
  int node = -1;
  if (tape) {
    const int px = detail::node_on(x, tape), ps = detail::node_on(s, tape);
    if (px >= 0 || ps >= 0) {
      auto dx = x.buffer();
      auto ds = s.buffer();
      node = tape->record(out.size(), [=](Tape<S>& tp, const Buf<S>& g) {
        if (px >= 0) {
          Buf<S> r(g.size());
          for (Index i = 0; i < R; ++i)
            r.segment(i * block, block) = g.segment(i * block, block) * (*ds)[i];
          tp.accum(px, r);
        }
        if (ps >= 0) {
          Buf<S> r(R);
          for (Index i = 0; i < R; ++i)
            r[i] = (g.segment(i * block, block) * dx->segment(i * block, block)).sum();
          tp.accum(ps, r);
        }
      });
    }
  }
  return detail::make_result(x.shape(), std::move(out), tape, node);
}

/// out[i,j,k] = exp(clamped(u[i,j] * v[j,k])) — the zero-order-hold decay
/// factors of a diagonal state-space recurrence.
template <class S>
Tensor<S> exp_outer(const Tensor<S>& u, const Tensor<S>& v) {
  if (u.rank() != 2 || v.rank() != 2 || u.dim(1) != v.dim(0))
    throw ShapeError("exp_outer: want [B,D] and [D,N], got " + shape_str(u.shape()) + " and " +
                     shape_str(v.shape()));
  const Index B = u.dim(0), D = u.dim(1), N = v.dim(1);
  Buf<S> out(B * D * N);
  for (Index b = 0; b < B; ++b)
    for (Index d = 0; d < D; ++d) {
      const S uv = u.values()[b * D + d];
      out.segment((b * D + d) * N, N) =
          (uv * v.values().segment(d * N, N)).min(S(60)).max(S(-60)).exp();
    }
  Tape<S>* tape = detail::merge_tapes<S>({&u, &v});
  int node = -1;
  if (tape) {
    const int pu = detail::node_on(u, tape), pv = detail::node_on(v, tape);
    if (pu >= 0 || pv >= 0) {
      auto du = u.buffer();
      auto dv = v.buffer();
      auto dout = std::make_shared<Buf<S>>(out);
      node = tape->record(out.size(), [=](Tape<S>& tp, const Buf<S>& g) {
        if (pu >= 0) {
          Buf<S> r(B * D);
          for (Index b = 0; b < B; ++b)
            for (Index d = 0; d < D; ++d)
              r[b * D + d] = (g.segment((b * D + d) * N, N) * dout->segment((b * D + d) * N, N) *
                              dv->segment(d * N, N))
                                 .sum();
          tp.accum(pu, r);
        }
        if (pv >= 0) {
          Buf<S> r = Buf<S>::Zero(D * N);
          for (Index b = 0; b < B; ++b)
            for (Index d = 0; d < D; ++d)
              r.segment(d * N, N) += g.segment((b * D + d) * N, N) *
                                     dout->segment((b * D + d) * N, N) * (*du)[b * D + d];
          tp.accum(pv, r);
        }
      });
    }
  }
  return detail::make_result({B, D, N}, std::move(out), tape, node);
}

// ---------------------------------------------------------------------------
// Patch fold/unfold (space <-> channel), exact bijections
// ---------------------------------------------------------------------------

/// [T,C,H,W] -> [T, C*f*f, H/f, W/f]; cell (dy,dx) of each f x f patch goes to
/// channel c*f*f + dy*f + dx.
template <class S>
Tensor<S> space_to_channel(const Tensor<S>& x, Index f) {
  if (x.rank() != 4) throw ShapeError("space_to_channel: want rank-4, got " + shape_str(x.shape()));
  const Index T = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (f < 1 || H % f || W % f)
    throw ShapeError("space_to_channel: spatial " + std::to_string(H) + "x" + std::to_string(W) +
                     " not divisible by factor " + std::to_string(f));
  const Index Ho = H / f, Wo = W / f;
  auto fwd = [=](const Buf<S>& v) {
    Buf<S> out(v.size());
    for (Index t = 0; t < T; ++t)
      for (Index c = 0; c < C; ++c)
        for (Index y = 0; y < Ho; ++y)
          for (Index dy = 0; dy < f; ++dy)
            for (Index xo = 0; xo < Wo; ++xo)
              for (Index dx = 0; dx < f; ++dx)
                out[((t * C * f * f + (c * f * f + dy * f + dx)) * Ho + y) * Wo + xo] =
                    v[((t * C + c) * H + y * f + dy) * W + xo * f + dx];
    return out;
  };
  auto bwd = [=](const Buf<S>& v) {
    Buf<S> out(v.size());
    for (Index t = 0; t < T; ++t)
      for (Index c = 0; c < C; ++c)
        for (Index y = 0; y < Ho; ++y)
          for (Index dy = 0; dy < f; ++dy)
            for (Index xo = 0; xo < Wo; ++xo)
              for (Index dx = 0; dx < f; ++dx)
                out[((t * C + c) * H + y * f + dy) * W + xo * f + dx] =
                    v[((t * C * f * f + (c * f * f + dy * f + dx)) * Ho + y) * Wo + xo];
    return out;
  };
  Buf<S> out = fwd(x.values());
  Tape<S>* tape = detail::merge_tapes<S>({&x});
  int node = -1;
  if (tape) {
    const int px = detail::node_on(x, tape);
    if (px >= 0)
      node = tape->record(out.size(), [px, bwd](Tape<S>& tp, const Buf<S>& g) {
        tp.accum(px, bwd(g));
      });
  }
  return detail::make_result({T, C * f * f, Ho, Wo}, std::move(out), tape, node);
}

/// Inverse of space_to_channel: [T,C,H,W] -> [T, C/(f*f), H*f, W*f].
template <class S>
Tensor<S> channel_to_space(const Tensor<S>& x, Index f) {
  if (x.rank() != 4) throw ShapeError("channel_to_space: want rank-4, got " + shape_str(x.shape()));
  const Index T = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (f < 1 || C % (f * f))
    throw ShapeError("channel_to_space: channels " + std::to_string(C) +
                     " not divisible by factor^2 " + std::to_string(f * f));
  const Index Co = C / (f * f), Ho = H * f, Wo = W * f;
  auto fwd = [=](const Buf<S>& v) {
    Buf<S> out(v.size());
    for (Index t = 0; t < T; ++t)
      for (Index c = 0; c < Co; ++c)
        for (Index y = 0; y < H; ++y)
          for (Index dy = 0; dy < f; ++dy)
            for (Index xo = 0; xo < W; ++xo)
              for (Index dx = 0; dx < f; ++dx)
                out[((t * Co + c) * Ho + y * f + dy) * Wo + xo * f + dx] =
                    v[((t * C + (c * f * f + dy * f + dx)) * H + y) * W + xo];
    return out;
  };
  auto bwd = [=](const Buf<S>& v) {
    Buf<S> out(v.size());
    for (Index t = 0; t < T; ++t)
      for (Index c = 0; c < Co; ++c)
        for (Index y = 0; y < H; ++y)
          for (Index dy = 0; dy < f; ++dy)
            for (Index xo = 0; xo < W; ++xo)
              for (Index dx = 0; dx < f; ++dx)
                out[((t * C + (c * f * f + dy * f + dx)) * H + y) * W + xo] =
                    v[((t * Co + c) * Ho + y * f + dy) * Wo + xo * f + dx];
    return out;
  };
  Buf<S> out = fwd(x.values());
  Tape<S>* tape = detail::merge_tapes<S>({&x});
  int node = -1;
  if (tape) {
    const int px = detail::node_on(x, tape);
    if (px >= 0)
      node = tape->record(out.size(), [px, bwd](Tape<S>& tp, const Buf<S>& g) {
        tp.accum(px, bwd(g));
      });
  }
  return detail::make_result({T, Co, Ho, Wo}, std::move(out), tape, node);
}

}  // namespace meshcast
