#pragma once

#include <Eigen/Core>
#include <functional>
#include <memory>
#include <utility>

#include "meshcast/core.hpp"

namespace meshcast {

template <class S>
class Tape;

/// Dense n-dimensional tensor. Row-major contiguous storage in an Eigen
/// array, shared between copies; a copy is a cheap view of the same buffer.
/// Tensors are immutable once created except for the optimizer's in-place
/// parameter update between steps (through `values()`).
template <class S>
class Tensor {
 public:
  using Scalar = S;
  using Buffer = Eigen::Array<S, Eigen::Dynamic, 1>;

  Tensor() = default;

  Tensor(Shape shape, Buffer data)
      : shape_(std::move(shape)), data_(std::make_shared<Buffer>(std::move(data))) {
    if (data_->size() != numel(shape_))
      throw ShapeError("tensor: buffer of " + std::to_string(data_->size()) +
                       " elements does not fill shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) {
    Buffer b = Buffer::Zero(numel(shape));
    return Tensor(std::move(shape), std::move(b));
  }

  static Tensor full(Shape shape, S value) {
    Buffer b = Buffer::Constant(numel(shape), value);
    return Tensor(std::move(shape), std::move(b));
  }

  static Tensor ones(Shape shape) { return full(std::move(shape), S(1)); }

  static Tensor from(Shape shape, const std::vector<S>& values) {
    Buffer b(static_cast<Index>(values.size()));
    for (Index i = 0; i < b.size(); ++i) b[i] = values[static_cast<std::size_t>(i)];
    return Tensor(std::move(shape), std::move(b));
  }

  static Tensor uniform(Shape shape, S lo, S hi, Rng& rng) {
    Buffer b(numel(shape));
    for (Index i = 0; i < b.size(); ++i) b[i] = static_cast<S>(rng.uniform(lo, hi));
    return Tensor(std::move(shape), std::move(b));
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_[static_cast<std::size_t>(i)]; }
  Index size() const { return data_ ? data_->size() : 0; }
  bool defined() const { return static_cast<bool>(data_); }

  const Buffer& values() const { return *data_; }
  Buffer& values() { return *data_; }
  const std::shared_ptr<Buffer>& buffer() const { return data_; }

  S item() const {
    if (size() != 1) throw ShapeError("item: tensor has " + std::to_string(size()) + " elements");
    return (*data_)[0];
  }

  /// Element access by multi-index (row-major), for tests and oracles.
  S at(const Shape& idx) const {
    if (static_cast<Index>(idx.size()) != rank()) throw ShapeError("at: rank mismatch");
    Index flat = 0;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (idx[k] < 0 || idx[k] >= shape_[k]) throw ShapeError("at: index out of range");
      flat = flat * shape_[k] + idx[k];
    }
    return (*data_)[flat];
  }

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool v) {
    requires_grad_ = v;
    return *this;
  }

  Tape<S>* tape() const { return tape_; }
  int node() const { return node_; }
  bool on_tape() const { return tape_ != nullptr && node_ >= 0; }

  void bind(Tape<S>* tape, int node) {
    tape_ = tape;
    node_ = node;
  }
  void detach() {
    tape_ = nullptr;
    node_ = -1;
  }

 private:
  Shape shape_;
  std::shared_ptr<Buffer> data_;
  bool requires_grad_ = false;
  Tape<S>* tape_ = nullptr;
  int node_ = -1;
};

/// Reverse-mode tape. Nodes are appended in execution order, so ids are a
/// topological order; backward walks ids from the loss down and visits each
/// node exactly once. One tape per training step; reuse without reset() is
/// an error.
template <class S>
class Tape {
 public:
  using Buffer = typename Tensor<S>::Buffer;
  using BackFn = std::function<void(Tape&, const Buffer&)>;

  /// Register a gradient leaf. The tensor must require grad; its gradient is
  /// retained after backward and read with grad().
  void watch(Tensor<S>& t) {
    if (!t.requires_grad()) throw ShapeError("watch: tensor does not require grad");
    if (t.tape() == this && t.node() >= 0) return;
    nodes_.push_back(NodeRec{nullptr, t.size(), true});
    t.bind(this, static_cast<int>(nodes_.size()) - 1);
  }

  /// Record an interior node. `back` receives this node's output gradient.
  int record(Index out_numel, BackFn back) {
    nodes_.push_back(NodeRec{std::move(back), out_numel, false});
    return static_cast<int>(nodes_.size()) - 1;
  }

  /// Accumulate into a parent node's gradient (called from back closures).
  template <class E>
  void accum(int node, const Eigen::ArrayBase<E>& g) {
    Buffer& slot = grads_[static_cast<std::size_t>(node)];
    if (slot.size() == 0)
      slot = g;
    else
      slot += g;
  }

  /// Propagate d(loss)/d(node) to every watched leaf. Loss must be a scalar
  /// recorded on this tape.
  void backward(const Tensor<S>& loss) {
    if (loss.size() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (loss.tape() != this || loss.node() < 0)
      throw ShapeError("backward: loss is detached from this tape");
    if (consumed_) throw ShapeError("backward: tape already consumed; reset() first");
    consumed_ = true;
    grads_.assign(nodes_.size(), Buffer());
    grads_[static_cast<std::size_t>(loss.node())] = Buffer::Constant(1, S(1));
    for (int id = loss.node(); id >= 0; --id) {
      auto& slot = grads_[static_cast<std::size_t>(id)];
      if (slot.size() == 0) continue;
      const NodeRec& n = nodes_[static_cast<std::size_t>(id)];
      if (n.back) {
        n.back(*this, slot);
        slot.resize(0);  // interior grads are complete once visited
      }
    }
  }

  bool has_grad(const Tensor<S>& t) const {
    return t.tape() == this && t.node() >= 0 &&
           grads_.size() > static_cast<std::size_t>(t.node()) &&
           grads_[static_cast<std::size_t>(t.node())].size() > 0;
  }

  const Buffer& grad(const Tensor<S>& t) const {
    if (t.tape() != this || t.node() < 0) throw ShapeError("grad: tensor is not watched on this tape");
    const Buffer& g = grads_[static_cast<std::size_t>(t.node())];
    if (g.size() == 0 && nodes_[static_cast<std::size_t>(t.node())].numel > 0)
      zero_ = Buffer::Zero(nodes_[static_cast<std::size_t>(t.node())].numel);
    return g.size() ? g : zero_;
  }

  std::size_t node_count() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  void reset() {
    nodes_.clear();
    grads_.clear();
    consumed_ = false;
  }

 private:
  struct NodeRec {
    BackFn back;  // null for leaves
    Index numel;
    bool leaf;
  };
  std::vector<NodeRec> nodes_;
  std::vector<Buffer> grads_;
  mutable Buffer zero_;
  bool consumed_ = false;
};

namespace detail {

/// The tape an op's result lives on: the unique tape among inputs (or null).
template <class S>
Tape<S>* merge_tapes(std::initializer_list<const Tensor<S>*> xs) {
  Tape<S>* tape = nullptr;
  for (const Tensor<S>* x : xs) {
    if (x->tape() == nullptr) continue;
    if (tape == nullptr)
      tape = x->tape();
    else if (tape != x->tape())
      throw ShapeError("op: inputs recorded on different tapes");
  }
  return tape;
}

template <class S>
int node_on(const Tensor<S>& t, Tape<S>* tape) {
  return (tape != nullptr && t.tape() == tape) ? t.node() : -1;
}

}  // namespace detail

}  // namespace meshcast
