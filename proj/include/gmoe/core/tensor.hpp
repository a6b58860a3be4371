#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gmoe/error.hpp"
#include "gmoe/simd/kernels.hpp"

namespace gmoe {

template <typename T>
class Tape;

// Dense row-major tensor. Value-semantic: copies share immutable storage,
// operations allocate fresh outputs. Mutation (fill/data writes) is reserved
// for owners with exclusive access, e.g. the optimizer updating parameters.
template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(count(shape_), T(0))) {}

  static Tensor zeros(std::vector<std::size_t> shape) {
    return Tensor(std::move(shape));
  }

  static Tensor full(std::vector<std::size_t> shape, T v) {
    Tensor t(std::move(shape));
    t.fill(v);
    return t;
  }

  static Tensor ones(std::vector<std::size_t> shape) {
    return full(std::move(shape), T(1));
  }

  static Tensor scalar(T v) { return full({1}, v); }

  static Tensor from(std::vector<std::size_t> shape, std::vector<T> values) {
    if (count(shape) != values.size())
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<T>>(std::move(values));
    return t;
  }

  static Tensor row(std::vector<T> values) {
    const std::size_t n = values.size();
    return from({1, n}, std::move(values));
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_ ? data_->size() : 0; }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  bool empty() const { return !data_; }

  // 2-D helpers; a rank-1 tensor behaves as a single row.
  std::size_t rows() const { return rank() >= 2 ? shape_[0] : 1; }
  std::size_t cols() const {
    if (rank() == 0) return size();
    return shape_[rank() - 1];
  }

  T* data() { return data_->data(); }
  const T* data() const { return data_->data(); }
  std::span<const T> values() const { return {data(), size()}; }

  T& at(std::size_t i) { return (*data_)[i]; }
  T at(std::size_t i) const { return (*data_)[i]; }
  T& at(std::size_t r, std::size_t c) { return (*data_)[r * cols() + c]; }
  T at(std::size_t r, std::size_t c) const { return (*data_)[r * cols() + c]; }

  T item() const {
    if (size() != 1)
      throw ShapeError("item() called on tensor of shape " + shape_str(shape_));
    return (*data_)[0];
  }

  void fill(T v) { std::fill(data_->begin(), data_->end(), v); }

  // Deep copy, detached from any tape.
  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<T>>(*data_);
    return t;
  }

  // Same storage, no tape participation.
  Tensor detached() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
  }

  Tensor reshaped_view(std::vector<std::size_t> shape) const {
    if (count(shape) != size())
      throw ShapeError("cannot view " + shape_str(shape_) + " as " +
                       shape_str(shape));
    Tensor t = detached();
    t.shape_ = std::move(shape);
    return t;
  }

  bool taped() const { return tape_ != nullptr; }
  Tape<T>* tape() const { return tape_; }
  int node() const { return node_; }

  // Storage identity, used to key watched parameters.
  const void* storage_id() const { return data_.get(); }
  bool storage_unique() const { return data_ && data_.use_count() == 1; }

  static std::size_t count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }

 private:
  friend class Tape<T>;

  std::vector<std::size_t> shape_;
  std::shared_ptr<std::vector<T>> data_;
  Tape<T>* tape_ = nullptr;
  int node_ = -1;
};

// Reverse-mode tape. Operations append nodes in execution order, so parents
// always precede children; backward() walks the list once in reverse.
template <typename T>
class Tape {
 public:
  class GradSink;
  using BackwardFn = std::function<void(const Tensor<T>& grad_out, GradSink&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a leaf (no backward rule) and returns a taped view of it.
  Tensor<T> watch(const Tensor<T>& param) {
    auto [it, inserted] = watched_.try_emplace(param.storage_id(), -1);
    if (inserted) {
      it->second = static_cast<int>(nodes_.size());
      nodes_.push_back(Node{{}, nullptr});
    }
    Tensor<T> view = param.detached();
    view.tape_ = this;
    view.node_ = it->second;
    return view;
  }

  int node_of(const Tensor<T>& t) const {
    if (t.tape_ == this) return t.node_;
    auto it = watched_.find(t.storage_id());
    return it == watched_.end() ? -1 : it->second;
  }

  int record(std::vector<int> parents, BackwardFn fn) {
    nodes_.push_back(Node{std::move(parents), std::move(fn)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  void mark(Tensor<T>& out, int node) {
    out.tape_ = this;
    out.node_ = node;
  }

  std::size_t num_nodes() const { return nodes_.size(); }

  class GradSink {
   public:
    explicit GradSink(std::vector<Tensor<T>>& slots) : slots_(slots) {}

    void add(int node, const Tensor<T>& delta) {
      if (node < 0) return;
      Tensor<T>& dst = slots_[static_cast<std::size_t>(node)];
      if (dst.empty()) {
        dst = delta;  // shared; copied on first accumulation below
        return;
      }
      if (!dst.storage_unique()) dst = dst.clone();
      simd::kernels<T>().axpy(T(1), delta.data(), dst.data(), dst.size());
    }

   private:
    std::vector<Tensor<T>>& slots_;
  };

  class Gradients {
   public:
    Gradients(const Tape* tape, std::vector<Tensor<T>> slots)
        : tape_(tape), slots_(std::move(slots)) {}

    // Gradient of the loss w.r.t. t; exact zeros if t never influenced it.
    Tensor<T> of(const Tensor<T>& t) const {
      const int node = tape_->node_of(t);
      if (node < 0)
        throw ShapeError("gradient requested for a tensor not on this tape");
      const auto& g = slots_[static_cast<std::size_t>(node)];
      if (g.empty()) return Tensor<T>::zeros(t.shape());
      return g;
    }

   private:
    const Tape* tape_;
    std::vector<Tensor<T>> slots_;
  };

  Gradients backward(const Tensor<T>& loss) {
    if (loss.tape_ != this || loss.node_ < 0)
      throw ShapeError("backward() needs a loss recorded on this tape");
    if (loss.size() != 1)
      throw ShapeError("backward() needs a scalar loss, got shape " +
                       shape_str(loss.shape()));
    std::vector<Tensor<T>> slots(nodes_.size());
    slots[static_cast<std::size_t>(loss.node_)] = Tensor<T>::ones(loss.shape());
    GradSink sink(slots);
    for (int i = loss.node_; i >= 0; --i) {
      const Node& node = nodes_[static_cast<std::size_t>(i)];
      if (!node.backward) continue;
      const Tensor<T>& g = slots[static_cast<std::size_t>(i)];
      if (g.empty()) continue;
      node.backward(g, sink);
    }
    return Gradients(this, std::move(slots));
  }

 private:
  struct Node {
    std::vector<int> parents;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const void*, int> watched_;
};

// tape may be null (pure evaluation); then params pass through untaped.
template <typename T>
inline Tensor<T> use_param(Tape<T>* tape, const Tensor<T>& param) {
  return tape ? tape->watch(param) : param;
}

}  // namespace gmoe
