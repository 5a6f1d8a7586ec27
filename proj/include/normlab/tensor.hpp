// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <bit>
#include <optional>
#include <type_traits>
#include <chrono>
#include <map>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "normlab/core.hpp"

namespace normlab {

namespace detail {

// Tensor buffers start on Eigen's packet boundary, so vectorized reductions
// peel the same way on every allocation and results do not depend on where
// the allocator placed a buffer.
template <class Real>
using Buffer = std::vector<Real, Eigen::aligned_allocator<Real>>;

// Per-thread recycling of value/grad buffers. Training allocates the same
// sizes every step; reusing them avoids repeated page faults on fresh memory.
template <class Real>
class BufferPool {
 public:
  static BufferPool& local() {
    thread_local BufferPool pool;
    return pool;
  }

  // A recycled buffer keeps its old contents unless `fill` is given.
  Buffer<Real> take(std::size_t n, std::optional<Real> fill) {
    auto it = free_.find(n);
    if (it != free_.end() && !it->second.empty()) {
      Buffer<Real> v = std::move(it->second.back());
      it->second.pop_back();
      held_ -= n;
      if (fill) std::fill(v.begin(), v.end(), *fill);
      return v;
    }
    return Buffer<Real>(n, fill.value_or(Real(0)));
  }

  void give(Buffer<Real>&& v) {
    const std::size_t n = v.size();
    if (n < kMinPooled || v.capacity() != n || held_ + n > kMaxHeld) return;
    held_ += n;
    free_[n].push_back(std::move(v));
  }

 private:
  static constexpr std::size_t kMinPooled = 1024;
  static constexpr std::size_t kMaxHeld = std::size_t{64} << 20;  // elements
  std::unordered_map<std::size_t, std::vector<Buffer<Real>>> free_;
  std::size_t held_ = 0;
};

}  // namespace detail

// Dense row-major array with an optional gradient buffer. Copies are shallow:
// two Tensor handles may refer to the same storage, which is how parameters
// are shared between a model's structured view and its flat parameter list.
template <class Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;

  explicit Tensor(Shape shape, Real fill = Real(0), bool requires_grad = false)
      : d_(std::make_shared<Storage>()) {
    d_->shape = std::move(shape);
    d_->values = detail::BufferPool<Real>::local().take(numel(d_->shape), fill);
    d_->requires_grad = requires_grad;
  }

  // Storage whose contents are unspecified; for op outputs that are fully
  // overwritten.
  static Tensor empty(Shape shape) {
    Tensor t;
    t.d_ = std::make_shared<Storage>();
    t.d_->shape = std::move(shape);
    t.d_->values = detail::BufferPool<Real>::local().take(numel(t.d_->shape), std::nullopt);
    return t;
  }

  static Tensor from(Shape shape, std::vector<Real> values, bool requires_grad = false) {
    if (numel(shape) != values.size()) {
      throw ShapeError("tensor value count " + std::to_string(values.size()) +
                       " does not match shape " + to_string(shape));
    }
    Tensor t;
    t.d_ = std::make_shared<Storage>();
    t.d_->shape = std::move(shape);
    t.d_->values.assign(values.begin(), values.end());
    t.d_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(Real v, bool requires_grad = false) {
    return from(Shape{1}, {v}, requires_grad);
  }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  std::size_t rank() const { return d_->shape.size(); }
  std::size_t dim(std::size_t i) const { return d_->shape.at(i); }
  std::size_t size() const { return d_->values.size(); }

  std::span<Real> values() { return d_->values; }
  std::span<const Real> values() const { return d_->values; }
  Real* data() { return d_->values.data(); }
  const Real* data() const { return d_->values.data(); }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool v) { d_->requires_grad = v; }

  bool has_grad() const { return !d_->grad.empty(); }

  // Allocates a zero gradient on first access. The buffer belongs to the
  // shared storage, so a const handle can still accumulate into it.
  std::span<Real> grad() const {
    if (d_->grad.empty()) d_->grad = detail::BufferPool<Real>::local().take(d_->values.size(), Real(0));
    return d_->grad;
  }

  void zero_grad() {
    if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), Real(0));
  }
  void drop_grad() { d_->grad.clear(); }

  Real item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor " + to_string(shape()));
    return d_->values[0];
  }

  // Deep copy of values only; the copy is a fresh leaf.
  Tensor clone(bool requires_grad = false) const {
    return from(shape(), std::vector<Real>(d_->values.begin(), d_->values.end()), requires_grad);
  }

  bool same_storage(const Tensor& o) const { return d_ == o.d_; }

 private:
  struct Storage {
    Shape shape;
    detail::Buffer<Real> values;
    detail::Buffer<Real> grad;
    bool requires_grad = false;

    ~Storage() {
      auto& pool = detail::BufferPool<Real>::local();
      pool.give(std::move(values));
      pool.give(std::move(grad));
    }
  };
  std::shared_ptr<Storage> d_;
};

// Branch-free scan on the exponent bits so the loop vectorizes.
template <class Real>
bool all_finite(std::span<const Real> v) {
  using Bits = std::conditional_t<sizeof(Real) == 4, std::uint32_t, std::uint64_t>;
  constexpr Bits exp_mask = sizeof(Real) == 4 ? Bits(0x7f800000u) : Bits(0x7ff0000000000000ull);
  bool bad = false;
  for (Real x : v) bad |= (std::bit_cast<Bits>(x) & exp_mask) == exp_mask;
  return !bad;
}

// Reverse-mode tape. Each op appends one entry whose backward closure reads
// the output gradient and accumulates into input gradients. Entries are
// appended in execution order, so the list is topologically sorted.
template <class Real>
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return entries_.size(); }

  // Forward outputs are checked for NaN/Inf unless disabled.
  bool check_finite = true;

  bool wants_grad(std::initializer_list<const Tensor<Real>*> inputs) const {
    if (!recording_) return false;
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor<Real>* t) { return t->defined() && t->requires_grad(); });
  }

  // Called by every op after computing `out`. `needs_grad` must come from
  // wants_grad() on the op's inputs.
  // Opt-in wall-clock accounting per op name. Forward time is measured from
  // the previous record() call, so it includes any glue between ops.
  struct OpTime {
    double forward = 0, backward = 0;
    std::size_t calls = 0;
  };
  std::map<std::string, OpTime>* profile = nullptr;

  template <class Backward>
  Tensor<Real> record(std::string_view op, Tensor<Real> out, bool needs_grad, Backward&& bw) {
    if (profile) {
      const auto now = std::chrono::steady_clock::now();
      auto& e = (*profile)[std::string(op)];
      e.forward += std::chrono::duration<double>(now - last_).count();
      ++e.calls;
      last_ = now;
    }
    if (check_finite && !all_finite<Real>(out.values()))
      throw NonFiniteError("non-finite value produced by op '" + std::string(op) + "'");
    if (needs_grad) {
      out.set_requires_grad(true);
      entries_.push_back(Entry{std::string(op), out, std::function<void()>(std::forward<Backward>(bw))});
    }
    return out;
  }

  // Seeds d(loss)/d(loss) = 1 and runs every recorded entry once, newest first.
  void backward(Tensor<Real> loss) {
    if (loss.size() != 1) throw ShapeError("backward() needs a scalar loss, got " + to_string(loss.shape()));
    if (done_) throw Error("backward() already ran on this tape");
    done_ = true;
    if (!loss.requires_grad()) return;
    loss.grad()[0] += Real(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (!it->output.has_grad()) continue;
      if (!profile) {
        it->backward();
        continue;
      }
      const auto t0 = std::chrono::steady_clock::now();
      it->backward();
      (*profile)[it->op].backward += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
  }

  std::vector<std::string> op_names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.op);
    return out;
  }

 private:
  struct Entry {
    std::string op;
    Tensor<Real> output;
    std::function<void()> backward;
  };
  bool recording_;
  bool done_ = false;
  std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
  std::vector<Entry> entries_;
};

}  // namespace normlab
