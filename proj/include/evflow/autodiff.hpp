#pragma once

// Define-by-run reverse-mode differentiation over dense row-major tensors.
//
// A Tape records every op applied through it. Tensors that are not produced
// by a tape op are leaves; backward() returns gradients for the leaves that
// require them. Tapes are confined to one thread; leaves (parameters) may be
// shared read-only across tapes running in parallel.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace evflow::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct NotScalar : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct InvalidBits : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

template <class T>
struct Node {
  std::uint64_t id = 0;
  Shape shape;
  std::vector<T> value;
  bool requires_grad = false;
  // Set when the node was produced by a recorded op.
  const void* tape = nullptr;
  std::size_t tape_index = 0;
};

template <class T>
class Tape;

template <class T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }
  std::uint64_t id() const { return node_->id; }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const T> values() const { return node_->value; }
  // In-place access for leaves (optimizer updates, test fixtures).
  std::span<T> mutable_values() { return node_->value; }
  T operator[](std::size_t i) const { return node_->value[i]; }
  T item() const;

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}
  std::shared_ptr<Node<T>> node_;

  friend class Tape<T>;
  template <class U>
  friend Tensor<U> detach(const Tensor<U>& x);
};

// Severs gradient flow: same values, new leaf that never requires grad.
template <class T>
Tensor<T> detach(const Tensor<T>& x);

template <class T>
class Gradients {
 public:
  bool contains(const Tensor<T>& t) const { return grads_.count(t.id()) != 0; }
  // nullptr when the tensor received no gradient.
  const std::vector<T>* find(const Tensor<T>& t) const;
  std::span<const T> of(const Tensor<T>& t) const;
  std::size_t size() const { return grads_.size(); }

 private:
  std::unordered_map<std::uint64_t, std::vector<T>> grads_;
  template <class U>
  friend class Tape;
};

template <class T>
class Tape {
 public:
  // grad(i) is the accumulator for input i, nullptr when that input does not
  // require a gradient.
  struct BackwardContext {
    std::span<const T> grad_out;
    std::span<const T> out;
    const std::vector<std::shared_ptr<Node<T>>>& inputs;
    std::span<std::vector<T>* const> grad_in;

    std::span<const T> in(std::size_t i) const { return inputs[i]->value; }
    std::vector<T>* grad(std::size_t i) const { return grad_in[i]; }
  };
  using BackwardFn = std::function<void(const BackwardContext&)>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Inference tape: ops compute values but nothing is retained.
  static Tape inference() { return Tape(false); }

  bool recording() const { return recording_; }
  std::size_t size() const { return records_.size(); }

  // Extension point for ops defined outside this module.
  Tensor<T> record(std::string_view op, std::vector<Tensor<T>> inputs, Shape shape,
                   std::vector<T> value, BackwardFn backward);

  Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
  Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
  Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
  Tensor<T> scale(const Tensor<T>& a, T factor);
  Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

  // x: [N, Cin, H, W], w: [Cout, Cin, kh, kw], bias: [Cout] or undefined.
  Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                   std::size_t stride, std::size_t pad);
  // x: [N, Cin, H, W], w: [Cin, Cout, kh, kw]; adjoint of conv2d with the same
  // geometry. Output is (H - 1) * stride - 2 * pad + kh + output_pad.
  Tensor<T> conv2d_transpose(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                             std::size_t stride, std::size_t pad, std::size_t output_pad = 0);

  Tensor<T> sigmoid(const Tensor<T>& x);
  Tensor<T> tanh(const Tensor<T>& x);
  Tensor<T> clip(const Tensor<T>& x, T lo, T hi);
  Tensor<T> sum(const Tensor<T>& x);
  Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end);
  Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis);
  // Nearest-neighbour 2x upsampling of the last two axes.
  Tensor<T> upsample2x(const Tensor<T>& x);

  // Uniform quantization of clip(v, 0, 1) to 2^bits levels on [0, 1).
  // Backward is the clipped straight-through estimator.
  Tensor<T> ste_quantize(const Tensor<T>& v, int bits);

  Gradients<T> backward(const Tensor<T>& loss) const;

  // Text graph, one line per recorded op.
  std::string dump() const;

 private:
  struct Record {
    std::string op;
    std::vector<std::shared_ptr<Node<T>>> inputs;
    std::shared_ptr<Node<T>> output;
    BackwardFn backward;
  };

  bool recording_;
  std::vector<Record> records_;
};

template <class T>
Gradients<T> backward(const Tape<T>& tape, const Tensor<T>& loss) {
  return tape.backward(loss);
}

// Forward value of the quantizer, shared by the tape op and op-count oracles.
template <class T>
T quantize_value(T v, int bits);

void check_bits(int bits);

}  // namespace evflow::ad
