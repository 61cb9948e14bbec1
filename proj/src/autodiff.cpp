#include "evflow/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

#include "evflow/detail/gemm.hpp"

namespace evflow::ad {

namespace {

std::atomic<std::uint64_t> next_node_id{1};

template <class T>
std::shared_ptr<Node<T>> make_node(Shape shape, std::vector<T> value, bool requires_grad) {
  auto node = std::make_shared<Node<T>>();
  node->id = next_node_id.fetch_add(1, std::memory_order_relaxed);
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return node;
}

void require_same_shape(std::string_view op, const Shape& a, const Shape& b) {
  if (a != b)
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

void require_rank(std::string_view op, const Shape& s, std::size_t rank) {
  if (s.size() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     to_string(s));
}

template <class T>
void accumulate(std::vector<T>* dst, std::span<const T> src) {
  if (!dst) return;
  for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += src[i];
}

template <class T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

void check_bits(int bits) {
  if (bits < 1 || bits > 8)
    throw InvalidBits("quantizer bits must be in [1, 8], got " + std::to_string(bits));
}

template <class T>
T quantize_value(T v, int bits) {
  const T levels = static_cast<T>(1u << bits);
  const T c = std::clamp(v, T(0), T(1));
  const T q = std::floor(c * levels) / levels;
  return std::min(q, T(1) - T(1) / levels);
}

// --- Tensor -----------------------------------------------------------------

template <class T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  const auto n = ad::numel(shape);
  return Tensor(make_node<T>(std::move(shape), std::vector<T>(n, T(0)), requires_grad));
}

template <class T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = ad::numel(shape);
  return Tensor(make_node<T>(std::move(shape), std::vector<T>(n, value), requires_grad));
}

template <class T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  if (ad::numel(shape) != values.size())
    throw ShapeError("tensor: shape " + to_string(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  return Tensor(make_node<T>(std::move(shape), std::move(values), requires_grad));
}

template <class T>
T Tensor<T>::item() const {
  if (numel() != 1) throw NotScalar("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

template <class T>
Tensor<T> detach(const Tensor<T>& x) {
  if (!x.requires_grad() && x.node()->tape == nullptr) return x;
  return Tensor<T>(make_node<T>(x.shape(), x.node()->value, false));
}

template <class T>
const std::vector<T>* Gradients<T>::find(const Tensor<T>& t) const {
  auto it = grads_.find(t.id());
  return it == grads_.end() ? nullptr : &it->second;
}

template <class T>
std::span<const T> Gradients<T>::of(const Tensor<T>& t) const {
  const auto* g = find(t);
  if (!g) throw std::out_of_range("no gradient recorded for tensor " + std::to_string(t.id()));
  return *g;
}

// --- Tape -------------------------------------------------------------------

template <class T>
Tensor<T> Tape<T>::record(std::string_view op, std::vector<Tensor<T>> inputs, Shape shape,
                          std::vector<T> value, BackwardFn backward) {
  bool requires_grad = false;
  for (const auto& in : inputs) {
    if (!in.defined()) throw std::invalid_argument(std::string(op) + ": undefined input");
    requires_grad = requires_grad || in.requires_grad();
  }
  if (ad::numel(shape) != value.size())
    throw ShapeError(std::string(op) + ": output shape " + to_string(shape) + " does not hold " +
                     std::to_string(value.size()) + " values");
#ifndef NDEBUG
  for (const T v : value)
    if (!std::isfinite(v)) throw std::domain_error(std::string(op) + ": non-finite output");
#endif
  auto node = make_node<T>(std::move(shape), std::move(value), requires_grad);
  if (recording_ && requires_grad) {
    node->tape = this;
    node->tape_index = records_.size();
    Record rec{std::string(op), {}, node, std::move(backward)};
    rec.inputs.reserve(inputs.size());
    for (auto& in : inputs) rec.inputs.push_back(in.node());
    records_.push_back(std::move(rec));
  }
  return Tensor<T>(std::move(node));
}

template <class T>
Gradients<T> Tape<T>::backward(const Tensor<T>& loss) const {
  if (loss.numel() != 1) throw NotScalar("backward: loss has shape " + to_string(loss.shape()));
  Gradients<T> out;
  if (!loss.requires_grad()) return out;

  std::vector<std::vector<T>> inner(records_.size());
  auto accumulator = [&](const std::shared_ptr<Node<T>>& n) -> std::vector<T>* {
    if (!n->requires_grad) return nullptr;
    std::vector<T>& g = n->tape == this ? inner[n->tape_index] : out.grads_[n->id];
    if (g.size() != n->value.size()) g.assign(n->value.size(), T(0));
    return &g;
  };

  (*accumulator(loss.node()))[0] += T(1);
  std::vector<std::vector<T>*> slots;
  for (std::size_t i = records_.size(); i-- > 0;) {
    const Record& rec = records_[i];
    std::vector<T>& g = inner[i];
    if (g.empty()) continue;  // not on any path to the loss
    slots.clear();
    for (const auto& in : rec.inputs) slots.push_back(accumulator(in));
    rec.backward(BackwardContext{g, rec.output->value, rec.inputs, slots});
    std::vector<T>().swap(g);
  }
  return out;
}

template <class T>
std::string Tape<T>::dump() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < records_.size(); ++i) {
    const auto& r = records_[i];
    os << '#' << i << ' ' << r.op << '(';
    for (std::size_t j = 0; j < r.inputs.size(); ++j) {
      if (j) os << ", ";
      os << '%' << r.inputs[j]->id << to_string(r.inputs[j]->shape);
    }
    os << ") -> %" << r.output->id << to_string(r.output->shape) << '\n';
  }
  return os.str();
}

template <class T>
Tensor<T> Tape<T>::add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return record("add", {a, b}, a.shape(), std::move(out), [](const BackwardContext& ctx) {
    accumulate(ctx.grad(0), ctx.grad_out);
    accumulate(ctx.grad(1), ctx.grad_out);
  });
}

template <class T>
Tensor<T> Tape<T>::sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return record("sub", {a, b}, a.shape(), std::move(out), [](const BackwardContext& ctx) {
    accumulate(ctx.grad(0), ctx.grad_out);
    if (auto* gb = ctx.grad(1))
      for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] -= ctx.grad_out[i];
  });
}

template <class T>
Tensor<T> Tape<T>::mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return record("mul", {a, b}, a.shape(), std::move(out), [](const BackwardContext& ctx) {
    const auto av = ctx.in(0), bv = ctx.in(1);
    if (auto* ga = ctx.grad(0))
      for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += ctx.grad_out[i] * bv[i];
    if (auto* gb = ctx.grad(1))
      for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] += ctx.grad_out[i] * av[i];
  });
}

template <class T>
Tensor<T> Tape<T>::scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return record("scale", {a}, a.shape(), std::move(out), [factor](const BackwardContext& ctx) {
    if (auto* ga = ctx.grad(0))
      for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += ctx.grad_out[i] * factor;
  });
}

template <class T>
Tensor<T> Tape<T>::matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank("matmul", a.shape(), 2);
  require_rank("matmul", b.shape(), 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul: inner dimensions differ " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  std::vector<T> out(m * n, T(0));
  detail::gemm_nn(m, n, k, a.values().data(), b.values().data(), out.data());
  return record("matmul", {a, b}, {m, n}, std::move(out), [m, n, k](const BackwardContext& ctx) {
    if (auto* ga = ctx.grad(0))  // dA = dC * B^T
      detail::gemm_nt(m, k, n, ctx.grad_out.data(), ctx.in(1).data(), ga->data());
    if (auto* gb = ctx.grad(1))  // dB = A^T * dC
      detail::gemm_tn(k, n, m, ctx.in(0).data(), ctx.grad_out.data(), gb->data());
  });
}

template <class T>
Tensor<T> Tape<T>::conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                          std::size_t stride, std::size_t pad) {
  require_rank("conv2d", x.shape(), 4);
  require_rank("conv2d", w.shape(), 4);
  const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != cin)
    throw ShapeError("conv2d: input " + to_string(x.shape()) + " incompatible with kernel " +
                     to_string(w.shape()));
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (h + 2 * pad < kh || wd + 2 * pad < kw)
    throw ShapeError("conv2d: kernel " + to_string(w.shape()) + " larger than padded input " +
                     to_string(x.shape()));
  if (bias.defined() && bias.shape() != Shape{cout})
    throw ShapeError("conv2d: bias " + to_string(bias.shape()) + " vs kernel " +
                     to_string(w.shape()));

  detail::ConvGeometry g{cin, h, wd, kh, kw, stride, pad, (h + 2 * pad - kh) / stride + 1,
                         (wd + 2 * pad - kw) / stride + 1};
  const std::size_t rows = g.rows(), cols = g.cols();
  auto unfolded = std::make_shared<std::vector<T>>(batch * rows * cols);
  std::vector<T> out(batch * cout * cols, T(0));
  for (std::size_t n = 0; n < batch; ++n) {
    T* un = unfolded->data() + n * rows * cols;
    detail::im2col(x.values().data() + n * cin * h * wd, g, un);
    T* on = out.data() + n * cout * cols;
    if (bias.defined())
      for (std::size_t c = 0; c < cout; ++c) std::fill_n(on + c * cols, cols, bias[c]);
    detail::gemm_nn(cout, cols, rows, w.values().data(), un, on);
  }

  std::vector<Tensor<T>> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  return record(
      "conv2d", std::move(inputs), {batch, cout, g.out_h, g.out_w}, std::move(out),
      [g, batch, cout, unfolded, has_bias](const BackwardContext& ctx) {
        const std::size_t rows = g.rows(), cols = g.cols(), in_size = g.channels * g.height * g.width;
        std::vector<T> gcols;
        for (std::size_t n = 0; n < batch; ++n) {
          const T* go = ctx.grad_out.data() + n * cout * cols;
          if (auto* gw = ctx.grad(1))
            detail::gemm_nt(cout, rows, cols, go, unfolded->data() + n * rows * cols, gw->data());
          if (auto* gx = ctx.grad(0)) {
            gcols.assign(rows * cols, T(0));
            detail::gemm_tn(rows, cols, cout, ctx.in(1).data(), go, gcols.data());
            detail::col2im(gcols.data(), g, gx->data() + n * in_size);
          }
          if (has_bias)
            if (auto* gb = ctx.grad(2))
              for (std::size_t c = 0; c < cout; ++c) {
                T s = 0;
                for (std::size_t p = 0; p < cols; ++p) s += go[c * cols + p];
                (*gb)[c] += s;
              }
        }
      });
}

template <class T>
Tensor<T> Tape<T>::conv2d_transpose(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                                    std::size_t stride, std::size_t pad, std::size_t output_pad) {
  require_rank("conv2d_transpose", x.shape(), 4);
  require_rank("conv2d_transpose", w.shape(), 4);
  const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(0) != cin)
    throw ShapeError("conv2d_transpose: input " + to_string(x.shape()) +
                     " incompatible with kernel " + to_string(w.shape()));
  if (stride == 0 || output_pad >= stride)
    throw ShapeError("conv2d_transpose: need stride > output_pad");
  const long oh = static_cast<long>((h - 1) * stride + kh + output_pad) - 2 * static_cast<long>(pad);
  const long ow = static_cast<long>((wd - 1) * stride + kw + output_pad) - 2 * static_cast<long>(pad);
  if (oh <= 0 || ow <= 0)
    throw ShapeError("conv2d_transpose: empty output for input " + to_string(x.shape()));
  if (bias.defined() && bias.shape() != Shape{cout})
    throw ShapeError("conv2d_transpose: bias " + to_string(bias.shape()) + " vs kernel " +
                     to_string(w.shape()));

  // Geometry of the forward convolution this op is the adjoint of.
  detail::ConvGeometry g{cout, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow), kh, kw,
                         stride, pad, h, wd};
  const std::size_t rows = g.rows(), cols = g.cols(), out_size = cout * g.height * g.width;
  std::vector<T> out(batch * out_size, T(0));
  std::vector<T> buf(rows * cols);
  for (std::size_t n = 0; n < batch; ++n) {
    std::fill(buf.begin(), buf.end(), T(0));
    detail::gemm_tn(rows, cols, cin, w.values().data(), x.values().data() + n * cin * cols, buf.data());
    T* on = out.data() + n * out_size;
    detail::col2im(buf.data(), g, on);
    if (bias.defined())
      for (std::size_t c = 0; c < cout; ++c)
        for (std::size_t p = 0; p < g.height * g.width; ++p) on[c * g.height * g.width + p] += bias[c];
  }

  std::vector<Tensor<T>> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  return record(
      "conv2d_transpose", std::move(inputs), {batch, cout, g.height, g.width}, std::move(out),
      [g, batch, cin, has_bias](const BackwardContext& ctx) {
        const std::size_t rows = g.rows(), cols = g.cols(), out_size = g.channels * g.height * g.width;
        const std::size_t plane = g.height * g.width;
        std::vector<T> gcols(rows * cols);
        for (std::size_t n = 0; n < batch; ++n) {
          const T* go = ctx.grad_out.data() + n * out_size;
          detail::im2col(go, g, gcols.data());
          if (auto* gx = ctx.grad(0))
            detail::gemm_nn(cin, cols, rows, ctx.in(1).data(), gcols.data(), gx->data() + n * cin * cols);
          if (auto* gw = ctx.grad(1))
            detail::gemm_nt(cin, rows, cols, ctx.in(0).data() + n * cin * cols, gcols.data(), gw->data());
          if (has_bias)
            if (auto* gb = ctx.grad(2))
              for (std::size_t c = 0; c < g.channels; ++c) {
                T s = 0;
                for (std::size_t p = 0; p < plane; ++p) s += go[c * plane + p];
                (*gb)[c] += s;
              }
        }
      });
}

template <class T>
Tensor<T> Tape<T>::sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(x[i]);
  return record("sigmoid", {x}, x.shape(), std::move(out), [](const BackwardContext& ctx) {
    if (auto* gx = ctx.grad(0))
      for (std::size_t i = 0; i < gx->size(); ++i) {
        const T y = ctx.out[i];
        (*gx)[i] += ctx.grad_out[i] * y * (T(1) - y);
      }
  });
}

template <class T>
Tensor<T> Tape<T>::tanh(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x[i]);
  return record("tanh", {x}, x.shape(), std::move(out), [](const BackwardContext& ctx) {
    if (auto* gx = ctx.grad(0))
      for (std::size_t i = 0; i < gx->size(); ++i) {
        const T y = ctx.out[i];
        (*gx)[i] += ctx.grad_out[i] * (T(1) - y * y);
      }
  });
}

template <class T>
Tensor<T> Tape<T>::clip(const Tensor<T>& x, T lo, T hi) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(x[i], lo, hi);
  return record("clip", {x}, x.shape(), std::move(out), [lo, hi](const BackwardContext& ctx) {
    if (auto* gx = ctx.grad(0)) {
      const auto xv = ctx.in(0);
      for (std::size_t i = 0; i < gx->size(); ++i)
        if (xv[i] >= lo && xv[i] <= hi) (*gx)[i] += ctx.grad_out[i];
    }
  });
}

template <class T>
Tensor<T> Tape<T>::sum(const Tensor<T>& x) {
  T s = 0;
  for (const T v : x.values()) s += v;
  return record("sum", {x}, {}, {s}, [](const BackwardContext& ctx) {
    if (auto* gx = ctx.grad(0))
      for (auto& g : *gx) g += ctx.grad_out[0];
  });
}

template <class T>
Tensor<T> Tape<T>::slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank() || begin >= end || end > x.dim(axis))
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") on axis " + std::to_string(axis) + " of " + to_string(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t len = x.dim(axis), width = end - begin;
  Shape shape = x.shape();
  shape[axis] = width;
  std::vector<T> out(outer * width * inner);
  const T* src = x.values().data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(src + (o * len + begin) * inner, width * inner, out.data() + o * width * inner);
  return record("slice", {x}, std::move(shape), std::move(out),
                [outer, inner, len, begin, width](const BackwardContext& ctx) {
                  if (auto* gx = ctx.grad(0))
                    for (std::size_t o = 0; o < outer; ++o) {
                      T* dst = gx->data() + (o * len + begin) * inner;
                      const T* g = ctx.grad_out.data() + o * width * inner;
                      for (std::size_t i = 0; i < width * inner; ++i) dst[i] += g[i];
                    }
                });
}

template <class T>
Tensor<T> Tape<T>::concat(const std::vector<Tensor<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = xs.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + to_string(first));
  std::size_t total = 0;
  for (const auto& x : xs) {
    Shape a = x.shape(), b = first;
    if (a.size() != b.size()) throw ShapeError("concat: " + to_string(a) + " vs " + to_string(b));
    total += a[axis];
    a[axis] = b[axis] = 0;
    if (a != b) throw ShapeError("concat: " + to_string(x.shape()) + " vs " + to_string(first));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  Shape shape = first;
  shape[axis] = total;
  std::vector<T> out(outer * total * inner);
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& x : xs) {
    const std::size_t w = x.dim(axis);
    widths.push_back(w);
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(x.values().data() + o * w * inner, w * inner,
                  out.data() + (o * total + offset) * inner);
    offset += w;
  }
  return record("concat", xs, std::move(shape), std::move(out),
                [outer, inner, total, widths](const BackwardContext& ctx) {
                  std::size_t off = 0;
                  for (std::size_t k = 0; k < widths.size(); ++k) {
                    if (auto* g = ctx.grad(k))
                      for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t i = 0; i < widths[k] * inner; ++i)
                          (*g)[o * widths[k] * inner + i] += ctx.grad_out[(o * total + off) * inner + i];
                    off += widths[k];
                  }
                });
}

template <class T>
Tensor<T> Tape<T>::upsample2x(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("upsample2x: need rank >= 2, got " + to_string(x.shape()));
  const std::size_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  const std::size_t planes = x.numel() / (h * w);
  Shape shape = x.shape();
  shape[shape.size() - 2] = 2 * h;
  shape[shape.size() - 1] = 2 * w;
  std::vector<T> out(planes * 4 * h * w);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx)
        out[(p * 2 * h + y) * 2 * w + xx] = x[(p * h + y / 2) * w + xx / 2];
  return record("upsample2x", {x}, std::move(shape), std::move(out),
                [planes, h, w](const BackwardContext& ctx) {
                  if (auto* gx = ctx.grad(0))
                    for (std::size_t p = 0; p < planes; ++p)
                      for (std::size_t y = 0; y < 2 * h; ++y)
                        for (std::size_t xx = 0; xx < 2 * w; ++xx)
                          (*gx)[(p * h + y / 2) * w + xx / 2] +=
                              ctx.grad_out[(p * 2 * h + y) * 2 * w + xx];
                });
}

template <class T>
Tensor<T> Tape<T>::ste_quantize(const Tensor<T>& v, int bits) {
  check_bits(bits);
  std::vector<T> out(v.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = quantize_value(v[i], bits);
  return record("ste_quantize", {v}, v.shape(), std::move(out), [](const BackwardContext& ctx) {
    if (auto* gv = ctx.grad(0)) {
      const auto vv = ctx.in(0);
      for (std::size_t i = 0; i < gv->size(); ++i)
        if (vv[i] >= T(0) && vv[i] <= T(1)) (*gv)[i] += ctx.grad_out[i];
    }
  });
}

template class Tensor<float>;
template class Tensor<double>;
template class Gradients<float>;
template class Gradients<double>;
template class Tape<float>;
template class Tape<double>;
template Tensor<float> detach(const Tensor<float>&);
template Tensor<double> detach(const Tensor<double>&);
template float quantize_value(float, int);
template double quantize_value(double, int);

}  // namespace evflow::ad
