#include "ran/graph.hpp"

#include <Eigen/Core>
#include <atomic>
#include <cmath>
#include <memory>
#include <sstream>

namespace ran::ad {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

const char* to_string(Primitive p) {
  switch (p) {
    case Primitive::leaf: return "leaf";
    case Primitive::add: return "add";
    case Primitive::sub: return "sub";
    case Primitive::mul: return "mul";
    case Primitive::sum: return "sum";
    case Primitive::affine: return "affine";
    case Primitive::linear_rows: return "linear_rows";
    case Primitive::add_rows: return "add_rows";
    case Primitive::transpose: return "transpose";
    case Primitive::reshape: return "reshape";
    case Primitive::conv2d: return "conv2d";
    case Primitive::maxpool2: return "maxpool2";
    case Primitive::tanh: return "tanh";
    case Primitive::sigmoid: return "sigmoid";
    case Primitive::softmax: return "softmax";
    case Primitive::maxout2: return "maxout2";
    case Primitive::embed: return "embed";
    case Primitive::cross_entropy: return "cross_entropy";
  }
  return "?";
}

namespace {

std::atomic<int> g_fault_op{-1};
std::atomic<double> g_fault_factor{1.0};

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
Eigen::Map<RowMat<T>> as_mat(Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return {t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}
template <typename T>
Eigen::Map<const RowMat<T>> as_mat(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return {t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}
template <typename T>
Eigen::Map<ColVec<T>> as_vec(Tensor<T>& t) {
  return {t.data(), static_cast<Eigen::Index>(t.size())};
}
template <typename T>
Eigen::Map<const ColVec<T>> as_vec(const Tensor<T>& t) {
  return {t.data(), static_cast<Eigen::Index>(t.size())};
}

[[noreturn]] void shape_error(const std::string& op, const std::string& detail) {
  throw TensorError(TensorErrc::shape_error, op + ": " + detail);
}

void require_rank(const std::string& op, const Shape& s, std::size_t rank) {
  if (s.size() != rank)
    shape_error(op, "expected rank " + std::to_string(rank) + ", got " + shape_string(s));
}

void require_same(const std::string& op, const Shape& a, const Shape& b) {
  if (a != b) shape_error(op, shape_string(a) + " vs " + shape_string(b));
}

}  // namespace

namespace debug {
void inject_backward_fault(std::optional<Primitive> p, double factor) {
  g_fault_factor.store(factor);
  g_fault_op.store(p ? static_cast<int>(*p) : -1);
}
}  // namespace debug

// ---------------------------------------------------------------------------
// Graph

template <typename T>
Graph<T>::Graph(bool requires_grad) : requires_grad_(requires_grad) {
#ifndef NDEBUG
  check_finite_ = true;
#endif
}

template <typename T>
const typename Graph<T>::Node& Graph<T>::node(Var v) const {
  if (!v.valid() || v.id >= nodes_.size()) throw std::out_of_range("invalid graph variable");
  return nodes_[v.id];
}

template <typename T>
typename Graph<T>::Node& Graph<T>::node(Var v) {
  if (!v.valid() || v.id >= nodes_.size()) throw std::out_of_range("invalid graph variable");
  return nodes_[v.id];
}

template <typename T>
Var Graph<T>::constant(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var Graph<T>::param(const ParamSet<T>& params, std::size_t index) {
  Node n;
  n.external = &params[index];
  n.param_index = static_cast<std::int64_t>(index);
  n.needs_grad = requires_grad_;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
const Tensor<T>& Graph<T>::value(Var v) const {
  const Node& n = node(v);
  return n.external ? *n.external : n.value;
}

template <typename T>
Var Graph<T>::push(Tensor<T> value, std::initializer_list<Var> inputs, Primitive op, Backward backward) {
  if (check_finite_) {
    for (T x : value.values())
      if (!std::isfinite(x))
        throw TensorError(TensorErrc::non_finite, std::string("non-finite value produced by ") + to_string(op));
  }
  Node n;
  n.value = std::move(value);
  n.op = op;
  if (inputs.size() > 0) n.first_input = *inputs.begin();
  bool needs = false;
  if (requires_grad_)
    for (Var in : inputs)
      if (in.valid() && node(in).needs_grad) needs = true;
  n.needs_grad = needs;
  if (needs) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Tensor<T>& Graph<T>::grad_buffer(Var v) {
  Node& n = node(v);
  if (n.grad.empty()) n.grad = Tensor<T>(value(v).shape());
  return n.grad;
}

template <typename T>
void Graph<T>::sweep(Var root) {
  if (value(root).size() != 1)
    shape_error("backward", "root must be a scalar, got " + shape_string(value(root).shape()));
  for (auto& n : nodes_) n.grad = Tensor<T>();
  grad_buffer(root)[0] = T(1);

  const int fault = g_fault_op.load();
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty() || !n.backward) continue;
    if (fault == static_cast<int>(n.op)) {
      Tensor<T> scaled = n.grad;
      for (auto& x : scaled.values()) x *= static_cast<T>(g_fault_factor.load());
      n.backward(*this, n.external ? *n.external : n.value, scaled);
    } else {
      n.backward(*this, n.external ? *n.external : n.value, n.grad);
    }
  }
}

template <typename T>
void Graph<T>::backward(Var root) {
  sweep(root);
}

template <typename T>
Gradients<T> Graph<T>::backward(Var root, const ParamSet<T>& params) {
  sweep(root);
  Gradients<T> out = zero_gradients(params);
  for (const auto& n : nodes_)
    if (n.param_index >= 0 && !n.grad.empty() && n.external == &params[static_cast<std::size_t>(n.param_index)])
      out[static_cast<std::size_t>(n.param_index)] += n.grad;
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
  const auto& va = g.value(a);
  const auto& vb = g.value(b);
  require_same("add", va.shape(), vb.shape());
  Tensor<T> y = va;
  y += vb;
  return g.push(std::move(y), {a, b}, Primitive::add, [a, b](Graph<T>& g, const Tensor<T>&, const Tensor<T>& gy) {
    if (g.needs_grad(a)) g.grad_buffer(a) += gy;
    if (g.needs_grad(b)) g.grad_buffer(b) += gy;
  });
}

template <typename T>
Var sub(Graph<T>& g, Var a, Var b) {
  const auto& va = g.value(a);
  const auto& vb = g.value(b);
  require_same("sub", va.shape(), vb.shape());
  Tensor<T> y = va;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= vb[i];
  return g.push(std::move(y), {a, b}, Primitive::sub, [a, b](Graph<T>& g, const Tensor<T>&, const Tensor<T>& gy) {
    if (g.needs_grad(a)) g.grad_buffer(a) += gy;
    if (g.needs_grad(b)) {
      auto& gb = g.grad_buffer(b);
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] -= gy[i];
    }
  });
}

template <typename T>
Var mul(Graph<T>& g, Var a, Var b) {
  const auto& va = g.value(a);
  const auto& vb = g.value(b);
  require_same("mul", va.shape(), vb.shape());
  Tensor<T> y(va.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = va[i] * vb[i];
  return g.push(std::move(y), {a, b}, Primitive::mul, [a, b](Graph<T>& g, const Tensor<T>&, const Tensor<T>& gy) {
    if (g.needs_grad(a)) {
      auto& ga = g.grad_buffer(a);
      const auto& vb = g.value(b);
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * vb[i];
    }
    if (g.needs_grad(b)) {
      auto& gb = g.grad_buffer(b);
      const auto& va = g.value(a);
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * va[i];
    }
  });
}

template <typename T>
Var sum(Graph<T>& g, Var a) {
  const auto& va = g.value(a);
  T s = 0;
  for (T x : va.values()) s += x;
  return g.push(Tensor<T>({1}, s), {a}, Primitive::sum, [a](Graph<T>& g, const Tensor<T>&, const Tensor<T>& gy) {
    for (auto& x : g.grad_buffer(a).values()) x += gy[0];
  });
}

// ---------------------------------------------------------------------------
// Linear maps

template <typename T>
Var affine(Graph<T>& g, Var x, Var w, Var b) {
  const auto& vx = g.value(x);
  const auto& vw = g.value(w);
  require_rank("affine", vx.shape(), 1);
  require_rank("affine", vw.shape(), 2);
  const std::size_t m = vw.dim(0), n = vw.dim(1);
  if (vx.size() != n) shape_error("affine", "W " + shape_string(vw.shape()) + " applied to x " + shape_string(vx.shape()));
  Tensor<T> y({m});
  as_vec(y).noalias() = as_mat(vw, m, n) * as_vec(vx);
  if (b.valid()) {
    const auto& vb = g.value(b);
    if (vb.shape() != Shape{m}) shape_error("affine", "bias " + shape_string(vb.shape()) + " for output [" + std::to_string(m) + "]");
    as_vec(y) += as_vec(vb);
  }
  return g.push(std::move(y), {x, w, b}, Primitive::affine,
                [x, w, b, m, n](Graph<T>& g, const Tensor<T>&, const Tensor<T>& gy) {
                  if (g.needs_grad(w)) as_mat(g.grad_buffer(w), m, n).noalias() += as_vec(gy) * as_vec(g.value(x)).transpose();
                  if (g.needs_grad(x))
                    as_vec(g.grad_buffer(x)).noalias() += as_mat(g.value(w), m, n).transpose() * as_vec(gy);
                  if (b.valid() && g.needs_grad(b)) g.grad_buffer(b) += gy;
                });
}

template <typename T>
Var linear_rows(Graph<T>& g, Var x, Var w) {
  const auto& vx = g.value(x);
  const auto& vw = g.value(w);
  require_rank("linear_rows", vx.shape(), 2);
  require_rank("linear_rows", vw.shape(), 2);
  const std::size_t rows = vx.dim(0), n = vx.dim(1), m = vw.dim(0);
  if (vw.dim(1) != n) shape_error("linear_rows", shape_string(vx.shape()) + " times " + shape_string(vw.shape()) + "^T");
  Tensor<T> y({rows, m});
  as_mat(y, rows, m).noalias() = as_mat(vx, rows, n) * as_mat(vw, m, n).transpose();
  return g.push(std::move(y), {x, w}, Primitive::linear_rows,
                [x, w, rows, n, m](Graph<T>& g, const Tensor<T>&, const Tensor<T>& gy) {
                  const auto dy = as_mat(gy, rows, m);
                  if (g.needs_grad(x)) as_mat(g.grad_buffer(x), rows, n).noalias() += dy * as_mat(g.value(w), m, n);
                  if (g.needs_grad(w)) as_mat(g.grad_buffer(w), m, n).noalias() += dy.transpose() * as_mat(g.value(x), rows, n);
                });
}

template <typename T>
Var add_rows(Graph<T>& g, Var x, Var v) {
  const auto& vx = g.value(x);
  const auto& vv = g.value(v);
  require_rank("add_rows", vx.shape(), 2);
  const std::size_t rows = vx.dim(0), n = vx.dim(1);
  if (vv.shape() != Shape{n}) shape_error("add_rows", shape_string(vv.shape()) + " onto rows of " + shape_string(vx.shape()));
  Tensor<T> y = vx;
  as_mat(y, rows, n).rowwise() += as_vec(vv).transpose();
  return g.push(std::move(y), {x, v}, Primitive::add_rows,
                [x, v, rows, n](Graph<T>& g, const Tensor<T>&, const Tensor<T>& gy) {
                  if (g.needs_grad(x)) g.grad_buffer(x) += gy;
                  if (g.needs_grad(v)) as_vec(g.grad_buffer(v)) += as_mat(gy, rows, n).colwise().sum().transpose();
                });
}

template <typename T>
Var transpose(Graph<T>& g, Var x) {
  const auto& vx = g.value(x);
  require_rank("transpose", vx.shape(), 2);
  const std::size_t r = vx.dim(0), c = vx.dim(1);
  Tensor<T> y({c, r});
  as_mat(y, c, r) = as_mat(vx, r, c).transpose();
  return g.push(std::move(y), {x}, Primitive::transpose, [x, r, c](Graph<T>& g, const Tensor<T>&, const Tensor<T>& gy) {
    as_mat(g.grad_buffer(x), r, c) += as_mat(gy, c, r).transpose();
  });
}

template <typename T>
Var reshape(Graph<T>& g, Var x, Shape shape) {
  Tensor<T> y = g.value(x).reshaped(std::move(shape));
  return g.push(std::move(y), {x}, Primitive::reshape, [x](Graph<T>& g, const Tensor<T>&, const Tensor<T>& gy) {
    auto& gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
  });
}

// ---------------------------------------------------------------------------
// Convolution and pooling

namespace {

// col[(c*k + ky)*k + kx][y*W + x] = x[c][y + ky - p][x + kx - p] (zero outside).
template <typename T>
void im2col(const Tensor<T>& x, std::size_t k, std::vector<T>& col) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const long p = static_cast<long>(k / 2);
  col.assign(C * k * k * H * W, T(0));
  T* out = col.data();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const long dx = static_cast<long>(kx) - p;
        const long x0 = std::max(0L, -dx), x1 = std::min(static_cast<long>(W), static_cast<long>(W) - dx);
        for (std::size_t yy = 0; yy < H; ++yy, out += W) {
          const long sy = static_cast<long>(yy) + static_cast<long>(ky) - p;
          if (sy < 0 || sy >= static_cast<long>(H) || x0 >= x1) continue;
          const T* src = x.data() + (c * H + static_cast<std::size_t>(sy)) * W;
          for (long xx = x0; xx < x1; ++xx) out[xx] = src[xx + dx];
        }
      }
}

template <typename T>
void col2im_add(const std::vector<T>& col, std::size_t k, Tensor<T>& gx) {
  const std::size_t C = gx.dim(0), H = gx.dim(1), W = gx.dim(2);
  const long p = static_cast<long>(k / 2);
  const T* in = col.data();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const long dx = static_cast<long>(kx) - p;
        const long x0 = std::max(0L, -dx), x1 = std::min(static_cast<long>(W), static_cast<long>(W) - dx);
        for (std::size_t yy = 0; yy < H; ++yy, in += W) {
          const long sy = static_cast<long>(yy) + static_cast<long>(ky) - p;
          if (sy < 0 || sy >= static_cast<long>(H) || x0 >= x1) continue;
          T* dst = gx.data() + (c * H + static_cast<std::size_t>(sy)) * W;
          for (long xx = x0; xx < x1; ++xx) dst[xx + dx] += in[xx];
        }
      }
}

}  // namespace

template <typename T>
Var conv2d(Graph<T>& g, Var x, Var kernels, Var b) {
  const auto& vx = g.value(x);
  const auto& vk = g.value(kernels);
  require_rank("conv2d", vx.shape(), 3);
  require_rank("conv2d", vk.shape(), 4);
  const std::size_t Co = vk.dim(0), Ci = vk.dim(1), k = vk.dim(2);
  if (vk.dim(3) != k || k % 2 == 0)
    throw TensorError(TensorErrc::kernel_size_error, "conv2d: kernel must be square with odd size, got " + shape_string(vk.shape()));
  if (vx.dim(0) != Ci) shape_error("conv2d", "input " + shape_string(vx.shape()) + " vs kernels " + shape_string(vk.shape()));
  const std::size_t H = vx.dim(1), W = vx.dim(2), HW = H * W, R = Ci * k * k;

  auto col = std::make_shared<std::vector<T>>();
  im2col(vx, k, *col);
  Tensor<T> y({Co, H, W});
  auto ym = as_mat(y, Co, HW);
  ym.noalias() = as_mat(vk, Co, R) * Eigen::Map<const RowMat<T>>(col->data(), static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(HW));
  if (b.valid()) {
    const auto& vb = g.value(b);
    if (vb.shape() != Shape{Co}) shape_error("conv2d", "bias " + shape_string(vb.shape()));
    ym.colwise() += as_vec(vb);
  }
  if (!g.requires_grad() || !g.needs_grad(kernels)) col.reset();

  return g.push(std::move(y), {x, kernels, b}, Primitive::conv2d,
                [x, kernels, b, col, Co, R, HW, k](Graph<T>& g, const Tensor<T>&, const Tensor<T>& gy) {
                  const auto dy = as_mat(gy, Co, HW);
                  if (g.needs_grad(kernels))
                    as_mat(g.grad_buffer(kernels), Co, R).noalias() +=
                        dy * Eigen::Map<const RowMat<T>>(col->data(), static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(HW)).transpose();
                  if (g.needs_grad(x)) {
                    std::vector<T> dcol(R * HW);
                    Eigen::Map<RowMat<T>>(dcol.data(), static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(HW)).noalias() =
                        as_mat(g.value(kernels), Co, R).transpose() * dy;
                    col2im_add(dcol, k, g.grad_buffer(x));
                  }
                  if (b.valid() && g.needs_grad(b)) as_vec(g.grad_buffer(b)) += dy.rowwise().sum();
                });
}

template <typename T>
Var maxpool2(Graph<T>& g, Var x) {
  const auto& vx = g.value(x);
  require_rank("maxpool2", vx.shape(), 3);
  const std::size_t C = vx.dim(0), H = vx.dim(1), W = vx.dim(2);
  const std::size_t Ho = (H + 1) / 2, Wo = (W + 1) / 2;
  Tensor<T> y({C, Ho, Wo});
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(y.size());
  std::size_t o = 0;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox, ++o) {
        std::size_t best = (c * H + 2 * oy) * W + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t iy = 2 * oy + dy, ix = 2 * ox + dx;
            if (iy >= H || ix >= W) continue;
            const std::size_t idx = (c * H + iy) * W + ix;
            if (vx[idx] > vx[best]) best = idx;
          }
        y[o] = vx[best];
        (*argmax)[o] = static_cast<std::uint32_t>(best);
      }
  return g.push(std::move(y), {x}, Primitive::maxpool2, [x, argmax](Graph<T>& g, const Tensor<T>&, const Tensor<T>& gy) {
    auto& gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[(*argmax)[i]] += gy[i];
  });
}

// ---------------------------------------------------------------------------
// Activations

template <typename T>
Var tanh(Graph<T>& g, Var x) {
  Tensor<T> y = g.value(x);
  for (auto& v : y.values()) v = std::tanh(v);
  return g.push(std::move(y), {x}, Primitive::tanh, [x](Graph<T>& g, const Tensor<T>& y, const Tensor<T>& gy) {
    auto& gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * (T(1) - y[i] * y[i]);
  });
}

template <typename T>
Var sigmoid(Graph<T>& g, Var x) {
  Tensor<T> y = g.value(x);
  for (auto& v : y.values()) {
    if (v >= 0) {
      v = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      v = e / (T(1) + e);
    }
  }
  return g.push(std::move(y), {x}, Primitive::sigmoid, [x](Graph<T>& g, const Tensor<T>& y, const Tensor<T>& gy) {
    auto& gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * y[i] * (T(1) - y[i]);
  });
}

template <typename T>
Var softmax(Graph<T>& g, Var x) {
  const auto& vx = g.value(x);
  require_rank("softmax", vx.shape(), 1);
  if (vx.empty()) shape_error("softmax", "empty input");
  Tensor<T> y = vx;
  const T mx = *std::max_element(y.values().begin(), y.values().end());
  T total = 0;
  for (auto& v : y.values()) total += (v = std::exp(v - mx));
  for (auto& v : y.values()) v /= total;
  return g.push(std::move(y), {x}, Primitive::softmax, [x](Graph<T>& g, const Tensor<T>& y, const Tensor<T>& gy) {
    T dot = 0;
    for (std::size_t i = 0; i < y.size(); ++i) dot += gy[i] * y[i];
    auto& gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < y.size(); ++i) gx[i] += y[i] * (gy[i] - dot);
  });
}

template <typename T>
Var maxout2(Graph<T>& g, Var x) {
  const auto& vx = g.value(x);
  require_rank("maxout2", vx.shape(), 1);
  if (vx.size() % 2 != 0) shape_error("maxout2", "odd input length " + std::to_string(vx.size()));
  const std::size_t half = vx.size() / 2;
  Tensor<T> y({half});
  auto pick = std::make_shared<std::vector<std::uint32_t>>(half);
  for (std::size_t j = 0; j < half; ++j) {
    const std::size_t i = vx[2 * j + 1] > vx[2 * j] ? 2 * j + 1 : 2 * j;
    (*pick)[j] = static_cast<std::uint32_t>(i);
    y[j] = vx[i];
  }
  return g.push(std::move(y), {x}, Primitive::maxout2, [x, pick](Graph<T>& g, const Tensor<T>&, const Tensor<T>& gy) {
    auto& gx = g.grad_buffer(x);
    for (std::size_t j = 0; j < gy.size(); ++j) gx[(*pick)[j]] += gy[j];
  });
}

template <typename T>
Var embed(Graph<T>& g, std::size_t index, Var e) {
  const auto& ve = g.value(e);
  require_rank("embed", ve.shape(), 2);
  const std::size_t K = ve.dim(0), m = ve.dim(1);
  if (index >= K)
    throw TensorError(TensorErrc::index_error, "embed: index " + std::to_string(index) + " >= " + std::to_string(K));
  Tensor<T> y({m});
  std::copy_n(ve.data() + index * m, m, y.data());
  return g.push(std::move(y), {e}, Primitive::embed, [e, index, m](Graph<T>& g, const Tensor<T>&, const Tensor<T>& gy) {
    auto& ge = g.grad_buffer(e);
    for (std::size_t j = 0; j < m; ++j) ge[index * m + j] += gy[j];
  });
}

template <typename T>
Var cross_entropy(Graph<T>& g, Var p, std::size_t target) {
  const auto& vp = g.value(p);
  require_rank("cross_entropy", vp.shape(), 1);
  if (target >= vp.size())
    throw TensorError(TensorErrc::index_error,
                      "cross_entropy: target " + std::to_string(target) + " >= " + std::to_string(vp.size()));
  const T floor = static_cast<T>(kCrossEntropyFloor);
  const T loss = -std::log(std::max(vp[target], floor));
  return g.push(Tensor<T>({1}, loss), {p}, Primitive::cross_entropy,
                [p, target, floor](Graph<T>& g, const Tensor<T>&, const Tensor<T>& gy) {
                  const auto& vp = g.value(p);
                  if (g.primitive(p) == Primitive::softmax && g.needs_grad(g.first_input(p))) {
                    auto& gl = g.grad_buffer(g.first_input(p));
                    for (std::size_t i = 0; i < vp.size(); ++i) gl[i] += gy[0] * vp[i];
                    gl[target] -= gy[0];
                  } else if (vp[target] > floor) {
                    g.grad_buffer(p)[target] -= gy[0] / vp[target];
                  }
                });
}

#define RAN_INSTANTIATE(T)                                \
  template class Graph<T>;                                \
  template Var add<T>(Graph<T>&, Var, Var);               \
  template Var sub<T>(Graph<T>&, Var, Var);               \
  template Var mul<T>(Graph<T>&, Var, Var);               \
  template Var sum<T>(Graph<T>&, Var);                    \
  template Var affine<T>(Graph<T>&, Var, Var, Var);       \
  template Var linear_rows<T>(Graph<T>&, Var, Var);       \
  template Var add_rows<T>(Graph<T>&, Var, Var);          \
  template Var transpose<T>(Graph<T>&, Var);              \
  template Var reshape<T>(Graph<T>&, Var, Shape);         \
  template Var conv2d<T>(Graph<T>&, Var, Var, Var);       \
  template Var maxpool2<T>(Graph<T>&, Var);               \
  template Var tanh<T>(Graph<T>&, Var);                   \
  template Var sigmoid<T>(Graph<T>&, Var);                \
  template Var softmax<T>(Graph<T>&, Var);                \
  template Var maxout2<T>(Graph<T>&, Var);                \
  template Var embed<T>(Graph<T>&, std::size_t, Var);     \
  template Var cross_entropy<T>(Graph<T>&, Var, std::size_t);

RAN_INSTANTIATE(float)
RAN_INSTANTIATE(double)

}  // namespace ran::ad
