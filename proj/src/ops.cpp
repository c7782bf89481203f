#include "ecg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ecg/error.hpp"
#include "ecg/kernels.hpp"

namespace ecg::ad {

namespace {

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

int normalize_axis(int axis, int rank, const char* op) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) shape_fail(op, "axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return axis;
}

// Returns the size of `b` if it equals `a` or a trailing suffix of it.
std::size_t broadcast_inner(const char* op, const Shape& a, const Shape& b) {
  if (b.size() > a.size() || !std::equal(b.rbegin(), b.rend(), a.rbegin())) {
    shape_fail(op, "shapes " + to_string(a) + " and " + to_string(b) + " are not broadcast-compatible");
  }
  return static_cast<std::size_t>(numel(b));
}

// Splits a shape around `axis` into (outer, axis extent, inner).
struct AxisSplit {
  std::int64_t outer = 1, extent = 1, inner = 1;
};
AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <class T>
inline T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T>
Tensor<T> unary(const char* op, const Tensor<T>& x, T (*f)(T), T (*df)(T x, T y)) {
  std::vector<T> out(x.data().size());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return make_result<T>(op, x.shape(), std::move(out), {x}, [df](Node<T>& self) {
    auto& xin = *self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) xin.grad[i] += self.grad[i] * df(xin.value[i], self.value[i]);
  });
}

}  // namespace

// ---------------------------------------------------------------- arithmetic

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t nb = broadcast_inner("add", a.shape(), b.shape());
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % nb];
  return make_result<T>("add", a.shape(), std::move(out), {a, b}, [nb](Node<T>& self) {
    auto& na = *self.inputs[0];
    auto& nbn = *self.inputs[1];
    if (na.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) na.grad[i] += self.grad[i];
    if (nbn.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) nbn.grad[i % nb] += self.grad[i];
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t nb = broadcast_inner("sub", a.shape(), b.shape());
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i % nb];
  return make_result<T>("sub", a.shape(), std::move(out), {a, b}, [nb](Node<T>& self) {
    auto& na = *self.inputs[0];
    auto& nbn = *self.inputs[1];
    if (na.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) na.grad[i] += self.grad[i];
    if (nbn.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) nbn.grad[i % nb] -= self.grad[i];
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t nb = broadcast_inner("mul", a.shape(), b.shape());
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i % nb];
  return make_result<T>("mul", a.shape(), std::move(out), {a, b}, [nb](Node<T>& self) {
    auto& na = *self.inputs[0];
    auto& nbn = *self.inputs[1];
    if (na.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) na.grad[i] += self.grad[i] * nbn.value[i % nb];
    if (nbn.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) nbn.grad[i % nb] += self.grad[i] * na.value[i];
  });
}

template <class T>
Tensor<T> affine(const Tensor<T>& x, T scale, T shift) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = scale * v + shift;
  return make_result<T>("affine", x.shape(), std::move(out), {x}, [scale](Node<T>& self) {
    auto& xin = *self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) xin.grad[i] += scale * self.grad[i];
  });
}

// --------------------------------------------------------------- activations

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary<T>(
      "relu", x, [](T v) { return v <= T(0) ? T(0) : v; },  // NaN passes through
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> elu(const Tensor<T>& x, T alpha) {
  std::vector<T> out(x.data().size());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > T(0) ? in[i] : alpha * std::expm1(in[i]);
  return make_result<T>("elu", x.shape(), std::move(out), {x}, [alpha](Node<T>& self) {
    auto& xin = *self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T d = xin.value[i] > T(0) ? T(1) : self.value[i] + alpha;
      xin.grad[i] += self.grad[i] * d;
    }
  });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary<T>(
      "sigmoid", x, [](T v) { return stable_sigmoid(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  return unary<T>(
      "tanh", x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  const std::int64_t d = x.shape().back();
  const std::int64_t rows = x.numel() / d;
  std::vector<T> out(x.data().size());
  const auto in = x.data();
#pragma omp parallel for schedule(static)
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = in.data() + r * d;
    T* yr = out.data() + r * d;
    const T mx = *std::max_element(xr, xr + d);
    T total = T(0);
    for (std::int64_t j = 0; j < d; ++j) total += (yr[j] = std::exp(xr[j] - mx));
    for (std::int64_t j = 0; j < d; ++j) yr[j] /= total;
  }
  return make_result<T>("softmax", x.shape(), std::move(out), {x}, [d, rows](Node<T>& self) {
    auto& xin = *self.inputs[0];
#pragma omp parallel for schedule(static)
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * d;
      const T* g = self.grad.data() + r * d;
      T dot = T(0);
      for (std::int64_t j = 0; j < d; ++j) dot += g[j] * y[j];
      T* gx = xin.grad.data() + r * d;
      for (std::int64_t j = 0; j < d; ++j) gx[j] += y[j] * (g[j] - dot);
    }
  });
}

// ---------------------------------------------------------------- reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  return make_result<T>("sum", {1}, {total}, {x}, [](Node<T>& self) {
    auto& xin = *self.inputs[0];
    for (auto& g : xin.grad) g += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  const T inv = T(1) / static_cast<T>(x.numel());
  return make_result<T>("mean", {1}, {total * inv}, {x}, [inv](Node<T>& self) {
    auto& xin = *self.inputs[0];
    for (auto& g : xin.grad) g += self.grad[0] * inv;
  });
}

template <class T>
Tensor<T> mean_axis(const Tensor<T>& x, int axis) {
  axis = normalize_axis(axis, x.rank(), "mean_axis");
  const AxisSplit s = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + axis);
  if (out_shape.empty()) out_shape = {1};
  std::vector<T> out(static_cast<std::size_t>(s.outer * s.inner), T(0));
  const auto in = x.data();
  const T inv = T(1) / static_cast<T>(s.extent);
  for (std::int64_t o = 0; o < s.outer; ++o)
    for (std::int64_t e = 0; e < s.extent; ++e)
      for (std::int64_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += in[(o * s.extent + e) * s.inner + i];
  for (auto& v : out) v *= inv;
  return make_result<T>("mean_axis", out_shape, std::move(out), {x}, [s, inv](Node<T>& self) {
    auto& xin = *self.inputs[0];
    for (std::int64_t o = 0; o < s.outer; ++o)
      for (std::int64_t e = 0; e < s.extent; ++e)
        for (std::int64_t i = 0; i < s.inner; ++i)
          xin.grad[(o * s.extent + e) * s.inner + i] += self.grad[o * s.inner + i] * inv;
  });
}

// ------------------------------------------------------------ linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) shape_fail("matmul", "operands need rank >= 2, got " + to_string(a.shape()) + " and " + to_string(b.shape()));
  const int m = static_cast<int>(a.dim(-2));
  const int k = static_cast<int>(a.dim(-1));
  const int n = static_cast<int>(b.dim(-1));
  if (b.dim(-2) != k) shape_fail("matmul", "inner dims differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  const int lead = static_cast<int>(a.numel() / (static_cast<std::int64_t>(m) * k));

  if (b.rank() == 2) {
    // Shared right operand: fold the leading axes into the row count.
    const kernels::GemmShape fwd{1, lead * m, n, k, false, false};
    std::vector<T> out(static_cast<std::size_t>(lead) * m * n);
    kernels::parallel::gemm<T>(fwd, a.data(), b.data(), out, false);
    return make_result<T>("matmul", out_shape, std::move(out), {a, b}, [lead, m, n, k](Node<T>& self) {
      auto& na = *self.inputs[0];
      auto& nb = *self.inputs[1];
      const int rows = lead * m;
      if (na.requires_grad)
        kernels::parallel::gemm<T>({1, rows, k, n, false, true}, self.grad, nb.value, na.grad, true);
      if (nb.requires_grad)
        kernels::parallel::gemm<T>({1, k, n, rows, true, false}, na.value, self.grad, nb.grad, true);
    });
  }

  if (b.rank() != a.rank() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
    shape_fail("matmul", "batch dims differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  std::vector<T> out(static_cast<std::size_t>(lead) * m * n);
  kernels::parallel::gemm<T>({lead, m, n, k, false, false}, a.data(), b.data(), out, false);
  return make_result<T>("bmm", out_shape, std::move(out), {a, b}, [lead, m, n, k](Node<T>& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    if (na.requires_grad)
      kernels::parallel::gemm<T>({lead, m, k, n, false, true}, self.grad, nb.value, na.grad, true);
    if (nb.requires_grad)
      kernels::parallel::gemm<T>({lead, k, n, m, true, false}, na.value, self.grad, nb.grad, true);
  });
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.rank() != 2) shape_fail("linear", "weight must be (out, in), got " + to_string(weight.shape()));
  const int out_f = static_cast<int>(weight.dim(0));
  const int in_f = static_cast<int>(weight.dim(1));
  if (x.shape().back() != in_f)
    shape_fail("linear", "input features " + std::to_string(x.shape().back()) + " != weight in-features " + std::to_string(in_f));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_f))
    shape_fail("linear", "bias shape " + to_string(bias.shape()) + " != (" + std::to_string(out_f) + ",)");
  const int rows = static_cast<int>(x.numel() / in_f);
  Shape out_shape = x.shape();
  out_shape.back() = out_f;
  std::vector<T> out(static_cast<std::size_t>(rows) * out_f);
  kernels::parallel::gemm<T>({1, rows, out_f, in_f, false, true}, x.data(), weight.data(), out, false);
  if (bias.defined()) {
    const auto bv = bias.data();
    for (int r = 0; r < rows; ++r)
      for (int j = 0; j < out_f; ++j) out[static_cast<std::size_t>(r) * out_f + j] += bv[j];
  }
  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>("linear", out_shape, std::move(out), std::move(inputs), [rows, in_f, out_f](Node<T>& self) {
    auto& nx = *self.inputs[0];
    auto& nw = *self.inputs[1];
    if (nx.requires_grad)
      kernels::parallel::gemm<T>({1, rows, in_f, out_f, false, false}, self.grad, nw.value, nx.grad, true);
    if (nw.requires_grad)
      kernels::parallel::gemm<T>({1, out_f, in_f, rows, true, false}, self.grad, nx.value, nw.grad, true);
    if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
      auto& gb = self.inputs[2]->grad;
      for (int r = 0; r < rows; ++r)
        for (int j = 0; j < out_f; ++j) gb[j] += self.grad[static_cast<std::size_t>(r) * out_f + j];
    }
  });
}

// --------------------------------------------------------------- convolution

namespace {

template <class T>
Tensor<T> conv_impl(const char* op, const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                    const kernels::ConvGeometry& g, Shape out_shape) {
  std::vector<T> out(g.output_size());
  kernels::parallel::conv_forward<T>(g, x.data(), weight.data(), bias.defined() ? bias.data() : std::span<const T>{}, out);
  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(op, std::move(out_shape), std::move(out), std::move(inputs), [g](Node<T>& self) {
    auto& nx = *self.inputs[0];
    auto& nw = *self.inputs[1];
    if (nx.requires_grad) kernels::parallel::conv_backward_input<T>(g, self.grad, nw.value, nx.grad);
    if (nw.requires_grad) kernels::parallel::conv_backward_weight<T>(g, self.grad, nx.value, nw.grad);
    if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
      auto& gb = self.inputs[2]->grad;
      const std::size_t plane = static_cast<std::size_t>(g.out_h()) * g.out_w();
      for (int b = 0; b < g.batch; ++b)
        for (int o = 0; o < g.out_channels; ++o) {
          const T* gp = self.grad.data() + (static_cast<std::size_t>(b) * g.out_channels + o) * plane;
          T acc = T(0);
          for (std::size_t i = 0; i < plane; ++i) acc += gp[i];
          gb[o] += acc;
        }
    }
  });
}

void check_conv_geometry(const char* op, const kernels::ConvGeometry& g, const Shape& xs, const Shape& ws) {
  if (g.groups <= 0 || g.in_channels % g.groups != 0 || g.out_channels % g.groups != 0)
    shape_fail(op, "channels in=" + std::to_string(g.in_channels) + " out=" + std::to_string(g.out_channels) +
                       " not divisible by groups=" + std::to_string(g.groups));
  if (ws[1] != g.in_per_group())
    shape_fail(op, "weight " + to_string(ws) + " expects " + std::to_string(ws[1] * g.groups) +
                       " input channels, input " + to_string(xs) + " has " + std::to_string(g.in_channels));
  if (g.stride_h <= 0 || g.stride_w <= 0) shape_fail(op, "stride must be positive");
  if (g.pad_top < 0 || g.pad_bottom < 0 || g.pad_left < 0 || g.pad_right < 0) shape_fail(op, "padding must be non-negative");
  if (g.kernel_h > g.in_h + g.pad_top + g.pad_bottom || g.kernel_w > g.in_w + g.pad_left + g.pad_right)
    shape_fail(op, "kernel " + to_string(ws) + " larger than padded input " + to_string(xs));
}

}  // namespace

template <class T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Conv1dOptions opt) {
  if (x.rank() != 3) shape_fail("conv1d", "input must be (B, C, L), got " + to_string(x.shape()));
  if (weight.rank() != 3) shape_fail("conv1d", "weight must be (O, C/groups, K), got " + to_string(weight.shape()));
  kernels::ConvGeometry g;
  g.batch = static_cast<int>(x.dim(0));
  g.in_channels = static_cast<int>(x.dim(1));
  g.in_w = static_cast<int>(x.dim(2));
  g.out_channels = static_cast<int>(weight.dim(0));
  g.kernel_w = static_cast<int>(weight.dim(2));
  g.stride_w = opt.stride;
  g.pad_left = opt.pad_begin;
  g.pad_right = opt.pad_end;
  g.groups = opt.groups;
  check_conv_geometry("conv1d", g, x.shape(), weight.shape());
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.out_channels))
    shape_fail("conv1d", "bias shape " + to_string(bias.shape()) + " does not match " + std::to_string(g.out_channels) + " filters");
  return conv_impl<T>("conv1d", x, weight, bias, g, {g.batch, g.out_channels, g.out_w()});
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Conv2dOptions opt) {
  if (x.rank() != 4) shape_fail("conv2d", "input must be (B, C, H, W), got " + to_string(x.shape()));
  if (weight.rank() != 4) shape_fail("conv2d", "weight must be (O, C/groups, KH, KW), got " + to_string(weight.shape()));
  kernels::ConvGeometry g;
  g.batch = static_cast<int>(x.dim(0));
  g.in_channels = static_cast<int>(x.dim(1));
  g.in_h = static_cast<int>(x.dim(2));
  g.in_w = static_cast<int>(x.dim(3));
  g.out_channels = static_cast<int>(weight.dim(0));
  g.kernel_h = static_cast<int>(weight.dim(2));
  g.kernel_w = static_cast<int>(weight.dim(3));
  g.stride_h = opt.stride_h;
  g.stride_w = opt.stride_w;
  g.pad_top = opt.pad_top;
  g.pad_bottom = opt.pad_bottom;
  g.pad_left = opt.pad_left;
  g.pad_right = opt.pad_right;
  g.groups = opt.groups;
  check_conv_geometry("conv2d", g, x.shape(), weight.shape());
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.out_channels))
    shape_fail("conv2d", "bias shape " + to_string(bias.shape()) + " does not match " + std::to_string(g.out_channels) + " filters");
  return conv_impl<T>("conv2d", x, weight, bias, g, {g.batch, g.out_channels, g.out_h(), g.out_w()});
}

// ------------------------------------------------------------- normalization

template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormStats<T>* stats,
                     bool training, T momentum, T eps) {
  if (x.rank() < 2) shape_fail("batch_norm", "input must be (B, C, ...), got " + to_string(x.shape()));
  const std::int64_t batch = x.dim(0);
  const std::int64_t channels = x.dim(1);
  const std::int64_t inner = x.numel() / (batch * channels);
  if (gamma.numel() != channels || beta.numel() != channels)
    shape_fail("batch_norm", "affine params " + to_string(gamma.shape()) + " do not match " + std::to_string(channels) + " channels");
  if (!training && (stats == nullptr || static_cast<std::int64_t>(stats->mean.size()) != channels ||
                    static_cast<std::int64_t>(stats->var.size()) != channels)) {
    throw Error("batch_norm: eval mode requires running statistics for " + std::to_string(channels) + " channels");
  }
  const std::int64_t count = batch * inner;
  std::vector<T> xhat(x.data().size());
  std::vector<T> inv_std(static_cast<std::size_t>(channels));
  std::vector<T> out(x.data().size());
  const auto in = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();

#pragma omp parallel for schedule(static)
  for (std::int64_t c = 0; c < channels; ++c) {
    T mu, var;
    if (training) {
      T s = T(0);
      for (std::int64_t b = 0; b < batch; ++b)
        for (std::int64_t i = 0; i < inner; ++i) s += in[(b * channels + c) * inner + i];
      mu = s / static_cast<T>(count);
      T ss = T(0);
      for (std::int64_t b = 0; b < batch; ++b)
        for (std::int64_t i = 0; i < inner; ++i) {
          const T d = in[(b * channels + c) * inner + i] - mu;
          ss += d * d;
        }
      var = ss / static_cast<T>(count);
      if (stats != nullptr && static_cast<std::int64_t>(stats->mean.size()) == channels) {
        const T unbiased = count > 1 ? var * static_cast<T>(count) / static_cast<T>(count - 1) : var;
        stats->mean[c] = (T(1) - momentum) * stats->mean[c] + momentum * mu;
        stats->var[c] = (T(1) - momentum) * stats->var[c] + momentum * unbiased;
      }
    } else {
      mu = stats->mean[c];
      var = stats->var[c];
    }
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[c] = is;
    for (std::int64_t b = 0; b < batch; ++b)
      for (std::int64_t i = 0; i < inner; ++i) {
        const std::int64_t idx = (b * channels + c) * inner + i;
        xhat[idx] = (in[idx] - mu) * is;
        out[idx] = gv[c] * xhat[idx] + bv[c];
      }
  }
  if (training && stats != nullptr) ++stats->batches_tracked;

  return make_result<T>(
      "batch_norm", x.shape(), std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), batch, channels, inner, count, training](Node<T>& self) {
        auto& nx = *self.inputs[0];
        auto& ng = *self.inputs[1];
        auto& nbeta = *self.inputs[2];
        const T* g = self.grad.data();
#pragma omp parallel for schedule(static)
        for (std::int64_t c = 0; c < channels; ++c) {
          T sum_g = T(0), sum_gx = T(0);
          for (std::int64_t b = 0; b < batch; ++b)
            for (std::int64_t i = 0; i < inner; ++i) {
              const std::int64_t idx = (b * channels + c) * inner + i;
              sum_g += g[idx];
              sum_gx += g[idx] * xhat[idx];
            }
          if (ng.requires_grad) ng.grad[c] += sum_gx;
          if (nbeta.requires_grad) nbeta.grad[c] += sum_g;
          if (!nx.requires_grad) continue;
          const T gam = ng.value[c];
          if (training) {
            const T scale = gam * inv_std[c] / static_cast<T>(count);
            const T n = static_cast<T>(count);
            for (std::int64_t b = 0; b < batch; ++b)
              for (std::int64_t i = 0; i < inner; ++i) {
                const std::int64_t idx = (b * channels + c) * inner + i;
                nx.grad[idx] += scale * (n * g[idx] - sum_g - xhat[idx] * sum_gx);
              }
          } else {
            const T scale = gam * inv_std[c];
            for (std::int64_t b = 0; b < batch; ++b)
              for (std::int64_t i = 0; i < inner; ++i) {
                const std::int64_t idx = (b * channels + c) * inner + i;
                nx.grad[idx] += scale * g[idx];
              }
          }
        }
      });
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::int64_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d)
    shape_fail("layer_norm", "affine params " + to_string(gamma.shape()) + " do not match last dim " + std::to_string(d));
  const std::int64_t rows = x.numel() / d;
  std::vector<T> xhat(x.data().size());
  std::vector<T> inv_std(static_cast<std::size_t>(rows));
  std::vector<T> out(x.data().size());
  const auto in = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
#pragma omp parallel for schedule(static)
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = in.data() + r * d;
    T mu = T(0);
    for (std::int64_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::int64_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::int64_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mu) * is;
      out[r * d + j] = gv[j] * xhat[r * d + j] + bv[j];
    }
  }
  return make_result<T>(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d](Node<T>& self) {
        auto& nx = *self.inputs[0];
        auto& ng = *self.inputs[1];
        auto& nbeta = *self.inputs[2];
        const T* g = self.grad.data();
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t j = 0; j < d; ++j) {
            if (ng.requires_grad) ng.grad[j] += g[r * d + j] * xhat[r * d + j];
            if (nbeta.requires_grad) nbeta.grad[j] += g[r * d + j];
          }
        if (!nx.requires_grad) return;
#pragma omp parallel for schedule(static)
        for (std::int64_t r = 0; r < rows; ++r) {
          T sum_g = T(0), sum_gx = T(0);
          for (std::int64_t j = 0; j < d; ++j) {
            const T gh = g[r * d + j] * ng.value[j];
            sum_g += gh;
            sum_gx += gh * xhat[r * d + j];
          }
          const T scale = inv_std[r] / static_cast<T>(d);
          for (std::int64_t j = 0; j < d; ++j) {
            const T gh = g[r * d + j] * ng.value[j];
            nx.grad[r * d + j] += scale * (static_cast<T>(d) * gh - sum_g - xhat[r * d + j] * sum_gx);
          }
        }
      });
}

// ------------------------------------------------------------------- pooling

namespace {
void check_pool(const char* op, const Shape& s, int kernel, int stride, int padding) {
  if (s.size() != 3) shape_fail(op, "input must be (B, C, L), got " + to_string(s));
  if (kernel <= 0 || stride <= 0) shape_fail(op, "kernel and stride must be positive");
  if (padding < 0 || 2 * padding > kernel) shape_fail(op, "padding must be in [0, kernel/2]");
  if (kernel > s[2] + 2 * padding)
    shape_fail(op, "kernel " + std::to_string(kernel) + " larger than padded input length " + std::to_string(s[2] + 2 * padding));
}
}  // namespace

template <class T>
Tensor<T> max_pool1d(const Tensor<T>& x, int kernel, int stride, int padding) {
  check_pool("max_pool1d", x.shape(), kernel, stride, padding);
  const std::int64_t planes = x.dim(0) * x.dim(1);
  const std::int64_t len = x.dim(2);
  const std::int64_t out_len = (len + 2 * padding - kernel) / stride + 1;
  std::vector<T> out(static_cast<std::size_t>(planes * out_len));
  std::vector<std::int64_t> arg(out.size());
  const auto in = x.data();
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < planes; ++p)
    for (std::int64_t t = 0; t < out_len; ++t) {
      const std::int64_t lo = std::max<std::int64_t>(0, t * stride - padding);
      const std::int64_t hi = std::min<std::int64_t>(len, t * stride - padding + kernel);
      std::int64_t best = lo;
      for (std::int64_t i = lo + 1; i < hi; ++i) {
        const T c = in[p * len + i], m = in[p * len + best];
        if (c > m || (std::isnan(c) && !std::isnan(m))) best = i;
      }
      out[p * out_len + t] = in[p * len + best];
      arg[p * out_len + t] = p * len + best;
    }
  return make_result<T>("max_pool1d", {x.dim(0), x.dim(1), out_len}, std::move(out), {x},
                        [arg = std::move(arg)](Node<T>& self) {
                          auto& nx = *self.inputs[0];
                          for (std::size_t i = 0; i < arg.size(); ++i) nx.grad[arg[i]] += self.grad[i];
                        });
}

template <class T>
Tensor<T> avg_pool1d(const Tensor<T>& x, int kernel, int stride, int padding) {
  check_pool("avg_pool1d", x.shape(), kernel, stride, padding);
  const std::int64_t planes = x.dim(0) * x.dim(1);
  const std::int64_t len = x.dim(2);
  const std::int64_t out_len = (len + 2 * padding - kernel) / stride + 1;
  std::vector<T> out(static_cast<std::size_t>(planes * out_len));
  const auto in = x.data();
  const T inv = T(1) / static_cast<T>(kernel);
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < planes; ++p)
    for (std::int64_t t = 0; t < out_len; ++t) {
      const std::int64_t lo = std::max<std::int64_t>(0, t * stride - padding);
      const std::int64_t hi = std::min<std::int64_t>(len, t * stride - padding + kernel);
      T acc = T(0);
      for (std::int64_t i = lo; i < hi; ++i) acc += in[p * len + i];
      out[p * out_len + t] = acc * inv;
    }
  return make_result<T>("avg_pool1d", {x.dim(0), x.dim(1), out_len}, std::move(out), {x},
                        [planes, len, out_len, kernel, stride, padding, inv](Node<T>& self) {
                          auto& nx = *self.inputs[0];
                          for (std::int64_t p = 0; p < planes; ++p)
                            for (std::int64_t t = 0; t < out_len; ++t) {
                              const std::int64_t lo = std::max<std::int64_t>(0, t * stride - padding);
                              const std::int64_t hi = std::min<std::int64_t>(len, t * stride - padding + kernel);
                              const T g = self.grad[p * out_len + t] * inv;
                              for (std::int64_t i = lo; i < hi; ++i) nx.grad[p * len + i] += g;
                            }
                        });
}

template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() < 3) shape_fail("global_avg_pool", "input must be (B, C, ...), got " + to_string(x.shape()));
  const std::int64_t planes = x.dim(0) * x.dim(1);
  const std::int64_t inner = x.numel() / planes;
  std::vector<T> out(static_cast<std::size_t>(planes));
  const auto in = x.data();
  const T inv = T(1) / static_cast<T>(inner);
  for (std::int64_t p = 0; p < planes; ++p) {
    T acc = T(0);
    for (std::int64_t i = 0; i < inner; ++i) acc += in[p * inner + i];
    out[p] = acc * inv;
  }
  return make_result<T>("global_avg_pool", {x.dim(0), x.dim(1)}, std::move(out), {x}, [planes, inner, inv](Node<T>& self) {
    auto& nx = *self.inputs[0];
    for (std::int64_t p = 0; p < planes; ++p) {
      const T g = self.grad[p] * inv;
      for (std::int64_t i = 0; i < inner; ++i) nx.grad[p * inner + i] += g;
    }
  });
}

template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw Error("dropout: probability must be in [0, 1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  const T scale = T(1) / static_cast<T>(1.0 - p);
  std::vector<T> mask(x.data().size());
  for (auto& m : mask) m = rng.uniform() < p ? T(0) : scale;
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return make_result<T>(
      "dropout", x.shape(), std::move(out), {x},
      [mask = std::move(mask)](Node<T>& self) {
        auto& nx = *self.inputs[0];
        for (std::size_t i = 0; i < mask.size(); ++i) nx.grad[i] += self.grad[i] * mask[i];
      },
      true);
}

// ------------------------------------------------------------------ layout

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) shape_fail("concat", "no inputs");
  const int rank = parts[0].rank();
  axis = normalize_axis(axis, rank, "concat");
  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    bool ok = p.rank() == rank;
    for (int i = 0; ok && i < rank; ++i) ok = i == axis || p.shape()[i] == parts[0].shape()[i];
    if (!ok) shape_fail("concat", "shape " + to_string(p.shape()) + " incompatible with " + to_string(parts[0].shape()) + " on axis " + std::to_string(axis));
    out_shape[axis] += p.shape()[axis];
  }
  const AxisSplit s = split_at(out_shape, axis);
  std::vector<T> out(static_cast<std::size_t>(numel(out_shape)));
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::int64_t ext = p.shape()[axis];
    const auto pv = p.data();
    for (std::int64_t o = 0; o < s.outer; ++o)
      std::copy_n(pv.begin() + o * ext * s.inner, ext * s.inner, out.begin() + (o * s.extent + off) * s.inner);
    off += ext;
  }
  return make_result<T>("concat", out_shape, std::move(out), parts, [s, offsets, axis](Node<T>& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      auto& np = *self.inputs[k];
      if (!np.requires_grad) continue;
      const std::int64_t ext = np.shape[axis];
      for (std::int64_t o = 0; o < s.outer; ++o)
        for (std::int64_t i = 0; i < ext * s.inner; ++i)
          np.grad[o * ext * s.inner + i] += self.grad[(o * s.extent + offsets[k]) * s.inner + i];
    }
  });
}

template <class T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t length) {
  axis = normalize_axis(axis, x.rank(), "slice");
  const AxisSplit s = split_at(x.shape(), axis);
  if (start < 0 || length <= 0 || start + length > s.extent)
    shape_fail("slice", "range [" + std::to_string(start) + ", " + std::to_string(start + length) + ") outside axis " +
                            std::to_string(axis) + " of " + to_string(x.shape()));
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::vector<T> out(static_cast<std::size_t>(s.outer * length * s.inner));
  const auto in = x.data();
  for (std::int64_t o = 0; o < s.outer; ++o)
    std::copy_n(in.begin() + (o * s.extent + start) * s.inner, length * s.inner, out.begin() + o * length * s.inner);
  return make_result<T>("slice", out_shape, std::move(out), {x}, [s, start, length](Node<T>& self) {
    auto& nx = *self.inputs[0];
    for (std::int64_t o = 0; o < s.outer; ++o)
      for (std::int64_t i = 0; i < length * s.inner; ++i)
        nx.grad[(o * s.extent + start) * s.inner + i] += self.grad[o * length * s.inner + i];
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x, int axis0, int axis1) {
  const int rank = x.rank();
  axis0 = normalize_axis(axis0, rank, "transpose");
  axis1 = normalize_axis(axis1, rank, "transpose");
  if (axis0 == axis1) return x;
  if (axis0 > axis1) std::swap(axis0, axis1);
  // View the tensor as (A, n0, B, n1, C) and swap n0 and n1.
  const Shape& s = x.shape();
  std::int64_t a = 1, mid = 1, c = 1;
  for (int i = 0; i < axis0; ++i) a *= s[i];
  for (int i = axis0 + 1; i < axis1; ++i) mid *= s[i];
  for (int i = axis1 + 1; i < rank; ++i) c *= s[i];
  const std::int64_t n0 = s[axis0], n1 = s[axis1];
  Shape out_shape = s;
  std::swap(out_shape[axis0], out_shape[axis1]);
  auto src_index = [=](std::int64_t ia, std::int64_t i1, std::int64_t im, std::int64_t i0, std::int64_t ic) {
    return (((ia * n0 + i0) * mid + im) * n1 + i1) * c + ic;
  };
  std::vector<T> out(x.data().size());
  const auto in = x.data();
  std::size_t dst = 0;
  for (std::int64_t ia = 0; ia < a; ++ia)
    for (std::int64_t i1 = 0; i1 < n1; ++i1)
      for (std::int64_t im = 0; im < mid; ++im)
        for (std::int64_t i0 = 0; i0 < n0; ++i0) {
          const std::int64_t base = src_index(ia, i1, im, i0, 0);
          for (std::int64_t ic = 0; ic < c; ++ic) out[dst++] = in[base + ic];
        }
  return make_result<T>("transpose", out_shape, std::move(out), {x}, [=](Node<T>& self) {
    auto& nx = *self.inputs[0];
    std::size_t d = 0;
    for (std::int64_t ia = 0; ia < a; ++ia)
      for (std::int64_t i1 = 0; i1 < n1; ++i1)
        for (std::int64_t im = 0; im < mid; ++im)
          for (std::int64_t i0 = 0; i0 < n0; ++i0) {
            const std::int64_t base = src_index(ia, i1, im, i0, 0);
            for (std::int64_t ic = 0; ic < c; ++ic) nx.grad[base + ic] += self.grad[d++];
          }
  });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  std::int64_t known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) shape_fail("reshape", "more than one inferred dimension in " + to_string(shape));
      infer = static_cast<int>(i);
    } else if (shape[i] <= 0) {
      shape_fail("reshape", "invalid dimension in " + to_string(shape));
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || x.numel() % known != 0) shape_fail("reshape", "cannot infer dimension of " + to_string(shape) + " from " + to_string(x.shape()));
    shape[infer] = x.numel() / known;
  }
  if (numel(shape) != x.numel()) shape_fail("reshape", "cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_result<T>("reshape", std::move(shape), std::move(out), {x}, [](Node<T>& self) {
    auto& nx = *self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) nx.grad[i] += self.grad[i];
  });
}

#define ECG_OPS_INSTANTIATE(T)                                                                         \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> affine(const Tensor<T>&, T, T);                                                   \
  template Tensor<T> relu(const Tensor<T>&);                                                           \
  template Tensor<T> elu(const Tensor<T>&, T);                                                         \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                        \
  template Tensor<T> tanh(const Tensor<T>&);                                                           \
  template Tensor<T> softmax(const Tensor<T>&);                                                        \
  template Tensor<T> sum(const Tensor<T>&);                                                            \
  template Tensor<T> mean(const Tensor<T>&);                                                           \
  template Tensor<T> mean_axis(const Tensor<T>&, int);                                                 \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> conv1d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Conv1dOptions);      \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Conv2dOptions);      \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, BatchNormStats<T>*, \
                                bool, T, T);                                                           \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);              \
  template Tensor<T> max_pool1d(const Tensor<T>&, int, int, int);                                      \
  template Tensor<T> avg_pool1d(const Tensor<T>&, int, int, int);                                      \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                                \
  template Tensor<T> dropout(const Tensor<T>&, double, bool, Rng&);                                    \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                       \
  template Tensor<T> slice(const Tensor<T>&, int, std::int64_t, std::int64_t);                         \
  template Tensor<T> transpose(const Tensor<T>&, int, int);                                            \
  template Tensor<T> reshape(const Tensor<T>&, Shape);

ECG_OPS_INSTANTIATE(float)
ECG_OPS_INSTANTIATE(double)

}  // namespace ecg::ad
