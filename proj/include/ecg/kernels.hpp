#pragma once

#include <cstddef>
#include <span>

// Dense compute kernels behind the tensor primitives.
//
// Every kernel exists twice: `serial::` is the plain textbook loop nest kept as
// the reference, `parallel::` is the OpenMP version the engine actually calls.
// Parallel kernels assign each output element to exactly one iteration of the
// outer parallel loop and accumulate in a fixed order, so their results do not
// depend on the thread count.

namespace ecg::kernels {

/// Geometry of a grouped 2D convolution over NCHW tensors. 1D convolution is
/// the special case height = kernel_h = 1.
struct ConvGeometry {
  int batch = 1;
  int in_channels = 1;
  int out_channels = 1;
  int groups = 1;
  int in_h = 1;
  int in_w = 1;
  int kernel_h = 1;
  int kernel_w = 1;
  int stride_h = 1;
  int stride_w = 1;
  int pad_top = 0;
  int pad_bottom = 0;
  int pad_left = 0;
  int pad_right = 0;

  int out_h() const { return (in_h + pad_top + pad_bottom - kernel_h) / stride_h + 1; }
  int out_w() const { return (in_w + pad_left + pad_right - kernel_w) / stride_w + 1; }
  int in_per_group() const { return in_channels / groups; }
  int out_per_group() const { return out_channels / groups; }
  std::size_t input_size() const;
  std::size_t weight_size() const;
  std::size_t output_size() const;
};

/// Row-major C[m x n] (+)= op(A) * op(B), repeated over `batch` independent
/// matrices laid out contiguously.
struct GemmShape {
  int batch = 1;
  int m = 1;
  int n = 1;
  int k = 1;
  bool trans_a = false;  // A stored as [k x m]
  bool trans_b = false;  // B stored as [n x k]
};

#define ECG_KERNEL_DECLS                                                                        \
  template <class T>                                                                            \
  void conv_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,          \
                    std::span<const T> bias, std::span<T> y);                                   \
  template <class T>                                                                            \
  void conv_backward_input(const ConvGeometry& g, std::span<const T> gy, std::span<const T> w,  \
                           std::span<T> gx);                                                    \
  template <class T>                                                                            \
  void conv_backward_weight(const ConvGeometry& g, std::span<const T> gy, std::span<const T> x, \
                            std::span<T> gw);                                                   \
  template <class T>                                                                            \
  void gemm(const GemmShape& s, std::span<const T> a, std::span<const T> b, std::span<T> c,    \
            bool accumulate);

namespace serial {
ECG_KERNEL_DECLS
}  // namespace serial

namespace parallel {
ECG_KERNEL_DECLS
}  // namespace parallel

#undef ECG_KERNEL_DECLS

}  // namespace ecg::kernels
