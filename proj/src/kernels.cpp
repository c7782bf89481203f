#include "ecg/kernels.hpp"

#include <algorithm>
#include <cstdint>

namespace ecg::kernels {

std::size_t ConvGeometry::input_size() const {
  return static_cast<std::size_t>(batch) * in_channels * in_h * in_w;
}
std::size_t ConvGeometry::weight_size() const {
  return static_cast<std::size_t>(out_channels) * in_per_group() * kernel_h * kernel_w;
}
std::size_t ConvGeometry::output_size() const {
  return static_cast<std::size_t>(batch) * out_channels * out_h() * out_w();
}

namespace {

// Range of output indices o with 0 <= o*stride + k - pad < in, clipped to [0, out).
inline void valid_range(int out, int in, int stride, int k, int pad, int& lo, int& hi) {
  const int shift = k - pad;
  lo = shift >= 0 ? 0 : (-shift + stride - 1) / stride;
  const int last = in - 1 - shift;
  hi = last < 0 ? 0 : std::min(out, last / stride + 1);
  if (lo > hi) lo = hi;
}

}  // namespace

// ----------------------------------------------------------------------------
// Serial reference: one output value at a time, straight from the definition.
// ----------------------------------------------------------------------------
namespace serial {

template <class T>
void conv_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                  std::span<const T> bias, std::span<T> y) {
  const int oh_n = g.out_h(), ow_n = g.out_w();
  const int icg = g.in_per_group(), ocg = g.out_per_group();
  for (int b = 0; b < g.batch; ++b)
    for (int o = 0; o < g.out_channels; ++o)
      for (int oh = 0; oh < oh_n; ++oh)
        for (int ow = 0; ow < ow_n; ++ow) {
          T acc = bias.empty() ? T(0) : bias[o];
          const int grp = o / ocg;
          for (int c = 0; c < icg; ++c)
            for (int kh = 0; kh < g.kernel_h; ++kh)
              for (int kw = 0; kw < g.kernel_w; ++kw) {
                const int ih = oh * g.stride_h + kh - g.pad_top;
                const int iw = ow * g.stride_w + kw - g.pad_left;
                if (ih < 0 || ih >= g.in_h || iw < 0 || iw >= g.in_w) continue;
                const int ci = grp * icg + c;
                acc += w[((static_cast<std::size_t>(o) * icg + c) * g.kernel_h + kh) * g.kernel_w + kw] *
                       x[((static_cast<std::size_t>(b) * g.in_channels + ci) * g.in_h + ih) * g.in_w + iw];
              }
          y[((static_cast<std::size_t>(b) * g.out_channels + o) * oh_n + oh) * ow_n + ow] = acc;
        }
}

template <class T>
void conv_backward_input(const ConvGeometry& g, std::span<const T> gy, std::span<const T> w,
                         std::span<T> gx) {
  const int oh_n = g.out_h(), ow_n = g.out_w();
  const int icg = g.in_per_group(), ocg = g.out_per_group();
  for (int b = 0; b < g.batch; ++b)
    for (int o = 0; o < g.out_channels; ++o)
      for (int oh = 0; oh < oh_n; ++oh)
        for (int ow = 0; ow < ow_n; ++ow) {
          const T go = gy[((static_cast<std::size_t>(b) * g.out_channels + o) * oh_n + oh) * ow_n + ow];
          const int grp = o / ocg;
          for (int c = 0; c < icg; ++c)
            for (int kh = 0; kh < g.kernel_h; ++kh)
              for (int kw = 0; kw < g.kernel_w; ++kw) {
                const int ih = oh * g.stride_h + kh - g.pad_top;
                const int iw = ow * g.stride_w + kw - g.pad_left;
                if (ih < 0 || ih >= g.in_h || iw < 0 || iw >= g.in_w) continue;
                const int ci = grp * icg + c;
                gx[((static_cast<std::size_t>(b) * g.in_channels + ci) * g.in_h + ih) * g.in_w + iw] +=
                    go * w[((static_cast<std::size_t>(o) * icg + c) * g.kernel_h + kh) * g.kernel_w + kw];
              }
        }
}

template <class T>
void conv_backward_weight(const ConvGeometry& g, std::span<const T> gy, std::span<const T> x,
                          std::span<T> gw) {
  const int oh_n = g.out_h(), ow_n = g.out_w();
  const int icg = g.in_per_group(), ocg = g.out_per_group();
  for (int b = 0; b < g.batch; ++b)
    for (int o = 0; o < g.out_channels; ++o)
      for (int oh = 0; oh < oh_n; ++oh)
        for (int ow = 0; ow < ow_n; ++ow) {
          const T go = gy[((static_cast<std::size_t>(b) * g.out_channels + o) * oh_n + oh) * ow_n + ow];
          const int grp = o / ocg;
          for (int c = 0; c < icg; ++c)
            for (int kh = 0; kh < g.kernel_h; ++kh)
              for (int kw = 0; kw < g.kernel_w; ++kw) {
                const int ih = oh * g.stride_h + kh - g.pad_top;
                const int iw = ow * g.stride_w + kw - g.pad_left;
                if (ih < 0 || ih >= g.in_h || iw < 0 || iw >= g.in_w) continue;
                const int ci = grp * icg + c;
                gw[((static_cast<std::size_t>(o) * icg + c) * g.kernel_h + kh) * g.kernel_w + kw] +=
                    go * x[((static_cast<std::size_t>(b) * g.in_channels + ci) * g.in_h + ih) * g.in_w + iw];
              }
        }
}

template <class T>
void gemm(const GemmShape& s, std::span<const T> a, std::span<const T> b, std::span<T> c,
          bool accumulate) {
  const std::size_t sa = static_cast<std::size_t>(s.m) * s.k;
  const std::size_t sb = static_cast<std::size_t>(s.k) * s.n;
  const std::size_t sc = static_cast<std::size_t>(s.m) * s.n;
  for (int bt = 0; bt < s.batch; ++bt)
    for (int i = 0; i < s.m; ++i)
      for (int j = 0; j < s.n; ++j) {
        T acc = T(0);
        for (int p = 0; p < s.k; ++p) {
          const T av = s.trans_a ? a[bt * sa + static_cast<std::size_t>(p) * s.m + i]
                                 : a[bt * sa + static_cast<std::size_t>(i) * s.k + p];
          const T bv = s.trans_b ? b[bt * sb + static_cast<std::size_t>(j) * s.k + p]
                                 : b[bt * sb + static_cast<std::size_t>(p) * s.n + j];
          acc += av * bv;
        }
        T& out = c[bt * sc + static_cast<std::size_t>(i) * s.n + j];
        out = accumulate ? out + acc : acc;
      }
}

}  // namespace serial

// ----------------------------------------------------------------------------
// OpenMP kernels. Loops are reordered so the innermost loop runs over
// contiguous memory with no bounds checks.
// ----------------------------------------------------------------------------
namespace parallel {

template <class T>
void conv_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                  std::span<const T> bias, std::span<T> y) {
  const int oh_n = g.out_h(), ow_n = g.out_w();
  const int icg = g.in_per_group(), ocg = g.out_per_group();
  const std::size_t plane_out = static_cast<std::size_t>(oh_n) * ow_n;
  const std::size_t plane_in = static_cast<std::size_t>(g.in_h) * g.in_w;
  const std::int64_t jobs = static_cast<std::int64_t>(g.batch) * g.out_channels;
#pragma omp parallel for schedule(static)
  for (std::int64_t job = 0; job < jobs; ++job) {
    const int b = static_cast<int>(job / g.out_channels);
    const int o = static_cast<int>(job % g.out_channels);
    const int grp = o / ocg;
    T* yp = y.data() + static_cast<std::size_t>(job) * plane_out;
    std::fill(yp, yp + plane_out, bias.empty() ? T(0) : bias[o]);
    for (int c = 0; c < icg; ++c) {
      const T* xp = x.data() + (static_cast<std::size_t>(b) * g.in_channels + grp * icg + c) * plane_in;
      const T* wp = w.data() + (static_cast<std::size_t>(o) * icg + c) * g.kernel_h * g.kernel_w;
      for (int kh = 0; kh < g.kernel_h; ++kh) {
        int oh_lo, oh_hi;
        valid_range(oh_n, g.in_h, g.stride_h, kh, g.pad_top, oh_lo, oh_hi);
        for (int kw = 0; kw < g.kernel_w; ++kw) {
          const T wv = wp[kh * g.kernel_w + kw];
          int ow_lo, ow_hi;
          valid_range(ow_n, g.in_w, g.stride_w, kw, g.pad_left, ow_lo, ow_hi);
          for (int oh = oh_lo; oh < oh_hi; ++oh) {
            const T* xr = xp + static_cast<std::size_t>(oh * g.stride_h + kh - g.pad_top) * g.in_w + kw - g.pad_left;
            T* yr = yp + static_cast<std::size_t>(oh) * ow_n;
            if (g.stride_w == 1) {
              for (int ow = ow_lo; ow < ow_hi; ++ow) yr[ow] += wv * xr[ow];
            } else {
              for (int ow = ow_lo; ow < ow_hi; ++ow) yr[ow] += wv * xr[ow * g.stride_w];
            }
          }
        }
      }
    }
  }
}

template <class T>
void conv_backward_input(const ConvGeometry& g, std::span<const T> gy, std::span<const T> w,
                         std::span<T> gx) {
  const int oh_n = g.out_h(), ow_n = g.out_w();
  const int icg = g.in_per_group(), ocg = g.out_per_group();
  const std::size_t plane_out = static_cast<std::size_t>(oh_n) * ow_n;
  const std::size_t plane_in = static_cast<std::size_t>(g.in_h) * g.in_w;
  const std::int64_t jobs = static_cast<std::int64_t>(g.batch) * g.in_channels;
#pragma omp parallel for schedule(static)
  for (std::int64_t job = 0; job < jobs; ++job) {
    const int b = static_cast<int>(job / g.in_channels);
    const int ci = static_cast<int>(job % g.in_channels);
    const int grp = ci / icg;
    const int c = ci % icg;
    T* gxp = gx.data() + static_cast<std::size_t>(job) * plane_in;
    for (int ol = 0; ol < ocg; ++ol) {
      const int o = grp * ocg + ol;
      const T* gyp = gy.data() + (static_cast<std::size_t>(b) * g.out_channels + o) * plane_out;
      const T* wp = w.data() + (static_cast<std::size_t>(o) * icg + c) * g.kernel_h * g.kernel_w;
      for (int kh = 0; kh < g.kernel_h; ++kh) {
        int oh_lo, oh_hi;
        valid_range(oh_n, g.in_h, g.stride_h, kh, g.pad_top, oh_lo, oh_hi);
        for (int kw = 0; kw < g.kernel_w; ++kw) {
          const T wv = wp[kh * g.kernel_w + kw];
          int ow_lo, ow_hi;
          valid_range(ow_n, g.in_w, g.stride_w, kw, g.pad_left, ow_lo, ow_hi);
          for (int oh = oh_lo; oh < oh_hi; ++oh) {
            T* xr = gxp + static_cast<std::size_t>(oh * g.stride_h + kh - g.pad_top) * g.in_w + kw - g.pad_left;
            const T* gr = gyp + static_cast<std::size_t>(oh) * ow_n;
            if (g.stride_w == 1) {
              for (int ow = ow_lo; ow < ow_hi; ++ow) xr[ow] += wv * gr[ow];
            } else {
              for (int ow = ow_lo; ow < ow_hi; ++ow) xr[ow * g.stride_w] += wv * gr[ow];
            }
          }
        }
      }
    }
  }
}

template <class T>
void conv_backward_weight(const ConvGeometry& g, std::span<const T> gy, std::span<const T> x,
                          std::span<T> gw) {
  const int oh_n = g.out_h(), ow_n = g.out_w();
  const int icg = g.in_per_group(), ocg = g.out_per_group();
  const std::size_t plane_out = static_cast<std::size_t>(oh_n) * ow_n;
  const std::size_t plane_in = static_cast<std::size_t>(g.in_h) * g.in_w;
  const std::int64_t jobs = static_cast<std::int64_t>(g.out_channels) * icg;
#pragma omp parallel for schedule(static)
  for (std::int64_t job = 0; job < jobs; ++job) {
    const int o = static_cast<int>(job / icg);
    const int c = static_cast<int>(job % icg);
    const int ci = (o / ocg) * icg + c;
    T* gwp = gw.data() + static_cast<std::size_t>(job) * g.kernel_h * g.kernel_w;
    for (int kh = 0; kh < g.kernel_h; ++kh) {
      int oh_lo, oh_hi;
      valid_range(oh_n, g.in_h, g.stride_h, kh, g.pad_top, oh_lo, oh_hi);
      for (int kw = 0; kw < g.kernel_w; ++kw) {
        int ow_lo, ow_hi;
        valid_range(ow_n, g.in_w, g.stride_w, kw, g.pad_left, ow_lo, ow_hi);
        T acc = T(0);
        for (int b = 0; b < g.batch; ++b) {
          const T* gyp = gy.data() + (static_cast<std::size_t>(b) * g.out_channels + o) * plane_out;
          const T* xp = x.data() + (static_cast<std::size_t>(b) * g.in_channels + ci) * plane_in;
          for (int oh = oh_lo; oh < oh_hi; ++oh) {
            const T* xr = xp + static_cast<std::size_t>(oh * g.stride_h + kh - g.pad_top) * g.in_w + kw - g.pad_left;
            const T* gr = gyp + static_cast<std::size_t>(oh) * ow_n;
            if (g.stride_w == 1) {
              for (int ow = ow_lo; ow < ow_hi; ++ow) acc += gr[ow] * xr[ow];
            } else {
              for (int ow = ow_lo; ow < ow_hi; ++ow) acc += gr[ow] * xr[ow * g.stride_w];
            }
          }
        }
        gwp[kh * g.kernel_w + kw] += acc;
      }
    }
  }
}

template <class T>
void gemm(const GemmShape& s, std::span<const T> a, std::span<const T> b, std::span<T> c,
          bool accumulate) {
  const std::size_t sa = static_cast<std::size_t>(s.m) * s.k;
  const std::size_t sb = static_cast<std::size_t>(s.k) * s.n;
  const std::size_t sc = static_cast<std::size_t>(s.m) * s.n;
  const std::int64_t rows = static_cast<std::int64_t>(s.batch) * s.m;
#pragma omp parallel for schedule(static)
  for (std::int64_t row = 0; row < rows; ++row) {
    const std::size_t bt = static_cast<std::size_t>(row / s.m);
    const int i = static_cast<int>(row % s.m);
    T* cr = c.data() + bt * sc + static_cast<std::size_t>(i) * s.n;
    const T* ab = a.data() + bt * sa;
    const T* bb = b.data() + bt * sb;
    if (!accumulate) std::fill(cr, cr + s.n, T(0));
    if (s.trans_b) {
      for (int j = 0; j < s.n; ++j) {
        const T* br = bb + static_cast<std::size_t>(j) * s.k;
        T acc = T(0);
        if (s.trans_a) {
          for (int p = 0; p < s.k; ++p) acc += ab[static_cast<std::size_t>(p) * s.m + i] * br[p];
        } else {
          const T* ar = ab + static_cast<std::size_t>(i) * s.k;
          for (int p = 0; p < s.k; ++p) acc += ar[p] * br[p];
        }
        cr[j] += acc;
      }
    } else {
      for (int p = 0; p < s.k; ++p) {
        const T av = s.trans_a ? ab[static_cast<std::size_t>(p) * s.m + i] : ab[static_cast<std::size_t>(i) * s.k + p];
        const T* br = bb + static_cast<std::size_t>(p) * s.n;
        for (int j = 0; j < s.n; ++j) cr[j] += av * br[j];
      }
    }
  }
}

}  // namespace parallel

#define ECG_INSTANTIATE(NS, T)                                                                      \
  template void NS::conv_forward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,   \
                                    std::span<const T>, std::span<T>);                             \
  template void NS::conv_backward_input<T>(const ConvGeometry&, std::span<const T>,                \
                                           std::span<const T>, std::span<T>);                      \
  template void NS::conv_backward_weight<T>(const ConvGeometry&, std::span<const T>,               \
                                            std::span<const T>, std::span<T>);                     \
  template void NS::gemm<T>(const GemmShape&, std::span<const T>, std::span<const T>, std::span<T>, \
                            bool);

ECG_INSTANTIATE(serial, float)
ECG_INSTANTIATE(serial, double)
ECG_INSTANTIATE(parallel, float)
ECG_INSTANTIATE(parallel, double)

}  // namespace ecg::kernels
