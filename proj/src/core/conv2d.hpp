#pragma once

// Dense 2D convolution (cross-correlation convention) and its adjoint.
// Direct loops structured around a per-row accumulator: each output (or
// input-gradient) row is reduced in a local buffer across the full
// (channel, tap) reduction, then stored once.

#include "tensor.hpp"

namespace mm {

struct ConvDims {
  int batch, cin, h, w;
  int cout, kh, kw;
  int ho, wo;
  int stride, padding;
};

namespace detail {

// Valid output range [lo, hi] such that o*stride + k - padding lies in [0, extent).
inline void conv_out_range(int extent, int out_extent, int stride, int padding, int k,
                           int& lo, int& hi) {
  lo = 0;
  if (k < padding) lo = (padding - k + stride - 1) / stride;
  int num = extent - 1 + padding - k;
  hi = num >= 0 ? std::min(out_extent - 1, num / stride) : -1;
}

template <class T>
ConvDims conv2d_dims(const TensorT<T>& input, const TensorT<T>& kernel, int stride, int padding,
                     bool require_odd) {
  if (input.rank() != 4) throw UsageError("conv2d: input must be [B,Cin,H,W]");
  if (kernel.rank() != 4) throw UsageError("conv2d: kernel must be rank 4");
  if (stride < 1) throw UsageError("conv2d: stride must be >= 1");
  if (padding < 0) throw UsageError("conv2d: padding must be >= 0");
  ConvDims d;
  d.batch = input.dim(0);
  d.cin = input.dim(1);
  d.h = input.dim(2);
  d.w = input.dim(3);
  d.kh = kernel.dim(2);
  d.kw = kernel.dim(3);
  d.stride = stride;
  d.padding = padding;
  if (require_odd && (d.kh % 2 == 0 || d.kw % 2 == 0))
    throw UsageError("conv2d: kernel extents must be odd");
  return d;
}

// Repacks a [Cout][Cin*kh*kw] kernel to [tap][Cout] so the innermost
// loops can run contiguously over the output channels.
template <class T>
std::vector<T> pack_kernel(const ConvDims& d, const T* k) {
  int taps = d.cin * d.kh * d.kw;
  std::vector<T> kt(static_cast<std::size_t>(taps) * d.cout);
  for (int co = 0; co < d.cout; ++co)
    for (int t = 0; t < taps; ++t)
      kt[static_cast<std::size_t>(t) * d.cout + co] = k[static_cast<std::size_t>(co) * taps + t];
  return kt;
}

// Output gradient planes transposed to [pixel][Cout].
template <class T>
void pack_pixels(const T* planes, int channels, std::size_t plane, std::vector<T>& out) {
  out.resize(plane * static_cast<std::size_t>(channels));
  for (int c = 0; c < channels; ++c)
    for (std::size_t p = 0; p < plane; ++p)
      out[p * static_cast<std::size_t>(channels) + c] = planes[static_cast<std::size_t>(c) * plane + p];
}

// Per output pixel: a [Cout]-wide accumulator updated once per (ci,tap).
// With `accumulate` the result is added onto the destination.
template <class T>
void conv2d_forward(const ConvDims& d, const T* in, const T* k, const T* bias, T* out,
                    bool accumulate = false) {
  const std::size_t in_plane = static_cast<std::size_t>(d.h) * d.w;
  const std::size_t out_plane = static_cast<std::size_t>(d.ho) * d.wo;
  const int cout = d.cout;
  std::vector<T> kt = pack_kernel(d, k);
  std::vector<T> acc(static_cast<std::size_t>(cout));
  for (int b = 0; b < d.batch; ++b) {
    const T* ibatch = in + static_cast<std::size_t>(b) * d.cin * in_plane;
    T* obatch = out + static_cast<std::size_t>(b) * cout * out_plane;
    for (int oh = 0; oh < d.ho; ++oh)
      for (int ow = 0; ow < d.wo; ++ow) {
        if (bias) {
          std::copy(bias, bias + cout, acc.begin());
        } else {
          std::fill(acc.begin(), acc.end(), T(0));
        }
        for (int ci = 0; ci < d.cin; ++ci) {
          const T* iplane = ibatch + static_cast<std::size_t>(ci) * in_plane;
          for (int khi = 0; khi < d.kh; ++khi) {
            int ih = oh * d.stride + khi - d.padding;
            if (ih < 0 || ih >= d.h) continue;
            const T* irow = iplane + static_cast<std::size_t>(ih) * d.w;
            const T* ktrow = kt.data() + (static_cast<std::size_t>(ci) * d.kh + khi) * d.kw * cout;
            for (int kwi = 0; kwi < d.kw; ++kwi) {
              int iw = ow * d.stride + kwi - d.padding;
              if (iw < 0 || iw >= d.w) continue;
              T xv = irow[iw];
              if (xv == T(0)) continue;
              const T* __restrict kvec = ktrow + static_cast<std::size_t>(kwi) * cout;
              T* __restrict accp = acc.data();
              for (int co = 0; co < cout; ++co) accp[co] += xv * kvec[co];
            }
          }
        }
        std::size_t pix = static_cast<std::size_t>(oh) * d.wo + ow;
        if (accumulate) {
          for (int co = 0; co < cout; ++co)
            obatch[static_cast<std::size_t>(co) * out_plane + pix] += acc[static_cast<std::size_t>(co)];
        } else {
          for (int co = 0; co < cout; ++co)
            obatch[static_cast<std::size_t>(co) * out_plane + pix] = acc[static_cast<std::size_t>(co)];
        }
      }
  }
}

// Backward: the output gradient is transposed to [pixel][Cout] once, so
// both the input-gradient dots and the weight-gradient updates run
// contiguously over the output channels.
template <class T>
void conv2d_backward(const ConvDims& d, const T* in, const T* k, const T* gout, T* gin, T* gk,
                     T* gbias) {
  const std::size_t in_plane = static_cast<std::size_t>(d.h) * d.w;
  const std::size_t out_plane = static_cast<std::size_t>(d.ho) * d.wo;
  const int cout = d.cout;
  const int taps = d.cin * d.kh * d.kw;
  std::vector<T> kt;
  if (gin) kt = pack_kernel(d, k);
  std::vector<T> gt;
  std::vector<T> gwt;
  if (gk) gwt.assign(static_cast<std::size_t>(taps) * cout, T(0));

  for (int b = 0; b < d.batch; ++b) {
    const T* gbatch = gout + static_cast<std::size_t>(b) * cout * out_plane;
    pack_pixels(gbatch, cout, out_plane, gt);

    if (gin) {
      T* gibatch = gin + static_cast<std::size_t>(b) * d.cin * in_plane;
      for (int ci = 0; ci < d.cin; ++ci) {
        const T* ktc = kt.data() + static_cast<std::size_t>(ci) * d.kh * d.kw * cout;
        T* giplane = gibatch + static_cast<std::size_t>(ci) * in_plane;
        for (int ih = 0; ih < d.h; ++ih)
          for (int iw = 0; iw < d.w; ++iw) {
            T acc = 0;
            for (int khi = 0; khi < d.kh; ++khi) {
              int num_h = ih - khi + d.padding;
              if (num_h < 0 || num_h % d.stride) continue;
              int oh = num_h / d.stride;
              if (oh >= d.ho) continue;
              for (int kwi = 0; kwi < d.kw; ++kwi) {
                int num_w = iw - kwi + d.padding;
                if (num_w < 0 || num_w % d.stride) continue;
                int ow = num_w / d.stride;
                if (ow >= d.wo) continue;
                const T* __restrict kvec = ktc + (static_cast<std::size_t>(khi) * d.kw + kwi) * cout;
                const T* __restrict gvec =
                    gt.data() + (static_cast<std::size_t>(oh) * d.wo + ow) * cout;
                T dot = 0;
                for (int co = 0; co < cout; ++co) dot += kvec[co] * gvec[co];
                acc += dot;
              }
            }
            giplane[static_cast<std::size_t>(ih) * d.w + iw] += acc;
          }
      }
    }

    if (gk) {
      const T* ibatch = in + static_cast<std::size_t>(b) * d.cin * in_plane;
      for (int oh = 0; oh < d.ho; ++oh)
        for (int ow = 0; ow < d.wo; ++ow) {
          const T* gvec = gt.data() + (static_cast<std::size_t>(oh) * d.wo + ow) * cout;
          for (int ci = 0; ci < d.cin; ++ci) {
            const T* iplane = ibatch + static_cast<std::size_t>(ci) * in_plane;
            for (int khi = 0; khi < d.kh; ++khi) {
              int ih = oh * d.stride + khi - d.padding;
              if (ih < 0 || ih >= d.h) continue;
              const T* irow = iplane + static_cast<std::size_t>(ih) * d.w;
              T* gw = gwt.data() + (static_cast<std::size_t>(ci) * d.kh + khi) * d.kw * cout;
              for (int kwi = 0; kwi < d.kw; ++kwi) {
                int iw = ow * d.stride + kwi - d.padding;
                if (iw < 0 || iw >= d.w) continue;
                T xv = irow[iw];
                if (xv == T(0)) continue;
                T* __restrict gwvec = gw + static_cast<std::size_t>(kwi) * cout;
                const T* __restrict gvecr = gvec;
                for (int co = 0; co < cout; ++co) gwvec[co] += xv * gvecr[co];
              }
            }
          }
        }
    }

    if (gbias) {
      for (std::size_t p = 0; p < out_plane; ++p) {
        const T* gvec = gt.data() + p * static_cast<std::size_t>(cout);
        for (int co = 0; co < cout; ++co) gbias[co] += gvec[co];
      }
    }
  }

  if (gk) {
    for (int co = 0; co < cout; ++co)
      for (int t = 0; t < taps; ++t)
        gk[static_cast<std::size_t>(co) * taps + t] +=
            gwt[static_cast<std::size_t>(t) * cout + co];
  }
}

}  // namespace detail

// input [B,Cin,H,W], kernel [Cout,Cin,kh,kw], optional bias [Cout].
template <class T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& kernel, const TensorT<T>& bias,
                  int stride, int padding) {
  ConvDims d = detail::conv2d_dims(input, kernel, stride, padding, /*require_odd=*/true);
  d.cout = kernel.dim(0);
  if (kernel.dim(1) != d.cin)
    throw UsageError("conv2d: kernel input channels " + std::to_string(kernel.dim(1)) +
                     " do not match input channels " + std::to_string(d.cin));
  if (d.h + 2 * d.padding < d.kh || d.w + 2 * d.padding < d.kw)
    throw UsageError("conv2d: kernel larger than padded input");
  d.ho = (d.h + 2 * d.padding - d.kh) / d.stride + 1;
  d.wo = (d.w + 2 * d.padding - d.kw) / d.stride + 1;
  bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != d.cout))
    throw UsageError("conv2d: bias shape mismatch");

  TensorT<T> out = TensorT<T>::zeros({d.batch, d.cout, d.ho, d.wo});
  detail::conv2d_forward(d, input.data(), kernel.data(), has_bias ? bias.data() : nullptr,
                         out.data());

  auto si = input.storage(), sk = kernel.storage();
  auto sb = has_bias ? bias.storage() : nullptr;
  std::vector<TensorT<T>> inputs{input, kernel};
  if (has_bias) inputs.push_back(bias);
  return attach_node<T>(out, inputs, [si, sk, sb, d](Storage<T>* o) {
    bool want_in = si->requires_grad || si->node;
    bool want_k = sk->requires_grad || sk->node;
    bool want_b = sb && (sb->requires_grad || sb->node);
    if (want_in) ensure_grad(*si);
    if (want_k) ensure_grad(*sk);
    if (want_b) ensure_grad(*sb);
    detail::conv2d_backward(d, si->data.data(), sk->data.data(), o->grad.data(),
                            want_in ? si->grad.data() : nullptr,
                            want_k ? sk->grad.data() : nullptr,
                            want_b ? sb->grad.data() : nullptr);
  });
}

template <class T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& kernel, int stride, int padding) {
  return conv2d(input, kernel, TensorT<T>(), stride, padding);
}

// Adjoint of conv2d: input [B,Cin,H,W], kernel [Cin,Cout,kh,kw]. With the
// same kernel tensor, <conv2d(a,k), b> == <a, conv2d_transpose(b,k)>.
// Even kernel extents are allowed here (2x2/stride-2 upsampling). The
// implementation runs conv2d_forward/backward with the roles of the two
// spaces swapped: transpose-forward is conv-backward-input and vice versa.
template <class T>
TensorT<T> conv2d_transpose(const TensorT<T>& input, const TensorT<T>& kernel,
                            const TensorT<T>& bias, int stride, int padding) {
  ConvDims d = detail::conv2d_dims(input, kernel, stride, padding, /*require_odd=*/false);
  if (kernel.dim(0) != d.cin)
    throw UsageError("conv2d_transpose: kernel rows " + std::to_string(kernel.dim(0)) +
                     " do not match input channels " + std::to_string(d.cin));
  d.cout = kernel.dim(1);
  int out_h = (d.h - 1) * d.stride - 2 * d.padding + d.kh;
  int out_w = (d.w - 1) * d.stride - 2 * d.padding + d.kw;
  if (out_h <= 0 || out_w <= 0) throw UsageError("conv2d_transpose: empty output");
  bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != d.cout))
    throw UsageError("conv2d_transpose: bias shape mismatch");

  // Swapped dims: the "conv" view maps the transpose output back to the
  // transpose input, with Cin/Cout exchanged.
  ConvDims cd;
  cd.batch = d.batch;
  cd.cin = d.cout;     // transpose output channels
  cd.h = out_h;
  cd.w = out_w;
  cd.cout = d.cin;     // transpose input channels
  cd.kh = d.kh;
  cd.kw = d.kw;
  cd.ho = d.h;
  cd.wo = d.w;
  cd.stride = d.stride;
  cd.padding = d.padding;

  // Kernel layout for the conv view is [cd.cout=Cin_t, cd.cin=Cout_t, kh, kw],
  // exactly the transpose kernel layout.
  TensorT<T> out = TensorT<T>::zeros({d.batch, d.cout, out_h, out_w});
  detail::conv2d_backward<T>(cd, nullptr, kernel.data(), input.data(), out.data(),
                          /*gk=*/nullptr, /*gbias=*/nullptr);
  if (has_bias) {
    T* po = out.data();
    const std::size_t plane = static_cast<std::size_t>(out_h) * out_w;
    for (int b = 0; b < d.batch; ++b)
      for (int co = 0; co < d.cout; ++co) {
        T bv = bias.data()[co];
        T* p = po + (static_cast<std::size_t>(b) * d.cout + co) * plane;
        for (std::size_t i = 0; i < plane; ++i) p[i] += bv;
      }
  }

  auto si = input.storage(), sk = kernel.storage();
  auto sb = has_bias ? bias.storage() : nullptr;
  std::vector<TensorT<T>> inputs{input, kernel};
  if (has_bias) inputs.push_back(bias);
  return attach_node<T>(out, inputs, [si, sk, sb, cd, d](Storage<T>* o) {
    bool want_in = si->requires_grad || si->node;
    bool want_k = sk->requires_grad || sk->node;
    bool want_b = sb && (sb->requires_grad || sb->node);
    if (want_in) ensure_grad(*si);
    if (want_k) ensure_grad(*sk);
    if (want_b) ensure_grad(*sb);
    // dIn of the transpose = conv view forward over the output gradient.
    if (want_in)
      detail::conv2d_forward<T>(cd, o->grad.data(), sk->data.data(), nullptr, si->grad.data(),
                             /*accumulate=*/true);
    // dW: conv-view weight gradient with (in = output grad, gout = input).
    if (want_k)
      detail::conv2d_backward<T>(cd, o->grad.data(), sk->data.data(), si->data.data(), nullptr,
                              sk->grad.data(), nullptr);
    if (want_b) {
      const std::size_t plane = static_cast<std::size_t>(cd.h) * cd.w;
      for (int b = 0; b < d.batch; ++b)
        for (int co = 0; co < d.cout; ++co) {
          const T* g = o->grad.data() + (static_cast<std::size_t>(b) * d.cout + co) * plane;
          T acc = 0;
          for (std::size_t i = 0; i < plane; ++i) acc += g[i];
          sb->grad[static_cast<std::size_t>(co)] += acc;
        }
    }
  });
}

template <class T>
TensorT<T> conv2d_transpose(const TensorT<T>& input, const TensorT<T>& kernel, int stride,
                            int padding) {
  return conv2d_transpose(input, kernel, TensorT<T>(), stride, padding);
}

}  // namespace mm
