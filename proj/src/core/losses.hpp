#pragma once

// Training objectives: cross-entropy segmentation loss over labeled
// points and the cross-modal KL mimicry loss. Both are fused tape nodes
// with analytic backward passes.

#include <cstdint>
#include <vector>

#include "tensor.hpp"

namespace mm {

// L = -(1/N') sum over non-ignore points of log softmax(logits)[label].
// Labels use -1 as the ignore value.
template <class T>
TensorT<T> seg_loss(const TensorT<T>& logits, const std::vector<std::int32_t>& labels) {
  if (logits.rank() != 2) throw UsageError("seg_loss: logits must be [N,C]");
  std::size_t n = static_cast<std::size_t>(logits.dim(0));
  int c = logits.dim(1);
  if (labels.size() != n) throw UsageError("seg_loss: label count does not match logits rows");

  const T* pl = logits.data();
  std::size_t valid = 0;
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::int32_t lab = labels[i];
    if (lab < 0) continue;
    if (lab >= c) throw UsageError("seg_loss: label out of range");
    const T* row = pl + i * static_cast<std::size_t>(c);
    T mx = row[0];
    for (int k = 1; k < c; ++k) mx = std::max(mx, row[k]);
    if (!std::isfinite(static_cast<double>(mx))) throw NumericError("seg_loss: non-finite logits");
    T sum = 0;
    for (int k = 0; k < c; ++k) sum += std::exp(row[k] - mx);
    acc -= static_cast<double>(row[lab] - mx - std::log(sum));
    ++valid;
  }
  if (valid == 0) throw NumericError("seg_loss undefined: every label is ignored");
  TensorT<T> out = TensorT<T>::scalar(static_cast<T>(acc / static_cast<double>(valid)));

  auto sl = logits.storage();
  return attach_node<T>(out, {logits}, [sl, labels, c, valid](Storage<T>* o) {
    ensure_grad(*sl);
    T g = o->grad[0] / static_cast<T>(valid);
    std::size_t n = labels.size();
    for (std::size_t i = 0; i < n; ++i) {
      std::int32_t lab = labels[i];
      if (lab < 0) continue;
      const T* row = sl->data.data() + i * static_cast<std::size_t>(c);
      T* grow = sl->grad.data() + i * static_cast<std::size_t>(c);
      T mx = row[0];
      for (int k = 1; k < c; ++k) mx = std::max(mx, row[k]);
      T sum = 0;
      for (int k = 0; k < c; ++k) sum += std::exp(row[k] - mx);
      for (int k = 0; k < c; ++k) {
        T p = std::exp(row[k] - mx) / sum;
        grow[k] += g * (p - (k == lab ? T(1) : T(0)));
      }
    }
  });
}

// L = (1/N) sum_n sum_c P log(P / Q), Q = softmax(q_logits). P rows must
// be distributions; a zero row is a contract violation. Gradient flows
// into q_logits always, and into P only if P itself requires it (the
// trainer passes a detached P by default).
template <class T>
TensorT<T> xm_loss(const TensorT<T>& target_probs, const TensorT<T>& mimic_logits) {
  if (target_probs.rank() != 2 || mimic_logits.rank() != 2)
    throw UsageError("xm_loss: inputs must be [N,C]");
  if (target_probs.shape() != mimic_logits.shape())
    throw UsageError("xm_loss: shape mismatch " + shape_str(target_probs.shape()) + " vs " +
                     shape_str(mimic_logits.shape()));
  std::size_t n = static_cast<std::size_t>(target_probs.dim(0));
  int c = target_probs.dim(1);
  if (n == 0) throw UsageError("xm_loss: empty batch");

  const T* pp = target_probs.data();
  const T* pq = mimic_logits.data();
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T* prow = pp + i * static_cast<std::size_t>(c);
    const T* qrow = pq + i * static_cast<std::size_t>(c);
    T psum = 0;
    for (int k = 0; k < c; ++k) psum += prow[k];
    if (!(psum > T(1e-6))) throw UsageError("xm_loss: zero row in target distribution");
    T mx = qrow[0];
    for (int k = 1; k < c; ++k) mx = std::max(mx, qrow[k]);
    if (!std::isfinite(static_cast<double>(mx))) throw NumericError("xm_loss: non-finite logits");
    T esum = 0;
    for (int k = 0; k < c; ++k) esum += std::exp(qrow[k] - mx);
    T lse = mx + std::log(esum);
    for (int k = 0; k < c; ++k) {
      T p = prow[k];
      if (p <= T(0)) continue;  // lim p->0 of p log p = 0
      acc += static_cast<double>(p) * (std::log(static_cast<double>(p)) -
                                       static_cast<double>(qrow[k] - lse));
    }
  }
  TensorT<T> out = TensorT<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));

  auto sp = target_probs.storage(), sq = mimic_logits.storage();
  return attach_node<T>(out, {target_probs, mimic_logits}, [sp, sq, n, c](Storage<T>* o) {
    T g = o->grad[0] / static_cast<T>(n);
    bool want_q = sq->requires_grad || sq->node;
    bool want_p = sp->requires_grad || sp->node;
    if (want_q) ensure_grad(*sq);
    if (want_p) ensure_grad(*sp);
    for (std::size_t i = 0; i < n; ++i) {
      const T* prow = sp->data.data() + i * static_cast<std::size_t>(c);
      const T* qrow = sq->data.data() + i * static_cast<std::size_t>(c);
      T psum = 0;
      for (int k = 0; k < c; ++k) psum += prow[k];
      T mx = qrow[0];
      for (int k = 1; k < c; ++k) mx = std::max(mx, qrow[k]);
      T esum = 0;
      for (int k = 0; k < c; ++k) esum += std::exp(qrow[k] - mx);
      T lse = mx + std::log(esum);
      if (want_q) {
        T* qg = sq->grad.data() + i * static_cast<std::size_t>(c);
        for (int k = 0; k < c; ++k) {
          T softq = std::exp(qrow[k] - lse);
          qg[k] += g * (psum * softq - prow[k]);
        }
      }
      if (want_p) {
        T* pg = sp->grad.data() + i * static_cast<std::size_t>(c);
        for (int k = 0; k < c; ++k) {
          if (prow[k] <= T(0)) continue;
          pg[k] += g * (std::log(prow[k]) + T(1) - (qrow[k] - lse));
        }
      }
    }
  });
}

// Elementwise mean of two row-stochastic matrices. Rows are checked to
// sum to 1 within 1e-4.
template <class T>
TensorT<T> fuse(const TensorT<T>& p2d, const TensorT<T>& p3d) {
  if (p2d.rank() != 2 || p3d.rank() != 2 || p2d.shape() != p3d.shape())
    throw UsageError("fuse: inputs must be matching [N,C] probability matrices");
  int c = p2d.dim(1);
  auto check_rows = [&](const TensorT<T>& p, const char* which) {
    const T* d = p.data();
    for (int r = 0; r < p.dim(0); ++r) {
      T s = 0;
      for (int k = 0; k < c; ++k) s += d[static_cast<std::size_t>(r) * c + k];
      if (std::fabs(static_cast<double>(s) - 1.0) > 1e-4)
        throw UsageError(std::string("fuse: ") + which + " row " + std::to_string(r) +
                         " does not sum to 1");
    }
  };
  check_rows(p2d, "first input");
  check_rows(p3d, "second input");
  return scale(add(p2d, p3d), T(0.5));
}

}  // namespace mm
