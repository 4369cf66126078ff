#pragma once

// Dense tensors with reverse-mode automatic differentiation.
//
// Tensors are value types sharing a Storage. Every op is functional: it
// allocates a fresh output and, when gradients are wanted, records a node
// holding the backward closure. Node ids grow monotonically with creation
// order, so processing reachable nodes by descending id replays the tape
// in exact reverse topological order. The graph is freed after backward.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "common.hpp"
#include "rng.hpp"

namespace mm {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d < 0) throw UsageError("negative dimension in shape");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// Thread-local switch: inference paths disable graph recording entirely.
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev_; }
  bool prev_;
};

template <class T>
struct Storage;

template <class T>
struct Node {
  std::int64_t id = 0;
  bool consumed = false;
  std::vector<std::shared_ptr<Storage<T>>> inputs;
  // Reads out->grad and accumulates into the inputs' grads. The raw output
  // pointer is safe: a node is only reachable through its output storage.
  std::function<void(Storage<T>*)> backward;
};

template <class T>
struct Storage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first touched by backward
  bool requires_grad = false;
  std::shared_ptr<Node<T>> node;  // null for leaves
};

inline std::int64_t next_node_id() {
  static std::atomic<std::int64_t> counter{1};
  return counter.fetch_add(1);
}

template <class T>
void ensure_grad(Storage<T>& st) {
  if (st.grad.size() != st.data.size()) st.grad.assign(st.data.size(), T(0));
}

template <class T>
class TensorT {
 public:
  using Scalar = T;

  TensorT() = default;

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }

  static TensorT filled(Shape shape, T value, bool requires_grad = false) {
    TensorT t;
    t.s_ = std::make_shared<Storage<T>>();
    t.s_->shape = std::move(shape);
    t.s_->data.assign(shape_numel(t.s_->shape), value);
    t.s_->requires_grad = requires_grad;
    return t;
  }

  static TensorT from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw UsageError("tensor data size does not match shape " + shape_str(shape));
    TensorT t;
    t.s_ = std::make_shared<Storage<T>>();
    t.s_->shape = std::move(shape);
    t.s_->data = std::move(data);
    t.s_->requires_grad = requires_grad;
    return t;
  }

  static TensorT scalar(T value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  static TensorT randn(Shape shape, Rng& rng, T stddev = T(1), bool requires_grad = false) {
    TensorT t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.s_->data) v = static_cast<T>(rng.normal()) * stddev;
    return t;
  }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  int dim(int i) const { return s_->shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(s_->shape.size()); }
  std::size_t numel() const { return s_->data.size(); }

  T* data() { return s_->data.data(); }
  const T* data() const { return s_->data.data(); }
  std::vector<T>& vec() { return s_->data; }
  const std::vector<T>& vec() const { return s_->data; }

  T item() const {
    if (numel() != 1) throw UsageError("item() called on non-scalar tensor " + shape_str(shape()));
    return s_->data[0];
  }

  bool requires_grad() const { return s_ && s_->requires_grad; }
  TensorT& set_requires_grad(bool v) {
    s_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return s_ && !s_->grad.empty(); }
  const std::vector<T>& grad() const { return s_->grad; }
  std::vector<T>& grad() { return s_->grad; }
  void zero_grad() { if (s_) s_->grad.clear(); }

  // Same values, no graph, no gradient requirement.
  TensorT detach() const {
    TensorT t;
    t.s_ = std::make_shared<Storage<T>>();
    t.s_->shape = s_->shape;
    t.s_->data = s_->data;
    return t;
  }

  TensorT clone() const {
    TensorT t = detach();
    t.s_->requires_grad = s_->requires_grad;
    return t;
  }

  std::shared_ptr<Storage<T>> storage() const { return s_; }

 private:
  std::shared_ptr<Storage<T>> s_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

// ---------------------------------------------------------------------------
// Graph construction

template <class T>
bool any_requires_grad(const std::vector<TensorT<T>>& inputs) {
  for (const auto& t : inputs)
    if (t.requires_grad() || (t.storage() && t.storage()->node)) return true;
  return false;
}

// Wraps a freshly computed output: records the node when recording is on
// and some input participates in differentiation.
template <class T>
TensorT<T> attach_node(TensorT<T> out, const std::vector<TensorT<T>>& inputs,
                       std::function<void(Storage<T>*)> backward) {
  if (!grad_mode_flag() || !any_requires_grad(inputs)) return out;
  auto node = std::make_shared<Node<T>>();
  node->id = next_node_id();
  node->inputs.reserve(inputs.size());
  for (const auto& t : inputs) node->inputs.push_back(t.storage());
  node->backward = std::move(backward);
  out.storage()->node = node;
  out.storage()->requires_grad = true;
  return out;
}

// Reverse pass from a scalar. Collects the reachable subgraph, seeds the
// root gradient with 1 and replays nodes by descending id. Closures and
// saved inputs are released afterwards; calling backward twice on the same
// graph is a usage error.
template <class T>
void backward(const TensorT<T>& root) {
  if (!root.defined()) throw UsageError("backward on undefined tensor");
  if (root.numel() != 1)
    throw UsageError("backward requires a scalar, got shape " + shape_str(root.shape()));
  auto root_st = root.storage();
  if (root_st->node && root_st->node->consumed)
    throw UsageError("backward called twice on the same graph; rerun the forward pass");

  ensure_grad(*root_st);
  root_st->grad[0] += T(1);
  if (!root_st->node) return;  // leaf scalar

  // DFS over input edges; creation ids of inputs are always smaller than
  // the consumer's, so sorting by id descending is reverse topological.
  // Shared pointers are held for the whole pass: intermediate storages
  // must outlive every closure that reads them.
  std::vector<std::pair<std::shared_ptr<Node<T>>, std::shared_ptr<Storage<T>>>> nodes;
  std::unordered_set<const Node<T>*> seen;
  std::vector<std::shared_ptr<Storage<T>>> stack{root_st};
  while (!stack.empty()) {
    std::shared_ptr<Storage<T>> st = stack.back();
    stack.pop_back();
    std::shared_ptr<Node<T>> node = st->node;
    if (!node || seen.count(node.get())) continue;
    seen.insert(node.get());
    nodes.emplace_back(node, st);
    for (auto& in : node->inputs) stack.push_back(in);
  }
  std::sort(nodes.begin(), nodes.end(),
            [](const auto& a, const auto& b) { return a.first->id > b.first->id; });

  for (auto& [node, out_st] : nodes)
    if (node->backward && !out_st->grad.empty()) node->backward(out_st.get());

  // Free the tape only after the full reverse pass.
  for (auto& [node, out_st] : nodes) {
    node->consumed = true;
    node->backward = nullptr;
    node->inputs.clear();
  }
}

// ---------------------------------------------------------------------------
// Elementwise suite

template <class T>
void check_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw UsageError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape(a, b, "add");
  TensorT<T> out = TensorT<T>::zeros(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
  auto sa = a.storage(), sb = b.storage();
  return attach_node<T>(out, {a, b}, [sa, sb](Storage<T>* o) {
    if (sa->requires_grad || sa->node) {
      ensure_grad(*sa);
      for (std::size_t i = 0; i < o->grad.size(); ++i) sa->grad[i] += o->grad[i];
    }
    if (sb->requires_grad || sb->node) {
      ensure_grad(*sb);
      for (std::size_t i = 0; i < o->grad.size(); ++i) sb->grad[i] += o->grad[i];
    }
  });
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape(a, b, "mul");
  TensorT<T> out = TensorT<T>::zeros(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[i];
  auto sa = a.storage(), sb = b.storage();
  return attach_node<T>(out, {a, b}, [sa, sb](Storage<T>* o) {
    if (sa->requires_grad || sa->node) {
      ensure_grad(*sa);
      for (std::size_t i = 0; i < o->grad.size(); ++i) sa->grad[i] += o->grad[i] * sb->data[i];
    }
    if (sb->requires_grad || sb->node) {
      ensure_grad(*sb);
      for (std::size_t i = 0; i < o->grad.size(); ++i) sb->grad[i] += o->grad[i] * sa->data[i];
    }
  });
}

template <class T>
TensorT<T> scale(const TensorT<T>& x, T s) {
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.numel(); ++i) po[i] = px[i] * s;
  auto sx = x.storage();
  return attach_node<T>(out, {x}, [sx, s](Storage<T>* o) {
    ensure_grad(*sx);
    for (std::size_t i = 0; i < o->grad.size(); ++i) sx->grad[i] += o->grad[i] * s;
  });
}

template <class T>
TensorT<T> relu(const TensorT<T>& x) {
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.numel(); ++i) po[i] = px[i] > T(0) ? px[i] : T(0);
  auto sx = x.storage();
  return attach_node<T>(out, {x}, [sx](Storage<T>* o) {
    ensure_grad(*sx);
    for (std::size_t i = 0; i < o->grad.size(); ++i)
      if (sx->data[i] > T(0)) sx->grad[i] += o->grad[i];
  });
}

template <class T>
TensorT<T> concat(const std::vector<TensorT<T>>& parts, int axis) {
  if (parts.empty()) throw UsageError("concat: empty input list");
  const Shape& first = parts[0].shape();
  int rank = static_cast<int>(first.size());
  if (axis < 0 || axis >= rank) throw UsageError("concat: axis out of range");
  Shape out_shape = first;
  out_shape[static_cast<std::size_t>(axis)] = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank) throw UsageError("concat: rank mismatch");
    for (int d = 0; d < rank; ++d)
      if (d != axis && p.dim(d) != first[static_cast<std::size_t>(d)])
        throw UsageError("concat: shape mismatch on non-concat axis");
    out_shape[static_cast<std::size_t>(axis)] += p.dim(axis);
  }
  TensorT<T> out = TensorT<T>::zeros(out_shape);

  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(first[static_cast<std::size_t>(d)]);
  for (int d = axis + 1; d < rank; ++d) inner *= static_cast<std::size_t>(first[static_cast<std::size_t>(d)]);
  std::size_t out_axis = static_cast<std::size_t>(out_shape[static_cast<std::size_t>(axis)]);

  std::vector<std::size_t> offsets(parts.size());
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    offsets[p] = off;
    std::size_t pa = static_cast<std::size_t>(parts[p].dim(axis));
    const T* src = parts[p].data();
    T* dst = out.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(src + o * pa * inner, src + (o + 1) * pa * inner,
                dst + (o * out_axis + off) * inner);
    off += pa;
  }

  std::vector<std::shared_ptr<Storage<T>>> storages;
  std::vector<std::size_t> part_axis(parts.size());
  for (std::size_t p = 0; p < parts.size(); ++p) {
    storages.push_back(parts[p].storage());
    part_axis[p] = static_cast<std::size_t>(parts[p].dim(axis));
  }
  return attach_node<T>(out, parts,
                        [storages, part_axis, offsets, outer, inner, out_axis](Storage<T>* o) {
    for (std::size_t p = 0; p < storages.size(); ++p) {
      auto& st = storages[p];
      if (!st->requires_grad && !st->node) continue;
      ensure_grad(*st);
      std::size_t pa = part_axis[p];
      for (std::size_t ou = 0; ou < outer; ++ou) {
        const T* g = o->grad.data() + (ou * out_axis + offsets[p]) * inner;
        T* dst = st->grad.data() + ou * pa * inner;
        for (std::size_t i = 0; i < pa * inner; ++i) dst[i] += g[i];
      }
    }
  });
}

// out[n,o] = sum_i x[n,i] * w[i,o] + b[o]
template <class T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias) {
  if (x.rank() != 2 || w.rank() != 2)
    throw UsageError("linear: expected rank-2 input and weight");
  int n = x.dim(0), in = x.dim(1), out_dim = w.dim(1);
  if (w.dim(0) != in)
    throw UsageError("linear: weight rows " + std::to_string(w.dim(0)) +
                     " do not match input features " + std::to_string(in));
  bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != out_dim))
    throw UsageError("linear: bias shape mismatch");

  TensorT<T> out = TensorT<T>::zeros({n, out_dim});
  const T* px = x.data();
  const T* pw = w.data();
  T* po = out.data();
  for (int r = 0; r < n; ++r) {
    T* orow = po + static_cast<std::size_t>(r) * out_dim;
    if (has_bias) std::copy(bias.data(), bias.data() + out_dim, orow);
    const T* xrow = px + static_cast<std::size_t>(r) * in;
    for (int i = 0; i < in; ++i) {
      T xv = xrow[i];
      const T* wrow = pw + static_cast<std::size_t>(i) * out_dim;
      for (int o = 0; o < out_dim; ++o) orow[o] += xv * wrow[o];
    }
  }

  auto sx = x.storage(), sw = w.storage();
  auto sb = has_bias ? bias.storage() : nullptr;
  std::vector<TensorT<T>> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return attach_node<T>(out, inputs, [sx, sw, sb, n, in, out_dim](Storage<T>* o) {
    const T* g = o->grad.data();
    if (sx->requires_grad || sx->node) {
      ensure_grad(*sx);
      for (int r = 0; r < n; ++r) {
        const T* grow = g + static_cast<std::size_t>(r) * out_dim;
        T* xg = sx->grad.data() + static_cast<std::size_t>(r) * in;
        for (int i = 0; i < in; ++i) {
          const T* wrow = sw->data.data() + static_cast<std::size_t>(i) * out_dim;
          T acc = 0;
          for (int c = 0; c < out_dim; ++c) acc += grow[c] * wrow[c];
          xg[i] += acc;
        }
      }
    }
    if (sw->requires_grad || sw->node) {
      ensure_grad(*sw);
      for (int r = 0; r < n; ++r) {
        const T* grow = g + static_cast<std::size_t>(r) * out_dim;
        const T* xrow = sx->data.data() + static_cast<std::size_t>(r) * in;
        for (int i = 0; i < in; ++i) {
          T xv = xrow[i];
          T* wg = sw->grad.data() + static_cast<std::size_t>(i) * out_dim;
          for (int c = 0; c < out_dim; ++c) wg[c] += xv * grow[c];
        }
      }
    }
    if (sb && (sb->requires_grad || sb->node)) {
      ensure_grad(*sb);
      for (int r = 0; r < n; ++r) {
        const T* grow = g + static_cast<std::size_t>(r) * out_dim;
        for (int c = 0; c < out_dim; ++c) sb->grad[static_cast<std::size_t>(c)] += grow[c];
      }
    }
  });
}

template <class T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w) {
  return linear(x, w, TensorT<T>());
}

// ---------------------------------------------------------------------------
// Softmax family (max-subtracted for stability)

template <class T>
void softmax_axis_dims(const TensorT<T>& x, int axis, std::size_t& outer, std::size_t& c,
                       std::size_t& inner) {
  int rank = x.rank();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw UsageError("softmax: axis out of range");
  outer = inner = 1;
  for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(x.dim(d));
  c = static_cast<std::size_t>(x.dim(axis));
  for (int d = axis + 1; d < rank; ++d) inner *= static_cast<std::size_t>(x.dim(d));
  if (c < 1) throw UsageError("softmax: empty class axis");
}

template <class T>
TensorT<T> softmax(const TensorT<T>& logits, int axis = -1) {
  std::size_t outer, c, inner;
  softmax_axis_dims(logits, axis, outer, c, inner);
  TensorT<T> out = TensorT<T>::zeros(logits.shape());
  const T* px = logits.data();
  T* po = out.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const T* row = px + o * c * inner + i;
      T* orow = po + o * c * inner + i;
      T mx = row[0];
      for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, row[k * inner]);
      if (!std::isfinite(static_cast<double>(mx)))
        throw NumericError("softmax: non-finite logits");
      T sum = 0;
      for (std::size_t k = 0; k < c; ++k) {
        T e = std::exp(row[k * inner] - mx);
        orow[k * inner] = e;
        sum += e;
      }
      for (std::size_t k = 0; k < c; ++k) orow[k * inner] /= sum;
    }
  auto sx = logits.storage();
  auto so = out.storage();
  return attach_node<T>(out, {logits}, [sx, outer, c, inner](Storage<T>* o) {
    ensure_grad(*sx);
    for (std::size_t ou = 0; ou < outer; ++ou)
      for (std::size_t i = 0; i < inner; ++i) {
        const T* y = o->data.data() + ou * c * inner + i;
        const T* gy = o->grad.data() + ou * c * inner + i;
        T* gx = sx->grad.data() + ou * c * inner + i;
        T dot = 0;
        for (std::size_t k = 0; k < c; ++k) dot += gy[k * inner] * y[k * inner];
        for (std::size_t k = 0; k < c; ++k)
          gx[k * inner] += y[k * inner] * (gy[k * inner] - dot);
      }
  });
}

template <class T>
TensorT<T> log_softmax(const TensorT<T>& logits, int axis = -1) {
  std::size_t outer, c, inner;
  softmax_axis_dims(logits, axis, outer, c, inner);
  TensorT<T> out = TensorT<T>::zeros(logits.shape());
  const T* px = logits.data();
  T* po = out.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const T* row = px + o * c * inner + i;
      T* orow = po + o * c * inner + i;
      T mx = row[0];
      for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, row[k * inner]);
      if (!std::isfinite(static_cast<double>(mx)))
        throw NumericError("log_softmax: non-finite logits");
      T sum = 0;
      for (std::size_t k = 0; k < c; ++k) sum += std::exp(row[k * inner] - mx);
      T lse = mx + std::log(sum);
      for (std::size_t k = 0; k < c; ++k) orow[k * inner] = row[k * inner] - lse;
    }
  auto sx = logits.storage();
  return attach_node<T>(out, {logits}, [sx, outer, c, inner](Storage<T>* o) {
    ensure_grad(*sx);
    for (std::size_t ou = 0; ou < outer; ++ou)
      for (std::size_t i = 0; i < inner; ++i) {
        const T* ls = o->data.data() + ou * c * inner + i;
        const T* gy = o->grad.data() + ou * c * inner + i;
        T* gx = sx->grad.data() + ou * c * inner + i;
        T gsum = 0;
        for (std::size_t k = 0; k < c; ++k) gsum += gy[k * inner];
        for (std::size_t k = 0; k < c; ++k)
          gx[k * inner] += gy[k * inner] - std::exp(ls[k * inner]) * gsum;
      }
  });
}

// ---------------------------------------------------------------------------
// Reductions and indexing helpers

template <class T>
TensorT<T> sum(const TensorT<T>& x) {
  T acc = 0;
  const T* px = x.data();
  for (std::size_t i = 0; i < x.numel(); ++i) acc += px[i];
  TensorT<T> out = TensorT<T>::scalar(acc);
  auto sx = x.storage();
  return attach_node<T>(out, {x}, [sx](Storage<T>* o) {
    ensure_grad(*sx);
    T g = o->grad[0];
    for (auto& v : sx->grad) v += g;
  });
}

template <class T>
TensorT<T> mean(const TensorT<T>& x) {
  std::size_t n = x.numel();
  if (n == 0) throw UsageError("mean of empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(n));
}

// Scalar view of one element; gradient scatters back into that slot.
template <class T>
TensorT<T> pick(const TensorT<T>& x, std::size_t flat_index) {
  if (flat_index >= x.numel()) throw UsageError("pick: index out of range");
  TensorT<T> out = TensorT<T>::scalar(x.data()[flat_index]);
  auto sx = x.storage();
  return attach_node<T>(out, {x}, [sx, flat_index](Storage<T>* o) {
    ensure_grad(*sx);
    sx->grad[flat_index] += o->grad[0];
  });
}

// Same data, new shape. Copies; gradients flow straight through.
template <class T>
TensorT<T> reshape(const TensorT<T>& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel())
    throw UsageError("reshape: element count mismatch " + shape_str(x.shape()) + " -> " +
                     shape_str(new_shape));
  TensorT<T> out = TensorT<T>::from_data(std::move(new_shape), x.vec());
  auto sx = x.storage();
  return attach_node<T>(out, {x}, [sx](Storage<T>* o) {
    ensure_grad(*sx);
    for (std::size_t i = 0; i < o->grad.size(); ++i) sx->grad[i] += o->grad[i];
  });
}

// out[n,c] = x[n,c] * s[n]; s is [N] or [N,1].
template <class T>
TensorT<T> row_scale(const TensorT<T>& x, const TensorT<T>& s) {
  if (x.rank() != 2) throw UsageError("row_scale: x must be [N,C]");
  std::size_t n = static_cast<std::size_t>(x.dim(0));
  std::size_t c = static_cast<std::size_t>(x.dim(1));
  if (s.numel() != n) throw UsageError("row_scale: scale count does not match rows");
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  const T* px = x.data();
  const T* ps = s.data();
  T* po = out.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k) po[i * c + k] = px[i * c + k] * ps[i];
  auto sx = x.storage(), ss = s.storage();
  return attach_node<T>(out, {x, s}, [sx, ss, n, c](Storage<T>* o) {
    if (sx->requires_grad || sx->node) {
      ensure_grad(*sx);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < c; ++k)
          sx->grad[i * c + k] += o->grad[i * c + k] * ss->data[i];
    }
    if (ss->requires_grad || ss->node) {
      ensure_grad(*ss);
      for (std::size_t i = 0; i < n; ++i) {
        T acc = 0;
        for (std::size_t k = 0; k < c; ++k) acc += o->grad[i * c + k] * sx->data[i * c + k];
        ss->grad[i] += acc;
      }
    }
  });
}

// Contiguous block [start, start+len) along axis 0.
template <class T>
TensorT<T> slice0(const TensorT<T>& x, int start, int len) {
  if (x.rank() < 1 || start < 0 || len < 1 || start + len > x.dim(0))
    throw UsageError("slice0: range out of bounds");
  std::size_t inner = x.numel() / static_cast<std::size_t>(x.dim(0));
  Shape out_shape = x.shape();
  out_shape[0] = len;
  TensorT<T> out = TensorT<T>::zeros(out_shape);
  std::copy(x.data() + static_cast<std::size_t>(start) * inner,
            x.data() + (static_cast<std::size_t>(start) + len) * inner, out.data());
  auto sx = x.storage();
  return attach_node<T>(out, {x}, [sx, start, inner](Storage<T>* o) {
    ensure_grad(*sx);
    T* g = sx->grad.data() + static_cast<std::size_t>(start) * inner;
    for (std::size_t i = 0; i < o->grad.size(); ++i) g[i] += o->grad[i];
  });
}

// 1 / (1 + exp(-x)) with the pre-activation clamped to +/-15 so float
// outputs stay strictly inside (0,1).
template <class T>
TensorT<T> logistic(const TensorT<T>& x) {
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t i = 0; i < out.numel(); ++i) {
    T v = std::clamp(px[i], T(-15), T(15));
    po[i] = T(1) / (T(1) + std::exp(-v));
  }
  auto sx = x.storage();
  return attach_node<T>(out, {x}, [sx](Storage<T>* o) {
    ensure_grad(*sx);
    for (std::size_t i = 0; i < o->grad.size(); ++i) {
      T y = o->data[i];
      if (sx->data[i] > T(-15) && sx->data[i] < T(15))
        sx->grad[i] += o->grad[i] * y * (T(1) - y);
    }
  });
}

template <class T>
TensorT<T> add_scalars(const std::vector<TensorT<T>>& terms) {
  if (terms.empty()) throw UsageError("add_scalars: empty list");
  T acc = 0;
  for (const auto& t : terms) acc += t.item();
  TensorT<T> out = TensorT<T>::scalar(acc);
  std::vector<std::shared_ptr<Storage<T>>> sts;
  for (const auto& t : terms) sts.push_back(t.storage());
  return attach_node<T>(out, terms, [sts](Storage<T>* o) {
    for (auto& st : sts) {
      if (!st->requires_grad && !st->node) continue;
      ensure_grad(*st);
      st->grad[0] += o->grad[0];
    }
  });
}

}  // namespace mm
