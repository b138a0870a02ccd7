#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "owm/numerics/tape.hpp"

// Differentiable operation vocabulary. Every reduction walks its axis
// sequentially from index 0 so results are bitwise repeatable.
namespace owm::numerics {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapC = Eigen::Map<const RowMat<T>>;
template <class T>
using MapM = Eigen::Map<RowMat<T>>;

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= static_cast<std::size_t>(s[i]);
  r.n = static_cast<std::size_t>(s[axis]);
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= static_cast<std::size_t>(s[i]);
  return r;
}

inline Shape reduced_shape(const Shape& s, int axis, bool keepdims) {
  Shape out = s;
  if (keepdims) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + axis);
    if (out.empty()) out.push_back(1);
  }
  return out;
}

/// Numpy-style right-aligned broadcast of two shapes.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;  // per output axis, 0 on broadcast axes
  bool same = false;

  Broadcast(const Shape& a, const Shape& b, const char* op) {
    same = a == b;
    const std::size_t r = std::max(a.size(), b.size());
    out.assign(r, 1);
    Shape pa(r, 1), pb(r, 1);
    std::copy(a.begin(), a.end(), pa.begin() + static_cast<long>(r - a.size()));
    std::copy(b.begin(), b.end(), pb.begin() + static_cast<long>(r - b.size()));
    for (std::size_t i = 0; i < r; ++i) {
      if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
        throw StructuralError(std::string(op) + ": cannot broadcast " + shape_string(a) +
                              " with " + shape_string(b));
      }
      out[i] = std::max(pa[i], pb[i]);
    }
    stride_a.assign(r, 0);
    stride_b.assign(r, 0);
    std::size_t sa = 1, sb = 1;
    for (std::size_t k = r; k-- > 0;) {
      stride_a[k] = pa[k] == 1 ? 0 : sa;
      stride_b[k] = pb[k] == 1 ? 0 : sb;
      sa *= static_cast<std::size_t>(pa[k]);
      sb *= static_cast<std::size_t>(pb[k]);
    }
  }

  /// Calls fn(offset_out, offset_a, offset_b, run, step_a, step_b) for each
  /// contiguous run along the last output axis.
  template <class F>
  void for_each_run(F&& fn) const {
    const std::size_t r = out.size();
    const std::size_t last = static_cast<std::size_t>(out[r - 1]);
    const std::size_t total = element_count(out);
    std::vector<std::size_t> idx(r, 0);
    std::size_t oa = 0, ob = 0;
    for (std::size_t o = 0; o < total; o += last) {
      fn(o, oa, ob, last, stride_a[r - 1], stride_b[r - 1]);
      for (std::size_t k = r - 1; k-- > 0;) {
        ++idx[k];
        oa += stride_a[k];
        ob += stride_b[k];
        if (idx[k] < static_cast<std::size_t>(out[k])) break;
        oa -= stride_a[k] * idx[k];
        ob -= stride_b[k] * idx[k];
        idx[k] = 0;
      }
    }
  }
};

template <class T>
void check_same_tape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (&a.tape() != &b.tape()) throw StructuralError(std::string(op) + ": operands on different tapes");
}

template <class T, class Fwd, class Dfn>
Var<T> unary(const Var<T>& x, Fwd fwd, Dfn dydx) {
  const auto& xv = x.value().vec();
  Buffer<T> y(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = fwd(xv[i]);
  const int xid = x.id();
  Tape<T>& tape = x.tape();
  const int yid = static_cast<int>(tape.size());
  return tape.record(Array<T>(unchecked, x.shape(), std::move(y)), {x},
                     [xid, yid, dydx](Tape<T>& t, std::span<const T> g) {
                       auto gx = t.grad_accumulator(xid);
                       const auto& xv2 = t.value(xid).vec();
                       const auto& yv2 = t.value(yid).vec();
                       for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * dydx(xv2[i], yv2[i]);
                     });
}

enum class BinaryKind { Add, Sub, Mul, Div };

template <BinaryKind K, class T>
inline T apply_binary(T p, T q) {
  if constexpr (K == BinaryKind::Add) return p + q;
  if constexpr (K == BinaryKind::Sub) return p - q;
  if constexpr (K == BinaryKind::Mul) return p * q;
  if constexpr (K == BinaryKind::Div) return p / q;
}

template <BinaryKind K, class T>
Var<T> binary(const Var<T>& a, const Var<T>& b, const char* op) {
  check_same_tape(a, b, op);
  const Broadcast plan(a.shape(), b.shape(), op);
  const T* av = a.value().vec().data();
  const T* bv = b.value().vec().data();
  Buffer<T> y(element_count(plan.out));
  if (plan.same) {
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = apply_binary<K>(av[i], bv[i]);
  } else {
    plan.for_each_run([&](std::size_t o, std::size_t oa, std::size_t ob, std::size_t run, std::size_t sa,
                          std::size_t sb) {
      T* yo = y.data() + o;
      const T* ap = av + oa;
      const T* bp = bv + ob;
      if (sa == 1 && sb == 1) {
        for (std::size_t j = 0; j < run; ++j) yo[j] = apply_binary<K>(ap[j], bp[j]);
      } else if (sa == 1) {
        const T q = bp[0];
        for (std::size_t j = 0; j < run; ++j) yo[j] = apply_binary<K>(ap[j], q);
      } else if (sb == 1) {
        const T q = ap[0];
        for (std::size_t j = 0; j < run; ++j) yo[j] = apply_binary<K>(q, bp[j]);
      } else {
        const T r = apply_binary<K>(ap[0], bp[0]);
        for (std::size_t j = 0; j < run; ++j) yo[j] = r;
      }
    });
  }
  if constexpr (K == BinaryKind::Div) {
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (!std::isfinite(static_cast<double>(y[i]))) {
        throw NumericalError(std::string(op) + ": non-finite quotient at flat index " + std::to_string(i));
      }
    }
  }
  const int aid = a.id(), bid = b.id();
  Tape<T>& tape = a.tape();
  return tape.record(
      Array<T>(unchecked, plan.out, std::move(y)), {a, b}, [aid, bid, plan](Tape<T>& t, std::span<const T> g) {
        T* ga = t.requires_grad(aid) ? t.grad_accumulator(aid).data() : nullptr;
        T* gb = t.requires_grad(bid) ? t.grad_accumulator(bid).data() : nullptr;
        const T* av2 = t.value(aid).vec().data();
        const T* bv2 = t.value(bid).vec().data();
        auto body = [&](std::size_t o, std::size_t oa, std::size_t ob, std::size_t run, std::size_t sa,
                        std::size_t sb) {
          for (std::size_t j = 0; j < run; ++j) {
            const T gj = g[o + j];
            const std::size_t ia = oa + j * sa, ib = ob + j * sb;
            if constexpr (K == BinaryKind::Add) {
              if (ga) ga[ia] += gj;
              if (gb) gb[ib] += gj;
            } else if constexpr (K == BinaryKind::Sub) {
              if (ga) ga[ia] += gj;
              if (gb) gb[ib] -= gj;
            } else if constexpr (K == BinaryKind::Mul) {
              if (ga) ga[ia] += gj * bv2[ib];
              if (gb) gb[ib] += gj * av2[ia];
            } else {
              if (ga) ga[ia] += gj / bv2[ib];
              if (gb) gb[ib] -= gj * av2[ia] / (bv2[ib] * bv2[ib]);
            }
          }
        };
        if (plan.same) {
          body(0, 0, 0, g.size(), 1, 1);
        } else {
          plan.for_each_run(body);
        }
      });
}

template <class T>
using ArrayMapC = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;
template <class T>
using ArrayMapM = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return detail::binary<detail::BinaryKind::Add>(a, b, "add");
}
template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return detail::binary<detail::BinaryKind::Sub>(a, b, "sub");
}
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return detail::binary<detail::BinaryKind::Mul>(a, b, "mul");
}
template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  return detail::binary<detail::BinaryKind::Div>(a, b, "div");
}

template <class T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <class T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <class T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }
template <class T>
Var<T> operator/(const Var<T>& a, const Var<T>& b) { return div(a, b); }

template <class T>
Var<T> scale(const Var<T>& x, T c) {
  return detail::unary(x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}
template <class T>
Var<T> add_scalar(const Var<T>& x, T c) {
  return detail::unary(x, [c](T v) { return v + c; }, [](T, T) { return T{1}; });
}
template <class T>
Var<T> neg(const Var<T>& x) { return scale(x, T{-1}); }

template <class T>
Var<T> exp(const Var<T>& x) {
  Buffer<T> y(x.size());
  detail::ArrayMapM<T>(y.data(), static_cast<Eigen::Index>(y.size())) =
      detail::ArrayMapC<T>(x.value().vec().data(), static_cast<Eigen::Index>(y.size())).exp();
  const int xid = x.id();
  Tape<T>& tape = x.tape();
  const int yid = static_cast<int>(tape.size());
  return tape.record(Array<T>(unchecked, x.shape(), std::move(y)), {x}, [xid, yid](Tape<T>& t, std::span<const T> g) {
    auto gx = t.grad_accumulator(xid);
    const auto& yv = t.value(yid).vec();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * yv[i];
  });
}

template <class T>
Var<T> square(const Var<T>& x) {
  return detail::unary(x, [](T v) { return v * v; }, [](T v, T) { return T{2} * v; });
}

template <class T>
Var<T> tanh(const Var<T>& x) {
  Buffer<T> y(x.size());
  detail::ArrayMapM<T>(y.data(), static_cast<Eigen::Index>(y.size())) =
      detail::ArrayMapC<T>(x.value().vec().data(), static_cast<Eigen::Index>(y.size())).tanh();
  const int xid = x.id();
  Tape<T>& tape = x.tape();
  const int yid = static_cast<int>(tape.size());
  return tape.record(Array<T>(unchecked, x.shape(), std::move(y)), {x}, [xid, yid](Tape<T>& t, std::span<const T> g) {
    auto gx = t.grad_accumulator(xid);
    const auto& yv = t.value(yid).vec();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * (T{1} - yv[i] * yv[i]);
  });
}

/// Subgradient sign(x), with 0 at the origin.
template <class T>
Var<T> abs(const Var<T>& x) {
  if (x.requires_grad()) {
    double margin = std::numeric_limits<double>::infinity();
    for (T v : x.value().vec()) margin = std::min(margin, std::abs(static_cast<double>(v)));
    x.tape().note_kink_margin(margin);
  }
  return detail::unary(
      x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0}); });
}

/// tanh approximation of GELU.
template <class T>
Var<T> gelu(const Var<T>& x) {
  static constexpr T k0 = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  static constexpr T k1 = static_cast<T>(0.044715);
  const auto n = static_cast<Eigen::Index>(x.size());
  detail::ArrayMapC<T> xv(x.value().vec().data(), n);
  Eigen::Array<T, Eigen::Dynamic, 1> th = (k0 * (xv + k1 * xv.cube())).tanh();
  Buffer<T> y(x.size());
  detail::ArrayMapM<T>(y.data(), n) = T{0.5} * xv * (T{1} + th);
  const int xid = x.id();
  Buffer<T> th_keep;
  if (x.requires_grad()) th_keep.assign(th.data(), th.data() + n);
  return x.tape().record(Array<T>(unchecked, x.shape(), std::move(y)), {x},
                         [xid, n, th = std::move(th_keep)](Tape<T>& t, std::span<const T> g) {
                           detail::ArrayMapM<T> gx(t.grad_accumulator(xid).data(), n);
                           detail::ArrayMapC<T> xv2(t.value(xid).vec().data(), n);
                           detail::ArrayMapC<T> thv(th.data(), n);
                           detail::ArrayMapC<T> gv(g.data(), n);
                           gx += gv * (T{0.5} * (T{1} + thv) +
                                       T{0.5} * xv2 * (T{1} - thv.square()) * k0 * (T{1} + T{3} * k1 * xv2.square()));
                         });
}

// ----------------------------------------------------------------- structure

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Array<T> y = x.value().reshaped(std::move(shape));
  const int xid = x.id();
  return x.tape().record(std::move(y), {x}, [xid](Tape<T>& t, std::span<const T> g) {
    auto gx = t.grad_accumulator(xid);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
  });
}

/// Stop-gradient copy.
template <class T>
Var<T> detach(const Var<T>& x) {
  return x.tape().constant(x.value());
}

template <class T>
Var<T> concat(std::span<const Var<T>> parts, int axis) {
  if (parts.empty()) throw StructuralError("concat: no operands");
  const Shape& s0 = parts[0].shape();
  const int ax = normalize_axis(axis, static_cast<int>(s0.size()), "concat");
  Shape out = s0;
  out[ax] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = static_cast<int>(i) == ax || s[i] == s0[i];
    if (!ok) {
      throw StructuralError("concat: " + shape_string(s) + " incompatible with " +
                            shape_string(s0) + " along axis " + std::to_string(ax));
    }
    detail::check_same_tape(parts[0], p, "concat");
    out[ax] += s[ax];
  }
  const auto split = detail::split_at(out, ax);
  Buffer<T> y(element_count(out));
  std::vector<int> ids, widths;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = static_cast<std::size_t>(p.dim(ax)) * split.inner;
    const auto& pv = p.value().vec();
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(pv.begin() + static_cast<long>(o * w), w,
                  y.begin() + static_cast<long>(o * split.n * split.inner + off));
    }
    off += w;
    ids.push_back(p.id());
    widths.push_back(static_cast<int>(w));
  }
  Tape<T>& tape = parts[0].tape();
  return tape.record(Array<T>(unchecked, out, std::move(y)), parts,
                     [ids, widths, split](Tape<T>& t, std::span<const T> g) {
                       std::size_t off2 = 0;
                       for (std::size_t k = 0; k < ids.size(); ++k) {
                         const std::size_t w = static_cast<std::size_t>(widths[k]);
                         if (t.requires_grad(ids[k])) {
                           auto gp = t.grad_accumulator(ids[k]);
                           for (std::size_t o = 0; o < split.outer; ++o) {
                             const T* src = g.data() + o * split.n * split.inner + off2;
                             T* dst = gp.data() + o * w;
                             for (std::size_t j = 0; j < w; ++j) dst[j] += src[j];
                           }
                         }
                         off2 += w;
                       }
                     });
}

template <class T>
Var<T> concat(std::initializer_list<Var<T>> parts, int axis) {
  return concat(std::span<const Var<T>>(parts.begin(), parts.size()), axis);
}

/// Half-open range [begin, end) along one axis.
template <class T>
Var<T> slice(const Var<T>& x, int axis, int begin, int end) {
  const int ax = normalize_axis(axis, x.rank(), "slice");
  if (begin < 0 || end > x.dim(ax) || begin >= end) {
    throw StructuralError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                          ") invalid for extent " + std::to_string(x.dim(ax)));
  }
  Shape out = x.shape();
  out[ax] = end - begin;
  const auto split = detail::split_at(x.shape(), ax);
  const std::size_t w = static_cast<std::size_t>(end - begin) * split.inner;
  const std::size_t off = static_cast<std::size_t>(begin) * split.inner;
  const auto& xv = x.value().vec();
  Buffer<T> y(element_count(out));
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(xv.begin() + static_cast<long>(o * split.n * split.inner + off), w,
                y.begin() + static_cast<long>(o * w));
  }
  const int xid = x.id();
  return x.tape().record(Array<T>(unchecked, out, std::move(y)), {x},
                         [xid, split, w, off](Tape<T>& t, std::span<const T> g) {
                           auto gx = t.grad_accumulator(xid);
                           for (std::size_t o = 0; o < split.outer; ++o) {
                             T* dst = gx.data() + o * split.n * split.inner + off;
                             const T* src = g.data() + o * w;
                             for (std::size_t j = 0; j < w; ++j) dst[j] += src[j];
                           }
                         });
}

/// Axis permutation: output axis i is input axis perm[i].
template <class T>
Var<T> permute(const Var<T>& x, const std::vector<int>& perm) {
  const Shape& s = x.shape();
  const std::size_t r = s.size();
  if (perm.size() != r) throw StructuralError("permute: permutation rank mismatch");
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t k = r - 1; k-- > 0;) in_stride[k] = in_stride[k + 1] * static_cast<std::size_t>(s[k + 1]);
  Shape out(r);
  std::vector<std::size_t> step(r);
  for (std::size_t i = 0; i < r; ++i) {
    out[i] = s[static_cast<std::size_t>(perm[i])];
    step[i] = in_stride[static_cast<std::size_t>(perm[i])];
  }
  const std::size_t total = element_count(out);
  std::vector<std::size_t> src(total);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t o = 0; o < total; ++o) {
    src[o] = off;
    for (std::size_t k = r; k-- > 0;) {
      ++idx[k];
      off += step[k];
      if (idx[k] < static_cast<std::size_t>(out[k])) break;
      off -= step[k] * idx[k];
      idx[k] = 0;
    }
  }
  const auto& xv = x.value().vec();
  Buffer<T> y(total);
  for (std::size_t o = 0; o < total; ++o) y[o] = xv[src[o]];
  const int xid = x.id();
  return x.tape().record(Array<T>(unchecked, out, std::move(y)), {x},
                         [xid, src = std::move(src)](Tape<T>& t, std::span<const T> g) {
                           auto gx = t.grad_accumulator(xid);
                           for (std::size_t o = 0; o < src.size(); ++o) gx[src[o]] += g[o];
                         });
}

/// Gathers whole slices along `axis`. `indices` holds `count` entries per
/// outer position (outer = product of the extents before `axis`), or just
/// `count` entries shared by every outer position.
template <class T>
Var<T> select(const Var<T>& x, int axis, std::vector<int> indices, int count) {
  const int ax = normalize_axis(axis, x.rank(), "select");
  const auto split = detail::split_at(x.shape(), ax);
  const std::size_t k = static_cast<std::size_t>(count);
  const bool shared = indices.size() == k;
  if (!shared && indices.size() != split.outer * k) {
    throw StructuralError("select: expected " + std::to_string(split.outer * k) + " indices, got " +
                          std::to_string(indices.size()));
  }
  for (int i : indices) {
    if (i < 0 || static_cast<std::size_t>(i) >= split.n) {
      throw StructuralError("select: index " + std::to_string(i) + " out of range " +
                            std::to_string(split.n));
    }
  }
  Shape out = x.shape();
  out[ax] = count;
  const auto& xv = x.value().vec();
  Buffer<T> y(element_count(out));
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t src = static_cast<std::size_t>(indices[shared ? j : o * k + j]);
      std::copy_n(xv.begin() + static_cast<long>((o * split.n + src) * split.inner), split.inner,
                  y.begin() + static_cast<long>((o * k + j) * split.inner));
    }
  }
  const int xid = x.id();
  return x.tape().record(
      Array<T>(unchecked, out, std::move(y)), {x},
      [xid, split, k, shared, indices = std::move(indices)](Tape<T>& t, std::span<const T> g) {
        auto gx = t.grad_accumulator(xid);
        for (std::size_t o = 0; o < split.outer; ++o) {
          for (std::size_t j = 0; j < k; ++j) {
            const std::size_t src = static_cast<std::size_t>(indices[shared ? j : o * k + j]);
            T* dst = gx.data() + (o * split.n + src) * split.inner;
            const T* gs = g.data() + (o * k + j) * split.inner;
            for (std::size_t i = 0; i < split.inner; ++i) dst[i] += gs[i];
          }
        }
      });
}

// ---------------------------------------------------------------- reductions

template <class T>
Var<T> sum(const Var<T>& x, int axis, bool keepdims = false) {
  const int ax = normalize_axis(axis, x.rank(), "sum");
  const auto sp = detail::split_at(x.shape(), ax);
  const auto& xv = x.value().vec();
  Buffer<T> y(sp.outer * sp.inner, T{0});
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t k = 0; k < sp.n; ++k) {
      const T* src = xv.data() + (o * sp.n + k) * sp.inner;
      T* dst = y.data() + o * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  }
  const int xid = x.id();
  return x.tape().record(Array<T>(unchecked, detail::reduced_shape(x.shape(), ax, keepdims), std::move(y)),
                         {x}, [xid, sp](Tape<T>& t, std::span<const T> g) {
                           auto gx = t.grad_accumulator(xid);
                           for (std::size_t o = 0; o < sp.outer; ++o)
                             for (std::size_t k = 0; k < sp.n; ++k)
                               for (std::size_t i = 0; i < sp.inner; ++i)
                                 gx[(o * sp.n + k) * sp.inner + i] += g[o * sp.inner + i];
                         });
}

template <class T>
Var<T> mean(const Var<T>& x, int axis, bool keepdims = false) {
  return scale(sum(x, axis, keepdims), T{1} / static_cast<T>(x.dim(axis)));
}

template <class T>
Var<T> sum_all(const Var<T>& x) {
  return sum(reshape(x, Shape{static_cast<int>(x.size())}), 0);
}

template <class T>
Var<T> mean_all(const Var<T>& x) {
  return scale(sum_all(x), T{1} / static_cast<T>(x.size()));
}

/// Maximum along an axis; gradient routes to the lowest index among ties.
template <class T>
Var<T> max(const Var<T>& x, int axis, bool keepdims = false) {
  const int ax = normalize_axis(axis, x.rank(), "max");
  const auto sp = detail::split_at(x.shape(), ax);
  const auto& xv = x.value().vec();
  Buffer<T> y(sp.outer * sp.inner);
  std::vector<std::size_t> arg(sp.outer * sp.inner);
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = 0;
      T top = xv[o * sp.n * sp.inner + i];
      T second = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 1; k < sp.n; ++k) {
        const T v = xv[(o * sp.n + k) * sp.inner + i];
        if (v > top) {
          second = top;
          top = v;
          best = k;
        } else if (v > second) {
          second = v;
        }
      }
      y[o * sp.inner + i] = top;
      arg[o * sp.inner + i] = best;
      if (sp.n > 1) margin = std::min(margin, static_cast<double>(top - second));
    }
  }
  if (x.requires_grad()) x.tape().note_kink_margin(margin);
  const int xid = x.id();
  return x.tape().record(Array<T>(unchecked, detail::reduced_shape(x.shape(), ax, keepdims), std::move(y)),
                         {x}, [xid, sp, arg = std::move(arg)](Tape<T>& t, std::span<const T> g) {
                           auto gx = t.grad_accumulator(xid);
                           for (std::size_t o = 0; o < sp.outer; ++o)
                             for (std::size_t i = 0; i < sp.inner; ++i)
                               gx[(o * sp.n + arg[o * sp.inner + i]) * sp.inner + i] += g[o * sp.inner + i];
                         });
}

template <class T>
Var<T> softmax(const Var<T>& x, int axis) {
  const int ax = normalize_axis(axis, x.rank(), "softmax");
  const auto sp = detail::split_at(x.shape(), ax);
  const auto& xv = x.value().vec();
  Buffer<T> y(xv.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      T m = xv[base];
      for (std::size_t k = 1; k < sp.n; ++k) m = std::max(m, xv[base + k * sp.inner]);
      T z = T{0};
      for (std::size_t k = 0; k < sp.n; ++k) {
        const T e = std::exp(xv[base + k * sp.inner] - m);
        y[base + k * sp.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < sp.n; ++k) y[base + k * sp.inner] /= z;
    }
  }
  const int xid = x.id();
  Tape<T>& tape = x.tape();
  const int yid = static_cast<int>(tape.size());
  return tape.record(Array<T>(unchecked, x.shape(), std::move(y)), {x},
                     [xid, yid, sp](Tape<T>& t, std::span<const T> g) {
                       auto gx = t.grad_accumulator(xid);
                       const auto& yv = t.value(yid).vec();
                       for (std::size_t o = 0; o < sp.outer; ++o) {
                         for (std::size_t i = 0; i < sp.inner; ++i) {
                           const std::size_t base = o * sp.n * sp.inner + i;
                           T dot = T{0};
                           for (std::size_t k = 0; k < sp.n; ++k)
                             dot += g[base + k * sp.inner] * yv[base + k * sp.inner];
                           for (std::size_t k = 0; k < sp.n; ++k) {
                             const std::size_t j = base + k * sp.inner;
                             gx[j] += yv[j] * (g[j] - dot);
                           }
                         }
                       }
                     });
}

/// Normalizes over the last axis, then applies per-channel gain and bias.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps = T(1e-5)) {
  const std::size_t d = static_cast<std::size_t>(x.dim(-1));
  if (gain.size() != d || bias.size() != d) {
    throw StructuralError("layer_norm: gain/bias extent must equal last axis " + std::to_string(d));
  }
  const std::size_t rows = x.size() / d;
  const auto& xv = x.value().vec();
  const auto& gv = gain.value().vec();
  const auto& bv = bias.value().vec();
  Buffer<T> y(xv.size()), xhat(xv.size()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * d;
    T mu = T{0};
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var = T{0};
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(d);
    const T is = T{1} / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (xr[j] - mu) * is;
      xhat[r * d + j] = h;
      y[r * d + j] = h * gv[j] + bv[j];
    }
  }
  const int xid = x.id(), gid = gain.id(), bid = bias.id();
  return x.tape().record(
      Array<T>(unchecked, x.shape(), std::move(y)), {x, gain, bias},
      [xid, gid, bid, d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape<T>& t, std::span<const T> g) {
        const auto& gv2 = t.value(gid).vec();
        if (t.requires_grad(gid)) {
          auto gg = t.grad_accumulator(gid);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
        }
        if (t.requires_grad(bid)) {
          auto gb = t.grad_accumulator(bid);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
        }
        if (t.requires_grad(xid)) {
          auto gx = t.grad_accumulator(xid);
          for (std::size_t r = 0; r < rows; ++r) {
            T m1 = T{0}, m2 = T{0};
            for (std::size_t j = 0; j < d; ++j) {
              const T dh = g[r * d + j] * gv2[j];
              m1 += dh;
              m2 += dh * xhat[r * d + j];
            }
            m1 /= static_cast<T>(d);
            m2 /= static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const T dh = g[r * d + j] * gv2[j];
              gx[r * d + j] += inv_std[r] * (dh - m1 - xhat[r * d + j] * m2);
            }
          }
        }
      });
}

// ------------------------------------------------------------ linear algebra

/// x (..., K) times w (K, N) -> (..., N).
template <class T>
Var<T> matmul(const Var<T>& x, const Var<T>& w) {
  detail::check_same_tape(x, w, "matmul");
  if (w.rank() != 2 || x.dim(-1) != w.dim(0)) {
    throw StructuralError("matmul: cannot multiply " + shape_string(x.shape()) + " by " +
                          shape_string(w.shape()));
  }
  const Eigen::Index k = w.dim(0), n = w.dim(1);
  const Eigen::Index m = static_cast<Eigen::Index>(x.size()) / k;
  Shape out = x.shape();
  out.back() = static_cast<int>(n);
  Buffer<T> y(static_cast<std::size_t>(m * n));
  detail::MapM<T>(y.data(), m, n).noalias() =
      detail::MapC<T>(x.value().vec().data(), m, k) * detail::MapC<T>(w.value().vec().data(), k, n);
  const int xid = x.id(), wid = w.id();
  return x.tape().record(Array<T>(unchecked, out, std::move(y)), {x, w},
                         [xid, wid, m, k, n](Tape<T>& t, std::span<const T> g) {
                           detail::MapC<T> G(g.data(), m, n);
                           if (t.requires_grad(xid)) {
                             detail::MapM<T>(t.grad_accumulator(xid).data(), m, k).noalias() +=
                                 G * detail::MapC<T>(t.value(wid).vec().data(), k, n).transpose();
                           }
                           if (t.requires_grad(wid)) {
                             detail::MapM<T>(t.grad_accumulator(wid).data(), k, n).noalias() +=
                                 detail::MapC<T>(t.value(xid).vec().data(), m, k).transpose() * G;
                           }
                         });
}

/// Batched product over identical leading axes; the trailing two axes of
/// each operand are optionally transposed first.
template <class T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool trans_a = false, bool trans_b = false) {
  detail::check_same_tape(a, b, "bmm");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sa.size() != sb.size() ||
      !std::equal(sa.begin(), sa.end() - 2, sb.begin())) {
    throw StructuralError("bmm: batch axes differ between " + shape_string(sa) + " and " +
                          shape_string(sb));
  }
  const Eigen::Index ra = sa[sa.size() - 2], ca = sa.back();
  const Eigen::Index rb = sb[sb.size() - 2], cb = sb.back();
  const Eigen::Index m = trans_a ? ca : ra, ka = trans_a ? ra : ca;
  const Eigen::Index kb = trans_b ? cb : rb, n = trans_b ? rb : cb;
  if (ka != kb) {
    throw StructuralError("bmm: inner extents " + std::to_string(ka) + " and " + std::to_string(kb) +
                          " differ for " + shape_string(sa) + " x " + shape_string(sb));
  }
  const std::size_t batch = a.size() / static_cast<std::size_t>(ra * ca);
  Shape out(sa.begin(), sa.end() - 2);
  out.push_back(static_cast<int>(m));
  out.push_back(static_cast<int>(n));
  Buffer<T> y(batch * static_cast<std::size_t>(m * n));
  const T* av = a.value().vec().data();
  const T* bv = b.value().vec().data();
  for (std::size_t i = 0; i < batch; ++i) {
    detail::MapC<T> A(av + i * ra * ca, ra, ca);
    detail::MapC<T> B(bv + i * rb * cb, rb, cb);
    detail::MapM<T> Y(y.data() + i * m * n, m, n);
    if (!trans_a && !trans_b) Y.noalias() = A * B;
    if (!trans_a && trans_b) Y.noalias() = A * B.transpose();
    if (trans_a && !trans_b) Y.noalias() = A.transpose() * B;
    if (trans_a && trans_b) Y.noalias() = A.transpose() * B.transpose();
  }
  const int aid = a.id(), bid = b.id();
  return a.tape().record(
      Array<T>(unchecked, out, std::move(y)), {a, b},
      [=](Tape<T>& t, std::span<const T> g) {
        const T* av2 = t.value(aid).vec().data();
        const T* bv2 = t.value(bid).vec().data();
        T* ga = t.requires_grad(aid) ? t.grad_accumulator(aid).data() : nullptr;
        T* gb = t.requires_grad(bid) ? t.grad_accumulator(bid).data() : nullptr;
        for (std::size_t i = 0; i < batch; ++i) {
          detail::MapC<T> A(av2 + i * ra * ca, ra, ca);
          detail::MapC<T> B(bv2 + i * rb * cb, rb, cb);
          detail::MapC<T> G(g.data() + i * m * n, m, n);
          if (ga) {
            detail::MapM<T> GA(ga + i * ra * ca, ra, ca);
            // d(op(A)) = G op(B)^T
            if (!trans_a && !trans_b) GA.noalias() += G * B.transpose();
            if (!trans_a && trans_b) GA.noalias() += G * B;
            if (trans_a && !trans_b) GA.noalias() += B * G.transpose();
            if (trans_a && trans_b) GA.noalias() += B.transpose() * G.transpose();
          }
          if (gb) {
            detail::MapM<T> GB(gb + i * rb * cb, rb, cb);
            // d(op(B)) = op(A)^T G
            if (!trans_a && !trans_b) GB.noalias() += A.transpose() * G;
            if (!trans_a && trans_b) GB.noalias() += G.transpose() * A;
            if (trans_a && !trans_b) GB.noalias() += A * G;
            if (trans_a && trans_b) GB.noalias() += G.transpose() * A.transpose();
          }
        }
      });
}

/// x W + b with the bias broadcast over every row; same result as
/// add(matmul(x, w), b) with one tape node.
template <class T>
Var<T> affine(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  detail::check_same_tape(x, w, "affine");
  detail::check_same_tape(x, b, "affine");
  if (w.rank() != 2 || x.dim(-1) != w.dim(0) || b.size() != static_cast<std::size_t>(w.dim(1))) {
    throw StructuralError("affine: cannot apply " + shape_string(w.shape()) + " + " + shape_string(b.shape()) +
                          " to " + shape_string(x.shape()));
  }
  const Eigen::Index k = w.dim(0), n = w.dim(1);
  const Eigen::Index m = static_cast<Eigen::Index>(x.size()) / k;
  Shape out = x.shape();
  out.back() = static_cast<int>(n);
  Buffer<T> y(static_cast<std::size_t>(m * n));
  detail::MapM<T> Y(y.data(), m, n);
  Y.rowwise() = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.value().vec().data(), n);
  Y.noalias() += detail::MapC<T>(x.value().vec().data(), m, k) * detail::MapC<T>(w.value().vec().data(), k, n);
  const int xid = x.id(), wid = w.id(), bid = b.id();
  return x.tape().record(Array<T>(unchecked, out, std::move(y)), {x, w, b},
                         [xid, wid, bid, m, k, n](Tape<T>& t, std::span<const T> g) {
                           detail::MapC<T> G(g.data(), m, n);
                           if (t.requires_grad(xid)) {
                             detail::MapM<T>(t.grad_accumulator(xid).data(), m, k).noalias() +=
                                 G * detail::MapC<T>(t.value(wid).vec().data(), k, n).transpose();
                           }
                           if (t.requires_grad(wid)) {
                             detail::MapM<T>(t.grad_accumulator(wid).data(), k, n).noalias() +=
                                 detail::MapC<T>(t.value(xid).vec().data(), m, k).transpose() * G;
                           }
                           if (t.requires_grad(bid)) {
                             Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(t.grad_accumulator(bid).data(), n) +=
                                 G.colwise().sum();
                           }
                         });
}

/// Scaled dot-product multi-head attention on a packed projection.
///
/// qkv is (B, L, 3D) laid out as [Q | K | V], head h owning columns
/// [h*dh, (h+1)*dh) of each third. `mask`, if given, is an (L, L) additive
/// constant. Returns the concatenated head outputs (B, L, D). Equivalent to
/// splitting heads with reshape/permute, softmax(QK^T/sqrt(dh) + mask) V and
/// merging back.
template <class T>
Var<T> multi_head_attention(const Var<T>& qkv, int heads, const Array<T>* mask = nullptr) {
  if (qkv.rank() != 3 || heads < 1 || qkv.dim(2) % (3 * heads) != 0) {
    throw StructuralError("multi_head_attention: qkv " + shape_string(qkv.shape()) + " not divisible into 3x" +
                          std::to_string(heads) + " heads");
  }
  const Eigen::Index bsz = qkv.dim(0), len = qkv.dim(1), d = qkv.dim(2) / 3, dh = d / heads;
  if (mask && mask->shape() != Shape{static_cast<int>(len), static_cast<int>(len)}) {
    throw StructuralError("multi_head_attention: mask " + shape_string(mask->shape()) + " for length " +
                          std::to_string(len));
  }
  using Strided = Eigen::Map<const detail::RowMat<T>, 0, Eigen::OuterStride<>>;
  using StridedM = Eigen::Map<detail::RowMat<T>, 0, Eigen::OuterStride<>>;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  const bool keep = qkv.requires_grad();
  Buffer<T> probs(keep ? static_cast<std::size_t>(bsz * heads * len * len) : 0);
  Buffer<T> y(static_cast<std::size_t>(bsz * len * d));
  const T* src = qkv.value().vec().data();
  detail::RowMat<T> s(len, len);
  for (Eigen::Index b = 0; b < bsz; ++b) {
    const T* base = src + b * len * 3 * d;
    for (Eigen::Index h = 0; h < heads; ++h) {
      Strided q(base + h * dh, len, dh, Eigen::OuterStride<>(3 * d));
      Strided kk(base + d + h * dh, len, dh, Eigen::OuterStride<>(3 * d));
      Strided v(base + 2 * d + h * dh, len, dh, Eigen::OuterStride<>(3 * d));
      s.noalias() = (q * kk.transpose()) * scale;
      if (mask) s += detail::MapC<T>(mask->vec().data(), len, len);
      for (Eigen::Index i = 0; i < len; ++i) {
        auto row = s.row(i).array();
        row = (row - row.maxCoeff()).exp();
        row /= row.sum();
      }
      if (!s.allFinite()) throw NumericalError("multi_head_attention: non-finite attention weights");
      StridedM o(y.data() + b * len * d + h * dh, len, dh, Eigen::OuterStride<>(d));
      o.noalias() = s * v;
      if (keep) detail::MapM<T>(probs.data() + (b * heads + h) * len * len, len, len) = s;
    }
  }
  const int xid = qkv.id();
  return qkv.tape().record(
      Array<T>(unchecked, Shape{static_cast<int>(bsz), static_cast<int>(len), static_cast<int>(d)}, std::move(y)),
      {qkv}, [=, probs = std::move(probs)](Tape<T>& t, std::span<const T> g) {
        const T* xv = t.value(xid).vec().data();
        T* gx = t.grad_accumulator(xid).data();
        detail::RowMat<T> dp(len, len), ds(len, len);
        for (Eigen::Index b = 0; b < bsz; ++b) {
          const T* base = xv + b * len * 3 * d;
          T* gbase = gx + b * len * 3 * d;
          for (Eigen::Index h = 0; h < heads; ++h) {
            const Eigen::OuterStride<> st(3 * d);
            Strided q(base + h * dh, len, dh, st);
            Strided kk(base + d + h * dh, len, dh, st);
            Strided v(base + 2 * d + h * dh, len, dh, st);
            StridedM gq(gbase + h * dh, len, dh, st);
            StridedM gk(gbase + d + h * dh, len, dh, st);
            StridedM gv(gbase + 2 * d + h * dh, len, dh, st);
            Strided go(g.data() + b * len * d + h * dh, len, dh, Eigen::OuterStride<>(d));
            detail::MapC<T> p(probs.data() + (b * heads + h) * len * len, len, len);
            gv.noalias() += p.transpose() * go;
            dp.noalias() = go * v.transpose();
            const Eigen::Matrix<T, Eigen::Dynamic, 1> inner = (dp.array() * p.array()).rowwise().sum();
            ds = p.array() * (dp.array().colwise() - inner.array());
            gq.noalias() += (ds * kk) * scale;
            gk.noalias() += (ds.transpose() * q) * scale;
          }
        }
      });
}

}  // namespace owm::numerics
