#pragma once

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <vector>

#include "peernet/tape.hpp"

namespace peernet {

// Optional per-op FLOP trace used by the cost-model tests. When the pointer
// is set, every op appends its cost under the conventions documented in
// cost.hpp (multiply-accumulate = 2 FLOPs).
struct OpTraceEntry {
  const char* op;
  long long flops;
};
inline thread_local std::vector<OpTraceEntry>* op_trace = nullptr;

namespace detail {

inline void trace_op(const char* op, long long flops) {
  if (op_trace) op_trace->push_back({op, flops});
}

inline void check_finite(const Tensor& t, const char* op) {
  const double* p = t.data();
  for (i64 i = 0; i < t.size(); ++i) {
    if (!std::isfinite(p[i])) {
      throw NumericError(std::string(op) + " produced a non-finite value at flat index " +
                         std::to_string(i));
    }
  }
}

inline Tape* common_tape(std::initializer_list<const TensorValue*> xs) {
  Tape* tape = nullptr;
  for (const TensorValue* x : xs) {
    if (!x->recorded()) continue;
    if (tape && tape != x->tape()) throw NumericError("operands recorded on different tapes");
    tape = x->tape();
  }
  return tape;
}

inline double stable_sigmoid(double x) {
  double y;
  if (x >= 0.0) {
    y = 1.0 / (1.0 + std::exp(-x));
  } else {
    double e = std::exp(x);
    y = e / (1.0 + e);
  }
  // Keep outputs strictly inside (0,1) even at saturation.
  constexpr double lo = 1e-300;
  const double hi = 1.0 - 1.1102230246251565e-16;  // 1 - 2^-53
  return std::min(std::max(y, lo), hi);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline TensorValue sigmoid(const TensorValue& x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (i64 i = 0; i < xv.size(); ++i) out[i] = detail::stable_sigmoid(xv[i]);
  detail::check_finite(out, "sigmoid");
  detail::trace_op("sigmoid", 4 * out.size());
  Tape* tp = x.tape();
  if (!tp) return TensorValue(std::move(out));
  Tensor y = out;
  auto id = tp->record(out.shape(), [y = std::move(y), xn = x.node()](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(xn);
    for (i64 i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
  });
  return TensorValue(std::move(out), tp, id);
}

inline TensorValue relu(const TensorValue& x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (i64 i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  detail::check_finite(out, "relu");
  detail::trace_op("relu", out.size());
  Tape* tp = x.tape();
  if (!tp) return TensorValue(std::move(out));
  Tensor saved = xv;
  auto id = tp->record(out.shape(), [saved = std::move(saved), xn = x.node()](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(xn);
    for (i64 i = 0; i < g.size(); ++i)
      if (saved[i] > 0.0) gx[i] += g[i];
  });
  return TensorValue(std::move(out), tp, id);
}

inline TensorValue add(const TensorValue& a, const TensorValue& b) {
  if (!(a.shape() == b.shape())) {
    throw ShapeError("add: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
  Tensor out(a.shape());
  for (i64 i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  detail::check_finite(out, "add");
  detail::trace_op("add", out.size());
  Tape* tp = detail::common_tape({&a, &b});
  if (!tp) return TensorValue(std::move(out));
  auto id = tp->record(out.shape(), [an = a.recorded() ? a.node() : Tape::kNone,
                                     bn = b.recorded() ? b.node() : Tape::kNone](Tape& t, const Tensor& g) {
    if (an != Tape::kNone) {
      Tensor& ga = t.grad_buffer(an);
      for (i64 i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (bn != Tape::kNone) {
      Tensor& gb = t.grad_buffer(bn);
      for (i64 i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
  return TensorValue(std::move(out), tp, id);
}

// out = s * x with s a one-element tensor (the sigmoid-gated connection
// weight in the fusion sum).
inline TensorValue scalar_scale(const TensorValue& s, const TensorValue& x) {
  if (s.shape().numel() != 1) throw ShapeError("scalar_scale: gate must be scalar-shaped");
  double sv = s.value()[0];
  Tensor out(x.shape());
  for (i64 i = 0; i < out.size(); ++i) out[i] = sv * x.value()[i];
  detail::check_finite(out, "scalar_scale");
  detail::trace_op("scalar_scale", out.size());
  Tape* tp = detail::common_tape({&s, &x});
  if (!tp) return TensorValue(std::move(out));
  Tensor xc = x.value();
  auto id = tp->record(out.shape(), [sv, xc = std::move(xc), sn = s.recorded() ? s.node() : Tape::kNone,
                                     xn = x.recorded() ? x.node() : Tape::kNone](Tape& t, const Tensor& g) {
    if (xn != Tape::kNone) {
      Tensor& gx = t.grad_buffer(xn);
      for (i64 i = 0; i < g.size(); ++i) gx[i] += sv * g[i];
    }
    if (sn != Tape::kNone) {
      double acc = 0.0;
      for (i64 i = 0; i < g.size(); ++i) acc += g[i] * xc[i];
      t.grad_buffer(sn)[0] += acc;
    }
  });
  return TensorValue(std::move(out), tp, id);
}

// Channel-wise product per frame: a has shape (N|1, T|1, 1, 1, C) and is
// broadcast over batch/time when its extent is 1.
inline TensorValue channel_scale(const TensorValue& x, const TensorValue& a) {
  const Shape5& xs = x.shape();
  const Shape5& as = a.shape();
  if (as.h != 1 || as.w != 1 || as.c != xs.c || (as.n != 1 && as.n != xs.n) ||
      (as.t != 1 && as.t != xs.t)) {
    throw ShapeError("channel_scale: attention shape " + as.str() + " incompatible with " + xs.str());
  }
  Tensor out(xs);
  const Tensor& xv = x.value();
  const Tensor& av = a.value();
  for (i64 n = 0; n < xs.n; ++n)
    for (i64 t = 0; t < xs.t; ++t) {
      const double* arow = &av.at(as.n == 1 ? 0 : n, as.t == 1 ? 0 : t, 0, 0, 0);
      for (i64 h = 0; h < xs.h; ++h)
        for (i64 w = 0; w < xs.w; ++w) {
          const double* xp = &xv.at(n, t, h, w, 0);
          double* op = &out.at(n, t, h, w, 0);
          for (i64 c = 0; c < xs.c; ++c) op[c] = arow[c] * xp[c];
        }
    }
  detail::check_finite(out, "channel_scale");
  detail::trace_op("channel_scale", out.size());
  Tape* tp = detail::common_tape({&x, &a});
  if (!tp) return TensorValue(std::move(out));
  Tensor xc = xv;
  Tensor ac = av;
  auto id = tp->record(
      out.shape(), [xs, as, xc = std::move(xc), ac = std::move(ac),
                    xn = x.recorded() ? x.node() : Tape::kNone,
                    an = a.recorded() ? a.node() : Tape::kNone](Tape& t, const Tensor& g) {
        Tensor* gx = xn != Tape::kNone ? &t.grad_buffer(xn) : nullptr;
        Tensor* ga = an != Tape::kNone ? &t.grad_buffer(an) : nullptr;
        for (i64 n = 0; n < xs.n; ++n)
          for (i64 tt = 0; tt < xs.t; ++tt) {
            i64 abase = ac.offset(as.n == 1 ? 0 : n, as.t == 1 ? 0 : tt, 0, 0, 0);
            for (i64 h = 0; h < xs.h; ++h)
              for (i64 w = 0; w < xs.w; ++w) {
                i64 base = xc.offset(n, tt, h, w, 0);
                for (i64 c = 0; c < xs.c; ++c) {
                  double gv = g[base + c];
                  if (gx) (*gx)[base + c] += ac[abase + c] * gv;
                  if (ga) (*ga)[abase + c] += xc[base + c] * gv;
                }
              }
          }
      });
  return TensorValue(std::move(out), tp, id);
}

// ---------------------------------------------------------------------------
// Vector ops (used on connection/attention weight vectors)
// ---------------------------------------------------------------------------

// Numerically stable softmax over the channel axis of a (1,1,1,1,m) tensor.
inline TensorValue softmax_vec(const TensorValue& v) {
  const Shape5& s = v.shape();
  if (s.numel() == 0) throw ShapeError("softmax_vec: empty vector");
  if (s.n * s.t * s.h * s.w != 1) {
    throw ShapeError("softmax_vec: expected a flat vector, got " + s.str());
  }
  i64 m = s.c;
  Tensor out(s);
  double mx = v.value()[0];
  for (i64 i = 1; i < m; ++i) mx = std::max(mx, v.value()[i]);
  double sum = 0.0;
  for (i64 i = 0; i < m; ++i) {
    out[i] = std::exp(v.value()[i] - mx);
    sum += out[i];
  }
  for (i64 i = 0; i < m; ++i) out[i] /= sum;
  detail::check_finite(out, "softmax_vec");
  detail::trace_op("softmax_vec", 4 * m);
  Tape* tp = v.tape();
  if (!tp) return TensorValue(std::move(out));
  Tensor sm = out;
  auto id = tp->record(s, [sm = std::move(sm), vn = v.node()](Tape& t, const Tensor& g) {
    Tensor& gv = t.grad_buffer(vn);
    double dot = 0.0;
    for (i64 i = 0; i < g.size(); ++i) dot += g[i] * sm[i];
    for (i64 i = 0; i < g.size(); ++i) gv[i] += sm[i] * (g[i] - dot);
  });
  return TensorValue(std::move(out), tp, id);
}

// Weighted sum of equally shaped tensors: out = sum_k weights[k] * xs[k].
inline TensorValue mix(const TensorValue& weights, const std::vector<TensorValue>& xs) {
  if (xs.empty()) throw ShapeError("mix: no inputs");
  const Shape5& ws = weights.shape();
  if (ws.n * ws.t * ws.h * ws.w != 1 || ws.c != static_cast<i64>(xs.size())) {
    throw ShapeError("mix: weight vector shape " + ws.str() + " does not match " +
                     std::to_string(xs.size()) + " inputs");
  }
  const Shape5& s = xs[0].shape();
  for (const auto& x : xs) {
    if (!(x.shape() == s)) throw ShapeError("mix: input shape mismatch");
  }
  Tensor out(s);
  for (size_t k = 0; k < xs.size(); ++k) {
    double wk = weights.value()[static_cast<i64>(k)];
    const Tensor& xv = xs[k].value();
    for (i64 i = 0; i < out.size(); ++i) out[i] += wk * xv[i];
  }
  detail::check_finite(out, "mix");
  detail::trace_op("mix", 2 * static_cast<long long>(xs.size()) * out.size());

  std::vector<const TensorValue*> all{&weights};
  for (const auto& x : xs) all.push_back(&x);
  Tape* tp = nullptr;
  for (const TensorValue* x : all) {
    if (!x->recorded()) continue;
    if (tp && tp != x->tape()) throw NumericError("operands recorded on different tapes");
    tp = x->tape();
  }
  if (!tp) return TensorValue(std::move(out));

  struct Saved {
    Tensor x;
    Tape::NodeId node;
  };
  std::vector<Saved> saved;
  saved.reserve(xs.size());
  for (const auto& x : xs) saved.push_back({x.value(), x.recorded() ? x.node() : Tape::kNone});
  Tensor wc = weights.value();
  auto id = tp->record(
      s, [saved = std::move(saved), wc = std::move(wc),
          wn = weights.recorded() ? weights.node() : Tape::kNone](Tape& t, const Tensor& g) {
        for (size_t k = 0; k < saved.size(); ++k) {
          if (saved[k].node != Tape::kNone) {
            Tensor& gx = t.grad_buffer(saved[k].node);
            double wk = wc[static_cast<i64>(k)];
            for (i64 i = 0; i < g.size(); ++i) gx[i] += wk * g[i];
          }
          if (wn != Tape::kNone) {
            double acc = 0.0;
            for (i64 i = 0; i < g.size(); ++i) acc += g[i] * saved[k].x[i];
            t.grad_buffer(wn)[static_cast<i64>(k)] += acc;
          }
        }
      });
  return TensorValue(std::move(out), tp, id);
}

// ---------------------------------------------------------------------------
// Reductions and pooling
// ---------------------------------------------------------------------------

// Global average pooling over the spatial extent, kept per frame.
inline TensorValue gap_spatial(const TensorValue& x) {
  const Shape5& s = x.shape();
  if (s.h < 1 || s.w < 1) throw ShapeError("gap_spatial: zero spatial extent " + s.str());
  Shape5 os{s.n, s.t, 1, 1, s.c};
  Tensor out(os);
  const double inv = 1.0 / static_cast<double>(s.h * s.w);
  const Tensor& xv = x.value();
  for (i64 n = 0; n < s.n; ++n)
    for (i64 t = 0; t < s.t; ++t) {
      double* op = &out.at(n, t, 0, 0, 0);
      for (i64 h = 0; h < s.h; ++h)
        for (i64 w = 0; w < s.w; ++w) {
          const double* xp = &xv.at(n, t, h, w, 0);
          for (i64 c = 0; c < s.c; ++c) op[c] += xp[c];
        }
      for (i64 c = 0; c < s.c; ++c) op[c] *= inv;
    }
  detail::check_finite(out, "gap_spatial");
  detail::trace_op("gap_spatial", x.value().size());
  Tape* tp = x.tape();
  if (!tp) return TensorValue(std::move(out));
  auto id = tp->record(os, [s, inv, xn = x.node()](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(xn);
    for (i64 n = 0; n < s.n; ++n)
      for (i64 tt = 0; tt < s.t; ++tt) {
        const double* gp = &g.at(n, tt, 0, 0, 0);
        for (i64 h = 0; h < s.h; ++h)
          for (i64 w = 0; w < s.w; ++w) {
            double* gxp = &gx.at(n, tt, h, w, 0);
            for (i64 c = 0; c < s.c; ++c) gxp[c] += gp[c] * inv;
          }
      }
  });
  return TensorValue(std::move(out), tp, id);
}

inline TensorValue sum_all(const TensorValue& x) {
  Tensor out(Shape5{});
  double acc = 0.0;
  for (i64 i = 0; i < x.value().size(); ++i) acc += x.value()[i];
  out[0] = acc;
  detail::check_finite(out, "sum_all");
  detail::trace_op("sum_all", x.value().size());
  Tape* tp = x.tape();
  if (!tp) return TensorValue(std::move(out));
  auto id = tp->record(out.shape(), [xn = x.node()](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(xn);
    for (i64 i = 0; i < gx.size(); ++i) gx[i] += g[0];
  });
  return TensorValue(std::move(out), tp, id);
}

// Max pooling with pool size = stride = p, ceil mode at the borders.
inline TensorValue max_pool_spatial(const TensorValue& x, int p) {
  if (p < 1) throw ShapeError("max_pool_spatial: pool size must be >= 1");
  const Shape5& s = x.shape();
  i64 ho = (s.h + p - 1) / p;
  i64 wo = (s.w + p - 1) / p;
  Shape5 os{s.n, s.t, ho, wo, s.c};
  Tensor out(os);
  const Tensor& xv = x.value();
  for (i64 n = 0; n < s.n; ++n)
    for (i64 t = 0; t < s.t; ++t)
      for (i64 oh = 0; oh < ho; ++oh)
        for (i64 ow = 0; ow < wo; ++ow)
          for (i64 c = 0; c < s.c; ++c) {
            double best = -std::numeric_limits<double>::infinity();
            for (i64 h = oh * p; h < std::min<i64>((oh + 1) * p, s.h); ++h)
              for (i64 w = ow * p; w < std::min<i64>((ow + 1) * p, s.w); ++w)
                best = std::max(best, xv.at(n, t, h, w, c));
            out.at(n, t, oh, ow, c) = best;
          }
  detail::check_finite(out, "max_pool_spatial");
  detail::trace_op("max_pool_spatial", out.size() * p * p);
  Tape* tp = x.tape();
  if (!tp) return TensorValue(std::move(out));
  Tensor saved = xv;
  auto id = tp->record(os, [s, os, p, saved = std::move(saved), xn = x.node()](Tape& t,
                                                                               const Tensor& g) {
    Tensor& gx = t.grad_buffer(xn);
    for (i64 n = 0; n < s.n; ++n)
      for (i64 tt = 0; tt < s.t; ++tt)
        for (i64 oh = 0; oh < os.h; ++oh)
          for (i64 ow = 0; ow < os.w; ++ow)
            for (i64 c = 0; c < s.c; ++c) {
              // First-maximum tie rule, matching forward scan order.
              double best = -std::numeric_limits<double>::infinity();
              i64 bh = -1, bw = -1;
              for (i64 h = oh * p; h < std::min<i64>((oh + 1) * p, s.h); ++h)
                for (i64 w = ow * p; w < std::min<i64>((ow + 1) * p, s.w); ++w) {
                  double v = saved.at(n, tt, h, w, c);
                  if (v > best) {
                    best = v;
                    bh = h;
                    bw = w;
                  }
                }
              gx.at(n, tt, bh, bw, c) += g.at(n, tt, oh, ow, c);
            }
  });
  return TensorValue(std::move(out), tp, id);
}

// Average pooling by an integer factor (spatial dims must divide evenly).
inline TensorValue avg_pool_spatial(const TensorValue& x, int f) {
  if (f < 1) throw ShapeError("avg_pool_spatial: factor must be >= 1");
  const Shape5& s = x.shape();
  if (s.h % f != 0 || s.w % f != 0) {
    throw ShapeError("avg_pool_spatial: factor " + std::to_string(f) +
                     " does not divide spatial dims of " + s.str());
  }
  Shape5 os{s.n, s.t, s.h / f, s.w / f, s.c};
  Tensor out(os);
  const double inv = 1.0 / static_cast<double>(f * f);
  const Tensor& xv = x.value();
  for (i64 n = 0; n < s.n; ++n)
    for (i64 t = 0; t < s.t; ++t)
      for (i64 oh = 0; oh < os.h; ++oh)
        for (i64 ow = 0; ow < os.w; ++ow) {
          double* op = &out.at(n, t, oh, ow, 0);
          for (i64 h = oh * f; h < (oh + 1) * f; ++h)
            for (i64 w = ow * f; w < (ow + 1) * f; ++w) {
              const double* xp = &xv.at(n, t, h, w, 0);
              for (i64 c = 0; c < s.c; ++c) op[c] += xp[c];
            }
          for (i64 c = 0; c < s.c; ++c) op[c] *= inv;
        }
  detail::check_finite(out, "avg_pool_spatial");
  detail::trace_op("avg_pool_spatial", out.size() * f * f);
  Tape* tp = x.tape();
  if (!tp) return TensorValue(std::move(out));
  auto id = tp->record(os, [s, os, f, inv, xn = x.node()](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(xn);
    for (i64 n = 0; n < s.n; ++n)
      for (i64 tt = 0; tt < s.t; ++tt)
        for (i64 oh = 0; oh < os.h; ++oh)
          for (i64 ow = 0; ow < os.w; ++ow) {
            const double* gp = &g.at(n, tt, oh, ow, 0);
            for (i64 h = oh * f; h < (oh + 1) * f; ++h)
              for (i64 w = ow * f; w < (ow + 1) * f; ++w) {
                double* gxp = &gx.at(n, tt, h, w, 0);
                for (i64 c = 0; c < s.c; ++c) gxp[c] += gp[c] * inv;
              }
          }
  });
  return TensorValue(std::move(out), tp, id);
}

// Max over the time axis of a pooled (N,T,1,1,C) tensor.
inline TensorValue max_over_time(const TensorValue& x) {
  const Shape5& s = x.shape();
  if (s.h != 1 || s.w != 1) throw ShapeError("max_over_time: expects pooled input, got " + s.str());
  Shape5 os{s.n, 1, 1, 1, s.c};
  Tensor out(os);
  const Tensor& xv = x.value();
  for (i64 n = 0; n < s.n; ++n)
    for (i64 c = 0; c < s.c; ++c) {
      double best = xv.at(n, 0, 0, 0, c);
      for (i64 t = 1; t < s.t; ++t) best = std::max(best, xv.at(n, t, 0, 0, c));
      out.at(n, 0, 0, 0, c) = best;
    }
  detail::check_finite(out, "max_over_time");
  detail::trace_op("max_over_time", x.value().size());
  Tape* tp = x.tape();
  if (!tp) return TensorValue(std::move(out));
  Tensor saved = xv;
  auto id = tp->record(os, [s, saved = std::move(saved), xn = x.node()](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(xn);
    for (i64 n = 0; n < s.n; ++n)
      for (i64 c = 0; c < s.c; ++c) {
        i64 bt = 0;
        double best = saved.at(n, 0, 0, 0, c);
        for (i64 tt = 1; tt < s.t; ++tt) {
          double v = saved.at(n, tt, 0, 0, c);
          if (v > best) {
            best = v;
            bt = tt;
          }
        }
        gx.at(n, bt, 0, 0, c) += g.at(n, 0, 0, 0, c);
      }
  });
  return TensorValue(std::move(out), tp, id);
}

// ---------------------------------------------------------------------------
// Convolution and fully connected layers
// ---------------------------------------------------------------------------

// 3-D convolution with same padding. Weight layout packs (kt,kh,kw,cin,cout)
// into Shape5 fields (n,t,h,w,c). Temporal stride is always 1 and temporal
// taps are spread by `dilation_t`, so T is preserved for any dilation.
// Spatial output extent is ceil(in/stride) (TF-style same padding).
inline TensorValue conv3d(const TensorValue& x, const TensorValue& w, const TensorValue& b,
                          int stride, int dilation_t) {
  const Shape5& xs = x.shape();
  const Shape5& ws = w.shape();
  const i64 kt = ws.n, kh = ws.t, kw = ws.h, cin = ws.w, cout = ws.c;
  if (xs.c != cin) {
    throw ShapeError("conv3d: input channels " + std::to_string(xs.c) + " != weight cin " +
                     std::to_string(cin));
  }
  if (b.shape().numel() != cout) throw ShapeError("conv3d: bias size mismatch");
  if (stride < 1 || dilation_t < 1) throw ShapeError("conv3d: stride/dilation must be >= 1");

  const i64 ho = (xs.h + stride - 1) / stride;
  const i64 wo = (xs.w + stride - 1) / stride;
  const i64 pad_h = std::max<i64>((ho - 1) * stride + kh - xs.h, 0) / 2;
  const i64 pad_w = std::max<i64>((wo - 1) * stride + kw - xs.w, 0) / 2;
  const i64 pad_t = (kt - 1) * dilation_t / 2;

  Shape5 os{xs.n, xs.t, ho, wo, cout};
  Tensor out(os);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();

  for (i64 n = 0; n < os.n; ++n)
    for (i64 to = 0; to < os.t; ++to)
      for (i64 oh = 0; oh < ho; ++oh)
        for (i64 ow = 0; ow < wo; ++ow) {
          double* op = &out.at(n, to, oh, ow, 0);
          for (i64 co = 0; co < cout; ++co) op[co] = bv[co];
          for (i64 ikt = 0; ikt < kt; ++ikt) {
            i64 ti = to + ikt * dilation_t - pad_t;
            if (ti < 0 || ti >= xs.t) continue;
            for (i64 ikh = 0; ikh < kh; ++ikh) {
              i64 hi = oh * stride + ikh - pad_h;
              if (hi < 0 || hi >= xs.h) continue;
              for (i64 ikw = 0; ikw < kw; ++ikw) {
                i64 wi = ow * stride + ikw - pad_w;
                if (wi < 0 || wi >= xs.w) continue;
                const double* xp = &xv.at(n, ti, hi, wi, 0);
                const double* wp = wv.data() + wv.offset(ikt, ikh, ikw, 0, 0);
                for (i64 ci = 0; ci < cin; ++ci) {
                  double a = xp[ci];
                  if (a == 0.0) continue;
                  const double* wrow = wp + ci * cout;
                  for (i64 co = 0; co < cout; ++co) op[co] += a * wrow[co];
                }
              }
            }
          }
        }
  detail::check_finite(out, "conv3d");
  detail::trace_op("conv3d", 2 * kt * kh * kw * cin * cout * os.n * os.t * ho * wo);

  Tape* tp = detail::common_tape({&x, &w, &b});
  if (!tp) return TensorValue(std::move(out));
  Tensor xc = xv;
  Tensor wc = wv;
  auto id = tp->record(
      os, [xs, os, kt, kh, kw, cin, cout, stride, dilation_t, pad_h, pad_w, pad_t,
           xc = std::move(xc), wc = std::move(wc), xn = x.recorded() ? x.node() : Tape::kNone,
           wn = w.recorded() ? w.node() : Tape::kNone,
           bn = b.recorded() ? b.node() : Tape::kNone](Tape& t, const Tensor& g) {
        Tensor* gx = xn != Tape::kNone ? &t.grad_buffer(xn) : nullptr;
        Tensor* gw = wn != Tape::kNone ? &t.grad_buffer(wn) : nullptr;
        Tensor* gb = bn != Tape::kNone ? &t.grad_buffer(bn) : nullptr;
        for (i64 n = 0; n < os.n; ++n)
          for (i64 to = 0; to < os.t; ++to)
            for (i64 oh = 0; oh < os.h; ++oh)
              for (i64 ow = 0; ow < os.w; ++ow) {
                const double* gp = &g.at(n, to, oh, ow, 0);
                if (gb)
                  for (i64 co = 0; co < cout; ++co) (*gb)[co] += gp[co];
                for (i64 ikt = 0; ikt < kt; ++ikt) {
                  i64 ti = to + ikt * dilation_t - pad_t;
                  if (ti < 0 || ti >= xs.t) continue;
                  for (i64 ikh = 0; ikh < kh; ++ikh) {
                    i64 hi = oh * stride + ikh - pad_h;
                    if (hi < 0 || hi >= xs.h) continue;
                    for (i64 ikw = 0; ikw < kw; ++ikw) {
                      i64 wi = ow * stride + ikw - pad_w;
                      if (wi < 0 || wi >= xs.w) continue;
                      i64 xbase = xc.offset(n, ti, hi, wi, 0);
                      i64 wbase = wc.offset(ikt, ikh, ikw, 0, 0);
                      for (i64 ci = 0; ci < cin; ++ci) {
                        double xval = xc[xbase + ci];
                        const double* wrow = wc.data() + wbase + ci * cout;
                        double gxacc = 0.0;
                        for (i64 co = 0; co < cout; ++co) {
                          double gv = gp[co];
                          gxacc += wrow[co] * gv;
                          if (gw) (*gw)[wbase + ci * cout + co] += xval * gv;
                        }
                        if (gx) (*gx)[xbase + ci] += gxacc;
                      }
                    }
                  }
                }
              }
      });
  return TensorValue(std::move(out), tp, id);
}

// Fully connected layer applied per frame to a pooled (N,T,1,1,Cin) tensor.
// Weight layout: (1,1,1,Cin,Cout). Pass an empty bias TensorValue for none.
inline TensorValue fc_per_frame(const TensorValue& x, const TensorValue& w, const TensorValue* b) {
  const Shape5& xs = x.shape();
  const Shape5& ws = w.shape();
  if (xs.h != 1 || xs.w != 1) throw ShapeError("fc_per_frame: expects pooled input, got " + xs.str());
  const i64 cin = ws.w, cout = ws.c;
  if (ws.n != 1 || ws.t != 1 || ws.h != 1 || xs.c != cin) {
    throw ShapeError("fc_per_frame: weight shape " + ws.str() + " incompatible with input " + xs.str());
  }
  if (b && b->shape().numel() != cout) throw ShapeError("fc_per_frame: bias size mismatch");

  Shape5 os{xs.n, xs.t, 1, 1, cout};
  Tensor out(os);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  for (i64 n = 0; n < xs.n; ++n)
    for (i64 t = 0; t < xs.t; ++t) {
      const double* xp = &xv.at(n, t, 0, 0, 0);
      double* op = &out.at(n, t, 0, 0, 0);
      if (b)
        for (i64 co = 0; co < cout; ++co) op[co] = b->value()[co];
      for (i64 ci = 0; ci < cin; ++ci) {
        double a = xp[ci];
        const double* wrow = wv.data() + ci * cout;
        for (i64 co = 0; co < cout; ++co) op[co] += a * wrow[co];
      }
    }
  detail::check_finite(out, "fc_per_frame");
  detail::trace_op("fc_per_frame", 2 * cin * cout * xs.n * xs.t);

  Tape* tp = b ? detail::common_tape({&x, &w, b}) : detail::common_tape({&x, &w});
  if (!tp) return TensorValue(std::move(out));
  Tensor xc = xv;
  Tensor wc = wv;
  auto id = tp->record(
      os, [xs, cin, cout, xc = std::move(xc), wc = std::move(wc),
           xn = x.recorded() ? x.node() : Tape::kNone, wn = w.recorded() ? w.node() : Tape::kNone,
           bn = (b && b->recorded()) ? b->node() : Tape::kNone](Tape& t, const Tensor& g) {
        Tensor* gx = xn != Tape::kNone ? &t.grad_buffer(xn) : nullptr;
        Tensor* gw = wn != Tape::kNone ? &t.grad_buffer(wn) : nullptr;
        Tensor* gb = bn != Tape::kNone ? &t.grad_buffer(bn) : nullptr;
        for (i64 n = 0; n < xs.n; ++n)
          for (i64 tt = 0; tt < xs.t; ++tt) {
            i64 xbase = xc.offset(n, tt, 0, 0, 0);
            const double* gp = &g.at(n, tt, 0, 0, 0);
            if (gb)
              for (i64 co = 0; co < cout; ++co) (*gb)[co] += gp[co];
            for (i64 ci = 0; ci < cin; ++ci) {
              const double* wrow = wc.data() + ci * cout;
              double gxacc = 0.0;
              for (i64 co = 0; co < cout; ++co) {
                double gv = gp[co];
                gxacc += wrow[co] * gv;
                if (gw) (*gw)[ci * cout + co] += xc[xbase + ci] * gv;
              }
              if (gx) (*gx)[xbase + ci] += gxacc;
            }
          }
      });
  return TensorValue(std::move(out), tp, id);
}

inline TensorValue fc_per_frame(const TensorValue& x, const TensorValue& w, const TensorValue& b) {
  return fc_per_frame(x, w, &b);
}

inline TensorValue fc_per_frame(const TensorValue& x, const TensorValue& w) {
  return fc_per_frame(x, w, nullptr);
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Mean softmax cross entropy over the batch. Logits shape (N,1,1,1,K).
inline TensorValue softmax_cross_entropy(const TensorValue& logits, const std::vector<int>& labels) {
  const Shape5& s = logits.shape();
  if (s.t != 1 || s.h != 1 || s.w != 1) {
    throw ShapeError("softmax_cross_entropy: expects (N,1,1,1,K) logits, got " + s.str());
  }
  if (static_cast<i64>(labels.size()) != s.n) {
    throw ShapeError("softmax_cross_entropy: batch " + std::to_string(s.n) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const i64 K = s.c;
  for (int y : labels) {
    if (y < 0 || y >= K) throw ConfigError("softmax_cross_entropy: label out of range");
  }
  const Tensor& lv = logits.value();
  Tensor probs(s);
  double total = 0.0;
  for (i64 n = 0; n < s.n; ++n) {
    const double* lp = &lv.at(n, 0, 0, 0, 0);
    double mx = lp[0];
    for (i64 k = 1; k < K; ++k) mx = std::max(mx, lp[k]);
    double sum = 0.0;
    for (i64 k = 0; k < K; ++k) sum += std::exp(lp[k] - mx);
    double lse = mx + std::log(sum);
    total += lse - lp[labels[static_cast<size_t>(n)]];
    double* pp = &probs.at(n, 0, 0, 0, 0);
    for (i64 k = 0; k < K; ++k) pp[k] = std::exp(lp[k] - lse);
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(s.n));
  detail::check_finite(out, "softmax_cross_entropy");
  Tape* tp = logits.tape();
  if (!tp) return TensorValue(std::move(out));
  auto id = tp->record(out.shape(), [s, K, labels, probs = std::move(probs),
                                     ln = logits.node()](Tape& t, const Tensor& g) {
    Tensor& gl = t.grad_buffer(ln);
    double scale = g[0] / static_cast<double>(s.n);
    for (i64 n = 0; n < s.n; ++n) {
      for (i64 k = 0; k < K; ++k) {
        double p = probs.at(n, 0, 0, 0, k);
        double ind = (k == labels[static_cast<size_t>(n)]) ? 1.0 : 0.0;
        gl.at(n, 0, 0, 0, k) += (p - ind) * scale;
      }
    }
  });
  return TensorValue(std::move(out), tp, id);
}

// Mean binary cross entropy over every (sample, class) element.
inline TensorValue sigmoid_bce(const TensorValue& logits, const Tensor& targets) {
  const Shape5& s = logits.shape();
  if (!(targets.shape() == s)) throw ShapeError("sigmoid_bce: target shape mismatch");
  const Tensor& lv = logits.value();
  double total = 0.0;
  for (i64 i = 0; i < lv.size(); ++i) {
    double l = lv[i], t = targets[i];
    total += std::max(l, 0.0) - l * t + std::log1p(std::exp(-std::abs(l)));
  }
  const double inv = 1.0 / static_cast<double>(lv.size());
  Tensor out = Tensor::scalar(total * inv);
  detail::check_finite(out, "sigmoid_bce");
  Tape* tp = logits.tape();
  if (!tp) return TensorValue(std::move(out));
  Tensor lc = lv;
  Tensor tc = targets;
  auto id = tp->record(out.shape(), [inv, lc = std::move(lc), tc = std::move(tc),
                                     ln = logits.node()](Tape& t, const Tensor& g) {
    Tensor& gl = t.grad_buffer(ln);
    for (i64 i = 0; i < lc.size(); ++i) {
      gl[i] += (detail::stable_sigmoid(lc[i]) - tc[i]) * g[0] * inv;
    }
  });
  return TensorValue(std::move(out), tp, id);
}

}  // namespace peernet
