#pragma once

#include <algorithm>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <utility>

#include "rtta/common.hpp"

namespace rtta {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense 64-bit tensor. `node` is the position on the tape that produced it;
// -1 marks a constant (or detached) tensor that gradients do not flow into.
// `grad` stays empty until filled from a GradientMap after backprop.
struct Tensor {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  int node = -1;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
    if (numel(shape) != values.size())
      throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
  }

  static Tensor zeros(Shape s) {
    std::vector<double> v(numel(s), 0.0);
    return Tensor(std::move(s), std::move(v));
  }

  static Tensor full(Shape s, double fill) {
    std::vector<double> v(numel(s), fill);
    return Tensor(std::move(s), std::move(v));
  }

  std::size_t size() const { return values.size(); }
  bool has_grad() const { return !grad.empty(); }
};

// Result of a backprop pass: per-node gradient buffers. Leaves that the loss
// never reached yield zeros on lookup, by contract.
class GradientMap {
 public:
  GradientMap() = default;
  explicit GradientMap(std::vector<std::vector<double>> store) : store_(std::move(store)) {}

  bool reached(const Tensor& t) const {
    return t.node >= 0 && t.node < static_cast<int>(store_.size()) && !store_[t.node].empty();
  }

  std::vector<double> at(const Tensor& t) const {
    if (reached(t)) return store_[t.node];
    return std::vector<double>(t.size(), 0.0);
  }

  // Convenience for tests: stores the gradient on the tensor itself.
  void write_to(Tensor& t) const { t.grad = at(t); }

 private:
  std::vector<std::vector<double>> store_;
};

// Reverse-mode tape over dense tensors. Each primitive validates shapes,
// computes the forward value, rejects non-finite outputs, and records a
// backward closure when at least one input is differentiable. Single-threaded
// per tape; tensors are immutable once returned.
class Tape {
 public:
  using GradStore = std::vector<std::vector<double>>;

  Tensor variable(Tensor t) {
    t.node = new_node();
    return t;
  }

  Tensor variable(Shape s, std::vector<double> v) { return variable(Tensor(std::move(s), std::move(v))); }

  static Tensor constant(Shape s, std::vector<double> v) { return Tensor(std::move(s), std::move(v)); }

  // Value-identical tensor with severed lineage: gradients stop here.
  static Tensor detach(const Tensor& t) {
    Tensor d;
    d.shape = t.shape;
    d.values = t.values;
    return d;
  }

  // --- primitives ---------------------------------------------------------

  // x:[n,di] * w:[di,do] + b:[do] -> [n,do]
  Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.shape.size() != 2 || w.shape.size() != 2 || b.shape.size() != 1)
      throw ShapeError("affine: expected x rank 2, w rank 2, b rank 1; got x " + shape_str(x.shape) +
                       " w " + shape_str(w.shape) + " b " + shape_str(b.shape));
    const int n = x.shape[0], di = x.shape[1], dout = w.shape[1];
    if (w.shape[0] != di)
      throw ShapeError("affine: x has " + std::to_string(di) + " columns but w has " +
                       std::to_string(w.shape[0]) + " rows (x " + shape_str(x.shape) + ", w " +
                       shape_str(w.shape) + ")");
    if (b.shape[0] != dout)
      throw ShapeError("affine: w has " + std::to_string(dout) + " columns but b has " +
                       std::to_string(b.shape[0]) + " (w " + shape_str(w.shape) + ", b " +
                       shape_str(b.shape) + ")");

    Tensor out = Tensor::zeros({n, dout});
    for (int r = 0; r < n; ++r) {
      const double* xr = &x.values[static_cast<std::size_t>(r) * di];
      double* or_ = &out.values[static_cast<std::size_t>(r) * dout];
      for (int j = 0; j < dout; ++j) or_[j] = b.values[j];
      for (int i = 0; i < di; ++i) {
        const double xi = xr[i];
        const double* wi = &w.values[static_cast<std::size_t>(i) * dout];
        for (int j = 0; j < dout; ++j) or_[j] += xi * wi[j];
      }
    }
    ensure_finite("affine", out.values);

    if (live(x) || live(w) || live(b)) {
      const int xid = x.node, wid = w.node, bid = b.node;
      record(out, [xid, wid, bid, n, di, dout, xv = x.values, wv = w.values](
                      const std::vector<double>& g, GradStore& gs) {
        if (xid >= 0) {
          auto& gx = buf(gs, xid, xv.size());
          for (int r = 0; r < n; ++r)
            for (int i = 0; i < di; ++i) {
              double acc = 0.0;
              const double* gr = &g[static_cast<std::size_t>(r) * dout];
              const double* wi = &wv[static_cast<std::size_t>(i) * dout];
              for (int j = 0; j < dout; ++j) acc += gr[j] * wi[j];
              gx[static_cast<std::size_t>(r) * di + i] += acc;
            }
        }
        if (wid >= 0) {
          auto& gw = buf(gs, wid, wv.size());
          for (int r = 0; r < n; ++r) {
            const double* xr = &xv[static_cast<std::size_t>(r) * di];
            const double* gr = &g[static_cast<std::size_t>(r) * dout];
            for (int i = 0; i < di; ++i)
              for (int j = 0; j < dout; ++j) gw[static_cast<std::size_t>(i) * dout + j] += xr[i] * gr[j];
          }
        }
        if (bid >= 0) {
          auto& gb = buf(gs, bid, static_cast<std::size_t>(dout));
          for (int r = 0; r < n; ++r)
            for (int j = 0; j < dout; ++j) gb[j] += g[static_cast<std::size_t>(r) * dout + j];
        }
      });
    }
    return out;
  }

  // x:[n,ci,h,w] (*) k:[co,ci,kh,kw] + b:[co] -> [n,co,h,w].
  // Stride 1, symmetric zero padding (kh-1)/2; odd square kernels only.
  Tensor conv2d(const Tensor& x, const Tensor& k, const Tensor& b) {
    if (x.shape.size() != 4 || k.shape.size() != 4 || b.shape.size() != 1)
      throw ShapeError("conv2d: expected x rank 4, k rank 4, b rank 1; got x " + shape_str(x.shape) +
                       " k " + shape_str(k.shape) + " b " + shape_str(b.shape));
    const int n = x.shape[0], ci = x.shape[1], h = x.shape[2], w = x.shape[3];
    const int co = k.shape[0], kh = k.shape[2], kw = k.shape[3];
    if (k.shape[1] != ci)
      throw ShapeError("conv2d: input has " + std::to_string(ci) + " channels but kernel expects " +
                       std::to_string(k.shape[1]) + " (x " + shape_str(x.shape) + ", k " +
                       shape_str(k.shape) + ")");
    if (kh != kw || kh % 2 == 0)
      throw ShapeError("conv2d: kernel must be odd and square, got " + shape_str(k.shape));
    if (b.shape[0] != co)
      throw ShapeError("conv2d: kernel has " + std::to_string(co) + " output channels but bias has " +
                       std::to_string(b.shape[0]));
    const int pad = (kh - 1) / 2;

    Tensor out = Tensor::zeros({n, co, h, w});
    auto xat = [&](int in, int c, int y, int xx) {
      return x.values[((static_cast<std::size_t>(in) * ci + c) * h + y) * w + xx];
    };
    for (int in = 0; in < n; ++in)
      for (int oc = 0; oc < co; ++oc)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx) {
            double acc = b.values[oc];
            for (int c = 0; c < ci; ++c)
              for (int dy = 0; dy < kh; ++dy) {
                const int sy = y + dy - pad;
                if (sy < 0 || sy >= h) continue;
                for (int dx = 0; dx < kw; ++dx) {
                  const int sx = xx + dx - pad;
                  if (sx < 0 || sx >= w) continue;
                  acc += xat(in, c, sy, sx) * k.values[((static_cast<std::size_t>(oc) * ci + c) * kh + dy) * kw + dx];
                }
              }
            out.values[((static_cast<std::size_t>(in) * co + oc) * h + y) * w + xx] = acc;
          }
    ensure_finite("conv2d", out.values);

    if (live(x) || live(k) || live(b)) {
      const int xid = x.node, kid = k.node, bid = b.node;
      record(out, [xid, kid, bid, n, ci, h, w, co, kh, kw, pad, xv = x.values, kv = k.values](
                      const std::vector<double>& g, GradStore& gs) {
        std::vector<double>* gx = xid >= 0 ? &buf(gs, xid, xv.size()) : nullptr;
        std::vector<double>* gk = kid >= 0 ? &buf(gs, kid, kv.size()) : nullptr;
        std::vector<double>* gb = bid >= 0 ? &buf(gs, bid, static_cast<std::size_t>(co)) : nullptr;
        for (int in = 0; in < n; ++in)
          for (int oc = 0; oc < co; ++oc)
            for (int y = 0; y < h; ++y)
              for (int xx = 0; xx < w; ++xx) {
                const double go = g[((static_cast<std::size_t>(in) * co + oc) * h + y) * w + xx];
                if (gb) (*gb)[oc] += go;
                for (int c = 0; c < ci; ++c)
                  for (int dy = 0; dy < kh; ++dy) {
                    const int sy = y + dy - pad;
                    if (sy < 0 || sy >= h) continue;
                    for (int dx = 0; dx < kw; ++dx) {
                      const int sx = xx + dx - pad;
                      if (sx < 0 || sx >= w) continue;
                      const std::size_t xi = ((static_cast<std::size_t>(in) * ci + c) * h + sy) * w + sx;
                      const std::size_t ki = ((static_cast<std::size_t>(oc) * ci + c) * kh + dy) * kw + dx;
                      if (gx) (*gx)[xi] += go * kv[ki];
                      if (gk) (*gk)[ki] += go * xv[xi];
                    }
                  }
              }
      });
    }
    return out;
  }

  Tensor relu(const Tensor& x) {
    Tensor out = x_like(x);
    for (std::size_t i = 0; i < x.size(); ++i) out.values[i] = x.values[i] > 0.0 ? x.values[i] : 0.0;
    ensure_finite("relu", out.values);
    if (live(x)) {
      record(out, [xid = x.node, xv = x.values](const std::vector<double>& g, GradStore& gs) {
        auto& gx = buf(gs, xid, xv.size());
        for (std::size_t i = 0; i < xv.size(); ++i)
          if (xv[i] > 0.0) gx[i] += g[i];
      });
    }
    return out;
  }

  Tensor add(const Tensor& a, const Tensor& b) { return binary("add", a, b, std::plus<double>(), 1.0, 1.0); }
  Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", a, b, std::minus<double>(), 1.0, -1.0); }

  Tensor mul(const Tensor& a, const Tensor& b) {
    check_same("mul", a, b);
    Tensor out = x_like(a);
    for (std::size_t i = 0; i < a.size(); ++i) out.values[i] = a.values[i] * b.values[i];
    ensure_finite("mul", out.values);
    if (live(a) || live(b)) {
      record(out, [aid = a.node, bid = b.node, av = a.values, bv = b.values](const std::vector<double>& g,
                                                                             GradStore& gs) {
        if (aid >= 0) {
          auto& ga = buf(gs, aid, av.size());
          for (std::size_t i = 0; i < av.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (bid >= 0) {
          auto& gb = buf(gs, bid, bv.size());
          for (std::size_t i = 0; i < bv.size(); ++i) gb[i] += g[i] * av[i];
        }
      });
    }
    return out;
  }

  Tensor scale(const Tensor& x, double c) {
    Tensor out = x_like(x);
    for (std::size_t i = 0; i < x.size(); ++i) out.values[i] = c * x.values[i];
    ensure_finite("scale", out.values);
    if (live(x)) {
      record(out, [xid = x.node, c, sz = x.size()](const std::vector<double>& g, GradStore& gs) {
        auto& gx = buf(gs, xid, sz);
        for (std::size_t i = 0; i < sz; ++i) gx[i] += c * g[i];
      });
    }
    return out;
  }

  Tensor exp(const Tensor& x) {
    Tensor out = x_like(x);
    for (std::size_t i = 0; i < x.size(); ++i) out.values[i] = std::exp(x.values[i]);
    ensure_finite("exp", out.values);
    if (live(x)) {
      record(out, [xid = x.node, ev = out.values](const std::vector<double>& g, GradStore& gs) {
        auto& gx = buf(gs, xid, ev.size());
        for (std::size_t i = 0; i < ev.size(); ++i) gx[i] += g[i] * ev[i];
      });
    }
    return out;
  }

  // Row-wise log softmax over the last dimension of [n,k], max-subtracted.
  Tensor log_softmax(const Tensor& x) {
    if (x.shape.size() != 2)
      throw ShapeError("log_softmax: expected rank 2, got " + shape_str(x.shape));
    const int n = x.shape[0], k = x.shape[1];
    Tensor out = x_like(x);
    for (int r = 0; r < n; ++r) {
      const double* xr = &x.values[static_cast<std::size_t>(r) * k];
      double* orow = &out.values[static_cast<std::size_t>(r) * k];
      const double m = *std::max_element(xr, xr + k);
      double sum = 0.0;
      for (int j = 0; j < k; ++j) sum += std::exp(xr[j] - m);
      const double lse = m + std::log(sum);
      for (int j = 0; j < k; ++j) orow[j] = xr[j] - lse;
    }
    ensure_finite("log_softmax", out.values);
    if (live(x)) {
      record(out, [xid = x.node, n, k, lsm = out.values](const std::vector<double>& g, GradStore& gs) {
        auto& gx = buf(gs, xid, lsm.size());
        for (int r = 0; r < n; ++r) {
          const std::size_t off = static_cast<std::size_t>(r) * k;
          double gsum = 0.0;
          for (int j = 0; j < k; ++j) gsum += g[off + j];
          for (int j = 0; j < k; ++j) gx[off + j] += g[off + j] - std::exp(lsm[off + j]) * gsum;
        }
      });
    }
    return out;
  }

  // Normalizes per channel with the given fixed statistics (eval mode).
  // x is [n,c] or [n,c,h,w]; gamma/beta/mean/var have length c.
  Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         const std::vector<double>& mean, const std::vector<double>& var,
                         double eps = 1e-5) {
    const auto [c, sp] = bn_dims(x, gamma, beta);
    if (mean.size() != static_cast<std::size_t>(c) || var.size() != static_cast<std::size_t>(c))
      throw ShapeError("batch_norm_eval: statistics length mismatch for " + std::to_string(c) + " channels");
    const int n = x.shape[0];
    std::vector<double> inv_sd(c);
    for (int ch = 0; ch < c; ++ch) {
      if (!(var[ch] > 0.0) && var[ch] != 0.0)
        throw NumericError("batch_norm_eval: running_var must be positive");
      inv_sd[ch] = 1.0 / std::sqrt(var[ch] + eps);
    }
    Tensor out = x_like(x);
    std::vector<double> xhat(x.size());
    for (int in = 0; in < n; ++in)
      for (int ch = 0; ch < c; ++ch)
        for (int s = 0; s < sp; ++s) {
          const std::size_t i = (static_cast<std::size_t>(in) * c + ch) * sp + s;
          xhat[i] = (x.values[i] - mean[ch]) * inv_sd[ch];
          out.values[i] = gamma.values[ch] * xhat[i] + beta.values[ch];
        }
    ensure_finite("batch_norm_eval", out.values);
    if (live(x) || live(gamma) || live(beta)) {
      record(out, [xid = x.node, gid = gamma.node, bid = beta.node, n, c, sp, xhat = std::move(xhat),
                   gv = gamma.values, inv_sd](const std::vector<double>& g, GradStore& gs) {
        std::vector<double>* gx = xid >= 0 ? &buf(gs, xid, xhat.size()) : nullptr;
        std::vector<double>* gg = gid >= 0 ? &buf(gs, gid, gv.size()) : nullptr;
        std::vector<double>* gb = bid >= 0 ? &buf(gs, bid, gv.size()) : nullptr;
        for (int in = 0; in < n; ++in)
          for (int ch = 0; ch < c; ++ch)
            for (int s = 0; s < sp; ++s) {
              const std::size_t i = (static_cast<std::size_t>(in) * c + ch) * sp + s;
              if (gx) (*gx)[i] += g[i] * gv[ch] * inv_sd[ch];
              if (gg) (*gg)[ch] += g[i] * xhat[i];
              if (gb) (*gb)[ch] += g[i];
            }
      });
    }
    return out;
  }

  // Normalizes per channel with the current batch statistics (train /
  // tta_adaptive modes). Reports the biased batch statistics through
  // batch_mean / batch_var so the caller can run the EMA update.
  Tensor batch_norm_batch(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                          std::vector<double>* batch_mean = nullptr,
                          std::vector<double>* batch_var = nullptr, double eps = 1e-5) {
    const auto [c, sp] = bn_dims(x, gamma, beta);
    const int n = x.shape[0];
    const int m = n * sp;
    if (m < 2) throw Error("batch_norm_batch: needs at least 2 elements per channel, got " + std::to_string(m));

    std::vector<double> mean(c, 0.0), var(c, 0.0), inv_sd(c);
    for (int ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      for (int in = 0; in < n; ++in)
        for (int s = 0; s < sp; ++s) acc += x.values[(static_cast<std::size_t>(in) * c + ch) * sp + s];
      mean[ch] = acc / m;
      double vacc = 0.0;
      for (int in = 0; in < n; ++in)
        for (int s = 0; s < sp; ++s) {
          const double d = x.values[(static_cast<std::size_t>(in) * c + ch) * sp + s] - mean[ch];
          vacc += d * d;
        }
      var[ch] = vacc / m;
      inv_sd[ch] = 1.0 / std::sqrt(var[ch] + eps);
    }
    if (batch_mean) *batch_mean = mean;
    if (batch_var) *batch_var = var;

    Tensor out = x_like(x);
    std::vector<double> xhat(x.size());
    for (int in = 0; in < n; ++in)
      for (int ch = 0; ch < c; ++ch)
        for (int s = 0; s < sp; ++s) {
          const std::size_t i = (static_cast<std::size_t>(in) * c + ch) * sp + s;
          xhat[i] = (x.values[i] - mean[ch]) * inv_sd[ch];
          out.values[i] = gamma.values[ch] * xhat[i] + beta.values[ch];
        }
    ensure_finite("batch_norm_batch", out.values);

    if (live(x) || live(gamma) || live(beta)) {
      record(out, [xid = x.node, gid = gamma.node, bid = beta.node, n, c, sp, m,
                   xhat = std::move(xhat), gv = gamma.values, inv_sd](const std::vector<double>& g,
                                                                      GradStore& gs) {
        std::vector<double>* gx = xid >= 0 ? &buf(gs, xid, xhat.size()) : nullptr;
        std::vector<double>* gg = gid >= 0 ? &buf(gs, gid, gv.size()) : nullptr;
        std::vector<double>* gb = bid >= 0 ? &buf(gs, bid, gv.size()) : nullptr;
        for (int ch = 0; ch < c; ++ch) {
          double gsum = 0.0, gxhat_sum = 0.0;
          for (int in = 0; in < n; ++in)
            for (int s = 0; s < sp; ++s) {
              const std::size_t i = (static_cast<std::size_t>(in) * c + ch) * sp + s;
              gsum += g[i];
              gxhat_sum += g[i] * xhat[i];
            }
          if (gg) (*gg)[ch] += gxhat_sum;
          if (gb) (*gb)[ch] += gsum;
          if (gx) {
            const double scale = gv[ch] * inv_sd[ch];
            for (int in = 0; in < n; ++in)
              for (int s = 0; s < sp; ++s) {
                const std::size_t i = (static_cast<std::size_t>(in) * c + ch) * sp + s;
                (*gx)[i] += scale * (g[i] - gsum / m - xhat[i] * gxhat_sum / m);
              }
          }
        }
      });
    }
    return out;
  }

  // [n,c,h,w] -> [n,c], mean over the spatial extent.
  Tensor global_avg_pool(const Tensor& x) {
    if (x.shape.size() != 4) throw ShapeError("global_avg_pool: expected rank 4, got " + shape_str(x.shape));
    const int n = x.shape[0], c = x.shape[1], sp = x.shape[2] * x.shape[3];
    Tensor out = Tensor::zeros({n, c});
    for (int in = 0; in < n; ++in)
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int s = 0; s < sp; ++s) acc += x.values[(static_cast<std::size_t>(in) * c + ch) * sp + s];
        out.values[static_cast<std::size_t>(in) * c + ch] = acc / sp;
      }
    ensure_finite("global_avg_pool", out.values);
    if (live(x)) {
      record(out, [xid = x.node, n, c, sp](const std::vector<double>& g, GradStore& gs) {
        auto& gx = buf(gs, xid, static_cast<std::size_t>(n) * c * sp);
        for (int in = 0; in < n; ++in)
          for (int ch = 0; ch < c; ++ch) {
            const double gv = g[static_cast<std::size_t>(in) * c + ch] / sp;
            for (int s = 0; s < sp; ++s) gx[(static_cast<std::size_t>(in) * c + ch) * sp + s] += gv;
          }
      });
    }
    return out;
  }

  // out[r] = x[r, labels[r]] for x:[n,k].
  Tensor pick_class(const Tensor& x, const std::vector<int>& labels) {
    if (x.shape.size() != 2) throw ShapeError("pick_class: expected rank 2, got " + shape_str(x.shape));
    const int n = x.shape[0], k = x.shape[1];
    if (static_cast<int>(labels.size()) != n)
      throw ShapeError("pick_class: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                       " rows");
    for (int r = 0; r < n; ++r)
      if (labels[r] < 0 || labels[r] >= k)
        throw Error("pick_class: label " + std::to_string(labels[r]) + " out of range [0," +
                    std::to_string(k) + ") at row " + std::to_string(r));
    Tensor out = Tensor::zeros({n});
    for (int r = 0; r < n; ++r) out.values[r] = x.values[static_cast<std::size_t>(r) * k + labels[r]];
    if (live(x)) {
      record(out, [xid = x.node, labels, n, k](const std::vector<double>& g, GradStore& gs) {
        auto& gx = buf(gs, xid, static_cast<std::size_t>(n) * k);
        for (int r = 0; r < n; ++r) gx[static_cast<std::size_t>(r) * k + labels[r]] += g[r];
      });
    }
    return out;
  }

  // Same values, new shape; element count must match.
  Tensor reshape(const Tensor& x, Shape s) {
    if (numel(s) != x.size())
      throw ShapeError("reshape: cannot view " + shape_str(x.shape) + " as " + shape_str(s));
    Tensor out(std::move(s), x.values);
    if (live(x)) {
      record(out, [xid = x.node, sz = x.size()](const std::vector<double>& g, GradStore& gs) {
        auto& gx = buf(gs, xid, sz);
        for (std::size_t i = 0; i < sz; ++i) gx[i] += g[i];
      });
    }
    return out;
  }

  Tensor sum_all(const Tensor& x) {
    Tensor out = Tensor::zeros({1});
    out.values[0] = std::accumulate(x.values.begin(), x.values.end(), 0.0);
    ensure_finite("sum_all", out.values);
    if (live(x)) {
      record(out, [xid = x.node, sz = x.size()](const std::vector<double>& g, GradStore& gs) {
        auto& gx = buf(gs, xid, sz);
        for (std::size_t i = 0; i < sz; ++i) gx[i] += g[0];
      });
    }
    return out;
  }

  Tensor mean_all(const Tensor& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.size())); }

  // --- backward ------------------------------------------------------------

  // Reverse pass from a scalar loss. Visits every recorded node at most once,
  // in reverse topological (= insertion) order.
  GradientMap backprop(const Tensor& loss) {
    if (loss.size() != 1)
      throw Error("backprop: loss must be scalar, got shape " + shape_str(loss.shape));
    GradStore store(nodes_.size());
    if (loss.node >= 0) {
      store[loss.node] = {1.0};
      for (int i = loss.node; i >= 0; --i) {
        if (!store[i].empty() && nodes_[i].backward) nodes_[i].backward(store[i], store);
      }
    }
    return GradientMap(std::move(store));
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    std::function<void(const std::vector<double>&, GradStore&)> backward;
  };

  static bool live(const Tensor& t) { return t.node >= 0; }

  static std::vector<double>& buf(GradStore& gs, int id, std::size_t n) {
    auto& g = gs[static_cast<std::size_t>(id)];
    if (g.empty()) g.assign(n, 0.0);
    return g;
  }

  static Tensor x_like(const Tensor& x) { return Tensor::zeros(x.shape); }

  static void check_same(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape)
      throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  }

  static void ensure_finite(const char* op, const std::vector<double>& v) {
    for (double x : v)
      if (!std::isfinite(x)) throw NumericError(std::string(op) + ": produced a non-finite value");
  }

  static std::pair<int, int> bn_dims(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    if (x.shape.size() != 2 && x.shape.size() != 4)
      throw ShapeError("batch_norm: expected rank 2 or 4, got " + shape_str(x.shape));
    const int c = x.shape[1];
    const int sp = x.shape.size() == 4 ? x.shape[2] * x.shape[3] : 1;
    if (gamma.shape != Shape{c} || beta.shape != Shape{c})
      throw ShapeError("batch_norm: gamma/beta must have length " + std::to_string(c) + ", got gamma " +
                       shape_str(gamma.shape) + " beta " + shape_str(beta.shape));
    return {c, sp};
  }

  int new_node() {
    nodes_.emplace_back();
    return static_cast<int>(nodes_.size()) - 1;
  }

  void record(Tensor& out, std::function<void(const std::vector<double>&, GradStore&)> backward) {
    out.node = new_node();
    nodes_.back().backward = std::move(backward);
  }

  template <class Op>
  Tensor binary(const char* name, const Tensor& a, const Tensor& b, Op op, double da, double db) {
    check_same(name, a, b);
    Tensor out = x_like(a);
    for (std::size_t i = 0; i < a.size(); ++i) out.values[i] = op(a.values[i], b.values[i]);
    ensure_finite(name, out.values);
    if (live(a) || live(b)) {
      record(out, [aid = a.node, bid = b.node, da, db, sz = a.size()](const std::vector<double>& g,
                                                                      GradStore& gs) {
        if (aid >= 0) {
          auto& ga = buf(gs, aid, sz);
          for (std::size_t i = 0; i < sz; ++i) ga[i] += da * g[i];
        }
        if (bid >= 0) {
          auto& gb = buf(gs, bid, sz);
          for (std::size_t i = 0; i < sz; ++i) gb[i] += db * g[i];
        }
      });
    }
    return out;
  }

  std::vector<Node> nodes_;
};

// Central-difference gradient of a scalar function, (f(x+h e_i) - f(x-h e_i)) / 2h.
// The independent oracle for every reverse-mode check; never touches the tape.
inline std::vector<double> finite_difference_grad(const std::function<double(std::span<const double>)>& f,
                                                  std::span<const double> at, double h = 1e-5) {
  if (!(h > 0.0)) throw Error("finite_difference_grad: h must be positive");
  std::vector<double> x(at.begin(), at.end());
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f(x);
    x[i] = orig - h;
    const double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// Max relative error between a gradient and its oracle, with an absolute
// floor so near-zero coordinates compare absolutely.
inline double max_rel_error(std::span<const double> got, std::span<const double> want, double floor = 1e-6) {
  if (got.size() != want.size()) throw Error("max_rel_error: length mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    const double denom = std::max(std::abs(want[i]), floor);
    worst = std::max(worst, std::abs(got[i] - want[i]) / denom);
  }
  return worst;
}

}  // namespace rtta
