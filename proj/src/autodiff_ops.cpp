#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "csmamba/autodiff.hpp"

namespace csm::ad {

// ---- reductions ----------------------------------------------------------------

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape().record("sum", Tensor::scalar(s), {a},
      [a](Tape& t, const Tensor& g, const Tensor&) {
        Tensor& ga = t.grad_buffer(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
      });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Var mse(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("mse shape mismatch: " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = av[i] - bv[i];
    s += d * d;
  }
  const double n = static_cast<double>(av.size());
  return a.tape().record("mse", Tensor::scalar(s / n), {a, b},
      [a, b, n](Tape& t, const Tensor& g, const Tensor&) {
        const Tensor& av = a.value();
        const Tensor& bv = b.value();
        const double k = 2.0 * g[0] / n;
        if (a.requires_grad()) {
          Tensor& ga = t.grad_buffer(a);
          for (std::size_t i = 0; i < av.size(); ++i) ga[i] += k * (av[i] - bv[i]);
        }
        if (b.requires_grad()) {
          Tensor& gb = t.grad_buffer(b);
          for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= k * (av[i] - bv[i]);
        }
      });
}

// ---- structure -----------------------------------------------------------------

Var reshape(const Var& a, Shape shape) {
  return a.tape().record("reshape", a.value().reshaped(std::move(shape)), {a},
      [a](Tape& t, const Tensor& g, const Tensor&) {
        Tensor& ga = t.grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      });
}

Var element(const Var& a, std::size_t index) {
  if (index >= a.size()) {
    throw std::out_of_range("element " + std::to_string(index) + " of tensor " +
                            shape_str(a.shape()));
  }
  return a.tape().record("element", Tensor::scalar(a.value()[index]), {a},
      [a, index](Tape& t, const Tensor& g, const Tensor&) { t.grad_buffer(a)[index] += g[0]; });
}

Var broadcast_scalar(const Var& s, Shape shape) {
  if (s.size() != 1) {
    throw std::invalid_argument("broadcast_scalar needs a one-element tensor, got " +
                                shape_str(s.shape()));
  }
  Tensor out(std::move(shape), s.value()[0]);
  return s.tape().record("broadcast", std::move(out), {s},
      [s](Tape& t, const Tensor& g, const Tensor&) {
        double acc = 0.0;
        for (double v : g.data()) acc += v;
        t.grad_buffer(s)[0] += acc;
      });
}

Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat of zero tensors");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  for (const auto& p : parts) {
    Shape pt(p.shape().begin() + 1, p.shape().end());
    if (pt != tail) {
      throw std::invalid_argument("concat trailing shape mismatch: " + shape_str(parts[0].shape()) +
                                  " vs " + shape_str(p.shape()));
    }
    rows += p.shape()[0];
  }
  Shape out_shape = parts[0].shape();
  out_shape[0] = rows;
  Tensor out(out_shape);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + offset);
    offset += p.size();
  }
  return parts[0].tape().record("concat", std::move(out), parts,
      [parts](Tape& t, const Tensor& g, const Tensor&) {
        std::size_t offset = 0;
        for (const auto& p : parts) {
          if (p.requires_grad()) {
            Tensor& gp = t.grad_buffer(p);
            for (std::size_t i = 0; i < p.size(); ++i) gp[i] += g[offset + i];
          }
          offset += p.size();
        }
      });
}

Var slice(const Var& a, std::size_t begin, std::size_t end) {
  const Shape& s = a.shape();
  if (begin >= end || end > s[0]) {
    throw std::out_of_range("slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                            ") of tensor " + shape_str(s));
  }
  const std::size_t row = a.size() / s[0];
  Shape out_shape = s;
  out_shape[0] = end - begin;
  const auto src = a.value().data();
  std::vector<double> data(src.begin() + begin * row, src.begin() + end * row);
  return a.tape().record("slice", Tensor(out_shape, std::move(data)), {a},
      [a, begin, row](Tape& t, const Tensor& g, const Tensor&) {
        Tensor& ga = t.grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[begin * row + i] += g[i];
      });
}

namespace {

// out[row, i] = t[row, src[i]]; gradient flows back through `back`.
Var permute_rows(const Var& t, std::span<const std::size_t> src,
                 std::span<const std::size_t> back, const char* name) {
  const std::size_t len = src.size();
  if (len == 0 || t.size() % len != 0) {
    throw std::invalid_argument(std::string(name) + ": order length " + std::to_string(len) +
                                " does not tile tensor of shape " + shape_str(t.shape()));
  }
  const std::size_t rows = t.size() / len;
  const Tensor& tv = t.value();
  Tensor out(tv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * len;
    for (std::size_t i = 0; i < len; ++i) out[base + i] = tv[base + src[i]];
  }
  std::vector<std::size_t> inv(back.begin(), back.end());
  return t.tape().record(name, std::move(out), {t},
      [t, rows, len, inv = std::move(inv)](Tape& tape, const Tensor& g, const Tensor&) {
        Tensor& gt = tape.grad_buffer(t);
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t base = r * len;
          for (std::size_t j = 0; j < len; ++j) gt[base + j] += g[base + inv[j]];
        }
      });
}

}  // namespace

Var gather_by_order(const Var& t, const scan::ScanOrder& order) {
  return permute_rows(t, order.forward(), order.inverse(), "gather");
}

Var scatter_by_order(const Var& t, const scan::ScanOrder& order) {
  return permute_rows(t, order.inverse(), order.forward(), "scatter");
}

// ---- linear layers ---------------------------------------------------------------

namespace {

struct ConvGeom {
  std::size_t cin, h, w, cout, k, stride, pad, oh, ow;
};

ConvGeom conv_geometry(const Shape& in, const Shape& kernel, std::size_t stride, Padding padding) {
  if (in.size() != 3) throw std::invalid_argument("conv2d input must be [C,H,W], got " + shape_str(in));
  if (kernel.size() != 4 || kernel[2] != kernel[3]) {
    throw std::invalid_argument("conv2d kernel must be [Cout,Cin,k,k], got " + shape_str(kernel));
  }
  if (kernel[1] != in[0]) {
    throw std::invalid_argument("conv2d channel mismatch: input " + shape_str(in) + " vs kernel " +
                                shape_str(kernel));
  }
  const std::size_t k = kernel[2];
  if (k != 1 && k != 3) throw std::invalid_argument("conv2d kernel size must be 1 or 3");
  if (stride != 1 && stride != 2) throw std::invalid_argument("conv2d stride must be 1 or 2");
  const std::size_t pad = padding == Padding::same ? k / 2 : 0;
  if (in[1] + 2 * pad < k || in[2] + 2 * pad < k) {
    throw std::invalid_argument("conv2d input " + shape_str(in) + " smaller than kernel");
  }
  const std::size_t oh = (in[1] + 2 * pad - k) / stride + 1;
  const std::size_t ow = (in[2] + 2 * pad - k) / stride + 1;
  return {in[0], in[1], in[2], kernel[0], k, stride, pad, oh, ow};
}

// Calls fn(oy, ox, iy, ix) for every in-range tap offset (ky, kx).
template <class Fn>
inline void for_each_tap(const ConvGeom& g, std::size_t ky, std::size_t kx, Fn&& fn) {
  for (std::size_t oy = 0; oy < g.oh; ++oy) {
    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
    if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
    for (std::size_t ox = 0; ox < g.ow; ++ox) {
      const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
      if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
      fn(oy, ox, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
    }
  }
}

}  // namespace

Var conv2d(const Var& input, const Var& kernel, std::size_t stride, Padding padding) {
  const ConvGeom g = conv_geometry(input.shape(), kernel.shape(), stride, padding);
  const Tensor& in = input.value();
  const Tensor& ker = kernel.value();
  Tensor out(Shape{g.cout, g.oh, g.ow});
  for (std::size_t co = 0; co < g.cout; ++co) {
    double* o = out.data().data() + co * g.oh * g.ow;
    for (std::size_t ci = 0; ci < g.cin; ++ci) {
      const double* src = in.data().data() + ci * g.h * g.w;
      for (std::size_t ky = 0; ky < g.k; ++ky) {
        for (std::size_t kx = 0; kx < g.k; ++kx) {
          const double kv = ker[((co * g.cin + ci) * g.k + ky) * g.k + kx];
          if (kv == 0.0) continue;
          for_each_tap(g, ky, kx, [&](std::size_t oy, std::size_t ox, std::size_t iy, std::size_t ix) {
            o[oy * g.ow + ox] += kv * src[iy * g.w + ix];
          });
        }
      }
    }
  }
  return input.tape().record("conv2d", std::move(out), {input, kernel},
      [input, kernel, g](Tape& t, const Tensor& grad, const Tensor&) {
        const Tensor& in = input.value();
        const Tensor& ker = kernel.value();
        Tensor* gin = input.requires_grad() ? &t.grad_buffer(input) : nullptr;
        Tensor* gker = kernel.requires_grad() ? &t.grad_buffer(kernel) : nullptr;
        for (std::size_t co = 0; co < g.cout; ++co) {
          const double* go = grad.data().data() + co * g.oh * g.ow;
          for (std::size_t ci = 0; ci < g.cin; ++ci) {
            const double* src = in.data().data() + ci * g.h * g.w;
            for (std::size_t ky = 0; ky < g.k; ++ky) {
              for (std::size_t kx = 0; kx < g.k; ++kx) {
                const std::size_t kidx = ((co * g.cin + ci) * g.k + ky) * g.k + kx;
                const double kv = ker[kidx];
                double acc = 0.0;
                double* gi = gin ? gin->data().data() + ci * g.h * g.w : nullptr;
                for_each_tap(g, ky, kx, [&](std::size_t oy, std::size_t ox, std::size_t iy, std::size_t ix) {
                  const double gv = go[oy * g.ow + ox];
                  acc += gv * src[iy * g.w + ix];
                  if (gi) gi[iy * g.w + ix] += gv * kv;
                });
                if (gker) (*gker)[kidx] += acc;
              }
            }
          }
        }
      });
}

Var depthwise_conv2d(const Var& input, const Var& kernel) {
  const Shape& is = input.shape();
  const Shape& ks = kernel.shape();
  if (is.size() != 3 || ks.size() != 4 || ks[0] != is[0] || ks[1] != 1 || ks[2] != ks[3] ||
      (ks[2] != 1 && ks[2] != 3)) {
    throw std::invalid_argument("depthwise_conv2d: input " + shape_str(is) +
                                " incompatible with kernel " + shape_str(ks));
  }
  const ConvGeom g{1, is[1], is[2], 1, ks[2], 1, ks[2] / 2, is[1], is[2]};
  const std::size_t channels = is[0];
  const std::size_t plane = g.h * g.w;
  const Tensor& in = input.value();
  const Tensor& ker = kernel.value();
  Tensor out(is);
  for (std::size_t c = 0; c < channels; ++c) {
    const double* src = in.data().data() + c * plane;
    double* o = out.data().data() + c * plane;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double kv = ker[(c * g.k + ky) * g.k + kx];
        for_each_tap(g, ky, kx, [&](std::size_t oy, std::size_t ox, std::size_t iy, std::size_t ix) {
          o[oy * g.w + ox] += kv * src[iy * g.w + ix];
        });
      }
    }
  }
  return input.tape().record("depthwise_conv2d", std::move(out), {input, kernel},
      [input, kernel, g, channels, plane](Tape& t, const Tensor& grad, const Tensor&) {
        const Tensor& in = input.value();
        const Tensor& ker = kernel.value();
        Tensor* gin = input.requires_grad() ? &t.grad_buffer(input) : nullptr;
        Tensor* gker = kernel.requires_grad() ? &t.grad_buffer(kernel) : nullptr;
        for (std::size_t c = 0; c < channels; ++c) {
          const double* src = in.data().data() + c * plane;
          const double* go = grad.data().data() + c * plane;
          double* gi = gin ? gin->data().data() + c * plane : nullptr;
          for (std::size_t ky = 0; ky < g.k; ++ky) {
            for (std::size_t kx = 0; kx < g.k; ++kx) {
              const std::size_t kidx = (c * g.k + ky) * g.k + kx;
              const double kv = ker[kidx];
              double acc = 0.0;
              for_each_tap(g, ky, kx, [&](std::size_t oy, std::size_t ox, std::size_t iy, std::size_t ix) {
                const double gv = go[oy * g.w + ox];
                acc += gv * src[iy * g.w + ix];
                if (gi) gi[iy * g.w + ix] += gv * kv;
              });
              if (gker) (*gker)[kidx] += acc;
            }
          }
        }
      });
}

Var add_channel_bias(const Var& x, const Var& bias) {
  const Shape& s = x.shape();
  if (bias.size() != s[0]) {
    throw std::invalid_argument("bias of shape " + shape_str(bias.shape()) +
                                " does not match leading axis of " + shape_str(s));
  }
  const std::size_t row = x.size() / s[0];
  Tensor out = x.value();
  for (std::size_t c = 0; c < s[0]; ++c) {
    const double b = bias.value()[c];
    for (std::size_t i = 0; i < row; ++i) out[c * row + i] += b;
  }
  return x.tape().record("bias", std::move(out), {x, bias},
      [x, bias, row](Tape& t, const Tensor& g, const Tensor&) {
        if (x.requires_grad()) t.accumulate(x, g);
        if (bias.requires_grad()) {
          Tensor& gb = t.grad_buffer(bias);
          for (std::size_t c = 0; c < gb.size(); ++c) {
            double acc = 0.0;
            for (std::size_t i = 0; i < row; ++i) acc += g[c * row + i];
            gb[c] += acc;
          }
        }
      });
}

Var matmul(const Var& w, const Var& x) {
  const Shape& ws = w.shape();
  const Shape& xs = x.shape();
  if (ws.size() != 2 || xs.size() != 2 || ws[1] != xs[0]) {
    throw std::invalid_argument("matmul shape mismatch: " + shape_str(ws) + " x " + shape_str(xs));
  }
  const std::size_t m = ws[0], k = ws[1], l = xs[1];
  const Tensor& wv = w.value();
  const Tensor& xv = x.value();
  Tensor out(Shape{m, l});
  for (std::size_t i = 0; i < m; ++i) {
    double* o = out.data().data() + i * l;
    for (std::size_t j = 0; j < k; ++j) {
      const double a = wv[i * k + j];
      if (a == 0.0) continue;
      const double* src = xv.data().data() + j * l;
      for (std::size_t c = 0; c < l; ++c) o[c] += a * src[c];
    }
  }
  return w.tape().record("matmul", std::move(out), {w, x},
      [w, x, m, k, l](Tape& t, const Tensor& g, const Tensor&) {
        const Tensor& wv = w.value();
        const Tensor& xv = x.value();
        if (w.requires_grad()) {
          Tensor& gw = t.grad_buffer(w);
          for (std::size_t i = 0; i < m; ++i) {
            const double* gi = g.data().data() + i * l;
            for (std::size_t j = 0; j < k; ++j) {
              const double* src = xv.data().data() + j * l;
              double acc = 0.0;
              for (std::size_t c = 0; c < l; ++c) acc += gi[c] * src[c];
              gw[i * k + j] += acc;
            }
          }
        }
        if (x.requires_grad()) {
          Tensor& gx = t.grad_buffer(x);
          for (std::size_t i = 0; i < m; ++i) {
            const double* gi = g.data().data() + i * l;
            for (std::size_t j = 0; j < k; ++j) {
              const double a = wv[i * k + j];
              double* dst = gx.data().data() + j * l;
              for (std::size_t c = 0; c < l; ++c) dst[c] += a * gi[c];
            }
          }
        }
      });
}

Var upsample_nearest2x(const Var& x) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw std::invalid_argument("upsample needs [C,H,W], got " + shape_str(s));
  const std::size_t c = s[0], h = s[1], w = s[2];
  Tensor out(Shape{c, 2 * h, 2 * w});
  const Tensor& xv = x.value();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t r = 0; r < 2 * h; ++r) {
      for (std::size_t col = 0; col < 2 * w; ++col) out.at(ch, r, col) = xv.at(ch, r / 2, col / 2);
    }
  }
  return x.tape().record("upsample2x", std::move(out), {x},
      [x, c, h, w](Tape& t, const Tensor& g, const Tensor&) {
        Tensor& gx = t.grad_buffer(x);
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t r = 0; r < 2 * h; ++r) {
            for (std::size_t col = 0; col < 2 * w; ++col) gx.at(ch, r / 2, col / 2) += g.at(ch, r, col);
          }
        }
      });
}

Var layer_norm_channels(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Shape& s = x.shape();
  const std::size_t c = s[0];
  if (gamma.size() != c || beta.size() != c) {
    throw std::invalid_argument("layer norm affine parameters must have " + std::to_string(c) +
                                " entries");
  }
  const std::size_t n = x.size() / c;
  const Tensor& xv = x.value();
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor xhat(s);
  std::vector<double> rstd(n);
  Tensor out(s);
  for (std::size_t p = 0; p < n; ++p) {
    double mu = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) mu += xv[ch * n + p];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double d = xv[ch * n + p] - mu;
      var += d * d;
    }
    var /= static_cast<double>(c);
    rstd[p] = 1.0 / std::sqrt(var + eps);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double xh = (xv[ch * n + p] - mu) * rstd[p];
      xhat[ch * n + p] = xh;
      out[ch * n + p] = xh * gv[ch] + bv[ch];
    }
  }
  return x.tape().record("layer_norm", std::move(out), {x, gamma, beta},
      [x, gamma, beta, c, n, xhat = std::move(xhat), rstd = std::move(rstd)](
          Tape& t, const Tensor& g, const Tensor&) {
        const Tensor& gv = gamma.value();
        if (gamma.requires_grad() || beta.requires_grad()) {
          Tensor& gg = t.grad_buffer(gamma);
          Tensor& gb = t.grad_buffer(beta);
          for (std::size_t ch = 0; ch < c; ++ch) {
            double ag = 0.0, ab = 0.0;
            for (std::size_t p = 0; p < n; ++p) {
              ag += g[ch * n + p] * xhat[ch * n + p];
              ab += g[ch * n + p];
            }
            gg[ch] += ag;
            gb[ch] += ab;
          }
        }
        if (!x.requires_grad()) return;
        Tensor& gx = t.grad_buffer(x);
        const double inv_c = 1.0 / static_cast<double>(c);
        for (std::size_t p = 0; p < n; ++p) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double d = g[ch * n + p] * gv[ch];
            m1 += d;
            m2 += d * xhat[ch * n + p];
          }
          m1 *= inv_c;
          m2 *= inv_c;
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double d = g[ch * n + p] * gv[ch];
            gx[ch * n + p] += rstd[p] * (d - m1 - xhat[ch * n + p] * m2);
          }
        }
      });
}

Var mul_spatial(const Var& x, const Tensor& map) {
  const Shape& s = x.shape();
  if (s.size() != 3 || map.size() != s[1] * s[2]) {
    throw std::invalid_argument("spatial map " + shape_str(map.shape()) +
                                " does not match feature " + shape_str(s));
  }
  const std::size_t plane = s[1] * s[2];
  Tensor out = x.value();
  for (std::size_t c = 0; c < s[0]; ++c) {
    for (std::size_t p = 0; p < plane; ++p) out[c * plane + p] *= map[p];
  }
  return x.tape().record("mul_spatial", std::move(out), {x},
      [x, map, plane](Tape& t, const Tensor& g, const Tensor&) {
        Tensor& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * map[i % plane];
      });
}

// ---- validation ---------------------------------------------------------------------

double finite_diff_check(const ScalarFn& f, const Tensor& theta, double eps,
                         const std::vector<std::size_t>& coords) {
  if (!(eps > 0.0 && eps <= 1e-3)) throw std::invalid_argument("finite_diff_check: eps must be in (0, 1e-3]");
  Tensor analytic;
  {
    Tape tape;
    const Var th = tape.leaf(theta, true, "theta");
    const Var loss = f(tape, th);
    if (!std::isfinite(loss.value().item())) {
      throw std::runtime_error("finite_diff_check: non-finite function value");
    }
    tape.backward(loss);
    analytic = tape.grad(th);
  }
  auto eval = [&](const Tensor& p) {
    Tape tape;
    const double v = f(tape, tape.leaf(p, false, "theta")).value().item();
    if (!std::isfinite(v)) throw std::runtime_error("finite_diff_check: non-finite function value");
    return v;
  };
  std::vector<std::size_t> idx = coords;
  if (idx.empty()) {
    idx.resize(theta.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  }
  double worst = 0.0;
  Tensor probe = theta;
  for (std::size_t i : idx) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double fp = eval(probe);
    probe[i] = orig - eps;
    const double fm = eval(probe);
    probe[i] = orig;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace csm::ad
