#include "csmamba/ssm.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace csm::ssm {

namespace {

// (exp(delta*a) - 1) / a, the ZOH input gain per unit B.
inline double zoh_gain(double a, double delta, double a_bar) {
  const double z = delta * a;
  if (std::abs(z) < kZohSmallArg) return delta;
  return (z > -0.5 && z < 0.5 ? std::expm1(z) : a_bar - 1.0) / a;
}

// d/da of zoh_gain.
inline double zoh_gain_da(double a, double delta, double a_bar) {
  const double z = delta * a;
  if (std::abs(z) < 1e-3) {
    return delta * delta * (0.5 + z / 3.0 + z * z / 8.0);
  }
  return (z * a_bar - (a_bar - 1.0)) / (a * a);
}

}  // namespace

Discretized discretize_zoh(std::span<const double> a, std::span<const double> b, double delta) {
  if (!(delta > 0.0)) throw std::invalid_argument("discretize_zoh: delta must be positive");
  if (a.size() != b.size()) throw std::invalid_argument("discretize_zoh: A and B sizes differ");
  Discretized out;
  out.a_bar.resize(a.size());
  out.b_bar.resize(a.size());
  for (std::size_t n = 0; n < a.size(); ++n) {
    const double ab = std::exp(delta * a[n]);
    out.a_bar[n] = ab;
    out.b_bar[n] = zoh_gain(a[n], delta, ab) * b[n];
  }
  return out;
}

void check_scan_inputs(const ScanInputs& in) {
  auto fail = [](const std::string& what) {
    throw std::invalid_argument("selective_scan: " + what);
  };
  if (in.x.rank() != 2) fail("x must be [C, L], got " + shape_str(in.x.shape()));
  const std::size_t channels = in.x.dim(0);
  const std::size_t len = in.x.dim(1);
  if (in.delta.shape() != in.x.shape()) {
    fail("delta shape " + shape_str(in.delta.shape()) + " differs from x " + shape_str(in.x.shape()));
  }
  if (in.a.rank() != 2 || in.a.dim(0) != channels) fail("A must be [C, N], got " + shape_str(in.a.shape()));
  const std::size_t state = in.a.dim(1);
  if (in.b.shape() != Shape{state, len}) {
    fail("B must be [N, L] = " + shape_str({state, len}) + ", got " + shape_str(in.b.shape()));
  }
  if (in.c.shape() != Shape{state, len}) {
    fail("C must be [N, L] = " + shape_str({state, len}) + ", got " + shape_str(in.c.shape()));
  }
  if (in.d.size() != channels) fail("D must have one entry per channel");
  for (double v : in.a.data()) {
    if (!(v < 0.0)) fail("A entries must be negative");
  }
  for (double v : in.delta.data()) {
    if (!(v > 0.0)) fail("delta entries must be positive");
  }
}

Tensor selective_scan(const ScanInputs& in) {
  check_scan_inputs(in);
  const std::size_t channels = in.x.dim(0);
  const std::size_t len = in.x.dim(1);
  const std::size_t state = in.a.dim(1);
  Tensor y(Shape{channels, len});
  std::vector<double> h(state);
  for (std::size_t ch = 0; ch < channels; ++ch) {
    std::fill(h.begin(), h.end(), 0.0);
    const double* a = in.a.data().data() + ch * state;
    for (std::size_t t = 0; t < len; ++t) {
      const double xt = in.x[ch * len + t];
      const double dt = in.delta[ch * len + t];
      double acc = 0.0;
      for (std::size_t n = 0; n < state; ++n) {
        const double ab = std::exp(dt * a[n]);
        const double bb = zoh_gain(a[n], dt, ab) * in.b[n * len + t];
        h[n] = ab * h[n] + bb * xt;
        acc += in.c[n * len + t] * h[n];
      }
      y[ch * len + t] = acc + in.d[ch] * xt;
    }
  }
  return y;
}

ad::Var selective_scan(const ad::Var& x, const ad::Var& delta, const ad::Var& a,
                       const ad::Var& b, const ad::Var& c, const ad::Var& d) {
  ScanInputs in{x.value(), delta.value(), a.value(), b.value(), c.value(), d.value()};
  check_scan_inputs(in);
  Tensor y = selective_scan(in);
  return x.tape().record("selective_scan", std::move(y), {x, delta, a, b, c, d},
      [x, delta, a, b, c, d](ad::Tape& t, const Tensor& gy, const Tensor&) {
        const Tensor& xv = x.value();
        const Tensor& dv = delta.value();
        const Tensor& av = a.value();
        const Tensor& bv = b.value();
        const Tensor& cv = c.value();
        const Tensor& Dv = d.value();
        const std::size_t channels = xv.dim(0);
        const std::size_t len = xv.dim(1);
        const std::size_t state = av.dim(1);

        Tensor gx(xv.shape()), gdelta(dv.shape()), ga(av.shape()), gb(bv.shape()),
            gc(cv.shape()), gd(Dv.shape());
        // hist[t * state + n] holds h_t for the current channel.
        std::vector<double> hist(len * state);
        std::vector<double> gh(state);
        for (std::size_t ch = 0; ch < channels; ++ch) {
          const double* an = av.data().data() + ch * state;
          std::vector<double> h(state, 0.0);
          for (std::size_t tt = 0; tt < len; ++tt) {
            const double xt = xv[ch * len + tt];
            const double dt = dv[ch * len + tt];
            for (std::size_t n = 0; n < state; ++n) {
              const double ab = std::exp(dt * an[n]);
              h[n] = ab * h[n] + zoh_gain(an[n], dt, ab) * bv[n * len + tt] * xt;
              hist[tt * state + n] = h[n];
            }
          }
          std::fill(gh.begin(), gh.end(), 0.0);
          for (std::size_t tt = len; tt-- > 0;) {
            const double g = gy[ch * len + tt];
            const double xt = xv[ch * len + tt];
            const double dt = dv[ch * len + tt];
            gd[ch] += g * xt;
            double gxt = g * Dv[ch];
            double gdt = 0.0;
            for (std::size_t n = 0; n < state; ++n) {
              const double ht = hist[tt * state + n];
              const double hprev = tt > 0 ? hist[(tt - 1) * state + n] : 0.0;
              gc[n * len + tt] += g * ht;
              gh[n] += g * cv[n * len + tt];
              const double ab = std::exp(dt * an[n]);
              const double gain = zoh_gain(an[n], dt, ab);
              const double bn = bv[n * len + tt];
              const double g_ab = gh[n] * hprev;
              const double g_bb = gh[n] * xt;
              gxt += gh[n] * gain * bn;
              gb[n * len + tt] += g_bb * gain;
              // d(ab)/d(delta) = a*ab; d(gain*B)/d(delta) = ab*B.
              gdt += g_ab * an[n] * ab + g_bb * ab * bn;
              ga[ch * state + n] += g_ab * dt * ab + g_bb * zoh_gain_da(an[n], dt, ab) * bn;
              gh[n] *= ab;
            }
            gx[ch * len + tt] += gxt;
            gdelta[ch * len + tt] += gdt;
          }
        }
        t.accumulate(x, gx);
        t.accumulate(delta, gdelta);
        t.accumulate(a, ga);
        t.accumulate(b, gb);
        t.accumulate(c, gc);
        t.accumulate(d, gd);
      });
}

std::vector<double> naive_scan_oracle(std::span<const double> x, const Tensor& a_bar,
                                      const Tensor& b_bar, const Tensor& c, double d) {
  const std::size_t len = x.size();
  if (a_bar.rank() != 2 || a_bar.dim(0) != len || b_bar.shape() != a_bar.shape() ||
      c.shape() != a_bar.shape()) {
    throw std::invalid_argument("naive_scan_oracle: parameter sequences must be [L, N] with L = " +
                                std::to_string(len));
  }
  const std::size_t state = a_bar.dim(1);
  std::vector<double> h(state, 0.0);
  std::vector<double> y(len, 0.0);
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t n = 0; n < state; ++n) {
      h[n] = a_bar[t * state + n] * h[n] + b_bar[t * state + n] * x[t];
    }
    double out = 0.0;
    for (std::size_t n = 0; n < state; ++n) out += c[t * state + n] * h[n];
    y[t] = out + d * x[t];
  }
  return y;
}

double continuous_response_check(std::span<const double> a, std::span<const double> b,
                                 std::span<const double> c, double d, double u, double delta,
                                 std::size_t steps) {
  if (a.size() != b.size() || a.size() != c.size()) {
    throw std::invalid_argument("continuous_response_check: A, B, C sizes differ");
  }
  const Discretized zoh = discretize_zoh(a, b, delta);
  std::vector<double> h(a.size(), 0.0);
  double worst = 0.0;
  for (std::size_t k = 1; k <= steps; ++k) {
    const double time = static_cast<double>(k) * delta;
    double y_disc = d * u;
    double y_cont = d * u;
    for (std::size_t n = 0; n < a.size(); ++n) {
      h[n] = zoh.a_bar[n] * h[n] + zoh.b_bar[n] * u;
      const double exact = std::expm1(a[n] * time) / a[n] * b[n] * u;
      worst = std::max(worst, std::abs(h[n] - exact));
      y_disc += c[n] * h[n];
      y_cont += c[n] * exact;
    }
    worst = std::max(worst, std::abs(y_disc - y_cont));
  }
  return worst;
}

}  // namespace csm::ssm
