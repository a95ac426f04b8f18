#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "relaytune/transfer.hpp"

namespace relaytune {

// Fixed-dt sample history with linear interpolation.  Only the most recent
// `max_delay` span is retained; times before the first sample read as `rest`.
class DelayBuffer {
 public:
  DelayBuffer(double dt, double max_delay, double rest = 0.0)
      : dt_(dt),
        rest_(rest),
        cap_(static_cast<std::int64_t>(std::ceil(max_delay / dt)) + 8),
        data_(static_cast<size_t>(cap_), rest) {}

  // Append the value at grid time count()*dt.
  void push(double v) {
    data_[static_cast<size_t>(count_ % cap_)] = v;
    ++count_;
  }
  std::int64_t count() const { return count_; }

  double at_index(std::int64_t k) const {
    if (k < 0) return rest_;
    if (k >= count_ || count_ - k > cap_)
      throw std::out_of_range("DelayBuffer: index outside retained history");
    return data_[static_cast<size_t>(k % cap_)];
  }

  double sample(double t) const {
    double x = t / dt_;
    // Tolerate round-off overshoot at the newest sample; reject real futures.
    const auto newest = static_cast<double>(count_ - 1);
    if (x > newest) {
      if (x - newest > 1e-6)
        throw std::out_of_range("DelayBuffer: sample ahead of history");
      x = newest;
    }
    const double fl = std::floor(x);
    const auto k = static_cast<std::int64_t>(fl);
    const double frac = x - fl;
    const double a = at_index(k);
    return frac == 0.0 ? a : a + frac * (at_index(k + 1) - a);
  }

  // Zero-order-hold sample: the value pushed at the latest grid instant <= t.
  // Keeps switching edges sharp where `sample` would smear them over one dt.
  // The newest value is held over its whole interval, so queries up to one dt
  // past the newest sample legitimately return it; beyond that is an error.
  double sample_hold(double t) const {
    const double x = t / dt_ + 1e-9;  // nudge exact grid hits past round-off
    const auto newest = static_cast<double>(count_ - 1);
    if (x > newest) {
      if (x - newest > 1.0 + 1e-6)
        throw std::out_of_range("DelayBuffer: sample ahead of history");
      return at_index(count_ - 1);
    }
    return at_index(static_cast<std::int64_t>(std::floor(x)));
  }

 private:
  double dt_, rest_;
  std::int64_t cap_;
  std::int64_t count_ = 0;
  std::vector<double> data_;
};

// Controllable-canonical realization of a strictly proper num/den.  The
// companion structure keeps the derivative evaluation allocation-free.
struct RationalSS {
  std::vector<double> dlow;  // denominator d_0..d_{n-1}, ascending
  double dlead = 1.0;        // d_n
  std::vector<double> nums;  // numerator padded to length n
  int n = 0;

  static RationalSS from(const Poly& num, const Poly& den) {
    const Poly d = den.trimmed();
    const Poly m = num.trimmed();
    if (m.degree() >= d.degree())
      throw std::invalid_argument("RationalSS: plant must be strictly proper");
    RationalSS ss;
    ss.n = d.degree();
    ss.dlead = d.coeff(ss.n);
    ss.dlow.resize(ss.n);
    for (int k = 0; k < ss.n; ++k) ss.dlow[k] = d.coeff(k);
    ss.nums.assign(ss.n, 0.0);
    for (int k = 0; k <= m.degree(); ++k) ss.nums[k] = m.coeff(k);
    return ss;
  }

  void deriv(const double* x, double u, double* dx) const {
    for (int i = 0; i + 1 < n; ++i) dx[i] = x[i + 1];
    double acc = u;
    for (int k = 0; k < n; ++k) acc -= dlow[k] * x[k];
    dx[n - 1] = acc / dlead;
  }

  double output(const double* x) const {
    double y = 0.0;
    for (int k = 0; k < n; ++k) y += nums[k] * x[k];
    return y;
  }

  // y' = c . x'; feeds through u only when the relative degree is 1.
  double output_rate(const double* x, double u) const {
    double dxn = u;
    for (int k = 0; k < n; ++k) dxn -= dlow[k] * x[k];
    dxn /= dlead;
    double yd = 0.0;
    for (int k = 0; k + 1 < n; ++k) yd += nums[k] * x[k + 1];
    yd += nums[n - 1] * dxn;
    return yd;
  }
};

struct SimTrace {
  double dt = 0.0;
  std::vector<double> t;
  std::vector<std::pair<std::string, std::vector<double>>> channels;
  bool diverged = false;
  double ise = 0.0;  // integral of (r - y)^2 accumulated by the integrator

  const std::vector<double>& channel(const std::string& name) const {
    for (const auto& [n, v] : channels)
      if (n == name) return v;
    throw std::out_of_range("SimTrace: no channel " + name);
  }
  bool has_channel(const std::string& name) const {
    for (const auto& [n, v] : channels)
      if (n == name) return true;
    return false;
  }
};

// Derivative action in the loop simulator.  `filtered` passes the measured
// error through a first-order filter (time constant 2 dt unless overridden),
// which smears the reference-step impulse over the filter width.  `exact_pd`
// realizes the ideal kd*s action: the smooth part uses the measured output
// rate and the reference-step impulse is applied as an exact state jump when
// it reaches the plant input, which is what the analytic cost formulas model.
enum class DerivativeMode { filtered, exact_pd };

struct SimOptions {
  double dt = 1e-3;
  double t_final = 10.0;
  double forward_delay = 0.0;   // added on top of plant.delay
  double feedback_delay = 0.0;  // measurement path
  DerivativeMode derivative = DerivativeMode::filtered;
  double derivative_filter = 0.0;  // 0 -> 2*dt
  double amplitude = 1.0;
  double divergence_guard = 1e9;
  bool record = true;
  bool record_states = false;
};

inline double default_dt(double tau_min) {
  return tau_min > 0.0 ? std::min(1e-3, tau_min / 8.0) : 1e-3;
}

namespace detail {

struct LoopDeriv {
  const RationalSS* ss;
  const PdGains* g;
  const DelayBuffer* ybuf;
  const DelayBuffer* ydbuf;
  const DelayBuffer* ubuf;
  double fwd, fb, tf;
  bool exact;
  const std::function<double(double)>* ref;

  // X = [plant states (n), filter q, integrator z, ise]; returns u at (t, X).
  double operator()(double t, const double* X, double* dX) const {
    const int n = ss->n;
    const double r = (*ref)(t);
    const double y = ss->output(X);
    const double y_m = fb > 0.0 ? ybuf->sample(t - fb) : y;
    const double e_m = r - y_m;
    double ud, dq = 0.0;
    if (exact) {
      const double uin_pre = fwd > 0.0 ? ubuf->sample(t - fwd) : 0.0;
      const double yd_m =
          fb > 0.0 ? ydbuf->sample(t - fb) : ss->output_rate(X, uin_pre);
      ud = g->kd * (-yd_m);
    } else {
      const double q = X[n];
      dq = (e_m - q) / tf;
      ud = g->kd * dq;
    }
    const double u = g->kc * e_m + ud + g->ki * X[n + 1];
    const double uin = fwd > 0.0 ? ubuf->sample(t - fwd) : u;
    ss->deriv(X, uin, dX);
    dX[n] = dq;
    dX[n + 1] = e_m;
    const double e_true = r - y;
    dX[n + 2] = e_true * e_true;
    return u;
  }
};

}  // namespace detail

// Fixed-step 4th-order integration of the PD(+I) loop around a strictly
// proper rational plant, with independent dead times on the actuation and
// measurement paths realized as interpolated ring buffers.  The recorded
// "error" channel and the accumulated ISE use the true error r - y; the
// controller acts on the delayed measurement.  Divergence (|r - y| beyond
// the guard, or non-finite state) flags the trace instead of throwing.
inline SimTrace simulate_closed_loop(const DelayTF& plant, const PdGains& ctrl,
                                     const std::function<double(double)>& reference,
                                     const SimOptions& opt,
                                     bool reference_steps_at_zero = false) {
  if (opt.dt <= 0.0 || opt.t_final <= opt.dt)
    throw std::invalid_argument("simulate_closed_loop: bad dt/t_final");
  const double fwd = plant.delay + opt.forward_delay;
  const double fb = opt.feedback_delay;
  if (fwd < 0.0 || fb < 0.0)
    throw std::invalid_argument("simulate_closed_loop: negative delay");
  for (double d : {fwd, fb})
    if (d > 0.0 && opt.dt > d / 4.0 * (1.0 + 1e-12))
      throw std::invalid_argument("simulate_closed_loop: dt must be <= delay/4");

  const RationalSS ss = RationalSS::from(plant.num, plant.den);
  const bool exact = opt.derivative == DerivativeMode::exact_pd;
  if (exact && fwd == 0.0 && fb == 0.0 && ss.n >= 1 && ss.nums[ss.n - 1] != 0.0)
    throw std::invalid_argument(
        "simulate_closed_loop: exact derivative needs relative degree >= 2 or a loop delay");
  const double tf = opt.derivative_filter > 0.0 ? opt.derivative_filter : 2.0 * opt.dt;

  DelayBuffer ybuf(opt.dt, fb > 0.0 ? fb + opt.dt : opt.dt);
  DelayBuffer ydbuf(opt.dt, fb > 0.0 ? fb + opt.dt : opt.dt);
  DelayBuffer ubuf(opt.dt, fwd > 0.0 ? fwd + opt.dt : opt.dt);

  detail::LoopDeriv f{&ss,  &ctrl, &ybuf, &ydbuf, &ubuf,
                      fwd,  fb,    tf,    exact,  &reference};

  const int n = ss.n;
  const int m = n + 3;
  std::vector<double> X(m, 0.0), k1(m), k2(m), k3(m), k4(m), xs(m);
  const auto steps = static_cast<std::int64_t>(std::llround(opt.t_final / opt.dt));
  // Reference-step impulse through kd arrives at the plant input after the
  // forward dead time.
  const std::int64_t jump_at =
      (exact && reference_steps_at_zero && ctrl.kd != 0.0)
          ? static_cast<std::int64_t>(std::llround(fwd / opt.dt))
          : -1;

  SimTrace out;
  out.dt = opt.dt;
  if (opt.record) {
    out.t.reserve(steps + 1);
    out.channels = {{"reference", {}}, {"output", {}}, {"error", {}}, {"control", {}}};
    if (opt.record_states)
      for (int i = 0; i < n; ++i) out.channels.emplace_back("x" + std::to_string(i + 1), std::vector<double>{});
    for (auto& [name, v] : out.channels) v.reserve(steps + 1);
  }

  for (std::int64_t j = 0; j <= steps; ++j) {
    const double t = static_cast<double>(j) * opt.dt;
    if (j == jump_at) X[n - 1] += ctrl.kd * opt.amplitude / ss.dlead;

    const double u = f(t, X.data(), k1.data());  // k1 is stage 1 of the step below
    const double y = ss.output(X.data());
    const double r = reference(t);
    const double e = r - y;

    if (!std::isfinite(e) || std::abs(e) > opt.divergence_guard) {
      out.diverged = true;
      break;
    }
    if (opt.record) {
      out.t.push_back(t);
      out.channels[0].second.push_back(r);
      out.channels[1].second.push_back(y);
      out.channels[2].second.push_back(e);
      out.channels[3].second.push_back(u);
      if (opt.record_states)
        for (int i = 0; i < n; ++i) out.channels[4 + i].second.push_back(X[i]);
    }
    ybuf.push(y);
    ubuf.push(u);
    if (exact) ydbuf.push(ss.output_rate(X.data(), fwd > 0.0 ? ubuf.sample(t - fwd) : u));
    if (j == steps) break;

    const double h = opt.dt;
    for (int i = 0; i < m; ++i) xs[i] = X[i] + 0.5 * h * k1[i];
    f(t + 0.5 * h, xs.data(), k2.data());
    for (int i = 0; i < m; ++i) xs[i] = X[i] + 0.5 * h * k2[i];
    f(t + 0.5 * h, xs.data(), k3.data());
    for (int i = 0; i < m; ++i) xs[i] = X[i] + h * k3[i];
    f(t + h, xs.data(), k4.data());
    for (int i = 0; i < m; ++i)
      X[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
  }
  out.ise = X[n + 2];
  return out;
}

inline SimTrace simulate_closed_loop(const DelayTF& plant, const PdGains& ctrl,
                                     RefKind ref, const SimOptions& opt) {
  if (ref == RefKind::step) {
    const double a = opt.amplitude;
    return simulate_closed_loop(
        plant, ctrl, [a](double t) { return t >= 0.0 ? a : 0.0; }, opt,
        /*reference_steps_at_zero=*/true);
  }
  if (opt.derivative == DerivativeMode::exact_pd)
    throw std::invalid_argument(
        "simulate_closed_loop: impulse reference requires the filtered derivative");
  // Rectangular pulse of area `amplitude` over one step.
  const double v = opt.amplitude / opt.dt, dt = opt.dt;
  return simulate_closed_loop(
      plant, ctrl, [v, dt](double t) { return (t >= 0.0 && t < dt) ? v : 0.0; }, opt);
}

// Spec-shaped convenience signature.
inline SimTrace simulate_closed_loop(const DelayTF& plant, const PdGains& ctrl,
                                     RefKind ref, double dt, double t_final,
                                     double forward_delay, double feedback_delay) {
  SimOptions opt;
  opt.dt = dt;
  opt.t_final = t_final;
  opt.forward_delay = forward_delay;
  opt.feedback_delay = feedback_delay;
  return simulate_closed_loop(plant, ctrl, ref, opt);
}

}  // namespace relaytune
