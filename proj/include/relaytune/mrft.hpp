#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <vector>

#include "relaytune/sim.hpp"

// Noise-protected modified relay feedback test: the beta-modified switching
// law with an observation window of tau_obs after every error peak, the
// closed-loop runner that extracts a steady oscillation signature, and a
// describing-function predictor used as an independent reference.

namespace relaytune {

struct MrftConfig {
  double beta = 0.0;     // phase modification, in [-1, 1]
  double h = 1.0;        // relay output amplitude, > 0
  double a_n = 0.0;      // noise amplitude estimate baked into the thresholds
  double tau_obs = 0.0;  // observation window after each extremum, seconds
};

inline void validate_mrft_config(const MrftConfig& cfg) {
  if (!(std::abs(cfg.beta) <= 1.0))
    throw std::invalid_argument("MrftConfig: |beta| must be <= 1");
  if (!(cfg.h > 0.0)) throw std::invalid_argument("MrftConfig: h must be > 0");
  if (cfg.a_n < 0.0) throw std::invalid_argument("MrftConfig: a_n must be >= 0");
  if (cfg.a_n > 0.0 && !(cfg.tau_obs > 0.0))
    throw std::invalid_argument(
        "MrftConfig: noise protection needs tau_obs > 0 when a_n > 0");
  // With the thresholds taken verbatim, the startup offset a_n (1 - beta)
  // must stay positive or the relay would chatter on noise from the start.
  if (cfg.a_n > 0.0 && !(cfg.a_n * (1.0 - cfg.beta) > 0.0))
    throw std::invalid_argument("MrftConfig: nonpositive startup threshold");
}

// Per-loop relay memory.  Local extrema track the running peak of the current
// half-period; an extremum that survives unchanged for tau_obs is promoted to
// the global (g-prefixed) value used by the switching thresholds.  A local
// extremum that vanished with its half-period never demotes the promoted one,
// so the thresholds always reflect the last genuine peak.
struct RelayState {
  double u;
  double e_gmax = 0.0, e_gmin = 0.0;  // promoted extrema, e_gmax >= 0 >= e_gmin
  double e_max = 0.0, e_min = 0.0;    // running extrema of the half-period
  double t_gmax = -std::numeric_limits<double>::infinity();
  double t_gmin = -std::numeric_limits<double>::infinity();
  double t_emax = -std::numeric_limits<double>::infinity();
  double t_emin = -std::numeric_limits<double>::infinity();
  double t_0plus = -std::numeric_limits<double>::infinity();
  double t_0minus = -std::numeric_limits<double>::infinity();
  double prev_e = 0.0;
  std::int64_t period_index = 0;
  // A switch is authorized by a newly promoted peak (down) or anti-peak (up)
  // and consumes that authorization: the relay acts once per observed
  // extremum.  Without this, an inverted threshold (beta < 0) would re-fire
  // immediately after the opposite switch.  Both start armed so the run can
  // leave the initial state.
  bool armed_down = true, armed_up = true;

  explicit RelayState(double h) : u(h) {}  // initial output +h
};

// One switching decision at sample (t, e).  Samples must arrive with
// monotonically increasing t on a fixed grid.  Returns the relay output,
// +h or -h; an exactly zero error with degenerate thresholds holds the
// previous output.
inline double np_mrft_step(RelayState& st, double e, double t,
                           const MrftConfig& cfg) {
  // Zero-crossing resets start a fresh running extremum for the half-period.
  if (e > 0.0 && st.prev_e <= 0.0) {
    st.t_0plus = t;
    st.e_max = 0.0;
    st.t_emax = t;
    ++st.period_index;
  } else if (e < 0.0 && st.prev_e >= 0.0) {
    st.t_0minus = t;
    st.e_min = 0.0;
    st.t_emin = t;
  }
  if (e > 0.0 && e > st.e_max) {
    st.e_max = e;
    st.t_emax = t;
  } else if (e < 0.0 && e < st.e_min) {
    st.e_min = e;
    st.t_emin = t;
  }
  // Freeze rule: a running extremum unchanged over the observation window is
  // a genuine peak and becomes the global one, stamped with the peak instant.
  if (st.e_max > 0.0 && t - st.t_emax >= cfg.tau_obs) {
    st.e_gmax = st.e_max;
    st.t_gmax = st.t_emax;
  }
  if (st.e_min < 0.0 && t - st.t_emin >= cfg.tau_obs) {
    st.e_gmin = st.e_min;
    st.t_gmin = st.t_emin;
  }

  const double b2 = cfg.beta * st.e_gmax + cfg.a_n * (1.0 - cfg.beta);
  const double b1 = -cfg.beta * st.e_gmin + cfg.a_n * (1.0 - cfg.beta);
  if (!(e == 0.0 && b1 == 0.0 && b2 == 0.0)) {
    // Hysteresis automaton: only the transition away from the held output can
    // fire, and only after the observation window past the opposing peak.
    if (st.u > 0.0) {
      if (e <= -b2 && t > st.t_gmax + cfg.tau_obs) st.u = -cfg.h;
    } else {
      if (e >= b1 && t > st.t_gmin + cfg.tau_obs) st.u = cfg.h;
    }
  }
  st.prev_e = e;
  return st.u;
}

// Waveform length of a normalized signature; sized to hold the largest
// steady-state period in the discretized identification domain.
inline constexpr int kSignatureSamples = 256;

struct OscillationSignature {
  double period = 0.0;
  double amp_pos = 0.0, amp_neg = 0.0;  // peak magnitudes of the error wave
  std::vector<double> waveform_e;       // one period, max|e| scaled to 1
  std::vector<double> waveform_u;       // one period, scaled by 1/h
  bool steady = false;
  int periods_completed = 0;  // diagnostic when no steady state was reached
};

// Measurement disturbance injected into the relay input only; the recorded
// error waveform stays the true plant error.
struct MrftNoise {
  double sigma = 0.0;      // white Gaussian component, standard deviation
  double sine_amp = 0.0;   // sinusoidal component amplitude
  double sine_freq = 0.0;  // sinusoid frequency, rad/s
  std::uint32_t seed = 1u;
};

// Relay-driven closed-loop run from zero initial state, regulation to zero
// reference.  Steady state: two consecutive periods agreeing within 1% in
// period and in both peak magnitudes, with at least 6 periods completed; the
// signature is cut from the later period, phase-aligned to the up-switch.
// Reaching max_time without that agreement returns steady=false with the
// count of completed periods and the last period's numbers as diagnostics.
inline OscillationSignature run_mrft(const DelayTF& plant, const MrftConfig& cfg,
                                     double dt, double max_time,
                                     const MrftNoise& noise = MrftNoise{},
                                     SimTrace* trace = nullptr) {
  validate_mrft_config(cfg);
  if (!(dt > 0.0) || !(max_time > dt))
    throw std::invalid_argument("run_mrft: bad dt/max_time");

  const RationalSS ss = RationalSS::from(plant.num, plant.den);
  DelayBuffer ubuf(dt, plant.delay + 2.0 * dt);
  RelayState relay(cfg.h);

  std::mt19937 rng(noise.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const bool noisy = noise.sigma > 0.0 || noise.sine_amp != 0.0;

  const auto steps = static_cast<std::int64_t>(std::llround(max_time / dt));
  std::vector<double> ts, es, us;
  ts.reserve(static_cast<size_t>(steps) + 1);
  es.reserve(static_cast<size_t>(steps) + 1);
  us.reserve(static_cast<size_t>(steps) + 1);

  std::vector<double> x(static_cast<size_t>(ss.n), 0.0);
  std::vector<double> k1(x.size()), k2(x.size()), k3(x.size()), k4(x.size()),
      xs(x.size());

  for (std::int64_t i = 0; i <= steps; ++i) {
    const double t = static_cast<double>(i) * dt;
    const double e = -ss.output(x.data());
    double e_meas = e;
    if (noisy)
      e_meas += noise.sine_amp * std::sin(noise.sine_freq * t) +
                noise.sigma * gauss(rng);
    const double u = np_mrft_step(relay, e_meas, t, cfg);
    ubuf.push(u);
    ts.push_back(t);
    es.push_back(e);
    us.push_back(u);
    if (i == steps) break;

    // RK4 over [t, t+dt]; the relay output reaches the plant through the
    // dead time with zero-order hold, keeping switch edges sharp.
    auto u_delayed = [&](double at) {
      const double s = at - plant.delay;
      return s < 0.0 ? 0.0 : ubuf.sample_hold(s);
    };
    const double um = u_delayed(t + 0.5 * dt);
    ss.deriv(x.data(), u_delayed(t), k1.data());
    for (size_t j = 0; j < x.size(); ++j) xs[j] = x[j] + 0.5 * dt * k1[j];
    ss.deriv(xs.data(), um, k2.data());
    for (size_t j = 0; j < x.size(); ++j) xs[j] = x[j] + 0.5 * dt * k2[j];
    ss.deriv(xs.data(), um, k3.data());
    for (size_t j = 0; j < x.size(); ++j) xs[j] = x[j] + dt * k3[j];
    ss.deriv(xs.data(), u_delayed(t + dt), k4.data());
    for (size_t j = 0; j < x.size(); ++j)
      x[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
  }

  if (trace) {
    trace->dt = dt;
    trace->t = ts;
    trace->channels = {{"error", es}, {"u", us}};
    trace->diverged = false;
    trace->ise = 0.0;
  }

  // Up-switch instants -h -> +h delimit the periods.
  std::vector<size_t> up;
  for (size_t i = 1; i < us.size(); ++i)
    if (us[i] > 0.0 && us[i - 1] < 0.0) up.push_back(i);

  OscillationSignature sig;
  sig.periods_completed = up.empty() ? 0 : static_cast<int>(up.size()) - 1;

  auto window_peaks = [&](size_t j, double* pos, double* neg) {
    *pos = 0.0;
    *neg = 0.0;
    for (size_t i = up[j - 1]; i < up[j]; ++i) {
      *pos = std::max(*pos, es[i]);
      *neg = std::min(*neg, es[i]);
    }
  };

  int chosen = -1;
  for (size_t j = 2; j < up.size(); ++j) {
    if (j < 6) continue;  // at least 6 completed periods before declaring
    const double p_prev = dt * static_cast<double>(up[j - 1] - up[j - 2]);
    const double p_cur = dt * static_cast<double>(up[j] - up[j - 1]);
    double pp, pn, cp, cn;
    window_peaks(j - 1, &pp, &pn);
    window_peaks(j, &cp, &cn);
    if (cp <= 0.0 || cn >= 0.0) continue;
    const bool agree = std::abs(p_cur / p_prev - 1.0) < 0.01 &&
                       std::abs(cp / pp - 1.0) < 0.01 &&
                       std::abs(cn / pn - 1.0) < 0.01;
    if (agree) {
      chosen = static_cast<int>(j);
      sig.period = p_cur;
      sig.amp_pos = cp;
      sig.amp_neg = -cn;
      break;
    }
  }

  if (chosen < 0) {
    if (up.size() >= 2) {
      const size_t j = up.size() - 1;
      double cp, cn;
      window_peaks(j, &cp, &cn);
      sig.period = dt * static_cast<double>(up[j] - up[j - 1]);
      sig.amp_pos = cp;
      sig.amp_neg = -cn;
    }
    return sig;  // steady stays false
  }

  // Resample the chosen period to the fixed feature length: the error by
  // linear interpolation, the relay wave by previous-sample hold.
  const size_t i0 = up[static_cast<size_t>(chosen) - 1];
  const size_t i1 = up[static_cast<size_t>(chosen)];
  sig.waveform_e.resize(kSignatureSamples);
  sig.waveform_u.resize(kSignatureSamples);
  const double span = static_cast<double>(i1 - i0);
  for (int m = 0; m < kSignatureSamples; ++m) {
    const double pos = span * m / kSignatureSamples;
    const auto k = static_cast<size_t>(std::floor(pos));
    const double frac = pos - std::floor(pos);
    const size_t a = i0 + k, b = std::min(i0 + k + 1, i1);
    sig.waveform_e[static_cast<size_t>(m)] = es[a] + frac * (es[b] - es[a]);
    sig.waveform_u[static_cast<size_t>(m)] = us[a] / cfg.h;
  }
  double emax = 0.0;
  for (double v : sig.waveform_e) emax = std::max(emax, std::abs(v));
  if (emax > 0.0)
    for (double& v : sig.waveform_e) v /= emax;
  sig.steady = true;
  return sig;
}

struct HarmonicBalance {
  double omega = 0.0;      // rad/s of the predicted limit cycle
  double amplitude = 0.0;  // first-harmonic error amplitude
};

// Describing-function prediction of the relay limit cycle: omega solves
// arg G(j omega) = -pi + asin(beta) and the error amplitude is the
// first-harmonic response 4 h |G| / pi.  Exact for sinusoid-dominated
// (low-pass) loops; a triangular error wave (pure integrator plus delay)
// carries a known 8/pi^2 amplitude bias that callers must budget for.
inline HarmonicBalance harmonic_balance_predict(const DelayTF& plant,
                                                double beta, double h) {
  if (!(std::abs(beta) <= 1.0))
    throw std::invalid_argument("harmonic_balance_predict: |beta| must be <= 1");
  if (!(h > 0.0))
    throw std::invalid_argument("harmonic_balance_predict: h must be > 0");
  const double target = -M_PI + std::asin(beta);

  // Cumulative unwrapped phase over a log grid, then bisection in a bracket.
  const double w_lo = 1e-3, w_hi = 1e4;
  const int npts = 2000;
  auto raw_phase = [&](double w) {
    return std::arg(frequency_response(plant, w));
  };
  double w_prev = w_lo;
  double ph_prev = raw_phase(w_lo);
  double unwrapped = ph_prev;
  for (int i = 1; i <= npts; ++i) {
    const double w = w_lo * std::pow(w_hi / w_lo, static_cast<double>(i) / npts);
    double ph = raw_phase(w);
    ph += 2.0 * M_PI * std::round((ph_prev - ph) / (2.0 * M_PI));
    unwrapped += ph - ph_prev;
    if (unwrapped <= target) {
      // Bisect in [w_prev, w]; phase unwrapped locally against the left edge.
      double lo = w_prev, hi = w;
      double ph_lo = unwrapped - (ph - ph_prev);
      for (int it = 0; it < 80; ++it) {
        const double mid = 0.5 * (lo + hi);
        double pm = raw_phase(mid);
        pm += 2.0 * M_PI * std::round((ph_lo - pm) / (2.0 * M_PI));
        if (pm > target) {
          lo = mid;
          ph_lo = pm;
        } else {
          hi = mid;
        }
      }
      const double w0 = 0.5 * (lo + hi);
      return HarmonicBalance{w0, 4.0 * h * std::abs(frequency_response(plant, w0)) / M_PI};
    }
    ph_prev = ph;
    w_prev = w;
  }
  throw std::domain_error(
      "harmonic_balance_predict: no phase crossing in the scan range");
}

}  // namespace relaytune
