#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <stdexcept>
#include <vector>

#include "relaytune/polynomial.hpp"
#include "relaytune/sim.hpp"
#include "relaytune/transfer.hpp"

namespace relaytune {

struct StabilityReport {
  bool stable = false;
  std::vector<double> crossing_freqs;  // rad/s, ascending
  // Smallest delay that destabilizes the loop: 0 when the delay-free loop is
  // already unstable, +inf when no imaginary-axis crossing exists.
  double critical_delay = std::numeric_limits<double>::infinity();
  double gain_margin = std::numeric_limits<double>::infinity();
  double phase_margin = std::numeric_limits<double>::infinity();  // degrees
};

// First column of the Routh table of p.  Sign changes in the column count
// right-half-plane roots.  A zero pivot is replaced by a small positive
// epsilon (reported through `perturbed`); an all-zero row is replaced by the
// derivative of its auxiliary polynomial, which is also a perturbation of the
// plain table and sets the flag.
inline std::vector<double> routh_first_column(const Poly& p, bool* perturbed = nullptr) {
  const Poly q = p.trimmed();
  const int n = q.degree();
  if (n < 1) throw std::invalid_argument("routh_first_column: degree must be >= 1");
  if (perturbed) *perturbed = false;

  const size_t w = static_cast<size_t>(n) / 2 + 1;
  std::vector<double> above(w, 0.0), row(w, 0.0);
  for (size_t j = 0; j < w; ++j) {
    const int ka = n - 2 * static_cast<int>(j);
    above[j] = q.coeff(ka);
    if (ka >= 1) row[j] = q.coeff(ka - 1);
  }

  std::vector<double> col;
  col.reserve(static_cast<size_t>(n) + 1);
  col.push_back(above[0]);
  double scale = q.max_abs();
  for (int i = 1; i <= n; ++i) {
    double rmax = 0.0;
    for (double v : row) rmax = std::max(rmax, std::abs(v));
    if (rmax <= 1e-13 * scale) {
      // Whole row vanished: differentiate the auxiliary polynomial formed by
      // the row above (even/odd powers n-i+1, n-i-1, ...).
      if (perturbed) *perturbed = true;
      for (size_t j = 0; j < w; ++j) {
        const int power = n - i + 1 - 2 * static_cast<int>(j);
        row[j] = power > 0 ? above[j] * power : 0.0;
      }
      for (double v : row) rmax = std::max(rmax, std::abs(v));
      if (rmax <= 1e-13 * scale)
        throw std::invalid_argument("routh_first_column: degenerate zero rows");
    } else if (std::abs(row[0]) <= 1e-13 * rmax) {
      if (perturbed) *perturbed = true;
      row[0] = 1e-9 * rmax;
    }
    col.push_back(row[0]);
    scale = std::max(scale, rmax);

    std::vector<double> next(w, 0.0);
    for (size_t j = 0; j + 1 < w; ++j)
      next[j] = (row[0] * above[j + 1] - above[0] * row[j + 1]) / row[0];
    above = row;
    row = next;
  }
  return col;
}

inline int routh_sign_changes(const std::vector<double>& col) {
  int changes = 0;
  for (size_t i = 1; i < col.size(); ++i)
    if (col[i - 1] * col[i] < 0.0) ++changes;
  return changes;
}

namespace detail {

// Shared origin roots of A and C make s = 0 a root of A + C e^{-tau s} for
// every tau.  Under a step-reference embedding that root is removable in the
// error dynamics, so the loop analysis strips it.
inline void strip_shared_origin(Poly& a, Poly& c) {
  a = a.trimmed();
  c = c.trimmed();
  const auto at_origin = [](const Poly& p) {
    return p.is_zero() || std::abs(p.coeff(0)) <= 1e-12 * p.max_abs();
  };
  while (a.degree() > 0 && at_origin(a) && at_origin(c)) {
    a = a.divided_by_var(1, 1e-9);
    if (!c.is_zero()) c = c.divided_by_var(1, 1e-9);
  }
}

// W(q) with q = omega^2: L(j omega) for L(s) = A(s)A(-s) - C(s)C(-s).
inline Poly crossing_poly(const Poly& a, const Poly& c) {
  Poly L = a * a.reflected();
  L -= c * c.reflected();
  // The leading coefficient of L is an exact square (deg C < deg A for proper
  // loops), so keep every nonzero coefficient: relative trimming would drop a
  // legitimately tiny lead against a huge gain term and lose the far root.
  if (L.is_zero()) return Poly();
  std::vector<double> wc(static_cast<size_t>(L.degree()) / 2 + 1, 0.0);
  for (int m = 0; 2 * m <= L.degree(); ++m)
    wc[static_cast<size_t>(m)] = L.coeff(2 * m) * (m % 2 == 0 ? 1.0 : -1.0);
  return Poly(std::move(wc));
}

// Real positive roots of w, companion-seeded and Newton-polished so that a
// nearly-real conjugate pair still yields its real root.
inline std::vector<double> positive_real_roots(const Poly& w) {
  std::vector<double> out;
  if (w.degree() < 1) return out;
  const Poly wd = w.derivative();
  for (const auto& z : w.roots(0.0)) {  // exact coefficients: no dust trimming
    if (std::abs(z.imag()) > 1e-3 * (1.0 + std::abs(z))) continue;
    double x = z.real();
    if (!(x > 0.0)) continue;
    for (int it = 0; it < 12; ++it) {
      const double f = w(x), fd = wd(x);
      if (fd == 0.0) break;
      const double step = f / fd;
      x -= step;
      if (std::abs(step) <= 1e-14 * (1.0 + std::abs(x))) break;
    }
    if (!(x > 0.0) || !std::isfinite(x)) continue;
    // Accept only converged real roots; a truly complex pair will not land.
    const double back = std::abs(w(x));
    const double local = std::abs(wd(x)) * (1e-6 * (1.0 + std::abs(x)));
    if (back > local && back > 1e-9 * w.max_abs()) continue;
    bool dup = false;
    for (double y : out)
      if (std::abs(x - y) <= 1e-7 * (1.0 + std::abs(y))) dup = true;
    if (!dup) out.push_back(x);
  }
  std::sort(out.begin(), out.end());
  return out;
}

struct OpenLoop {
  Poly num, den;  // OL(s) = num/den * e^{-tau s}
  double tau = 0.0;

  std::complex<double> operator()(double omega) const {
    const std::complex<double> s(0.0, omega);
    const std::complex<double> d = den(s);
    if (std::abs(d) <= 1e-300 * std::max(1.0, den.max_abs()))
      throw std::domain_error("open loop evaluated at a pole");
    return num(s) / d * std::exp(-s * tau);
  }
};

inline double principal_arg(const std::complex<double>& z) {
  return std::atan2(z.imag(), z.real());
}

// First -180 deg crossing and first unity-gain crossover of OL over a log
// grid, refined by bisection; multiple crossings exist for delay loops, the
// lowest-frequency one is reported.
inline void scan_margins(const OpenLoop& ol, double* gain_margin, double* phase_margin) {
  constexpr int kGrid = 2000;
  constexpr double kLo = 1e-3, kHi = 1e4;
  *gain_margin = std::numeric_limits<double>::infinity();
  *phase_margin = std::numeric_limits<double>::infinity();

  double w_prev = kLo;
  std::complex<double> v_prev = ol(w_prev);
  double ph_prev = principal_arg(v_prev);
  bool have_gm = false, have_pm = false;
  for (int k = 1; k < kGrid && !(have_gm && have_pm); ++k) {
    const double w = kLo * std::pow(kHi / kLo, static_cast<double>(k) / (kGrid - 1));
    const std::complex<double> v = ol(w);
    // Unwrap against the previous grid point; the grid is dense enough below
    // the frequencies where a delay sweeps whole turns per step.
    double ph = principal_arg(v);
    ph += 2.0 * M_PI * std::round((ph_prev - ph) / (2.0 * M_PI));

    if (!have_gm && (ph_prev + M_PI) > 0.0 && (ph + M_PI) <= 0.0) {
      double lo = w_prev, hi = w, ph_lo = ph_prev;
      for (int it = 0; it < 80; ++it) {
        const double mid = 0.5 * (lo + hi);
        double ph_mid = principal_arg(ol(mid));
        ph_mid += 2.0 * M_PI * std::round((ph_lo - ph_mid) / (2.0 * M_PI));
        if (ph_mid + M_PI > 0.0) {
          lo = mid;
          ph_lo = ph_mid;
        } else {
          hi = mid;
        }
      }
      *gain_margin = 1.0 / std::abs(ol(0.5 * (lo + hi)));
      have_gm = true;
    }
    if (!have_pm && (std::abs(v_prev) - 1.0) > 0.0 && (std::abs(v) - 1.0) <= 0.0) {
      double lo = w_prev, hi = w, ph_lo = ph_prev;
      for (int it = 0; it < 80; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (std::abs(ol(mid)) > 1.0)
          lo = mid;
        else
          hi = mid;
      }
      const double wgc = 0.5 * (lo + hi);
      double ph_gc = principal_arg(ol(wgc));
      ph_gc += 2.0 * M_PI * std::round((ph_lo - ph_gc) / (2.0 * M_PI));
      *phase_margin = (ph_gc + M_PI) * 180.0 / M_PI;
      have_pm = true;
    }
    w_prev = w;
    v_prev = v;
    ph_prev = ph;
  }
}

}  // namespace detail

// Imaginary-axis crossing analysis of A(s) + C(s) e^{-tau s}: crossing
// frequencies from the even polynomial W(omega^2) = |A(j w)|^2 - |C(j w)|^2,
// the critical delay from the smallest positive solution of
// sin(w tau) = Im(A/C), cos(w tau) = Re(-A/C), and open-loop margins of
// (C/A) e^{-tau s} at the form's own delay.
inline StabilityReport crossing_analysis(const DelayLoopForm& form) {
  Poly a = form.A, c = form.C;
  detail::strip_shared_origin(a, c);
  if (a.degree() < 1) throw std::invalid_argument("crossing_analysis: degenerate loop");

  StabilityReport rep;

  Poly char0 = a;
  char0 += c;
  bool stable0 = true;
  for (const auto& r : char0.roots())
    if (r.real() >= -1e-9 * std::max(1.0, std::abs(r))) stable0 = false;

  const Poly w = detail::crossing_poly(a, c);
  const std::vector<double> qs = detail::positive_real_roots(w);
  double tau0 = std::numeric_limits<double>::infinity();
  for (double q : qs) {
    const double omega = std::sqrt(q);
    rep.crossing_freqs.push_back(omega);
    const std::complex<double> s(0.0, omega);
    const std::complex<double> cv = c(s);
    if (std::abs(cv) <= 1e-300 * std::max(1.0, c.max_abs())) continue;
    const std::complex<double> z = a(s) / cv;
    double theta = std::atan2(z.imag(), -z.real());
    if (theta < 0.0) theta += 2.0 * M_PI;
    tau0 = std::min(tau0, theta / omega);
  }

  if (!stable0) {
    rep.stable = false;
    rep.critical_delay = 0.0;
  } else {
    rep.critical_delay = tau0;
    rep.stable = form.tau < tau0;
  }

  detail::OpenLoop ol{c, a, form.tau};
  detail::scan_margins(ol, &rep.gain_margin, &rep.phase_margin);
  return rep;
}

enum class OscillationVerdict { decaying, marginal, growing };

struct OscillationCheck {
  OscillationVerdict verdict = OscillationVerdict::decaying;
  bool marginal = false;
  double drift_per_period = 0.0;  // worst |peak ratio - 1| over the last 5 periods
  double period = 0.0;            // mean spacing of the late peaks, 0 if none
};

// Classifies a signal's tail: sustained oscillation counts as marginal when
// successive peak amplitudes drift by less than 5% per period over the last
// 5 periods.
inline OscillationCheck detect_sustained_oscillation(const std::vector<double>& t,
                                                     const std::vector<double>& e,
                                                     bool diverged = false) {
  OscillationCheck res;
  if (diverged) {
    res.verdict = OscillationVerdict::growing;
    res.drift_per_period = std::numeric_limits<double>::infinity();
    return res;
  }
  if (t.size() != e.size() || t.size() < 8) return res;

  double scale = 0.0;
  for (double v : e) scale = std::max(scale, std::abs(v));
  if (scale == 0.0) return res;

  std::vector<double> pt, pv;  // positive local maxima
  for (size_t i = 1; i + 1 < e.size(); ++i) {
    if (e[i] > e[i - 1] && e[i] >= e[i + 1] && e[i] > 1e-9 * scale) {
      pt.push_back(t[i]);
      pv.push_back(e[i]);
    }
  }

  constexpr int kPeriods = 5;
  if (pv.size() < kPeriods + 1) {
    // No sustained oscillation: settled unless the tail still carries signal.
    double tail = 0.0;
    const size_t i0 = e.size() - e.size() / 10 - 1;
    for (size_t i = i0; i < e.size(); ++i) tail = std::max(tail, std::abs(e[i]));
    res.verdict = tail > 0.5 * scale ? OscillationVerdict::growing : OscillationVerdict::decaying;
    return res;
  }

  const size_t m = pv.size();
  double worst = 0.0, mean_ratio = 0.0;
  for (size_t k = m - kPeriods; k < m; ++k) {
    const double r = pv[k] / pv[k - 1];
    worst = std::max(worst, std::abs(r - 1.0));
    mean_ratio += r / kPeriods;
  }
  res.drift_per_period = worst;
  res.period = (pt[m - 1] - pt[m - 1 - kPeriods]) / kPeriods;
  if (pv[m - 1] < 1e-6 * scale) {
    res.verdict = OscillationVerdict::decaying;  // residual ripple after settling
  } else if (worst < 0.05) {
    res.verdict = OscillationVerdict::marginal;
  } else {
    res.verdict = mean_ratio > 1.0 ? OscillationVerdict::growing : OscillationVerdict::decaying;
  }
  res.marginal = res.verdict == OscillationVerdict::marginal;
  return res;
}

struct MarginalStabilityResult {
  SimTrace trace;
  OscillationCheck oscillation;
};

// Simulates the loop with all controller gains scaled by `scale` and runs the
// sustained-oscillation detector on the error channel.  At scale equal to the
// gain margin the loop rings at constant amplitude.
inline MarginalStabilityResult verify_marginal_stability(const DelayTF& plant,
                                                         const PdGains& ctrl, double scale,
                                                         SimOptions opt = {}) {
  if (!(scale > 0.0)) throw std::invalid_argument("verify_marginal_stability: scale must be > 0");
  PdGains g{ctrl.kc * scale, ctrl.kd * scale, ctrl.ki * scale};
  if (opt.t_final == 10.0) opt.t_final = 25.0;
  opt.derivative = DerivativeMode::exact_pd;
  const double tau_min = plant.delay + opt.forward_delay + opt.feedback_delay;
  opt.dt = std::min(opt.dt, default_dt(tau_min > 0.0 ? tau_min : 1.0));
  MarginalStabilityResult out{simulate_closed_loop(plant, g, RefKind::step, opt), {}};
  out.oscillation =
      detect_sustained_oscillation(out.trace.t, out.trace.channel("error"), out.trace.diverged);
  return out;
}

}  // namespace relaytune
