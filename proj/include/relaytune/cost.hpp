#pragma once

#include <cmath>
#include <complex>
#include <limits>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "relaytune/polynomial.hpp"
#include "relaytune/stability.hpp"
#include "relaytune/transfer.hpp"

// Integral-of-squared-error evaluation for the closed loops assembled in
// transfer.hpp.  Two engines:
//  - ise_delay_free: Parseval / banded-matrix method for rational error
//    dynamics E(s) = num/den with no delay term.
//  - ise_delay_analytic: exact residue sum for retarded error dynamics
//    E(s) = (B + D e^{-tau s}) / (A + C e^{-tau s}).
// Both return NaN with stable=false instead of a value when the loop is
// unstable; structural problems (improper E, repeated poles, singular
// systems) throw.

namespace relaytune {

struct IseResult {
  double value = std::numeric_limits<double>::quiet_NaN();
  bool stable = false;
  // Mirror-set roots the residue sum ran over (empty for the delay-free path).
  std::vector<cplx> roots;
};

namespace detail {

inline bool roots_in_open_lhp(const std::vector<cplx>& r) {
  for (const cplx& z : r)
    if (z.real() >= -1e-9 * std::max(1.0, std::abs(z))) return false;
  return true;
}

// Collapses an even polynomial L(s) to W(r) with r = s^2, so W(s^2) = L(s).
inline Poly even_part_in_s2(const Poly& L) {
  const int n = L.degree();
  std::vector<double> w(static_cast<size_t>(n / 2) + 1, 0.0);
  for (int m = 0; 2 * m <= n; ++m) w[static_cast<size_t>(m)] = L.coeff(2 * m);
  return Poly(std::move(w));
}

// All roots of an even polynomial L(s), recovered as +/- sqrt of the roots of
// its r = s^2 reduction.  Complex-conjugate quadruples come out of the two
// conjugate r roots, imaginary-axis pairs out of negative real r.
inline std::vector<cplx> even_poly_root_set(const Poly& L) {
  const Poly W = even_part_in_s2(L);
  if (W.degree() < 1)
    throw std::domain_error("ise_delay_analytic: degenerate mirror polynomial");
  std::vector<cplx> s_roots;
  for (const cplx& r : W.roots(0.0)) {
    const cplx s = std::sqrt(r);
    s_roots.push_back(s);
    s_roots.push_back(-s);
  }
  return s_roots;
}

}  // namespace detail

// Exact integral of e(t)^2 over [0, inf) for a strictly proper rational
// Laplace transform E(s) = num(s)/den(s) with Hurwitz denominator.  Solves
// the banded moment system M f = g and returns J = f_1 / a_0.  A singular
// moment matrix (marginal or defective denominator) raises domain_error.
inline IseResult ise_delay_free(const Poly& num, const Poly& den) {
  const int n = den.degree();
  if (n < 1)
    throw std::invalid_argument("ise_delay_free: denominator must have degree >= 1");
  if (num.degree() >= n)
    throw std::invalid_argument("ise_delay_free: error dynamics must be strictly proper");

  IseResult res;
  if (!detail::roots_in_open_lhp(den.roots())) return res;
  res.stable = true;
  if (num.is_zero()) {
    res.value = 0.0;
    return res;
  }

  // Descending-index views: a_k multiplies s^{n-k}, b_k multiplies s^{n-k}.
  auto a = [&](int k) { return (k < 0 || k > n) ? 0.0 : den.coeff(n - k); };
  auto b = [&](int k) { return (k < 1 || k > n) ? 0.0 : num.coeff(n - k); };

  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(n, n);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(n);
  for (int r = 1; r <= n; ++r) {
    for (int c = 1; c <= n; ++c) M(r - 1, c - 1) = a(2 * r - c);
    double acc = 0.0;
    for (int m = 1; m <= 2 * r - 1; ++m) {
      const double term = b(2 * r - m) * b(m);
      acc += (m % 2 == 1) ? term : -term;
    }
    g(r - 1) = 0.5 * acc;
  }

  Eigen::FullPivLU<Eigen::MatrixXd> lu(M);
  if (!lu.isInvertible())
    throw std::domain_error("ise_delay_free: singular moment system");
  res.value = lu.solve(g)(0) / a(0);
  return res;
}

// Lower bound of the step ISE reachable by any stabilizing PD gains on a
// double-lag integrating plant: the large-gain limit Tp Tq / (2 (Tp + Tq)).
inline double trivial_limit(double Tp, double Tq) {
  if (!(Tp > 0.0) || !(Tq > 0.0))
    throw std::invalid_argument("trivial_limit: time constants must be positive");
  return Tp * Tq / (2.0 * (Tp + Tq));
}

// Exact integral of e(t)^2 for retarded error dynamics
//   E(s) = (B(s) + D(s) e^{-tau s}) / (A(s) + C(s) e^{-tau s}).
// The mirror polynomial L = A A~ - C C~ (p~(s) = p(-s)) collects the
// characteristic roots together with their reflections; the integral is the
// residue sum J = sum_k -E(s_k) g(s_k) / L'(s_k) with
// g = B~ A - D~ C, taken over every root of L with full weight.
// When A and C share a root at the origin (integrating loop, feedback-side
// delay) L = -s^2 Lt and the double origin root contributes the closed form
// E(0) gt(0) / Lt(0) with E(0) obtained by l'Hopital.
// Stability is established first through crossing_analysis; an unstable loop
// returns NaN with stable=false.  Repeated mirror roots and near-coincidence
// of a mirror root with a characteristic root raise domain_error.
inline IseResult ise_delay_analytic(const DelayLoopForm& form) {
  if (form.tau < 0.0)
    throw std::invalid_argument("ise_delay_analytic: negative delay");

  // Collapsed rational form (assembled with tau = 0): pure Parseval problem.
  if (form.C.is_zero()) {
    if (form.tau == 0.0 || form.D.is_zero())
      return ise_delay_free(form.B + form.D, form.A);
    // Poles of E then sit on the mirror roots and the residue sum degenerates.
    throw std::invalid_argument(
        "ise_delay_analytic: delay must enter the characteristic equation");
  }

  const StabilityReport rep = crossing_analysis(form);
  IseResult res;
  if (!rep.stable) return res;
  res.stable = true;

  const Poly& A = form.A;
  const Poly& C = form.C;
  const Poly Bref = form.B.reflected();
  const Poly Dref = form.D.reflected();
  const double tau = form.tau;

  auto origin_shared = [](const Poly& p) {
    return !p.is_zero() && std::abs(p.coeff(0)) <= 1e-12 * p.max_abs();
  };

  // E(s) with an explicit guard against evaluating on top of a pole.
  auto eval_error = [&](const cplx& s) -> cplx {
    if (tau * std::abs(s.real()) > 600.0)
      throw std::domain_error("ise_delay_analytic: delay-root product overflows");
    const cplx ex = std::exp(-tau * s);
    const cplx den = A(s) + C(s) * ex;
    const double scale = std::max(1.0, A.max_abs() + C.max_abs());
    if (std::abs(den) <= 1e-12 * scale)
      throw std::domain_error("ise_delay_analytic: mirror root on characteristic root");
    return (form.B(s) + form.D(s) * ex) / den;
  };

  cplx acc(0.0, 0.0);
  if (origin_shared(A) && origin_shared(C)) {
    // Integrating loop with delay inside the feedback path.
    const Poly At = A.divided_by_var();
    const Poly Ct = C.divided_by_var();
    const Poly Lt = At * At.reflected() - Ct * Ct.reflected();
    const double dchar = At.coeff(0) + Ct.coeff(0);
    if (std::abs(Lt.coeff(0)) <= 1e-12 * Lt.max_abs() || dchar == 0.0)
      throw std::domain_error("ise_delay_analytic: higher-order origin degeneracy");

    const std::vector<cplx> s_roots = detail::even_poly_root_set(Lt);
    if (min_relative_root_gap(s_roots) < 1e-7)
      throw std::domain_error("ise_delay_analytic: repeated mirror roots");

    // l'Hopital value of E at the shared origin root.
    const double e0 =
        (form.B.coeff(1) + form.D.coeff(1) - tau * form.D.coeff(0)) / dchar;
    acc += e0 * (Bref.coeff(0) * At.coeff(0) - Dref.coeff(0) * Ct.coeff(0)) /
           Lt.coeff(0);

    const Poly Ltd = Lt.derivative();
    for (const cplx& s : s_roots)
      acc += eval_error(s) * (Bref(s) * At(s) - Dref(s) * Ct(s)) / (s * Ltd(s));
    res.roots = s_roots;
  } else {
    const Poly L = A * A.reflected() - C * C.reflected();
    const std::vector<cplx> s_roots = detail::even_poly_root_set(L);
    if (min_relative_root_gap(s_roots) < 1e-7)
      throw std::domain_error("ise_delay_analytic: repeated mirror roots");

    const Poly Ld = L.derivative();
    for (const cplx& s : s_roots)
      acc -= eval_error(s) * (Bref(s) * A(s) - Dref(s) * C(s)) / Ld(s);
    res.roots = s_roots;
  }

  res.value = acc.real();
  return res;
}

// Convenience wrapper: step-reference ISE of plant under PD control.
inline IseResult closed_loop_step_ise(
    const DelayTF& plant, const PdGains& ctrl,
    DelayAllocation alloc = DelayAllocation::forward) {
  return ise_delay_analytic(
      assemble_error_dynamics(plant, ctrl, RefKind::step, alloc));
}

// Difference between the step ISE with the delay on the forward path (true
// error observed after the delayed actuation) and with the delay on the
// feedback path (controller acting on stale measurements).  For a step
// reference the two responses are time shifts of one another, so the offset
// equals the loop delay exactly; both sides are evaluated independently and
// the caller can use the identity as a cross-check.  The input may be either
// allocation of a step-reference loop; anything else is rejected.
inline double delay_allocation_offset(const DelayLoopForm& form) {
  // Normalize to separated (B_eff, C_eff, D_eff): a merged zero-delay form
  // A = s B + Nc Ng (possibly with one cancelled origin root) re-separates as
  // C_eff = A - s B; both layouts then satisfy A = s (B_eff + D_eff) + ...
  Poly B_eff = form.B, C_eff = form.C, D_eff = form.D;
  if (form.C.is_zero() && form.D.is_zero()) {
    C_eff = (form.A - form.B.times_var()).trimmed();
    if (C_eff.is_zero() || C_eff.degree() >= form.A.degree())
      throw std::invalid_argument(
          "delay_allocation_offset: step-reference loop form required");
  } else {
    // A step form always satisfies A = s (B + D) regardless of allocation.
    Poly diff = form.A - (form.B + form.D).times_var();
    if (!diff.is_zero() && diff.max_abs() > 1e-9 * form.A.max_abs())
      throw std::invalid_argument(
          "delay_allocation_offset: step-reference loop form required");
  }

  // Recover the loop products P = Dc Dg and N = Nc Ng at a common scale.
  const Poly P_red = B_eff + D_eff;
  Poly P, N;
  if (!D_eff.is_zero()) {
    P = P_red;
    N = D_eff;
  } else if (std::abs(C_eff.coeff(0)) > 1e-12 * C_eff.max_abs()) {
    P = P_red.times_var();  // one shared origin root was cancelled
    N = C_eff;
  } else {
    P = P_red;
    N = C_eff.divided_by_var();
  }

  DelayLoopForm fwd{P.times_var(), P, N.times_var(), Poly(), form.tau};
  DelayLoopForm fb{P.times_var(), P - N, N.times_var(), N, form.tau};
  detail::cancel_shared_origin(fwd);
  detail::cancel_shared_origin(fb);

  const IseResult jf = ise_delay_analytic(fwd);
  const IseResult jb = ise_delay_analytic(fb);
  if (!jf.stable || !jb.stable)
    throw std::domain_error("delay_allocation_offset: loop is unstable");
  return jf.value - jb.value;
}

}  // namespace relaytune
