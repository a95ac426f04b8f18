#pragma once

#include <stdexcept>
#include <utility>

#include "relaytune/polynomial.hpp"

namespace relaytune {

// Rational transfer function with dead time: (num/den) * e^{-delay s}.
struct DelayTF {
  Poly num;
  Poly den;
  double delay = 0.0;

  int relative_degree() const { return den.degree() - num.degree(); }
};

// K * e^{-tau s} / (s (Tp s + 1)(Tq s + 1)): integrating second-order process
// with dead time, the structure identified for the attitude and altitude loops.
inline DelayTF soiptd(double K, double Tp, double Tq, double tau) {
  return {Poly{K}, Poly::var() * Poly{1.0, Tp} * Poly{1.0, Tq}, tau};
}

// K * e^{-tau s} / (s (T s + 1)): the lateral-translation process structure.
inline DelayTF foiptd(double K, double T, double tau) {
  return {Poly{K}, Poly::var() * Poly{1.0, T}, tau};
}

struct PdGains {
  double kc = 0.0;  // proportional
  double kd = 0.0;  // derivative
  double ki = 0.0;  // integral
};

// C(s) = kc + kd s + ki/s as a numerator/denominator pair.
inline std::pair<Poly, Poly> controller_tf(const PdGains& g) {
  if (g.ki == 0.0) return {Poly{g.kc, g.kd}, Poly::one()};
  return {Poly{g.ki, g.kc, g.kd}, Poly::var()};
}

enum class RefKind { step, impulse };

// Which path carries the loop dead time: actuation (forward) or measurement
// (feedback).  The error metric is always the true error r - y.
enum class DelayAllocation { forward, feedback };

// Closed-loop error dynamics E(s) = (B + D e^{-tau s}) / (A + C e^{-tau s}).
struct DelayLoopForm {
  Poly A, B, C, D;
  double tau = 0.0;
};

inline cplx eval_form(const DelayLoopForm& f, cplx s) {
  const cplx ex = std::exp(-f.tau * s);
  return (f.B(s) + f.D(s) * ex) / (f.A(s) + f.C(s) * ex);
}

namespace detail {

// Divides all four polynomials by s while they share a root at the origin.
// Zero polynomials stay zero and never block the cancellation.
inline void cancel_shared_origin(DelayLoopForm& f) {
  auto near_zero_at_origin = [](const Poly& p) {
    return p.is_zero() || std::abs(p.coeff(0)) <= 1e-12 * p.max_abs();
  };
  while (f.A.degree() > 0 && near_zero_at_origin(f.A) && near_zero_at_origin(f.B) &&
         near_zero_at_origin(f.C) && near_zero_at_origin(f.D)) {
    f.A = f.A.divided_by_var();
    f.C = f.C.divided_by_var();
    f.B = f.B.is_zero() ? f.B : f.B.divided_by_var();
    f.D = f.D.is_zero() ? f.D : f.D.divided_by_var();
  }
}

}  // namespace detail

// Closed-loop error dynamics for reference r through controller C and plant G.
// forward:  E = R * Dc Dg / (Dc Dg + Nc Ng e^{-tau s})          (true = measured error)
// feedback: E = R * (Dc Dg - Nc Ng + Nc Ng e^{-tau s}) / (same) (true error; the
//           controller acts on the delayed measurement)
// Common roots at s = 0 shared by all four polynomials are cancelled, which
// reduces the step form of an integrating loop to strictly proper shape.
// With tau = 0 the exponential is 1 and the form collapses to one rational.
inline DelayLoopForm assemble_error_dynamics(
    const DelayTF& plant, const PdGains& ctrl, RefKind ref,
    DelayAllocation alloc = DelayAllocation::forward) {
  if (plant.num.degree() > plant.den.degree())
    throw std::invalid_argument("assemble_error_dynamics: improper plant");
  if (ctrl.ki != 0.0 && ref == RefKind::impulse)
    throw std::invalid_argument(
        "assemble_error_dynamics: integral action with impulse reference unsupported");

  const auto [Nc, Dc] = controller_tf(ctrl);
  const Poly DcDg = Dc * plant.den;
  const Poly NcNg = Nc * plant.num;
  const Poly Dr = (ref == RefKind::step) ? Poly::var() : Poly::one();

  DelayLoopForm f;
  f.tau = plant.delay;
  f.A = Dr * DcDg;
  f.C = Dr * NcNg;
  if (alloc == DelayAllocation::forward) {
    f.B = DcDg;
    f.D = Poly();
  } else {
    f.B = DcDg - NcNg;
    f.D = NcNg;
  }

  // Cancel shared s factors (integrating loop + step reference).
  detail::cancel_shared_origin(f);

  if (f.tau == 0.0) {
    f.A += f.C;
    f.B += f.D;
    f.C = Poly();
    f.D = Poly();
  }
  return f;
}

// num(j omega)/den(j omega) * e^{-j omega tau}.
inline cplx frequency_response(const DelayTF& sys, double omega) {
  const cplx jw(0.0, omega);
  const cplx d = sys.den(jw);
  if (std::abs(d) <= 1e-300 * std::max(1.0, sys.den.max_abs()))
    throw std::domain_error("frequency_response: pole on the imaginary axis");
  return sys.num(jw) / d * std::exp(-jw * sys.delay);
}

}  // namespace relaytune
