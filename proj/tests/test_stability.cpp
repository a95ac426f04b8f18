#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "relaytune/stability.hpp"

using namespace relaytune;

namespace {
const double kRollK = 76.87, kRollTp = 0.071, kRollTq = 0.276, kRollTau = 0.02;
const PdGains kRollGains{0.411, 0.066, 0.0};

// Analytic boundary of the roll loop, cross-checked against the delay margin
// identity tau0 = tau + pm_rad / wgc.
const double kRollOmegaC = 13.882993223914991;
const double kRollTau0 = 0.045108328589369116;
const double kRollGm = 2.2467587472919661;
const double kRollPmDeg = 19.972091527815348;
const double kRollPmDegNoDelay = 35.880829902596332;

}  // namespace

TEST_CASE("routh column of a stable quadratic") {
  bool perturbed = true;
  const auto col = routh_first_column(Poly{1.0, 2.0, 1.0}, &perturbed);
  REQUIRE(col.size() == 3);
  REQUIRE(col[0] == Catch::Approx(1.0));
  REQUIRE(col[1] == Catch::Approx(2.0));
  REQUIRE(col[2] == Catch::Approx(1.0));
  REQUIRE(routh_sign_changes(col) == 0);
  REQUIRE(!perturbed);
}

TEST_CASE("routh column of the crossing cubic ends negative") {
  // Cubic in q whose table at the roll parameters is known entry by entry;
  // the negative constant term forces a positive real root for any gains.
  const double Tp = kRollTp, Tq = kRollTq;
  const double kp2kd2 = std::pow(kRollK * kRollGains.kd, 2);
  const double kp2kc2 = std::pow(kRollK * kRollGains.kc, 2);
  const Poly w{-kp2kc2, 1.0 - kp2kd2, Tp * Tp + 4.0 * Tp * Tq + Tq * Tq, Tp * Tq};
  const auto col = routh_first_column(w);
  REQUIRE(col.size() == 4);
  REQUIRE(col[0] == Catch::Approx(Tp * Tq));
  REQUIRE(col[1] == Catch::Approx(Tp * Tp + 4.0 * Tp * Tq + Tq * Tq));
  REQUIRE(col[2] ==
          Catch::Approx(1.0 - kp2kd2 + kp2kc2 * Tp * Tq / (Tp * Tp + 4.0 * Tp * Tq + Tq * Tq)));
  REQUIRE(col[3] == Catch::Approx(-kp2kc2));
  REQUIRE(col.back() < 0.0);
  REQUIRE(routh_sign_changes(col) == 1);

  int positive_real = 0;
  for (const auto& r : w.roots())
    if (std::abs(r.imag()) < 1e-9 && r.real() > 0.0) ++positive_real;
  REQUIRE(positive_real == 1);
}

TEST_CASE("routh sign changes count right-half-plane roots") {
  // This quartic hits the zero-pivot row; the epsilon perturbation is flagged
  // and the count still matches the actual root split.
  const Poly p{1.0, 2.0, 2.0, 1.0, 1.0};
  bool perturbed = false;
  const auto col = routh_first_column(p, &perturbed);
  REQUIRE(perturbed);
  int rhp = 0;
  for (const auto& r : p.roots())
    if (r.real() > 0.0) ++rhp;
  REQUIRE(rhp == 2);
  REQUIRE(routh_sign_changes(col) == rhp);
}

TEST_CASE("routh column of random Hurwitz polynomials has no sign change") {
  std::mt19937_64 rng(20240818);
  std::uniform_real_distribution<double> negre(-3.0, -0.05);
  std::uniform_real_distribution<double> im(0.1, 5.0);
  std::uniform_int_distribution<int> pairs(0, 3), reals(1, 3);
  for (int trial = 0; trial < 30; ++trial) {
    Poly p = Poly::one();
    for (int k = pairs(rng); k > 0; --k) {
      const double a = negre(rng), b = im(rng);
      p = p * Poly{a * a + b * b, -2.0 * a, 1.0};
    }
    for (int k = reals(rng); k > 0; --k) p = p * Poly{-negre(rng), 1.0};
    REQUIRE(routh_sign_changes(routh_first_column(p)) == 0);
  }
}

TEST_CASE("roll-loop crossing analysis matches the analytic boundary") {
  const DelayTF plant = soiptd(kRollK, kRollTp, kRollTq, kRollTau);
  const auto form =
      assemble_error_dynamics(plant, kRollGains, RefKind::step, DelayAllocation::forward);
  const StabilityReport rep = crossing_analysis(form);

  REQUIRE(rep.stable);
  REQUIRE(rep.crossing_freqs.size() == 1);
  REQUIRE(rep.crossing_freqs[0] == Catch::Approx(kRollOmegaC).epsilon(1e-9));
  REQUIRE(rep.critical_delay == Catch::Approx(kRollTau0).epsilon(1e-9));
  REQUIRE(rep.gain_margin == Catch::Approx(kRollGm).epsilon(1e-6));
  REQUIRE(rep.phase_margin == Catch::Approx(kRollPmDeg).epsilon(1e-6));

  // Delay-margin identity: the unity-gain crossover and the crossing
  // frequency solve the same magnitude equation.
  const double pm_rad = rep.phase_margin * M_PI / 180.0;
  REQUIRE(kRollTau + pm_rad / kRollOmegaC == Catch::Approx(rep.critical_delay).epsilon(1e-9));

  const auto fb =
      assemble_error_dynamics(plant, kRollGains, RefKind::step, DelayAllocation::feedback);
  const StabilityReport rep2 = crossing_analysis(fb);
  REQUIRE(rep2.stable == rep.stable);
  REQUIRE(rep2.crossing_freqs.size() == rep.crossing_freqs.size());
  REQUIRE(rep2.crossing_freqs[0] == Catch::Approx(rep.crossing_freqs[0]).epsilon(1e-12));
  REQUIRE(rep2.critical_delay == Catch::Approx(rep.critical_delay).epsilon(1e-12));
  REQUIRE(rep2.gain_margin == Catch::Approx(rep.gain_margin).epsilon(1e-12));
  REQUIRE(rep2.phase_margin == Catch::Approx(rep.phase_margin).epsilon(1e-12));
}

TEST_CASE("zero-delay roll loop never reaches -180 degrees") {
  // Same loop with the delay removed but the characteristic split kept: the
  // crossing frequency is delay-independent, while the margins change.
  const Poly a = Poly{0.0, 1.0} * Poly{1.0, kRollTp} * Poly{1.0, kRollTq};
  const Poly c = Poly{kRollK * kRollGains.kc, kRollK * kRollGains.kd};
  const DelayLoopForm form{a, Poly{1.0, kRollTp} * Poly{1.0, kRollTq}, c, Poly(), 0.0};
  const StabilityReport rep = crossing_analysis(form);

  REQUIRE(rep.stable);
  REQUIRE(rep.crossing_freqs.size() == 1);
  REQUIRE(rep.crossing_freqs[0] == Catch::Approx(kRollOmegaC).epsilon(1e-9));
  REQUIRE(rep.critical_delay == Catch::Approx(kRollTau0).epsilon(1e-9));
  REQUIRE(std::isinf(rep.gain_margin));
  REQUIRE(rep.phase_margin == Catch::Approx(kRollPmDegNoDelay).epsilon(1e-6));
}

TEST_CASE("delayed integrator under P control") {
  const double K = 2.0, kc = 1.5, tau = 0.05;
  const DelayTF plant{Poly{K}, Poly{0.0, 1.0}, tau};
  const PdGains g{kc, 0.0, 0.0};
  const auto form = assemble_error_dynamics(plant, g, RefKind::step, DelayAllocation::forward);
  const StabilityReport rep = crossing_analysis(form);

  REQUIRE(rep.stable);
  REQUIRE(rep.crossing_freqs.size() == 1);
  REQUIRE(rep.crossing_freqs[0] == Catch::Approx(K * kc).epsilon(1e-9));
  REQUIRE(rep.critical_delay == Catch::Approx(M_PI / 2.0 / (K * kc)).epsilon(1e-9));
  REQUIRE(rep.gain_margin == Catch::Approx(M_PI / (2.0 * tau * K * kc)).epsilon(1e-6));
  REQUIRE(rep.phase_margin ==
          Catch::Approx(90.0 - K * kc * tau * 180.0 / M_PI).epsilon(1e-6));

  DelayTF late = plant;
  late.delay = 0.6;  // beyond pi/2/(K kc) = 0.5236
  const auto rep2 = crossing_analysis(
      assemble_error_dynamics(late, g, RefKind::step, DelayAllocation::forward));
  REQUIRE(!rep2.stable);
  REQUIRE(rep2.critical_delay == Catch::Approx(rep.critical_delay).epsilon(1e-9));
  REQUIRE(rep2.gain_margin < 1.0);
}

TEST_CASE("large derivative gain destroys delay tolerance") {
  const DelayTF plant = soiptd(kRollK, kRollTp, kRollTq, kRollTau);
  const PdGains g{0.411, 1000.0, 0.0};
  const auto rep = crossing_analysis(
      assemble_error_dynamics(plant, g, RefKind::step, DelayAllocation::forward));
  REQUIRE(!rep.stable);
  REQUIRE(rep.critical_delay == Catch::Approx(4.51407010213e-6).epsilon(1e-6));
  REQUIRE(rep.gain_margin < 1.0);
}

TEST_CASE("delay-free-unstable loop reports zero critical delay") {
  const DelayTF plant{Poly{1.0}, Poly{0.0, 1.0}, 0.1};
  const PdGains g{-1.0, 0.0, 0.0};  // wrong feedback sign: char s - 1
  const auto rep = crossing_analysis(
      assemble_error_dynamics(plant, g, RefKind::step, DelayAllocation::forward));
  REQUIRE(!rep.stable);
  REQUIRE(rep.critical_delay == 0.0);
}

TEST_CASE("stability boundary brackets simulated behavior") {
  std::mt19937_64 rng(20240819);
  auto logu = [&](double a, double b) {
    std::uniform_real_distribution<double> u(std::log(a), std::log(b));
    return std::exp(u(rng));
  };
  int kept = 0, tried = 0;
  while (kept < 20 && tried < 500) {
    ++tried;
    const double Tp = logu(0.02, 0.12), Tq = logu(0.15, 0.8), Kp = logu(2, 60);
    const double kc = logu(0.05, 2.0), kd = logu(0.01, 0.5);
    const PdGains g{kc, kd, 0.0};
    // Any nonzero delay keeps A and C separate; the crossing boundary itself
    // does not depend on the form's own delay.
    const auto form = assemble_error_dynamics(soiptd(Kp, Tp, Tq, 1.0), g, RefKind::step,
                                              DelayAllocation::forward);
    StabilityReport rep;
    try {
      rep = crossing_analysis(form);
    } catch (...) {
      continue;
    }
    if (rep.critical_delay == 0.0 || !std::isfinite(rep.critical_delay)) continue;
    if (rep.critical_delay < 2e-3 || rep.critical_delay > 0.5) continue;
    const double period = 2.0 * M_PI / rep.crossing_freqs.front();
    ++kept;

    for (double f : {0.95, 1.05}) {
      const double tau = f * rep.critical_delay;
      const DelayTF plant = soiptd(Kp, Tp, Tq, tau);

      const auto delayed = crossing_analysis(
          assemble_error_dynamics(plant, g, RefKind::step, DelayAllocation::forward));
      REQUIRE(delayed.stable == (f < 1.0));

      SimOptions opt;
      opt.dt = std::min(1e-3, tau / 8.0);
      opt.t_final = std::min(90.0, std::max(25.0, 100.0 * period));
      opt.derivative = DerivativeMode::exact_pd;
      const SimTrace tr = simulate_closed_loop(plant, g, RefKind::step, opt);
      const auto& e = tr.channel("error");
      auto window_max = [&](double a, double b) {
        double m = 0.0;
        for (size_t i = static_cast<size_t>(a * e.size());
             i < static_cast<size_t>(b * e.size()); ++i)
          m = std::max(m, std::abs(e[i]));
        return m;
      };
      const double growth = window_max(0.9, 1.0) / std::max(window_max(0.4, 0.5), 1e-300);
      if (f < 1.0) {
        REQUIRE(!tr.diverged);
        REQUIRE(growth < 0.8);
      } else {
        REQUIRE((tr.diverged || growth > 1.5));
      }
    }
  }
  REQUIRE(kept == 20);
}

TEST_CASE("oscillation detector classifies synthetic envelopes") {
  const double dt = 1e-3;
  std::vector<double> t, flat, dec, grow;
  for (int k = 0; k <= 20000; ++k) {
    const double tk = k * dt;
    t.push_back(tk);
    flat.push_back(std::sin(10.0 * tk));
    dec.push_back(std::exp(-0.3 * tk) * std::sin(10.0 * tk));
    grow.push_back(std::exp(0.15 * tk) * std::sin(10.0 * tk));
  }
  REQUIRE(detect_sustained_oscillation(t, flat).verdict == OscillationVerdict::marginal);
  REQUIRE(detect_sustained_oscillation(t, flat).drift_per_period < 0.01);
  REQUIRE(detect_sustained_oscillation(t, dec).verdict == OscillationVerdict::decaying);
  REQUIRE(detect_sustained_oscillation(t, grow).verdict == OscillationVerdict::growing);
  REQUIRE(detect_sustained_oscillation(t, std::vector<double>(t.size(), 0.0)).verdict ==
          OscillationVerdict::decaying);
  REQUIRE(detect_sustained_oscillation(t, dec, true).verdict == OscillationVerdict::growing);
  const auto marg = detect_sustained_oscillation(t, flat);
  REQUIRE(marg.period == Catch::Approx(2.0 * M_PI / 10.0).epsilon(0.01));
}

TEST_CASE("gain-margin scaling is marginal at the margin") {
  const DelayTF plant = soiptd(kRollK, kRollTp, kRollTq, kRollTau);

  SimOptions opt;
  opt.t_final = 40.0;
  const auto at_margin = verify_marginal_stability(plant, kRollGains, kRollGm, opt);
  REQUIRE(at_margin.oscillation.marginal);
  REQUIRE(at_margin.oscillation.drift_per_period < 0.01);
  // The sustained ring sits at the phase-crossing frequency, not the
  // crossover: period 2 pi / 22.47.
  REQUIRE(at_margin.oscillation.period == Catch::Approx(0.27962).epsilon(0.02));

  const auto inside = verify_marginal_stability(plant, kRollGains, 0.5 * kRollGm, opt);
  REQUIRE(inside.oscillation.verdict == OscillationVerdict::decaying);
  REQUIRE(!inside.oscillation.marginal);

  const auto outside = verify_marginal_stability(plant, kRollGains, 1.05 * kRollGm, opt);
  REQUIRE(outside.oscillation.verdict == OscillationVerdict::growing);

  REQUIRE_THROWS_AS(verify_marginal_stability(plant, kRollGains, 0.0), std::invalid_argument);
}
