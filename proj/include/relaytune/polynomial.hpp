#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <initializer_list>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

namespace relaytune {

using cplx = std::complex<double>;

// Dense real polynomial in s, coefficients stored ascending:
// c[0] + c[1]*s + ... + c[n]*s^n.  The zero polynomial is {0}.
class Poly {
 public:
  Poly() : c_(1, 0.0) {}
  Poly(std::initializer_list<double> c) : c_(c) {
    if (c_.empty()) c_.assign(1, 0.0);
  }
  explicit Poly(std::vector<double> c) : c_(std::move(c)) {
    if (c_.empty()) c_.assign(1, 0.0);
  }

  static Poly one() { return Poly{1.0}; }
  static Poly var() { return Poly{0.0, 1.0}; }

  const std::vector<double>& coeffs() const { return c_; }
  double coeff(int k) const {
    return (k >= 0 && k < static_cast<int>(c_.size())) ? c_[k] : 0.0;
  }

  // Index of the highest exactly-nonzero coefficient; -1 for the zero polynomial.
  int degree() const {
    for (int k = static_cast<int>(c_.size()) - 1; k >= 0; --k)
      if (c_[k] != 0.0) return k;
    return -1;
  }

  double max_abs() const {
    double m = 0.0;
    for (double v : c_) m = std::max(m, std::abs(v));
    return m;
  }

  bool is_zero() const { return degree() < 0; }

  double operator()(double s) const {
    double acc = 0.0;
    for (int k = static_cast<int>(c_.size()) - 1; k >= 0; --k) acc = acc * s + c_[k];
    return acc;
  }
  cplx operator()(cplx s) const {
    cplx acc = 0.0;
    for (int k = static_cast<int>(c_.size()) - 1; k >= 0; --k) acc = acc * s + c_[k];
    return acc;
  }

  Poly derivative() const {
    if (c_.size() <= 1) return Poly();
    std::vector<double> d(c_.size() - 1);
    for (size_t k = 1; k < c_.size(); ++k) d[k - 1] = c_[k] * static_cast<double>(k);
    return Poly(std::move(d));
  }

  // p(-s): odd coefficients change sign.
  Poly reflected() const {
    std::vector<double> r = c_;
    for (size_t k = 1; k < r.size(); k += 2) r[k] = -r[k];
    return Poly(std::move(r));
  }

  Poly times_var(int k = 1) const {
    std::vector<double> r(c_.size() + k, 0.0);
    std::copy(c_.begin(), c_.end(), r.begin() + k);
    return Poly(std::move(r));
  }

  // Divide by s^k; the k lowest coefficients must vanish at the polynomial's scale.
  Poly divided_by_var(int k = 1, double rtol = 1e-9) const {
    const double tol = rtol * max_abs();
    for (int i = 0; i < k; ++i)
      if (std::abs(coeff(i)) > tol)
        throw std::invalid_argument("divided_by_var: nonzero low-order coefficient");
    if (static_cast<int>(c_.size()) <= k) return Poly();
    return Poly(std::vector<double>(c_.begin() + k, c_.end()));
  }

  // Drop leading coefficients below rtol * max_abs (cancellation dust).
  Poly trimmed(double rtol = 1e-12) const {
    const double tol = rtol * max_abs();
    int n = static_cast<int>(c_.size()) - 1;
    while (n > 0 && std::abs(c_[n]) <= tol) --n;
    return Poly(std::vector<double>(c_.begin(), c_.begin() + n + 1));
  }

  Poly& operator+=(const Poly& o) {
    if (o.c_.size() > c_.size()) c_.resize(o.c_.size(), 0.0);
    for (size_t k = 0; k < o.c_.size(); ++k) c_[k] += o.c_[k];
    return *this;
  }
  Poly& operator-=(const Poly& o) {
    if (o.c_.size() > c_.size()) c_.resize(o.c_.size(), 0.0);
    for (size_t k = 0; k < o.c_.size(); ++k) c_[k] -= o.c_[k];
    return *this;
  }
  Poly& operator*=(double a) {
    for (double& v : c_) v *= a;
    return *this;
  }

  friend Poly operator+(Poly a, const Poly& b) { return a += b; }
  friend Poly operator-(Poly a, const Poly& b) { return a -= b; }
  friend Poly operator*(Poly a, double k) { return a *= k; }
  friend Poly operator*(double k, Poly a) { return a *= k; }
  friend Poly operator-(const Poly& a) { return a * -1.0; }

  friend Poly operator*(const Poly& a, const Poly& b) {
    if (a.is_zero() || b.is_zero()) return Poly();
    std::vector<double> r(a.c_.size() + b.c_.size() - 1, 0.0);
    for (size_t i = 0; i < a.c_.size(); ++i)
      for (size_t j = 0; j < b.c_.size(); ++j) r[i + j] += a.c_[i] * b.c_[j];
    return Poly(std::move(r));
  }

  // All complex roots via the balanced companion matrix.  Leading cancellation
  // dust is trimmed first so the companion dimension matches the true degree.
  std::vector<cplx> roots(double trim_rtol = 1e-12) const;

 private:
  std::vector<double> c_;
};

namespace detail {

// Parlett-Reinsch balancing (radix 2): similarity-scale rows/columns until
// row and column norms are comparable, improving eigenvalue conditioning.
inline void balance_in_place(Eigen::MatrixXd& a) {
  const int n = static_cast<int>(a.rows());
  bool again = true;
  while (again) {
    again = false;
    for (int i = 0; i < n; ++i) {
      double c = 0.0, r = 0.0;
      for (int j = 0; j < n; ++j) {
        if (j == i) continue;
        c += std::abs(a(j, i));
        r += std::abs(a(i, j));
      }
      if (c == 0.0 || r == 0.0) continue;
      double f = 1.0;
      const double s = c + r;
      while (c < r / 2.0) { c *= 2.0; r /= 2.0; f *= 2.0; }
      while (c >= r * 2.0) { c /= 2.0; r *= 2.0; f /= 2.0; }
      if (f != 1.0 && (c + r) < 0.95 * s) {
        again = true;
        for (int j = 0; j < n; ++j) a(i, j) /= f;
        for (int j = 0; j < n; ++j) a(j, i) *= f;
      }
    }
  }
}

}  // namespace detail

inline std::vector<cplx> Poly::roots(double trim_rtol) const {
  const Poly p = trimmed(trim_rtol);
  const int n = p.degree();
  if (n < 0) throw std::invalid_argument("roots: zero polynomial");
  if (n == 0) return {};
  const double lead = p.coeff(n);
  Eigen::MatrixXd comp = Eigen::MatrixXd::Zero(n, n);
  for (int i = 1; i < n; ++i) comp(i, i - 1) = 1.0;
  for (int i = 0; i < n; ++i) comp(i, n - 1) = -p.coeff(i) / lead;
  detail::balance_in_place(comp);
  Eigen::EigenSolver<Eigen::MatrixXd> es(comp, /*computeEigenvectors=*/false);
  if (es.info() != Eigen::Success)
    throw std::runtime_error("roots: eigenvalue iteration failed");
  std::vector<cplx> out(n);
  for (int i = 0; i < n; ++i) out[i] = es.eigenvalues()(i);
  std::sort(out.begin(), out.end(), [](const cplx& x, const cplx& y) {
    if (x.real() != y.real()) return x.real() < y.real();
    return x.imag() < y.imag();
  });
  return out;
}

// Smallest pairwise root separation relative to max(1, |root|); the partial
// fraction expansions used by the cost module require simple poles.
inline double min_relative_root_gap(const std::vector<cplx>& r) {
  double g = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < r.size(); ++i)
    for (size_t j = i + 1; j < r.size(); ++j) {
      const double scale = std::max({1.0, std::abs(r[i]), std::abs(r[j])});
      g = std::min(g, std::abs(r[i] - r[j]) / scale);
    }
  return g;
}

}  // namespace relaytune
