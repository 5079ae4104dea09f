// Small shared numerics: fixed-size linear algebra aliases, compensated
// accumulation, log-log rate fits, and a config hash used for report
// provenance.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace vpscat {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;

inline constexpr double kFourPi = 4.0 * 3.14159265358979323846;
inline constexpr double kPi = 3.14159265358979323846;

// <z> = sqrt(1+|z|^2)
inline double japanese_bracket(const Vec3& z) { return std::sqrt(1.0 + z.squaredNorm()); }
inline double japanese_bracket(double x) { return std::sqrt(1.0 + x * x); }

// Errors that map to CLI exit codes.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CertificateFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericalGuard : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Collects the first exception thrown inside a parallel region so it can be
// rethrown after the loop (exceptions must not escape an OpenMP region).
class ParallelErrors {
 public:
  template <class F>
  void guard(F&& body) {
    try {
      body();
    } catch (const std::exception& ex) {
#pragma omp critical(vpscat_parallel_errors)
      if (!failed_) {
        failed_ = true;
        message_ = ex.what();
      }
    }
  }
  void rethrow() const {
    if (failed_) throw NumericalGuard(message_);
  }

 private:
  bool failed_ = false;
  std::string message_;
};

// Neumaier-compensated accumulator. Summation order is fixed by the caller;
// together with per-target sequential reduction this makes field sums
// bit-reproducible across thread counts.
class KahanSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x))
      comp_ += (sum_ - t) + x;
    else
      comp_ += (x - t) + sum_;
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

struct LineFit {
  double slope = 0.0;
  double intercept = 0.0;
  int n = 0;
};

// Least-squares line through (x_i, y_i).
inline LineFit fit_line(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size() || xs.size() < 2) throw std::invalid_argument("fit_line: need >= 2 points");
  LineFit f;
  f.n = static_cast<int>(xs.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (size_t i = 0; i < xs.size(); ++i) {
    sx += xs[i];
    sy += ys[i];
    sxx += xs[i] * xs[i];
    sxy += xs[i] * ys[i];
  }
  const double n = static_cast<double>(f.n);
  const double den = n * sxx - sx * sx;
  if (den == 0.0) throw std::invalid_argument("fit_line: degenerate abscissae");
  f.slope = (n * sxy - sx * sy) / den;
  f.intercept = (sy - f.slope * sx) / n;
  return f;
}

// Slope of log(y) against log(x); pairs with y <= 0 are rejected.
inline double loglog_slope(const std::vector<double>& xs, const std::vector<double>& ys) {
  std::vector<double> lx, ly;
  lx.reserve(xs.size());
  ly.reserve(ys.size());
  for (size_t i = 0; i < xs.size(); ++i) {
    if (xs[i] <= 0.0 || ys[i] <= 0.0) continue;
    lx.push_back(std::log(xs[i]));
    ly.push_back(std::log(ys[i]));
  }
  return fit_line(lx, ly).slope;
}

// FNV-1a, used to stamp reports with the configuration they came from.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace vpscat
