// Asymptotic force-field data: evaluators for E0, its gradient and second
// derivatives, built either from closed radial forms (Gaussian / point
// marginals) or from a softened kernel sum over a sampled marginal grid.
//
// Radial fields are handled through E(x) = f(r) d, d = x - center, with
//   grad(a,b)    = dE_b/dx_a       = g d_a d_b + f delta_ab
//   hess[c](a,b) = d^2E_c/dx_adx_b = gp d_a d_b d_c
//                                    + g (delta_ab d_c + delta_ac d_b + delta_bc d_a)
// where g = f'/r and gp = g'/r; all three stay finite at r = 0.
#pragma once

#include "vpscat/core.hpp"
#include "vpscat/field.hpp"
#include "vpscat/phase_space.hpp"
#include "vpscat/profiles.hpp"

#include <array>
#include <cmath>
#include <memory>
#include <vector>

namespace vpscat {

namespace radial {

// For a Gaussian density rho0 exp(-r^2/sigma^2) the enclosed-charge field is
// f(r) = rho0 m3(r/sigma) with m3(u) = [pi^{3/2} erf(u) - 2 pi u e^{-u^2}]/(4 pi u^3).
// Series below keep f, g, gp stable through u = 0.
struct GaussianShape {
  // m3, n1 = m3'/u, n2 = (m3'' u - m3')/u^3
  static void eval(double u, double& m3, double& n1, double& n2) {
    if (u < 0.9) {
      // coeff_k = (-1)^k / (k! (2k+3)); the three series are
      //   m3 = sum_k coeff_k u^{2k}
      //   n1 = sum_{k>=1} coeff_k 2k u^{2k-2}
      //   n2 = sum_{k>=2} coeff_k 4k(k-1) u^{2k-4}
      m3 = n1 = n2 = 0.0;
      const double u2 = u * u;
      double fact = 1.0;
      double p_m3 = 1.0, p_n1 = 1.0, p_n2 = 1.0;
      for (int k = 0; k <= 24; ++k) {
        if (k > 0) fact *= k;
        const double coeff = ((k % 2) ? -1.0 : 1.0) / (fact * (2 * k + 3));
        m3 += coeff * p_m3;
        p_m3 *= u2;
        if (k >= 1) {
          n1 += coeff * 2.0 * k * p_n1;
          p_n1 *= u2;
        }
        if (k >= 2) {
          n2 += coeff * 4.0 * k * (k - 1) * p_n2;
          p_n2 *= u2;
        }
      }
      return;
    }
    const double sq = std::sqrt(kPi);
    const double eu = std::exp(-u * u);
    const double er = std::erf(u);
    const double u2 = u * u, u3 = u2 * u, u4 = u2 * u2;
    m3 = 0.25 * sq * er / u3 - 0.5 * eu / u2;
    n1 = eu * (u2 + 1.5) / u4 - 0.75 * sq * er / (u4 * u);
    n2 = -eu * (2 * u4 + 5 * u2 + 7.5) / (u4 * u2) + 3.75 * sq * er / (u4 * u3);
  }
};

}  // namespace radial

struct AsymNorms {
  double E0_sup = 0.0;
  double gradE0_sup = 0.0;  // max matrix max-norm over probes
  double hessE0_sup = 0.0;
  double thirdE0_sup = 0.0;  // central differences of the hessian
  double w3inf = 0.0;        // max of the above four
};

class AsymptoticData {
 public:
  enum class Backend { zero, uniform, linear, radial_gaussian, radial_point, kernel };

  AsymptoticData() = default;

  static AsymptoticData zero() {
    AsymptoticData d;
    d.backend_ = Backend::zero;
    return d;
  }

  // E0(v) = const; gradient and curvature vanish.
  static AsymptoticData uniform(const Vec3& value) {
    AsymptoticData d;
    d.backend_ = Backend::uniform;
    d.uniform_ = value;
    return d;
  }

  // E0(v) = M v with constant (symmetric) M: the field of a quadratic
  // potential, handy for algebraic checks.
  static AsymptoticData linear(const Mat3& M) {
    AsymptoticData d;
    d.backend_ = Backend::linear;
    d.linear_ = M;
    return d;
  }

  static AsymptoticData radial_gaussian(double rho0, double sigma, const Vec3& center) {
    AsymptoticData d;
    d.backend_ = Backend::radial_gaussian;
    d.rho0_ = rho0;
    d.sigma_ = sigma;
    d.center_ = center;
    return d;
  }

  static AsymptoticData radial_point(double mass, const Vec3& center) {
    AsymptoticData d;
    d.backend_ = Backend::radial_point;
    d.rho0_ = mass;
    d.center_ = center;
    return d;
  }

  static AsymptoticData kernel_grid(FieldSources src, double softening) {
    AsymptoticData d;
    d.backend_ = Backend::kernel;
    d.sources_ = std::make_shared<FieldSources>(std::move(src));
    d.kernel_cfg_.softening = softening;
    d.kernel_cfg_.exclude_self = false;
    return d;
  }

  // Chooses the backend from the profile: closed forms for Gaussian/point
  // marginals, a sampled marginal grid otherwise.
  static AsymptoticData from_profile(const Profile& prof, int marginal_grid_n = 48) {
    double rho0, sigma;
    Vec3 center;
    if (prof.gaussian_marginal(rho0, sigma, center)) {
      if (rho0 == 0.0) return zero();
      return radial_gaussian(rho0, sigma, center);
    }
    if (prof.is_point_mass()) return radial_point(prof.point_mass(), prof.point_center());
    const double L = prof.support_radius_b();
    FieldSources src;
    const int n = marginal_grid_n;
    const double h = 2.0 * L / n;
    src.reserve(static_cast<size_t>(n) * n * n, false);
    double total = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        for (int k = 0; k < n; ++k) {
          const Vec3 w(-L + (i + 0.5) * h, -L + (j + 0.5) * h, -L + (k + 0.5) * h);
          const double m = prof.marginal_sq_second(w);
          if (m != 0.0) {
            src.push(w, m * h * h * h);
            total += m * h * h * h;
          }
        }
    if (total == 0.0) return zero();
    return kernel_grid(std::move(src), 0.5 * h);
  }

  Backend backend() const { return backend_; }

  Vec3 E0(const Vec3& v) const {
    switch (backend_) {
      case Backend::zero: return Vec3::Zero();
      case Backend::uniform: return uniform_;
      case Backend::linear: return linear_ * v;
      case Backend::radial_gaussian: {
        double f, g, gp;
        shape(v, f, g, gp);
        return f * (v - center_);
      }
      case Backend::radial_point: {
        const Vec3 d = v - center_;
        const double r = d.norm();
        return rho0_ * d / (kFourPi * r * r * r);
      }
      case Backend::kernel: return eval_E_point(*sources_, v, kernel_cfg_);
    }
    return Vec3::Zero();
  }

  Mat3 gradE0(const Vec3& v) const {
    switch (backend_) {
      case Backend::zero: return Mat3::Zero();
      case Backend::uniform: return Mat3::Zero();
      case Backend::linear: return linear_.transpose();
      case Backend::radial_gaussian:
      case Backend::radial_point: {
        double f, g, gp;
        shape(v, f, g, gp);
        const Vec3 d = v - center_;
        return g * d * d.transpose() + f * Mat3::Identity();
      }
      case Backend::kernel: {
        Vec3 e;
        Mat3 gr;
        eval_E_grad_point(*sources_, v, kernel_cfg_, e, gr);
        return gr;
      }
    }
    return Mat3::Zero();
  }

  std::array<Mat3, 3> hessE0(const Vec3& v) const {
    std::array<Mat3, 3> h{Mat3::Zero(), Mat3::Zero(), Mat3::Zero()};
    switch (backend_) {
      case Backend::zero:
      case Backend::uniform:
      case Backend::linear: return h;
      case Backend::radial_gaussian:
      case Backend::radial_point: {
        double f, g, gp;
        shape(v, f, g, gp);
        const Vec3 d = v - center_;
        for (int c = 0; c < 3; ++c)
          for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) {
              double t = gp * d[a] * d[b] * d[c];
              if (a == b) t += g * d[c];
              if (a == c) t += g * d[b];
              if (b == c) t += g * d[a];
              h[c](a, b) = t;
            }
        return h;
      }
      case Backend::kernel: {
        Vec3 e;
        Mat3 gr;
        eval_E_hess_point(*sources_, v, kernel_cfg_, e, gr, h);
        return h;
      }
    }
    return h;
  }

  bool is_zero() const { return backend_ == Backend::zero; }

  // Probe-maximum estimate of the W^{3,inf} quantities over [-L,L]^3.
  AsymNorms estimate_norms(double L, int n = 9, double fd_h = 1e-3) const {
    AsymNorms out;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        for (int k = 0; k < n; ++k) {
          const Vec3 v(-L + (2.0 * L * i) / (n - 1), -L + (2.0 * L * j) / (n - 1),
                       -L + (2.0 * L * k) / (n - 1));
          out.E0_sup = std::max(out.E0_sup, E0(v).norm());
          out.gradE0_sup = std::max(out.gradE0_sup, gradE0(v).cwiseAbs().maxCoeff());
          const auto h = hessE0(v);
          double hmax = 0.0, tmax = 0.0;
          for (int c = 0; c < 3; ++c) hmax = std::max(hmax, h[c].cwiseAbs().maxCoeff());
          for (int a = 0; a < 3; ++a) {
            Vec3 vp = v, vm = v;
            vp[a] += fd_h;
            vm[a] -= fd_h;
            const auto hp = hessE0(vp), hm = hessE0(vm);
            for (int c = 0; c < 3; ++c)
              tmax = std::max(tmax, ((hp[c] - hm[c]) / (2 * fd_h)).cwiseAbs().maxCoeff());
          }
          out.hessE0_sup = std::max(out.hessE0_sup, hmax);
          out.thirdE0_sup = std::max(out.thirdE0_sup, tmax);
        }
    out.w3inf = std::max(std::max(out.E0_sup, out.gradE0_sup),
                         std::max(out.hessE0_sup, out.thirdE0_sup));
    return out;
  }

 private:
  void shape(const Vec3& v, double& f, double& g, double& gp) const {
    const Vec3 d = v - center_;
    const double r = d.norm();
    if (backend_ == Backend::radial_gaussian) {
      double m3, n1, n2;
      radial::GaussianShape::eval(r / sigma_, m3, n1, n2);
      f = rho0_ * m3;
      g = rho0_ / (sigma_ * sigma_) * n1;
      gp = rho0_ / (sigma_ * sigma_ * sigma_ * sigma_) * n2;
      return;
    }
    // point mass: f = M/(4 pi r^3), g = -3M/(4 pi r^5), gp = 15M/(4 pi r^7)
    if (r == 0.0) throw NumericalGuard("point-mass field evaluated at its center");
    const double r2 = r * r;
    f = rho0_ / (kFourPi * r * r2);
    g = -3.0 * f / r2;
    gp = 15.0 * f / (r2 * r2);
  }

  Backend backend_ = Backend::zero;
  double rho0_ = 0.0;
  double sigma_ = 1.0;
  Vec3 center_ = Vec3::Zero();
  Vec3 uniform_ = Vec3::Zero();
  Mat3 linear_ = Mat3::Zero();
  std::shared_ptr<FieldSources> sources_;
  FieldConfig kernel_cfg_;
};

}  // namespace vpscat
