// Built-in asymptotic / initial profile families.
//
// A profile is a scalar function f(a,b) on R^3 x R^3. The kernel machinery
// only ever sees f through (i) pointwise values, (ii) the velocity-block
// marginal of f^2, and (iii) where available, a closed-form radial field of
// that marginal. The physically relevant density is f^2.
#pragma once

#include "vpscat/core.hpp"

#include <cmath>
#include <memory>
#include <string>

namespace vpscat {

class Profile {
 public:
  virtual ~Profile() = default;

  virtual double value(const Vec3& a, const Vec3& b) const = 0;
  // d/d(a,b) of value, stacked (a-block first).
  virtual Vec6 gradient(const Vec3& a, const Vec3& b) const = 0;
  // integral over the first block:  m(w) = ∫ value(y,w)^2 dy
  virtual double marginal_sq_second(const Vec3& w) const = 0;
  // box half-width outside which |value| is negligible, per block
  virtual double support_radius_a() const = 0;
  virtual double support_radius_b() const = 0;
  virtual std::string describe() const = 0;

  // Point concentrations cannot be sampled; they only feed closed-form field
  // tables.
  virtual bool is_point_mass() const { return false; }
  virtual double point_mass() const { return 0.0; }
  virtual Vec3 point_center() const { return Vec3::Zero(); }

  // True when the marginal of f^2 over the first block is a Gaussian
  // rho0 * exp(-|w-center|^2/sigma^2); enables closed-form fields.
  virtual bool gaussian_marginal(double&, double&, Vec3&) const { return false; }
};

using ProfilePtr = std::shared_ptr<const Profile>;

class ZeroProfile final : public Profile {
 public:
  double value(const Vec3&, const Vec3&) const override { return 0.0; }
  Vec6 gradient(const Vec3&, const Vec3&) const override { return Vec6::Zero(); }
  double marginal_sq_second(const Vec3&) const override { return 0.0; }
  double support_radius_a() const override { return 1.0; }
  double support_radius_b() const override { return 1.0; }
  std::string describe() const override { return "zero"; }
};

// f(a,b) = amp * exp(-|a-a0|^2/(2 wa^2) - |b-b0|^2/(2 wb^2))
class GaussianProfile final : public Profile {
 public:
  GaussianProfile(double amp, double width_a = 1.0, double width_b = 1.0,
                  Vec3 center_a = Vec3::Zero(), Vec3 center_b = Vec3::Zero())
      : amp_(amp), wa_(width_a), wb_(width_b), a0_(center_a), b0_(center_b) {
    if (!(wa_ > 0) || !(wb_ > 0)) throw std::invalid_argument("GaussianProfile: widths must be positive");
  }

  double value(const Vec3& a, const Vec3& b) const override {
    const double ra = (a - a0_).squaredNorm() / (2 * wa_ * wa_);
    const double rb = (b - b0_).squaredNorm() / (2 * wb_ * wb_);
    return amp_ * std::exp(-ra - rb);
  }
  Vec6 gradient(const Vec3& a, const Vec3& b) const override {
    const double v = value(a, b);
    Vec6 g;
    g.head<3>() = -(a - a0_) / (wa_ * wa_) * v;
    g.tail<3>() = -(b - b0_) / (wb_ * wb_) * v;
    return g;
  }
  double marginal_sq_second(const Vec3& w) const override {
    // ∫ amp^2 exp(-|y-a0|^2/wa^2) dy = amp^2 (pi wa^2)^{3/2}
    const double pref = amp_ * amp_ * std::pow(kPi * wa_ * wa_, 1.5);
    return pref * std::exp(-(w - b0_).squaredNorm() / (wb_ * wb_));
  }
  double support_radius_a() const override { return 4.5 * wa_; }
  double support_radius_b() const override { return 4.5 * wb_; }
  std::string describe() const override {
    return "gaussian(amp=" + std::to_string(amp_) + ",wa=" + std::to_string(wa_) +
           ",wb=" + std::to_string(wb_) + ")";
  }

  bool gaussian_marginal(double& rho0, double& sigma, Vec3& center) const override {
    rho0 = amp_ * amp_ * std::pow(kPi * wa_ * wa_, 1.5);
    sigma = wb_;
    center = b0_;
    return true;
  }

  double amplitude() const { return amp_; }
  double width_a() const { return wa_; }
  double width_b() const { return wb_; }
  Vec3 center_a() const { return a0_; }
  Vec3 center_b() const { return b0_; }

 private:
  double amp_, wa_, wb_;
  Vec3 a0_, b0_;
};

// Compactly supported bump  f(a,b) = amp * B(|a-a0|/ra) B(|b-b0|/rb),
// B(r) = exp(1 - 1/(1-r^2)) on [0,1), 0 outside.
class BumpProfile final : public Profile {
 public:
  BumpProfile(double amp, double radius_a = 2.0, double radius_b = 2.0,
              Vec3 center_a = Vec3::Zero(), Vec3 center_b = Vec3::Zero())
      : amp_(amp), ra_(radius_a), rb_(radius_b), a0_(center_a), b0_(center_b) {
    if (!(ra_ > 0) || !(rb_ > 0)) throw std::invalid_argument("BumpProfile: radii must be positive");
    ball_int_ = ball_integral_B2();
  }

  static double bump(double r) {
    if (r >= 1.0) return 0.0;
    return std::exp(1.0 - 1.0 / (1.0 - r * r));
  }
  static double bump_deriv(double r) {
    if (r >= 1.0) return 0.0;
    const double d = 1.0 - r * r;
    return bump(r) * (-2.0 * r / (d * d));
  }

  double value(const Vec3& a, const Vec3& b) const override {
    return amp_ * bump((a - a0_).norm() / ra_) * bump((b - b0_).norm() / rb_);
  }
  Vec6 gradient(const Vec3& a, const Vec3& b) const override {
    const Vec3 da = a - a0_, db = b - b0_;
    const double na = da.norm() / ra_, nb = db.norm() / rb_;
    const double Ba = bump(na), Bb = bump(nb);
    Vec6 g = Vec6::Zero();
    // radial derivative vanishes at the centers
    if (na > 1e-14 && na < 1.0) g.head<3>() = amp_ * bump_deriv(na) * Bb / (ra_ * da.norm()) * da;
    if (nb > 1e-14 && nb < 1.0) g.tail<3>() = amp_ * Ba * bump_deriv(nb) / (rb_ * db.norm()) * db;
    return g;
  }
  double marginal_sq_second(const Vec3& w) const override {
    const double nb = (w - b0_).norm() / rb_;
    const double Bb = bump(nb);
    return amp_ * amp_ * ra_ * ra_ * ra_ * ball_int_ * Bb * Bb;
  }
  double support_radius_a() const override { return ra_; }
  double support_radius_b() const override { return rb_; }
  std::string describe() const override {
    return "bump(amp=" + std::to_string(amp_) + ",ra=" + std::to_string(ra_) +
           ",rb=" + std::to_string(rb_) + ")";
  }

 private:
  // ∫_{|y|<1} B(|y|)^2 dy by Simpson, done once
  static double ball_integral_B2() {
    const int n = 4000;
    const double h = 1.0 / n;
    double acc = 0.0;
    for (int i = 0; i <= n; ++i) {
      const double r = i * h;
      const double f = r * r * bump(r) * bump(r);
      const double wgt = (i == 0 || i == n) ? 1.0 : (i % 2 ? 4.0 : 2.0);
      acc += wgt * f;
    }
    return kFourPi * acc * h / 3.0;
  }

  double amp_, ra_, rb_;
  Vec3 a0_, b0_;
  double ball_int_;
};

// All of f^2's mass concentrated at (a0, b0); total charge M.
class PointProfile final : public Profile {
 public:
  PointProfile(double mass, Vec3 center_b = Vec3::Zero(), Vec3 center_a = Vec3::Zero())
      : mass_(mass), a0_(center_a), b0_(center_b) {}

  double value(const Vec3&, const Vec3&) const override { return 0.0; }
  Vec6 gradient(const Vec3&, const Vec3&) const override { return Vec6::Zero(); }
  double marginal_sq_second(const Vec3&) const override { return 0.0; }
  double support_radius_a() const override { return 1.0; }
  double support_radius_b() const override { return 1.0; }
  std::string describe() const override { return "point(mass=" + std::to_string(mass_) + ")"; }

  bool is_point_mass() const override { return true; }
  double point_mass() const override { return mass_; }
  Vec3 point_center() const override { return b0_; }

 private:
  double mass_;
  Vec3 a0_, b0_;
};

// b |-> -b wrapper; used when feeding past-asymptotic data through the
// future-side machinery.
class ReflectedProfile final : public Profile {
 public:
  explicit ReflectedProfile(ProfilePtr base) : base_(std::move(base)) {}

  double value(const Vec3& a, const Vec3& b) const override { return base_->value(a, -b); }
  Vec6 gradient(const Vec3& a, const Vec3& b) const override {
    Vec6 g = base_->gradient(a, -b);
    g.tail<3>() = -g.tail<3>();
    return g;
  }
  double marginal_sq_second(const Vec3& w) const override { return base_->marginal_sq_second(-w); }
  double support_radius_a() const override { return base_->support_radius_a(); }
  double support_radius_b() const override { return base_->support_radius_b(); }
  std::string describe() const override { return "reflected(" + base_->describe() + ")"; }
  bool is_point_mass() const override { return base_->is_point_mass(); }
  double point_mass() const override { return base_->point_mass(); }
  Vec3 point_center() const override { return -base_->point_center(); }
  bool gaussian_marginal(double& rho0, double& sigma, Vec3& center) const override {
    if (!base_->gaussian_marginal(rho0, sigma, center)) return false;
    center = -center;
    return true;
  }

  ProfilePtr base() const { return base_; }

 private:
  ProfilePtr base_;
};

}  // namespace vpscat
