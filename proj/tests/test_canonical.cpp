#include "vpscat/canonical.hpp"

#include "oracles.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>

using namespace vpscat;

TEST_CASE("canonical change at s=1 is the shear (q-p, p)") {
  const AsymptoticData asym = AsymptoticData::radial_gaussian(0.2, 1.0, Vec3::Zero());
  const Vec3 q(1.5, -0.3, 2.0), p(0.4, 0.8, -1.1);
  const CanonicalPoint c = to_canonical(1.0, q, p, asym, -1.0);
  CHECK(c.w.isApprox(q - p));
  CHECK(c.z == p);  // ln 1 = 0 kills the field term exactly
}

TEST_CASE("zero field reduces to the free shear at every s") {
  const AsymptoticData asym = AsymptoticData::zero();
  const Vec3 q(0.2, 0.9, -1.4), p(1.0, -0.5, 0.3);
  for (double s : {0.05, 0.3, 0.77, 1.0}) {
    const CanonicalPoint c = to_canonical(s, q, p, asym, 1.0);
    CHECK(c.w.isApprox(q - s * p));
    CHECK(c.z == p);
    const InvertedPoint ip = from_canonical(s, c.w, c.z, asym, 1.0);
    CHECK(ip.q.isApprox(q, 1e-14));
    CHECK(ip.p == p);
  }
}

TEST_CASE("round trip with a constant field is exact to 1e-14") {
  const AsymptoticData asym = AsymptoticData::uniform(Vec3(0.7, 0, 0));
  const double s = 0.5;
  const Vec3 q(1.0, 2.0, 3.0), p(-0.4, 0.1, 0.9);
  for (double lam : {-1.0, 1.0}) {
    const CanonicalPoint c = to_canonical(s, q, p, asym, lam);
    const InvertedPoint ip = from_canonical(s, c.w, c.z, asym, lam);
    CHECK((ip.q - q).norm() < 1e-14);
    CHECK((ip.p - p).norm() < 1e-14);
  }
}

TEST_CASE("round trip with the Gaussian field over s in (0,1]") {
  const AsymptoticData asym = AsymptoticData::radial_gaussian(0.5, 1.3, Vec3(0.2, -0.1, 0));
  std::mt19937_64 rng(4242);
  std::uniform_real_distribution<double> us(1e-3, 1.0), ux(-3.0, 3.0);
  double worst = 0.0;
  for (int i = 0; i < 500; ++i) {
    const double s = us(rng);
    const Vec3 q(ux(rng), ux(rng), ux(rng)), p(ux(rng), ux(rng), ux(rng));
    const double lam = (i % 2) ? 1.0 : -1.0;
    const CanonicalPoint c = to_canonical(s, q, p, asym, lam);
    const InvertedPoint ip = from_canonical(s, c.w, c.z, asym, lam);
    worst = std::max(worst, (ip.q - q).norm() + (ip.p - p).norm());
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("the E0 form of the transform matches the quadratic-potential form") {
  // phi0(w) = -w.M w/2 with symmetric M gives E0 = -grad phi0 = M w; the
  // transform written with E0 must agree with the generating-function form
  // written with grad phi0.
  Mat3 M;
  M << 0.3, 0.1, 0.0, 0.1, -0.2, 0.05, 0.0, 0.05, 0.4;
  const AsymptoticData asym = AsymptoticData::linear(M);
  const double s = 0.37, lam = -1.0;
  const Vec3 q(0.8, -1.2, 0.5), p(0.3, 0.2, -0.7);
  const CanonicalPoint c = to_canonical(s, q, p, asym, lam);
  const auto grad_phi0 = [&](const Vec3& w) { return Vec3(-(M * w)); };
  const Vec3 w_ref = q - s * p;
  const Vec3 z_ref = p + lam * std::log(s) * grad_phi0(q - s * p);
  CHECK(c.w.isApprox(w_ref, 1e-15));
  CHECK(c.z.isApprox(z_ref, 1e-15));
  const Vec3 q_ref = w_ref + s * c.z - lam * s * std::log(s) * grad_phi0(w_ref);
  CHECK(from_canonical(s, c.w, c.z, asym, lam).q.isApprox(q_ref, 1e-14));
}

TEST_CASE("jacobian blocks and unit determinant") {
  {
    const AsymptoticData z = AsymptoticData::zero();
    const Mat6 J = jacobian_canonical(0.4, Vec3(1, 1, 1), z, -1.0);
    CHECK(J.block<3, 3>(0, 0).isApprox(Mat3::Identity()));
    CHECK(J.block<3, 3>(0, 3).isApprox(-0.4 * Mat3::Identity()));
    CHECK(J.block<3, 3>(3, 0).norm() == 0.0);
    CHECK(J.determinant() == Catch::Approx(1.0).epsilon(1e-14));
  }
  {
    const AsymptoticData g = AsymptoticData::radial_gaussian(0.8, 1.0, Vec3::Zero());
    const Mat6 J = jacobian_canonical(1.0, Vec3(0.5, 0, 0), g, 1.0);
    CHECK(J.block<3, 3>(3, 0).norm() == 0.0);  // ln 1 = 0
    CHECK(J.block<3, 3>(3, 3).isApprox(Mat3::Identity()));
  }
  {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> um(-10.0, 10.0);
    double worst = 0.0;
    for (int i = 0; i < 200; ++i) {
      Mat3 M;
      for (int a = 0; a < 3; ++a)
        for (int b = a; b < 3; ++b) M(a, b) = M(b, a) = um(rng) / 3;
      const AsymptoticData lin = AsymptoticData::linear(M);
      std::uniform_real_distribution<double> us(1e-4, 1.0);
      const double s = us(rng);
      const Mat6 J = jacobian_canonical(s, Vec3(1, -2, 0.5), lin, (i % 2) ? 1.0 : -1.0);
      worst = std::max(worst, std::abs(J.determinant() - 1.0));
    }
    CHECK(worst < 1e-10);
  }
  // the analytic jacobian agrees with finite differences of the map
  {
    const AsymptoticData g = AsymptoticData::radial_gaussian(0.6, 0.9, Vec3(0.1, 0.2, -0.3));
    const double s = 0.3, lam = -1.0;
    const Vec3 q(0.7, -0.4, 1.1), p(0.2, 0.6, -0.5);
    const auto map = [&](const Vec6& y) {
      const CanonicalPoint c = to_canonical(s, y.head<3>(), y.tail<3>(), g, lam);
      Vec6 out;
      out << c.w, c.z;
      return out;
    };
    Vec6 at;
    at << q, p;
    const Mat6 Jfd = oracles::fd_jacobian(map, at);
    const CanonicalPoint c = to_canonical(s, q, p, g, lam);
    const Mat6 J = jacobian_canonical(s, c.w, g, lam);
    CHECK((J - Jfd).cwiseAbs().maxCoeff() < 1e-7);
  }
}

TEST_CASE("modified frame: worked examples and inverse") {
  const AsymptoticData zero = AsymptoticData::zero();
  const Vec3 q(0.3, 1.2, -0.8), p(0.9, -0.2, 0.1);
  {
    const AsymptoticData g = AsymptoticData::radial_gaussian(0.4, 1.0, Vec3::Zero());
    const InvertedPoint f = modified_frame(1.0, q, p, g, -1.0);
    CHECK(f.q.isApprox(q + p));
    CHECK(f.p == p);
  }
  {
    const InvertedPoint f = modified_frame(0.42, q, p, zero, 1.0);
    CHECK(f.q.isApprox(q + 0.42 * p));
    CHECK(f.p == p);
  }
  {
    const AsymptoticData u = AsymptoticData::uniform(Vec3(1, 0, 0));
    const double s = std::exp(-1.0);
    const InvertedPoint f = modified_frame(s, Vec3::Zero(), Vec3::Zero(), u, 1.0);
    CHECK(f.q.isApprox(Vec3(-s, 0, 0), 1e-14));
    CHECK(f.p.isApprox(Vec3(-1, 0, 0), 1e-14));
  }
  {
    const AsymptoticData g = AsymptoticData::radial_gaussian(0.7, 1.1, Vec3::Zero());
    const InvertedPoint f = modified_frame(0.2, q, p, g, -1.0);
    const InvertedPoint b = modified_frame_inverse(0.2, f.q, f.p, g, -1.0);
    CHECK(b.q.isApprox(q, 1e-13));
    CHECK(b.p.isApprox(p, 1e-13));
  }
}

TEST_CASE("position pushforward admits s = 0") {
  const AsymptoticData g = AsymptoticData::radial_gaussian(0.5, 1.0, Vec3::Zero());
  const Vec3 w(0.4, -0.6, 0.2), z(1.0, 0.5, -0.3);
  CHECK(position_from_canonical(0.0, w, z, g, -1.0) == w);
  // continuity: s log s -> 0
  const Vec3 near0 = position_from_canonical(1e-12, w, z, g, -1.0);
  CHECK((near0 - w).norm() < 1e-10);
  CHECK_THROWS_AS(to_canonical(0.0, w, z, g, 1.0), std::domain_error);
  CHECK_THROWS_AS(from_canonical(0.0, w, z, g, 1.0), std::domain_error);
  CHECK_THROWS_AS(jacobian_canonical(-0.1, w, g, 1.0), std::domain_error);
  CHECK_THROWS_AS(modified_frame(0.0, w, z, g, 1.0), std::domain_error);
}

TEST_CASE("canonical ensemble conversions carry charge exactly") {
  const AsymptoticData g = AsymptoticData::radial_gaussian(0.3, 1.0, Vec3::Zero());
  Ensemble e;
  e.chart = Chart::inverted;
  e.time = 0.5;
  e.lambda = -1.0;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> ux(-2.0, 2.0);
  for (int i = 0; i < 50; ++i) {
    Sample s;
    s.current.position = Vec3(ux(rng), ux(rng), ux(rng));
    s.current.momentum = Vec3(ux(rng), ux(rng), ux(rng));
    s.current.chart = Chart::inverted;
    s.current.time = 0.5;
    s.label = s.current;
    s.value = 0.1 + 0.01 * i;
    s.weight = 0.3;
    e.samples.push_back(s);
  }
  e.refresh_charge();
  const Ensemble c = inverted_to_canonical(e, 0.5, g, -1.0);
  CHECK(c.total_charge == e.total_charge);
  const Ensemble back = canonical_to_inverted(c, 0.5, g, -1.0);
  for (size_t i = 0; i < e.size(); ++i) {
    CHECK(back.samples[i].current.position.isApprox(e.samples[i].current.position, 1e-13));
    CHECK(back.samples[i].current.momentum.isApprox(e.samples[i].current.momentum, 1e-13));
  }
}
