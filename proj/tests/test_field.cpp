#include "vpscat/asymptotic.hpp"
#include "vpscat/field.hpp"
#include "vpscat/profiles.hpp"

#include "oracles.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>

using namespace vpscat;

namespace {

FieldSources gaussian_cloud(double amp, int n, double extent, bool with_momenta = false,
                            unsigned seed = 7) {
  // spatial density amp * exp(-|x|^2) on an n^3 cell-centered grid
  FieldSources src;
  src.reserve(static_cast<size_t>(n) * n * n, with_momenta);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  const double h = 2 * extent / n;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) {
        const Vec3 x(-extent + (i + 0.5) * h, -extent + (j + 0.5) * h, -extent + (k + 0.5) * h);
        const double c = amp * std::exp(-x.squaredNorm()) * h * h * h;
        if (with_momenta) src.push(x, Vec3(nd(rng), nd(rng), nd(rng)), c);
        else src.push(x, c);
      }
  return src;
}

}  // namespace

TEST_CASE("Coulomb kernel: single unit charge") {
  FieldSources src;
  src.push(Vec3::Zero(), 1.0);
  FieldConfig cfg;
  cfg.softening = 0.0;
  for (double r : {0.5, 1.0, 2.0, 7.0}) {
    const Vec3 E = eval_E_point(src, Vec3(r, 0, 0), cfg);
    CHECK(E.x() == Catch::Approx(1.0 / (kFourPi * r * r)).epsilon(1e-14));
    CHECK(E.y() == 0.0);
    CHECK(E.z() == 0.0);
  }
  // gradient against finite differences
  Vec3 E;
  Mat3 G;
  eval_E_grad_point(src, Vec3(1.2, -0.3, 0.4), cfg, E, G);
  const double h = 1e-6;
  for (int a = 0; a < 3; ++a) {
    Vec3 xp(1.2, -0.3, 0.4), xm = xp;
    xp[a] += h;
    xm[a] -= h;
    const Vec3 d = (eval_E_point(src, xp, cfg) - eval_E_point(src, xm, cfg)) / (2 * h);
    for (int b = 0; b < 3; ++b) CHECK(G(a, b) == Catch::Approx(d[b]).margin(1e-8));
  }
}

TEST_CASE("two equal charges cancel at the midpoint") {
  FieldSources src;
  src.push(Vec3(1, 0, 0), 3.0);
  src.push(Vec3(-1, 0, 0), 3.0);
  FieldConfig cfg;
  const Vec3 E = eval_E_point(src, Vec3::Zero(), cfg);
  CHECK(E.norm() == Catch::Approx(0.0).margin(1e-16));
}

TEST_CASE("singular kernel rejected at zero softening") {
  FieldSources src;
  src.push(Vec3(1, 1, 1), 1.0);
  FieldConfig cfg;
  cfg.softening = 0.0;
  CHECK_THROWS_AS(eval_E_point(src, Vec3(1, 1, 1), cfg), NumericalGuard);
  cfg.softening = 0.1;
  CHECK_NOTHROW(eval_E_point(src, Vec3(1, 1, 1), cfg));
}

TEST_CASE("radial Gaussian cloud matches the enclosed-charge oracle") {
  const double amp = 0.8;
  const int n = 64;
  const double extent = 3.0;
  const FieldSources src = gaussian_cloud(amp, n, extent);
  FieldConfig cfg;
  cfg.softening = 0.5 * (2 * extent / n);
  const auto rho = [&](double r) { return amp * std::exp(-r * r); };
  for (double r : {1.0, 1.5, 2.0, 3.0}) {
    const Vec3 E = eval_E_point(src, Vec3(r, 0, 0), cfg);
    const double oracle = oracles::radial_field(rho, r);
    CHECK(std::abs(E.x() - oracle) / oracle < 1e-2);
    CHECK(std::abs(E.y()) < 1e-3 * oracle);
  }
}

TEST_CASE("pair antisymmetry: charge-weighted self force cancels") {
  const FieldSources src = gaussian_cloud(0.5, 12, 3.0);
  FieldConfig cfg;
  cfg.softening = 0.05;
  cfg.exclude_self = true;
  std::vector<Vec3> targets(src.size());
  for (size_t i = 0; i < src.size(); ++i) targets[i] = Vec3(src.x[i], src.y[i], src.z[i]);
  const auto E = evaluate_E_paired(src, targets, cfg);
  KahanSum fx, fy, fz;
  double mag = 0.0;
  for (size_t i = 0; i < src.size(); ++i) {
    fx.add(src.charge[i] * E[i].x());
    fy.add(src.charge[i] * E[i].y());
    fz.add(src.charge[i] * E[i].z());
    mag += src.charge[i] * E[i].norm();
  }
  const double total = Vec3(fx.value(), fy.value(), fz.value()).norm();
  CHECK(total < 1e-10 * mag);
}

TEST_CASE("field homogeneity: scaling charges by 4 scales E by 4 bitwise") {
  FieldSources src = gaussian_cloud(0.5, 8, 3.0);
  FieldSources src4 = src;
  for (double& c : src4.charge) c *= 4.0;
  FieldConfig cfg;
  cfg.softening = 0.1;
  const Vec3 t(0.7, -0.2, 1.1);
  const Vec3 E1 = eval_E_point(src, t, cfg);
  const Vec3 E4 = eval_E_point(src4, t, cfg);
  CHECK(E4.x() == 4.0 * E1.x());
  CHECK(E4.y() == 4.0 * E1.y());
  CHECK(E4.z() == 4.0 * E1.z());
}

TEST_CASE("determinism: repeated evaluation is bitwise identical") {
  const FieldSources src = gaussian_cloud(0.9, 16, 3.0);
  FieldConfig cfg;
  cfg.softening = 0.05;
  std::vector<Vec3> targets;
  for (int i = 0; i < 40; ++i) targets.emplace_back(0.1 * i - 2.0, 0.05 * i, -0.07 * i + 1.0);
  const auto a = evaluate_E(src, targets, cfg);
  const auto b = evaluate_E(src, targets, cfg);
  for (size_t i = 0; i < targets.size(); ++i) {
    CHECK(a[i].x() == b[i].x());
    CHECK(a[i].y() == b[i].y());
    CHECK(a[i].z() == b[i].z());
  }
}

TEST_CASE("current density: zero momenta, single beam, cancelling beams") {
  CurrentConfig cc;
  cc.width = 0.3;
  {
    FieldSources src = gaussian_cloud(0.5, 6, 2.0, true);
    for (size_t k = 0; k < src.size(); ++k) src.px[k] = src.py[k] = src.pz[k] = 0.0;
    const Vec3 j = current_density_point(src, Vec3(0.2, 0, 0), cc);
    CHECK(j.norm() == 0.0);
  }
  {
    FieldSources src;
    src.push(Vec3::Zero(), Vec3(1, 0, 0), 2.0);
    for (const Vec3& t : {Vec3(0.5, 0.1, 0), Vec3(-1, 0.3, 0.2), Vec3(0, 0, 1)}) {
      const Vec3 j = current_density_point(src, t, cc);
      CHECK(j.y() == 0.0);
      CHECK(j.z() == 0.0);
      CHECK(j.x() > 0.0);
    }
  }
  {
    FieldSources src;
    src.push(Vec3(0.3, 0, 0), Vec3(1, 2, 3), 1.0);
    src.push(Vec3(0.3, 0, 0), Vec3(-1, -2, -3), 1.0);
    const Vec3 j = current_density_point(src, Vec3(0.1, -0.2, 0.5), cc);
    CHECK(j.norm() == Catch::Approx(0.0).margin(1e-18));
  }
}

TEST_CASE("multiscale decomposition: locality, reconstruction, velocity partition") {
  FieldConfig cfg;
  cfg.softening = 0.0;
  {
    // single unit charge at distance d: only scales near d contribute
    FieldSources src;
    src.push(Vec3::Zero(), Vec3(0.2, 0, 0), 1.0);
    const double d = 1.7;
    const auto dec = ScaleDecomposition::make(0.05, 40.0, 60, 0.05, 2.0, 24);
    const auto res = multiscale_decompose(src, Vec3(d, 0, 0), dec, cfg);
    const double total = res.direct.norm();
    for (size_t i = 0; i < dec.scale_nodes.size(); ++i) {
      const double R = dec.scale_nodes[i];
      if (R < d / 4 || R > 4 * d) CHECK(res.E_R[i].norm() < 1e-6 * total);
    }
    CHECK(res.rel_error < 0.02);
  }
  {
    const FieldSources src = gaussian_cloud(0.7, 12, 3.0, true);
    // velocity grid spans [min|u|/2, 2 max|u|] so the partition covers all samples
    double vmin = 1e300, vmax = 0.0;
    for (size_t k = 0; k < src.size(); ++k) {
      const double u = Vec3(src.px[k], src.py[k], src.pz[k]).norm();
      vmin = std::min(vmin, u);
      vmax = std::max(vmax, u);
    }
    const auto dec = ScaleDecomposition::make(0.02, 30.0, 80, 0.45 * vmin, 2.2 * vmax, 96);
    const auto res = multiscale_decompose(src, Vec3(0.8, -0.4, 0.2), dec, cfg);
    CHECK(res.rel_error < 0.02);
    for (size_t i = 0; i < dec.scale_nodes.size(); ++i) {
      Vec3 sum = Vec3::Zero();
      for (size_t v = 0; v < dec.velocity_nodes.size(); ++v) sum += res.E_RV[i][v] * dec.dlog_V;
      const double ref = res.E_R[i].norm();
      if (ref > 1e-12) CHECK((sum - res.E_R[i]).norm() / ref < 1e-3);
    }
  }
  {
    // deliberately coarse scale grid trips the diagnostic
    FieldSources src;
    src.push(Vec3::Zero(), 1.0);
    const auto dec = ScaleDecomposition::make(0.05, 0.2, 3, 0.05, 2.0, 4);
    CHECK_THROWS_AS(multiscale_decompose(src, Vec3(5, 0, 0), dec, cfg), CertificateFailure);
  }
}

TEST_CASE("asymptotic field: point mass closed form and parity") {
  PointProfile pm(2.5, Vec3(0.3, 0, 0));
  const std::vector<Vec3> targets{Vec3(1.3, 0, 0), Vec3(0.3, 2, 0)};
  const auto res = asymptotic_field(pm, targets);
  CHECK(res.field[0].x() == Catch::Approx(2.5 / kFourPi).epsilon(1e-12));
  CHECK(res.field[0].y() == 0.0);
  CHECK(res.field[1].y() == Catch::Approx(2.5 / (kFourPi * 4.0)).epsilon(1e-12));

  // even marginal => field vanishes at the center
  GaussianProfile g(0.4);
  const auto r0 = asymptotic_field(g, {Vec3::Zero()}, 24);
  CHECK(r0.field[0].norm() < 1e-12);
}

TEST_CASE("asymptotic field: Gaussian marginal matches the radial oracle") {
  const double eps = 0.4;
  GaussianProfile g(eps);
  const double pref = eps * eps * std::pow(kPi, 1.5);
  const auto rho = [&](double r) { return pref * std::exp(-r * r); };
  std::vector<Vec3> targets;
  for (double r : {0.5, 1.0, 2.0, 3.0}) targets.emplace_back(r, 0, 0);
  const auto res = asymptotic_field(g, targets, 32);
  CHECK(res.converged);
  for (size_t i = 0; i < targets.size(); ++i) {
    const double oracle = oracles::radial_field(rho, targets[i].x());
    CHECK(std::abs(res.field[i].x() - oracle) / oracle < 1e-3);
  }
}

TEST_CASE("closed-form Gaussian asymptotic data agrees with quadrature and derivatives") {
  const double eps = 0.3;
  GaussianProfile g(eps);
  const AsymptoticData asym = AsymptoticData::from_profile(g);
  REQUIRE(asym.backend() == AsymptoticData::Backend::radial_gaussian);
  const double pref = eps * eps * std::pow(kPi, 1.5);
  const auto rho = [&](double r) { return pref * std::exp(-r * r); };
  for (double r : {1e-8, 0.05, 0.3, 0.8999, 0.9001, 1.5, 3.0, 8.0}) {
    const Vec3 E = asym.E0(Vec3(r, 0, 0));
    const double oracle = oracles::radial_field(rho, r, 8192);
    CHECK(E.x() == Catch::Approx(oracle).epsilon(1e-8));
  }
  // derivative consistency at a generic point
  const Vec3 v(0.4, -0.7, 0.2);
  const Mat3 G = asym.gradE0(v);
  const auto H = asym.hessE0(v);
  const double h = 1e-6;
  for (int a = 0; a < 3; ++a) {
    Vec3 vp = v, vm = v;
    vp[a] += h;
    vm[a] -= h;
    const Vec3 dE = (asym.E0(vp) - asym.E0(vm)) / (2 * h);
    const Mat3 dG = (asym.gradE0(vp) - asym.gradE0(vm)) / (2 * h);
    for (int b = 0; b < 3; ++b) {
      CHECK(G(a, b) == Catch::Approx(dE[b]).margin(1e-9));
      for (int c = 0; c < 3; ++c) CHECK(H[c](a, b) == Catch::Approx(dG(b, c)).margin(1e-7));
    }
  }
  // kernel-backed variant (bump profile) against the same oracle machinery
  BumpProfile bp(0.3, 2.0, 2.0);
  const AsymptoticData bump_asym = AsymptoticData::from_profile(bp, 40);
  const auto rho_b = [&](double r) { return bp.marginal_sq_second(Vec3(r, 0, 0)); };
  for (double r : {0.8, 1.5, 2.5}) {
    const double oracle = oracles::radial_field(rho_b, r);
    CHECK(std::abs(bump_asym.E0(Vec3(r, 0, 0)).x() - oracle) / oracle < 2e-2);
  }
}
