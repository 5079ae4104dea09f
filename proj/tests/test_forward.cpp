#include "vpscat/forward.hpp"
#include "vpscat/profiles.hpp"

#include "oracles.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace vpscat;

namespace {

struct ForwardSetup {
  GaussianProfile prof;
  Ensemble data;
  ForwardConfig cfg;
  TimeGrid grid;

  explicit ForwardSetup(double eps, bool coupled = true, int n_axis = 4, double extent = 2.5,
                        int per_octave = 4, double s_min = std::pow(2.0, -8))
      : prof(eps) {
    GridSpec g;
    for (int a = 0; a < 6; ++a) {
      g.lo[a] = -extent;
      g.hi[a] = extent;
      g.n[a] = n_axis;
    }
    const GaussianProfile& pr = prof;
    data = sample_profile([&pr](const Vec3& a, const Vec3& b) { return pr.value(a, b); },
                          Chart::inverted, 1.0, -1.0, g, 1e-8);
    cfg.integ.field.softening = 0.5 * (2 * extent / n_axis);
    cfg.integ.coupling = coupled ? 1.0 : 0.0;
    cfg.integ.substeps = 1;
    cfg.probes.spatial_n = 5;
    cfg.probes.spatial_extent = 2.5;
    cfg.probes.phase_n = 2;
    cfg.probes.phase_extent = 1.5;
    cfg.probes.seed = 17;
    cfg.s_min = s_min;
    grid = TimeGrid::geometric(1.0, s_min, per_octave);
  }

  ForwardRun run() {
    Ensemble e = data;
    const GaussianProfile& pr = prof;
    return run_forward(
        e, grid, cfg, [&pr](const Vec3& q, const Vec3& p) { return pr.value(q, p); },
        [&pr](const Vec3& q, const Vec3& p) { return pr.gradient(q, p); });
  }
};

}  // namespace

TEST_CASE("free streaming: probes track the free-flow field, nu is s-independent") {
  ForwardSetup setup(0.3, /*coupled=*/false);
  ForwardRun run = setup.run();

  // the probe fields follow the drifting cloud's direct sum exactly: compare
  // against an independently drifted ensemble at a middle node
  const size_t mid = run.node_s.size() / 2;
  const double s = run.node_s[mid];
  Ensemble drifted = setup.data;
  for (Sample& smp : drifted.samples)
    smp.current.position += (s - 1.0) * smp.current.momentum;
  const FieldSources src = build_sources(drifted);
  FieldConfig fc = setup.cfg.integ.field;
  fc.softening *= s;
  for (size_t i = 0; i < run.spatial_probes.size(); ++i) {
    const Vec3 want = eval_E_point(src, run.spatial_probes[i], fc);
    CHECK((run.probe_E[mid][i] - want).norm() < 1e-12 * std::max(1.0, want.norm()));
  }

  // E0 extraction: free-flow dyadic differences decay at slope ~1
  const E0Extract ext = extract_E0(run);
  CHECK(ext.cauchy_ok);
  CHECK(ext.rate_slope > 0.9);

  // limit profile: exact s-independence with coupling off
  const AsymptoticData lf = flow_limit_field(run);
  REQUIRE(lf.is_zero());
  const LimitProfileExtract lp = extract_limit_profile(run, lf);
  for (const auto& [s_lvl, diff] : lp.certificate) CHECK(diff < 1e-10);
  // gamma0(q,p) = gamma1(q+p, p)
  for (size_t i = 0; i < lp.probes.size(); ++i) {
    const auto& [q, p] = lp.probes[i];
    const double s_last = run.node_s.back();
    // nu at s_min equals the free shift evaluated at q + p s_min drift foot
    const double want = setup.prof.value(q + (1.0 - s_last) * p + (s_last - 1.0) * p + p, p);
    CHECK(lp.gamma0[i] == Catch::Approx(setup.prof.value(q + p, p)).margin(1e-12));
    (void)want;
  }
  // norm exponents all ~0
  const NormExponents ne = fit_norm_exponents(run);
  CHECK(std::abs(ne.moment_exponent) < 0.05);
  CHECK(std::abs(ne.gradient_exponent) < 0.05);

  // L2 timeline exactly constant in the sample representation
  for (const NormRow& r : run.norms) CHECK(r.l2 == Catch::Approx(run.norms.front().l2).epsilon(1e-12));
}

TEST_CASE("small-data run: certificates, rate, charge, norm growth") {
  ForwardSetup setup(0.05);
  ForwardRun run = setup.run();
  CHECK_FALSE(run.smallness_warning);

  const E0Extract ext = extract_E0(run);
  CHECK(ext.cauchy_ok);
  REQUIRE(ext.dyadic.size() >= 4);
  INFO("rate slope " << ext.rate_slope);
  CHECK(ext.rate_slope >= 0.9);

  const AsymptoticData lf = flow_limit_field(run);
  const LimitProfileExtract lp = extract_limit_profile(run, lf);
  CHECK(lp.ok);
  CHECK(std::abs(lp.charge_ratio - 1.0) < 1e-3);

  const NormExponents ne = fit_norm_exponents(run);
  INFO("moment exp " << ne.moment_exponent << " gradient exp " << ne.gradient_exponent);
  CHECK(ne.moment_ok);
  CHECK(ne.gradient_ok);

  // L2 and charge invariance along the flow
  for (const NormRow& r : run.norms) {
    CHECK(std::abs(r.l2 - run.norms.front().l2) < 1e-10 * run.norms.front().l2);
  }
  CHECK(std::abs(run.state.recompute_charge() - run.state.total_charge) <
        1e-10 * run.state.total_charge);
}

TEST_CASE("field homogeneity at the data node and epsilon scaling of E0") {
  ForwardSetup a(0.06), b(0.03);
  ForwardRun ra = a.run(), rb = b.run();
  // doubling eps quadruples the field at the initial node exactly (same
  // positions there)
  for (size_t i = 0; i < ra.probe_E[0].size(); ++i) {
    const Vec3 e4 = 4.0 * rb.probe_E[0][i];
    CHECK((ra.probe_E[0][i] - e4).norm() <= 1e-12 * e4.norm());
  }
  // extracted E0 scales by ~4 within 5%
  const E0Extract xa = extract_E0(ra), xb = extract_E0(rb);
  double worst = 0.0;
  for (size_t i = 0; i < xa.E0.size(); ++i) {
    if (xb.E0[i].norm() < 1e-9 * 0.0009) continue;
    worst = std::max(worst, (xa.E0[i] - 4.0 * xb.E0[i]).norm() / (4.0 * xb.E0[i]).norm());
  }
  INFO("eps-scaling sup deviation " << worst);
  CHECK(worst < 0.05);
}

TEST_CASE("gauge transform: identity at s=1, reduces to gamma with coupling off") {
  ForwardSetup setup(0.05);
  ForwardRun run = setup.run();
  std::vector<std::pair<Vec3, Vec3>> pts{{Vec3(0.3, -0.2, 0.5), Vec3(0.4, 0.1, 0)},
                                         {Vec3(-0.5, 0.2, 0.1), Vec3(0, -0.3, 0.2)}};
  const auto at_one = gauge_transform(run, 1.0, pts);
  for (size_t i = 0; i < pts.size(); ++i)
    CHECK(at_one[i] == Catch::Approx(setup.prof.value(pts[i].first, pts[i].second)).margin(1e-12));

  ForwardSetup off(0.3, false);
  ForwardRun run_off = off.run();
  const double s = run_off.node_s[run_off.node_s.size() / 2];
  const auto g = gauge_transform(run_off, s, pts);
  for (size_t i = 0; i < pts.size(); ++i) {
    const double want = off.prof.value(pts[i].first - (s - 1.0) * pts[i].second, pts[i].second);
    CHECK(g[i] == Catch::Approx(want).margin(1e-12));
  }

  // trapezoid self-convergence: doubled node density changes Gamma by < 1e-4
  ForwardSetup fine(0.05, true, 4, 2.5, 8);
  ForwardRun run_fine = fine.run();
  const double sq = 0.25;
  const auto g1 = gauge_transform(run, sq, pts);
  const auto g2 = gauge_transform(run_fine, sq, pts);
  for (size_t i = 0; i < pts.size(); ++i) CHECK(std::abs(g1[i] - g2[i]) < 1e-4);
}

TEST_CASE("extraction failure surfaces as a certificate error") {
  // a run stopped far from the limit with too few nodes cannot certify
  ForwardSetup setup(0.05, true, 3, 2.0, 4, 0.5);
  ForwardRun run = setup.run();
  CHECK_THROWS_AS(extract_E0(run), CertificateFailure);
}
