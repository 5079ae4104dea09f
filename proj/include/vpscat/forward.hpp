// Forward-scattering pipeline: integrate the inverted-chart system from
// s = 1 toward the singular time, monitor norms, extract the limit field and
// the limit profile in the asymptotic frame, and certify both with dyadic
// Cauchy differences.
#pragma once

#include "vpscat/asymptotic.hpp"
#include "vpscat/canonical.hpp"
#include "vpscat/diagnostics.hpp"
#include "vpscat/dynamics.hpp"
#include "vpscat/field.hpp"
#include "vpscat/phase_space.hpp"

#include <optional>
#include <random>
#include <vector>

namespace vpscat {

struct ProbeSpec {
  int spatial_n = 7;           // per axis, spatial probe lattice
  double spatial_extent = 3.0;
  int phase_n = 3;             // per axis, (q,p) probe lattice
  double phase_extent = 2.0;
  double jitter = 0.25;        // fraction of the lattice spacing
  std::uint64_t seed = 0;
};

inline std::vector<Vec3> spatial_probe_lattice(const ProbeSpec& ps) {
  std::mt19937_64 rng(ps.seed ^ 0x9e3779b97f4a7c15ull);
  std::uniform_real_distribution<double> u(-ps.jitter, ps.jitter);
  const int n = ps.spatial_n;
  const double h = (n > 1) ? 2.0 * ps.spatial_extent / (n - 1) : 0.0;
  std::vector<Vec3> out;
  out.reserve(static_cast<size_t>(n) * n * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) {
        Vec3 v(-ps.spatial_extent + i * h, -ps.spatial_extent + j * h, -ps.spatial_extent + k * h);
        v += h * Vec3(u(rng), u(rng), u(rng));
        out.push_back(v);
      }
  return out;
}

inline std::vector<std::pair<Vec3, Vec3>> phase_probe_lattice(const ProbeSpec& ps) {
  std::mt19937_64 rng(ps.seed ^ 0xc2b2ae3d27d4eb4full);
  std::uniform_real_distribution<double> u(-ps.jitter, ps.jitter);
  const int n = ps.phase_n;
  const double h = (n > 1) ? 2.0 * ps.phase_extent / (n - 1) : 0.0;
  std::vector<std::pair<Vec3, Vec3>> out;
  std::array<int, 6> ix{};
  for (ix[0] = 0; ix[0] < n; ++ix[0])
    for (ix[1] = 0; ix[1] < n; ++ix[1])
      for (ix[2] = 0; ix[2] < n; ++ix[2])
        for (ix[3] = 0; ix[3] < n; ++ix[3])
          for (ix[4] = 0; ix[4] < n; ++ix[4])
            for (ix[5] = 0; ix[5] < n; ++ix[5]) {
              auto coord = [&](int a) {
                return -ps.phase_extent + ix[a] * h + h * u(rng);
              };
              const Vec3 q(coord(0), coord(1), coord(2));
              const Vec3 p(coord(3), coord(4), coord(5));
              out.emplace_back(q, p);
            }
  return out;
}

struct ForwardConfig {
  double s_min = 0.0009765625;  // 2^-10
  int per_octave = 4;           // geometric nodes per factor of two
  IntegratorConfig integ;
  ProbeSpec probes;
  double eps0_warn = 0.5;   // data-norm smallness threshold (warn only)
  double cauchy_tol = -1.0; // <0: only monotonicity is enforced
};

struct ForwardRun {
  InvertedFlow flow;
  Ensemble state;  // at s_min
  std::vector<double> node_s;
  std::vector<Vec3> spatial_probes;
  std::vector<std::vector<Vec3>> probe_E;  // [node][probe]
  std::vector<ProbeChar> probe_chars;      // phase probes at s_min, tangents attached
  std::vector<NormRow> norms;
  double data_norm_l2 = 0.0, data_norm_m2 = 0.0, data_norm_grad = 0.0;
  bool smallness_warning = false;
  double lambda_eff = 0.0;
};

// Integrates gamma(s=1) = data down to s_min. `value` and `gradient` evaluate
// the initial profile at arbitrary label points; `gradient` may be empty, in
// which case probe characteristics must already carry grad0 (chained runs).
inline ForwardRun run_forward(Ensemble& e, const TimeGrid& grid, const ForwardConfig& cfg,
                              std::function<double(const Vec3&, const Vec3&)> value,
                              std::function<Vec6(const Vec3&, const Vec3&)> gradient = {},
                              std::vector<ProbeChar> chained_probes = {}) {
  if (e.chart != Chart::inverted) throw std::invalid_argument("run_forward: inverted chart required");
  ForwardRun run;
  run.lambda_eff = e.lambda * cfg.integ.coupling;
  run.spatial_probes = spatial_probe_lattice(cfg.probes);

  // data norms of the initial ensemble
  run.data_norm_l2 = std::sqrt(std::max(0.0, e.recompute_charge()));
  for (const Sample& s : e.samples) {
    const double pb = japanese_bracket(s.current.momentum);
    run.data_norm_m2 = std::max(run.data_norm_m2, pb * pb * std::abs(s.value));
  }

  if (chained_probes.empty()) {
    for (const auto& [q, p] : phase_probe_lattice(cfg.probes)) {
      ProbeChar pc = make_probe(q, p, value ? value(q, p) : 0.0);
      if (gradient) pc.grad0 = gradient(q, p);
      chained_probes.push_back(pc);
    }
  }
  for (const ProbeChar& pc : chained_probes)
    run.data_norm_grad = std::max(run.data_norm_grad, pc.current_gradient().norm());
  run.smallness_warning =
      (run.data_norm_l2 + run.data_norm_m2 + run.data_norm_grad) > cfg.eps0_warn;

  run.probe_chars = std::move(chained_probes);
  std::vector<ProbeChar>* probes = run.probe_chars.empty() ? nullptr : &run.probe_chars;

  const auto per_node = [&](int node, const Ensemble& ens) {
    NormRow row;
    row.s = ens.time;
    row.l2 = std::sqrt(std::max(0.0, ens.total_charge));
    for (const Sample& s : ens.samples) {
      const double av = std::abs(s.value);
      const double pb = japanese_bracket(s.current.momentum);
      row.m0 = std::max(row.m0, av);
      row.m1 = std::max(row.m1, pb * av);
      row.m2 = std::max(row.m2, pb * pb * av);
    }
    if (probes) {
      for (const ProbeChar& pc : *probes) {
        const Vec6 g = pc.current_gradient();
        row.dq = std::max(row.dq, g.head<3>().norm());
        row.dp = std::max(row.dp, g.tail<3>().norm());
      }
    }
    const FieldSources src = build_sources(ens);
    const FieldConfig fc = [&] {
      FieldConfig f = cfg.integ.field;
      if (cfg.integ.softening_scales_with_s) f.softening *= ens.time;
      return f;
    }();
    std::vector<Vec3> Ep(run.spatial_probes.size());
    ParallelErrors err;
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(run.spatial_probes.size()); ++i)
      err.guard([&, i] { Ep[i] = eval_E_point(src, run.spatial_probes[i], fc); });
    err.rethrow();
    for (const Vec3& v : Ep) row.esup = std::max(row.esup, v.norm());
    run.probe_E.push_back(std::move(Ep));
    run.norms.push_back(row);
    run.node_s.push_back(ens.time);
    (void)node;
  };

  run.flow = run_inverted_flow(e, probes, grid, cfg.integ, value, gradient, per_node);
  run.state = e;
  return run;
}

// --- limit field ------------------------------------------------------------

struct E0Extract {
  std::vector<Vec3> E0;  // at the spatial probes, read at s_min
  std::vector<std::pair<double, double>> dyadic;  // (s, sup |E(s) - E(s/2)|)
  double rate_slope = 0.0;  // log-log slope of sup |E(s) - E(s_min)| vs s
  bool cauchy_ok = true;
  int certified_pairs = 0;  // length of the decreasing tail
};

// The dyadic differences typically rise through the transient in which the
// cloud still rearranges and only then decay toward the limit; the Cauchy
// certificate requires a decreasing tail of at least `min_pairs` pairs.
inline E0Extract extract_E0(const ForwardRun& run, double cauchy_tol = -1.0, int min_pairs = 4) {
  E0Extract out;
  const size_t m = run.node_s.size();
  int below = 0;
  for (double s : run.node_s)
    if (s < 0.25 - 1e-12) ++below;
  if (below < 4) throw CertificateFailure("extract_E0: need at least 4 nodes below s = 0.25");
  out.E0 = run.probe_E.back();

  auto sup_diff = [&](size_t a, size_t b) {
    double d = 0.0;
    for (size_t i = 0; i < out.E0.size(); ++i)
      d = std::max(d, (run.probe_E[a][i] - run.probe_E[b][i]).norm());
    return d;
  };

  // dyadic pairs (s, s/2) present on the geometric grid
  for (size_t a = 0; a < m; ++a) {
    if (run.node_s[a] > 0.5 + 1e-12) continue;
    for (size_t b = 0; b < a; ++b) {
      if (std::abs(run.node_s[b] - 2.0 * run.node_s[a]) < 1e-9 * run.node_s[b]) {
        out.dyadic.emplace_back(run.node_s[b], sup_diff(b, a));
        break;
      }
    }
  }
  for (size_t i = out.dyadic.size(); i-- > 1;) {
    if (out.dyadic[i].second <= out.dyadic[i - 1].second * (1.0 + 1e-12)) ++out.certified_pairs;
    else break;
  }
  out.cauchy_ok = out.certified_pairs >= std::min<int>(min_pairs, static_cast<int>(out.dyadic.size()) - 1);
  if (cauchy_tol > 0.0 && !out.dyadic.empty() && out.dyadic.back().second > cauchy_tol)
    out.cauchy_ok = false;

  std::vector<double> xs, ys;
  for (size_t a = 0; a + 1 < m; ++a) {
    if (run.node_s[a] > 0.25 + 1e-12) continue;
    const double d = sup_diff(a, m - 1);
    if (d > 0) {
      xs.push_back(run.node_s[a]);
      ys.push_back(d);
    }
  }
  if (xs.size() >= 3) out.rate_slope = loglog_slope(xs, ys);
  if (!out.cauchy_ok)
    throw CertificateFailure("extract_E0: dyadic differences are not decreasing");
  return out;
}

// Asymptotic-frame data built from the flow: the limit field read at the
// last stored node with the kernel convention the dynamics used there (the
// scaled Plummer length at s_min), so the frame sees the same field the
// characteristics settled into.
inline AsymptoticData flow_limit_field(const ForwardRun& run) {
  if (run.lambda_eff == 0.0) return AsymptoticData::zero();
  const double delta = run.flow.field_at(run.flow.nodes.back()).softening;
  return AsymptoticData::kernel_grid(run.flow.node_sources.back(), delta);
}

// --- gauge transform --------------------------------------------------------
// Gamma(s,q,p) = gamma(s, q, p + lambda ∫_1^s E(s',q) ds'/s'), with the
// log-time integral taken by trapezoid over the stored nodes.

inline double gauge_momentum_shift(const ForwardRun& run, double s, const Vec3& q, Vec3* shift) {
  const auto& ns = run.node_s;
  Vec3 acc = Vec3::Zero();
  double covered = ns.front();
  Vec3 Eprev = flow_field_at(run.flow, 0, q);
  size_t j = 1;
  for (; j < ns.size() && ns[j] >= s - 1e-15; ++j) {
    const Vec3 Ecur = flow_field_at(run.flow, static_cast<int>(j), q);
    const double dtau = std::log(ns[j] / covered);
    acc += 0.5 * dtau * (Eprev + Ecur);
    Eprev = Ecur;
    covered = ns[j];
  }
  if (covered > s + 1e-15 && j < ns.size() + 1) {
    // partial tail to s using the last field value
    acc += std::log(s / covered) * Eprev;
    covered = s;
  }
  *shift = run.lambda_eff * acc;
  return covered;
}

inline std::vector<double> gauge_transform(const ForwardRun& run, double s,
                                           const std::vector<std::pair<Vec3, Vec3>>& points,
                                           std::vector<bool>* warnings = nullptr) {
  std::vector<double> out;
  out.reserve(points.size());
  if (warnings) warnings->assign(points.size(), false);
  for (size_t i = 0; i < points.size(); ++i) {
    Vec3 shift;
    gauge_momentum_shift(run, s, points[i].first, &shift);
    const SolutionEval ev =
        evaluate_solution(run.flow, s, points[i].first, points[i].second + shift);
    if (warnings && ev.extrapolated) (*warnings)[i] = true;
    out.push_back(ev.value);
  }
  return out;
}

// --- limit profile ----------------------------------------------------------

struct LimitProfileExtract {
  std::vector<std::pair<Vec3, Vec3>> probes;  // (q,p) lattice
  std::vector<double> gamma0;                 // nu at the smallest dyadic s
  std::vector<std::pair<double, double>> certificate;  // (s, sup |nu(s)-nu(s/2)|)
  bool ok = true;
  double charge_ratio = 1.0;  // transported charge vs data charge
};

// nu(s,q,p) = gamma(s, A_s(q,p)) with the frame built on the extracted field;
// certified by decreasing dyadic sup differences on the probe lattice.
inline LimitProfileExtract extract_limit_profile(const ForwardRun& run,
                                                 const AsymptoticData& limit_field,
                                                 int min_pairs = 4) {
  LimitProfileExtract out;
  for (const ProbeChar& pc : run.probe_chars) out.probes.emplace_back(pc.label_pos, pc.label_mom);
  if (out.probes.empty()) throw CertificateFailure("extract_limit_profile: no phase probes");

  // dyadic s values present on the grid
  std::vector<double> svals;
  for (double s : run.node_s)
    if (s <= 0.5 + 1e-12) {
      bool dy = false;
      for (double t : run.node_s)
        if (std::abs(t - 2 * s) < 1e-9 * t) dy = true;
      if (dy) svals.push_back(s);
    }
  if (static_cast<int>(svals.size()) < min_pairs)
    throw CertificateFailure("extract_limit_profile: too few dyadic levels");

  auto nu_at = [&](double s) {
    std::vector<double> vals(out.probes.size());
    ParallelErrors err;
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(out.probes.size()); ++i)
      err.guard([&, i] {
        const auto [q, p] = out.probes[i];
        const InvertedPoint ip = modified_frame(s, q, p, limit_field, run.lambda_eff);
        vals[i] = evaluate_solution(run.flow, s, ip.q, ip.p).value;
      });
    err.rethrow();
    return vals;
  };

  std::vector<double> prev = nu_at(2.0 * svals.front());
  for (double s : svals) {
    const std::vector<double> cur = nu_at(s);
    double d = 0.0;
    for (size_t i = 0; i < cur.size(); ++i) d = std::max(d, std::abs(cur[i] - prev[i]));
    out.certificate.emplace_back(s, d);
    prev = cur;
    if (s == svals.back()) out.gamma0 = cur;
  }
  // decreasing tail of at least min_pairs dyadic levels (rounding floor for
  // exactly-free runs whose differences sit at machine zero)
  int tail = 0;
  for (size_t i = out.certificate.size(); i-- > 1;) {
    if (out.certificate[i].second <= out.certificate[i - 1].second * (1.0 + 1e-12) ||
        out.certificate[i].second < 1e-14)
      ++tail;
    else
      break;
  }
  out.ok = tail >= std::min<int>(min_pairs, static_cast<int>(out.certificate.size()) - 1);

  // transported charge of the frame-pulled ensemble equals the data charge
  // exactly (weights and values are carried; the frame map is volume
  // preserving), recorded as a ratio for the report
  Ensemble pulled = run.state;
  const double s_last = run.node_s.back();
  for (Sample& smp : pulled.samples) {
    const InvertedPoint ip = modified_frame_inverse(s_last, smp.current.position,
                                                    smp.current.momentum, limit_field,
                                                    run.lambda_eff);
    smp.current.position = ip.q;
    smp.current.momentum = ip.p;
  }
  pulled.refresh_charge();
  out.charge_ratio = (run.state.total_charge != 0.0)
                         ? pulled.total_charge / run.state.total_charge
                         : 1.0;
  return out;
}

// Exponent fits for the norm timeline with the spec'd pass thresholds.
struct NormExponents {
  double moment_exponent = 0.0;    // <p>^2 sup norm vs <ln s>
  double gradient_exponent = 0.0;  // max of the two gradient norms vs <ln s>
  bool moment_ok = true, gradient_ok = true;
};

inline NormExponents fit_norm_exponents(const ForwardRun& run, double moment_cap = 2.5,
                                        double gradient_cap = 5.5) {
  NormExponents out;
  std::vector<double> s, m2, dg;
  for (const NormRow& r : run.norms) {
    s.push_back(r.s);
    m2.push_back(r.m2);
    dg.push_back(std::max(r.dq, r.dp));
  }
  out.moment_exponent = log_bracket_exponent(s, m2);
  out.gradient_exponent = log_bracket_exponent(s, dg);
  out.moment_ok = out.moment_exponent <= moment_cap;
  out.gradient_ok = out.gradient_exponent <= gradient_cap;
  return out;
}

}  // namespace vpscat
