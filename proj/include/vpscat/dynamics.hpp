// Time integrators for the three formulations and the machinery they share:
//
//   physical  (t):        x' = v,  v' = lambda E(t,x)
//   inverted  (s):        q' = p,  p' = lambda s^{-1} E(s,q)
//   canonical (s):        w' = -lambda E(s,q(s,w,z))
//                         z' =  lambda s^{-1}[E - E0(w)] + lambda^2 ln(s) dE0(w).E
//
// Physical and inverted steps are symmetric drift-kick-drift splittings; the
// inverted kick is taken in tau = ln s so the 1/s weight integrates exactly.
// Field sources are frozen once per node interval, which makes the inverted
// steps exactly reversible and lets stored flows replay characteristics
// backward without interpolation. The canonical chart uses explicit midpoint
// steps in tau; its singular first step out of s = 0 is a closed-form map
// derived from freezing the integrable bracket coefficients (see
// singular_start_step).
//
// Tangent maps (d current / d label) ride along on designated passive probe
// characteristics; probes never source the field.
#pragma once

#include "vpscat/asymptotic.hpp"
#include "vpscat/canonical.hpp"
#include "vpscat/core.hpp"
#include "vpscat/field.hpp"
#include "vpscat/phase_space.hpp"

#include <functional>
#include <optional>
#include <vector>

namespace vpscat {

struct TimeGrid {
  enum class Kind { uniform, geometric };
  Kind kind = Kind::geometric;
  std::vector<double> nodes;
  int substeps = 1;

  static TimeGrid uniform(double t0, double t1, int n_intervals, int substeps = 1) {
    TimeGrid g;
    g.kind = Kind::uniform;
    g.substeps = substeps;
    g.nodes.resize(n_intervals + 1);
    for (int i = 0; i <= n_intervals; ++i) g.nodes[i] = t0 + (t1 - t0) * i / n_intervals;
    g.substeps = substeps;
    return g;
  }

  // Geometric nodes from s_from to s_to with |per_octave| nodes per factor of
  // two; endpoints land exactly on powers of the ratio.
  static TimeGrid geometric(double s_from, double s_to, int per_octave, int substeps = 1) {
    if (!(s_from > 0) || !(s_to > 0)) throw std::invalid_argument("TimeGrid: s must be positive");
    TimeGrid g;
    g.kind = Kind::geometric;
    g.substeps = substeps;
    const double span = std::log2(s_to / s_from);
    const int n = std::max(1, static_cast<int>(std::lround(std::abs(span) * per_octave)));
    g.nodes.resize(n + 1);
    for (int i = 0; i <= n; ++i) g.nodes[i] = s_from * std::pow(s_to / s_from, double(i) / n);
    g.nodes.front() = s_from;
    g.nodes.back() = s_to;
    return g;
  }
};

struct IntegratorConfig {
  FieldConfig field;
  double coupling = 1.0;        // multiplies lambda; 0 switches forces off
  int substeps = 1;
  double singular_guard = 1e8;  // cap on |s^{-1}(E - E0)| in the canonical chart
  double trust_radius = -1.0;   // <0 disables extrapolation warnings
  // A physical Plummer length delta corresponds to delta * s in the inverted
  // spatial variable q = x/t; scaling keeps the softened systems in the two
  // charts exactly conjugate under the inversion.
  bool softening_scales_with_s = true;

  FieldConfig field_at(double s) const {
    FieldConfig f = field;
    if (softening_scales_with_s) f.softening *= s;
    return f;
  }
};

// Passive tangent-carrying characteristic. grad0 is the gradient of the
// transported value at the label point; the gradient at the current point is
// (J^-1)^T grad0.
struct ProbeChar {
  Vec3 pos = Vec3::Zero(), mom = Vec3::Zero();
  Vec3 label_pos = Vec3::Zero(), label_mom = Vec3::Zero();
  double value = 0.0;
  Vec6 grad0 = Vec6::Zero();
  Mat6 J = Mat6::Identity();

  Vec6 current_gradient() const { return J.inverse().transpose() * grad0; }
};

inline ProbeChar make_probe(const Vec3& pos, const Vec3& mom, double value = 0.0) {
  ProbeChar p;
  p.pos = p.label_pos = pos;
  p.mom = p.label_mom = mom;
  p.value = value;
  return p;
}

namespace detail {

inline void tangent_drift(Mat6& J, double c) {
  // [[I, cI],[0, I]] * J, done in place
  J.block<3, 6>(0, 0) += c * J.block<3, 6>(3, 0);
}
inline void tangent_kick(Mat6& J, const Mat3& K) {
  // [[I, 0],[K, I]] * J
  J.block<3, 6>(3, 0) += K * J.block<3, 6>(0, 0);
}

}  // namespace detail

// --- physical chart ---------------------------------------------------------

// One leapfrog step of length dt: drift dt/2, kick with the self-consistent
// field at the half-step positions, drift dt/2. Mutates currents and the
// ensemble time; probes are passive targets of the same field.
inline void step_physical(Ensemble& e, std::vector<ProbeChar>* probes, double dt,
                          const IntegratorConfig& cfg) {
  if (e.chart != Chart::physical) throw std::invalid_argument("step_physical: physical chart required");
  const double lam = e.lambda * cfg.coupling;
  for (Sample& s : e.samples) s.current.position += 0.5 * dt * s.current.momentum;
  if (probes)
    for (ProbeChar& p : *probes) {
      p.pos += 0.5 * dt * p.mom;
      detail::tangent_drift(p.J, 0.5 * dt);
    }
  if (lam != 0.0) {
    const FieldSources src = build_sources(e);
    std::vector<Vec3> tg(e.size());
    for (size_t i = 0; i < e.size(); ++i) tg[i] = e.samples[i].current.position;
    const auto E = evaluate_E_paired(src, tg, cfg.field);
    for (size_t i = 0; i < e.size(); ++i) e.samples[i].current.momentum += lam * dt * E[i];
    if (probes) {
      ParallelErrors err;
#pragma omp parallel for schedule(static)
      for (long long i = 0; i < static_cast<long long>(probes->size()); ++i)
        err.guard([&, i] {
          ProbeChar& p = (*probes)[i];
          Vec3 Ep;
          Mat3 Ge;
          eval_E_grad_point(src, p.pos, cfg.field, Ep, Ge);
          p.mom += lam * dt * Ep;
          detail::tangent_kick(p.J, lam * dt * Ge.transpose());
        });
      err.rethrow();
    }
  }
  for (Sample& s : e.samples) s.current.position += 0.5 * dt * s.current.momentum;
  if (probes)
    for (ProbeChar& p : *probes) {
      p.pos += 0.5 * dt * p.mom;
      detail::tangent_drift(p.J, 0.5 * dt);
    }
  e.set_time(e.time + dt);
}

inline void advance_physical(Ensemble& e, std::vector<ProbeChar>* probes, double t_to, int n_steps,
                             const IntegratorConfig& cfg) {
  const double dt = (t_to - e.time) / n_steps;
  for (int k = 0; k < n_steps; ++k) step_physical(e, probes, dt, cfg);
  e.set_time(t_to);  // clamp accumulated rounding
}

// --- inverted chart ---------------------------------------------------------

// One node interval [s_from -> s_to], split into cfg.substeps geometric
// pieces. Each substep is a symmetric drift-kick-drift in tau = ln s: drift
// to the geometric midpoint, rebuild the field from the ensemble's own
// half-step positions, kick with the exact weight ln(s_b/s_a), drift to the
// end. When `record` is given, the midpoint sources of every substep are
// appended so a stored flow can replay characteristics backward exactly.
inline void step_inverted_node(Ensemble& e, std::vector<ProbeChar>* probes, double s_from,
                               double s_to, const IntegratorConfig& cfg,
                               std::vector<FieldSources>* record = nullptr) {
  if (e.chart != Chart::inverted) throw std::invalid_argument("step_inverted_node: inverted chart required");
  if (!(s_from > 0) || !(s_to > 0))
    throw std::domain_error("step_inverted_node: s must stay positive (wave operator handles s = 0)");
  const double lam = e.lambda * cfg.coupling;
  const int m = std::max(1, cfg.substeps);
  for (int k = 0; k < m; ++k) {
    const double sa = s_from * std::pow(s_to / s_from, double(k) / m);
    const double sb = (k == m - 1) ? s_to : s_from * std::pow(s_to / s_from, double(k + 1) / m);
    const double sm = std::sqrt(sa * sb);
    const double dtau = std::log(sb / sa);
    for (Sample& s : e.samples) s.current.position += (sm - sa) * s.current.momentum;
    if (probes)
      for (ProbeChar& p : *probes) {
        p.pos += (sm - sa) * p.mom;
        detail::tangent_drift(p.J, sm - sa);
      }
    FieldSources mid = build_sources(e);
    const FieldConfig fc = cfg.field_at(sm);
    if (lam != 0.0) {
      std::vector<Vec3> tg(e.size());
      for (size_t i = 0; i < e.size(); ++i) tg[i] = e.samples[i].current.position;
      const auto E = evaluate_E_paired(mid, tg, fc);
      for (size_t i = 0; i < e.size(); ++i) e.samples[i].current.momentum += lam * dtau * E[i];
      if (probes) {
        ParallelErrors err;
#pragma omp parallel for schedule(static)
        for (long long i = 0; i < static_cast<long long>(probes->size()); ++i)
          err.guard([&, i] {
            ProbeChar& p = (*probes)[i];
            Vec3 Ep;
            Mat3 Ge;
            eval_E_grad_point(mid, p.pos, fc, Ep, Ge);
            p.mom += lam * dtau * Ep;
            detail::tangent_kick(p.J, lam * dtau * Ge.transpose());
          });
        err.rethrow();
      }
    }
    if (record) record->push_back(std::move(mid));
    for (Sample& s : e.samples) s.current.position += (sb - sm) * s.current.momentum;
    if (probes)
      for (ProbeChar& p : *probes) {
        p.pos += (sb - sm) * p.mom;
        detail::tangent_drift(p.J, sb - sm);
      }
  }
  e.set_time(s_to);
}

// Same splitting against externally supplied frozen sources (the field
// function does not follow the ensemble); used when two integrations must
// see identical field data.
inline void step_inverted_frozen(Ensemble& e, std::vector<ProbeChar>* probes,
                                 const FieldSources& frozen, double s_from, double s_to,
                                 const IntegratorConfig& cfg) {
  if (e.chart != Chart::inverted) throw std::invalid_argument("step_inverted_frozen: inverted chart required");
  const double lam = e.lambda * cfg.coupling;
  const int m = std::max(1, cfg.substeps);
  for (int k = 0; k < m; ++k) {
    const double sa = s_from * std::pow(s_to / s_from, double(k) / m);
    const double sb = (k == m - 1) ? s_to : s_from * std::pow(s_to / s_from, double(k + 1) / m);
    const double sm = std::sqrt(sa * sb);
    const double dtau = std::log(sb / sa);
    const FieldConfig fc = cfg.field_at(sm);
    for (Sample& s : e.samples) s.current.position += (sm - sa) * s.current.momentum;
    if (probes)
      for (ProbeChar& p : *probes) {
        p.pos += (sm - sa) * p.mom;
        detail::tangent_drift(p.J, sm - sa);
      }
    if (lam != 0.0) {
      ParallelErrors err;
#pragma omp parallel for schedule(static)
      for (long long i = 0; i < static_cast<long long>(e.size()); ++i)
        err.guard([&, i] {
          Sample& smp = e.samples[i];
          const bool grouped = smp.group >= 0 && frozen.has_groups();
          const Vec3 E = eval_E_point(frozen, smp.current.position, fc, -1,
                                      (cfg.field.exclude_self && grouped) ? smp.group : -1);
          smp.current.momentum += lam * dtau * E;
        });
      err.rethrow();
      if (probes) {
#pragma omp parallel for schedule(static)
        for (long long i = 0; i < static_cast<long long>(probes->size()); ++i)
          err.guard([&, i] {
            ProbeChar& p = (*probes)[i];
            Vec3 Ep;
            Mat3 Ge;
            eval_E_grad_point(frozen, p.pos, fc, Ep, Ge);
            p.mom += lam * dtau * Ep;
            detail::tangent_kick(p.J, lam * dtau * Ge.transpose());
          });
        err.rethrow();
      }
    }
    for (Sample& s : e.samples) s.current.position += (sb - sm) * s.current.momentum;
    if (probes)
      for (ProbeChar& p : *probes) {
        p.pos += (sb - sm) * p.mom;
        detail::tangent_drift(p.J, sb - sm);
      }
  }
  e.set_time(s_to);
}

// Stored inverted-chart flow: per-substep midpoint sources plus the initial
// data, enough to re-integrate any single characteristic backward exactly.
struct InvertedFlow {
  std::vector<double> nodes;  // descending s, nodes[0] carries the data
  std::vector<std::vector<FieldSources>> interval_sources;  // [interval][substep]
  std::vector<FieldSources> node_sources;                   // positions at node arrival
  FieldConfig field;
  bool softening_scales_with_s = true;
  double lambda_eff = 0.0;
  int substeps = 1;

  FieldConfig field_at(double s) const {
    FieldConfig f = field;
    if (softening_scales_with_s) f.softening *= s;
    return f;
  }
  std::function<double(const Vec3&, const Vec3&)> initial_value;
  std::function<Vec6(const Vec3&, const Vec3&)> initial_gradient;  // may be empty
  Vec3 src_lo = Vec3::Zero(), src_hi = Vec3::Zero();
  double trust_radius = -1.0;

  int interval_of(double s) const {
    // interval i spans [nodes[i+1], nodes[i]]
    for (size_t i = 0; i + 1 < nodes.size(); ++i)
      if (s <= nodes[i] + 1e-15 && s >= nodes[i + 1] - 1e-15) return static_cast<int>(i);
    throw std::domain_error("InvertedFlow: s outside stored range");
  }
};

// Runs an inverted-chart ensemble across a node grid, recording the
// per-substep field sources and invoking the callback after arrival at every
// node (including the initial one).
inline InvertedFlow run_inverted_flow(
    Ensemble& e, std::vector<ProbeChar>* probes, const TimeGrid& grid, const IntegratorConfig& cfg,
    std::function<double(const Vec3&, const Vec3&)> initial_value,
    std::function<Vec6(const Vec3&, const Vec3&)> initial_gradient = {},
    const std::function<void(int, const Ensemble&)>& per_node = {}) {
  if (e.chart != Chart::inverted) throw std::invalid_argument("run_inverted_flow: inverted chart required");
  if (grid.nodes.size() < 2) throw std::invalid_argument("run_inverted_flow: need at least two nodes");
  InvertedFlow flow;
  flow.nodes = grid.nodes;
  flow.field = cfg.field;
  flow.softening_scales_with_s = cfg.softening_scales_with_s;
  flow.lambda_eff = e.lambda * cfg.coupling;
  flow.substeps = std::max(1, cfg.substeps);
  flow.initial_value = std::move(initial_value);
  flow.initial_gradient = std::move(initial_gradient);
  flow.trust_radius = cfg.trust_radius;
  flow.interval_sources.resize(grid.nodes.size() - 1);
  flow.node_sources.reserve(grid.nodes.size());
  e.set_time(grid.nodes.front());
  flow.node_sources.push_back(build_sources(e));
  if (per_node) per_node(0, e);
  Vec3 lo, hi;
  flow.node_sources.front().bounds(lo, hi);
  for (size_t j = 0; j + 1 < grid.nodes.size(); ++j) {
    step_inverted_node(e, probes, grid.nodes[j], grid.nodes[j + 1], cfg, &flow.interval_sources[j]);
    flow.node_sources.push_back(build_sources(e));
    if (per_node) per_node(static_cast<int>(j + 1), e);
    for (const FieldSources& s : flow.interval_sources[j]) {
      if (s.size() == 0) continue;
      Vec3 l, h;
      s.bounds(l, h);
      lo = lo.cwiseMin(l);
      hi = hi.cwiseMax(h);
    }
  }
  flow.src_lo = lo;
  flow.src_hi = hi;
  return flow;
}

// Field of a stored flow at an arbitrary spatial point, sourced from the
// ensemble positions recorded at node arrival.
inline Vec3 flow_field_at(const InvertedFlow& flow, int node_index, const Vec3& q,
                          Mat3* grad = nullptr) {
  const FieldSources& src = flow.node_sources.at(node_index);
  const FieldConfig fc = flow.field_at(flow.nodes.at(node_index));
  if (grad) {
    Vec3 E;
    eval_E_grad_point(src, q, fc, E, *grad);
    return E;
  }
  return eval_E_point(src, q, fc);
}

struct SolutionEval {
  double value = 0.0;
  bool extrapolated = false;  // left the source trust region on the way back
  Vec3 foot_q = Vec3::Zero(), foot_p = Vec3::Zero();
  Mat6 J_back = Mat6::Identity();  // d(foot)/d(point)
};

// Transport value at (s, q, p): re-integrates one characteristic backward to
// the data node against the stored per-substep fields and evaluates the
// initial profile at the foot. At stored nodes the backward substeps are the
// algebraic inverses of the forward ones, so values of stored characteristics
// are recovered exactly.
inline SolutionEval evaluate_solution(const InvertedFlow& flow, double s, const Vec3& q,
                                      const Vec3& p, bool want_tangent = false,
                                      long long exclude_group = -1) {
  SolutionEval out;
  Vec3 Q = q, P = p;
  Mat6 J = Mat6::Identity();
  const double lam = flow.lambda_eff;
  const int m = std::max(1, flow.substeps);
  // inverts the forward substep [sa -> sb] against recorded sources
  auto undo = [&](double sa, double sb, const FieldSources& src) {
    const double sm = std::sqrt(sa * sb);
    const double dtau = std::log(sb / sa);
    const FieldConfig fc = flow.field_at(sm);
    Q -= (sb - sm) * P;
    if (want_tangent) detail::tangent_drift(J, -(sb - sm));
    if (lam != 0.0 && src.size() > 0) {
      if (want_tangent) {
        Vec3 E;
        Mat3 Ge;
        eval_E_grad_point(src, Q, fc, E, Ge, -1, exclude_group);
        P -= lam * dtau * E;
        detail::tangent_kick(J, -lam * dtau * Ge.transpose());
      } else {
        P -= lam * dtau * eval_E_point(src, Q, fc, -1, exclude_group);
      }
    }
    Q -= (sm - sa) * P;
    if (want_tangent) detail::tangent_drift(J, -(sm - sa));
    if (flow.trust_radius > 0.0) {
      const bool inside = (Q.array() >= flow.src_lo.array() - flow.trust_radius).all() &&
                          (Q.array() <= flow.src_hi.array() + flow.trust_radius).all();
      if (!inside) out.extrapolated = true;
    }
  };
  const int i0 = flow.interval_of(s);
  if (s < flow.nodes[i0] - 1e-15) {
    // partial leg within interval i0: undo substeps below s, approximating
    // the one containing s by a clipped substep with its recorded sources
    const double s_hi = flow.nodes[i0], s_lo = flow.nodes[i0 + 1];
    int k0 = m - 1;
    for (int k = 0; k < m; ++k) {
      const double bot = s_hi * std::pow(s_lo / s_hi, double(k + 1) / m);
      if (s >= bot - 1e-15) {
        k0 = k;
        break;
      }
    }
    const double top = s_hi * std::pow(s_lo / s_hi, double(k0) / m);
    if (s < top - 1e-15) undo(top, s, flow.interval_sources[i0][k0]);
    for (int k = k0 - 1; k >= 0; --k) {
      const double sa = s_hi * std::pow(s_lo / s_hi, double(k) / m);
      const double sb = s_hi * std::pow(s_lo / s_hi, double(k + 1) / m);
      undo(sa, sb, flow.interval_sources[i0][k]);
    }
  }
  for (int i = i0 - 1; i >= 0; --i) {
    const double s_hi = flow.nodes[i], s_lo = flow.nodes[i + 1];
    for (int k = m - 1; k >= 0; --k) {
      const double sa = s_hi * std::pow(s_lo / s_hi, double(k) / m);
      const double sb = (k == m - 1) ? s_lo : s_hi * std::pow(s_lo / s_hi, double(k + 1) / m);
      undo(sa, sb, flow.interval_sources[i][k]);
    }
  }
  out.foot_q = Q;
  out.foot_p = P;
  out.J_back = J;
  out.value = flow.initial_value ? flow.initial_value(Q, P) : 0.0;
  return out;
}

// --- canonical chart --------------------------------------------------------

struct CanonicalRhs {
  Vec3 Fw, Fz;
  Vec3 E;      // field at q(s,w,z)
  Mat3 Ge;     // dE at q, filled when tangents are requested
  bool has_grad = false;
};

// The Hessian blocks of the transformed Hamiltonian; A = d2K/dw2,
// B(j,k) = d2K/dw_j dz_k, C = d2K/dz2. Requires the field and its gradient
// at q(s,w,z) plus the asymptotic derivatives at w.
struct HessianK {
  Mat3 A, B, C;

  Mat6 as_matrix() const {
    Mat6 H;
    H.block<3, 3>(0, 0) = A;
    H.block<3, 3>(0, 3) = B;
    H.block<3, 3>(3, 0) = B.transpose();
    H.block<3, 3>(3, 3) = C;
    return H;
  }
  // Linearization of the canonical characteristics: d(dw,dz)/ds = M (dw,dz).
  Mat6 tangent_matrix() const {
    Mat6 M;
    M.block<3, 3>(0, 0) = B.transpose();
    M.block<3, 3>(0, 3) = C;
    M.block<3, 3>(3, 0) = -A;
    M.block<3, 3>(3, 3) = -B;
    return M;
  }
};

inline HessianK hessian_K(double s, const Vec3& w, const Vec3& /*z*/, const Vec3& E, const Mat3& Ge,
                          const AsymptoticData& asym, double lam) {
  if (!(s > 0)) throw std::domain_error("hessian_K: requires s > 0");
  HessianK h;
  const double ls = std::log(s);
  const Mat3 G0 = asym.gradE0(w);
  const auto H0 = asym.hessE0(w);
  Mat3 contract;  // contract(j,k) = sum_m E_m d_j d_k E0_m
  for (int j = 0; j < 3; ++j)
    for (int k = 0; k < 3; ++k)
      contract(j, k) = E.x() * H0[0](j, k) + E.y() * H0[1](j, k) + E.z() * H0[2](j, k);
  h.C = -lam * s * Ge;
  h.B = -lam * Ge - lam * lam * s * ls * (G0 * Ge);
  h.A = -(lam / s) * (Ge - G0) - lam * lam * ls * (G0 * Ge + Ge * G0 + contract) -
        lam * lam * lam * s * ls * ls * (G0 * Ge * G0);
  return h;
}

// Overload that evaluates the field itself from kernel sources.
inline HessianK hessian_K(double s, const Vec3& w, const Vec3& z, const FieldSources& src,
                          const FieldConfig& fc, const AsymptoticData& asym, double lam) {
  const Vec3 q = position_from_canonical(s, w, z, asym, lam);
  Vec3 E;
  Mat3 Ge;
  eval_E_grad_point(src, q, fc, E, Ge);
  return hessian_K(s, w, z, E, Ge, asym, lam);
}

inline CanonicalRhs canonical_rhs(double s, const Vec3& w, const Vec3& z, const FieldSources& src,
                                  const IntegratorConfig& cfg, const AsymptoticData& asym,
                                  double lam, bool want_grad, long long skip = -1,
                                  long long skip_group = -1) {
  CanonicalRhs r;
  if (lam == 0.0) {
    r.Fw = r.Fz = r.E = Vec3::Zero();
    r.Ge = Mat3::Zero();
    r.has_grad = want_grad;
    return r;
  }
  const Vec3 q = position_from_canonical(s, w, z, asym, lam);
  const FieldConfig fc = cfg.field_at(s);
  if (want_grad) {
    eval_E_grad_point(src, q, fc, r.E, r.Ge, skip, skip_group);
    r.has_grad = true;
  } else {
    r.E = eval_E_point(src, q, fc, skip, skip_group);
  }
  const Vec3 e0 = asym.E0(w);
  const Vec3 xi = (r.E - e0) / s;
  if (xi.norm() > cfg.singular_guard)
    throw NumericalGuard("singularity guard tripped: |s^-1 (E - E0)| = " + std::to_string(xi.norm()) +
                         " at s = " + std::to_string(s));
  r.Fw = -lam * r.E;
  r.Fz = lam * xi + lam * lam * std::log(s) * (asym.gradE0(w) * r.E);
  return r;
}

// Explicit midpoint step in tau = ln s over [s_from, s_to]; field sources
// frozen for the interval.
inline void step_canonical_node(Ensemble& e, std::vector<ProbeChar>* probes,
                                const FieldSources& frozen, double s_from, double s_to,
                                const AsymptoticData& asym, const IntegratorConfig& cfg) {
  if (e.chart != Chart::canonical)
    throw std::invalid_argument("step_canonical_node: canonical chart required");
  if (!(s_from > 0) || !(s_to > 0)) throw std::domain_error("step_canonical_node: s must be positive");
  const double lam = e.lambda * cfg.coupling;
  const int m = std::max(1, cfg.substeps);
  for (int k = 0; k < m; ++k) {
    const double sa = s_from * std::pow(s_to / s_from, double(k) / m);
    const double sb = (k == m - 1) ? s_to : s_from * std::pow(s_to / s_from, double(k + 1) / m);
    const double sm = std::sqrt(sa * sb);
    const double dtau = std::log(sb / sa);
    ParallelErrors serr;
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(e.size()); ++i)
      serr.guard([&, i] {
        Sample& smp = e.samples[i];
        Vec3& w = smp.current.position;
        Vec3& z = smp.current.momentum;
        try {
          const bool grouped = smp.group >= 0 && frozen.has_groups();
          const long long skip = (cfg.field.exclude_self && !grouped) ? i : -1;
          const long long sgrp = (cfg.field.exclude_self && grouped) ? smp.group : -1;
          const CanonicalRhs r1 = canonical_rhs(sa, w, z, frozen, cfg, asym, lam, false, skip, sgrp);
          const Vec3 w_half = w + 0.5 * dtau * sa * r1.Fw;
          const Vec3 z_half = z + 0.5 * dtau * sa * r1.Fz;
          const CanonicalRhs r2 =
              canonical_rhs(sm, w_half, z_half, frozen, cfg, asym, lam, false, skip, sgrp);
          w += dtau * sm * r2.Fw;
          z += dtau * sm * r2.Fz;
        } catch (const NumericalGuard& g) {
          throw NumericalGuard(std::string(g.what()) + " (sample " + std::to_string(i) + ")");
        }
      });
    serr.rethrow();
    if (probes) {
      // probe characteristics estimate the continuum field, so their kernel
      // keeps the constant mollification instead of the s-scaled one
      IntegratorConfig pcfg = cfg;
      pcfg.softening_scales_with_s = false;
      ParallelErrors perr;
#pragma omp parallel for schedule(static)
      for (long long i = 0; i < static_cast<long long>(probes->size()); ++i)
        perr.guard([&, i] {
          ProbeChar& p = (*probes)[i];
          const CanonicalRhs r1 = canonical_rhs(sa, p.pos, p.mom, frozen, pcfg, asym, lam, true);
          const Mat6 D1 = sa * hessian_K(sa, p.pos, p.mom, r1.E, r1.Ge, asym, lam).tangent_matrix();
          const Vec3 w_half = p.pos + 0.5 * dtau * sa * r1.Fw;
          const Vec3 z_half = p.mom + 0.5 * dtau * sa * r1.Fz;
          const CanonicalRhs r2 = canonical_rhs(sm, w_half, z_half, frozen, pcfg, asym, lam, true);
          const Mat6 D2 = sm * hessian_K(sm, w_half, z_half, r2.E, r2.Ge, asym, lam).tangent_matrix();
          p.pos += dtau * sm * r2.Fw;
          p.mom += dtau * sm * r2.Fz;
          p.J = (Mat6::Identity() + dtau * D2 * (Mat6::Identity() + 0.5 * dtau * D1)) * p.J;
        });
      perr.rethrow();
    }
  }
  e.set_time(s_to);
}

// First step out of the singular time: on [0, s_min] the bracket coefficient
// s^{-1}(E - E0) is frozen at its s_min value and the remaining coefficients
// are integrated in closed form (int_0^s ln = s(ln s - 1)). Expanding the
// frozen field to first order in the position shift keeps the step
// divergence-free, so the map below is volume preserving to O(s_min^2).
//
//   w1 = w - lam s E^(w)
//   z1 = z + lam (E^ - E0)(w) + lam s G^T z + lam^2 s(ln s - 1)(G^T E0 + G0 E^)
//
// with E^ the field of the source data at s_min evaluated at the s = 0
// positions and G^ its gradient.
struct SingularStepTangentData {
  Vec3 Ehat, E0;
  Mat3 Ghat, G0;
};

inline void singular_start_step(Ensemble& e, std::vector<ProbeChar>* probes,
                                const FieldSources& frozen, double s_min,
                                const AsymptoticData& asym, const IntegratorConfig& cfg) {
  if (e.chart != Chart::canonical)
    throw std::invalid_argument("singular_start_step: canonical chart required");
  if (!(s_min > 0)) throw std::domain_error("singular_start_step: s_min must be positive");
  const double lam = e.lambda * cfg.coupling;
  if (lam == 0.0) {
    e.set_time(s_min);
    return;
  }
  const double c1 = s_min * (std::log(s_min) - 1.0);
  ParallelErrors serr;
#pragma omp parallel for schedule(static)
  for (long long i = 0; i < static_cast<long long>(e.size()); ++i)
    serr.guard([&, i] {
      Sample& smp = e.samples[i];
      Vec3& w = smp.current.position;
      Vec3& z = smp.current.momentum;
      Vec3 Ehat;
      Mat3 Ghat;
      const bool grouped = smp.group >= 0 && frozen.has_groups();
      eval_E_grad_point(frozen, w, cfg.field_at(s_min), Ehat, Ghat,
                        (cfg.field.exclude_self && !grouped) ? i : -1,
                        (cfg.field.exclude_self && grouped) ? smp.group : -1);
      const Vec3 e0 = asym.E0(w);
      const Mat3 G0 = asym.gradE0(w);
      const Vec3 z_new = z + lam * (Ehat - e0) + lam * s_min * (Ghat.transpose() * z) +
                         lam * lam * c1 * (Ghat.transpose() * e0 + G0 * Ehat);
      w -= lam * s_min * Ehat;
      z = z_new;
    });
  serr.rethrow();
  if (probes) {
    ParallelErrors perr;
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(probes->size()); ++i)
      perr.guard([&, i] {
      ProbeChar& p = (*probes)[i];
      Vec3 Ehat;
      Mat3 Ghat;
      std::array<Mat3, 3> Hhat;
      eval_E_hess_point(frozen, p.pos, cfg.field, Ehat, Ghat, Hhat);
      const Vec3 w = p.pos;
      const Vec3 z = p.mom;
      const Vec3 e0 = asym.E0(w);
      const Mat3 G0 = asym.gradE0(w);
      const auto H0 = asym.hessE0(w);
      // exact Jacobian of the implemented map
      Mat6 Js = Mat6::Zero();
      const Mat3 dw1_dw = Mat3::Identity() - lam * s_min * Ghat.transpose();
      const Mat3 dz1_dz = Mat3::Identity() + lam * s_min * Ghat.transpose();
      Mat3 dz1_dw;
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k) {
          double t = lam * (Ghat(k, j) - G0(k, j));
          for (int m2 = 0; m2 < 3; ++m2) {
            t += lam * s_min * Hhat[j](k, m2) * z[m2];
            t += lam * lam * c1 * (Hhat[j](k, m2) * e0[m2] + Ghat(m2, j) * G0(k, m2));
            t += lam * lam * c1 * (H0[m2](j, k) * Ehat[m2] + G0(j, m2) * Ghat(k, m2));
          }
          dz1_dw(j, k) = t;
        }
      Js.block<3, 3>(0, 0) = dw1_dw;
      Js.block<3, 3>(3, 0) = dz1_dw;
      Js.block<3, 3>(3, 3) = dz1_dz;
      const Vec3 z_new = z + lam * (Ehat - e0) + lam * s_min * (Ghat.transpose() * z) +
                         lam * lam * c1 * (Ghat.transpose() * e0 + G0 * Ehat);
      p.pos = w - lam * s_min * Ehat;
      p.mom = z_new;
      p.J = Js * p.J;
      });
    perr.rethrow();
  }
  e.set_time(s_min);
}

// Inverts one canonical midpoint substep by fixed-point iteration; the
// returned point is the forward-step preimage to ~1e-14.
inline void invert_canonical_substep(Vec3& w, Vec3& z, const FieldSources& frozen, double sa,
                                     double sb, const AsymptoticData& asym,
                                     const IntegratorConfig& cfg, double lam) {
  const double sm = std::sqrt(sa * sb);
  const double dtau = std::log(sb / sa);
  const Vec3 W1 = w, Z1 = z;
  Vec3 W = w, Z = z;
  for (int it = 0; it < 30; ++it) {
    const CanonicalRhs r1 = canonical_rhs(sa, W, Z, frozen, cfg, asym, lam, false);
    const Vec3 wh = W + 0.5 * dtau * sa * r1.Fw;
    const Vec3 zh = Z + 0.5 * dtau * sa * r1.Fz;
    const CanonicalRhs r2 = canonical_rhs(sm, wh, zh, frozen, cfg, asym, lam, false);
    const Vec3 Wn = W1 - dtau * sm * r2.Fw;
    const Vec3 Zn = Z1 - dtau * sm * r2.Fz;
    const double delta = (Wn - W).norm() + (Zn - Z).norm();
    W = Wn;
    Z = Zn;
    if (delta < 1e-14 * (1.0 + W.norm() + Z.norm())) break;
  }
  w = W;
  z = Z;
}

// Inverts the singular start map: w by fixed point, z by a linear solve.
inline void invert_singular_start(Vec3& w, Vec3& z, const FieldSources& frozen, double s_min,
                                  const AsymptoticData& asym, const IntegratorConfig& cfg,
                                  double lam) {
  const double c1 = s_min * (std::log(s_min) - 1.0);
  const Vec3 W1 = w, Z1 = z;
  Vec3 W = w;
  Vec3 Ehat;
  Mat3 Ghat;
  const FieldConfig fc = cfg.field_at(s_min);
  for (int it = 0; it < 30; ++it) {
    eval_E_grad_point(frozen, W, fc, Ehat, Ghat);
    const Vec3 Wn = W1 + lam * s_min * Ehat;
    const double delta = (Wn - W).norm();
    W = Wn;
    if (delta < 1e-14 * (1.0 + W.norm())) break;
  }
  eval_E_grad_point(frozen, W, fc, Ehat, Ghat);
  const Vec3 e0 = asym.E0(W);
  const Mat3 G0 = asym.gradE0(W);
  const Vec3 rhs = Z1 - lam * (Ehat - e0) - lam * lam * c1 * (Ghat.transpose() * e0 + G0 * Ehat);
  const Mat3 Mz = Mat3::Identity() + lam * s_min * Ghat.transpose();
  z = Mz.partialPivLu().solve(rhs);
  w = W;
}

}  // namespace vpscat
