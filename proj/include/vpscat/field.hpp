// Force-field evaluation by direct kernel summation.
//
// E(Q) = (1/4pi) sum_k c_k (Q - q_k) / (|Q - q_k|^2 + delta^2)^{3/2},
// c_k = weight_k * value_k^2 >= 0.  Plummer softening delta regularizes the
// short range; delta = 0 is legal only when targets never coincide with
// sources.  Summation order is the stored sample order and reductions are
// per-target sequential, so results are bit-reproducible for any thread
// count.  Parallelism is over targets only.
#pragma once

#include "vpscat/core.hpp"
#include "vpscat/phase_space.hpp"
#include "vpscat/profiles.hpp"

#include <array>
#include <vector>

namespace vpscat {

struct FieldConfig {
  enum class Summation { direct, compensated };
  double softening = 0.0;
  bool exclude_self = true;  // skip the matching index in paired evaluations
  Summation summation = Summation::compensated;
};

struct FieldSources {
  std::vector<double> x, y, z;  // spatial positions in the evaluation chart
  std::vector<double> charge;   // weight * value^2
  std::vector<double> px, py, pz;  // momenta; filled only when requested
  // Initial spatial-cell ids. Samples of the same cell sit at (or unfold
  // from) the same point; excluding a target's own cell from its field keeps
  // the summation collisionless where the tensor grid stacks samples.
  std::vector<long long> group;

  size_t size() const { return x.size(); }
  bool has_momenta() const { return px.size() == x.size() && !x.empty(); }
  bool has_groups() const { return group.size() == x.size() && !x.empty(); }

  void reserve(size_t n, bool momenta) {
    x.reserve(n); y.reserve(n); z.reserve(n); charge.reserve(n);
    if (momenta) { px.reserve(n); py.reserve(n); pz.reserve(n); }
  }
  void push(const Vec3& pos, double c, long long grp = -1) {
    x.push_back(pos.x()); y.push_back(pos.y()); z.push_back(pos.z());
    charge.push_back(c);
    if (grp >= 0) group.push_back(grp);
  }
  void push(const Vec3& pos, const Vec3& mom, double c, long long grp = -1) {
    push(pos, c, grp);
    px.push_back(mom.x()); py.push_back(mom.y()); pz.push_back(mom.z());
  }

  // Bounding box of the sources, used for trust-region warnings.
  void bounds(Vec3& lo, Vec3& hi) const {
    lo = Vec3::Constant(1e300); hi = Vec3::Constant(-1e300);
    for (size_t k = 0; k < size(); ++k) {
      lo.x() = std::min(lo.x(), x[k]); hi.x() = std::max(hi.x(), x[k]);
      lo.y() = std::min(lo.y(), y[k]); hi.y() = std::max(hi.y(), y[k]);
      lo.z() = std::min(lo.z(), z[k]); hi.z() = std::max(hi.z(), z[k]);
    }
  }
};

// Positions from an ensemble whose current chart already carries spatial
// coordinates in the first slot (physical x or inverted q).
inline FieldSources build_sources(const Ensemble& e, bool with_momenta = false) {
  if (e.chart == Chart::canonical)
    throw std::invalid_argument("build_sources: canonical ensembles need the asymptotic data; "
                                "use build_sources_canonical");
  FieldSources s;
  s.reserve(e.size(), with_momenta);
  for (const Sample& sm : e.samples) {
    const double c = sm.weight * sm.value * sm.value;
    if (with_momenta) s.push(sm.current.position, sm.current.momentum, c, sm.group);
    else s.push(sm.current.position, c, sm.group);
  }
  if (!s.group.empty() && s.group.size() != s.x.size())
    throw std::invalid_argument("build_sources: mixed grouped/ungrouped samples");
  return s;
}

namespace detail {

// One target against all sources; skip == -1 disables index exclusion,
// skip_group == -1 disables cell exclusion.
template <bool kCompensated>
inline Vec3 sum_E(const FieldSources& src, const Vec3& Q, double delta2, long long skip,
                  long long skip_group) {
  KahanSum cx, cy, cz;
  double dx_acc = 0, dy_acc = 0, dz_acc = 0;
  const size_t n = src.size();
  const bool grouped = skip_group >= 0 && src.has_groups();
  for (size_t k = 0; k < n; ++k) {
    if (static_cast<long long>(k) == skip) continue;
    if (grouped && src.group[k] == skip_group) continue;
    const double dx = Q.x() - src.x[k];
    const double dy = Q.y() - src.y[k];
    const double dz = Q.z() - src.z[k];
    const double r2 = dx * dx + dy * dy + dz * dz + delta2;
    if (r2 <= 0.0)
      throw NumericalGuard("singular kernel: target coincides with a source and softening is zero");
    const double w = src.charge[k] / (r2 * std::sqrt(r2));
    if constexpr (kCompensated) {
      cx.add(w * dx); cy.add(w * dy); cz.add(w * dz);
    } else {
      dx_acc += w * dx; dy_acc += w * dy; dz_acc += w * dz;
    }
  }
  if constexpr (kCompensated) return Vec3(cx.value(), cy.value(), cz.value()) / kFourPi;
  return Vec3(dx_acc, dy_acc, dz_acc) / kFourPi;
}

}  // namespace detail

inline Vec3 eval_E_point(const FieldSources& src, const Vec3& Q, const FieldConfig& cfg,
                         long long skip = -1, long long skip_group = -1) {
  const double d2 = cfg.softening * cfg.softening;
  if (cfg.summation == FieldConfig::Summation::compensated)
    return detail::sum_E<true>(src, Q, d2, skip, skip_group);
  return detail::sum_E<false>(src, Q, d2, skip, skip_group);
}

// E and its gradient; grad(a,b) = d E_b / d x_a (symmetric for this kernel).
inline void eval_E_grad_point(const FieldSources& src, const Vec3& Q, const FieldConfig& cfg,
                              Vec3& E, Mat3& grad, long long skip = -1, long long skip_group = -1) {
  const double d2 = cfg.softening * cfg.softening;
  KahanSum ce[3], cg[9];
  const size_t n = src.size();
  const bool grouped = skip_group >= 0 && src.has_groups();
  for (size_t k = 0; k < n; ++k) {
    if (static_cast<long long>(k) == skip) continue;
    if (grouped && src.group[k] == skip_group) continue;
    const double dx = Q.x() - src.x[k];
    const double dy = Q.y() - src.y[k];
    const double dz = Q.z() - src.z[k];
    const double r2 = dx * dx + dy * dy + dz * dz + d2;
    if (r2 <= 0.0)
      throw NumericalGuard("singular kernel: target coincides with a source and softening is zero");
    const double ir = 1.0 / std::sqrt(r2);
    const double ir3 = ir / r2;
    const double c = src.charge[k];
    const double w = c * ir3;
    ce[0].add(w * dx); ce[1].add(w * dy); ce[2].add(w * dz);
    // d/dx_a [ d_b / r^3 ] = delta_ab / r^3 - 3 d_a d_b / r^5
    const double w5 = 3.0 * c * ir3 / r2;
    const double d[3] = {dx, dy, dz};
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) cg[3 * a + b].add((a == b ? w : 0.0) - w5 * d[a] * d[b]);
  }
  E = Vec3(ce[0].value(), ce[1].value(), ce[2].value()) / kFourPi;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) grad(a, b) = cg[3 * a + b].value() / kFourPi;
}

// Second derivatives: hess[c](a,b) = d^2 E_c / d x_a d x_b.
inline void eval_E_hess_point(const FieldSources& src, const Vec3& Q, const FieldConfig& cfg,
                              Vec3& E, Mat3& grad, std::array<Mat3, 3>& hess, long long skip = -1,
                              long long skip_group = -1) {
  const double d2 = cfg.softening * cfg.softening;
  eval_E_grad_point(src, Q, cfg, E, grad, skip, skip_group);
  for (auto& m : hess) m.setZero();
  const size_t n = src.size();
  const bool grouped = skip_group >= 0 && src.has_groups();
  for (size_t k = 0; k < n; ++k) {
    if (static_cast<long long>(k) == skip) continue;
    if (grouped && src.group[k] == skip_group) continue;
    const double dx = Q.x() - src.x[k];
    const double dy = Q.y() - src.y[k];
    const double dz = Q.z() - src.z[k];
    const double r2 = dx * dx + dy * dy + dz * dz + d2;
    const double ir = 1.0 / std::sqrt(r2);
    const double ir5 = ir / (r2 * r2);
    const double c = src.charge[k];
    const double w5 = 3.0 * c * ir5;
    const double w7 = 15.0 * c * ir5 / r2;
    const double d[3] = {dx, dy, dz};
    for (int cix = 0; cix < 3; ++cix)
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) {
          double t = w7 * d[a] * d[b] * d[cix];
          if (a == b) t -= w5 * d[cix];
          if (a == cix) t -= w5 * d[b];
          if (b == cix) t -= w5 * d[a];
          hess[cix](a, b) += t;
        }
  }
  for (auto& m : hess) m /= kFourPi;
}

// Arbitrary targets; no index pairing with the sources.
inline std::vector<Vec3> evaluate_E(const FieldSources& src, const std::vector<Vec3>& targets,
                                    const FieldConfig& cfg, std::vector<Mat3>* grads = nullptr) {
  std::vector<Vec3> out(targets.size());
  if (grads) grads->resize(targets.size());
  ParallelErrors err;
#pragma omp parallel for schedule(static)
  for (long long i = 0; i < static_cast<long long>(targets.size()); ++i)
    err.guard([&, i] {
      if (grads) eval_E_grad_point(src, targets[i], cfg, out[i], (*grads)[i]);
      else out[i] = eval_E_point(src, targets[i], cfg);
    });
  err.rethrow();
  return out;
}

// Targets in one-to-one correspondence with the sources (self-consistent
// evolution); cfg.exclude_self skips the matching cell group when groups are
// present, the matching index otherwise.
inline std::vector<Vec3> evaluate_E_paired(const FieldSources& src, const std::vector<Vec3>& targets,
                                           const FieldConfig& cfg) {
  if (targets.size() != src.size())
    throw std::invalid_argument("evaluate_E_paired: size mismatch");
  std::vector<Vec3> out(targets.size());
  const bool grouped = src.has_groups();
  ParallelErrors err;
#pragma omp parallel for schedule(static)
  for (long long i = 0; i < static_cast<long long>(targets.size()); ++i)
    err.guard([&, i] {
      if (!cfg.exclude_self) out[i] = eval_E_point(src, targets[i], cfg);
      else if (grouped) out[i] = eval_E_point(src, targets[i], cfg, -1, src.group[i]);
      else out[i] = eval_E_point(src, targets[i], cfg, i);
    });
  err.rethrow();
  return out;
}

inline std::vector<Vec3> evaluate_E(const Ensemble& e, const std::vector<Vec3>& targets,
                                    const FieldConfig& cfg, std::vector<Mat3>* grads = nullptr) {
  return evaluate_E(build_sources(e), targets, cfg, grads);
}

// --- current density -------------------------------------------------------
// j(Q) = sum_k c_k p_k K_w(Q - q_k) with a normalized Gaussian bump K_w.

struct CurrentConfig {
  double width = 0.1;  // smoothing width, recorded in reports
};

inline Vec3 current_density_point(const FieldSources& src, const Vec3& Q, const CurrentConfig& cc,
                                  Mat3* grad = nullptr) {
  if (!src.has_momenta()) throw std::invalid_argument("current_density: sources lack momenta");
  const double w2 = cc.width * cc.width;
  const double norm = 1.0 / (std::pow(2.0 * kPi, 1.5) * cc.width * cc.width * cc.width);
  Vec3 j = Vec3::Zero();
  if (grad) grad->setZero();
  for (size_t k = 0; k < src.size(); ++k) {
    const Vec3 d(Q.x() - src.x[k], Q.y() - src.y[k], Q.z() - src.z[k]);
    const double kern = norm * std::exp(-d.squaredNorm() / (2 * w2));
    const Vec3 p(src.px[k], src.py[k], src.pz[k]);
    const Vec3 contrib = src.charge[k] * kern * p;
    j += contrib;
    if (grad) *grad += (-d / w2) * contrib.transpose();  // grad(a,b) = d j_b / d Q_a
  }
  return j;
}

inline std::vector<Vec3> current_density(const FieldSources& src, const std::vector<Vec3>& targets,
                                         const CurrentConfig& cc, std::vector<Mat3>* grads = nullptr) {
  std::vector<Vec3> out(targets.size());
  if (grads) grads->resize(targets.size());
  ParallelErrors err;
#pragma omp parallel for schedule(static)
  for (long long i = 0; i < static_cast<long long>(targets.size()); ++i)
    err.guard([&, i] { out[i] = current_density_point(src, targets[i], cc, grads ? &(*grads)[i] : nullptr); });
  err.rethrow();
  return out;
}

// --- multiscale decomposition ----------------------------------------------
// Radial bump chi supported in {1/2 <= |y| <= 2} with unit integral over R^3.
// The calibration constant satisfies  c * ∫ chi(u/R) dR/R = 1  for all u > 0,
// so the geometric-scale sums below form a partition of unity in scale.

inline double chi_shell_raw(double r) {
  if (r <= 0.5 || r >= 2.0) return 0.0;
  return std::exp(-1.0 / ((r - 0.5) * (2.0 - r)));
}

struct ScaleDecomposition {
  std::vector<double> scale_nodes;     // geometric R grid
  std::vector<double> velocity_nodes;  // geometric V grid
  double chi_norm = 1.0;               // makes ∫_{R^3} chi = 1
  double calib_const = 1.0;            // c above
  double dlog_R = 0.0, dlog_V = 0.0;

  double chi(double r) const { return chi_norm * chi_shell_raw(r); }

  static ScaleDecomposition make(double r_min, double r_max, int n_r, double v_min, double v_max,
                                 int n_v) {
    if (!(r_max > r_min) || n_r < 2) throw std::invalid_argument("ScaleDecomposition: bad R grid");
    if (!(v_max > v_min) || n_v < 2) throw std::invalid_argument("ScaleDecomposition: bad V grid");
    ScaleDecomposition d;
    // Simpson on [1/2, 2] for the two chi moments
    const int n = 2000;
    const double h = 1.5 / n;
    double int_r2 = 0.0, int_over_u = 0.0;
    for (int i = 0; i <= n; ++i) {
      const double r = 0.5 + i * h;
      const double wgt = (i == 0 || i == n) ? 1.0 : (i % 2 ? 4.0 : 2.0);
      int_r2 += wgt * r * r * chi_shell_raw(r);
      int_over_u += wgt * chi_shell_raw(r) / r;
    }
    int_r2 *= h / 3.0;
    int_over_u *= h / 3.0;
    d.chi_norm = 1.0 / (kFourPi * int_r2);
    d.calib_const = 1.0 / (d.chi_norm * int_over_u);
    d.dlog_R = std::log(r_max / r_min) / (n_r - 1);
    d.dlog_V = std::log(v_max / v_min) / (n_v - 1);
    d.scale_nodes.resize(n_r);
    d.velocity_nodes.resize(n_v);
    for (int i = 0; i < n_r; ++i) d.scale_nodes[i] = r_min * std::exp(i * d.dlog_R);
    for (int i = 0; i < n_v; ++i) d.velocity_nodes[i] = v_min * std::exp(i * d.dlog_V);
    return d;
  }
};

struct MultiscaleResult {
  std::vector<Vec3> E_R;               // per scale node, includes the R prefactor
  std::vector<std::vector<Vec3>> E_RV; // [iR][iV], calibration constant folded in
  Vec3 reconstructed = Vec3::Zero();   // c * sum_R E_R dR / R^2
  Vec3 direct = Vec3::Zero();
  double rel_error = 0.0;
};

inline MultiscaleResult multiscale_decompose(const FieldSources& src, const Vec3& target,
                                             const ScaleDecomposition& dec, const FieldConfig& cfg) {
  MultiscaleResult res;
  const size_t nr = dec.scale_nodes.size(), nv = dec.velocity_nodes.size();
  res.E_R.assign(nr, Vec3::Zero());
  res.E_RV.assign(nr, std::vector<Vec3>(nv, Vec3::Zero()));
  const double d2 = cfg.softening * cfg.softening;
  const bool with_v = src.has_momenta();
  for (size_t k = 0; k < src.size(); ++k) {
    const Vec3 d(target.x() - src.x[k], target.y() - src.y[k], target.z() - src.z[k]);
    const double r2 = d.squaredNorm() + d2;
    if (r2 <= 0.0) throw NumericalGuard("multiscale: singular kernel");
    const double r = d.norm();
    const Vec3 kern = src.charge[k] * d / (r2 * std::sqrt(r2) * kFourPi);
    const double u = with_v ? Vec3(src.px[k], src.py[k], src.pz[k]).norm() : 0.0;
    for (size_t iR = 0; iR < nr; ++iR) {
      const double R = dec.scale_nodes[iR];
      const double cr = dec.chi(r / R);
      if (cr == 0.0) continue;
      res.E_R[iR] += R * cr * kern;
      if (with_v) {
        for (size_t iV = 0; iV < nv; ++iV) {
          const double cv = dec.chi(u / dec.velocity_nodes[iV]);
          if (cv != 0.0) res.E_RV[iR][iV] += dec.calib_const * R * cr * cv * kern;
        }
      }
    }
  }
  for (size_t iR = 0; iR < nr; ++iR) {
    const double R = dec.scale_nodes[iR];
    const double dR = R * dec.dlog_R;
    res.reconstructed += dec.calib_const * res.E_R[iR] * dR / (R * R);
  }
  res.direct = eval_E_point(src, target, cfg);
  const double dn = res.direct.norm();
  res.rel_error = dn > 0 ? (res.reconstructed - res.direct).norm() / dn
                         : (res.reconstructed - res.direct).norm();
  if (res.rel_error > 0.10)
    throw CertificateFailure("multiscale reconstruction error " + std::to_string(res.rel_error) +
                             " exceeds 10%: scale grid too coarse");
  return res;
}

// --- asymptotic field -------------------------------------------------------
// E_inf(v) = (1/4pi) ∫∫ (v-w)/|v-w|^3 f^2(y,w) dy dw, evaluated by
// integrating out y first (the marginal m) and then a midpoint kernel sum in
// w at two refinement levels. The kernel is singular at w = v, so the
// quadrature subtracts [m(v) + grad m(v).(w-v)] exp(-|w-v|^2/a^2), whose
// kernel integral is -a^2/6 grad m(v) (the monopole part vanishes by
// symmetry); the residual integrand is bounded and midpoint converges
// cleanly.

struct AsymFieldResult {
  std::vector<Vec3> field;     // finer level
  double refine_diff = 0.0;    // sup |E_n - E_2n| over targets
  bool converged = true;
};

namespace detail {

inline std::vector<Vec3> marginal_kernel_quadrature(const Profile& prof,
                                                    const std::vector<Vec3>& targets, double L,
                                                    int n) {
  const double h = 2.0 * L / n;
  const double vol = h * h * h;
  const double a = std::max(2.5 * h, std::min(0.35, L / 8.0));
  const double a2 = a * a;
  const double gh = 1e-5 * std::max(1.0, L);
  std::vector<Vec3> out(targets.size(), Vec3::Zero());
  std::vector<double> mv(targets.size());
  std::vector<Vec3> gv(targets.size());
  for (size_t t = 0; t < targets.size(); ++t) {
    mv[t] = prof.marginal_sq_second(targets[t]);
    for (int c = 0; c < 3; ++c) {
      Vec3 p = targets[t], q = targets[t];
      p[c] += gh;
      q[c] -= gh;
      gv[t][c] = (prof.marginal_sq_second(p) - prof.marginal_sq_second(q)) / (2 * gh);
    }
  }
  std::vector<KahanSum> acc(3 * targets.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) {
        const Vec3 w(-L + (i + 0.5) * h, -L + (j + 0.5) * h, -L + (k + 0.5) * h);
        const double m = prof.marginal_sq_second(w);
        for (size_t t = 0; t < targets.size(); ++t) {
          const Vec3 u = w - targets[t];
          const double r2 = u.squaredNorm();
          if (r2 < 1e-16 * h * h) continue;  // residual vanishes quadratically there
          const double sub = (r2 < 16 * a2) ? (mv[t] + gv[t].dot(u)) * std::exp(-r2 / a2) : 0.0;
          const double q = (m - sub) * vol / (r2 * std::sqrt(r2));
          acc[3 * t].add(-q * u.x());
          acc[3 * t + 1].add(-q * u.y());
          acc[3 * t + 2].add(-q * u.z());
        }
      }
  for (size_t t = 0; t < targets.size(); ++t) {
    out[t] = Vec3(acc[3 * t].value(), acc[3 * t + 1].value(), acc[3 * t + 2].value()) / kFourPi;
    out[t] -= a2 / 6.0 * gv[t];
  }
  return out;
}

}  // namespace detail

inline AsymFieldResult asymptotic_field(const Profile& prof, const std::vector<Vec3>& targets,
                                        int n_coarse = 32, double tol = 1e-3) {
  AsymFieldResult out;
  if (prof.is_point_mass()) {
    out.field.resize(targets.size());
    const Vec3 c = prof.point_center();
    const double M = prof.point_mass();
    for (size_t i = 0; i < targets.size(); ++i) {
      const Vec3 d = targets[i] - c;
      const double r = d.norm();
      if (r == 0.0) throw NumericalGuard("asymptotic_field: target on the point mass");
      out.field[i] = M * d / (kFourPi * r * r * r);
    }
    return out;
  }
  const double L = prof.support_radius_b();
  const auto coarse = detail::marginal_kernel_quadrature(prof, targets, L, n_coarse);
  out.field = detail::marginal_kernel_quadrature(prof, targets, L, 2 * n_coarse);
  double scale = 0.0;
  for (const Vec3& e : out.field) scale = std::max(scale, e.norm());
  for (size_t i = 0; i < targets.size(); ++i)
    out.refine_diff = std::max(out.refine_diff, (out.field[i] - coarse[i]).norm());
  out.converged = (scale == 0.0) || (out.refine_diff <= tol * std::max(scale, 1e-300));
  return out;
}

}  // namespace vpscat
