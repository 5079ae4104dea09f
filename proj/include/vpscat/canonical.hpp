// Canonical change of variables between the inverted chart (s,q,p) and the
// chart (s,w,z) adapted to the singular time, generated by
//   S(s,w,p) = w.p + s|p|^2/2 + lambda ln(s) phi0(w),   E0 = -grad phi0.
//
// Written in terms of E0 throughout:
//   w = q - s p                      q = w + s z + lambda s ln(s) E0(w)
//   z = p - lambda ln(s) E0(w)       p = z + lambda ln(s) E0(w)
//
// The lambda passed here is the effective coupling (0 when forces are off),
// so the free shear is recovered exactly in decoupled runs.
#pragma once

#include "vpscat/asymptotic.hpp"
#include "vpscat/core.hpp"
#include "vpscat/field.hpp"
#include "vpscat/phase_space.hpp"

#include <utility>

namespace vpscat {

struct CanonicalPoint {
  Vec3 w, z;
};
struct InvertedPoint {
  Vec3 q, p;
};

inline CanonicalPoint to_canonical(double s, const Vec3& q, const Vec3& p,
                                   const AsymptoticData& asym, double lambda) {
  if (!(s > 0.0)) throw std::domain_error("to_canonical: requires s > 0");
  CanonicalPoint out;
  out.w = q - s * p;
  out.z = p - lambda * std::log(s) * asym.E0(out.w);
  return out;
}

inline InvertedPoint from_canonical(double s, const Vec3& w, const Vec3& z,
                                    const AsymptoticData& asym, double lambda) {
  if (!(s > 0.0)) throw std::domain_error("from_canonical: requires s > 0");
  const Vec3 e0 = asym.E0(w);
  const double ls = std::log(s);
  InvertedPoint out;
  out.q = w + s * z + lambda * s * ls * e0;
  out.p = z + lambda * ls * e0;
  return out;
}

// Spatial pushforward q(s,w,z); admits s = 0 (s ln s -> 0), where q = w.
inline Vec3 position_from_canonical(double s, const Vec3& w, const Vec3& z,
                                    const AsymptoticData& asym, double lambda) {
  if (s < 0.0) throw std::domain_error("position_from_canonical: requires s >= 0");
  if (s == 0.0) return w;
  return w + s * z + lambda * s * std::log(s) * asym.E0(w);
}

// d(w,z)/d(q,p) = [ I, -sI; -lambda ln(s) dE0, I + lambda s ln(s) dE0 ],
// unit determinant by the Schur identity.
inline Mat6 jacobian_canonical(double s, const Vec3& w, const AsymptoticData& asym, double lambda) {
  if (!(s > 0.0)) throw std::domain_error("jacobian_canonical: requires s > 0");
  const double ls = std::log(s);
  const Mat3 G = asym.gradE0(w);
  Mat6 J = Mat6::Zero();
  J.block<3, 3>(0, 0) = Mat3::Identity();
  J.block<3, 3>(0, 3) = -s * Mat3::Identity();
  J.block<3, 3>(3, 0) = -lambda * ls * G;
  J.block<3, 3>(3, 3) = Mat3::Identity() + lambda * s * ls * G;
  return J;
}

// The asymptotic frame map (q,p) |-> (q + p s + lambda s ln(s) E0(q),
//                                     p + lambda ln(s) E0(q));
// algebraically the same map as from_canonical with (w,z) read as (q,p).
inline InvertedPoint modified_frame(double s, const Vec3& q, const Vec3& p,
                                    const AsymptoticData& asym, double lambda) {
  if (!(s > 0.0) || s > 1.0) throw std::domain_error("modified_frame: requires s in (0,1]");
  const Vec3 e0 = asym.E0(q);
  const double ls = std::log(s);
  InvertedPoint out;
  out.q = q + p * s + lambda * s * ls * e0;
  out.p = p + lambda * ls * e0;
  return out;
}

// Exact closed-form inverse of the frame map (same algebra as to_canonical).
inline InvertedPoint modified_frame_inverse(double s, const Vec3& Q, const Vec3& P,
                                            const AsymptoticData& asym, double lambda) {
  if (!(s > 0.0)) throw std::domain_error("modified_frame_inverse: requires s > 0");
  InvertedPoint out;
  out.q = Q - s * P;
  out.p = P - lambda * std::log(s) * asym.E0(out.q);
  return out;
}

// Kernel sources for a canonical-chart ensemble: positions are the spatial
// pushforwards q(s,w,z).
inline FieldSources build_sources_canonical(const Ensemble& e, double s,
                                            const AsymptoticData& asym, double lambda) {
  if (e.chart != Chart::canonical)
    throw std::invalid_argument("build_sources_canonical: canonical chart required");
  FieldSources out;
  out.reserve(e.size(), false);
  for (const Sample& sm : e.samples) {
    const Vec3 q = position_from_canonical(s, sm.current.position, sm.current.momentum, asym, lambda);
    out.push(q, sm.weight * sm.value * sm.value, sm.group);
  }
  if (!out.group.empty() && out.group.size() != out.x.size())
    throw std::invalid_argument("build_sources_canonical: mixed grouped/ungrouped samples");
  return out;
}

// Canonical ensemble -> inverted chart at time s (from_canonical per sample).
inline Ensemble canonical_to_inverted(const Ensemble& e, double s, const AsymptoticData& asym,
                                      double lambda) {
  if (e.chart != Chart::canonical)
    throw std::invalid_argument("canonical_to_inverted: canonical chart required");
  Ensemble out = e;
  out.chart = Chart::inverted;
  out.time = s;
  for (Sample& sm : out.samples) {
    const InvertedPoint ip = from_canonical(s, sm.current.position, sm.current.momentum, asym, lambda);
    sm.current.position = ip.q;
    sm.current.momentum = ip.p;
    sm.current.chart = Chart::inverted;
    sm.current.time = s;
  }
  return out;
}

// Inverted ensemble -> canonical chart at time s.
inline Ensemble inverted_to_canonical(const Ensemble& e, double s, const AsymptoticData& asym,
                                      double lambda) {
  if (e.chart != Chart::inverted)
    throw std::invalid_argument("inverted_to_canonical: inverted chart required");
  Ensemble out = e;
  out.chart = Chart::canonical;
  out.time = s;
  for (Sample& sm : out.samples) {
    const CanonicalPoint cp = to_canonical(s, sm.current.position, sm.current.momentum, asym, lambda);
    sm.current.position = cp.w;
    sm.current.momentum = cp.z;
    sm.current.chart = Chart::canonical;
    sm.current.time = s;
  }
  return out;
}

}  // namespace vpscat
