// Coordinate charts and ensemble bookkeeping.
//
// Conventions used throughout:
//   physical chart  (t, x, v)  -- lab frame
//   inverted chart  (s, q, p)  -- image under the inversion
//                                 (t,x,v) |-> (1/t, x/t, x - t v),
//                                 an involution, singular at t = 0
//   canonical chart (s, w, z)  -- see canonical.hpp
//
// Distributions are carried as weighted characteristic samples: the value is
// the transported function value at the sample's label point and the weight
// is the initial phase-space cell volume. All flows used here are
// volume-preserving, so neither field is ever mutated after sampling.
#pragma once

#include "vpscat/core.hpp"

#include <array>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

namespace vpscat {

enum class Chart { physical, inverted, canonical };

inline const char* chart_name(Chart c) {
  switch (c) {
    case Chart::physical: return "physical";
    case Chart::inverted: return "inverted";
    case Chart::canonical: return "canonical";
  }
  return "?";
}

inline Chart chart_from_name(const std::string& s) {
  if (s == "physical") return Chart::physical;
  if (s == "inverted") return Chart::inverted;
  if (s == "canonical") return Chart::canonical;
  throw ConfigError("unknown chart tag: " + s);
}

struct PhasePoint {
  Vec3 position = Vec3::Zero();
  Vec3 momentum = Vec3::Zero();
  Chart chart = Chart::physical;
  double time = 1.0;
};

// Pseudo-conformal inversion. The same algebra maps physical -> inverted and
// back; the chart tag toggles. Negative or zero time is outside the domain.
inline PhasePoint invert(const PhasePoint& pt) {
  if (pt.chart == Chart::canonical)
    throw std::domain_error("invert: canonical chart is not in the domain of the inversion");
  if (!(pt.time > 0.0))
    throw std::domain_error("invert: time must be positive (map is singular at t = " +
                            std::to_string(pt.time) + ")");
  PhasePoint out;
  out.time = 1.0 / pt.time;
  out.position = pt.position / pt.time;
  out.momentum = pt.position - pt.time * pt.momentum;
  out.chart = (pt.chart == Chart::physical) ? Chart::inverted : Chart::physical;
  return out;
}

// Gradient compression weight theta(s,z) = <z> / (1 + s<z>).
// Satisfies (for s > 0)  min{<z>, 1/s}/2 <= theta <= min{<z>, 1/s}.
inline double theta_weight(double s, const Vec3& z) {
  const double zb = japanese_bracket(z);
  return zb / (1.0 + s * zb);
}
inline double theta_weight(double s, double zb) { return zb / (1.0 + s * zb); }

struct Sample {
  PhasePoint label;    // initial-data coordinates, never mutated
  PhasePoint current;  // evolves along the characteristic
  double value = 0.0;  // transported distribution value, constant
  double weight = 0.0; // initial cell volume, constant
  long long group = -1;  // initial spatial-cell id (field self-exclusion unit)
};

struct Ensemble {
  std::vector<Sample> samples;
  Chart chart = Chart::physical;
  double time = 1.0;
  double lambda = 1.0;  // +1 repulsive (plasma), -1 attractive (gravity)
  double total_charge = 0.0;  // cached  sum_k weight_k * value_k^2

  size_t size() const { return samples.size(); }

  double recompute_charge() const {
    KahanSum acc;
    for (const Sample& s : samples) acc.add(s.weight * s.value * s.value);
    return acc.value();
  }

  void refresh_charge() { total_charge = recompute_charge(); }

  void set_time(double t) {
    time = t;
    for (Sample& s : samples) s.current.time = t;
  }
};

// Tensor-product sampling grid: per-axis extents and counts over the six
// phase-space axes (three position-like, three momentum-like). Cell-centered.
struct GridSpec {
  std::array<double, 6> lo{-4, -4, -4, -4, -4, -4};
  std::array<double, 6> hi{4, 4, 4, 4, 4, 4};
  std::array<int, 6> n{8, 8, 8, 8, 8, 8};

  long long total_cells() const {
    long long t = 1;
    for (int c : n) t *= c;
    return t;
  }
  double cell_volume() const {
    double v = 1.0;
    for (int a = 0; a < 6; ++a) v *= (hi[a] - lo[a]) / n[a];
    return v;
  }
  double center(int axis, int i) const {
    const double h = (hi[axis] - lo[axis]) / n[axis];
    return lo[axis] + (i + 0.5) * h;
  }
};

// Samples a scalar profile f(a,b) on the tensor grid. Cells whose |value|
// falls below cutoff_rel * max|value| are dropped to keep N tractable; the
// cutoff is part of run metadata upstream.
inline Ensemble sample_profile(const std::function<double(const Vec3&, const Vec3&)>& profile,
                               Chart chart, double time, double lambda, const GridSpec& grid,
                               double cutoff_rel = 1e-8) {
  for (int a = 0; a < 6; ++a) {
    if (grid.n[a] <= 0 || !(grid.hi[a] > grid.lo[a]))
      throw std::invalid_argument("sample_profile: empty or inverted grid axis");
  }
  const double w = grid.cell_volume();
  std::vector<double> vals;
  vals.reserve(static_cast<size_t>(grid.total_cells()));
  double vmax = 0.0;
  std::array<int, 6> idx{};
  // first pass: evaluate everything, track the max for the cutoff
  for (idx[0] = 0; idx[0] < grid.n[0]; ++idx[0])
    for (idx[1] = 0; idx[1] < grid.n[1]; ++idx[1])
      for (idx[2] = 0; idx[2] < grid.n[2]; ++idx[2])
        for (idx[3] = 0; idx[3] < grid.n[3]; ++idx[3])
          for (idx[4] = 0; idx[4] < grid.n[4]; ++idx[4])
            for (idx[5] = 0; idx[5] < grid.n[5]; ++idx[5]) {
              const Vec3 a(grid.center(0, idx[0]), grid.center(1, idx[1]), grid.center(2, idx[2]));
              const Vec3 b(grid.center(3, idx[3]), grid.center(4, idx[4]), grid.center(5, idx[5]));
              const double v = profile(a, b);
              vals.push_back(v);
              vmax = std::max(vmax, std::abs(v));
            }
  Ensemble e;
  e.chart = chart;
  e.time = time;
  e.lambda = lambda;
  const double cut = cutoff_rel * vmax;
  size_t flat = 0;
  for (idx[0] = 0; idx[0] < grid.n[0]; ++idx[0])
    for (idx[1] = 0; idx[1] < grid.n[1]; ++idx[1])
      for (idx[2] = 0; idx[2] < grid.n[2]; ++idx[2])
        for (idx[3] = 0; idx[3] < grid.n[3]; ++idx[3])
          for (idx[4] = 0; idx[4] < grid.n[4]; ++idx[4])
            for (idx[5] = 0; idx[5] < grid.n[5]; ++idx[5]) {
              const double v = vals[flat++];
              if (std::abs(v) <= cut || v == 0.0) continue;
              Sample s;
              s.label.position = Vec3(grid.center(0, idx[0]), grid.center(1, idx[1]), grid.center(2, idx[2]));
              s.label.momentum = Vec3(grid.center(3, idx[3]), grid.center(4, idx[4]), grid.center(5, idx[5]));
              s.label.chart = chart;
              s.label.time = time;
              s.current = s.label;
              s.value = v;
              s.weight = w;
              s.group = (static_cast<long long>(idx[0]) * grid.n[1] + idx[1]) * grid.n[2] + idx[2];
              e.samples.push_back(s);
            }
  e.refresh_charge();
  return e;
}

// Momentum reflection implementing time reversal: if mu(t,x,v) solves the
// system then so does mu(-t,x,-v), with the same coupling sign. Values and
// weights are untouched; the time stamp flips sign.
inline Ensemble time_reflect(const Ensemble& e) {
  if (e.chart != Chart::physical)
    throw std::invalid_argument("time_reflect: physical chart required");
  Ensemble out = e;
  out.time = -e.time;
  for (Sample& s : out.samples) {
    s.current.momentum = -s.current.momentum;
    s.current.time = -s.current.time;
    s.label.momentum = -s.label.momentum;
  }
  return out;
}

// Maps every sample's current point through the inversion and toggles the
// ensemble chart. Labels stay in the chart they were sampled in; weights and
// values ride along unchanged (the inversion is volume preserving).
inline Ensemble invert_ensemble(const Ensemble& e) {
  Ensemble out = e;
  if (e.samples.empty()) {
    if (!(e.time > 0.0)) throw std::domain_error("invert_ensemble: time must be positive");
    out.chart = (e.chart == Chart::physical) ? Chart::inverted : Chart::physical;
    out.time = 1.0 / e.time;
    return out;
  }
  for (Sample& s : out.samples) s.current = invert(s.current);
  out.chart = out.samples.front().current.chart;
  out.time = out.samples.front().current.time;
  return out;
}

// --- snapshot format ------------------------------------------------------
// Header:  # chart=<tag> time=<s> lambda=<+1|-1> n=<N>
// Row:     label(6) current(6) value weight     (17 significant digits)

inline void write_snapshot(std::ostream& os, const Ensemble& e) {
  char buf[64];
  auto put = [&](double x) {
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    os << buf;
  };
  std::snprintf(buf, sizeof(buf), "%.17g", e.time);
  os << "# chart=" << chart_name(e.chart) << " time=" << buf
     << " lambda=" << (e.lambda > 0 ? "+1" : "-1") << " n=" << e.samples.size() << "\n";
  for (const Sample& s : e.samples) {
    const double cols[14] = {s.label.position.x(),   s.label.position.y(),   s.label.position.z(),
                             s.label.momentum.x(),   s.label.momentum.y(),   s.label.momentum.z(),
                             s.current.position.x(), s.current.position.y(), s.current.position.z(),
                             s.current.momentum.x(), s.current.momentum.y(), s.current.momentum.z(),
                             s.value,                s.weight};
    for (int c = 0; c < 14; ++c) {
      if (c) os << ' ';
      put(cols[c]);
    }
    os << "\n";
  }
}

inline void write_snapshot_file(const std::string& path, const Ensemble& e) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open snapshot file for writing: " + path);
  write_snapshot(f, e);
}

inline Ensemble read_snapshot(std::istream& is) {
  std::string header;
  if (!std::getline(is, header)) throw std::runtime_error("snapshot: missing header");
  Ensemble e;
  {
    std::istringstream hs(header);
    std::string tok;
    hs >> tok;  // '#'
    if (tok != "#") throw std::runtime_error("snapshot: bad header");
    size_t n = 0;
    while (hs >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
      if (key == "chart") e.chart = chart_from_name(val);
      else if (key == "time") e.time = std::stod(val);
      else if (key == "lambda") e.lambda = std::stod(val);
      else if (key == "n") n = std::stoul(val);
    }
    e.samples.reserve(n);
  }
  double c[14];
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    for (int i = 0; i < 14; ++i)
      if (!(ls >> c[i])) throw std::runtime_error("snapshot: short row");
    Sample s;
    s.label.position = Vec3(c[0], c[1], c[2]);
    s.label.momentum = Vec3(c[3], c[4], c[5]);
    s.current.position = Vec3(c[6], c[7], c[8]);
    s.current.momentum = Vec3(c[9], c[10], c[11]);
    s.value = c[12];
    s.weight = c[13];
    s.current.chart = e.chart;
    s.current.time = e.time;
    e.samples.push_back(s);
  }
  e.refresh_charge();
  return e;
}

inline Ensemble read_snapshot_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open snapshot file: " + path);
  return read_snapshot(f);
}

}  // namespace vpscat
