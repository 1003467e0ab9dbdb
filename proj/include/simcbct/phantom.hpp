#pragma once

// Analytic test phantoms: rasterized HU volumes plus closed-form geometry so
// oracles can evaluate exact line integrals.

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "simcbct/volume.hpp"

namespace simcbct {

enum class PhantomKind { water_cylinder, pelvic_ellipsoid };
enum class InsertShape { sphere, cylinder };

struct PhantomInsert {
  InsertShape shape = InsertShape::cylinder;
  Vec3 center{};  // mm, relative to the body center
  double radius = 10;
  double hu = 0;
  bool surrogate = false;  // part of the motion surrogate structure
};

struct PhantomSpec {
  PhantomKind kind = PhantomKind::water_cylinder;
  double body_radius = 100;    // x semi-axis (mm)
  double body_radius_y = 0;    // y semi-axis; 0 means circular
  double half_length = 0;      // body half extent along z; 0 spans the grid
  double body_hu = 0;
  std::vector<PhantomInsert> inserts;
  double background_hu = kAirHU;

  static PhantomSpec water_cylinder(double radius = 100) {
    PhantomSpec s;
    s.kind = PhantomKind::water_cylinder;
    s.body_radius = radius;
    return s;
  }

  /// Elliptic pelvis-like body with a posterior sacrum, two lateral hip bones
  /// and an anterior contrast-filled surrogate. Anterior is +y, matching the
  /// default motion axis.
  static PhantomSpec pelvic(double radius = 170) {
    PhantomSpec s;
    s.kind = PhantomKind::pelvic_ellipsoid;
    s.body_radius = radius;
    s.body_radius_y = radius * 0.68;
    s.body_hu = 40;
    const double k = radius / 170.0;
    s.inserts = {
        {InsertShape::cylinder, {0, -70 * k, 0}, 22 * k, 700, false},
        {InsertShape::cylinder, {-105 * k, -20 * k, 0}, 25 * k, 800, false},
        {InsertShape::cylinder, {105 * k, -20 * k, 0}, 25 * k, 800, false},
        {InsertShape::sphere, {0, 30 * k, 0}, 55 * k, 150, true},
    };
    return s;
  }
};

/// Closed-form description of a rasterized phantom.
class AnalyticPhantom {
 public:
  AnalyticPhantom() = default;
  AnalyticPhantom(PhantomSpec spec, Vec3 center, double z_lo, double z_hi)
      : spec_(std::move(spec)), center_(center), z_lo_(z_lo), z_hi_(z_hi) {}

  const PhantomSpec& spec() const { return spec_; }
  Vec3 center() const { return center_; }
  double z_lo() const { return z_lo_; }
  double z_hi() const { return z_hi_; }
  double rx() const { return spec_.body_radius; }
  double ry() const { return spec_.body_radius_y > 0 ? spec_.body_radius_y : spec_.body_radius; }

  bool in_body(Vec3 p) const {
    const double dx = (p.x - center_.x) / rx(), dy = (p.y - center_.y) / ry();
    return dx * dx + dy * dy <= 1.0 && p.z >= z_lo_ && p.z <= z_hi_;
  }
  bool in_insert(const PhantomInsert& ins, Vec3 p) const {
    const Vec3 c = center_ + ins.center;
    if (ins.shape == InsertShape::sphere) {
      const Vec3 d = p - c;
      return dot(d, d) <= ins.radius * ins.radius;
    }
    const double dx = p.x - c.x, dy = p.y - c.y;
    return dx * dx + dy * dy <= ins.radius * ins.radius && p.z >= z_lo_ && p.z <= z_hi_;
  }

  double hu_at(Vec3 p) const {
    if (!in_body(p)) return spec_.background_hu;
    double hu = spec_.body_hu;
    for (const auto& ins : spec_.inserts)
      if (in_insert(ins, p)) hu = ins.hu;
    return hu;
  }

  /// Exact chord length of segment a->b inside the body.
  double body_chord(Vec3 a, Vec3 b) const {
    return ellipse_cylinder_chord(a, b, {center_.x, center_.y}, rx(), ry());
  }

  /// Exact line integral of attenuation along segment a->b. Inserts are
  /// assumed disjoint (the built-in specs are).
  double line_integral(Vec3 a, Vec3 b, double mu_water = kDefaultMuWater) const {
    auto mu = [&](double hu) { return std::max(0.0, mu_water * (hu + 1000.0) / 1000.0); };
    const double mu_body = mu(spec_.body_hu);
    double total = mu_body * body_chord(a, b);
    for (const auto& ins : spec_.inserts) {
      const Vec3 c = center_ + ins.center;
      const double len = ins.shape == InsertShape::sphere
                             ? sphere_chord(a, b, c, ins.radius)
                             : ellipse_cylinder_chord(a, b, {c.x, c.y}, ins.radius, ins.radius);
      total += (mu(ins.hu) - mu_body) * len;
    }
    return total;
  }

 private:
  // Parameter interval t in [t0,t1] (subset of [0,1]) where q(t) <= 0 for
  // q(t) = A t^2 + B t + C. Returns false if empty.
  static bool quadratic_interval(double A, double B, double C, double& t0, double& t1) {
    if (A <= 0) {
      if (C > 0) return false;
      t0 = 0;
      t1 = 1;
      return true;
    }
    const double disc = B * B - 4 * A * C;
    if (disc <= 0) return false;
    const double sq = std::sqrt(disc);
    t0 = (-B - sq) / (2 * A);
    t1 = (-B + sq) / (2 * A);
    return true;
  }

  double ellipse_cylinder_chord(Vec3 a, Vec3 b, std::pair<double, double> c, double ex,
                                double ey) const {
    const Vec3 d = b - a;
    const double ax = (a.x - c.first) / ex, ay = (a.y - c.second) / ey;
    const double dx = d.x / ex, dy = d.y / ey;
    double t0, t1;
    if (!quadratic_interval(dx * dx + dy * dy, 2 * (ax * dx + ay * dy), ax * ax + ay * ay - 1,
                            t0, t1))
      return 0;
    // z slab
    if (d.z != 0) {
      double s0 = (z_lo_ - a.z) / d.z, s1 = (z_hi_ - a.z) / d.z;
      if (s0 > s1) std::swap(s0, s1);
      t0 = std::max(t0, s0);
      t1 = std::min(t1, s1);
    } else if (a.z < z_lo_ || a.z > z_hi_) {
      return 0;
    }
    t0 = std::max(t0, 0.0);
    t1 = std::min(t1, 1.0);
    return t1 > t0 ? (t1 - t0) * norm(d) : 0.0;
  }

  static double sphere_chord(Vec3 a, Vec3 b, Vec3 c, double r) {
    const Vec3 d = b - a, f = a - c;
    double t0, t1;
    if (!quadratic_interval(dot(d, d), 2 * dot(f, d), dot(f, f) - r * r, t0, t1)) return 0;
    t0 = std::max(t0, 0.0);
    t1 = std::min(t1, 1.0);
    return t1 > t0 ? (t1 - t0) * norm(d) : 0.0;
  }

  PhantomSpec spec_;
  Vec3 center_{};
  double z_lo_ = 0, z_hi_ = 0;
};

struct Phantom {
  Volume3D volume;           // HU
  AnalyticPhantom analytic;
  BinaryMask surrogate;      // union of surrogate inserts (may be empty)
};

inline void validate(const PhantomSpec& s) {
  if (!(s.body_radius > 0) || s.body_radius_y < 0 || s.half_length < 0)
    throw Error(ErrorKind::precondition, "phantom: body dimensions must be positive");
  auto hu_ok = [](double hu) { return hu >= -1024.0 && hu <= 3071.0; };
  if (!hu_ok(s.body_hu) || !hu_ok(s.background_hu))
    throw Error(ErrorKind::precondition, "phantom: HU outside [-1024, 3071]");
  const double rx = s.body_radius, ry = s.body_radius_y > 0 ? s.body_radius_y : s.body_radius;
  for (const auto& ins : s.inserts) {
    if (!(ins.radius > 0) || !hu_ok(ins.hu))
      throw Error(ErrorKind::precondition, "phantom: invalid insert");
    constexpr int kSteps = 256;
    for (int t = 0; t < kSteps; ++t) {
      const double ang = 2 * M_PI * t / kSteps;
      const double px = ins.center.x + ins.radius * std::cos(ang);
      const double py = ins.center.y + ins.radius * std::sin(ang);
      if ((px / rx) * (px / rx) + (py / ry) * (py / ry) > 1.0)
        throw Error(ErrorKind::precondition, "phantom: insert extends outside the body");
    }
    if (s.half_length > 0 && ins.shape == InsertShape::sphere &&
        std::abs(ins.center.z) + ins.radius > s.half_length)
      throw Error(ErrorKind::precondition, "phantom: insert extends outside the body");
  }
}

/// Rasterize by voxel-center inclusion. The body is centered on the grid
/// center; without a half_length it spans the grid's full z extent.
inline Phantom make_phantom(const PhantomSpec& spec, const Grid& grid) {
  validate(spec);
  grid.validate();
  const Vec3 c = grid.center();
  double z_lo = grid.origin.z - 0.5 * grid.spacing.z;
  double z_hi = grid.origin.z + (grid.dims[2] - 0.5) * grid.spacing.z;
  if (spec.half_length > 0) {
    z_lo = c.z - spec.half_length;
    z_hi = c.z + spec.half_length;
  }
  Phantom ph{Volume3D(grid, Unit::hu), AnalyticPhantom(spec, c, z_lo, z_hi), BinaryMask(grid)};
  const AnalyticPhantom& a = ph.analytic;
#pragma omp parallel for schedule(static)
  for (int k = 0; k < grid.dims[2]; ++k)
    for (int j = 0; j < grid.dims[1]; ++j)
      for (int i = 0; i < grid.dims[0]; ++i) {
        const Vec3 p = grid.world(i, j, k);
        ph.volume(i, j, k) = static_cast<float>(a.hu_at(p));
        bool sur = false;
        if (a.in_body(p))
          for (const auto& ins : spec.inserts) sur = sur || (ins.surrogate && a.in_insert(ins, p));
        ph.surrogate.set(i, j, k, sur);
      }
  return ph;
}

inline const char* to_string(PhantomKind k) {
  return k == PhantomKind::water_cylinder ? "water_cylinder" : "pelvic_ellipsoid";
}

}  // namespace simcbct
