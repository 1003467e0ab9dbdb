#pragma once

// Dynamic X-ray acquisition: circular cone-beam geometry, ray-marched line
// integrals, bowtie beam profile, Beer-Lambert transmission, heuristic
// scatter, Poisson noise and log conversion with detector saturation.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "simcbct/motion.hpp"
#include "simcbct/volume.hpp"

namespace simcbct {

/// 2-D detector array, u fastest (row = fixed v).
struct Image2D {
  int nu = 0, nv = 0;
  std::vector<float> data;

  Image2D() = default;
  Image2D(int nu_, int nv_, float value = 0.f)
      : nu(nu_), nv(nv_), data(static_cast<std::size_t>(nu_) * nv_, value) {}

  float& operator()(int iu, int iv) { return data[static_cast<std::size_t>(iv) * nu + iu]; }
  float operator()(int iu, int iv) const { return data[static_cast<std::size_t>(iv) * nu + iu]; }
  std::size_t size() const { return data.size(); }
  bool same_shape(const Image2D& o) const { return nu == o.nu && nv == o.nv; }
};

struct ScannerGeometry {
  int nu = 512, nv = 512;           // detector pixels
  double du = 0.8, dv = 0.8;        // detector spacing (mm)
  double sdd = 1536;                // source-to-detector
  double sad = 1000;                // source-to-axis
  double offset = 115;              // lateral detector shift along u (mm)
  double start_angle = -180, stop_angle = 180, angle_increment = 0.54;  // deg
  std::optional<int> num_projections;  // pins N instead of rounding
  Vec3 rotation_center{};

  int projection_count() const {
    if (num_projections) return *num_projections;
    return static_cast<int>(std::lround((stop_angle - start_angle) / angle_increment));
  }
  /// Angles are spread uniformly over the arc (half-open, no duplicate end).
  double angle_deg(int i) const {
    return start_angle + i * (stop_angle - start_angle) / projection_count();
  }
  double width() const { return nu * du; }
  double height() const { return nv * dv; }
  /// Detector coordinates measured from the piercing point of the central ray.
  double u_of(double iu) const { return offset + (iu - 0.5 * (nu - 1)) * du; }
  double v_of(double iv) const { return (iv - 0.5 * (nv - 1)) * dv; }
  double iu_of(double u) const { return (u - offset) / du + 0.5 * (nu - 1); }
  double iv_of(double v) const { return v / dv + 0.5 * (nv - 1); }

  void validate() const {
    if (nu < 1 || nv < 1 || !(du > 0) || !(dv > 0))
      throw Error(ErrorKind::geometry, "detector pixels and spacing must be positive");
    if (!(sad > 0) || !(sdd > sad)) throw Error(ErrorKind::geometry, "require SDD > SAD > 0");
    if (!(angle_increment > 0) && !num_projections)
      throw Error(ErrorKind::geometry, "angle increment must be > 0");
    if (projection_count() < 1) throw Error(ErrorKind::geometry, "projection count must be >= 1");
  }
};

struct PhysicsParams {
  double phi = 4.16e5;         // photons / (mm^2 mAs)
  double tube_current = 40;    // mA
  double exposure_time = 40;   // ms
  double spr = 1.6;
  double c_sat = 2.0;
  double mu_water = kDefaultMuWater;
  bool noise_enabled = true;
  bool scatter_enabled = true;
  std::uint64_t seed = 0;

  double mAs() const { return tube_current * exposure_time / 1000.0; }
  void validate() const {
    if (!(phi > 0) || !(tube_current > 0) || !(exposure_time > 0) || !(spr >= 0) || !(c_sat > 0) ||
        !(mu_water > 0))
      throw Error(ErrorKind::precondition, "physics parameters must be positive");
  }
};

struct BeamProfile {
  double amplitude = 0.3;
  double sigma_u = 102.4;  // mm
  double center_u = 0;     // mm, detector u coordinate (0 = central ray)
  double baseline = 0.7;

  /// Default bowtie: centered on the central ray, sigma = detector width / 4.
  static BeamProfile default_for(const ScannerGeometry& g) {
    BeamProfile b;
    b.sigma_u = g.width() / 4.0;
    b.center_u = 0.0;
    return b;
  }
  double raw(double u) const {
    return baseline + amplitude * std::exp(-(u - center_u) * (u - center_u) / (2 * sigma_u * sigma_u));
  }
};

enum class ValueKind { line_integral, counts, log_attenuation };

inline const char* to_string(ValueKind k) {
  switch (k) {
    case ValueKind::line_integral: return "line_integral";
    case ValueKind::counts: return "counts";
    case ValueKind::log_attenuation: return "log_attenuation";
  }
  return "unknown";
}

struct Projection {
  int index = 0;
  double angle_deg = 0;
  double breathing_state = 0;
  double eps_ms = 0;
  Image2D data;
};

struct ProjectionStack {
  ValueKind kind = ValueKind::log_attenuation;
  std::vector<Projection> projections;

  std::size_t size() const { return projections.size(); }
};

// ---------------------------------------------------------------------------
// Geometry

struct DetectorPose {
  Vec3 source;
  Vec3 direction;        // unit, source -> rotation center
  Vec3 piercing_point;   // central ray on the detector plane
  Vec3 detector_center;  // piercing point shifted by the offset along u
  Vec3 u_axis, v_axis;

  Vec3 pixel(const ScannerGeometry& g, double iu, double iv) const {
    return piercing_point + g.u_of(iu) * u_axis + g.v_of(iv) * v_axis;
  }
};

inline DetectorPose source_detector_pose(const ScannerGeometry& g, double theta_deg) {
  const double th = theta_deg * M_PI / 180.0;
  DetectorPose p;
  p.direction = {std::cos(th), std::sin(th), 0.0};
  p.source = g.rotation_center - g.sad * p.direction;
  p.piercing_point = p.source + g.sdd * p.direction;
  p.v_axis = {0, 0, 1};
  p.u_axis = cross(p.v_axis, p.direction);
  p.detector_center = p.piercing_point + g.offset * p.u_axis;
  return p;
}

// ---------------------------------------------------------------------------
// Ray casting

namespace detail {

// Trilinear sample in index space with zero outside the grid.
inline float sample_zero(const float* v, int nx, int ny, int nz, double x, double y, double z) {
  const double fx = std::floor(x), fy = std::floor(y), fz = std::floor(z);
  const int i = static_cast<int>(fx), j = static_cast<int>(fy), k = static_cast<int>(fz);
  const float tx = static_cast<float>(x - fx), ty = static_cast<float>(y - fy), tz = static_cast<float>(z - fz);
  const std::size_t sx = 1, sy = static_cast<std::size_t>(nx), sz = static_cast<std::size_t>(nx) * ny;
  if (i >= 0 && j >= 0 && k >= 0 && i + 1 < nx && j + 1 < ny && k + 1 < nz) {
    const float* p = v + k * sz + j * sy + i;
    const float c00 = p[0] + tx * (p[sx] - p[0]);
    const float c10 = p[sy] + tx * (p[sy + sx] - p[sy]);
    const float c01 = p[sz] + tx * (p[sz + sx] - p[sz]);
    const float c11 = p[sz + sy] + tx * (p[sz + sy + sx] - p[sz + sy]);
    const float c0 = c00 + ty * (c10 - c00);
    const float c1 = c01 + ty * (c11 - c01);
    return c0 + tz * (c1 - c0);
  }
  if (i < -1 || j < -1 || k < -1 || i >= nx || j >= ny || k >= nz) return 0.f;
  auto at = [&](int a, int b, int c) -> float {
    if (a < 0 || b < 0 || c < 0 || a >= nx || b >= ny || c >= nz) return 0.f;
    return v[c * sz + b * sy + a];
  };
  const float c00 = at(i, j, k) + tx * (at(i + 1, j, k) - at(i, j, k));
  const float c10 = at(i, j + 1, k) + tx * (at(i + 1, j + 1, k) - at(i, j + 1, k));
  const float c01 = at(i, j, k + 1) + tx * (at(i + 1, j, k + 1) - at(i, j, k + 1));
  const float c11 = at(i, j + 1, k + 1) + tx * (at(i + 1, j + 1, k + 1) - at(i, j + 1, k + 1));
  const float c0 = c00 + ty * (c10 - c00);
  const float c1 = c01 + ty * (c11 - c01);
  return c0 + tz * (c1 - c0);
}

// Clip parametric segment p0 + t*d (t in [t0,t1]) against [lo,hi] per axis.
inline bool clip_box(const double p0[3], const double d[3], const double lo[3], const double hi[3],
                     double& t0, double& t1) {
  for (int a = 0; a < 3; ++a) {
    if (d[a] == 0.0) {
      if (p0[a] < lo[a] || p0[a] > hi[a]) return false;
      continue;
    }
    double ta = (lo[a] - p0[a]) / d[a], tb = (hi[a] - p0[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 >= t1) return false;
  }
  return true;
}

}  // namespace detail

/// Line-integral ray caster for one attenuation volume. Rays are marched
/// with step min_spacing/2 (midpoint rule) over the ray/volume-box overlap;
/// samples beyond the non-zero support (plus one voxel) are skipped since
/// they are exactly zero.
class RayCaster {
 public:
  explicit RayCaster(const Volume3D& mu, double step_fraction = 0.5)
      : mu_(&mu), step_(mu.grid().min_spacing() * step_fraction) {
    mu.require_unit(Unit::attenuation_per_mm, "raycast_projection");
    const Grid& g = mu.grid();
    int lo[3] = {g.dims[0], g.dims[1], g.dims[2]}, hi[3] = {-1, -1, -1};
    for (int k = 0; k < g.dims[2]; ++k)
      for (int j = 0; j < g.dims[1]; ++j) {
        const float* row = mu.values().data() + g.index(0, j, k);
        for (int i = 0; i < g.dims[0]; ++i) {
          if (row[i] == 0.f) continue;
          lo[0] = std::min(lo[0], i), hi[0] = std::max(hi[0], i);
          lo[1] = std::min(lo[1], j), hi[1] = std::max(hi[1], j);
          lo[2] = std::min(lo[2], k), hi[2] = std::max(hi[2], k);
        }
      }
    empty_ = hi[0] < 0;
    for (int a = 0; a < 3; ++a) {
      box_lo_[a] = -0.5;
      box_hi_[a] = g.dims[a] - 0.5;
      sup_lo_[a] = lo[a] - 1.0;
      sup_hi_[a] = hi[a] + 1.0;
    }
  }

  double step() const { return step_; }

  /// Integral of mu along the segment a -> b (world mm).
  double integrate(Vec3 a, Vec3 b) const {
    if (empty_) return 0.0;
    const Grid& g = mu_->grid();
    const Vec3 ca = g.continuous_index(a), cb = g.continuous_index(b);
    const double p0[3] = {ca.x, ca.y, ca.z};
    const double d[3] = {cb.x - ca.x, cb.y - ca.y, cb.z - ca.z};
    double t0 = 0, t1 = 1;
    if (!detail::clip_box(p0, d, box_lo_, box_hi_, t0, t1)) return 0.0;
    const double seg = norm(b - a) * (t1 - t0);
    const long nsteps = std::max(1L, static_cast<long>(std::ceil(seg / step_ - 1e-9)));
    const double dt = (t1 - t0) / nsteps;

    double s0 = t0, s1 = t1;
    if (!detail::clip_box(p0, d, sup_lo_, sup_hi_, s0, s1)) return 0.0;
    long k0 = static_cast<long>(std::floor((s0 - t0) / dt - 0.5));
    long k1 = static_cast<long>(std::ceil((s1 - t0) / dt - 0.5));
    k0 = std::clamp(k0, 0L, nsteps - 1);
    k1 = std::clamp(k1, 0L, nsteps - 1);

    const float* v = mu_->values().data();
    const int nx = g.dims[0], ny = g.dims[1], nz = g.dims[2];
    double acc = 0;
    for (long k = k0; k <= k1; ++k) {
      const double t = t0 + (k + 0.5) * dt;
      acc += detail::sample_zero(v, nx, ny, nz, p0[0] + t * d[0], p0[1] + t * d[1], p0[2] + t * d[2]);
    }
    return acc * (seg / nsteps);
  }

  Image2D project(const ScannerGeometry& g, double theta_deg) const {
    const DetectorPose pose = source_detector_pose(g, theta_deg);
    Image2D out(g.nu, g.nv);
#pragma omp parallel for schedule(dynamic, 1)
    for (int iv = 0; iv < g.nv; ++iv)
      for (int iu = 0; iu < g.nu; ++iu)
        out(iu, iv) = static_cast<float>(integrate(pose.source, pose.pixel(g, iu, iv)));
    return out;
  }

 private:
  const Volume3D* mu_;
  double step_;
  bool empty_ = true;
  double box_lo_[3], box_hi_[3], sup_lo_[3], sup_hi_[3];
};

inline Image2D raycast_projection(const Volume3D& mu, const ScannerGeometry& g, double theta_deg,
                                  double step_fraction = 0.5) {
  return RayCaster(mu, step_fraction).project(g, theta_deg);
}

// ---------------------------------------------------------------------------
// Beam profile

/// BP(i,j): 1-D Gaussian bowtie along u, normalized to max 1, replicated over v.
inline Image2D beam_profile_array(const BeamProfile& bp, const ScannerGeometry& g) {
  if (!(bp.sigma_u > 0) || bp.amplitude < 0 || bp.baseline < 0 || !(bp.amplitude + bp.baseline > 0))
    throw Error(ErrorKind::precondition, "beam profile parameters invalid");
  std::vector<double> row(g.nu);
  double mx = 0;
  for (int iu = 0; iu < g.nu; ++iu) mx = std::max(mx, row[iu] = bp.raw(g.u_of(iu)));
  Image2D out(g.nu, g.nv);
  for (int iv = 0; iv < g.nv; ++iv)
    for (int iu = 0; iu < g.nu; ++iu) out(iu, iv) = static_cast<float>(row[iu] / mx);
  return out;
}

struct BeamFit {
  BeamProfile profile;
  double residual_rms = 0;
  int iterations = 0;
};

/// Least-squares Gaussian + baseline fit (Levenberg-Marquardt) to the
/// v-averaged measured profile. Parameters come back in detector mm.
inline BeamFit fit_beam_profile(const Image2D& measured, const ScannerGeometry& g) {
  if (measured.nu != g.nu || measured.nv != g.nv)
    throw Error(ErrorKind::precondition, "fit_beam_profile: array does not match detector");
  const int n = measured.nu;
  std::vector<double> x(n), y(n, 0.0);
  for (int iu = 0; iu < n; ++iu) {
    x[iu] = g.u_of(iu);
    for (int iv = 0; iv < measured.nv; ++iv) {
      const double m = measured(iu, iv);
      if (!std::isfinite(m) || m <= 0) throw Error(ErrorKind::precondition, "fit_beam_profile: non-positive measurement");
      y[iu] += m;
    }
    y[iu] /= measured.nv;
  }
  const auto [mn_it, mx_it] = std::minmax_element(y.begin(), y.end());
  const double ymin = *mn_it, ymax = *mx_it;
  double mean = 0;
  for (double v : y) mean += v;
  mean /= n;

  BeamFit fit;
  if (ymax - ymin <= 1e-12 * std::max(1.0, std::abs(mean))) {
    fit.profile = {0.0, g.width() / 4.0, 0.5 * (x.front() + x.back()), mean};
    return fit;
  }

  // initial guess from the half-maximum width
  Eigen::Vector4d th;  // baseline, amplitude, center, sigma
  const double half = ymin + 0.5 * (ymax - ymin);
  int above = 0;
  for (double v : y) above += v >= half;
  th << ymin, ymax - ymin, x[mx_it - y.begin()], std::max(above * g.du / 2.3548, g.du);

  auto residuals = [&](const Eigen::Vector4d& p, Eigen::VectorXd& r) {
    r.resize(n);
    for (int i = 0; i < n; ++i) {
      const double z = (x[i] - p[2]) / p[3];
      r[i] = y[i] - (p[0] + p[1] * std::exp(-0.5 * z * z));
    }
    return r.squaredNorm();
  };

  Eigen::VectorXd r;
  double cost = residuals(th, r);
  double lambda = 1e-3;
  constexpr int kMaxIter = 500;
  bool converged = false;
  int it = 0;
  for (; it < kMaxIter; ++it) {
    Eigen::MatrixXd J(n, 4);
    for (int i = 0; i < n; ++i) {
      const double z = (x[i] - th[2]) / th[3];
      const double e = std::exp(-0.5 * z * z);
      J(i, 0) = 1.0;
      J(i, 1) = e;
      J(i, 2) = th[1] * e * z / th[3];
      J(i, 3) = th[1] * e * z * z / th[3];
    }
    const Eigen::Matrix4d JtJ = J.transpose() * J;
    const Eigen::Vector4d Jtr = J.transpose() * r;
    bool improved = false;
    for (int tries = 0; tries < 30; ++tries) {
      Eigen::Matrix4d A = JtJ;
      for (int d = 0; d < 4; ++d) A(d, d) += lambda * std::max(JtJ(d, d), 1e-30);
      const Eigen::Vector4d step = A.ldlt().solve(Jtr);
      Eigen::Vector4d cand = th + step;
      if (!(cand[3] > 0)) {
        lambda *= 10;
        continue;
      }
      Eigen::VectorXd rc;
      const double c = residuals(cand, rc);
      if (c <= cost) {
        const double rel = step.cwiseAbs().cwiseQuotient(th.cwiseAbs().cwiseMax(1e-12)).maxCoeff();
        const double drop = cost - c;
        th = cand;
        r = rc;
        cost = c;
        lambda = std::max(lambda / 10, 1e-15);
        improved = true;
        if (rel < 1e-13 || drop <= 1e-28 * std::max(1.0, ymax * ymax * n)) converged = true;
        break;
      }
      lambda *= 10;
    }
    if (!improved) converged = true;  // stationary: no descent direction left
    if (converged) break;
  }
  fit.residual_rms = std::sqrt(cost / n);
  fit.iterations = it;
  if (!converged)
    throw Error(ErrorKind::fit, "beam profile fit did not converge (residual rms " +
                                    std::to_string(fit.residual_rms) + ")");
  fit.profile = {th[1], std::abs(th[3]), th[2], th[0]};
  if (fit.profile.amplitude < 0) {
    throw Error(ErrorKind::fit, "beam profile fit produced negative amplitude (residual rms " +
                                    std::to_string(fit.residual_rms) + ")");
  }
  return fit;
}

// ---------------------------------------------------------------------------
// Physics chain

/// I0 = BP * mAs * phi * (du * dv)
inline Image2D incident_photons(const Image2D& bp, const PhysicsParams& p, const ScannerGeometry& g) {
  Image2D out(bp.nu, bp.nv);
  const double scale = p.mAs() * p.phi * g.du * g.dv;
  for (std::size_t n = 0; n < bp.size(); ++n) out.data[n] = static_cast<float>(bp.data[n] * scale);
  return out;
}

inline Image2D primary_transmission(const Image2D& P) {
  Image2D T(P.nu, P.nv);
  for (std::size_t n = 0; n < P.size(); ++n) T.data[n] = static_cast<float>(std::exp(-static_cast<double>(P.data[n])));
  return T;
}

/// Linear-interpolated percentile between order statistics (inclusive).
inline double percentile(std::vector<float> values, double q) {
  if (values.empty()) throw Error(ErrorKind::precondition, "percentile of empty array");
  const double pos = q / 100.0 * (values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const double frac = pos - lo;
  std::nth_element(values.begin(), values.begin() + lo, values.end());
  const double a = values[lo];
  if (frac == 0.0 || lo + 1 >= values.size()) return a;
  const double b = *std::min_element(values.begin() + lo + 1, values.end());
  return a + frac * (b - a);
}

/// N_scatter = spr * P5(N_primary) * Omega, Omega = [T_primary < 0.5].
inline Image2D scatter_estimate(const Image2D& n_primary, const Image2D& t_primary, double spr) {
  if (!n_primary.same_shape(t_primary)) throw Error(ErrorKind::precondition, "scatter_estimate: shape mismatch");
  const double p5 = percentile(n_primary.data, 5.0);
  Image2D out(n_primary.nu, n_primary.nv);
  const float level = static_cast<float>(spr * p5);
  for (std::size_t n = 0; n < out.size(); ++n) out.data[n] = t_primary.data[n] < 0.5f ? level : 0.f;
  return out;
}

inline constexpr double kGaussianPoissonThreshold = 1e5;

/// Poisson draw per pixel from the (seed, projection, pixel) stream; means
/// above 1e5 use the rounded N(lambda, lambda) approximation.
inline Image2D apply_noise(const Image2D& counts, std::uint64_t seed, std::uint64_t projection = 0) {
  for (float c : counts.data)
    if (!std::isfinite(c) || c < 0) throw Error(ErrorKind::domain, "apply_noise: counts must be finite and >= 0");
  Image2D out(counts.nu, counts.nv);
#pragma omp parallel for schedule(static)
  for (int iv = 0; iv < counts.nv; ++iv)
    for (int iu = 0; iu < counts.nu; ++iu) {
      const std::size_t n = static_cast<std::size_t>(iv) * counts.nu + iu;
      const double lambda = counts.data[n];
      if (lambda == 0.0) {
        out.data[n] = 0.f;
        continue;
      }
      rng::Stream s(seed, rng::Domain::detector_noise, projection, n);
      double draw;
      if (lambda > kGaussianPoissonThreshold) {
        draw = std::max(0.0, std::round(lambda + std::sqrt(lambda) * s.normal()));
      } else {
        std::poisson_distribution<long long> pd(lambda);
        draw = static_cast<double>(pd(s));
      }
      out.data[n] = static_cast<float>(draw);
    }
  return out;
}

inline constexpr double kTransmissionFloor = 1e-6;

/// P_noisy = -ln(clamp(c_sat * N / I0, 1e-6, 1)).
inline Image2D finalize_projection(const Image2D& n_detected, const Image2D& i0, double c_sat) {
  if (!n_detected.same_shape(i0)) throw Error(ErrorKind::precondition, "finalize_projection: shape mismatch");
  Image2D out(i0.nu, i0.nv);
  for (std::size_t n = 0; n < out.size(); ++n) {
    if (!(i0.data[n] > 0)) throw Error(ErrorKind::precondition, "finalize_projection: I0 must be > 0");
    const double r = std::clamp(c_sat * static_cast<double>(n_detected.data[n]) / i0.data[n], kTransmissionFloor, 1.0);
    out.data[n] = static_cast<float>(-std::log(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scan simulation

struct SimulationTimings {
  double warp_s = 0, raycast_s = 0, physics_s = 0;
};

/// Per-projection simulator over a motion-adapted CT. Projections are
/// independent given their breathing state, so `project(i)` may be called
/// in any order with identical results.
class ScanSimulator {
 public:
  ScanSimulator(const Volume3D& ct_hu, const MotionField* motion, BreathingModel breathing,
                ScannerGeometry geometry, PhysicsParams physics, std::optional<BeamProfile> beam = {})
      : ct_(&ct_hu), motion_(motion), bm_(breathing), g_(geometry), p_(physics) {
    ct_hu.require_unit(Unit::hu, "simulate_scan");
    bm_.validate();
    g_.validate();
    p_.validate();
    if (motion_) {
      if (motion_->stage != MotionStage::final_M)
        throw Error(ErrorKind::stage, "simulate_scan expects a final_M motion field");
      require_same_grid(ct_hu.grid(), motion_->grid(), "simulate_scan");
      for (std::size_t n = 0; n < motion_->vectors.size(); ++n)
        if (motion_->vectors.x[n] != 0.f || motion_->vectors.y[n] != 0.f || motion_->vectors.z[n] != 0.f)
          moving_.push_back(n);
    }
    mu_static_ = hu_to_attenuation(ct_hu, p_.mu_water);
    bp_ = beam_profile_array(beam.value_or(BeamProfile::default_for(g_)), g_);
    i0_ = incident_photons(bp_, p_, g_);
    for (float v : i0_.data)
      if (!(v > 0)) throw Error(ErrorKind::precondition, "simulate_scan: I0 must be > 0");
  }

  const ScannerGeometry& geometry() const { return g_; }
  const Image2D& incident() const { return i0_; }
  const Image2D& beam_profile() const { return bp_; }
  int count() const { return g_.projection_count(); }
  const SimulationTimings& timings() const { return timings_; }

  double eps(int i) const { return breathing_jitter(static_cast<std::size_t>(i), bm_); }
  double state(int i) const { return breathing_state(static_cast<std::size_t>(i), bm_, eps(i)); }

  /// Attenuation volume at projection i (motion applied). Voxels with a
  /// zero displacement keep their static value; others are resampled from
  /// the HU volume and converted, matching warp_volume + hu_to_attenuation.
  const Volume3D& attenuation_at(int i) {
    const double s = state(i);
    const float scale = static_cast<float>(bm_.A_max * s);
    if (!motion_ || moving_.empty() || scale == 0.f) return mu_static_;
    if (mu_work_.size() != mu_static_.size()) mu_work_ = mu_static_;
    else std::copy(mu_static_.values().begin(), mu_static_.values().end(), mu_work_.values().begin());
    const Grid& g = ct_->grid();
    const float fill = default_fill(Unit::hu);
    const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(moving_.size());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t t = 0; t < m; ++t) {
      const std::size_t n = moving_[t];
      const float dx = scale * motion_->vectors.x[n], dy = scale * motion_->vectors.y[n],
                  dz = scale * motion_->vectors.z[n];
      const auto [i0, j0, k0] = g.unravel(n);
      float hu;
      if (dx == 0.f && dy == 0.f && dz == 0.f) hu = (*ct_)[n];
      else hu = sample_index(*ct_, i0 + dx / g.spacing.x, j0 + dy / g.spacing.y, k0 + dz / g.spacing.z, fill);
      mu_work_[n] = hu_to_mu(hu, p_.mu_water);
    }
    return mu_work_;
  }

  /// Line integrals P for projection i (no physics).
  Image2D line_integrals(int i) {
    auto t0 = std::chrono::steady_clock::now();
    const Volume3D& mu = attenuation_at(i);
    auto t1 = std::chrono::steady_clock::now();
    Image2D P = RayCaster(mu).project(g_, g_.angle_deg(i));
    auto t2 = std::chrono::steady_clock::now();
    timings_.warp_s += std::chrono::duration<double>(t1 - t0).count();
    timings_.raycast_s += std::chrono::duration<double>(t2 - t1).count();
    return P;
  }

  /// Physics chain on line integrals: transmission, scatter, noise, log.
  Image2D physics(const Image2D& P, int i) const {
    // double precision between steps; float only at the noise boundary and output
    const std::size_t sz = P.size();
    std::vector<double> n(sz);
    for (std::size_t k = 0; k < sz; ++k) n[k] = std::exp(-static_cast<double>(P.data[k])) * i0_.data[k];
    if (p_.scatter_enabled || p_.noise_enabled) {
      Image2D nf(P.nu, P.nv);
      for (std::size_t k = 0; k < sz; ++k) nf.data[k] = static_cast<float>(n[k]);
      if (p_.scatter_enabled) {
        const Image2D sc = scatter_estimate(nf, primary_transmission(P), p_.spr);
        for (std::size_t k = 0; k < sz; ++k) n[k] += sc.data[k];
      }
      if (p_.noise_enabled) {
        for (std::size_t k = 0; k < sz; ++k) nf.data[k] = static_cast<float>(n[k]);
        nf = apply_noise(nf, p_.seed, static_cast<std::uint64_t>(i));
        for (std::size_t k = 0; k < sz; ++k) n[k] = nf.data[k];
      }
    }
    Image2D out(P.nu, P.nv);
    for (std::size_t k = 0; k < sz; ++k) {
      const double r = std::clamp(p_.c_sat * n[k] / i0_.data[k], kTransmissionFloor, 1.0);
      out.data[k] = static_cast<float>(-std::log(r));
    }
    return out;
  }

  Projection project(int i) {
    Projection pr;
    pr.index = i;
    pr.angle_deg = g_.angle_deg(i);
    pr.eps_ms = eps(i);
    pr.breathing_state = breathing_state(static_cast<std::size_t>(i), bm_, pr.eps_ms);
    const Image2D P = line_integrals(i);
    auto t0 = std::chrono::steady_clock::now();
    pr.data = physics(P, i);
    timings_.physics_s += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return pr;
  }

 private:
  const Volume3D* ct_;
  const MotionField* motion_;
  BreathingModel bm_;
  ScannerGeometry g_;
  PhysicsParams p_;
  std::vector<std::size_t> moving_;
  Volume3D mu_static_, mu_work_;
  Image2D bp_, i0_;
  SimulationTimings timings_;
};

/// Full acquisition: one log-attenuation projection per angle.
inline ProjectionStack simulate_scan(const Volume3D& ct_cm_free, const MotionField* motion,
                                     const BreathingModel& bm, const ScannerGeometry& g,
                                     const PhysicsParams& p, std::optional<BeamProfile> beam = {}) {
  ScanSimulator sim(ct_cm_free, motion, bm, g, p, beam);
  ProjectionStack stack;
  stack.kind = ValueKind::log_attenuation;
  stack.projections.reserve(sim.count());
  for (int i = 0; i < sim.count(); ++i) stack.projections.push_back(sim.project(i));
  return stack;
}

}  // namespace simcbct
