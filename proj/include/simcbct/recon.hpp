#pragma once

// FDK cone-beam reconstruction: cosine and displaced-detector weighting,
// Hann-windowed ramp filtering (FFTW), voxel-driven backprojection, HU
// conversion and the geometric field-of-view mask.

#include <algorithm>
#include <cmath>
#include <complex>
#include <memory>
#include <mutex>
#include <vector>

#include <fftw3.h>

#include "simcbct/projector.hpp"
#include "simcbct/volume.hpp"

namespace simcbct {

enum class HuMode { paper_fixed, physical_calibrated };

inline const char* to_string(HuMode m) {
  return m == HuMode::paper_fixed ? "paper_fixed" : "physical_calibrated";
}

struct ReconConfig {
  Index3 dims{410, 410, 66};
  Vec3 spacing{1, 1, 4};
  double hann_cutoff = 0.9;            // fraction of Nyquist
  double truncation_correction = 0.05; // taper width, fraction of row length per side
  HuMode hu_mode = HuMode::physical_calibrated;
  double mu_water = kDefaultMuWater;
  bool fov_mask = true;

  void validate() const {
    if (!(hann_cutoff > 0) || hann_cutoff > 1) throw Error(ErrorKind::config, "hann_cutoff must lie in (0, 1]");
    if (!(truncation_correction >= 0) || truncation_correction > 0.5)
      throw Error(ErrorKind::config, "truncation_correction must lie in [0, 0.5]");
    if (!(mu_water > 0)) throw Error(ErrorKind::config, "mu_water must be > 0");
    Grid{dims, spacing, {}}.validate();
  }
};

/// Reconstruction grid, centered on the rotation center.
inline Grid recon_grid(const ScannerGeometry& g, const ReconConfig& cfg) {
  return Grid::centered(cfg.dims, cfg.spacing, g.rotation_center);
}

// ---------------------------------------------------------------------------
// Weighting

inline double cosine_weight(const ScannerGeometry& g, double u, double v) {
  return g.sdd / std::sqrt(g.sdd * g.sdd + u * u + v * v);
}

/// Redundancy weight for a displaced detector: 2 on the non-redundant side,
/// sine-squared transition across the overlap band, so that each pair of
/// redundant rays sums to 2. An unshifted detector gets 1 everywhere.
inline double redundancy_weight(const ScannerGeometry& g, double u) {
  if (g.offset == 0.0) return 1.0;
  const double half = 0.5 * g.width();
  const double delta = half - std::abs(g.offset);
  if (delta < 0) throw Error(ErrorKind::geometry, "detector offset exceeds half the detector width");
  const double s = g.offset > 0 ? u : -u;
  if (s >= delta) return 2.0;
  if (s <= -delta) return 0.0;
  const double x = std::sin(M_PI / 4.0 * (s + delta) / delta);
  return 2.0 * x * x;
}

/// Combined per-pixel FDK pre-weight (cosine x redundancy).
inline Image2D fdk_weight_image(const ScannerGeometry& g) {
  if (g.offset != 0.0 && std::abs(g.offset) > 0.5 * g.width())
    throw Error(ErrorKind::geometry, "detector offset exceeds half the detector width");
  Image2D w(g.nu, g.nv);
  for (int iv = 0; iv < g.nv; ++iv)
    for (int iu = 0; iu < g.nu; ++iu) {
      const double u = g.u_of(iu), v = g.v_of(iv);
      w(iu, iv) = static_cast<float>(cosine_weight(g, u, v) * redundancy_weight(g, u));
    }
  return w;
}

inline void apply_weight(Image2D& img, const Image2D& w) {
  if (!img.same_shape(w)) throw Error(ErrorKind::precondition, "projection does not match detector");
  for (std::size_t n = 0; n < img.size(); ++n) img.data[n] *= w.data[n];
}

inline ProjectionStack fdk_weight(ProjectionStack stack, const ScannerGeometry& g) {
  if (stack.kind != ValueKind::log_attenuation && stack.kind != ValueKind::line_integral)
    throw Error(ErrorKind::precondition, "fdk_weight expects line integrals");
  const Image2D w = fdk_weight_image(g);
  for (auto& p : stack.projections) apply_weight(p.data, w);
  return stack;
}

// ---------------------------------------------------------------------------
// Ramp filter

namespace detail {
inline std::mutex& fftw_plan_mutex() {
  static std::mutex m;
  return m;
}
struct FftwFree {
  void operator()(void* p) const { fftw_free(p); }
};
}  // namespace detail

inline std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

/// Row filter for one detector geometry. Rows are extended by a cosine
/// taper of the edge value, zero-padded to a power of two >= twice the
/// extended length, and multiplied in frequency by |f| * Hann(f).
class RampFilter {
 public:
  RampFilter(const ScannerGeometry& g, const ReconConfig& cfg)
      : nu_(g.nu),
        taper_(static_cast<int>(std::lround(cfg.truncation_correction * g.nu))),
        npad_(next_pow2(2 * static_cast<std::size_t>(g.nu + 2 * taper_))),
        tau_(g.du * g.sad / g.sdd),
        cutoff_(cfg.hann_cutoff) {
    cfg.validate();
    response_.resize(npad_ / 2 + 1);
    for (std::size_t k = 0; k < response_.size(); ++k) response_[k] = response(k);
    std::lock_guard<std::mutex> lock(detail::fftw_plan_mutex());
    double* r = fftw_alloc_real(npad_);
    fftw_complex* c = fftw_alloc_complex(npad_ / 2 + 1);
    fwd_ = fftw_plan_dft_r2c_1d(static_cast<int>(npad_), r, c, FFTW_ESTIMATE);
    inv_ = fftw_plan_dft_c2r_1d(static_cast<int>(npad_), c, r, FFTW_ESTIMATE);
    fftw_free(r);
    fftw_free(c);
    if (!fwd_ || !inv_) throw Error(ErrorKind::precondition, "FFTW plan creation failed");
  }
  ~RampFilter() {
    std::lock_guard<std::mutex> lock(detail::fftw_plan_mutex());
    fftw_destroy_plan(fwd_);
    fftw_destroy_plan(inv_);
  }
  RampFilter(const RampFilter&) = delete;
  RampFilter& operator=(const RampFilter&) = delete;

  std::size_t padded_length() const { return npad_; }
  int taper_width() const { return taper_; }
  double sample_spacing() const { return tau_; }

  /// Filter gain at DFT bin k (0 <= k <= npad/2), including the 1/npad
  /// inverse normalization.
  double response(std::size_t k) const {
    const double f = static_cast<double>(k) / (npad_ * tau_);
    const double fc = cutoff_ * 0.5 / tau_;
    if (f > fc) return 0.0;
    const double hann = 0.5 * (1.0 + std::cos(M_PI * f / fc));
    return f * hann / static_cast<double>(npad_);
  }

  /// Periodic filtering of an already padded buffer of length npad.
  void filter_padded(double* buf, fftw_complex* spec) const {
    fftw_execute_dft_r2c(fwd_, buf, spec);
    for (std::size_t k = 0; k < response_.size(); ++k) {
      spec[k][0] *= response_[k];
      spec[k][1] *= response_[k];
    }
    fftw_execute_dft_c2r(inv_, spec, buf);
  }

  /// Builds the padded row in `buf` (length npad).
  void pad_row(const float* row, double* buf) const {
    std::fill(buf, buf + npad_, 0.0);
    for (int i = 0; i < nu_; ++i) buf[taper_ + i] = row[i];
    const double left = row[0], right = row[nu_ - 1];
    for (int t = 1; t <= taper_; ++t) {
      const double w = 0.5 * (1.0 + std::cos(M_PI * t / (taper_ + 1.0)));
      buf[taper_ - t] = left * w;
      buf[taper_ + nu_ - 1 + t] = right * w;
    }
  }

  void filter_image(Image2D& img) const {
    if (img.nu != nu_) throw Error(ErrorKind::precondition, "ramp filter: row length mismatch");
#pragma omp parallel
    {
      std::unique_ptr<double, detail::FftwFree> buf(fftw_alloc_real(npad_));
      std::unique_ptr<fftw_complex, detail::FftwFree> spec(fftw_alloc_complex(npad_ / 2 + 1));
#pragma omp for schedule(static)
      for (int iv = 0; iv < img.nv; ++iv) {
        float* row = img.data.data() + static_cast<std::size_t>(iv) * nu_;
        pad_row(row, buf.get());
        filter_padded(buf.get(), spec.get());
        for (int i = 0; i < nu_; ++i) row[i] = static_cast<float>(buf.get()[taper_ + i]);
      }
    }
  }

 private:
  int nu_;
  int taper_;
  std::size_t npad_;
  double tau_;
  double cutoff_;
  std::vector<double> response_;
  fftw_plan fwd_ = nullptr, inv_ = nullptr;
};

inline ProjectionStack ramp_filter(ProjectionStack stack, const ScannerGeometry& g, const ReconConfig& cfg) {
  const RampFilter f(g, cfg);
  for (auto& p : stack.projections) f.filter_image(p.data);
  return stack;
}

// ---------------------------------------------------------------------------
// Backprojection

/// Accumulates (SAD / L)^2 * q(u, v) per voxel, L the source distance along
/// the central ray. Bilinear detector sampling; outside the detector adds 0.
inline void backproject_one(std::vector<double>& acc, const Grid& grid, const Image2D& q,
                            const ScannerGeometry& g, double theta_deg) {
  const DetectorPose pose = source_detector_pose(g, theta_deg);
  const Vec3 d = pose.direction, u_ax = pose.u_axis;
  const Vec3 c = g.rotation_center;
  const int nx = grid.dims[0], ny = grid.dims[1], nz = grid.dims[2];
  const double sad = g.sad, sdd = g.sdd;
  const double iu_scale = 1.0 / g.du, iu_shift = 0.5 * (g.nu - 1) - g.offset / g.du;
  const double iv_scale = 1.0 / g.dv, iv_shift = 0.5 * (g.nv - 1);
  const int nu = q.nu, nv = q.nv;
  const float* qd = q.data.data();

#pragma omp parallel for schedule(static) collapse(2)
  for (int k = 0; k < nz; ++k)
    for (int j = 0; j < ny; ++j) {
      const double z = grid.origin.z + k * grid.spacing.z - c.z;
      const double y = grid.origin.y + j * grid.spacing.y - c.y;
      const double x0 = grid.origin.x - c.x;
      // L and the u numerator are affine in x along the row
      const double L0 = sad + x0 * d.x + y * d.y, dL = grid.spacing.x * d.x;
      const double a0 = x0 * u_ax.x + y * u_ax.y, da = grid.spacing.x * u_ax.x;
      double* out = acc.data() + grid.index(0, j, k);
      for (int i = 0; i < nx; ++i) {
        const double L = L0 + i * dL;
        if (L <= 0) continue;
        const double inv = 1.0 / L;
        const double fu = sdd * (a0 + i * da) * inv * iu_scale + iu_shift;
        const double fv = sdd * z * inv * iv_scale + iv_shift;
        if (!(fu > -1.0 && fu < nu && fv > -1.0 && fv < nv)) continue;
        const int u0 = static_cast<int>(std::floor(fu)), v0 = static_cast<int>(std::floor(fv));
        const double tu = fu - u0, tv = fv - v0;
        auto at = [&](int a, int b) -> double {
          return (a < 0 || b < 0 || a >= nu || b >= nv) ? 0.0 : qd[static_cast<std::size_t>(b) * nu + a];
        };
        double val;
        if (u0 >= 0 && v0 >= 0 && u0 + 1 < nu && v0 + 1 < nv) {
          const float* p = qd + static_cast<std::size_t>(v0) * nu + u0;
          const double top = p[0] + tu * (p[1] - p[0]);
          const double bot = p[nu] + tu * (p[nu + 1] - p[nu]);
          val = top + tv * (bot - top);
        } else {
          const double top = at(u0, v0) + tu * (at(u0 + 1, v0) - at(u0, v0));
          const double bot = at(u0, v0 + 1) + tu * (at(u0 + 1, v0 + 1) - at(u0, v0 + 1));
          val = top + tv * (bot - top);
        }
        const double w = sad * inv;
        out[i] += w * w * val;
      }
    }
}

/// Streaming FDK: add projections one at a time, then finish().
class FdkReconstructor {
 public:
  FdkReconstructor(const ScannerGeometry& g, const ReconConfig& cfg)
      : g_(g), cfg_(cfg), grid_(recon_grid(g, cfg)), weight_(fdk_weight_image(g)), filter_(g, cfg),
        acc_(grid_.size(), 0.0) {
    g_.validate();
  }

  const Grid& grid() const { return grid_; }
  int count() const { return count_; }

  /// Weight, filter and backproject one log-attenuation projection.
  void add(const Projection& p) {
    Image2D q = p.data;
    apply_weight(q, weight_);
    filter_.filter_image(q);
    add_filtered(q, p.angle_deg);
  }

  void add_filtered(const Image2D& q, double angle_deg) {
    backproject_one(acc_, grid_, q, g_, angle_deg);
    ++count_;
  }

  /// Attenuation estimate (per mm) in gray units. `total` overrides the
  /// angular normalization count (defaults to the projections added).
  Volume3D finish(std::optional<int> total = {}) const {
    Volume3D out(grid_, Unit::gray);
    const int n = total.value_or(count_);
    if (n == 0) return out;
    const double scale = M_PI / n;
    for (std::size_t i = 0; i < acc_.size(); ++i) out[i] = static_cast<float>(acc_[i] * scale);
    return out;
  }

 private:
  ScannerGeometry g_;
  ReconConfig cfg_;
  Grid grid_;
  Image2D weight_;
  RampFilter filter_;
  std::vector<double> acc_;
  int count_ = 0;
};

/// Backprojection of an already weighted and filtered stack.
inline Volume3D backproject(const ProjectionStack& filtered, const ScannerGeometry& g, const ReconConfig& cfg) {
  const Grid grid = recon_grid(g, cfg);
  std::vector<double> acc(grid.size(), 0.0);
  for (const auto& p : filtered.projections) backproject_one(acc, grid, p.data, g, p.angle_deg);
  Volume3D out(grid, Unit::gray);
  if (filtered.size() == 0) return out;
  const double scale = M_PI / static_cast<double>(filtered.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i] * scale);
  return out;
}

inline Volume3D fdk_reconstruct(const ProjectionStack& stack, const ScannerGeometry& g, const ReconConfig& cfg) {
  FdkReconstructor r(g, cfg);
  for (const auto& p : stack.projections) r.add(p);
  return r.finish();
}

// ---------------------------------------------------------------------------
// HU conversion and FOV

inline double gray_to_hu_value(double mu, const ReconConfig& cfg) {
  if (cfg.hu_mode == HuMode::paper_fixed) return mu * 65536.0 - 1024.0;
  return (mu / cfg.mu_water - 1.0) * 1000.0;
}

inline Volume3D gray_to_hu(const Volume3D& v, const ReconConfig& cfg) {
  v.require_unit(Unit::gray, "gray_to_hu");
  Volume3D out(v.grid(), Unit::hu);
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(gray_to_hu_value(v[i], cfg));
  return out;
}

/// Radius of the cylinder seen at every angle: the far detector edge
/// u_max = |offset| + width/2 subtends sin(gamma) = u_max / hypot(SDD, u_max).
inline double fov_radius(const ScannerGeometry& g) {
  const double umax = std::abs(g.offset) + 0.5 * g.width();
  return g.sad * umax / std::hypot(g.sdd, umax);
}

inline BinaryMask fov_cone_mask(const ScannerGeometry& g, const Grid& grid) {
  const double r_fov = fov_radius(g);
  const double half_h = 0.5 * g.height();
  const Vec3 c = g.rotation_center;
  BinaryMask m(grid);
#pragma omp parallel for schedule(static)
  for (int k = 0; k < grid.dims[2]; ++k)
    for (int j = 0; j < grid.dims[1]; ++j)
      for (int i = 0; i < grid.dims[0]; ++i) {
        const Vec3 p = grid.world(i, j, k);
        const double r = std::hypot(p.x - c.x, p.y - c.y);
        const bool in = r <= r_fov && std::abs(p.z - c.z) <= half_h * (g.sad - r) / g.sdd;
        m.set(i, j, k, in);
      }
  return m;
}

inline BinaryMask fov_cone_mask(const ScannerGeometry& g, const ReconConfig& cfg) {
  return fov_cone_mask(g, recon_grid(g, cfg));
}

inline Volume3D apply_fov(const Volume3D& v, const BinaryMask& mask) {
  v.require_unit(Unit::hu, "apply_fov");
  require_same_grid(v.grid(), mask.grid(), "apply_fov");
  Volume3D out = v;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (!mask[i]) out[i] = kAirHU;
  return out;
}

/// Reference CT on the reconstruction grid, masked with the same FOV.
inline Volume3D prepare_reference_ct(const Volume3D& ct, const ScannerGeometry& g, const ReconConfig& cfg) {
  ct.require_unit(Unit::hu, "prepare_reference_ct");
  const Grid grid = recon_grid(g, cfg);
  Volume3D out = resample_to_grid(ct, grid);
  if (cfg.fov_mask) out = apply_fov(out, fov_cone_mask(g, grid));
  return out;
}

}  // namespace simcbct
