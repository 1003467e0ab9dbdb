#pragma once

// Respiratory motion: heuristic surface-driven motion field, sinusoidal
// breathing model, displacement/warping and contrast-media suppression.

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "simcbct/kdtree.hpp"
#include "simcbct/morphology.hpp"
#include "simcbct/volume.hpp"

namespace simcbct {

enum class MotionStage { sparse_Vs, dense_Vd, anterior_Vu, final_M };

inline const char* to_string(MotionStage s) {
  switch (s) {
    case MotionStage::sparse_Vs: return "sparse_Vs";
    case MotionStage::dense_Vd: return "dense_Vd";
    case MotionStage::anterior_Vu: return "anterior_Vu";
    case MotionStage::final_M: return "final_M";
  }
  return "unknown";
}

/// Dimensionless per-voxel motion directions tagged with their derivation stage.
struct MotionField {
  VectorField vectors;
  MotionStage stage = MotionStage::sparse_Vs;
  std::vector<float> magnitude;  // gradient magnitude (HU/mm), sparse stage only
  std::size_t retained = 0;      // non-zero vectors in the sparse stage

  const Grid& grid() const { return vectors.grid; }
};

struct BreathingModel {
  double T_p = 180;          // ms per projection
  double T_hc = 1500;        // ms, half breathing cycle
  double A_max = 5;          // mm
  double jitter_sigma = 20;  // ms
  std::uint64_t seed = 0;

  void validate() const {
    if (!(T_p > 0) || !(T_hc > 0) || !(A_max >= 0) || !(jitter_sigma >= 0))
      throw Error(ErrorKind::precondition, "breathing model: invalid parameters");
  }
};

struct MotionParams {
  double tau_g = 200;               // HU/mm
  double bone_threshold = 200;      // HU
  Vec3 anterior_axis{0, 1, 0};
  double surrogate_proximity = 40;  // mm, Gaussian sigma
  double propagation_power = 2;
  int neighbors = 8;
  double foreground_threshold = -300;  // HU

  void validate() const {
    if (!(tau_g > 0)) throw Error(ErrorKind::precondition, "tau_g must be > 0");
    if (!(surrogate_proximity > 0))
      throw Error(ErrorKind::precondition, "surrogate_proximity must be > 0");
    if (neighbors < 1) throw Error(ErrorKind::precondition, "neighbors must be >= 1");
    if (std::abs(norm(anterior_axis) - 1.0) > 1e-6)
      throw Error(ErrorKind::precondition, "anterior_axis must be unit length");
  }
};

struct ContrastParams {
  double threshold = 50;     // HU, M_binary cut
  double factor = 0.92;
  double sigma_voxels = 1;   // Gaussian fuzzing of M_binary
  double noise_sigma = 0.02; // n(x) ~ N(1, sigma^2)
};

// ---------------------------------------------------------------------------
// Motion field derivation

struct Foreground {
  BinaryMask mask;
  BinaryMask surface;  // inner boundary
};

inline Foreground foreground_mask(const Volume3D& ct, double threshold = -300) {
  ct.require_unit(Unit::hu, "foreground_mask");
  BinaryMask m(ct.grid());
  for (std::size_t n = 0; n < ct.size(); ++n) m.set(n, ct[n] > threshold);
  m = morph::largest_component(m);
  m = morph::fill_holes_2d(m);
  if (m.count() == 0) throw Error(ErrorKind::degenerate_input, "foreground mask is empty");
  return {m, morph::inner_boundary(m)};
}

/// Spacing-aware central-difference gradient (one-sided at the grid edge).
inline Vec3 gradient_at(const Volume3D& v, int i, int j, int k) {
  const Grid& g = v.grid();
  Vec3 grad;
  const int idx[3] = {i, j, k};
  for (int a = 0; a < 3; ++a) {
    int lo[3] = {i, j, k}, hi[3] = {i, j, k};
    lo[a] = std::max(idx[a] - 1, 0);
    hi[a] = std::min(idx[a] + 1, g.dims[a] - 1);
    const int steps = hi[a] - lo[a];
    if (steps == 0) continue;
    grad[a] = (static_cast<double>(v(hi[0], hi[1], hi[2])) - v(lo[0], lo[1], lo[2])) /
              (steps * g.spacing[a]);
  }
  return grad;
}

/// Sparse field V_s: unit gradient directions at surface voxels whose
/// gradient magnitude reaches tau_g. An empty result is allowed.
inline MotionField boundary_gradients(const Volume3D& ct, const BinaryMask& surface, double tau_g) {
  ct.require_unit(Unit::hu, "boundary_gradients");
  require_same_grid(ct.grid(), surface.grid(), "boundary_gradients");
  if (surface.count() == 0) throw Error(ErrorKind::precondition, "boundary_gradients: empty surface");
  MotionField f{VectorField(ct.grid()), MotionStage::sparse_Vs, std::vector<float>(ct.size(), 0.f), 0};
  const Grid& g = ct.grid();
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        const std::size_t n = g.index(i, j, k);
        if (!surface[n]) continue;
        const Vec3 grad = gradient_at(ct, i, j, k);
        const double mag = norm(grad);
        if (!(mag >= tau_g) || mag == 0.0) continue;
        f.vectors.set(n, (1.0 / mag) * grad);
        f.magnitude[n] = static_cast<float>(mag);
        ++f.retained;
      }
  return f;
}

/// Dense field V_d by inverse-distance weighting of the K nearest sparse
/// vectors, w = 1/(d^p + delta). Voxels coinciding with a sparse vector take
/// it unchanged. Only voxels in `domain` are filled (all voxels if absent).
inline MotionField propagate_gradients(const MotionField& vs, const BinaryMask* domain = nullptr,
                                       int neighbors = 8, double power = 2.0,
                                       double delta = 1e-6) {
  if (vs.stage != MotionStage::sparse_Vs)
    throw Error(ErrorKind::stage, "propagate_gradients expects a sparse_Vs field");
  const Grid& g = vs.grid();
  if (domain) require_same_grid(g, domain->grid(), "propagate_gradients");

  std::vector<Vec3> pts;
  std::vector<std::size_t> src;
  for (std::size_t n = 0; n < vs.vectors.size(); ++n) {
    if (vs.vectors.x[n] == 0.f && vs.vectors.y[n] == 0.f && vs.vectors.z[n] == 0.f) continue;
    const auto [i, j, k] = g.unravel(n);
    pts.push_back(g.world(i, j, k));
    src.push_back(n);
  }
  if (pts.empty()) throw Error(ErrorKind::precondition, "propagate_gradients: empty sparse field");

  const KdTree tree(pts);
  MotionField out{VectorField(g), MotionStage::dense_Vd, {}, 0};
  const std::size_t k_eff = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, neighbors)), pts.size());

#pragma omp parallel
  {
    std::vector<KdTree::Neighbor> nb;
#pragma omp for schedule(dynamic, 4)
    for (int k = 0; k < g.dims[2]; ++k)
      for (int j = 0; j < g.dims[1]; ++j)
        for (int i = 0; i < g.dims[0]; ++i) {
          const std::size_t n = g.index(i, j, k);
          if (domain && !(*domain)[n]) continue;
          tree.knn(g.world(i, j, k), k_eff, nb);
          if (nb.front().dist2 == 0.0) {
            out.vectors.set(n, vs.vectors.at(src[nb.front().index]));
            continue;
          }
          Vec3 acc;
          double wsum = 0;
          for (const auto& q : nb) {
            const double d = std::sqrt(q.dist2);
            const double w = 1.0 / (std::pow(d, power) + delta);
            acc = acc + w * vs.vectors.at(src[q.index]);
            wsum += w;
          }
          out.vectors.set(n, (1.0 / wsum) * acc);
        }
  }
  return out;
}

/// V_u: each vector scaled by the cosine of its angle to the anterior axis;
/// vectors pointing away from the axis become zero.
inline MotionField attenuate_anterior(const MotionField& vd, Vec3 anterior_axis) {
  if (std::abs(norm(anterior_axis) - 1.0) > 1e-6)
    throw Error(ErrorKind::precondition, "anterior_axis must be unit length");
  MotionField out{VectorField(vd.grid()), MotionStage::anterior_Vu, {}, 0};
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(vd.vectors.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t s = 0; s < n; ++s) {
    const Vec3 v = vd.vectors.at(s);
    const double m = norm(v);
    if (m == 0.0) continue;
    const double c = dot(v, anterior_axis) / m;
    if (c > 0) out.vectors.set(s, c * v);
  }
  return out;
}

inline BinaryMask bone_mask(const Volume3D& ct, double threshold) {
  ct.require_unit(Unit::hu, "bone_mask");
  BinaryMask m(ct.grid());
  for (std::size_t n = 0; n < ct.size(); ++n) m.set(n, ct[n] > threshold);
  return m;
}

/// Voxels whose ray along -axis meets a bone voxel inside the grid.
inline BinaryMask posterior_to_bone(const BinaryMask& bone, Vec3 axis) {
  const Grid& g = bone.grid();
  BinaryMask out(g);
  // axis-aligned fast path: running "seen bone" flag along each column
  int aligned = -1;
  for (int a = 0; a < 3; ++a)
    if (std::abs(std::abs(axis[a]) - 1.0) < 1e-12) aligned = a;
  if (aligned >= 0) {
    const int a = aligned;
    const int step = axis[a] > 0 ? 1 : -1;  // marching along -axis means coming from +axis side
    const int a1 = (a + 1) % 3, a2 = (a + 2) % 3;
    const int len = g.dims[a];
    for (int q2 = 0; q2 < g.dims[a2]; ++q2)
      for (int q1 = 0; q1 < g.dims[a1]; ++q1) {
        bool seen = false;
        int idx[3];
        idx[a1] = q1;
        idx[a2] = q2;
        // a voxel is flagged if bone lies strictly on its -axis side
        for (int t = 0; t < len; ++t) {
          idx[a] = step > 0 ? t : len - 1 - t;
          const std::size_t n = g.index(idx[0], idx[1], idx[2]);
          if (seen) out.set(n, true);
          if (bone[n]) seen = true;
        }
      }
    return out;
  }
  const double h = g.min_spacing();
  const Vec3 dir = (-1.0 / norm(axis)) * axis;
#pragma omp parallel for schedule(dynamic)
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        Vec3 p = g.world(i, j, k);
        for (int s = 1;; ++s) {
          const Vec3 q = p + (s * h) * dir;
          const Vec3 c = g.continuous_index(q);
          const int ii = static_cast<int>(std::lround(c.x)), jj = static_cast<int>(std::lround(c.y)),
                    kk = static_cast<int>(std::lround(c.z));
          if (!g.contains(ii, jj, kk)) break;
          if ((ii != i || jj != j || kk != k) && bone(ii, jj, kk)) {
            out.set(i, j, k, true);
            break;
          }
        }
      }
  return out;
}

inline double proximity_weight(double distance_mm, double sigma_mm) {
  return std::exp(-distance_mm * distance_mm / (2.0 * sigma_mm * sigma_mm));
}

/// Final field M: zero at bone and behind bone, Gaussian falloff with distance
/// to the surrogate, then normalized so the largest magnitude is 1.
inline MotionField region_weighting(const MotionField& vu, const BinaryMask& bone,
                                    const BinaryMask& surrogate, const MotionParams& p) {
  require_same_grid(vu.grid(), bone.grid(), "region_weighting");
  require_same_grid(vu.grid(), surrogate.grid(), "region_weighting");
  if (surrogate.count() == 0) throw Error(ErrorKind::precondition, "region_weighting: empty surrogate mask");
  const BinaryMask behind = posterior_to_bone(bone, p.anterior_axis);
  const std::vector<double> dist = morph::distance_to_mask(surrogate);

  MotionField out{VectorField(vu.grid()), MotionStage::final_M, {}, 0};
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(vu.vectors.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t s = 0; s < n; ++s) {
    if (bone[s] || behind[s]) continue;
    const double w = proximity_weight(dist[s], p.surrogate_proximity);
    out.vectors.set(s, w * vu.vectors.at(s));
  }
  const double mx = out.vectors.max_magnitude();
  if (mx > 0) {
    const float inv = static_cast<float>(1.0 / mx);
    for (std::size_t s = 0; s < out.vectors.size(); ++s) {
      out.vectors.x[s] *= inv;
      out.vectors.y[s] *= inv;
      out.vectors.z[s] *= inv;
      // float rounding must not push magnitudes above 1
      const double m = out.vectors.magnitude(s);
      if (m > 1.0) out.vectors.set(s, (1.0 / m) * out.vectors.at(s));
    }
  }
  return out;
}

struct MotionDerivation {
  Foreground foreground;
  MotionField sparse, dense, anterior, final_field;
  BinaryMask bone;
  bool empty = false;  // no boundary gradient passed tau_g; final field is zero
};

/// Full six-step derivation. Without a surrogate, the foreground mask stands in.
inline MotionDerivation derive_motion_field(const Volume3D& ct, const BinaryMask* surrogate,
                                            const MotionParams& p) {
  p.validate();
  MotionDerivation d;
  d.foreground = foreground_mask(ct, p.foreground_threshold);
  d.sparse = boundary_gradients(ct, d.foreground.surface, p.tau_g);
  d.bone = bone_mask(ct, p.bone_threshold);
  if (d.sparse.retained == 0) {
    d.empty = true;
    d.final_field = MotionField{VectorField(ct.grid()), MotionStage::final_M, {}, 0};
    return d;
  }
  d.dense = propagate_gradients(d.sparse, &d.foreground.mask, p.neighbors, p.propagation_power);
  d.anterior = attenuate_anterior(d.dense, p.anterior_axis);
  const BinaryMask& sur = (surrogate && surrogate->count() > 0) ? *surrogate : d.foreground.mask;
  d.final_field = region_weighting(d.anterior, d.bone, sur, p);
  return d;
}

// ---------------------------------------------------------------------------
// Breathing model

/// Timing jitter eps_i (ms) for projection i, drawn from the seeded stream.
inline double breathing_jitter(std::size_t i, const BreathingModel& m) {
  if (m.jitter_sigma == 0) return 0.0;
  rng::Stream s(m.seed, rng::Domain::breathing_jitter, i);
  return m.jitter_sigma * s.normal();
}

inline double breathing_state(std::size_t i, const BreathingModel& m, std::optional<double> eps_ms = {}) {
  const double eps = eps_ms ? *eps_ms : breathing_jitter(i, m);
  return std::sin(M_PI * (static_cast<double>(i) * m.T_p + eps) / m.T_hc);
}

/// Physical displacement D = A_max * s * M (mm).
inline VectorField displacement_field(const MotionField& M, double s, double A_max) {
  if (M.stage != MotionStage::final_M)
    throw Error(ErrorKind::stage, "displacement_field expects a final_M motion field");
  VectorField d(M.grid());
  const float scale = static_cast<float>(A_max * s);
  for (std::size_t n = 0; n < d.size(); ++n) {
    d.x[n] = scale * M.vectors.x[n];
    d.y[n] = scale * M.vectors.y[n];
    d.z[n] = scale * M.vectors.z[n];
  }
  return d;
}

/// Pull warp: out(x) = v(x + D(x)) with trilinear sampling.
inline Volume3D warp_volume(const Volume3D& v, const VectorField& D, std::optional<float> fill = {}) {
  require_same_grid(v.grid(), D.grid, "warp_volume");
  const Grid& g = v.grid();
  const float f = fill.value_or(default_fill(v.unit()));
  Volume3D out(g, v.unit());
#pragma omp parallel for schedule(static)
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        const std::size_t n = g.index(i, j, k);
        const float dx = D.x[n], dy = D.y[n], dz = D.z[n];
        if (dx == 0.f && dy == 0.f && dz == 0.f) {
          out[n] = v[n];
          continue;
        }
        out[n] = sample_index(v, i + dx / g.spacing.x, j + dy / g.spacing.y, k + dz / g.spacing.z, f);
      }
  return out;
}

// ---------------------------------------------------------------------------
// Contrast suppression

/// I_cm-free = I - factor * I * M * n, with M the Gaussian-fuzzed mask of
/// surrogate voxels above the threshold and n ~ N(1, noise_sigma^2).
inline Volume3D remove_contrast(const Volume3D& ct, const BinaryMask& surrogate, std::uint64_t seed,
                                const ContrastParams& p = {}) {
  ct.require_unit(Unit::hu, "remove_contrast");
  require_same_grid(ct.grid(), surrogate.grid(), "remove_contrast");
  std::vector<float> binary(ct.size(), 0.f);
  for (std::size_t n = 0; n < ct.size(); ++n)
    binary[n] = (surrogate[n] && ct[n] > p.threshold) ? 1.f : 0.f;
  const std::vector<float> fuzzy = morph::gaussian_smooth(binary, ct.grid(), p.sigma_voxels);

  Volume3D out = ct;
  const std::ptrdiff_t total = static_cast<std::ptrdiff_t>(ct.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t n = 0; n < total; ++n) {
    const double m = fuzzy[n];
    if (m == 0.0) continue;
    double noise = 1.0;
    if (p.noise_sigma > 0) {
      rng::Stream s(seed, rng::Domain::contrast_noise, static_cast<std::uint64_t>(n));
      noise += p.noise_sigma * s.normal();
    }
    const double I = ct[n];
    out[n] = static_cast<float>(I - p.factor * I * m * noise);
  }
  return out;
}

}  // namespace simcbct
