#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "simcbct/core.hpp"

namespace simcbct {

enum class Unit { hu, attenuation_per_mm, gray, dimensionless };

inline const char* to_string(Unit u) {
  switch (u) {
    case Unit::hu: return "HU";
    case Unit::attenuation_per_mm: return "attenuation_per_mm";
    case Unit::gray: return "gray";
    case Unit::dimensionless: return "dimensionless";
  }
  return "unknown";
}

inline constexpr float kAirHU = -1024.0f;
inline constexpr double kDefaultMuWater = 0.018;  // mm^-1

/// Out-of-grid fill value per unit: air for HU, zero otherwise.
inline float default_fill(Unit u) { return u == Unit::hu ? kAirHU : 0.0f; }

/// Regular 3-D scalar grid with a unit tag. Storage is float, x fastest.
class Volume3D {
 public:
  Volume3D() = default;
  Volume3D(Grid grid, Unit unit, float value = 0.0f)
      : grid_(grid), unit_(unit), values_((grid.validate(), grid.size()), value) {}
  Volume3D(Grid grid, Unit unit, std::vector<float> values)
      : grid_(grid), unit_(unit), values_(std::move(values)) {
    grid_.validate();
    if (values_.size() != grid_.size())
      throw Error(ErrorKind::precondition, "volume value count does not match dims");
  }

  const Grid& grid() const { return grid_; }
  Unit unit() const { return unit_; }
  void set_unit(Unit u) { unit_ = u; }
  std::size_t size() const { return values_.size(); }

  float& operator()(int i, int j, int k) { return values_[grid_.index(i, j, k)]; }
  float operator()(int i, int j, int k) const { return values_[grid_.index(i, j, k)]; }
  float& operator[](std::size_t n) { return values_[n]; }
  float operator[](std::size_t n) const { return values_[n]; }

  std::vector<float>& values() { return values_; }
  const std::vector<float>& values() const { return values_; }

  void require_unit(Unit u, const char* op) const {
    if (unit_ != u)
      throw Error(ErrorKind::unit_mismatch, std::string(op) + " expects " + to_string(u) +
                                                " volume, got " + to_string(unit_));
  }

 private:
  Grid grid_{};
  Unit unit_ = Unit::hu;
  std::vector<float> values_;
};

class BinaryMask {
 public:
  BinaryMask() = default;
  explicit BinaryMask(Grid grid, bool value = false)
      : grid_(grid), bits_((grid.validate(), grid.size()), value ? 1 : 0) {}

  const Grid& grid() const { return grid_; }
  std::size_t size() const { return bits_.size(); }

  bool operator()(int i, int j, int k) const { return bits_[grid_.index(i, j, k)] != 0; }
  bool operator[](std::size_t n) const { return bits_[n] != 0; }
  void set(std::size_t n, bool v) { bits_[n] = v ? 1 : 0; }
  void set(int i, int j, int k, bool v) { bits_[grid_.index(i, j, k)] = v ? 1 : 0; }

  std::size_t count() const {
    std::size_t c = 0;
    for (auto b : bits_) c += b;
    return c;
  }

  std::vector<std::uint8_t>& bits() { return bits_; }
  const std::vector<std::uint8_t>& bits() const { return bits_; }

 private:
  Grid grid_{};
  std::vector<std::uint8_t> bits_;
};

/// Three-component float vector field on a grid (structure of arrays).
struct VectorField {
  Grid grid{};
  std::vector<float> x, y, z;

  VectorField() = default;
  explicit VectorField(Grid g) : grid(g), x(g.size(), 0.f), y(g.size(), 0.f), z(g.size(), 0.f) {}

  std::size_t size() const { return x.size(); }
  Vec3 at(std::size_t n) const { return {x[n], y[n], z[n]}; }
  void set(std::size_t n, Vec3 v) {
    x[n] = static_cast<float>(v.x);
    y[n] = static_cast<float>(v.y);
    z[n] = static_cast<float>(v.z);
  }
  double magnitude(std::size_t n) const {
    return std::sqrt(double(x[n]) * x[n] + double(y[n]) * y[n] + double(z[n]) * z[n]);
  }
  double max_magnitude() const {
    double m = 0;
    for (std::size_t n = 0; n < size(); ++n) m = std::max(m, magnitude(n));
    return m;
  }
};

inline void require_same_grid(const Grid& a, const Grid& b, const char* op) {
  if (a != b) throw Error(ErrorKind::geometry, std::string(op) + ": geometry mismatch");
}

// ---------------------------------------------------------------------------

inline float hu_to_mu(float hu, double mu_water) {
  const double mu = mu_water * (static_cast<double>(hu) + 1000.0) / 1000.0;
  return mu > 0.0 ? static_cast<float>(mu) : 0.0f;
}

/// Linear HU -> attenuation (per mm), clamped at zero below -1000 HU.
inline Volume3D hu_to_attenuation(const Volume3D& v, double mu_water = kDefaultMuWater) {
  v.require_unit(Unit::hu, "hu_to_attenuation");
  Volume3D out(v.grid(), Unit::attenuation_per_mm);
  const auto& src = v.values();
  auto& dst = out.values();
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(src.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) dst[i] = hu_to_mu(src[i], mu_water);
  return out;
}

/// Trilinear interpolation at a continuous voxel index. Corners outside the
/// grid contribute `fill`; an exact integer index returns the stored value.
inline float sample_index(const Volume3D& v, double ci, double cj, double ck, float fill) {
  const Grid& g = v.grid();
  const double fi = std::floor(ci), fj = std::floor(cj), fk = std::floor(ck);
  const int i0 = static_cast<int>(fi), j0 = static_cast<int>(fj), k0 = static_cast<int>(fk);
  const double tx = ci - fi, ty = cj - fj, tz = ck - fk;
  if (i0 < -1 || j0 < -1 || k0 < -1 || i0 >= g.dims[0] || j0 >= g.dims[1] || k0 >= g.dims[2])
    return fill;

  auto at = [&](int i, int j, int k) -> double {
    return g.contains(i, j, k) ? static_cast<double>(v(i, j, k)) : static_cast<double>(fill);
  };
  // Zero-weight corners are skipped so exact lattice points never touch
  // neighbors (keeps identity resampling bitwise and NaN-free).
  double acc = 0.0;
  for (int dk = 0; dk < 2; ++dk) {
    const double wz = dk ? tz : 1.0 - tz;
    if (wz == 0.0) continue;
    for (int dj = 0; dj < 2; ++dj) {
      const double wy = dj ? ty : 1.0 - ty;
      if (wy == 0.0) continue;
      for (int di = 0; di < 2; ++di) {
        const double wx = di ? tx : 1.0 - tx;
        if (wx == 0.0) continue;
        acc += wx * wy * wz * at(i0 + di, j0 + dj, k0 + dk);
      }
    }
  }
  return static_cast<float>(acc);
}

inline float trilinear_sample(const Volume3D& v, Vec3 p, std::optional<float> fill = {}) {
  const Vec3 c = v.grid().continuous_index(p);
  return sample_index(v, c.x, c.y, c.z, fill.value_or(default_fill(v.unit())));
}

/// Resample onto `target`; each output voxel samples the source at its
/// world-space center. Identical grids reproduce the input exactly.
inline Volume3D resample_to_grid(const Volume3D& v, const Grid& target,
                                 std::optional<float> fill = {}) {
  target.validate();
  if (v.grid() == target) return v;
  const float f = fill.value_or(default_fill(v.unit()));
  const Grid& s = v.grid();
  Volume3D out(target, v.unit());
  // ci = a + i*b per axis
  Vec3 a, b;
  for (int ax = 0; ax < 3; ++ax) {
    a[ax] = (target.origin[ax] - s.origin[ax]) / s.spacing[ax];
    b[ax] = target.spacing[ax] / s.spacing[ax];
  }
#pragma omp parallel for schedule(static)
  for (int k = 0; k < target.dims[2]; ++k)
    for (int j = 0; j < target.dims[1]; ++j)
      for (int i = 0; i < target.dims[0]; ++i)
        out(i, j, k) = sample_index(v, a.x + i * b.x, a.y + j * b.y, a.z + k * b.z, f);
  return out;
}

}  // namespace simcbct
