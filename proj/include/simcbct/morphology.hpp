#pragma once

// Binary morphology and distance utilities on BinaryMask / Volume3D.

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "simcbct/volume.hpp"

namespace simcbct::morph {

/// Keep the largest 6-connected component. Ties resolve to the component
/// containing the lowest linear index.
inline BinaryMask largest_component(const BinaryMask& m) {
  const Grid& g = m.grid();
  const std::size_t n = g.size();
  std::vector<std::int32_t> label(n, -1);
  std::vector<std::size_t> sizes;
  std::vector<std::size_t> stack;
  for (std::size_t s = 0; s < n; ++s) {
    if (!m[s] || label[s] >= 0) continue;
    const std::int32_t id = static_cast<std::int32_t>(sizes.size());
    std::size_t count = 0;
    stack.push_back(s);
    label[s] = id;
    while (!stack.empty()) {
      const std::size_t cur = stack.back();
      stack.pop_back();
      ++count;
      const auto [i, j, k] = g.unravel(cur);
      const int nb[6][3] = {{i - 1, j, k}, {i + 1, j, k}, {i, j - 1, k},
                            {i, j + 1, k}, {i, j, k - 1}, {i, j, k + 1}};
      for (const auto& q : nb) {
        if (!g.contains(q[0], q[1], q[2])) continue;
        const std::size_t t = g.index(q[0], q[1], q[2]);
        if (m[t] && label[t] < 0) {
          label[t] = id;
          stack.push_back(t);
        }
      }
    }
    sizes.push_back(count);
  }
  BinaryMask out(g);
  if (sizes.empty()) return out;
  std::int32_t best = 0;
  for (std::size_t c = 1; c < sizes.size(); ++c)
    if (sizes[c] > sizes[best]) best = static_cast<std::int32_t>(c);
  for (std::size_t s = 0; s < n; ++s)
    if (label[s] == best) out.set(s, true);
  return out;
}

inline std::size_t component_count(const BinaryMask& m) {
  const Grid& g = m.grid();
  std::vector<std::uint8_t> seen(g.size(), 0);
  std::vector<std::size_t> stack;
  std::size_t comps = 0;
  for (std::size_t s = 0; s < g.size(); ++s) {
    if (!m[s] || seen[s]) continue;
    ++comps;
    seen[s] = 1;
    stack.push_back(s);
    while (!stack.empty()) {
      const auto [i, j, k] = g.unravel(stack.back());
      stack.pop_back();
      const int nb[6][3] = {{i - 1, j, k}, {i + 1, j, k}, {i, j - 1, k},
                            {i, j + 1, k}, {i, j, k - 1}, {i, j, k + 1}};
      for (const auto& q : nb) {
        if (!g.contains(q[0], q[1], q[2])) continue;
        const std::size_t t = g.index(q[0], q[1], q[2]);
        if (m[t] && !seen[t]) {
          seen[t] = 1;
          stack.push_back(t);
        }
      }
    }
  }
  return comps;
}

/// Fill holes slice by slice (axial): background pixels not 4-connected to
/// the slice border become foreground.
inline BinaryMask fill_holes_2d(const BinaryMask& m) {
  const Grid& g = m.grid();
  const int nx = g.dims[0], ny = g.dims[1], nz = g.dims[2];
  BinaryMask out = m;
#pragma omp parallel for schedule(dynamic)
  for (int k = 0; k < nz; ++k) {
    std::vector<std::uint8_t> outside(static_cast<std::size_t>(nx) * ny, 0);
    std::vector<int> stack;
    auto seed = [&](int i, int j) {
      const int p = j * nx + i;
      if (!m(i, j, k) && !outside[p]) {
        outside[p] = 1;
        stack.push_back(p);
      }
    };
    for (int i = 0; i < nx; ++i) {
      seed(i, 0);
      seed(i, ny - 1);
    }
    for (int j = 0; j < ny; ++j) {
      seed(0, j);
      seed(nx - 1, j);
    }
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      const int i = p % nx, j = p / nx;
      if (i > 0) seed(i - 1, j);
      if (i + 1 < nx) seed(i + 1, j);
      if (j > 0) seed(i, j - 1);
      if (j + 1 < ny) seed(i, j + 1);
    }
    for (int j = 0; j < ny; ++j)
      for (int i = 0; i < nx; ++i)
        if (!outside[j * nx + i]) out.set(i, j, k, true);
  }
  return out;
}

/// In-plane 3x3x1 dilation (box structuring element).
inline BinaryMask dilate_3x3x1(const BinaryMask& m) {
  const Grid& g = m.grid();
  BinaryMask out(g);
#pragma omp parallel for schedule(static)
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        bool v = false;
        for (int dj = -1; dj <= 1 && !v; ++dj)
          for (int di = -1; di <= 1 && !v; ++di)
            v = g.contains(i + di, j + dj, k) && m(i + di, j + dj, k);
        out.set(i, j, k, v);
      }
  return out;
}

/// In-plane 3x3x1 erosion; out-of-grid neighbors count as foreground so
/// closing does not eat into masks touching the border.
inline BinaryMask erode_3x3x1(const BinaryMask& m) {
  const Grid& g = m.grid();
  BinaryMask out(g);
#pragma omp parallel for schedule(static)
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        bool v = true;
        for (int dj = -1; dj <= 1 && v; ++dj)
          for (int di = -1; di <= 1 && v; ++di)
            v = !g.contains(i + di, j + dj, k) || m(i + di, j + dj, k);
        out.set(i, j, k, v);
      }
  return out;
}

inline BinaryMask close_3x3x1(const BinaryMask& m) { return erode_3x3x1(dilate_3x3x1(m)); }

/// Mask voxels with at least one 6-neighbor outside the mask (out-of-grid
/// neighbors count as outside).
inline BinaryMask inner_boundary(const BinaryMask& m) {
  const Grid& g = m.grid();
  BinaryMask out(g);
#pragma omp parallel for schedule(static)
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        if (!m(i, j, k)) continue;
        const int nb[6][3] = {{i - 1, j, k}, {i + 1, j, k}, {i, j - 1, k},
                              {i, j + 1, k}, {i, j, k - 1}, {i, j, k + 1}};
        bool edge = false;
        for (const auto& q : nb)
          if (!g.contains(q[0], q[1], q[2]) || !m(q[0], q[1], q[2])) edge = true;
        out.set(i, j, k, edge);
      }
  return out;
}

namespace detail {

// 1-D squared Euclidean distance transform (Felzenszwalb & Huttenlocher)
// on samples spaced `h` apart. f holds 0 at sites, +inf elsewhere.
inline void edt_1d(const double* f, double* d, int n, double h, std::vector<int>& v,
                   std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  v.assign(n, 0);
  z.assign(n + 1, 0.0);
  auto meet = [&](int q, int p) {
    const double xq = q * h, xp = p * h;
    return ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
  };
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      continue;
    }
    double s = meet(q, v[k]);
    while (k > 0 && s <= z[k]) {
      --k;
      s = meet(q, v[k]);
    }
    if (k == 0 && s <= z[0]) {
      v[0] = q;
      z[1] = inf;
      continue;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  if (k < 0) {
    for (int q = 0; q < n; ++q) d[q] = inf;
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[j + 1] < q * h) ++j;
    const double dx = (q - v[j]) * h;
    d[q] = dx * dx + f[v[j]];
  }
}

}  // namespace detail

/// Exact Euclidean distance (mm) from every voxel to the nearest mask voxel.
/// Empty masks yield +inf everywhere.
inline std::vector<double> distance_to_mask(const BinaryMask& m) {
  const Grid& g = m.grid();
  const int n[3] = {g.dims[0], g.dims[1], g.dims[2]};
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> d(g.size());
  for (std::size_t s = 0; s < g.size(); ++s) d[s] = m[s] ? 0.0 : inf;

  for (int axis = 0; axis < 3; ++axis) {
    const int len = n[axis];
    const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
    const double h = g.spacing[axis];
#pragma omp parallel
    {
      std::vector<double> f(len), out(len);
      std::vector<int> v;
      std::vector<double> z;
#pragma omp for schedule(static)
      for (int q2 = 0; q2 < n[a2]; ++q2) {
        for (int q1 = 0; q1 < n[a1]; ++q1) {
          int idx[3];
          idx[a1] = q1;
          idx[a2] = q2;
          for (int t = 0; t < len; ++t) {
            idx[axis] = t;
            f[t] = d[g.index(idx[0], idx[1], idx[2])];
          }
          detail::edt_1d(f.data(), out.data(), len, h, v, z);
          for (int t = 0; t < len; ++t) {
            idx[axis] = t;
            d[g.index(idx[0], idx[1], idx[2])] = out[t];
          }
        }
      }
    }
  }
  for (auto& x : d) x = std::sqrt(x);
  return d;
}

/// Separable Gaussian smoothing with sigma in voxels. The kernel is truncated
/// at 3 sigma and renormalized; out-of-grid samples are treated as zero.
inline std::vector<float> gaussian_smooth(const std::vector<float>& src, const Grid& g,
                                          double sigma_vox) {
  if (sigma_vox <= 0) return src;
  const int r = static_cast<int>(std::ceil(3.0 * sigma_vox));
  std::vector<double> kernel(2 * r + 1);
  double sum = 0;
  for (int t = -r; t <= r; ++t) sum += kernel[t + r] = std::exp(-0.5 * t * t / (sigma_vox * sigma_vox));
  for (auto& w : kernel) w /= sum;

  std::vector<float> cur = src, next(src.size());
  const int n[3] = {g.dims[0], g.dims[1], g.dims[2]};
  for (int axis = 0; axis < 3; ++axis) {
#pragma omp parallel for schedule(static)
    for (int k = 0; k < n[2]; ++k)
      for (int j = 0; j < n[1]; ++j)
        for (int i = 0; i < n[0]; ++i) {
          int idx[3] = {i, j, k};
          const int c = idx[axis];
          double acc = 0;
          for (int t = -r; t <= r; ++t) {
            const int p = c + t;
            if (p < 0 || p >= n[axis]) continue;
            idx[axis] = p;
            acc += kernel[t + r] * cur[g.index(idx[0], idx[1], idx[2])];
          }
          next[g.index(i, j, k)] = static_cast<float>(acc);
        }
    std::swap(cur, next);
  }
  return cur;
}

}  // namespace simcbct::morph
