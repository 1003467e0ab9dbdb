#pragma once

// Shared primitives: error type, 3-vectors, grid geometry, counter-based RNG
// streams and the OpenMP helpers used across the simulator.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace simcbct {

inline constexpr const char* kVersion = "1.0.0";

enum class ErrorKind {
  unit_mismatch,
  degenerate_input,
  precondition,
  geometry,
  domain,
  config,
  fit,
  stage,
  io,
};

inline const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::unit_mismatch: return "unit-mismatch";
    case ErrorKind::degenerate_input: return "degenerate-input";
    case ErrorKind::precondition: return "precondition";
    case ErrorKind::geometry: return "geometry";
    case ErrorKind::domain: return "domain";
    case ErrorKind::config: return "config";
    case ErrorKind::fit: return "fit";
    case ErrorKind::stage: return "stage";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct Vec3 {
  double x = 0, y = 0, z = 0;

  constexpr double& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
  constexpr double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
};

constexpr Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
constexpr Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
constexpr Vec3 operator-(Vec3 a) { return {-a.x, -a.y, -a.z}; }
constexpr Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
constexpr Vec3 operator*(Vec3 a, double s) { return s * a; }
constexpr double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
constexpr Vec3 cross(Vec3 a, Vec3 b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(Vec3 a) { return std::sqrt(dot(a, a)); }
constexpr bool operator==(Vec3 a, Vec3 b) { return a.x == b.x && a.y == b.y && a.z == b.z; }

using Index3 = std::array<int, 3>;

/// Axis-aligned voxel grid. Voxel values sit at voxel centers:
/// world = origin + index * spacing.
struct Grid {
  Index3 dims{1, 1, 1};
  Vec3 spacing{1, 1, 1};
  Vec3 origin{0, 0, 0};

  std::size_t size() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }
  std::size_t index(int i, int j, int k) const {
    return (static_cast<std::size_t>(k) * dims[1] + j) * dims[0] + i;
  }
  Index3 unravel(std::size_t n) const {
    const int i = static_cast<int>(n % dims[0]);
    const int j = static_cast<int>((n / dims[0]) % dims[1]);
    const int k = static_cast<int>(n / (static_cast<std::size_t>(dims[0]) * dims[1]));
    return {i, j, k};
  }
  bool contains(int i, int j, int k) const {
    return i >= 0 && j >= 0 && k >= 0 && i < dims[0] && j < dims[1] && k < dims[2];
  }
  Vec3 world(double i, double j, double k) const {
    return {origin.x + i * spacing.x, origin.y + j * spacing.y, origin.z + k * spacing.z};
  }
  Vec3 continuous_index(Vec3 p) const {
    return {(p.x - origin.x) / spacing.x, (p.y - origin.y) / spacing.y,
            (p.z - origin.z) / spacing.z};
  }
  Vec3 center() const {
    return world(0.5 * (dims[0] - 1), 0.5 * (dims[1] - 1), 0.5 * (dims[2] - 1));
  }
  double min_spacing() const { return std::min({spacing.x, spacing.y, spacing.z}); }

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (dims[a] < 1) throw Error(ErrorKind::geometry, "grid dims must be >= 1");
      if (!(spacing[a] > 0)) throw Error(ErrorKind::geometry, "grid spacing must be > 0");
    }
  }

  /// Grid of the given dims/spacing whose center lies at `center`.
  static Grid centered(Index3 dims, Vec3 spacing, Vec3 center) {
    Grid g{dims, spacing, {}};
    for (int a = 0; a < 3; ++a) g.origin[a] = center[a] - 0.5 * (dims[a] - 1) * spacing[a];
    return g;
  }
};

inline bool operator==(const Grid& a, const Grid& b) {
  return a.dims == b.dims && a.spacing == b.spacing && a.origin == b.origin;
}
inline bool operator!=(const Grid& a, const Grid& b) { return !(a == b); }

// ---------------------------------------------------------------------------
// Counter-based random streams. Every random quantity is keyed by
// (seed, domain, a, b) so results do not depend on thread scheduling.

namespace rng {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

enum class Domain : std::uint64_t {
  breathing_jitter = 1,
  contrast_noise = 2,
  detector_noise = 3,
  case_seed = 4,
  test = 99,
};

inline constexpr std::uint64_t key(std::uint64_t seed, Domain d, std::uint64_t a,
                                   std::uint64_t b = 0) {
  std::uint64_t h = splitmix64(seed ^ 0xA0761D6478BD642Full);
  h = splitmix64(h ^ static_cast<std::uint64_t>(d));
  h = splitmix64(h ^ a);
  return splitmix64(h ^ (b * 0xE7037ED1A0B428DBull));
}

/// SplitMix64 engine; satisfies UniformRandomBitGenerator.
class Stream {
 public:
  using result_type = std::uint64_t;
  explicit Stream(std::uint64_t state) : state_(state) {}
  Stream(std::uint64_t seed, Domain d, std::uint64_t a, std::uint64_t b = 0)
      : state_(key(seed, d, a, b)) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
  result_type operator()() {
    state_ += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller (one value per call, deterministic).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

 private:
  std::uint64_t state_;
};

}  // namespace rng

// ---------------------------------------------------------------------------
// Threading. SIMCBCT_THREADS caps the OpenMP team size.

inline int configured_threads() {
#if defined(_OPENMP)
  int n = omp_get_max_threads();
  if (const char* env = std::getenv("SIMCBCT_THREADS")) {
    const int cap = std::atoi(env);
    if (cap > 0) n = cap;
  }
  return n;
#else
  return 1;
#endif
}

inline void apply_thread_cap() {
#if defined(_OPENMP)
  omp_set_num_threads(configured_threads());
#endif
}

}  // namespace simcbct
