#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "simcbct/kdtree.hpp"
#include "simcbct/metaimage.hpp"
#include "simcbct/morphology.hpp"
#include "simcbct/outline.hpp"
#include "simcbct/phantom.hpp"
#include "simcbct/volume.hpp"

using namespace simcbct;

namespace {

Grid small_grid(int n = 8, double h = 1.0) { return Grid{{n, n, n}, {h, h, h}, {0, 0, 0}}; }

Volume3D linear_volume(const Grid& g, Vec3 coef, double c0) {
  Volume3D v(g, Unit::hu);
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        const Vec3 p = g.world(i, j, k);
        v(i, j, k) = static_cast<float>(c0 + dot(coef, p));
      }
  return v;
}

}  // namespace

TEST(HuToAttenuation, ReferenceValues) {
  Volume3D v(small_grid(3), Unit::hu);
  v[0] = 0;
  v[1] = -1000;
  v[2] = 1000;
  v[3] = -1024;
  const Volume3D mu = hu_to_attenuation(v);
  EXPECT_EQ(mu.unit(), Unit::attenuation_per_mm);
  EXPECT_NEAR(mu[0], 0.018, 1e-8);  // float storage
  EXPECT_EQ(mu[1], 0.0f);
  EXPECT_NEAR(mu[2], 0.036, 1e-8);
  EXPECT_EQ(mu[3], 0.0f);  // clamped
  EXPECT_EQ(mu.grid(), v.grid());
}

TEST(HuToAttenuation, RejectsWrongUnit) {
  Volume3D v(small_grid(2), Unit::gray);
  try {
    hu_to_attenuation(v);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::unit_mismatch);
  }
}

TEST(HuToAttenuation, AffineAboveMinus1000) {
  std::mt19937 rng(3);
  std::uniform_real_distribution<float> hu(-1000, 3000);
  for (int t = 0; t < 100; ++t) {
    const float a = hu(rng), b = hu(rng);
    EXPECT_NEAR(hu_to_mu(a, 0.018) - hu_to_mu(b, 0.018), 0.018 * (a - b) / 1000.0, 1e-7);
  }
}

TEST(TrilinearSample, VoxelCenterMidpointAndFill) {
  Grid g{{4, 3, 2}, {2, 1, 3}, {-1, 5, 10}};
  Volume3D v(g, Unit::hu);
  for (std::size_t n = 0; n < v.size(); ++n) v[n] = static_cast<float>(n * 7 % 13);
  for (int k = 0; k < 2; ++k)
    for (int j = 0; j < 3; ++j)
      for (int i = 0; i < 4; ++i) EXPECT_EQ(trilinear_sample(v, g.world(i, j, k)), v(i, j, k));

  v(0, 0, 0) = 0;
  v(1, 0, 0) = 100;
  EXPECT_FLOAT_EQ(trilinear_sample(v, g.world(0.5, 0, 0)), 50.0f);
  EXPECT_EQ(trilinear_sample(v, {-100, 0, 0}), -1024.0f);

  Volume3D mu(g, Unit::attenuation_per_mm, 0.5f);
  EXPECT_EQ(trilinear_sample(mu, {0, 0, 1000}), 0.0f);
  EXPECT_EQ(trilinear_sample(mu, {0, 0, 1000}, 7.0f), 7.0f);
}

TEST(TrilinearSample, LipschitzContinuity) {
  const Grid g = small_grid(6);
  std::mt19937 rng(11);
  std::uniform_real_distribution<float> val(-500, 500);
  Volume3D v(g, Unit::hu);
  float max_diff = 0;
  for (std::size_t n = 0; n < v.size(); ++n) v[n] = val(rng);
  for (int k = 0; k < 6; ++k)
    for (int j = 0; j < 6; ++j)
      for (int i = 0; i + 1 < 6; ++i) max_diff = std::max(max_diff, std::abs(v(i + 1, j, k) - v(i, j, k)));
  for (int j = 0; j < 6; ++j)
    for (int k = 0; k < 6; ++k)
      for (int i = 0; i + 1 < 6; ++i) {
        max_diff = std::max(max_diff, std::abs(v(j, i + 1, k) - v(j, i, k)));
        max_diff = std::max(max_diff, std::abs(v(j, k, i + 1) - v(j, k, i)));
      }
  std::uniform_real_distribution<double> pos(0.5, 4.5);
  const double eps = 1e-3;
  for (int t = 0; t < 500; ++t) {
    const Vec3 p{pos(rng), pos(rng), pos(rng)};
    const Vec3 q = p + Vec3{eps, -eps, eps};
    const double bound = max_diff * 3 * eps * 1.001 + 1e-3;
    EXPECT_LE(std::abs(trilinear_sample(v, p) - trilinear_sample(v, q)), bound);
  }
}

TEST(ResampleToGrid, IdentityIsBitwise) {
  const Grid g{{5, 6, 7}, {0.7, 1.1, 2.5}, {3, -4, 1}};
  Volume3D v(g, Unit::hu);
  std::mt19937 rng(1);
  std::uniform_real_distribution<float> d(-1024, 3000);
  for (std::size_t n = 0; n < v.size(); ++n) v[n] = d(rng);
  const Volume3D r = resample_to_grid(v, g);
  EXPECT_EQ(r.values(), v.values());

  // same geometry built independently still takes the exact path
  Grid g2 = g;
  const Volume3D r2 = resample_to_grid(v, g2);
  EXPECT_EQ(r2.values(), v.values());
}

TEST(ResampleToGrid, UpsamplingPreservesLinearRamp) {
  const Grid src{{9, 9, 9}, {2, 2, 2}, {0, 0, 0}};
  const Vec3 coef{3, -1.5, 0.25};
  const Volume3D v = linear_volume(src, coef, 10);
  const Grid dst{{17, 17, 17}, {1, 1, 1}, {0, 0, 0}};
  const Volume3D r = resample_to_grid(v, dst);
  const double range = 3 * 16 + 1.5 * 16 + 0.25 * 16;
  double err = 0;
  for (int k = 0; k < 17; ++k)
    for (int j = 0; j < 17; ++j)
      for (int i = 0; i < 17; ++i) err = std::max(err, std::abs(r(i, j, k) - (10 + dot(coef, dst.world(i, j, k)))));
  EXPECT_LT(err, 1e-6 * range * 10);  // float storage
}

TEST(ResampleToGrid, TableOneReconGrid) {
  const Grid src{{64, 64, 20}, {6, 6, 12}, {-190, -190, -120}};
  Volume3D v(src, Unit::hu, 0.f);
  const Grid dst = Grid::centered({410, 410, 66}, {1, 1, 4}, {0, 0, 0});
  const Volume3D r = resample_to_grid(v, dst);
  EXPECT_EQ(r.grid().dims, (Index3{410, 410, 66}));
  EXPECT_EQ(r.grid().spacing, (Vec3{1, 1, 4}));
}

TEST(Phantom, WaterCylinderValues) {
  const Grid g = Grid::centered({64, 64, 4}, {4, 4, 4}, {0, 0, 0});
  const Phantom ph = make_phantom(PhantomSpec::water_cylinder(100), g);
  for (int k = 0; k < 4; ++k)
    for (int j = 0; j < 64; ++j)
      for (int i = 0; i < 64; ++i) {
        const Vec3 p = g.world(i, j, k);
        const double r = std::hypot(p.x, p.y);
        EXPECT_EQ(ph.volume(i, j, k), r <= 100 ? 0.0f : -1024.0f);
      }
  // diameter integral at mu_water
  EXPECT_NEAR(ph.analytic.line_integral({-300, 0, 0}, {300, 0, 0}), 3.6, 1e-12);
  // off-center chord: mu * 2 sqrt(R^2 - b^2)
  EXPECT_NEAR(ph.analytic.line_integral({-300, 60, 1}, {300, 60, 1}), 0.018 * 2 * 80, 1e-12);
}

TEST(Phantom, PelvicInsertValues) {
  const Grid g = Grid::centered({96, 96, 8}, {4, 4, 4}, {0, 0, 0});
  const PhantomSpec spec = PhantomSpec::pelvic();
  const Phantom ph = make_phantom(spec, g);
  const auto& hip = spec.inserts[1];
  const Vec3 c = ph.analytic.center() + hip.center;
  const Vec3 idx = g.continuous_index(c);
  EXPECT_EQ(hip.hu, 800);
  EXPECT_EQ(ph.volume(static_cast<int>(std::lround(idx.x)), static_cast<int>(std::lround(idx.y)), 3), 800.0f);
  EXPECT_GT(ph.surrogate.count(), 0u);
}

TEST(Phantom, InsertOutsideBodyIsRejected) {
  PhantomSpec s = PhantomSpec::water_cylinder(50);
  s.inserts.push_back({InsertShape::cylinder, {45, 0, 0}, 10, 500, false});
  EXPECT_THROW(make_phantom(s, small_grid(16, 8)), Error);
  s.inserts.back().center = {0, 0, 0};
  s.inserts.back().hu = 5000;
  EXPECT_THROW(make_phantom(s, small_grid(16, 8)), Error);
}

TEST(Phantom, AnalyticIntegralMatchesDenseQuadrature) {
  const Grid g = Grid::centered({32, 32, 16}, {8, 8, 8}, {0, 0, 0});
  const Phantom ph = make_phantom(PhantomSpec::pelvic(), g);
  const Vec3 a{-400, -90, -30}, b{400, 130, 45};
  const int n = 400000;
  double acc = 0;
  for (int s = 0; s < n; ++s) {
    const Vec3 p = a + ((s + 0.5) / n) * (b - a);
    acc += hu_to_mu(static_cast<float>(ph.analytic.hu_at(p)), kDefaultMuWater);
  }
  acc *= norm(b - a) / n;
  EXPECT_NEAR(ph.analytic.line_integral(a, b), acc, 1e-4);
}

TEST(Otsu, CylinderMaskMatchesAnalyticInterior) {
  const Grid g = Grid::centered({80, 80, 6}, {3, 3, 3}, {0, 0, 0});
  const Phantom ph = make_phantom(PhantomSpec::water_cylinder(100), g);
  const BinaryMask m = otsu_outline_mask(ph.volume);
  std::size_t inter = 0, a = 0, b = 0;
  for (std::size_t n = 0; n < m.size(); ++n) {
    const bool truth = ph.volume[n] == 0.0f;
    inter += truth && m[n];
    a += truth;
    b += m[n];
  }
  EXPECT_GT(2.0 * inter / (a + b), 0.99);
  EXPECT_EQ(morph::component_count(m), 1u);
}

TEST(Otsu, ConstantVolumeIsDegenerate) {
  Volume3D v(small_grid(4), Unit::hu, -1024.f);
  try {
    otsu_outline_mask(v);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::degenerate_input);
  }
}

TEST(Otsu, MatchesBruteForceThresholdSearch) {
  std::mt19937 rng(5);
  std::normal_distribution<float> lo(-600, 120), hi(200, 80);
  std::vector<float> vals(5000);
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = i % 3 ? lo(rng) : hi(rng);
  const OtsuResult r = otsu_threshold(vals);

  // independent oracle: explicit class statistics for every split
  const double mn = *std::min_element(vals.begin(), vals.end());
  const double mx = *std::max_element(vals.begin(), vals.end());
  std::vector<int> bin(vals.size());
  for (std::size_t i = 0; i < vals.size(); ++i)
    bin[i] = std::min(255, static_cast<int>((vals[i] - mn) / (mx - mn) * 256));
  double best = -1;
  int best_t = -1;
  for (int t = 0; t < 255; ++t) {
    double s0 = 0, s1 = 0, n0 = 0, n1 = 0;
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double c = mn + (bin[i] + 0.5) * (mx - mn) / 256;
      if (bin[i] <= t) s0 += c, n0 += 1;
      else s1 += c, n1 += 1;
    }
    if (n0 == 0 || n1 == 0) continue;
    const double w0 = n0 / vals.size(), w1 = n1 / vals.size();
    const double between = w0 * w1 * std::pow(s0 / n0 - s1 / n1, 2);
    if (between > best * (1 + 1e-12)) best = between, best_t = t;
  }
  EXPECT_EQ(r.bin, best_t);
}

TEST(Otsu, TwoClassVolumeSeparatesExactly) {
  const Grid g = small_grid(12);
  Volume3D v(g, Unit::hu, -1000.f);
  for (int k = 0; k < 12; ++k)
    for (int j = 3; j < 9; ++j)
      for (int i = 2; i < 10; ++i) v(i, j, k) = 0.f;
  const OtsuResult r = otsu_threshold(v.values());
  for (float x : v.values()) EXPECT_EQ(x > r.threshold, x == 0.f);
  const BinaryMask m = otsu_outline_mask(v);
  for (std::size_t n = 0; n < v.size(); ++n) EXPECT_EQ(m[n], v[n] == 0.f);
}

TEST(Morphology, DistanceTransformMatchesBruteForce) {
  const Grid g{{11, 9, 7}, {1.0, 1.5, 2.5}, {0, 0, 0}};
  BinaryMask m(g);
  std::mt19937 rng(9);
  for (int t = 0; t < 6; ++t) m.set(rng() % g.size(), true);
  const std::vector<double> d = morph::distance_to_mask(m);
  for (std::size_t n = 0; n < g.size(); ++n) {
    const auto [i, j, k] = g.unravel(n);
    double best = INFINITY;
    for (std::size_t s = 0; s < g.size(); ++s)
      if (m[s]) {
        const auto [a, b, c] = g.unravel(s);
        best = std::min(best, norm(g.world(i, j, k) - g.world(a, b, c)));
      }
    EXPECT_NEAR(d[n], best, 1e-9);
  }
}

TEST(Morphology, InnerBoundaryMatchesNeighborScan) {
  const Grid g = Grid::centered({40, 40, 6}, {5, 5, 5}, {0, 0, 0});
  const Phantom ph = make_phantom(PhantomSpec::pelvic(), g);
  BinaryMask fg(g);
  for (std::size_t n = 0; n < g.size(); ++n) fg.set(n, ph.volume[n] > -300);
  const BinaryMask b = morph::inner_boundary(fg);
  for (int k = 0; k < 6; ++k)
    for (int j = 0; j < 40; ++j)
      for (int i = 0; i < 40; ++i) {
        bool edge = false;
        if (fg(i, j, k)) {
          const int off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
          for (auto& o : off) {
            const int a = i + o[0], bb = j + o[1], c = k + o[2];
            if (!g.contains(a, bb, c) || !fg(a, bb, c)) edge = true;
          }
        }
        EXPECT_EQ(b(i, j, k), edge);
      }
}

TEST(KdTree, KnnMatchesBruteForce) {
  std::mt19937 rng(2);
  std::uniform_real_distribution<double> u(-50, 50);
  std::vector<Vec3> pts(700);
  for (auto& p : pts) p = {u(rng), u(rng), std::round(u(rng))};
  const KdTree tree(pts);
  std::vector<KdTree::Neighbor> nb;
  for (int t = 0; t < 200; ++t) {
    const Vec3 q{u(rng), u(rng), u(rng)};
    tree.knn(q, 8, nb);
    std::vector<KdTree::Neighbor> all;
    for (std::uint32_t i = 0; i < pts.size(); ++i) all.push_back({dot(pts[i] - q, pts[i] - q), i});
    std::sort(all.begin(), all.end());
    ASSERT_EQ(nb.size(), 8u);
    for (int i = 0; i < 8; ++i) EXPECT_EQ(nb[i].index, all[i].index);
  }
}

TEST(MetaImage, RoundTripAllElementTypes) {
  const auto dir = std::filesystem::temp_directory_path() / "simcbct_test_mha";
  std::filesystem::create_directories(dir);
  const Grid g{{5, 4, 3}, {0.5, 1.25, 3}, {-2.5, 7, 0.125}};
  Volume3D v(g, Unit::hu);
  for (std::size_t n = 0; n < v.size(); ++n) v[n] = static_cast<float>(n) * 1.5f - 20.f;

  io::write_volume(dir / "f.mha", v);
  const Volume3D f = io::read_volume(dir / "f.mha");
  EXPECT_EQ(f.grid(), g);
  EXPECT_EQ(f.values(), v.values());

  io::write_volume(dir / "s.mha", v, io::ElementType::int16);
  const Volume3D s = io::read_volume(dir / "s.mha");
  for (std::size_t n = 0; n < v.size(); ++n) EXPECT_EQ(s[n], std::round(v[n]));

  BinaryMask m(g);
  m.set(3, true);
  m.set(17, true);
  io::write_mask(dir / "m.mha", m);
  EXPECT_EQ(io::read_mask(dir / "m.mha").bits(), m.bits());

  VectorField vf(g);
  vf.set(5, {1, -2, 0.5});
  io::write_vector_field(dir / "vf", vf);
  const VectorField r = io::read_vector_field(dir / "vf");
  EXPECT_EQ(r.x, vf.x);
  EXPECT_EQ(r.y, vf.y);
  EXPECT_EQ(r.z, vf.z);
  std::filesystem::remove_all(dir);
}

TEST(MetaImage, RejectsUnsupportedHeaders) {
  const auto p = std::filesystem::temp_directory_path() / "simcbct_bad.mha";
  {
    std::ofstream o(p);
    o << "NDims = 3\nDimSize = 1 1 1\nElementType = MET_FLOAT\nCompressedData = True\nElementDataFile = LOCAL\n";
  }
  EXPECT_THROW(io::read_metaimage(p), Error);
  {
    std::ofstream o(p);
    o << "NDims = 2\nDimSize = 1 1\nElementType = MET_FLOAT\nElementDataFile = LOCAL\n";
  }
  EXPECT_THROW(io::read_metaimage(p), Error);
  std::filesystem::remove(p);
}
