#pragma once

#include <algorithm>
#include <array>
#include <vector>

#include "simcbct/morphology.hpp"

namespace simcbct {

/// Fixed recipe for the evaluation outline mask.
struct OutlineParams {
  int bins = 256;
  bool closing = true;
  bool fill_holes = true;
  bool largest_component = true;
};

struct OtsuResult {
  double threshold = 0;  // values strictly above are foreground
  int bin = 0;           // last background bin
  double min = 0, max = 0;
};

/// Otsu threshold over a `bins`-bin histogram spanning [min, max]. The
/// chosen split maximizes between-class variance; ties go to the lowest bin.
inline OtsuResult otsu_threshold(const std::vector<float>& values, int bins = 256) {
  if (values.empty()) throw Error(ErrorKind::degenerate_input, "otsu: empty input");
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) throw Error(ErrorKind::degenerate_input, "otsu: constant volume");

  std::vector<double> hist(bins, 0.0);
  const double scale = bins / (hi - lo);
  for (float v : values) {
    int b = static_cast<int>((v - lo) * scale);
    hist[std::clamp(b, 0, bins - 1)] += 1.0;
  }
  const double total = static_cast<double>(values.size());
  double sum_all = 0;
  for (int b = 0; b < bins; ++b) sum_all += b * hist[b];

  double w0 = 0, sum0 = 0, best = -1;
  int best_bin = 0;
  for (int b = 0; b < bins - 1; ++b) {
    w0 += hist[b];
    sum0 += b * hist[b];
    const double w1 = total - w0;
    if (w0 == 0 || w1 == 0) continue;
    const double m0 = sum0 / w0, m1 = (sum_all - sum0) / w1;
    const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
    if (between > best) {
      best = between;
      best_bin = b;
    }
  }
  OtsuResult r;
  r.bin = best_bin;
  r.min = lo;
  r.max = hi;
  r.threshold = lo + (best_bin + 1) / scale;
  return r;
}

/// Body outline: Otsu foreground, 3x3x1 closing, slice-wise hole filling,
/// largest 6-connected component.
inline BinaryMask otsu_outline_mask(const Volume3D& v, const OutlineParams& p = {}) {
  v.require_unit(Unit::hu, "otsu_outline_mask");
  const OtsuResult t = otsu_threshold(v.values(), p.bins);
  const double scale = p.bins / (t.max - t.min);
  BinaryMask m(v.grid());
  for (std::size_t n = 0; n < v.size(); ++n) {
    const int b = std::clamp(static_cast<int>((v[n] - t.min) * scale), 0, p.bins - 1);
    m.set(n, b > t.bin);
  }
  if (p.closing) m = morph::close_3x3x1(m);
  if (p.fill_holes) m = morph::fill_holes_2d(m);
  if (p.largest_component) m = morph::largest_component(m);
  return m;
}

}  // namespace simcbct
