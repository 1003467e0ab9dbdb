#pragma once

// Image similarity metrics evaluated inside an outline mask, plus the local
// NMI heatmap used for alignment review.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "simcbct/volume.hpp"

namespace simcbct {

namespace metrics_detail {

inline void check_pair(const Volume3D& a, const Volume3D& b, const BinaryMask& m,
                       const char* op) {
  require_same_grid(a.grid(), b.grid(), op);
  require_same_grid(a.grid(), m.grid(), op);
}

inline std::size_t require_nonempty(const BinaryMask& m, const char* op) {
  const std::size_t n = m.count();
  if (n == 0) throw Error(ErrorKind::degenerate_input, std::string(op) + ": empty mask");
  return n;
}

inline std::pair<double, double> mask_range(const Volume3D& v, const BinaryMask& m) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t n = 0; n < v.size(); ++n)
    if (m[n]) {
      lo = std::min(lo, static_cast<double>(v[n]));
      hi = std::max(hi, static_cast<double>(v[n]));
    }
  return {lo, hi};
}

inline int bin_of(double x, double lo, double hi, int bins) {
  const int b = static_cast<int>((x - lo) / (hi - lo) * bins);
  return std::clamp(b, 0, bins - 1);
}

/// 2I/(H_A+H_B) from a joint count table (row = a bin, column = b bin).
inline double nmi_from_joint(const std::vector<double>& joint, int ba, int bb) {
  double total = 0;
  for (double c : joint) total += c;
  std::vector<double> pa(ba, 0.0), pb(bb, 0.0);
  for (int i = 0; i < ba; ++i)
    for (int j = 0; j < bb; ++j) {
      pa[i] += joint[i * bb + j];
      pb[j] += joint[i * bb + j];
    }
  auto plogp = [&](double c) { return c > 0 ? (c / total) * std::log(c / total) : 0.0; };
  double ha = 0, hb = 0, hab = 0;
  for (double c : pa) ha -= plogp(c);
  for (double c : pb) hb -= plogp(c);
  for (double c : joint) hab -= plogp(c);
  const double denom = ha + hb;
  if (!(denom > 0)) throw Error(ErrorKind::degenerate_input, "nmi: zero marginal entropy");
  return std::clamp(2.0 * (ha + hb - hab) / denom, 0.0, 1.0);
}

}  // namespace metrics_detail

inline double mae(const Volume3D& a, const Volume3D& b, const BinaryMask& m) {
  metrics_detail::check_pair(a, b, m, "mae");
  const std::size_t count = metrics_detail::require_nonempty(m, "mae");
  double s = 0;
  for (std::size_t n = 0; n < a.size(); ++n)
    if (m[n]) s += std::abs(static_cast<double>(a[n]) - static_cast<double>(b[n]));
  return s / static_cast<double>(count);
}

inline double mse(const Volume3D& a, const Volume3D& b, const BinaryMask& m) {
  metrics_detail::check_pair(a, b, m, "mse");
  const std::size_t count = metrics_detail::require_nonempty(m, "mse");
  double s = 0;
  for (std::size_t n = 0; n < a.size(); ++n)
    if (m[n]) {
      const double d = static_cast<double>(a[n]) - static_cast<double>(b[n]);
      s += d * d;
    }
  return s / static_cast<double>(count);
}

/// Mask range of `a` (the ground truth): the default PSNR and SSIM range.
inline double default_data_range(const Volume3D& a, const BinaryMask& m) {
  metrics_detail::require_nonempty(m, "data_range");
  const auto [lo, hi] = metrics_detail::mask_range(a, m);
  return hi - lo;
}

/// Returns +infinity for identical inputs.
inline double psnr(const Volume3D& a, const Volume3D& b, const BinaryMask& m,
                   std::optional<double> data_range = {}) {
  metrics_detail::check_pair(a, b, m, "psnr");
  const double range = data_range ? *data_range : default_data_range(a, m);
  if (!(range > 0)) throw Error(ErrorKind::degenerate_input, "psnr: data range must be > 0");
  const double e = mse(a, b, m);
  if (e == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(range * range / e);
}

struct SsimParams {
  int window = 7;
  std::optional<double> data_range;
  double k1 = 0.01, k2 = 0.03;
};

namespace metrics_detail {

/// Sum over a clipped box of half-width r along one axis, in place.
inline void box_sum_axis(std::vector<double>& f, const Index3& d, int axis, int r) {
  const int len = d[axis];
  const std::size_t stride = axis == 0 ? 1 : (axis == 1 ? std::size_t(d[0]) : std::size_t(d[0]) * d[1]);
  const int o1 = axis == 0 ? 1 : 0, o2 = axis == 2 ? 1 : 2;
  const int n1 = d[o1], n2 = d[o2];
  std::vector<double> out(f.size());
#pragma omp parallel for schedule(static)
  for (int q = 0; q < n2; ++q) {
    std::vector<double> line(len);
    for (int p = 0; p < n1; ++p) {
      Index3 idx{0, 0, 0};
      idx[o1] = p;
      idx[o2] = q;
      const std::size_t base =
          (static_cast<std::size_t>(idx[2]) * d[1] + idx[1]) * d[0] + idx[0];
      for (int t = 0; t < len; ++t) line[t] = f[base + t * stride];
      for (int t = 0; t < len; ++t) {
        double s = 0;
        const int lo = std::max(0, t - r), hi = std::min(len - 1, t + r);
        for (int u = lo; u <= hi; ++u) s += line[u];
        out[base + t * stride] = s;
      }
    }
  }
  f.swap(out);
}

inline std::vector<double> box_sum(std::vector<double> f, const Index3& d, int r) {
  for (int axis = 0; axis < 3; ++axis) box_sum_axis(f, d, axis, r);
  return f;
}

}  // namespace metrics_detail

/// Per-voxel local SSIM map (windows clipped at the volume border, population
/// moments). Values outside the mask are left at zero.
inline std::vector<double> ssim_map(const Volume3D& a, const Volume3D& b, const BinaryMask& m,
                                    const SsimParams& p = {}) {
  metrics_detail::check_pair(a, b, m, "ssim");
  metrics_detail::require_nonempty(m, "ssim");
  if (p.window < 1 || p.window % 2 == 0)
    throw Error(ErrorKind::precondition, "ssim: window must be odd and >= 1");
  const double L = p.data_range ? *p.data_range : default_data_range(a, m);
  if (!(L > 0)) throw Error(ErrorKind::degenerate_input, "ssim: data range must be > 0");
  const double c1 = (p.k1 * L) * (p.k1 * L), c2 = (p.k2 * L) * (p.k2 * L);

  // Shift both images by one constant so second moments stay well conditioned.
  double shift = 0;
  for (float v : a.values()) shift += v;
  shift /= static_cast<double>(a.size());

  const Index3 d = a.grid().dims;
  const std::size_t n = a.size();
  std::vector<double> sa(n), sb(n), saa(n), sbb(n), sab(n), ones(n, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = a[i] - shift, y = b[i] - shift;
    sa[i] = x;
    sb[i] = y;
    saa[i] = x * x;
    sbb[i] = y * y;
    sab[i] = x * y;
  }
  const int r = p.window / 2;
  sa = metrics_detail::box_sum(std::move(sa), d, r);
  sb = metrics_detail::box_sum(std::move(sb), d, r);
  saa = metrics_detail::box_sum(std::move(saa), d, r);
  sbb = metrics_detail::box_sum(std::move(sbb), d, r);
  sab = metrics_detail::box_sum(std::move(sab), d, r);
  ones = metrics_detail::box_sum(std::move(ones), d, r);

  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!m[i]) continue;
    const double cnt = ones[i];
    const double ma = sa[i] / cnt, mb = sb[i] / cnt;
    // Unclamped so identical inputs give bitwise equal terms and SSIM = 1.
    const double va = saa[i] / cnt - ma * ma;
    const double vb = sbb[i] / cnt - mb * mb;
    const double cov = sab[i] / cnt - ma * mb;
    const double mua = ma + shift, mub = mb + shift;
    out[i] = ((2 * mua * mub + c1) * (2 * cov + c2)) /
             ((mua * mua + mub * mub + c1) * (va + vb + c2));
  }
  return out;
}

inline double ssim(const Volume3D& a, const Volume3D& b, const BinaryMask& m,
                   const SsimParams& p = {}) {
  const std::vector<double> map = ssim_map(a, b, m, p);
  double s = 0;
  std::size_t c = 0;
  for (std::size_t i = 0; i < map.size(); ++i)
    if (m[i]) {
      s += map[i];
      ++c;
    }
  return std::clamp(s / static_cast<double>(c), -1.0, 1.0);
}

inline double nmi(const Volume3D& a, const Volume3D& b, const BinaryMask& m, int bins = 64) {
  metrics_detail::check_pair(a, b, m, "nmi");
  metrics_detail::require_nonempty(m, "nmi");
  if (bins < 2) throw Error(ErrorKind::precondition, "nmi: bins must be >= 2");
  const auto [alo, ahi] = metrics_detail::mask_range(a, m);
  const auto [blo, bhi] = metrics_detail::mask_range(b, m);
  if (!(ahi > alo) || !(bhi > blo))
    throw Error(ErrorKind::degenerate_input, "nmi: constant image within mask");
  std::vector<double> joint(static_cast<std::size_t>(bins) * bins, 0.0);
  for (std::size_t n = 0; n < a.size(); ++n)
    if (m[n])
      joint[metrics_detail::bin_of(a[n], alo, ahi, bins) * bins +
            metrics_detail::bin_of(b[n], blo, bhi, bins)] += 1.0;
  return metrics_detail::nmi_from_joint(joint, bins, bins);
}

/// Pearson correlation over mask voxels.
inline double cc(const Volume3D& a, const Volume3D& b, const BinaryMask& m) {
  metrics_detail::check_pair(a, b, m, "cc");
  const std::size_t count = metrics_detail::require_nonempty(m, "cc");
  double ma = 0, mb = 0;
  for (std::size_t n = 0; n < a.size(); ++n)
    if (m[n]) {
      ma += a[n];
      mb += b[n];
    }
  ma /= static_cast<double>(count);
  mb /= static_cast<double>(count);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t n = 0; n < a.size(); ++n)
    if (m[n]) {
      const double x = a[n] - ma, y = b[n] - mb;
      sab += x * y;
      saa += x * x;
      sbb += y * y;
    }
  if (!(saa > 0) || !(sbb > 0)) throw Error(ErrorKind::degenerate_input, "cc: zero variance");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Local NMI heatmap.

struct HeatmapParams {
  double window_mm = 32;
  double stride_mm = 8;
  int bins = 32;
  double min_coverage = 0.5;
};

/// Sliding-window NMI evaluated at window centers and trilinearly
/// interpolated back to the image grid. Windows with insufficient mask
/// coverage or constant content are NaN; interpolation uses only finite
/// window values and yields NaN where none contribute.
inline Volume3D local_nmi_heatmap(const Volume3D& a, const Volume3D& b, const BinaryMask& m,
                                  const HeatmapParams& p = {}) {
  metrics_detail::check_pair(a, b, m, "local_nmi_heatmap");
  const Grid& g = a.grid();
  Index3 w{}, s{}, count{};
  for (int ax = 0; ax < 3; ++ax) {
    w[ax] = static_cast<int>(std::lround(p.window_mm / g.spacing[ax]));
    s[ax] = std::max(1, static_cast<int>(std::lround(p.stride_mm / g.spacing[ax])));
    if (w[ax] < 8)
      throw Error(ErrorKind::precondition, "local_nmi_heatmap: window below 8 voxels");
    w[ax] = std::min(w[ax], g.dims[ax]);
    count[ax] = (g.dims[ax] - w[ax]) / s[ax] + 1;
  }
  const std::size_t nwin = static_cast<std::size_t>(count[0]) * count[1] * count[2];
  std::vector<double> value(nwin, std::numeric_limits<double>::quiet_NaN());
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const std::size_t wvox = static_cast<std::size_t>(w[0]) * w[1] * w[2];

#pragma omp parallel for schedule(dynamic)
  for (long long widx = 0; widx < static_cast<long long>(nwin); ++widx) {
    const int ti = static_cast<int>(widx % count[0]);
    const int tj = static_cast<int>((widx / count[0]) % count[1]);
    const int tk = static_cast<int>(widx / (static_cast<long long>(count[0]) * count[1]));
    const int i0 = ti * s[0], j0 = tj * s[1], k0 = tk * s[2];
    double alo = std::numeric_limits<double>::infinity(), ahi = -alo, blo = alo, bhi = -alo;
    std::size_t covered = 0;
    for (int k = k0; k < k0 + w[2]; ++k)
      for (int j = j0; j < j0 + w[1]; ++j)
        for (int i = i0; i < i0 + w[0]; ++i) {
          const std::size_t n = g.index(i, j, k);
          if (!m[n]) continue;
          ++covered;
          alo = std::min(alo, double(a[n]));
          ahi = std::max(ahi, double(a[n]));
          blo = std::min(blo, double(b[n]));
          bhi = std::max(bhi, double(b[n]));
        }
    double v = nan;
    if (static_cast<double>(covered) >= p.min_coverage * static_cast<double>(wvox) &&
        ahi > alo && bhi > blo) {
      std::vector<double> joint(static_cast<std::size_t>(p.bins) * p.bins, 0.0);
      for (int k = k0; k < k0 + w[2]; ++k)
        for (int j = j0; j < j0 + w[1]; ++j)
          for (int i = i0; i < i0 + w[0]; ++i) {
            const std::size_t n = g.index(i, j, k);
            if (m[n])
              joint[metrics_detail::bin_of(a[n], alo, ahi, p.bins) * p.bins +
                    metrics_detail::bin_of(b[n], blo, bhi, p.bins)] += 1.0;
          }
      v = metrics_detail::nmi_from_joint(joint, p.bins, p.bins);
    }
    value[widx] = v;
  }

  Volume3D out(g, Unit::dimensionless, 0.0f);
  auto lattice = [&](int ax, int i, int& t0, int& t1, double& f) {
    const double c0 = 0.5 * (w[ax] - 1);
    double t = (i - c0) / s[ax];
    t = std::clamp(t, 0.0, static_cast<double>(count[ax] - 1));
    t0 = static_cast<int>(std::floor(t));
    t1 = std::min(t0 + 1, count[ax] - 1);
    f = t - t0;
  };
#pragma omp parallel for schedule(static)
  for (int k = 0; k < g.dims[2]; ++k) {
    int k0, k1, j0, j1, i0, i1;
    double fk, fj, fi;
    lattice(2, k, k0, k1, fk);
    for (int j = 0; j < g.dims[1]; ++j) {
      lattice(1, j, j0, j1, fj);
      for (int i = 0; i < g.dims[0]; ++i) {
        lattice(0, i, i0, i1, fi);
        double acc = 0, wsum = 0;
        for (int c = 0; c < 8; ++c) {
          const int ci = (c & 1) ? i1 : i0, cj = (c & 2) ? j1 : j0, ck = (c & 4) ? k1 : k0;
          const double wt = ((c & 1) ? fi : 1 - fi) * ((c & 2) ? fj : 1 - fj) *
                            ((c & 4) ? fk : 1 - fk);
          if (wt <= 0) continue;
          const double v =
              value[(static_cast<std::size_t>(ck) * count[1] + cj) * count[0] + ci];
          if (std::isnan(v)) continue;
          acc += wt * v;
          wsum += wt;
        }
        out(i, j, k) = wsum > 0 ? static_cast<float>(acc / wsum)
                                : std::numeric_limits<float>::quiet_NaN();
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports.

struct MetricParams {
  int nmi_bins = 64;
  int ssim_window = 7;
  std::optional<double> data_range;
};

struct MetricReport {
  std::string case_id;
  double mae = 0, psnr = 0, ssim = 0, nmi = 0, cc = 0;
  std::size_t mask_voxels = 0;
  int nmi_bins = 64;
  int ssim_window = 7;
  double data_range = 0;
};

/// Intensity metrics of `pred` against `ref`; alignment metrics of `pred`
/// against `cbct`.
inline MetricReport evaluate(const std::string& case_id, const Volume3D& pred,
                             const Volume3D& ref, const Volume3D& cbct, const BinaryMask& m,
                             const MetricParams& p = {}) {
  MetricReport r;
  r.case_id = case_id;
  r.mask_voxels = metrics_detail::require_nonempty(m, "evaluate");
  r.data_range = p.data_range ? *p.data_range : default_data_range(ref, m);
  r.nmi_bins = p.nmi_bins;
  r.ssim_window = p.ssim_window;
  r.mae = mae(pred, ref, m);
  r.psnr = psnr(ref, pred, m, r.data_range);
  r.ssim = ssim(ref, pred, m, {p.ssim_window, r.data_range});
  r.nmi = nmi(pred, cbct, m, p.nmi_bins);
  r.cc = cc(pred, cbct, m);
  return r;
}

inline nlohmann::ordered_json to_json(const MetricReport& r) {
  nlohmann::ordered_json j;
  j["case_id"] = r.case_id;
  j["mae"] = r.mae;
  if (std::isinf(r.psnr))
    j["psnr"] = "inf";
  else
    j["psnr"] = r.psnr;
  j["ssim"] = r.ssim;
  j["nmi"] = r.nmi;
  j["cc"] = r.cc;
  j["mask_voxels"] = r.mask_voxels;
  j["params"] = {{"nmi_bins", r.nmi_bins},
                 {"ssim_window", r.ssim_window},
                 {"data_range", r.data_range}};
  return j;
}

inline MetricReport report_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> keys{"case_id", "mae", "psnr", "ssim",
                                             "nmi",     "cc",  "mask_voxels", "params"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(keys.begin(), keys.end(), it.key()) == keys.end())
      throw Error(ErrorKind::config, "metric report: unknown key " + it.key());
  MetricReport r;
  r.case_id = j.at("case_id").get<std::string>();
  r.mae = j.at("mae").get<double>();
  const auto& ps = j.at("psnr");
  r.psnr = ps.is_string() ? std::numeric_limits<double>::infinity() : ps.get<double>();
  r.ssim = j.at("ssim").get<double>();
  r.nmi = j.at("nmi").get<double>();
  r.cc = j.at("cc").get<double>();
  r.mask_voxels = j.at("mask_voxels").get<std::size_t>();
  const auto& pp = j.at("params");
  r.nmi_bins = pp.at("nmi_bins").get<int>();
  r.ssim_window = pp.at("ssim_window").get<int>();
  r.data_range = pp.at("data_range").get<double>();
  return r;
}

inline const char* kMetricCsvHeader =
    "case_id,mae,psnr,ssim,nmi,cc,mask_voxels,nmi_bins,ssim_window,data_range";

inline std::string to_csv_row(const MetricReport& r) {
  std::ostringstream os;
  os.precision(10);
  os << r.case_id << ',' << r.mae << ',';
  if (std::isinf(r.psnr))
    os << "inf";
  else
    os << r.psnr;
  os << ',' << r.ssim << ',' << r.nmi << ',' << r.cc << ',' << r.mask_voxels << ','
     << r.nmi_bins << ',' << r.ssim_window << ',' << r.data_range;
  return os.str();
}

}  // namespace simcbct
