#pragma once

// Command implementations behind the simcbct CLI: single-case generation,
// batch generation, one-at-a-time ablation sweeps, metric reports,
// statistics reports and phantom export.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "simcbct/config.hpp"
#include "simcbct/manifest.hpp"
#include "simcbct/metaimage.hpp"
#include "simcbct/metrics.hpp"
#include "simcbct/outline.hpp"
#include "simcbct/stats.hpp"

namespace simcbct {

namespace fs = std::filesystem;

/// Progress messages go to stderr; results only to files.
inline void log_line(const std::string& msg) {
  static std::mutex m;
  std::lock_guard<std::mutex> lock(m);
  std::cerr << "[simcbct] " << msg << '\n';
}

/// Run `f`, re-labelling library errors with the failing stage name.
template <typename F>
auto stage(StageClock& clock, const std::string& name, F&& f) {
  try {
    return clock.run(name, std::forward<F>(f));
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::config) throw;
    throw Error(ErrorKind::stage, name + ": " + e.what());
  } catch (const std::exception& e) {
    throw Error(ErrorKind::stage, name + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Projection stack output: one nu x nv x N MetaImage streamed per projection.

class ProjectionWriter {
 public:
  ProjectionWriter(const fs::path& path, const ScannerGeometry& g) : path_(path) {
    out_.open(path, std::ios::binary | std::ios::trunc);
    if (!out_) throw Error(ErrorKind::io, "cannot write " + path.string());
    std::ostringstream h;
    h.precision(17);
    h << "ObjectType = Image\nNDims = 3\nBinaryData = True\nBinaryDataByteOrderMSB = False\n"
      << "CompressedData = False\n"
      << "DimSize = " << g.nu << ' ' << g.nv << ' ' << g.projection_count() << '\n'
      << "ElementSpacing = " << g.du << ' ' << g.dv << " 1\n"
      << "Offset = 0 0 0\nElementType = MET_FLOAT\nElementDataFile = LOCAL\n";
    const std::string header = h.str();
    out_.write(header.data(), static_cast<std::streamsize>(header.size()));
  }

  void add(const Projection& p) {
    out_.write(reinterpret_cast<const char*>(p.data.data.data()),
               static_cast<std::streamsize>(p.data.size() * sizeof(float)));
    meta_.push_back({{"index", p.index},
                     {"angle_deg", p.angle_deg},
                     {"s_i", p.breathing_state},
                     {"eps_ms", p.eps_ms}});
  }

  void close(const fs::path& json_path) {
    out_.close();
    if (!out_) throw Error(ErrorKind::io, "short write to " + path_.string());
    Json j;
    j["value_kind"] = to_string(ValueKind::log_attenuation);
    j["projections"] = meta_;
    std::ofstream js(json_path);
    js << j.dump(1) << '\n';
  }

 private:
  fs::path path_;
  std::ofstream out_;
  Json meta_ = Json::array();
};

// ---------------------------------------------------------------------------
// generate

struct GenerateResult {
  fs::path output_dir;
  RunManifest manifest;
};

struct LoadedInput {
  Volume3D ct;
  BinaryMask surrogate;  // may be all-false
};

inline LoadedInput load_input(const SimulationConfig& cfg) {
  LoadedInput in;
  if (cfg.io.phantom) {
    const PhantomInput& p = *cfg.io.phantom;
    Phantom ph = make_phantom(p.spec, Grid::centered(p.dims, p.spacing, {0, 0, 0}));
    in.ct = std::move(ph.volume);
    in.surrogate = p.use_surrogate ? std::move(ph.surrogate) : BinaryMask(in.ct.grid());
  } else {
    in.ct = io::read_volume(cfg.io.input_ct, Unit::hu);
    if (!cfg.io.surrogate_mask.empty()) {
      in.surrogate = io::read_mask(cfg.io.surrogate_mask);
      require_same_grid(in.ct.grid(), in.surrogate.grid(), "surrogate mask");
    } else {
      in.surrogate = BinaryMask(in.ct.grid());
    }
  }
  return in;
}

/// Config-level checks that must pass before anything is written.
inline void check_inputs_exist(const SimulationConfig& cfg) {
  if (!cfg.io.input_ct.empty() && !fs::is_regular_file(cfg.io.input_ct))
    throw Error(ErrorKind::config, "input CT not found: " + cfg.io.input_ct);
  if (!cfg.io.surrogate_mask.empty() && !fs::is_regular_file(cfg.io.surrogate_mask))
    throw Error(ErrorKind::config, "surrogate mask not found: " + cfg.io.surrogate_mask);
  if (!cfg.beam_profile_file.empty() && !fs::is_regular_file(cfg.beam_profile_file))
    throw Error(ErrorKind::config, "beam profile file not found: " + cfg.beam_profile_file);
}

inline BeamProfile resolve_beam_profile(const SimulationConfig& cfg, const ScannerGeometry& g) {
  if (cfg.beam_profile) return *cfg.beam_profile;
  if (cfg.beam_profile_file.empty()) return BeamProfile::default_for(g);
  const io::MetaImage img = io::read_metaimage(cfg.beam_profile_file);
  if (img.grid.dims[0] != g.nu || img.grid.dims[1] != g.nv || img.grid.dims[2] != 1)
    throw Error(ErrorKind::geometry, "beam profile image must be nu x nv x 1");
  Image2D flood(g.nu, g.nv);
  for (std::size_t i = 0; i < flood.size(); ++i) flood.data[i] = static_cast<float>(img.values[i]);
  return fit_beam_profile(flood, g).profile;
}

/// Full single-case run. Outputs land in `out` (default cfg.io.output_dir)
/// only if every stage succeeds.
inline GenerateResult run_generate(const SimulationConfig& cfg,
                                   std::optional<fs::path> out = {}) {
  cfg.validate();
  check_inputs_exist(cfg);
  const fs::path out_dir = out ? *out : fs::path(cfg.io.output_dir);
  StageClock clock;
  StagingDir staging(out_dir);
  const fs::path dir = staging.path();

  LoadedInput in = stage(clock, "load", [&] { return load_input(cfg); });
  ScannerGeometry g = cfg.scanner;
  g.rotation_center = cfg.rotation_center ? *cfg.rotation_center : in.ct.grid().center();
  const bool has_surrogate = in.surrogate.count() > 0;

  Volume3D cm_free = stage(clock, "contrast_removal", [&] {
    return has_surrogate ? remove_contrast(in.ct, in.surrogate, cfg.seed, cfg.contrast) : in.ct;
  });

  std::optional<MotionField> motion;
  bool motion_empty = false;
  if (cfg.breathing.A_max > 0) {
    stage(clock, "motion_field", [&] {
      MotionDerivation d =
          derive_motion_field(cm_free, has_surrogate ? &in.surrogate : nullptr, cfg.motion);
      motion_empty = d.empty;
      motion = std::move(d.final_field);
      return 0;
    });
  }

  const BeamProfile beam = stage(clock, "beam_profile", [&] { return resolve_beam_profile(cfg, g); });

  FdkReconstructor recon(g, cfg.recon);
  SimulationTimings sim_t;
  double recon_s = 0;
  stage(clock, "simulate_reconstruct", [&] {
    ScanSimulator sim(cm_free, motion ? &*motion : nullptr, cfg.breathing, g, cfg.physics, beam);
    std::optional<ProjectionWriter> writer;
    if (cfg.io.save_projections) writer.emplace(dir / "projections.mha", g);
    const int n = sim.count();
    for (int i = 0; i < n; ++i) {
      const Projection p = sim.project(i);
      if (writer) writer->add(p);
      const auto t0 = std::chrono::steady_clock::now();
      recon.add(p);
      recon_s += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if ((i + 1) % 50 == 0 || i + 1 == n)
        log_line("projection " + std::to_string(i + 1) + "/" + std::to_string(n));
    }
    if (writer) writer->close(dir / "projections.json");
    sim_t = sim.timings();
    return 0;
  });

  Volume3D scbct = stage(clock, "hu_fov", [&] {
    Volume3D hu = gray_to_hu(recon.finish(), cfg.recon);
    if (cfg.recon.fov_mask) hu = apply_fov(hu, fov_cone_mask(g, hu.grid()));
    return hu;
  });
  Volume3D ref = stage(clock, "reference_ct", [&] { return prepare_reference_ct(in.ct, g, cfg.recon); });

  stage(clock, "write", [&] {
    io::write_volume(dir / "sCBCT.mha", scbct);
    io::write_volume(dir / "refCT.mha", ref);
    if (cfg.io.save_motion_field && motion) io::write_vector_field(dir / "motion_field", motion->vectors);
    return 0;
  });

  RunManifest m;
  m.config = to_json(cfg);
  m.config["scanner"]["rotation_center"] = config_detail::vec_json(g.rotation_center);
  m.seeds = {{"master", cfg.seed}, {"breathing", cfg.breathing.seed}, {"detector_noise", cfg.physics.seed},
             {"contrast_noise", cfg.seed}};
  for (const auto& [k, v] : clock.entries()) {
    if (k == "simulate_reconstruct") {
      m.timings.emplace_back("warp", sim_t.warp_s);
      m.timings.emplace_back("raycast", sim_t.raycast_s);
      m.timings.emplace_back("physics", sim_t.physics_s);
      m.timings.emplace_back("reconstruct", recon_s);
    } else {
      m.timings.emplace_back(k, v);
    }
  }
  m.extra["projections"] = g.projection_count();
  m.extra["hu_mode"] = to_string(cfg.recon.hu_mode);
  m.extra["motion"] = cfg.breathing.A_max > 0 ? (motion_empty ? "empty" : "applied") : "disabled";
  m.extra["contrast_removal"] = has_surrogate;
  m.extra["beam_profile"] = {{"amplitude", beam.amplitude},
                             {"sigma_u", beam.sigma_u},
                             {"center_u", beam.center_u},
                             {"baseline", beam.baseline}};
  m.checksum_directory(dir);
  m.write(dir);
  staging.commit();
  log_line("wrote " + out_dir.string());
  return {out_dir, m};
}

// ---------------------------------------------------------------------------
// batch

inline std::uint64_t case_seed(std::uint64_t master, std::size_t index) {
  return master ^ rng::splitmix64(static_cast<std::uint64_t>(index));
}

struct CaseOutcome {
  std::string id;
  std::uint64_t seed = 0;
  bool ok = false;
  double seconds = 0;
  std::string error;
};

struct CaseSpec {
  std::string id;
  nlohmann::json overrides;  // merged onto the base config
};

inline std::vector<CaseSpec> load_cases(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::config, "cannot read case list " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::config, path.string() + ": " + e.what());
  }
  const nlohmann::json& arr = j.is_object() ? j.at("cases") : j;
  if (!arr.is_array()) throw Error(ErrorKind::config, "case list must be an array");
  std::vector<CaseSpec> out;
  std::set<std::string> ids;
  for (const auto& e : arr) {
    if (!e.is_object() || !e.contains("id") || !e.at("id").is_string())
      throw Error(ErrorKind::config, "every case needs a string id");
    CaseSpec c{e.at("id").get<std::string>(), e};
    c.overrides.erase("id");
    if (c.id.empty() || c.id.find('/') != std::string::npos || !ids.insert(c.id).second)
      throw Error(ErrorKind::config, "case ids must be unique plain names: " + c.id);
    out.push_back(std::move(c));
  }
  return out;
}

/// Bounded worker pool over `n` independent tasks.
inline void run_pool(std::size_t n, int jobs, const std::function<void(std::size_t)>& task) {
  const int width = std::max(1, std::min<int>(jobs, static_cast<int>(n)));
  const int per_job = std::max(1, configured_threads() / width);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
#if defined(_OPENMP)
    omp_set_num_threads(per_job);
#endif
    for (std::size_t i = next++; i < n; i = next++) task(i);
  };
  if (width == 1) {
    worker();
    return;
  }
  std::vector<std::thread> pool;
  for (int t = 0; t < width; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
}

inline std::string error_text(const std::exception& e) {
  std::string s = e.what();
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), ',', ';');
  return s;
}

inline std::vector<CaseOutcome> run_batch(const SimulationConfig& base, const std::vector<CaseSpec>& cases,
                                          const fs::path& out_dir, int jobs) {
  fs::create_directories(out_dir);
  std::vector<CaseOutcome> results(cases.size());
  run_pool(cases.size(), jobs, [&](std::size_t i) {
    CaseOutcome& r = results[i];
    r.id = cases[i].id;
    r.seed = case_seed(base.seed, i);
    const auto t0 = std::chrono::steady_clock::now();
    try {
      nlohmann::json j = nlohmann::json::parse(to_json(base).dump());
      j.merge_patch(cases[i].overrides);
      // a phantom spec override replaces the base spec instead of merging into it
      const nlohmann::json& ov = cases[i].overrides;
      if (ov.contains("io") && ov["io"].contains("phantom") && ov["io"]["phantom"].is_object() &&
          ov["io"]["phantom"].contains("spec"))
        j["io"]["phantom"]["spec"] = ov["io"]["phantom"]["spec"];
      j["seed"] = r.seed;
      if (j["io"].contains("input_ct") && !j["io"]["input_ct"].get<std::string>().empty())
        j["io"]["phantom"] = nullptr;
      j["io"]["output_dir"] = (out_dir / r.id).string();
      run_generate(config_from_json(j));
      r.ok = true;
    } catch (const std::exception& e) {
      r.error = error_text(e);
      log_line("case " + r.id + " failed: " + r.error);
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  });

  std::ostringstream csv;
  csv << "case_id,status,seed,seconds,error\n";
  for (const auto& r : results)
    csv << r.id << ',' << (r.ok ? "ok" : "failed") << ',' << r.seed << ',' << r.seconds << ','
        << r.error << '\n';
  write_file_atomic(out_dir / "summary.csv", csv.str());
  return results;
}

// ---------------------------------------------------------------------------
// ablate

struct AblationGrid {
  std::vector<double> c_sat{1.0, 1.5, 2.0};
  std::vector<double> phi{2.0e5, 4.16e5, 6.0e5};
  std::vector<double> A_max{0, 5, 10};
  std::vector<double> spr{0.5, 1.6, 2.5};
};

struct AblationRow {
  std::string group;  // varied parameter
  double value = 0;
  double c_sat = 0, phi = 0, A_max = 0, spr = 0;
  std::string run;  // shared by every row equal to the baseline
  bool baseline = false;
};

inline std::string format_value(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

/// One-at-a-time enumeration: one row per grid value; rows equal to the
/// baseline share a single run.
inline std::vector<AblationRow> ablation_rows(const SimulationConfig& base, const AblationGrid& grid) {
  std::vector<AblationRow> rows;
  auto add = [&](const char* name, const std::vector<double>& values, double current,
                 const std::function<void(AblationRow&, double)>& set) {
    for (double v : values) {
      AblationRow r;
      r.group = name;
      r.value = v;
      r.c_sat = base.physics.c_sat;
      r.phi = base.physics.phi;
      r.A_max = base.breathing.A_max;
      r.spr = base.physics.spr;
      set(r, v);
      r.baseline = v == current;
      r.run = r.baseline ? "baseline" : std::string(name) + "_" + format_value(v);
      rows.push_back(r);
    }
  };
  add("c_sat", grid.c_sat, base.physics.c_sat, [](AblationRow& r, double v) { r.c_sat = v; });
  add("phi", grid.phi, base.physics.phi, [](AblationRow& r, double v) { r.phi = v; });
  add("A_max", grid.A_max, base.breathing.A_max, [](AblationRow& r, double v) { r.A_max = v; });
  add("spr", grid.spr, base.physics.spr, [](AblationRow& r, double v) { r.spr = v; });
  return rows;
}

struct IntensitySummary {
  double mask_mean = 0, mask_sd = 0, roi_noise_sd = 0;
  std::size_t mask_voxels = 0, roi_voxels = 0;
};

/// Mean/SD of the sCBCT inside the reference outline mask, plus the SD of
/// sCBCT - reference inside a central uniform ROI (radius 15 mm around the
/// rotation axis, middle half of the slices).
inline IntensitySummary intensity_summary(const Volume3D& scbct, const Volume3D& ref, Vec3 axis_center) {
  require_same_grid(scbct.grid(), ref.grid(), "intensity_summary");
  const BinaryMask mask = otsu_outline_mask(ref);
  const Grid& g = ref.grid();
  IntensitySummary s;
  double sum = 0, sum2 = 0, rs = 0, rs2 = 0;
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        const std::size_t n = g.index(i, j, k);
        if (!mask[n]) continue;
        const double v = scbct[n];
        sum += v;
        sum2 += v * v;
        ++s.mask_voxels;
        const Vec3 p = g.world(i, j, k);
        const bool mid_z = 4 * k >= g.dims[2] && 4 * k < 3 * g.dims[2];
        if (mid_z && std::hypot(p.x - axis_center.x, p.y - axis_center.y) <= 15.0) {
          const double d = v - ref[n];
          rs += d;
          rs2 += d * d;
          ++s.roi_voxels;
        }
      }
  if (s.mask_voxels > 0) {
    const double n = static_cast<double>(s.mask_voxels);
    s.mask_mean = sum / n;
    s.mask_sd = std::sqrt(std::max(0.0, sum2 / n - s.mask_mean * s.mask_mean));
  }
  if (s.roi_voxels > 1) {
    const double n = static_cast<double>(s.roi_voxels);
    const double m = rs / n;
    s.roi_noise_sd = std::sqrt(std::max(0.0, (rs2 - n * m * m) / (n - 1)));
  }
  return s;
}

inline const char* kAblationCsvHeader =
    "group,value,c_sat,phi,A_max,spr,run,mask_mean_hu,mask_sd_hu,roi_noise_sd_hu";

/// Runs every unique configuration (unless dry_run) and writes table_a.csv.
/// Returns the number of failed runs.
inline int run_ablation(const SimulationConfig& base, const AblationGrid& grid, const fs::path& out_dir,
                        int jobs, bool dry_run) {
  fs::create_directories(out_dir);
  const std::vector<AblationRow> rows = ablation_rows(base, grid);
  std::vector<const AblationRow*> unique;
  std::set<std::string> seen;
  for (const auto& r : rows)
    if (seen.insert(r.run).second) unique.push_back(&r);

  std::map<std::string, std::optional<IntensitySummary>> stats;
  std::map<std::string, std::string> errors;
  std::mutex mu;
  if (!dry_run) {
    run_pool(unique.size(), jobs, [&](std::size_t i) {
      const AblationRow& r = *unique[i];
      SimulationConfig c = base;
      c.physics.c_sat = r.c_sat;
      c.physics.phi = r.phi;
      c.breathing.A_max = r.A_max;
      c.physics.spr = r.spr;
      try {
        const GenerateResult res = run_generate(c, out_dir / r.run);
        const Volume3D s = io::read_volume(res.output_dir / "sCBCT.mha");
        const Volume3D ref = io::read_volume(res.output_dir / "refCT.mha");
        const Vec3 center{res.manifest.config["scanner"]["rotation_center"][0].get<double>(),
                          res.manifest.config["scanner"]["rotation_center"][1].get<double>(),
                          res.manifest.config["scanner"]["rotation_center"][2].get<double>()};
        const IntensitySummary is = intensity_summary(s, ref, center);
        std::lock_guard<std::mutex> lock(mu);
        stats[r.run] = is;
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(mu);
        errors[r.run] = error_text(e);
        log_line("ablation run " + r.run + " failed: " + errors[r.run]);
      }
    });
  }

  std::ostringstream csv;
  csv.precision(10);
  csv << kAblationCsvHeader << '\n';
  for (const auto& r : rows) {
    csv << r.group << ',' << r.value << ',' << r.c_sat << ',' << r.phi << ',' << r.A_max << ','
        << r.spr << ',' << r.run;
    const auto it = stats.find(r.run);
    if (it != stats.end() && it->second)
      csv << ',' << it->second->mask_mean << ',' << it->second->mask_sd << ','
          << it->second->roi_noise_sd;
    else
      csv << ",,,";
    csv << '\n';
  }
  write_file_atomic(out_dir / "table_a.csv", csv.str());
  return static_cast<int>(errors.size());
}

// ---------------------------------------------------------------------------
// metrics

struct MetricsCommand {
  std::string pred, ref, cbct;
  std::string mask;  // empty: Otsu outline of the reference
  std::string case_id = "case";
  std::string heatmap;  // optional output path
  MetricParams params;
};

inline MetricReport run_metrics(const MetricsCommand& cmd, const fs::path& out_dir) {
  for (const std::string& p : {cmd.pred, cmd.ref, cmd.cbct})
    if (!fs::is_regular_file(p)) throw Error(ErrorKind::config, "volume not found: " + p);
  const Volume3D pred = io::read_volume(cmd.pred), ref = io::read_volume(cmd.ref),
                 cbct = io::read_volume(cmd.cbct);
  require_same_grid(pred.grid(), ref.grid(), "metrics");
  require_same_grid(pred.grid(), cbct.grid(), "metrics");
  const BinaryMask mask = cmd.mask.empty() ? otsu_outline_mask(ref) : io::read_mask(cmd.mask);
  require_same_grid(mask.grid(), ref.grid(), "metrics mask");
  log_line("mask voxels: " + std::to_string(mask.count()));
  const MetricReport r = evaluate(cmd.case_id, pred, ref, cbct, mask, cmd.params);
  fs::create_directories(out_dir);
  {
    std::ofstream j(out_dir / "metrics.jsonl", std::ios::app);
    j << to_json(r).dump() << '\n';
  }
  const bool fresh = !fs::exists(out_dir / "metrics.csv");
  std::ofstream c(out_dir / "metrics.csv", std::ios::app);
  if (fresh) c << kMetricCsvHeader << '\n';
  c << to_csv_row(r) << '\n';
  if (!cmd.heatmap.empty()) io::write_volume(cmd.heatmap, local_nmi_heatmap(pred, cbct, mask));
  return r;
}

// ---------------------------------------------------------------------------
// stats

struct ObserverRow {
  std::string dataset = "all", rater, case_id, model, preference;
  double score = 0;
};

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, ',')) {
    while (!cur.empty() && (cur.back() == '\r' || cur.back() == ' ')) cur.pop_back();
    while (!cur.empty() && cur.front() == ' ') cur.erase(cur.begin());
    out.push_back(cur);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

/// Columns: rater, case, model, score, preference; optional dataset.
inline std::vector<ObserverRow> read_observer_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::config, "cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorKind::config, "empty observer csv");
  const std::vector<std::string> head = split_csv(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < head.size(); ++i) col[head[i]] = i;
  for (const char* need : {"rater", "case", "model", "score", "preference"})
    if (!col.count(need)) throw Error(ErrorKind::config, std::string("observer csv lacks column ") + need);
  std::vector<ObserverRow> rows;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    const std::vector<std::string> f = split_csv(line);
    if (f.size() < head.size()) throw Error(ErrorKind::config, "short observer csv row: " + line);
    ObserverRow r;
    if (col.count("dataset")) r.dataset = f[col["dataset"]];
    r.rater = f[col["rater"]];
    r.case_id = f[col["case"]];
    r.model = f[col["model"]];
    r.preference = f[col["preference"]];
    try {
      r.score = std::stod(f[col["score"]]);
    } catch (const std::exception&) {
      throw Error(ErrorKind::config, "non-numeric score: " + line);
    }
    rows.push_back(r);
  }
  return rows;
}

inline std::vector<MetricReport> read_reports(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::config, "cannot read " + path.string());
  std::vector<MetricReport> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(report_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::config, "bad report line: " + std::string(e.what()));
    }
  }
  return out;
}

/// Report case ids are "<dataset>/<model>/<case>"; missing leading parts
/// default to dataset "all" and model "default".
struct CaseKey {
  std::string dataset, model, case_id;
  bool operator<(const CaseKey& o) const {
    return std::tie(dataset, model, case_id) < std::tie(o.dataset, o.model, o.case_id);
  }
};

inline CaseKey parse_case_key(const std::string& id) {
  std::vector<std::string> parts;
  std::string cur;
  std::istringstream is(id);
  while (std::getline(is, cur, '/')) parts.push_back(cur);
  if (parts.size() >= 3) return {parts[parts.size() - 3], parts[parts.size() - 2], parts.back()};
  if (parts.size() == 2) return {"all", parts[0], parts[1]};
  return {"all", "default", id};
}

inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names{"mae", "psnr", "ssim", "nmi", "cc"};
  return names;
}

inline double metric_value(const MetricReport& r, const std::string& name) {
  if (name == "mae") return r.mae;
  if (name == "psnr") return r.psnr;
  if (name == "ssim") return r.ssim;
  if (name == "nmi") return r.nmi;
  return r.cc;
}

inline Json insufficient(const std::string& why, std::size_t n) {
  return {{"status", "insufficient data"}, {"reason", why}, {"n", n}};
}

inline Json stat_json(const stats::StatResult& r) {
  Json j{{"status", "ok"}, {"statistic", r.statistic}, {"p_value", r.p_value}, {"n", r.n},
         {"method", r.method}};
  if (r.ci95) j["ci95"] = Json::array({r.ci95->first, r.ci95->second});
  return j;
}

struct StatSample {
  CaseKey key;
  std::map<std::string, double> metric;
  double iqs = 0;
};

/// Statistics report: Spearman of each metric against mean IQS, Steiger
/// comparisons between metrics, observer reliability, and paired model
/// comparisons with Bonferroni adjustment.
inline Json compute_statistics(const std::vector<MetricReport>& reports,
                               const std::vector<ObserverRow>& observers) {
  // Mean IQS per (dataset, model, case).
  std::map<CaseKey, std::pair<double, int>> iqs;
  for (const auto& o : observers) {
    auto& e = iqs[{o.dataset, o.model, o.case_id}];
    e.first += o.score;
    e.second += 1;
  }
  std::map<std::string, std::vector<StatSample>> by_dataset;
  for (const auto& r : reports) {
    const CaseKey k = parse_case_key(r.case_id);
    const auto it = iqs.find(k);
    if (it == iqs.end()) continue;
    StatSample s{k, {}, it->second.first / it->second.second};
    for (const auto& m : metric_names()) s.metric[m] = metric_value(r, m);
    by_dataset[k.dataset].push_back(s);
    if (k.dataset != "combined") by_dataset["combined"].push_back(s);
  }
  if (by_dataset.size() == 2) by_dataset.erase("combined");  // single dataset

  Json out;
  out["software"] = {{"name", "simcbct"}, {"version", kVersion}};

  auto column = [](const std::vector<StatSample>& v, const std::string& m, std::vector<double>& a,
                   std::vector<double>& b) {
    for (const auto& s : v) {
      const double x = m == "iqs" ? s.iqs : s.metric.at(m);
      if (std::isfinite(x)) {
        a.push_back(x);
        b.push_back(s.iqs);
      }
    }
  };

  Json corr = Json::object();
  Json steiger = Json::object();
  for (const auto& [ds, samples] : by_dataset) {
    Json rows = Json::object();
    for (const auto& m : metric_names()) {
      std::vector<double> x, y;
      column(samples, m, x, y);
      try {
        rows[m] = stat_json(stats::spearman(x, y));
      } catch (const Error& e) {
        rows[m] = insufficient(e.what(), x.size());
      }
    }
    corr[ds] = rows;

    Json srows = Json::array();
    const auto& names = metric_names();
    for (std::size_t a = 0; a < names.size(); ++a)
      for (std::size_t b = a + 1; b < names.size(); ++b) {
        std::vector<double> xa, xb, yi;
        for (const auto& s : samples) {
          const double va = s.metric.at(names[a]), vb = s.metric.at(names[b]);
          if (std::isfinite(va) && std::isfinite(vb)) {
            xa.push_back(va);
            xb.push_back(vb);
            yi.push_back(s.iqs);
          }
        }
        Json row{{"metric_k", names[a]}, {"metric_h", names[b]}};
        if (xa == xb && xa.size() >= 10) {
          // identical columns: equal dependent correlations by construction
          row.update(stat_json({0.0, 1.0, std::nullopt, xa.size(), "steiger-identical"}));
          srows.push_back(row);
          continue;
        }
        try {
          const double rjk = stats::spearman(yi, xa).statistic;
          const double rjh = stats::spearman(yi, xb).statistic;
          const double rkh = stats::spearman(xa, xb).statistic;
          // Compare correlation strength regardless of metric orientation.
          const double sk = rjk < 0 ? -1.0 : 1.0, sh = rjh < 0 ? -1.0 : 1.0;
          const stats::StatResult z = stats::steiger_z(sk * rjk, sh * rjh, sk * sh * rkh, yi.size());
          row.update(stat_json(z));
          row["r_jk"] = rjk;
          row["r_jh"] = rjh;
          row["r_kh"] = rkh;
        } catch (const Error& e) {
          row.update(insufficient(e.what(), yi.size()));
        }
        srows.push_back(row);
      }
    steiger[ds] = srows;
  }
  out["spearman_vs_iqs"] = corr;
  out["steiger"] = steiger;

  // Reliability per dataset and model: raters x cases.
  std::map<std::pair<std::string, std::string>, std::map<std::string, std::map<std::string, const ObserverRow*>>>
      table;
  for (const auto& o : observers) table[{o.dataset, o.model}][o.rater][o.case_id] = &o;
  Json rel = Json::array();
  for (const auto& [key, raters] : table) {
    Json row{{"dataset", key.first}, {"model", key.second}, {"raters", raters.size()}};
    std::set<std::string> cases;
    for (const auto& [r, cs] : raters)
      for (const auto& [c, p] : cs) cases.insert(c);
    stats::RatingMatrix scores, prefs;
    std::map<std::string, double> labels;
    bool complete = true;
    for (const auto& [r, cs] : raters) {
      std::vector<double> srow, prow;
      for (const auto& c : cases) {
        const auto it = cs.find(c);
        if (it == cs.end()) {
          complete = false;
          break;
        }
        srow.push_back(it->second->score);
        const auto lab = labels.emplace(it->second->preference, static_cast<double>(labels.size()));
        prow.push_back(lab.first->second);
      }
      scores.push_back(srow);
      prefs.push_back(prow);
    }
    row["cases"] = cases.size();
    if (!complete) {
      row["kappa"] = insufficient("incomplete rating matrix", cases.size());
      row["icc"] = insufficient("incomplete rating matrix", cases.size());
    } else {
      try {
        row["kappa"] = {{"status", "ok"}, {"value", stats::randolph_kappa(prefs, 3)}, {"categories", 3}};
      } catch (const Error& e) {
        row["kappa"] = insufficient(e.what(), cases.size());
      }
      try {
        row["icc"] = {{"status", "ok"}, {"value", stats::icc(scores)}, {"form", "ICC(3,k)"}};
      } catch (const Error& e) {
        row["icc"] = insufficient(e.what(), cases.size());
      }
    }
    rel.push_back(row);
  }
  out["reliability"] = rel;

  // Paired model comparisons per dataset on each metric and on IQS.
  Json cmp = Json::array();
  std::map<std::string, std::map<std::string, std::map<std::string, std::map<std::string, double>>>> vals;
  for (const auto& [ds, samples] : by_dataset) {
    if (ds == "combined") continue;
    for (const auto& s : samples) {
      for (const auto& m : metric_names()) vals[ds][m][s.key.model][s.key.case_id] = s.metric.at(m);
      vals[ds]["iqs"][s.key.model][s.key.case_id] = s.iqs;
    }
  }
  std::vector<std::size_t> ok_rows;
  std::vector<double> pvals;
  for (const auto& [ds, metrics] : vals)
    for (const auto& [m, models] : metrics)
      for (auto a = models.begin(); a != models.end(); ++a)
        for (auto b = std::next(a); b != models.end(); ++b) {
          std::vector<double> x, y;
          for (const auto& [c, v] : a->second) {
            const auto it = b->second.find(c);
            if (it != b->second.end() && std::isfinite(v) && std::isfinite(it->second)) {
              x.push_back(v);
              y.push_back(it->second);
            }
          }
          Json row{{"dataset", ds}, {"metric", m}, {"model_a", a->first}, {"model_b", b->first}};
          try {
            const stats::StatResult w = stats::wilcoxon_signed_rank(x, y);
            row.update(stat_json(w));
            const stats::EffectSize d = stats::cohens_d(x, y, stats::EffectMode::paired);
            row["cohens_d"] = d.d;
            row["effect"] = d.label;
            ok_rows.push_back(cmp.size());
            pvals.push_back(w.p_value);
          } catch (const Error& e) {
            row.update(insufficient(e.what(), x.size()));
          }
          cmp.push_back(row);
        }
  const std::vector<double> adj = stats::bonferroni(pvals);
  for (std::size_t i = 0; i < ok_rows.size(); ++i) cmp[ok_rows[i]]["p_bonferroni"] = adj[i];
  out["model_comparisons"] = cmp;
  out["bonferroni_m"] = pvals.size();
  return out;
}

// ---------------------------------------------------------------------------
// phantom

/// Writes phantom.mha plus phantom.json with everything needed to rebuild
/// the closed-form phantom.
inline void run_phantom(const PhantomSpec& spec, Index3 dims, Vec3 spacing, const fs::path& out_dir,
                        double mu_water = kDefaultMuWater) {
  const Phantom ph = make_phantom(spec, Grid::centered(dims, spacing, {0, 0, 0}));
  StagingDir staging(out_dir);
  io::write_volume(staging.path() / "phantom.mha", ph.volume);
  if (ph.surrogate.count() > 0) io::write_mask(staging.path() / "surrogate.mha", ph.surrogate);
  Json j;
  j["spec"] = to_json(spec);
  j["grid"] = {{"dims", config_detail::idx_json(dims)},
               {"spacing", config_detail::vec_json(spacing)},
               {"origin", config_detail::vec_json(ph.volume.grid().origin)}};
  j["center"] = config_detail::vec_json(ph.analytic.center());
  j["z_range"] = Json::array({ph.analytic.z_lo(), ph.analytic.z_hi()});
  j["mu_water"] = mu_water;
  write_file_atomic(staging.path() / "phantom.json", j.dump(2) + "\n");
  staging.commit();
}

inline AnalyticPhantom analytic_from_descriptor(const nlohmann::json& j) {
  const PhantomSpec spec = phantom_spec_from_json(j.at("spec"));
  const Vec3 c = config_detail::to_vec3(j.at("center"), "center");
  return AnalyticPhantom(spec, c, j.at("z_range")[0].get<double>(), j.at("z_range")[1].get<double>());
}

}  // namespace simcbct
