// simcbct command-line driver.
//
//   simcbct generate --config run.json [--seed N] [--out dir]
//   simcbct batch    --config base.json --cases cases.json [--jobs N] [--out dir]
//   simcbct ablate   --config base.json [--grid grid.json] [--dry-run] [--jobs N] [--out dir]
//   simcbct metrics  --pred a.mha --ref b.mha --cbct c.mha [--mask m.mha] [--heatmap h.mha] --out dir
//   simcbct stats    --reports metrics.jsonl --observers scores.csv --out stats.json
//   simcbct phantom  [--spec spec.json | --kind K --radius R] [--dims X Y Z] [--spacing X Y Z] --out dir
//
// Exit codes: 0 success, 1 run or case failure, 2 configuration error.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

#include "simcbct/pipeline.hpp"

using namespace simcbct;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  int jobs = 1;
  int threads = 0;
};

void add_common(CLI::App* app, Common& c, bool needs_config) {
  auto* opt = app->add_option("--config", c.config, "JSON configuration file");
  if (needs_config) opt->required()->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "override the master seed");
  app->add_option("--out", c.out, "output location");
  app->add_option("--jobs", c.jobs, "concurrent cases")->check(CLI::PositiveNumber);
  app->add_option("--threads", c.threads, "thread cap (same as SIMCBCT_THREADS)")->check(CLI::NonNegativeNumber);
}

SimulationConfig load_with_overrides(const Common& c) {
  SimulationConfig cfg = load_config(c.config);
  if (c.seed) {
    nlohmann::json j = nlohmann::json::parse(to_json(cfg).dump());
    j["seed"] = *c.seed;
    cfg = config_from_json(j);
  }
  if (!c.out.empty()) cfg.io.output_dir = c.out;
  return cfg;
}

AblationGrid load_grid(const std::string& path) {
  AblationGrid g;
  if (path.empty()) return g;
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::config, "cannot read grid " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
    for (auto it = j.begin(); it != j.end(); ++it) {
      std::vector<double>* dst = it.key() == "c_sat"   ? &g.c_sat
                                 : it.key() == "phi"   ? &g.phi
                                 : it.key() == "A_max" ? &g.A_max
                                 : it.key() == "spr"   ? &g.spr
                                                       : nullptr;
      if (!dst) throw Error(ErrorKind::config, "unknown grid key: " + it.key());
      *dst = it.value().get<std::vector<double>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::config, path + ": " + e.what());
  }
  return g;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Simulated CBCT generation, evaluation and statistics"};
  app.require_subcommand(1);

  Common gen_c, batch_c, abl_c, met_c, st_c, ph_c;
  auto* gen = app.add_subcommand("generate", "simulate one sCBCT/CT pair");
  add_common(gen, gen_c, true);

  auto* batch = app.add_subcommand("batch", "simulate every case in a case list");
  add_common(batch, batch_c, true);
  std::string cases_path;
  batch->add_option("--cases", cases_path, "JSON case list")->required()->check(CLI::ExistingFile);

  auto* abl = app.add_subcommand("ablate", "one-at-a-time parameter sweep");
  add_common(abl, abl_c, true);
  std::string grid_path;
  bool dry_run = false;
  abl->add_option("--grid", grid_path, "JSON grid {c_sat, phi, A_max, spr}")->check(CLI::ExistingFile);
  abl->add_flag("--dry-run", dry_run, "write the run table without simulating");

  auto* met = app.add_subcommand("metrics", "image-quality metrics for one case");
  add_common(met, met_c, false);
  MetricsCommand mc;
  met->add_option("--pred", mc.pred, "predicted volume")->required();
  met->add_option("--ref", mc.ref, "reference volume")->required();
  met->add_option("--cbct", mc.cbct, "input CBCT volume")->required();
  met->add_option("--mask", mc.mask, "mask volume (default: outline of --ref)");
  met->add_option("--case-id", mc.case_id, "case identifier, dataset/model/case");
  met->add_option("--heatmap", mc.heatmap, "local NMI heatmap output");
  met->add_option("--nmi-bins", mc.params.nmi_bins, "NMI histogram bins")->check(CLI::PositiveNumber);

  auto* st = app.add_subcommand("stats", "statistics over metric reports and observer scores");
  add_common(st, st_c, false);
  std::string reports_path, observers_path;
  st->add_option("--reports", reports_path, "metric reports (JSON lines)")->required()->check(CLI::ExistingFile);
  st->add_option("--observers", observers_path, "observer CSV")->required()->check(CLI::ExistingFile);

  auto* ph = app.add_subcommand("phantom", "write an analytic phantom and its descriptor");
  add_common(ph, ph_c, false);
  std::string spec_path, kind = "water_cylinder";
  double radius = 0;
  std::vector<int> dims{256, 256, 32};
  std::vector<double> spacing{1, 1, 1};
  ph->add_option("--spec", spec_path, "phantom spec JSON")->check(CLI::ExistingFile);
  ph->add_option("--kind", kind, "water_cylinder or pelvic_ellipsoid");
  ph->add_option("--radius", radius, "body radius (mm)");
  ph->add_option("--dims", dims, "grid dimensions")->expected(3);
  ph->add_option("--spacing", spacing, "voxel spacing (mm)")->expected(3);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  for (const Common* c : {&gen_c, &batch_c, &abl_c, &met_c, &st_c, &ph_c})
    if (c->threads > 0) setenv("SIMCBCT_THREADS", std::to_string(c->threads).c_str(), 1);
  apply_thread_cap();

  try {
    if (*gen) {
      run_generate(load_with_overrides(gen_c));
      return 0;
    }
    if (*batch) {
      const SimulationConfig base = load_with_overrides(batch_c);
      const std::vector<CaseSpec> cases = load_cases(cases_path);
      const auto res = run_batch(base, cases, base.io.output_dir, batch_c.jobs);
      int failed = 0;
      for (const auto& r : res) failed += r.ok ? 0 : 1;
      log_line(std::to_string(res.size() - failed) + "/" + std::to_string(res.size()) + " cases succeeded");
      return failed ? 1 : 0;
    }
    if (*abl) {
      const SimulationConfig base = load_with_overrides(abl_c);
      const int failed = run_ablation(base, load_grid(grid_path), base.io.output_dir, abl_c.jobs, dry_run);
      return failed ? 1 : 0;
    }
    if (*met) {
      run_metrics(mc, met_c.out.empty() ? fs::path("metrics") : fs::path(met_c.out));
      return 0;
    }
    if (*st) {
      const Json j = compute_statistics(read_reports(reports_path), read_observer_csv(observers_path));
      const fs::path out = st_c.out.empty() ? fs::path("stats.json") : fs::path(st_c.out);
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      write_file_atomic(out, j.dump(2) + "\n");
      return 0;
    }
    if (*ph) {
      PhantomSpec spec;
      if (!spec_path.empty()) {
        std::ifstream in(spec_path);
        nlohmann::json j;
        try {
          j = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
          throw Error(ErrorKind::config, spec_path + ": " + e.what());
        }
        spec = phantom_spec_from_json(j);
      } else {
        spec = phantom_spec_from_json({{"kind", kind}, {"body_radius", radius}});
      }
      run_phantom(spec, {dims[0], dims[1], dims[2]}, {spacing[0], spacing[1], spacing[2]},
                  ph_c.out.empty() ? fs::path("phantom") : fs::path(ph_c.out));
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "simcbct: " << e.what() << '\n';
    return e.kind() == ErrorKind::config ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "simcbct: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
