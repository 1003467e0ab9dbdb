#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>

#include "simcbct/pipeline.hpp"

using namespace simcbct;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() /
                     ("simcbct_cli_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string cli() {
  const char* p = std::getenv("SIMCBCT_CLI");
  return p ? p : "simcbct";
}

int run_cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + cli() + " " + args + " 2>/dev/null";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

/// Tiny pelvic run: coarse detector, few views, small recon grid.
nlohmann::json tiny_config(const fs::path& out) {
  nlohmann::json j = nlohmann::json::parse(to_json(SimulationConfig{}).dump());
  j["scanner"]["detector_pixels"] = {64, 48};
  j["scanner"]["detector_spacing"] = {6.4, 6.4};
  j["scanner"]["num_projections"] = 24;
  j["recon"]["dims"] = {40, 40, 6};
  j["recon"]["spacing"] = {8.0, 8.0, 8.0};
  j["io"]["output_dir"] = out.string();
  j["io"]["phantom"] = {{"spec", {{"kind", "pelvic_ellipsoid"}, {"body_radius", 120.0}}},
                        {"dims", {112, 80, 6}},
                        {"spacing", {2.5, 2.5, 8.0}},
                        {"use_surrogate", true}};
  j["seed"] = 7;
  return j;
}

fs::path write_config(const fs::path& dir, const nlohmann::json& j, const std::string& name = "run.json") {
  const fs::path p = dir / name;
  spit(p, j.dump(2));
  return p;
}

bool has_staging_leftovers(const fs::path& dir) {
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().filename().string().find(".staging-") != std::string::npos) return true;
  return false;
}

}  // namespace

// ---------------------------------------------------------------------------
// configuration

TEST(Config, DefaultsMatchTableOne) {
  const SimulationConfig c;
  EXPECT_EQ(c.scanner.nu, 512);
  EXPECT_EQ(c.scanner.nv, 512);
  EXPECT_DOUBLE_EQ(c.scanner.du, 0.8);
  EXPECT_DOUBLE_EQ(c.scanner.sdd, 1536);
  EXPECT_DOUBLE_EQ(c.scanner.sad, 1000);
  EXPECT_DOUBLE_EQ(c.scanner.offset, 115);
  EXPECT_EQ(c.scanner.projection_count(), 667);
  EXPECT_DOUBLE_EQ(c.physics.phi, 4.16e5);
  EXPECT_DOUBLE_EQ(c.physics.spr, 1.6);
  EXPECT_DOUBLE_EQ(c.physics.c_sat, 2.0);
  EXPECT_DOUBLE_EQ(c.breathing.T_p, 180);
  EXPECT_DOUBLE_EQ(c.breathing.A_max, 5);
  EXPECT_EQ(c.recon.dims, (Index3{410, 410, 66}));
  EXPECT_EQ(c.recon.spacing, (Vec3{1, 1, 4}));
  EXPECT_DOUBLE_EQ(c.recon.hann_cutoff, 0.9);
}

TEST(Config, RoundTripIsFixedPoint) {
  const SimulationConfig a = load_config(fs::path(SIMCBCT_SOURCE_DIR) / "configs/default.json");
  const std::string s1 = to_json(a).dump();
  const std::string s2 = to_json(parse_config(s1)).dump();
  EXPECT_EQ(s1, s2);
}

TEST(Config, ShippedConfigsParse) {
  for (const char* name : {"default.json", "desk.json", "cylinder_noiseless.json"})
    EXPECT_NO_THROW(load_config(fs::path(SIMCBCT_SOURCE_DIR) / "configs" / name)) << name;
}

TEST(Config, UnknownKeysAreRejected) {
  nlohmann::json j = tiny_config("x");
  j["physics"]["spr_typo"] = 1.0;
  try {
    config_from_json(j);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::config);
    EXPECT_NE(std::string(e.what()).find("spr_typo"), std::string::npos);
  }
  const fs::path d = scratch("unknown");
  j["physics"].erase("spr_typo");
  j["extra_section"] = {};
  EXPECT_EQ(run_cli("generate --config " + write_config(d, j).string()), 2);
  EXPECT_FALSE(fs::exists(d / "x"));
}

TEST(Config, MalformedJsonIsConfigError) {
  const fs::path d = scratch("malformed");
  spit(d / "bad.json", "{\"seed\": ");
  EXPECT_EQ(run_cli("generate --config " + (d / "bad.json").string()), 2);
}

// ---------------------------------------------------------------------------
// generate

TEST(Generate, OutputsManifestAndDeterminism) {
  const fs::path d = scratch("generate");
  const nlohmann::json j = tiny_config(d / "a");
  const SimulationConfig cfg = config_from_json(j);
  const GenerateResult a = run_generate(cfg);
  const GenerateResult b = run_generate(cfg, d / "b");
  for (const char* f : {"sCBCT.mha", "refCT.mha"}) {
    ASSERT_TRUE(fs::exists(d / "a" / f));
    EXPECT_EQ(sha256_file(d / "a" / f), sha256_file(d / "b" / f)) << f;
  }
  EXPECT_TRUE(verify_manifest(d / "a").empty());
  const Volume3D s = io::read_volume(d / "a" / "sCBCT.mha");
  EXPECT_EQ(s.grid().dims, (Index3{40, 40, 6}));
  EXPECT_EQ(a.manifest.checksums, b.manifest.checksums);
  EXPECT_FALSE(has_staging_leftovers(d));

  const Json m = Json::parse(slurp(d / "a" / "manifest.json"));
  for (const char* k : {"software", "config", "seeds", "timings_s", "outputs"}) EXPECT_TRUE(m.contains(k)) << k;
  for (const char* k : {"load", "contrast_removal", "motion_field", "warp", "raycast", "physics", "reconstruct", "write", "total"})
    EXPECT_TRUE(m["timings_s"].contains(k)) << k;
  EXPECT_EQ(m["seeds"]["master"], 7);
  // the stored config reproduces the run
  const SimulationConfig again = config_from_json(m["config"]);
  EXPECT_EQ(to_json(again).dump(), m["config"].dump());
}

TEST(Generate, SeedChangesNoisyOutput) {
  const fs::path d = scratch("seed");
  nlohmann::json j = tiny_config(d / "a");
  const fs::path cfg = write_config(d, j);
  ASSERT_EQ(run_cli("generate --config " + cfg.string()), 0);
  ASSERT_EQ(run_cli("generate --config " + cfg.string() + " --seed 8 --out " + (d / "b").string()), 0);
  EXPECT_NE(sha256_file(d / "a" / "sCBCT.mha"), sha256_file(d / "b" / "sCBCT.mha"));
  EXPECT_EQ(sha256_file(d / "a" / "refCT.mha"), sha256_file(d / "b" / "refCT.mha"));
}

TEST(Generate, ThreadCountDoesNotChangeBytes) {
  const fs::path d = scratch("threads");
  const fs::path cfg = write_config(d, tiny_config(d / "a"));
  ASSERT_EQ(run_cli("generate --config " + cfg.string(), "SIMCBCT_THREADS=1"), 0);
  ASSERT_EQ(run_cli("generate --config " + cfg.string() + " --out " + (d / "b").string(), "SIMCBCT_THREADS=3"), 0);
  EXPECT_EQ(sha256_file(d / "a" / "sCBCT.mha"), sha256_file(d / "b" / "sCBCT.mha"));
}

TEST(Generate, MissingCtIsConfigErrorWithoutOutputs) {
  const fs::path d = scratch("missing");
  nlohmann::json j = tiny_config(d / "out");
  j["io"]["phantom"] = nullptr;
  j["io"]["input_ct"] = (d / "nope.mha").string();
  EXPECT_EQ(run_cli("generate --config " + write_config(d, j).string()), 2);
  EXPECT_FALSE(fs::exists(d / "out"));
  EXPECT_FALSE(has_staging_leftovers(d));
}

TEST(Generate, CorruptCtFailsWithStageNameAndNoOutputs) {
  const fs::path d = scratch("corrupt");
  spit(d / "ct.mha", "ObjectType = Image\nNDims = 3\nDimSize = 4 4\n");
  nlohmann::json j = tiny_config(d / "out");
  j["io"]["phantom"] = nullptr;
  j["io"]["input_ct"] = (d / "ct.mha").string();
  try {
    run_generate(config_from_json(j));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::stage);
    EXPECT_NE(std::string(e.what()).find("load:"), std::string::npos) << e.what();
  }
  EXPECT_EQ(run_cli("generate --config " + write_config(d, j).string()), 1);
  EXPECT_FALSE(fs::exists(d / "out"));
  EXPECT_FALSE(has_staging_leftovers(d));
}

TEST(Generate, FileInputWithSurrogateAndSavedProjections) {
  const fs::path d = scratch("fileinput");
  const Phantom ph = make_phantom(PhantomSpec::pelvic(120), Grid::centered({112, 80, 6}, {2.5, 2.5, 8}, {}));
  io::write_volume(d / "ct.mha", ph.volume);
  io::write_mask(d / "sur.mha", ph.surrogate);
  nlohmann::json j = tiny_config(d / "out");
  j["io"]["phantom"] = nullptr;
  j["io"]["input_ct"] = (d / "ct.mha").string();
  j["io"]["surrogate_mask"] = (d / "sur.mha").string();
  j["io"]["save_projections"] = true;
  j["io"]["save_motion_field"] = true;
  const GenerateResult r = run_generate(config_from_json(j));
  const io::MetaImage p = io::read_metaimage(d / "out" / "projections.mha");
  EXPECT_EQ(p.grid.dims, (Index3{64, 48, 24}));
  const nlohmann::json pj = nlohmann::json::parse(slurp(d / "out" / "projections.json"));
  ASSERT_EQ(pj["projections"].size(), 24u);
  for (const auto& e : pj["projections"]) EXPECT_LE(std::abs(e["s_i"].get<double>()), 1.0);
  EXPECT_TRUE(verify_manifest(d / "out").empty());
  // same inputs through the built-in phantom path give identical volumes
  const GenerateResult q = run_generate(config_from_json(tiny_config(d / "ph")));
  EXPECT_EQ(r.manifest.checksums.at("sCBCT.mha"), q.manifest.checksums.at("sCBCT.mha"));
}

TEST(Generate, VerifyManifestDetectsTampering) {
  const fs::path d = scratch("tamper");
  run_generate(config_from_json(tiny_config(d / "a")));
  {
    std::fstream f(d / "a" / "refCT.mha", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-1, std::ios::end);
    f.put('\x7f');
  }
  EXPECT_EQ(verify_manifest(d / "a"), std::vector<std::string>{"refCT.mha"});
}

TEST(Generate, ZeroAmplitudeMatchesStaticScan) {
  const Grid g = Grid::centered({112, 80, 6}, {2.5, 2.5, 8}, {});
  const Phantom ph = make_phantom(PhantomSpec::pelvic(120), g);
  const SimulationConfig cfg = config_from_json(tiny_config("x"));
  ScannerGeometry sg = cfg.scanner;
  sg.rotation_center = g.center();
  const MotionDerivation md = derive_motion_field(ph.volume, &ph.surrogate, cfg.motion);
  ASSERT_FALSE(md.empty);
  BreathingModel bm = cfg.breathing;
  bm.A_max = 0;
  ScanSimulator with(ph.volume, &md.final_field, bm, sg, cfg.physics, std::nullopt);
  ScanSimulator without(ph.volume, nullptr, bm, sg, cfg.physics, std::nullopt);
  for (int i : {0, 7, 23}) EXPECT_EQ(with.project(i).data.data, without.project(i).data.data);
}

// ---------------------------------------------------------------------------
// batch

TEST(Batch, SeedDerivationRule) {
  std::set<std::uint64_t> seen;
  for (std::size_t i = 0; i < 50; ++i) {
    const std::uint64_t s = case_seed(42, i);
    EXPECT_EQ(s, 42ull ^ rng::splitmix64(i));
    EXPECT_EQ(s, case_seed(42, i));
    seen.insert(s);
  }
  EXPECT_EQ(seen.size(), 50u);
}

TEST(Batch, OneCorruptCaseAmongThree) {
  const fs::path d = scratch("batch");
  spit(d / "corrupt.mha", "garbage");
  nlohmann::json cases = {{"cases",
                           {{{"id", "p1"}},
                            {{"id", "bad"}, {"io", {{"input_ct", (d / "corrupt.mha").string()}}}},
                            {{"id", "p2"}, {"io", {{"phantom", {{"spec", {{"kind", "water_cylinder"}, {"body_radius", 90.0}}}, {"use_surrogate", false}}}}}}}}};
  spit(d / "cases.json", cases.dump());
  const fs::path cfg = write_config(d, tiny_config(d / "unused"));
  EXPECT_EQ(run_cli("batch --config " + cfg.string() + " --cases " + (d / "cases.json").string() +
                    " --out " + (d / "out").string() + " --jobs 2"),
            1);
  EXPECT_TRUE(fs::exists(d / "out" / "p1" / "sCBCT.mha"));
  EXPECT_TRUE(fs::exists(d / "out" / "p2" / "sCBCT.mha"));
  EXPECT_FALSE(fs::exists(d / "out" / "bad"));
  const std::string summary = slurp(d / "out" / "summary.csv");
  EXPECT_EQ(summary.rfind("case_id,status,seed,seconds,error\n", 0), 0u);
  EXPECT_NE(summary.find("p1,ok," + std::to_string(case_seed(7, 0))), std::string::npos);
  EXPECT_NE(summary.find("bad,failed," + std::to_string(case_seed(7, 1))), std::string::npos);
  EXPECT_NE(summary.find("p2,ok," + std::to_string(case_seed(7, 2))), std::string::npos);
  const auto m1 = nlohmann::json::parse(slurp(d / "out" / "p1" / "manifest.json"));
  EXPECT_EQ(m1["seeds"]["master"].get<std::uint64_t>(), case_seed(7, 0));
}

TEST(Batch, ResultsIndependentOfWorkerCount) {
  const fs::path d = scratch("batch_jobs");
  spit(d / "cases.json", R"({"cases": [{"id": "a"}, {"id": "b"}, {"id": "c"}]})");
  const fs::path cfg = write_config(d, tiny_config(d / "unused"));
  const SimulationConfig base = load_config(cfg);
  const auto cases = load_cases(d / "cases.json");
  run_batch(base, cases, d / "j1", 1);
  run_batch(base, cases, d / "j3", 3);
  for (const char* id : {"a", "b", "c"})
    EXPECT_EQ(sha256_file(d / "j1" / id / "sCBCT.mha"), sha256_file(d / "j3" / id / "sCBCT.mha")) << id;
  EXPECT_NE(sha256_file(d / "j1" / "a" / "sCBCT.mha"), sha256_file(d / "j1" / "b" / "sCBCT.mha"));
}

TEST(Batch, DuplicateIdsRejected) {
  const fs::path d = scratch("batch_dup");
  spit(d / "cases.json", R"([{"id": "a"}, {"id": "a"}])");
  EXPECT_THROW(load_cases(d / "cases.json"), Error);
  const fs::path cfg = write_config(d, tiny_config(d / "unused"));
  EXPECT_EQ(run_cli("batch --config " + cfg.string() + " --cases " + (d / "cases.json").string()), 2);
}

// ---------------------------------------------------------------------------
// ablate

TEST(Ablate, DefaultGridEnumeration) {
  const SimulationConfig base;
  const auto rows = ablation_rows(base, AblationGrid{});
  ASSERT_EQ(rows.size(), 12u);
  std::set<std::string> runs;
  int baseline = 0;
  for (const auto& r : rows) {
    runs.insert(r.run);
    baseline += r.baseline;
  }
  EXPECT_EQ(runs.size(), 9u);
  EXPECT_EQ(baseline, 4);
  // each row varies one parameter; the rest stay at defaults
  for (const auto& r : rows) {
    EXPECT_EQ(r.c_sat, r.group == "c_sat" ? r.value : 2.0);
    EXPECT_EQ(r.phi, r.group == "phi" ? r.value : 4.16e5);
    EXPECT_EQ(r.A_max, r.group == "A_max" ? r.value : 5.0);
    EXPECT_EQ(r.spr, r.group == "spr" ? r.value : 1.6);
  }
}

TEST(Ablate, DryRunTableMatchesGrid) {
  const fs::path d = scratch("ablate");
  const fs::path cfg = write_config(d, tiny_config(d / "unused"));
  ASSERT_EQ(run_cli("ablate --dry-run --config " + cfg.string() + " --out " + (d / "out").string()), 0);
  std::ifstream in(d / "out" / "table_a.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, kAblationCsvHeader);
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  const std::vector<std::string> expect{
      "c_sat,1,1,416000,5,1.6,c_sat_1,,,",       "c_sat,1.5,1.5,416000,5,1.6,c_sat_1.5,,,",
      "c_sat,2,2,416000,5,1.6,baseline,,,",      "phi,200000,2,200000,5,1.6,phi_200000,,,",
      "phi,416000,2,416000,5,1.6,baseline,,,",   "phi,600000,2,600000,5,1.6,phi_600000,,,",
      "A_max,0,2,416000,0,1.6,A_max_0,,,",       "A_max,5,2,416000,5,1.6,baseline,,,",
      "A_max,10,2,416000,10,1.6,A_max_10,,,",    "spr,0.5,2,416000,5,0.5,spr_0.5,,,",
      "spr,1.6,2,416000,5,1.6,baseline,,,",      "spr,2.5,2,416000,5,2.5,spr_2.5,,,"};
  EXPECT_EQ(lines, expect);
  EXPECT_EQ(std::distance(fs::directory_iterator(d / "out"), fs::directory_iterator{}), 1);
}

TEST(Ablate, SmallGridRunsAndSummarizes) {
  const fs::path d = scratch("ablate_run");
  nlohmann::json j = tiny_config(d / "out");
  const fs::path cfg = write_config(d, j);
  spit(d / "grid.json", R"({"c_sat": [2.0], "phi": [4.16e5], "A_max": [0, 5], "spr": [1.6]})");
  ASSERT_EQ(run_cli("ablate --config " + cfg.string() + " --grid " + (d / "grid.json").string()), 0);
  EXPECT_TRUE(fs::exists(d / "out" / "baseline" / "sCBCT.mha"));
  EXPECT_TRUE(fs::exists(d / "out" / "A_max_0" / "sCBCT.mha"));
  const auto m = nlohmann::json::parse(slurp(d / "out" / "A_max_0" / "manifest.json"));
  EXPECT_EQ(m["motion"], "disabled");
  const std::string table = slurp(d / "out" / "table_a.csv");
  EXPECT_EQ(table.find(",,,\n"), std::string::npos) << table;
}

TEST(Ablate, IntensitySummaryOracle) {
  const Grid g = Grid::centered({40, 40, 8}, {2, 2, 2}, {});
  const Phantom ph = make_phantom(PhantomSpec::water_cylinder(30), g);
  Volume3D s = ph.volume;
  rng::Stream r(3, rng::Domain::test, 0, 0);
  for (std::size_t n = 0; n < s.size(); ++n) s[n] += static_cast<float>(10 * r.normal());
  const IntensitySummary is = intensity_summary(s, ph.volume, {0, 0, 0});
  const BinaryMask m = otsu_outline_mask(ph.volume);
  double sum = 0, sum2 = 0, rs = 0, rs2 = 0;
  std::size_t n = 0, nr = 0;
  for (int k = 0; k < 8; ++k)
    for (int jj = 0; jj < 40; ++jj)
      for (int i = 0; i < 40; ++i) {
        if (!m(i, jj, k)) continue;
        const double v = s(i, jj, k);
        sum += v, sum2 += v * v, ++n;
        const Vec3 p = g.world(i, jj, k);
        if (k >= 2 && k < 6 && std::hypot(p.x, p.y) <= 15) {
          const double e = v - ph.volume(i, jj, k);
          rs += e, rs2 += e * e, ++nr;
        }
      }
  EXPECT_EQ(is.mask_voxels, n);
  EXPECT_EQ(is.roi_voxels, nr);
  EXPECT_NEAR(is.mask_mean, sum / n, 1e-6);
  EXPECT_NEAR(is.mask_sd, std::sqrt(sum2 / n - (sum / n) * (sum / n)), 1e-4);
  EXPECT_NEAR(is.roi_noise_sd, std::sqrt((rs2 - rs * rs / nr) / (nr - 1)), 1e-6);
  EXPECT_NEAR(is.roi_noise_sd, 10.0, 1.0);
}

// ---------------------------------------------------------------------------
// metrics

TEST(Metrics, IdentityReportThroughCli) {
  const fs::path d = scratch("metrics");
  const Phantom ph = make_phantom(PhantomSpec::pelvic(60), Grid::centered({48, 40, 8}, {3, 3, 3}, {}));
  io::write_volume(d / "v.mha", ph.volume);
  const std::string v = (d / "v.mha").string();
  ASSERT_EQ(run_cli("metrics --pred " + v + " --ref " + v + " --cbct " + v + " --case-id ds/m/c1 --out " +
                    (d / "out").string() + " --heatmap " + (d / "heat.mha").string()),
            0);
  ASSERT_EQ(run_cli("metrics --pred " + v + " --ref " + v + " --cbct " + v + " --case-id ds/m/c2 --out " +
                    (d / "out").string()),
            0);
  std::ifstream in(d / "out" / "metrics.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    const nlohmann::ordered_json j = nlohmann::ordered_json::parse(line);
    std::vector<std::string> keys;
    for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
    EXPECT_EQ(keys, (std::vector<std::string>{"case_id", "mae", "psnr", "ssim", "nmi", "cc", "mask_voxels", "params"}));
    EXPECT_EQ(j["mae"], 0.0);
    EXPECT_EQ(j["psnr"], "inf");
    EXPECT_DOUBLE_EQ(j["ssim"].get<double>(), 1.0);
    EXPECT_NEAR(j["nmi"].get<double>(), 1.0, 1e-12);
    EXPECT_NEAR(j["cc"].get<double>(), 1.0, 1e-12);
    EXPECT_GT(j["mask_voxels"].get<std::size_t>(), 0u);
    EXPECT_NO_THROW(report_from_json(nlohmann::json::parse(line)));
    ++lines;
  }
  EXPECT_EQ(lines, 2);
  const std::string csv = slurp(d / "out" / "metrics.csv");
  EXPECT_EQ(csv.rfind(std::string(kMetricCsvHeader) + "\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_TRUE(fs::exists(d / "heat.mha"));
}

TEST(Metrics, GeometryMismatchFails) {
  const fs::path d = scratch("metrics_bad");
  io::write_volume(d / "a.mha", Volume3D(Grid::centered({8, 8, 8}, {1, 1, 1}, {}), Unit::hu));
  io::write_volume(d / "b.mha", Volume3D(Grid::centered({8, 8, 9}, {1, 1, 1}, {}), Unit::hu));
  const std::string a = (d / "a.mha").string(), b = (d / "b.mha").string();
  EXPECT_EQ(run_cli("metrics --pred " + a + " --ref " + b + " --cbct " + a + " --out " + (d / "o").string()), 1);
  EXPECT_EQ(run_cli("metrics --pred " + a + " --ref " + (d / "none.mha").string() + " --cbct " + a), 2);
}

// ---------------------------------------------------------------------------
// stats

namespace {

/// Reports for two models over `n` cases with a chosen metric/IQS relation.
void synthetic_study(const fs::path& d, int n, bool perfect_raters) {
  std::ofstream rep(d / "reports.jsonl"), obs(d / "observers.csv");
  obs << "dataset,rater,case,model,score,preference\n";
  rng::Stream r(11, rng::Domain::test, 0, 0);
  for (const char* model : {"m1", "m2"})
    for (int c = 0; c < n; ++c) {
      const double iqs = 1 + (c * 7 % n) * 4.0 / n + (model[1] == '2' ? 0.1 : 0.0);
      MetricReport m;
      m.case_id = std::string("ds/") + model + "/c" + std::to_string(c);
      m.mae = 100 - 10 * iqs;  // strictly decreasing in IQS
      m.psnr = 20 + iqs;       // strictly increasing
      m.ssim = iqs / 10;
      m.nmi = 0.3 + 0.01 * iqs + 0.001 * r.normal();
      m.cc = m.ssim;  // identical to ssim by construction
      m.mask_voxels = 100;
      m.nmi_bins = 64;
      m.ssim_window = 7;
      m.data_range = 1000;
      rep << to_json(m).dump() << '\n';
      for (int rater = 0; rater < 3; ++rater) {
        const double noise = perfect_raters ? 0 : 0.3 * r.normal();
        obs << "ds,r" << rater << ",c" << c << ',' << model << ',' << iqs + noise << ','
            << (perfect_raters ? (c % 3 == 0 ? "sCT" : c % 3 == 1 ? "CBCT" : "equal")
                               : (rater == 0 ? "sCT" : "equal"))
            << '\n';
      }
    }
}

}  // namespace

TEST(Stats, SyntheticStudyThroughCli) {
  const fs::path d = scratch("stats");
  synthetic_study(d, 20, true);
  ASSERT_EQ(run_cli("stats --reports " + (d / "reports.jsonl").string() + " --observers " +
                    (d / "observers.csv").string() + " --out " + (d / "stats.json").string()),
            0);
  const nlohmann::json j = nlohmann::json::parse(slurp(d / "stats.json"));
  const auto& sp = j["spearman_vs_iqs"]["ds"];
  EXPECT_DOUBLE_EQ(sp["psnr"]["statistic"].get<double>(), 1.0);
  EXPECT_DOUBLE_EQ(sp["mae"]["statistic"].get<double>(), -1.0);
  EXPECT_DOUBLE_EQ(sp["ssim"]["statistic"].get<double>(), 1.0);
  EXPECT_EQ(sp["psnr"]["p_value"], 0.0);
  bool saw_identical = false;
  for (const auto& row : j["steiger"]["ds"])
    if (row["metric_k"] == "ssim" && row["metric_h"] == "cc") {
      saw_identical = true;
      EXPECT_EQ(row["statistic"], 0.0);
      EXPECT_EQ(row["p_value"], 1.0);
    }
  EXPECT_TRUE(saw_identical);
  ASSERT_EQ(j["reliability"].size(), 2u);
  for (const auto& row : j["reliability"]) {
    EXPECT_DOUBLE_EQ(row["kappa"]["value"].get<double>(), 1.0);
    EXPECT_DOUBLE_EQ(row["icc"]["value"].get<double>(), 1.0);
  }
  // m2 is shifted by a constant: paired tests see every difference with one sign
  for (const auto& row : j["model_comparisons"]) {
    if (row["metric"] != "iqs") continue;
    EXPECT_EQ(row["status"], "ok");
    EXPECT_LT(row["p_value"].get<double>(), 1e-3);
    EXPECT_LE(row["p_bonferroni"].get<double>(), 1.0);
    EXPECT_GE(row["p_bonferroni"].get<double>(), row["p_value"].get<double>());
  }
}

TEST(Stats, InsufficientDataIsMarkedNotFatal) {
  const fs::path d = scratch("stats_small");
  synthetic_study(d, 1, false);
  const nlohmann::json j = compute_statistics(read_reports(d / "reports.jsonl"), read_observer_csv(d / "observers.csv"));
  EXPECT_EQ(j["spearman_vs_iqs"]["ds"]["mae"]["status"], "insufficient data");
  for (const auto& row : j["steiger"]["ds"]) EXPECT_EQ(row["status"], "insufficient data");
  for (const auto& row : j["model_comparisons"]) EXPECT_EQ(row["status"], "insufficient data");
  for (const auto& row : j["reliability"]) {
    EXPECT_EQ(row["kappa"]["status"], "ok") << row.dump();
    EXPECT_EQ(row["icc"]["status"], "insufficient data");
  }
}

TEST(Stats, CombinedGroupAppearsForSeveralDatasets) {
  std::vector<MetricReport> reps;
  std::vector<ObserverRow> obs;
  for (const char* ds : {"clinical", "synthrad"})
    for (int c = 0; c < 6; ++c) {
      MetricReport m;
      m.case_id = std::string(ds) + "/m/c" + std::to_string(c);
      m.mae = c, m.psnr = c, m.ssim = c, m.nmi = c, m.cc = c;
      reps.push_back(m);
      for (const char* rater : {"a", "b"}) obs.push_back({ds, rater, "c" + std::to_string(c), "m", "equal", double(c)});
    }
  const nlohmann::json j = compute_statistics(reps, obs);
  EXPECT_TRUE(j["spearman_vs_iqs"].contains("combined"));
  EXPECT_EQ(j["spearman_vs_iqs"]["combined"]["mae"]["n"], 12);
  EXPECT_EQ(j["spearman_vs_iqs"]["clinical"]["mae"]["n"], 6);
}

TEST(Stats, CaseKeyConvention) {
  EXPECT_EQ(parse_case_key("a/b/c").dataset, "a");
  EXPECT_EQ(parse_case_key("b/c").model, "b");
  EXPECT_EQ(parse_case_key("c").dataset, "all");
  EXPECT_EQ(parse_case_key("c").model, "default");
}

// ---------------------------------------------------------------------------
// phantom

TEST(Phantom, CliWritesVolumeAndDescriptor) {
  const fs::path d = scratch("phantom");
  ASSERT_EQ(run_cli("phantom --kind water_cylinder --radius 100 --dims 64 64 8 --spacing 4 4 4 --out " +
                    (d / "p").string()),
            0);
  const io::MetaImage img = io::read_metaimage(d / "p" / "phantom.mha");
  EXPECT_EQ(img.grid.dims, (Index3{64, 64, 8}));
  EXPECT_EQ(img.grid.spacing, (Vec3{4, 4, 4}));
  // round trip equals the in-memory rasterization bit for bit
  const Phantom ph = make_phantom(PhantomSpec::water_cylinder(100), Grid::centered({64, 64, 8}, {4, 4, 4}, {}));
  const Volume3D back = io::read_volume(d / "p" / "phantom.mha");
  ASSERT_EQ(back.size(), ph.volume.size());
  for (std::size_t n = 0; n < back.size(); ++n) ASSERT_EQ(back[n], ph.volume[n]);

  // descriptor chord integral vs the closed form mu * 2 sqrt(R^2 - b^2)
  const nlohmann::json desc = nlohmann::json::parse(slurp(d / "p" / "phantom.json"));
  const AnalyticPhantom a = analytic_from_descriptor(desc);
  const double mu = desc["mu_water"].get<double>();
  const Vec3 c = a.center();
  for (double b : {0.0, 25.0, 60.0, 99.0}) {
    const Vec3 p0{c.x - 500, c.y + b, c.z}, p1{c.x + 500, c.y + b, c.z};
    EXPECT_NEAR(a.line_integral(p0, p1, mu), mu * 2 * std::sqrt(100.0 * 100 - b * b), 1e-9) << b;
  }
}

TEST(Phantom, SpecFileAndValidation) {
  const fs::path d = scratch("phantom_spec");
  spit(d / "spec.json", R"({"kind": "pelvic_ellipsoid", "body_radius": 90})");
  ASSERT_EQ(run_cli("phantom --spec " + (d / "spec.json").string() + " --dims 80 64 4 --spacing 3 3 3 --out " +
                    (d / "p").string()),
            0);
  EXPECT_TRUE(fs::exists(d / "p" / "surrogate.mha"));
  const nlohmann::json desc = nlohmann::json::parse(slurp(d / "p" / "phantom.json"));
  EXPECT_EQ(desc["spec"]["kind"], "pelvic_ellipsoid");
  spit(d / "bad.json", R"({"kind": "torus"})");
  EXPECT_EQ(run_cli("phantom --spec " + (d / "bad.json").string() + " --out " + (d / "q").string()), 2);
  EXPECT_FALSE(fs::exists(d / "q"));
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("frobnicate"), 2);
  EXPECT_EQ(run_cli("generate"), 2);
}
