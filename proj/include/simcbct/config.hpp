#pragma once

// Simulation configuration: JSON schema with strict key checking. Every
// default equals the medium-FOV scanner preset, so a config only has to name
// its input.

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "simcbct/motion.hpp"
#include "simcbct/phantom.hpp"
#include "simcbct/projector.hpp"
#include "simcbct/recon.hpp"

namespace simcbct {

using Json = nlohmann::ordered_json;

/// Synthetic input used when no CT file is given.
struct PhantomInput {
  PhantomSpec spec = PhantomSpec::pelvic();
  Index3 dims{420, 420, 70};
  Vec3 spacing{1, 1, 4};
  bool use_surrogate = true;  // phantom surrogate inserts act as surrogate mask
};

struct IoConfig {
  std::string input_ct;
  std::string surrogate_mask;
  std::string output_dir = "out";
  bool save_projections = false;
  bool save_motion_field = false;
  std::optional<PhantomInput> phantom;
};

struct SimulationConfig {
  std::uint64_t seed = 0;
  ScannerGeometry scanner;
  std::optional<Vec3> rotation_center;  // unset: center of the input CT
  PhysicsParams physics;
  std::optional<BeamProfile> beam_profile;
  std::string beam_profile_file;  // measured flood field, fitted at run time
  BreathingModel breathing;
  MotionParams motion;
  ContrastParams contrast;
  ReconConfig recon;
  IoConfig io;

  void validate() const;
};

namespace config_detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                       const std::string& where) {
  if (!j.is_object()) throw Error(ErrorKind::config, where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw Error(ErrorKind::config, "unknown key '" + it.key() + "' in " + where);
}

template <typename T>
void get(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::config, where + "." + key + ": " + e.what());
  }
}

inline Vec3 to_vec3(const nlohmann::json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 3)
    throw Error(ErrorKind::config, where + ": expected a 3-element array");
  try {
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::config, where + ": " + e.what());
  }
}

inline Index3 to_index3(const nlohmann::json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 3)
    throw Error(ErrorKind::config, where + ": expected a 3-element array");
  try {
    return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>()};
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::config, where + ": " + e.what());
  }
}

inline Json vec_json(Vec3 v) { return Json::array({v.x, v.y, v.z}); }
inline Json idx_json(Index3 v) { return Json::array({v[0], v[1], v[2]}); }

}  // namespace config_detail

// ---------------------------------------------------------------------------
// Phantom spec serialization (shared by the config and the phantom command).

inline Json to_json(const PhantomSpec& s) {
  using config_detail::vec_json;
  Json j;
  j["kind"] = to_string(s.kind);
  j["body_radius"] = s.body_radius;
  j["body_radius_y"] = s.body_radius_y;
  j["half_length"] = s.half_length;
  j["body_hu"] = s.body_hu;
  j["background_hu"] = s.background_hu;
  Json ins = Json::array();
  for (const auto& i : s.inserts)
    ins.push_back({{"shape", i.shape == InsertShape::sphere ? "sphere" : "cylinder"},
                   {"center", vec_json(i.center)},
                   {"radius", i.radius},
                   {"hu", i.hu},
                   {"surrogate", i.surrogate}});
  j["inserts"] = ins;
  return j;
}

/// Accepts either a preset ({"kind": ..., "body_radius": ...}) or a full spec.
inline PhantomSpec phantom_spec_from_json(const nlohmann::json& j) {
  using namespace config_detail;
  const std::string where = "phantom";
  check_keys(j, {"kind", "body_radius", "body_radius_y", "half_length", "body_hu",
                 "background_hu", "inserts"},
             where);
  std::string kind = "water_cylinder";
  get(j, "kind", kind, where);
  double radius = 0;
  get(j, "body_radius", radius, where);
  PhantomSpec s;
  if (kind == "water_cylinder")
    s = PhantomSpec::water_cylinder(radius > 0 ? radius : 100);
  else if (kind == "pelvic" || kind == "pelvic_ellipsoid")
    s = PhantomSpec::pelvic(radius > 0 ? radius : 170);
  else
    throw Error(ErrorKind::config, "phantom.kind must be water_cylinder or pelvic_ellipsoid");
  get(j, "body_radius_y", s.body_radius_y, where);
  get(j, "half_length", s.half_length, where);
  get(j, "body_hu", s.body_hu, where);
  get(j, "background_hu", s.background_hu, where);
  if (j.contains("inserts")) {
    s.inserts.clear();
    for (const auto& e : j.at("inserts")) {
      check_keys(e, {"shape", "center", "radius", "hu", "surrogate"}, "phantom.inserts[]");
      PhantomInsert ins;
      std::string shape = "cylinder";
      get(e, "shape", shape, "phantom.inserts[]");
      if (shape != "sphere" && shape != "cylinder")
        throw Error(ErrorKind::config, "phantom insert shape must be sphere or cylinder");
      ins.shape = shape == "sphere" ? InsertShape::sphere : InsertShape::cylinder;
      if (e.contains("center")) ins.center = to_vec3(e.at("center"), "phantom.inserts[].center");
      get(e, "radius", ins.radius, "phantom.inserts[]");
      get(e, "hu", ins.hu, "phantom.inserts[]");
      get(e, "surrogate", ins.surrogate, "phantom.inserts[]");
      s.inserts.push_back(ins);
    }
  }
  try {
    validate(s);
  } catch (const Error& e) {
    throw Error(ErrorKind::config, e.what());
  }
  return s;
}

// ---------------------------------------------------------------------------

inline void SimulationConfig::validate() const {
  try {
    scanner.validate();
    physics.validate();
    breathing.validate();
    motion.validate();
    recon.validate();
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::config) throw;
    throw Error(ErrorKind::config, e.what());
  }
  if (!(contrast.factor >= 0) || !(contrast.sigma_voxels >= 0) || !(contrast.noise_sigma >= 0))
    throw Error(ErrorKind::config, "contrast parameters must be non-negative");
  if (beam_profile && !beam_profile_file.empty())
    throw Error(ErrorKind::config, "give either physics.beam_profile or beam_profile_file");
  if (io.input_ct.empty() && !io.phantom)
    throw Error(ErrorKind::config, "io.input_ct or io.phantom is required");
  if (!io.input_ct.empty() && io.phantom)
    throw Error(ErrorKind::config, "io.input_ct and io.phantom are mutually exclusive");
  if (io.output_dir.empty()) throw Error(ErrorKind::config, "io.output_dir must not be empty");
}

namespace config_detail {

inline SimulationConfig parse_sections(const nlohmann::json& j) {
  SimulationConfig c;
  check_keys(j, {"seed", "scanner", "physics", "motion", "contrast", "recon", "io"}, "config");
  get(j, "seed", c.seed, "config");

  if (j.contains("scanner")) {
    const auto& s = j.at("scanner");
    const std::string w = "scanner";
    check_keys(s, {"detector_pixels", "detector_spacing", "detector_size", "sdd", "sad",
                   "detector_offset", "start_angle", "stop_angle", "angle_increment",
                   "num_projections", "rotation_center"},
               w);
    ScannerGeometry& g = c.scanner;
    if (s.contains("detector_pixels")) {
      const auto& p = s.at("detector_pixels");
      if (!p.is_array() || p.size() != 2) throw Error(ErrorKind::config, "detector_pixels: [nu, nv]");
      g.nu = p[0].get<int>();
      g.nv = p[1].get<int>();
    }
    if (s.contains("detector_spacing")) {
      const auto& p = s.at("detector_spacing");
      if (!p.is_array() || p.size() != 2) throw Error(ErrorKind::config, "detector_spacing: [du, dv]");
      g.du = p[0].get<double>();
      g.dv = p[1].get<double>();
    }
    get(s, "sdd", g.sdd, w);
    get(s, "sad", g.sad, w);
    get(s, "detector_offset", g.offset, w);
    get(s, "start_angle", g.start_angle, w);
    get(s, "stop_angle", g.stop_angle, w);
    get(s, "angle_increment", g.angle_increment, w);
    if (s.contains("num_projections") && !s.at("num_projections").is_null())
      g.num_projections = s.at("num_projections").get<int>();
    if (s.contains("rotation_center") && !s.at("rotation_center").is_null())
      c.rotation_center = to_vec3(s.at("rotation_center"), "scanner.rotation_center");
    if (s.contains("detector_size")) {
      // Redundant with pixels x spacing; accepted only when consistent.
      const auto& p = s.at("detector_size");
      if (!p.is_array() || p.size() != 2)
        throw Error(ErrorKind::config, "detector_size: [width, height]");
      if (std::abs(p[0].get<double>() - g.width()) > 1e-6 ||
          std::abs(p[1].get<double>() - g.height()) > 1e-6)
        throw Error(ErrorKind::config, "detector_size disagrees with pixels x spacing");
    }
  }

  if (j.contains("physics")) {
    const auto& p = j.at("physics");
    const std::string w = "physics";
    check_keys(p, {"photon_flux", "tube_current", "exposure_time", "spr", "c_sat", "mu_water",
                   "noise", "scatter", "beam_profile", "beam_profile_file"},
               w);
    get(p, "photon_flux", c.physics.phi, w);
    get(p, "tube_current", c.physics.tube_current, w);
    get(p, "exposure_time", c.physics.exposure_time, w);
    get(p, "spr", c.physics.spr, w);
    get(p, "c_sat", c.physics.c_sat, w);
    get(p, "mu_water", c.physics.mu_water, w);
    get(p, "noise", c.physics.noise_enabled, w);
    get(p, "scatter", c.physics.scatter_enabled, w);
    if (p.contains("beam_profile") && !p.at("beam_profile").is_null()) {
      const auto& b = p.at("beam_profile");
      check_keys(b, {"amplitude", "sigma_u", "center_u", "baseline"}, "physics.beam_profile");
      BeamProfile bp = BeamProfile::default_for(c.scanner);
      get(b, "amplitude", bp.amplitude, "physics.beam_profile");
      get(b, "sigma_u", bp.sigma_u, "physics.beam_profile");
      get(b, "center_u", bp.center_u, "physics.beam_profile");
      get(b, "baseline", bp.baseline, "physics.beam_profile");
      c.beam_profile = bp;
    }
    if (p.contains("beam_profile_file") && !p.at("beam_profile_file").is_null())
      c.beam_profile_file = p.at("beam_profile_file").get<std::string>();
  }

  if (j.contains("motion")) {
    const auto& m = j.at("motion");
    const std::string w = "motion";
    check_keys(m, {"T_p", "T_hc", "A_max", "jitter_sigma", "tau_g", "bone_threshold",
                   "anterior_axis", "surrogate_proximity", "propagation_power", "neighbors",
                   "foreground_threshold"},
               w);
    get(m, "T_p", c.breathing.T_p, w);
    get(m, "T_hc", c.breathing.T_hc, w);
    get(m, "A_max", c.breathing.A_max, w);
    get(m, "jitter_sigma", c.breathing.jitter_sigma, w);
    get(m, "tau_g", c.motion.tau_g, w);
    get(m, "bone_threshold", c.motion.bone_threshold, w);
    if (m.contains("anterior_axis"))
      c.motion.anterior_axis = to_vec3(m.at("anterior_axis"), "motion.anterior_axis");
    get(m, "surrogate_proximity", c.motion.surrogate_proximity, w);
    get(m, "propagation_power", c.motion.propagation_power, w);
    get(m, "neighbors", c.motion.neighbors, w);
    get(m, "foreground_threshold", c.motion.foreground_threshold, w);
  }

  if (j.contains("contrast")) {
    const auto& m = j.at("contrast");
    const std::string w = "contrast";
    check_keys(m, {"threshold", "factor", "sigma_voxels", "noise_sigma"}, w);
    get(m, "threshold", c.contrast.threshold, w);
    get(m, "factor", c.contrast.factor, w);
    get(m, "sigma_voxels", c.contrast.sigma_voxels, w);
    get(m, "noise_sigma", c.contrast.noise_sigma, w);
  }

  if (j.contains("recon")) {
    const auto& r = j.at("recon");
    const std::string w = "recon";
    check_keys(r, {"dims", "spacing", "hann_cutoff", "truncation_correction", "hu_mode", "fov_mask"},
               w);
    if (r.contains("dims")) c.recon.dims = to_index3(r.at("dims"), "recon.dims");
    if (r.contains("spacing")) c.recon.spacing = to_vec3(r.at("spacing"), "recon.spacing");
    get(r, "hann_cutoff", c.recon.hann_cutoff, w);
    get(r, "truncation_correction", c.recon.truncation_correction, w);
    get(r, "fov_mask", c.recon.fov_mask, w);
    if (r.contains("hu_mode")) {
      const std::string mode = r.at("hu_mode").get<std::string>();
      if (mode == "paper_fixed")
        c.recon.hu_mode = HuMode::paper_fixed;
      else if (mode == "physical_calibrated")
        c.recon.hu_mode = HuMode::physical_calibrated;
      else
        throw Error(ErrorKind::config, "recon.hu_mode must be paper_fixed or physical_calibrated");
    }
  }
  c.recon.mu_water = c.physics.mu_water;

  if (j.contains("io")) {
    const auto& o = j.at("io");
    const std::string w = "io";
    check_keys(o, {"input_ct", "surrogate_mask", "output_dir", "save_projections",
                   "save_motion_field", "phantom"},
               w);
    get(o, "input_ct", c.io.input_ct, w);
    get(o, "surrogate_mask", c.io.surrogate_mask, w);
    get(o, "output_dir", c.io.output_dir, w);
    get(o, "save_projections", c.io.save_projections, w);
    get(o, "save_motion_field", c.io.save_motion_field, w);
    if (o.contains("phantom") && !o.at("phantom").is_null()) {
      const auto& p = o.at("phantom");
      check_keys(p, {"spec", "dims", "spacing", "use_surrogate"}, "io.phantom");
      PhantomInput in;
      if (p.contains("spec")) in.spec = phantom_spec_from_json(p.at("spec"));
      if (p.contains("dims")) in.dims = to_index3(p.at("dims"), "io.phantom.dims");
      if (p.contains("spacing")) in.spacing = to_vec3(p.at("spacing"), "io.phantom.spacing");
      get(p, "use_surrogate", in.use_surrogate, "io.phantom");
      c.io.phantom = in;
    }
  }
  c.breathing.seed = c.seed;
  c.physics.seed = c.seed;
  c.validate();
  return c;
}

}  // namespace config_detail

inline SimulationConfig config_from_json(const nlohmann::json& j) {
  try {
    return config_detail::parse_sections(j);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::config, std::string("config: ") + e.what());
  }
}

inline Json to_json(const SimulationConfig& c) {
  using config_detail::idx_json;
  using config_detail::vec_json;
  Json j;
  j["seed"] = c.seed;
  const ScannerGeometry& g = c.scanner;
  Json s;
  s["detector_pixels"] = Json::array({g.nu, g.nv});
  s["detector_spacing"] = Json::array({g.du, g.dv});
  s["sdd"] = g.sdd;
  s["sad"] = g.sad;
  s["detector_offset"] = g.offset;
  s["start_angle"] = g.start_angle;
  s["stop_angle"] = g.stop_angle;
  s["angle_increment"] = g.angle_increment;
  s["num_projections"] = g.num_projections ? Json(*g.num_projections) : Json(nullptr);
  s["rotation_center"] = c.rotation_center ? vec_json(*c.rotation_center) : Json(nullptr);
  j["scanner"] = s;

  Json p;
  p["photon_flux"] = c.physics.phi;
  p["tube_current"] = c.physics.tube_current;
  p["exposure_time"] = c.physics.exposure_time;
  p["spr"] = c.physics.spr;
  p["c_sat"] = c.physics.c_sat;
  p["mu_water"] = c.physics.mu_water;
  p["noise"] = c.physics.noise_enabled;
  p["scatter"] = c.physics.scatter_enabled;
  if (c.beam_profile)
    p["beam_profile"] = {{"amplitude", c.beam_profile->amplitude},
                         {"sigma_u", c.beam_profile->sigma_u},
                         {"center_u", c.beam_profile->center_u},
                         {"baseline", c.beam_profile->baseline}};
  else
    p["beam_profile"] = nullptr;
  p["beam_profile_file"] = c.beam_profile_file.empty() ? Json(nullptr) : Json(c.beam_profile_file);
  j["physics"] = p;

  Json m;
  m["T_p"] = c.breathing.T_p;
  m["T_hc"] = c.breathing.T_hc;
  m["A_max"] = c.breathing.A_max;
  m["jitter_sigma"] = c.breathing.jitter_sigma;
  m["tau_g"] = c.motion.tau_g;
  m["bone_threshold"] = c.motion.bone_threshold;
  m["anterior_axis"] = vec_json(c.motion.anterior_axis);
  m["surrogate_proximity"] = c.motion.surrogate_proximity;
  m["propagation_power"] = c.motion.propagation_power;
  m["neighbors"] = c.motion.neighbors;
  m["foreground_threshold"] = c.motion.foreground_threshold;
  j["motion"] = m;

  j["contrast"] = {{"threshold", c.contrast.threshold},
                   {"factor", c.contrast.factor},
                   {"sigma_voxels", c.contrast.sigma_voxels},
                   {"noise_sigma", c.contrast.noise_sigma}};

  j["recon"] = {{"dims", idx_json(c.recon.dims)},
                {"spacing", vec_json(c.recon.spacing)},
                {"hann_cutoff", c.recon.hann_cutoff},
                {"truncation_correction", c.recon.truncation_correction},
                {"hu_mode", to_string(c.recon.hu_mode)},
                {"fov_mask", c.recon.fov_mask}};

  Json o;
  o["input_ct"] = c.io.input_ct;
  o["surrogate_mask"] = c.io.surrogate_mask;
  o["output_dir"] = c.io.output_dir;
  o["save_projections"] = c.io.save_projections;
  o["save_motion_field"] = c.io.save_motion_field;
  if (c.io.phantom)
    o["phantom"] = {{"spec", to_json(c.io.phantom->spec)},
                    {"dims", idx_json(c.io.phantom->dims)},
                    {"spacing", vec_json(c.io.phantom->spacing)},
                    {"use_surrogate", c.io.phantom->use_surrogate}};
  else
    o["phantom"] = nullptr;
  j["io"] = o;
  return j;
}

inline SimulationConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::config, "cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::config, path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

inline SimulationConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::config, std::string("config: ") + e.what());
  }
  return config_from_json(j);
}

}  // namespace simcbct
