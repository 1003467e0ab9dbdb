#pragma once

// Run manifests (config snapshot, timings, seeds, checksums) and staged
// output directories that appear atomically on success.

#include <openssl/evp.h>

#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <system_error>
#include <vector>

#include <unistd.h>

#include <json.hpp>

#include "simcbct/core.hpp"

namespace simcbct {

inline std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot read " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw Error(ErrorKind::io, "sha256 init failed");
  }
  std::vector<char> buf(1 << 20);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

/// Write a file through a temporary sibling and rename it into place.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::io, "cannot write " + tmp.string());
    out << text;
    if (!out) throw Error(ErrorKind::io, "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

struct RunManifest {
  nlohmann::ordered_json config;
  std::vector<std::pair<std::string, double>> timings;  // stage -> seconds, in run order
  std::map<std::string, std::uint64_t> seeds;
  std::string version = kVersion;
  std::map<std::string, std::string> checksums;  // file name -> sha256
  nlohmann::ordered_json extra = nlohmann::ordered_json::object();

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["software"] = {{"name", "simcbct"}, {"version", version}};
    j["config"] = config;
    j["seeds"] = seeds;
    nlohmann::ordered_json t = nlohmann::ordered_json::object();
    double total = 0;
    for (const auto& [k, v] : timings) {
      t[k] = v;
      total += v;
    }
    t["total"] = total;
    j["timings_s"] = t;
    j["outputs"] = checksums;
    for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
    return j;
  }

  /// Checksum every regular file in `dir` except the manifest itself.
  void checksum_directory(const std::filesystem::path& dir) {
    checksums.clear();
    for (const auto& e : std::filesystem::directory_iterator(dir))
      if (e.is_regular_file() && e.path().filename() != "manifest.json")
        checksums[e.path().filename().string()] = sha256_file(e.path());
  }

  void write(const std::filesystem::path& dir) const {
    write_file_atomic(dir / "manifest.json", to_json().dump(2) + "\n");
  }
};

/// Re-hash the files listed in a manifest; returns the names that differ.
inline std::vector<std::string> verify_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw Error(ErrorKind::io, "no manifest in " + dir.string());
  const nlohmann::json j = nlohmann::json::parse(in);
  std::vector<std::string> bad;
  for (auto it = j.at("outputs").begin(); it != j.at("outputs").end(); ++it) {
    const std::filesystem::path f = dir / it.key();
    if (!std::filesystem::exists(f) || sha256_file(f) != it.value().get<std::string>())
      bad.push_back(it.key());
  }
  return bad;
}

/// Output directory built under a hidden sibling name and renamed into place
/// by commit(). Destruction without commit removes everything written.
class StagingDir {
 public:
  explicit StagingDir(std::filesystem::path final_dir) : final_(std::move(final_dir)) {
    static std::atomic<unsigned> counter{0};
    if (final_.filename().empty()) final_ = final_.parent_path();
    const std::filesystem::path parent =
        final_.has_parent_path() ? final_.parent_path() : std::filesystem::path(".");
    std::filesystem::create_directories(parent);
    staging_ = parent / ("." + final_.filename().string() + ".staging-" +
                         std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(staging_);
    std::filesystem::create_directories(staging_);
  }
  StagingDir(const StagingDir&) = delete;
  StagingDir& operator=(const StagingDir&) = delete;
  ~StagingDir() {
    if (!committed_) {
      std::error_code ec;
      std::filesystem::remove_all(staging_, ec);
    }
  }

  const std::filesystem::path& path() const { return staging_; }
  const std::filesystem::path& final_path() const { return final_; }

  void commit() {
    std::error_code ec;
    std::filesystem::path old;
    if (std::filesystem::exists(final_)) {
      old = staging_.string() + ".old";
      std::filesystem::rename(final_, old);
    }
    std::filesystem::rename(staging_, final_);
    committed_ = true;
    if (!old.empty()) std::filesystem::remove_all(old, ec);
  }

 private:
  std::filesystem::path final_, staging_;
  bool committed_ = false;
};

/// Accumulates named stage durations.
class StageClock {
 public:
  template <typename F>
  auto run(const std::string& stage, F&& f) {
    const auto t0 = std::chrono::steady_clock::now();
    struct Record {
      StageClock* self;
      std::string stage;
      std::chrono::steady_clock::time_point t0;
      ~Record() {
        self->add(stage, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      }
    } rec{this, stage, t0};
    return f();
  }
  void add(const std::string& stage, double seconds) {
    for (auto& [k, v] : entries_)
      if (k == stage) {
        v += seconds;
        return;
      }
    entries_.emplace_back(stage, seconds);
  }
  const std::vector<std::pair<std::string, double>>& entries() const { return entries_; }

 private:
  std::vector<std::pair<std::string, double>> entries_;
};

}  // namespace simcbct
