#pragma once

// Run manifests. Each output directory holds one run_manifest.json with one
// record per command that wrote into it; a later run of the same command
// replaces its record.

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace lacap::cli {

inline constexpr const char* kManifestFile = "run_manifest.json";

std::string code_version();
std::string utc_timestamp();

class RunManifest {
 public:
  RunManifest(std::filesystem::path dir, std::string command, std::vector<std::string> argv, nlohmann::json config);

  const std::filesystem::path& dir() const { return dir_; }
  std::filesystem::path file() const { return dir_ / kManifestFile; }

  // Writes the record with status "running".
  void begin();
  void add_output(const std::filesystem::path& path);
  // Requires every declared output to exist (files non-empty), then marks
  // the record "complete". Throws std::runtime_error otherwise.
  void complete();
  void fail(const std::string& message);

 private:
  void write() const;

  std::filesystem::path dir_;
  std::string command_;
  nlohmann::json record_;
  std::vector<std::filesystem::path> outputs_;
};

// The config block stored for `command`, from either a manifest or a plain
// JSON object of option values.
nlohmann::json config_from_file(const std::filesystem::path& file, const std::string& command);

}  // namespace lacap::cli
