#include "manifest.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <stdexcept>

namespace lacap::cli {

namespace fs = std::filesystem;
using nlohmann::json;

#ifndef LACAP_VERSION
#define LACAP_VERSION "unknown"
#endif

std::string code_version() { return LACAP_VERSION; }

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

RunManifest::RunManifest(fs::path dir, std::string command, std::vector<std::string> argv, json config)
    : dir_(fs::absolute(dir).lexically_normal()), command_(std::move(command)) {
  record_["command"] = command_;
  record_["argv"] = std::move(argv);
  record_["seed"] = config.contains("seed") ? config["seed"] : json(nullptr);
  record_["config"] = std::move(config);
  record_["code_version"] = code_version();
  record_["outputs"] = json::array();
}

void RunManifest::begin() {
  fs::create_directories(dir_);
  record_["started_at"] = utc_timestamp();
  record_["finished_at"] = nullptr;
  record_["status"] = "running";
  write();
}

void RunManifest::add_output(const fs::path& path) {
  const fs::path p = (path.is_absolute() ? path : dir_ / path).lexically_normal();
  if (std::find(outputs_.begin(), outputs_.end(), p) == outputs_.end()) outputs_.push_back(p);
}

void RunManifest::complete() {
  json list = json::array();
  std::vector<std::string> names;
  for (const auto& p : outputs_) {
    std::error_code ec;
    const bool ok = fs::is_directory(p, ec) || (fs::is_regular_file(p, ec) && fs::file_size(p, ec) > 0);
    if (!ok) {
      fail("declared output missing or empty: " + p.string());
      throw std::runtime_error("declared output missing or empty: " + p.string());
    }
    names.push_back(fs::relative(p, dir_).generic_string());
  }
  std::sort(names.begin(), names.end());
  for (auto& n : names) list.push_back(n);
  record_["outputs"] = std::move(list);
  record_["finished_at"] = utc_timestamp();
  record_["status"] = "complete";
  write();
}

void RunManifest::fail(const std::string& message) {
  record_["finished_at"] = utc_timestamp();
  record_["status"] = "failed";
  record_["error"] = message;
  write();
}

void RunManifest::write() const {
  json doc = {{"runs", json::object()}};
  if (std::ifstream in(file()); in) {
    try {
      json existing = json::parse(in);
      if (existing.is_object() && existing.contains("runs") && existing["runs"].is_object()) doc = existing;
    } catch (const json::exception&) {
    }
  }
  doc["runs"][command_] = record_;
  const fs::path tmp = file().string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    out << doc.dump(2) << '\n';
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
  }
  fs::rename(tmp, file());
}

json config_from_file(const fs::path& file, const std::string& command) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open config file " + file.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("config file " + file.string() + ": " + e.what());
  }
  if (j.contains("runs")) {
    if (!j["runs"].contains(command)) {
      throw std::runtime_error("manifest " + file.string() + " has no record for command '" + command + "'");
    }
    return j["runs"][command]["config"];
  }
  if (!j.is_object()) throw std::runtime_error("config file " + file.string() + " must hold a JSON object");
  return j;
}

}  // namespace lacap::cli
