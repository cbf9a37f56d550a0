#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "json.hpp"

namespace kdstage::cli {

// Lowercase hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

// Relative path (generic form) -> SHA-256 for every regular file under
// `root`, skipping run manifests.
std::map<std::string, std::string> hash_tree(const std::filesystem::path& root);

inline constexpr const char* kRunManifestName = "run_manifest.json";

// One record per command invocation, written next to its outputs.
struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  // Long flag name -> value as given or defaulted; enough to rerun.
  std::map<std::string, std::string> options;
  nlohmann::json config = nlohmann::json::object();  // resolved, typed
  nlohmann::json seeds = nlohmann::json::object();
  nlohmann::json inputs = nlohmann::json::object();
  std::filesystem::path output_dir;
  std::map<std::string, std::string> artifacts;
  double wall_clock_seconds = 0;
  std::string version;
};

nlohmann::json to_json(const RunManifest& m);
void write_run_manifest(const RunManifest& m);
nlohmann::json read_run_manifest(const std::filesystem::path& path);

}  // namespace kdstage::cli
