#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace ur3::pipeline {

struct ManifestError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Split { kTrain, kTest };

struct SceneRecord {
  std::string scene_id;
  std::filesystem::path gt;
  std::vector<std::filesystem::path> lq;
  Split split = Split::kTrain;
  /// Synthetic recipe id or "real".
  std::string provenance = "real";
};

struct DatasetManifest {
  /// Paths in records are relative to this directory.
  std::filesystem::path root;
  std::vector<SceneRecord> scenes;

  /// Throws ManifestError on overlapping splits, duplicate ids or shared lq paths.
  void validate() const;
  std::vector<const SceneRecord*> split(Split s) const;
  std::filesystem::path resolve(const std::filesystem::path& p) const;
};

std::string to_string(Split s);
Split parse_split(const std::string& s);

nlohmann::json to_json(const DatasetManifest& m);
/// Validates on load; relative record paths resolve against `root`.
DatasetManifest manifest_from_json(const nlohmann::json& j, const std::filesystem::path& root);
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const DatasetManifest& m);

}  // namespace ur3::pipeline
