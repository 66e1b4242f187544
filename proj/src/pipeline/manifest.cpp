#include "ur3/pipeline/manifest.hpp"

#include <fstream>
#include <map>
#include <set>

namespace ur3::pipeline {

std::string to_string(Split s) { return s == Split::kTrain ? "train" : "test"; }

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "test") return Split::kTest;
  throw ManifestError("unknown split '" + s + "' (train|test)");
}

void DatasetManifest::validate() const {
  std::map<std::string, Split> ids;
  std::map<std::string, std::pair<Split, std::string>> gts;
  std::map<std::string, std::string> lq_owner;
  for (const auto& s : scenes) {
    if (s.scene_id.empty()) throw ManifestError("manifest: scene with an empty id");
    if (s.gt.empty()) throw ManifestError("manifest: scene " + s.scene_id + " has no gt");
    if (auto it = ids.find(s.scene_id); it != ids.end()) {
      if (it->second != s.split)
        throw ManifestError("manifest: scene " + s.scene_id + " appears in both train and test");
      throw ManifestError("manifest: duplicate scene id " + s.scene_id);
    }
    ids.emplace(s.scene_id, s.split);
    const auto gt = s.gt.lexically_normal().string();
    if (auto it = gts.find(gt); it != gts.end() && it->second.first != s.split)
      throw ManifestError("manifest: gt " + gt + " is shared by scene " + it->second.second + " (" +
                          to_string(it->second.first) + ") and " + s.scene_id + " (" +
                          to_string(s.split) + ")");
    gts.emplace(gt, std::make_pair(s.split, s.scene_id));
    for (const auto& lq : s.lq) {
      const auto key = lq.lexically_normal().string();
      auto [it, fresh] = lq_owner.emplace(key, s.scene_id);
      if (!fresh)
        throw ManifestError("manifest: lq " + key + " is paired with more than one gt (scenes " +
                            it->second + ", " + s.scene_id + ")");
    }
  }
}

std::vector<const SceneRecord*> DatasetManifest::split(Split sp) const {
  std::vector<const SceneRecord*> out;
  for (const auto& s : scenes)
    if (s.split == sp) out.push_back(&s);
  return out;
}

std::filesystem::path DatasetManifest::resolve(const std::filesystem::path& p) const {
  return p.is_absolute() ? p : root / p;
}

nlohmann::json to_json(const DatasetManifest& m) {
  nlohmann::json scenes = nlohmann::json::array();
  for (const auto& s : m.scenes) {
    std::vector<std::string> lq;
    for (const auto& p : s.lq) lq.push_back(p.generic_string());
    scenes.push_back({{"scene_id", s.scene_id},
                      {"gt", s.gt.generic_string()},
                      {"lq", lq},
                      {"split", to_string(s.split)},
                      {"provenance", s.provenance}});
  }
  return {{"scenes", scenes}};
}

DatasetManifest manifest_from_json(const nlohmann::json& j, const std::filesystem::path& root) {
  DatasetManifest m;
  m.root = root;
  try {
    for (const auto& s : j.at("scenes")) {
      SceneRecord r;
      r.scene_id = s.at("scene_id").get<std::string>();
      r.gt = s.at("gt").get<std::string>();
      for (const auto& p : s.at("lq")) r.lq.emplace_back(p.get<std::string>());
      r.split = parse_split(s.at("split").get<std::string>());
      r.provenance = s.value("provenance", std::string("real"));
      m.scenes.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ManifestError(std::string("manifest: ") + e.what());
  }
  m.validate();
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ManifestError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ManifestError(path.string() + ": " + e.what());
  }
  return manifest_from_json(j, path.parent_path());
}

void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  m.validate();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ManifestError("cannot write " + path.string());
  out << to_json(m).dump(2) << "\n";
}

}  // namespace ur3::pipeline
