#include "ur3/nn/checkpoint.hpp"

#include <cstdio>

namespace ur3::nn {

namespace {
constexpr const char* kHeaderKey = "ur3_header";
}

std::string config_hash(const nlohmann::json& config) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : config.dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void save_checkpoint(const std::filesystem::path& path, torch::nn::Module& module,
                     const CheckpointHeader& header) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  nlohmann::json j{{"kind", header.kind},
                   {"config", header.config},
                   {"arch_hash", header.arch_hash.empty() ? config_hash(header.config)
                                                          : header.arch_hash},
                   {"iteration", header.iteration},
                   {"extra", header.extra}};
  torch::serialize::OutputArchive archive;
  module.save(archive);
  archive.write(kHeaderKey, c10::IValue(j.dump()));
  archive.save_to(path.string());
}

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw CheckpointError("checkpoint not found: " + path.string());
  torch::serialize::InputArchive archive;
  archive.load_from(path.string());
  c10::IValue v;
  if (!archive.try_read(kHeaderKey, v)) throw CheckpointError("missing header in " + path.string());
  const auto j = nlohmann::json::parse(v.toStringRef());
  CheckpointHeader h;
  h.kind = j.at("kind").get<std::string>();
  h.config = j.at("config");
  h.arch_hash = j.at("arch_hash").get<std::string>();
  h.iteration = j.at("iteration").get<int64_t>();
  h.extra = j.value("extra", nlohmann::json::object());
  return h;
}

CheckpointHeader load_checkpoint(const std::filesystem::path& path, torch::nn::Module& module,
                                 const std::string& expected_kind) {
  CheckpointHeader h = read_checkpoint_header(path);
  if (h.kind != expected_kind)
    throw CheckpointError(path.string() + " holds a '" + h.kind + "', expected '" + expected_kind +
                          "'");
  if (h.arch_hash != config_hash(h.config))
    throw CheckpointError(path.string() + ": header hash does not match its config");
  torch::serialize::InputArchive archive;
  archive.load_from(path.string());
  module.load(archive);
  return h;
}

}  // namespace ur3::nn
