#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "inspect/binary_io.hpp"
#include "inspect/error.hpp"
#include "inspect/model.hpp"

namespace inspect {

enum class Origin { initial, fine_tune, re_train, expansion };

inline const char* to_string(Origin o) noexcept {
  switch (o) {
    case Origin::initial: return "initial";
    case Origin::fine_tune: return "fine_tune";
    case Origin::re_train: return "re_train";
    case Origin::expansion: return "expansion";
  }
  return "?";
}

inline Origin origin_from_string(const std::string& s) {
  if (s == "initial") return Origin::initial;
  if (s == "fine_tune") return Origin::fine_tune;
  if (s == "re_train") return Origin::re_train;
  if (s == "expansion") return Origin::expansion;
  throw FormatError("unknown registry origin '" + s + "'", 0);
}

inline std::string bytes_digest(std::span<const std::uint8_t> b) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t c : b) h = (h ^ c) * 0x100000001b3ULL;
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct RegistryEntry {
  std::uint64_t version = 0;
  std::optional<std::uint64_t> parent;
  Origin origin = Origin::initial;
  std::string weight_file;  // relative to the registry directory
  std::string digest;       // FNV-1a of the weight bytes
  nlohmann::json metrics = nlohmann::json::object();

  friend bool operator==(const RegistryEntry&, const RegistryEntry&) = default;
};

inline nlohmann::json to_json(const RegistryEntry& e) {
  nlohmann::json j{{"version", e.version},         {"origin", to_string(e.origin)}, {"weight_file", e.weight_file},
                   {"digest", e.digest},           {"metrics", e.metrics}};
  j["parent"] = e.parent ? nlohmann::json(*e.parent) : nlohmann::json(nullptr);
  return j;
}

inline RegistryEntry registry_entry_from_json(const nlohmann::json& j) {
  RegistryEntry e;
  e.version = j.at("version").get<std::uint64_t>();
  if (!j.at("parent").is_null()) e.parent = j.at("parent").get<std::uint64_t>();
  e.origin = origin_from_string(j.at("origin").get<std::string>());
  e.weight_file = j.at("weight_file").get<std::string>();
  e.digest = j.at("digest").get<std::string>();
  e.metrics = j.value("metrics", nlohmann::json::object());
  return e;
}

// Versioned model store. Registry versions count from 1 and are independent
// of ModelWeights::version, which counts gradient updates. With an empty
// directory the registry lives in memory only.
class ModelRegistry {
 public:
  static constexpr const char* kIndexName = "lineage.json";

  ModelRegistry() = default;

  explicit ModelRegistry(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_ / "weights");
    const auto index = dir_ / kIndexName;
    if (!std::filesystem::exists(index)) return;
    const Bytes raw = read_file(index.string());
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(raw.begin(), raw.end());
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(std::string("registry index: ") + e.what(), e.byte);
    }
    if (j.value("format", "") != "inspect-registry") throw FormatError("not a registry index", 0);
    for (const auto& e : j.at("entries")) entries_.push_back(registry_entry_from_json(e));
    if (j.contains("deployed") && !j["deployed"].is_null()) deployed_ = j["deployed"].get<std::uint64_t>();
  }

  bool persistent() const noexcept { return !dir_.empty(); }
  const std::filesystem::path& directory() const noexcept { return dir_; }

  const RegistryEntry& add(const ModelWeights& m, Origin origin, std::optional<std::uint64_t> parent,
                           nlohmann::json metrics = nlohmann::json::object()) {
    if (origin == Origin::initial && parent) throw ConsistencyError("initial entries have no parent");
    if (origin != Origin::initial) {
      if (!parent) throw ConsistencyError(std::string(to_string(origin)) + " entry needs a parent");
      if (!find(*parent)) throw ConsistencyError("parent version " + std::to_string(*parent) + " not in registry");
    }
    RegistryEntry e;
    e.version = entries_.empty() ? 1 : entries_.back().version + 1;
    e.parent = parent;
    e.origin = origin;
    e.metrics = std::move(metrics);
    Bytes bytes = encode_weights(m);
    e.digest = bytes_digest(bytes);
    e.weight_file = "weights/v" + std::to_string(e.version) + ".inspw";
    if (persistent()) {
      write_file((dir_ / e.weight_file).string(), bytes);
    } else {
      blobs_[e.version] = std::move(bytes);
    }
    entries_.push_back(std::move(e));
    save_index();
    return entries_.back();
  }

  const RegistryEntry* find(std::uint64_t version) const noexcept {
    for (const auto& e : entries_)
      if (e.version == version) return &e;
    return nullptr;
  }

  const RegistryEntry& get(std::uint64_t version) const {
    if (const auto* e = find(version)) return *e;
    throw ConfigError("registry has no version " + std::to_string(version));
  }

  Bytes bytes(std::uint64_t version) const {
    const auto& e = get(version);
    Bytes b = persistent() ? read_file((dir_ / e.weight_file).string()) : blobs_.at(version);
    if (bytes_digest(b) != e.digest) throw ConsistencyError("weight file digest mismatch for version " + std::to_string(version));
    return b;
  }

  ModelWeights load(std::uint64_t version) const { return decode_weights(bytes(version)); }

  void set_metrics(std::uint64_t version, nlohmann::json metrics) {
    for (auto& e : entries_)
      if (e.version == version) e.metrics = std::move(metrics);
    save_index();
  }

  void deploy(std::uint64_t version) {
    get(version);
    deployed_ = version;
    save_index();
  }

  std::optional<std::uint64_t> deployed() const noexcept { return deployed_; }
  std::optional<std::uint64_t> latest() const noexcept {
    if (entries_.empty()) return std::nullopt;
    return entries_.back().version;
  }
  const std::vector<RegistryEntry>& entries() const noexcept { return entries_; }
  bool empty() const noexcept { return entries_.empty(); }

  // Versions from the given one back to its root.
  std::vector<std::uint64_t> ancestry(std::uint64_t version) const {
    std::vector<std::uint64_t> out;
    std::optional<std::uint64_t> v = version;
    while (v) {
      out.push_back(*v);
      v = get(*v).parent;
    }
    return out;
  }

  nlohmann::json lineage_json() const {
    nlohmann::json j{{"format", "inspect-registry"}, {"version", 1}};
    j["entries"] = nlohmann::json::array();
    for (const auto& e : entries_) j["entries"].push_back(to_json(e));
    j["deployed"] = deployed_ ? nlohmann::json(*deployed_) : nlohmann::json(nullptr);
    return j;
  }

 private:
  void save_index() const {
    if (!persistent()) return;
    const std::string text = lineage_json().dump(2) + "\n";
    const auto tmp = dir_ / (std::string(kIndexName) + ".tmp");
    write_file(tmp.string(), std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    std::filesystem::rename(tmp, dir_ / kIndexName);
  }

  std::filesystem::path dir_;
  std::vector<RegistryEntry> entries_;
  std::map<std::uint64_t, Bytes> blobs_;
  std::optional<std::uint64_t> deployed_;
};

}  // namespace inspect
