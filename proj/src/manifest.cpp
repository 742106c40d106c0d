#include <harmonia/manifest.hpp>

#include <harmonia/error.hpp>
#include <harmonia/image_io.hpp>

#include <json.hpp>

#include <filesystem>
#include <set>
#include <sstream>

namespace harmonia {

namespace fs = std::filesystem;

const std::string& ManifestEntry::at(const std::string& key) const {
  auto it = fields.find(key);
  if (it == fields.end()) throw ParseError(id + "/" + key, "missing manifest field");
  return it->second;
}

const ManifestEntry* DatasetManifest::find(const std::string& id) const {
  for (const auto& e : entries) {
    if (e.id == id) return &e;
  }
  return nullptr;
}

DatasetManifest parse_manifest(const std::string& text, const std::string& base_dir,
                               const std::vector<std::string>& required_keys) {
  DatasetManifest manifest;
  std::set<std::string> seen;
  std::istringstream lines(text);
  std::string line;
  int lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "line " + std::to_string(lineno);
    nlohmann::json record;
    try {
      record = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(where, std::string("invalid JSON: ") + e.what());
    }
    if (!record.is_object()) throw ParseError(where, "record is not an object");
    if (!record.contains("id") || !record["id"].is_string()) throw ParseError(where + "/id", "missing string id");
    ManifestEntry entry;
    entry.id = record["id"].get<std::string>();
    if (!seen.insert(entry.id).second) throw ParseError(where + "/id", "duplicate id '" + entry.id + "'");
    for (const auto& [key, value] : record.items()) {
      if (key == "id" || !value.is_string()) continue;
      if (key == "stream") {
        // Tag, not a path.
        entry.fields[key] = value.get<std::string>();
        continue;
      }
      fs::path p(value.get<std::string>());
      if (p.is_relative() && !base_dir.empty()) p = fs::path(base_dir) / p;
      entry.fields[key] = p.lexically_normal().string();
    }
    for (const auto& key : required_keys) {
      if (!entry.fields.count(key)) throw ParseError(where + "/" + key, "missing required key");
    }
    manifest.entries.push_back(std::move(entry));
  }
  return manifest;
}

DatasetManifest load_manifest(const std::string& path, const std::vector<std::string>& required_keys,
                              bool check_paths) {
  const std::string text = read_file(path);
  DatasetManifest manifest =
      parse_manifest(text, fs::path(path).parent_path().string(), required_keys);
  if (check_paths) {
    for (const auto& e : manifest.entries) {
      for (const auto& key : required_keys) {
        const auto& p = e.fields.at(key);
        if (!fs::is_regular_file(p)) throw ParseError(e.id + "/" + key, "unresolvable path " + p);
      }
    }
  }
  return manifest;
}

void save_manifest(const DatasetManifest& manifest, const std::string& path) {
  std::string out;
  for (const auto& e : manifest.entries) {
    nlohmann::ordered_json record;
    record["id"] = e.id;
    for (const auto& [k, v] : e.fields) record[k] = v;
    out += record.dump() + "\n";
  }
  write_file(path, out);
}

}  // namespace harmonia
