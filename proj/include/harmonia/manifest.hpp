#pragma once

#include <map>
#include <string>
#include <vector>

namespace harmonia {

/// JSON Lines manifest: one object per line with an "id" and image paths.
/// Relative paths resolve against the manifest's directory; "stream" is a
/// plain tag.
struct ManifestEntry {
  std::string id;
  std::map<std::string, std::string> fields;

  const std::string& at(const std::string& key) const;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;

  std::size_t size() const { return entries.size(); }
  const ManifestEntry* find(const std::string& id) const;
};

inline const std::vector<std::string> kStream1Keys = {"image", "retouched", "mask"};
inline const std::vector<std::string> kStream2Keys = {"image", "mask"};

/// Parses and validates a manifest: unique ids, required keys present and
/// every referenced path readable. Throws ParseError naming the line.
DatasetManifest load_manifest(const std::string& path, const std::vector<std::string>& required_keys,
                              bool check_paths = true);
DatasetManifest parse_manifest(const std::string& text, const std::string& base_dir,
                               const std::vector<std::string>& required_keys);
void save_manifest(const DatasetManifest& manifest, const std::string& path);

}  // namespace harmonia
