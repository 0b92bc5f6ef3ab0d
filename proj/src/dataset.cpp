#include "probebench/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"
#include "probebench/csv.hpp"
#include "probebench/error.hpp"

namespace probebench::dataset {

namespace {

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

void shuffle_in_place(std::vector<std::string>& items, SplitMix64& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.next() % i);
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::size_t DatasetManifest::class_index(const std::string& label) const {
  auto it = std::lower_bound(classes.begin(), classes.end(), label);
  if (it == classes.end() || *it != label) throw ValidationError("unknown class '" + label + "' in '" + name + "'");
  return static_cast<std::size_t>(it - classes.begin());
}

std::vector<std::size_t> DatasetManifest::class_sizes() const {
  std::vector<std::size_t> sizes(classes.size(), 0);
  for (const auto& r : records) ++sizes[class_index(r.label)];
  return sizes;
}

const ExampleRecord& DatasetManifest::record(const std::string& example_id) const {
  for (const auto& r : records) {
    if (r.example_id == example_id) return r;
  }
  throw ValidationError("manifest '" + name + "' has no example '" + example_id + "'");
}

DatasetManifest make_manifest(std::string name, std::vector<ExampleRecord> records) {
  std::unordered_set<std::string> seen;
  std::set<std::string> labels;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.example_id.empty()) throw ValidationError("manifest '" + name + "': empty example_id in record " + std::to_string(i + 1));
    if (r.label.empty()) throw ValidationError("manifest '" + name + "': empty label for '" + r.example_id + "'");
    if (!seen.insert(r.example_id).second) {
      throw ValidationError("manifest '" + name + "': duplicate example_id '" + r.example_id + "'");
    }
    labels.insert(r.label);
  }
  if (records.empty()) throw ValidationError("manifest '" + name + "' has no records");
  DatasetManifest m;
  m.name = std::move(name);
  m.records = std::move(records);
  m.classes.assign(labels.begin(), labels.end());
  return m;
}

DatasetManifest parse_manifest_csv(const std::string& text, std::string name) {
  const auto rows = parse_csv(text);
  if (rows.empty()) throw ValidationError("manifest '" + name + "' is empty");
  const auto& header = rows.front();
  std::unordered_map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[trim(header[i])] = i;
  for (const char* required : {"example_id", "audio_path", "label"}) {
    if (!col.count(required)) {
      throw ValidationError("manifest '" + name + "': missing column '" + std::string(required) + "'");
    }
  }
  const std::size_t id_col = col["example_id"], path_col = col["audio_path"], label_col = col["label"];
  const auto rec_col = col.count("source_recording") ? std::optional<std::size_t>(col["source_recording"]) : std::nullopt;

  std::vector<ExampleRecord> records;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    // Row numbers are 1-based file lines, header included.
    const std::string where = "manifest '" + name + "' row " + std::to_string(r + 1);
    auto cell = [&](std::size_t c) { return c < row.size() ? trim(row[c]) : std::string(); };
    ExampleRecord rec;
    rec.example_id = cell(id_col);
    rec.audio_path = cell(path_col);
    rec.label = cell(label_col);
    if (rec.example_id.empty()) throw ValidationError(where + ": missing example_id");
    if (rec.label.empty()) throw ValidationError(where + ": missing label");
    if (rec_col) {
      auto src = cell(*rec_col);
      if (!src.empty()) rec.source_recording = std::move(src);
    }
    records.push_back(std::move(rec));
  }
  if (records.empty()) throw ValidationError("manifest '" + name + "' has a header but no records");
  return make_manifest(std::move(name), std::move(records));
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open manifest '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  const std::filesystem::path p(path);
  DatasetManifest m = parse_manifest_csv(buf.str(), p.stem().string());
  const auto dir = p.parent_path();
  for (auto& r : m.records) {
    if (!r.audio_path.empty() && std::filesystem::path(r.audio_path).is_relative()) {
      r.audio_path = (dir / r.audio_path).lexically_normal().string();
    }
  }
  return m;
}

std::vector<std::string> SplitSpec::train_ids() const {
  std::vector<std::string> ids;
  for (const auto& [cls, v] : train) ids.insert(ids.end(), v.begin(), v.end());
  return ids;
}

SplitSpec kshot_split(const DatasetManifest& manifest, std::size_t k, std::uint64_t seed, SplitMode mode) {
  std::map<std::string, std::vector<std::string>> by_class;
  std::map<std::string, std::string> recording_of;
  for (const auto& r : manifest.records) {
    by_class[r.label].push_back(r.example_id);
    recording_of[r.example_id] = r.source_recording.value_or("\x01" + r.example_id);
  }

  SplitSpec split;
  split.k = k;
  split.seed = seed;
  for (const auto& cls : manifest.classes) {
    auto ids = by_class[cls];
    if (ids.size() <= k) {
      throw ValidationError("class '" + cls + "' in '" + manifest.name + "' has " + std::to_string(ids.size()) +
                            " examples; k=" + std::to_string(k) + " leaves none for evaluation");
    }
    std::sort(ids.begin(), ids.end());
    SplitMix64 rng(seed ^ fnv1a64(cls));
    auto& train = split.train[cls];

    if (mode == SplitMode::per_example) {
      shuffle_in_place(ids, rng);
      train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k));
      split.eval.insert(split.eval.end(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end());
      continue;
    }

    std::map<std::string, std::vector<std::string>> groups;
    for (const auto& id : ids) groups[recording_of[id]].push_back(id);
    std::vector<std::string> keys;
    for (const auto& [key, members] : groups) keys.push_back(key);
    shuffle_in_place(keys, rng);
    std::vector<std::string> eval;
    for (const auto& key : keys) {
      const auto& members = groups[key];
      if (train.size() + members.size() <= k) {
        train.insert(train.end(), members.begin(), members.end());
      } else {
        eval.insert(eval.end(), members.begin(), members.end());
      }
    }
    if (eval.empty()) {
      throw ValidationError("class '" + cls + "': recording-grouped split left no evaluation examples");
    }
    split.eval.insert(split.eval.end(), eval.begin(), eval.end());
  }
  return split;
}

std::vector<SplitSpec> seed_battery(const DatasetManifest& manifest, std::size_t k, std::span<const std::uint64_t> seeds,
                                    SplitMode mode) {
  if (seeds.empty()) throw ValidationError("seed battery is empty");
  std::set<std::uint64_t> unique(seeds.begin(), seeds.end());
  if (unique.size() != seeds.size()) throw ValidationError("seed battery contains duplicate seeds");
  std::vector<SplitSpec> splits;
  splits.reserve(seeds.size());
  for (auto seed : seeds) splits.push_back(kshot_split(manifest, k, seed, mode));
  return splits;
}

std::string split_to_json(const SplitSpec& split) {
  nlohmann::ordered_json j;
  j["k"] = split.k;
  j["seed"] = split.seed;
  j["train"] = nlohmann::ordered_json::object();
  for (const auto& [cls, ids] : split.train) j["train"][cls] = ids;
  j["eval"] = split.eval;
  return j.dump(2) + "\n";
}

SplitSpec split_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    SplitSpec s;
    s.k = j.at("k").get<std::size_t>();
    s.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& [cls, ids] : j.at("train").items()) s.train[cls] = ids.get<std::vector<std::string>>();
    s.eval = j.at("eval").get<std::vector<std::string>>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("split JSON: ") + e.what());
  }
}

}  // namespace probebench::dataset
