#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace probebench::dataset {

struct ExampleRecord {
  std::string example_id;
  std::string audio_path;
  std::string label;
  std::optional<std::string> source_recording;
};

/// A labelled task. `classes` is the sorted set of labels and fixes the class
/// index order used by probes and metrics.
struct DatasetManifest {
  std::string name;
  std::vector<ExampleRecord> records;
  std::vector<std::string> classes;

  /// Index of `label` in `classes`; throws if unknown.
  std::size_t class_index(const std::string& label) const;
  /// Per-class example counts in class order.
  std::vector<std::size_t> class_sizes() const;
  const ExampleRecord& record(const std::string& example_id) const;
};

/// Builds a manifest from records, validating ids and labels and deriving the
/// class list. Throws ValidationError.
DatasetManifest make_manifest(std::string name, std::vector<ExampleRecord> records);

/// Parses CSV with header `example_id,audio_path,label[,source_recording]`
/// (column order free). Relative audio paths are kept as written.
DatasetManifest parse_manifest_csv(const std::string& text, std::string name);
/// Reads a manifest file; the dataset name is the file stem and relative
/// audio paths are resolved against the manifest's directory.
DatasetManifest load_manifest(const std::string& path);

struct SplitSpec {
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::map<std::string, std::vector<std::string>> train;  ///< class -> ids
  std::vector<std::string> eval;

  std::vector<std::string> train_ids() const;
  friend bool operator==(const SplitSpec&, const SplitSpec&) = default;
};

enum class SplitMode {
  per_example,   ///< default: examples treated independently
  by_recording,  ///< whole source recordings go to one side
};

/// Seeded k-shot split. Each class's ids are sorted, Fisher-Yates shuffled
/// with splitmix64(seed ^ fnv1a64(class)), and the first k go to train.
/// Throws when a class has <= k examples.
SplitSpec kshot_split(const DatasetManifest& manifest, std::size_t k, std::uint64_t seed,
                      SplitMode mode = SplitMode::per_example);

inline const std::vector<std::uint64_t> kDefaultSeeds = {101, 102, 103, 104, 105};

std::vector<SplitSpec> seed_battery(const DatasetManifest& manifest, std::size_t k,
                                    std::span<const std::uint64_t> seeds = kDefaultSeeds,
                                    SplitMode mode = SplitMode::per_example);

std::string split_to_json(const SplitSpec& split);
SplitSpec split_from_json(const std::string& text);

std::uint64_t fnv1a64(std::string_view text);

/// splitmix64 stream.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }
  /// Uniform double in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

 private:
  std::uint64_t state_;
};

}  // namespace probebench::dataset
