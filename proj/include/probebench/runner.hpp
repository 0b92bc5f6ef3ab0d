#pragma once

#include <chrono>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "probebench/audio.hpp"
#include "probebench/dataset.hpp"
#include "probebench/embedding.hpp"
#include "probebench/metrics.hpp"
#include "probebench/probe.hpp"

namespace probebench::runner {

enum class SourceKind {
  table,      ///< precomputed table file; `location` may contain {dataset}
  reference,  ///< built-in log-mel statistics
  identity,   ///< frame samples are the embedding
  command,    ///< external embedder process
};

std::string to_string(SourceKind kind);

struct ProviderEntry {
  embedding::ProviderSpec spec;
  SourceKind source = SourceKind::reference;
  std::string location;  ///< table path pattern or shell command, as written
  std::string base_dir = ".";  ///< relative table paths resolve against this
  std::chrono::milliseconds timeout{60000};

  /// Table path for one dataset (substitutes {dataset}).
  std::string table_path(const std::string& dataset_name) const;
};

struct ExperimentConfig {
  std::vector<std::string> datasets;  ///< manifest paths
  std::vector<ProviderEntry> providers;
  std::vector<std::size_t> shots;  ///< empty means the automatic schedule
  std::vector<std::uint64_t> seeds = dataset::kDefaultSeeds;
  std::vector<probe::ProbeKind> probes = {probe::ProbeKind::linear};
  std::vector<probe::Loss> losses = {probe::Loss::bce};
  /// Embedding-size ablation. 0 stands for the provider's full width.
  std::vector<std::size_t> truncate = {0};
  probe::ProbeConfig probe;  ///< hyperparameters shared by every variant
  dataset::SplitMode split_mode = dataset::SplitMode::per_example;
  audio::FrameOptions frame_options;
  std::string outputs = "probebench-out";
  std::size_t workers = 1;

  void validate() const;
};

/// Parses the key-value config format (see README). Relative paths are
/// resolved against `base_dir`.
ExperimentConfig parse_config(const std::string& text, const std::string& base_dir = ".");
ExperimentConfig load_config(const std::string& path);

/// [4, 8, 16, 32], plus [64, 128, 256] when every class has more than 256
/// examples.
std::vector<std::size_t> auto_shots(const dataset::DatasetManifest& manifest);

/// Worker count after applying the PROBEBENCH_WORKERS override.
std::size_t effective_workers(const ExperimentConfig& config);

struct RunRecord {
  std::string config_hash;
  std::string status = "ok";  ///< "ok" or "failed"
  std::string provider;
  std::string dataset;
  std::size_t k = 0;
  std::uint64_t seed = 0;
  probe::ProbeKind probe = probe::ProbeKind::linear;
  probe::Loss loss = probe::Loss::bce;
  embedding::ResampleMode resample_mode = embedding::ResampleMode::resample;
  std::size_t dims = 0;
  metrics::MetricsReport metrics;
  std::string error;
  double wall_time_s = 0.0;

  bool ok() const { return status == "ok"; }
};

/// One NDJSON line without the trailing newline.
std::string record_to_json(const RunRecord& record);
RunRecord record_from_json(const std::string& line);

/// Reads a results log. Unparseable lines (for instance a torn final write)
/// are skipped and reported through `warnings` when given.
std::vector<RunRecord> read_log(const std::string& path, std::vector<std::string>* warnings = nullptr);

struct RunOptions {
  std::ostream* progress = nullptr;
  /// Stop after this many newly executed cells (simulates an interruption).
  std::optional<std::size_t> max_new_cells;
};

struct RunResult {
  std::vector<RunRecord> records;  ///< one per grid cell reached, grid order
  std::size_t executed = 0;
  std::size_t skipped = 0;  ///< already completed in the log
  std::vector<std::string> failures;
  std::string log_path;
};

inline constexpr const char* kLogFileName = "results.ndjson";

RunResult run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

/// Embedding table for one provider and dataset, built or loaded from cache.
embedding::EmbeddingTable obtain_table(const ProviderEntry& provider, const dataset::DatasetManifest& manifest,
                                       const ExperimentConfig& config, std::ostream* progress = nullptr);

/// Embeds every record of `manifest` with `provider`.
embedding::EmbeddingTable embed_dataset(const ProviderEntry& provider, const dataset::DatasetManifest& manifest,
                                        const audio::FrameOptions& frame_options = {}, std::size_t workers = 1);

enum class Marker { none, italic, bold };

struct ResultRow {
  std::string provider;
  std::string dataset;
  std::size_t k = 0;
  probe::ProbeKind probe = probe::ProbeKind::linear;
  probe::Loss loss = probe::Loss::bce;
  embedding::ResampleMode resample_mode = embedding::ResampleMode::resample;
  std::size_t dims = 0;
  std::size_t seeds = 0;
  double top1 = 0.0;
  double auc = 0.0;
  Marker top1_marker = Marker::none;
  Marker auc_marker = Marker::none;
};

struct ResultsTable {
  std::vector<ResultRow> rows;
  std::string text;
  std::string csv;
  std::vector<std::string> warnings;
};

/// Means over seeds per (provider, dims, dataset, k, probe, loss). Within one
/// (dataset, k, probe, loss) group a cell is bold when it beats every other
/// (provider, dims) competitor on every shared seed, italic when it does so on
/// all seeds but one (three or more seeds). `k_filter` restricts to one k.
ResultsTable render_results_table(const std::vector<RunRecord>& records,
                                  std::optional<std::size_t> k_filter = std::nullopt);

struct CurvePoint {
  std::string dataset;
  std::string series;
  std::size_t k = 0;
  std::optional<std::uint64_t> seed;  ///< nullopt for the mean curve
  double auc = 0.0;
  metrics::LogOdds y;
};

/// Per-seed points and mean curve (log-odds of the mean AUC) per dataset.
std::vector<CurvePoint> shots_curve_points(const std::vector<RunRecord>& records);

/// Writes `<dataset>_shots.svg` and `<dataset>_shots.csv` into `out_dir` for
/// each dataset spanning at least two k values; returns written paths.
std::vector<std::string> render_shots_curve(const std::vector<RunRecord>& records, const std::string& out_dir);

}  // namespace probebench::runner
