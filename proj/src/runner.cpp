#include "probebench/runner.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "probebench/error.hpp"

namespace probebench::runner {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::stringstream in(value);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T>
T parse_number(const std::string& text, const std::string& where) {
  T value{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) throw ValidationError(where + ": cannot parse '" + text + "' as a number");
  return value;
}

bool parse_bool(const std::string& text, const std::string& where) {
  if (text == "true" || text == "yes" || text == "1") return true;
  if (text == "false" || text == "no" || text == "0") return false;
  throw ValidationError(where + ": expected true or false, got '" + text + "'");
}

std::string resolve(const std::string& base_dir, const std::string& path) {
  if (path.empty() || fs::path(path).is_absolute()) return path;
  return (fs::path(base_dir) / path).lexically_normal().string();
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

std::string safe_file_stem(const std::string& name) {
  std::string out = name;
  for (char& c : out) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) c = '_';
  }
  return out;
}

/// Same exception category, extra context.
[[noreturn]] void rethrow_with_context(const std::string& context) {
  try {
    throw;
  } catch (const FormatError& e) {
    throw FormatError(context + ": " + e.what());
  } catch (const ValidationError& e) {
    throw ValidationError(context + ": " + e.what());
  } catch (const ProviderError& e) {
    throw ProviderError(context + ": " + e.what());
  } catch (const std::exception& e) {
    throw Error(context + ": " + e.what());
  }
}

SourceKind parse_source_kind(const std::string& text, std::string& location, const std::string& where) {
  const auto colon = text.find(':');
  const std::string head = trim(text.substr(0, colon));
  location = colon == std::string::npos ? std::string() : trim(text.substr(colon + 1));
  if (head == "table") {
    if (location.empty()) throw ValidationError(where + ": table source needs a path (table:PATH)");
    return SourceKind::table;
  }
  if (head == "command") {
    if (location.empty()) throw ValidationError(where + ": command source needs a command (command:CMD)");
    return SourceKind::command;
  }
  if (colon == std::string::npos && head == "reference") return SourceKind::reference;
  if (colon == std::string::npos && head == "identity") return SourceKind::identity;
  throw ValidationError(where + ": unknown source '" + text + "' (table:PATH, command:CMD, reference, identity)");
}

/// Accumulates one [provider NAME] section.
struct ProviderDraft {
  std::string name;
  std::size_t line = 0;
  std::map<std::string, std::pair<std::string, std::size_t>> keys;  // key -> (value, line)
};

ProviderEntry finish_provider(const ProviderDraft& d, const std::string& base_dir) {
  const std::string where = "provider '" + d.name + "'";
  auto get = [&](const std::string& key) -> std::optional<std::string> {
    auto it = d.keys.find(key);
    if (it == d.keys.end()) return std::nullopt;
    return it->second.first;
  };
  auto at = [&](const std::string& key) { return where + " line " + std::to_string(d.keys.at(key).second); };

  ProviderEntry entry;
  entry.base_dir = base_dir;
  const auto source = get("source");
  if (!source) throw ValidationError(where + ": missing 'source'");
  entry.source = parse_source_kind(*source, entry.location, at("source"));

  std::optional<std::size_t> dim;
  std::optional<std::uint32_t> rate;
  if (auto v = get("dim")) dim = parse_number<std::size_t>(*v, at("dim"));
  if (auto v = get("rate")) rate = parse_number<std::uint32_t>(*v, at("rate"));

  if (auto preset = get("preset")) {
    auto spec = embedding::provider_preset(*preset);
    if (!spec) throw ValidationError(at("preset") + ": unknown preset '" + *preset + "'");
    entry.spec = *spec;
  } else if (entry.source == SourceKind::reference) {
    entry.spec = embedding::reference_spec(rate.value_or(16000));
  } else if (entry.source == SourceKind::identity) {
    if (!dim) throw ValidationError(where + ": identity source needs 'dim'");
    entry.spec = embedding::identity_spec(*dim, rate.value_or(16000));
  } else if (!dim) {
    throw ValidationError(where + ": needs 'dim' or a 'preset'");
  }
  entry.spec.name = d.name;
  if (rate) {
    entry.spec.native_rate = *rate;
    if (entry.source == SourceKind::identity && !get("window")) {
      entry.spec.window_seconds = static_cast<double>(entry.spec.embedding_dim) / *rate;
    }
  }
  if (dim) {
    if (entry.source == SourceKind::reference && *dim != embedding::kReferenceDim) {
      throw ValidationError(at("dim") + ": the reference provider is " + std::to_string(embedding::kReferenceDim) +
                            "-dimensional");
    }
    entry.spec.embedding_dim = *dim;
  }
  if (auto v = get("window")) entry.spec.window_seconds = parse_number<double>(*v, at("window"));
  if (auto v = get("mode")) entry.spec.resample_mode = embedding::parse_resample_mode(*v);
  if (auto v = get("timeout_ms")) entry.timeout = std::chrono::milliseconds(parse_number<long long>(*v, at("timeout_ms")));

  static const std::set<std::string> known = {"source", "preset", "dim", "rate", "window", "mode", "timeout_ms"};
  for (const auto& [key, value] : d.keys) {
    if (!known.count(key)) throw ValidationError(where + " line " + std::to_string(value.second) + ": unknown key '" + key + "'");
  }
  entry.spec.validate();
  return entry;
}

json spec_json(const embedding::ProviderSpec& spec) {
  json j;
  j["name"] = spec.name;
  j["native_rate"] = spec.native_rate;
  j["window_seconds"] = spec.window_seconds;
  j["embedding_dim"] = spec.embedding_dim;
  j["resample_mode"] = embedding::to_string(spec.resample_mode);
  return j;
}

json provider_json(const ProviderEntry& p) {
  json j = spec_json(p.spec);
  j["source"] = to_string(p.source);
  j["location"] = p.location;
  return j;
}

json probe_json(const probe::ProbeConfig& c) {
  json j;
  j["kind"] = probe::to_string(c.kind);
  j["loss"] = probe::to_string(c.loss);
  j["hidden_multiplier"] = c.hidden_multiplier;
  j["learning_rate"] = c.optimizer.learning_rate;
  j["beta1"] = c.optimizer.beta1;
  j["beta2"] = c.optimizer.beta2;
  j["epsilon"] = c.optimizer.epsilon;
  j["max_epochs"] = c.max_epochs;
  j["tolerance"] = c.tolerance;
  j["patience"] = c.patience;
  j["early_stopping"] = c.early_stopping;
  j["weight_decay"] = c.weight_decay;
  return j;
}

struct LoadedDataset {
  std::string path;
  dataset::DatasetManifest manifest;
  std::uint64_t content_hash = 0;
  std::map<std::string, std::size_t> label_of;  // example id -> class index
  std::vector<std::size_t> shots;
};

struct Cell {
  std::size_t k = 0;
  std::uint64_t seed = 0;
  probe::ProbeKind kind = probe::ProbeKind::linear;
  probe::Loss loss = probe::Loss::bce;
  std::size_t truncate = 0;  // 0: full width
  std::string hash;
};

std::string cell_hash(const ExperimentConfig& config, const ProviderEntry& provider, const LoadedDataset& ds,
                      const Cell& cell) {
  probe::ProbeConfig pc = config.probe;
  pc.kind = cell.kind;
  pc.loss = cell.loss;
  json j;
  j["provider"] = provider_json(provider);
  j["dataset"] = {{"name", ds.manifest.name}, {"manifest_fnv1a64", hex64(ds.content_hash)}};
  j["split_mode"] = config.split_mode == dataset::SplitMode::per_example ? "per_example" : "by_recording";
  j["min_trailing_fraction"] = config.frame_options.min_trailing_fraction;
  j["k"] = cell.k;
  j["seed"] = cell.seed;
  j["probe"] = probe_json(pc);
  j["dims"] = cell.truncate == 0 ? provider.spec.embedding_dim : cell.truncate;
  return hex64(dataset::fnv1a64(j.dump()));
}

std::unique_ptr<embedding::FrameEmbedder> make_embedder(const ProviderEntry& p) {
  switch (p.source) {
    case SourceKind::reference: return std::make_unique<embedding::ReferenceEmbedder>();
    case SourceKind::identity: return std::make_unique<embedding::IdentityEmbedder>();
    case SourceKind::command:
      return std::make_unique<embedding::ExternalEmbedder>(
          embedding::CommandSpec{p.location, p.spec.embedding_dim, p.timeout});
    case SourceKind::table: break;
  }
  throw ValidationError("provider '" + p.spec.name + "' reads a table and has no embedder");
}

void check_covers(const embedding::EmbeddingTable& table, const dataset::DatasetManifest& manifest,
                  const std::string& origin) {
  for (const auto& r : manifest.records) {
    if (!table.rows.count(r.example_id)) {
      throw ValidationError(origin + " has no embedding for example '" + r.example_id + "' of '" + manifest.name + "'");
    }
  }
}

RunRecord execute_cell(const ExperimentConfig& config, const ProviderEntry& provider, const LoadedDataset& ds,
                       const embedding::EmbeddingTable& table, const Cell& cell) {
  RunRecord rec;
  rec.config_hash = cell.hash;
  rec.provider = provider.spec.name;
  rec.dataset = ds.manifest.name;
  rec.k = cell.k;
  rec.seed = cell.seed;
  rec.probe = cell.kind;
  rec.loss = cell.loss;
  rec.resample_mode = provider.spec.resample_mode;
  rec.dims = table.dim();

  const auto split = dataset::kshot_split(ds.manifest, cell.k, cell.seed, config.split_mode);
  probe::ProbeConfig pc = config.probe;
  pc.kind = cell.kind;
  pc.loss = cell.loss;
  pc.init_seed = cell.seed;
  const auto model = probe::train_probe(table, split, pc);
  const Matrix scores = probe::predict_scores(model, table, split.eval);
  std::vector<std::size_t> labels;
  labels.reserve(split.eval.size());
  for (const auto& id : split.eval) labels.push_back(ds.label_of.at(id));
  rec.metrics = metrics::evaluate(scores, labels, ds.manifest.classes);
  return rec;
}

}  // namespace

std::string to_string(SourceKind kind) {
  switch (kind) {
    case SourceKind::table: return "table";
    case SourceKind::reference: return "reference";
    case SourceKind::identity: return "identity";
    case SourceKind::command: return "command";
  }
  return "?";
}

std::string ProviderEntry::table_path(const std::string& dataset_name) const {
  std::string path = location;
  const std::string token = "{dataset}";
  for (auto pos = path.find(token); pos != std::string::npos; pos = path.find(token, pos + dataset_name.size())) {
    path.replace(pos, token.size(), dataset_name);
  }
  return resolve(base_dir, path);
}

void ExperimentConfig::validate() const {
  if (datasets.empty()) throw ValidationError("config: no datasets");
  if (providers.empty()) throw ValidationError("config: no providers");
  if (seeds.empty()) throw ValidationError("config: no seeds");
  if (probes.empty()) throw ValidationError("config: no probes");
  if (losses.empty()) throw ValidationError("config: no losses");
  if (truncate.empty()) throw ValidationError("config: empty truncate list");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw ValidationError("config: duplicate seeds");
  }
  for (auto k : shots) {
    if (k == 0) throw ValidationError("config: shot counts must be >= 1");
  }
  std::set<std::string> names;
  for (const auto& p : providers) {
    p.spec.validate();
    if (!names.insert(p.spec.name).second) throw ValidationError("config: duplicate provider '" + p.spec.name + "'");
  }
  if (workers == 0) throw ValidationError("config: workers must be >= 1");
  probe.validate();
}

ExperimentConfig parse_config(const std::string& text, const std::string& base_dir) {
  ExperimentConfig config;
  config.outputs = resolve(base_dir, config.outputs);
  std::vector<ProviderDraft> drafts;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    // A '#' after whitespace starts a trailing comment.
    std::string text_line = raw;
    for (std::size_t i = 1; i < text_line.size(); ++i) {
      if (text_line[i] == '#' && (text_line[i - 1] == ' ' || text_line[i - 1] == '\t')) {
        text_line.resize(i);
        break;
      }
    }
    const std::string line = trim(text_line);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    const std::string where = "config line " + std::to_string(line_no);
    if (line.front() == '[') {
      if (line.back() != ']') throw ValidationError(where + ": unterminated section header");
      const std::string inner = trim(line.substr(1, line.size() - 2));
      if (inner.rfind("provider ", 0) != 0) throw ValidationError(where + ": unknown section '" + inner + "'");
      ProviderDraft d;
      d.name = trim(inner.substr(9));
      d.line = line_no;
      if (d.name.empty()) throw ValidationError(where + ": provider section needs a name");
      drafts.push_back(std::move(d));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError(where + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!drafts.empty()) {
      drafts.back().keys[key] = {value, line_no};
      continue;
    }

    if (key == "outputs") {
      config.outputs = resolve(base_dir, value);
    } else if (key == "datasets") {
      config.datasets.clear();
      for (const auto& p : split_list(value)) config.datasets.push_back(resolve(base_dir, p));
    } else if (key == "shots") {
      config.shots.clear();
      if (value != "auto") {
        for (const auto& s : split_list(value)) config.shots.push_back(parse_number<std::size_t>(s, where));
        if (config.shots.empty()) throw ValidationError(where + ": empty shot list");
      }
    } else if (key == "seeds") {
      config.seeds.clear();
      for (const auto& s : split_list(value)) config.seeds.push_back(parse_number<std::uint64_t>(s, where));
    } else if (key == "probes") {
      config.probes.clear();
      for (const auto& s : split_list(value)) config.probes.push_back(probe::parse_probe_kind(s));
    } else if (key == "losses") {
      config.losses.clear();
      for (const auto& s : split_list(value)) config.losses.push_back(probe::parse_loss(s));
    } else if (key == "truncate") {
      config.truncate.clear();
      for (const auto& s : split_list(value)) config.truncate.push_back(s == "full" ? 0 : parse_number<std::size_t>(s, where));
    } else if (key == "workers") {
      config.workers = parse_number<std::size_t>(value, where);
    } else if (key == "split_mode") {
      if (value == "per_example") config.split_mode = dataset::SplitMode::per_example;
      else if (value == "by_recording") config.split_mode = dataset::SplitMode::by_recording;
      else throw ValidationError(where + ": split_mode must be per_example or by_recording");
    } else if (key == "min_trailing_fraction") {
      config.frame_options.min_trailing_fraction = parse_number<double>(value, where);
    } else if (key == "learning_rate") {
      config.probe.optimizer.learning_rate = parse_number<double>(value, where);
    } else if (key == "max_epochs") {
      config.probe.max_epochs = parse_number<std::size_t>(value, where);
    } else if (key == "patience") {
      config.probe.patience = parse_number<std::size_t>(value, where);
    } else if (key == "tolerance") {
      config.probe.tolerance = parse_number<double>(value, where);
    } else if (key == "early_stopping") {
      config.probe.early_stopping = parse_bool(value, where);
    } else if (key == "weight_decay") {
      config.probe.weight_decay = parse_number<double>(value, where);
    } else if (key == "hidden_multiplier") {
      config.probe.hidden_multiplier = parse_number<double>(value, where);
    } else {
      throw ValidationError(where + ": unknown key '" + key + "'");
    }
  }
  for (const auto& d : drafts) config.providers.push_back(finish_provider(d, base_dir));
  config.validate();
  return config;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  const auto dir = fs::path(path).parent_path();
  return parse_config(buf.str(), dir.empty() ? "." : dir.string());
}

std::vector<std::size_t> auto_shots(const dataset::DatasetManifest& manifest) {
  std::vector<std::size_t> shots = {4, 8, 16, 32};
  const auto sizes = manifest.class_sizes();
  if (!sizes.empty() && *std::min_element(sizes.begin(), sizes.end()) > 256) {
    shots.insert(shots.end(), {64, 128, 256});
  }
  return shots;
}

std::size_t effective_workers(const ExperimentConfig& config) {
  if (const char* env = std::getenv("PROBEBENCH_WORKERS"); env && *env) {
    const auto n = parse_number<std::size_t>(trim(env), "PROBEBENCH_WORKERS");
    if (n == 0) throw ValidationError("PROBEBENCH_WORKERS must be >= 1");
    return n;
  }
  return config.workers;
}

// ---------------------------------------------------------------------------
// Results log

std::string record_to_json(const RunRecord& r) {
  json j;
  j["config_hash"] = r.config_hash;
  j["status"] = r.status;
  j["provider"] = r.provider;
  j["dataset"] = r.dataset;
  j["k"] = r.k;
  j["seed"] = r.seed;
  j["probe"] = probe::to_string(r.probe);
  j["loss"] = probe::to_string(r.loss);
  j["resample_mode"] = embedding::to_string(r.resample_mode);
  j["dims"] = r.dims;
  if (r.ok()) {
    j["metrics"] = json::parse(metrics::report_to_json(r.metrics));
  } else {
    j["error"] = r.error;
  }
  j["wall_time_s"] = r.wall_time_s;
  return j.dump();
}

RunRecord record_from_json(const std::string& line) {
  try {
    const auto j = nlohmann::json::parse(line);
    RunRecord r;
    r.config_hash = j.at("config_hash").get<std::string>();
    r.status = j.at("status").get<std::string>();
    r.provider = j.at("provider").get<std::string>();
    r.dataset = j.at("dataset").get<std::string>();
    r.k = j.at("k").get<std::size_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.probe = probe::parse_probe_kind(j.at("probe").get<std::string>());
    r.loss = probe::parse_loss(j.at("loss").get<std::string>());
    r.resample_mode = embedding::parse_resample_mode(j.at("resample_mode").get<std::string>());
    r.dims = j.at("dims").get<std::size_t>();
    if (r.status == "ok") {
      r.metrics = metrics::report_from_json(j.at("metrics").dump());
    } else if (r.status == "failed") {
      r.error = j.value("error", std::string());
    } else {
      throw FormatError("results record: unknown status '" + r.status + "'");
    }
    r.wall_time_s = j.value("wall_time_s", 0.0);
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("results record: ") + e.what());
  }
}

std::vector<RunRecord> read_log(const std::string& path, std::vector<std::string>* warnings) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open results log '" + path + "'");
  std::vector<RunRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      records.push_back(record_from_json(line));
    } catch (const ValidationError& e) {
      if (warnings) warnings->push_back(path + " line " + std::to_string(line_no) + " skipped: " + e.what());
    }
  }
  return records;
}

// ---------------------------------------------------------------------------
// Embedding

embedding::EmbeddingTable embed_dataset(const ProviderEntry& provider, const dataset::DatasetManifest& manifest,
                                        const audio::FrameOptions& frame_options, std::size_t workers) {
  auto first = make_embedder(provider);
  const bool parallel = first->reentrant() && workers > 1 && manifest.records.size() > 1;
  std::vector<embedding::EmbeddingVector> vectors(manifest.records.size());

  auto embed_one = [&](embedding::FrameEmbedder& embedder, std::size_t i) {
    const auto& rec = manifest.records[i];
    try {
      const auto clip = audio::read_wav_file(rec.audio_path);
      vectors[i] = embedding::embed_example(embedder, provider.spec, clip, frame_options);
    } catch (...) {
      rethrow_with_context("example '" + rec.example_id + "'");
    }
  };

  if (!parallel) {
    for (std::size_t i = 0; i < vectors.size(); ++i) embed_one(*first, i);
  } else {
    std::atomic<std::size_t> next{0};
    std::mutex error_mutex;
    std::exception_ptr error;
    std::size_t error_index = SIZE_MAX;
    std::vector<std::thread> threads;
    const std::size_t n_threads = std::min(workers, vectors.size());
    for (std::size_t t = 0; t < n_threads; ++t) {
      threads.emplace_back([&] {
        for (std::size_t i = next++; i < vectors.size(); i = next++) {
          try {
            embed_one(*first, i);
          } catch (...) {
            // Report the lowest failing index so the message does not depend on scheduling.
            std::lock_guard lock(error_mutex);
            if (i < error_index) {
              error_index = i;
              error = std::current_exception();
            }
          }
        }
      });
    }
    for (auto& t : threads) t.join();
    if (error) std::rethrow_exception(error);
  }

  embedding::EmbeddingTable table;
  table.provider = provider.spec;
  for (std::size_t i = 0; i < vectors.size(); ++i) table.rows.emplace(manifest.records[i].example_id, std::move(vectors[i]));
  table.validate();
  return table;
}

embedding::EmbeddingTable obtain_table(const ProviderEntry& provider, const dataset::DatasetManifest& manifest,
                                       const ExperimentConfig& config, std::ostream* progress) {
  if (provider.source == SourceKind::table) {
    const std::string path = provider.table_path(manifest.name);
    auto table = embedding::read_table(path);
    if (table.dim() != provider.spec.embedding_dim) {
      throw ValidationError("table '" + path + "' is " + std::to_string(table.dim()) + "-dimensional; provider '" +
                            provider.spec.name + "' declares " + std::to_string(provider.spec.embedding_dim));
    }
    table.provider = provider.spec;
    check_covers(table, manifest, "table '" + path + "'");
    return table;
  }

  std::string manifest_key;
  for (const auto& r : manifest.records) manifest_key += r.example_id + '\t' + r.audio_path + '\t' + r.label + '\n';
  json key = provider_json(provider);
  key["manifest"] = hex64(dataset::fnv1a64(manifest_key));
  key["min_trailing_fraction"] = config.frame_options.min_trailing_fraction;
  const fs::path dir = fs::path(config.outputs) / "embeddings";
  const fs::path path = dir / (safe_file_stem(provider.spec.name) + "__" + safe_file_stem(manifest.name) + "__" +
                               hex64(dataset::fnv1a64(key.dump())) + ".embt");
  if (fs::exists(path)) {
    try {
      auto table = embedding::read_table(path.string());
      if (table.provider == provider.spec) {
        check_covers(table, manifest, "cached table");
        if (progress) *progress << "reusing " << path.string() << "\n";
        return table;
      }
    } catch (const ValidationError& e) {
      if (progress) *progress << "rebuilding cached table " << path.string() << ": " << e.what() << "\n";
    }
  }
  if (progress) *progress << "embedding " << manifest.name << " with " << provider.spec.name << "\n";
  auto table = embed_dataset(provider, manifest, config.frame_options, effective_workers(config));
  fs::create_directories(dir);
  embedding::write_table(table, path.string());
  return table;
}

// ---------------------------------------------------------------------------
// Grid

RunResult run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  config.validate();
  const std::size_t workers = effective_workers(config);

  std::vector<LoadedDataset> datasets;
  for (const auto& path : config.datasets) {
    LoadedDataset ds;
    ds.path = path;
    ds.manifest = dataset::load_manifest(path);
    ds.content_hash = dataset::fnv1a64(read_text(path));
    for (const auto& r : ds.manifest.records) ds.label_of[r.example_id] = ds.manifest.class_index(r.label);
    ds.shots = config.shots.empty() ? auto_shots(ds.manifest) : config.shots;
    datasets.push_back(std::move(ds));
  }
  for (const auto& p : config.providers) {
    if (p.source != SourceKind::table) continue;
    for (const auto& ds : datasets) {
      const auto path = p.table_path(ds.manifest.name);
      if (!fs::exists(path)) {
        throw ValidationError("provider '" + p.spec.name + "': table '" + path + "' does not exist");
      }
    }
  }

  fs::create_directories(config.outputs);
  RunResult result;
  result.log_path = (fs::path(config.outputs) / kLogFileName).string();
  std::map<std::string, RunRecord> completed;
  if (fs::exists(result.log_path)) {
    std::vector<std::string> warnings;
    for (auto& r : read_log(result.log_path, &warnings)) {
      if (r.ok()) completed[r.config_hash] = std::move(r);
    }
    if (options.progress) {
      for (const auto& w : warnings) *options.progress << "warning: " << w << "\n";
    }
  }
  std::ofstream log(result.log_path, std::ios::app | std::ios::binary);
  if (!log) throw Error("cannot open results log '" + result.log_path + "' for appending");

  std::size_t new_cells = 0;
  const auto budget_left = [&] { return !options.max_new_cells || new_cells < *options.max_new_cells; };

  for (const auto& provider : config.providers) {
    for (const auto& ds : datasets) {
      std::vector<Cell> cells;
      for (auto dims : config.truncate) {
        for (auto kind : config.probes) {
          for (auto loss : config.losses) {
            for (auto k : ds.shots) {
              for (auto seed : config.seeds) {
                Cell c{k, seed, kind, loss, dims, {}};
                c.hash = cell_hash(config, provider, ds, c);
                cells.push_back(std::move(c));
              }
            }
          }
        }
      }

      // Cells that still need work, capped by the interruption budget.
      std::vector<std::size_t> pending;
      std::vector<char> is_pending(cells.size(), 0);
      std::vector<std::optional<RunRecord>> slots(cells.size());
      std::size_t reached = cells.size();
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (auto it = completed.find(cells[i].hash); it != completed.end()) {
          slots[i] = it->second;
          continue;
        }
        if (!budget_left()) {
          reached = i;
          break;
        }
        pending.push_back(i);
        is_pending[i] = 1;
        ++new_cells;
      }

      std::optional<embedding::EmbeddingTable> full;
      std::string table_error;
      std::map<std::size_t, embedding::EmbeddingTable> truncated;
      std::map<std::size_t, std::string> truncate_errors;
      if (!pending.empty()) {
        try {
          full = obtain_table(provider, ds.manifest, config, options.progress);
          for (auto i : pending) {
            const auto d = cells[i].truncate;
            if (d == 0 || truncated.count(d) || truncate_errors.count(d)) continue;
            try {
              truncated.emplace(d, embedding::truncate_dims(*full, d));
            } catch (const std::exception& e) {
              truncate_errors[d] = e.what();
            }
          }
        } catch (const std::exception& e) {
          table_error = std::string("embedding failed: ") + e.what();
        }
      }

      std::mutex commit_mutex;
      std::size_t next_commit = 0;
      auto commit_ready = [&] {
        while (next_commit < reached && slots[next_commit]) {
          auto& rec = *slots[next_commit];
          if (is_pending[next_commit]) {
            log << record_to_json(rec) << '\n';
            log.flush();
            ++result.executed;
            if (!rec.ok()) {
              result.failures.push_back(rec.provider + "/" + rec.dataset + " k=" + std::to_string(rec.k) +
                                        " seed=" + std::to_string(rec.seed) + " " + probe::to_string(rec.probe) +
                                        "/" + probe::to_string(rec.loss) + ": " + rec.error);
            }
            if (options.progress) {
              *options.progress << rec.provider << " " << rec.dataset << " k=" << rec.k << " seed=" << rec.seed
                                << " " << probe::to_string(rec.probe) << "/" << probe::to_string(rec.loss)
                                << " dims=" << rec.dims << ": "
                                << (rec.ok() ? "auc=" + fmt("%.4f", rec.metrics.macro_auc) +
                                                   " top1=" + fmt("%.4f", rec.metrics.top1)
                                             : "FAILED " + rec.error)
                                << "\n";
            }
          } else {
            ++result.skipped;
          }
          result.records.push_back(rec);
          ++next_commit;
        }
      };

      auto run_one = [&](std::size_t i) {
        const Cell& cell = cells[i];
        const auto start = std::chrono::steady_clock::now();
        RunRecord rec;
        try {
          if (!full) throw Error(table_error);
          if (auto it = truncate_errors.find(cell.truncate); it != truncate_errors.end()) throw ValidationError(it->second);
          const auto& table = cell.truncate == 0 ? *full : truncated.at(cell.truncate);
          rec = execute_cell(config, provider, ds, table, cell);
        } catch (const std::exception& e) {
          rec = RunRecord{};
          rec.config_hash = cell.hash;
          rec.status = "failed";
          rec.provider = provider.spec.name;
          rec.dataset = ds.manifest.name;
          rec.k = cell.k;
          rec.seed = cell.seed;
          rec.probe = cell.kind;
          rec.loss = cell.loss;
          rec.resample_mode = provider.spec.resample_mode;
          rec.dims = cell.truncate == 0 ? provider.spec.embedding_dim : cell.truncate;
          rec.error = e.what();
        }
        rec.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::lock_guard lock(commit_mutex);
        slots[i] = std::move(rec);
        commit_ready();
      };

      {
        std::lock_guard lock(commit_mutex);
        commit_ready();
      }
      if (workers <= 1 || pending.size() <= 1) {
        for (auto i : pending) run_one(i);
      } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> threads;
        for (std::size_t t = 0; t < std::min(workers, pending.size()); ++t) {
          threads.emplace_back([&] {
            for (std::size_t n = next++; n < pending.size(); n = next++) run_one(pending[n]);
          });
        }
        for (auto& t : threads) t.join();
      }
      if (!budget_left() && reached < cells.size()) return result;
    }
  }
  return result;
}

}  // namespace probebench::runner
