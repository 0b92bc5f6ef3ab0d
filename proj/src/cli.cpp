#include "probebench/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "probebench/dataset.hpp"
#include "probebench/embedding.hpp"
#include "probebench/error.hpp"
#include "probebench/metrics.hpp"
#include "probebench/probe.hpp"
#include "probebench/projection.hpp"
#include "probebench/runner.hpp"

namespace probebench::cli {

namespace fs = std::filesystem;

namespace {

std::string read_text(const std::string& path, const std::string& what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + what + " '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_text(const std::string& path, const std::string& body) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << body;
  if (!out) throw Error("write failed for '" + path + "'");
}

/// Flags every subcommand accepts.
struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "Experiment config file (key = value)");
  app->add_option("--seed", c.seed, "Seed");
  app->add_option("--out", c.out, "Output path");
}

struct EmbedArgs {
  Common common;
  std::string manifest, provider, command, mode;
  std::optional<std::size_t> dim;
  std::optional<std::uint32_t> rate;
  std::optional<double> window;
  std::size_t workers = 1;
  std::string csv;
};

struct SplitArgs {
  Common common;
  std::string manifest;
  std::size_t k = 0;
  bool by_recording = false;
};

struct TrainArgs {
  Common common;
  std::string table, manifest, split, probe = "linear", loss = "bce";
  std::optional<std::size_t> max_epochs;
  std::optional<double> learning_rate;
};

struct EvalArgs {
  Common common;
  std::string table, manifest, split, model;
  std::size_t confusions = 5;
};

struct RunArgs {
  Common common;
  std::optional<std::size_t> workers;
  std::optional<std::size_t> max_cells;
  bool quiet = false;
};

struct ReportArgs {
  Common common;
  std::string log;
  std::optional<std::size_t> k;
};

struct TsneArgs {
  Common common;
  std::string table, manifest, format, title;
  double perplexity = 30.0;
  std::size_t iterations = 1000;
  double learning_rate = 200.0;
  bool no_lr_cap = false;
};

runner::ProviderEntry resolve_provider(const EmbedArgs& a) {
  runner::ProviderEntry entry;
  bool found = false;
  if (!a.common.config.empty()) {
    for (const auto& p : runner::load_config(a.common.config).providers) {
      if (p.spec.name == a.provider) {
        entry = p;
        found = true;
      }
    }
  }
  if (!found) {
    if (!a.command.empty()) {
      entry.source = runner::SourceKind::command;
      entry.location = a.command;
      if (auto preset = embedding::provider_preset(a.provider)) entry.spec = *preset;
      else if (!a.dim) throw ValidationError("embed: provider '" + a.provider + "' is not a preset; pass --dim");
    } else if (a.provider == "reference") {
      entry.source = runner::SourceKind::reference;
      entry.spec = embedding::reference_spec();
    } else if (a.provider == "identity") {
      if (!a.dim) throw ValidationError("embed: the identity provider needs --dim");
      entry.source = runner::SourceKind::identity;
      entry.spec = embedding::identity_spec(*a.dim, a.rate.value_or(16000));
    } else {
      throw ValidationError("embed: unknown provider '" + a.provider +
                            "' (use reference, identity, --command, or a [provider] section of --config)");
    }
    entry.spec.name = a.provider;
  }
  if (entry.source == runner::SourceKind::table) {
    throw ValidationError("embed: provider '" + a.provider + "' reads precomputed tables and cannot embed audio");
  }
  if (a.dim) entry.spec.embedding_dim = *a.dim;
  if (a.rate) entry.spec.native_rate = *a.rate;
  if (a.window) entry.spec.window_seconds = *a.window;
  if (!a.mode.empty()) entry.spec.resample_mode = embedding::parse_resample_mode(a.mode);
  entry.spec.validate();
  return entry;
}

int do_embed(const EmbedArgs& a, std::ostream& out) {
  if (a.common.out.empty()) throw ValidationError("embed: --out is required");
  const auto manifest = dataset::load_manifest(a.manifest);
  const auto provider = resolve_provider(a);
  const auto table = runner::embed_dataset(provider, manifest, {}, a.workers);
  if (const auto parent = fs::path(a.common.out).parent_path(); !parent.empty()) fs::create_directories(parent);
  embedding::write_table(table, a.common.out);
  if (!a.csv.empty()) embedding::export_table_csv(table, a.csv);
  out << "wrote " << table.size() << " x " << table.dim() << " embeddings to " << a.common.out << "\n";
  return 0;
}

int do_split(const SplitArgs& a, std::ostream& out) {
  const auto manifest = dataset::load_manifest(a.manifest);
  const auto split = dataset::kshot_split(manifest, a.k, a.common.seed.value_or(dataset::kDefaultSeeds.front()),
                                          a.by_recording ? dataset::SplitMode::by_recording
                                                         : dataset::SplitMode::per_example);
  const auto text = dataset::split_to_json(split);
  if (a.common.out.empty()) out << text;
  else write_text(a.common.out, text);
  return 0;
}

void check_split_ids(const dataset::SplitSpec& split, const dataset::DatasetManifest& manifest) {
  std::set<std::string> ids;
  for (const auto& r : manifest.records) ids.insert(r.example_id);
  for (const auto& id : split.train_ids()) {
    if (!ids.count(id)) throw ValidationError("split example '" + id + "' is not in manifest '" + manifest.name + "'");
  }
  for (const auto& id : split.eval) {
    if (!ids.count(id)) throw ValidationError("split example '" + id + "' is not in manifest '" + manifest.name + "'");
  }
}

int do_train(const TrainArgs& a, std::ostream& out) {
  if (a.common.out.empty()) throw ValidationError("train: --out is required");
  const auto table = embedding::read_table(a.table);
  const auto manifest = dataset::load_manifest(a.manifest);
  const auto split = dataset::split_from_json(read_text(a.split, "split"));
  check_split_ids(split, manifest);
  probe::ProbeConfig config = a.common.config.empty() ? probe::ProbeConfig{} : runner::load_config(a.common.config).probe;
  config.kind = probe::parse_probe_kind(a.probe);
  config.loss = probe::parse_loss(a.loss);
  config.init_seed = a.common.seed.value_or(split.seed);
  if (a.max_epochs) config.max_epochs = *a.max_epochs;
  if (a.learning_rate) config.optimizer.learning_rate = *a.learning_rate;
  probe::TrainingTrace trace;
  const auto model = probe::train_probe(table, split, config, &trace);
  write_text(a.common.out, probe::model_to_json(model));
  out << "trained " << probe::to_string(model.kind) << "/" << probe::to_string(model.loss) << " probe: " << trace.epochs
      << " epochs, final loss " << trace.final_loss << "\n";
  return 0;
}

int do_eval(const EvalArgs& a, std::ostream& out) {
  const auto table = embedding::read_table(a.table);
  const auto manifest = dataset::load_manifest(a.manifest);
  const auto split = dataset::split_from_json(read_text(a.split, "split"));
  check_split_ids(split, manifest);
  const auto model = probe::model_from_json(read_text(a.model, "model"));
  std::vector<std::size_t> labels;
  for (const auto& id : split.eval) {
    const auto& label = manifest.record(id).label;
    const auto it = std::find(model.class_names.begin(), model.class_names.end(), label);
    if (it == model.class_names.end()) throw ValidationError("class '" + label + "' is unknown to the model");
    labels.push_back(static_cast<std::size_t>(it - model.class_names.begin()));
  }
  const Matrix scores = probe::predict_scores(model, table, split.eval);
  const auto report = metrics::evaluate(scores, labels, model.class_names);
  if (!a.common.out.empty()) write_text(a.common.out, metrics::report_to_json(report) + "\n");
  char line[128];
  std::snprintf(line, sizeof line, "macro_auc %.4f  top1 %.4f  n_eval %zu\n", report.macro_auc, report.top1,
                report.n_eval);
  out << line;
  for (const auto& c : metrics::top_confusions(report.confusion, report.classes, a.confusions)) {
    std::snprintf(line, sizeof line, "%.3f", c.rate);
    out << "  " << c.true_class << " -> " << c.predicted_class << "  " << line << "\n";
  }
  return 0;
}

int do_run(const RunArgs& a, std::ostream& out, std::ostream& err) {
  if (a.common.config.empty()) throw ValidationError("run: --config is required");
  auto config = runner::load_config(a.common.config);
  if (!a.common.out.empty()) config.outputs = a.common.out;
  if (a.common.seed) config.seeds = {*a.common.seed};
  if (a.workers) config.workers = *a.workers;
  runner::RunOptions options;
  options.progress = a.quiet ? nullptr : &err;
  options.max_new_cells = a.max_cells;
  const auto result = runner::run_experiment(config, options);
  out << result.records.size() << " records (" << result.executed << " run, " << result.skipped
      << " already complete) in " << result.log_path << "\n";
  if (!result.failures.empty()) {
    out << result.failures.size() << " failed cells:\n";
    for (const auto& f : result.failures) out << "  " << f << "\n";
  }
  return 0;
}

int do_report(const ReportArgs& a, std::ostream& out, std::ostream& err) {
  std::string log = a.log;
  if (log.empty()) {
    if (a.common.config.empty()) throw ValidationError("report: pass --log or --config");
    log = (fs::path(runner::load_config(a.common.config).outputs) / runner::kLogFileName).string();
  }
  std::vector<std::string> warnings;
  const auto records = runner::read_log(log, &warnings);
  for (const auto& w : warnings) err << "warning: " << w << "\n";
  const auto table = runner::render_results_table(records, a.k);
  for (const auto& w : table.warnings) err << "warning: " << w << "\n";
  const std::string dir = a.common.out.empty() ? fs::path(log).parent_path().string() : a.common.out;
  const std::string out_dir = dir.empty() ? "." : dir;
  fs::create_directories(out_dir);
  write_text((fs::path(out_dir) / "results.txt").string(), table.text);
  write_text((fs::path(out_dir) / "results.csv").string(), table.csv);
  std::set<std::size_t> ks;
  for (const auto& r : records) {
    if (r.ok()) ks.insert(r.k);
  }
  out << table.text;
  if (ks.size() >= 2 && !a.k) {
    for (const auto& path : runner::render_shots_curve(records, out_dir)) out << "wrote " << path << "\n";
  }
  return 0;
}

int do_tsne(const TsneArgs& a, std::ostream& out) {
  if (a.common.out.empty()) throw ValidationError("tsne: --out is required");
  const auto table = embedding::read_table(a.table);
  const auto manifest = dataset::load_manifest(a.manifest);
  std::map<std::string, std::string> labels;
  for (const auto& r : manifest.records) {
    if (table.rows.count(r.example_id)) labels[r.example_id] = r.label;
  }
  projection::TsneConfig config;
  config.perplexity = a.perplexity;
  config.iterations = a.iterations;
  config.learning_rate = a.learning_rate;
  config.cap_learning_rate = !a.no_lr_cap;
  config.seed = a.common.seed.value_or(0);
  std::string format = a.format;
  if (format.empty()) format = fs::path(a.common.out).extension() == ".csv" ? "csv" : "svg";
  if (format != "csv" && format != "svg") throw ValidationError("tsne: --format must be csv or svg");
  const auto points = projection::tsne(table, labels, config);
  if (const auto parent = fs::path(a.common.out).parent_path(); !parent.empty()) fs::create_directories(parent);
  const std::string title = a.title.empty() ? table.provider.name + " / " + manifest.name : a.title;
  projection::emit_scatter(points, a.common.out,
                           format == "csv" ? projection::ScatterFormat::csv : projection::ScatterFormat::svg, title);
  out << "wrote " << points.size() << " points to " << a.common.out << "\n";
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Few-shot probe evaluation of audio embeddings", "probebench"};
  app.require_subcommand(1);

  EmbedArgs embed;
  auto* embed_cmd = app.add_subcommand("embed", "Embed every example of a manifest into a table file");
  add_common(embed_cmd, embed.common);
  embed_cmd->add_option("--manifest", embed.manifest, "Dataset manifest CSV")->required();
  embed_cmd->add_option("--provider", embed.provider, "Provider name (config section, preset, reference, identity)")
      ->required();
  embed_cmd->add_option("--command", embed.command, "External embedder command");
  embed_cmd->add_option("--dim", embed.dim, "Embedding width");
  embed_cmd->add_option("--rate", embed.rate, "Native sample rate (Hz)");
  embed_cmd->add_option("--window", embed.window, "Window length (s)");
  embed_cmd->add_option("--mode", embed.mode, "resample or reinterpret");
  embed_cmd->add_option("--workers", embed.workers, "Parallel workers for in-process providers");
  embed_cmd->add_option("--csv", embed.csv, "Also export the table as CSV");

  SplitArgs split;
  auto* split_cmd = app.add_subcommand("split", "Write a seeded k-shot split as JSON");
  add_common(split_cmd, split.common);
  split_cmd->add_option("--manifest", split.manifest, "Dataset manifest CSV")->required();
  split_cmd->add_option("-k,--k", split.k, "Training examples per class")->required();
  split_cmd->add_flag("--by-recording", split.by_recording, "Keep source recordings on one side");

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train a probe on a split");
  add_common(train_cmd, train.common);
  train_cmd->add_option("--table", train.table, "Embedding table")->required();
  train_cmd->add_option("--manifest", train.manifest, "Dataset manifest CSV")->required();
  train_cmd->add_option("--split", train.split, "Split JSON")->required();
  train_cmd->add_option("--probe", train.probe, "linear or two_layer");
  train_cmd->add_option("--loss", train.loss, "bce or cce");
  train_cmd->add_option("--max-epochs", train.max_epochs, "Epoch budget");
  train_cmd->add_option("--learning-rate", train.learning_rate, "Adam learning rate");

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Score a trained probe on a split's eval examples");
  add_common(eval_cmd, eval.common);
  eval_cmd->add_option("--table", eval.table, "Embedding table")->required();
  eval_cmd->add_option("--manifest", eval.manifest, "Dataset manifest CSV")->required();
  eval_cmd->add_option("--split", eval.split, "Split JSON")->required();
  eval_cmd->add_option("--model", eval.model, "Model JSON")->required();
  eval_cmd->add_option("--confusions", eval.confusions, "Top confusions to list");

  RunArgs run_args;
  auto* run_cmd = app.add_subcommand("run", "Run the full experiment grid");
  add_common(run_cmd, run_args.common);
  run_cmd->add_option("--workers", run_args.workers, "Parallel grid cells (PROBEBENCH_WORKERS overrides)");
  run_cmd->add_option("--max-cells", run_args.max_cells, "Stop after this many new cells");
  run_cmd->add_flag("-q,--quiet", run_args.quiet, "No per-cell progress");

  ReportArgs report;
  auto* report_cmd = app.add_subcommand("report", "Render results tables and shot curves from a results log");
  add_common(report_cmd, report.common);
  report_cmd->add_option("--log", report.log, "Results log (default: outputs of --config)");
  report_cmd->add_option("-k,--k", report.k, "Only this shot count");

  TsneArgs tsne;
  auto* tsne_cmd = app.add_subcommand("tsne", "Project a table with t-SNE and write a scatter plot");
  add_common(tsne_cmd, tsne.common);
  tsne_cmd->add_option("--table", tsne.table, "Embedding table")->required();
  tsne_cmd->add_option("--manifest", tsne.manifest, "Dataset manifest CSV")->required();
  tsne_cmd->add_option("--format", tsne.format, "csv or svg (default from --out extension)");
  tsne_cmd->add_option("--perplexity", tsne.perplexity, "Perplexity");
  tsne_cmd->add_option("--iterations", tsne.iterations, "Iterations");
  tsne_cmd->add_option("--title", tsne.title, "Plot title");
  tsne_cmd->add_option("--learning-rate", tsne.learning_rate, "Gradient step");
  tsne_cmd->add_flag("--no-lr-cap", tsne.no_lr_cap, "Use --learning-rate even for small inputs");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return 1;
  }

  try {
    if (*embed_cmd) return do_embed(embed, out);
    if (*split_cmd) return do_split(split, out);
    if (*train_cmd) return do_train(train, out);
    if (*eval_cmd) return do_eval(eval, out);
    if (*run_cmd) return do_run(run_args, out, err);
    if (*report_cmd) return do_report(report, out, err);
    if (*tsne_cmd) return do_tsne(tsne, out);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace probebench::cli
