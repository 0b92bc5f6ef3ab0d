// Acceptance criteria runner. Prints one PASS/FAIL line per criterion and
// exits non-zero when any gated criterion fails.

#include <fftw3.h>
#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "probebench/audio.hpp"
#include "probebench/dataset.hpp"
#include "probebench/embedding.hpp"
#include "probebench/error.hpp"
#include "probebench/metrics.hpp"
#include "probebench/probe.hpp"
#include "probebench/projection.hpp"
#include "probebench/runner.hpp"
#include "test_support.hpp"

using namespace probebench;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* pattern, double v) {
  char buf[96];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

// ---------------------------------------------------------------------------

double pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j]) continue;
      pairs += 1;
      wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  }
  return wins / pairs;
}

Outcome auc_oracle() {
  std::mt19937_64 rng(2024);
  double worst = 0;
  for (int instance = 0; instance < 200; ++instance) {
    const std::size_t n = 2 + rng() % 49;
    const bool ties = instance % 2;
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = ties ? static_cast<double>(rng() % 5) : std::uniform_real_distribution<double>(-3, 3)(rng);
      y[i] = static_cast<int>(rng() % 2);
    }
    y[0] = 1;
    y[1] = 0;
    worst = std::max(worst, std::abs(metrics::roc_auc_binary(s, y) - pairwise_auc(s, y)));
  }
  return {worst <= 1e-12, fmt("max |rank - pairwise| = %.3g over 200 instances", worst)};
}

// ---------------------------------------------------------------------------

Outcome gradient_check() {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> normal;
  double worst = 0;
  std::size_t coords = 0;
  for (auto kind : {probe::ProbeKind::linear, probe::ProbeKind::two_layer}) {
    for (auto loss : {probe::Loss::bce, probe::Loss::cce}) {
      for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 4 + rng() % 8, dim = 2 + rng() % 6, classes = 2 + rng() % 3;
        Matrix x(n, dim);
        for (auto& v : x.data()) v = normal(rng);
        Matrix t(n, classes);
        for (std::size_t r = 0; r < n; ++r) {
          if (loss == probe::Loss::cce) {
            t(r, rng() % classes) = 1;
          } else {
            for (std::size_t c = 0; c < classes; ++c) t(r, c) = static_cast<double>(rng() % 2);
          }
        }
        std::vector<std::string> names;
        for (std::size_t c = 0; c < classes; ++c) names.push_back("c" + std::to_string(c));
        auto model = kind == probe::ProbeKind::linear ? probe::make_linear(dim, names, loss)
                                                      : probe::make_two_layer(x, 3 + rng() % 5, names, rng(), loss);
        for (auto block : model.parameter_blocks()) {
          for (auto& v : block) v += 0.5 * normal(rng);
        }
        probe::ProbeConfig cfg;
        cfg.kind = kind;
        cfg.loss = loss;
        const probe::Batch batch{x, t};
        const auto analytic = probe::gradient(model, batch, cfg);
        auto blocks = model.parameter_blocks();
        for (std::size_t b = 0; b < blocks.size(); ++b) {
          for (std::size_t i = 0; i < blocks[b].size(); ++i) {
            const double saved = blocks[b][i], h = 1e-4;
            blocks[b][i] = saved + h;
            const double up = probe::objective(model, batch, cfg);
            blocks[b][i] = saved - h;
            const double down = probe::objective(model, batch, cfg);
            blocks[b][i] = saved;
            const double numeric = (up - down) / (2 * h);
            const double scale = std::max({std::abs(numeric), std::abs(analytic[b][i]), 1e-6});
            worst = std::max(worst, std::abs(numeric - analytic[b][i]) / scale);
            ++coords;
          }
        }
      }
    }
  }
  return {worst < 1e-5, fmt("max relative error %.3g", worst) + " over " + std::to_string(coords) + " coordinates"};
}

// ---------------------------------------------------------------------------

std::string shell_quote(const std::string& s) {
  std::string q = "'";
  for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

Outcome split_determinism() {
  fixtures::TempDir dir;
  std::mt19937_64 rng(99);
  bool nested = true;
  for (int m = 0; m < 50; ++m) {
    std::vector<dataset::ExampleRecord> recs;
    const std::size_t classes = 2 + rng() % 5;
    for (std::size_t c = 0; c < classes; ++c) {
      const std::size_t size = 33 + rng() % 40;
      for (std::size_t i = 0; i < size; ++i) {
        recs.push_back({"id" + std::to_string(rng() % 1000000) + "_" + std::to_string(c) + "_" + std::to_string(i), "a.wav",
                        "label" + std::to_string(c), {}});
      }
    }
    const auto manifest = dataset::make_manifest("m" + std::to_string(m), recs);
    const std::uint64_t seed = rng();
    const auto s8 = dataset::kshot_split(manifest, 8, seed);
    const auto s16 = dataset::kshot_split(manifest, 16, seed);
    const auto s32 = dataset::kshot_split(manifest, 32, seed);
    for (const auto& cls : manifest.classes) {
      const std::set<std::string> a(s8.train.at(cls).begin(), s8.train.at(cls).end());
      const std::set<std::string> b(s16.train.at(cls).begin(), s16.train.at(cls).end());
      const std::set<std::string> c(s32.train.at(cls).begin(), s32.train.at(cls).end());
      nested &= std::includes(b.begin(), b.end(), a.begin(), a.end()) && std::includes(c.begin(), c.end(), b.begin(), b.end());
    }

    if (m < 3) {
      std::string csv = "example_id,audio_path,label\n";
      for (const auto& r : recs) csv += r.example_id + "," + r.audio_path + "," + r.label + "\n";
      fixtures::spit(dir.file("m.csv"), csv);
      for (int run = 0; run < 2; ++run) {
        const std::string cmd = shell_quote(PROBEBENCH_CLI_PATH) + " split --manifest " + shell_quote(dir.file("m.csv")) +
                                " -k 16 --seed " + std::to_string(seed) + " --out " +
                                shell_quote(dir.file("split" + std::to_string(run) + ".json")) + " >/dev/null 2>&1";
        if (std::system(cmd.c_str()) != 0) return {false, "CLI split failed"};
      }
      const auto first = fixtures::slurp(dir.file("split0.json"));
      if (first.empty() || first != fixtures::slurp(dir.file("split1.json"))) return {false, "process outputs differ"};
      if (first != dataset::split_to_json(s16)) return {false, "process output differs from in-process split"};
    }
  }
  return {nested, nested ? "two processes byte-identical; nesting holds on 50 manifests" : "nesting violated"};
}

// ---------------------------------------------------------------------------

Outcome synthetic_curve() {
  fixtures::TempDir dir;
  const auto clusters = fixtures::gaussian_clusters(5, 60, 16, 4.0, 1.0, 5);
  fixtures::write_vector_dataset(dir.path(), "gauss", clusters.points, clusters.labels);
  const auto config = runner::parse_config(
      "outputs = out\ndatasets = gauss.csv\nshots = 4, 8, 16, 32\nseeds = 101, 102, 103, 104, 105\n"
      "[provider identity]\nsource = identity\ndim = 16\n",
      dir.path().string());
  const auto result = runner::run_experiment(config);
  if (!result.failures.empty()) return {false, "grid cell failed: " + result.failures.front()};
  std::map<std::size_t, std::vector<double>> by_k;
  for (const auto& r : result.records) by_k[r.k].push_back(r.metrics.macro_auc);
  std::vector<double> means;
  std::string detail = "mean macro-AUC";
  for (const auto& [k, v] : by_k) {
    double sum = 0;
    for (double a : v) sum += a;
    means.push_back(sum / static_cast<double>(v.size()));
    detail += " k=" + std::to_string(k) + ":" + fmt("%.4f", means.back());
  }
  bool ok = means.size() == 4 && means.front() >= 0.85 && means.back() >= 0.99;
  for (std::size_t i = 1; i < means.size(); ++i) ok &= means[i] >= means[i - 1];
  // Best AUC any linear one-vs-rest scorer can reach on equidistant classes:
  // Phi(separation / 2 * sqrt(C / (C - 1))).
  const double ceiling = 0.5 * std::erfc(-(4.0 / 2.0) * std::sqrt(5.0 / 4.0) / std::sqrt(2.0));
  detail += fmt("; linear ceiling %.4f", ceiling);
  return {ok, detail};
}

// ---------------------------------------------------------------------------

Outcome pooling_identity() {
  constexpr std::uint32_t rate = 16000;
  const auto spec = embedding::reference_spec(rate, 0.25);
  const std::size_t window = spec.window_samples();
  const audio::FrameOptions options;
  embedding::ReferenceEmbedder provider;
  std::mt19937_64 rng(17);
  std::normal_distribution<float> normal(0.0f, 0.3f);
  std::size_t checked = 0;
  for (int i = 0; i < 100; ++i) {
    std::size_t len;
    switch (i % 3) {
      case 0: len = 200 + rng() % (window - 200); break;
      case 1: len = window * (1 + rng() % 3); break;
      default: len = window * (1 + rng() % 3) + window / 2 + rng() % (window / 2); break;
    }
    audio::AudioClip clip;
    clip.sample_rate = rate;
    clip.samples.resize(len);
    for (auto& s : clip.samples) s = normal(rng);

    // Frames cut by hand: centred pad for short clips, then whole windows,
    // then a right-padded tail if enough of it is real audio.
    std::vector<std::vector<float>> frames;
    if (len < window) {
      std::vector<float> f(window, 0.0f);
      std::copy(clip.samples.begin(), clip.samples.end(), f.begin() + static_cast<std::ptrdiff_t>((window - len) / 2));
      frames.push_back(f);
    } else {
      std::size_t start = 0;
      for (; start + window <= len; start += window) {
        frames.emplace_back(clip.samples.begin() + static_cast<std::ptrdiff_t>(start),
                            clip.samples.begin() + static_cast<std::ptrdiff_t>(start + window));
      }
      const std::size_t tail = len - start;
      if (tail > 0 && static_cast<double>(tail) >= options.min_trailing_fraction * static_cast<double>(window)) {
        std::vector<float> f(window, 0.0f);
        std::copy(clip.samples.begin() + static_cast<std::ptrdiff_t>(start), clip.samples.end(), f.begin());
        frames.push_back(f);
      }
    }
    std::vector<double> acc(embedding::kReferenceDim, 0.0);
    for (const auto& f : frames) {
      const auto v = embedding::reference_embed(f, rate);
      for (std::size_t d = 0; d < v.size(); ++d) acc[d] += v[d];
    }
    embedding::EmbeddingVector expected(acc.size());
    for (std::size_t d = 0; d < acc.size(); ++d) expected[d] = static_cast<float>(acc[d] / static_cast<double>(frames.size()));

    const auto got = embedding::embed_example(provider, spec, clip, options);
    if (std::memcmp(got.data(), expected.data(), expected.size() * sizeof(float)) != 0 || got.size() != expected.size()) {
      return {false, "clip " + std::to_string(i) + " (" + std::to_string(len) + " samples) differs from frame mean"};
    }
    ++checked;
  }
  return {true, std::to_string(checked) + " clips bit-identical to the mean of per-frame embeddings"};
}

// ---------------------------------------------------------------------------

std::vector<double> magnitude_spectrum(const std::vector<float>& x) {
  const int n = static_cast<int>(x.size());
  std::vector<double> in(x.begin(), x.end());
  std::vector<fftw_complex> out(n / 2 + 1);
  fftw_plan plan = fftw_plan_dft_r2c_1d(n, in.data(), out.data(), FFTW_ESTIMATE);
  fftw_execute(plan);
  fftw_destroy_plan(plan);
  std::vector<double> mag(out.size());
  for (std::size_t k = 0; k < mag.size(); ++k) mag[k] = std::hypot(out[k][0], out[k][1]);
  return mag;
}

double fitted_amplitude(const std::vector<float>& x, double freq, double rate, std::size_t from, std::size_t to) {
  double ss = 0, sc = 0, cc = 0, ys = 0, yc = 0;
  for (std::size_t i = from; i < to; ++i) {
    const double s = std::sin(2 * M_PI * freq * i / rate), c = std::cos(2 * M_PI * freq * i / rate);
    ss += s * s, sc += s * c, cc += c * c, ys += x[i] * s, yc += x[i] * c;
  }
  const double det = ss * cc - sc * sc;
  return std::hypot((ys * cc - yc * sc) / det, (yc * ss - ys * sc) / det);
}

Outcome resampler_fidelity() {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> freq_dist(50.0, 7000.0);
  double worst_amp = 0, worst_bins = 0;
  bool reinterpret_ok = true;
  for (int i = 0; i < 20; ++i) {
    const double freq = freq_dist(rng);
    audio::AudioClip tone;
    tone.sample_rate = 44100;
    for (std::size_t n = 0; n < 44100; ++n) tone.samples.push_back(static_cast<float>(0.5 * std::sin(2 * M_PI * freq * n / 44100.0)));
    const auto out = audio::resample(tone, 16000);
    const auto mag = magnitude_spectrum(out.samples);
    const double bin_hz = 16000.0 / static_cast<double>(out.samples.size());
    const auto peak = static_cast<double>(std::max_element(mag.begin() + 1, mag.end()) - mag.begin());
    worst_bins = std::max(worst_bins, std::abs(peak * bin_hz - freq) / bin_hz);
    const double amp = fitted_amplitude(out.samples, freq, 16000, 200, out.samples.size() - 200);
    worst_amp = std::max(worst_amp, std::abs(amp / 0.5 - 1.0));

    const auto re = audio::reinterpret_rate(tone, 16000);
    reinterpret_ok &= re.sample_rate == 16000 && re.samples.size() == tone.samples.size() &&
                      std::memcmp(re.samples.data(), tone.samples.data(), tone.samples.size() * sizeof(float)) == 0;
  }
  return {worst_bins <= 1.0 && worst_amp <= 0.01 && reinterpret_ok,
          fmt("peak offset %.2f bins, ", worst_bins) + fmt("amplitude error %.4f%%", 100 * worst_amp) +
              (reinterpret_ok ? ", reinterpret byte-identical" : ", reinterpret changed samples")};
}

// ---------------------------------------------------------------------------

Outcome table_round_trip() {
  fixtures::TempDir dir;
  embedding::EmbeddingTable table;
  table.provider = {"perch-like", 32000, 5.0, 1280, embedding::ResampleMode::resample};
  std::mt19937 rng(11);
  std::normal_distribution<float> normal;
  for (int r = 0; r < 10000; ++r) {
    embedding::EmbeddingVector v(1280);
    for (auto& x : v) x = normal(rng);
    table.rows["row" + std::to_string(r)] = std::move(v);
  }
  const auto path = dir.file("big.embt");
  const auto start = std::chrono::steady_clock::now();
  embedding::write_table(table, path);
  const auto back = embedding::read_table(path);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!(back == table)) return {false, "read-back table differs"};

  auto bytes = fixtures::slurp(path);
  int rejected = 0, tries = 0;
  for (std::size_t pos : {std::size_t{5}, std::size_t{30}, bytes.size() / 2, bytes.size() - 9, bytes.size() - 1}) {
    auto corrupt = bytes;
    corrupt[pos] = static_cast<char>(corrupt[pos] ^ 0x40);
    fixtures::spit(dir.file("bad.embt"), corrupt);
    ++tries;
    try {
      embedding::read_table(dir.file("bad.embt"));
    } catch (const FormatError&) {
      ++rejected;
    }
  }
  return {seconds < 5.0 && rejected == tries,
          fmt("write+read %.2f s, ", seconds) + std::to_string(rejected) + "/" + std::to_string(tries) +
              " corrupted files rejected"};
}

// ---------------------------------------------------------------------------

Outcome tsne_separation() {
  std::string detail;
  bool ok = true;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    std::mt19937_64 rng(seed * 1000);
    std::normal_distribution<double> normal;
    Matrix x(20, 8);
    for (std::size_t r = 0; r < 20; ++r) {
      for (std::size_t c = 0; c < 8; ++c) x(r, c) = normal(rng) + (r >= 10 && c == 0 ? 20.0 : 0.0);
    }
    projection::TsneConfig cfg;
    cfg.perplexity = 5;
    cfg.seed = seed;
    projection::TsneTrace trace;
    const auto y = projection::tsne_layout(x, cfg, &trace);
    double intra = 0, inter = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < 20; ++a) {
      for (std::size_t b = a + 1; b < 20; ++b) {
        const double d = std::hypot(y(a, 0) - y(b, 0), y(a, 1) - y(b, 1));
        if ((a < 10) == (b < 10)) intra = std::max(intra, d);
        else inter = std::min(inter, d);
      }
    }
    const bool seed_ok = intra < inter && trace.kl.size() == 1000 && trace.kl[999] < trace.kl[249];
    ok &= seed_ok;
    detail += (detail.empty() ? "" : "; ") + std::string("seed ") + std::to_string(seed) + fmt(" intra/inter %.2f", intra / inter);
  }
  return {ok, detail};
}

// ---------------------------------------------------------------------------

Outcome bce_independence() {
  const auto data = fixtures::gaussian_clusters(3, 20, 6, 3.0, 1.0, 21);
  Matrix targets(data.points.rows(), 3);
  for (std::size_t r = 0; r < data.labels.size(); ++r) targets(r, data.labels[r]) = 1;
  probe::ProbeConfig cfg;
  cfg.early_stopping = false;
  cfg.max_epochs = 512;
  const auto joint = probe::fit(data.points, targets, {"a", "b", "c"}, cfg);
  probe::ProbeConfig single = cfg;
  single.loss_scale = 1.0 / 3.0;
  double worst = 0;
  for (std::size_t c = 0; c < 3; ++c) {
    Matrix column(targets.rows(), 1);
    for (std::size_t r = 0; r < targets.rows(); ++r) column(r, 0) = targets(r, c);
    const auto alone = probe::fit(data.points, column, {"one"}, single);
    for (std::size_t i = 0; i < 6; ++i) worst = std::max(worst, std::abs(alone.weights(i, 0) - joint.weights(i, c)));
    worst = std::max(worst, std::abs(alone.bias[0] - joint.bias[c]));
  }
  return {worst <= 1e-6, fmt("max coordinate difference %.3g", worst)};
}

}  // namespace

int main(int argc, char** argv) {
  // --expect-fail 4,7 declares criteria known to fail. The exit status is 0 only
  // when the failing set is exactly that set, so an unexpected pass also fails.
  std::set<int> expected;
  for (int i = 1; i < argc; ++i) {
    if (std::string(argv[i]) == "--expect-fail" && i + 1 < argc) {
      std::stringstream list(argv[++i]);
      for (std::string item; std::getline(list, item, ',');) expected.insert(std::stoi(item));
    } else {
      std::fprintf(stderr, "Usage: acceptance [--expect-fail ID[,ID...]]\n");
      return 2;
    }
  }
  std::set<int> failed;
  struct Criterion {
    int id;
    const char* name;
    double budget_s;  // 0: no runtime bound
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "AUC oracle equivalence", 1.0, auc_oracle},
      {2, "gradient correctness", 30.0, gradient_check},
      {3, "split determinism and nesting", 5.0, split_determinism},
      {4, "synthetic few-shot curve", 60.0, synthetic_curve},
      {5, "pooling identity", 0.0, pooling_identity},
      {6, "resampler fidelity", 0.0, resampler_fidelity},
      {7, "embedding table round-trip", 5.0, table_round_trip},
      {8, "t-SNE cluster separation", 30.0, tsne_separation},
      {9, "BCE independence", 0.0, bce_independence},
  };
  for (const auto& c : criteria) {
    Outcome o;
    const auto start = std::chrono::steady_clock::now();
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (c.budget_s > 0 && seconds >= c.budget_s) {
      o.pass = false;
      o.detail += fmt(" (over the %.0f s budget)", c.budget_s);
    }
    if (!o.pass) failed.insert(c.id);
    std::printf("%s  %2d  %-32s %7.2f s  %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, seconds, o.detail.c_str());
  }

  const char* table_pattern = std::getenv("PROBEBENCH_REPRO_TABLE");
  const char* manifest = std::getenv("PROBEBENCH_REPRO_MANIFEST");
  if (table_pattern && manifest) {
    // Perch on Godwit at k=32: top-1 0.92, AUC 0.99, within 0.03.
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      fixtures::TempDir dir;
      auto cfg = runner::parse_config(std::string("datasets = ") + manifest +
                                          "\nshots = 32\n[provider perch]\npreset = perch\nsource = table:" + table_pattern + "\n",
                                      ".");
      cfg.outputs = dir.path().string();
      const auto table = runner::render_results_table(runner::run_experiment(cfg).records, 32);
      if (table.rows.empty()) throw Error("no results");
      const auto& row = table.rows.front();
      o.pass = std::abs(row.top1 - 0.92) <= 0.03 && std::abs(row.auc - 0.99) <= 0.03;
      o.detail = fmt("top1 %.4f (target 0.92), ", row.top1) + fmt("auc %.4f (target 0.99)", row.auc);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!o.pass) failed.insert(10);
    std::printf("%s  10  %-32s %7.2f s  %s\n", o.pass ? "PASS" : "FAIL", "reproduction harness", seconds, o.detail.c_str());
  } else {
    std::printf("SKIP  10  %-32s %7.2f s  %s\n", "reproduction harness", 0.0,
                "set PROBEBENCH_REPRO_TABLE and PROBEBENCH_REPRO_MANIFEST to compare against Perch/Godwit");
  }
  std::string summary;
  for (int id : failed) summary += (summary.empty() ? "" : ",") + std::to_string(id);
  std::printf("failed: %s\n", summary.empty() ? "none" : summary.c_str());
  if (failed == expected) return 0;
  std::string want;
  for (int id : expected) want += (want.empty() ? "" : ",") + std::to_string(id);
  std::printf("expected failures: %s\n", want.empty() ? "none" : want.c_str());
  return 1;
}
