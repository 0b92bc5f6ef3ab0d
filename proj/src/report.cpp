#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <tuple>
#include <iterator>

#include "probebench/csv.hpp"
#include "probebench/error.hpp"
#include "probebench/projection.hpp"
#include "probebench/runner.hpp"

namespace probebench::runner {

namespace fs = std::filesystem;

namespace {

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

/// Last successful record per config hash, in first-appearance order.
std::vector<RunRecord> latest_ok(const std::vector<RunRecord>& records) {
  std::map<std::string, std::size_t> index;
  std::vector<RunRecord> out;
  for (const auto& r : records) {
    if (!r.ok()) continue;
    auto [it, inserted] = index.emplace(r.config_hash, out.size());
    if (inserted) out.push_back(r);
    else out[it->second] = r;
  }
  return out;
}

/// Comparison group: dataset order, k, probe, loss. Competitors within a
/// group are (provider, dims) pairs, so truncated tables compete too.
using GroupKey = std::tuple<std::size_t, std::size_t, int, int>;

std::string competitor(const RunRecord& r) { return r.provider + '\x1f' + std::to_string(r.dims); }

std::string marker_name(Marker m) {
  switch (m) {
    case Marker::bold: return "bold";
    case Marker::italic: return "italic";
    case Marker::none: break;
  }
  return "";
}

std::string decorate(double v, Marker m) {
  const std::string s = fmt("%.4f", v);
  if (m == Marker::bold) return "**" + s + "**";
  if (m == Marker::italic) return "*" + s + "*";
  return s;
}

std::string variant_label(const RunRecord& r) {
  return probe::to_string(r.probe) + "/" + probe::to_string(r.loss) + "/d" + std::to_string(r.dims);
}

void write_file(const std::string& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << body;
  if (!out) throw Error("write failed for '" + path + "'");
}

}  // namespace

ResultsTable render_results_table(const std::vector<RunRecord>& all_records, std::optional<std::size_t> k_filter) {
  std::vector<RunRecord> records;
  for (auto& r : latest_ok(all_records)) {
    if (!k_filter || r.k == *k_filter) records.push_back(std::move(r));
  }
  if (records.empty()) throw ValidationError("no records");

  std::map<std::string, std::size_t> dataset_order, provider_order;
  for (const auto& r : records) {
    dataset_order.emplace(r.dataset, dataset_order.size());
    provider_order.emplace(competitor(r), provider_order.size());
  }

  // group -> provider order -> seed -> record
  std::map<GroupKey, std::map<std::size_t, std::map<std::uint64_t, const RunRecord*>>> groups;
  for (const auto& r : records) {
    GroupKey key{dataset_order[r.dataset], r.k, static_cast<int>(r.probe), static_cast<int>(r.loss)};
    groups[key][provider_order[competitor(r)]][r.seed] = &r;
  }

  ResultsTable table;
  for (const auto& [key, by_provider] : groups) {
    // Seeds every provider in the group ran.
    std::set<std::uint64_t> common;
    bool first = true;
    std::set<std::size_t> seed_counts;
    for (const auto& [p, by_seed] : by_provider) {
      std::set<std::uint64_t> s;
      for (const auto& [seed, r] : by_seed) s.insert(seed);
      seed_counts.insert(s.size());
      if (first) {
        common = s;
        first = false;
      } else {
        std::set<std::uint64_t> both;
        std::set_intersection(common.begin(), common.end(), s.begin(), s.end(), std::inserter(both, both.end()));
        common = std::move(both);
      }
    }
    const RunRecord& sample = *by_provider.begin()->second.begin()->second;
    if (seed_counts.size() > 1) {
      table.warnings.push_back("inconsistent seed counts for " + sample.dataset + " k=" + std::to_string(sample.k) +
                               " " + probe::to_string(sample.probe) + "/" + probe::to_string(sample.loss) + "; means use the seeds each provider has");
    }

    auto marker_for = [&](std::size_t provider, auto metric) {
      if (by_provider.size() < 2 || common.empty()) return Marker::none;
      std::size_t wins = 0;
      for (auto seed : common) {
        const double mine = metric(*by_provider.at(provider).at(seed));
        bool best = true;
        for (const auto& [other, by_seed] : by_provider) {
          if (other != provider && !(mine > metric(*by_seed.at(seed)))) best = false;
        }
        wins += best ? 1 : 0;
      }
      if (wins == common.size()) return Marker::bold;
      if (common.size() >= 3 && wins + 1 == common.size()) return Marker::italic;
      return Marker::none;
    };
    const auto top1_of = [](const RunRecord& r) { return r.metrics.top1; };
    const auto auc_of = [](const RunRecord& r) { return r.metrics.macro_auc; };

    for (const auto& [p, by_seed] : by_provider) {
      const RunRecord& r0 = *by_seed.begin()->second;
      ResultRow row;
      row.provider = r0.provider;
      row.dataset = r0.dataset;
      row.k = r0.k;
      row.probe = r0.probe;
      row.loss = r0.loss;
      row.resample_mode = r0.resample_mode;
      row.dims = r0.dims;
      row.seeds = by_seed.size();
      double top1 = 0.0, auc = 0.0;
      for (const auto& [seed, r] : by_seed) {
        top1 += r->metrics.top1;
        auc += r->metrics.macro_auc;
      }
      row.top1 = top1 / static_cast<double>(row.seeds);
      row.auc = auc / static_cast<double>(row.seeds);
      row.top1_marker = marker_for(p, top1_of);
      row.auc_marker = marker_for(p, auc_of);
      table.rows.push_back(std::move(row));
    }
  }

  const std::vector<std::string> header = {"model", "dataset", "k", "probe", "loss", "rs", "dims", "seeds", "top1", "auc"};
  std::vector<std::vector<std::string>> cells;
  cells.push_back(header);
  table.csv = "model,dataset,k,probe,loss,resample_mode,dims,seeds,top1,auc,top1_marker,auc_marker\n";
  for (const auto& row : table.rows) {
    const std::string rs = row.resample_mode == embedding::ResampleMode::resample ? "yes" : "no";
    cells.push_back({row.provider, row.dataset, std::to_string(row.k), probe::to_string(row.probe),
                     probe::to_string(row.loss), rs, std::to_string(row.dims), std::to_string(row.seeds),
                     decorate(row.top1, row.top1_marker), decorate(row.auc, row.auc_marker)});
    table.csv += csv_field(row.provider) + "," + csv_field(row.dataset) + "," + std::to_string(row.k) + "," +
                 probe::to_string(row.probe) + "," + probe::to_string(row.loss) + "," +
                 embedding::to_string(row.resample_mode) + "," + std::to_string(row.dims) + "," +
                 std::to_string(row.seeds) + "," + fmt("%.17g", row.top1) + "," + fmt("%.17g", row.auc) + "," +
                 marker_name(row.top1_marker) + "," + marker_name(row.auc_marker) + "\n";
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& line : cells) {
    for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());
  }
  std::ostringstream text;
  for (std::size_t r = 0; r < cells.size(); ++r) {
    std::string line;
    for (std::size_t c = 0; c < cells[r].size(); ++c) {
      // Text columns left-aligned, numbers right-aligned.
      const bool numeric = c >= 6 || c == 2;
      const std::string pad(width[c] - cells[r][c].size(), ' ');
      line += (c ? "  " : "") + (numeric ? pad + cells[r][c] : cells[r][c] + pad);
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    text << line << "\n";
    if (r == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w;
      text << std::string(total + 2 * (width.size() - 1), '-') << "\n";
    }
  }
  table.text = text.str();
  return table;
}

std::vector<CurvePoint> shots_curve_points(const std::vector<RunRecord>& all_records) {
  const auto records = latest_ok(all_records);
  if (records.empty()) throw ValidationError("no records");

  std::map<std::string, std::set<std::string>> variants_per_dataset;
  for (const auto& r : records) variants_per_dataset[r.dataset].insert(variant_label(r));

  std::vector<CurvePoint> points;
  // dataset -> series -> k -> AUCs
  std::map<std::string, std::map<std::string, std::map<std::size_t, std::vector<double>>>> grouped;
  std::vector<std::string> dataset_order;
  std::map<std::string, std::vector<std::string>> series_order;
  for (const auto& r : records) {
    std::string series = r.provider;
    if (variants_per_dataset[r.dataset].size() > 1) series += " (" + variant_label(r) + ")";
    if (!grouped.count(r.dataset)) dataset_order.push_back(r.dataset);
    auto& by_series = grouped[r.dataset];
    if (!by_series.count(series)) series_order[r.dataset].push_back(series);
    by_series[series][r.k].push_back(r.metrics.macro_auc);
    points.push_back({r.dataset, series, r.k, r.seed, r.metrics.macro_auc, metrics::log_odds(r.metrics.macro_auc)});
  }
  for (const auto& ds : dataset_order) {
    for (const auto& series : series_order[ds]) {
      for (const auto& [k, aucs] : grouped[ds][series]) {
        double sum = 0.0;
        for (double a : aucs) sum += a;
        const double mean = sum / static_cast<double>(aucs.size());
        points.push_back({ds, series, k, std::nullopt, mean, metrics::log_odds(mean)});
      }
    }
  }
  return points;
}

std::vector<std::string> render_shots_curve(const std::vector<RunRecord>& records, const std::string& out_dir) {
  const auto points = shots_curve_points(records);
  std::vector<std::string> dataset_order;
  std::map<std::string, std::vector<const CurvePoint*>> by_dataset;
  for (const auto& p : points) {
    if (!by_dataset.count(p.dataset)) dataset_order.push_back(p.dataset);
    by_dataset[p.dataset].push_back(&p);
  }

  std::vector<std::string> written;
  fs::create_directories(out_dir);
  for (const auto& ds : dataset_order) {
    const auto& pts = by_dataset[ds];
    std::set<std::size_t> ks;
    std::vector<std::string> series;
    for (const auto* p : pts) {
      ks.insert(p->k);
      if (std::find(series.begin(), series.end(), p->series) == series.end()) series.push_back(p->series);
    }
    if (ks.size() < 2) continue;

    std::string csv = "dataset,series,k,seed,auc,log_odds,clamped\n";
    for (const auto* p : pts) {
      csv += csv_field(ds) + "," + csv_field(p->series) + "," + std::to_string(p->k) + "," +
             (p->seed ? std::to_string(*p->seed) : std::string("mean")) + "," + fmt("%.17g", p->auc) + "," +
             fmt("%.17g", p->y.value) + "," + (p->y.clamped ? "true" : "false") + "\n";
    }

    constexpr double kWidth = 800, kHeight = 500, kLeft = 70, kRight = 200, kTop = 40, kBottom = 50;
    const double x_lo = std::log2(static_cast<double>(*ks.begin()));
    const double x_hi = std::log2(static_cast<double>(*ks.rbegin()));
    double y_lo = 0.0, y_hi = 0.0;
    bool first = true;
    for (const auto* p : pts) {
      y_lo = first ? p->y.value : std::min(y_lo, p->y.value);
      y_hi = first ? p->y.value : std::max(y_hi, p->y.value);
      first = false;
    }
    if (y_hi - y_lo < 1e-9) {
      y_lo -= 0.5;
      y_hi += 0.5;
    }
    const double pad = 0.05 * (y_hi - y_lo);
    y_lo -= pad;
    y_hi += pad;
    auto sx = [&](std::size_t k) {
      return kLeft + (std::log2(static_cast<double>(k)) - x_lo) / (x_hi - x_lo) * (kWidth - kLeft - kRight);
    };
    auto sy = [&](double y) { return kHeight - kBottom - (y - y_lo) / (y_hi - y_lo) * (kHeight - kTop - kBottom); };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
        << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "<text x=\"" << kWidth / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
        << projection::xml_escape(ds) << ": macro ROC-AUC vs examples per class</text>\n";
    svg << "<g class=\"axes\" stroke=\"#444\">\n";
    svg << "<line x1=\"" << kLeft << "\" y1=\"" << kHeight - kBottom << "\" x2=\"" << kWidth - kRight << "\" y2=\""
        << kHeight - kBottom << "\"/>\n";
    svg << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kHeight - kBottom
        << "\"/>\n</g>\n";
    for (auto k : ks) {
      svg << "<text x=\"" << fmt("%.1f", sx(k)) << "\" y=\"" << kHeight - kBottom + 18
          << "\" text-anchor=\"middle\">" << k << "</text>\n";
    }
    // AUC tick labels placed at their log-odds positions.
    for (double auc : {0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99, 0.995, 0.999}) {
      const double y = metrics::log_odds(auc).value;
      if (y < y_lo || y > y_hi) continue;
      svg << "<line class=\"grid\" x1=\"" << kLeft << "\" y1=\"" << fmt("%.1f", sy(y)) << "\" x2=\""
          << kWidth - kRight << "\" y2=\"" << fmt("%.1f", sy(y)) << "\" stroke=\"#ddd\"/>"
          << "<text x=\"" << kLeft - 6 << "\" y=\"" << fmt("%.1f", sy(y) + 4) << "\" text-anchor=\"end\">"
          << fmt("%g", auc) << "</text>\n";
    }
    svg << "<text x=\"" << (kLeft + kWidth - kRight) / 2 << "\" y=\"" << kHeight - 12
        << "\" text-anchor=\"middle\">examples per class (log scale)</text>\n";
    svg << "<text transform=\"translate(18," << (kTop + kHeight - kBottom) / 2
        << ") rotate(-90)\" text-anchor=\"middle\">macro ROC-AUC (log-odds scale)</text>\n";

    for (std::size_t s = 0; s < series.size(); ++s) {
      const std::string colour = projection::palette()[s % projection::palette().size()];
      std::string polyline;
      for (const auto* p : pts) {
        if (p->series != series[s]) continue;
        if (p->seed) {
          svg << "<circle class=\"point\" cx=\"" << fmt("%.2f", sx(p->k)) << "\" cy=\"" << fmt("%.2f", sy(p->y.value))
              << "\" r=\"3\" fill=\"" << colour << "\" fill-opacity=\"0.6\"/>\n";
        } else {
          polyline += fmt("%.2f", sx(p->k)) + "," + fmt("%.2f", sy(p->y.value)) + " ";
        }
      }
      if (!polyline.empty()) polyline.pop_back();
      svg << "<polyline class=\"mean\" fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\""
          << polyline << "\"/>\n";
      const double ly = kTop + 18.0 * static_cast<double>(s);
      svg << "<rect x=\"" << kWidth - kRight + 15 << "\" y=\"" << ly << "\" width=\"10\" height=\"10\" fill=\"" << colour
          << "\"/><text x=\"" << kWidth - kRight + 30 << "\" y=\"" << ly + 9 << "\">" << projection::xml_escape(series[s])
          << "</text>\n";
    }
    svg << "</svg>\n";

    const std::string stem = (fs::path(out_dir) / (safe_file_stem(ds) + "_shots")).string();
    write_file(stem + ".svg", svg.str());
    write_file(stem + ".csv", csv);
    written.push_back(stem + ".svg");
    written.push_back(stem + ".csv");
  }
  return written;
}

}  // namespace probebench::runner
