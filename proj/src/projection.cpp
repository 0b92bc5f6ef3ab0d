#include "probebench/projection.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "probebench/csv.hpp"
#include "probebench/dataset.hpp"
#include "probebench/error.hpp"

namespace probebench::projection {

namespace {

constexpr double kMinAffinity = 1e-12;
constexpr double kMinGain = 0.01;
constexpr int kMaxBisectionSteps = 200;

std::string format_double(double v, const char* fmt) {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, v);
  return buf;
}

/// Standard normal draws from splitmix64 (Box-Muller), identical on every
/// platform unlike std::normal_distribution.
class GaussianStream {
 public:
  explicit GaussianStream(std::uint64_t seed) : rng_(seed) {}
  double next() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = rng_.uniform();
    while (u1 <= 0.0) u1 = rng_.uniform();
    const double u2 = rng_.uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    have_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

 private:
  dataset::SplitMix64 rng_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

double kl_divergence(const Matrix& p, const Matrix& y) {
  const std::size_t n = y.rows();
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double dx = y(i, 0) - y(j, 0), dy = y(i, 1) - y(j, 1);
      z += 1.0 / (1.0 + dx * dx + dy * dy);
    }
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double dx = y(i, 0) - y(j, 0), dy = y(i, 1) - y(j, 1);
      const double q = std::max(1.0 / (1.0 + dx * dx + dy * dy) / z, std::numeric_limits<double>::min());
      const double pij = p(i, j);
      if (pij > 0) kl += pij * std::log(pij / q);
    }
  }
  return kl;
}

void centre(Matrix& y) {
  const double n = static_cast<double>(y.rows());
  for (std::size_t d = 0; d < 2; ++d) {
    double mean = 0.0;
    for (std::size_t i = 0; i < y.rows(); ++i) mean += y(i, d);
    mean /= n;
    for (std::size_t i = 0; i < y.rows(); ++i) y(i, d) -= mean;
  }
}

}  // namespace

void TsneConfig::validate(std::size_t n_points) const {
  if (perplexity < 2.0) throw ValidationError("tsne: perplexity must be >= 2");
  if (iterations < 250) throw ValidationError("tsne: iterations must be >= 250");
  if (!(learning_rate > 0)) throw ValidationError("tsne: learning rate must be > 0");
  if (static_cast<double>(n_points) < 3.0 * perplexity + 1.0) {
    throw ValidationError("tsne: " + std::to_string(n_points) + " points is too few for perplexity " +
                          format_double(perplexity, "%g") + " (need n >= 3 * perplexity + 1)");
  }
}

double TsneConfig::effective_learning_rate(std::size_t n_points) const {
  if (!cap_learning_rate) return learning_rate;
  const double cap = std::max(static_cast<double>(n_points) / (4.0 * early_exaggeration), 50.0);
  return std::min(learning_rate, cap);
}

Matrix squared_distances(const Matrix& points) {
  const std::size_t n = points.rows();
  Matrix d(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < points.cols(); ++k) {
        const double diff = points(i, k) - points(j, k);
        s += diff * diff;
      }
      d(i, j) = d(j, i) = s;
    }
  }
  return d;
}

ConditionalAffinities conditional_affinities(const Matrix& sq_distances, double perplexity, double tolerance) {
  const std::size_t n = sq_distances.rows();
  ConditionalAffinities out;
  out.p = Matrix(n, n);
  out.beta.assign(n, 1.0);
  out.entropy.assign(n, 0.0);
  const double target = std::log(perplexity);
  std::vector<double> row(n);

  for (std::size_t i = 0; i < n; ++i) {
    double min_d = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) min_d = std::min(min_d, sq_distances(i, j));
    }
    double beta = 1.0;
    double lo = 0.0, hi = std::numeric_limits<double>::infinity();
    double entropy = 0.0;
    for (int step = 0; step < kMaxBisectionSteps; ++step) {
      double sum = 0.0, weighted = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) {
          row[j] = 0.0;
          continue;
        }
        // Shifting by the nearest distance leaves p unchanged and avoids underflow.
        const double shifted = sq_distances(i, j) - min_d;
        row[j] = std::exp(-beta * shifted);
        sum += row[j];
        weighted += shifted * row[j];
      }
      entropy = std::log(sum) + beta * weighted / sum;
      for (std::size_t j = 0; j < n; ++j) row[j] /= sum;
      const double diff = entropy - target;
      if (std::abs(diff) < tolerance) break;
      if (diff > 0) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
      } else {
        hi = beta;
        beta = 0.5 * (beta + lo);
      }
    }
    out.beta[i] = beta;
    out.entropy[i] = entropy;
    std::copy(row.begin(), row.end(), out.p.row(i).begin());
  }
  return out;
}

Matrix joint_affinities(const Matrix& points, double perplexity) {
  const auto cond = conditional_affinities(squared_distances(points), perplexity);
  const std::size_t n = points.rows();
  Matrix p(n, n);
  const double denom = 2.0 * static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      p(i, j) = std::max((cond.p(i, j) + cond.p(j, i)) / denom, kMinAffinity);
    }
  }
  return p;
}

Matrix tsne_layout(const Matrix& points, const TsneConfig& config, TsneTrace* trace) {
  const std::size_t n = points.rows();
  config.validate(n);
  for (double v : points.data()) {
    if (!std::isfinite(v)) throw ValidationError("tsne: non-finite input value");
  }
  const Matrix p = joint_affinities(points, config.perplexity);
  const double learning_rate = config.effective_learning_rate(n);

  Matrix y(n, 2);
  GaussianStream gauss(config.seed);
  for (auto& v : y.data()) v = config.init_sigma * gauss.next();

  Matrix update(n, 2), gains(n, 2, 1.0), grad(n, 2);
  Matrix num(n, n);
  if (trace) trace->kl.clear();

  for (std::size_t iter = 0; iter < config.iterations; ++iter) {
    const double exaggeration = iter < config.exaggeration_iterations ? config.early_exaggeration : 1.0;
    const double momentum = iter < config.momentum_switch_iteration ? config.initial_momentum : config.final_momentum;

    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const double dx = y(i, 0) - y(j, 0), dy = y(i, 1) - y(j, 1);
        const double q = 1.0 / (1.0 + dx * dx + dy * dy);
        num(i, j) = num(j, i) = q;
        z += 2.0 * q;
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      double gx = 0.0, gy = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        const double mult = (exaggeration * p(i, j) - num(i, j) / z) * num(i, j);
        gx += mult * (y(i, 0) - y(j, 0));
        gy += mult * (y(i, 1) - y(j, 1));
      }
      grad(i, 0) = 4.0 * gx;
      grad(i, 1) = 4.0 * gy;
    }
    for (std::size_t k = 0; k < y.data().size(); ++k) {
      double& g = gains.data()[k];
      const double gr = grad.data()[k];
      double& u = update.data()[k];
      g = (gr > 0) != (u > 0) ? g + 0.2 : g * 0.8;
      g = std::max(g, kMinGain);
      u = momentum * u - learning_rate * g * gr;
      y.data()[k] += u;
    }
    centre(y);
    if (trace) trace->kl.push_back(kl_divergence(p, y));
  }
  for (double v : y.data()) {
    if (!std::isfinite(v)) throw Error("tsne: optimisation produced non-finite coordinates");
  }
  return y;
}

std::vector<ScatterPoint> tsne(const embedding::EmbeddingTable& table, const std::map<std::string, std::string>& labels,
                               const TsneConfig& config, TsneTrace* trace) {
  std::vector<std::string> ids;
  for (const auto& [id, v] : table.rows) {
    if (labels.count(id)) ids.push_back(id);
  }
  Matrix x(ids.size(), table.dim());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& v = table.at(ids[i]);
    std::copy(v.begin(), v.end(), x.row(i).begin());
  }
  const Matrix layout = tsne_layout(x, config, trace);
  std::vector<ScatterPoint> out;
  out.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) out.push_back({ids[i], layout(i, 0), layout(i, 1), labels.at(ids[i])});
  return out;
}

const std::vector<std::string>& palette() {
  static const std::vector<std::string> colours = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
                                                   "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#637939"};
  return colours;
}

std::string xml_escape(const std::string& text) {
  std::string out;
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string render_scatter_csv(const std::vector<ScatterPoint>& points) {
  std::string out = "id,x,y,class\n";
  for (const auto& p : points) {
    out += csv_field(p.id) + "," + format_double(p.x, "%.9g") + "," + format_double(p.y, "%.9g") + "," +
           csv_field(p.label) + "\n";
  }
  return out;
}

std::string render_scatter_svg(const std::vector<ScatterPoint>& points, const std::string& title) {
  if (points.empty()) throw ValidationError("emit_scatter: no points");
  std::set<std::string> label_set;
  double min_x = INFINITY, max_x = -INFINITY, min_y = INFINITY, max_y = -INFINITY;
  for (const auto& p : points) {
    label_set.insert(p.label);
    min_x = std::min(min_x, p.x);
    max_x = std::max(max_x, p.x);
    min_y = std::min(min_y, p.y);
    max_y = std::max(max_y, p.y);
  }
  const std::vector<std::string> labels(label_set.begin(), label_set.end());
  const double margin = kSvgMargin * kSvgSize;
  const double inner = kSvgSize - 2.0 * margin;
  const double span = std::max({max_x - min_x, max_y - min_y, 1e-300});
  const double scale = inner / span;
  const double off_x = margin + 0.5 * (inner - (max_x - min_x) * scale);
  const double off_y = margin + 0.5 * (inner - (max_y - min_y) * scale);

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kSvgSize << "\" height=\"" << kSvgSize
      << "\" viewBox=\"0 0 " << kSvgSize << ' ' << kSvgSize << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!title.empty()) {
    svg << "<text x=\"" << kSvgSize / 2 << "\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" "
        << "font-size=\"14\">" << xml_escape(title) << "</text>\n";
  }
  svg << "<g class=\"points\">\n";
  for (const auto& p : points) {
    const auto idx = static_cast<std::size_t>(std::lower_bound(labels.begin(), labels.end(), p.label) - labels.begin());
    const double cx = off_x + (p.x - min_x) * scale;
    const double cy = kSvgSize - (off_y + (p.y - min_y) * scale);
    svg << "<circle cx=\"" << format_double(cx, "%.2f") << "\" cy=\"" << format_double(cy, "%.2f")
        << "\" r=\"3\" fill=\"" << palette()[idx % palette().size()] << "\"><title>" << xml_escape(p.id)
        << "</title></circle>\n";
  }
  svg << "</g>\n<g class=\"legend\" font-family=\"sans-serif\" font-size=\"12\">\n";
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double y = margin + 16.0 * static_cast<double>(i);
    svg << "<rect class=\"legend-entry\" x=\"" << margin << "\" y=\"" << format_double(y, "%.1f")
        << "\" width=\"10\" height=\"10\" fill=\"" << palette()[i % palette().size()] << "\"/>"
        << "<text x=\"" << margin + 14 << "\" y=\"" << format_double(y + 9, "%.1f") << "\">" << xml_escape(labels[i])
        << "</text>\n";
  }
  svg << "</g>\n</svg>\n";
  return svg.str();
}

void emit_scatter(const std::vector<ScatterPoint>& points, const std::string& path, ScatterFormat format,
                  const std::string& title) {
  if (points.empty()) throw ValidationError("emit_scatter: no points");
  const std::string body = format == ScatterFormat::csv ? render_scatter_csv(points) : render_scatter_svg(points, title);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << body;
  if (!out) throw Error("write failed for '" + path + "'");
}

std::vector<ScatterPoint> load_scatter_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open scatter CSV '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  const auto rows = parse_csv(buf.str());
  if (rows.empty() || rows.front() != std::vector<std::string>{"id", "x", "y", "class"}) {
    throw FormatError("scatter CSV '" + path + "': expected header id,x,y,class");
  }
  std::vector<ScatterPoint> points;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].size() != 4) throw FormatError("scatter CSV '" + path + "': row " + std::to_string(r + 1) + " has " +
                                               std::to_string(rows[r].size()) + " fields");
    points.push_back({rows[r][0], std::stod(rows[r][1]), std::stod(rows[r][2]), rows[r][3]});
  }
  return points;
}

}  // namespace probebench::projection
