#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "probebench/embedding.hpp"
#include "probebench/matrix.hpp"

namespace probebench::projection {

struct TsneConfig {
  double perplexity = 30.0;
  std::size_t iterations = 1000;
  double early_exaggeration = 12.0;
  std::size_t exaggeration_iterations = 250;
  double learning_rate = 200.0;
  /// Caps the step at max(n / (4 * early_exaggeration), 50). Exaggerated
  /// steps of `learning_rate` diverge on small inputs; from n = 9600 upwards
  /// the cap is inactive.
  bool cap_learning_rate = true;
  double initial_momentum = 0.5;
  double final_momentum = 0.8;
  std::size_t momentum_switch_iteration = 250;
  double init_sigma = 1e-4;
  std::uint64_t seed = 0;

  void validate(std::size_t n_points) const;
  double effective_learning_rate(std::size_t n_points) const;
};

struct TsneTrace {
  /// kl[i] is KL(P || Q) with un-exaggerated P after iteration i + 1.
  std::vector<double> kl;
};

/// Squared Euclidean distances between rows.
Matrix squared_distances(const Matrix& points);

struct ConditionalAffinities {
  Matrix p;                    ///< row i: p_{j|i}, zero diagonal
  std::vector<double> beta;    ///< per-point precision 1 / (2 sigma^2)
  std::vector<double> entropy; ///< natural-log entropy of each row
};

/// Binary search on each row's precision until its entropy is within
/// `tolerance` of log(perplexity).
ConditionalAffinities conditional_affinities(const Matrix& sq_distances, double perplexity, double tolerance = 1e-5);

/// Symmetrised joint affinities (P + P^T) / 2n.
Matrix joint_affinities(const Matrix& points, double perplexity);

/// Exact O(n^2) t-SNE to two dimensions. Returns an n x 2 centred layout.
Matrix tsne_layout(const Matrix& points, const TsneConfig& config, TsneTrace* trace = nullptr);

struct ScatterPoint {
  std::string id;
  double x = 0.0;
  double y = 0.0;
  std::string label;
  friend bool operator==(const ScatterPoint&, const ScatterPoint&) = default;
};

/// Projects every table row whose id appears in `labels` (id -> class).
std::vector<ScatterPoint> tsne(const embedding::EmbeddingTable& table, const std::map<std::string, std::string>& labels,
                               const TsneConfig& config, TsneTrace* trace = nullptr);

enum class ScatterFormat { csv, svg };

inline constexpr int kSvgSize = 800;
inline constexpr double kSvgMargin = 0.05;

/// Fixed 12-colour palette indexed by class order.
const std::vector<std::string>& palette();

std::string render_scatter_csv(const std::vector<ScatterPoint>& points);
/// Classes are coloured by their index in sorted label order.
std::string render_scatter_svg(const std::vector<ScatterPoint>& points, const std::string& title = {});
void emit_scatter(const std::vector<ScatterPoint>& points, const std::string& path, ScatterFormat format,
                  const std::string& title = {});
std::vector<ScatterPoint> load_scatter_csv(const std::string& path);

std::string xml_escape(const std::string& text);

}  // namespace probebench::projection
