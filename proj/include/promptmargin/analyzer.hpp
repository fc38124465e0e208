#pragma once

#include <Eigen/Core>
#include <filesystem>
#include <span>
#include <vector>

#include "json.hpp"
#include "promptmargin/bank.hpp"

namespace pm {

/// Value substituted for m_T when classnames are placeholders.
inline constexpr double kDefaultPseudoTextDistance = 0.1;

struct AnalysisReport {
  double m_text = 0.0;           // after pseudo substitution
  double m_text_measured = 0.0;  // before substitution
  double m_vision = 0.0;
  double diff = 0.0;
  bool pseudo_substituted = false;
  double pseudo_value = kDefaultPseudoTextDistance;
  std::vector<std::int64_t> class_ids;
  Eigen::MatrixXd text_distance_matrix;
  Eigen::MatrixXd image_distance_matrix;

  int class_count() const { return static_cast<int>(class_ids.size()); }
};

struct AnalyzerOptions {
  double pseudo_value = kDefaultPseudoTextDistance;
};

/// Mean plain (unsquared) L2 distance over all unordered pairs.
double mean_interclass_distance(std::span<const Eigen::VectorXd> vectors);

/// Pairwise L2 distances; symmetric with a zero diagonal.
Eigen::MatrixXd distance_matrix(std::span<const Eigen::VectorXd> vectors);

/// 1/m_T + 1/m_V - 2, with m_T replaced by `pseudo_value` when `pseudo`.
double distribution_diff(double m_text, double m_vision, bool pseudo,
                         double pseudo_value = kDefaultPseudoTextDistance);

/// Sample Pearson correlation coefficient.
double pearson(std::span<const double> xs, std::span<const double> ys);

/// Renormalized mean of unit vectors.
Eigen::VectorXd prototype(std::span<const Eigen::VectorXd> vectors);

/// Text rows of every class against renormalized prototypes of each class's
/// original images. The placeholder rule applies when any class is flagged
/// pseudo. Every class needs at least one original item.
AnalysisReport analyze_bank(const EmbeddingBank& bank,
                            const AnalyzerOptions& options = {});

nlohmann::json report_to_json(const AnalysisReport& report);

/// Comma-separated, one row per class, 6 significant digits.
void write_matrix_csv(const Eigen::MatrixXd& m, const std::filesystem::path& path);

}  // namespace pm
