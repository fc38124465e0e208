#include "promptmargin/analyzer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "promptmargin/error.hpp"

namespace pm {

namespace {

void check_dims(std::span<const Eigen::VectorXd> vectors) {
  for (const auto& v : vectors) {
    if (v.size() != vectors.front().size()) {
      throw ShapeError("dimension mismatch: " + std::to_string(v.size()) +
                       " vs " + std::to_string(vectors.front().size()));
    }
  }
}

}  // namespace

double mean_interclass_distance(std::span<const Eigen::VectorXd> vectors) {
  const auto count = vectors.size();
  if (count < 2) throw ShapeError("need at least 2 vectors");
  check_dims(vectors);
  double sum = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t j = i + 1; j < count; ++j) {
      sum += (vectors[i] - vectors[j]).norm();
    }
  }
  const double c = static_cast<double>(count);
  return 2.0 / (c * c - c) * sum;
}

Eigen::MatrixXd distance_matrix(std::span<const Eigen::VectorXd> vectors) {
  const auto count = static_cast<Eigen::Index>(vectors.size());
  if (count < 2) throw ShapeError("need at least 2 vectors");
  check_dims(vectors);
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(count, count);
  for (Eigen::Index i = 0; i < count; ++i) {
    for (Eigen::Index j = i + 1; j < count; ++j) {
      m(i, j) = m(j, i) = (vectors[i] - vectors[j]).norm();
    }
  }
  return m;
}

double distribution_diff(double m_text, double m_vision, bool pseudo,
                         double pseudo_value) {
  if (pseudo) m_text = pseudo_value;
  if (!(m_text > 0.0)) throw ConfigError("m_T must be positive");
  if (!(m_vision > 0.0)) throw ConfigError("m_V must be positive");
  return 1.0 / m_text + 1.0 / m_vision - 2.0;
}

double pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw ShapeError("pearson: length mismatch");
  if (xs.size() < 2) throw ShapeError("pearson: need at least 2 samples");
  const double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx;
    const double dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw ConfigError("pearson: zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

Eigen::VectorXd prototype(std::span<const Eigen::VectorXd> vectors) {
  if (vectors.empty()) throw ShapeError("prototype of empty set");
  check_dims(vectors);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(vectors.front().size());
  for (const auto& v : vectors) mean += v;
  mean /= static_cast<double>(vectors.size());
  const double norm = mean.norm();
  if (norm == 0.0) throw ShapeError("prototype has zero norm");
  return mean / norm;
}

AnalysisReport analyze_bank(const EmbeddingBank& bank,
                            const AnalyzerOptions& options) {
  AnalysisReport report;
  report.pseudo_value = options.pseudo_value;
  report.class_ids = bank.class_ids();
  if (report.class_ids.size() < 2) {
    throw BankError("analysis needs at least 2 classes");
  }

  std::vector<Eigen::VectorXd> texts;
  std::vector<Eigen::VectorXd> protos;
  bool any_pseudo = false;
  for (auto id : report.class_ids) {
    const auto& cls = bank.class_by_id(id);
    any_pseudo = any_pseudo || cls.pseudo;
    texts.push_back(bank.text_vector(id));
    std::vector<Eigen::VectorXd> images;
    for (auto item : bank.originals_of(id)) images.push_back(bank.item_vector(item));
    if (images.empty()) {
      throw BankError("class " + std::to_string(id) +
                      " has no original images to form a prototype");
    }
    protos.push_back(prototype(images));
  }

  report.text_distance_matrix = distance_matrix(texts);
  report.image_distance_matrix = distance_matrix(protos);
  report.m_text_measured = mean_interclass_distance(texts);
  report.m_vision = mean_interclass_distance(protos);
  report.pseudo_substituted = any_pseudo;
  report.m_text = any_pseudo ? options.pseudo_value : report.m_text_measured;
  report.diff = distribution_diff(report.m_text, report.m_vision, false);
  return report;
}

nlohmann::json report_to_json(const AnalysisReport& report) {
  auto matrix = [](const Eigen::MatrixXd& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      nlohmann::json row = nlohmann::json::array();
      for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
      rows.push_back(std::move(row));
    }
    return rows;
  };
  return {{"class_count", report.class_count()},
          {"class_ids", report.class_ids},
          {"m_T", report.m_text},
          {"m_T_measured", report.m_text_measured},
          {"m_V", report.m_vision},
          {"diff", report.diff},
          {"pseudo_substituted", report.pseudo_substituted},
          {"pseudo_value", report.pseudo_value},
          {"text_distance_matrix", matrix(report.text_distance_matrix)},
          {"image_distance_matrix", matrix(report.image_distance_matrix)}};
}

void write_matrix_csv(const Eigen::MatrixXd& m,
                      const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  char buf[32];
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.6g", m(i, j));
      if (j) out << ',';
      out << buf;
    }
    out << '\n';
  }
}

}  // namespace pm
