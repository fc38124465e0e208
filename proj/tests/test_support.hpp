#pragma once

// Test-only oracles. Everything here is written against plain loops and
// std::vector so it shares no code path with the library routines it checks.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "promptmargin/bank.hpp"
#include "promptmargin/model.hpp"
#include "promptmargin/objective.hpp"

namespace pm::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("pm_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Eigen::VectorXd unit2(double x, double y) {
  Eigen::VectorXd v(2);
  v << x, y;
  return v;
}

inline Eigen::VectorXd random_unit(std::mt19937_64& gen, int dim) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::VectorXd v(dim);
  for (int i = 0; i < dim; ++i) v[i] = n(gen);
  return v.normalized();
}

/// Smallest valid bank: 2 classes, dim 4, one original image per class.
inline EmbeddingBank toy_bank() {
  EmbeddingBank bank;
  bank.dim = 4;
  bank.classes = {{0, "cat", false, 0}, {1, "dog", false, 1}};
  bank.items = {{10, 0, ItemRole::kOriginal, std::nullopt, 2, std::nullopt},
                {11, 1, ItemRole::kOriginal, std::nullopt, 3, std::nullopt}};
  bank.vectors = VectorMatrix::Zero(4, 4);
  bank.vectors(0, 0) = 1.0f;
  bank.vectors(1, 1) = 1.0f;
  bank.vectors(2, 2) = 1.0f;
  bank.vectors(3, 3) = 1.0f;
  bank.index();
  return bank;
}

// ---- naive forward pass of the training objective -------------------------

using Vec = std::vector<double>;

inline double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline Vec normalized(Vec v) {
  const double n = std::sqrt(dot(v, v));
  for (auto& x : v) x /= n;
  return v;
}

inline double sq_dist(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

/// x + up * (down^T x), with up/down given as D x r Eigen matrices but
/// evaluated entry by entry.
inline Vec residual_map(const Eigen::MatrixXd& up, const Eigen::MatrixXd& down,
                        const Vec& x) {
  const auto dim = static_cast<std::size_t>(up.rows());
  const auto rank = static_cast<std::size_t>(up.cols());
  Vec proj(rank, 0.0);
  for (std::size_t k = 0; k < rank; ++k) {
    for (std::size_t i = 0; i < dim; ++i) {
      proj[k] += down(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) * x[i];
    }
  }
  Vec out = x;
  for (std::size_t i = 0; i < dim; ++i) {
    for (std::size_t k = 0; k < rank; ++k) {
      out[i] += up(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) * proj[k];
    }
  }
  return out;
}

inline Eigen::MatrixXd naive_product(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.cols(); ++j)
      for (Eigen::Index k = 0; k < a.cols(); ++k) c(i, j) += a(i, k) * b(k, j);
  return c;
}

inline double pair_mean(const std::vector<Vec>& v, double mu, bool squared_gap) {
  double s = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    for (std::size_t j = i + 1; j < v.size(); ++j) {
      const double d = sq_dist(v[i], v[j]);
      s += squared_gap ? (d - mu) * (d - mu) : d;
      ++pairs;
    }
  }
  return s / static_cast<double>(pairs);
}

/// Reference L_total, mirroring the math statement term by term.
inline double reference_total_loss(const PromptState& state, const TrainingBatch& batch,
                                   const LossWeights& w) {
  const auto& p = state.params;
  const Eigen::MatrixXd vup = naive_product(p.text_up(), p.couple_up());
  const Eigen::MatrixXd vdown = naive_product(p.text_down(), p.couple_down());
  const auto classes = static_cast<std::size_t>(batch.texts.cols());

  std::vector<Vec> texts;
  for (std::size_t c = 0; c < classes; ++c) {
    const Eigen::VectorXd col = batch.texts.col(static_cast<Eigen::Index>(c));
    texts.push_back(normalized(residual_map(p.text_up(), p.text_down(),
                                            Vec(col.data(), col.data() + col.size()))));
  }
  std::vector<Vec> images;
  for (Eigen::Index m = 0; m < batch.images.cols(); ++m) {
    const Eigen::VectorXd col = batch.images.col(m);
    images.push_back(normalized(residual_map(vup, vdown, Vec(col.data(), col.data() + col.size()))));
  }

  double ce = 0.0;
  for (std::size_t m = 0; m < images.size(); ++m) {
    long double denom = 0.0L;
    for (std::size_t c = 0; c < classes; ++c) {
      denom += std::exp(static_cast<long double>(dot(texts[c], images[m]) / state.tau));
    }
    const long double own = dot(texts[static_cast<std::size_t>(batch.labels[m])], images[m]) / state.tau;
    ce += static_cast<double>(std::log(denom) - own);
  }
  ce /= static_cast<double>(images.size());

  std::vector<Vec> protos(classes, Vec(texts[0].size(), 0.0));
  std::vector<int> counts(classes, 0);
  for (std::size_t m = 0; m < images.size(); ++m) {
    const auto y = static_cast<std::size_t>(batch.labels[m]);
    for (std::size_t i = 0; i < images[m].size(); ++i) protos[y][i] += images[m][i];
    ++counts[y];
  }
  for (std::size_t c = 0; c < classes; ++c) {
    for (auto& x : protos[c]) x /= counts[c];
    protos[c] = normalized(protos[c]);
  }

  const double mu = pair_mean(texts, 0.0, false);
  return ce + w.alpha * pair_mean(texts, mu, true) + w.beta * pair_mean(protos, mu, true);
}

/// Central differences of reference_total_loss for every parameter entry.
inline PromptParams finite_difference_grads(const PromptState& state,
                                            const TrainingBatch& batch,
                                            const LossWeights& w, double h = 1e-5) {
  PromptParams out = state.params.zeros_like();
  PromptState probe = state;
  for (std::size_t b = 0; b < 4; ++b) {
    auto& block = probe.params.blocks[b];
    for (Eigen::Index i = 0; i < block.rows(); ++i) {
      for (Eigen::Index j = 0; j < block.cols(); ++j) {
        const double saved = block(i, j);
        block(i, j) = saved + h;
        const double up = reference_total_loss(probe, batch, w);
        block(i, j) = saved - h;
        const double down = reference_total_loss(probe, batch, w);
        block(i, j) = saved;
        out.blocks[b](i, j) = (up - down) / (2.0 * h);
      }
    }
  }
  return out;
}

/// Worst relative error between two gradient sets; entries where both
/// magnitudes are below `floor` are compared absolutely against `floor`.
inline double max_relative_error(const PromptParams& a, const PromptParams& b,
                                 double floor = 1e-7) {
  double worst = 0.0;
  for (std::size_t k = 0; k < 4; ++k) {
    for (Eigen::Index i = 0; i < a.blocks[k].size(); ++i) {
      const double x = a.blocks[k].data()[i];
      const double y = b.blocks[k].data()[i];
      const double scale = std::max({std::abs(x), std::abs(y), floor});
      worst = std::max(worst, std::abs(x - y) / scale);
    }
  }
  return worst;
}

/// Random gradient-check instance: every class gets 1..3 support items.
struct GradInstance {
  PromptState state;
  TrainingBatch batch;
  LossWeights weights;
};

inline GradInstance random_grad_instance(std::mt19937_64& gen, int dim, int classes,
                                         int rank, double tau) {
  GradInstance g;
  std::normal_distribution<double> n(0.0, 1.0);
  g.state.tau = tau;
  g.state.params.text_up() = Eigen::MatrixXd(dim, rank);
  g.state.params.text_down() = Eigen::MatrixXd(dim, rank);
  g.state.params.couple_up() = Eigen::MatrixXd(rank, rank);
  g.state.params.couple_down() = Eigen::MatrixXd(rank, rank);
  for (auto& block : g.state.params.blocks) {
    for (Eigen::Index i = 0; i < block.size(); ++i) block.data()[i] = 0.3 * n(gen);
  }
  g.batch.texts.resize(dim, classes);
  for (int c = 0; c < classes; ++c) g.batch.texts.col(c) = random_unit(gen, dim);
  std::uniform_int_distribution<int> per_class(1, 3);
  std::vector<Eigen::VectorXd> cols;
  for (int c = 0; c < classes; ++c) {
    const int k = per_class(gen);
    for (int i = 0; i < k; ++i) {
      cols.push_back(random_unit(gen, dim));
      g.batch.labels.push_back(c);
    }
  }
  g.batch.images.resize(dim, static_cast<Eigen::Index>(cols.size()));
  for (std::size_t m = 0; m < cols.size(); ++m) {
    g.batch.images.col(static_cast<Eigen::Index>(m)) = cols[m];
  }
  std::uniform_real_distribution<double> weight(0.0, 2.0);
  g.weights.alpha = weight(gen);
  g.weights.beta = weight(gen);
  return g;
}

/// Reference top-r: full sort by (score desc, id asc), ids returned ascending.
inline std::vector<std::int64_t> brute_force_top(const std::vector<double>& scores,
                                                 const std::vector<std::int64_t>& ids,
                                                 std::size_t r) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return ids[a] < ids[b];
  });
  std::vector<std::int64_t> out;
  for (std::size_t i = 0; i < r; ++i) out.push_back(ids[order[i]]);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace pm::testing
