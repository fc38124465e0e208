#include "promptmargin/objective.hpp"

#include <cmath>
#include <string>

#include "promptmargin/error.hpp"

namespace pm {

namespace {

Eigen::MatrixXd stack(std::span<const Eigen::VectorXd> vectors) {
  if (vectors.size() < 2) throw ShapeError("need at least 2 vectors");
  Eigen::MatrixXd m(vectors.front().size(), static_cast<Eigen::Index>(vectors.size()));
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    if (vectors[i].size() != m.rows()) throw ShapeError("dimension mismatch");
    m.col(static_cast<Eigen::Index>(i)) = vectors[i];
  }
  return m;
}

double pair_coefficient(Eigen::Index n) {
  const double c = static_cast<double>(n);
  return 2.0 / (c * c - c);
}

/// Squared distances between all columns.
Eigen::MatrixXd sq_distances(const Eigen::MatrixXd& cols) {
  const Eigen::VectorXd sq = cols.colwise().squaredNorm().transpose();
  Eigen::MatrixXd d = -2.0 * cols.transpose() * cols;
  d.colwise() += sq;
  d.rowwise() += sq.transpose();
  d.diagonal().setZero();
  return d.cwiseMax(0.0);
}

/// Gradient of sum_{i<j} w_ij ||c_i - c_j||^2 w.r.t. the columns, for a
/// symmetric weight matrix with zero diagonal.
Eigen::MatrixXd pair_weight_grad(const Eigen::MatrixXd& cols,
                                 const Eigen::MatrixXd& weights) {
  const Eigen::VectorXd row_sum = weights.rowwise().sum();
  return 2.0 * (cols * row_sum.asDiagonal() - cols * weights);
}

/// Normalized columns and their pre-normalization norms.
struct Normalized {
  Eigen::MatrixXd unit;
  Eigen::VectorXd norms;
};

Normalized normalize_columns(const Eigen::MatrixXd& z, const char* what) {
  Normalized out{z, z.colwise().norm().transpose()};
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    if (!(out.norms[j] > 0.0) || !std::isfinite(out.norms[j])) {
      throw DivergenceError(std::string("non-finite or zero norm in ") + what);
    }
    out.unit.col(j) /= out.norms[j];
  }
  return out;
}

/// Backward through y = z / ||z|| column-wise.
Eigen::MatrixXd normalize_backward(const Normalized& n, const Eigen::MatrixXd& grad) {
  const Eigen::RowVectorXd radial = n.unit.cwiseProduct(grad).colwise().sum();
  Eigen::MatrixXd gz = grad - n.unit * radial.asDiagonal();
  return gz * n.norms.cwiseInverse().asDiagonal();
}

struct Forward {
  Eigen::MatrixXd text_proj;     // V^T T0, r x N
  Eigen::MatrixXd vision_up;     // U Wu
  Eigen::MatrixXd vision_down;   // V Wv
  Eigen::MatrixXd vision_proj;   // (V Wv)^T X0, r x M
  Normalized texts;
  Normalized images;
  Normalized protos;
  Eigen::MatrixXd logits;        // N x M
  Eigen::VectorXi class_sizes;
  Eigen::MatrixXd text_sq;       // N x N
  Eigen::MatrixXd proto_sq;      // N x N
  LossBreakdown loss;
};

void check_finite(double v, const char* term) {
  if (!std::isfinite(v)) {
    throw DivergenceError(std::string("non-finite ") + term);
  }
}

Forward forward(const PromptState& state, const TrainingBatch& batch,
                const LossWeights& w) {
  const auto& p = state.params;
  const Eigen::Index dim = state.dim();
  const Eigen::Index classes = batch.texts.cols();
  const Eigen::Index count = batch.images.cols();
  if (batch.texts.rows() != dim || batch.images.rows() != dim) {
    throw ShapeError("batch dimension does not match prompt state");
  }
  if (classes < 2) throw ShapeError("need at least 2 classes");
  if (static_cast<Eigen::Index>(batch.labels.size()) != count) {
    throw ShapeError("label count does not match image count");
  }

  Forward f;
  f.class_sizes = Eigen::VectorXi::Zero(classes);
  for (int y : batch.labels) {
    if (y < 0 || y >= classes) throw ShapeError("label out of range");
    ++f.class_sizes[y];
  }
  for (Eigen::Index c = 0; c < classes; ++c) {
    if (f.class_sizes[c] == 0) {
      throw ShapeError("class " + std::to_string(c) + " has no support items");
    }
  }

  f.text_proj = p.text_down().transpose() * batch.texts;
  f.texts = normalize_columns(batch.texts + p.text_up() * f.text_proj, "text embedding");
  f.vision_up = p.vision_up();
  f.vision_down = p.vision_down();
  f.vision_proj = f.vision_down.transpose() * batch.images;
  f.images = normalize_columns(batch.images + f.vision_up * f.vision_proj,
                               "image embedding");

  f.logits = f.texts.unit.transpose() * f.images.unit / state.tau;
  double ce = 0.0;
  for (Eigen::Index m = 0; m < count; ++m) {
    ce += cross_entropy(f.logits.col(m), batch.labels[static_cast<std::size_t>(m)]);
  }
  f.loss.ce = ce / static_cast<double>(count);
  check_finite(f.loss.ce, "cross-entropy");

  Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(dim, classes);
  for (Eigen::Index m = 0; m < count; ++m) {
    sums.col(batch.labels[static_cast<std::size_t>(m)]) += f.images.unit.col(m);
  }
  for (Eigen::Index c = 0; c < classes; ++c) sums.col(c) /= f.class_sizes[c];
  f.protos = normalize_columns(sums, "image prototype");

  const double coef = pair_coefficient(classes);
  f.text_sq = sq_distances(f.texts.unit);
  f.proto_sq = sq_distances(f.protos.unit);
  // Each unordered pair appears twice in the full matrix.
  f.loss.mu_t = 0.5 * coef * f.text_sq.sum();
  Eigen::MatrixXd off = Eigen::MatrixXd::Ones(classes, classes);
  off.diagonal().setZero();
  f.loss.reg_text =
      0.5 * coef * (f.text_sq.array() - f.loss.mu_t).square().matrix().cwiseProduct(off).sum();
  f.loss.reg_vision =
      0.5 * coef * (f.proto_sq.array() - f.loss.mu_t).square().matrix().cwiseProduct(off).sum();
  check_finite(f.loss.mu_t, "mu_t");
  check_finite(f.loss.reg_text, "text margin regularizer");
  check_finite(f.loss.reg_vision, "vision margin regularizer");
  f.loss.total = f.loss.ce + w.alpha * f.loss.reg_text + w.beta * f.loss.reg_vision;
  check_finite(f.loss.total, "total loss");
  return f;
}

}  // namespace

double cross_entropy(const Eigen::VectorXd& logits, int label) {
  if (logits.size() < 2) throw ShapeError("cross_entropy needs N >= 2 logits");
  if (label < 0 || label >= logits.size()) {
    throw ShapeError("label " + std::to_string(label) + " out of range");
  }
  if (!logits.allFinite()) throw ShapeError("non-finite logits");
  const double top = logits.maxCoeff();
  const double lse = top + std::log((logits.array() - top).exp().sum());
  return std::max(0.0, lse - logits[label]);
}

double mean_pairwise_sq_distance(const Eigen::MatrixXd& columns) {
  if (columns.cols() < 2) throw ShapeError("need at least 2 vectors");
  double sum = 0.0;
  for (Eigen::Index i = 0; i < columns.cols(); ++i) {
    for (Eigen::Index j = i + 1; j < columns.cols(); ++j) {
      sum += (columns.col(i) - columns.col(j)).squaredNorm();
    }
  }
  return pair_coefficient(columns.cols()) * sum;
}

double margin_regularizer(const Eigen::MatrixXd& columns, double mu) {
  if (columns.cols() < 2) throw ShapeError("need at least 2 vectors");
  double sum = 0.0;
  for (Eigen::Index i = 0; i < columns.cols(); ++i) {
    for (Eigen::Index j = i + 1; j < columns.cols(); ++j) {
      const double gap = (columns.col(i) - columns.col(j)).squaredNorm() - mu;
      sum += gap * gap;
    }
  }
  return pair_coefficient(columns.cols()) * sum;
}

double mean_pairwise_sq_distance(std::span<const Eigen::VectorXd> vectors) {
  return mean_pairwise_sq_distance(stack(vectors));
}

double margin_regularizer(std::span<const Eigen::VectorXd> vectors, double mu) {
  return margin_regularizer(stack(vectors), mu);
}

LossBreakdown total_loss(const PromptState& state, const TrainingBatch& batch,
                         const LossWeights& weights) {
  return forward(state, batch, weights).loss;
}

LossAndGrads total_loss_and_grads(const PromptState& state,
                                  const TrainingBatch& batch,
                                  const LossWeights& w) {
  Forward f = forward(state, batch, w);
  const auto& p = state.params;
  const Eigen::Index classes = batch.texts.cols();
  const Eigen::Index count = batch.images.cols();
  const double coef = pair_coefficient(classes);

  // Cross-entropy: d/dlogits = (softmax - onehot) / M.
  Eigen::MatrixXd g_logits(classes, count);
  for (Eigen::Index m = 0; m < count; ++m) {
    const Eigen::VectorXd col = f.logits.col(m);
    Eigen::VectorXd prob = (col.array() - col.maxCoeff()).exp();
    prob /= prob.sum();
    prob[batch.labels[static_cast<std::size_t>(m)]] -= 1.0;
    g_logits.col(m) = prob / static_cast<double>(count);
  }
  Eigen::MatrixXd g_texts = f.images.unit * g_logits.transpose() / state.tau;
  Eigen::MatrixXd g_images = f.texts.unit * g_logits / state.tau;

  // Margin terms. d R / d d_ij = coef * 2 (d_ij - mu) per unordered pair;
  // the symmetric weight matrix below carries that coefficient per entry.
  Eigen::MatrixXd text_w = w.alpha * 2.0 * coef * (f.text_sq.array() - f.loss.mu_t).matrix();
  Eigen::MatrixXd proto_w = w.beta * 2.0 * coef * (f.proto_sq.array() - f.loss.mu_t).matrix();
  text_w.diagonal().setZero();
  proto_w.diagonal().setZero();

  if (!w.mu_detached) {
    // d mu / d d_ij = coef, and d R / d mu = -(sum of the pair weights).
    const double g_mu = -0.5 * (text_w.sum() + proto_w.sum());
    Eigen::MatrixXd mu_w = Eigen::MatrixXd::Constant(classes, classes, g_mu * coef);
    mu_w.diagonal().setZero();
    text_w += mu_w;
  }
  g_texts += pair_weight_grad(f.texts.unit, text_w);
  const Eigen::MatrixXd g_protos = pair_weight_grad(f.protos.unit, proto_w);

  // Prototype = normalize(class mean of transformed images).
  const Eigen::MatrixXd g_sums = normalize_backward(f.protos, g_protos);
  for (Eigen::Index m = 0; m < count; ++m) {
    const int y = batch.labels[static_cast<std::size_t>(m)];
    g_images.col(m) += g_sums.col(y) / f.class_sizes[y];
  }

  PromptParams g = p.zeros_like();

  // Text branch: z = t0 + U (V^T t0).
  const Eigen::MatrixXd gz_text = normalize_backward(f.texts, g_texts);
  g.text_up() += gz_text * f.text_proj.transpose();
  g.text_down() += batch.texts * (p.text_up().transpose() * gz_text).transpose();

  // Vision branch: z = x0 + A (B^T x0), A = U Wu, B = V Wv.
  const Eigen::MatrixXd gz_image = normalize_backward(f.images, g_images);
  const Eigen::MatrixXd g_vup = gz_image * f.vision_proj.transpose();
  const Eigen::MatrixXd g_vdown =
      batch.images * (f.vision_up.transpose() * gz_image).transpose();
  g.text_up() += g_vup * p.couple_up().transpose();
  g.couple_up() += p.text_up().transpose() * g_vup;
  g.text_down() += g_vdown * p.couple_down().transpose();
  g.couple_down() += p.text_down().transpose() * g_vdown;

  if (!g.all_finite()) throw DivergenceError("non-finite gradient");
  return {f.loss, std::move(g)};
}

}  // namespace pm
