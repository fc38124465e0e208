#pragma once

#include <Eigen/Core>
#include <span>
#include <vector>

#include "promptmargin/model.hpp"

namespace pm {

struct LossBreakdown {
  double ce = 0.0;
  double reg_text = 0.0;
  double reg_vision = 0.0;
  double mu_t = 0.0;
  double total = 0.0;
};

struct LossWeights {
  double alpha = 1.0;  // text margin term
  double beta = 1.0;   // image-prototype margin term
  // Treat mu_t as a constant in the backward pass. Off by default: gradients
  // flow through mu_t.
  bool mu_detached = false;
};

/// One episode's training data in column form.
struct TrainingBatch {
  Eigen::MatrixXd images;     // D x M frozen support vectors (unit columns)
  std::vector<int> labels;    // M labels in [0, N)
  Eigen::MatrixXd texts;      // D x N frozen class text vectors
};

/// -log softmax(logits)[label], evaluated with a max shift.
double cross_entropy(const Eigen::VectorXd& logits, int label);

/// Mean squared L2 distance over unordered pairs.
double mean_pairwise_sq_distance(std::span<const Eigen::VectorXd> vectors);

/// Mean over unordered pairs of (squared distance - mu)^2.
double margin_regularizer(std::span<const Eigen::VectorXd> vectors, double mu);

/// Column-form variants used by the training path.
double mean_pairwise_sq_distance(const Eigen::MatrixXd& columns);
double margin_regularizer(const Eigen::MatrixXd& columns, double mu);

/// Forward value of L_CE + alpha R(text) + beta R(prototypes).
LossBreakdown total_loss(const PromptState& state, const TrainingBatch& batch,
                         const LossWeights& weights);

struct LossAndGrads {
  LossBreakdown loss;
  PromptParams grads;
};

/// Forward pass plus exact reverse-mode gradients with respect to all four
/// parameter blocks. Throws DivergenceError naming the first non-finite term.
LossAndGrads total_loss_and_grads(const PromptState& state,
                                  const TrainingBatch& batch,
                                  const LossWeights& weights);

}  // namespace pm
