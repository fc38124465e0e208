#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <span>
#include <vector>

#include "promptmargin/model.hpp"

namespace pm {

struct PoolEntry {
  std::int64_t id = 0;
  Eigen::VectorXd vector;
};

/// Keeps the r augmentations whose prompted image embedding has the highest
/// cosine similarity to the prompted class text embedding. Ties rank the
/// smaller id first. Returned ids are ascending.
std::vector<std::int64_t> select_augmentations(const PromptState& state,
                                               const Eigen::VectorXd& class_text_vec,
                                               std::span<const PoolEntry> pool,
                                               std::size_t r);

/// Similarities used by select_augmentations, in pool order.
Eigen::VectorXd augmentation_scores(const PromptState& state,
                                    const Eigen::VectorXd& class_text_vec,
                                    std::span<const PoolEntry> pool);

}  // namespace pm
