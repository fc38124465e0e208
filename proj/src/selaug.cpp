#include "promptmargin/selaug.hpp"

#include <algorithm>
#include <numeric>

#include "promptmargin/error.hpp"

namespace pm {

Eigen::VectorXd augmentation_scores(const PromptState& state,
                                    const Eigen::VectorXd& class_text_vec,
                                    std::span<const PoolEntry> pool) {
  Eigen::VectorXd scores(static_cast<Eigen::Index>(pool.size()));
  if (pool.empty()) return scores;
  Eigen::MatrixXd images(state.dim(), static_cast<Eigen::Index>(pool.size()));
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (pool[i].vector.size() != state.dim()) {
      throw ShapeError("pool vector dimension mismatch");
    }
    images.col(static_cast<Eigen::Index>(i)) = pool[i].vector;
  }
  const Eigen::VectorXd text = embed_with_prompts(state, class_text_vec, Branch::kText);
  scores = embed_columns(state, images, Branch::kVision).transpose() * text;
  return scores;
}

std::vector<std::int64_t> select_augmentations(const PromptState& state,
                                               const Eigen::VectorXd& class_text_vec,
                                               std::span<const PoolEntry> pool,
                                               std::size_t r) {
  if (r > pool.size()) {
    throw ConfigError("cannot select " + std::to_string(r) + " of " +
                      std::to_string(pool.size()) + " augmentations");
  }
  const Eigen::VectorXd scores = augmentation_scores(state, class_text_vec, pool);
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto better = [&](std::size_t a, std::size_t b) {
    const double sa = scores[static_cast<Eigen::Index>(a)];
    const double sb = scores[static_cast<Eigen::Index>(b)];
    if (sa != sb) return sa > sb;
    return pool[a].id < pool[b].id;
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(r),
                    order.end(), better);
  std::vector<std::int64_t> ids;
  ids.reserve(r);
  for (std::size_t i = 0; i < r; ++i) ids.push_back(pool[order[i]].id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

}  // namespace pm
