#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "promptmargin/bank.hpp"
#include "promptmargin/episodes.hpp"
#include "promptmargin/model.hpp"
#include "promptmargin/objective.hpp"
#include "promptmargin/selaug.hpp"

namespace pm {

struct TrainConfig {
  int epochs = 150;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double tau = kDefaultTemperature;
  double alpha = 1.0;
  double beta = 1.0;
  int rank = kDefaultRank;
  double init_scale = kDefaultInitScale;
  // Augmentations kept per support image. Unset: 15 for 1-shot, 3 otherwise.
  std::optional<int> select_per_image;
  bool select_all = false;           // train on the whole pool instead
  bool reselect_each_epoch = false;
  bool mu_detached = false;
  std::uint64_t master_seed = 0;
  int episodes = 600;
  int way = 5;
  int shot = 1;
  int query = 15;
  int workers = 1;

  /// Throws ConfigError on out-of-range values.
  void validate() const;
  /// Augmentations kept per class, before clamping to the pool size.
  int selection_per_class() const;
  LossWeights loss_weights() const { return {alpha, beta, mu_detached}; }
};

/// Applies one `key = value` setting. Unknown keys throw ConfigError.
void apply_config_entry(TrainConfig& config, const std::string& key,
                        const std::string& value);

/// Reads `key = value` lines ('#' starts a comment) into `config`.
void load_train_config(const std::filesystem::path& path, TrainConfig& config);

/// Classical momentum: v <- momentum * v + g; p <- p - lr * v.
void sgd_momentum_step(std::span<Eigen::MatrixXd> params,
                       std::span<const Eigen::MatrixXd> grads,
                       std::span<Eigen::MatrixXd> velocity, double lr,
                       double momentum);

struct TrainedEpisode {
  PromptState initial_state;
  PromptState state;
  std::vector<double> loss_trace;  // total loss at the start of each epoch
  LossBreakdown final_loss;
  std::vector<std::int64_t> selected_ids;
  TrainingBatch batch;             // as used in the last epoch
};

/// Per-class augmentation pools and support originals of an episode.
struct SupportData {
  Eigen::MatrixXd texts;                       // D x N
  std::vector<std::vector<std::int64_t>> originals;  // per class
  std::vector<std::vector<PoolEntry>> pools;   // per class
};

SupportData gather_support(const EmbeddingBank& bank, const Episode& episode);

/// Originals plus the selected augmentations of every class.
TrainingBatch build_training_batch(const EmbeddingBank& bank,
                                   const SupportData& support,
                                   std::span<const std::int64_t> selected_ids);

/// Seed for a given episode's prompt initialization.
std::uint64_t prompt_init_seed(const Episode& episode);

TrainedEpisode train_episode(const EmbeddingBank& bank, const Episode& episode,
                             const TrainConfig& config);

/// Query accuracy with frozen prompts. Ties go to the lowest class index.
double evaluate_episode(const PromptState& state, const EmbeddingBank& bank,
                        const Episode& episode);

struct RunArtifacts {
  std::optional<std::filesystem::path> checkpoint_dir;
  std::optional<std::filesystem::path> matrices_dir;
};

/// Samples, trains and evaluates config.episodes episodes. Episode outcomes
/// do not depend on config.workers. Diverged episodes are recorded as failed
/// and excluded from the aggregate.
RunResult run_benchmark(const EmbeddingBank& bank, const TrainConfig& config,
                        const RunArtifacts& artifacts = {});

}  // namespace pm
