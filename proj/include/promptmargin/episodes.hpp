#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "promptmargin/bank.hpp"

namespace pm {

/// One N-way k-shot task. Support and query ids are grouped by class in the
/// order of `class_ids`; position in `class_ids` is the episode label.
struct Episode {
  int way = 0;
  int shot = 0;
  int query = 0;
  std::uint64_t episode_index = 0;
  std::uint64_t episode_seed = 0;
  std::vector<std::int64_t> class_ids;
  std::vector<std::int64_t> support_ids;
  std::vector<std::int64_t> query_ids;

  int support_label(std::size_t i) const { return static_cast<int>(i) / shot; }
  int query_label(std::size_t i) const { return static_cast<int>(i) / query; }

  bool operator==(const Episode&) const = default;
};

/// Throws SamplingError naming the first class (ascending id) that cannot
/// supply shot + query originals, or if the bank has fewer than `way` classes.
void check_episode_feasible(const EmbeddingBank& bank, int way, int shot, int query);

/// Samples classes and items without replacement from a generator seeded by
/// splitmix64(master_seed XOR episode_index).
Episode sample_episode(const EmbeddingBank& bank, int way, int shot, int query,
                       std::uint64_t master_seed, std::uint64_t episode_index);

struct Aggregate {
  double mean = 0.0;
  double ci95 = 0.0;
};

/// Mean and 1.96 * sample-stddev / sqrt(n); ci95 is 0 for a single value.
Aggregate aggregate_results(std::span<const double> accs);

struct EpisodeRecord {
  std::uint64_t episode_index = 0;
  std::uint64_t episode_seed = 0;
  bool failed = false;
  std::string error;
  double accuracy = 0.0;
  std::vector<std::int64_t> class_ids;
  std::vector<double> loss_trace;
  std::vector<std::int64_t> selected_augmentation_ids;
  double wall_seconds = 0.0;
};

struct RunResult {
  std::vector<double> episode_accuracies;  // successful episodes, index order
  double mean_accuracy = 0.0;
  double ci95 = 0.0;
  int failed_episodes = 0;
  std::vector<EpisodeRecord> episodes;     // every episode, index order
};

/// Builds the summary fields from `episodes`.
void finalize_run(RunResult& result);

nlohmann::json run_result_to_json(const RunResult& result, bool include_timing = true);

}  // namespace pm
