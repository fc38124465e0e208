#include "promptmargin/episodes.hpp"

#include <cmath>

#include "promptmargin/error.hpp"
#include "promptmargin/rng.hpp"

namespace pm {

namespace {

/// Moves `count` uniformly chosen elements to the front (partial Fisher-Yates).
template <typename T>
void shuffle_prefix(std::vector<T>& values, std::size_t count, Rng& rng) {
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(values.size() - i));
    std::swap(values[i], values[j]);
  }
}

}  // namespace

void check_episode_feasible(const EmbeddingBank& bank, int way, int shot, int query) {
  if (way < 2 || shot < 1 || query < 1) {
    throw ConfigError("need way >= 2, shot >= 1, query >= 1");
  }
  if (static_cast<int>(bank.classes.size()) < way) {
    throw SamplingError("bank has " + std::to_string(bank.classes.size()) +
                        " classes, episode needs " + std::to_string(way));
  }
  const auto needed = static_cast<std::size_t>(shot + query);
  for (auto id : bank.class_ids()) {
    const auto have = bank.originals_of(id).size();
    if (have < needed) {
      throw SamplingError("class " + std::to_string(id) + " (" +
                          bank.class_by_id(id).name + ") has " +
                          std::to_string(have) + " originals, needs " +
                          std::to_string(needed) + " for shot+query");
    }
  }
}

Episode sample_episode(const EmbeddingBank& bank, int way, int shot, int query,
                       std::uint64_t master_seed, std::uint64_t episode_index) {
  if (way < 2 || shot < 1 || query < 1) {
    throw ConfigError("need way >= 2, shot >= 1, query >= 1");
  }
  auto classes = bank.class_ids();
  if (static_cast<int>(classes.size()) < way) {
    throw SamplingError("bank has " + std::to_string(classes.size()) +
                        " classes, episode needs " + std::to_string(way));
  }

  Episode ep;
  ep.way = way;
  ep.shot = shot;
  ep.query = query;
  ep.episode_index = episode_index;
  ep.episode_seed = episode_seed(master_seed, episode_index);
  Rng rng(ep.episode_seed);

  shuffle_prefix(classes, static_cast<std::size_t>(way), rng);
  ep.class_ids.assign(classes.begin(), classes.begin() + way);

  const auto needed = static_cast<std::size_t>(shot + query);
  std::vector<std::vector<std::int64_t>> picked;
  for (auto cls : ep.class_ids) {
    auto originals = bank.originals_of(cls);
    if (originals.size() < needed) {
      throw SamplingError("class " + std::to_string(cls) + " (" +
                          bank.class_by_id(cls).name + ") has " +
                          std::to_string(originals.size()) +
                          " originals, needs " + std::to_string(needed));
    }
    shuffle_prefix(originals, needed, rng);
    originals.resize(needed);
    picked.push_back(std::move(originals));
  }
  for (const auto& ids : picked) {
    ep.support_ids.insert(ep.support_ids.end(), ids.begin(), ids.begin() + shot);
  }
  for (const auto& ids : picked) {
    ep.query_ids.insert(ep.query_ids.end(), ids.begin() + shot, ids.end());
  }
  return ep;
}

Aggregate aggregate_results(std::span<const double> accs) {
  if (accs.empty()) throw ConfigError("cannot aggregate an empty result list");
  const double n = static_cast<double>(accs.size());
  double mean = 0.0;
  for (double a : accs) mean += a;
  mean /= n;
  if (accs.size() == 1) return {mean, 0.0};
  double ss = 0.0;
  for (double a : accs) ss += (a - mean) * (a - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  return {mean, 1.96 * sd / std::sqrt(n)};
}

void finalize_run(RunResult& result) {
  result.episode_accuracies.clear();
  result.failed_episodes = 0;
  for (const auto& ep : result.episodes) {
    if (ep.failed) {
      ++result.failed_episodes;
    } else {
      result.episode_accuracies.push_back(ep.accuracy);
    }
  }
  if (result.episode_accuracies.empty()) {
    result.mean_accuracy = 0.0;
    result.ci95 = 0.0;
    return;
  }
  const auto agg = aggregate_results(result.episode_accuracies);
  result.mean_accuracy = agg.mean;
  result.ci95 = agg.ci95;
}

nlohmann::json run_result_to_json(const RunResult& result, bool include_timing) {
  nlohmann::json episodes = nlohmann::json::array();
  for (const auto& ep : result.episodes) {
    nlohmann::json j = {{"episode_index", ep.episode_index},
                        {"episode_seed", ep.episode_seed},
                        {"failed", ep.failed},
                        {"accuracy", ep.accuracy},
                        {"class_ids", ep.class_ids},
                        {"loss_trace", ep.loss_trace},
                        {"selected_augmentation_ids", ep.selected_augmentation_ids}};
    if (ep.failed) j["error"] = ep.error;
    if (include_timing) j["wall_seconds"] = ep.wall_seconds;
    episodes.push_back(std::move(j));
  }
  return {{"mean_accuracy", result.mean_accuracy},
          {"ci95", result.ci95},
          {"episode_count", result.episodes.size()},
          {"failed_episodes", result.failed_episodes},
          {"episode_accuracies", result.episode_accuracies},
          {"episodes", std::move(episodes)}};
}

}  // namespace pm
