#include "doctest.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <map>
#include <set>

#include "promptmargin/episodes.hpp"
#include "promptmargin/error.hpp"
#include "promptmargin/rng.hpp"

using namespace pm;

namespace {

EmbeddingBank bank_with(int classes, int originals, int augs = 0, int dim = 8) {
  SyntheticBankParams p;
  p.classes = classes;
  p.dim = dim;
  p.originals_per_class = originals;
  p.augs_per_image = augs;
  p.seed = 17;
  return generate_synthetic_bank(p);
}

}  // namespace

TEST_CASE("splitmix64 reference values") {
  // First outputs of the reference splitmix64 stream started at state 0.
  CHECK(splitmix64(0) == 0xE220A8397B1DCDAFull);
  CHECK(episode_seed(5, 3) == splitmix64(5 ^ 3));
}

TEST_CASE("5 classes x 16 originals, 5-way 1-shot 15-query uses everything") {
  const auto bank = bank_with(5, 16);
  const auto ep = sample_episode(bank, 5, 1, 15, 0, 0);
  CHECK(ep.support_ids.size() == 5);
  CHECK(ep.query_ids.size() == 75);

  std::vector<std::int64_t> classes = ep.class_ids;
  std::sort(classes.begin(), classes.end());
  CHECK(classes == bank.class_ids());

  std::set<std::int64_t> used(ep.support_ids.begin(), ep.support_ids.end());
  used.insert(ep.query_ids.begin(), ep.query_ids.end());
  CHECK(used.size() == 80);
  for (const auto& item : bank.items) CHECK(used.count(item.id) == 1);

  for (std::size_t i = 0; i < ep.support_ids.size(); ++i) {
    CHECK(bank.item_by_id(ep.support_ids[i]).class_id ==
          ep.class_ids[static_cast<std::size_t>(ep.support_label(i))]);
  }
  for (std::size_t i = 0; i < ep.query_ids.size(); ++i) {
    CHECK(bank.item_by_id(ep.query_ids[i]).class_id ==
          ep.class_ids[static_cast<std::size_t>(ep.query_label(i))]);
  }
}

TEST_CASE("sampling is a pure function of (master seed, index)") {
  const auto bank = bank_with(10, 20);
  for (std::uint64_t i = 0; i < 20; ++i) {
    CHECK(sample_episode(bank, 5, 1, 15, 99, i) == sample_episode(bank, 5, 1, 15, 99, i));
  }
  CHECK_FALSE(sample_episode(bank, 5, 1, 15, 99, 0) == sample_episode(bank, 5, 1, 15, 98, 0));
}

TEST_CASE("distinct episode indices rarely repeat an episode") {
  const auto bank = bank_with(10, 20);
  std::set<std::vector<std::int64_t>> seen;
  int collisions = 0;
  for (std::uint64_t i = 0; i < 200; ++i) {
    const auto ep = sample_episode(bank, 5, 1, 15, 3, i);
    std::vector<std::int64_t> key = ep.class_ids;
    key.insert(key.end(), ep.support_ids.begin(), ep.support_ids.end());
    if (!seen.insert(key).second) ++collisions;
  }
  CHECK(collisions == 0);
}

TEST_CASE("support and query are disjoint and class-consistent") {
  std::mt19937_64 gen(4);
  for (int trial = 0; trial < 1000; ++trial) {
    const int classes = 2 + static_cast<int>(gen() % 6);
    const int way = 2 + static_cast<int>(gen() % static_cast<unsigned>(classes - 1));
    const int shot = 1 + static_cast<int>(gen() % 3);
    const int query = 1 + static_cast<int>(gen() % 4);
    static std::map<std::pair<int, int>, EmbeddingBank> cache;
    const int originals = shot + query + static_cast<int>(gen() % 3);
    auto key = std::make_pair(classes, originals);
    if (!cache.count(key)) cache.emplace(key, bank_with(classes, originals, 0, 4));
    const auto& bank = cache.at(key);

    const auto ep = sample_episode(bank, way, shot, query, gen(), gen());
    REQUIRE(ep.class_ids.size() == static_cast<std::size_t>(way));
    REQUIRE(ep.support_ids.size() == static_cast<std::size_t>(way * shot));
    REQUIRE(ep.query_ids.size() == static_cast<std::size_t>(way * query));
    std::set<std::int64_t> classes_seen(ep.class_ids.begin(), ep.class_ids.end());
    CHECK(classes_seen.size() == ep.class_ids.size());
    std::set<std::int64_t> support(ep.support_ids.begin(), ep.support_ids.end());
    CHECK(support.size() == ep.support_ids.size());
    for (std::size_t i = 0; i < ep.query_ids.size(); ++i) {
      CHECK(support.count(ep.query_ids[i]) == 0);
      const auto& item = bank.item_by_id(ep.query_ids[i]);
      CHECK(item.role == ItemRole::kOriginal);
      CHECK(item.class_id == ep.class_ids[static_cast<std::size_t>(ep.query_label(i))]);
    }
  }
}

TEST_CASE("infeasible requests name the short class") {
  auto bank = bank_with(3, 4);
  CHECK_THROWS_AS(sample_episode(bank, 4, 1, 1, 0, 0), SamplingError);
  CHECK_THROWS_WITH_AS(check_episode_feasible(bank, 3, 1, 4), doctest::Contains("class 0"),
                       SamplingError);
  CHECK_NOTHROW(check_episode_feasible(bank, 3, 1, 3));
  CHECK_THROWS_AS(check_episode_feasible(bank, 1, 1, 3), ConfigError);
  CHECK_THROWS_AS(sample_episode(bank, 3, 0, 3, 0, 0), ConfigError);
}

TEST_CASE("aggregate_results") {
  const std::array<double, 2> half = {0.0, 1.0};
  const auto a = aggregate_results(half);
  CHECK(a.mean == doctest::Approx(0.5));
  CHECK(a.ci95 == doctest::Approx(1.96 * std::sqrt(0.5) / std::sqrt(2.0)));
  CHECK(a.ci95 == doctest::Approx(0.98));

  const std::array<double, 1> one = {0.7};
  CHECK(aggregate_results(one).mean == 0.7);
  CHECK(aggregate_results(one).ci95 == 0.0);

  const std::array<double, 4> flat = {0.25, 0.25, 0.25, 0.25};
  CHECK(aggregate_results(flat).ci95 == 0.0);

  CHECK_THROWS(aggregate_results(std::span<const double>{}));
}

TEST_CASE("Bernoulli(0.8) accuracies: interval covers the true mean about 95% of the time") {
  std::mt19937_64 gen(2024);
  std::bernoulli_distribution coin(0.8);
  int covered = 0;
  const int runs = 2000;
  for (int run = 0; run < runs; ++run) {
    std::vector<double> accs(600);
    for (auto& a : accs) a = coin(gen) ? 1.0 : 0.0;
    const auto agg = aggregate_results(accs);
    CHECK(agg.ci95 == doctest::Approx(1.96 * std::sqrt(0.16 / 600.0)).epsilon(0.1));
    if (std::abs(agg.mean - 0.8) <= agg.ci95) ++covered;
  }
  CHECK(static_cast<double>(covered) / runs == doctest::Approx(0.95).epsilon(0.02));
}

TEST_CASE("finalize_run excludes failed episodes") {
  RunResult r;
  r.episodes.resize(3);
  r.episodes[0].accuracy = 1.0;
  r.episodes[1].failed = true;
  r.episodes[1].accuracy = 0.0;
  r.episodes[2].accuracy = 0.5;
  finalize_run(r);
  CHECK(r.failed_episodes == 1);
  CHECK(r.episode_accuracies == std::vector<double>{1.0, 0.5});
  CHECK(r.mean_accuracy == doctest::Approx(0.75));

  const auto j = run_result_to_json(r, false);
  CHECK(j.at("episodes").size() == 3);
  CHECK(j.dump().find("wall_seconds") == std::string::npos);
  CHECK(run_result_to_json(r, true).dump().find("wall_seconds") != std::string::npos);
}
