#include "doctest.h"

#include <random>

#include "promptmargin/error.hpp"
#include "promptmargin/selaug.hpp"
#include "test_support.hpp"

using namespace pm;
using pm::testing::unit2;

TEST_CASE("identity prompts keep the closest augmentation") {
  const auto state = init_prompt_state(2, 1, 0, 0.0);
  const std::vector<PoolEntry> pool = {{1, unit2(1, 0)}, {2, unit2(0.6, 0.8)}, {3, unit2(0, 1)}};
  CHECK(select_augmentations(state, unit2(1, 0), pool, 1) == std::vector<std::int64_t>{1});
  CHECK(select_augmentations(state, unit2(1, 0), pool, 2) == std::vector<std::int64_t>{1, 2});
  CHECK(select_augmentations(state, unit2(0, 1), pool, 1) == std::vector<std::int64_t>{3});
  CHECK(select_augmentations(state, unit2(1, 0), pool, 3) == std::vector<std::int64_t>{1, 2, 3});
  CHECK(select_augmentations(state, unit2(1, 0), pool, 0).empty());
  CHECK_THROWS_AS(select_augmentations(state, unit2(1, 0), pool, 4), ConfigError);

  const auto scores = augmentation_scores(state, unit2(1, 0), pool);
  CHECK(scores[0] == doctest::Approx(1.0));
  CHECK(scores[1] == doctest::Approx(0.6));
  CHECK(scores[2] == doctest::Approx(0.0));
}

TEST_CASE("ties keep the smaller id and output is ascending") {
  const auto state = init_prompt_state(2, 1, 0, 0.0);
  const std::vector<PoolEntry> pool = {{9, unit2(1, 0)}, {4, unit2(1, 0)}, {7, unit2(1, 0)}};
  CHECK(select_augmentations(state, unit2(1, 0), pool, 2) == std::vector<std::int64_t>{4, 7});
}

TEST_CASE("top-15 of 30 matches a full sort") {
  std::mt19937_64 gen(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto state = init_prompt_state(16, 2, static_cast<std::uint64_t>(trial), 1.0);
    std::vector<PoolEntry> pool;
    std::vector<std::int64_t> ids;
    for (int k = 0; k < 30; ++k) {
      pool.push_back({100 + k * 3, pm::testing::random_unit(gen, 16)});
      ids.push_back(pool.back().id);
    }
    const Eigen::VectorXd text = pm::testing::random_unit(gen, 16);
    const auto s = augmentation_scores(state, text, pool);
    const std::vector<double> scores(s.data(), s.data() + s.size());
    CHECK(select_augmentations(state, text, pool, 15) ==
          pm::testing::brute_force_top(scores, ids, 15));
  }
}

TEST_CASE("selection depends only on the score ordering") {
  // Scaling the class text leaves every cosine's ordering unchanged.
  std::mt19937_64 gen(6);
  for (int trial = 0; trial < 50; ++trial) {
    const auto state = init_prompt_state(8, 2, static_cast<std::uint64_t>(trial), 0.5);
    std::vector<PoolEntry> pool;
    for (int k = 0; k < 12; ++k) pool.push_back({k, pm::testing::random_unit(gen, 8)});
    const Eigen::VectorXd text = pm::testing::random_unit(gen, 8);
    CHECK(select_augmentations(state, text, pool, 5) ==
          select_augmentations(state, 7.5 * text, pool, 5));
  }
}

TEST_CASE("noisier augmentations are selected less often") {
  int clean_kept = 0, noisy_kept = 0, clean_total = 0, noisy_total = 0;
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    SyntheticBankParams p;
    p.classes = 2;
    p.dim = 32;
    p.separation = 1.0;
    p.text_alignment = 1.0;
    p.noise = 0.3;
    p.originals_per_class = 1;
    p.augs_per_image = 30;
    p.seed = seed;
    const auto bank = generate_synthetic_bank(p);
    const auto state = init_prompt_state(p.dim, 2, seed);
    const auto original = bank.originals_of(0).front();
    std::vector<PoolEntry> pool;
    for (auto id : bank.augmentations_of(original)) pool.push_back({id, bank.item_vector(id)});
    const auto kept = select_augmentations(state, bank.text_vector(0), pool, 15);
    const double base = p.noise * p.aug_noise_ratio;
    for (const auto& e : pool) {
      const bool noisy = *bank.item_by_id(e.id).noise_scale > 1.5 * base;
      const bool sel = std::find(kept.begin(), kept.end(), e.id) != kept.end();
      (noisy ? noisy_total : clean_total) += 1;
      if (sel) (noisy ? noisy_kept : clean_kept) += 1;
    }
  }
  const double clean_rate = static_cast<double>(clean_kept) / clean_total;
  const double noisy_rate = static_cast<double>(noisy_kept) / noisy_total;
  CHECK(noisy_rate < clean_rate);
}

TEST_CASE("pool vectors must match the prompt dimension") {
  const auto state = init_prompt_state(4, 1, 0);
  const std::vector<PoolEntry> pool = {{1, unit2(1, 0)}};
  CHECK_THROWS_AS(augmentation_scores(state, Eigen::VectorXd::Unit(4, 0), pool), ShapeError);
}
