#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace pm {

enum class ItemRole { kOriginal, kAugmentation };

struct ClassRecord {
  std::int64_t id = 0;
  std::string name;
  bool pseudo = false;  // placeholder classname such as "C3"
  std::int64_t text_vector_index = 0;

  bool operator==(const ClassRecord&) const = default;
};

struct ItemRecord {
  std::int64_t id = 0;
  std::int64_t class_id = 0;
  ItemRole role = ItemRole::kOriginal;
  std::optional<std::int64_t> parent_id;  // set iff role == kAugmentation
  std::int64_t vector_index = 0;
  // Perturbation scale the synthetic generator used for this row. Absent for
  // exported banks.
  std::optional<double> noise_scale;

  bool operator==(const ItemRecord&) const = default;
};

using VectorMatrix =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Frozen text and image embeddings with class/role metadata.
///
/// Rows of `vectors` are unit-norm; text rows and image rows share the
/// matrix. Immutable after load, so one instance can be shared read-only by
/// any number of episode workers.
class EmbeddingBank {
 public:
  int dim = 0;
  std::vector<ClassRecord> classes;
  std::vector<ItemRecord> items;
  VectorMatrix vectors;
  // Free-form producer metadata (augmentation settings, generator params).
  nlohmann::json provenance = nlohmann::json::object();

  /// Throws BankError naming the first violated invariant.
  void validate() const;

  /// Rebuilds the id lookup tables. Called by load_bank and the generator;
  /// call it after mutating classes/items by hand.
  void index();

  const ClassRecord& class_by_id(std::int64_t id) const;
  const ItemRecord& item_by_id(std::int64_t id) const;
  bool has_class(std::int64_t id) const { return class_pos_.count(id) != 0; }
  bool has_item(std::int64_t id) const { return item_pos_.count(id) != 0; }

  Eigen::VectorXd row(std::int64_t vector_index) const;
  Eigen::VectorXd text_vector(std::int64_t class_id) const;
  Eigen::VectorXd item_vector(std::int64_t item_id) const;

  /// Original item ids of a class, ascending.
  std::vector<std::int64_t> originals_of(std::int64_t class_id) const;
  /// Augmentation item ids whose parent is `item_id`, ascending.
  std::vector<std::int64_t> augmentations_of(std::int64_t item_id) const;
  /// Class ids in ascending order.
  std::vector<std::int64_t> class_ids() const;

  bool operator==(const EmbeddingBank& other) const;

 private:
  std::unordered_map<std::int64_t, std::size_t> class_pos_;
  std::unordered_map<std::int64_t, std::size_t> item_pos_;
  std::unordered_map<std::int64_t, std::vector<std::int64_t>> originals_;
  std::unordered_map<std::int64_t, std::vector<std::int64_t>> children_;
};

inline constexpr int kBankFormatVersion = 1;
inline constexpr double kUnitNormTolerance = 1e-3;

/// Reads manifest.json + vectors.bin from `dir` and validates the result.
EmbeddingBank load_bank(const std::filesystem::path& dir);

/// Writes a validated bank to `dir` (created if missing).
void save_bank(const EmbeddingBank& bank, const std::filesystem::path& dir);

nlohmann::json manifest_to_json(const EmbeddingBank& bank);

struct SyntheticBankParams {
  int classes = 5;
  int dim = 64;
  // Target pairwise L2 distance between class mean directions. Exact for
  // values up to sqrt(2) when classes + 1 <= dim; saturates above that.
  double separation = 0.3;
  // Text vector = normalize((1 - a) * random + a * class_mean).
  double text_alignment = 1.0;
  int augs_per_image = 30;
  int originals_per_class = 20;
  // Expected L2 norm of the gaussian perturbation added to class means.
  double noise = 0.5;
  // Expected L2 norm of an augmentation's perturbation of its parent, as a
  // fraction of `noise`.
  double aug_noise_ratio = 0.5;
  // A poor augmentation has its perturbation multiplied by this factor.
  double poor_aug_probability = 0.2;
  double poor_aug_factor = 10.0;
  std::uint64_t seed = 0;
};

/// Desk-scale stand-in for frozen encoder features. Deterministic in `seed`.
EmbeddingBank generate_synthetic_bank(const SyntheticBankParams& params);

}  // namespace pm
