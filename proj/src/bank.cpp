#include "promptmargin/bank.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "promptmargin/error.hpp"
#include "promptmargin/rng.hpp"

namespace pm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kManifestName = "manifest.json";
constexpr const char* kVectorsName = "vectors.bin";

std::uint32_t byteswap32(std::uint32_t v) {
  return ((v & 0x000000FFu) << 24) | ((v & 0x0000FF00u) << 8) |
         ((v & 0x00FF0000u) >> 8) | ((v & 0xFF000000u) >> 24);
}

std::string role_name(ItemRole role) {
  return role == ItemRole::kOriginal ? "original" : "augmentation";
}

ItemRole parse_role(const std::string& s) {
  if (s == "original") return ItemRole::kOriginal;
  if (s == "augmentation") return ItemRole::kAugmentation;
  throw BankError("unknown item role '" + s + "'");
}

Eigen::VectorXd gaussian_vector(Rng& rng, int dim) {
  Eigen::VectorXd v(dim);
  for (int i = 0; i < dim; ++i) v[i] = rng.normal();
  return v;
}

Eigen::VectorXd random_unit(Rng& rng, int dim) {
  Eigen::VectorXd v = gaussian_vector(rng, dim);
  while (v.norm() == 0.0) v = gaussian_vector(rng, dim);
  return v.normalized();
}

}  // namespace

void EmbeddingBank::index() {
  class_pos_.clear();
  item_pos_.clear();
  originals_.clear();
  children_.clear();
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (!class_pos_.emplace(classes[i].id, i).second) {
      throw BankError("duplicate class id " + std::to_string(classes[i].id));
    }
  }
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& item = items[i];
    if (!item_pos_.emplace(item.id, i).second) {
      throw BankError("duplicate item id " + std::to_string(item.id));
    }
    if (item.role == ItemRole::kOriginal) {
      originals_[item.class_id].push_back(item.id);
    } else if (item.parent_id) {
      children_[*item.parent_id].push_back(item.id);
    }
  }
  for (auto& [_, ids] : originals_) std::sort(ids.begin(), ids.end());
  for (auto& [_, ids] : children_) std::sort(ids.begin(), ids.end());
}

void EmbeddingBank::validate() const {
  if (dim <= 0) throw BankError("dim must be positive");
  if (vectors.cols() != dim) {
    throw BankError("vector matrix has " + std::to_string(vectors.cols()) +
                    " columns, manifest dim is " + std::to_string(dim));
  }
  const auto rows = static_cast<std::int64_t>(vectors.rows());
  std::unordered_set<std::int64_t> used_rows;
  auto claim_row = [&](std::int64_t row, const std::string& who) {
    if (row < 0 || row >= rows) {
      throw BankError(who + " references vector index " + std::to_string(row) +
                      " outside [0, " + std::to_string(rows) + ")");
    }
    if (!used_rows.insert(row).second) {
      throw BankError(who + " references vector index " + std::to_string(row) +
                      " already used by another record");
    }
  };

  std::unordered_set<std::int64_t> class_ids;
  for (const auto& c : classes) {
    if (!class_ids.insert(c.id).second) {
      throw BankError("duplicate class id " + std::to_string(c.id));
    }
    claim_row(c.text_vector_index, "class " + std::to_string(c.id));
  }

  std::unordered_map<std::int64_t, const ItemRecord*> by_id;
  for (const auto& item : items) {
    if (!by_id.emplace(item.id, &item).second) {
      throw BankError("duplicate item id " + std::to_string(item.id));
    }
  }
  for (const auto& item : items) {
    const std::string who = "item " + std::to_string(item.id);
    if (!class_ids.count(item.class_id)) {
      throw BankError(who + " has dangling class_id " +
                      std::to_string(item.class_id));
    }
    claim_row(item.vector_index, who);
    if (item.role == ItemRole::kOriginal) {
      if (item.parent_id) {
        throw BankError(who + " is an original but has a parent_id");
      }
      continue;
    }
    if (!item.parent_id) {
      throw BankError(who + " is an augmentation without parent_id");
    }
    auto parent = by_id.find(*item.parent_id);
    if (parent == by_id.end()) {
      throw BankError(who + " has dangling parent_id " +
                      std::to_string(*item.parent_id));
    }
    if (parent->second->role != ItemRole::kOriginal ||
        parent->second->class_id != item.class_id) {
      throw BankError(who + " parent " + std::to_string(*item.parent_id) +
                      " is not an original of class " +
                      std::to_string(item.class_id));
    }
  }

  for (std::int64_t r = 0; r < rows; ++r) {
    const double norm = vectors.row(r).cast<double>().norm();
    if (!std::isfinite(norm) || std::abs(norm - 1.0) > kUnitNormTolerance) {
      std::ostringstream msg;
      msg << "vector row " << r << " has L2 norm " << norm
          << ", expected 1 within " << kUnitNormTolerance;
      throw BankError(msg.str());
    }
  }
}

const ClassRecord& EmbeddingBank::class_by_id(std::int64_t id) const {
  auto it = class_pos_.find(id);
  if (it == class_pos_.end()) {
    throw BankError("unknown class id " + std::to_string(id));
  }
  return classes[it->second];
}

const ItemRecord& EmbeddingBank::item_by_id(std::int64_t id) const {
  auto it = item_pos_.find(id);
  if (it == item_pos_.end()) {
    throw BankError("unknown item id " + std::to_string(id));
  }
  return items[it->second];
}

Eigen::VectorXd EmbeddingBank::row(std::int64_t vector_index) const {
  return vectors.row(vector_index).cast<double>().transpose();
}

Eigen::VectorXd EmbeddingBank::text_vector(std::int64_t class_id) const {
  return row(class_by_id(class_id).text_vector_index);
}

Eigen::VectorXd EmbeddingBank::item_vector(std::int64_t item_id) const {
  return row(item_by_id(item_id).vector_index);
}

std::vector<std::int64_t> EmbeddingBank::originals_of(
    std::int64_t class_id) const {
  auto it = originals_.find(class_id);
  return it == originals_.end() ? std::vector<std::int64_t>{} : it->second;
}

std::vector<std::int64_t> EmbeddingBank::augmentations_of(
    std::int64_t item_id) const {
  auto it = children_.find(item_id);
  return it == children_.end() ? std::vector<std::int64_t>{} : it->second;
}

std::vector<std::int64_t> EmbeddingBank::class_ids() const {
  std::vector<std::int64_t> ids;
  ids.reserve(classes.size());
  for (const auto& c : classes) ids.push_back(c.id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

bool EmbeddingBank::operator==(const EmbeddingBank& other) const {
  if (dim != other.dim || classes != other.classes || items != other.items ||
      provenance != other.provenance ||
      vectors.rows() != other.vectors.rows() ||
      vectors.cols() != other.vectors.cols()) {
    return false;
  }
  return std::memcmp(vectors.data(), other.vectors.data(),
                     sizeof(float) * static_cast<std::size_t>(vectors.size())) ==
         0;
}

json manifest_to_json(const EmbeddingBank& bank) {
  json classes = json::array();
  for (const auto& c : bank.classes) {
    classes.push_back({{"id", c.id},
                       {"name", c.name},
                       {"pseudo", c.pseudo},
                       {"text_vector_index", c.text_vector_index}});
  }
  json items = json::array();
  for (const auto& item : bank.items) {
    json j = {{"id", item.id},
              {"class_id", item.class_id},
              {"role", role_name(item.role)},
              {"parent_id", item.parent_id ? json(*item.parent_id) : json()},
              {"vector_index", item.vector_index}};
    if (item.noise_scale) j["noise_scale"] = *item.noise_scale;
    items.push_back(std::move(j));
  }
  json manifest = {{"format", "PMEB"},
                   {"version", kBankFormatVersion},
                   {"dim", bank.dim},
                   {"vector_count", bank.vectors.rows()},
                   {"classes", std::move(classes)},
                   {"items", std::move(items)}};
  if (!bank.provenance.empty()) manifest["provenance"] = bank.provenance;
  return manifest;
}

EmbeddingBank load_bank(const fs::path& dir) {
  const fs::path manifest_path = dir / kManifestName;
  const fs::path vectors_path = dir / kVectorsName;
  if (!fs::is_regular_file(manifest_path)) {
    throw BankError("missing file " + manifest_path.string());
  }
  if (!fs::is_regular_file(vectors_path)) {
    throw BankError("missing file " + vectors_path.string());
  }

  json manifest;
  {
    std::ifstream in(manifest_path);
    try {
      in >> manifest;
    } catch (const json::exception& e) {
      throw BankError("malformed manifest: " + std::string(e.what()));
    }
  }

  EmbeddingBank bank;
  std::int64_t vector_count = 0;
  try {
    const int version = manifest.at("version").get<int>();
    if (version != kBankFormatVersion) {
      throw BankError("unsupported bank version " + std::to_string(version));
    }
    if (manifest.contains("format") && manifest["format"] != "PMEB") {
      throw BankError("manifest format is not PMEB");
    }
    bank.dim = manifest.at("dim").get<int>();
    vector_count = manifest.at("vector_count").get<std::int64_t>();
    for (const auto& c : manifest.at("classes")) {
      ClassRecord rec;
      rec.id = c.at("id").get<std::int64_t>();
      rec.name = c.at("name").get<std::string>();
      rec.pseudo = c.value("pseudo", false);
      rec.text_vector_index = c.at("text_vector_index").get<std::int64_t>();
      bank.classes.push_back(std::move(rec));
    }
    for (const auto& it : manifest.at("items")) {
      ItemRecord rec;
      rec.id = it.at("id").get<std::int64_t>();
      rec.class_id = it.at("class_id").get<std::int64_t>();
      rec.role = parse_role(it.at("role").get<std::string>());
      if (it.contains("parent_id") && !it["parent_id"].is_null()) {
        rec.parent_id = it["parent_id"].get<std::int64_t>();
      }
      rec.vector_index = it.at("vector_index").get<std::int64_t>();
      if (it.contains("noise_scale") && !it["noise_scale"].is_null()) {
        rec.noise_scale = it["noise_scale"].get<double>();
      }
      bank.items.push_back(std::move(rec));
    }
    if (manifest.contains("provenance")) bank.provenance = manifest["provenance"];
  } catch (const json::exception& e) {
    throw BankError("malformed manifest: " + std::string(e.what()));
  }
  if (bank.dim <= 0) throw BankError("dim must be positive");
  if (vector_count < 0) throw BankError("vector_count must be non-negative");

  const auto expected_bytes = static_cast<std::uintmax_t>(vector_count) *
                              static_cast<std::uintmax_t>(bank.dim) * 4u;
  const auto actual_bytes = fs::file_size(vectors_path);
  if (actual_bytes != expected_bytes) {
    throw BankError("size mismatch: manifest declares " +
                    std::to_string(vector_count) + " vectors of dim " +
                    std::to_string(bank.dim) + " (" +
                    std::to_string(expected_bytes) + " bytes), vectors.bin has " +
                    std::to_string(actual_bytes) + " bytes");
  }

  bank.vectors.resize(vector_count, bank.dim);
  std::ifstream in(vectors_path, std::ios::binary);
  in.read(reinterpret_cast<char*>(bank.vectors.data()),
          static_cast<std::streamsize>(expected_bytes));
  if (!in) throw BankError("short read on " + vectors_path.string());
  if constexpr (std::endian::native == std::endian::big) {
    auto* words = reinterpret_cast<std::uint32_t*>(bank.vectors.data());
    for (Eigen::Index i = 0; i < bank.vectors.size(); ++i) {
      words[i] = byteswap32(words[i]);
    }
  }

  bank.validate();
  bank.index();
  return bank;
}

void save_bank(const EmbeddingBank& bank, const fs::path& dir) {
  try {
    bank.validate();
  } catch (const BankError& e) {
    throw BankError(std::string("refusing to save invalid bank: ") + e.what());
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) {
    throw BankError("cannot create " + dir.string() + ": " + ec.message());
  }

  {
    std::ofstream out(dir / kManifestName, std::ios::trunc);
    if (!out) throw BankError("cannot write " + (dir / kManifestName).string());
    out << manifest_to_json(bank).dump(2) << '\n';
    if (!out) throw BankError("write failed for manifest");
  }

  std::ofstream out(dir / kVectorsName, std::ios::binary | std::ios::trunc);
  if (!out) throw BankError("cannot write " + (dir / kVectorsName).string());
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(bank.vectors.data()),
              static_cast<std::streamsize>(sizeof(float) * bank.vectors.size()));
  } else {
    const auto* words = reinterpret_cast<const std::uint32_t*>(bank.vectors.data());
    for (Eigen::Index i = 0; i < bank.vectors.size(); ++i) {
      const std::uint32_t w = byteswap32(words[i]);
      out.write(reinterpret_cast<const char*>(&w), sizeof w);
    }
  }
  if (!out) throw BankError("write failed for vectors.bin");
}

EmbeddingBank generate_synthetic_bank(const SyntheticBankParams& p) {
  if (p.dim < 2) throw ConfigError("synthetic bank needs dim >= 2");
  if (p.classes < 2) throw ConfigError("synthetic bank needs classes >= 2");
  if (!(p.separation >= 0.0 && p.separation <= 2.0)) {
    throw ConfigError("separation must lie in [0, 2]");
  }
  if (!(p.text_alignment >= 0.0 && p.text_alignment <= 1.0)) {
    throw ConfigError("text_alignment must lie in [0, 1]");
  }
  if (!(p.noise >= 0.0) || !(p.aug_noise_ratio >= 0.0) ||
      !(p.poor_aug_factor >= 0.0)) {
    throw ConfigError("noise scales must be non-negative");
  }
  if (!(p.poor_aug_probability >= 0.0 && p.poor_aug_probability <= 1.0)) {
    throw ConfigError("poor_aug_probability must lie in [0, 1]");
  }
  if (p.augs_per_image < 0 || p.originals_per_class < 0) {
    throw ConfigError("counts must be non-negative");
  }

  Rng rng(p.seed);
  const int dim = p.dim;

  // Shared base direction plus one class-specific direction per class. When
  // there is room, the class directions are orthonormalized against the base
  // and each other, which makes pairwise mean distances exactly
  // sqrt(2) * sin(angle) = separation.
  std::vector<Eigen::VectorXd> basis;
  basis.push_back(random_unit(rng, dim));
  const bool orthogonal = p.classes + 1 <= dim;
  for (int c = 0; c < p.classes; ++c) {
    Eigen::VectorXd u = gaussian_vector(rng, dim);
    u -= basis[0].dot(u) * basis[0];
    if (orthogonal) {
      for (std::size_t b = 1; b < basis.size(); ++b) {
        u -= basis[b].dot(u) * basis[b];
      }
    }
    basis.push_back(u.normalized());
  }
  const double sin_angle = std::min(p.separation / std::sqrt(2.0), 1.0);
  const double cos_angle = std::sqrt(1.0 - sin_angle * sin_angle);

  std::vector<Eigen::VectorXd> means;
  for (int c = 0; c < p.classes; ++c) {
    means.push_back(
        (cos_angle * basis[0] + sin_angle * basis[c + 1]).normalized());
  }

  const double per_coord = 1.0 / std::sqrt(static_cast<double>(dim));
  std::vector<Eigen::VectorXd> rows;
  EmbeddingBank bank;
  bank.dim = dim;

  for (int c = 0; c < p.classes; ++c) {
    const Eigen::VectorXd noise_dir = random_unit(rng, dim);
    Eigen::VectorXd text =
        (1.0 - p.text_alignment) * noise_dir + p.text_alignment * means[c];
    if (text.norm() == 0.0) text = means[c];
    bank.classes.push_back({c, "class_" + std::to_string(c), false,
                            static_cast<std::int64_t>(rows.size())});
    rows.push_back(text.normalized());
  }

  std::int64_t next_id = 0;
  const double aug_scale = p.noise * p.aug_noise_ratio;
  for (int c = 0; c < p.classes; ++c) {
    for (int o = 0; o < p.originals_per_class; ++o) {
      Eigen::VectorXd image =
          means[c] + p.noise * per_coord * gaussian_vector(rng, dim);
      if (image.norm() == 0.0) image = means[c];
      image.normalize();
      const std::int64_t parent = next_id++;
      ItemRecord orig;
      orig.id = parent;
      orig.class_id = c;
      orig.vector_index = static_cast<std::int64_t>(rows.size());
      orig.noise_scale = p.noise;
      bank.items.push_back(orig);
      rows.push_back(image);

      for (int a = 0; a < p.augs_per_image; ++a) {
        const bool poor = rng.bernoulli(p.poor_aug_probability);
        const double scale = poor ? aug_scale * p.poor_aug_factor : aug_scale;
        Eigen::VectorXd aug = image + scale * per_coord * gaussian_vector(rng, dim);
        if (aug.norm() == 0.0) aug = image;
        ItemRecord rec;
        rec.id = next_id++;
        rec.class_id = c;
        rec.role = ItemRole::kAugmentation;
        rec.parent_id = parent;
        rec.vector_index = static_cast<std::int64_t>(rows.size());
        rec.noise_scale = scale;
        bank.items.push_back(rec);
        rows.push_back(aug.normalized());
      }
    }
  }

  bank.vectors.resize(static_cast<Eigen::Index>(rows.size()), dim);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    bank.vectors.row(static_cast<Eigen::Index>(r)) =
        rows[r].cast<float>().transpose();
  }
  bank.provenance = {{"generator", "synthetic"},
                     {"classes", p.classes},
                     {"dim", p.dim},
                     {"separation", p.separation},
                     {"text_alignment", p.text_alignment},
                     {"augs_per_image", p.augs_per_image},
                     {"originals_per_class", p.originals_per_class},
                     {"noise", p.noise},
                     {"aug_noise_ratio", p.aug_noise_ratio},
                     {"poor_aug_probability", p.poor_aug_probability},
                     {"poor_aug_factor", p.poor_aug_factor},
                     {"seed", p.seed}};
  bank.index();
  return bank;
}

}  // namespace pm
