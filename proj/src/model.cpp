#include "promptmargin/model.hpp"

#include <bit>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "promptmargin/error.hpp"
#include "promptmargin/rng.hpp"

namespace pm {

namespace {

constexpr char kCheckpointMagic[4] = {'P', 'M', 'P', 'S'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void put_le(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes, bytes + sizeof(T));
  }
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  in.read(reinterpret_cast<char*>(bytes), sizeof(T));
  if (!in) throw std::runtime_error("truncated checkpoint");
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes, bytes + sizeof(T));
  }
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

void check_dim(const PromptState& state, Eigen::Index size) {
  if (size != state.dim()) {
    throw ShapeError("vector has dimension " + std::to_string(size) +
                     ", prompt state expects " + std::to_string(state.dim()));
  }
}

}  // namespace

PromptParams PromptParams::zeros_like() const {
  PromptParams z;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    z.blocks[b] = Eigen::MatrixXd::Zero(blocks[b].rows(), blocks[b].cols());
  }
  return z;
}

std::size_t PromptParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& b : blocks) n += static_cast<std::size_t>(b.size());
  return n;
}

bool PromptParams::all_finite() const {
  for (const auto& b : blocks) {
    if (!b.allFinite()) return false;
  }
  return true;
}

double PromptParams::squared_norm() const {
  double s = 0.0;
  for (const auto& b : blocks) s += b.squaredNorm();
  return s;
}

bool PromptParams::operator==(const PromptParams& other) const {
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    if (blocks[b].rows() != other.blocks[b].rows() ||
        blocks[b].cols() != other.blocks[b].cols() ||
        blocks[b] != other.blocks[b]) {
      return false;
    }
  }
  return true;
}

PromptState init_prompt_state(int dim, int rank, std::uint64_t seed,
                              double scale, double tau) {
  if (rank < 1 || dim < rank) {
    throw ConfigError("need dim >= rank >= 1 (dim=" + std::to_string(dim) +
                      ", rank=" + std::to_string(rank) + ")");
  }
  if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
  Rng rng(seed);
  const double sd = scale / std::sqrt(static_cast<double>(dim));
  PromptState state;
  state.tau = tau;
  state.params.text_up().resize(dim, rank);
  state.params.text_down().resize(dim, rank);
  for (auto* m : {&state.params.text_up(), &state.params.text_down()}) {
    for (Eigen::Index j = 0; j < m->cols(); ++j) {
      for (Eigen::Index i = 0; i < m->rows(); ++i) (*m)(i, j) = sd * rng.normal();
    }
  }
  state.params.couple_up() = Eigen::MatrixXd::Identity(rank, rank);
  state.params.couple_down() = Eigen::MatrixXd::Identity(rank, rank);
  return state;
}

Eigen::MatrixXd embed_columns(const PromptState& state,
                              const Eigen::MatrixXd& columns, Branch branch) {
  check_dim(state, columns.rows());
  const auto& p = state.params;
  Eigen::MatrixXd out;
  if (branch == Branch::kText) {
    out = columns + p.text_up() * (p.text_down().transpose() * columns);
  } else {
    out = columns + p.vision_up() * (p.vision_down().transpose() * columns);
  }
  for (Eigen::Index j = 0; j < out.cols(); ++j) {
    const double n = out.col(j).norm();
    if (n == 0.0) throw DivergenceError("prompt transform collapsed a vector to zero");
    out.col(j) /= n;
  }
  return out;
}

Eigen::VectorXd embed_with_prompts(const PromptState& state,
                                   const Eigen::VectorXd& vector, Branch branch) {
  return embed_columns(state, vector, branch).col(0);
}

Eigen::VectorXd class_logits(const PromptState& state,
                             const Eigen::VectorXd& image_vec,
                             std::span<const Eigen::VectorXd> text_vecs) {
  if (text_vecs.size() < 2) throw ShapeError("class_logits needs N >= 2 texts");
  Eigen::MatrixXd texts(state.dim(), static_cast<Eigen::Index>(text_vecs.size()));
  for (std::size_t c = 0; c < text_vecs.size(); ++c) {
    check_dim(state, text_vecs[c].size());
    texts.col(static_cast<Eigen::Index>(c)) = text_vecs[c];
  }
  const Eigen::MatrixXd t = embed_columns(state, texts, Branch::kText);
  const Eigen::VectorXd x = embed_with_prompts(state, image_vec, Branch::kVision);
  return (t.transpose() * x) / state.tau;
}

int argmax_lowest(const Eigen::VectorXd& logits) {
  int best = 0;
  for (Eigen::Index c = 1; c < logits.size(); ++c) {
    if (logits[c] > logits[best]) best = static_cast<int>(c);
  }
  return best;
}

void write_checkpoint(const PromptState& state, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kCheckpointMagic, 4);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(state.dim()));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(state.rank()));
  put_le<double>(out, state.tau);
  for (const auto& block : state.params.blocks) {
    for (Eigen::Index i = 0; i < block.rows(); ++i) {
      for (Eigen::Index j = 0; j < block.cols(); ++j) {
        put_le<float>(out, static_cast<float>(block(i, j)));
      }
    }
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

PromptState read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw std::runtime_error("not a prompt-state checkpoint: " + path.string());
  }
  if (get_le<std::uint32_t>(in) != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version");
  }
  const auto dim = static_cast<Eigen::Index>(get_le<std::uint32_t>(in));
  const auto rank = static_cast<Eigen::Index>(get_le<std::uint32_t>(in));
  PromptState state;
  state.tau = get_le<double>(in);
  const Eigen::Index rows[4] = {dim, dim, rank, rank};
  for (std::size_t b = 0; b < 4; ++b) {
    auto& block = state.params.blocks[b];
    block.resize(rows[b], rank);
    for (Eigen::Index i = 0; i < block.rows(); ++i) {
      for (Eigen::Index j = 0; j < block.cols(); ++j) {
        block(i, j) = get_le<float>(in);
      }
    }
  }
  return state;
}

}  // namespace pm
