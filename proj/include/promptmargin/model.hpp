#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <filesystem>
#include <span>

namespace pm {

enum class Branch { kText, kVision };

/// The four trainable blocks of the prompt surrogate.
///
/// Text branch:   x -> normalize(x + U (V^T x))
/// Vision branch: x -> normalize(x + (U Wu) ((V Wv)^T x))
///
/// U, V are D x r; Wu, Wv are r x r and form the linear text-to-vision
/// coupling. Vision factors are never stored; they are derived from the
/// current text factors on every use.
struct PromptParams {
  enum Block : std::size_t { kTextUp = 0, kTextDown, kCoupleUp, kCoupleDown };
  std::array<Eigen::MatrixXd, 4> blocks;

  Eigen::MatrixXd& text_up() { return blocks[kTextUp]; }
  Eigen::MatrixXd& text_down() { return blocks[kTextDown]; }
  Eigen::MatrixXd& couple_up() { return blocks[kCoupleUp]; }
  Eigen::MatrixXd& couple_down() { return blocks[kCoupleDown]; }
  const Eigen::MatrixXd& text_up() const { return blocks[kTextUp]; }
  const Eigen::MatrixXd& text_down() const { return blocks[kTextDown]; }
  const Eigen::MatrixXd& couple_up() const { return blocks[kCoupleUp]; }
  const Eigen::MatrixXd& couple_down() const { return blocks[kCoupleDown]; }

  Eigen::MatrixXd vision_up() const { return text_up() * couple_up(); }
  Eigen::MatrixXd vision_down() const { return text_down() * couple_down(); }

  /// Same shapes, all zeros.
  PromptParams zeros_like() const;
  std::size_t parameter_count() const;
  bool all_finite() const;
  double squared_norm() const;

  bool operator==(const PromptParams& other) const;
};

inline constexpr int kDefaultRank = 2;
inline constexpr double kDefaultTemperature = 0.01;
inline constexpr double kDefaultInitScale = 0.01;

struct PromptState {
  PromptParams params;
  double tau = kDefaultTemperature;

  int dim() const { return static_cast<int>(params.text_up().rows()); }
  int rank() const { return static_cast<int>(params.text_up().cols()); }

  bool operator==(const PromptState&) const = default;
};

/// Gaussian factors with standard deviation scale / sqrt(dim); identity
/// couplings. scale = 0 gives the exact identity transform.
PromptState init_prompt_state(int dim, int rank, std::uint64_t seed,
                              double scale = kDefaultInitScale,
                              double tau = kDefaultTemperature);

/// Applies the branch transform to one unit vector.
Eigen::VectorXd embed_with_prompts(const PromptState& state,
                                   const Eigen::VectorXd& vector, Branch branch);

/// Column-wise transform of a D x M matrix of unit vectors.
Eigen::MatrixXd embed_columns(const PromptState& state,
                              const Eigen::MatrixXd& columns, Branch branch);

/// cosine(vision(image), text(text_c)) / tau for every class c.
Eigen::VectorXd class_logits(const PromptState& state,
                             const Eigen::VectorXd& image_vec,
                             std::span<const Eigen::VectorXd> text_vecs);

/// Index of the largest logit; ties go to the lowest index.
int argmax_lowest(const Eigen::VectorXd& logits);

/// Debug checkpoint: "PMPS" magic, u32 version, u32 dim, u32 rank, f64 tau,
/// then U, V (D x r) and Wu, Wv (r x r) as row-major little-endian f32.
void write_checkpoint(const PromptState& state, const std::filesystem::path& path);
PromptState read_checkpoint(const std::filesystem::path& path);

}  // namespace pm
