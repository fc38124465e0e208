#include "promptmargin/trainer.hpp"

#include <spdlog/spdlog.h>

#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <thread>

#include "promptmargin/analyzer.hpp"
#include "promptmargin/error.hpp"
#include "promptmargin/rng.hpp"
#include "promptmargin/selaug.hpp"

namespace pm {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    T out;
    if constexpr (std::is_same_v<T, double>) {
      out = std::stod(value, &used);
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
      out = std::stoull(value, &used);
    } else {
      out = static_cast<T>(std::stoll(value, &used));
    }
    if (used != value.size()) throw std::invalid_argument(value);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("invalid value '" + value + "' for " + key);
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw ConfigError("invalid boolean '" + value + "' for " + key);
}

std::vector<Eigen::VectorXd> columns_of(const Eigen::MatrixXd& m) {
  std::vector<Eigen::VectorXd> cols;
  for (Eigen::Index j = 0; j < m.cols(); ++j) cols.emplace_back(m.col(j));
  return cols;
}

std::vector<std::int64_t> run_selection(const PromptState& state,
                                        const SupportData& support,
                                        const TrainConfig& config) {
  std::vector<std::int64_t> selected;
  for (std::size_t c = 0; c < support.pools.size(); ++c) {
    const auto& pool = support.pools[c];
    std::size_t r = config.select_all
                        ? pool.size()
                        : static_cast<std::size_t>(config.selection_per_class());
    if (r > pool.size()) {
      spdlog::debug("class slot {} has {} augmentations, wanted {}; keeping all",
                    c, pool.size(), r);
      r = pool.size();
    }
    const auto ids = select_augmentations(
        state, support.texts.col(static_cast<Eigen::Index>(c)), pool, r);
    selected.insert(selected.end(), ids.begin(), ids.end());
  }
  return selected;
}

void write_episode_matrices(const std::filesystem::path& dir, std::uint64_t index,
                            const char* phase, const PromptState& state,
                            const TrainingBatch& batch) {
  const Eigen::MatrixXd texts = embed_columns(state, batch.texts, Branch::kText);
  const Eigen::MatrixXd images = embed_columns(state, batch.images, Branch::kVision);
  std::vector<Eigen::VectorXd> protos;
  for (Eigen::Index c = 0; c < batch.texts.cols(); ++c) {
    std::vector<Eigen::VectorXd> members;
    for (std::size_t m = 0; m < batch.labels.size(); ++m) {
      if (batch.labels[m] == c) members.emplace_back(images.col(static_cast<Eigen::Index>(m)));
    }
    protos.push_back(prototype(members));
  }
  const std::string stem = "episode_" + std::to_string(index) + "_" + phase;
  write_matrix_csv(distance_matrix(columns_of(texts)), dir / (stem + "_text.csv"));
  write_matrix_csv(distance_matrix(protos), dir / (stem + "_image.csv"));
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
  if (!(alpha >= 0.0) || !(beta >= 0.0)) throw ConfigError("alpha and beta must be non-negative");
  if (rank < 1) throw ConfigError("rank must be at least 1");
  if (!(init_scale >= 0.0)) throw ConfigError("init_scale must be non-negative");
  if (select_per_image && *select_per_image < 0) {
    throw ConfigError("select must be non-negative");
  }
  if (episodes < 1) throw ConfigError("episodes must be at least 1");
  if (way < 2 || shot < 1 || query < 1) {
    throw ConfigError("need way >= 2, shot >= 1, query >= 1");
  }
  if (workers < 1) throw ConfigError("workers must be at least 1");
}

int TrainConfig::selection_per_class() const {
  const int per_image = select_per_image.value_or(shot == 1 ? 15 : 3);
  return per_image * shot;
}

void apply_config_entry(TrainConfig& c, const std::string& key,
                        const std::string& raw) {
  const std::string value = trim(raw);
  if (key == "epochs") c.epochs = parse_number<int>(key, value);
  else if (key == "learning_rate" || key == "lr") c.learning_rate = parse_number<double>(key, value);
  else if (key == "momentum") c.momentum = parse_number<double>(key, value);
  else if (key == "tau") c.tau = parse_number<double>(key, value);
  else if (key == "alpha") c.alpha = parse_number<double>(key, value);
  else if (key == "beta") c.beta = parse_number<double>(key, value);
  else if (key == "rank") c.rank = parse_number<int>(key, value);
  else if (key == "init_scale") c.init_scale = parse_number<double>(key, value);
  else if (key == "select") {
    if (value == "all") {
      c.select_all = true;
    } else {
      c.select_all = false;
      c.select_per_image = parse_number<int>(key, value);
    }
  }
  else if (key == "reselect_each_epoch") c.reselect_each_epoch = parse_bool(key, value);
  else if (key == "mu_detached") c.mu_detached = parse_bool(key, value);
  else if (key == "seed" || key == "master_seed") c.master_seed = parse_number<std::uint64_t>(key, value);
  else if (key == "episodes") c.episodes = parse_number<int>(key, value);
  else if (key == "way") c.way = parse_number<int>(key, value);
  else if (key == "shot") c.shot = parse_number<int>(key, value);
  else if (key == "query") c.query = parse_number<int>(key, value);
  else if (key == "workers") c.workers = parse_number<int>(key, value);
  else throw ConfigError("unknown config key '" + key + "'");
}

void load_train_config(const std::filesystem::path& path, TrainConfig& config) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) +
                        ": expected key = value");
    }
    apply_config_entry(config, trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

void sgd_momentum_step(std::span<Eigen::MatrixXd> params,
                       std::span<const Eigen::MatrixXd> grads,
                       std::span<Eigen::MatrixXd> velocity, double lr,
                       double momentum) {
  if (params.size() != grads.size() || params.size() != velocity.size()) {
    throw ShapeError("parameter, gradient and velocity counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].rows() != grads[i].rows() || params[i].cols() != grads[i].cols() ||
        params[i].rows() != velocity[i].rows() ||
        params[i].cols() != velocity[i].cols()) {
      throw ShapeError("shape mismatch in parameter block " + std::to_string(i));
    }
    if (!grads[i].allFinite()) {
      throw DivergenceError("non-finite gradient in block " + std::to_string(i));
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grads[i];
    params[i] -= lr * velocity[i];
  }
}

SupportData gather_support(const EmbeddingBank& bank, const Episode& episode) {
  SupportData s;
  const auto way = static_cast<Eigen::Index>(episode.class_ids.size());
  s.texts.resize(bank.dim, way);
  s.originals.resize(episode.class_ids.size());
  s.pools.resize(episode.class_ids.size());
  for (Eigen::Index c = 0; c < way; ++c) {
    s.texts.col(c) = bank.text_vector(episode.class_ids[static_cast<std::size_t>(c)]);
  }
  for (std::size_t i = 0; i < episode.support_ids.size(); ++i) {
    const auto label = static_cast<std::size_t>(episode.support_label(i));
    const auto id = episode.support_ids[i];
    s.originals[label].push_back(id);
    for (auto aug : bank.augmentations_of(id)) {
      s.pools[label].push_back({aug, bank.item_vector(aug)});
    }
  }
  return s;
}

TrainingBatch build_training_batch(const EmbeddingBank& bank,
                                   const SupportData& support,
                                   std::span<const std::int64_t> selected_ids) {
  std::vector<std::int64_t> ids;
  std::vector<int> labels;
  for (std::size_t c = 0; c < support.originals.size(); ++c) {
    for (auto id : support.originals[c]) {
      ids.push_back(id);
      labels.push_back(static_cast<int>(c));
    }
  }
  for (std::size_t c = 0; c < support.pools.size(); ++c) {
    for (const auto& entry : support.pools[c]) {
      if (std::find(selected_ids.begin(), selected_ids.end(), entry.id) !=
          selected_ids.end()) {
        ids.push_back(entry.id);
        labels.push_back(static_cast<int>(c));
      }
    }
  }
  TrainingBatch batch;
  batch.texts = support.texts;
  batch.labels = std::move(labels);
  batch.images.resize(bank.dim, static_cast<Eigen::Index>(ids.size()));
  for (std::size_t m = 0; m < ids.size(); ++m) {
    batch.images.col(static_cast<Eigen::Index>(m)) = bank.item_vector(ids[m]);
  }
  return batch;
}

std::uint64_t prompt_init_seed(const Episode& episode) {
  return splitmix64(episode.episode_seed + 1);
}

TrainedEpisode train_episode(const EmbeddingBank& bank, const Episode& episode,
                             const TrainConfig& config) {
  config.validate();
  TrainedEpisode out;
  out.state = init_prompt_state(bank.dim, config.rank, prompt_init_seed(episode),
                                config.init_scale, config.tau);
  out.initial_state = out.state;

  const SupportData support = gather_support(bank, episode);
  out.selected_ids = run_selection(out.state, support, config);
  out.batch = build_training_batch(bank, support, out.selected_ids);

  const LossWeights weights = config.loss_weights();
  PromptParams velocity = out.state.params.zeros_like();
  out.loss_trace.reserve(static_cast<std::size_t>(config.epochs));
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    if (config.reselect_each_epoch && epoch > 0) {
      out.selected_ids = run_selection(out.state, support, config);
      out.batch = build_training_batch(bank, support, out.selected_ids);
    }
    auto [loss, grads] = total_loss_and_grads(out.state, out.batch, weights);
    out.loss_trace.push_back(loss.total);
    sgd_momentum_step(out.state.params.blocks, grads.blocks, velocity.blocks,
                      config.learning_rate, config.momentum);
    if (!out.state.params.all_finite()) {
      throw DivergenceError("parameters became non-finite at epoch " +
                            std::to_string(epoch));
    }
  }
  out.final_loss = total_loss(out.state, out.batch, weights);
  return out;
}

double evaluate_episode(const PromptState& state, const EmbeddingBank& bank,
                        const Episode& episode) {
  const auto way = static_cast<Eigen::Index>(episode.class_ids.size());
  Eigen::MatrixXd texts(bank.dim, way);
  for (Eigen::Index c = 0; c < way; ++c) {
    texts.col(c) = bank.text_vector(episode.class_ids[static_cast<std::size_t>(c)]);
  }
  Eigen::MatrixXd queries(bank.dim, static_cast<Eigen::Index>(episode.query_ids.size()));
  for (std::size_t i = 0; i < episode.query_ids.size(); ++i) {
    queries.col(static_cast<Eigen::Index>(i)) = bank.item_vector(episode.query_ids[i]);
  }
  const Eigen::MatrixXd t = embed_columns(state, texts, Branch::kText);
  const Eigen::MatrixXd x = embed_columns(state, queries, Branch::kVision);
  const Eigen::MatrixXd logits = t.transpose() * x / state.tau;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < episode.query_ids.size(); ++i) {
    if (argmax_lowest(logits.col(static_cast<Eigen::Index>(i))) ==
        episode.query_label(i)) {
      ++correct;
    }
  }
  return static_cast<double>(correct) /
         static_cast<double>(episode.query_ids.size());
}

RunResult run_benchmark(const EmbeddingBank& bank, const TrainConfig& config,
                        const RunArtifacts& artifacts) {
  config.validate();
  check_episode_feasible(bank, config.way, config.shot, config.query);
  for (const auto* dir : {&artifacts.checkpoint_dir, &artifacts.matrices_dir}) {
    if (*dir) std::filesystem::create_directories(**dir);
  }

  RunResult result;
  result.episodes.resize(static_cast<std::size_t>(config.episodes));
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  std::exception_ptr fatal;

  auto worker = [&] {
    for (std::size_t i = next++; i < result.episodes.size(); i = next++) {
      auto& rec = result.episodes[i];
      rec.episode_index = i;
      const auto start = std::chrono::steady_clock::now();
      try {
        const Episode ep = sample_episode(bank, config.way, config.shot,
                                          config.query, config.master_seed, i);
        rec.episode_seed = ep.episode_seed;
        rec.class_ids = ep.class_ids;
        TrainedEpisode trained = train_episode(bank, ep, config);
        rec.loss_trace = std::move(trained.loss_trace);
        rec.selected_augmentation_ids = std::move(trained.selected_ids);
        rec.accuracy = evaluate_episode(trained.state, bank, ep);
        if (artifacts.checkpoint_dir) {
          write_checkpoint(trained.state, *artifacts.checkpoint_dir /
                                              ("episode_" + std::to_string(i) + ".pmps"));
        }
        if (artifacts.matrices_dir) {
          write_episode_matrices(*artifacts.matrices_dir, i, "pre",
                                 trained.initial_state, trained.batch);
          write_episode_matrices(*artifacts.matrices_dir, i, "post", trained.state,
                                 trained.batch);
        }
      } catch (const DivergenceError& e) {
        rec.failed = true;
        rec.error = e.what();
        std::lock_guard lock(log_mutex);
        spdlog::warn("episode {} diverged: {}", i, e.what());
      } catch (...) {
        std::lock_guard lock(log_mutex);
        if (!fatal) fatal = std::current_exception();
        next = result.episodes.size();
        return;
      }
      rec.wall_seconds = std::chrono::duration<double>(
                             std::chrono::steady_clock::now() - start)
                             .count();
      std::lock_guard lock(log_mutex);
      spdlog::debug("episode {} accuracy {:.4f} ({:.3f}s)", i, rec.accuracy,
                    rec.wall_seconds);
    }
  };

  const int threads = std::min(config.workers, config.episodes);
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  if (fatal) std::rethrow_exception(fatal);
  finalize_run(result);
  return result;
}

}  // namespace pm
