// promptmargin: analysis, synthetic bank generation and episodic benchmark
// runs over PMEB embedding banks.
//
// Exit codes: 0 ok, 2 usage, 3 data, 4 more than 10% of episodes failed.

#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "promptmargin/analyzer.hpp"
#include "promptmargin/bank.hpp"
#include "promptmargin/error.hpp"
#include "promptmargin/trainer.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitFailures = 4;

void setup_logging() {
  auto logger = spdlog::stderr_logger_mt("promptmargin");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::warn);
  if (const char* level = std::getenv("PM_LOG")) {
    spdlog::set_level(spdlog::level::from_str(level));
  }
}

struct AnalyzeArgs {
  std::string bank;
  std::string out;
  std::string csv_dir;
  double pseudo_value = pm::kDefaultPseudoTextDistance;
};

struct SynthArgs {
  pm::SyntheticBankParams params;
  std::string out;
};

struct RunArgs {
  std::string bank;
  std::string config;
  std::string out;
  std::string checkpoints;
  std::string matrices;
  bool no_timing = false;
  std::optional<int> way, shot, query, episodes, epochs, workers, rank;
  std::optional<std::uint64_t> seed;
  std::optional<double> alpha, beta, lr, momentum, tau;
  std::optional<std::string> select;
  bool mu_detached = false;
  bool reselect = false;
};

int cmd_analyze(const AnalyzeArgs& args) {
  pm::EmbeddingBank bank;
  pm::AnalysisReport report;
  try {
    bank = pm::load_bank(args.bank);
    report = pm::analyze_bank(bank, {args.pseudo_value});
  } catch (const pm::BankError& e) {
    spdlog::error("{}", e.what());
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
  try {
    if (!args.out.empty()) {
      std::ofstream out(args.out, std::ios::trunc);
      if (!out) throw std::runtime_error("cannot write " + args.out);
      out << pm::report_to_json(report).dump(2) << '\n';
    }
    if (!args.csv_dir.empty()) {
      std::filesystem::create_directories(args.csv_dir);
      const std::filesystem::path dir(args.csv_dir);
      pm::write_matrix_csv(report.text_distance_matrix, dir / "text_distances.csv");
      pm::write_matrix_csv(report.image_distance_matrix, dir / "image_distances.csv");
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
  std::printf("m_T=%.3f m_V=%.3f diff=%.3f%s\n", report.m_text, report.m_vision,
              report.diff, report.pseudo_substituted ? " (pseudo classnames)" : "");
  return kExitOk;
}

int cmd_synth(const SynthArgs& args) {
  try {
    const auto bank = pm::generate_synthetic_bank(args.params);
    pm::save_bank(bank, args.out);
    std::printf("wrote %lld vectors (dim %d) to %s\n",
                static_cast<long long>(bank.vectors.rows()), bank.dim,
                args.out.c_str());
  } catch (const pm::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitOk;
}

int cmd_run(const RunArgs& args) {
  pm::TrainConfig config;
  try {
    if (!args.config.empty()) pm::load_train_config(args.config, config);
    if (args.way) config.way = *args.way;
    if (args.shot) config.shot = *args.shot;
    if (args.query) config.query = *args.query;
    if (args.episodes) config.episodes = *args.episodes;
    if (args.epochs) config.epochs = *args.epochs;
    if (args.workers) config.workers = *args.workers;
    if (args.rank) config.rank = *args.rank;
    if (args.seed) config.master_seed = *args.seed;
    if (args.alpha) config.alpha = *args.alpha;
    if (args.beta) config.beta = *args.beta;
    if (args.lr) config.learning_rate = *args.lr;
    if (args.momentum) config.momentum = *args.momentum;
    if (args.tau) config.tau = *args.tau;
    if (args.select) pm::apply_config_entry(config, "select", *args.select);
    if (args.mu_detached) config.mu_detached = true;
    if (args.reselect) config.reselect_each_epoch = true;
    config.validate();
  } catch (const pm::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  pm::RunResult result;
  try {
    const auto bank = pm::load_bank(args.bank);
    pm::RunArtifacts artifacts;
    if (!args.checkpoints.empty()) artifacts.checkpoint_dir = args.checkpoints;
    if (!args.matrices.empty()) artifacts.matrices_dir = args.matrices;
    result = pm::run_benchmark(bank, config, artifacts);
  } catch (const pm::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }

  if (!args.out.empty()) {
    std::ofstream out(args.out, std::ios::trunc);
    if (!out) {
      std::cerr << "error: cannot write " << args.out << '\n';
      return kExitData;
    }
    out << pm::run_result_to_json(result, !args.no_timing).dump(2) << '\n';
  }

  std::printf("%.4f ± %.4f (%d episodes, %d failed)\n", result.mean_accuracy,
              result.ci95, config.episodes, result.failed_episodes);
  if (result.failed_episodes * 10 > config.episodes) {
    std::cerr << "error: " << result.failed_episodes << " of " << config.episodes
              << " episodes failed\n";
    return kExitFailures;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();

  CLI::App app{"Few-shot prompt adaptation over frozen embedding banks"};
  app.require_subcommand(1);

  AnalyzeArgs analyze;
  auto* analyze_cmd = app.add_subcommand("analyze", "Inter-class distance analysis of a bank");
  analyze_cmd->add_option("--bank", analyze.bank, "Bank directory")->required();
  analyze_cmd->add_option("--out", analyze.out, "Report JSON path");
  analyze_cmd->add_option("--csv-dir", analyze.csv_dir, "Directory for distance-matrix CSVs");
  analyze_cmd->add_option("--pseudo-value", analyze.pseudo_value,
                          "m_T substitute for placeholder classnames")
      ->capture_default_str();

  SynthArgs synth;
  auto& sp = synth.params;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic bank");
  synth_cmd->add_option("--classes", sp.classes)->capture_default_str();
  synth_cmd->add_option("--dim", sp.dim)->capture_default_str();
  synth_cmd->add_option("--sep", sp.separation, "Class-mean separation in [0, 2]")->capture_default_str();
  synth_cmd->add_option("--align", sp.text_alignment, "Text alignment in [0, 1]")->capture_default_str();
  synth_cmd->add_option("--augs", sp.augs_per_image)->capture_default_str();
  synth_cmd->add_option("--originals", sp.originals_per_class)->capture_default_str();
  synth_cmd->add_option("--noise", sp.noise)->capture_default_str();
  synth_cmd->add_option("--aug-noise-ratio", sp.aug_noise_ratio)->capture_default_str();
  synth_cmd->add_option("--poor-prob", sp.poor_aug_probability)->capture_default_str();
  synth_cmd->add_option("--poor-factor", sp.poor_aug_factor)->capture_default_str();
  synth_cmd->add_option("--seed", sp.seed)->capture_default_str();
  synth_cmd->add_option("--out", synth.out, "Output bank directory")->required();

  RunArgs run;
  auto* run_cmd = app.add_subcommand("run", "Episodic benchmark run");
  run_cmd->add_option("--bank", run.bank, "Bank directory")->required();
  run_cmd->add_option("--config", run.config, "key = value config file");
  run_cmd->add_option("--out", run.out, "Results JSON path");
  run_cmd->add_option("--checkpoints", run.checkpoints, "Directory for per-episode prompt dumps");
  run_cmd->add_option("--matrices", run.matrices, "Directory for pre/post distance CSVs");
  run_cmd->add_flag("--no-timing", run.no_timing, "Omit wall times from the results file");
  run_cmd->add_option("--way", run.way);
  run_cmd->add_option("--shot", run.shot);
  run_cmd->add_option("--query", run.query);
  run_cmd->add_option("--episodes", run.episodes);
  run_cmd->add_option("--epochs", run.epochs);
  run_cmd->add_option("--workers", run.workers);
  run_cmd->add_option("--rank", run.rank);
  run_cmd->add_option("--seed", run.seed);
  run_cmd->add_option("--alpha", run.alpha);
  run_cmd->add_option("--beta", run.beta);
  run_cmd->add_option("--lr", run.lr);
  run_cmd->add_option("--momentum", run.momentum);
  run_cmd->add_option("--tau", run.tau);
  run_cmd->add_option("--select", run.select, "Augmentations per support image, or 'all'");
  run_cmd->add_flag("--mu-detached", run.mu_detached, "Stop gradients through mu_t");
  run_cmd->add_flag("--reselect", run.reselect, "Re-run augmentation selection every epoch");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  if (*analyze_cmd) return cmd_analyze(analyze);
  if (*synth_cmd) return cmd_synth(synth);
  return cmd_run(run);
}
