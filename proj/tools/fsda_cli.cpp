#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "fsda/evaluation.hpp"
#include "fsda/experiment.hpp"
#include "fsda/gradient_check.hpp"
#include "fsda/text_io.hpp"

namespace fs = std::filesystem;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir = "out";
  std::optional<std::uint64_t> seed;
  bool force = false;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "Experiment config file (JSON)")
      ->check(CLI::ExistingFile);
  cmd->add_option("--out", o.out_dir, "Artifact directory");
  cmd->add_option("--seed", o.seed, "Master seed; overrides the config value");
  cmd->add_flag("--force", o.force,
                "Rerun every stage even when cached artifacts are fresh");
}

fsda::ExperimentConfig load_config(const CommonOpts& o) {
  fsda::ExperimentConfig cfg;
  if (!o.config_path.empty()) {
    cfg = fsda::parse_experiment_config(fsda::read_file(o.config_path));
  } else {
    cfg = fsda::default_experiment_config();
    cfg.seed_set = false;  // still requires --seed
  }
  if (o.seed) {
    cfg.seed = *o.seed;
    cfg.seed_set = true;
  }
  cfg.validate();
  return cfg;
}

int run_pipeline_command(const CommonOpts& common,
                         const std::string& loss_set,
                         const std::vector<double>& gamma_grid, bool ablate) {
  fsda::PipelineOptions opts;
  opts.force = common.force;
  opts.ablate = ablate;
  if (!loss_set.empty()) {
    fsda::parse_loss_set(loss_set);  // reject unknown sets before any work
    opts.loss_set = loss_set;
  }
  if (!gamma_grid.empty()) opts.gamma_grid = gamma_grid;

  const fsda::ExperimentConfig cfg = load_config(common);
  const fsda::PipelineResult result =
      fsda::run_pipeline(cfg, common.out_dir, opts, std::cout);
  std::cout << '\n';
  fsda::write_report_table(std::cout, result.rows);
  return 0;
}

int run_check_command(const fsda::GradientCheckConfig& cfg) {
  const fsda::SelfCheckReport report = fsda::run_self_checks(cfg);
  for (const std::string& line : report.lines) std::cout << line << '\n';
  for (const fsda::GradientCheckResult& g : report.gradients) {
    std::printf("%s %s: max relative gradient error %.3e over %d instances\n",
                g.passed ? "pass" : "fail", g.term.c_str(),
                g.max_relative_error, g.instances);
  }
  std::cout << (report.passed ? "all checks passed\n" : "CHECK FAILED\n");
  return report.passed ? 0 : 1;
}

int run_report_command(const std::string& out_dir) {
  const fs::path csv = fs::path(out_dir) / "report.csv";
  if (!fs::exists(csv)) {
    std::cerr << "error: " << csv.string()
              << " not found; run the pipeline first\n";
    return 1;
  }
  const auto rows = fsda::parse_report_csv(fsda::read_file(csv.string()));
  fsda::write_report_table(std::cout, rows);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot adaptation of local feature descriptors for "
               "visual localization"};
  app.require_subcommand(1);

  CommonOpts gen_opts;
  CLI::App* generate =
      app.add_subcommand("generate", "Generate the scene and target splits");
  add_common(generate, gen_opts);

  CommonOpts pipe_opts;
  std::string pipe_loss_set;
  std::vector<double> pipe_gammas;
  bool pipe_ablate = false;
  CLI::App* pipeline = app.add_subcommand(
      "pipeline", "Run pretrain, mapping, adaptation and evaluation");
  add_common(pipeline, pipe_opts);
  pipeline->add_option("--loss-set", pipe_loss_set,
                       "Single loss combination (corres, corres+vwcoral, "
                       "corres+cdsos, corres+softmatch, "
                       "corres+vwcoral+cdsos, all)");
  pipeline->add_option("--gamma-grid", pipe_gammas,
                       "Comma-separated domain-shift severities")
      ->delimiter(',');
  pipeline->add_flag("--ablate", pipe_ablate,
                     "Run the full loss-combination ablation grid");

  CommonOpts abl_opts;
  std::vector<double> abl_gammas;
  CLI::App* ablate = app.add_subcommand(
      "ablate", "Run the loss ablation grid (pipeline --ablate)");
  add_common(ablate, abl_opts);
  ablate->add_option("--gamma-grid", abl_gammas,
                     "Comma-separated domain-shift severities")
      ->delimiter(',');

  fsda::GradientCheckConfig check_cfg;
  CLI::App* check = app.add_subcommand(
      "check", "Verify loss gradients and closed-form identities");
  check->add_option("--instances", check_cfg.instances,
                    "Random instances per loss term");
  check->add_option("--seed", check_cfg.seed, "Check seed");
  check->add_option("--perturb-loss", check_cfg.perturb,
                    "Corrupt one analytic gradient entry by this amount "
                    "(the check must then fail)");

  std::string report_dir = "out";
  CLI::App* report =
      app.add_subcommand("report", "Print the report table for --out");
  report->add_option("--out", report_dir, "Artifact directory");

  int rc = 0;
  generate->callback([&] {
    fsda::generate_scene_artifacts(load_config(gen_opts), gen_opts.out_dir,
                                   std::cout, gen_opts.force);
  });
  pipeline->callback([&] {
    rc = run_pipeline_command(pipe_opts, pipe_loss_set, pipe_gammas,
                              pipe_ablate);
  });
  ablate->callback(
      [&] { rc = run_pipeline_command(abl_opts, "", abl_gammas, true); });
  check->callback([&] { rc = run_check_command(check_cfg); });
  report->callback([&] { rc = run_report_command(report_dir); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return rc;
}
