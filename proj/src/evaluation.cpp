#include "fsda/evaluation.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

#include "fsda/rng.hpp"
#include "fsda/text_io.hpp"

namespace fsda {

void RecallThresholds::validate() const {
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (levels[i].position_m <= 0.0 || levels[i].rotation_deg <= 0.0)
      throw std::invalid_argument("thresholds must be positive");
    if (i > 0 && (levels[i].position_m <= levels[i - 1].position_m ||
                  levels[i].rotation_deg <= levels[i - 1].rotation_deg))
      throw std::invalid_argument(
          "thresholds must be strictly increasing in both coordinates");
  }
}

std::optional<Pose> localize_query(const QueryView& query,
                                   const PointCloudModel& cloud,
                                   const DescriptorHead& head,
                                   const CameraIntrinsics& intr,
                                   const MatchingConfig& cfg) {
  if (query.features.empty())
    throw std::invalid_argument("localize_query: query has no features");
  MatchingConfig derived = cfg;
  derived.ransac.seed = derive_seed(cfg.ransac.seed, "query-ransac",
                                    static_cast<std::uint64_t>(query.id));
  const RegistrationOutcome outcome =
      register_target_view(query.features, cloud, head, intr, derived);
  if (!outcome.result.accepted) return std::nullopt;
  return outcome.result.estimated_pose;
}

RecallReport evaluate(const std::vector<QueryView>& queries,
                      const PointCloudModel& cloud, const DescriptorHead& head,
                      const CameraIntrinsics& intr, const MatchingConfig& cfg,
                      const RecallThresholds& thresholds) {
  if (queries.empty())
    throw std::invalid_argument("evaluate: no queries");
  thresholds.validate();

  RecallReport report;
  int accepted = 0;
  std::array<int, 3> hits{};
  for (const auto& query : queries) {
    const auto pose = localize_query(query, cloud, head, intr, cfg);
    PoseError err;
    if (pose) {
      ++accepted;
      err = pose_error(query.ground_truth, *pose);
    } else {
      err.epsilon_t = std::numeric_limits<double>::infinity();
      err.epsilon_r = std::numeric_limits<double>::infinity();
    }
    for (std::size_t level = 0; level < thresholds.levels.size(); ++level) {
      if (err.epsilon_t <= thresholds.levels[level].position_m &&
          err.epsilon_r <= thresholds.levels[level].rotation_deg)
        ++hits[level];
    }
    report.per_query_errors.push_back(err);
  }

  const double n = static_cast<double>(queries.size());
  for (std::size_t level = 0; level < hits.size(); ++level)
    report.recall[level] = hits[level] / n;
  report.acceptance_rate = accepted / n;
  return report;
}

std::vector<TermFlags> default_ablation_grid() {
  return {
      TermFlags{true, false, false, false},  // corres (fine-tune)
      TermFlags{true, true, false, false},   // + VW-CORAL
      TermFlags{true, false, true, false},   // + CD-SOS
      TermFlags{true, false, false, true},   // + SoftMatch
      TermFlags{true, true, true, false},    // + VW-CORAL + CD-SOS
      TermFlags{true, true, true, true},     // all four
  };
}

std::vector<AblationRow> run_ablation(const AdaptationTask& task,
                                      const std::vector<TermFlags>& grid,
                                      const AblationConfig& cfg) {
  if (grid.empty())
    throw std::invalid_argument("run_ablation: empty loss-flag grid");
  if (!task.source_head.frozen)
    throw std::logic_error("run_ablation: source head must be frozen");

  std::vector<AblationRow> rows;

  AblationRow frozen;
  frozen.method = "frozen";
  frozen.flags = TermFlags{false, false, false, false};
  frozen.trained = false;
  frozen.weights.lambda_corres = frozen.weights.lambda_vwcoral =
      frozen.weights.lambda_cdsos = frozen.weights.lambda_softmatch = 0.0;
  frozen.report = evaluate(task.test, task.cloud, task.source_head,
                           task.intrinsics, cfg.matching, cfg.thresholds);
  frozen.report.method = frozen.method;
  frozen.report.gamma = task.gamma;
  frozen.adapted_head = task.source_head;
  rows.push_back(std::move(frozen));

  const ValidationCallback validation = [&](const DescriptorHead& head) {
    const RecallReport r =
        evaluate(task.validation, task.cloud, head, task.intrinsics,
                 cfg.validation_matching, cfg.thresholds);
    return r.recall[1];  // middle threshold drives model selection
  };

  // Calibration measures each term at the initial head, which for the
  // correspondence term needs the hard negatives the first training step
  // would mine.
  std::vector<TrainingView> calibration_views = task.training;
  for (auto& view : calibration_views) {
    view.set = mine_hard_negatives(view.set, view.features, task.source_head,
                                   MiningConfig{cfg.train.safe_radius_px});
  }

  for (const auto& flags : grid) {
    TrainConfig train_cfg = cfg.train;
    train_cfg.terms = flags;

    const LossWeights weights = calibrate_weights(
        calibration_views, task.source_head, task.intrinsics,
        train_cfg.loss_options());
    const TrainResult trained =
        train(task.training, weights, task.intrinsics, task.source_head,
              train_cfg, task.validation.empty() ? ValidationCallback() : validation);

    AblationRow row;
    row.method = flags.label();
    row.flags = flags;
    row.trained = true;
    row.weights = weights;
    row.adapted_head = trained.head;
    row.train_log = trained.log;
    row.report = evaluate(task.test, task.cloud, trained.head,
                          task.intrinsics, cfg.matching, cfg.thresholds);
    row.report.method = row.method;
    row.report.gamma = task.gamma;
    rows.push_back(std::move(row));
  }
  return rows;
}

namespace {

std::string fixed3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3f", v);
  return buf;
}

}  // namespace

void write_report_table(std::ostream& os,
                        const std::vector<RecallReport>& rows) {
  os << "method                     gamma  recall@fine  recall@mid  "
        "recall@coarse  acceptance\n";
  for (const auto& r : rows) {
    char line[160];
    std::snprintf(line, sizeof(line),
                  "%-26s %5.2f  %11s  %10s  %13s  %10s\n", r.method.c_str(),
                  r.gamma, fixed3(r.recall[0]).c_str(),
                  fixed3(r.recall[1]).c_str(), fixed3(r.recall[2]).c_str(),
                  fixed3(r.acceptance_rate).c_str());
    os << line;
  }
}

void write_report_csv(std::ostream& os, const std::vector<RecallReport>& rows) {
  os << "method,gamma,recall_fine,recall_mid,recall_coarse,acceptance_rate\n";
  for (const auto& r : rows) {
    os << r.method << ',' << format_double(r.gamma) << ','
       << format_double(r.recall[0]) << ',' << format_double(r.recall[1])
       << ',' << format_double(r.recall[2]) << ','
       << format_double(r.acceptance_rate) << '\n';
  }
}

}  // namespace fsda
