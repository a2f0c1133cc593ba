#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "fsda/losses.hpp"
#include "fsda/trainer.hpp"

namespace fsda {

struct RecallThresholds {
  struct Level {
    double position_m = 0.0;
    double rotation_deg = 0.0;
  };
  std::array<Level, 3> levels{{{0.25, 2.0}, {0.5, 5.0}, {5.0, 10.0}}};

  void validate() const;  // strictly increasing in both coordinates
};

struct QueryView {
  int id = 0;
  Pose ground_truth;
  std::vector<ObservedFeature> features;
};

struct RecallReport {
  std::array<double, 3> recall{};  // fine, mid, coarse, each in [0, 1]
  std::vector<PoseError> per_query_errors;  // failures carry +inf
  double acceptance_rate = 0.0;
  std::string method;
  double gamma = 0.0;
};

// Identical pipeline to register_target_view under the supplied (adapted)
// head; absent when registration is rejected. The RANSAC seed is derived per
// query id from cfg.ransac.seed so results are pure in the inputs.
std::optional<Pose> localize_query(const QueryView& query,
                                   const PointCloudModel& cloud,
                                   const DescriptorHead& head,
                                   const CameraIntrinsics& intr,
                                   const MatchingConfig& cfg);

// Pose error per query against ground truth; unregistered queries count as
// failures at every threshold.
RecallReport evaluate(const std::vector<QueryView>& queries,
                      const PointCloudModel& cloud, const DescriptorHead& head,
                      const CameraIntrinsics& intr, const MatchingConfig& cfg,
                      const RecallThresholds& thresholds);

// Everything run_ablation needs besides the loss-flag grid: the frozen source
// representation, the fixed reference cloud, vocabulary, accepted training
// views and the two query splits, all for one target condition.
struct AdaptationTask {
  DescriptorHead source_head;  // frozen
  PointCloudModel cloud;
  VisualVocabulary vocabulary;
  std::vector<TrainingView> training;
  std::vector<QueryView> validation;
  std::vector<QueryView> test;
  CameraIntrinsics intrinsics;
  double gamma = 0.0;
};

struct AblationRow {
  std::string method;  // "frozen" or a loss-set label
  TermFlags flags;
  bool trained = false;
  RecallReport report;
  LossWeights weights;       // calibrated weights used (zeroed for frozen)
  DescriptorHead adapted_head;
  std::vector<TrainLogRow> train_log;
};

struct AblationConfig {
  TrainConfig train;
  MatchingConfig matching;            // test-time localization
  MatchingConfig validation_matching; // cheaper settings allowed
  RecallThresholds thresholds;
};

// The six Table-style loss combinations, in row order.
std::vector<TermFlags> default_ablation_grid();

// Trains one head per combination from the same frozen initialization and
// evaluates each on the test split; the first returned row is the untrained
// frozen baseline.
std::vector<AblationRow> run_ablation(const AdaptationTask& task,
                                      const std::vector<TermFlags>& grid,
                                      const AblationConfig& cfg);

// method, gamma, recall at the three thresholds, acceptance rate; one row per
// report. Aligned human-readable table and a comma-delimited machine file.
void write_report_table(std::ostream& os,
                        const std::vector<RecallReport>& rows);
void write_report_csv(std::ostream& os, const std::vector<RecallReport>& rows);

}  // namespace fsda
