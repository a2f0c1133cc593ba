#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "fsda/feature_model.hpp"
#include "fsda/geometry.hpp"
#include "fsda/synthworld.hpp"
#include "fsda/vocabulary.hpp"

namespace fsda {

// The fixed reference representation: 3D landmarks with frozen source
// descriptors. Never mutated after construction; content_hash() pins the
// fixed-reference contract.
struct PointCloudModel {
  struct Point {
    Eigen::Vector3d position = Eigen::Vector3d::Zero();
    Eigen::VectorXd descriptor;  // unit norm, frozen
    double detection_score = 1.0;
    int landmark_id = -1;  // construction metadata; not used for matching
  };
  std::vector<Point> points;
  std::vector<int> built_from;  // reference view ids

  Eigen::MatrixXd descriptor_matrix() const;
  std::uint64_t content_hash() const;
};

enum class PoseProvenance { estimated, ground_truth };

struct CorrespondencePair {
  // Source side, frozen: cloud descriptor, its detection score, 3D point.
  Eigen::VectorXd source_descriptor;
  double source_score = 1.0;
  Eigen::Vector3d point = Eigen::Vector3d::Zero();
  // Target side, raw: pre-descriptor so the current head can re-describe it.
  Eigen::VectorXd target_pre;
  Eigen::Vector2d target_keypoint = Eigen::Vector2d::Zero();
  double target_score = 1.0;
  int target_feature_index = -1;  // into the view's feature list
  int word = 0;
};

struct Triplet {
  int pair_index = -1;
  int negative_feature_index = -1;
  Eigen::VectorXd negative_pre;
  Eigen::Vector2d negative_keypoint = Eigen::Vector2d::Zero();
};

struct CorrespondenceSet {
  int view_id = -1;
  Pose training_pose;
  PoseProvenance provenance = PoseProvenance::estimated;
  std::vector<CorrespondencePair> pairs;
  std::vector<Triplet> triplets;
};

struct MatchingConfig {
  double ratio_threshold = 0.9;
  RansacConfig ransac;
};

struct CandidateMatch {
  int feature_index = -1;
  int cloud_index = -1;
  double similarity = 0.0;
};

struct RegistrationOutcome {
  RegistrationResult result;
  std::vector<CandidateMatch> candidates;  // canonical order
};

struct PairExtractionConfig {
  double refine_radius_px = 3.0;
};

struct MiningConfig {
  double safe_radius_px = 8.0;
};

struct EmptyCorrespondenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One cloud point per landmark visible in at least two of the given
// reference views; descriptor = renormalized mean of the per-view frozen
// descriptors. Requires a frozen head.
PointCloudModel build_point_cloud(const Scene& scene,
                                  const DescriptorHead& source_head,
                                  const DomainSpec& source_domain,
                                  std::span<const int> reference_views);

// Mutual-nearest-neighbor matching with a ratio test against the cloud,
// followed by RANSAC registration. Candidates are canonicalized (sorted by
// cloud index, then keypoint) so the result is invariant to input feature
// order.
RegistrationOutcome register_target_view(
    const std::vector<ObservedFeature>& features, const PointCloudModel& cloud,
    const DescriptorHead& head, const CameraIntrinsics& intr,
    const MatchingConfig& cfg);

// Positive pairs from the RANSAC inliers. With a ground-truth pose, only
// pairs whose 3D point reprojects within cfg.refine_radius_px of the target
// keypoint survive and the set trains against the ground-truth pose.
CorrespondenceSet extract_pairs(const RegistrationOutcome& outcome,
                                const std::vector<ObservedFeature>& features,
                                const PointCloudModel& cloud,
                                const VisualVocabulary& vocab,
                                const std::optional<Pose>& gt_pose,
                                const CameraIntrinsics& intr,
                                const PairExtractionConfig& cfg, int view_id);

// For each pair, the target feature most similar to the source descriptor
// outside cfg.safe_radius_px of the positive keypoint. Pairs with no
// eligible negative contribute no triplet.
CorrespondenceSet mine_hard_negatives(const CorrespondenceSet& set,
                                      const std::vector<ObservedFeature>& features,
                                      const DescriptorHead& head,
                                      const MiningConfig& cfg);

void write_correspondence_set(std::ostream& os, const CorrespondenceSet& set);
CorrespondenceSet read_correspondence_set(std::istream& is);

void write_point_cloud(std::ostream& os, const PointCloudModel& cloud);
PointCloudModel read_point_cloud(std::istream& is);

}  // namespace fsda
