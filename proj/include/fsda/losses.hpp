#pragma once

#include <Eigen/Dense>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fsda/correspondence.hpp"

namespace fsda {

// Canonical term keys used in breakdowns, calibration stats and logs.
inline constexpr const char* kTermCorres = "corres";
inline constexpr const char* kTermVwCoral = "vw_coral";
inline constexpr const char* kTermCdSos = "cd_sos";
inline constexpr const char* kTermSoftMatch = "softmatch";

struct LossValue {
  double value = 0.0;
  std::map<std::string, double> per_term;  // raw (unweighted) term values
  std::vector<std::string> diagnostics;
};

struct TermStats {
  double mean = 0.0;
  double stddev = 0.0;  // population standard deviation
};

struct LossWeights {
  double lambda_corres = 1.0;
  double lambda_vwcoral = 1.0;
  double lambda_cdsos = 1.0;
  double lambda_softmatch = 1.0;
  std::map<std::string, TermStats> stats;  // per calibrated term

  double lambda_for(const std::string& term) const;
};

// The printed hinge of the ranking loss reads max(0, d2_neg - d2_pos + m),
// which rewards confusable negatives; `standard` is the usual direction
// max(0, d2_pos - d2_neg + m) and the default.
enum class HingeDirection { standard, as_printed };

struct SoftMatchConfig {
  double beta = 10.0;          // softmax temperature
  double image_diagonal = 0.0; // l, pixels; must be > 0
};

struct TermFlags {
  bool corres = true;
  bool vw_coral = true;
  bool cd_sos = true;
  bool softmatch = true;

  bool any_auxiliary() const { return vw_coral || cd_sos || softmatch; }
  std::string label() const;  // e.g. "corres+vwcoral+cdsos"
};

// ---------------------------------------------------------------------------
// Correspondence (triplet margin ranking) loss.

struct TripletInput {
  Eigen::VectorXd source;    // x^S, unit norm, constant
  double source_score = 0.0;
  Eigen::VectorXd positive;  // x^T_+, current head output
  double positive_score = 0.0;
  Eigen::VectorXd negative;  // x^T_-, current head output
};

struct TripletGradients {
  std::vector<Eigen::VectorXd> d_positive;
  std::vector<Eigen::VectorXd> d_negative;
};

// value = sum_i w_i * max(0, ||x+ - xS||^2 - ||x- - xS||^2 + m) with
// w_i = sS_i * sT_i / sum_j sS_j * sT_j. Scores are constants; gradients flow
// only through the target descriptors of active terms.
LossValue correspondence_loss(const std::vector<TripletInput>& triplets,
                              double margin,
                              HingeDirection direction = HingeDirection::standard,
                              TripletGradients* gradients = nullptr);

// ---------------------------------------------------------------------------
// Word-grouped distribution losses.

struct WordGroup {
  int word = -1;
  std::vector<Eigen::VectorXd> source;  // x^S per pair
  std::vector<Eigen::VectorXd> target;  // x^T_+ per pair, same order
};

struct GroupGradients {
  // d/dx^T aligned with WordGroup::target: [group][pair].
  std::vector<std::vector<Eigen::VectorXd>> d_target;
};

// value = (1/K') sum_k (1/(4 d^2)) ||C_k^S - C_k^T||_F^2 over the K' words
// with at least min_count pairs; C is the mean-centered covariance with
// 1/(n-1) normalization. No qualifying word yields zero with a diagnostic.
LossValue vw_coral_loss(const std::vector<WordGroup>& groups, int descriptor_dim,
                        int min_count = 2, GroupGradients* gradients = nullptr);

// value = (1/K') sum_k (1/N_k) sqrt(sum over ordered j != i of
// (||xS_i - xS_j|| - ||xT_i - xT_j||)^2); words need at least 2 pairs. The
// sqrt at 0 and zero target distances take subgradient 0.
LossValue cd_sos_loss(const std::vector<WordGroup>& groups,
                      GroupGradients* gradients = nullptr);

// ---------------------------------------------------------------------------
// SoftMatch: pose-consistency of soft correspondences.

// All detected features of one target view under the current head.
struct MatchTargets {
  Eigen::MatrixXd descriptors;             // n x d
  std::vector<Eigen::Vector2d> keypoints;  // n
};

// p_hat = sum_j alpha_j p_j with alpha = softmax(beta * <x^S, x^T_j>),
// stabilized by max-subtraction.
Eigen::Vector2d soft_argmax_match(const Eigen::VectorXd& source,
                                  const MatchTargets& targets,
                                  const SoftMatchConfig& cfg);

struct SoftMatchInstance {
  Eigen::VectorXd source;        // x^S_i
  Eigen::Vector2d reprojection;  // p^T_+: the 3D point under the training pose
  int targets_index = 0;         // view slot into the MatchTargets list
};

struct SoftMatchGradients {
  std::vector<Eigen::MatrixXd> d_targets;  // per view slot, n x d
};

// value = (1/n) sum_i (1/l) ||p_hat_i - p^T_{i+}||; the gradient reaches every
// target descriptor of the instance's view through the softmax weights.
LossValue softmatch_loss(const std::vector<SoftMatchInstance>& matches,
                         const std::vector<MatchTargets>& targets,
                         const SoftMatchConfig& cfg,
                         SoftMatchGradients* gradients = nullptr);

// ---------------------------------------------------------------------------
// Assembly over training views.

// One accepted training view: its mined correspondences plus every detected
// feature (pre-descriptors are fixed; descriptors are recomputed per step).
struct TrainingView {
  CorrespondenceSet set;
  std::vector<ObservedFeature> features;
};

struct LossOptions {
  double margin = 1.0;
  HingeDirection hinge = HingeDirection::standard;
  int coral_min_count = 2;
  double softmatch_beta = 10.0;
  TermFlags terms;
};

struct CalibrationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Weighted Eq. 6 total over a batch of views. Raw term values land in
// per_term; value = sum_i lambda_i * term_i. When weight_gradient is given,
// the lambda-weighted descriptor gradients are chained through the head into
// dL/dW (accumulated into a zeroed matrix of W's shape).
LossValue evaluate_total_loss(std::span<const TrainingView> views,
                              const DescriptorHead& head,
                              const CameraIntrinsics& intr,
                              const LossWeights& weights,
                              const LossOptions& options,
                              Eigen::MatrixXd* weight_gradient = nullptr);

// lambda_i = 1/(4 (mu_i + 3 sigma_i)) with per-view term evaluations at the
// supplied (initial) head and population sigma. Only enabled terms are
// calibrated; disabled terms get lambda 0. A term with mu + 3 sigma = 0
// raises CalibrationError asking for an explicit weight override.
LossWeights calibrate_weights(std::span<const TrainingView> views,
                              const DescriptorHead& head,
                              const CameraIntrinsics& intr,
                              const LossOptions& options);

TermFlags parse_loss_set(const std::string& name);  // throws on unknown names

void write_weights(std::ostream& os, const LossWeights& weights);
LossWeights read_weights(std::istream& is);

}  // namespace fsda
