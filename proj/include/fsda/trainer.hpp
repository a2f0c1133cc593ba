#pragma once

#include <functional>

#include "fsda/losses.hpp"

namespace fsda {

struct NonFiniteGradientError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double learning_rate = 1e-5;  // conservative; experiment configs raise this
  int batch_size = 10;          // views per step
  int epochs = 50;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  TermFlags terms;

  double margin = 1.0;
  HingeDirection hinge = HingeDirection::standard;
  int coral_min_count = 2;
  double softmatch_beta = 10.0;
  double safe_radius_px = 8.0;  // hard-negative mining exclusion zone

  int patience = 10;            // epochs without validation improvement
  int validation_interval = 1;  // validate every N epochs

  LossOptions loss_options() const;
  void validate() const;  // throws std::invalid_argument
};

struct TrainState {
  DescriptorHead head;           // trainable copy
  Eigen::MatrixXd first_moment;  // Adam m
  Eigen::MatrixXd second_moment; // Adam v
  long step = 0;
  std::vector<double> loss_history;  // total loss per step
};

TrainState make_train_state(const DescriptorHead& init);

// Standard bias-corrected Adam update on W. Throws NonFiniteGradientError on
// a non-finite gradient and std::logic_error on a frozen head.
void adam_step(TrainState& state, const Eigen::MatrixXd& gradient,
               const TrainConfig& cfg);

struct TrainLogRow {
  int epoch = 0;
  long step = 0;
  double total = 0.0;
  std::map<std::string, double> terms;  // raw per-term values
  double gradient_norm = 0.0;
};

struct TrainResult {
  DescriptorHead head;  // best-by-validation head, or the final one
  std::vector<TrainLogRow> log;
  std::vector<std::pair<int, double>> validation_history;  // (epoch, recall)
  int best_epoch = -1;
  double best_validation = 0.0;
  int epochs_run = 0;
};

using ValidationCallback = std::function<double(const DescriptorHead&)>;

// Epochs over deterministic view batches; per batch the target descriptors
// are recomputed with the current head, hard negatives are re-mined, the
// weighted total loss is evaluated and one Adam step taken. With a validation
// callback the best head by recall is returned and training stops after
// cfg.patience epochs without improvement.
TrainResult train(std::vector<TrainingView> views, const LossWeights& weights,
                  const CameraIntrinsics& intr, const DescriptorHead& init,
                  const TrainConfig& cfg,
                  const ValidationCallback& validation = nullptr);

void write_train_log(std::ostream& os, const std::vector<TrainLogRow>& log);

void write_checkpoint(std::ostream& os, const TrainState& state);
TrainState read_checkpoint(std::istream& is);

}  // namespace fsda
