#include "fsda/trainer.hpp"

#include <algorithm>
#include <cmath>

#include "fsda/rng.hpp"
#include "fsda/text_io.hpp"

namespace fsda {

LossOptions TrainConfig::loss_options() const {
  LossOptions opt;
  opt.margin = margin;
  opt.hinge = hinge;
  opt.coral_min_count = coral_min_count;
  opt.softmatch_beta = softmatch_beta;
  opt.terms = terms;
  return opt;
}

void TrainConfig::validate() const {
  if (learning_rate <= 0.0)
    throw std::invalid_argument("train config: learning_rate must be > 0");
  if (batch_size < 1)
    throw std::invalid_argument("train config: batch_size must be >= 1");
  if (epochs < 0)
    throw std::invalid_argument("train config: epochs must be >= 0");
  if (adam_beta1 < 0.0 || adam_beta1 >= 1.0 || adam_beta2 < 0.0 ||
      adam_beta2 >= 1.0)
    throw std::invalid_argument("train config: adam betas must lie in [0, 1)");
  if (adam_eps <= 0.0)
    throw std::invalid_argument("train config: adam eps must be > 0");
  if (validation_interval < 1)
    throw std::invalid_argument(
        "train config: validation_interval must be >= 1");
}

TrainState make_train_state(const DescriptorHead& init) {
  TrainState state;
  state.head = init;
  state.head.frozen = false;
  state.first_moment = Eigen::MatrixXd::Zero(init.weights.rows(),
                                             init.weights.cols());
  state.second_moment = state.first_moment;
  return state;
}

void adam_step(TrainState& state, const Eigen::MatrixXd& gradient,
               const TrainConfig& cfg) {
  if (state.head.frozen)
    throw std::logic_error("adam_step: head is frozen");
  if (gradient.rows() != state.head.weights.rows() ||
      gradient.cols() != state.head.weights.cols())
    throw std::invalid_argument("adam_step: gradient shape mismatch");
  if (!gradient.allFinite())
    throw NonFiniteGradientError("adam_step: non-finite gradient at step " +
                                 std::to_string(state.step + 1));

  state.step += 1;
  state.first_moment =
      cfg.adam_beta1 * state.first_moment + (1.0 - cfg.adam_beta1) * gradient;
  state.second_moment = cfg.adam_beta2 * state.second_moment +
                        (1.0 - cfg.adam_beta2) * gradient.cwiseProduct(gradient);

  const double bias1 = 1.0 - std::pow(cfg.adam_beta1, state.step);
  const double bias2 = 1.0 - std::pow(cfg.adam_beta2, state.step);
  const Eigen::MatrixXd m_hat = state.first_moment / bias1;
  const Eigen::MatrixXd v_hat = state.second_moment / bias2;
  state.head.weights -=
      cfg.learning_rate *
      (m_hat.array() / (v_hat.array().sqrt() + cfg.adam_eps)).matrix();
}

TrainResult train(std::vector<TrainingView> views, const LossWeights& weights,
                  const CameraIntrinsics& intr, const DescriptorHead& init,
                  const TrainConfig& cfg, const ValidationCallback& validation) {
  cfg.validate();
  if (views.empty())
    throw std::invalid_argument("train: no accepted correspondence sets");

  TrainState state = make_train_state(init);
  const LossOptions options = cfg.loss_options();
  const MiningConfig mining{cfg.safe_radius_px};

  TrainResult result;
  result.head = state.head;

  int epochs_since_best = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(cfg.seed, "epoch-shuffle",
                                static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(views);

    for (std::size_t offset = 0; offset < views.size();
         offset += cfg.batch_size) {
      const std::size_t count =
          std::min<std::size_t>(cfg.batch_size, views.size() - offset);
      const std::span<TrainingView> batch(views.data() + offset, count);

      for (auto& view : batch)
        view.set = mine_hard_negatives(view.set, view.features, state.head,
                                       mining);

      Eigen::MatrixXd gradient;
      const LossValue loss = evaluate_total_loss(
          std::span<const TrainingView>(batch.data(), batch.size()),
          state.head, intr, weights, options, &gradient);

      adam_step(state, gradient, cfg);
      state.loss_history.push_back(loss.value);

      TrainLogRow row;
      row.epoch = epoch;
      row.step = state.step;
      row.total = loss.value;
      row.terms = loss.per_term;
      row.gradient_norm = gradient.norm();
      result.log.push_back(std::move(row));
    }

    result.epochs_run = epoch + 1;
    if (validation && (epoch + 1) % cfg.validation_interval == 0) {
      const double recall = validation(state.head);
      result.validation_history.emplace_back(epoch, recall);
      if (result.best_epoch < 0 || recall > result.best_validation) {
        result.best_validation = recall;
        result.best_epoch = epoch;
        result.head = state.head;
        epochs_since_best = 0;
      } else {
        epochs_since_best += cfg.validation_interval;
        if (epochs_since_best >= cfg.patience) break;
      }
    }
  }

  if (!validation || result.best_epoch < 0) result.head = state.head;
  return result;
}

void write_train_log(std::ostream& os, const std::vector<TrainLogRow>& log) {
  os << "epoch step total gradient_norm terms...\n";
  for (const auto& row : log) {
    os << row.epoch << ' ' << row.step << ' ' << format_double(row.total)
       << ' ' << format_double(row.gradient_norm);
    for (const auto& [term, value] : row.terms)
      os << ' ' << term << '=' << format_double(value);
    os << '\n';
  }
}

void write_checkpoint(std::ostream& os, const TrainState& state) {
  os << "fsda-checkpoint 1\n";
  os << "step " << state.step << '\n';
  write_head(os, state.head);
  os << "first_moment\n";
  write_matrix_rows(os, state.first_moment);
  os << "second_moment\n";
  write_matrix_rows(os, state.second_moment);
}

TrainState read_checkpoint(std::istream& is) {
  expect_token(is, "fsda-checkpoint", "checkpoint header");
  const long version = read_long(is, "checkpoint.version");
  if (version != 1)
    throw std::runtime_error("unsupported checkpoint version " +
                             std::to_string(version));
  TrainState state;
  expect_token(is, "step", "checkpoint.step");
  state.step = read_long(is, "checkpoint.step");
  state.head = read_head(is);
  const int rows = state.head.descriptor_dim();
  const int cols = state.head.pre_dim();
  expect_token(is, "first_moment", "checkpoint.first_moment");
  state.first_moment.resize(rows, cols);
  for (int r = 0; r < rows; ++r)
    state.first_moment.row(r) =
        read_vector(is, cols, "checkpoint.first_moment").transpose();
  expect_token(is, "second_moment", "checkpoint.second_moment");
  state.second_moment.resize(rows, cols);
  for (int r = 0; r < rows; ++r)
    state.second_moment.row(r) =
        read_vector(is, cols, "checkpoint.second_moment").transpose();
  return state;
}

}  // namespace fsda
