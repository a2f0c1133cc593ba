#include <limits>
#include <map>

#include "fsda/feature_model.hpp"
#include "fsda/losses.hpp"
#include "fsda/rng.hpp"
#include "fsda/trainer.hpp"

namespace fsda {

namespace {

// Ground-truth supervised triplets between two source renders: for each
// landmark seen in both views the view-b observation is the positive and the
// hardest different-landmark feature outside the safe radius is the negative.
std::vector<TripletInput> supervised_triplets(
    const std::vector<ObservedFeature>& view_a, const Eigen::MatrixXd& desc_a,
    const std::vector<char>& valid_a,
    const std::vector<ObservedFeature>& view_b, const Eigen::MatrixXd& desc_b,
    const std::vector<char>& valid_b, double safe_radius_px,
    std::vector<std::pair<int, int>>* chain) {
  std::map<int, int> b_by_landmark;
  for (std::size_t j = 0; j < view_b.size(); ++j)
    b_by_landmark[view_b[j].landmark_id] = static_cast<int>(j);

  std::vector<TripletInput> triplets;
  for (std::size_t i = 0; i < view_a.size(); ++i) {
    if (!valid_a[i]) continue;
    const auto it = b_by_landmark.find(view_a[i].landmark_id);
    if (it == b_by_landmark.end()) continue;
    const int pos = it->second;
    if (!valid_b[static_cast<std::size_t>(pos)]) continue;

    int neg = -1;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < view_b.size(); ++j) {
      if (!valid_b[j]) continue;
      if (view_b[j].landmark_id == view_a[i].landmark_id) continue;
      if ((view_b[j].keypoint - view_b[pos].keypoint).norm() <= safe_radius_px)
        continue;
      const double s = desc_b.row(j).dot(desc_a.row(i));
      if (s > best) {
        best = s;
        neg = static_cast<int>(j);
      }
    }
    if (neg < 0) continue;

    TripletInput t;
    t.source = desc_a.row(i).transpose();
    t.source_score = view_a[i].detection_score;
    t.positive = desc_b.row(pos).transpose();
    t.positive_score = view_b[pos].detection_score;
    t.negative = desc_b.row(neg).transpose();
    triplets.push_back(std::move(t));
    chain->emplace_back(pos, neg);
  }
  return triplets;
}

}  // namespace

DescriptorHead pretrain_source_head(const Scene& scene,
                                    const DomainSpec& source_domain,
                                    const PretrainConfig& cfg) {
  if (cfg.descriptor_dim < 2)
    throw std::invalid_argument("pretrain: descriptor_dim must be >= 2");
  const int n_views = static_cast<int>(scene.reference_poses.size());
  if (n_views < 4)
    throw std::invalid_argument("pretrain: need at least 4 reference views");

  std::vector<std::vector<ObservedFeature>> views;
  views.reserve(n_views);
  for (int v = 0; v < n_views; ++v)
    views.push_back(render_view(scene, scene.reference_poses[v], source_domain,
                                reference_render_seed(scene, v)));

  DescriptorHead head;
  head.weights.resize(cfg.descriptor_dim, views[0][0].pre_descriptor.size());
  Rng init_rng(derive_seed(cfg.seed, "head-init"));
  const double scale = 1.0 / std::sqrt(static_cast<double>(head.pre_dim()));
  for (Eigen::Index r = 0; r < head.weights.rows(); ++r)
    for (Eigen::Index c = 0; c < head.weights.cols(); ++c)
      head.weights(r, c) = scale * init_rng.normal();

  TrainConfig adam;
  adam.learning_rate = cfg.learning_rate;

  const auto validation_accuracy = [&](const DescriptorHead& h) {
    double sum = 0.0;
    for (int v = 0; v < n_views; ++v)
      sum += matching_accuracy(h, views[v], views[(v + 3) % n_views]);
    return sum / n_views;
  };

  // Model selection uses the mean separation margin (same-landmark similarity
  // minus the hardest impostor's), not accuracy: accuracy saturates after a
  // few epochs while the margin keeps growing, and the margin is what
  // survives a domain shift.
  const auto validation_margin = [&](const DescriptorHead& h) {
    double sum = 0.0;
    int count = 0;
    for (int v = 0; v < n_views; ++v) {
      const auto& view_a = views[v];
      const auto& view_b = views[(v + 3) % n_views];
      std::vector<char> valid_a, valid_b;
      const Eigen::MatrixXd desc_a = describe_features(h, view_a, &valid_a);
      const Eigen::MatrixXd desc_b = describe_features(h, view_b, &valid_b);
      std::map<int, int> b_by_landmark;
      for (std::size_t j = 0; j < view_b.size(); ++j)
        if (valid_b[j]) b_by_landmark[view_b[j].landmark_id] = static_cast<int>(j);
      for (std::size_t i = 0; i < view_a.size(); ++i) {
        if (!valid_a[i]) continue;
        const auto it = b_by_landmark.find(view_a[i].landmark_id);
        if (it == b_by_landmark.end()) continue;
        const Eigen::VectorXd sims = desc_b * desc_a.row(i).transpose();
        double hardest = -1.0;
        for (Eigen::Index j = 0; j < sims.size(); ++j) {
          if (!valid_b[static_cast<std::size_t>(j)]) continue;
          if (view_b[static_cast<std::size_t>(j)].landmark_id ==
              view_a[i].landmark_id)
            continue;
          hardest = std::max(hardest, sims[j]);
        }
        sum += sims[it->second] - hardest;
        ++count;
      }
    }
    return count > 0 ? sum / count : 0.0;
  };

  TrainState state = make_train_state(head);
  DescriptorHead best_head = state.head;
  double best_margin = -std::numeric_limits<double>::infinity();
  int epochs_since_best = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int v = 0; v < n_views; ++v) {
      const auto& view_a = views[v];
      const auto& view_b = views[(v + 1) % n_views];
      std::vector<char> valid_a, valid_b;
      const Eigen::MatrixXd desc_a =
          describe_features(state.head, view_a, &valid_a);
      const Eigen::MatrixXd desc_b =
          describe_features(state.head, view_b, &valid_b);

      std::vector<std::pair<int, int>> chain;  // (positive, negative) in b
      const auto triplets =
          supervised_triplets(view_a, desc_a, valid_a, view_b, desc_b, valid_b,
                              cfg.safe_radius_px, &chain);
      if (triplets.empty()) continue;

      TripletGradients grads;
      correspondence_loss(triplets, cfg.margin, HingeDirection::standard,
                          &grads);

      Eigen::MatrixXd gradient = Eigen::MatrixXd::Zero(
          state.head.weights.rows(), state.head.weights.cols());
      for (std::size_t t = 0; t < triplets.size(); ++t) {
        accumulate_describe_backward(state.head,
                                     view_b[chain[t].first].pre_descriptor,
                                     grads.d_positive[t], gradient);
        accumulate_describe_backward(state.head,
                                     view_b[chain[t].second].pre_descriptor,
                                     grads.d_negative[t], gradient);
      }
      adam_step(state, gradient, adam);
    }

    const double margin = validation_margin(state.head);
    if (margin > best_margin) {
      best_margin = margin;
      best_head = state.head;
      epochs_since_best = 0;
    } else {
      ++epochs_since_best;
    }
    if (epochs_since_best >= cfg.patience) break;
  }

  const double best_accuracy = validation_accuracy(best_head);
  if (best_accuracy < cfg.min_accuracy) {
    throw ConvergenceError(
        "pretrain: validation matching accuracy " +
            std::to_string(best_accuracy) + " stayed below the required " +
            std::to_string(cfg.min_accuracy),
        best_accuracy);
  }
  best_head.frozen = true;
  return best_head;
}

}  // namespace fsda
