#include "fsda/correspondence.hpp"

#include <algorithm>
#include <limits>
#include <map>

#include "fsda/hashing.hpp"
#include "fsda/text_io.hpp"

namespace fsda {

Eigen::MatrixXd PointCloudModel::descriptor_matrix() const {
  if (points.empty()) return {};
  Eigen::MatrixXd m(points.size(), points[0].descriptor.size());
  for (std::size_t i = 0; i < points.size(); ++i)
    m.row(i) = points[i].descriptor.transpose();
  return m;
}

std::uint64_t PointCloudModel::content_hash() const {
  Hasher h;
  h.update_u64(points.size());
  for (const auto& p : points) {
    for (int i = 0; i < 3; ++i) h.update(p.position[i]);
    for (Eigen::Index i = 0; i < p.descriptor.size(); ++i)
      h.update(p.descriptor[i]);
    h.update(p.detection_score);
    h.update_u64(static_cast<std::uint64_t>(p.landmark_id));
  }
  for (const int v : built_from) h.update_u64(static_cast<std::uint64_t>(v));
  return h.digest();
}

PointCloudModel build_point_cloud(const Scene& scene,
                                  const DescriptorHead& source_head,
                                  const DomainSpec& source_domain,
                                  std::span<const int> reference_views) {
  if (!source_head.frozen)
    throw std::logic_error("build_point_cloud: source head must be frozen");

  struct Accum {
    Eigen::VectorXd descriptor_sum;
    double score_sum = 0.0;
    int views = 0;
    Eigen::Vector3d position;
  };
  std::map<int, Accum> by_landmark;

  PointCloudModel cloud;
  for (const int view : reference_views) {
    cloud.built_from.push_back(view);
    const auto features =
        render_view(scene, scene.reference_poses.at(view), source_domain,
                    reference_render_seed(scene, view));
    std::vector<char> valid;
    const Eigen::MatrixXd desc = describe_features(source_head, features, &valid);
    for (std::size_t i = 0; i < features.size(); ++i) {
      if (!valid[i]) continue;
      const auto& f = features[i];
      auto& acc = by_landmark[f.landmark_id];
      if (acc.views == 0) {
        acc.descriptor_sum = desc.row(i).transpose();
        acc.position = scene.landmarks.at(f.landmark_id).position;
      } else {
        acc.descriptor_sum += desc.row(i).transpose();
      }
      acc.score_sum += f.detection_score;
      ++acc.views;
    }
  }

  for (const auto& [landmark_id, acc] : by_landmark) {
    if (acc.views < 2) continue;
    PointCloudModel::Point p;
    p.position = acc.position;
    p.descriptor = acc.descriptor_sum / acc.descriptor_sum.norm();
    p.detection_score = acc.score_sum / acc.views;
    p.landmark_id = landmark_id;
    cloud.points.push_back(std::move(p));
  }
  if (cloud.points.empty()) {
    throw std::runtime_error(
        "build_point_cloud: no landmark visible in two or more reference "
        "views");
  }
  return cloud;
}

RegistrationOutcome register_target_view(
    const std::vector<ObservedFeature>& features, const PointCloudModel& cloud,
    const DescriptorHead& head, const CameraIntrinsics& intr,
    const MatchingConfig& cfg) {
  if (features.empty())
    throw std::invalid_argument("register_target_view: no features");

  const int n = static_cast<int>(features.size());
  const int m = static_cast<int>(cloud.points.size());
  std::vector<char> valid;
  const Eigen::MatrixXd feat_desc = describe_features(head, features, &valid);
  const Eigen::MatrixXd cloud_desc = cloud.descriptor_matrix();

  // All pairwise squared distances (unit vectors: d^2 = 2 - 2 x.y).
  const Eigen::MatrixXd sim = feat_desc * cloud_desc.transpose();  // n x m

  std::vector<int> best_cloud_for_feature(n, -1);
  std::vector<int> best_feature_for_cloud(m, -1);
  Eigen::VectorXd best_sim_cloud(m);
  best_sim_cloud.setConstant(-std::numeric_limits<double>::infinity());

  RegistrationOutcome outcome;
  for (int i = 0; i < n; ++i) {
    if (!valid[static_cast<std::size_t>(i)]) continue;
    int best = -1, second = -1;
    double best_s = -std::numeric_limits<double>::infinity();
    double second_s = best_s;
    for (int j = 0; j < m; ++j) {
      const double s = sim(i, j);
      if (s > best_s) {
        second_s = best_s;
        second = best;
        best_s = s;
        best = j;
      } else if (s > second_s) {
        second_s = s;
        second = j;
      }
      if (s > best_sim_cloud[j]) {
        best_sim_cloud[j] = s;
        best_feature_for_cloud[j] = i;
      }
    }
    (void)second;
    best_cloud_for_feature[i] = best;
    if (m >= 2) {
      const double d1 = std::sqrt(std::max(0.0, 2.0 - 2.0 * best_s));
      const double d2 = std::sqrt(std::max(0.0, 2.0 - 2.0 * second_s));
      if (d2 > 0.0 && d1 / d2 > cfg.ratio_threshold) {
        best_cloud_for_feature[i] = -1;  // ratio test failed
      }
    }
  }

  for (int i = 0; i < n; ++i) {
    const int j = best_cloud_for_feature[i];
    if (j >= 0 && best_feature_for_cloud[j] == i) {
      outcome.candidates.push_back({i, j, sim(i, j)});
    }
  }

  // Canonical order, independent of input feature order.
  std::sort(outcome.candidates.begin(), outcome.candidates.end(),
            [&](const CandidateMatch& a, const CandidateMatch& b) {
              if (a.cloud_index != b.cloud_index)
                return a.cloud_index < b.cloud_index;
              const auto& ka = features[a.feature_index].keypoint;
              const auto& kb = features[b.feature_index].keypoint;
              if (ka.y() != kb.y()) return ka.y() < kb.y();
              return ka.x() < kb.x();
            });

  if (outcome.candidates.size() < 6) {
    outcome.result.accepted = false;
    return outcome;
  }

  std::vector<Match2D3D> matches;
  matches.reserve(outcome.candidates.size());
  for (const auto& c : outcome.candidates) {
    matches.push_back({features[c.feature_index].keypoint,
                       cloud.points[c.cloud_index].position, c.similarity});
  }
  outcome.result = ransac_register(matches, intr, cfg.ransac);
  return outcome;
}

CorrespondenceSet extract_pairs(const RegistrationOutcome& outcome,
                                const std::vector<ObservedFeature>& features,
                                const PointCloudModel& cloud,
                                const VisualVocabulary& vocab,
                                const std::optional<Pose>& gt_pose,
                                const CameraIntrinsics& intr,
                                const PairExtractionConfig& cfg, int view_id) {
  if (!outcome.result.accepted)
    throw std::logic_error(
        "extract_pairs: registration was not accepted for view " +
        std::to_string(view_id));

  CorrespondenceSet set;
  set.view_id = view_id;
  if (gt_pose) {
    set.training_pose = *gt_pose;
    set.provenance = PoseProvenance::ground_truth;
  } else {
    set.training_pose = outcome.result.estimated_pose;
    set.provenance = PoseProvenance::estimated;
  }

  for (const int idx : outcome.result.inlier_indices) {
    const CandidateMatch& cm = outcome.candidates.at(idx);
    const auto& feature = features.at(cm.feature_index);
    const auto& point = cloud.points.at(cm.cloud_index);

    if (gt_pose) {
      const auto reproj = project(point.position, *gt_pose, intr);
      if (!reproj) continue;
      if ((*reproj - feature.keypoint).norm() > cfg.refine_radius_px) continue;
    }

    CorrespondencePair pair;
    pair.source_descriptor = point.descriptor;
    pair.source_score = point.detection_score;
    pair.point = point.position;
    pair.target_pre = feature.pre_descriptor;
    pair.target_keypoint = feature.keypoint;
    pair.target_score = feature.detection_score;
    pair.target_feature_index = cm.feature_index;
    pair.word = assign_source(vocab, point.descriptor);
    set.pairs.push_back(std::move(pair));
  }

  if (set.pairs.empty()) {
    throw EmptyCorrespondenceError(
        "extract_pairs: no pairs survived for view " +
        std::to_string(view_id));
  }
  return set;
}

CorrespondenceSet mine_hard_negatives(const CorrespondenceSet& set,
                                      const std::vector<ObservedFeature>& features,
                                      const DescriptorHead& head,
                                      const MiningConfig& cfg) {
  CorrespondenceSet out = set;
  out.triplets.clear();
  if (set.pairs.empty()) return out;

  const int n = static_cast<int>(features.size());
  std::vector<char> valid;
  const Eigen::MatrixXd desc = describe_features(head, features, &valid);

  for (std::size_t p = 0; p < set.pairs.size(); ++p) {
    const auto& pair = set.pairs[p];
    if (pair.target_feature_index >= 0 && pair.target_feature_index < n &&
        !valid[static_cast<std::size_t>(pair.target_feature_index)])
      continue;  // the positive itself is degenerate under this head
    int best = -1;
    double best_sim = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) {
      if (!valid[static_cast<std::size_t>(i)]) continue;
      if ((features[i].keypoint - pair.target_keypoint).norm() <=
          cfg.safe_radius_px)
        continue;
      const double s = desc.row(i).dot(pair.source_descriptor);
      if (s > best_sim) {
        best_sim = s;
        best = i;
      }
    }
    if (best < 0) continue;  // no eligible negative in this view
    Triplet t;
    t.pair_index = static_cast<int>(p);
    t.negative_feature_index = best;
    t.negative_pre = features[best].pre_descriptor;
    t.negative_keypoint = features[best].keypoint;
    out.triplets.push_back(std::move(t));
  }
  return out;
}

void write_correspondence_set(std::ostream& os, const CorrespondenceSet& set) {
  const int d = set.pairs.empty()
                    ? 0
                    : static_cast<int>(set.pairs[0].source_descriptor.size());
  const int d_pre =
      set.pairs.empty() ? 0 : static_cast<int>(set.pairs[0].target_pre.size());
  os << "fsda-correspondences 1\n";
  os << "view " << set.view_id << ' '
     << (set.provenance == PoseProvenance::ground_truth ? "ground_truth"
                                                        : "estimated")
     << '\n';
  os << "pose ";
  write_pose(os, set.training_pose);
  os << '\n';
  os << "pairs " << set.pairs.size() << ' ' << d << ' ' << d_pre << '\n';
  for (const auto& p : set.pairs) {
    os << p.word << ' ' << p.target_feature_index << ' ';
    write_vector(os, p.point);
    os << ' ' << format_double(p.source_score) << ' ';
    write_vector(os, p.source_descriptor);
    os << ' ' << format_double(p.target_keypoint.x()) << ' '
       << format_double(p.target_keypoint.y()) << ' '
       << format_double(p.target_score) << ' ';
    write_vector(os, p.target_pre);
    os << '\n';
  }
  os << "triplets " << set.triplets.size() << '\n';
  for (const auto& t : set.triplets) {
    os << t.pair_index << ' ' << t.negative_feature_index << ' '
       << format_double(t.negative_keypoint.x()) << ' '
       << format_double(t.negative_keypoint.y()) << ' ';
    write_vector(os, t.negative_pre);
    os << '\n';
  }
}

void write_point_cloud(std::ostream& os, const PointCloudModel& cloud) {
  const int d = cloud.points.empty()
                    ? 0
                    : static_cast<int>(cloud.points[0].descriptor.size());
  os << "fsda-cloud 1\n";
  os << "built_from " << cloud.built_from.size();
  for (const int v : cloud.built_from) os << ' ' << v;
  os << '\n';
  os << "points " << cloud.points.size() << ' ' << d << '\n';
  for (const auto& p : cloud.points) {
    os << p.landmark_id << ' ';
    write_vector(os, p.position);
    os << ' ' << format_double(p.detection_score) << ' ';
    write_vector(os, p.descriptor);
    os << '\n';
  }
}

PointCloudModel read_point_cloud(std::istream& is) {
  expect_token(is, "fsda-cloud", "cloud header");
  const long version = read_long(is, "cloud.version");
  if (version != 1)
    throw std::runtime_error("unsupported cloud version " +
                             std::to_string(version));
  PointCloudModel cloud;
  expect_token(is, "built_from", "cloud.built_from");
  const long nviews = read_long(is, "built_from.count");
  for (long i = 0; i < nviews; ++i)
    cloud.built_from.push_back(
        static_cast<int>(read_long(is, "built_from.view")));
  expect_token(is, "points", "cloud.points");
  const long count = read_long(is, "points.count");
  const long d = read_long(is, "points.d");
  for (long i = 0; i < count; ++i) {
    PointCloudModel::Point p;
    p.landmark_id = static_cast<int>(read_long(is, "point.landmark_id"));
    for (int k = 0; k < 3; ++k) p.position[k] = read_double(is, "point.position");
    p.detection_score = read_double(is, "point.detection_score");
    p.descriptor = read_vector(is, static_cast<int>(d), "point.descriptor");
    cloud.points.push_back(std::move(p));
  }
  return cloud;
}

CorrespondenceSet read_correspondence_set(std::istream& is) {
  expect_token(is, "fsda-correspondences", "correspondence header");
  const long version = read_long(is, "correspondences.version");
  if (version != 1)
    throw std::runtime_error("unsupported correspondence version " +
                             std::to_string(version));
  CorrespondenceSet set;
  expect_token(is, "view", "correspondences.view");
  set.view_id = static_cast<int>(read_long(is, "view.id"));
  const std::string prov = read_token(is, "view.provenance");
  if (prov == "ground_truth")
    set.provenance = PoseProvenance::ground_truth;
  else if (prov == "estimated")
    set.provenance = PoseProvenance::estimated;
  else
    throw std::runtime_error("unknown pose provenance '" + prov + "'");
  expect_token(is, "pose", "correspondences.pose");
  set.training_pose = read_pose(is);

  expect_token(is, "pairs", "correspondences.pairs");
  const long np = read_long(is, "pairs.count");
  const long d = read_long(is, "pairs.d");
  const long d_pre = read_long(is, "pairs.d_pre");
  for (long i = 0; i < np; ++i) {
    CorrespondencePair p;
    p.word = static_cast<int>(read_long(is, "pair.word"));
    p.target_feature_index =
        static_cast<int>(read_long(is, "pair.target_feature_index"));
    for (int k = 0; k < 3; ++k) p.point[k] = read_double(is, "pair.point");
    p.source_score = read_double(is, "pair.source_score");
    p.source_descriptor =
        read_vector(is, static_cast<int>(d), "pair.source_descriptor");
    p.target_keypoint.x() = read_double(is, "pair.target_keypoint");
    p.target_keypoint.y() = read_double(is, "pair.target_keypoint");
    p.target_score = read_double(is, "pair.target_score");
    p.target_pre = read_vector(is, static_cast<int>(d_pre), "pair.target_pre");
    set.pairs.push_back(std::move(p));
  }

  expect_token(is, "triplets", "correspondences.triplets");
  const long nt = read_long(is, "triplets.count");
  for (long i = 0; i < nt; ++i) {
    Triplet t;
    t.pair_index = static_cast<int>(read_long(is, "triplet.pair_index"));
    t.negative_feature_index =
        static_cast<int>(read_long(is, "triplet.negative_feature_index"));
    t.negative_keypoint.x() = read_double(is, "triplet.negative_keypoint");
    t.negative_keypoint.y() = read_double(is, "triplet.negative_keypoint");
    t.negative_pre =
        read_vector(is, static_cast<int>(d_pre), "triplet.negative_pre");
    set.triplets.push_back(std::move(t));
  }
  return set;
}

}  // namespace fsda
