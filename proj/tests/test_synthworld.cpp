#include <algorithm>
#include <map>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "fsda/rng.hpp"
#include "fsda/synthworld.hpp"

using namespace fsda;

namespace {

SceneConfig small_scene_config(std::uint64_t seed = 5) {
  SceneConfig cfg;
  cfg.num_landmarks = 120;
  cfg.num_reference_views = 6;
  cfg.seed = seed;
  return cfg;
}

double mean_cosine_to_source(const Scene& scene, const DomainSpec& shifted) {
  const DomainSpec source = DomainSpec::source(scene.landmarks[0].appearance.size());
  const Pose& pose = scene.reference_poses[0];
  const auto src = render_view(scene, pose, source, 99);
  const auto tgt = render_view(scene, pose, shifted, 99);
  REQUIRE(src.size() == tgt.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    sum += src[i].pre_descriptor.normalized().dot(
        tgt[i].pre_descriptor.normalized());
  }
  return sum / src.size();
}

}  // namespace

TEST_CASE("generate_scene is deterministic and seed-sensitive") {
  const SceneConfig cfg = small_scene_config();
  const Scene a = generate_scene(cfg);
  const Scene b = generate_scene(cfg);
  REQUIRE(a.landmarks.size() == b.landmarks.size());
  for (std::size_t i = 0; i < a.landmarks.size(); ++i) {
    CHECK(a.landmarks[i].id == b.landmarks[i].id);
    CHECK((a.landmarks[i].position - b.landmarks[i].position).norm() == 0.0);
    CHECK((a.landmarks[i].appearance - b.landmarks[i].appearance).norm() == 0.0);
    CHECK(a.landmarks[i].saliency == b.landmarks[i].saliency);
  }
  const Scene c = generate_scene(small_scene_config(6));
  bool any_differs = false;
  for (std::size_t i = 0; i < a.landmarks.size(); ++i)
    if ((a.landmarks[i].position - c.landmarks[i].position).norm() > 0)
      any_differs = true;
  CHECK(any_differs);
}

TEST_CASE("scene invariants: box bounds, unit appearances, valid poses") {
  const SceneConfig cfg = small_scene_config();
  const Scene scene = generate_scene(cfg);
  REQUIRE(static_cast<int>(scene.landmarks.size()) == cfg.num_landmarks);
  REQUIRE(static_cast<int>(scene.reference_poses.size()) ==
          cfg.num_reference_views);
  for (int i = 0; i < cfg.num_landmarks; ++i) {
    const Landmark& lm = scene.landmarks[i];
    CHECK(lm.id == i);
    CHECK(std::abs(lm.position.x()) <= cfg.box_half_xy);
    CHECK(std::abs(lm.position.y()) <= cfg.box_half_xy);
    CHECK(lm.position.z() >= cfg.box_min_z);
    CHECK(lm.position.z() <= cfg.box_max_z);
    CHECK(lm.appearance.size() == cfg.d_pre);
    CHECK(lm.appearance.norm() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(lm.saliency > 0.0);
    CHECK(lm.saliency <= 1.0);
  }
  for (const Pose& pose : scene.reference_poses) {
    CHECK_NOTHROW(pose.validate());
    const auto feats =
        render_view(scene, pose, DomainSpec::source(cfg.d_pre), 1);
    CHECK(static_cast<int>(feats.size()) >= cfg.min_visible_landmarks);
  }
}

TEST_CASE("generate_scene rejects degenerate landmark counts") {
  SceneConfig cfg = small_scene_config();
  cfg.num_landmarks = 49;
  CHECK_THROWS_AS(generate_scene(cfg), std::invalid_argument);
}

TEST_CASE("source render with zero noise reproduces the appearances") {
  const SceneConfig cfg = small_scene_config();
  const Scene scene = generate_scene(cfg);
  const auto feats = render_view(scene, scene.reference_poses[0],
                                 DomainSpec::source(cfg.d_pre), 7);
  REQUIRE(!feats.empty());
  for (const ObservedFeature& f : feats) {
    REQUIRE(f.landmark_id >= 0);
    REQUIRE(f.landmark_id < cfg.num_landmarks);
    CHECK((f.pre_descriptor - scene.landmarks[f.landmark_id].appearance)
              .norm() < 1e-12);
    CHECK(f.detection_score ==
          doctest::Approx(scene.landmarks[f.landmark_id].saliency));
  }
  // Features come in landmark-id order and keypoints land on the sensor.
  for (std::size_t i = 1; i < feats.size(); ++i)
    CHECK(feats[i - 1].landmark_id < feats[i].landmark_id);
  for (const ObservedFeature& f : feats) {
    CHECK(f.keypoint.x() >= 0.0);
    CHECK(f.keypoint.x() <= cfg.intr.width);
    CHECK(f.keypoint.y() >= 0.0);
    CHECK(f.keypoint.y() <= cfg.intr.height);
  }
}

TEST_CASE("per-landmark render noise depends on seed and landmark only") {
  const SceneConfig cfg = small_scene_config();
  const Scene scene = generate_scene(cfg);
  const DomainSpec noisy = DomainSpec::source(cfg.d_pre, 0.1, 0.05);

  const auto a = render_view(scene, scene.reference_poses[0], noisy, 42);
  const auto b = render_view(scene, scene.reference_poses[3], noisy, 42);
  std::map<int, const ObservedFeature*> by_id;
  for (const auto& f : a) by_id[f.landmark_id] = &f;
  int shared = 0;
  for (const auto& f : b) {
    const auto it = by_id.find(f.landmark_id);
    if (it == by_id.end()) continue;
    ++shared;
    CHECK((f.pre_descriptor - it->second->pre_descriptor).norm() == 0.0);
    CHECK(f.detection_score == it->second->detection_score);
  }
  REQUIRE(shared > 10);

  // A different render seed moves the noise.
  const auto c = render_view(scene, scene.reference_poses[0], noisy, 43);
  REQUIRE(c.size() == a.size());
  CHECK((c[0].pre_descriptor - a[0].pre_descriptor).norm() > 0.0);
}

TEST_CASE("shifted domain has the advertised mix and bias geometry") {
  const int d_pre = 32;
  const DomainSpec d1 = DomainSpec::shifted("t1", d_pre, 0.3, 0.0, 0.0, 2.0, 77);
  const DomainSpec d2 = DomainSpec::shifted("t2", d_pre, 0.6, 0.0, 0.0, 2.0, 77);
  const Eigen::MatrixXd g1 =
      (d1.mix_matrix - Eigen::MatrixXd::Identity(d_pre, d_pre)) / 0.3;
  const Eigen::MatrixXd g2 =
      (d2.mix_matrix - Eigen::MatrixXd::Identity(d_pre, d_pre)) / 0.6;
  CHECK(g1.norm() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK((g1 - g2).norm() < 1e-12);  // same direction, scaled severity
  CHECK(d1.bias.norm() == doctest::Approx(0.3 * 2.0).epsilon(1e-12));
  CHECK(d2.bias.norm() == doctest::Approx(0.6 * 2.0).epsilon(1e-12));
  CHECK(d1.bias.normalized().dot(d2.bias.normalized()) ==
        doctest::Approx(1.0).epsilon(1e-12));

  const DomainSpec other = DomainSpec::shifted("o", d_pre, 0.3, 0.0, 0.0, 2.0, 78);
  CHECK((g1 - (other.mix_matrix - Eigen::MatrixXd::Identity(d_pre, d_pre)) / 0.3)
            .norm() > 0.1);
}

TEST_CASE("appearance similarity to the source decays as gamma grows") {
  const SceneConfig cfg = small_scene_config();
  const Scene scene = generate_scene(cfg);
  double previous = 1.0;
  for (const double gamma : {0.2, 0.4, 0.6, 0.8}) {
    const DomainSpec spec =
        DomainSpec::shifted("g", cfg.d_pre, gamma, 0.0, 0.0, 1.5, 31);
    const double cosine = mean_cosine_to_source(scene, spec);
    CHECK(cosine < previous - 1e-3);
    previous = cosine;
  }
  CHECK(previous > 0.0);  // severities stay short of scrambling completely
}

TEST_CASE("generate_target_poses is deterministic and keeps landmarks in view") {
  const SceneConfig cfg = small_scene_config();
  const Scene scene = generate_scene(cfg);
  const auto poses = generate_target_poses(scene, cfg, 10, 55);
  const auto again = generate_target_poses(scene, cfg, 10, 55);
  REQUIRE(poses.size() == 10);
  for (std::size_t i = 0; i < poses.size(); ++i) {
    CHECK((poses[i].position - again[i].position).norm() == 0.0);
    CHECK((poses[i].rotation - again[i].rotation).norm() == 0.0);
    CHECK_NOTHROW(poses[i].validate());
    const auto feats =
        render_view(scene, poses[i], DomainSpec::source(cfg.d_pre), 2);
    CHECK(static_cast<int>(feats.size()) >= cfg.min_visible_landmarks);
  }
  const auto moved = generate_target_poses(scene, cfg, 10, 56);
  CHECK((moved[0].position - poses[0].position).norm() > 0.0);
}

TEST_CASE("scene serialization round-trips bit-exactly") {
  const SceneConfig cfg = small_scene_config();
  const Scene scene = generate_scene(cfg);
  std::vector<DomainSpec> domains;
  domains.push_back(DomainSpec::source(cfg.d_pre, 0.005, 0.05));
  domains[0].name = "source";
  domains.push_back(
      DomainSpec::shifted("target", cfg.d_pre, 0.6, 0.13, 0.1, 1.0, 9));

  std::ostringstream os;
  write_scene(os, scene, domains);

  Scene back;
  std::vector<DomainSpec> back_domains;
  std::istringstream is(os.str());
  read_scene(is, back, back_domains);

  REQUIRE(back.landmarks.size() == scene.landmarks.size());
  for (std::size_t i = 0; i < scene.landmarks.size(); ++i) {
    CHECK(back.landmarks[i].id == scene.landmarks[i].id);
    CHECK((back.landmarks[i].position - scene.landmarks[i].position).norm() ==
          0.0);
    CHECK((back.landmarks[i].appearance - scene.landmarks[i].appearance)
              .norm() == 0.0);
    CHECK(back.landmarks[i].saliency == scene.landmarks[i].saliency);
  }
  REQUIRE(back.reference_poses.size() == scene.reference_poses.size());
  for (std::size_t i = 0; i < scene.reference_poses.size(); ++i) {
    CHECK((back.reference_poses[i].position -
           scene.reference_poses[i].position).norm() == 0.0);
    CHECK((back.reference_poses[i].rotation -
           scene.reference_poses[i].rotation).norm() == 0.0);
  }
  CHECK(back.seed == scene.seed);
  REQUIRE(back_domains.size() == 2);
  CHECK(back_domains[1].name == "target");
  CHECK((back_domains[1].mix_matrix - domains[1].mix_matrix).norm() == 0.0);
  CHECK((back_domains[1].bias - domains[1].bias).norm() == 0.0);
  CHECK(back_domains[1].noise_sigma == domains[1].noise_sigma);
  CHECK(back_domains[1].gamma == domains[1].gamma);

  // The reloaded scene renders bit-identical features.
  const auto orig =
      render_view(scene, scene.reference_poses[2], domains[1], 123);
  const auto redo = render_view(back, back.reference_poses[2], back_domains[1],
                                123);
  REQUIRE(orig.size() == redo.size());
  for (std::size_t i = 0; i < orig.size(); ++i) {
    CHECK((orig[i].keypoint - redo[i].keypoint).norm() == 0.0);
    CHECK((orig[i].pre_descriptor - redo[i].pre_descriptor).norm() == 0.0);
    CHECK(orig[i].detection_score == redo[i].detection_score);
  }
}

TEST_CASE("pose serialization round-trips bit-exactly") {
  Rng rng(3);
  Pose pose;
  pose.position = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
  Eigen::Vector3d axis(rng.normal(), rng.normal(), rng.normal());
  axis.normalize();
  pose.rotation = rotation_about_axis(axis, 1.234);
  std::ostringstream os;
  write_pose(os, pose);
  std::istringstream is(os.str());
  const Pose back = read_pose(is);
  CHECK((back.position - pose.position).norm() == 0.0);
  CHECK((back.rotation - pose.rotation).norm() == 0.0);
}
