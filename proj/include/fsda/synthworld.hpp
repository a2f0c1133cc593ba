#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "fsda/geometry.hpp"

namespace fsda {

struct Landmark {
  int id = 0;
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  Eigen::VectorXd appearance;  // unit norm, dimension d_pre
  double saliency = 1.0;       // in (0, 1]
};

// A rendering condition. Appearance vectors are mixed by (I + gamma * G)
// with ||G||_F = 1, biased, renormalized, then perturbed by Gaussian noise;
// detection scores get uniform jitter. gamma = 0 with zero bias is the
// source condition.
struct DomainSpec {
  std::string name;
  Eigen::MatrixXd mix_matrix;
  Eigen::VectorXd bias;
  double noise_sigma = 0.0;
  double score_jitter = 0.0;
  double gamma = 0.0;

  static DomainSpec source(int d_pre, double noise_sigma = 0.0,
                           double score_jitter = 0.0);
  // The mix direction G and bias direction depend on `seed` only, so one seed
  // yields a family of conditions of increasing severity as gamma grows.
  static DomainSpec shifted(const std::string& name, int d_pre, double gamma,
                            double noise_sigma, double score_jitter,
                            double bias_scale, std::uint64_t seed);
};

struct SceneConfig {
  int num_landmarks = 600;
  int num_reference_views = 12;
  int d_pre = 32;
  double box_half_xy = 4.0;
  double box_min_z = 0.0;
  double box_max_z = 3.0;
  double ring_radius = 10.0;
  double ring_height = 1.6;
  int min_visible_landmarks = 30;
  CameraIntrinsics intr{500.0, 500.0, 320.0, 240.0, 640, 480};
  std::uint64_t seed = 1;
};

struct Scene {
  std::vector<Landmark> landmarks;
  std::vector<Pose> reference_poses;
  CameraIntrinsics intr;
  std::uint64_t seed = 0;
};

struct ObservedFeature {
  Eigen::Vector2d keypoint = Eigen::Vector2d::Zero();
  Eigen::VectorXd pre_descriptor;
  double detection_score = 1.0;
  // Ground-truth provenance; never consulted by the adaptation path.
  int landmark_id = -1;
};

// Landmarks uniform in a box, appearances isotropic unit vectors, reference
// poses on a ring facing the box center. Deterministic per cfg.seed. Throws
// if any reference pose observes fewer than cfg.min_visible_landmarks.
Scene generate_scene(const SceneConfig& cfg);

// Poses near the reference ring with jittered radius/height/aim, each
// observing at least cfg.min_visible_landmarks. Deterministic per seed.
std::vector<Pose> generate_target_poses(const Scene& scene,
                                        const SceneConfig& cfg, int count,
                                        std::uint64_t seed);

// One feature per visible landmark, in landmark-id order. Per-landmark noise
// depends only on (seed, landmark id).
std::vector<ObservedFeature> render_view(const Scene& scene, const Pose& pose,
                                         const DomainSpec& domain,
                                         std::uint64_t seed);

std::uint64_t reference_render_seed(const Scene& scene, int view_index);

void write_scene(std::ostream& os, const Scene& scene,
                 const std::vector<DomainSpec>& domains);
void read_scene(std::istream& is, Scene& scene,
                std::vector<DomainSpec>& domains);

void write_pose(std::ostream& os, const Pose& pose);
Pose read_pose(std::istream& is);

}  // namespace fsda
