#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <vector>

namespace fsda {

struct CameraIntrinsics {
  double focal_x = 0.0;
  double focal_y = 0.0;
  double principal_x = 0.0;
  double principal_y = 0.0;
  int width = 0;
  int height = 0;

  double diagonal() const;
  void validate() const;  // throws std::invalid_argument
};

// Camera pose: world-space camera center and a world-to-camera rotation.
// A world point X maps to camera coordinates as R * (X - position).
struct Pose {
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();

  void validate(double tol = 1e-9) const;  // orthonormality and det(R)=+1
};

struct PoseError {
  double epsilon_t = 0.0;  // meters
  double epsilon_r = 0.0;  // degrees, in [0, 180]
};

struct RansacConfig {
  int max_iterations = 1000;
  double reproj_threshold_px = 4.0;
  int inlier_threshold = 15;
  std::uint64_t seed = 0;
};

struct RegistrationResult {
  Pose estimated_pose;
  std::vector<int> inlier_indices;  // into the candidate match list
  bool accepted = false;
};

struct Match2D3D {
  Eigen::Vector2d pixel = Eigen::Vector2d::Zero();
  Eigen::Vector3d point = Eigen::Vector3d::Zero();
  double score = 0.0;
};

// Pinhole projection. Returns the pixel if the point lies in front of the
// camera and inside the image bounds, absent otherwise.
std::optional<Eigen::Vector2d> project(const Eigen::Vector3d& point,
                                       const Pose& pose,
                                       const CameraIntrinsics& intr);

// Projection without the image-bounds clip; absent only behind the camera.
std::optional<Eigen::Vector2d> project_unbounded(const Eigen::Vector3d& point,
                                                 const Pose& pose,
                                                 const CameraIntrinsics& intr);

// Inverse of project at a known depth (camera-frame z).
Eigen::Vector3d backproject(const Eigen::Vector2d& pixel, double depth,
                            const Pose& pose, const CameraIntrinsics& intr);

// Position error = Euclidean distance between centers; rotation error =
// arccos((trace(R^T R_hat) - 1) / 2) in degrees, argument clamped to [-1, 1].
PoseError pose_error(const Pose& ground_truth, const Pose& estimate);

// DLT over >= 6 matches followed by Gauss-Newton refinement of pixel
// reprojection residuals with step halving. Empty on fewer than 6 matches or
// a rank-deficient DLT system.
std::optional<Pose> solve_pnp(const std::vector<Match2D3D>& matches,
                              const CameraIntrinsics& intr);

// Fixed-iteration RANSAC over minimal 6-match subsets; inliers are matches
// with reprojection error <= cfg.reproj_threshold_px under the refit pose;
// accepted iff the final inlier count reaches cfg.inlier_threshold.
// Deterministic for a given cfg.seed.
RegistrationResult ransac_register(const std::vector<Match2D3D>& candidates,
                                   const CameraIntrinsics& intr,
                                   const RansacConfig& cfg);

// Proper rotation about a unit axis, angle in radians.
Eigen::Matrix3d rotation_about_axis(const Eigen::Vector3d& axis,
                                    double radians);

// Pose at `eye` with the optical axis through `target`.
Pose look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
             const Eigen::Vector3d& up = Eigen::Vector3d::UnitZ());

}  // namespace fsda
