#include "fsda/geometry.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "fsda/rng.hpp"

namespace fsda {

namespace {

constexpr double kMinDepth = 1e-9;
constexpr double kDegenerateSingularValueRatio = 1e-8;

Eigen::Matrix3d skew(const Eigen::Vector3d& w) {
  Eigen::Matrix3d s;
  s << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
  return s;
}

Eigen::Matrix3d so3_exp(const Eigen::Vector3d& w) {
  const double theta = w.norm();
  if (theta < 1e-12) return Eigen::Matrix3d::Identity() + skew(w);
  const Eigen::Matrix3d s = skew(w / theta);
  return Eigen::Matrix3d::Identity() + std::sin(theta) * s +
         (1.0 - std::cos(theta)) * s * s;
}

// Internal parameterization used by the solver: x_cam = R * X + t.
struct RigidCamera {
  Eigen::Matrix3d R;
  Eigen::Vector3d t;

  Pose to_pose() const { return Pose{-R.transpose() * t, R}; }
};

double reprojection_error_sq(const RigidCamera& cam,
                             const CameraIntrinsics& intr,
                             const Match2D3D& m) {
  const Eigen::Vector3d pc = cam.R * m.point + cam.t;
  if (pc.z() <= kMinDepth) return std::numeric_limits<double>::infinity();
  const double u = intr.focal_x * pc.x() / pc.z() + intr.principal_x;
  const double v = intr.focal_y * pc.y() / pc.z() + intr.principal_y;
  const double du = u - m.pixel.x();
  const double dv = v - m.pixel.y();
  return du * du + dv * dv;
}

double total_error_sq(const RigidCamera& cam, const CameraIntrinsics& intr,
                      const std::vector<Match2D3D>& matches) {
  double e = 0.0;
  for (const auto& m : matches) e += reprojection_error_sq(cam, intr, m);
  return e;
}

// Direct linear transform on normalized image coordinates. Returns false on
// a rank-deficient system (second-smallest singular value too small).
bool solve_dlt(const std::vector<Match2D3D>& matches,
               const CameraIntrinsics& intr, RigidCamera& out) {
  const int n = static_cast<int>(matches.size());
  Eigen::MatrixXd a(2 * n, 12);
  for (int i = 0; i < n; ++i) {
    const Eigen::Vector3d& x = matches[i].point;
    const double u = (matches[i].pixel.x() - intr.principal_x) / intr.focal_x;
    const double v = (matches[i].pixel.y() - intr.principal_y) / intr.focal_y;
    a.row(2 * i) << x.x(), x.y(), x.z(), 1, 0, 0, 0, 0, -u * x.x(), -u * x.y(),
        -u * x.z(), -u;
    a.row(2 * i + 1) << 0, 0, 0, 0, x.x(), x.y(), x.z(), 1, -v * x.x(),
        -v * x.y(), -v * x.z(), -v;
  }

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  if (sv(0) <= 0.0 || sv(10) / sv(0) < kDegenerateSingularValueRatio) {
    return false;
  }

  const Eigen::VectorXd p = svd.matrixV().col(11);
  Eigen::Matrix<double, 3, 4> m;
  m.row(0) = p.segment<4>(0);
  m.row(1) = p.segment<4>(4);
  m.row(2) = p.segment<4>(8);

  const double row3 = m.block<1, 3>(2, 0).norm();
  if (row3 < 1e-12) return false;
  m /= row3;

  // Resolve the global sign so that the majority of points have positive
  // depth.
  int positive = 0;
  for (const auto& match : matches) {
    const double z = m.row(2).head<3>().dot(match.point) + m(2, 3);
    if (z > 0) ++positive;
  }
  if (2 * positive < n) m = -m;

  // Nearest proper rotation to the left 3x3 block.
  Eigen::JacobiSVD<Eigen::Matrix3d> rsvd(
      m.template block<3, 3>(0, 0), Eigen::ComputeFullU | Eigen::ComputeFullV);
  const double det =
      (rsvd.matrixU() * rsvd.matrixV().transpose()).determinant();
  out.R = rsvd.matrixU() * Eigen::Vector3d(1, 1, det).asDiagonal() *
          rsvd.matrixV().transpose();
  out.t = m.col(3);
  return true;
}

// Gauss-Newton on pixel residuals; accepted steps never increase the total
// squared error (step halving).
void refine_gauss_newton(RigidCamera& cam, const CameraIntrinsics& intr,
                         const std::vector<Match2D3D>& matches,
                         int max_iterations = 50) {
  double err = total_error_sq(cam, intr, matches);
  for (int iter = 0; iter < max_iterations; ++iter) {
    Eigen::Matrix<double, 6, 6> jtj = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 1> jtr = Eigen::Matrix<double, 6, 1>::Zero();
    for (const auto& m : matches) {
      const Eigen::Vector3d pc = cam.R * m.point + cam.t;
      if (pc.z() <= kMinDepth) continue;
      const double iz = 1.0 / pc.z();
      Eigen::Matrix<double, 2, 3> dpix;
      dpix << intr.focal_x * iz, 0, -intr.focal_x * pc.x() * iz * iz, 0,
          intr.focal_y * iz, -intr.focal_y * pc.y() * iz * iz;
      Eigen::Matrix<double, 2, 6> j;
      j.block<2, 3>(0, 0) = -dpix * skew(pc - cam.t);  // rotation part
      j.block<2, 3>(0, 3) = dpix;                      // translation part
      const Eigen::Vector2d r(
          intr.focal_x * pc.x() * iz + intr.principal_x - m.pixel.x(),
          intr.focal_y * pc.y() * iz + intr.principal_y - m.pixel.y());
      jtj += j.transpose() * j;
      jtr += j.transpose() * r;
    }

    const Eigen::Matrix<double, 6, 1> delta = jtj.ldlt().solve(-jtr);
    if (!delta.allFinite()) break;

    bool accepted = false;
    double alpha = 1.0;
    for (int halving = 0; halving < 20; ++halving) {
      RigidCamera trial;
      trial.R = so3_exp(alpha * delta.head<3>()) * cam.R;
      trial.t = cam.t + alpha * delta.tail<3>();
      const double trial_err = total_error_sq(trial, intr, matches);
      if (trial_err < err) {
        const double improvement = err - trial_err;
        cam = trial;
        err = trial_err;
        accepted = true;
        if (improvement < 1e-14 * (1.0 + err)) return;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) break;
  }
}

}  // namespace

double CameraIntrinsics::diagonal() const {
  return std::sqrt(static_cast<double>(width) * width +
                   static_cast<double>(height) * height);
}

void CameraIntrinsics::validate() const {
  if (focal_x <= 0 || focal_y <= 0)
    throw std::invalid_argument("intrinsics: focal lengths must be positive");
  if (width <= 0 || height <= 0)
    throw std::invalid_argument("intrinsics: image size must be positive");
  if (principal_x < 0 || principal_x >= width || principal_y < 0 ||
      principal_y >= height)
    throw std::invalid_argument(
        "intrinsics: principal point outside image bounds");
}

void Pose::validate(double tol) const {
  const double ortho =
      (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).norm();
  if (ortho >= tol)
    throw std::invalid_argument("pose: rotation is not orthonormal");
  if (std::abs(rotation.determinant() - 1.0) >= tol)
    throw std::invalid_argument("pose: rotation determinant is not +1");
  if (!position.allFinite())
    throw std::invalid_argument("pose: non-finite position");
}

std::optional<Eigen::Vector2d> project(const Eigen::Vector3d& point,
                                       const Pose& pose,
                                       const CameraIntrinsics& intr) {
  const Eigen::Vector3d pc = pose.rotation * (point - pose.position);
  if (pc.z() <= kMinDepth) return std::nullopt;
  const double u = intr.focal_x * pc.x() / pc.z() + intr.principal_x;
  const double v = intr.focal_y * pc.y() / pc.z() + intr.principal_y;
  if (u < 0 || u >= intr.width || v < 0 || v >= intr.height)
    return std::nullopt;
  return Eigen::Vector2d(u, v);
}

std::optional<Eigen::Vector2d> project_unbounded(const Eigen::Vector3d& point,
                                                 const Pose& pose,
                                                 const CameraIntrinsics& intr) {
  const Eigen::Vector3d pc = pose.rotation * (point - pose.position);
  if (pc.z() <= kMinDepth) return std::nullopt;
  return Eigen::Vector2d(intr.focal_x * pc.x() / pc.z() + intr.principal_x,
                         intr.focal_y * pc.y() / pc.z() + intr.principal_y);
}

Eigen::Vector3d backproject(const Eigen::Vector2d& pixel, double depth,
                            const Pose& pose, const CameraIntrinsics& intr) {
  const Eigen::Vector3d pc(
      (pixel.x() - intr.principal_x) / intr.focal_x * depth,
      (pixel.y() - intr.principal_y) / intr.focal_y * depth, depth);
  return pose.rotation.transpose() * pc + pose.position;
}

PoseError pose_error(const Pose& ground_truth, const Pose& estimate) {
  PoseError e;
  e.epsilon_t = (ground_truth.position - estimate.position).norm();
  const double c =
      ((ground_truth.rotation.transpose() * estimate.rotation).trace() - 1.0) /
      2.0;
  e.epsilon_r = std::acos(std::clamp(c, -1.0, 1.0)) * 180.0 / M_PI;
  return e;
}

std::optional<Pose> solve_pnp(const std::vector<Match2D3D>& matches,
                              const CameraIntrinsics& intr) {
  if (matches.size() < 6) return std::nullopt;
  RigidCamera cam;
  if (!solve_dlt(matches, intr, cam)) return std::nullopt;
  refine_gauss_newton(cam, intr, matches);
  return cam.to_pose();
}

RegistrationResult ransac_register(const std::vector<Match2D3D>& candidates,
                                   const CameraIntrinsics& intr,
                                   const RansacConfig& cfg) {
  if (candidates.empty())
    throw std::invalid_argument("ransac_register: empty candidate list");

  RegistrationResult result;
  const int n = static_cast<int>(candidates.size());
  if (n < 6) return result;

  const double thresh_sq =
      cfg.reproj_threshold_px * cfg.reproj_threshold_px;
  Rng rng(cfg.seed);

  std::vector<int> best_inliers;
  double best_err = std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < cfg.max_iterations; ++iter) {
    const std::vector<int> sample = rng.sample_indices(n, 6);
    std::vector<Match2D3D> minimal;
    minimal.reserve(6);
    for (const int idx : sample) minimal.push_back(candidates[idx]);

    RigidCamera cam;
    if (!solve_dlt(minimal, intr, cam)) continue;
    refine_gauss_newton(cam, intr, minimal, 10);

    std::vector<int> inliers;
    double err = 0.0;
    for (int i = 0; i < n; ++i) {
      const double e = reprojection_error_sq(cam, intr, candidates[i]);
      if (e <= thresh_sq) {
        inliers.push_back(i);
        err += e;
      }
    }
    if (inliers.size() > best_inliers.size() ||
        (inliers.size() == best_inliers.size() && err < best_err)) {
      best_inliers = std::move(inliers);
      best_err = err;
      result.estimated_pose = cam.to_pose();
    }
  }

  if (best_inliers.size() >= 6) {
    std::vector<Match2D3D> support;
    support.reserve(best_inliers.size());
    for (const int idx : best_inliers) support.push_back(candidates[idx]);
    if (const auto refined = solve_pnp(support, intr)) {
      result.estimated_pose = *refined;
      RigidCamera cam{refined->rotation,
                      -refined->rotation * refined->position};
      best_inliers.clear();
      for (int i = 0; i < n; ++i) {
        if (reprojection_error_sq(cam, intr, candidates[i]) <= thresh_sq)
          best_inliers.push_back(i);
      }
    }
  }

  result.inlier_indices = std::move(best_inliers);
  result.accepted =
      static_cast<int>(result.inlier_indices.size()) >= cfg.inlier_threshold;
  return result;
}

Eigen::Matrix3d rotation_about_axis(const Eigen::Vector3d& axis,
                                    double radians) {
  return so3_exp(axis.normalized() * radians);
}

Pose look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
             const Eigen::Vector3d& up) {
  Eigen::Vector3d forward = (target - eye).normalized();
  Eigen::Vector3d right = forward.cross(up);
  if (right.norm() < 1e-9) {
    right = forward.cross(Eigen::Vector3d::UnitY());
  }
  right.normalize();
  const Eigen::Vector3d down = forward.cross(right);

  Pose pose;
  pose.position = eye;
  pose.rotation.row(0) = right;
  pose.rotation.row(1) = down;
  pose.rotation.row(2) = forward;
  return pose;
}

}  // namespace fsda
