#include "fsda/synthworld.hpp"

#include <algorithm>
#include <stdexcept>

#include "fsda/rng.hpp"
#include "fsda/text_io.hpp"

namespace fsda {

namespace {

constexpr double kMinDetectionScore = 1e-3;

Eigen::VectorXd random_unit_vector(Rng& rng, int dim) {
  Eigen::VectorXd v(dim);
  for (int i = 0; i < dim; ++i) v[i] = rng.normal();
  const double n = v.norm();
  if (n < 1e-12) {
    v.setZero();
    v[0] = 1.0;
    return v;
  }
  return v / n;
}

int count_visible(const Scene& scene, const Pose& pose) {
  int visible = 0;
  for (const auto& lm : scene.landmarks) {
    if (project(lm.position, pose, scene.intr)) ++visible;
  }
  return visible;
}

}  // namespace

DomainSpec DomainSpec::source(int d_pre, double noise_sigma,
                              double score_jitter) {
  DomainSpec d;
  d.name = "source";
  d.mix_matrix = Eigen::MatrixXd::Identity(d_pre, d_pre);
  d.bias = Eigen::VectorXd::Zero(d_pre);
  d.noise_sigma = noise_sigma;
  d.score_jitter = score_jitter;
  d.gamma = 0.0;
  return d;
}

DomainSpec DomainSpec::shifted(const std::string& name, int d_pre,
                               double gamma, double noise_sigma,
                               double score_jitter, double bias_scale,
                               std::uint64_t seed) {
  DomainSpec d;
  d.name = name;
  d.gamma = gamma;
  d.noise_sigma = noise_sigma;
  d.score_jitter = score_jitter;

  Rng rng(derive_seed(seed, "domain-mix"));
  Eigen::MatrixXd g(d_pre, d_pre);
  for (int r = 0; r < d_pre; ++r)
    for (int c = 0; c < d_pre; ++c) g(r, c) = rng.normal();
  g /= g.norm();  // Frobenius
  d.mix_matrix = Eigen::MatrixXd::Identity(d_pre, d_pre) + gamma * g;

  Rng brng(derive_seed(seed, "domain-bias"));
  d.bias = gamma * bias_scale * random_unit_vector(brng, d_pre);
  return d;
}

Scene generate_scene(const SceneConfig& cfg) {
  if (cfg.num_landmarks < 50)
    throw std::invalid_argument("generate_scene: need at least 50 landmarks");
  cfg.intr.validate();

  Scene scene;
  scene.intr = cfg.intr;
  scene.seed = cfg.seed;

  Rng rng(derive_seed(cfg.seed, "landmarks"));
  scene.landmarks.reserve(cfg.num_landmarks);
  for (int i = 0; i < cfg.num_landmarks; ++i) {
    Landmark lm;
    lm.id = i;
    lm.position = Eigen::Vector3d(
        rng.uniform(-cfg.box_half_xy, cfg.box_half_xy),
        rng.uniform(-cfg.box_half_xy, cfg.box_half_xy),
        rng.uniform(cfg.box_min_z, cfg.box_max_z));
    lm.appearance = random_unit_vector(rng, cfg.d_pre);
    lm.saliency = rng.uniform(0.2, 1.0);
    scene.landmarks.push_back(std::move(lm));
  }

  const Eigen::Vector3d center(0, 0, 0.5 * (cfg.box_min_z + cfg.box_max_z));
  for (int k = 0; k < cfg.num_reference_views; ++k) {
    const double angle = 2.0 * M_PI * k / cfg.num_reference_views;
    const Eigen::Vector3d eye(cfg.ring_radius * std::cos(angle),
                              cfg.ring_radius * std::sin(angle),
                              cfg.ring_height);
    const Pose pose = look_at(eye, center);
    const int visible = count_visible(scene, pose);
    if (visible < cfg.min_visible_landmarks) {
      throw std::runtime_error(
          "generate_scene: reference pose " + std::to_string(k) +
          " observes only " + std::to_string(visible) + " landmarks");
    }
    scene.reference_poses.push_back(pose);
  }
  return scene;
}

std::vector<Pose> generate_target_poses(const Scene& scene,
                                        const SceneConfig& cfg, int count,
                                        std::uint64_t seed) {
  Rng rng(derive_seed(seed, "target-poses"));
  const Eigen::Vector3d center(0, 0, 0.5 * (cfg.box_min_z + cfg.box_max_z));
  std::vector<Pose> poses;
  poses.reserve(count);
  int attempts = 0;
  const int max_attempts = count * 200;
  while (static_cast<int>(poses.size()) < count) {
    if (++attempts > max_attempts) {
      throw std::runtime_error(
          "generate_target_poses: could not find enough poses with " +
          std::to_string(cfg.min_visible_landmarks) + " visible landmarks");
    }
    const double angle = rng.uniform(0.0, 2.0 * M_PI);
    const double radius = cfg.ring_radius * rng.uniform(0.85, 1.15);
    const double height = cfg.ring_height + rng.uniform(-0.5, 0.8);
    const Eigen::Vector3d eye(radius * std::cos(angle),
                              radius * std::sin(angle), height);
    const Eigen::Vector3d aim =
        center + Eigen::Vector3d(rng.uniform(-0.3, 0.3),
                                 rng.uniform(-0.3, 0.3),
                                 rng.uniform(-0.3, 0.3));
    const Pose pose = look_at(eye, aim);
    if (count_visible(scene, pose) >= cfg.min_visible_landmarks) {
      poses.push_back(pose);
    }
  }
  return poses;
}

std::vector<ObservedFeature> render_view(const Scene& scene, const Pose& pose,
                                         const DomainSpec& domain,
                                         std::uint64_t seed) {
  pose.validate(1e-6);
  const int d_pre = static_cast<int>(domain.mix_matrix.rows());
  std::vector<ObservedFeature> features;
  for (const auto& lm : scene.landmarks) {
    const auto pixel = project(lm.position, pose, scene.intr);
    if (!pixel) continue;

    Rng lrng(derive_seed(seed, "feature", static_cast<std::uint64_t>(lm.id)));
    Eigen::VectorXd mixed = domain.mix_matrix * lm.appearance + domain.bias;
    const double norm = mixed.norm();
    mixed /= std::max(norm, 1e-9);
    if (domain.noise_sigma > 0) {
      for (int i = 0; i < d_pre; ++i)
        mixed[i] += lrng.normal(0.0, domain.noise_sigma);
    }

    double score = lm.saliency;
    if (domain.score_jitter > 0) {
      score += lrng.uniform(-domain.score_jitter, domain.score_jitter);
    }
    score = std::clamp(score, kMinDetectionScore, 1.0);

    ObservedFeature f;
    f.keypoint = *pixel;
    f.pre_descriptor = std::move(mixed);
    f.detection_score = score;
    f.landmark_id = lm.id;
    features.push_back(std::move(f));
  }
  return features;
}

std::uint64_t reference_render_seed(const Scene& scene, int view_index) {
  return derive_seed(scene.seed, "reference-render",
                     static_cast<std::uint64_t>(view_index));
}

void write_pose(std::ostream& os, const Pose& pose) {
  write_vector(os, pose.position);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) os << ' ' << format_double(pose.rotation(r, c));
}

Pose read_pose(std::istream& is) {
  Pose p;
  for (int i = 0; i < 3; ++i) p.position[i] = read_double(is, "pose.position");
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      p.rotation(r, c) = read_double(is, "pose.rotation");
  return p;
}

void write_scene(std::ostream& os, const Scene& scene,
                 const std::vector<DomainSpec>& domains) {
  const int d_pre =
      scene.landmarks.empty() ? 0 : static_cast<int>(scene.landmarks[0].appearance.size());
  os << "fsda-scene 1\n";
  os << "seed " << scene.seed << '\n';
  os << "intrinsics " << format_double(scene.intr.focal_x) << ' '
     << format_double(scene.intr.focal_y) << ' '
     << format_double(scene.intr.principal_x) << ' '
     << format_double(scene.intr.principal_y) << ' ' << scene.intr.width << ' '
     << scene.intr.height << '\n';
  os << "landmarks " << scene.landmarks.size() << ' ' << d_pre << '\n';
  for (const auto& lm : scene.landmarks) {
    os << lm.id << ' ';
    write_vector(os, lm.position);
    os << ' ' << format_double(lm.saliency) << ' ';
    write_vector(os, lm.appearance);
    os << '\n';
  }
  os << "reference_poses " << scene.reference_poses.size() << '\n';
  for (const auto& pose : scene.reference_poses) {
    write_pose(os, pose);
    os << '\n';
  }
  os << "domains " << domains.size() << '\n';
  for (const auto& d : domains) {
    os << d.name << ' ' << format_double(d.gamma) << ' '
       << format_double(d.noise_sigma) << ' ' << format_double(d.score_jitter)
       << '\n';
    write_matrix_rows(os, d.mix_matrix);
    write_vector(os, d.bias);
    os << '\n';
  }
}

void read_scene(std::istream& is, Scene& scene,
                std::vector<DomainSpec>& domains) {
  expect_token(is, "fsda-scene", "scene header");
  const long version = read_long(is, "scene.version");
  if (version != 1)
    throw std::runtime_error("unsupported scene version " +
                             std::to_string(version));
  expect_token(is, "seed", "scene.seed");
  scene.seed = read_uint64(is, "scene.seed");
  expect_token(is, "intrinsics", "scene.intrinsics");
  scene.intr.focal_x = read_double(is, "intrinsics.focal_x");
  scene.intr.focal_y = read_double(is, "intrinsics.focal_y");
  scene.intr.principal_x = read_double(is, "intrinsics.principal_x");
  scene.intr.principal_y = read_double(is, "intrinsics.principal_y");
  scene.intr.width = static_cast<int>(read_long(is, "intrinsics.width"));
  scene.intr.height = static_cast<int>(read_long(is, "intrinsics.height"));

  expect_token(is, "landmarks", "scene.landmarks");
  const long n = read_long(is, "landmarks.count");
  const long d_pre = read_long(is, "landmarks.d_pre");
  scene.landmarks.clear();
  scene.landmarks.reserve(n);
  for (long i = 0; i < n; ++i) {
    Landmark lm;
    lm.id = static_cast<int>(read_long(is, "landmark.id"));
    for (int k = 0; k < 3; ++k)
      lm.position[k] = read_double(is, "landmark.position");
    lm.saliency = read_double(is, "landmark.saliency");
    lm.appearance = read_vector(is, static_cast<int>(d_pre),
                                "landmark.appearance");
    scene.landmarks.push_back(std::move(lm));
  }

  expect_token(is, "reference_poses", "scene.reference_poses");
  const long np = read_long(is, "reference_poses.count");
  scene.reference_poses.clear();
  for (long i = 0; i < np; ++i) scene.reference_poses.push_back(read_pose(is));

  expect_token(is, "domains", "scene.domains");
  const long nd = read_long(is, "domains.count");
  domains.clear();
  for (long i = 0; i < nd; ++i) {
    DomainSpec d;
    d.name = read_token(is, "domain.name");
    d.gamma = read_double(is, "domain.gamma");
    d.noise_sigma = read_double(is, "domain.noise_sigma");
    d.score_jitter = read_double(is, "domain.score_jitter");
    d.mix_matrix.resize(d_pre, d_pre);
    for (long r = 0; r < d_pre; ++r)
      for (long c = 0; c < d_pre; ++c)
        d.mix_matrix(r, c) = read_double(is, "domain.mix_matrix");
    d.bias = read_vector(is, static_cast<int>(d_pre), "domain.bias");
    domains.push_back(std::move(d));
  }
}

}  // namespace fsda
