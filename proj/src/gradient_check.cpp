#include "fsda/gradient_check.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "fsda/feature_model.hpp"
#include "fsda/rng.hpp"

namespace fsda {

namespace {

constexpr double kKinkMargin = 1e-3;
constexpr int kFeaturesPerView = 12;
constexpr int kPairsPerView = 8;

struct CheckInstance {
  DescriptorHead head;
  std::vector<TrainingView> views;
  CameraIntrinsics intr{500.0, 500.0, 320.0, 240.0, 640, 480};
};

Eigen::VectorXd random_unit(Rng& rng, int dim) {
  Eigen::VectorXd v(dim);
  for (int i = 0; i < dim; ++i) v[i] = rng.normal();
  const double n = v.norm();
  return n > 0 ? Eigen::VectorXd(v / n) : random_unit(rng, dim);
}

TrainingView make_view(Rng& rng, const CameraIntrinsics& intr, int d, int d_pre,
                       int view_id) {
  TrainingView view;
  view.set.view_id = view_id;
  view.set.training_pose = Pose{};  // identity: camera at origin looking +z
  view.set.provenance = PoseProvenance::ground_truth;

  for (int i = 0; i < kFeaturesPerView; ++i) {
    ObservedFeature f;
    f.keypoint = Eigen::Vector2d(rng.uniform() * (intr.width - 40) + 20,
                                 rng.uniform() * (intr.height - 40) + 20);
    f.pre_descriptor = random_unit(rng, d_pre);
    f.detection_score = 0.4 + 0.6 * rng.uniform();
    f.landmark_id = i;
    view.features.push_back(std::move(f));
  }

  for (int i = 0; i < kPairsPerView; ++i) {
    const ObservedFeature& f = view.features[i];
    CorrespondencePair pair;
    pair.source_descriptor = random_unit(rng, d);
    pair.source_score = 0.4 + 0.6 * rng.uniform();
    // A 3D point whose identity-pose reprojection lands a few pixels from the
    // feature, always in front of the camera.
    const Eigen::Vector2d pix =
        f.keypoint + Eigen::Vector2d(rng.uniform() * 6.0 - 3.0,
                                     rng.uniform() * 6.0 - 3.0);
    const double depth = 2.0 + 4.0 * rng.uniform();
    pair.point = backproject(pix, depth, view.set.training_pose, intr);
    pair.target_pre = f.pre_descriptor;
    pair.target_keypoint = f.keypoint;
    pair.target_score = f.detection_score;
    pair.target_feature_index = i;
    pair.word = i / 2;  // words 0..3, two pairs each
    view.set.pairs.push_back(std::move(pair));

    Triplet t;
    t.pair_index = i;
    t.negative_feature_index = kPairsPerView + (i % (kFeaturesPerView - kPairsPerView));
    t.negative_pre = view.features[t.negative_feature_index].pre_descriptor;
    t.negative_keypoint = view.features[t.negative_feature_index].keypoint;
    view.set.triplets.push_back(std::move(t));
  }
  return view;
}

// True when any relu pre-activation, hinge argument, or within-word pairwise
// distance sits close enough to its kink for the finite-difference step to
// cross it.
bool near_kink(const CheckInstance& inst, const LossOptions& opts) {
  for (const TrainingView& view : inst.views) {
    std::vector<Eigen::VectorXd> descriptors;
    for (const ObservedFeature& f : view.features) {
      const Eigen::VectorXd pre = inst.head.weights * f.pre_descriptor;
      if (pre.cwiseAbs().minCoeff() < kKinkMargin) return true;
      const Eigen::VectorXd act = pre.cwiseMax(0.0);
      if (act.norm() < kKinkMargin) return true;
      descriptors.push_back(act / act.norm());
    }
    for (const Triplet& t : view.set.triplets) {
      const CorrespondencePair& pair = view.set.pairs[t.pair_index];
      const Eigen::VectorXd& pos = descriptors[pair.target_feature_index];
      const Eigen::VectorXd& neg = descriptors[t.negative_feature_index];
      const double d_pos = (pos - pair.source_descriptor).squaredNorm();
      const double d_neg = (neg - pair.source_descriptor).squaredNorm();
      const double arg = opts.hinge == HingeDirection::standard
                             ? opts.margin + d_pos - d_neg
                             : opts.margin + d_neg - d_pos;
      if (std::abs(arg) < kKinkMargin) return true;
    }
    for (std::size_t a = 0; a < view.set.pairs.size(); ++a) {
      for (std::size_t b = a + 1; b < view.set.pairs.size(); ++b) {
        if (view.set.pairs[a].word != view.set.pairs[b].word) continue;
        const double dist = (descriptors[view.set.pairs[a].target_feature_index] -
                             descriptors[view.set.pairs[b].target_feature_index])
                                .norm();
        if (dist < kKinkMargin) return true;
      }
    }
  }
  return false;
}

CheckInstance make_instance(std::uint64_t seed, int d, int d_pre,
                            const LossOptions& opts) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    Rng rng(derive_seed(seed, "grad-check", static_cast<std::uint64_t>(attempt)));
    CheckInstance inst;
    inst.head.weights = Eigen::MatrixXd(d, d_pre);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d_pre));
    for (int r = 0; r < d; ++r)
      for (int c = 0; c < d_pre; ++c) inst.head.weights(r, c) = scale * rng.normal();
    inst.views.push_back(make_view(rng, inst.intr, d, d_pre, 0));
    inst.views.push_back(make_view(rng, inst.intr, d, d_pre, 1));
    if (!near_kink(inst, opts)) return inst;
  }
  throw std::runtime_error("gradient check: could not sample a kink-free instance");
}

double eval_value(CheckInstance& inst, const LossOptions& opts,
                  Eigen::MatrixXd* grad) {
  LossWeights unit;  // all lambdas 1
  return evaluate_total_loss(std::span<const TrainingView>(inst.views),
                             inst.head, inst.intr, unit, opts, grad)
      .value;
}

}  // namespace

std::vector<GradientCheckResult> check_loss_gradients(
    const GradientCheckConfig& cfg) {
  struct TermCase {
    const char* key;
    TermFlags flags;
  };
  const std::vector<TermCase> cases = {
      {kTermCorres, {true, false, false, false}},
      {kTermVwCoral, {false, true, false, false}},
      {kTermCdSos, {false, false, true, false}},
      {kTermSoftMatch, {false, false, false, true}},
  };

  std::vector<GradientCheckResult> results;
  for (const TermCase& tc : cases) {
    LossOptions opts;
    opts.terms = tc.flags;

    GradientCheckResult res;
    res.term = tc.key;
    res.instances = cfg.instances;
    for (int i = 0; i < cfg.instances; ++i) {
      CheckInstance inst = make_instance(
          derive_seed(cfg.seed, tc.key, static_cast<std::uint64_t>(i)),
          cfg.descriptor_dim, cfg.pre_dim, opts);

      Eigen::MatrixXd analytic;
      eval_value(inst, opts, &analytic);
      if (cfg.perturb != 0.0) analytic(0, 0) += cfg.perturb;

      Eigen::MatrixXd numeric(cfg.descriptor_dim, cfg.pre_dim);
      for (int r = 0; r < cfg.descriptor_dim; ++r) {
        for (int c = 0; c < cfg.pre_dim; ++c) {
          const double saved = inst.head.weights(r, c);
          inst.head.weights(r, c) = saved + cfg.step;
          const double plus = eval_value(inst, opts, nullptr);
          inst.head.weights(r, c) = saved - cfg.step;
          const double minus = eval_value(inst, opts, nullptr);
          inst.head.weights(r, c) = saved;
          numeric(r, c) = (plus - minus) / (2.0 * cfg.step);
        }
      }

      const double rel = (analytic - numeric).norm() /
                         std::max(numeric.norm(), 1e-8);
      res.max_relative_error = std::max(res.max_relative_error, rel);
    }
    res.passed = res.max_relative_error < cfg.tolerance;
    results.push_back(std::move(res));
  }
  return results;
}

namespace {

void add_check(SelfCheckReport& report, const std::string& name, bool ok,
               const std::string& detail) {
  if (ok) {
    report.lines.push_back("pass " + name);
  } else {
    report.lines.push_back("fail " + name + ": " + detail);
    report.passed = false;
  }
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3e", v);
  return buf;
}

}  // namespace

SelfCheckReport run_self_checks(const GradientCheckConfig& cfg) {
  SelfCheckReport report;
  Rng rng(derive_seed(cfg.seed, "self-check"));

  {  // A cleanly separated triplet has zero loss.
    TripletInput t;
    t.source = Eigen::VectorXd::Unit(4, 0);
    t.source_score = 1.0;
    t.positive = t.source;
    t.positive_score = 1.0;
    t.negative = Eigen::VectorXd::Unit(4, 1);
    const double v = correspondence_loss({t}, 1.0).value;
    add_check(report, "corres zero on separated triplet", std::abs(v) < 1e-12,
              "value " + fmt(v));
  }

  {  // Matching second moments give zero VW-CORAL.
    WordGroup g;
    g.word = 0;
    for (int i = 0; i < 3; ++i) {
      const Eigen::VectorXd x = random_unit(rng, 4);
      g.source.push_back(x);
      g.target.push_back(x);
    }
    const double v = vw_coral_loss({g}, 4).value;
    add_check(report, "vw-coral zero when moments match", std::abs(v) < 1e-12,
              "value " + fmt(v));
  }

  {  // CD-SOS sees only pairwise distances: rotating targets changes nothing.
    WordGroup g;
    g.word = 0;
    for (int i = 0; i < 4; ++i) {
      g.source.push_back(random_unit(rng, 4));
      g.target.push_back(random_unit(rng, 4));
    }
    const double before = cd_sos_loss({g}).value;
    Eigen::MatrixXd m(4, 4);
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) m(r, c) = rng.normal();
    const Eigen::MatrixXd q =
        Eigen::HouseholderQR<Eigen::MatrixXd>(m).householderQ();
    for (auto& x : g.target) x = q * x;
    const double after = cd_sos_loss({g}).value;
    add_check(report, "cd-sos invariant under target rotation",
              std::abs(before - after) < 1e-9,
              fmt(before) + " vs " + fmt(after));
  }

  {  // Soft-argmax of a single target is that target.
    MatchTargets targets;
    targets.descriptors = Eigen::MatrixXd::Random(1, 4);
    targets.keypoints = {Eigen::Vector2d(10.0, 20.0)};
    SoftMatchConfig sm{10.0, 800.0};
    const Eigen::Vector2d p =
        soft_argmax_match(random_unit(rng, 4), targets, sm);
    add_check(report, "soft-argmax single target",
              (p - Eigen::Vector2d(10.0, 20.0)).norm() < 1e-12,
              "got (" + fmt(p.x()) + ", " + fmt(p.y()) + ")");
  }

  {  // Soft-argmax stays inside the convex hull of the keypoints.
    MatchTargets targets;
    const int n = 6;
    targets.descriptors = Eigen::MatrixXd(n, 4);
    Eigen::Vector2d lo(1e9, 1e9), hi(-1e9, -1e9);
    for (int i = 0; i < n; ++i) {
      targets.descriptors.row(i) = random_unit(rng, 4).transpose();
      const Eigen::Vector2d kp(rng.uniform() * 640.0, rng.uniform() * 480.0);
      targets.keypoints.push_back(kp);
      lo = lo.cwiseMin(kp);
      hi = hi.cwiseMax(kp);
    }
    SoftMatchConfig sm{10.0, 800.0};
    const Eigen::Vector2d p =
        soft_argmax_match(random_unit(rng, 4), targets, sm);
    const bool inside = p.x() >= lo.x() - 1e-9 && p.x() <= hi.x() + 1e-9 &&
                        p.y() >= lo.y() - 1e-9 && p.y() <= hi.y() + 1e-9;
    add_check(report, "soft-argmax inside keypoint hull", inside,
              "got (" + fmt(p.x()) + ", " + fmt(p.y()) + ")");
  }

  {  // The weighted total recomposes from the per-term breakdown.
    LossOptions opts;
    CheckInstance inst =
        make_instance(derive_seed(cfg.seed, "recompose"), cfg.descriptor_dim,
                      cfg.pre_dim, opts);
    LossWeights w;
    w.lambda_corres = 0.3;
    w.lambda_vwcoral = 1.7;
    w.lambda_cdsos = 0.9;
    w.lambda_softmatch = 2.1;
    const LossValue v =
        evaluate_total_loss(std::span<const TrainingView>(inst.views),
                            inst.head, inst.intr, w, opts);
    double sum = 0.0;
    for (const auto& [term, raw] : v.per_term) sum += w.lambda_for(term) * raw;
    add_check(report, "total recomposes from per-term values",
              std::abs(v.value - sum) < 1e-12, "gap " + fmt(v.value - sum));
  }

  {  // Calibrated weights satisfy lambda * 4 (mu + 3 sigma) = 1.
    LossOptions opts;
    CheckInstance inst =
        make_instance(derive_seed(cfg.seed, "calibrate"), cfg.descriptor_dim,
                      cfg.pre_dim, opts);
    Rng extra(derive_seed(cfg.seed, "calibrate-extra"));
    inst.views.push_back(
        make_view(extra, inst.intr, cfg.descriptor_dim, cfg.pre_dim, 2));
    const LossWeights w =
        calibrate_weights(std::span<const TrainingView>(inst.views), inst.head,
                          inst.intr, opts);
    double worst = 0.0;
    for (const auto& [term, stats] : w.stats) {
      const double identity =
          w.lambda_for(term) * 4.0 * (stats.mean + 3.0 * stats.stddev);
      worst = std::max(worst, std::abs(identity - 1.0));
    }
    add_check(report, "calibration identity lambda*4(mu+3sigma)=1",
              worst < 1e-9 && w.stats.size() == 4, "worst gap " + fmt(worst));
  }

  report.gradients = check_loss_gradients(cfg);
  for (const GradientCheckResult& g : report.gradients) {
    if (!g.passed) report.passed = false;
  }
  return report;
}

}  // namespace fsda
