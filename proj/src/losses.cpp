#include "fsda/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string_view>

#include "fsda/text_io.hpp"

namespace fsda {

double LossWeights::lambda_for(const std::string& term) const {
  if (term == kTermCorres) return lambda_corres;
  if (term == kTermVwCoral) return lambda_vwcoral;
  if (term == kTermCdSos) return lambda_cdsos;
  if (term == kTermSoftMatch) return lambda_softmatch;
  throw std::invalid_argument("unknown loss term '" + term + "'");
}

std::string TermFlags::label() const {
  if (corres && vw_coral && cd_sos && softmatch) return "all";
  std::string out;
  const auto append = [&out](const char* part) {
    if (!out.empty()) out += '+';
    out += part;
  };
  if (corres) append("corres");
  if (vw_coral) append("vwcoral");
  if (cd_sos) append("cdsos");
  if (softmatch) append("softmatch");
  return out.empty() ? "none" : out;
}

TermFlags parse_loss_set(const std::string& name) {
  TermFlags flags;
  if (name == "all") return flags;
  flags = TermFlags{false, false, false, false};
  std::size_t start = 0;
  while (start <= name.size()) {
    const std::size_t end = std::min(name.find('+', start), name.size());
    const std::string part = name.substr(start, end - start);
    if (part == "corres")
      flags.corres = true;
    else if (part == "vwcoral")
      flags.vw_coral = true;
    else if (part == "cdsos")
      flags.cd_sos = true;
    else if (part == "softmatch")
      flags.softmatch = true;
    else
      throw std::invalid_argument("unknown loss set component '" + part +
                                  "' in '" + name + "'");
    start = end + 1;
  }
  return flags;
}

LossValue correspondence_loss(const std::vector<TripletInput>& triplets,
                              double margin, HingeDirection direction,
                              TripletGradients* gradients) {
  if (triplets.empty())
    throw std::invalid_argument("correspondence_loss: empty triplet list");
  if (margin <= 0.0)
    throw std::invalid_argument("correspondence_loss: margin must be > 0");

  double total_weight = 0.0;
  for (const auto& t : triplets) total_weight += t.source_score * t.positive_score;
  if (total_weight <= 0.0)
    throw std::invalid_argument("correspondence_loss: zero total score weight");

  if (gradients) {
    gradients->d_positive.assign(triplets.size(), Eigen::VectorXd());
    gradients->d_negative.assign(triplets.size(), Eigen::VectorXd());
  }

  LossValue out;
  for (std::size_t i = 0; i < triplets.size(); ++i) {
    const auto& t = triplets[i];
    const double w = t.source_score * t.positive_score / total_weight;
    const double d2_pos = (t.positive - t.source).squaredNorm();
    const double d2_neg = (t.negative - t.source).squaredNorm();
    const double hinge = direction == HingeDirection::standard
                             ? d2_pos - d2_neg + margin
                             : d2_neg - d2_pos + margin;
    const bool active = hinge > 0.0;
    if (active) out.value += w * hinge;
    if (gradients) {
      const double sign = direction == HingeDirection::standard ? 1.0 : -1.0;
      const double c = active ? 2.0 * w * sign : 0.0;
      gradients->d_positive[i] = c * (t.positive - t.source);
      gradients->d_negative[i] = -c * (t.negative - t.source);
    }
  }
  out.per_term[kTermCorres] = out.value;
  return out;
}

namespace {

// Mean-centered rows; n x d in, n x d out.
Eigen::MatrixXd centered_rows(const std::vector<Eigen::VectorXd>& rows) {
  const int n = static_cast<int>(rows.size());
  const int d = static_cast<int>(rows[0].size());
  Eigen::MatrixXd m(n, d);
  for (int i = 0; i < n; ++i) m.row(i) = rows[i].transpose();
  m.rowwise() -= m.colwise().mean();
  return m;
}

}  // namespace

LossValue vw_coral_loss(const std::vector<WordGroup>& groups, int descriptor_dim,
                        int min_count, GroupGradients* gradients) {
  if (descriptor_dim <= 0)
    throw std::invalid_argument("vw_coral_loss: descriptor_dim must be > 0");
  if (min_count < 2)
    throw std::invalid_argument("vw_coral_loss: min_count must be >= 2");
  if (gradients) gradients->d_target.assign(groups.size(), {});

  const double d2 = static_cast<double>(descriptor_dim) * descriptor_dim;
  LossValue out;
  int included = 0;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& group = groups[g];
    if (group.source.size() != group.target.size())
      throw std::invalid_argument("vw_coral_loss: source/target size mismatch");
    const int n = static_cast<int>(group.target.size());
    if (gradients)
      gradients->d_target[g].assign(n, Eigen::VectorXd::Zero(descriptor_dim));
    if (n < min_count) continue;
    ++included;

    const Eigen::MatrixXd xs = centered_rows(group.source);
    const Eigen::MatrixXd xt = centered_rows(group.target);
    const Eigen::MatrixXd cs = xs.transpose() * xs / (n - 1);
    const Eigen::MatrixXd ct = xt.transpose() * xt / (n - 1);
    out.value += (cs - ct).squaredNorm() / (4.0 * d2);

    if (gradients) {
      const Eigen::MatrixXd grad_rows = xt * (ct - cs) / (d2 * (n - 1));
      for (int i = 0; i < n; ++i)
        gradients->d_target[g][i] = grad_rows.row(i).transpose();
    }
  }

  if (included == 0) {
    out.diagnostics.push_back("vw_coral: no word met min_count");
  } else {
    out.value /= included;
    if (gradients) {
      for (auto& group : gradients->d_target)
        for (auto& v : group) v /= included;
    }
  }
  out.per_term[kTermVwCoral] = out.value;
  return out;
}

LossValue cd_sos_loss(const std::vector<WordGroup>& groups,
                      GroupGradients* gradients) {
  if (gradients) gradients->d_target.assign(groups.size(), {});

  LossValue out;
  int included = 0;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& group = groups[g];
    if (group.source.size() != group.target.size())
      throw std::invalid_argument("cd_sos_loss: source/target size mismatch");
    const int n = static_cast<int>(group.target.size());
    if (gradients && n > 0)
      gradients->d_target[g].assign(
          n, Eigen::VectorXd::Zero(group.target[0].size()));
    if (n < 2) continue;
    ++included;

    // Ordered sum over j != i counts each unordered pair twice.
    double s = 0.0;
    Eigen::MatrixXd a(n, n), b(n, n);
    for (int i = 0; i < n; ++i) {
      for (int j = i + 1; j < n; ++j) {
        a(i, j) = (group.source[i] - group.source[j]).norm();
        b(i, j) = (group.target[i] - group.target[j]).norm();
        const double diff = a(i, j) - b(i, j);
        s += 2.0 * diff * diff;
      }
    }
    const double root = std::sqrt(s);
    out.value += root / n;

    if (gradients && root > 0.0) {
      auto& grads = gradients->d_target[g];
      for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
          if (b(i, j) <= 0.0) continue;  // subgradient 0 at coincident points
          const double coeff = 2.0 * (b(i, j) - a(i, j)) / (n * root);
          const Eigen::VectorXd dir =
              (group.target[i] - group.target[j]) / b(i, j);
          grads[i] += coeff * dir;
          grads[j] -= coeff * dir;
        }
      }
    }
  }

  if (included == 0) {
    out.diagnostics.push_back("cd_sos: no word has two or more pairs");
  } else {
    out.value /= included;
    if (gradients) {
      for (auto& group : gradients->d_target)
        for (auto& v : group) v /= included;
    }
  }
  out.per_term[kTermCdSos] = out.value;
  return out;
}

namespace {

Eigen::VectorXd softmax_weights(const Eigen::VectorXd& scores) {
  const double m = scores.maxCoeff();
  Eigen::VectorXd w = (scores.array() - m).exp();
  return w / w.sum();
}

}  // namespace

Eigen::Vector2d soft_argmax_match(const Eigen::VectorXd& source,
                                  const MatchTargets& targets,
                                  const SoftMatchConfig& cfg) {
  if (targets.keypoints.empty())
    throw std::invalid_argument("soft_argmax_match: no target features");
  if (cfg.beta <= 0.0)
    throw std::invalid_argument("soft_argmax_match: beta must be > 0");
  const Eigen::VectorXd alpha =
      softmax_weights(cfg.beta * (targets.descriptors * source));
  Eigen::Vector2d p_hat = Eigen::Vector2d::Zero();
  for (std::size_t j = 0; j < targets.keypoints.size(); ++j)
    p_hat += alpha[j] * targets.keypoints[j];
  return p_hat;
}

LossValue softmatch_loss(const std::vector<SoftMatchInstance>& matches,
                         const std::vector<MatchTargets>& targets,
                         const SoftMatchConfig& cfg,
                         SoftMatchGradients* gradients) {
  if (matches.empty())
    throw std::invalid_argument("softmatch_loss: empty match list");
  if (cfg.image_diagonal <= 0.0)
    throw std::invalid_argument("softmatch_loss: image diagonal must be > 0");
  if (cfg.beta <= 0.0)
    throw std::invalid_argument("softmatch_loss: beta must be > 0");

  if (gradients) {
    gradients->d_targets.clear();
    for (const auto& t : targets)
      gradients->d_targets.push_back(Eigen::MatrixXd::Zero(
          t.descriptors.rows(), t.descriptors.cols()));
  }

  const double n = static_cast<double>(matches.size());
  const double scale = 1.0 / (n * cfg.image_diagonal);
  LossValue out;
  for (const auto& match : matches) {
    const auto& view = targets.at(match.targets_index);
    if (view.keypoints.empty())
      throw std::invalid_argument("softmatch_loss: view without features");
    const Eigen::VectorXd alpha =
        softmax_weights(cfg.beta * (view.descriptors * match.source));
    Eigen::Vector2d p_hat = Eigen::Vector2d::Zero();
    for (std::size_t j = 0; j < view.keypoints.size(); ++j)
      p_hat += alpha[j] * view.keypoints[j];

    const Eigen::Vector2d r = p_hat - match.reprojection;
    const double dist = r.norm();
    out.value += scale * dist;

    if (gradients && dist > 0.0) {
      const Eigen::Vector2d g = scale * r / dist;
      const double g_dot_phat = g.dot(p_hat);
      auto& dm = gradients->d_targets[match.targets_index];
      for (std::size_t j = 0; j < view.keypoints.size(); ++j) {
        const double coeff =
            cfg.beta * alpha[j] * (g.dot(view.keypoints[j]) - g_dot_phat);
        if (coeff != 0.0) dm.row(j) += coeff * match.source.transpose();
      }
    }
  }
  out.per_term[kTermSoftMatch] = out.value;
  return out;
}

namespace {

// Batch assembly shared by evaluate_total_loss and calibrate_weights: the
// current descriptors of every feature, triplet inputs, per-word groups with
// their origins, and softmatch instances over reprojected pair points.
struct BatchData {
  std::vector<Eigen::MatrixXd> descriptors;  // per view, n x d
  std::vector<TripletInput> triplets;
  std::vector<std::pair<int, int>> triplet_positive;  // (view, feature)
  std::vector<std::pair<int, int>> triplet_negative;
  std::vector<WordGroup> groups;
  std::vector<std::vector<std::pair<int, int>>> group_origin;
  std::vector<MatchTargets> match_targets;       // per view, valid rows only
  std::vector<std::vector<int>> target_feature;  // targets row -> feature
  std::vector<SoftMatchInstance> instances;
  std::vector<std::string> diagnostics;
};

BatchData assemble_batch(std::span<const TrainingView> views,
                         const DescriptorHead& head,
                         const CameraIntrinsics& intr,
                         const LossOptions& options) {
  BatchData data;
  std::map<int, int> group_slot;

  for (std::size_t v = 0; v < views.size(); ++v) {
    const auto& view = views[v];
    const int n = static_cast<int>(view.features.size());
    std::vector<char> valid;
    Eigen::MatrixXd desc = describe_features(head, view.features, &valid);

    if (options.terms.softmatch) {
      MatchTargets targets;
      data.target_feature.emplace_back();
      for (int i = 0; i < n; ++i) {
        if (!valid[static_cast<std::size_t>(i)]) continue;
        targets.keypoints.push_back(view.features[i].keypoint);
        data.target_feature.back().push_back(i);
      }
      targets.descriptors.resize(
          static_cast<Eigen::Index>(targets.keypoints.size()),
          head.descriptor_dim());
      for (std::size_t r = 0; r < data.target_feature.back().size(); ++r)
        targets.descriptors.row(static_cast<Eigen::Index>(r)) =
            desc.row(data.target_feature.back()[r]);
      data.match_targets.push_back(std::move(targets));
    }

    int dropped = 0;
    for (std::size_t p = 0; p < view.set.pairs.size(); ++p) {
      const auto& pair = view.set.pairs[p];
      const int feature = pair.target_feature_index;
      if (feature < 0 || feature >= n ||
          !valid[static_cast<std::size_t>(feature)]) {
        ++dropped;
        continue;
      }

      if (options.terms.vw_coral || options.terms.cd_sos) {
        auto [it, inserted] =
            group_slot.try_emplace(pair.word, static_cast<int>(data.groups.size()));
        if (inserted) {
          data.groups.push_back(WordGroup{pair.word, {}, {}});
          data.group_origin.emplace_back();
        }
        auto& group = data.groups[it->second];
        group.source.push_back(pair.source_descriptor);
        group.target.push_back(desc.row(feature).transpose());
        data.group_origin[it->second].emplace_back(static_cast<int>(v), feature);
      }

      if (options.terms.softmatch) {
        const auto reproj =
            project_unbounded(pair.point, view.set.training_pose, intr);
        if (!reproj) {
          data.diagnostics.push_back(
              "softmatch: pair point behind camera in view " +
              std::to_string(view.set.view_id));
          continue;
        }
        SoftMatchInstance inst;
        inst.source = pair.source_descriptor;
        inst.reprojection = *reproj;
        inst.targets_index = static_cast<int>(data.match_targets.size()) - 1;
        data.instances.push_back(std::move(inst));
      }
    }

    if (options.terms.corres) {
      for (const auto& t : view.set.triplets) {
        const auto& pair = view.set.pairs.at(t.pair_index);
        const int pos = pair.target_feature_index;
        const int neg = t.negative_feature_index;
        if (pos < 0 || pos >= n || !valid[static_cast<std::size_t>(pos)] ||
            neg < 0 || neg >= n || !valid[static_cast<std::size_t>(neg)]) {
          ++dropped;
          continue;
        }
        TripletInput in;
        in.source = pair.source_descriptor;
        in.source_score = pair.source_score;
        in.positive = desc.row(pos).transpose();
        in.positive_score = pair.target_score;
        in.negative = desc.row(neg).transpose();
        data.triplets.push_back(std::move(in));
        data.triplet_positive.emplace_back(static_cast<int>(v), pos);
        data.triplet_negative.emplace_back(static_cast<int>(v), neg);
      }
    }

    if (dropped > 0) {
      data.diagnostics.push_back(
          "view " + std::to_string(view.set.view_id) + ": dropped " +
          std::to_string(dropped) + " pairs/triplets with degenerate "
          "descriptors");
    }
    data.descriptors.push_back(std::move(desc));
  }
  return data;
}

}  // namespace

LossValue evaluate_total_loss(std::span<const TrainingView> views,
                              const DescriptorHead& head,
                              const CameraIntrinsics& intr,
                              const LossWeights& weights,
                              const LossOptions& options,
                              Eigen::MatrixXd* weight_gradient) {
  if (views.empty())
    throw std::invalid_argument("evaluate_total_loss: no training views");

  BatchData data = assemble_batch(views, head, intr, options);
  LossValue out;
  out.diagnostics = data.diagnostics;

  // Per-view upstream dL/dx accumulated across terms, lambda-weighted.
  std::vector<Eigen::MatrixXd> upstream;
  if (weight_gradient) {
    for (const auto& d : data.descriptors)
      upstream.push_back(Eigen::MatrixXd::Zero(d.rows(), d.cols()));
  }

  const auto absorb = [&out](const LossValue& term) {
    out.per_term.insert(term.per_term.begin(), term.per_term.end());
    out.diagnostics.insert(out.diagnostics.end(), term.diagnostics.begin(),
                           term.diagnostics.end());
  };

  if (options.terms.corres) {
    if (data.triplets.empty()) {
      out.per_term[kTermCorres] = 0.0;
      out.diagnostics.push_back("corres: no usable triplets in batch");
    } else {
      TripletGradients grads;
      const LossValue term =
          correspondence_loss(data.triplets, options.margin, options.hinge,
                              weight_gradient ? &grads : nullptr);
      absorb(term);
      out.value += weights.lambda_corres * term.value;
      if (weight_gradient) {
        for (std::size_t i = 0; i < data.triplets.size(); ++i) {
          const auto [pv, pf] = data.triplet_positive[i];
          const auto [nv, nf] = data.triplet_negative[i];
          upstream[pv].row(pf) +=
              weights.lambda_corres * grads.d_positive[i].transpose();
          upstream[nv].row(nf) +=
              weights.lambda_corres * grads.d_negative[i].transpose();
        }
      }
    }
  }

  if (options.terms.vw_coral) {
    GroupGradients grads;
    const LossValue term =
        vw_coral_loss(data.groups, head.descriptor_dim(),
                      options.coral_min_count,
                      weight_gradient ? &grads : nullptr);
    absorb(term);
    out.value += weights.lambda_vwcoral * term.value;
    if (weight_gradient) {
      for (std::size_t g = 0; g < data.groups.size(); ++g) {
        for (std::size_t i = 0; i < grads.d_target[g].size(); ++i) {
          const auto [v, f] = data.group_origin[g][i];
          upstream[v].row(f) +=
              weights.lambda_vwcoral * grads.d_target[g][i].transpose();
        }
      }
    }
  }

  if (options.terms.cd_sos) {
    GroupGradients grads;
    const LossValue term =
        cd_sos_loss(data.groups, weight_gradient ? &grads : nullptr);
    absorb(term);
    out.value += weights.lambda_cdsos * term.value;
    if (weight_gradient) {
      for (std::size_t g = 0; g < data.groups.size(); ++g) {
        for (std::size_t i = 0; i < grads.d_target[g].size(); ++i) {
          const auto [v, f] = data.group_origin[g][i];
          upstream[v].row(f) +=
              weights.lambda_cdsos * grads.d_target[g][i].transpose();
        }
      }
    }
  }

  if (options.terms.softmatch) {
    if (data.instances.empty()) {
      out.per_term[kTermSoftMatch] = 0.0;
      out.diagnostics.push_back("softmatch: no usable instances in batch");
    } else {
      SoftMatchConfig cfg{options.softmatch_beta, intr.diagonal()};
      SoftMatchGradients grads;
      const LossValue term =
          softmatch_loss(data.instances, data.match_targets, cfg,
                         weight_gradient ? &grads : nullptr);
      absorb(term);
      out.value += weights.lambda_softmatch * term.value;
      if (weight_gradient) {
        for (std::size_t v = 0; v < data.match_targets.size(); ++v) {
          const auto& rows = data.target_feature[v];
          for (std::size_t r = 0; r < rows.size(); ++r) {
            upstream[v].row(rows[r]) +=
                weights.lambda_softmatch *
                grads.d_targets[v].row(static_cast<Eigen::Index>(r));
          }
        }
      }
    }
  }

  if (weight_gradient) {
    weight_gradient->setZero(head.weights.rows(), head.weights.cols());
    for (std::size_t v = 0; v < views.size(); ++v) {
      for (Eigen::Index i = 0; i < upstream[v].rows(); ++i) {
        if (upstream[v].row(i).isZero(0.0)) continue;
        accumulate_describe_backward(head, views[v].features[i].pre_descriptor,
                                     upstream[v].row(i).transpose(),
                                     *weight_gradient);
      }
    }
  }
  return out;
}

LossWeights calibrate_weights(std::span<const TrainingView> views,
                              const DescriptorHead& head,
                              const CameraIntrinsics& intr,
                              const LossOptions& options) {
  if (views.size() < 2)
    throw CalibrationError("calibrate_weights: need at least 2 training views");

  struct Term {
    const char* key;
    bool enabled;
    double* lambda;
  };
  LossWeights weights;
  weights.lambda_corres = weights.lambda_vwcoral = weights.lambda_cdsos =
      weights.lambda_softmatch = 0.0;
  const Term terms[] = {
      {kTermCorres, options.terms.corres, &weights.lambda_corres},
      {kTermVwCoral, options.terms.vw_coral, &weights.lambda_vwcoral},
      {kTermCdSos, options.terms.cd_sos, &weights.lambda_cdsos},
      {kTermSoftMatch, options.terms.softmatch, &weights.lambda_softmatch},
  };

  // Unit weights so per_term raw values are what we need; one term at a time
  // so a disabled term is never evaluated.
  LossWeights unit;
  for (const auto& term : terms) {
    if (!term.enabled) continue;
    const std::string_view key = term.key;
    LossOptions solo = options;
    solo.terms.corres = key == kTermCorres;
    solo.terms.vw_coral = key == kTermVwCoral;
    solo.terms.cd_sos = key == kTermCdSos;
    solo.terms.softmatch = key == kTermSoftMatch;

    std::vector<double> values;
    values.reserve(views.size());
    for (std::size_t v = 0; v < views.size(); ++v) {
      const LossValue lv =
          evaluate_total_loss(views.subspan(v, 1), head, intr, unit, solo);
      values.push_back(lv.per_term.at(term.key));
    }

    const double n = static_cast<double>(values.size());
    double mean = 0.0;
    for (const double x : values) mean += x;
    mean /= n;
    double var = 0.0;
    for (const double x : values) var += (x - mean) * (x - mean);
    const double sigma = std::sqrt(var / n);

    const double scale = mean + 3.0 * sigma;
    if (scale <= 0.0) {
      throw CalibrationError(
          std::string("calibrate_weights: term '") + term.key +
          "' has mu + 3 sigma = 0; set an explicit weight override");
    }
    *term.lambda = 1.0 / (4.0 * scale);
    weights.stats[term.key] = TermStats{mean, sigma};
  }
  return weights;
}

void write_weights(std::ostream& os, const LossWeights& weights) {
  os << "fsda-weights 1\n";
  os << "lambda " << format_double(weights.lambda_corres) << ' '
     << format_double(weights.lambda_vwcoral) << ' '
     << format_double(weights.lambda_cdsos) << ' '
     << format_double(weights.lambda_softmatch) << '\n';
  os << "stats " << weights.stats.size() << '\n';
  for (const auto& [term, st] : weights.stats) {
    os << term << ' ' << format_double(st.mean) << ' '
       << format_double(st.stddev) << '\n';
  }
}

LossWeights read_weights(std::istream& is) {
  expect_token(is, "fsda-weights", "weights header");
  const long version = read_long(is, "weights.version");
  if (version != 1)
    throw std::runtime_error("unsupported weights version " +
                             std::to_string(version));
  LossWeights w;
  expect_token(is, "lambda", "weights.lambda");
  w.lambda_corres = read_double(is, "lambda.corres");
  w.lambda_vwcoral = read_double(is, "lambda.vwcoral");
  w.lambda_cdsos = read_double(is, "lambda.cdsos");
  w.lambda_softmatch = read_double(is, "lambda.softmatch");
  expect_token(is, "stats", "weights.stats");
  const long count = read_long(is, "stats.count");
  for (long i = 0; i < count; ++i) {
    const std::string term = read_token(is, "stats.term");
    TermStats st;
    st.mean = read_double(is, "stats.mean");
    st.stddev = read_double(is, "stats.stddev");
    w.stats[term] = st;
  }
  return w;
}

}  // namespace fsda
