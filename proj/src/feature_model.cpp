#include "fsda/feature_model.hpp"

#include <sstream>

#include "fsda/hashing.hpp"
#include "fsda/text_io.hpp"

namespace fsda {

namespace {
constexpr double kMinActivationNorm = 1e-12;
}

std::uint64_t DescriptorHead::content_hash() const {
  Hasher h;
  h.update_u64(static_cast<std::uint64_t>(weights.rows()));
  h.update_u64(static_cast<std::uint64_t>(weights.cols()));
  for (Eigen::Index r = 0; r < weights.rows(); ++r)
    for (Eigen::Index c = 0; c < weights.cols(); ++c) h.update(weights(r, c));
  return h.digest();
}

Eigen::VectorXd describe(const DescriptorHead& head,
                         const Eigen::VectorXd& u) {
  const Eigen::VectorXd activation =
      (head.weights * u).cwiseMax(0.0);
  const double norm = activation.norm();
  if (norm <= kMinActivationNorm) {
    throw DegenerateDescriptorError(
        "describe: relu activation vanished; no unit descriptor exists");
  }
  return activation / norm;
}

Eigen::MatrixXd describe_rows(const DescriptorHead& head,
                              const Eigen::MatrixXd& pre_rows) {
  Eigen::MatrixXd out(pre_rows.rows(), head.descriptor_dim());
  for (Eigen::Index i = 0; i < pre_rows.rows(); ++i) {
    out.row(i) = describe(head, pre_rows.row(i).transpose()).transpose();
  }
  return out;
}

Eigen::MatrixXd describe_features(const DescriptorHead& head,
                                  const std::vector<ObservedFeature>& features,
                                  std::vector<char>* valid) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(
      static_cast<Eigen::Index>(features.size()), head.descriptor_dim());
  if (valid) valid->assign(features.size(), 1);
  for (std::size_t i = 0; i < features.size(); ++i) {
    const Eigen::VectorXd activation =
        (head.weights * features[i].pre_descriptor).cwiseMax(0.0);
    const double norm = activation.norm();
    if (norm <= kMinActivationNorm) {
      if (valid) (*valid)[i] = 0;
      continue;
    }
    out.row(static_cast<Eigen::Index>(i)) = activation.transpose() / norm;
  }
  return out;
}

Eigen::MatrixXd describe_backward(const DescriptorHead& head,
                                  const Eigen::VectorXd& u,
                                  const Eigen::VectorXd& upstream) {
  Eigen::MatrixXd grad =
      Eigen::MatrixXd::Zero(head.weights.rows(), head.weights.cols());
  accumulate_describe_backward(head, u, upstream, grad);
  return grad;
}

void accumulate_describe_backward(const DescriptorHead& head,
                                  const Eigen::VectorXd& u,
                                  const Eigen::VectorXd& upstream,
                                  Eigen::MatrixXd& grad) {
  const Eigen::VectorXd pre_activation = head.weights * u;
  const Eigen::VectorXd activation = pre_activation.cwiseMax(0.0);
  const double norm = activation.norm();
  if (norm <= kMinActivationNorm) {
    throw DegenerateDescriptorError(
        "describe_backward: relu activation vanished");
  }
  const Eigen::VectorXd x = activation / norm;
  // d/d activation through x = activation / ||activation||
  Eigen::VectorXd d_act = (upstream - x * x.dot(upstream)) / norm;
  // relu gate
  for (Eigen::Index i = 0; i < d_act.size(); ++i) {
    if (pre_activation[i] <= 0.0) d_act[i] = 0.0;
  }
  grad.noalias() += d_act * u.transpose();
}

double matching_accuracy(const DescriptorHead& head,
                         const std::vector<ObservedFeature>& view_a,
                         const std::vector<ObservedFeature>& view_b) {
  if (view_a.empty() || view_b.empty()) return 0.0;
  std::vector<char> valid_a, valid_b;
  const Eigen::MatrixXd desc_a = describe_features(head, view_a, &valid_a);
  const Eigen::MatrixXd desc_b = describe_features(head, view_b, &valid_b);

  int common = 0;
  int correct = 0;
  for (std::size_t i = 0; i < view_a.size(); ++i) {
    const auto& fa = view_a[i];
    bool in_b = false;
    for (const auto& fb : view_b) {
      if (fb.landmark_id == fa.landmark_id) {
        in_b = true;
        break;
      }
    }
    if (!in_b) continue;
    ++common;  // a degenerate descriptor on either side counts as a miss
    if (!valid_a[i]) continue;
    const Eigen::VectorXd sims = desc_b * desc_a.row(i).transpose();
    Eigen::Index best = -1;
    double best_sim = -1.0;
    for (Eigen::Index j = 0; j < sims.size(); ++j) {
      if (valid_b[static_cast<std::size_t>(j)] && sims[j] > best_sim) {
        best_sim = sims[j];
        best = j;
      }
    }
    if (best >= 0 &&
        view_b[static_cast<std::size_t>(best)].landmark_id == fa.landmark_id)
      ++correct;
  }
  return common > 0 ? static_cast<double>(correct) / common : 0.0;
}

void write_head(std::ostream& os, const DescriptorHead& head) {
  os << "fsda-head 1\n";
  os << head.weights.rows() << ' ' << head.weights.cols() << ' '
     << (head.frozen ? 1 : 0) << '\n';
  write_matrix_rows(os, head.weights);
}

DescriptorHead read_head(std::istream& is) {
  expect_token(is, "fsda-head", "head header");
  const long version = read_long(is, "head.version");
  if (version != 1)
    throw std::runtime_error("unsupported head version " +
                             std::to_string(version));
  DescriptorHead head;
  const long rows = read_long(is, "head.rows");
  const long cols = read_long(is, "head.cols");
  head.frozen = read_long(is, "head.frozen") != 0;
  head.weights.resize(rows, cols);
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c)
      head.weights(r, c) = read_double(is, "head.weights");
  return head;
}

}  // namespace fsda
