#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>

#include "fsda/synthworld.hpp"

namespace fsda {

// Raised when relu(W * u) vanishes and no unit descriptor exists.
struct DegenerateDescriptorError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConvergenceError : std::runtime_error {
  ConvergenceError(const std::string& what, double achieved)
      : std::runtime_error(what), achieved_accuracy(achieved) {}
  double achieved_accuracy = 0.0;
};

// The trainable part of the descriptor function: a linear map followed by
// relu and L2 normalization. The source head is frozen after pretraining and
// serves as the fixed reference representation; adaptation trains a copy.
struct DescriptorHead {
  Eigen::MatrixXd weights;  // d x d_pre
  bool frozen = false;

  int descriptor_dim() const { return static_cast<int>(weights.rows()); }
  int pre_dim() const { return static_cast<int>(weights.cols()); }
  std::uint64_t content_hash() const;
};

// x = normalize(relu(W * u)); throws DegenerateDescriptorError when the
// activation norm is below 1e-12.
Eigen::VectorXd describe(const DescriptorHead& head, const Eigen::VectorXd& u);

// Row-per-feature convenience wrapper.
Eigen::MatrixXd describe_rows(const DescriptorHead& head,
                              const Eigen::MatrixXd& pre_rows);

// Descriptors for every feature of a view, one row each. A feature whose relu
// activation vanishes under this head gets a zero row and a 0 in *valid;
// callers treat it as undetected instead of aborting the whole view.
Eigen::MatrixXd describe_features(const DescriptorHead& head,
                                  const std::vector<ObservedFeature>& features,
                                  std::vector<char>* valid = nullptr);

// dL/dW for the descriptor of u given upstream = dL/dx. Chains the upstream
// through the normalization projection (I - x x^T)/||relu(W u)|| and the relu
// gate.
Eigen::MatrixXd describe_backward(const DescriptorHead& head,
                                  const Eigen::VectorXd& u,
                                  const Eigen::VectorXd& upstream);

void accumulate_describe_backward(const DescriptorHead& head,
                                  const Eigen::VectorXd& u,
                                  const Eigen::VectorXd& upstream,
                                  Eigen::MatrixXd& grad);

struct PretrainConfig {
  int descriptor_dim = 16;
  int epochs = 40;
  double learning_rate = 3e-3;
  double margin = 1.0;
  double safe_radius_px = 8.0;
  int patience = 8;
  double min_accuracy = 0.9;  // validation matching accuracy to declare done
  std::uint64_t seed = 0;
};

// Trains a fresh head on source-domain renders of the reference views with
// the weighted triplet margin loss, using ground-truth landmark identity for
// positives (supervised source pretraining). Returns a frozen head; throws
// ConvergenceError if validation matching accuracy stays below
// cfg.min_accuracy.
DescriptorHead pretrain_source_head(const Scene& scene,
                                    const DomainSpec& source_domain,
                                    const PretrainConfig& cfg);

// Nearest-neighbor matching accuracy between two views over their common
// landmarks (fraction of view-a features whose NN in view b is the same
// landmark).
double matching_accuracy(const DescriptorHead& head,
                         const std::vector<ObservedFeature>& view_a,
                         const std::vector<ObservedFeature>& view_b);

void write_head(std::ostream& os, const DescriptorHead& head);
DescriptorHead read_head(std::istream& is);

}  // namespace fsda
