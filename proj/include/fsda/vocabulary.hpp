#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <istream>
#include <vector>
#include <ostream>

namespace fsda {

struct VisualVocabulary {
  Eigen::MatrixXd centroids;  // K x d
  std::uint64_t seed = 0;

  int word_count() const { return static_cast<int>(centroids.rows()); }
  int dim() const { return static_cast<int>(centroids.cols()); }
};

// k-means++ seeding, Lloyd iterations to an assignment fixpoint (at most 100
// rounds), empty clusters reseeded from the point farthest from its assigned
// centroid. Needs at least 10*k descriptor rows. If objective_trace is given
// it receives the clustering objective after every assignment step.
VisualVocabulary build_vocabulary(const Eigen::MatrixXd& descriptors, int k,
                                  std::uint64_t seed,
                                  std::vector<double>* objective_trace = nullptr);

// Nearest centroid by Euclidean distance, ties to the lowest word id.
int assign_source(const VisualVocabulary& vocab, const Eigen::VectorXd& x);

// The word of a positive correspondence is the word of its source member;
// the target descriptor is never consulted.
int assign_target_by_correspondence(const VisualVocabulary& vocab,
                                    const Eigen::VectorXd& source_descriptor,
                                    const Eigen::VectorXd& target_descriptor);

void write_vocabulary(std::ostream& os, const VisualVocabulary& vocab);
VisualVocabulary read_vocabulary(std::istream& is);

}  // namespace fsda
