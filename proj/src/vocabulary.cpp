#include "fsda/vocabulary.hpp"

#include <limits>
#include <stdexcept>
#include <vector>

#include "fsda/rng.hpp"
#include "fsda/text_io.hpp"

namespace fsda {

namespace {

// Squared distance of every row of `points` to `center`.
void squared_distances(const Eigen::MatrixXd& points,
                       const Eigen::VectorXd& center, Eigen::VectorXd& out) {
  out = (points.rowwise() - center.transpose()).rowwise().squaredNorm();
}

}  // namespace

VisualVocabulary build_vocabulary(const Eigen::MatrixXd& descriptors, int k,
                                  std::uint64_t seed,
                                  std::vector<double>* objective_trace) {
  const int n = static_cast<int>(descriptors.rows());
  const int dim = static_cast<int>(descriptors.cols());
  if (k < 2) throw std::invalid_argument("build_vocabulary: k must be >= 2");
  if (n < 10 * k) {
    throw std::invalid_argument(
        "build_vocabulary: need at least " + std::to_string(10 * k) +
        " descriptors for k=" + std::to_string(k) + ", got " +
        std::to_string(n));
  }

  Rng rng(derive_seed(seed, "kmeans"));
  VisualVocabulary vocab;
  vocab.seed = seed;
  vocab.centroids.resize(k, dim);

  // k-means++ seeding.
  Eigen::VectorXd min_dist_sq(n);
  vocab.centroids.row(0) =
      descriptors.row(static_cast<int>(rng.uniform_index(n)));
  squared_distances(descriptors, vocab.centroids.row(0).transpose(),
                    min_dist_sq);
  for (int c = 1; c < k; ++c) {
    const double total = min_dist_sq.sum();
    int chosen = -1;
    if (total <= 0.0) {
      // All remaining mass at distance zero: pick the first point not yet
      // identical to a centroid.
      for (int i = 0; i < n && chosen < 0; ++i) {
        bool duplicate = false;
        for (int j = 0; j < c; ++j) {
          if ((descriptors.row(i) - vocab.centroids.row(j)).squaredNorm() ==
              0.0) {
            duplicate = true;
            break;
          }
        }
        if (!duplicate) chosen = i;
      }
      if (chosen < 0)
        throw std::invalid_argument(
            "build_vocabulary: fewer distinct descriptors than clusters");
    } else {
      double target = rng.uniform() * total;
      for (int i = 0; i < n; ++i) {
        target -= min_dist_sq[i];
        if (target <= 0.0) {
          chosen = i;
          break;
        }
      }
      if (chosen < 0) chosen = n - 1;
    }
    vocab.centroids.row(c) = descriptors.row(chosen);
    Eigen::VectorXd d(n);
    squared_distances(descriptors, vocab.centroids.row(c).transpose(), d);
    min_dist_sq = min_dist_sq.cwiseMin(d);
  }

  // Lloyd iterations.
  std::vector<int> assignment(n, -1);
  for (int iter = 0; iter < 100; ++iter) {
    bool changed = false;
    double objective = 0.0;
    for (int i = 0; i < n; ++i) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double d =
            (descriptors.row(i) - vocab.centroids.row(c)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      objective += best_d;
      if (assignment[i] != best) {
        assignment[i] = best;
        changed = true;
      }
    }
    if (objective_trace) objective_trace->push_back(objective);
    if (!changed) break;

    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, dim);
    std::vector<int> counts(k, 0);
    for (int i = 0; i < n; ++i) {
      sums.row(assignment[i]) += descriptors.row(i);
      ++counts[assignment[i]];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        vocab.centroids.row(c) = sums.row(c) / counts[c];
      } else {
        // Reseed an empty cluster at the point farthest from its centroid.
        int farthest = 0;
        double far_d = -1.0;
        for (int i = 0; i < n; ++i) {
          const double d =
              (descriptors.row(i) - vocab.centroids.row(assignment[i]))
                  .squaredNorm();
          if (d > far_d) {
            far_d = d;
            farthest = i;
          }
        }
        vocab.centroids.row(c) = descriptors.row(farthest);
      }
    }
  }

  for (int a = 0; a < k; ++a) {
    for (int b = a + 1; b < k; ++b) {
      if ((vocab.centroids.row(a) - vocab.centroids.row(b)).squaredNorm() ==
          0.0) {
        throw std::runtime_error(
            "build_vocabulary: produced duplicate centroids " +
            std::to_string(a) + " and " + std::to_string(b));
      }
    }
  }
  return vocab;
}

int assign_source(const VisualVocabulary& vocab, const Eigen::VectorXd& x) {
  if (x.size() != vocab.dim())
    throw std::invalid_argument("assign_source: dimension mismatch");
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int c = 0; c < vocab.word_count(); ++c) {
    const double d = (vocab.centroids.row(c).transpose() - x).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

int assign_target_by_correspondence(
    const VisualVocabulary& vocab, const Eigen::VectorXd& source_descriptor,
    const Eigen::VectorXd& /*target_descriptor*/) {
  return assign_source(vocab, source_descriptor);
}

void write_vocabulary(std::ostream& os, const VisualVocabulary& vocab) {
  os << "fsda-vocab 1\n";
  os << vocab.word_count() << ' ' << vocab.dim() << ' ' << vocab.seed << '\n';
  write_matrix_rows(os, vocab.centroids);
}

VisualVocabulary read_vocabulary(std::istream& is) {
  expect_token(is, "fsda-vocab", "vocabulary header");
  const long version = read_long(is, "vocab.version");
  if (version != 1)
    throw std::runtime_error("unsupported vocabulary version " +
                             std::to_string(version));
  VisualVocabulary vocab;
  const long k = read_long(is, "vocab.k");
  const long dim = read_long(is, "vocab.dim");
  vocab.seed = read_uint64(is, "vocab.seed");
  vocab.centroids.resize(k, dim);
  for (long r = 0; r < k; ++r)
    for (long c = 0; c < dim; ++c)
      vocab.centroids(r, c) = read_double(is, "vocab.centroids");
  return vocab;
}

}  // namespace fsda
