#pragma once

// Balanced k-means over prompt embeddings, the ablation partitioners, and
// cluster-quality reporting.

#include <cstdint>
#include <string>
#include <vector>

#include "lmlx/corpus.hpp"
#include "lmlx/embedding.hpp"

namespace lmlx {

struct ClusterModel {
    int n = 0;                                  // expert count
    int64_t dim = 0;
    std::vector<std::vector<float>> centroids;  // n unit vectors
    std::vector<int> assignments;               // cluster id per example
    uint64_t seed = 42;
    EmbedMethod method = EmbedMethod::kTfidf;

    std::vector<int64_t> sizes() const;
};

struct KMeansOptions {
    int max_iter = 1000;
    double tol = 1e-8;
    bool balanced = true;
};

// Lloyd-style k-means with k-means++ seeding. Balanced mode assigns examples
// greedily in ascending distance-to-nearest-open-centroid order with per-
// cluster caps that keep sizes within one of each other, then applies local
// pair swaps until no swap lowers the total assignment distance.
ClusterModel balanced_kmeans(const EmbeddingMatrix& x, int n, uint64_t seed,
                             const KMeansOptions& opts = {});

// Sum of squared distances from each row to its assigned centroid.
double assignment_cost(const EmbeddingMatrix& x, const ClusterModel& model);

struct ClusterQuality {
    std::vector<double> intra;                      // mean cosine distance to own centroid
    std::vector<std::vector<double>> inter;         // pairwise centroid cosine distance
    double avg_intra = 0.0;
    double avg_inter = 0.0;
};
ClusterQuality cluster_quality(const ClusterModel& model, const EmbeddingMatrix& x);
std::string quality_report(const ClusterQuality& q);

enum class PartitionPolicy { kNone, kRandom, kLexical, kSemantic };
PartitionPolicy partition_policy_from_string(const std::string& s);
std::string partition_policy_name(PartitionPolicy p);

struct PartitionResult {
    std::vector<std::vector<Triplet>> parts;  // cluster_id stamped on each triplet
    ClusterModel model;                       // centroids empty for none/random
};

// none -> single part; random -> equal-size (+-1) shuffle split; lexical /
// semantic -> balanced k-means over the embedder's space (the caller supplies
// a tfidf embedder for lexical and a seed-model embedder for semantic).
PartitionResult partition(const std::vector<Triplet>& examples, PartitionPolicy policy, int n,
                          uint64_t seed, const Embedder* embedder = nullptr,
                          const KMeansOptions& opts = {});

// Fraction of examples whose cluster's majority label matches their own label.
double cluster_purity(const std::vector<int>& assignments, const std::vector<std::string>& labels, int n);

}  // namespace lmlx
