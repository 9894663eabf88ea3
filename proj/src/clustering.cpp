#include "lmlx/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <queue>
#include <sstream>

#include "lmlx/rng.hpp"

namespace lmlx {

namespace {

double sq_dist(const float* a, const float* b, int64_t dim) {
    double acc = 0.0;
    for (int64_t j = 0; j < dim; ++j) {
        double d = static_cast<double>(a[j]) - static_cast<double>(b[j]);
        acc += d * d;
    }
    return acc;
}

// k-means++ seeding with D^2 weighting.
std::vector<std::vector<float>> kmeanspp_seed(const EmbeddingMatrix& x, int n, uint64_t seed) {
    const int64_t rows = x.rows, dim = x.dim;
    std::vector<std::vector<float>> centroids;
    uint64_t counter = 0;
    int64_t first = static_cast<int64_t>(rng_u64(seed, counter++) % static_cast<uint64_t>(rows));
    centroids.push_back(x.row_vec(first));
    std::vector<double> d2(static_cast<size_t>(rows));
    while (static_cast<int>(centroids.size()) < n) {
        double total = 0.0;
        for (int64_t i = 0; i < rows; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& c : centroids) best = std::min(best, sq_dist(x.row_ptr(i), c.data(), dim));
            d2[static_cast<size_t>(i)] = best;
            total += best;
        }
        int64_t pick;
        if (total <= 0.0) {
            pick = static_cast<int64_t>(rng_u64(seed, counter++) % static_cast<uint64_t>(rows));
        } else {
            double r = rng_uniform(seed, counter++) * total;
            pick = rows - 1;
            double acc = 0.0;
            for (int64_t i = 0; i < rows; ++i) {
                acc += d2[static_cast<size_t>(i)];
                if (acc >= r) {
                    pick = i;
                    break;
                }
            }
        }
        centroids.push_back(x.row_vec(pick));
    }
    return centroids;
}

// Greedy capacity-constrained assignment: repeatedly place the example whose
// distance to its nearest open centroid is smallest. Caps start at floor(n/N)
// and are raised to ceil(n/N) only once every cluster reaches the floor, which
// forces max-min size <= 1.
std::vector<int> greedy_balanced_assign(const EmbeddingMatrix& x,
                                        const std::vector<std::vector<float>>& centroids) {
    const int64_t rows = x.rows, dim = x.dim;
    const int n = static_cast<int>(centroids.size());
    const int64_t floor_cap = rows / n;
    std::vector<int64_t> cap(n, std::max<int64_t>(floor_cap, 1));
    std::vector<int64_t> size(n, 0);
    std::vector<int> assign(static_cast<size_t>(rows), -1);

    // (distance, example, centroid); lazily re-pushed when the centroid fills
    using Entry = std::tuple<double, int64_t, int>;
    auto nearest_open = [&](int64_t i) -> Entry {
        double best = std::numeric_limits<double>::infinity();
        int bc = -1;
        for (int c = 0; c < n; ++c) {
            if (size[c] >= cap[c]) continue;
            double d = sq_dist(x.row_ptr(i), centroids[c].data(), dim);
            if (d < best) {
                best = d;
                bc = c;
            }
        }
        return {best, i, bc};
    };

    std::priority_queue<Entry, std::vector<Entry>, std::greater<Entry>> heap;
    int64_t assigned = 0;
    bool raised = floor_cap == 0;
    if (raised)
        for (int c = 0; c < n; ++c) cap[c] = floor_cap + 1;
    for (int64_t i = 0; i < rows; ++i) heap.push(nearest_open(i));
    while (assigned < rows) {
        if (heap.empty()) {
            // all clusters hit the floor cap: allow one extra per cluster
            if (raised) throw Error("balanced assignment ran out of capacity");
            raised = true;
            for (int c = 0; c < n; ++c) cap[c] = floor_cap + 1;
            for (int64_t i = 0; i < rows; ++i)
                if (assign[static_cast<size_t>(i)] < 0) heap.push(nearest_open(i));
            continue;
        }
        auto [d, i, c] = heap.top();
        heap.pop();
        if (assign[static_cast<size_t>(i)] >= 0) continue;
        if (c < 0 || size[c] >= cap[c]) {
            auto e = nearest_open(i);
            if (std::get<2>(e) < 0) {
                if (!raised) {
                    raised = true;
                    for (int cc = 0; cc < n; ++cc) cap[cc] = floor_cap + 1;
                    e = nearest_open(i);
                } else {
                    throw Error("balanced assignment ran out of capacity");
                }
            }
            heap.push(e);
            continue;
        }
        assign[static_cast<size_t>(i)] = c;
        ++size[c];
        ++assigned;
    }
    return assign;
}

// Local pair-swap refinement (sizes preserved) until no swap lowers the total
// assignment distance; guarantees swap optimality at the fixpoint.
void swap_refine(const EmbeddingMatrix& x, const std::vector<std::vector<float>>& centroids,
                 std::vector<int>& assign, int max_sweeps = 50) {
    const int64_t rows = x.rows, dim = x.dim;
    const int n = static_cast<int>(centroids.size());
    std::vector<double> dist(static_cast<size_t>(rows) * n);
    for (int64_t i = 0; i < rows; ++i)
        for (int c = 0; c < n; ++c)
            dist[static_cast<size_t>(i) * n + c] = sq_dist(x.row_ptr(i), centroids[c].data(), dim);
    auto d = [&](int64_t i, int c) { return dist[static_cast<size_t>(i) * n + c]; };
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        bool improved = false;
        for (int64_t i = 0; i < rows; ++i)
            for (int64_t j = i + 1; j < rows; ++j) {
                int ci = assign[static_cast<size_t>(i)], cj = assign[static_cast<size_t>(j)];
                if (ci == cj) continue;
                double delta = d(i, cj) + d(j, ci) - d(i, ci) - d(j, cj);
                if (delta < -1e-12) {
                    std::swap(assign[static_cast<size_t>(i)], assign[static_cast<size_t>(j)]);
                    improved = true;
                }
            }
        if (!improved) break;
    }
}

std::vector<int> plain_assign(const EmbeddingMatrix& x, const std::vector<std::vector<float>>& centroids) {
    const int64_t rows = x.rows, dim = x.dim;
    const int n = static_cast<int>(centroids.size());
    std::vector<int> assign(static_cast<size_t>(rows), 0);
    for (int64_t i = 0; i < rows; ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (int c = 0; c < n; ++c) {
            double d = sq_dist(x.row_ptr(i), centroids[c].data(), dim);
            if (d < best) {
                best = d;
                assign[static_cast<size_t>(i)] = c;
            }
        }
    }
    return assign;
}

// Mean of assigned rows, re-normalized to the unit sphere.
std::vector<std::vector<float>> recompute_centroids(const EmbeddingMatrix& x, const std::vector<int>& assign,
                                                    const std::vector<std::vector<float>>& prev, int n) {
    const int64_t dim = x.dim;
    std::vector<std::vector<double>> acc(static_cast<size_t>(n), std::vector<double>(static_cast<size_t>(dim), 0.0));
    std::vector<int64_t> count(static_cast<size_t>(n), 0);
    for (int64_t i = 0; i < x.rows; ++i) {
        int c = assign[static_cast<size_t>(i)];
        ++count[static_cast<size_t>(c)];
        const float* r = x.row_ptr(i);
        for (int64_t j = 0; j < dim; ++j) acc[static_cast<size_t>(c)][static_cast<size_t>(j)] += r[j];
    }
    std::vector<std::vector<float>> out(static_cast<size_t>(n));
    for (int c = 0; c < n; ++c) {
        if (count[static_cast<size_t>(c)] == 0) {
            out[static_cast<size_t>(c)] = prev[static_cast<size_t>(c)];
            continue;
        }
        std::vector<float> v(static_cast<size_t>(dim));
        for (int64_t j = 0; j < dim; ++j)
            v[static_cast<size_t>(j)] =
                static_cast<float>(acc[static_cast<size_t>(c)][static_cast<size_t>(j)] /
                                   static_cast<double>(count[static_cast<size_t>(c)]));
        l2_normalize(v);
        out[static_cast<size_t>(c)] = std::move(v);
    }
    return out;
}

double max_centroid_shift(const std::vector<std::vector<float>>& a, const std::vector<std::vector<float>>& b) {
    double worst = 0.0;
    for (size_t c = 0; c < a.size(); ++c)
        worst = std::max(worst, std::sqrt(sq_dist(a[c].data(), b[c].data(), static_cast<int64_t>(a[c].size()))));
    return worst;
}

}  // namespace

std::vector<int64_t> ClusterModel::sizes() const {
    std::vector<int64_t> s(static_cast<size_t>(n), 0);
    for (int a : assignments) ++s[static_cast<size_t>(a)];
    return s;
}

ClusterModel balanced_kmeans(const EmbeddingMatrix& x, int n, uint64_t seed, const KMeansOptions& opts) {
    if (n <= 0) throw ValueError("balanced_kmeans: n must be positive");
    if (static_cast<int64_t>(n) > x.rows)
        throw ValueError("balanced_kmeans: infeasible, " + std::to_string(n) + " clusters for " +
                         std::to_string(x.rows) + " examples");
    auto centroids = kmeanspp_seed(x, n, seed);
    std::vector<int> assign;
    for (int iter = 0; iter < opts.max_iter; ++iter) {
        if (opts.balanced) {
            assign = greedy_balanced_assign(x, centroids);
            swap_refine(x, centroids, assign);
        } else {
            assign = plain_assign(x, centroids);
        }
        auto next = recompute_centroids(x, assign, centroids, n);
        double shift = max_centroid_shift(centroids, next);
        centroids = std::move(next);
        if (shift < opts.tol) break;
    }
    if (opts.balanced) {
        assign = greedy_balanced_assign(x, centroids);
        swap_refine(x, centroids, assign);
    } else {
        assign = plain_assign(x, centroids);
    }
    ClusterModel m;
    m.n = n;
    m.dim = x.dim;
    m.centroids = std::move(centroids);
    m.assignments = std::move(assign);
    m.seed = seed;
    m.method = x.method;
    return m;
}

double assignment_cost(const EmbeddingMatrix& x, const ClusterModel& model) {
    double acc = 0.0;
    for (int64_t i = 0; i < x.rows; ++i)
        acc += sq_dist(x.row_ptr(i), model.centroids[static_cast<size_t>(model.assignments[static_cast<size_t>(i)])].data(),
                       x.dim);
    return acc;
}

namespace {

double cosine_distance(const float* a, const float* b, int64_t dim) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int64_t j = 0; j < dim; ++j) {
        dot += static_cast<double>(a[j]) * b[j];
        na += static_cast<double>(a[j]) * a[j];
        nb += static_cast<double>(b[j]) * b[j];
    }
    if (na == 0.0 || nb == 0.0) return 1.0;
    return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

ClusterQuality cluster_quality(const ClusterModel& model, const EmbeddingMatrix& x) {
    ClusterQuality q;
    q.intra.assign(static_cast<size_t>(model.n), 0.0);
    std::vector<int64_t> count(static_cast<size_t>(model.n), 0);
    for (int64_t i = 0; i < x.rows; ++i) {
        int c = model.assignments[static_cast<size_t>(i)];
        q.intra[static_cast<size_t>(c)] += cosine_distance(x.row_ptr(i), model.centroids[static_cast<size_t>(c)].data(), x.dim);
        ++count[static_cast<size_t>(c)];
    }
    double intra_sum = 0.0;
    for (int c = 0; c < model.n; ++c) {
        if (count[static_cast<size_t>(c)] > 0) q.intra[static_cast<size_t>(c)] /= static_cast<double>(count[static_cast<size_t>(c)]);
        intra_sum += q.intra[static_cast<size_t>(c)];
    }
    q.avg_intra = intra_sum / static_cast<double>(model.n);
    q.inter.assign(static_cast<size_t>(model.n), std::vector<double>(static_cast<size_t>(model.n), 0.0));
    double inter_sum = 0.0;
    int64_t pairs = 0;
    for (int a = 0; a < model.n; ++a)
        for (int b = a + 1; b < model.n; ++b) {
            double d = cosine_distance(model.centroids[static_cast<size_t>(a)].data(),
                                       model.centroids[static_cast<size_t>(b)].data(), model.dim);
            q.inter[static_cast<size_t>(a)][static_cast<size_t>(b)] = d;
            q.inter[static_cast<size_t>(b)][static_cast<size_t>(a)] = d;
            inter_sum += d;
            ++pairs;
        }
    q.avg_inter = pairs ? inter_sum / static_cast<double>(pairs) : 0.0;
    return q;
}

std::string quality_report(const ClusterQuality& q) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(3);
    os << "cluster\tintra_distance\n";
    for (size_t c = 0; c < q.intra.size(); ++c) os << "C" << c << "\t" << q.intra[c] << "\n";
    os << "average\t" << q.avg_intra << "\n\n";
    os << "pair\tinter_distance\n";
    for (size_t a = 0; a < q.intra.size(); ++a)
        for (size_t b = a + 1; b < q.intra.size(); ++b)
            os << "C" << a << ",C" << b << "\t" << q.inter[a][b] << "\n";
    os << "average\t" << q.avg_inter << "\n";
    return os.str();
}

PartitionPolicy partition_policy_from_string(const std::string& s) {
    if (s == "none") return PartitionPolicy::kNone;
    if (s == "random") return PartitionPolicy::kRandom;
    if (s == "lexical") return PartitionPolicy::kLexical;
    if (s == "semantic") return PartitionPolicy::kSemantic;
    throw ConfigError("unknown partition policy: " + s);
}

std::string partition_policy_name(PartitionPolicy p) {
    switch (p) {
        case PartitionPolicy::kNone: return "none";
        case PartitionPolicy::kRandom: return "random";
        case PartitionPolicy::kLexical: return "lexical";
        case PartitionPolicy::kSemantic: return "semantic";
    }
    return "?";
}

PartitionResult partition(const std::vector<Triplet>& examples, PartitionPolicy policy, int n,
                          uint64_t seed, const Embedder* embedder, const KMeansOptions& opts) {
    if (examples.empty()) throw ValueError("partition: empty dataset");
    PartitionResult r;
    if (policy == PartitionPolicy::kNone) {
        r.parts.push_back(examples);
        for (auto& t : r.parts[0]) t.cluster_id = 0;
        r.model.n = 1;
        r.model.assignments.assign(examples.size(), 0);
        r.model.seed = seed;
        return r;
    }
    if (n <= 0 || static_cast<size_t>(n) > examples.size())
        throw ValueError("partition: bad part count " + std::to_string(n));
    if (policy == PartitionPolicy::kRandom) {
        std::vector<size_t> order(examples.size());
        std::iota(order.begin(), order.end(), size_t{0});
        // Fisher-Yates with the keyed stream
        for (size_t i = order.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(rng_u64(seed, i) % i);
            std::swap(order[i - 1], order[j]);
        }
        r.model.n = n;
        r.model.seed = seed;
        r.model.assignments.assign(examples.size(), 0);
        // first (count % n) parts take one extra
        const size_t base = examples.size() / static_cast<size_t>(n);
        const size_t extra = examples.size() % static_cast<size_t>(n);
        size_t pos = 0;
        for (int c = 0; c < n; ++c) {
            size_t take = base + (static_cast<size_t>(c) < extra ? 1 : 0);
            for (size_t k = 0; k < take; ++k) r.model.assignments[order[pos++]] = c;
        }
    } else {
        if (!embedder) throw ConfigError("partition: lexical/semantic policies need an embedder");
        EmbeddingMatrix x = embedder->embed_all(examples);
        r.model = balanced_kmeans(x, n, seed, opts);
    }
    r.parts.assign(static_cast<size_t>(n), {});
    for (size_t i = 0; i < examples.size(); ++i) {
        Triplet t = examples[i];
        t.cluster_id = r.model.assignments[i];
        r.parts[static_cast<size_t>(t.cluster_id)].push_back(std::move(t));
    }
    return r;
}

double cluster_purity(const std::vector<int>& assignments, const std::vector<std::string>& labels, int n) {
    if (assignments.size() != labels.size() || assignments.empty())
        throw ValueError("cluster_purity: size mismatch");
    std::vector<std::map<std::string, int64_t>> counts(static_cast<size_t>(n));
    for (size_t i = 0; i < assignments.size(); ++i) ++counts[static_cast<size_t>(assignments[i])][labels[i]];
    int64_t majority = 0;
    for (const auto& m : counts) {
        int64_t best = 0;
        for (const auto& [lab, c] : m) best = std::max(best, c);
        majority += best;
    }
    return static_cast<double>(majority) / static_cast<double>(assignments.size());
}

}  // namespace lmlx
