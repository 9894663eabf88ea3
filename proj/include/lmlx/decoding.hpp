#pragma once

// Autoregressive generation: greedy and stochastic sampling with repetition
// penalty / temperature / top-k / top-p filtering, plus repeated sampling for
// test-time scaling.

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "lmlx/clustering.hpp"
#include "lmlx/model.hpp"

namespace lmlx {

struct SamplerConfig {
    double temperature = 0.6;  // 0 = greedy argmax
    int top_k = 50;
    double top_p = 0.9;
    double repetition_penalty = 1.05;
    int max_new_tokens = 64;
    uint64_t seed = 42;

    void validate() const;
};

// Model handle for generation; route is consulted when cfg.experts > 1.
struct GenModel {
    ModelConfig cfg;
    const Params* params = nullptr;
    RoutingPolicy policy = RoutingPolicy::kDomain;
};

RoutingDecision domain_decision_for(const Triplet& example, const ClusterModel& clusters,
                                    const Embedder& embedder);

// CTRL convention over the raw logits of the current step: positive logits of
// context tokens are divided by the penalty, negative ones multiplied. Applied
// fresh from raw logits each step, so penalties never compound across steps.
void apply_repetition_penalty(std::vector<double>& logits, const std::set<int>& present, double penalty);

struct Generation {
    std::string text;            // detokenized completion, eos excluded
    std::vector<int> tokens;     // generated ids including the terminating eos when emitted
    double loglik = 0.0;         // sum of unpenalized, untempered log-probs
};

Generation generate(const GenModel& model, const std::vector<int>& prompt, const SamplerConfig& cfg,
                    const RoutingDecision* domain = nullptr);

struct Candidate {
    std::string text;
    std::vector<int> tokens;
    double loglik = 0.0;
    uint64_t seed = 0;
};

struct CandidateSet {
    std::vector<int> prompt;
    std::vector<Candidate> candidates;
};

// n candidates whose per-candidate seeds derive from hash(base seed, index).
// Candidates are independent; jobs > 1 produces them concurrently and collects
// results in index order, so output does not depend on the thread count.
CandidateSet repeated_sample(const GenModel& model, const std::vector<int>& prompt, int n,
                             const SamplerConfig& cfg, const RoutingDecision* domain = nullptr,
                             int jobs = 1);

// Log-likelihood of a completion under the model by a single forward pass;
// must agree with Generation::loglik accumulated incrementally.
double sequence_loglik(const GenModel& model, const std::vector<int>& prompt,
                       const std::vector<int>& completion, const RoutingDecision* domain = nullptr);

}  // namespace lmlx
