#pragma once

// Best-of-N test-time scaling: oracle, learned-reward and random verifiers
// plus prefix-semantics coverage curves.

#include <functional>
#include <string>
#include <vector>

#include "lmlx/decoding.hpp"
#include "lmlx/metrics.hpp"
#include "lmlx/model.hpp"

namespace lmlx {

using OracleMetric = std::function<double(const std::string& hypothesis, const std::string& reference)>;

OracleMetric oracle_bleu();
OracleMetric oracle_rouge_l();

// Argmax of metric(candidate, reference); ties keep the lowest index.
size_t select_oracle(const CandidateSet& candidates, const std::string& reference,
                     const OracleMetric& metric);

// Argmax of an arbitrary candidate scorer; ties keep the lowest index.
size_t select_by_score(const CandidateSet& candidates,
                       const std::function<double(const Candidate&)>& score);

// Argmax of the scorer over prompt + candidate; reference-free.
size_t select_orm(const CandidateSet& candidates, const Params& scorer_params,
                  const ModelConfig& scorer_cfg);

enum class VerifierKind { kOracle, kOrm, kRandom };
VerifierKind verifier_from_string(const std::string& s);
std::string verifier_name(VerifierKind v);

struct Verifier {
    VerifierKind kind = VerifierKind::kOracle;
    OracleMetric metric;                      // oracle
    const Params* scorer_params = nullptr;    // orm
    const ModelConfig* scorer_cfg = nullptr;  // orm
    uint64_t seed = 0;                        // random control
};

struct BoNResult {
    std::vector<int> grid;                    // N values
    std::vector<double> mean_metric;          // per N, mean over prompts
    std::vector<std::vector<size_t>> chosen;  // [grid][prompt] chosen candidate index
};

// Prefix semantics: the choice for N considers only the first N candidates, so
// one sampling pass serves the whole curve.
BoNResult bon_curve(const std::vector<CandidateSet>& candidate_sets,
                    const std::vector<std::string>& references, const Verifier& verifier,
                    const std::vector<int>& grid, const OracleMetric& eval_metric);

std::vector<int> default_bon_grid(int n_max);

}  // namespace lmlx
