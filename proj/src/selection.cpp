#include "lmlx/selection.hpp"

#include <algorithm>

#include "lmlx/rng.hpp"
#include "lmlx/training.hpp"

namespace lmlx {

OracleMetric oracle_bleu() {
    return [](const std::string& h, const std::string& r) { return bleu(h, r); };
}

OracleMetric oracle_rouge_l() {
    return [](const std::string& h, const std::string& r) { return rouge_l(h, r); };
}

size_t select_by_score(const CandidateSet& candidates,
                       const std::function<double(const Candidate&)>& score) {
    if (candidates.candidates.empty()) throw ValueError("select: empty candidate set");
    size_t best = 0;
    double best_score = score(candidates.candidates[0]);
    for (size_t i = 1; i < candidates.candidates.size(); ++i) {
        double s = score(candidates.candidates[i]);
        if (s > best_score) {
            best_score = s;
            best = i;
        }
    }
    return best;
}

size_t select_oracle(const CandidateSet& candidates, const std::string& reference,
                     const OracleMetric& metric) {
    return select_by_score(candidates, [&](const Candidate& c) { return metric(c.text, reference); });
}

size_t select_orm(const CandidateSet& candidates, const Params& scorer_params,
                  const ModelConfig& scorer_cfg) {
    return select_by_score(candidates, [&](const Candidate& c) {
        return orm_score(scorer_params, scorer_cfg, candidates.prompt, c.tokens);
    });
}

VerifierKind verifier_from_string(const std::string& s) {
    if (s == "oracle") return VerifierKind::kOracle;
    if (s == "orm") return VerifierKind::kOrm;
    if (s == "random") return VerifierKind::kRandom;
    throw ConfigError("unknown verifier: " + s);
}

std::string verifier_name(VerifierKind v) {
    switch (v) {
        case VerifierKind::kOracle: return "oracle";
        case VerifierKind::kOrm: return "orm";
        case VerifierKind::kRandom: return "random";
    }
    return "?";
}

std::vector<int> default_bon_grid(int n_max) {
    std::vector<int> grid;
    for (int n = 1; n <= n_max; n *= 2) grid.push_back(n);
    if (grid.empty() || grid.back() != n_max) grid.push_back(n_max);
    return grid;
}

BoNResult bon_curve(const std::vector<CandidateSet>& candidate_sets,
                    const std::vector<std::string>& references, const Verifier& verifier,
                    const std::vector<int>& grid, const OracleMetric& eval_metric) {
    if (candidate_sets.size() != references.size())
        throw ValueError("bon_curve: candidate set / reference count mismatch");
    if (candidate_sets.empty()) throw ValueError("bon_curve: no prompts");
    BoNResult result;
    result.grid = grid;
    result.mean_metric.assign(grid.size(), 0.0);
    result.chosen.assign(grid.size(), std::vector<size_t>(candidate_sets.size(), 0));

    // per-candidate scores are computed once and reused across the N grid
    std::vector<std::vector<double>> scores(candidate_sets.size());
    for (size_t p = 0; p < candidate_sets.size(); ++p) {
        const auto& cands = candidate_sets[p].candidates;
        if (cands.empty()) throw ValueError("bon_curve: prompt " + std::to_string(p) + " has no candidates");
        scores[p].resize(cands.size());
        for (size_t i = 0; i < cands.size(); ++i) {
            switch (verifier.kind) {
                case VerifierKind::kOracle:
                    scores[p][i] = verifier.metric(cands[i].text, references[p]);
                    break;
                case VerifierKind::kOrm:
                    scores[p][i] = orm_score(*verifier.scorer_params, *verifier.scorer_cfg,
                                             candidate_sets[p].prompt, cands[i].tokens);
                    break;
                case VerifierKind::kRandom:
                    scores[p][i] = 0.0;
                    break;
            }
        }
    }
    for (size_t gi = 0; gi < grid.size(); ++gi) {
        const int n = grid[gi];
        if (n < 1) throw ValueError("bon_curve: grid entries must be >= 1");
        double acc = 0.0;
        for (size_t p = 0; p < candidate_sets.size(); ++p) {
            const auto& cands = candidate_sets[p].candidates;
            const size_t limit = std::min(static_cast<size_t>(n), cands.size());
            size_t pick = 0;
            if (verifier.kind == VerifierKind::kRandom) {
                pick = static_cast<size_t>(rng_u64(verifier.seed, p * 1000003ull + static_cast<uint64_t>(n)) % limit);
            } else {
                for (size_t i = 1; i < limit; ++i)
                    if (scores[p][i] > scores[p][pick]) pick = i;
            }
            result.chosen[gi][p] = pick;
            acc += eval_metric(cands[pick].text, references[p]);
        }
        result.mean_metric[gi] = acc / static_cast<double>(candidate_sets.size());
    }
    return result;
}

}  // namespace lmlx
