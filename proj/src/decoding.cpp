#include "lmlx/decoding.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <set>
#include <thread>

#include "lmlx/rng.hpp"
#include "lmlx/tokenizer.hpp"

namespace lmlx {

void SamplerConfig::validate() const {
    if (temperature < 0) throw ConfigError("sampler: temperature must be >= 0");
    if (top_p <= 0 || top_p > 1) throw ConfigError("sampler: top_p must be in (0,1]");
    if (top_k < 1) throw ConfigError("sampler: top_k must be >= 1");
    if (repetition_penalty < 1) throw ConfigError("sampler: repetition penalty must be >= 1");
    if (max_new_tokens < 1) throw ConfigError("sampler: max_new_tokens must be >= 1");
}

RoutingDecision domain_decision_for(const Triplet& example, const ClusterModel& clusters,
                                    const Embedder& embedder) {
    return route_domain(embedder.embed_one(example), clusters.centroids);
}

namespace {

std::vector<double> last_position_logits(const GenModel& m, const std::vector<int>& seq,
                                         const RoutingDecision* domain) {
    Graph g;
    TensorF logits;
    if (m.cfg.experts > 1) {
        RouteInput route;
        route.policy = m.policy;
        route.domain = domain;
        logits = forward_moe(g, *m.params, seq, m.cfg, route);
    } else {
        logits = forward_dense(g, *m.params, seq, m.cfg);
    }
    const int64_t t = logits->dims[0], v = logits->dims[1];
    std::vector<double> out(static_cast<size_t>(v));
    for (int64_t j = 0; j < v; ++j) out[static_cast<size_t>(j)] = logits->data[(t - 1) * v + j];
    return out;
}

std::vector<double> log_softmax(const std::vector<double>& logits) {
    double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double l : logits) sum += std::exp(l - mx);
    double lse = std::log(sum) + mx;
    std::vector<double> out(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
}

int sample_filtered(std::vector<double> logits, const SamplerConfig& cfg, uint64_t seed, uint64_t step) {
    const int v = static_cast<int>(logits.size());
    // top-k: keep the k largest logits, ties toward the lower token id
    std::vector<int> order(static_cast<size_t>(v));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return logits[static_cast<size_t>(a)] > logits[static_cast<size_t>(b)]; });
    const int keep = std::min(cfg.top_k, v);
    order.resize(static_cast<size_t>(keep));
    // softmax over the kept logits
    double mx = logits[static_cast<size_t>(order[0])];
    double sum = 0.0;
    std::vector<double> probs(static_cast<size_t>(keep));
    for (int i = 0; i < keep; ++i) {
        probs[static_cast<size_t>(i)] = std::exp(logits[static_cast<size_t>(order[static_cast<size_t>(i)])] - mx);
        sum += probs[static_cast<size_t>(i)];
    }
    for (double& p : probs) p /= sum;
    // nucleus: smallest prefix of the probability-sorted list with mass >= top_p
    int cut = keep;
    double cum = 0.0;
    for (int i = 0; i < keep; ++i) {
        cum += probs[static_cast<size_t>(i)];
        if (cum >= cfg.top_p) {
            cut = i + 1;
            break;
        }
    }
    double mass = 0.0;
    for (int i = 0; i < cut; ++i) mass += probs[static_cast<size_t>(i)];
    const double u = rng_uniform(seed, step) * mass;
    double acc = 0.0;
    for (int i = 0; i < cut; ++i) {
        acc += probs[static_cast<size_t>(i)];
        if (u < acc) return order[static_cast<size_t>(i)];
    }
    return order[static_cast<size_t>(cut - 1)];
}

}  // namespace

void apply_repetition_penalty(std::vector<double>& logits, const std::set<int>& present, double penalty) {
    if (penalty == 1.0) return;
    for (int tok : present) {
        double& l = logits[static_cast<size_t>(tok)];
        l = l > 0 ? l / penalty : l * penalty;
    }
}

Generation generate(const GenModel& model, const std::vector<int>& prompt, const SamplerConfig& cfg,
                    const RoutingDecision* domain) {
    cfg.validate();
    if (prompt.empty()) throw ValueError("generate: empty prompt");
    if (model.cfg.experts > 1 && model.policy == RoutingPolicy::kDomain && domain == nullptr)
        throw ConfigError("generate: domain routing needs a routing decision");
    std::vector<int> seq = prompt;
    std::set<int> present(prompt.begin(), prompt.end());
    Generation out;
    for (int step = 0; step < cfg.max_new_tokens; ++step) {
        if (static_cast<int>(seq.size()) >= model.cfg.max_seq) break;
        std::vector<double> raw = last_position_logits(model, seq, domain);
        // log-likelihood is recorded from unpenalized, untempered probabilities
        std::vector<double> logp = log_softmax(raw);

        std::vector<double> filtered = raw;
        apply_repetition_penalty(filtered, present, cfg.repetition_penalty);
        int next;
        if (cfg.temperature == 0.0) {
            next = 0;
            for (int j = 1; j < static_cast<int>(filtered.size()); ++j)
                if (filtered[static_cast<size_t>(j)] > filtered[static_cast<size_t>(next)]) next = j;
        } else {
            for (double& l : filtered) l /= cfg.temperature;
            next = sample_filtered(filtered, cfg, cfg.seed, static_cast<uint64_t>(step));
        }
        out.loglik += logp[static_cast<size_t>(next)];
        out.tokens.push_back(next);
        seq.push_back(next);
        present.insert(next);
        if (next == kEos) break;
    }
    out.text = detokenize(out.tokens);
    return out;
}

CandidateSet repeated_sample(const GenModel& model, const std::vector<int>& prompt, int n,
                             const SamplerConfig& cfg, const RoutingDecision* domain, int jobs) {
    if (n < 1) throw ConfigError("repeated_sample: n must be >= 1");
    CandidateSet set;
    set.prompt = prompt;
    set.candidates.resize(static_cast<size_t>(n));
    auto produce = [&](int i) {
        SamplerConfig per = cfg;
        per.seed = derive_seed(cfg.seed, static_cast<uint64_t>(i));
        Generation gen = generate(model, prompt, per, domain);
        Candidate& c = set.candidates[static_cast<size_t>(i)];
        c.text = std::move(gen.text);
        c.tokens = std::move(gen.tokens);
        c.loglik = gen.loglik;
        c.seed = per.seed;
    };
    if (jobs <= 1) {
        for (int i = 0; i < n; ++i) produce(i);
    } else {
        std::atomic<int> next{0};
        std::vector<std::thread> workers;
        for (int w = 0; w < jobs; ++w)
            workers.emplace_back([&] {
                for (;;) {
                    int i = next.fetch_add(1);
                    if (i >= n) break;
                    produce(i);
                }
            });
        for (auto& w : workers) w.join();
    }
    return set;
}

double sequence_loglik(const GenModel& model, const std::vector<int>& prompt,
                       const std::vector<int>& completion, const RoutingDecision* domain) {
    if (prompt.empty()) throw ValueError("sequence_loglik: empty prompt");
    if (completion.empty()) return 0.0;
    std::vector<int> seq = prompt;
    seq.insert(seq.end(), completion.begin(), completion.end());
    if (static_cast<int>(seq.size()) > model.cfg.max_seq)
        seq.resize(static_cast<size_t>(model.cfg.max_seq));
    Graph g;
    TensorF logits;
    if (model.cfg.experts > 1) {
        RouteInput route;
        route.policy = model.policy;
        route.domain = domain;
        logits = forward_moe(g, *model.params, seq, model.cfg, route);
    } else {
        logits = forward_dense(g, *model.params, seq, model.cfg);
    }
    const int64_t v = logits->dims[1];
    double total = 0.0;
    for (size_t i = prompt.size(); i < seq.size(); ++i) {
        const int64_t pos = static_cast<int64_t>(i) - 1;  // position predicting seq[i]
        std::vector<double> row(static_cast<size_t>(v));
        for (int64_t j = 0; j < v; ++j) row[static_cast<size_t>(j)] = logits->data[pos * v + j];
        total += log_softmax(row)[static_cast<size_t>(seq[i])];
    }
    return total;
}

}  // namespace lmlx
