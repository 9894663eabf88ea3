#include "lmlx/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace lmlx {

RoutingPolicy routing_policy_from_string(const std::string& s) {
    if (s == "top1-token") return RoutingPolicy::kTop1Token;
    if (s == "top2-token") return RoutingPolicy::kTop2Token;
    if (s == "soft-sequence") return RoutingPolicy::kSoftSequence;
    if (s == "hard-sequence") return RoutingPolicy::kHardSequence;
    if (s == "domain") return RoutingPolicy::kDomain;
    throw ConfigError("unknown routing policy: " + s);
}

std::string routing_policy_name(RoutingPolicy p) {
    switch (p) {
        case RoutingPolicy::kTop1Token: return "top1-token";
        case RoutingPolicy::kTop2Token: return "top2-token";
        case RoutingPolicy::kSoftSequence: return "soft-sequence";
        case RoutingPolicy::kHardSequence: return "hard-sequence";
        case RoutingPolicy::kDomain: return "domain";
    }
    return "?";
}

void ModelConfig::validate() const {
    if (vocab <= 0 || layers <= 0 || dim <= 0 || heads <= 0 || ffn <= 0 || max_seq <= 0)
        throw ConfigError("model config: nonpositive size");
    if (dim % heads != 0) throw ConfigError("model config: dim must be divisible by heads");
    if ((dim / heads) % 2 != 0) throw ConfigError("model config: head dim must be even for rotary positions");
    if (experts < 1) throw ConfigError("model config: experts must be >= 1");
}

nlohmann::json ModelConfig::to_json() const {
    return {{"vocab", vocab},   {"layers", layers},   {"dim", dim},
            {"heads", heads},   {"ffn", ffn},         {"experts", experts},
            {"routing", routing_policy_name(routing)}, {"max_seq", max_seq},
            {"scorer", scorer}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab = j.value("vocab", c.vocab);
    c.layers = j.value("layers", c.layers);
    c.dim = j.value("dim", c.dim);
    c.heads = j.value("heads", c.heads);
    c.ffn = j.value("ffn", c.ffn);
    c.experts = j.value("experts", c.experts);
    if (j.contains("routing")) c.routing = routing_policy_from_string(j["routing"].get<std::string>());
    c.max_seq = j.value("max_seq", c.max_seq);
    c.scorer = j.value("scorer", c.scorer);
    c.validate();
    return c;
}

std::vector<std::string> canonical_param_names(const ModelConfig& cfg) {
    std::vector<std::string> names;
    names.push_back("embed.weight");
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string lp = "layers." + std::to_string(l);
        names.push_back(lp + ".attn_norm.weight");
        for (const char* w : {"wq", "wk", "wv", "wo"}) names.push_back(lp + ".attn." + w + ".weight");
        names.push_back(lp + ".ffn_norm.weight");
        if (cfg.experts == 1) {
            for (const char* w : {"gate_proj", "up_proj", "down_proj"})
                names.push_back(lp + ".ffn." + std::string(w) + ".weight");
        } else {
            names.push_back(lp + ".gate.weight");
            for (int e = 0; e < cfg.experts; ++e)
                for (const char* w : {"gate_proj", "up_proj", "down_proj"})
                    names.push_back(lp + ".experts." + std::to_string(e) + "." + w + ".weight");
        }
    }
    names.push_back("final_norm.weight");
    names.push_back("head.weight");
    if (cfg.scorer) names.push_back("score_head.weight");
    return names;
}

Params params_from_checkpoint(const Checkpoint& ckpt, const ModelConfig& cfg) {
    Params p;
    for (const std::string& name : canonical_param_names(cfg)) {
        TensorF src = ckpt.at(name);
        auto t = make_tensor<float>(src->dims, true);
        t->data = src->data;
        p.list.emplace_back(name, t);
    }
    return p;
}

Checkpoint params_to_checkpoint(const Params& params, const ModelConfig& cfg,
                                const nlohmann::json& extra_metadata) {
    Checkpoint ckpt;
    ckpt.metadata = extra_metadata;
    ckpt.metadata["model"] = cfg.to_json();
    for (const auto& [name, t] : params.list) {
        auto copy = make_tensor<float>(t->dims);
        copy->data = t->data;
        ckpt.add(name, copy);
    }
    return ckpt;
}

ModelConfig config_from_checkpoint(const Checkpoint& ckpt) {
    if (!ckpt.metadata.contains("model")) throw ConfigError("checkpoint metadata lacks a model section");
    return ModelConfig::from_json(ckpt.metadata["model"]);
}

namespace detail {

std::vector<int> topk_indices(const double* logits, int64_t n, int k) {
    if (k < 1 || k > n) throw ConfigError("top-k: k=" + std::to_string(k) + " out of range for " +
                                          std::to_string(n) + " experts");
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return logits[a] > logits[b]; });
    order.resize(static_cast<size_t>(k));
    std::sort(order.begin(), order.end());
    return order;
}

namespace {

// Softmax restricted to `sel`; everything else gets exactly 0.
std::vector<double> sparse_softmax(const std::vector<double>& logits, const std::vector<int>& sel) {
    std::vector<double> w(logits.size(), 0.0);
    double mx = -1e300;
    for (int e : sel) mx = std::max(mx, logits[e]);
    double sum = 0.0;
    for (int e : sel) sum += std::exp(logits[e] - mx);
    for (int e : sel) w[e] = std::exp(logits[e] - mx) / sum;
    return w;
}

}  // namespace

}  // namespace detail

RoutingDecision route_tokens_topk(const std::vector<float>& x, int64_t t, int64_t d,
                                  const std::vector<float>& w_gate, int64_t n, int k) {
    if (static_cast<int64_t>(x.size()) != t * d) throw ShapeError("route_tokens_topk: bad activation size");
    if (static_cast<int64_t>(w_gate.size()) != d * n) throw ShapeError("route_tokens_topk: bad gate size");
    RoutingDecision r;
    r.policy = k == 1 ? RoutingPolicy::kTop1Token : RoutingPolicy::kTop2Token;
    r.per_token = true;
    r.token_weights.resize(static_cast<size_t>(t));
    for (int64_t i = 0; i < t; ++i) {
        std::vector<double> logits(static_cast<size_t>(n), 0.0);
        for (int64_t e = 0; e < n; ++e) {
            double acc = 0.0;
            for (int64_t j = 0; j < d; ++j)
                acc += static_cast<double>(x[i * d + j]) * static_cast<double>(w_gate[j * n + e]);
            logits[e] = acc;
        }
        std::vector<int> sel = detail::topk_indices(logits.data(), n, k);
        r.token_weights[i] = detail::sparse_softmax(logits, sel);
    }
    return r;
}

RoutingDecision route_sequence(const std::vector<float>& x, int64_t t, int64_t d,
                               const std::vector<float>& w_gate, int64_t n, bool soft) {
    if (static_cast<int64_t>(x.size()) != t * d) throw ShapeError("route_sequence: bad activation size");
    if (static_cast<int64_t>(w_gate.size()) != d * n) throw ShapeError("route_sequence: bad gate size");
    std::vector<double> mean(static_cast<size_t>(n), 0.0);
    for (int64_t i = 0; i < t; ++i)
        for (int64_t e = 0; e < n; ++e) {
            double acc = 0.0;
            for (int64_t j = 0; j < d; ++j)
                acc += static_cast<double>(x[i * d + j]) * static_cast<double>(w_gate[j * n + e]);
            mean[e] += acc / static_cast<double>(t);
        }
    RoutingDecision r;
    r.policy = soft ? RoutingPolicy::kSoftSequence : RoutingPolicy::kHardSequence;
    if (soft) {
        std::vector<int> all(static_cast<size_t>(n));
        std::iota(all.begin(), all.end(), 0);
        r.seq_weights = detail::sparse_softmax(mean, all);
        r.selected = all;
    } else {
        int best = 0;
        for (int e = 1; e < n; ++e)
            if (mean[e] > mean[best]) best = e;  // ties keep the lower index
        r.seq_weights.assign(static_cast<size_t>(n), 0.0);
        r.seq_weights[best] = 1.0;
        r.selected = {best};
    }
    return r;
}

RoutingDecision route_domain(const std::vector<float>& query, const std::vector<std::vector<float>>& centroids) {
    if (centroids.empty()) throw ConfigError("route_domain: no centroids");
    double qn = 0.0;
    for (float v : query) qn += static_cast<double>(v) * v;
    qn = std::sqrt(qn);
    if (qn == 0.0) throw ValueError("route_domain: zero query embedding");
    int best = 0;
    double best_sim = -2.0;
    for (size_t c = 0; c < centroids.size(); ++c) {
        if (centroids[c].size() != query.size())
            throw ShapeError("route_domain: embedding dim " + std::to_string(query.size()) +
                             " != centroid dim " + std::to_string(centroids[c].size()));
        double dot = 0.0, cn = 0.0;
        for (size_t j = 0; j < query.size(); ++j) {
            dot += static_cast<double>(query[j]) * centroids[c][j];
            cn += static_cast<double>(centroids[c][j]) * centroids[c][j];
        }
        double sim = (cn > 0.0) ? dot / (qn * std::sqrt(cn)) : -2.0;
        if (sim > best_sim) {  // strict improvement keeps the lower index on ties
            best_sim = sim;
            best = static_cast<int>(c);
        }
    }
    RoutingDecision r;
    r.policy = RoutingPolicy::kDomain;
    r.seq_weights.assign(centroids.size(), 0.0);
    r.seq_weights[static_cast<size_t>(best)] = 1.0;
    r.selected = {best};
    return r;
}

}  // namespace lmlx
