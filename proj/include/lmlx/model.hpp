#pragma once

// Decoder-only transformer (RMS-norm, SiLU-gated FFN, rotary positions) in two
// forms: dense expert and merged MoE with pluggable routing policies.

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "lmlx/checkpoint.hpp"
#include "lmlx/tensor.hpp"
#include "lmlx/tokenizer.hpp"

namespace lmlx {

struct ConfigError : Error {
    using Error::Error;
};

enum class RoutingPolicy { kTop1Token, kTop2Token, kSoftSequence, kHardSequence, kDomain };

RoutingPolicy routing_policy_from_string(const std::string& s);
std::string routing_policy_name(RoutingPolicy p);

struct ModelConfig {
    int vocab = kVocabSize;
    int layers = 2;
    int dim = 64;
    int heads = 4;
    int ffn = 128;
    int experts = 1;  // 1 = dense
    RoutingPolicy routing = RoutingPolicy::kDomain;
    int max_seq = 128;
    bool scorer = false;  // reward-model head on the final position

    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

// Named parameters in canonical order, shared between graphs.
template <typename S>
struct ParamsT {
    std::vector<std::pair<std::string, TensorPtr<S>>> list;

    TensorPtr<S> at(const std::string& name) const {
        for (const auto& [n, t] : list)
            if (n == name) return t;
        throw Error("missing parameter " + name);
    }
    void zero_grad() {
        for (auto& [n, t] : list) t->zero_grad();
    }
    void set_requires_grad(bool v) {
        for (auto& [n, t] : list) t->requires_grad = v;
    }
};

using Params = ParamsT<float>;

std::vector<std::string> canonical_param_names(const ModelConfig& cfg);

template <typename S>
ParamsT<S> init_params(const ModelConfig& cfg, uint64_t seed, double init_std = 0.05) {
    cfg.validate();
    ParamsT<S> p;
    uint64_t k = 0;
    for (const std::string& name : canonical_param_names(cfg)) {
        Dims dims;
        if (name == "embed.weight") dims = {cfg.vocab, cfg.dim};
        else if (name == "head.weight") dims = {cfg.dim, cfg.vocab};
        else if (name == "final_norm.weight") dims = {cfg.dim};
        else if (name == "score_head.weight") dims = {cfg.dim, 1};
        else if (name.find("attn_norm") != std::string::npos || name.find("ffn_norm") != std::string::npos) dims = {cfg.dim};
        else if (name.find(".gate.weight") != std::string::npos) dims = {cfg.dim, cfg.experts};
        else if (name.find("gate_proj") != std::string::npos || name.find("up_proj") != std::string::npos) dims = {cfg.dim, cfg.ffn};
        else if (name.find("down_proj") != std::string::npos) dims = {cfg.ffn, cfg.dim};
        else dims = {cfg.dim, cfg.dim};  // attention projections
        auto t = make_tensor<S>(dims, true);
        if (dims.size() == 1)
            std::fill(t->data.begin(), t->data.end(), S(1));  // norm scales start at 1
        else if (name == "score_head.weight")
            ;  // zero-initialized so an untrained scorer outputs exactly 0
        else
            fill_normal(*t, derive_seed(seed, k), init_std);
        ++k;
        p.list.emplace_back(name, t);
    }
    return p;
}

Params params_from_checkpoint(const Checkpoint& ckpt, const ModelConfig& cfg);
Checkpoint params_to_checkpoint(const Params& params, const ModelConfig& cfg,
                                const nlohmann::json& extra_metadata = nlohmann::json::object());
ModelConfig config_from_checkpoint(const Checkpoint& ckpt);

// Per-expert weights for one position (token policies) or one weight vector
// for the whole sequence (sequence/domain policies). Selected weights sum to
// 1, unselected experts carry exactly 0.
struct RoutingDecision {
    RoutingPolicy policy;
    bool per_token = false;
    std::vector<std::vector<double>> token_weights;  // [T][N] when per_token
    std::vector<double> seq_weights;                 // [N] otherwise
    std::vector<int> selected;                       // expert ids with nonzero weight (sequence policies)
};

// Top-k token routing: per position, softmax over the k largest gate logits
// (ties broken toward the lower expert index).
RoutingDecision route_tokens_topk(const std::vector<float>& x, int64_t t, int64_t d,
                                  const std::vector<float>& w_gate, int64_t n, int k);

// Sequence routing over mean gate logits; soft keeps the full softmax, hard
// selects the argmax expert one-hot.
RoutingDecision route_sequence(const std::vector<float>& x, int64_t t, int64_t d,
                               const std::vector<float>& w_gate, int64_t n, bool soft);

// Domain routing: one-hot on the centroid with the largest cosine similarity.
RoutingDecision route_domain(const std::vector<float>& query, const std::vector<std::vector<float>>& centroids);

struct DropoutPlan {
    double p = 0.0;
    uint64_t key = 0;
};

// Routing inputs for forward_moe. Token/sequence policies read the gate
// in-graph; domain policy consumes a precomputed external decision.
struct RouteInput {
    RoutingPolicy policy = RoutingPolicy::kDomain;
    const RoutingDecision* domain = nullptr;  // required for kDomain
};

namespace detail {

template <typename S>
TensorPtr<S> ffn_forward(GraphT<S>& g, const TensorPtr<S>& h, const TensorPtr<S>& w_gate,
                         const TensorPtr<S>& w_up, const TensorPtr<S>& w_down) {
    auto a = g.silu(g.matmul(h, w_gate));
    auto b = g.matmul(h, w_up);
    return g.matmul(g.mul(a, b), w_down);
}

template <typename S>
TensorPtr<S> attention_forward(GraphT<S>& g, const ParamsT<S>& p, const std::string& prefix,
                               const TensorPtr<S>& x, const ModelConfig& cfg) {
    const int64_t t = x->dims[0];
    const int64_t h = cfg.heads, dh = cfg.dim / cfg.heads;
    auto split = [&](TensorPtr<S> m) {
        return g.transpose(g.reshape(m, {t, h, dh}), {1, 0, 2});  // [H,T,Dh]
    };
    auto q = g.rope(split(g.matmul(x, p.at(prefix + ".wq.weight"))));
    auto kk = g.rope(split(g.matmul(x, p.at(prefix + ".wk.weight"))));
    auto v = split(g.matmul(x, p.at(prefix + ".wv.weight")));
    auto scores = g.mul_const(g.matmul(q, g.transpose(kk, {0, 2, 1})), 1.0 / std::sqrt(static_cast<double>(dh)));
    auto probs = g.causal_softmax(scores);
    auto ctx = g.matmul(probs, v);  // [H,T,Dh]
    auto merged = g.reshape(g.transpose(ctx, {1, 0, 2}), {t, cfg.dim});
    return g.matmul(merged, p.at(prefix + ".wo.weight"));
}

// Indices of the k largest logits, ties toward the lower index.
std::vector<int> topk_indices(const double* logits, int64_t n, int k);

template <typename S>
TensorPtr<S> moe_ffn_forward(GraphT<S>& g, const ParamsT<S>& p, const std::string& lp,
                             const TensorPtr<S>& h, const ModelConfig& cfg, const RouteInput& route);

}  // namespace detail

// Hidden states after the final norm, before the output head.
template <typename S>
TensorPtr<S> forward_hidden(GraphT<S>& g, const ParamsT<S>& p, const std::vector<int>& tokens,
                            const ModelConfig& cfg, const RouteInput* route = nullptr,
                            const DropoutPlan* drop = nullptr);

template <typename S>
TensorPtr<S> forward_dense(GraphT<S>& g, const ParamsT<S>& p, const std::vector<int>& tokens,
                           const ModelConfig& cfg, const DropoutPlan* drop = nullptr) {
    auto h = forward_hidden(g, p, tokens, cfg, nullptr, drop);
    return g.matmul(h, p.at("head.weight"));
}

template <typename S>
TensorPtr<S> forward_moe(GraphT<S>& g, const ParamsT<S>& p, const std::vector<int>& tokens,
                         const ModelConfig& cfg, const RouteInput& route,
                         const DropoutPlan* drop = nullptr) {
    auto h = forward_hidden(g, p, tokens, cfg, &route, drop);
    return g.matmul(h, p.at("head.weight"));
}

// Scalar reward head read at the final position.
template <typename S>
TensorPtr<S> forward_score(GraphT<S>& g, const ParamsT<S>& p, const std::vector<int>& tokens,
                           const ModelConfig& cfg, const DropoutPlan* drop = nullptr) {
    auto h = forward_hidden(g, p, tokens, cfg, nullptr, drop);
    auto last = g.row(h, h->dims[0] - 1);
    return g.reshape(g.matmul(last, p.at("score_head.weight")), {1});
}

template <typename S>
TensorPtr<S> forward_hidden(GraphT<S>& g, const ParamsT<S>& p, const std::vector<int>& tokens,
                            const ModelConfig& cfg, const RouteInput* route, const DropoutPlan* drop) {
    cfg.validate();
    const int64_t t = static_cast<int64_t>(tokens.size());
    if (t == 0) throw ValueError("forward: empty token sequence");
    if (t > cfg.max_seq) throw ShapeError("forward: sequence length " + std::to_string(t) +
                                          " exceeds max_seq " + std::to_string(cfg.max_seq));
    const bool moe = cfg.experts > 1;
    if (moe && route == nullptr) throw ConfigError("forward: MoE model needs routing input");

    auto x = g.embedding(p.at("embed.weight"), tokens);
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string lp = "layers." + std::to_string(l);
        auto hn = g.rmsnorm(x, p.at(lp + ".attn_norm.weight"));
        auto attn = detail::attention_forward(g, p, lp + ".attn", hn, cfg);
        if (drop && drop->p > 0)
            attn = g.dropout(attn, drop->p, derive_seed(drop->key, 2 * static_cast<uint64_t>(l)));
        x = g.add(x, attn);

        auto fn = g.rmsnorm(x, p.at(lp + ".ffn_norm.weight"));
        TensorPtr<S> y;
        if (!moe) {
            y = detail::ffn_forward(g, fn, p.at(lp + ".ffn.gate_proj.weight"),
                                    p.at(lp + ".ffn.up_proj.weight"), p.at(lp + ".ffn.down_proj.weight"));
        } else {
            y = detail::moe_ffn_forward(g, p, lp, fn, cfg, *route);
        }
        if (drop && drop->p > 0)
            y = g.dropout(y, drop->p, derive_seed(drop->key, 2 * static_cast<uint64_t>(l) + 1));
        x = g.add(x, y);
    }
    return g.rmsnorm(x, p.at("final_norm.weight"));
}

namespace detail {

constexpr double kRouteMaskOff = -1e30;  // exp underflows to exactly 0

template <typename S>
TensorPtr<S> expert_ffn(GraphT<S>& g, const ParamsT<S>& p, const std::string& lp, int e,
                        const TensorPtr<S>& h) {
    const std::string ep = lp + ".experts." + std::to_string(e);
    return ffn_forward(g, h, p.at(ep + ".gate_proj.weight"), p.at(ep + ".up_proj.weight"),
                       p.at(ep + ".down_proj.weight"));
}

template <typename S>
TensorPtr<S> moe_ffn_forward(GraphT<S>& g, const ParamsT<S>& p, const std::string& lp,
                             const TensorPtr<S>& h, const ModelConfig& cfg, const RouteInput& route) {
    const int64_t t = h->dims[0];
    const int n = cfg.experts;
    // A single expert receives weight exactly 1 under every policy.
    if (n == 1) return expert_ffn(g, p, lp, 0, h);

    switch (route.policy) {
        case RoutingPolicy::kTop1Token:
        case RoutingPolicy::kTop2Token: {
            const int k = route.policy == RoutingPolicy::kTop1Token ? 1 : 2;
            auto glog = g.matmul(h, p.at(lp + ".gate.weight"));  // [T,N]
            // Mask unselected logits far below the field so the softmax puts
            // exactly 0 on them, then renormalize over the selected set.
            std::vector<S> mask(static_cast<size_t>(t) * n, static_cast<S>(kRouteMaskOff));
            for (int64_t i = 0; i < t; ++i) {
                std::vector<double> row(n);
                for (int e = 0; e < n; ++e) row[e] = glog->data[i * n + e];
                for (int e : topk_indices(row.data(), n, k)) mask[i * n + e] = S(0);
            }
            auto w = g.softmax(g.add(glog, g.constant({t, static_cast<int64_t>(n)}, mask)), 1);
            std::vector<TensorPtr<S>> outs;
            outs.reserve(n);
            for (int e = 0; e < n; ++e) outs.push_back(expert_ffn(g, p, lp, e, h));
            return g.moe_combine_token(outs, w);
        }
        case RoutingPolicy::kSoftSequence: {
            auto glog = g.matmul(h, p.at(lp + ".gate.weight"));
            auto w = g.softmax(g.mean_rows(glog), 0);  // [N]
            std::vector<TensorPtr<S>> outs;
            outs.reserve(n);
            for (int e = 0; e < n; ++e) outs.push_back(expert_ffn(g, p, lp, e, h));
            return g.moe_combine_seq(outs, w);
        }
        case RoutingPolicy::kHardSequence: {
            auto glog = g.matmul(h, p.at(lp + ".gate.weight"));
            std::vector<double> mean(n, 0.0);
            for (int64_t i = 0; i < t; ++i)
                for (int e = 0; e < n; ++e) mean[e] += static_cast<double>(glog->data[i * n + e]);
            int best = 0;
            for (int e = 1; e < n; ++e)
                if (mean[e] > mean[best]) best = e;
            return expert_ffn(g, p, lp, best, h);
        }
        case RoutingPolicy::kDomain: {
            if (!route.domain) throw ConfigError("forward: domain routing needs a precomputed decision");
            int best = route.domain->selected.empty() ? 0 : route.domain->selected[0];
            if (best < 0 || best >= n) throw ConfigError("forward: domain decision expert out of range");
            return expert_ffn(g, p, lp, best, h);
        }
    }
    throw ConfigError("forward: unknown routing policy");
}

}  // namespace detail

}  // namespace lmlx
