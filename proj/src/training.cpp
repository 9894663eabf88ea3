#include "lmlx/training.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>

#include "lmlx/metrics.hpp"
#include "lmlx/rng.hpp"

namespace lmlx {

void TrainConfig::validate() const {
    if (epochs < 1 && max_steps < 1) throw ConfigError("train config: need epochs or max_steps");
    if (warmup_ratio < 0 || warmup_ratio > 1) throw ConfigError("train config: warmup ratio must be in [0,1]");
    if (min_lr > max_lr) throw ConfigError("train config: min LR exceeds max LR");
    if (batch_tokens < 1) throw ConfigError("train config: batch_tokens must be positive");
    if (dropout < 0 || dropout >= 1) throw ConfigError("train config: dropout must be in [0,1)");
    if (grad_clip <= 0) throw ConfigError("train config: grad clip must be positive");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"epochs", epochs},           {"max_steps", max_steps},
            {"batch_tokens", batch_tokens}, {"max_lr", max_lr},
            {"min_lr", min_lr},           {"warmup_ratio", warmup_ratio},
            {"weight_decay", weight_decay}, {"grad_clip", grad_clip},
            {"dropout", dropout},         {"beta1", beta1},
            {"beta2", beta2},             {"adam_eps", adam_eps},
            {"seed", seed},               {"val_max_examples", val_max_examples},
            {"lm_objective", lm_objective}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.batch_tokens = j.value("batch_tokens", c.batch_tokens);
    c.max_lr = j.value("max_lr", c.max_lr);
    c.min_lr = j.value("min_lr", c.min_lr);
    c.warmup_ratio = j.value("warmup_ratio", c.warmup_ratio);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.dropout = j.value("dropout", c.dropout);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.seed = j.value("seed", c.seed);
    c.val_max_examples = j.value("val_max_examples", c.val_max_examples);
    c.lm_objective = j.value("lm_objective", c.lm_objective);
    c.validate();
    return c;
}

double lr_at(const TrainConfig& cfg, int64_t step, int64_t total_steps) {
    if (total_steps <= 0) return cfg.max_lr;
    const int64_t warmup = std::llround(cfg.warmup_ratio * static_cast<double>(total_steps));
    if (warmup > 0 && step < warmup)
        return cfg.max_lr * static_cast<double>(step) / static_cast<double>(warmup);
    const int64_t rest = std::max<int64_t>(total_steps - warmup, 1);
    double progress = static_cast<double>(step - warmup) / static_cast<double>(rest);
    progress = std::clamp(progress, 0.0, 1.0);
    return cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + std::cos(3.141592653589793 * progress));
}

void AdamW::step(const std::vector<TensorF>& params, double lr) {
    if (m_.empty()) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            m_[i].assign(params[i]->data.size(), 0.0);
            v_[i].assign(params[i]->data.size(), 0.0);
        }
    }
    if (m_.size() != params.size()) throw ConfigError("AdamW: parameter set changed between steps");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = *params[pi];
        const bool decay = p.rank() >= 2;  // norm scales are not decayed
        const double shrink = decay ? 1.0 - lr * wd_ : 1.0;
        p.ensure_grad();
        for (size_t i = 0; i < p.data.size(); ++i) {
            const double g = p.grad[i];
            m_[pi][i] = beta1_ * m_[pi][i] + (1.0 - beta1_) * g;
            v_[pi][i] = beta2_ * v_[pi][i] + (1.0 - beta2_) * g * g;
            const double mhat = m_[pi][i] / bc1;
            const double vhat = v_[pi][i] / bc2;
            p.data[i] = static_cast<float>(static_cast<double>(p.data[i]) * shrink -
                                           lr * mhat / (std::sqrt(vhat) + eps_));
        }
    }
}

double clip_global_norm(const std::vector<TensorF>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params) {
        if (p->grad.empty()) continue;
        for (float g : p->grad) sq += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double scale = max_norm / norm;
        for (const auto& p : params)
            for (float& g : p->grad) g = static_cast<float>(g * scale);
    }
    return norm;
}

ScopePredicate scope_all() {
    return [](const std::string&) { return true; };
}
ScopePredicate scope_gates() {
    return [](const std::string& n) {
        return n.find(".gate.weight") != std::string::npos && n.find("gate_proj") == std::string::npos;
    };
}
ScopePredicate scope_gates_and_experts() {
    return [](const std::string& n) {
        return (n.find(".gate.weight") != std::string::npos && n.find("gate_proj") == std::string::npos) ||
               n.find(".experts.") != std::string::npos;
    };
}
ScopePredicate scope_from_string(const std::string& s) {
    if (s == "all") return scope_all();
    if (s == "gates") return scope_gates();
    if (s == "gates+experts") return scope_gates_and_experts();
    throw ConfigError("unknown trainable scope: " + s);
}

namespace {

RoutingDecision onehot_decision(int expert, int n) {
    RoutingDecision d;
    d.policy = RoutingPolicy::kDomain;
    d.seq_weights.assign(static_cast<size_t>(n), 0.0);
    d.seq_weights[static_cast<size_t>(expert)] = 1.0;
    d.selected = {expert};
    return d;
}

Params snapshot_params(const Params& p) {
    Params copy;
    for (const auto& [name, t] : p.list) {
        auto nt = make_tensor<float>(t->dims, t->requires_grad);
        nt->data = t->data;
        copy.list.emplace_back(name, nt);
    }
    return copy;
}

double greedy_val_bleu(const Params& params, const ModelConfig& cfg, const std::vector<Triplet>& valid,
                       int max_examples, const std::vector<int>& domains) {
    if (valid.empty()) return std::numeric_limits<double>::quiet_NaN();
    GenModel gm{cfg, &params, cfg.routing};
    SamplerConfig sc;
    sc.temperature = 0.0;
    const size_t n = std::min(valid.size(), static_cast<size_t>(max_examples));
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
        auto prompt = prompt_tokens_truncated(valid[i].context, valid[i].term, cfg.max_seq / 2);
        sc.max_new_tokens = cfg.max_seq - static_cast<int>(prompt.size());
        RoutingDecision dec;
        const RoutingDecision* dp = nullptr;
        if (cfg.experts > 1 && cfg.routing == RoutingPolicy::kDomain) {
            if (domains.empty()) throw ConfigError("validation: domain routing needs labels");
            dec = onehot_decision(domains[i], cfg.experts);
            dp = &dec;
        }
        Generation g = generate(gm, prompt, sc, dp);
        acc += bleu(g.text, valid[i].definition);
    }
    return acc / static_cast<double>(n);
}

}  // namespace

TrainResult train_loop(Params params, const ModelConfig& cfg, const std::vector<Triplet>& train,
                       const std::vector<Triplet>& valid, const TrainConfig& tcfg,
                       const ScopePredicate& scope, const std::vector<int>& train_domains,
                       const std::vector<int>& valid_domains) {
    tcfg.validate();
    cfg.validate();
    if (train.empty()) throw ValueError("train_loop: empty training set");
    const bool moe = cfg.experts > 1;
    const bool domain_routed = moe && cfg.routing == RoutingPolicy::kDomain;
    if (domain_routed && train_domains.size() != train.size())
        throw ConfigError("train_loop: domain routing needs one label per training example");

    std::vector<PromptedExample> examples;
    examples.reserve(train.size());
    int64_t tokens_per_epoch = 0;
    for (const auto& t : train) {
        examples.push_back(make_prompted_example(t, cfg.max_seq));
        tokens_per_epoch += static_cast<int64_t>(examples.back().tokens.size()) - 1;
    }

    std::vector<TensorF> trainable;
    for (auto& [name, t] : params.list) {
        t->requires_grad = scope(name);
        if (t->requires_grad) trainable.push_back(t);
    }
    if (trainable.empty()) throw ConfigError("train_loop: scope selects no parameters");

    const int64_t steps_per_epoch = std::max<int64_t>(1, (tokens_per_epoch + tcfg.batch_tokens - 1) / tcfg.batch_tokens);
    const int64_t total_steps =
        tcfg.max_steps > 0 ? tcfg.max_steps : steps_per_epoch * std::max(tcfg.epochs, 1);

    AdamW opt(tcfg.beta1, tcfg.beta2, tcfg.adam_eps, tcfg.weight_decay);
    TrainResult result;
    result.best_val_bleu = -1.0;

    std::vector<size_t> order(examples.size());
    std::iota(order.begin(), order.end(), size_t{0});
    auto reshuffle = [&](int64_t epoch) {
        for (size_t i = order.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(rng_u64(derive_seed(tcfg.seed, static_cast<uint64_t>(epoch)), i) % i);
            std::swap(order[i - 1], order[j]);
        }
    };
    int64_t epoch = 0;
    size_t cursor = 0;
    reshuffle(0);
    uint64_t seq_counter = 0;
    const uint64_t drop_key = derive_seed(tcfg.seed, 0xD120u);

    for (int64_t step = 0; step < total_steps; ++step) {
        for (auto& t : trainable) t->zero_grad();
        int64_t batch_tok = 0;
        int64_t mask_total = 0;
        double loss_weighted = 0.0;
        bool epoch_end = false;
        while (batch_tok < tcfg.batch_tokens) {
            const size_t ix = order[cursor];
            const PromptedExample& ex = examples[ix];
            Graph g;
            DropoutPlan drop{tcfg.dropout, derive_seed(drop_key, seq_counter++)};
            DropoutPlan* dp = tcfg.dropout > 0 ? &drop : nullptr;
            TensorF logits;
            RoutingDecision dec;
            if (moe) {
                RouteInput route;
                route.policy = cfg.routing;
                if (domain_routed) {
                    dec = onehot_decision(train_domains[ix], cfg.experts);
                    route.domain = &dec;
                }
                logits = forward_moe(g, params, ex.input(), cfg, route, dp);
            } else {
                logits = forward_dense(g, params, ex.input(), cfg, dp);
            }
            std::vector<uint8_t> mask = tcfg.lm_objective
                                            ? std::vector<uint8_t>(ex.tokens.size() - 1, 1)
                                            : ex.loss_mask();
            auto loss = g.cross_entropy_masked(logits, ex.targets(), mask);
            int64_t mask_count = 0;
            for (uint8_t m : mask) mask_count += m;
            g.backward(loss, static_cast<double>(mask_count));
            loss_weighted += static_cast<double>(loss->data[0]) * static_cast<double>(mask_count);
            mask_total += mask_count;
            batch_tok += static_cast<int64_t>(ex.tokens.size()) - 1;
            ++cursor;
            if (cursor >= order.size()) {
                cursor = 0;
                ++epoch;
                reshuffle(epoch);
                epoch_end = true;
            }
        }
        const double batch_loss = loss_weighted / static_cast<double>(mask_total);
        if (!std::isfinite(batch_loss))
            throw Error("training diverged (non-finite loss) at step " + std::to_string(step));
        const double scale = 1.0 / static_cast<double>(mask_total);
        for (auto& t : trainable) {
            t->ensure_grad();
            for (float& gv : t->grad) gv = static_cast<float>(gv * scale);
        }
        clip_global_norm(trainable, tcfg.grad_clip);
        const double lr = lr_at(tcfg, step, total_steps);
        opt.step(trainable, lr);

        TrainLogEntry entry{step, lr, batch_loss, std::numeric_limits<double>::quiet_NaN()};
        const bool last = step + 1 == total_steps;
        if ((epoch_end || last) && !valid.empty()) {
            double vb = greedy_val_bleu(params, cfg, valid, tcfg.val_max_examples, valid_domains);
            entry.val_bleu = vb;
            if (vb > result.best_val_bleu) {
                result.best_val_bleu = vb;
                result.params = snapshot_params(params);
            }
        }
        result.log.push_back(entry);
        result.steps = step + 1;
    }
    if (result.params.list.empty()) {
        result.params = std::move(params);  // no validation: final parameters
        result.best_val_bleu = std::numeric_limits<double>::quiet_NaN();
    }
    return result;
}

Checkpoint train_expert(const Checkpoint& seed_ckpt, const std::vector<Triplet>& train,
                        const std::vector<Triplet>& valid, const TrainConfig& cfg) {
    ModelConfig mc = config_from_checkpoint(seed_ckpt);
    if (mc.experts != 1) throw ConfigError("train_expert: seed checkpoint must be dense");
    Params params = params_from_checkpoint(seed_ckpt, mc);
    TrainResult r = train_loop(std::move(params), mc, train, valid, cfg);
    nlohmann::json meta;
    meta["seed"] = cfg.seed;
    meta["train"] = cfg.to_json();
    meta["best_val_bleu"] = r.best_val_bleu;
    meta["steps"] = r.steps;
    return params_to_checkpoint(r.params, mc, meta);
}

std::vector<Checkpoint> branch_train(const Checkpoint& seed_ckpt,
                                     const std::vector<std::vector<Triplet>>& partitions,
                                     const std::vector<Triplet>& valid, const TrainConfig& cfg,
                                     int jobs) {
    std::vector<Checkpoint> out(partitions.size());
    if (jobs < 1) jobs = 1;
    std::vector<std::thread> workers;
    std::atomic<size_t> next{0};
    auto run = [&] {
        for (;;) {
            size_t i = next.fetch_add(1);
            if (i >= partitions.size()) break;
            out[i] = train_expert(seed_ckpt, partitions[i], valid, cfg);
            out[i].metadata["expert"] = i;
        }
    };
    if (jobs == 1) {
        run();
    } else {
        for (int w = 0; w < jobs; ++w) workers.emplace_back(run);
        for (auto& w : workers) w.join();
    }
    return out;
}

Checkpoint tune_router(const Checkpoint& moe_ckpt, const std::vector<Triplet>& train,
                       const std::vector<Triplet>& valid, const TrainConfig& cfg,
                       const ScopePredicate& scope, const ClusterModel* clusters,
                       const Embedder* embedder) {
    ModelConfig mc = config_from_checkpoint(moe_ckpt);
    if (mc.experts < 2) throw ConfigError("tune_router: checkpoint is not a MoE model");
    Params params = params_from_checkpoint(moe_ckpt, mc);
    std::vector<int> train_domains, valid_domains;
    if (mc.routing == RoutingPolicy::kDomain) {
        if (clusters && clusters->assignments.size() == train.size()) {
            train_domains = clusters->assignments;
        } else if (clusters && embedder) {
            for (const auto& t : train)
                train_domains.push_back(domain_decision_for(t, *clusters, *embedder).selected[0]);
        } else {
            throw ConfigError("tune_router: domain routing needs cluster assignments or an embedder");
        }
        if (clusters && embedder)
            for (const auto& t : valid)
                valid_domains.push_back(domain_decision_for(t, *clusters, *embedder).selected[0]);
        else if (!valid.empty())
            throw ConfigError("tune_router: domain routing needs an embedder for validation examples");
    }
    TrainResult r = train_loop(std::move(params), mc, train, valid, cfg, scope, train_domains, valid_domains);
    nlohmann::json meta = moe_ckpt.metadata;
    meta["tuned"] = cfg.to_json();
    meta["best_val_bleu"] = r.best_val_bleu;
    return params_to_checkpoint(r.params, mc, meta);
}

std::vector<PreferencePair> build_preference_pairs(const GenModel& generator,
                                                   const std::vector<Triplet>& prompts,
                                                   const SamplerConfig& sampler, int n_samples,
                                                   int n_rejected, int max_seq,
                                                   const ClusterModel* clusters,
                                                   const Embedder* embedder, int jobs) {
    std::vector<PreferencePair> pairs;
    for (size_t pi = 0; pi < prompts.size(); ++pi) {
        const Triplet& t = prompts[pi];
        auto prompt = prompt_tokens_truncated(t.context, t.term, max_seq / 2);
        SamplerConfig sc = sampler;
        sc.seed = derive_seed(sampler.seed, pi);
        sc.max_new_tokens = std::max(1, max_seq - static_cast<int>(prompt.size()));
        RoutingDecision dec;
        const RoutingDecision* dp = nullptr;
        if (generator.cfg.experts > 1 && generator.policy == RoutingPolicy::kDomain) {
            if (!clusters || !embedder)
                throw ConfigError("build_preference_pairs: domain-routed generator needs clusters and embedder");
            dec = domain_decision_for(t, *clusters, *embedder);
            dp = &dec;
        }
        CandidateSet cands = repeated_sample(generator, prompt, n_samples, sc, dp, jobs);
        // rerank by sequence log-likelihood, keep the top-n as the rejected pool
        std::vector<size_t> order(cands.candidates.size());
        std::iota(order.begin(), order.end(), size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
            return cands.candidates[a].loglik > cands.candidates[b].loglik;
        });
        std::vector<int> gold = tokenize(t.definition);
        gold.push_back(kEos);
        int taken = 0;
        for (size_t oi = 0; oi < order.size() && taken < n_rejected; ++oi) {
            const Candidate& c = cands.candidates[order[oi]];
            if (c.tokens == gold) continue;  // identical pairs carry no signal
            PreferencePair p;
            p.prompt = prompt;
            p.chosen = gold;
            p.rejected = c.tokens;
            pairs.push_back(std::move(p));
            ++taken;
        }
        // a prompt whose samples all equal the gold definition is skipped
    }
    return pairs;
}

namespace {

TensorPtr<float> score_node(Graph& g, const Params& params, const ModelConfig& cfg,
                            const std::vector<int>& prompt, const std::vector<int>& completion,
                            const DropoutPlan* dp) {
    std::vector<int> seq = prompt;
    seq.insert(seq.end(), completion.begin(), completion.end());
    if (static_cast<int>(seq.size()) > cfg.max_seq) seq.resize(static_cast<size_t>(cfg.max_seq));
    return forward_score(g, params, seq, cfg, dp);
}

}  // namespace

Checkpoint train_orm(const Checkpoint& seed_ckpt, const std::vector<PreferencePair>& pairs,
                     const TrainConfig& cfg) {
    if (pairs.empty()) throw ValueError("train_orm: no preference pairs");
    ModelConfig mc = config_from_checkpoint(seed_ckpt);
    if (mc.experts != 1) throw ConfigError("train_orm: scorer trunk must be dense");
    mc.scorer = true;
    Params params = init_params<float>(mc, cfg.seed);
    for (auto& [name, t] : params.list)
        if (seed_ckpt.has(name)) t->data = seed_ckpt.at(name)->data;
    // score_head stays zero-initialized: every pair starts at loss ln 2

    std::vector<TensorF> trainable;
    for (auto& [name, t] : params.list) {
        t->requires_grad = true;
        trainable.push_back(t);
    }
    AdamW opt(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);

    std::vector<size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), size_t{0});
    auto reshuffle = [&](int64_t epoch) {
        for (size_t i = order.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(rng_u64(derive_seed(cfg.seed, 0xF00 + static_cast<uint64_t>(epoch)), i) % i);
            std::swap(order[i - 1], order[j]);
        }
    };
    int64_t tokens_per_epoch = 0;
    for (const auto& p : pairs)
        tokens_per_epoch += static_cast<int64_t>(2 * p.prompt.size() + p.chosen.size() + p.rejected.size());
    const int64_t steps_per_epoch = std::max<int64_t>(1, (tokens_per_epoch + cfg.batch_tokens - 1) / cfg.batch_tokens);
    const int64_t total_steps = cfg.max_steps > 0 ? cfg.max_steps : steps_per_epoch * std::max(cfg.epochs, 1);

    int64_t epoch = 0;
    size_t cursor = 0;
    reshuffle(0);
    uint64_t seq_counter = 0;
    const uint64_t drop_key = derive_seed(cfg.seed, 0x0D41u);
    for (int64_t step = 0; step < total_steps; ++step) {
        for (auto& t : trainable) t->zero_grad();
        int64_t batch_tok = 0;
        int64_t batch_pairs = 0;
        double loss_sum = 0.0;
        while (batch_tok < cfg.batch_tokens) {
            const PreferencePair& p = pairs[order[cursor]];
            Graph g;
            DropoutPlan drop{cfg.dropout, derive_seed(drop_key, seq_counter++)};
            DropoutPlan* dp = cfg.dropout > 0 ? &drop : nullptr;
            auto rw = score_node(g, params, mc, p.prompt, p.chosen, dp);
            auto rl = score_node(g, params, mc, p.prompt, p.rejected, dp);
            auto diff = g.add(rw, g.mul_const(rl, -1.0));
            auto loss = g.logistic_loss(diff);
            g.backward(loss);
            loss_sum += loss->data[0];
            ++batch_pairs;
            batch_tok += static_cast<int64_t>(2 * p.prompt.size() + p.chosen.size() + p.rejected.size());
            ++cursor;
            if (cursor >= order.size()) {
                cursor = 0;
                ++epoch;
                reshuffle(epoch);
            }
        }
        const double batch_loss = loss_sum / static_cast<double>(batch_pairs);
        if (!std::isfinite(batch_loss))
            throw Error("ORM training diverged (non-finite loss) at step " + std::to_string(step));
        const double scale = 1.0 / static_cast<double>(batch_pairs);
        for (auto& t : trainable) {
            t->ensure_grad();
            for (float& gv : t->grad) gv = static_cast<float>(gv * scale);
        }
        clip_global_norm(trainable, cfg.grad_clip);
        opt.step(trainable, lr_at(cfg, step, total_steps));
    }
    nlohmann::json meta;
    meta["seed"] = cfg.seed;
    meta["train"] = cfg.to_json();
    meta["pairs"] = pairs.size();
    return params_to_checkpoint(params, mc, meta);
}

double orm_score(const Params& params, const ModelConfig& cfg, const std::vector<int>& prompt,
                 const std::vector<int>& completion) {
    Graph g;
    return static_cast<double>(score_node(g, params, cfg, prompt, completion, nullptr)->data[0]);
}

double evaluate_nll(const Params& params, const ModelConfig& cfg, const std::vector<Triplet>& data) {
    if (data.empty()) throw ValueError("evaluate_nll: empty dataset");
    double weighted = 0.0;
    int64_t mask_total = 0;
    for (const auto& t : data) {
        PromptedExample ex = make_prompted_example(t, cfg.max_seq);
        Graph g;
        auto logits = forward_dense(g, params, ex.input(), cfg);
        auto mask = ex.loss_mask();
        auto loss = g.cross_entropy_masked(logits, ex.targets(), mask);
        int64_t m = 0;
        for (uint8_t b : mask) m += b;
        weighted += static_cast<double>(loss->data[0]) * static_cast<double>(m);
        mask_total += m;
    }
    return weighted / static_cast<double>(mask_total);
}

std::string format_train_log(const std::vector<TrainLogEntry>& log) {
    std::ostringstream os;
    os << "step\tlr\tloss\tval_bleu\n";
    os.setf(std::ios::fixed);
    for (const auto& e : log) {
        os.precision(8);
        os << e.step << "\t" << e.lr << "\t";
        os.precision(6);
        os << e.loss << "\t";
        if (std::isnan(e.val_bleu))
            os << "-";
        else
            os << e.val_bleu;
        os << "\n";
    }
    return os.str();
}

}  // namespace lmlx
