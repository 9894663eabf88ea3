#pragma once

// Supervised fine-tuning of dense experts, post-merge router/expert tuning,
// reward-model training, and the optimizer/schedule machinery.

#include <functional>
#include <string>
#include <vector>

#include "lmlx/clustering.hpp"
#include "lmlx/corpus.hpp"
#include "lmlx/decoding.hpp"
#include "lmlx/model.hpp"

namespace lmlx {

struct TrainConfig {
    int epochs = 3;
    int max_steps = 0;  // > 0 caps the optimizer-step count (equal-compute ablations)
    int batch_tokens = 1024;
    double max_lr = 1e-3;
    double min_lr = 0.0;  // cosine decays to this
    double warmup_ratio = 0.1;
    double weight_decay = 0.01;
    double grad_clip = 1.0;
    double dropout = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    uint64_t seed = 42;
    int val_max_examples = 64;
    bool lm_objective = false;  // unmasked next-token loss (seed-model pretraining)

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

// Linear warmup from 0 to max_lr, then cosine decay to min_lr.
double lr_at(const TrainConfig& cfg, int64_t step, int64_t total_steps);

// Decoupled-decay AdamW; decay applies to rank>=2 tensors only. With zero
// gradient and fresh state a step multiplies each decayed parameter by
// exactly (1 - lr*wd).
class AdamW {
public:
    AdamW(double beta1, double beta2, double eps, double weight_decay)
        : beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {}

    void step(const std::vector<TensorF>& params, double lr);

private:
    double beta1_, beta2_, eps_, wd_;
    int64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// Scales all gradients so their global L2 norm is at most max_norm.
double clip_global_norm(const std::vector<TensorF>& params, double max_norm);

using ScopePredicate = std::function<bool(const std::string&)>;
ScopePredicate scope_all();
ScopePredicate scope_gates();
ScopePredicate scope_gates_and_experts();
ScopePredicate scope_from_string(const std::string& s);

struct TrainLogEntry {
    int64_t step;
    double lr;
    double loss;
    double val_bleu;  // NaN when not evaluated at this step
};

struct TrainResult {
    Params params;           // best-validation-BLEU snapshot
    double best_val_bleu = 0.0;
    int64_t steps = 0;
    std::vector<TrainLogEntry> log;
};

// Core loop shared by expert training, router tuning and seed pretraining.
// domain labels are consulted only for domain-policy MoE models; frozen
// parameters (outside scope) are left bit-identical.
TrainResult train_loop(Params params, const ModelConfig& cfg, const std::vector<Triplet>& train,
                       const std::vector<Triplet>& valid, const TrainConfig& tcfg,
                       const ScopePredicate& scope = scope_all(),
                       const std::vector<int>& train_domains = {},
                       const std::vector<int>& valid_domains = {});

// Branch phase: one dense expert fine-tuned from the seed checkpoint.
Checkpoint train_expert(const Checkpoint& seed_ckpt, const std::vector<Triplet>& train,
                        const std::vector<Triplet>& valid, const TrainConfig& cfg);

// Independent expert training per partition; order-independent outputs.
std::vector<Checkpoint> branch_train(const Checkpoint& seed_ckpt,
                                     const std::vector<std::vector<Triplet>>& partitions,
                                     const std::vector<Triplet>& valid, const TrainConfig& cfg,
                                     int jobs = 1);

// Post-merge fine-tuning of the gates (and optionally expert FFNs).
Checkpoint tune_router(const Checkpoint& moe_ckpt, const std::vector<Triplet>& train,
                       const std::vector<Triplet>& valid, const TrainConfig& cfg,
                       const ScopePredicate& scope, const ClusterModel* clusters = nullptr,
                       const Embedder* embedder = nullptr);

// Preference pair for reward-model training: prompt plus chosen/rejected
// completion token sequences (completions end with eos).
struct PreferencePair {
    std::vector<int> prompt;
    std::vector<int> chosen;
    std::vector<int> rejected;
};

// Builds pairs per the 1:32 protocol: sample n_samples candidates, rerank by
// sequence log-likelihood, keep the top n_rejected as the rejected pool.
std::vector<PreferencePair> build_preference_pairs(const GenModel& generator,
                                                   const std::vector<Triplet>& prompts,
                                                   const SamplerConfig& sampler, int n_samples,
                                                   int n_rejected, int max_seq,
                                                   const ClusterModel* clusters = nullptr,
                                                   const Embedder* embedder = nullptr, int jobs = 1);

// Pairwise logistic objective -log sigmoid(r_w - r_l) over a scorer trunk with
// a zero-initialized scalar head.
Checkpoint train_orm(const Checkpoint& seed_ckpt, const std::vector<PreferencePair>& pairs,
                     const TrainConfig& cfg);

double orm_score(const Params& params, const ModelConfig& cfg, const std::vector<int>& prompt,
                 const std::vector<int>& completion);

// Mean masked NLL of a dataset under a dense model (perplexity = exp of this).
double evaluate_nll(const Params& params, const ModelConfig& cfg, const std::vector<Triplet>& data);

std::string format_train_log(const std::vector<TrainLogEntry>& log);

}  // namespace lmlx
