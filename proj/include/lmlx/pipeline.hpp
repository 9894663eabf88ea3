#pragma once

// End-to-end drivers: seed-model bootstrap, the specialize-then-synthesize
// pipeline per partition policy, the ablation studies, BoN curves and the
// reward-model pipeline. The CLI subcommands are thin wrappers over these.

#include <optional>
#include <string>
#include <vector>

#include "lmlx/clustering.hpp"
#include "lmlx/merge.hpp"
#include "lmlx/selection.hpp"
#include "lmlx/synth.hpp"
#include "lmlx/training.hpp"

namespace lmlx {

struct PipelineConfig {
    ModelConfig model;
    TrainConfig seed_train;  // full-sequence LM bootstrap of the seed model
    TrainConfig branch;      // expert fine-tuning; max_steps is the TOTAL branch budget
    TrainConfig tune;        // post-merge fine-tuning
    SamplerConfig sampler;
    KMeansOptions kmeans;
    int n_experts = 4;
    uint64_t cluster_seed = 42;
    std::vector<uint64_t> run_seeds = {21, 42, 84};
    RouterInit router_init = RouterInit::kSmallNormal;
    std::string tune_scope = "gates+experts";
    int eval_max_examples = 48;  // test-set cap for ablation scoring
    int jobs = 1;

    PipelineConfig();
    nlohmann::json to_json() const;
    static PipelineConfig from_json(const nlohmann::json& j);
    // Reads the file when non-empty, otherwise the LMLX_CONFIG environment
    // variable, otherwise returns defaults.
    static PipelineConfig load(const std::string& path);
};

// Cluster model persistence: checkpoint file with a `centroids` tensor plus a
// JSONL sidecar of per-example assignments.
void save_cluster_model(const std::string& path, const ClusterModel& model,
                        const TfidfModel* tfidf = nullptr, const std::string& embed_ckpt_path = "");
struct LoadedClusterModel {
    ClusterModel model;
    std::optional<TfidfModel> tfidf;
    std::string embed_ckpt_path;
};
LoadedClusterModel load_cluster_model(const std::string& path);

// Randomly initialized dense model briefly pretrained with the plain LM
// objective on the full corpus; the shared ancestor of every expert.
Checkpoint make_seed_checkpoint(const std::vector<Triplet>& train, const PipelineConfig& cfg);

Embedder make_embedder_for_policy(PartitionPolicy policy, const std::vector<Triplet>& train,
                                  std::shared_ptr<Params> seed_params, const ModelConfig& cfg);

// Mean embedding of each part, for partitions that did not produce centroids.
void fill_centroids(ClusterModel& model, const EmbeddingMatrix& x);

struct PipelineArtifacts {
    Checkpoint model;  // dense for the no-split policy, tuned MoE otherwise
    ClusterModel clusters;
    PartitionPolicy policy = PartitionPolicy::kNone;
    std::shared_ptr<Params> seed_params;  // embedder backing store
    Embedder embedder;
};

// Branch-train / merge / tune with an equal total optimizer-step budget across
// policies: N experts get branch.max_steps/N steps each, then tune.max_steps
// of post-merge tuning (the no-split policy trains the dense model for the
// same two budgets back to back).
PipelineArtifacts run_partition_pipeline(PartitionPolicy policy, const Checkpoint& seed_ckpt,
                                         const std::vector<Triplet>& train,
                                         const std::vector<Triplet>& valid, const PipelineConfig& cfg,
                                         uint64_t run_seed, int n_experts_override = 0);

struct EvalScores {
    double bleu = 0.0;
    double rouge = 0.0;
};
EvalScores eval_on_test(const PipelineArtifacts& arts, const std::vector<Triplet>& test,
                        const PipelineConfig& cfg);

// Greedy decode of a MoE checkpoint under an explicit routing policy.
EvalScores eval_checkpoint(const Checkpoint& ckpt, RoutingPolicy policy, const ClusterModel* clusters,
                           const Embedder* embedder, const std::vector<Triplet>& test,
                           const PipelineConfig& cfg);

// Ablation drivers; each returns a finished TSV.
struct PartitionAblation {
    std::vector<PartitionPolicy> policies;
    std::vector<std::vector<EvalScores>> per_seed;  // [policy][seed], seeds in cfg order
    std::string tsv;
};
PartitionAblation run_partition_ablation(const Checkpoint& seed_ckpt, const std::vector<Triplet>& train,
                                         const std::vector<Triplet>& valid,
                                         const std::vector<Triplet>& test, const PipelineConfig& cfg);
std::string ablate_partition(const Checkpoint& seed_ckpt, const std::vector<Triplet>& train,
                             const std::vector<Triplet>& valid, const std::vector<Triplet>& test,
                             const PipelineConfig& cfg);
std::string ablate_routing(const Checkpoint& seed_ckpt, const std::vector<Triplet>& train,
                           const std::vector<Triplet>& valid, const std::vector<Triplet>& test,
                           const PipelineConfig& cfg);
std::string ablate_experts(const Checkpoint& seed_ckpt, const std::vector<Triplet>& train,
                           const std::vector<Triplet>& valid, const std::vector<Triplet>& test,
                           const PipelineConfig& cfg, const std::vector<int>& expert_grid);

struct BonRun {
    std::vector<CandidateSet> candidates;
    std::vector<std::string> references;
    BoNResult result;
};
BonRun run_bon(const PipelineArtifacts& arts, const std::vector<Triplet>& test, int n_candidates,
               const Verifier& verifier, const PipelineConfig& cfg, uint64_t sample_seed,
               int max_prompts);

std::string bon_curve_tsv(const std::vector<BoNResult>& per_seed);

// 1:32 sampling / top-8 rejected pool by default.
Checkpoint run_orm_pipeline(const Checkpoint& seed_ckpt, const PipelineArtifacts& generator,
                            const std::vector<Triplet>& train, const PipelineConfig& cfg,
                            int n_samples = 32, int n_rejected = 8, int max_prompts = 64);

}  // namespace lmlx
