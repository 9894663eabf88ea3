#include "lmlx/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "lmlx/rng.hpp"

namespace lmlx {

PipelineConfig::PipelineConfig() {
    model.vocab = kVocabSize;
    model.layers = 2;
    model.dim = 48;
    model.heads = 4;
    model.ffn = 96;
    model.max_seq = 128;

    seed_train.lm_objective = true;
    seed_train.max_steps = 240;
    seed_train.batch_tokens = 1024;
    seed_train.max_lr = 2e-3;
    seed_train.min_lr = 2e-4;
    seed_train.dropout = 0.0;
    seed_train.seed = 42;

    branch.max_steps = 400;  // total budget across experts
    branch.batch_tokens = 1024;
    branch.max_lr = 1.5e-3;
    branch.min_lr = 1e-4;
    branch.dropout = 0.05;
    branch.val_max_examples = 16;

    tune.max_steps = 100;
    tune.batch_tokens = 1024;
    tune.max_lr = 5e-4;
    tune.min_lr = 5e-5;
    tune.dropout = 0.05;
    tune.val_max_examples = 16;

    sampler.max_new_tokens = 56;
    jobs = 4;
}

nlohmann::json PipelineConfig::to_json() const {
    nlohmann::json j;
    j["model"] = model.to_json();
    j["seed_train"] = seed_train.to_json();
    j["branch"] = branch.to_json();
    j["tune"] = tune.to_json();
    j["sampler"] = {{"temperature", sampler.temperature},
                    {"top_k", sampler.top_k},
                    {"top_p", sampler.top_p},
                    {"repetition_penalty", sampler.repetition_penalty},
                    {"max_new_tokens", sampler.max_new_tokens},
                    {"seed", sampler.seed}};
    j["kmeans"] = {{"max_iter", kmeans.max_iter}, {"tol", kmeans.tol}, {"balanced", kmeans.balanced}};
    j["n_experts"] = n_experts;
    j["cluster_seed"] = cluster_seed;
    j["run_seeds"] = run_seeds;
    j["router_init"] = router_init_name(router_init);
    j["tune_scope"] = tune_scope;
    j["eval_max_examples"] = eval_max_examples;
    j["jobs"] = jobs;
    return j;
}

PipelineConfig PipelineConfig::from_json(const nlohmann::json& j) {
    PipelineConfig c;
    if (j.contains("model")) c.model = ModelConfig::from_json(j["model"]);
    if (j.contains("seed_train")) c.seed_train = TrainConfig::from_json(j["seed_train"]);
    if (j.contains("branch")) c.branch = TrainConfig::from_json(j["branch"]);
    if (j.contains("tune")) c.tune = TrainConfig::from_json(j["tune"]);
    if (j.contains("sampler")) {
        const auto& s = j["sampler"];
        c.sampler.temperature = s.value("temperature", c.sampler.temperature);
        c.sampler.top_k = s.value("top_k", c.sampler.top_k);
        c.sampler.top_p = s.value("top_p", c.sampler.top_p);
        c.sampler.repetition_penalty = s.value("repetition_penalty", c.sampler.repetition_penalty);
        c.sampler.max_new_tokens = s.value("max_new_tokens", c.sampler.max_new_tokens);
        c.sampler.seed = s.value("seed", c.sampler.seed);
        c.sampler.validate();
    }
    if (j.contains("kmeans")) {
        const auto& k = j["kmeans"];
        c.kmeans.max_iter = k.value("max_iter", c.kmeans.max_iter);
        c.kmeans.tol = k.value("tol", c.kmeans.tol);
        c.kmeans.balanced = k.value("balanced", c.kmeans.balanced);
    }
    c.n_experts = j.value("n_experts", c.n_experts);
    c.cluster_seed = j.value("cluster_seed", c.cluster_seed);
    if (j.contains("run_seeds")) c.run_seeds = j["run_seeds"].get<std::vector<uint64_t>>();
    if (j.contains("router_init")) c.router_init = router_init_from_string(j["router_init"].get<std::string>());
    c.tune_scope = j.value("tune_scope", c.tune_scope);
    c.eval_max_examples = j.value("eval_max_examples", c.eval_max_examples);
    c.jobs = j.value("jobs", c.jobs);
    return c;
}

PipelineConfig PipelineConfig::load(const std::string& path) {
    std::string p = path;
    if (p.empty()) {
        const char* env = std::getenv("LMLX_CONFIG");
        if (env) p = env;
    }
    if (p.empty()) return PipelineConfig();
    std::ifstream f(p);
    if (!f) throw Error("cannot open config file: " + p);
    nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config file is not valid JSON: " + p);
    return from_json(j);
}

void save_cluster_model(const std::string& path, const ClusterModel& model, const TfidfModel* tfidf,
                        const std::string& embed_ckpt_path) {
    Checkpoint ckpt;
    ckpt.metadata["kind"] = "cluster-model";
    ckpt.metadata["n"] = model.n;
    ckpt.metadata["seed"] = model.seed;
    ckpt.metadata["method"] = embed_method_name(model.method);
    if (tfidf) ckpt.metadata["tfidf"] = tfidf->to_json();
    if (!embed_ckpt_path.empty()) ckpt.metadata["embed_checkpoint"] = embed_ckpt_path;
    if (!model.centroids.empty()) {
        auto t = make_tensor<float>({static_cast<int64_t>(model.centroids.size()), model.dim});
        for (size_t c = 0; c < model.centroids.size(); ++c)
            std::copy(model.centroids[c].begin(), model.centroids[c].end(),
                      t->data.begin() + static_cast<int64_t>(c) * model.dim);
        ckpt.add("centroids", t);
    }
    write_checkpoint(path, ckpt);
    std::ofstream side(path + ".assignments.jsonl");
    if (!side) throw Error("cannot write assignments sidecar for " + path);
    for (size_t i = 0; i < model.assignments.size(); ++i)
        side << nlohmann::json{{"index", i}, {"cluster", model.assignments[i]}}.dump() << "\n";
}

LoadedClusterModel load_cluster_model(const std::string& path) {
    Checkpoint ckpt = read_checkpoint(path);
    if (ckpt.metadata.value("kind", "") != "cluster-model")
        throw FormatError("not a cluster-model checkpoint: " + path);
    LoadedClusterModel out;
    out.model.n = ckpt.metadata.at("n").get<int>();
    out.model.seed = ckpt.metadata.value("seed", 42u);
    out.model.method = embed_method_from_string(ckpt.metadata.value("method", "tfidf"));
    if (ckpt.metadata.contains("tfidf")) out.tfidf = TfidfModel::from_json(ckpt.metadata["tfidf"]);
    out.embed_ckpt_path = ckpt.metadata.value("embed_checkpoint", "");
    if (ckpt.has("centroids")) {
        TensorF t = ckpt.at("centroids");
        out.model.dim = t->dims[1];
        for (int64_t c = 0; c < t->dims[0]; ++c)
            out.model.centroids.emplace_back(t->data.begin() + c * t->dims[1],
                                             t->data.begin() + (c + 1) * t->dims[1]);
    }
    std::ifstream side(path + ".assignments.jsonl");
    if (side) {
        std::string line;
        while (std::getline(side, line)) {
            if (line.empty()) continue;
            auto j = nlohmann::json::parse(line, nullptr, false);
            if (j.is_discarded()) throw FormatError("bad assignments sidecar line for " + path);
            out.model.assignments.push_back(j.at("cluster").get<int>());
        }
    }
    return out;
}

Checkpoint make_seed_checkpoint(const std::vector<Triplet>& train, const PipelineConfig& cfg) {
    Params params = init_params<float>(cfg.model, cfg.seed_train.seed);
    TrainResult r = train_loop(std::move(params), cfg.model, train, {}, cfg.seed_train);
    nlohmann::json meta;
    meta["name"] = "seed";
    meta["seed"] = cfg.seed_train.seed;
    meta["steps"] = r.steps;
    return params_to_checkpoint(r.params, cfg.model, meta);
}

Embedder make_embedder_for_policy(PartitionPolicy policy, const std::vector<Triplet>& train,
                                  std::shared_ptr<Params> seed_params, const ModelConfig& cfg) {
    if (policy == PartitionPolicy::kLexical) return Embedder::tfidf(fit_tfidf(train));
    return Embedder::mean_pool(std::move(seed_params), cfg);
}

void fill_centroids(ClusterModel& model, const EmbeddingMatrix& x) {
    if (static_cast<int64_t>(model.assignments.size()) != x.rows)
        throw ValueError("fill_centroids: assignment/embedding row mismatch");
    model.dim = x.dim;
    model.method = x.method;
    model.centroids.assign(static_cast<size_t>(model.n), {});
    std::vector<std::vector<double>> acc(static_cast<size_t>(model.n),
                                         std::vector<double>(static_cast<size_t>(x.dim), 0.0));
    std::vector<int64_t> count(static_cast<size_t>(model.n), 0);
    for (int64_t i = 0; i < x.rows; ++i) {
        int c = model.assignments[static_cast<size_t>(i)];
        ++count[static_cast<size_t>(c)];
        const float* r = x.row_ptr(i);
        for (int64_t j = 0; j < x.dim; ++j) acc[static_cast<size_t>(c)][static_cast<size_t>(j)] += r[j];
    }
    for (int c = 0; c < model.n; ++c) {
        std::vector<float> v(static_cast<size_t>(x.dim), 0.0f);
        if (count[static_cast<size_t>(c)] > 0)
            for (int64_t j = 0; j < x.dim; ++j)
                v[static_cast<size_t>(j)] = static_cast<float>(acc[static_cast<size_t>(c)][static_cast<size_t>(j)] /
                                                               static_cast<double>(count[static_cast<size_t>(c)]));
        l2_normalize(v);
        model.centroids[static_cast<size_t>(c)] = std::move(v);
    }
}

PipelineArtifacts run_partition_pipeline(PartitionPolicy policy, const Checkpoint& seed_ckpt,
                                         const std::vector<Triplet>& train,
                                         const std::vector<Triplet>& valid, const PipelineConfig& cfg,
                                         uint64_t run_seed, int n_experts_override) {
    const int n = policy == PartitionPolicy::kNone
                      ? 1
                      : (n_experts_override > 0 ? n_experts_override : cfg.n_experts);
    PipelineArtifacts arts;
    arts.policy = policy;
    ModelConfig seed_cfg = config_from_checkpoint(seed_ckpt);
    arts.seed_params = std::make_shared<Params>(params_from_checkpoint(seed_ckpt, seed_cfg));
    arts.embedder = make_embedder_for_policy(policy, train, arts.seed_params, seed_cfg);

    PartitionResult part =
        partition(train, n == 1 ? PartitionPolicy::kNone : policy, n, cfg.cluster_seed,
                  &arts.embedder, cfg.kmeans);
    if (n > 1 && part.model.centroids.empty())
        fill_centroids(part.model, arts.embedder.embed_all(train));
    arts.clusters = part.model;

    TrainConfig branch_cfg = cfg.branch;
    branch_cfg.max_steps = std::max(1, cfg.branch.max_steps / n);
    branch_cfg.seed = run_seed;
    std::vector<Checkpoint> experts = branch_train(seed_ckpt, part.parts, valid, branch_cfg, cfg.jobs);

    TrainConfig tune_cfg = cfg.tune;
    tune_cfg.seed = derive_seed(run_seed, 0x717e);
    if (n == 1) {
        // the no-split baseline consumes the same post-merge budget as extra
        // dense training so total optimizer steps stay equal across policies
        ModelConfig mc = config_from_checkpoint(experts[0]);
        Params p = params_from_checkpoint(experts[0], mc);
        TrainResult r = train_loop(std::move(p), mc, train, valid, tune_cfg);
        nlohmann::json meta = experts[0].metadata;
        meta["policy"] = partition_policy_name(policy);
        arts.model = params_to_checkpoint(r.params, mc, meta);
        return arts;
    }

    MergeOptions mo;
    mo.router_init = cfg.router_init;
    mo.seed = derive_seed(run_seed, 0x3e);
    mo.routing = RoutingPolicy::kDomain;
    if (cfg.router_init == RouterInit::kCentroidSeeded) mo.centroids = &arts.clusters.centroids;
    Checkpoint merged = merge(experts, mo);
    arts.model = tune_router(merged, train, valid, tune_cfg, scope_from_string(cfg.tune_scope),
                             &arts.clusters, &arts.embedder);
    arts.model.metadata["policy"] = partition_policy_name(policy);
    return arts;
}

namespace {

RoutingDecision decision_for_eval(const PipelineArtifacts& arts, const Triplet& t) {
    return domain_decision_for(t, arts.clusters, arts.embedder);
}

}  // namespace

EvalScores eval_on_test(const PipelineArtifacts& arts, const std::vector<Triplet>& test,
                        const PipelineConfig& cfg) {
    ModelConfig mc = config_from_checkpoint(arts.model);
    Params params = params_from_checkpoint(arts.model, mc);
    params.set_requires_grad(false);
    GenModel gm{mc, &params, mc.routing};
    SamplerConfig sc = cfg.sampler;
    sc.temperature = 0.0;  // ablation tables use deterministic greedy decoding
    const size_t limit = std::min(test.size(), static_cast<size_t>(cfg.eval_max_examples));
    EvalScores scores;
    for (size_t i = 0; i < limit; ++i) {
        auto prompt = prompt_tokens_truncated(test[i].context, test[i].term, mc.max_seq / 2);
        sc.max_new_tokens = mc.max_seq - static_cast<int>(prompt.size());
        RoutingDecision dec;
        const RoutingDecision* dp = nullptr;
        if (mc.experts > 1 && mc.routing == RoutingPolicy::kDomain) {
            dec = decision_for_eval(arts, test[i]);
            dp = &dec;
        }
        Generation g = generate(gm, prompt, sc, dp);
        scores.bleu += bleu(g.text, test[i].definition);
        scores.rouge += rouge_l(g.text, test[i].definition);
    }
    scores.bleu /= static_cast<double>(limit);
    scores.rouge /= static_cast<double>(limit);
    return scores;
}

EvalScores eval_checkpoint(const Checkpoint& ckpt, RoutingPolicy policy, const ClusterModel* clusters,
                           const Embedder* embedder, const std::vector<Triplet>& test,
                           const PipelineConfig& cfg) {
    ModelConfig mc = config_from_checkpoint(ckpt);
    mc.routing = policy;
    Params params = params_from_checkpoint(ckpt, mc);
    params.set_requires_grad(false);
    GenModel gm{mc, &params, policy};
    SamplerConfig sc = cfg.sampler;
    sc.temperature = 0.0;
    const size_t limit = std::min(test.size(), static_cast<size_t>(cfg.eval_max_examples));
    EvalScores scores;
    for (size_t i = 0; i < limit; ++i) {
        auto prompt = prompt_tokens_truncated(test[i].context, test[i].term, mc.max_seq / 2);
        sc.max_new_tokens = mc.max_seq - static_cast<int>(prompt.size());
        RoutingDecision dec;
        const RoutingDecision* dp = nullptr;
        if (mc.experts > 1 && policy == RoutingPolicy::kDomain) {
            if (!clusters || !embedder) throw ConfigError("eval_checkpoint: domain routing needs clusters");
            dec = domain_decision_for(test[i], *clusters, *embedder);
            dp = &dec;
        }
        Generation g = generate(gm, prompt, sc, dp);
        scores.bleu += bleu(g.text, test[i].definition);
        scores.rouge += rouge_l(g.text, test[i].definition);
    }
    scores.bleu /= static_cast<double>(limit);
    scores.rouge /= static_cast<double>(limit);
    return scores;
}

namespace {

std::string fmt4(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4f", x);
    return buf;
}

std::string agg_row(const std::string& label, const std::vector<EvalScores>& per_seed) {
    std::vector<double> bleus, rouges;
    for (const auto& s : per_seed) {
        bleus.push_back(s.bleu);
        rouges.push_back(s.rouge);
    }
    MeanStdAgg b = aggregate_runs(bleus), r = aggregate_runs(rouges);
    return label + "\t" + fmt4(b.mean) + "\t" + fmt4(b.stddev) + "\t" + fmt4(r.mean) + "\t" +
           fmt4(r.stddev);
}

}  // namespace

PartitionAblation run_partition_ablation(const Checkpoint& seed_ckpt, const std::vector<Triplet>& train,
                                         const std::vector<Triplet>& valid,
                                         const std::vector<Triplet>& test, const PipelineConfig& cfg) {
    PartitionAblation out;
    out.policies = {PartitionPolicy::kNone, PartitionPolicy::kRandom, PartitionPolicy::kLexical,
                    PartitionPolicy::kSemantic};
    std::ostringstream os;
    os << "policy\tbleu_mean\tbleu_std\trouge_mean\trouge_std\n";
    for (PartitionPolicy policy : out.policies) {
        std::vector<EvalScores> per_seed;
        for (uint64_t seed : cfg.run_seeds) {
            PipelineArtifacts arts = run_partition_pipeline(policy, seed_ckpt, train, valid, cfg, seed);
            per_seed.push_back(eval_on_test(arts, test, cfg));
        }
        os << agg_row(partition_policy_name(policy), per_seed) << "\n";
        out.per_seed.push_back(std::move(per_seed));
    }
    out.tsv = os.str();
    return out;
}

std::string ablate_partition(const Checkpoint& seed_ckpt, const std::vector<Triplet>& train,
                             const std::vector<Triplet>& valid, const std::vector<Triplet>& test,
                             const PipelineConfig& cfg) {
    return run_partition_ablation(seed_ckpt, train, valid, test, cfg).tsv;
}

std::string ablate_routing(const Checkpoint& seed_ckpt, const std::vector<Triplet>& train,
                           const std::vector<Triplet>& valid, const std::vector<Triplet>& test,
                           const PipelineConfig& cfg) {
    // One semantic branch-train + merge per seed with gates tuned under the
    // top-2 token policy, evaluated under every routing policy.
    std::vector<std::vector<EvalScores>> per_policy(5);
    const std::vector<RoutingPolicy> policies = {RoutingPolicy::kTop1Token, RoutingPolicy::kTop2Token,
                                                 RoutingPolicy::kSoftSequence, RoutingPolicy::kHardSequence,
                                                 RoutingPolicy::kDomain};
    for (uint64_t seed : cfg.run_seeds) {
        ModelConfig seed_cfg = config_from_checkpoint(seed_ckpt);
        auto seed_params = std::make_shared<Params>(params_from_checkpoint(seed_ckpt, seed_cfg));
        Embedder embedder = make_embedder_for_policy(PartitionPolicy::kSemantic, train, seed_params, seed_cfg);
        PartitionResult part =
            partition(train, PartitionPolicy::kSemantic, cfg.n_experts, cfg.cluster_seed, &embedder, cfg.kmeans);
        TrainConfig branch_cfg = cfg.branch;
        branch_cfg.max_steps = std::max(1, cfg.branch.max_steps / cfg.n_experts);
        branch_cfg.seed = seed;
        std::vector<Checkpoint> experts = branch_train(seed_ckpt, part.parts, valid, branch_cfg, cfg.jobs);
        MergeOptions mo;
        mo.router_init = cfg.router_init;
        mo.seed = derive_seed(seed, 0x3e);
        mo.routing = RoutingPolicy::kTop2Token;
        Checkpoint merged = merge(experts, mo);
        TrainConfig tune_cfg = cfg.tune;
        tune_cfg.seed = derive_seed(seed, 0x717e);
        Checkpoint tuned = tune_router(merged, train, valid, tune_cfg, scope_from_string(cfg.tune_scope),
                                       &part.model, &embedder);
        for (size_t pi = 0; pi < policies.size(); ++pi)
            per_policy[pi].push_back(eval_checkpoint(tuned, policies[pi], &part.model, &embedder, test, cfg));
    }
    std::ostringstream os;
    os << "routing\tbleu_mean\tbleu_std\trouge_mean\trouge_std\n";
    for (size_t pi = 0; pi < policies.size(); ++pi)
        os << agg_row(routing_policy_name(policies[pi]), per_policy[pi]) << "\n";
    return os.str();
}

std::string ablate_experts(const Checkpoint& seed_ckpt, const std::vector<Triplet>& train,
                           const std::vector<Triplet>& valid, const std::vector<Triplet>& test,
                           const PipelineConfig& cfg, const std::vector<int>& expert_grid) {
    std::ostringstream os;
    os << "experts\tbleu_mean\tbleu_std\trouge_mean\trouge_std\n";
    for (int n : expert_grid) {
        std::vector<EvalScores> per_seed;
        for (uint64_t seed : cfg.run_seeds) {
            PartitionPolicy policy = n == 1 ? PartitionPolicy::kNone : PartitionPolicy::kSemantic;
            PipelineArtifacts arts = run_partition_pipeline(policy, seed_ckpt, train, valid, cfg, seed, n);
            per_seed.push_back(eval_on_test(arts, test, cfg));
        }
        os << agg_row(std::to_string(n), per_seed) << "\n";
    }
    return os.str();
}

BonRun run_bon(const PipelineArtifacts& arts, const std::vector<Triplet>& test, int n_candidates,
               const Verifier& verifier, const PipelineConfig& cfg, uint64_t sample_seed,
               int max_prompts) {
    ModelConfig mc = config_from_checkpoint(arts.model);
    Params params = params_from_checkpoint(arts.model, mc);
    params.set_requires_grad(false);
    GenModel gm{mc, &params, mc.routing};
    BonRun run;
    const size_t limit = std::min(test.size(), static_cast<size_t>(max_prompts));
    for (size_t i = 0; i < limit; ++i) {
        auto prompt = prompt_tokens_truncated(test[i].context, test[i].term, mc.max_seq / 2);
        SamplerConfig sc = cfg.sampler;
        sc.seed = derive_seed(sample_seed, i);
        sc.max_new_tokens = mc.max_seq - static_cast<int>(prompt.size());
        RoutingDecision dec;
        const RoutingDecision* dp = nullptr;
        if (mc.experts > 1 && mc.routing == RoutingPolicy::kDomain) {
            dec = decision_for_eval(arts, test[i]);
            dp = &dec;
        }
        run.candidates.push_back(repeated_sample(gm, prompt, n_candidates, sc, dp, cfg.jobs));
        run.references.push_back(test[i].definition);
    }
    run.result = bon_curve(run.candidates, run.references, verifier, default_bon_grid(n_candidates),
                           oracle_bleu());
    return run;
}

std::string bon_curve_tsv(const std::vector<BoNResult>& per_seed) {
    if (per_seed.empty()) throw ValueError("bon_curve_tsv: no runs");
    std::ostringstream os;
    os << "n\tmetric_mean\tmetric_std\n";
    for (size_t gi = 0; gi < per_seed[0].grid.size(); ++gi) {
        std::vector<double> vals;
        for (const auto& r : per_seed) vals.push_back(r.mean_metric[gi]);
        MeanStdAgg agg = aggregate_runs(vals);
        os << per_seed[0].grid[gi] << "\t" << fmt4(agg.mean) << "\t" << fmt4(agg.stddev) << "\n";
    }
    return os.str();
}

Checkpoint run_orm_pipeline(const Checkpoint& seed_ckpt, const PipelineArtifacts& generator,
                            const std::vector<Triplet>& train, const PipelineConfig& cfg,
                            int n_samples, int n_rejected, int max_prompts) {
    ModelConfig mc = config_from_checkpoint(generator.model);
    Params params = params_from_checkpoint(generator.model, mc);
    params.set_requires_grad(false);
    GenModel gm{mc, &params, mc.routing};
    std::vector<Triplet> prompts(train.begin(),
                                 train.begin() + std::min(train.size(), static_cast<size_t>(max_prompts)));
    SamplerConfig sc = cfg.sampler;
    sc.seed = derive_seed(cfg.sampler.seed, 0x04a);
    std::vector<PreferencePair> pairs =
        build_preference_pairs(gm, prompts, sc, n_samples, n_rejected, mc.max_seq,
                               mc.experts > 1 ? &generator.clusters : nullptr,
                               mc.experts > 1 ? &generator.embedder : nullptr, cfg.jobs);
    TrainConfig orm_cfg = cfg.tune;
    orm_cfg.seed = derive_seed(cfg.tune.seed, 0x04b);
    return train_orm(seed_ckpt, pairs, orm_cfg);
}

}  // namespace lmlx
