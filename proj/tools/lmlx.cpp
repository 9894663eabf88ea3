// lmlx: specialize-then-synthesize definition modeling pipeline.
// One subcommand per pipeline stage; every stage is rerunnable and writes only
// under its --out/--out-dir target. Exit codes: 0 ok, 1 runtime failure,
// 2 usage error.

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "lmlx/pipeline.hpp"

namespace fs = std::filesystem;
using namespace lmlx;

namespace {

struct TrainFlags {
    int steps = -1;
    int epochs = -1;
    int batch_tokens = -1;
    double lr = -1;
    double min_lr = -1;
    double warmup = -1;
    double weight_decay = -1;
    double dropout = -1;
    double grad_clip = -1;
    uint64_t seed = UINT64_MAX;
    std::string objective;

    void attach(CLI::App* cmd) {
        cmd->add_option("--steps", steps, "Cap on optimizer steps (overrides epochs)");
        cmd->add_option("--epochs", epochs, "Training epochs");
        cmd->add_option("--batch-tokens", batch_tokens, "Tokens per optimizer step");
        cmd->add_option("--lr", lr, "Max learning rate");
        cmd->add_option("--min-lr", min_lr, "Cosine floor learning rate");
        cmd->add_option("--warmup", warmup, "Warmup ratio of total steps");
        cmd->add_option("--weight-decay", weight_decay, "AdamW decoupled weight decay");
        cmd->add_option("--dropout", dropout, "Dropout probability");
        cmd->add_option("--grad-clip", grad_clip, "Global gradient-norm clip");
        cmd->add_option("--seed", seed, "Training seed");
        cmd->add_option("--objective", objective, "Loss objective: masked | lm")
            ->check(CLI::IsMember({"masked", "lm"}));
    }
    void apply(TrainConfig& t) const {
        if (steps >= 0) t.max_steps = steps;
        if (epochs >= 0) t.epochs = epochs;
        if (batch_tokens >= 0) t.batch_tokens = batch_tokens;
        if (lr >= 0) t.max_lr = lr;
        if (min_lr >= 0) t.min_lr = min_lr;
        if (warmup >= 0) t.warmup_ratio = warmup;
        if (weight_decay >= 0) t.weight_decay = weight_decay;
        if (dropout >= 0) t.dropout = dropout;
        if (grad_clip >= 0) t.grad_clip = grad_clip;
        if (seed != UINT64_MAX) t.seed = seed;
        if (objective == "lm") t.lm_objective = true;
        if (objective == "masked") t.lm_objective = false;
        t.validate();
    }
};

struct SamplerFlags {
    double temperature = -1;
    int top_k = -1;
    double top_p = -1;
    double penalty = -1;
    int max_new = -1;
    uint64_t seed = UINT64_MAX;
    bool greedy = false;

    void attach(CLI::App* cmd) {
        cmd->add_option("--temperature", temperature, "Sampling temperature (0 = greedy)");
        cmd->add_option("--top-k", top_k, "Top-k filter size");
        cmd->add_option("--top-p", top_p, "Nucleus mass");
        cmd->add_option("--repetition-penalty", penalty, "CTRL repetition penalty");
        cmd->add_option("--max-new-tokens", max_new, "Generation length cap");
        cmd->add_option("--sample-seed", seed, "Sampling seed");
        cmd->add_flag("--greedy", greedy, "Force temperature 0");
    }
    void apply(SamplerConfig& s) const {
        if (temperature >= 0) s.temperature = temperature;
        if (top_k >= 0) s.top_k = top_k;
        if (top_p >= 0) s.top_p = top_p;
        if (penalty >= 0) s.repetition_penalty = penalty;
        if (max_new >= 0) s.max_new_tokens = max_new;
        if (seed != UINT64_MAX) s.seed = seed;
        if (greedy) s.temperature = 0.0;
        s.validate();
    }
};

void ensure_dir(const std::string& dir) {
    if (dir.empty()) throw ConfigError("output directory is required");
    fs::create_directories(dir);
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path);
    f << text;
}

std::vector<Triplet> require_dataset(const std::string& path) {
    PreprocessSummary sum;
    auto data = load_dataset(path, &sum);
    if (data.empty()) throw Error("dataset is empty after preprocessing: " + path);
    return data;
}

// Reconstructs the embedder a cluster model was built with.
Embedder embedder_for_clusters(const LoadedClusterModel& lcm, const std::string& embed_model_path) {
    switch (lcm.model.method) {
        case EmbedMethod::kTfidf:
            if (!lcm.tfidf) throw ConfigError("cluster model lacks its tfidf vocabulary");
            return Embedder::tfidf(*lcm.tfidf);
        case EmbedMethod::kSeedModelMeanPool: {
            std::string path = !embed_model_path.empty() ? embed_model_path : lcm.embed_ckpt_path;
            if (path.empty())
                throw ConfigError("mean-pool cluster model needs --embed-model (seed checkpoint path)");
            Checkpoint ckpt = read_checkpoint(path);
            ModelConfig cfg = config_from_checkpoint(ckpt);
            auto params = std::make_shared<Params>(params_from_checkpoint(ckpt, cfg));
            return Embedder::mean_pool(params, cfg);
        }
        case EmbedMethod::kExternalFile:
            throw ConfigError("external-file cluster models cannot embed fresh queries");
    }
    throw ConfigError("bad embed method");
}

struct RoutedModel {
    Checkpoint ckpt;
    ModelConfig cfg;
    Params params;
    std::optional<LoadedClusterModel> clusters;
    std::optional<Embedder> embedder;
};

RoutedModel load_routed_model(const std::string& model_path, const std::string& routing_flag,
                              const std::string& clusters_path, const std::string& embed_model_path) {
    RoutedModel rm;
    rm.ckpt = read_checkpoint(model_path);
    rm.cfg = config_from_checkpoint(rm.ckpt);
    if (!routing_flag.empty()) rm.cfg.routing = routing_policy_from_string(routing_flag);
    rm.params = params_from_checkpoint(rm.ckpt, rm.cfg);
    rm.params.set_requires_grad(false);
    if (rm.cfg.experts > 1 && rm.cfg.routing == RoutingPolicy::kDomain) {
        if (clusters_path.empty())
            throw ConfigError("domain routing needs --clusters (cluster model checkpoint)");
        rm.clusters = load_cluster_model(clusters_path);
        rm.embedder = embedder_for_clusters(*rm.clusters, embed_model_path);
    }
    return rm;
}

const RoutingDecision* maybe_domain(const RoutedModel& rm, const Triplet& t, RoutingDecision& storage) {
    if (rm.cfg.experts > 1 && rm.cfg.routing == RoutingPolicy::kDomain) {
        storage = domain_decision_for(t, rm.clusters->model, *rm.embedder);
        return &storage;
    }
    return nullptr;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"lmlx - specialize-then-synthesize definition modeling"};
    app.require_subcommand(1);
    std::string config_path;
    app.add_option("--config", config_path, "Pipeline config JSON (or LMLX_CONFIG env)");

    // ---- prepare ----
    auto* prepare = app.add_subcommand("prepare", "Preprocess raw JSONL into clean train/valid/test splits");
    std::string prep_in, prep_out;
    double prep_train = 0.8, prep_valid = 0.1;
    uint64_t prep_seed = 42;
    prepare->add_option("--in", prep_in, "Raw JSONL dataset")->required();
    prepare->add_option("--out-dir", prep_out, "Output directory")->required();
    prepare->add_option("--train", prep_train, "Train fraction");
    prepare->add_option("--valid", prep_valid, "Valid fraction");
    prepare->add_option("--seed", prep_seed, "Split seed");

    // ---- stats ----
    auto* stats = app.add_subcommand("stats", "Dataset statistics report (tab separated)");
    std::string st_train, st_valid, st_test, st_out;
    stats->add_option("--train", st_train, "Train split JSONL")->required();
    stats->add_option("--valid", st_valid, "Valid split JSONL");
    stats->add_option("--test", st_test, "Test split JSONL");
    stats->add_option("--out", st_out, "Write report here instead of stdout");

    // ---- synth-data (hidden) ----
    auto* synth = app.add_subcommand("synth-data", "Generate the 4-domain synthetic corpus");
    synth->group("");  // hidden from help
    std::string sy_out;
    int sy_n = 2000;
    uint64_t sy_seed = 7;
    synth->add_option("--out-dir", sy_out, "Output directory")->required();
    synth->add_option("--n", sy_n, "Example count");
    synth->add_option("--seed", sy_seed, "Corpus seed");

    // ---- cluster ----
    auto* cluster = app.add_subcommand("cluster", "Partition training data and report cluster quality");
    std::string cl_train, cl_out, cl_policy = "semantic", cl_embed = "seed-model-mean-pool", cl_model,
                cl_embed_file;
    int cl_k = 4;
    uint64_t cl_seed = 42;
    int cl_max_iter = 1000;
    double cl_tol = 1e-8;
    cluster->add_option("--train", cl_train, "Training split JSONL")->required();
    cluster->add_option("--out-dir", cl_out, "Output directory")->required();
    cluster->add_option("--policy", cl_policy, "none | random | lexical | semantic")
        ->check(CLI::IsMember({"none", "random", "lexical", "semantic"}));
    cluster->add_option("--k", cl_k, "Cluster count");
    cluster->add_option("--seed", cl_seed, "Clustering seed");
    cluster->add_option("--embed", cl_embed, "semantic embedder: seed-model-mean-pool | external-file");
    cluster->add_option("--model", cl_model, "Seed checkpoint for mean-pool embeddings");
    cluster->add_option("--embed-file", cl_embed_file, "Precomputed embeddings JSONL");
    cluster->add_option("--max-iter", cl_max_iter, "k-means iteration cap");
    cluster->add_option("--tol", cl_tol, "Centroid-shift convergence tolerance");

    // ---- train-expert ----
    auto* texp = app.add_subcommand("train-expert", "Fine-tune one dense expert from a seed checkpoint");
    std::string te_train, te_valid, te_init, te_out, te_clusters, te_log;
    int te_cluster = -1;
    TrainFlags te_flags;
    texp->add_option("--train", te_train, "Training split JSONL")->required();
    texp->add_option("--valid", te_valid, "Validation split JSONL");
    texp->add_option("--init", te_init, "Seed checkpoint path, or 'random'")->required();
    texp->add_option("--out", te_out, "Output checkpoint")->required();
    texp->add_option("--cluster", te_cluster, "Train on this cluster id only");
    texp->add_option("--clusters", te_clusters, "Cluster model path (for --cluster)");
    texp->add_option("--log", te_log, "Write the training log TSV here");
    te_flags.attach(texp);

    // ---- train-all ----
    auto* tall = app.add_subcommand("train-all", "Branch-train one expert per cluster");
    std::string ta_train, ta_valid, ta_init, ta_out, ta_clusters;
    int ta_jobs = 1;
    TrainFlags ta_flags;
    tall->add_option("--train", ta_train, "Training split JSONL")->required();
    tall->add_option("--valid", ta_valid, "Validation split JSONL");
    tall->add_option("--init", ta_init, "Seed checkpoint path")->required();
    tall->add_option("--clusters", ta_clusters, "Cluster model path")->required();
    tall->add_option("--out-dir", ta_out, "Output directory")->required();
    tall->add_option("--jobs", ta_jobs, "Parallel expert workers");
    ta_flags.attach(tall);

    // ---- merge ----
    auto* mrg = app.add_subcommand("merge", "Compose dense experts into one MoE checkpoint");
    std::vector<std::string> mg_experts;
    std::string mg_out, mg_router = "small-normal", mg_clusters, mg_routing = "domain";
    uint64_t mg_seed = 42;
    mrg->add_option("--experts", mg_experts, "Ordered expert checkpoint paths")->required()->expected(-1);
    mrg->add_option("--out", mg_out, "Merged checkpoint path")->required();
    mrg->add_option("--router-init", mg_router, "zeros | small-normal | centroid-seeded")
        ->check(CLI::IsMember({"zeros", "small-normal", "centroid-seeded"}));
    mrg->add_option("--seed", mg_seed, "Router init seed");
    mrg->add_option("--clusters", mg_clusters, "Cluster model (for centroid-seeded gates)");
    mrg->add_option("--routing", mg_routing, "Default routing policy for the merged model")
        ->check(CLI::IsMember({"top1-token", "top2-token", "soft-sequence", "hard-sequence", "domain"}));

    // ---- tune-router ----
    auto* tune = app.add_subcommand("tune-router", "Post-merge fine-tuning of gates (and experts)");
    std::string tu_model, tu_train, tu_valid, tu_out, tu_scope = "gates", tu_clusters, tu_embed_model;
    TrainFlags tu_flags;
    tune->add_option("--model", tu_model, "Merged MoE checkpoint")->required();
    tune->add_option("--train", tu_train, "Full training split JSONL")->required();
    tune->add_option("--valid", tu_valid, "Validation split JSONL");
    tune->add_option("--out", tu_out, "Output checkpoint")->required();
    tune->add_option("--scope", tu_scope, "gates | gates+experts | all")
        ->check(CLI::IsMember({"gates", "gates+experts", "all"}));
    tune->add_option("--clusters", tu_clusters, "Cluster model (domain routing)");
    tune->add_option("--embed-model", tu_embed_model, "Seed checkpoint backing the cluster embedder");
    tu_flags.attach(tune);

    // ---- generate ----
    auto* gen = app.add_subcommand("generate", "Decode a test file to JSONL");
    std::string ge_model, ge_test, ge_out, ge_routing, ge_clusters, ge_embed_model;
    int ge_n = 1, ge_limit = 0;
    SamplerFlags ge_flags;
    gen->add_option("--model", ge_model, "Model checkpoint")->required();
    gen->add_option("--test", ge_test, "Test split JSONL")->required();
    gen->add_option("--out", ge_out, "Output JSONL")->required();
    gen->add_option("--routing", ge_routing, "Routing policy override");
    gen->add_option("--clusters", ge_clusters, "Cluster model (domain routing)");
    gen->add_option("--embed-model", ge_embed_model, "Seed checkpoint backing the cluster embedder");
    gen->add_option("--n", ge_n, "Candidates per prompt");
    gen->add_option("--limit", ge_limit, "Cap on test examples (0 = all)");
    ge_flags.attach(gen);

    // ---- bon ----
    auto* bon = app.add_subcommand("bon", "Best-of-N test-time scaling curves");
    std::string bo_model, bo_test, bo_out, bo_verifier = "oracle", bo_orm, bo_routing, bo_clusters,
                bo_embed_model, bo_seeds = "21,42,84";
    int bo_n = 128, bo_limit = 32;
    SamplerFlags bo_flags;
    bon->add_option("--model", bo_model, "Model checkpoint")->required();
    bon->add_option("--test", bo_test, "Test split JSONL")->required();
    bon->add_option("--out-dir", bo_out, "Output directory")->required();
    bon->add_option("--n", bo_n, "Candidates per prompt");
    bon->add_option("--verifier", bo_verifier, "oracle | orm | random")
        ->check(CLI::IsMember({"oracle", "orm", "random"}));
    bon->add_option("--orm", bo_orm, "ORM scorer checkpoint (verifier=orm)");
    bon->add_option("--routing", bo_routing, "Routing policy override");
    bon->add_option("--clusters", bo_clusters, "Cluster model (domain routing)");
    bon->add_option("--embed-model", bo_embed_model, "Seed checkpoint backing the cluster embedder");
    bon->add_option("--seeds", bo_seeds, "Comma-separated sampling seeds");
    bon->add_option("--limit", bo_limit, "Cap on test prompts");
    bo_flags.attach(bon);

    // ---- train-orm ----
    auto* torm = app.add_subcommand("train-orm", "Build preference pairs and train the reward model");
    std::string to_init, to_generator, to_train, to_out, to_clusters, to_embed_model;
    int to_samples = 32, to_rejected = 8, to_limit = 64;
    TrainFlags to_flags;
    SamplerFlags to_sampler;
    torm->add_option("--init", to_init, "Seed checkpoint for the scorer trunk")->required();
    torm->add_option("--generator", to_generator, "Generator model checkpoint")->required();
    torm->add_option("--train", to_train, "Training split JSONL")->required();
    torm->add_option("--out", to_out, "Scorer checkpoint path")->required();
    torm->add_option("--samples", to_samples, "Candidates sampled per prompt");
    torm->add_option("--rejected", to_rejected, "Top-by-loglik rejected pool size");
    torm->add_option("--limit", to_limit, "Cap on training prompts");
    torm->add_option("--clusters", to_clusters, "Cluster model (domain-routed generator)");
    torm->add_option("--embed-model", to_embed_model, "Seed checkpoint backing the cluster embedder");
    to_flags.attach(torm);
    to_sampler.attach(torm);

    // ---- evaluate ----
    auto* eval = app.add_subcommand("evaluate", "Score predictions against references");
    std::string ev_pred, ev_refs, ev_out, ev_metrics = "bleu,rouge-l";
    eval->add_option("--pred", ev_pred, "Predictions JSONL ({text} or {definition} per line)")->required();
    eval->add_option("--refs", ev_refs, "References JSONL (dataset format)")->required();
    eval->add_option("--metrics", ev_metrics, "Comma list: bleu, rouge-l");
    eval->add_option("--out", ev_out, "Report TSV (stdout when omitted)");

    // ---- ablate ----
    auto* abl = app.add_subcommand("ablate", "Scripted replication of the ablation studies");
    std::string ab_kind, ab_data, ab_out, ab_seed_model, ab_grid = "1,2,4,8";
    abl->add_option("kind", ab_kind, "partition | routing | experts")
        ->required()
        ->check(CLI::IsMember({"partition", "routing", "experts"}));
    abl->add_option("--data-dir", ab_data, "Directory with train/valid/test.jsonl")->required();
    abl->add_option("--out-dir", ab_out, "Output directory")->required();
    abl->add_option("--seed-model", ab_seed_model, "Existing seed checkpoint (bootstrapped when absent)");
    abl->add_option("--experts-grid", ab_grid, "Expert counts for the experts ablation");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }

    try {
        PipelineConfig cfg = PipelineConfig::load(config_path);

        if (*prepare) {
            ensure_dir(prep_out);
            PreprocessSummary sum;
            auto data = load_dataset(prep_in, &sum);
            SplitResult split = split_by_term(data, prep_train, prep_valid, prep_seed);
            save_dataset(prep_out + "/train.jsonl", split.train);
            save_dataset(prep_out + "/valid.jsonl", split.valid);
            save_dataset(prep_out + "/test.jsonl", split.test);
            std::cout << "kept\t" << sum.kept << "\ndropped\t" << sum.dropped << "\nunreadable\t"
                      << sum.unreadable << "\ntrain\t" << split.train.size() << "\nvalid\t"
                      << split.valid.size() << "\ntest\t" << split.test.size() << "\n";
        } else if (*stats) {
            auto train = require_dataset(st_train);
            std::vector<Triplet> valid, test;
            if (!st_valid.empty()) valid = load_dataset(st_valid);
            if (!st_test.empty()) test = load_dataset(st_test);
            std::string report = stats_report(train, valid, test);
            if (st_out.empty())
                std::cout << report;
            else
                write_text(st_out, report);
        } else if (*synth) {
            ensure_dir(sy_out);
            SynthConfig sc;
            sc.n_examples = sy_n;
            sc.seed = sy_seed;
            SynthCorpus corpus = synth_corpus(sc);
            save_dataset(sy_out + "/raw.jsonl", corpus.all);
            save_dataset(sy_out + "/train.jsonl", corpus.train);
            save_dataset(sy_out + "/valid.jsonl", corpus.valid);
            save_dataset(sy_out + "/test.jsonl", corpus.test);
            std::cout << "examples\t" << corpus.all.size() << "\ntrain\t" << corpus.train.size()
                      << "\nvalid\t" << corpus.valid.size() << "\ntest\t" << corpus.test.size() << "\n";
        } else if (*cluster) {
            ensure_dir(cl_out);
            auto train = require_dataset(cl_train);
            PartitionPolicy policy = partition_policy_from_string(cl_policy);
            KMeansOptions opts = cfg.kmeans;
            opts.max_iter = cl_max_iter;
            opts.tol = cl_tol;
            std::optional<Embedder> emb;
            std::optional<TfidfModel> tfidf;
            if (policy == PartitionPolicy::kLexical) {
                tfidf = fit_tfidf(train);
                emb = Embedder::tfidf(*tfidf);
            } else if (policy == PartitionPolicy::kSemantic) {
                EmbedMethod method = embed_method_from_string(cl_embed);
                if (method == EmbedMethod::kExternalFile) {
                    if (cl_embed_file.empty()) throw ConfigError("--embed external-file needs --embed-file");
                    emb = Embedder::external(cl_embed_file);
                } else {
                    if (cl_model.empty()) throw ConfigError("mean-pool embedding needs --model");
                    Checkpoint seed = read_checkpoint(cl_model);
                    ModelConfig mc = config_from_checkpoint(seed);
                    emb = Embedder::mean_pool(std::make_shared<Params>(params_from_checkpoint(seed, mc)), mc);
                }
            }
            PartitionResult part =
                partition(train, policy, policy == PartitionPolicy::kNone ? 1 : cl_k, cl_seed,
                          emb ? &*emb : nullptr, opts);
            save_cluster_model(cl_out + "/clusters.lmlx", part.model, tfidf ? &*tfidf : nullptr, cl_model);
            if (!part.model.centroids.empty() && emb) {
                EmbeddingMatrix x = emb->embed_all(train);
                write_text(cl_out + "/quality.tsv", quality_report(cluster_quality(part.model, x)));
            }
            std::cout << "policy\t" << cl_policy << "\nparts\t" << part.parts.size() << "\n";
            for (size_t i = 0; i < part.parts.size(); ++i)
                std::cout << "part" << i << "\t" << part.parts[i].size() << "\n";
        } else if (*texp) {
            auto train = require_dataset(te_train);
            std::vector<Triplet> valid;
            if (!te_valid.empty()) valid = load_dataset(te_valid);
            if (te_cluster >= 0) {
                if (te_clusters.empty()) throw ConfigError("--cluster needs --clusters");
                LoadedClusterModel lcm = load_cluster_model(te_clusters);
                if (lcm.model.assignments.size() != train.size())
                    throw Error("cluster assignments do not align with the training file");
                std::vector<Triplet> subset;
                for (size_t i = 0; i < train.size(); ++i)
                    if (lcm.model.assignments[i] == te_cluster) subset.push_back(train[i]);
                train = std::move(subset);
                if (train.empty()) throw Error("cluster " + std::to_string(te_cluster) + " is empty");
            }
            TrainConfig tc = cfg.branch;
            te_flags.apply(tc);
            Checkpoint seed;
            if (te_init == "random") {
                Params p = init_params<float>(cfg.model, tc.seed);
                seed = params_to_checkpoint(p, cfg.model, {{"name", "random-init"}});
            } else {
                seed = read_checkpoint(te_init);
            }
            if (tc.lm_objective) {
                ModelConfig mc = config_from_checkpoint(seed);
                Params p = params_from_checkpoint(seed, mc);
                TrainResult r = train_loop(std::move(p), mc, train, valid, tc);
                Checkpoint out = params_to_checkpoint(r.params, mc, {{"seed", tc.seed}});
                write_checkpoint(te_out, out);
                if (!te_log.empty()) write_text(te_log, format_train_log(r.log));
            } else {
                Checkpoint out = train_expert(seed, train, valid, tc);
                write_checkpoint(te_out, out);
            }
            std::cout << "wrote\t" << te_out << "\n";
        } else if (*tall) {
            ensure_dir(ta_out);
            auto train = require_dataset(ta_train);
            std::vector<Triplet> valid;
            if (!ta_valid.empty()) valid = load_dataset(ta_valid);
            LoadedClusterModel lcm = load_cluster_model(ta_clusters);
            if (lcm.model.assignments.size() != train.size())
                throw Error("cluster assignments do not align with the training file");
            std::vector<std::vector<Triplet>> parts(static_cast<size_t>(lcm.model.n));
            for (size_t i = 0; i < train.size(); ++i)
                parts[static_cast<size_t>(lcm.model.assignments[i])].push_back(train[i]);
            TrainConfig tc = cfg.branch;
            ta_flags.apply(tc);
            Checkpoint seed = read_checkpoint(ta_init);
            auto experts = branch_train(seed, parts, valid, tc, ta_jobs);
            for (size_t i = 0; i < experts.size(); ++i) {
                std::string path = ta_out + "/expert_" + std::to_string(i) + ".lmlx";
                write_checkpoint(path, experts[i]);
                std::cout << "wrote\t" << path << "\n";
            }
        } else if (*mrg) {
            std::vector<Checkpoint> experts;
            for (const auto& path : mg_experts) experts.push_back(read_checkpoint(path));
            MergeOptions mo;
            mo.router_init = router_init_from_string(mg_router);
            mo.seed = mg_seed;
            mo.routing = routing_policy_from_string(mg_routing);
            std::vector<std::vector<float>> centroids;
            if (mo.router_init == RouterInit::kCentroidSeeded) {
                if (mg_clusters.empty()) throw ConfigError("centroid-seeded router needs --clusters");
                centroids = load_cluster_model(mg_clusters).model.centroids;
                mo.centroids = &centroids;
            }
            Checkpoint merged = merge(experts, mo);
            write_checkpoint(mg_out, merged);
            nlohmann::json prov;
            prov["experts"] = mg_experts;
            prov["router_init"] = mg_router;
            prov["seed"] = mg_seed;
            write_text(mg_out + ".provenance.json", prov.dump(2) + "\n");
            std::cout << "wrote\t" << mg_out << "\n";
        } else if (*tune) {
            auto train = require_dataset(tu_train);
            std::vector<Triplet> valid;
            if (!tu_valid.empty()) valid = load_dataset(tu_valid);
            Checkpoint moe = read_checkpoint(tu_model);
            TrainConfig tc = cfg.tune;
            tu_flags.apply(tc);
            ModelConfig mc = config_from_checkpoint(moe);
            std::optional<LoadedClusterModel> lcm;
            std::optional<Embedder> emb;
            if (mc.routing == RoutingPolicy::kDomain) {
                if (tu_clusters.empty()) throw ConfigError("domain routing needs --clusters");
                lcm = load_cluster_model(tu_clusters);
                emb = embedder_for_clusters(*lcm, tu_embed_model);
            }
            Checkpoint tuned = tune_router(moe, train, valid, tc, scope_from_string(tu_scope),
                                           lcm ? &lcm->model : nullptr, emb ? &*emb : nullptr);
            write_checkpoint(tu_out, tuned);
            std::cout << "wrote\t" << tu_out << "\n";
        } else if (*gen) {
            auto test = require_dataset(ge_test);
            RoutedModel rm = load_routed_model(ge_model, ge_routing, ge_clusters, ge_embed_model);
            SamplerConfig sc = cfg.sampler;
            ge_flags.apply(sc);
            GenModel gm{rm.cfg, &rm.params, rm.cfg.routing};
            std::ofstream out(ge_out, std::ios::binary);
            if (!out) throw Error("cannot write " + ge_out);
            size_t limit = ge_limit > 0 ? std::min(test.size(), static_cast<size_t>(ge_limit)) : test.size();
            for (size_t i = 0; i < limit; ++i) {
                auto prompt = prompt_tokens_truncated(test[i].context, test[i].term, rm.cfg.max_seq / 2);
                SamplerConfig per = sc;
                per.seed = derive_seed(sc.seed, i);
                per.max_new_tokens = std::min(sc.max_new_tokens, rm.cfg.max_seq - static_cast<int>(prompt.size()));
                RoutingDecision dec;
                const RoutingDecision* dp = maybe_domain(rm, test[i], dec);
                if (ge_n == 1) {
                    Generation g = generate(gm, prompt, per, dp);
                    out << nlohmann::json{{"prompt", render_prompt(test[i].context, test[i].term)},
                                          {"text", g.text},
                                          {"logprob", g.loglik},
                                          {"seed", per.seed},
                                          {"candidate_index", 0}}
                               .dump()
                        << "\n";
                } else {
                    CandidateSet set = repeated_sample(gm, prompt, ge_n, per, dp, cfg.jobs);
                    for (size_t c = 0; c < set.candidates.size(); ++c)
                        out << nlohmann::json{{"prompt", render_prompt(test[i].context, test[i].term)},
                                              {"text", set.candidates[c].text},
                                              {"logprob", set.candidates[c].loglik},
                                              {"seed", set.candidates[c].seed},
                                              {"candidate_index", c}}
                                   .dump()
                            << "\n";
                }
            }
            std::cout << "wrote\t" << ge_out << "\n";
        } else if (*bon) {
            ensure_dir(bo_out);
            auto test = require_dataset(bo_test);
            RoutedModel rm = load_routed_model(bo_model, bo_routing, bo_clusters, bo_embed_model);
            SamplerConfig sc = cfg.sampler;
            bo_flags.apply(sc);
            Verifier verifier;
            verifier.kind = verifier_from_string(bo_verifier);
            Checkpoint orm_ckpt;
            ModelConfig orm_cfg;
            Params orm_params;
            if (verifier.kind == VerifierKind::kOracle) {
                verifier.metric = oracle_bleu();
            } else if (verifier.kind == VerifierKind::kOrm) {
                if (bo_orm.empty()) throw ConfigError("verifier=orm needs --orm scorer checkpoint");
                orm_ckpt = read_checkpoint(bo_orm);
                orm_cfg = config_from_checkpoint(orm_ckpt);
                orm_params = params_from_checkpoint(orm_ckpt, orm_cfg);
                verifier.scorer_params = &orm_params;
                verifier.scorer_cfg = &orm_cfg;
            }
            std::vector<uint64_t> seeds;
            for (const auto& tok : nlohmann::json::parse("[" + bo_seeds + "]"))
                seeds.push_back(tok.get<uint64_t>());
            GenModel gm{rm.cfg, &rm.params, rm.cfg.routing};
            std::vector<BoNResult> per_seed;
            std::ofstream chosen(bo_out + "/chosen.jsonl", std::ios::binary);
            for (uint64_t s : seeds) {
                verifier.seed = s;
                std::vector<CandidateSet> sets;
                std::vector<std::string> refs;
                size_t limit = std::min(test.size(), static_cast<size_t>(bo_limit));
                for (size_t i = 0; i < limit; ++i) {
                    auto prompt = prompt_tokens_truncated(test[i].context, test[i].term, rm.cfg.max_seq / 2);
                    SamplerConfig per = sc;
                    per.seed = derive_seed(s, i);
                    per.max_new_tokens = rm.cfg.max_seq - static_cast<int>(prompt.size());
                    RoutingDecision dec;
                    const RoutingDecision* dp = maybe_domain(rm, test[i], dec);
                    sets.push_back(repeated_sample(gm, prompt, bo_n, per, dp, cfg.jobs));
                    refs.push_back(test[i].definition);
                }
                BoNResult r = bon_curve(sets, refs, verifier, default_bon_grid(bo_n), oracle_bleu());
                for (size_t gi = 0; gi < r.grid.size(); ++gi)
                    for (size_t p = 0; p < r.chosen[gi].size(); ++p)
                        chosen << nlohmann::json{{"seed", s},
                                                 {"n", r.grid[gi]},
                                                 {"prompt_index", p},
                                                 {"chosen_index", r.chosen[gi][p]}}
                                      .dump()
                               << "\n";
                per_seed.push_back(std::move(r));
            }
            write_text(bo_out + "/curve.tsv", bon_curve_tsv(per_seed));
            std::cout << "wrote\t" << bo_out << "/curve.tsv\n";
        } else if (*torm) {
            auto train = require_dataset(to_train);
            RoutedModel rm = load_routed_model(to_generator, "", to_clusters, to_embed_model);
            Checkpoint seed = read_checkpoint(to_init);
            SamplerConfig sc = cfg.sampler;
            to_sampler.apply(sc);
            GenModel gm{rm.cfg, &rm.params, rm.cfg.routing};
            std::vector<Triplet> prompts(train.begin(),
                                         train.begin() + std::min(train.size(), static_cast<size_t>(to_limit)));
            std::vector<PreferencePair> pairs = build_preference_pairs(
                gm, prompts, sc, to_samples, to_rejected, rm.cfg.max_seq,
                rm.clusters ? &rm.clusters->model : nullptr, rm.embedder ? &*rm.embedder : nullptr);
            if (pairs.empty()) throw Error("no usable preference pairs were built");
            TrainConfig tc = cfg.tune;
            to_flags.apply(tc);
            Checkpoint scorer = train_orm(seed, pairs, tc);
            write_checkpoint(to_out, scorer);
            std::cout << "pairs\t" << pairs.size() << "\nwrote\t" << to_out << "\n";
        } else if (*eval) {
            std::ifstream pf(ev_pred);
            if (!pf) throw Error("cannot open predictions: " + ev_pred);
            std::vector<std::string> hyps;
            std::string line;
            while (std::getline(pf, line)) {
                if (line.empty()) continue;
                auto j = nlohmann::json::parse(line, nullptr, false);
                if (j.is_discarded()) throw FormatError("predictions file has a non-JSON line");
                if (j.contains("text"))
                    hyps.push_back(j["text"].get<std::string>());
                else if (j.contains("definition"))
                    hyps.push_back(j["definition"].get<std::string>());
                else
                    throw FormatError("prediction line lacks text/definition");
            }
            auto refs = load_dataset(ev_refs);
            if (hyps.size() != refs.size())
                throw Error("prediction count " + std::to_string(hyps.size()) + " != reference count " +
                            std::to_string(refs.size()));
            std::vector<std::string> ref_texts;
            for (const auto& r : refs) ref_texts.push_back(r.definition);
            std::ostringstream os;
            os << "metric\tvalue\n";
            os.setf(std::ios::fixed);
            os.precision(4);
            for (const auto& m : {std::string("bleu"), std::string("rouge-l")}) {
                if (ev_metrics.find(m) == std::string::npos) continue;
                double acc = 0.0;
                for (size_t i = 0; i < hyps.size(); ++i)
                    acc += m == "bleu" ? bleu(hyps[i], ref_texts[i]) : rouge_l(hyps[i], ref_texts[i]);
                os << m << "\t" << acc / static_cast<double>(hyps.size()) << "\n";
                if (m == "bleu") os << "corpus_bleu\t" << corpus_bleu(hyps, ref_texts) << "\n";
            }
            if (ev_out.empty())
                std::cout << os.str();
            else
                write_text(ev_out, os.str());
        } else if (*abl) {
            ensure_dir(ab_out);
            auto train = require_dataset(ab_data + "/train.jsonl");
            auto valid = load_dataset(ab_data + "/valid.jsonl");
            auto test = require_dataset(ab_data + "/test.jsonl");
            Checkpoint seed;
            if (!ab_seed_model.empty()) {
                seed = read_checkpoint(ab_seed_model);
            } else {
                std::string cached = ab_out + "/seed.lmlx";
                if (fs::exists(cached)) {
                    seed = read_checkpoint(cached);
                } else {
                    seed = make_seed_checkpoint(train, cfg);
                    write_checkpoint(cached, seed);
                }
            }
            std::string tsv;
            if (ab_kind == "partition") {
                tsv = ablate_partition(seed, train, valid, test, cfg);
                write_text(ab_out + "/partition.tsv", tsv);
            } else if (ab_kind == "routing") {
                tsv = ablate_routing(seed, train, valid, test, cfg);
                write_text(ab_out + "/routing.tsv", tsv);
            } else {
                std::vector<int> grid;
                for (const auto& tok : nlohmann::json::parse("[" + ab_grid + "]"))
                    grid.push_back(tok.get<int>());
                tsv = ablate_experts(seed, train, valid, test, cfg, grid);
                write_text(ab_out + "/experts.tsv", tsv);
            }
            std::cout << tsv;
        }
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
