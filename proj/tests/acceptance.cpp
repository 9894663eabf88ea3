// Acceptance suite: one case per criterion, each printing a single
// "[criterion N] PASS|FAIL" line. Heavier fixtures (synthetic corpus, seed
// model, trained pipelines) are built once and shared.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>

#include "doctest.h"
#include "gradcheck.hpp"
#include "lmlx/pipeline.hpp"

using namespace lmlx;
using namespace lmlx::testing;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Criterion {
    int id;
    const char* what;
    bool pass = true;
    Criterion(int id_, const char* what_) : id(id_), what(what_) {}
    void expect(bool cond, const std::string& detail) {
        if (!cond) {
            pass = false;
            std::printf("[criterion %d]   failed: %s\n", id, detail.c_str());
        }
        CHECK_MESSAGE(cond, detail);
    }
    ~Criterion() { std::printf("[criterion %d] %s — %s\n", id, pass ? "PASS" : "FAIL", what); }
};

struct Fixture {
    SynthCorpus corpus;
    PipelineConfig cfg;
    Checkpoint seed;
    std::shared_ptr<Params> seed_params;
    std::optional<PartitionAblation> partition;   // filled by criterion 5
    double ablation_seconds = 0.0;
    std::optional<PipelineArtifacts> semantic;    // shared by criteria 7 and 8

    static Fixture& get() {
        static Fixture f = [] {
            Fixture fx;
            SynthConfig sc;
            sc.n_examples = 2000;
            fx.corpus = synth_corpus(sc);
            fx.seed = make_seed_checkpoint(fx.corpus.train, fx.cfg);
            ModelConfig mc = config_from_checkpoint(fx.seed);
            fx.seed_params = std::make_shared<Params>(params_from_checkpoint(fx.seed, mc));
            return fx;
        }();
        return f;
    }

    const PartitionAblation& partition_scores() {
        if (!partition) {
            auto t0 = Clock::now();
            partition = run_partition_ablation(seed, corpus.train, corpus.valid, corpus.test, cfg);
            ablation_seconds = seconds_since(t0);
        }
        return *partition;
    }

    const PipelineArtifacts& semantic_pipeline() {
        if (!semantic)
            semantic = run_partition_pipeline(PartitionPolicy::kSemantic, seed, corpus.train,
                                              corpus.valid, cfg, 42);
        return *semantic;
    }
};

}  // namespace

TEST_CASE("criterion 1: gradient correctness, ops and end-to-end, under a minute") {
    Criterion c(1, "finite-difference gradients < 1e-4 over 10 seeds, ops + 2-layer model");
    auto t0 = Clock::now();
    double worst = 0.0;
    for (uint64_t seed = 0; seed < 10; ++seed) {
        auto check = [&](const BuildFn& fn, const std::vector<Dims>& shapes) {
            worst = std::max(worst, max_rel_grad_error(fn, random_inputs(shapes, seed)));
        };
        check([](GraphD& g, std::vector<TensorD>& in) { return g.sum_all(g.matmul(in[0], in[1])); },
              {{3, 4}, {4, 2}});
        check([](GraphD& g, std::vector<TensorD>& in) { return g.sum_all(g.matmul(in[0], in[1])); },
              {{2, 3, 4}, {2, 4, 3}});
        check([](GraphD& g, std::vector<TensorD>& in) { return g.sum_all(g.mul(g.add(in[0], in[1]), in[2])); },
              {{3, 4}, {3, 4}, {3, 4}});
        check([](GraphD& g, std::vector<TensorD>& in) { return g.sum_all(g.add(in[0], in[1])); },
              {{3, 4}, {4}});
        check([](GraphD& g, std::vector<TensorD>& in) { return g.sum_all(g.mul(g.silu(in[0]), in[1])); },
              {{3, 4}, {3, 4}});
        check([](GraphD& g, std::vector<TensorD>& in) { return g.sum_all(g.mul(g.softmax(in[0], 1), in[1])); },
              {{3, 5}, {3, 5}});
        check([](GraphD& g, std::vector<TensorD>& in) { return g.sum_all(g.mul(g.causal_softmax(in[0]), in[1])); },
              {{2, 4, 4}, {2, 4, 4}});
        check([](GraphD& g, std::vector<TensorD>& in) { return g.sum_all(g.mul(g.rmsnorm(in[0], in[1]), in[2])); },
              {{3, 6}, {6}, {3, 6}});
        check([](GraphD& g, std::vector<TensorD>& in) {
                  return g.sum_all(g.mul(g.embedding(in[0], {0, 2, 1}), in[1]));
              },
              {{3, 4}, {3, 4}});
        check([](GraphD& g, std::vector<TensorD>& in) { return g.sum_all(g.mul(g.rope(in[0]), in[1])); },
              {{2, 3, 4}, {2, 3, 4}});
        check([](GraphD& g, std::vector<TensorD>& in) {
                  return g.sum_all(g.mul(g.transpose(in[0], {1, 0, 2}), in[1]));
              },
              {{2, 3, 4}, {3, 2, 4}});
        check([](GraphD& g, std::vector<TensorD>& in) { return g.sum_all(g.mul(g.reshape(in[0], {4, 6}), in[1])); },
              {{2, 3, 4}, {4, 6}});
        check([](GraphD& g, std::vector<TensorD>& in) { return g.sum_all(g.mul(g.row(in[0], 1), in[1])); },
              {{3, 4}, {1, 4}});
        check([](GraphD& g, std::vector<TensorD>& in) { return g.sum_all(g.mul(g.dropout(in[0], 0.3, 5), in[1])); },
              {{3, 4}, {3, 4}});
        check([](GraphD& g, std::vector<TensorD>& in) { return g.sum_all(g.mul(g.mean_rows(in[0]), in[1])); },
              {{5, 3}, {3}});
        check([](GraphD& g, std::vector<TensorD>& in) {
                  return g.cross_entropy_masked(in[0], {1, 0, 3}, {1, 1, 1});
              },
              {{3, 4}});
        check([](GraphD& g, std::vector<TensorD>& in) { return g.logistic_loss(in[0]); }, {{1}});
        check([](GraphD& g, std::vector<TensorD>& in) {
                  auto w = g.softmax(in[2], 1);
                  return g.sum_all(g.moe_combine_token({in[0], in[1]}, w));
              },
              {{3, 4}, {3, 4}, {3, 2}});
        check([](GraphD& g, std::vector<TensorD>& in) {
                  auto w = g.softmax(in[2], 0);
                  return g.sum_all(g.moe_combine_seq({in[0], in[1]}, w));
              },
              {{3, 4}, {3, 4}, {2}});
    }
    c.expect(worst < 1e-4, "op-level relative gradient error exceeds 1e-4");

    // end-to-end 2-layer model, sampled coordinates
    ModelConfig mc;
    mc.vocab = 11;
    mc.layers = 2;
    mc.dim = 16;
    mc.heads = 2;
    mc.ffn = 24;
    mc.max_seq = 16;
    std::vector<int> tokens = {1, 4, 2, 7, 0};
    std::vector<int> targets = {4, 2, 7, 0, 9};
    std::vector<uint8_t> mask = {0, 1, 1, 1, 1};
    double model_worst = 0.0;
    for (uint64_t seed = 0; seed < 10; ++seed) {
        ParamsT<double> p = init_params<double>(mc, seed, 0.25);
        auto build = [&](GraphD& g) {
            return g.cross_entropy_masked(forward_dense(g, p, tokens, mc), targets, mask);
        };
        GraphD g;
        g.backward(build(g));
        for (auto& [name, tensor] : p.list) {
            tensor->ensure_grad();
            for (int s = 0; s < 3; ++s) {
                size_t ix = static_cast<size_t>(rng_u64(seed ^ 0x5a5a, s * 977 + tensor->data.size()) %
                                                tensor->data.size());
                const double saved = tensor->data[ix], h = 5e-4;
                tensor->data[ix] = saved + h;
                GraphD gp;
                double fp = build(gp)->data[0];
                tensor->data[ix] = saved - h;
                GraphD gm;
                double fm = build(gm)->data[0];
                tensor->data[ix] = saved;
                double numeric = (fp - fm) / (2 * h);
                double denom = std::max({std::fabs(tensor->grad[ix]), std::fabs(numeric), 1e-2});
                model_worst = std::max(model_worst, std::fabs(tensor->grad[ix] - numeric) / denom);
            }
        }
    }
    c.expect(model_worst < 1e-4, "end-to-end model gradient error exceeds 1e-4");
    c.expect(seconds_since(t0) < 60.0, "gradient checks exceeded one minute");
}

TEST_CASE("criterion 2: merge exactness") {
    Criterion c(2, "FFNs bit-copied, trunk is the 64-bit mean, identical-expert merge is bit-equal");
    ModelConfig mc;
    mc.vocab = 17;
    mc.layers = 2;
    mc.dim = 8;
    mc.heads = 2;
    mc.ffn = 12;
    mc.max_seq = 16;
    std::vector<Checkpoint> experts;
    for (uint64_t s : {10u, 20u, 30u, 40u})
        experts.push_back(params_to_checkpoint(init_params<float>(mc, s), mc, {{"seed", s}}));
    MergeOptions mo;
    mo.router_init = RouterInit::kZeros;
    Checkpoint merged = merge(experts, mo);

    bool ffn_ok = true, trunk_ok = true;
    for (const auto& [name, t] : merged.tensors) {
        size_t ep = name.find(".experts.");
        if (name.find(".gate.weight") != std::string::npos && ep == std::string::npos) continue;
        if (ep != std::string::npos) {
            size_t id_start = ep + 9, id_end = name.find('.', id_start);
            int e = std::stoi(name.substr(id_start, id_end - id_start));
            std::string src = name.substr(0, ep) + ".ffn." + name.substr(id_end + 1);
            ffn_ok = ffn_ok && std::memcmp(t->data.data(), experts[static_cast<size_t>(e)].at(src)->data.data(),
                                           t->data.size() * 4) == 0;
        } else {
            // independent 64-bit reference mean, fixed order
            for (size_t i = 0; i < t->data.size() && trunk_ok; ++i) {
                double acc = 0.0;
                for (const auto& ex : experts) acc += static_cast<double>(ex.at(name)->data[i]);
                float ref = static_cast<float>(acc / 4.0);
                trunk_ok = t->data[i] == ref;  // exact: same rounding path, 0 ulp apart
            }
        }
    }
    c.expect(ffn_ok, "an expert FFN tensor is not bit-identical in its slot");
    c.expect(trunk_ok, "an averaged trunk tensor deviates from the 64-bit reference mean");

    // merge of N identical experts: forward bit-equal to the dense source
    Checkpoint clones = merge({experts[0], experts[0], experts[0], experts[0]}, mo);
    Params dense = params_from_checkpoint(experts[0], mc);
    std::vector<int> tokens = {1, 2, 3, 4, 5};
    Graph gd;
    auto ref_logits = forward_dense(gd, dense, tokens, mc);
    ModelConfig moe_cfg = config_from_checkpoint(clones);
    bool fwd_ok = true;
    for (RoutingPolicy policy : {RoutingPolicy::kTop1Token, RoutingPolicy::kTop2Token,
                                 RoutingPolicy::kSoftSequence, RoutingPolicy::kHardSequence,
                                 RoutingPolicy::kDomain}) {
        moe_cfg.routing = policy;
        Params pm = params_from_checkpoint(clones, moe_cfg);
        RoutingDecision dec;
        dec.policy = policy;
        dec.seq_weights = {0, 1, 0, 0};
        dec.selected = {1};
        RouteInput route{policy, &dec};
        Graph gm;
        auto logits = forward_moe(gm, pm, tokens, moe_cfg, route);
        fwd_ok = fwd_ok &&
                 std::memcmp(logits->data.data(), ref_logits->data.data(), logits->data.size() * 4) == 0;
    }
    c.expect(fwd_ok, "identical-expert merge is not bit-equal to the dense source for some policy");
}

TEST_CASE("criterion 3: routing simplex properties, 1000 random inputs per policy") {
    Criterion c(3, "weights >= 0, selected sum 1 +- 1e-6, unselected exactly 0, ties documented");
    const int64_t t = 4, d = 8, n = 4;
    bool ok = true;
    for (uint64_t trial = 0; trial < 1000 && ok; ++trial) {
        std::vector<float> x(static_cast<size_t>(t * d)), w(static_cast<size_t>(d * n));
        for (size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(4 * rng_uniform(trial, i) - 2);
        for (size_t i = 0; i < w.size(); ++i) w[i] = static_cast<float>(2 * rng_uniform(trial + 7000, i) - 1);
        for (int k : {1, 2}) {
            RoutingDecision r = route_tokens_topk(x, t, d, w, n, k);
            for (int64_t i = 0; i < t; ++i) {
                double sum = 0;
                int selected = 0;
                for (int e = 0; e < n; ++e) {
                    double we = r.token_weights[static_cast<size_t>(i)][static_cast<size_t>(e)];
                    ok = ok && we >= 0.0;
                    if (we != 0.0) ++selected;
                    sum += we;
                }
                ok = ok && selected <= k && std::fabs(sum - 1.0) <= 1e-6;
            }
        }
        for (bool soft : {true, false}) {
            RoutingDecision r = route_sequence(x, t, d, w, n, soft);
            double sum = 0;
            for (int e = 0; e < n; ++e) {
                ok = ok && r.seq_weights[static_cast<size_t>(e)] >= 0.0;
                sum += r.seq_weights[static_cast<size_t>(e)];
            }
            ok = ok && std::fabs(sum - 1.0) <= 1e-6;
        }
        std::vector<std::vector<float>> cents = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
        std::vector<float> q = {static_cast<float>(rng_uniform(trial, 91) + 0.1),
                                static_cast<float>(rng_uniform(trial, 92)),
                                static_cast<float>(rng_uniform(trial, 93))};
        RoutingDecision r = route_domain(q, cents);
        double sum = 0;
        int zeros = 0;
        for (double we : r.seq_weights) {
            sum += we;
            if (we == 0.0) ++zeros;
        }
        ok = ok && std::fabs(sum - 1.0) <= 1e-6 && zeros == 2;
        // invariance under positive scaling of the query
        std::vector<float> q2 = q;
        for (float& v : q2) v *= 37.5f;
        ok = ok && route_domain(q2, cents).selected == r.selected;
    }
    c.expect(ok, "a routing decision violated the simplex or scaling invariants");

    // documented tie-breaks: lowest index everywhere
    std::vector<float> x1(8, 0.0f);
    x1[0] = 1.0f;
    std::vector<float> wz(8 * 4, 0.0f);
    RoutingDecision tie_tok = route_tokens_topk(x1, 1, 8, wz, 4, 2);
    c.expect(tie_tok.token_weights[0][0] == 0.5 && tie_tok.token_weights[0][1] == 0.5 &&
                 tie_tok.token_weights[0][2] == 0.0,
             "top-2 tie did not select the two lowest expert indices");
    RoutingDecision tie_seq = route_sequence(x1, 1, 8, wz, 4, false);
    c.expect(tie_seq.selected[0] == 0, "hard-sequence tie did not break to the lowest index");
    std::vector<std::vector<float>> cents = {{1, 0}, {1, 0}};
    c.expect(route_domain({1, 0}, cents).selected[0] == 0, "domain tie did not break to the lowest index");
}

TEST_CASE("criterion 4: balanced k-means on the synthetic corpus") {
    Criterion c(4, "balance <= 1, purity > 0.9, seed-42 determinism, brute-force 4-point case");
    Fixture& fx = Fixture::get();
    ModelConfig mc = config_from_checkpoint(fx.seed);
    Embedder emb = Embedder::mean_pool(fx.seed_params, mc);
    EmbeddingMatrix x = emb.embed_all(fx.corpus.train);
    ClusterModel model = balanced_kmeans(x, 4, 42);
    auto sizes = model.sizes();
    c.expect(*std::max_element(sizes.begin(), sizes.end()) -
                     *std::min_element(sizes.begin(), sizes.end()) <=
                 1,
             "cluster sizes differ by more than one");
    std::vector<std::string> labels;
    for (const auto& t : fx.corpus.train) labels.push_back(t.source);
    double purity = cluster_purity(model.assignments, labels, 4);
    std::printf("[criterion 4]   purity vs generating template: %.3f\n", purity);
    c.expect(purity > 0.9, "purity vs generating template not above 0.9");

    ClusterModel again = balanced_kmeans(x, 4, 42);
    c.expect(again.assignments == model.assignments, "seed-42 rerun is not bit-identical");
    bool cents_equal = true;
    for (size_t i = 0; i < model.centroids.size(); ++i)
        cents_equal = cents_equal && model.centroids[i] == again.centroids[i];
    c.expect(cents_equal, "seed-42 centroids are not bit-identical");

    // 4 points on the unit circle at square corners, N=2, vs exhaustive enumeration
    const float s = static_cast<float>(1.0 / std::sqrt(2.0));
    EmbeddingMatrix sq;
    sq.rows = 4;
    sq.dim = 2;
    sq.data = {s, s, s, -s, -s, s, -s, -s};
    ClusterModel two = balanced_kmeans(sq, 2, 42);
    auto cost_of = [&](const std::vector<int>& assign) {
        std::vector<std::vector<double>> acc(2, std::vector<double>(2, 0.0));
        std::vector<int> cnt(2, 0);
        for (int i = 0; i < 4; ++i) {
            acc[static_cast<size_t>(assign[static_cast<size_t>(i)])][0] += sq.data[static_cast<size_t>(2 * i)];
            acc[static_cast<size_t>(assign[static_cast<size_t>(i)])][1] += sq.data[static_cast<size_t>(2 * i + 1)];
            ++cnt[static_cast<size_t>(assign[static_cast<size_t>(i)])];
        }
        double total = 0.0;
        for (int k = 0; k < 2; ++k) {
            double cx = acc[static_cast<size_t>(k)][0] / cnt[static_cast<size_t>(k)];
            double cy = acc[static_cast<size_t>(k)][1] / cnt[static_cast<size_t>(k)];
            double norm = std::sqrt(cx * cx + cy * cy);
            if (norm > 0) {
                cx /= norm;
                cy /= norm;
            }
            for (int i = 0; i < 4; ++i) {
                if (assign[static_cast<size_t>(i)] != k) continue;
                double dx = sq.data[static_cast<size_t>(2 * i)] - cx, dy = sq.data[static_cast<size_t>(2 * i + 1)] - cy;
                total += dx * dx + dy * dy;
            }
        }
        return total;
    };
    double best = 1e30;
    for (int a = 0; a < 4; ++a)
        for (int b = a + 1; b < 4; ++b) {
            std::vector<int> assign(4, 1);
            assign[static_cast<size_t>(a)] = 0;
            assign[static_cast<size_t>(b)] = 0;
            best = std::min(best, cost_of(assign));
        }
    c.expect(std::fabs(cost_of(two.assignments) - best) < 1e-9,
             "balanced 2-clustering of the square does not match exhaustive enumeration");
}

TEST_CASE("criterion 5: partition ablation ordering under an equal step budget") {
    Criterion c(5, "semantic+domain beats no-split, semantic >= random, < 30 min");
    Fixture& fx = Fixture::get();
    const PartitionAblation& ab = fx.partition_scores();
    auto mean_bleu = [&](PartitionPolicy p) {
        for (size_t i = 0; i < ab.policies.size(); ++i)
            if (ab.policies[i] == p) {
                std::vector<double> v;
                for (const auto& s : ab.per_seed[i]) v.push_back(s.bleu);
                return aggregate_runs(v).mean;
            }
        throw Error("policy missing from ablation");
    };
    double none = mean_bleu(PartitionPolicy::kNone);
    double random = mean_bleu(PartitionPolicy::kRandom);
    double semantic = mean_bleu(PartitionPolicy::kSemantic);
    std::printf("[criterion 5]   mean BLEU: none=%.2f random=%.2f lexical=%.2f semantic=%.2f (%.0fs)\n",
                none, random, mean_bleu(PartitionPolicy::kLexical), semantic, fx.ablation_seconds);
    c.expect(semantic > none, "semantic split + domain routing does not beat the no-split baseline");
    c.expect(semantic >= random, "semantic split falls below the random split");
    c.expect(fx.ablation_seconds < 1800.0, "partition ablation exceeded the 30-minute budget");
}

TEST_CASE("criterion 6: expert-count trend, N=4 vs N=1") {
    Criterion c(6, "mean BLEU with four experts >= dense single expert over 3 seeds");
    Fixture& fx = Fixture::get();
    // under the equal-step pipeline, N=1 is exactly the no-split dense model
    // and N=4 the semantic MoE, so the ablation scores carry the trend
    const PartitionAblation& ab = fx.partition_scores();
    std::vector<double> n1, n4;
    for (size_t i = 0; i < ab.policies.size(); ++i) {
        for (const auto& s : ab.per_seed[i]) {
            if (ab.policies[i] == PartitionPolicy::kNone) n1.push_back(s.bleu);
            if (ab.policies[i] == PartitionPolicy::kSemantic) n4.push_back(s.bleu);
        }
    }
    double m1 = aggregate_runs(n1).mean, m4 = aggregate_runs(n4).mean;
    std::printf("[criterion 6]   mean BLEU: N=1 %.2f, N=4 %.2f\n", m1, m4);
    c.expect(m4 >= m1, "four experts do not reach the single-expert baseline");
}

TEST_CASE("criterion 7: oracle BoN monotonicity and N=128 gain") {
    Criterion c(7, "per-prompt oracle scores non-decreasing in N; mean@128 - mean@1 >= 2 BLEU");
    Fixture& fx = Fixture::get();
    const PipelineArtifacts& arts = fx.semantic_pipeline();
    Verifier oracle;
    oracle.kind = VerifierKind::kOracle;
    oracle.metric = oracle_bleu();
    std::vector<double> gains;
    bool monotone = true;
    for (uint64_t s : {21ull, 42ull, 84ull}) {
        BonRun run = run_bon(arts, fx.corpus.test, 128, oracle, fx.cfg, s, 16);
        for (size_t p = 0; p < run.candidates.size(); ++p) {
            double prev = -1.0;
            for (size_t gi = 0; gi < run.result.grid.size(); ++gi) {
                double score =
                    bleu(run.candidates[p].candidates[run.result.chosen[gi][p]].text, run.references[p]);
                monotone = monotone && score >= prev;
                prev = score;
            }
        }
        gains.push_back(run.result.mean_metric.back() - run.result.mean_metric.front());
        std::printf("[criterion 7]   seed %llu: N=1 %.2f -> N=128 %.2f\n", (unsigned long long)s,
                    run.result.mean_metric.front(), run.result.mean_metric.back());
    }
    c.expect(monotone, "an oracle-selected per-prompt score decreased with larger N");
    double mean_gain = aggregate_runs(gains).mean;
    c.expect(mean_gain >= 2.0, "mean oracle gain at N=128 is below 2 BLEU points");
}

TEST_CASE("criterion 8: ORM usefulness") {
    Criterion c(8, "init pair loss ln 2, ORM >= random verifier at N=16 (2/3 seeds), corruption >= 80%");
    Fixture& fx = Fixture::get();
    const PipelineArtifacts& arts = fx.semantic_pipeline();

    // pairwise loss at initialization: zero score head makes the margin exactly 0
    ModelConfig init_cfg = config_from_checkpoint(fx.seed);
    init_cfg.scorer = true;
    Params init_scorer = init_params<float>(init_cfg, 7);
    for (auto& [name, t] : init_scorer.list)
        if (fx.seed.has(name)) t->data = fx.seed.at(name)->data;
    auto prompt0 = prompt_tokens_truncated(fx.corpus.train[0].context, fx.corpus.train[0].term, 64);
    std::vector<int> comp0 = tokenize(fx.corpus.train[0].definition);
    comp0.push_back(kEos);
    double margin = orm_score(init_scorer, init_cfg, prompt0, comp0) -
                    orm_score(init_scorer, init_cfg, prompt0, tokenize("anything else at all"));
    Graph g0;
    auto diff = make_tensor<float>({1}, std::vector<float>{static_cast<float>(margin)});
    double init_loss = g0.logistic_loss(diff)->data[0];
    c.expect(std::fabs(init_loss - std::log(2.0)) <= 1e-3, "initial per-pair loss is not ln 2 +- 1e-3");

    Checkpoint orm = run_orm_pipeline(fx.seed, arts, fx.corpus.train, fx.cfg, 32, 8, 48);
    ModelConfig ocfg = config_from_checkpoint(orm);
    Params oparams = params_from_checkpoint(orm, ocfg);

    // ORM-selected vs random-verifier mean BLEU at N=16 on shared candidates
    ModelConfig mc = config_from_checkpoint(arts.model);
    Params mp = params_from_checkpoint(arts.model, mc);
    GenModel gm{mc, &mp, mc.routing};
    int wins = 0;
    for (uint64_t s : {21ull, 42ull, 84ull}) {
        std::vector<CandidateSet> sets;
        std::vector<std::string> refs;
        for (size_t i = 0; i < std::min<size_t>(fx.corpus.test.size(), 24); ++i) {
            const Triplet& t = fx.corpus.test[i];
            auto prompt = prompt_tokens_truncated(t.context, t.term, mc.max_seq / 2);
            SamplerConfig sc = fx.cfg.sampler;
            sc.seed = derive_seed(s, i);
            sc.max_new_tokens = mc.max_seq - static_cast<int>(prompt.size());
            RoutingDecision dec = domain_decision_for(t, arts.clusters, arts.embedder);
            sets.push_back(repeated_sample(gm, prompt, 16, sc, &dec, fx.cfg.jobs));
            refs.push_back(t.definition);
        }
        Verifier vo;
        vo.kind = VerifierKind::kOrm;
        vo.scorer_params = &oparams;
        vo.scorer_cfg = &ocfg;
        Verifier vr;
        vr.kind = VerifierKind::kRandom;
        vr.seed = s;
        double orm_bleu = bon_curve(sets, refs, vo, {16}, oracle_bleu()).mean_metric[0];
        double rnd_bleu = bon_curve(sets, refs, vr, {16}, oracle_bleu()).mean_metric[0];
        std::printf("[criterion 8]   seed %llu: ORM@16 %.2f vs random@16 %.2f\n", (unsigned long long)s,
                    orm_bleu, rnd_bleu);
        if (orm_bleu >= rnd_bleu) ++wins;
    }
    c.expect(wins >= 2, "ORM selection beat the random verifier in fewer than 2 of 3 seeds");

    // gold vs shuffled-word corruption on held-out pairs
    int correct = 0, total = 0;
    for (size_t i = 0; i < fx.corpus.test.size() && total < 100; ++i) {
        const Triplet& t = fx.corpus.test[i];
        std::vector<std::string> words;
        std::string cur;
        for (char ch : t.definition) {
            if (ch == ' ') {
                if (!cur.empty()) words.push_back(cur);
                cur.clear();
            } else {
                cur.push_back(ch);
            }
        }
        if (!cur.empty()) words.push_back(cur);
        for (size_t k = words.size(); k > 1; --k)
            std::swap(words[k - 1], words[static_cast<size_t>(rng_u64(0xC0, i * 64 + k) % k)]);
        std::string shuffled;
        for (size_t w = 0; w < words.size(); ++w) {
            if (w) shuffled += " ";
            shuffled += words[w];
        }
        if (shuffled == t.definition) continue;
        auto prompt = prompt_tokens_truncated(t.context, t.term, ocfg.max_seq / 2);
        std::vector<int> gold = tokenize(t.definition);
        gold.push_back(kEos);
        std::vector<int> corrupt = tokenize(shuffled);
        corrupt.push_back(kEos);
        if (orm_score(oparams, ocfg, prompt, gold) > orm_score(oparams, ocfg, prompt, corrupt)) ++correct;
        ++total;
    }
    double rate = static_cast<double>(correct) / static_cast<double>(total);
    std::printf("[criterion 8]   corruption ranking: %d/%d = %.2f\n", correct, total, rate);
    c.expect(rate >= 0.8, "ORM ranks gold above shuffled corruption on fewer than 80% of pairs");
}

TEST_CASE("criterion 9: metric oracles") {
    Criterion c(9, "BLEU/ROUGE match hand-computed goldens to 1e-6; exact identities; kappa");
    struct GoldenCase {
        const char* hyp;
        const char* ref;
        double bleu_v;
        double rouge_v;
    };
    const GoldenCase golden[] = {
        {"the cat sat on the mat", "the cat sat on the mat", 100.0, 1.0},
        {"the the the", "the cat", 48.549177170732335, 0.40000000000000002},
        {"a b c d", "a c d", 45.180100180492232, 0.8571428571428571},
        {"a quick brown fox jumps over a lazy dog", "the quick brown fox jumped over the lazy dog",
         26.726124191242434, 0.66666666666666663},
        {"it is a guide to action which ensures that the military always obeys the commands of the party",
         "it is a guide to action that ensures that the military will forever heed party commands",
         42.085980695240913, 0.6470588235294118},
        {"definition of a term", "a term is defined here", 31.794408830081888, 0.44444444444444448},
        {"short", "a rather longer reference text", 0.0, 0.0},
        {"completely disjoint tokens here", "nothing matches at all anywhere", 0.0, 0.0},
        {"a savory dish that is served with rice", "a savory dish that tastes of smoked pepper",
         34.572078464194099, 0.5},
        {"Punctuation, matters!", "punctuation , matters !", 100.0, 1.0},
    };
    bool ok = true;
    for (const auto& gc : golden) {
        ok = ok && std::fabs(bleu(gc.hyp, gc.ref) - gc.bleu_v) < 1e-6;
        ok = ok && std::fabs(rouge_l(gc.hyp, gc.ref) - gc.rouge_v) < 1e-6;
    }
    c.expect(ok, "a golden-file case deviates by more than 1e-6");
    c.expect(bleu("identical pair", "identical pair") == 100.0, "identical pair BLEU is not exactly 100");
    c.expect(rouge_l("identical pair", "identical pair") == 1.0, "identical pair ROUGE is not exactly 1");
    c.expect(fleiss_kappa({{3, 0}, {0, 3}, {3, 0}}) == 1.0, "perfect-agreement kappa is not exactly 1");
}

TEST_CASE("criterion 10: checkpoint format") {
    Criterion c(10, "write/read/write byte identity, 20 fuzzed files rejected without crashing");
    ModelConfig mc;
    mc.vocab = 13;
    mc.layers = 1;
    mc.dim = 8;
    mc.heads = 2;
    mc.ffn = 12;
    mc.max_seq = 16;
    Checkpoint ckpt = params_to_checkpoint(init_params<float>(mc, 4), mc, {{"name", "acceptance"}});
    std::vector<uint8_t> a = encode_checkpoint(ckpt);
    std::vector<uint8_t> b = encode_checkpoint(decode_checkpoint(a));
    c.expect(a == b, "write/read/write differs");

    // record boundaries: a prefix ending exactly on one is a shorter valid
    // container by construction, so truncations are aimed *inside* records
    std::vector<size_t> boundaries;
    {
        size_t pos = 16 + ckpt.metadata.dump().size();
        boundaries.push_back(pos);
        for (const auto& [name, t] : ckpt.tensors) {
            pos += 4 + name.size() + 1 + 4 + 8 * t->dims.size() + 4 * t->data.size();
            boundaries.push_back(pos);
        }
    }
    auto mid_record = [&](size_t want) {
        size_t L = std::max<size_t>(1, std::min(want, a.size() - 1));
        while (std::find(boundaries.begin(), boundaries.end(), L) != boundaries.end()) --L;
        return std::max<size_t>(1, L);
    };
    int rejected = 0;
    for (int i = 0; i < 20; ++i) {
        std::vector<uint8_t> bad = a;
        switch (i % 5) {
            case 0: bad.resize(mid_record(1 + rng_u64(3, static_cast<uint64_t>(i)) % (a.size() - 1))); break;
            case 1: bad[static_cast<size_t>(i % 4)] ^= 0x5A; break;
            case 2: bad[5] = 0x77; break;
            case 3:
                bad[8] = 0xFF;
                bad[12] = 0xFF;
                break;
            case 4: {
                // clobber the first record's length-prefix fields
                size_t off = 16 + ckpt.metadata.dump().size();
                for (size_t k = off; k < std::min(off + 8, bad.size()); ++k)
                    bad[k] = static_cast<uint8_t>(0xF0 + i);
                break;
            }
        }
        try {
            decode_checkpoint(bad);
        } catch (const FormatError&) {
            ++rejected;
        }
    }
    c.expect(rejected == 20, "a fuzzed checkpoint was not rejected with a framing/format error");
}

TEST_CASE("criterion 11: ablate-partition determinism") {
    Criterion c(11, "two identical pipeline runs produce byte-identical TSV outputs");
    // a reduced config exercises the identical code path at a fraction of the cost
    const char* cli = std::getenv("LMLX_CLI");
    fs::path base = fs::temp_directory_path() / "lmlx_acceptance_c11";
    fs::remove_all(base);
    fs::create_directories(base);
    nlohmann::json fast = PipelineConfig().to_json();
    fast["seed_train"]["max_steps"] = 30;
    fast["branch"]["max_steps"] = 24;
    fast["tune"]["max_steps"] = 8;
    fast["eval_max_examples"] = 8;
    fast["run_seeds"] = {21, 42};
    std::ofstream((base / "config.json").string()) << fast.dump();

    std::string tsv1, tsv2;
    if (cli && *cli) {
        std::string data = (base / "data").string();
        std::string cmd0 = std::string(cli) + " synth-data --out-dir " + data + " --n 600 --seed 7 > /dev/null";
        c.expect(std::system(cmd0.c_str()) == 0, "synth-data subcommand failed");
        for (int run = 1; run <= 2; ++run) {
            std::string out = (base / ("out" + std::to_string(run))).string();
            std::string cmd = std::string(cli) + " --config " + (base / "config.json").string() +
                              " ablate partition --data-dir " + data + " --out-dir " + out + " > /dev/null";
            c.expect(std::system(cmd.c_str()) == 0, "ablate partition subcommand failed");
        }
        std::ifstream f1((base / "out1" / "partition.tsv").string(), std::ios::binary);
        std::ifstream f2((base / "out2" / "partition.tsv").string(), std::ios::binary);
        tsv1.assign(std::istreambuf_iterator<char>(f1), {});
        tsv2.assign(std::istreambuf_iterator<char>(f2), {});
    } else {
        // fallback: run the library driver twice in-process
        SynthConfig sc;
        sc.n_examples = 600;
        SynthCorpus corpus = synth_corpus(sc);
        PipelineConfig cfg = PipelineConfig::from_json(fast);
        Checkpoint seed1 = make_seed_checkpoint(corpus.train, cfg);
        tsv1 = ablate_partition(seed1, corpus.train, corpus.valid, corpus.test, cfg);
        Checkpoint seed2 = make_seed_checkpoint(corpus.train, cfg);
        tsv2 = ablate_partition(seed2, corpus.train, corpus.valid, corpus.test, cfg);
    }
    c.expect(!tsv1.empty(), "first ablation produced no output");
    c.expect(tsv1 == tsv2, "two identical runs produced different TSV bytes");
}
