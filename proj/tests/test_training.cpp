#include <cmath>

#include "doctest.h"
#include "lmlx/pipeline.hpp"
#include "lmlx/synth.hpp"
#include "lmlx/training.hpp"

using namespace lmlx;

namespace {

ModelConfig tiny_cfg() {
    ModelConfig c;
    c.vocab = kVocabSize;
    c.layers = 1;
    c.dim = 32;
    c.heads = 4;
    c.ffn = 48;
    c.max_seq = 128;
    return c;
}

TrainConfig fast_train(int steps, uint64_t seed = 42) {
    TrainConfig t;
    t.max_steps = steps;
    t.batch_tokens = 256;
    t.max_lr = 3e-3;
    t.min_lr = 3e-4;
    t.dropout = 0.0;
    t.seed = seed;
    t.val_max_examples = 8;
    return t;
}

}  // namespace

TEST_CASE("lr schedule: zero at step 0, linear warmup, cosine to min") {
    TrainConfig cfg;
    cfg.max_lr = 1.0;
    cfg.min_lr = 0.1;
    cfg.warmup_ratio = 0.1;
    const int64_t total = 100;
    CHECK(lr_at(cfg, 0, total) == 0.0);
    CHECK(lr_at(cfg, 5, total) == doctest::Approx(0.5));
    CHECK(lr_at(cfg, 10, total) == doctest::Approx(1.0));  // warmup boundary hits max
    CHECK(lr_at(cfg, 55, total) == doctest::Approx(0.1 + 0.45 * (1.0 + std::cos(3.141592653589793 * 0.5))));
    CHECK(lr_at(cfg, 100, total) == doctest::Approx(0.1));
    for (int64_t s = 11; s <= 100; ++s) CHECK(lr_at(cfg, s, total) <= lr_at(cfg, s - 1, total) + 1e-12);
}

TEST_CASE("adamw: zero gradient shrinks decayed parameters by exactly (1 - lr*wd)") {
    auto w = make_tensor<float>({2, 3}, {0.5f, -1.25f, 2.0f, 0.125f, -0.75f, 3.5f}, true);
    auto norm = make_tensor<float>({3}, {1.0f, 0.5f, -0.25f}, true);
    w->ensure_grad();
    norm->ensure_grad();
    std::vector<float> w_before = w->data, n_before = norm->data;
    AdamW opt(0.9, 0.95, 1e-8, 0.01);
    const double lr = 0.1;
    opt.step({w, norm}, lr);
    for (size_t i = 0; i < w->data.size(); ++i)
        CHECK(w->data[i] == static_cast<float>(static_cast<double>(w_before[i]) * (1.0 - lr * 0.01)));
    // rank-1 scales are not decayed
    CHECK(norm->data == n_before);
}

TEST_CASE("gradient clipping caps the global norm") {
    auto a = make_tensor<float>({2, 2}, true);
    auto b = make_tensor<float>({3}, true);
    a->ensure_grad();
    b->ensure_grad();
    for (auto& g : a->grad) g = 3.0f;
    for (auto& g : b->grad) g = -4.0f;
    double before = clip_global_norm({a, b}, 1.0);
    CHECK(before > 1.0);
    double sq = 0.0;
    for (float g : a->grad) sq += static_cast<double>(g) * g;
    for (float g : b->grad) sq += static_cast<double>(g) * g;
    CHECK(std::sqrt(sq) == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("memorization: a single-example dataset trains to near-zero loss") {
    ModelConfig mc = tiny_cfg();
    std::vector<Triplet> one = {{"the fernil grows near the hedge", "fernil", "a leafy plant", "", -1}};
    Params params = init_params<float>(mc, 1);
    TrainConfig tc = fast_train(220);
    TrainResult r = train_loop(std::move(params), mc, one, {}, tc);
    CHECK(r.log.back().loss < 0.05);
}

TEST_CASE("identical seed and data give bit-identical checkpoints") {
    ModelConfig mc = tiny_cfg();
    SynthCorpus corpus = synth_corpus({160, 3, 4, 4, 0.8, 0.1});
    Params seed_params = init_params<float>(mc, 5);
    Checkpoint seed = params_to_checkpoint(seed_params, mc, {});
    TrainConfig tc = fast_train(8);
    tc.dropout = 0.1;  // exercised through the keyed mask
    Checkpoint a = train_expert(seed, corpus.train, corpus.valid, tc);
    Checkpoint b = train_expert(seed, corpus.train, corpus.valid, tc);
    CHECK(encode_checkpoint(a) == encode_checkpoint(b));
}

TEST_CASE("branch_train: swapping partition order permutes outputs") {
    ModelConfig mc = tiny_cfg();
    SynthCorpus corpus = synth_corpus({160, 3, 4, 4, 0.8, 0.1});
    std::vector<Triplet> d0(corpus.train.begin(), corpus.train.begin() + 20);
    std::vector<Triplet> d1(corpus.train.begin() + 20, corpus.train.begin() + 40);
    Checkpoint seed = params_to_checkpoint(init_params<float>(mc, 5), mc, {});
    TrainConfig tc = fast_train(4);
    auto ab = branch_train(seed, {d0, d1}, {}, tc);
    auto ba = branch_train(seed, {d1, d0}, {}, tc);
    // metadata records the slot, tensor payloads must swap exactly
    for (const auto& [name, t] : ab[0].tensors) CHECK(t->data == ba[1].at(name)->data);
    for (const auto& [name, t] : ab[1].tensors) CHECK(t->data == ba[0].at(name)->data);

    auto single = branch_train(seed, {d0}, {}, tc);
    Checkpoint direct = train_expert(seed, d0, {}, tc);
    for (const auto& [name, t] : single[0].tensors) CHECK(t->data == direct.at(name)->data);
}

TEST_CASE("training diverges loudly on non-finite loss") {
    ModelConfig mc = tiny_cfg();
    std::vector<Triplet> data = {{"ctx one", "t1", "some gloss", "", -1},
                                 {"ctx two", "t2", "other gloss", "", -1}};
    Params params = init_params<float>(mc, 1);
    TrainConfig tc = fast_train(30);
    tc.max_lr = 1e8;  // guaranteed blow-up
    tc.warmup_ratio = 0.0;
    tc.grad_clip = 1e9;
    CHECK_THROWS_WITH_AS(train_loop(std::move(params), mc, data, {}, tc), doctest::Contains("diverged"),
                         Error);
}

TEST_CASE("tune_router freezes everything outside the scope bit-exactly") {
    ModelConfig dense = tiny_cfg();
    SynthCorpus corpus = synth_corpus({160, 3, 4, 4, 0.8, 0.1});
    Checkpoint e0 = params_to_checkpoint(init_params<float>(dense, 7), dense, {});
    Checkpoint e1 = params_to_checkpoint(init_params<float>(dense, 8), dense, {});
    MergeOptions mo;
    mo.routing = RoutingPolicy::kTop2Token;
    Checkpoint moe = merge({e0, e1}, mo);
    TrainConfig tc = fast_train(3);
    Checkpoint tuned = tune_router(moe, corpus.train, {}, tc, scope_gates());
    bool gate_changed = false;
    for (const auto& [name, t] : tuned.tensors) {
        if (name.find(".gate.weight") != std::string::npos && name.find("gate_proj") == std::string::npos) {
            if (t->data != moe.at(name)->data) gate_changed = true;
        } else {
            CHECK(t->data == moe.at(name)->data);  // frozen parameters are untouched
        }
    }
    CHECK(gate_changed);
}

TEST_CASE("a zero-LR step leaves the checkpoint unchanged") {
    ModelConfig dense = tiny_cfg();
    SynthCorpus corpus = synth_corpus({160, 3, 4, 4, 0.8, 0.1});
    Checkpoint e0 = params_to_checkpoint(init_params<float>(dense, 7), dense, {});
    Checkpoint e1 = params_to_checkpoint(init_params<float>(dense, 8), dense, {});
    MergeOptions mo;
    mo.routing = RoutingPolicy::kTop2Token;
    Checkpoint moe = merge({e0, e1}, mo);
    TrainConfig tc = fast_train(1);
    tc.max_lr = 0.0;
    tc.min_lr = 0.0;
    tc.warmup_ratio = 0.0;
    Checkpoint tuned = tune_router(moe, corpus.train, {}, tc, scope_all());
    for (const auto& [name, t] : tuned.tensors) CHECK(t->data == moe.at(name)->data);
}

TEST_CASE("orm: zero-initialized head scores exactly zero, pair loss ln 2") {
    ModelConfig mc = tiny_cfg();
    mc.scorer = true;
    Params p = init_params<float>(mc, 11);
    std::vector<int> prompt = prompt_tokens("some context", "term");
    std::vector<int> completion = tokenize("a gloss");
    completion.push_back(kEos);
    CHECK(orm_score(p, mc, prompt, completion) == 0.0);

    Graph g;
    auto diff = make_tensor<float>({1}, std::vector<float>{0.0f});
    CHECK(g.logistic_loss(diff)->data[0] == doctest::Approx(std::log(2.0)).epsilon(1e-6));
    auto big = make_tensor<float>({1}, std::vector<float>{20.0f});
    CHECK(g.logistic_loss(big)->data[0] < 1e-8);
    // invariance to a shared constant: only the difference enters
    auto d1 = make_tensor<float>({1}, std::vector<float>{1.5f - 0.25f});
    auto d2 = make_tensor<float>({1}, std::vector<float>{(1.5f + 100.0f) - (0.25f + 100.0f)});
    CHECK(g.logistic_loss(d1)->data[0] == doctest::Approx(g.logistic_loss(d2)->data[0]).epsilon(1e-6));
}

TEST_CASE("orm training separates chosen from rejected on easy pairs") {
    ModelConfig mc = tiny_cfg();
    Checkpoint seed = params_to_checkpoint(init_params<float>(mc, 3), mc, {});
    std::vector<PreferencePair> pairs;
    for (int i = 0; i < 12; ++i) {
        PreferencePair p;
        p.prompt = prompt_tokens("the fernil grows near the hedge", "fernil");
        p.chosen = tokenize("a leafy plant that blooms in early spring");
        p.chosen.push_back(kEos);
        p.rejected = tokenize("zz qq xx yy ww vv uu");
        p.rejected.push_back(kEos);
        pairs.push_back(p);
    }
    TrainConfig tc = fast_train(40);
    Checkpoint scorer = train_orm(seed, pairs, tc);
    ModelConfig sc = config_from_checkpoint(scorer);
    Params sp = params_from_checkpoint(scorer, sc);
    double rw = orm_score(sp, sc, pairs[0].prompt, pairs[0].chosen);
    double rl = orm_score(sp, sc, pairs[0].prompt, pairs[0].rejected);
    CHECK(rw > rl);
}

TEST_CASE("experts trained on disjoint domains have lower NLL on their own domain") {
    ModelConfig mc = tiny_cfg();
    SynthCorpus corpus = synth_corpus({480, 3, 6, 0, 0.9, 0.05});  // no shared terms
    auto names = synth_domain_names();
    std::vector<std::vector<Triplet>> parts(2);
    for (const auto& t : corpus.train) {
        if (t.source == names[0]) parts[0].push_back(t);
        if (t.source == names[1]) parts[1].push_back(t);
    }
    REQUIRE(parts[0].size() > 20);
    REQUIRE(parts[1].size() > 20);
    Checkpoint seed = params_to_checkpoint(init_params<float>(mc, 5), mc, {});
    TrainConfig tc = fast_train(60);
    tc.batch_tokens = 1024;
    auto experts = branch_train(seed, parts, {}, tc);
    for (int e = 0; e < 2; ++e) {
        ModelConfig emc = config_from_checkpoint(experts[static_cast<size_t>(e)]);
        Params ep = params_from_checkpoint(experts[static_cast<size_t>(e)], emc);
        double own = evaluate_nll(ep, emc, parts[static_cast<size_t>(e)]);
        double other = evaluate_nll(ep, emc, parts[static_cast<size_t>(1 - e)]);
        CHECK(own < other);
    }
}

TEST_CASE("train log formatting") {
    std::vector<TrainLogEntry> log = {{0, 0.0, 5.5, std::numeric_limits<double>::quiet_NaN()},
                                      {1, 0.001, 4.2, 17.5}};
    std::string s = format_train_log(log);
    CHECK(s.find("step\tlr\tloss\tval_bleu") != std::string::npos);
    CHECK(s.find("\t-") != std::string::npos);
    CHECK(s.find("17.5") != std::string::npos);
}
