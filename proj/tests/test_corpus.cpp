#include <set>

#include "doctest.h"
#include "lmlx/corpus.hpp"
#include "lmlx/synth.hpp"
#include "lmlx/tensor.hpp"

using namespace lmlx;

TEST_CASE("tokenize/detokenize round-trips any utf-8 text") {
    CHECK(tokenize("").empty());
    CHECK(detokenize({}) == "");
    CHECK(tokenize("ab") == std::vector<int>{97, 98});
    CHECK(detokenize({97, 98}) == "ab");
    std::string utf8 = "naïve café – 日本語 \t\n";
    CHECK(detokenize(tokenize(utf8)) == utf8);
}

TEST_CASE("render_prompt substitutes verbatim") {
    std::string c = "familiarity with danger makes a brave man braver but less daring";
    CHECK(render_prompt(c, "brave") ==
          "\"" + c + "\" What is the definition of \"brave\"");
    CHECK(render_prompt("x", "y") == "\"x\" What is the definition of \"y\"");
    CHECK_THROWS_AS(render_prompt("", "y"), ValueError);

    auto toks = prompt_tokens(c, "brave");
    CHECK(toks.front() == kBos);
    CHECK(toks.back() == kEos);
    CHECK(detokenize(toks) == render_prompt(c, "brave"));
    CHECK(token_display(toks) == "<bos>" + render_prompt(c, "brave") + "<eos>");
    // re-tokenizing the rendered text round-trips
    CHECK(detokenize(tokenize(render_prompt(c, "brave"))) == render_prompt(c, "brave"));
}

TEST_CASE("prompted example mask covers exactly the definition region plus eos") {
    Triplet t{"the fernil grows near the hedge", "fernil", "a leafy plant that blooms", "", -1};
    PromptedExample ex = make_prompted_example(t, 128);
    auto mask = ex.loss_mask();
    int64_t true_count = 0;
    for (uint8_t m : mask) true_count += m;
    CHECK(true_count == static_cast<int64_t>(tokenize(t.definition).size()) + 1);
    // every masked-in label is a definition byte or the final eos
    auto targets = ex.targets();
    for (size_t i = 0; i < mask.size(); ++i) {
        if (!mask[i]) continue;
        bool is_def_or_eos = (targets[i] < kByteVocab) || (targets[i] == kEos && i + 1 == mask.size());
        CHECK(is_def_or_eos);
    }
    CHECK(detokenize({ex.tokens.begin(), ex.tokens.begin() + ex.prompt_len}) ==
          render_prompt(t.context, t.term));
}

TEST_CASE("long contexts are truncated from the head, term and definition intact") {
    std::string ctx(1000, 'x');
    ctx += " marker tail";
    Triplet t{ctx, "term", "short gloss", "", -1};
    PromptedExample ex = make_prompted_example(t, 128);
    CHECK(static_cast<int>(ex.tokens.size()) <= 128);
    std::string prompt_text = detokenize({ex.tokens.begin(), ex.tokens.begin() + ex.prompt_len});
    CHECK(prompt_text.find("marker tail") != std::string::npos);  // tail of context kept
    CHECK(prompt_text.find("term") != std::string::npos);
    CHECK(prompt_text.find("What is the definition of") != std::string::npos);
    std::string def_text = detokenize({ex.tokens.begin() + ex.prompt_len, ex.tokens.end()});
    CHECK(def_text == "short gloss");
}

TEST_CASE("preprocess applies the drop rules and fans out context arrays") {
    std::string jsonl =
        R"({"term":"alpha","context":"one ctx","definition":"a thing"})" "\n"
        R"({"term":"beta","context":["c1","c2","c3"],"definition":"fans out"})" "\n"
        R"({"term":"","context":"x","definition":"empty term dropped"})" "\n"
        R"({"term":"gamma","context":"","definition":"empty ctx dropped"})" "\n"
        R"({"term":"delta","context":"x","definition":""})" "\n"
        R"({"term":5,"context":"x","definition":"non-string term"})" "\n"
        R"({"term":"eps","context":"x","definition":"ok","source":""})" "\n"
        R"(this line is not json)" "\n"
        R"({"term":"zeta","context":"x","definition":"kept","source":"wordnet"})" "\n";
    PreprocessSummary sum;
    auto data = preprocess_jsonl(jsonl, &sum);
    CHECK(data.size() == 5);  // alpha + 3x beta + zeta
    CHECK(sum.kept == 5);
    CHECK(sum.dropped == 5);
    CHECK(sum.unreadable == 1);
    CHECK(data[1].term == "beta");
    CHECK(data[1].context == "c1");
    CHECK(data[3].definition == "fans out");
    CHECK(data[4].source == "wordnet");
    for (const auto& t : data) {
        CHECK_FALSE(t.term.empty());
        CHECK_FALSE(t.context.empty());
        CHECK_FALSE(t.definition.empty());
    }
}

TEST_CASE("preprocess is idempotent through save/load") {
    SynthCorpus corpus = synth_corpus({200, 3, 6, 6, 0.8, 0.1});
    std::string path = "/tmp/lmlx_test_idem.jsonl";
    save_dataset(path, corpus.all);
    auto once = load_dataset(path);
    save_dataset(path + ".2", once);
    auto twice = load_dataset(path + ".2");
    REQUIRE(once.size() == twice.size());
    for (size_t i = 0; i < once.size(); ++i) {
        CHECK(once[i].term == twice[i].term);
        CHECK(once[i].context == twice[i].context);
        CHECK(once[i].definition == twice[i].definition);
        CHECK(once[i].source == twice[i].source);
    }
}

TEST_CASE("overlap rates") {
    auto mk = [](std::vector<std::pair<std::string, std::string>> td) {
        std::vector<Triplet> out;
        for (auto& [t, d] : td) out.push_back({"ctx", t, d, "", -1});
        return out;
    };
    auto train = mk({{"a", "d1"}, {"b", "d2"}});
    auto test = mk({{"b", "d2"}, {"c", "d3"}});
    auto r = overlap_rates(train, test);
    CHECK(r.term_rate == doctest::Approx(50.0));
    CHECK(r.pair_rate == doctest::Approx(50.0));

    auto disjoint = overlap_rates(mk({{"a", "x"}}), mk({{"b", "y"}}));
    CHECK(disjoint.term_rate == 0.0);
    CHECK(disjoint.pair_rate == 0.0);

    CHECK_THROWS_AS(overlap_rates(train, {}), ValueError);
}

TEST_CASE("overlap and divergence are permutation invariant") {
    SynthCorpus corpus = synth_corpus({200, 3, 6, 6, 0.8, 0.1});
    auto shuffled = corpus.train;
    std::reverse(shuffled.begin(), shuffled.end());
    auto a = overlap_rates(corpus.train, corpus.test);
    auto b = overlap_rates(shuffled, corpus.test);
    CHECK(a.term_rate == b.term_rate);
    CHECK(a.pair_rate == b.pair_rate);
    auto da = divergent_stats(corpus.train);
    auto db = divergent_stats(shuffled);
    CHECK(da.count == db.count);
    CHECK(da.ratio == db.ratio);
}

TEST_CASE("divergent stats") {
    std::vector<Triplet> split = {{"c", "t", "d1", "", -1}, {"c", "t", "d2", "", -1}};
    auto r = divergent_stats(split);
    CHECK(r.count == 2);
    CHECK(r.ratio == doctest::Approx(100.0));

    std::vector<Triplet> unique = {{"c1", "t1", "d1", "", -1}, {"c2", "t2", "d2", "", -1}};
    auto u = divergent_stats(unique);
    CHECK(u.count == 0);
    CHECK(u.ratio == 0.0);
}

TEST_CASE("dataset stats and report") {
    SynthCorpus corpus = synth_corpus({400, 3, 6, 6, 0.8, 0.1});
    DatasetStats s = dataset_stats(corpus.train);
    CHECK(s.examples == static_cast<int64_t>(corpus.train.size()));
    CHECK(s.tokens_per_gloss.mean > 3.0);
    CHECK(s.divergent.ratio >= 0.0);
    CHECK(s.divergent.ratio <= 100.0);
    std::string report = stats_report(corpus.train, corpus.valid, corpus.test);
    CHECK(report.find("term_overlap_rate_pct") != std::string::npos);
    CHECK(report.find("\t") != std::string::npos);
}

TEST_CASE("split_by_term keeps terms inside one split") {
    SynthCorpus corpus = synth_corpus({600, 3, 6, 6, 0.8, 0.1});
    SplitResult r = split_by_term(corpus.all, 0.8, 0.1, 42);
    CHECK(r.train.size() + r.valid.size() + r.test.size() == corpus.all.size());
    std::set<std::string> train_terms, other_terms;
    for (const auto& t : r.train) train_terms.insert(t.term);
    for (const auto& t : r.valid) other_terms.insert(t.term);
    for (const auto& t : r.test) other_terms.insert(t.term);
    for (const auto& term : other_terms) CHECK(train_terms.count(term) == 0);
}
