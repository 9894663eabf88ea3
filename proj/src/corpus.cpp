#include "lmlx/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"
#include "lmlx/rng.hpp"
#include "lmlx/tensor.hpp"

namespace lmlx {

namespace {

constexpr const char* kTemplate = " What is the definition of ";

uint64_t fnv1a(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

MeanStd mean_std(const std::vector<double>& xs) {
    MeanStd r;
    if (xs.empty()) return r;
    double sum = 0.0;
    for (double x : xs) sum += x;
    r.mean = sum / static_cast<double>(xs.size());
    if (xs.size() >= 2) {
        double ss = 0.0;
        for (double x : xs) ss += (x - r.mean) * (x - r.mean);
        r.stddev = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    }
    return r;
}

int64_t word_count(const std::string& s) {
    int64_t n = 0;
    bool in = false;
    for (char c : s) {
        bool ws = (c == ' ' || c == '\t' || c == '\n' || c == '\r');
        if (!ws && !in) ++n;
        in = !ws;
    }
    return n;
}

}  // namespace

std::string render_prompt(const std::string& context, const std::string& term) {
    if (context.empty() || term.empty()) throw ValueError("render_prompt: empty context or term");
    return "\"" + context + "\"" + kTemplate + "\"" + term + "\"";
}

std::vector<int> prompt_tokens(const std::string& context, const std::string& term) {
    std::vector<int> ids;
    ids.push_back(kBos);
    for (int b : tokenize(render_prompt(context, term))) ids.push_back(b);
    ids.push_back(kEos);
    return ids;
}

std::vector<uint8_t> PromptedExample::loss_mask() const {
    // Position i labels tokens[i+1]; definition-region labels start right
    // after the prompt's eos and run through the final eos.
    const int len = static_cast<int>(tokens.size()) - 1;
    std::vector<uint8_t> mask(len, 0);
    for (int i = prompt_len - 1; i < len; ++i) mask[i] = 1;
    return mask;
}

namespace {

std::string truncate_context_head(const std::string& context, int64_t budget) {
    if (budget <= 0) return "";
    if (static_cast<int64_t>(context.size()) <= budget) return context;
    return context.substr(context.size() - static_cast<size_t>(budget));
}

}  // namespace

PromptedExample make_prompted_example(const Triplet& t, int max_seq) {
    // Sequence: [bos] "c" What is the definition of "t" [eos] d [eos]
    // Fixed overhead: 4 quotes + template + 3 specials.
    const int64_t overhead = 4 + static_cast<int64_t>(std::string(kTemplate).size()) + 3;
    int64_t context_budget = max_seq - overhead - static_cast<int64_t>(t.term.size()) -
                             static_cast<int64_t>(t.definition.size());
    std::string ctx = truncate_context_head(t.context, context_budget);
    std::string def = t.definition;
    if (ctx.empty()) {
        // context alone cannot absorb the overflow: trim the definition tail,
        // keeping the term and template intact
        ctx = t.context.substr(0, 1);
        int64_t def_budget = max_seq - overhead - static_cast<int64_t>(t.term.size()) - 1;
        if (def_budget < 0) throw ValueError("make_prompted_example: term too long for max_seq");
        if (static_cast<int64_t>(def.size()) > def_budget) def.resize(static_cast<size_t>(def_budget));
    }
    PromptedExample ex;
    ex.tokens = prompt_tokens(ctx, t.term);
    ex.prompt_len = static_cast<int>(ex.tokens.size());
    for (int b : tokenize(def)) ex.tokens.push_back(b);
    ex.tokens.push_back(kEos);
    return ex;
}

std::vector<int> prompt_tokens_truncated(const std::string& context, const std::string& term, int max_seq) {
    const int64_t overhead = 4 + static_cast<int64_t>(std::string(kTemplate).size()) + 2;
    int64_t budget = max_seq - overhead - static_cast<int64_t>(term.size());
    std::string ctx = truncate_context_head(context, budget);
    if (ctx.empty()) ctx = context.substr(0, 1);
    return prompt_tokens(ctx, term);
}

namespace {

// Drop rules: term and definition must be non-empty strings, every context
// non-empty, source non-empty when the key is present.
bool parse_record(const nlohmann::json& j, std::vector<Triplet>& out) {
    if (!j.is_object()) return false;
    if (!j.contains("term") || !j["term"].is_string()) return false;
    if (!j.contains("definition") || !j["definition"].is_string()) return false;
    std::string term = j["term"].get<std::string>();
    std::string def = j["definition"].get<std::string>();
    if (term.empty() || def.empty()) return false;
    std::string source;
    if (j.contains("source")) {
        if (!j["source"].is_string()) return false;
        source = j["source"].get<std::string>();
        if (source.empty()) return false;
    }
    if (!j.contains("context")) return false;
    std::vector<std::string> contexts;
    if (j["context"].is_string()) {
        contexts.push_back(j["context"].get<std::string>());
    } else if (j["context"].is_array()) {
        for (const auto& c : j["context"]) {
            if (!c.is_string()) return false;
            if (!c.get<std::string>().empty()) contexts.push_back(c.get<std::string>());
        }
    } else {
        return false;
    }
    bool any = false;
    for (const auto& c : contexts) {
        if (c.empty()) continue;
        Triplet t;
        t.context = c;
        t.term = term;
        t.definition = def;
        t.source = source;
        out.push_back(std::move(t));
        any = true;
    }
    return any;
}

}  // namespace

std::vector<Triplet> preprocess_jsonl(const std::string& jsonl_text, PreprocessSummary* summary) {
    std::vector<Triplet> out;
    PreprocessSummary sum;
    std::istringstream is(jsonl_text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) {
            ++sum.unreadable;
            continue;
        }
        size_t before = out.size();
        if (parse_record(j, out))
            sum.kept += static_cast<int64_t>(out.size() - before);
        else
            ++sum.dropped;
    }
    if (summary) *summary = sum;
    return out;
}

std::vector<Triplet> load_dataset(const std::string& path, PreprocessSummary* summary) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open dataset file: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return preprocess_jsonl(ss.str(), summary);
}

void save_dataset(const std::string& path, const std::vector<Triplet>& data) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write dataset file: " + path);
    for (const auto& t : data) {
        nlohmann::json j;
        j["term"] = t.term;
        j["context"] = t.context;
        j["definition"] = t.definition;
        if (!t.source.empty()) j["source"] = t.source;
        f << j.dump() << "\n";
    }
}

OverlapRates overlap_rates(const std::vector<Triplet>& train, const std::vector<Triplet>& test) {
    if (test.empty()) throw ValueError("overlap_rates: undefined rate, empty test split");
    if (train.empty()) throw ValueError("overlap_rates: undefined rate, empty train split");
    std::unordered_set<std::string> train_terms, train_pairs, test_terms, test_pairs;
    for (const auto& t : train) {
        train_terms.insert(t.term);
        train_pairs.insert(t.term + "\x1f" + t.definition);
    }
    for (const auto& t : test) {
        test_terms.insert(t.term);
        test_pairs.insert(t.term + "\x1f" + t.definition);
    }
    int64_t term_hits = 0, pair_hits = 0;
    for (const auto& s : test_terms) term_hits += train_terms.count(s) ? 1 : 0;
    for (const auto& s : test_pairs) pair_hits += train_pairs.count(s) ? 1 : 0;
    OverlapRates r;
    r.term_rate = 100.0 * static_cast<double>(term_hits) / static_cast<double>(test_terms.size());
    r.pair_rate = 100.0 * static_cast<double>(pair_hits) / static_cast<double>(test_pairs.size());
    return r;
}

DivergentStats divergent_stats(const std::vector<Triplet>& split) {
    DivergentStats r;
    if (split.empty()) return r;
    std::unordered_map<std::string, std::set<std::string>> defs;
    for (const auto& t : split) defs[t.term + "\x1f" + t.context].insert(t.definition);
    for (const auto& t : split)
        if (defs[t.term + "\x1f" + t.context].size() >= 2) ++r.count;
    r.ratio = 100.0 * static_cast<double>(r.count) / static_cast<double>(split.size());
    return r;
}

DatasetStats dataset_stats(const std::vector<Triplet>& split) {
    DatasetStats s;
    s.examples = static_cast<int64_t>(split.size());
    std::map<std::string, std::set<std::string>> glosses;
    std::vector<double> tt, tc, tg;
    for (const auto& t : split) {
        glosses[t.term].insert(t.definition);
        tt.push_back(static_cast<double>(word_count(t.term)));
        tc.push_back(static_cast<double>(word_count(t.context)));
        tg.push_back(static_cast<double>(word_count(t.definition)));
    }
    std::vector<double> gp;
    for (const auto& [term, ds] : glosses) gp.push_back(static_cast<double>(ds.size()));
    s.glosses_per_term = mean_std(gp);
    s.tokens_per_term = mean_std(tt);
    s.tokens_per_context = mean_std(tc);
    s.tokens_per_gloss = mean_std(tg);
    s.divergent = divergent_stats(split);
    return s;
}

namespace {

std::string fmt(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f", x);
    return buf;
}

}  // namespace

std::string stats_report(const std::vector<Triplet>& train, const std::vector<Triplet>& valid,
                         const std::vector<Triplet>& test) {
    DatasetStats st = dataset_stats(train), sv = dataset_stats(valid), se = dataset_stats(test);
    std::ostringstream os;
    os << "metric\ttrain\tvalid\ttest\n";
    auto row = [&](const std::string& name, auto get) {
        os << name << "\t" << get(st) << "\t" << get(sv) << "\t" << get(se) << "\n";
    };
    row("examples", [](const DatasetStats& s) { return std::to_string(s.examples); });
    row("glosses_per_term", [&](const DatasetStats& s) { return fmt(s.glosses_per_term.mean) + "±" + fmt(s.glosses_per_term.stddev); });
    row("tokens_per_term", [&](const DatasetStats& s) { return fmt(s.tokens_per_term.mean) + "±" + fmt(s.tokens_per_term.stddev); });
    row("tokens_per_context", [&](const DatasetStats& s) { return fmt(s.tokens_per_context.mean) + "±" + fmt(s.tokens_per_context.stddev); });
    row("tokens_per_gloss", [&](const DatasetStats& s) { return fmt(s.tokens_per_gloss.mean) + "±" + fmt(s.tokens_per_gloss.stddev); });
    row("divergent_count", [](const DatasetStats& s) { return std::to_string(s.divergent.count); });
    row("divergent_ratio_pct", [&](const DatasetStats& s) { return fmt(s.divergent.ratio); });
    if (!train.empty() && !test.empty()) {
        OverlapRates ov = overlap_rates(train, test);
        os << "term_overlap_rate_pct\t-\t-\t" << fmt(ov.term_rate) << "\n";
        os << "pair_overlap_rate_pct\t-\t-\t" << fmt(ov.pair_rate) << "\n";
    }
    return os.str();
}

SplitResult split_by_term(const std::vector<Triplet>& data, double train_frac, double valid_frac,
                          uint64_t seed) {
    if (train_frac < 0 || valid_frac < 0 || train_frac + valid_frac > 1.0)
        throw ValueError("split_by_term: bad fractions");
    std::map<std::string, int64_t> term_counts;
    for (const auto& t : data) ++term_counts[t.term];
    std::vector<std::pair<uint64_t, std::string>> order;
    order.reserve(term_counts.size());
    for (const auto& [term, n] : term_counts) order.emplace_back(rng_u64(seed, fnv1a(term)), term);
    std::sort(order.begin(), order.end());
    const double n = static_cast<double>(data.size());
    std::unordered_map<std::string, int> dest;  // 0 train, 1 valid, 2 test
    double acc = 0.0;
    for (const auto& [h, term] : order) {
        double frac = acc / n;
        int d = frac < train_frac ? 0 : (frac < train_frac + valid_frac ? 1 : 2);
        dest[term] = d;
        acc += static_cast<double>(term_counts[term]);
    }
    SplitResult r;
    for (const auto& t : data) {
        int d = dest[t.term];
        (d == 0 ? r.train : d == 1 ? r.valid : r.test).push_back(t);
    }
    return r;
}

}  // namespace lmlx
