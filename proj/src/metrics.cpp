#include "lmlx/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <unordered_map>

#include "lmlx/tensor.hpp"

namespace lmlx {

std::vector<std::string> metric_tokens(const std::string& text, bool normalize) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    };
    for (unsigned char c : text) {
        if (std::isspace(c)) {
            flush();
        } else if (normalize && std::ispunct(c)) {
            flush();  // punctuation becomes its own token
            out.push_back(std::string(1, static_cast<char>(c)));
        } else {
            cur.push_back(normalize ? static_cast<char>(std::tolower(c)) : static_cast<char>(c));
        }
    }
    flush();
    return out;
}

namespace {

using Counts = std::unordered_map<std::string, int64_t>;

Counts ngram_counts(const std::vector<std::string>& toks, int n) {
    Counts c;
    if (static_cast<int>(toks.size()) < n) return c;
    for (size_t i = 0; i + n <= toks.size(); ++i) {
        std::string key;
        for (int j = 0; j < n; ++j) {
            if (j) key.push_back('\x1f');
            key += toks[i + j];
        }
        ++c[key];
    }
    return c;
}

struct BleuStats {
    std::vector<int64_t> matched;  // clipped matches per order
    std::vector<int64_t> total;    // hypothesis n-grams per order
    int64_t hyp_len = 0;
    int64_t ref_len = 0;
};

BleuStats pair_stats(const std::vector<std::string>& hyp, const std::vector<std::string>& ref, int max_order) {
    BleuStats s;
    s.matched.assign(max_order, 0);
    s.total.assign(max_order, 0);
    s.hyp_len = static_cast<int64_t>(hyp.size());
    s.ref_len = static_cast<int64_t>(ref.size());
    for (int n = 1; n <= max_order; ++n) {
        Counts hc = ngram_counts(hyp, n);
        Counts rc = ngram_counts(ref, n);
        for (const auto& [g, cnt] : hc) {
            auto it = rc.find(g);
            if (it != rc.end()) s.matched[n - 1] += std::min(cnt, it->second);
            s.total[n - 1] += cnt;
        }
    }
    return s;
}

double bleu_from_stats(const BleuStats& s, const MetricConfig& cfg) {
    if (s.hyp_len == 0) return 0.0;
    double log_sum = 0.0;
    for (int n = 1; n <= cfg.max_order; ++n) {
        int64_t match = s.matched[n - 1], total = s.total[n - 1];
        double p;
        if (match == 0) {
            if (n >= 2 && cfg.smoothing)
                p = 1.0 / static_cast<double>(total + 1);
            else
                return 0.0;
        } else {
            p = static_cast<double>(match) / static_cast<double>(total);
        }
        log_sum += std::log(p);
    }
    double bp = 1.0;
    if (s.hyp_len < s.ref_len)
        bp = std::exp(1.0 - static_cast<double>(s.ref_len) / static_cast<double>(s.hyp_len));
    return 100.0 * bp * std::exp(log_sum / static_cast<double>(cfg.max_order));
}

}  // namespace

double bleu(const std::string& hypothesis, const std::string& reference, const MetricConfig& cfg) {
    auto hyp = metric_tokens(hypothesis, cfg.normalize);
    auto ref = metric_tokens(reference, cfg.normalize);
    return bleu_from_stats(pair_stats(hyp, ref, cfg.max_order), cfg);
}

double corpus_bleu(const std::vector<std::string>& hypotheses,
                   const std::vector<std::string>& references, const MetricConfig& cfg) {
    if (hypotheses.size() != references.size())
        throw ValueError("corpus_bleu: hypothesis/reference count mismatch");
    BleuStats agg;
    agg.matched.assign(cfg.max_order, 0);
    agg.total.assign(cfg.max_order, 0);
    for (size_t i = 0; i < hypotheses.size(); ++i) {
        BleuStats s = pair_stats(metric_tokens(hypotheses[i], cfg.normalize),
                                 metric_tokens(references[i], cfg.normalize), cfg.max_order);
        for (int n = 0; n < cfg.max_order; ++n) {
            agg.matched[n] += s.matched[n];
            agg.total[n] += s.total[n];
        }
        agg.hyp_len += s.hyp_len;
        agg.ref_len += s.ref_len;
    }
    return bleu_from_stats(agg, cfg);
}

double rouge_l(const std::string& hypothesis, const std::string& reference, const MetricConfig& cfg) {
    auto hyp = metric_tokens(hypothesis, cfg.normalize);
    auto ref = metric_tokens(reference, cfg.normalize);
    if (hyp.empty() || ref.empty()) return 0.0;
    const size_t h = hyp.size(), r = ref.size();
    std::vector<int64_t> prev(r + 1, 0), cur(r + 1, 0);
    for (size_t i = 1; i <= h; ++i) {
        for (size_t j = 1; j <= r; ++j)
            cur[j] = (hyp[i - 1] == ref[j - 1]) ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    double lcs = static_cast<double>(prev[r]);
    if (lcs == 0.0) return 0.0;
    double p = lcs / static_cast<double>(h);
    double rr = lcs / static_cast<double>(r);
    return 2.0 * p * rr / (p + rr);
}

double fleiss_kappa(const std::vector<std::vector<int>>& ratings) {
    if (ratings.empty() || ratings[0].empty()) throw ValueError("fleiss_kappa: empty rating matrix");
    const size_t subjects = ratings.size(), cats = ratings[0].size();
    int64_t raters = 0;
    for (int c : ratings[0]) raters += c;
    if (raters < 2) throw ValueError("fleiss_kappa: needs >= 2 raters per subject");
    double po_sum = 0.0;
    std::vector<double> col(cats, 0.0);
    for (const auto& row : ratings) {
        if (row.size() != cats) throw ValueError("fleiss_kappa: ragged rating matrix");
        int64_t rsum = 0;
        double sq = 0.0;
        for (size_t j = 0; j < cats; ++j) {
            if (row[j] < 0) throw ValueError("fleiss_kappa: negative count");
            rsum += row[j];
            sq += static_cast<double>(row[j]) * static_cast<double>(row[j]);
            col[j] += static_cast<double>(row[j]);
        }
        if (rsum != raters) throw ValueError("fleiss_kappa: unequal rater counts across subjects");
        po_sum += (sq - static_cast<double>(raters)) /
                  (static_cast<double>(raters) * static_cast<double>(raters - 1));
    }
    double po = po_sum / static_cast<double>(subjects);
    double pe = 0.0;
    for (size_t j = 0; j < cats; ++j) {
        double pj = col[j] / static_cast<double>(subjects * static_cast<size_t>(raters));
        pe += pj * pj;
    }
    if (pe >= 1.0) throw ValueError("fleiss_kappa: undefined, expected agreement is 1");
    return (po - pe) / (1.0 - pe);
}

MeanStdAgg aggregate_runs(const std::vector<double>& per_seed_values) {
    if (per_seed_values.empty()) throw ValueError("aggregate_runs: no runs");
    MeanStdAgg r;
    double sum = 0.0;
    for (double v : per_seed_values) sum += v;
    r.mean = sum / static_cast<double>(per_seed_values.size());
    if (per_seed_values.size() >= 2) {
        double ss = 0.0;
        for (double v : per_seed_values) ss += (v - r.mean) * (v - r.mean);
        r.stddev = std::sqrt(ss / static_cast<double>(per_seed_values.size() - 1));
        r.has_std = true;
    }
    return r;
}

}  // namespace lmlx
