#pragma once

// Lexical generation metrics and agreement statistics.

#include <string>
#include <vector>

namespace lmlx {

struct MetricConfig {
    int max_order = 4;
    bool smoothing = true;   // add-one on orders >= 2 when the raw count is zero
    bool normalize = true;   // lowercase + split punctuation before scoring
};

std::vector<std::string> metric_tokens(const std::string& text, bool normalize);

// Sentence BLEU in [0,100]: geometric mean of modified n-gram precisions times
// the brevity penalty. Empty hypothesis scores 0 by definition.
double bleu(const std::string& hypothesis, const std::string& reference,
            const MetricConfig& cfg = {});

// Corpus BLEU: n-gram and length statistics pooled over all pairs.
double corpus_bleu(const std::vector<std::string>& hypotheses,
                   const std::vector<std::string>& references, const MetricConfig& cfg = {});

// LCS-based F1 on whitespace tokens, in [0,1].
double rouge_l(const std::string& hypothesis, const std::string& reference,
               const MetricConfig& cfg = {});

// Fleiss's kappa over a subjects x categories count matrix; every subject must
// be rated by the same number (>= 2) of raters.
double fleiss_kappa(const std::vector<std::vector<int>>& ratings);

struct MeanStdAgg {
    double mean = 0.0;
    double stddev = 0.0;
    bool has_std = false;  // present only with >= 2 runs
};
MeanStdAgg aggregate_runs(const std::vector<double>& per_seed_values);

}  // namespace lmlx
