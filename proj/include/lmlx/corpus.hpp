#pragma once

// Dataset ingestion: <context, term, definition> triplets, preprocessing,
// prompt rendering, training-sequence construction and corpus statistics.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lmlx/tokenizer.hpp"

namespace lmlx {

struct Triplet {
    std::string context;
    std::string term;
    std::string definition;
    std::string source;    // dataset name, may be empty
    int cluster_id = -1;   // assigned by clustering, -1 = unassigned
};

// Prompt body text; <bos>/<eos> are token-level markers added by prompt_tokens.
std::string render_prompt(const std::string& context, const std::string& term);

// [bos] bytes(render_prompt) [eos]
std::vector<int> prompt_tokens(const std::string& context, const std::string& term);

// One training sequence: prompt followed by definition bytes and a final eos.
// mask[i] is true iff the label at position i (i.e. tokens[i+1]) lies in the
// definition region or is the final eos.
struct PromptedExample {
    std::vector<int> tokens;   // full concatenated sequence
    int prompt_len = 0;        // number of leading prompt tokens
    std::vector<int> input() const { return {tokens.begin(), tokens.end() - 1}; }
    std::vector<int> targets() const { return {tokens.begin() + 1, tokens.end()}; }
    std::vector<uint8_t> loss_mask() const;
};

// Builds the sequence, truncating the head of the context (never the term,
// template or definition) so the whole sequence fits max_seq tokens.
PromptedExample make_prompted_example(const Triplet& t, int max_seq);

// Prompt-only tokens with the same context-truncation rule, leaving room for
// generation is the caller's business.
std::vector<int> prompt_tokens_truncated(const std::string& context, const std::string& term, int max_seq);

struct PreprocessSummary {
    int64_t kept = 0;
    int64_t dropped = 0;
    int64_t unreadable = 0;
};

// Parses JSONL records {term, context, definition, source?}; applies the drop
// rules (term/definition must be non-empty strings, context non-empty, source
// non-empty when present) and fans records with a context array out into one
// triplet per context.
std::vector<Triplet> preprocess_jsonl(const std::string& jsonl_text, PreprocessSummary* summary = nullptr);
std::vector<Triplet> load_dataset(const std::string& path, PreprocessSummary* summary = nullptr);
void save_dataset(const std::string& path, const std::vector<Triplet>& data);

// Term and term-gloss-pair overlap between splits, in percent of the test side.
struct OverlapRates {
    double term_rate = 0.0;
    double pair_rate = 0.0;
};
OverlapRates overlap_rates(const std::vector<Triplet>& train, const std::vector<Triplet>& test);

// Examples whose (term, context) group carries >= 2 distinct definitions.
struct DivergentStats {
    int64_t count = 0;
    double ratio = 0.0;  // percent
};
DivergentStats divergent_stats(const std::vector<Triplet>& split);

struct MeanStd {
    double mean = 0.0;
    double stddev = 0.0;  // sample std, 0 when n < 2
};

struct DatasetStats {
    int64_t examples = 0;
    MeanStd glosses_per_term;
    MeanStd tokens_per_term;   // whitespace words, independent of the model tokenizer
    MeanStd tokens_per_context;
    MeanStd tokens_per_gloss;
    DivergentStats divergent;
};
DatasetStats dataset_stats(const std::vector<Triplet>& split);

// Tab-separated report mirroring the dataset-statistics table rows.
std::string stats_report(const std::vector<Triplet>& train, const std::vector<Triplet>& valid,
                         const std::vector<Triplet>& test);

// Deterministic term-level split (a term never crosses splits).
struct SplitResult {
    std::vector<Triplet> train, valid, test;
};
SplitResult split_by_term(const std::vector<Triplet>& data, double train_frac, double valid_frac,
                          uint64_t seed);

}  // namespace lmlx
