#pragma once

// Prompt embeddings used for clustering and domain-level routing. Every row is
// L2-normalized.

#include <memory>
#include <string>
#include <vector>

#include "lmlx/corpus.hpp"
#include "lmlx/model.hpp"

namespace lmlx {

enum class EmbedMethod { kSeedModelMeanPool, kTfidf, kExternalFile };

EmbedMethod embed_method_from_string(const std::string& s);
std::string embed_method_name(EmbedMethod m);

struct EmbeddingMatrix {
    int64_t rows = 0;
    int64_t dim = 0;
    std::vector<float> data;  // row-major, unit rows
    EmbedMethod method = EmbedMethod::kTfidf;

    const float* row_ptr(int64_t i) const { return data.data() + i * dim; }
    std::vector<float> row_vec(int64_t i) const { return {row_ptr(i), row_ptr(i) + dim}; }
};

// TF-IDF with smooth idf: ln((1+n)/(1+df)) + 1, fitted on rendered prompt text.
struct TfidfModel {
    std::vector<std::string> vocab;  // sorted
    std::vector<double> idf;

    std::vector<float> transform(const std::string& text) const;
    nlohmann::json to_json() const;
    static TfidfModel from_json(const nlohmann::json& j);
};
TfidfModel fit_tfidf(const std::vector<Triplet>& examples);

// Embeds corpora and single queries with one consistent method, so routing at
// inference sees the same space as clustering did.
class Embedder {
public:
    static Embedder mean_pool(std::shared_ptr<Params> seed_params, const ModelConfig& cfg);
    static Embedder tfidf(TfidfModel model);
    static Embedder external(const std::string& path);

    EmbedMethod method() const { return method_; }
    const TfidfModel& tfidf_model() const { return tfidf_; }

    std::vector<float> embed_one(const Triplet& example) const;
    EmbeddingMatrix embed_all(const std::vector<Triplet>& examples) const;

private:
    EmbedMethod method_ = EmbedMethod::kTfidf;
    std::shared_ptr<Params> seed_params_;
    ModelConfig cfg_;
    TfidfModel tfidf_;
    std::string external_path_;
};

void l2_normalize(std::vector<float>& v);

}  // namespace lmlx
