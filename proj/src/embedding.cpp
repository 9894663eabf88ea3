#include "lmlx/embedding.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace lmlx {

EmbedMethod embed_method_from_string(const std::string& s) {
    if (s == "seed-model-mean-pool" || s == "mean-pool") return EmbedMethod::kSeedModelMeanPool;
    if (s == "tfidf") return EmbedMethod::kTfidf;
    if (s == "external-file" || s == "external") return EmbedMethod::kExternalFile;
    throw ConfigError("unknown embedding method: " + s);
}

std::string embed_method_name(EmbedMethod m) {
    switch (m) {
        case EmbedMethod::kSeedModelMeanPool: return "seed-model-mean-pool";
        case EmbedMethod::kTfidf: return "tfidf";
        case EmbedMethod::kExternalFile: return "external-file";
    }
    return "?";
}

void l2_normalize(std::vector<float>& v) {
    double n = 0.0;
    for (float x : v) n += static_cast<double>(x) * x;
    n = std::sqrt(n);
    if (n == 0.0) return;
    for (float& x : v) x = static_cast<float>(x / n);
}

namespace {

std::vector<std::string> words_of(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (unsigned char c : text) {
        if (std::isalnum(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

}  // namespace

TfidfModel fit_tfidf(const std::vector<Triplet>& examples) {
    if (examples.empty()) throw ValueError("fit_tfidf: empty corpus");
    std::map<std::string, int64_t> df;
    for (const auto& ex : examples) {
        auto ws = words_of(render_prompt(ex.context, ex.term));
        std::sort(ws.begin(), ws.end());
        ws.erase(std::unique(ws.begin(), ws.end()), ws.end());
        for (const auto& w : ws) ++df[w];
    }
    TfidfModel m;
    const double n = static_cast<double>(examples.size());
    for (const auto& [w, d] : df) {
        m.vocab.push_back(w);
        m.idf.push_back(std::log((1.0 + n) / (1.0 + static_cast<double>(d))) + 1.0);
    }
    return m;
}

std::vector<float> TfidfModel::transform(const std::string& text) const {
    std::vector<float> v(vocab.size(), 0.0f);
    for (const auto& w : words_of(text)) {
        auto it = std::lower_bound(vocab.begin(), vocab.end(), w);
        if (it != vocab.end() && *it == w) {
            size_t ix = static_cast<size_t>(it - vocab.begin());
            v[ix] += static_cast<float>(idf[ix]);
        }
    }
    l2_normalize(v);
    return v;
}

nlohmann::json TfidfModel::to_json() const { return {{"vocab", vocab}, {"idf", idf}}; }

TfidfModel TfidfModel::from_json(const nlohmann::json& j) {
    TfidfModel m;
    m.vocab = j.at("vocab").get<std::vector<std::string>>();
    m.idf = j.at("idf").get<std::vector<double>>();
    if (m.vocab.size() != m.idf.size()) throw FormatError("tfidf model: vocab/idf size mismatch");
    return m;
}

Embedder Embedder::mean_pool(std::shared_ptr<Params> seed_params, const ModelConfig& cfg) {
    Embedder e;
    e.method_ = EmbedMethod::kSeedModelMeanPool;
    e.seed_params_ = std::move(seed_params);
    e.cfg_ = cfg;
    return e;
}

Embedder Embedder::tfidf(TfidfModel model) {
    Embedder e;
    e.method_ = EmbedMethod::kTfidf;
    e.tfidf_ = std::move(model);
    return e;
}

Embedder Embedder::external(const std::string& path) {
    Embedder e;
    e.method_ = EmbedMethod::kExternalFile;
    e.external_path_ = path;
    return e;
}

std::vector<float> Embedder::embed_one(const Triplet& example) const {
    switch (method_) {
        case EmbedMethod::kTfidf:
            return tfidf_.transform(render_prompt(example.context, example.term));
        case EmbedMethod::kSeedModelMeanPool: {
            Graph g;
            auto tokens = prompt_tokens_truncated(example.context, example.term, cfg_.max_seq);
            auto h = forward_hidden(g, *seed_params_, tokens, cfg_);
            const int64_t t = h->dims[0], d = h->dims[1];
            std::vector<float> v(static_cast<size_t>(d), 0.0f);
            for (int64_t j = 0; j < d; ++j) {
                double acc = 0.0;
                for (int64_t i = 0; i < t; ++i) acc += static_cast<double>(h->data[i * d + j]);
                v[static_cast<size_t>(j)] = static_cast<float>(acc / static_cast<double>(t));
            }
            l2_normalize(v);
            return v;
        }
        case EmbedMethod::kExternalFile:
            throw ConfigError("external-file embeddings cannot embed single queries");
    }
    throw ConfigError("embed_one: bad method");
}

EmbeddingMatrix Embedder::embed_all(const std::vector<Triplet>& examples) const {
    if (examples.empty()) throw ValueError("embed_all: empty example list");
    EmbeddingMatrix m;
    m.method = method_;
    if (method_ == EmbedMethod::kExternalFile) {
        std::ifstream f(external_path_);
        if (!f) throw Error("cannot open embedding file: " + external_path_);
        std::string line;
        int64_t rows = 0;
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
            if (j.is_discarded() || !j.is_array())
                throw FormatError("embedding file line " + std::to_string(rows + 1) + " is not a JSON array");
            std::vector<float> v;
            for (const auto& x : j) v.push_back(x.get<float>());
            if (m.dim == 0) m.dim = static_cast<int64_t>(v.size());
            if (static_cast<int64_t>(v.size()) != m.dim)
                throw FormatError("embedding file: ragged row at line " + std::to_string(rows + 1));
            l2_normalize(v);
            m.data.insert(m.data.end(), v.begin(), v.end());
            ++rows;
        }
        m.rows = rows;
        if (m.rows != static_cast<int64_t>(examples.size()))
            throw ValueError("embedding file has " + std::to_string(m.rows) + " rows but dataset has " +
                             std::to_string(examples.size()) + " examples");
        return m;
    }
    for (const auto& ex : examples) {
        auto v = embed_one(ex);
        if (m.dim == 0) m.dim = static_cast<int64_t>(v.size());
        m.data.insert(m.data.end(), v.begin(), v.end());
        ++m.rows;
    }
    return m;
}

}  // namespace lmlx
