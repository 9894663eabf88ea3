#include "lmlx/tokenizer.hpp"

namespace lmlx {

std::vector<int> tokenize(const std::string& text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<int>(c));
    return ids;
}

std::string detokenize(const std::vector<int>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids)
        if (id >= 0 && id < kByteVocab) out.push_back(static_cast<char>(id));
    return out;
}

std::string token_display(const std::vector<int>& ids) {
    std::string out;
    for (int id : ids) {
        if (id == kBos)
            out += "<bos>";
        else if (id == kEos)
            out += "<eos>";
        else if (id == kPad)
            out += "<pad>";
        else if (id >= 0 && id < kByteVocab)
            out.push_back(static_cast<char>(id));
    }
    return out;
}

}  // namespace lmlx
