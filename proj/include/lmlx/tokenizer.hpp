#pragma once

// Byte-level tokenizer: ids 0..255 are raw bytes, followed by <bos>, <eos>,
// <pad>. detokenize(tokenize(s)) == s for any UTF-8 input.

#include <string>
#include <vector>

namespace lmlx {

constexpr int kByteVocab = 256;
constexpr int kBos = 256;
constexpr int kEos = 257;
constexpr int kPad = 258;
constexpr int kVocabSize = 259;

std::vector<int> tokenize(const std::string& text);

// Maps byte ids back to text; special ids are skipped.
std::string detokenize(const std::vector<int>& ids);

// Debug form with visible marker names for special ids.
std::string token_display(const std::vector<int>& ids);

}  // namespace lmlx
