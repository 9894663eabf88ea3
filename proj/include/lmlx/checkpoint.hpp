#pragma once

// Named-tensor checkpoint container. Binary layout (all integers little-endian):
//   magic "LMLX" | version u32 | metadata-length u64 | metadata JSON (UTF-8)
//   then per tensor: name-length u32 | name | dtype u8 (0 = f32) | rank u32 |
//   dims u64 x rank | raw f32 payload
// Reads reject anything violating the framing with the failing byte offset.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "lmlx/tensor.hpp"

namespace lmlx {

struct FormatError : Error {
    using Error::Error;
};
struct FramingError : FormatError {
    using FormatError::FormatError;
};

struct Checkpoint {
    nlohmann::json metadata = nlohmann::json::object();
    std::vector<std::pair<std::string, TensorF>> tensors;  // preserves file order

    bool has(const std::string& name) const;
    TensorF find(const std::string& name) const;  // nullptr when absent
    TensorF at(const std::string& name) const;    // throws when absent
    void add(const std::string& name, TensorF t);
    std::vector<std::string> names() const;
};

void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);

std::vector<uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<uint8_t>& bytes);

}  // namespace lmlx
