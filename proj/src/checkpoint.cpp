#include "lmlx/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace lmlx {

namespace {

constexpr char kMagic[4] = {'L', 'M', 'L', 'X'};
constexpr uint32_t kVersion = 1;
constexpr uint32_t kMaxNameLen = 4096;
constexpr uint64_t kMaxMetadataLen = 64ull << 20;
constexpr int64_t kMaxNumel = 1ll << 31;

void put_u32(std::vector<uint8_t>& b, uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
void put_u64(std::vector<uint8_t>& b, uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
void put_f32(std::vector<uint8_t>& b, float f) {
    uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(b, v);
}

struct Reader {
    const std::vector<uint8_t>& b;
    size_t pos = 0;

    void need(size_t n, const char* what) {
        if (pos + n > b.size())
            throw FramingError(std::string("truncated checkpoint: need ") + std::to_string(n) + " bytes for " +
                               what + " at offset " + std::to_string(pos));
    }
    uint8_t u8(const char* what) {
        need(1, what);
        return b[pos++];
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64(const char* what) {
        need(8, what);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
    std::string str(size_t n, const char* what) {
        need(n, what);
        std::string s(reinterpret_cast<const char*>(b.data() + pos), n);
        pos += n;
        return s;
    }
};

}  // namespace

bool Checkpoint::has(const std::string& name) const { return find(name) != nullptr; }

TensorF Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return t;
    return nullptr;
}

TensorF Checkpoint::at(const std::string& name) const {
    TensorF t = find(name);
    if (!t) throw Error("checkpoint has no tensor named " + name);
    return t;
}

void Checkpoint::add(const std::string& name, TensorF t) {
    if (has(name)) throw Error("duplicate tensor name " + name);
    tensors.emplace_back(name, std::move(t));
}

std::vector<std::string> Checkpoint::names() const {
    std::vector<std::string> out;
    out.reserve(tensors.size());
    for (const auto& [n, t] : tensors) out.push_back(n);
    return out;
}

std::vector<uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
    std::vector<uint8_t> b;
    b.insert(b.end(), kMagic, kMagic + 4);
    put_u32(b, kVersion);
    std::string meta = ckpt.metadata.dump();
    put_u64(b, meta.size());
    b.insert(b.end(), meta.begin(), meta.end());
    for (const auto& [name, t] : ckpt.tensors) {
        put_u32(b, static_cast<uint32_t>(name.size()));
        b.insert(b.end(), name.begin(), name.end());
        b.push_back(0);  // dtype f32
        put_u32(b, static_cast<uint32_t>(t->dims.size()));
        for (int64_t d : t->dims) put_u64(b, static_cast<uint64_t>(d));
        for (float f : t->data) put_f32(b, f);
    }
    return b;
}

Checkpoint decode_checkpoint(const std::vector<uint8_t>& bytes) {
    Reader r{bytes};
    r.need(4, "magic");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad magic bytes, not an LMLX checkpoint");
    r.pos = 4;
    uint32_t ver = r.u32("version");
    if (ver != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(ver));
    uint64_t mlen = r.u64("metadata length");
    if (mlen > kMaxMetadataLen)
        throw FramingError("metadata length " + std::to_string(mlen) + " exceeds limit at offset " +
                           std::to_string(r.pos - 8));
    std::string meta = r.str(static_cast<size_t>(mlen), "metadata");
    Checkpoint ckpt;
    ckpt.metadata = nlohmann::json::parse(meta, nullptr, false);
    if (ckpt.metadata.is_discarded()) throw FormatError("checkpoint metadata is not valid JSON");
    while (r.pos < bytes.size()) {
        size_t rec_off = r.pos;
        uint32_t nlen = r.u32("tensor name length");
        if (nlen == 0 || nlen > kMaxNameLen)
            throw FramingError("bad tensor name length " + std::to_string(nlen) + " at offset " +
                               std::to_string(rec_off));
        std::string name = r.str(nlen, "tensor name");
        uint8_t dtype = r.u8("dtype");
        if (dtype != 0) throw FormatError("unsupported dtype " + std::to_string(dtype) + " for tensor " + name);
        uint32_t rank = r.u32("rank");
        if (rank == 0 || rank > 4)
            throw FramingError("bad rank " + std::to_string(rank) + " for tensor " + name + " at offset " +
                               std::to_string(rec_off));
        Dims dims(rank);
        int64_t numel = 1;
        for (uint32_t i = 0; i < rank; ++i) {
            uint64_t d = r.u64("dim extent");
            if (d == 0 || d > static_cast<uint64_t>(kMaxNumel))
                throw FramingError("bad extent " + std::to_string(d) + " for tensor " + name);
            dims[i] = static_cast<int64_t>(d);
            numel *= dims[i];
            if (numel > kMaxNumel) throw FramingError("tensor " + name + " exceeds element limit");
        }
        r.need(static_cast<size_t>(numel) * 4, "tensor payload");
        auto t = make_tensor<float>(dims);
        std::memcpy(t->data.data(), bytes.data() + r.pos, static_cast<size_t>(numel) * 4);
        r.pos += static_cast<size_t>(numel) * 4;
        ckpt.add(name, t);
    }
    return ckpt;
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::vector<uint8_t> b = encode_checkpoint(ckpt);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write checkpoint: " + path);
    f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
    if (!f) throw Error("short write on checkpoint: " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open checkpoint: " + path);
    std::vector<uint8_t> b((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_checkpoint(b);
}

}  // namespace lmlx
