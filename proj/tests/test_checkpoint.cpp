#include <algorithm>
#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "lmlx/checkpoint.hpp"
#include "lmlx/merge.hpp"
#include "lmlx/model.hpp"
#include "lmlx/rng.hpp"

using namespace lmlx;

namespace {

Checkpoint small_ckpt(uint64_t seed) {
    ModelConfig cfg;
    cfg.layers = 1;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.ffn = 12;
    cfg.vocab = 17;
    Params p = init_params<float>(cfg, seed);
    nlohmann::json meta;
    meta["name"] = "expert-" + std::to_string(seed);
    meta["seed"] = seed;
    return params_to_checkpoint(p, cfg, meta);
}

}  // namespace

TEST_CASE("checkpoint write/read/write is byte identical") {
    Checkpoint ckpt = small_ckpt(3);
    std::vector<uint8_t> a = encode_checkpoint(ckpt);
    Checkpoint back = decode_checkpoint(a);
    std::vector<uint8_t> b = encode_checkpoint(back);
    CHECK(a == b);

    std::string path = "/tmp/lmlx_test_ckpt.lmlx";
    write_checkpoint(path, ckpt);
    Checkpoint from_disk = read_checkpoint(path);
    CHECK(encode_checkpoint(from_disk) == a);
}

TEST_CASE("foreign magic and truncation are rejected with framing errors") {
    Checkpoint ckpt = small_ckpt(1);
    std::vector<uint8_t> bytes = encode_checkpoint(ckpt);

    std::vector<uint8_t> foreign = bytes;
    std::memcpy(foreign.data(), "GGUF", 4);
    CHECK_THROWS_AS(decode_checkpoint(foreign), FormatError);

    std::vector<uint8_t> truncated(bytes.begin(), bytes.begin() + bytes.size() / 2);
    CHECK_THROWS_WITH_AS(decode_checkpoint(truncated), doctest::Contains("offset"), FramingError);
}

TEST_CASE("a corpus of 20 fuzzed/truncated files is rejected, never a crash") {
    Checkpoint ckpt = small_ckpt(2);
    std::vector<uint8_t> bytes = encode_checkpoint(ckpt);
    // offsets where a record ends; a prefix cut exactly there is a valid
    // (shorter) container, so truncations aim inside records
    std::vector<size_t> boundaries;
    size_t pos = 16 + ckpt.metadata.dump().size();
    boundaries.push_back(pos);
    for (const auto& [name, t] : ckpt.tensors) {
        pos += 4 + name.size() + 1 + 4 + 8 * t->dims.size() + 4 * t->data.size();
        boundaries.push_back(pos);
    }
    auto mid_record = [&](size_t want) {
        size_t cut = std::max<size_t>(1, std::min(want, bytes.size() - 1));
        while (std::find(boundaries.begin(), boundaries.end(), cut) != boundaries.end()) --cut;
        return std::max<size_t>(1, cut);
    };
    int rejected = 0;
    for (int i = 0; i < 20; ++i) {
        std::vector<uint8_t> bad = bytes;
        switch (i % 5) {
            case 0:  // truncate at a pseudo-random in-record offset
                bad.resize(mid_record(1 + rng_u64(7, static_cast<uint64_t>(i)) % (bytes.size() - 1)));
                break;
            case 1:  // corrupt magic
                bad[static_cast<size_t>(i % 4)] ^= 0xFF;
                break;
            case 2:  // absurd version
                bad[4] = 0xEE;
                bad[5] = 0xEE;
                break;
            case 3:  // metadata length points past the end
                bad[8] = 0xFF;
                bad[9] = 0xFF;
                bad[10] = 0xFF;
                break;
            case 4:  // first tensor record gets a huge name-length/rank field
                for (size_t off = 16 + ckpt.metadata.dump().size();
                     off < std::min(bad.size(), 16 + ckpt.metadata.dump().size() + 12); ++off)
                    bad[off] = 0xFF;
                break;
        }
        try {
            decode_checkpoint(bad);
        } catch (const FormatError&) {
            ++rejected;
        }
    }
    CHECK(rejected == 20);
}

TEST_CASE("merge: trunk is the 64-bit mean, FFNs are copied bit exactly") {
    Checkpoint a = small_ckpt(10), b = small_ckpt(20);
    // make b's trunk the exact negation of a's
    for (auto& [name, t] : b.tensors)
        if (name.find(".ffn.") == std::string::npos)
            for (size_t i = 0; i < t->data.size(); ++i) t->data[i] = -a.at(name)->data[i];

    MergeOptions mo;
    mo.router_init = RouterInit::kZeros;
    Checkpoint merged = merge({a, b}, mo);

    for (const auto& [name, t] : merged.tensors) {
        if (name.find(".experts.") != std::string::npos || name.find(".gate.weight") != std::string::npos)
            continue;
        for (float v : t->data) CHECK(v == 0.0f);  // mean of x and -x
    }
    // expert slots carry the source FFN bytes verbatim
    TensorF slot0 = merged.at("layers.0.experts.0.gate_proj.weight");
    TensorF src0 = a.at("layers.0.ffn.gate_proj.weight");
    CHECK(std::memcmp(slot0->data.data(), src0->data.data(), src0->data.size() * 4) == 0);
    TensorF slot1 = merged.at("layers.0.experts.1.down_proj.weight");
    TensorF src1 = b.at("layers.0.ffn.down_proj.weight");
    CHECK(std::memcmp(slot1->data.data(), src1->data.data(), src1->data.size() * 4) == 0);
}

TEST_CASE("merge idempotence on clones: trunk equals the source exactly") {
    Checkpoint a = small_ckpt(5);
    MergeOptions mo;
    mo.router_init = RouterInit::kZeros;
    Checkpoint merged = merge({a, a, a, a}, mo);
    for (const auto& [name, t] : merged.tensors) {
        if (name.find(".experts.") != std::string::npos || name.find(".gate.weight") != std::string::npos)
            continue;
        TensorF src = a.at(name);
        CHECK(std::memcmp(t->data.data(), src->data.data(), src->data.size() * 4) == 0);
    }
}

TEST_CASE("permuting expert order permutes slots and leaves the averaged trunk unchanged") {
    Checkpoint a = small_ckpt(31), b = small_ckpt(32), c = small_ckpt(33);
    MergeOptions mo;
    mo.router_init = RouterInit::kZeros;
    Checkpoint m1 = merge({a, b, c}, mo);
    Checkpoint m2 = merge({c, a, b}, mo);
    TensorF a_slot_m1 = m1.at("layers.0.experts.0.up_proj.weight");
    TensorF a_slot_m2 = m2.at("layers.0.experts.1.up_proj.weight");
    CHECK(a_slot_m1->data == a_slot_m2->data);
    // mean is symmetric; fixed summation order keeps it within 1 ulp
    TensorF t1 = m1.at("embed.weight"), t2 = m2.at("embed.weight");
    for (size_t i = 0; i < t1->data.size(); ++i) {
        float x = t1->data[i], y = t2->data[i];
        float next = std::nextafter(x, std::numeric_limits<float>::infinity());
        float prev = std::nextafter(x, -std::numeric_limits<float>::infinity());
        CHECK(y >= prev);
        CHECK(y <= next);
    }
}

TEST_CASE("merged name set is trunk union gate union expert slots") {
    Checkpoint a = small_ckpt(41), b = small_ckpt(42);
    MergeOptions mo;
    Checkpoint merged = merge({a, b}, mo);
    ModelConfig mc = config_from_checkpoint(merged);
    CHECK(mc.experts == 2);
    auto expected = canonical_param_names(mc);
    CHECK(merged.names() == expected);
}

TEST_CASE("config mismatch names the problem") {
    Checkpoint a = small_ckpt(1);
    ModelConfig other;
    other.layers = 2;
    other.dim = 8;
    other.heads = 2;
    other.ffn = 12;
    other.vocab = 17;
    Params p = init_params<float>(other, 9);
    Checkpoint b = params_to_checkpoint(p, other, {});
    CHECK_THROWS_AS(merge({a, b}), IncompatibleExpertsError);
}

TEST_CASE("router init modes") {
    TensorF zeros = make_router_gate(RouterInit::kZeros, 6, 3, 1);
    for (float v : zeros->data) CHECK(v == 0.0f);

    TensorF n1 = make_router_gate(RouterInit::kSmallNormal, 6, 3, 77);
    TensorF n2 = make_router_gate(RouterInit::kSmallNormal, 6, 3, 77);
    CHECK(n1->data == n2->data);
    TensorF n3 = make_router_gate(RouterInit::kSmallNormal, 6, 3, 78);
    CHECK(n1->data != n3->data);

    std::vector<std::vector<float>> cents = {{1, 0, 0}, {0, 1, 0}};
    TensorF seeded = make_router_gate(RouterInit::kCentroidSeeded, 3, 2, 0, &cents);
    // column e equals centroid e
    CHECK(seeded->data[0 * 2 + 0] == 1.0f);
    CHECK(seeded->data[1 * 2 + 1] == 1.0f);
    CHECK(seeded->data[2 * 2 + 0] == 0.0f);
    CHECK_THROWS_AS(make_router_gate(RouterInit::kCentroidSeeded, 4, 2, 0, &cents), ConfigError);
}
