#pragma once

// Compose N dense expert checkpoints into one MoE checkpoint: FFN tensors move
// verbatim into per-expert slots, every other tensor becomes the arithmetic
// mean over experts (64-bit accumulation), and a fresh gate is installed.

#include <string>
#include <vector>

#include "lmlx/checkpoint.hpp"
#include "lmlx/clustering.hpp"
#include "lmlx/model.hpp"

namespace lmlx {

struct IncompatibleExpertsError : Error {
    using Error::Error;
};

enum class RouterInit { kZeros, kSmallNormal, kCentroidSeeded };
RouterInit router_init_from_string(const std::string& s);
std::string router_init_name(RouterInit m);

// Gate tensor [D,N]: zeros -> uniform routing after softmax; small-normal ->
// N(0, 0.02^2) keyed by seed; centroid-seeded -> column i is centroid v_i
// (requires embedding dim == D).
TensorF make_router_gate(RouterInit mode, int64_t dim, int64_t experts, uint64_t seed,
                         const std::vector<std::vector<float>>* centroids = nullptr);

struct MergeOptions {
    RouterInit router_init = RouterInit::kSmallNormal;
    uint64_t seed = 42;
    RoutingPolicy routing = RoutingPolicy::kDomain;
    const std::vector<std::vector<float>>* centroids = nullptr;  // for centroid-seeded gates
};

Checkpoint merge(const std::vector<Checkpoint>& experts, const MergeOptions& opts = {});

}  // namespace lmlx
