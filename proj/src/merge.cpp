#include "lmlx/merge.hpp"

namespace lmlx {

RouterInit router_init_from_string(const std::string& s) {
    if (s == "zeros") return RouterInit::kZeros;
    if (s == "small-normal") return RouterInit::kSmallNormal;
    if (s == "centroid-seeded") return RouterInit::kCentroidSeeded;
    throw ConfigError("unknown router init: " + s);
}

std::string router_init_name(RouterInit m) {
    switch (m) {
        case RouterInit::kZeros: return "zeros";
        case RouterInit::kSmallNormal: return "small-normal";
        case RouterInit::kCentroidSeeded: return "centroid-seeded";
    }
    return "?";
}

TensorF make_router_gate(RouterInit mode, int64_t dim, int64_t experts, uint64_t seed,
                         const std::vector<std::vector<float>>* centroids) {
    auto gate = make_tensor<float>({dim, experts});
    switch (mode) {
        case RouterInit::kZeros:
            break;
        case RouterInit::kSmallNormal:
            fill_normal(*gate, seed, 0.02);
            break;
        case RouterInit::kCentroidSeeded: {
            if (!centroids || static_cast<int64_t>(centroids->size()) != experts)
                throw ConfigError("centroid-seeded router needs one centroid per expert");
            for (int64_t e = 0; e < experts; ++e) {
                const auto& c = (*centroids)[static_cast<size_t>(e)];
                if (static_cast<int64_t>(c.size()) != dim)
                    throw ConfigError("centroid-seeded router needs embedding dim == model dim (got " +
                                      std::to_string(c.size()) + " vs " + std::to_string(dim) + ")");
                for (int64_t j = 0; j < dim; ++j) gate->data[j * experts + e] = c[static_cast<size_t>(j)];
            }
            break;
        }
    }
    return gate;
}

namespace {

std::string expert_slot_name(const std::string& ffn_name, int expert) {
    // layers.<l>.ffn.<w>.weight -> layers.<l>.experts.<i>.<w>.weight
    const std::string marker = ".ffn.";
    size_t pos = ffn_name.find(marker);
    return ffn_name.substr(0, pos) + ".experts." + std::to_string(expert) + "." +
           ffn_name.substr(pos + marker.size());
}

}  // namespace

Checkpoint merge(const std::vector<Checkpoint>& experts, const MergeOptions& opts) {
    if (experts.empty()) throw IncompatibleExpertsError("merge: no experts given");
    const int n = static_cast<int>(experts.size());

    ModelConfig base = config_from_checkpoint(experts[0]);
    if (base.experts != 1) throw IncompatibleExpertsError("merge: expert checkpoints must be dense (experts=1)");
    std::vector<std::string> names = experts[0].names();
    for (int e = 1; e < n; ++e) {
        ModelConfig c = config_from_checkpoint(experts[e]);
        if (c.to_json() != base.to_json())
            throw IncompatibleExpertsError("merge: expert " + std::to_string(e) + " has a different model config");
        std::vector<std::string> other = experts[e].names();
        if (other != names) {
            for (size_t i = 0; i < std::min(names.size(), other.size()); ++i)
                if (names[i] != other[i])
                    throw IncompatibleExpertsError("merge: tensor name sets differ, first mismatch " + names[i] +
                                                   " vs " + other[i]);
            throw IncompatibleExpertsError("merge: tensor name sets differ in length");
        }
        for (const auto& name : names)
            if (experts[e].at(name)->dims != experts[0].at(name)->dims)
                throw IncompatibleExpertsError("merge: tensor " + name + " has mismatched dims across experts");
    }

    ModelConfig merged_cfg = base;
    merged_cfg.experts = n;
    merged_cfg.routing = opts.routing;

    Checkpoint out;
    out.metadata["model"] = merged_cfg.to_json();
    out.metadata["router_init"] = router_init_name(opts.router_init);
    out.metadata["seed"] = opts.seed;
    nlohmann::json provenance = nlohmann::json::array();
    for (int e = 0; e < n; ++e) {
        nlohmann::json src;
        src["expert"] = e;
        if (experts[e].metadata.contains("name")) src["name"] = experts[e].metadata["name"];
        if (experts[e].metadata.contains("seed")) src["seed"] = experts[e].metadata["seed"];
        provenance.push_back(src);
    }
    out.metadata["provenance"] = provenance;

    for (const std::string& name : canonical_param_names(merged_cfg)) {
        if (name.find(".gate.weight") != std::string::npos && name.find("gate_proj") == std::string::npos) {
            size_t l0 = name.find('.') + 1;
            uint64_t layer = std::stoull(name.substr(l0));
            out.add(name, make_router_gate(opts.router_init, base.dim, n, derive_seed(opts.seed, layer),
                                           opts.centroids));
            continue;
        }
        size_t expert_pos = name.find(".experts.");
        if (expert_pos != std::string::npos) {
            // verbatim copy of the source expert's FFN tensor bytes
            size_t id_start = expert_pos + std::string(".experts.").size();
            size_t id_end = name.find('.', id_start);
            int e = std::stoi(name.substr(id_start, id_end - id_start));
            std::string src_name = name.substr(0, expert_pos) + ".ffn." + name.substr(id_end + 1);
            TensorF src = experts[static_cast<size_t>(e)].at(src_name);
            auto copy = make_tensor<float>(src->dims);
            copy->data = src->data;
            out.add(name, copy);
            continue;
        }
        // shared trunk: arithmetic mean in 64-bit, fixed left-to-right order
        TensorF first = experts[0].at(name);
        auto avg = make_tensor<float>(first->dims);
        std::vector<double> acc(static_cast<size_t>(first->numel()), 0.0);
        for (int e = 0; e < n; ++e) {
            const auto& d = experts[static_cast<size_t>(e)].at(name)->data;
            for (size_t i = 0; i < acc.size(); ++i) acc[i] += static_cast<double>(d[i]);
        }
        for (size_t i = 0; i < acc.size(); ++i)
            avg->data[i] = static_cast<float>(acc[i] / static_cast<double>(n));
        out.add(name, avg);
    }
    return out;
}

}  // namespace lmlx
