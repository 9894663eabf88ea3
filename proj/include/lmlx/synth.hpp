#pragma once

// Synthetic 4-domain definition-modeling corpus used by the acceptance suite.
// Domains carry disjoint context vocabularies and definition styles; a share
// of terms is polysemous (same surface form in two domains with conflicting
// definitions), so context is required to define them correctly.

#include <cstdint>
#include <vector>

#include "lmlx/corpus.hpp"

namespace lmlx {

struct SynthConfig {
    int n_examples = 2000;
    uint64_t seed = 7;
    int unique_terms_per_domain = 18;
    int shared_terms_per_domain = 18;  // polysemous: each also lives in one other domain
    double train_frac = 0.8;
    double valid_frac = 0.1;
};

struct SynthCorpus {
    std::vector<Triplet> all;  // source field carries the generating domain label
    std::vector<Triplet> train, valid, test;
};

SynthCorpus synth_corpus(const SynthConfig& cfg = {});

int synth_domain_count();
std::vector<std::string> synth_domain_names();

}  // namespace lmlx
