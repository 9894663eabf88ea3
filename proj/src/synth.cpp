#include "lmlx/synth.hpp"

#include <array>

#include "lmlx/rng.hpp"
#include "lmlx/tensor.hpp"

namespace lmlx {

namespace {

struct DomainSpec {
    const char* name;
    std::array<const char*, 6> syllables;
    const char* stem;
    std::array<const char*, 6> tails;
    std::array<const char*, 5> nouns;
    std::array<const char*, 4> verbs;
    // context skeletons are domain-specific so surface structure correlates
    // with domain rather than cutting across it
    std::array<const char*, 3> templates;  // %T term, %V verb, %N noun
};

const std::array<DomainSpec, 4> kDomains = {{
    {"botany",
     {"fer", "nil", "mos", "lia", "vel", "dra"},
     "a leafy plant that",
     {"thrives in damp soil", "blooms in early spring", "spreads along the fence",
      "wilts without sunlight", "grows beside the stream", "sheds seeds in autumn"},
     {"garden", "meadow", "hedge", "orchard", "trellis"},
     {"grows", "blooms", "sprouts", "climbs"},
     {"wild %T %V near the mossy %N", "gardeners prune %T by the %N", "green %T %V under the shady %N"}},
    {"machinery",
     {"gro", "nak", "tur", "bex", "kol", "zam"},
     "a geared machine that",
     {"presses metal sheets", "lifts heavy crates", "drills narrow holes", "spins at high speed",
      "cuts steel rods", "pumps thick oil"},
     {"workshop", "factory", "piston", "lever", "crank"},
     {"whirs", "clanks", "rotates", "grinds"},
     {"workers bolt %T onto the %N", "our %T %V beside the oily %N", "iron %T %V inside the %N"}},
    {"cuisine",
     {"pla", "rin", "sav", "tok", "mul", "ged"},
     "a savory dish that",
     {"is served with rice", "tastes of smoked pepper", "is baked in clay pots", "is eaten at dawn",
      "is stuffed with herbs", "simmers for hours"},
     {"kitchen", "oven", "spice", "platter", "broth"},
     {"simmers", "sizzles", "steams", "roasts"},
     {"cooks ladle %T from the hot %N", "spiced %T %V over the %N", "fresh %T %V in the busy %N"}},
    {"seafaring",
     {"sel", "mar", "vik", "ton", "hul", "bre"},
     "a rigged vessel that",
     {"sails against the wind", "carries salted cargo", "anchors in shallow bays",
      "rides the winter swell", "ferries quarry stone", "guards the cold strait"},
     {"harbor", "mast", "tide", "wharf", "pier"},
     {"drifts", "moors", "heels", "tacks"},
     {"sailors sight %T off the foggy %N", "salt worn %T %V past the %N", "crews moor %T along the %N"}},
}};

const std::array<const char*, 6> kSharedSyllables = {"qua", "lor", "niv", "pex", "stu", "ram"};

// domain pairs hosting each polysemous term, cycled
const std::array<std::pair<int, int>, 6> kSharedPairs = {{{0, 1}, {1, 2}, {2, 3}, {3, 0}, {0, 2}, {1, 3}}};

std::string make_term(const std::array<const char*, 6>& pool, int index) {
    return std::string(pool[static_cast<size_t>(index / 6 % 6)]) + pool[static_cast<size_t>(index % 6)];
}

std::string make_context(const DomainSpec& dom, const std::string& term, uint64_t key, uint64_t counter) {
    const char* noun = dom.nouns[rng_u64(key, counter * 4 + 0) % dom.nouns.size()];
    const char* verb = dom.verbs[rng_u64(key, counter * 4 + 1) % dom.verbs.size()];
    const char* tmpl = dom.templates[rng_u64(key, counter * 4 + 2) % dom.templates.size()];
    std::string out;
    for (const char* p = tmpl; *p; ++p) {
        if (*p == '%' && p[1]) {
            ++p;
            if (*p == 'T') out += term;
            else if (*p == 'V') out += verb;
            else if (*p == 'N') out += noun;
        } else {
            out.push_back(*p);
        }
    }
    return out;
}

std::string make_definition(const DomainSpec& dom, const std::string& term, int domain_id) {
    // deterministic per (term, domain): the same term always means the same
    // thing within one domain
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : term) {
        h ^= c;
        h *= 1099511628211ull;
    }
    size_t pick = rng_u64(h, static_cast<uint64_t>(domain_id) + 101) % dom.tails.size();
    return std::string(dom.stem) + " " + dom.tails[pick];
}

}  // namespace

int synth_domain_count() { return static_cast<int>(kDomains.size()); }

std::vector<std::string> synth_domain_names() {
    std::vector<std::string> out;
    for (const auto& d : kDomains) out.push_back(d.name);
    return out;
}

SynthCorpus synth_corpus(const SynthConfig& cfg) {
    if (cfg.n_examples < 8) throw ValueError("synth_corpus: too few examples");
    if (cfg.unique_terms_per_domain + cfg.shared_terms_per_domain < 1)
        throw ValueError("synth_corpus: no terms configured");
    const int n_domains = synth_domain_count();

    // terms per domain: unique ones from the domain pool, shared ones from the
    // neutral pool assigned to two domains each
    std::vector<std::vector<std::string>> domain_terms(static_cast<size_t>(n_domains));
    for (int d = 0; d < n_domains; ++d)
        for (int i = 0; i < cfg.unique_terms_per_domain; ++i)
            domain_terms[static_cast<size_t>(d)].push_back(make_term(kDomains[static_cast<size_t>(d)].syllables, i));
    const int total_shared = cfg.shared_terms_per_domain * n_domains / 2;
    for (int s = 0; s < total_shared; ++s) {
        std::string term = make_term(kSharedSyllables, s);
        auto [a, b] = kSharedPairs[static_cast<size_t>(s) % kSharedPairs.size()];
        domain_terms[static_cast<size_t>(a)].push_back(term);
        domain_terms[static_cast<size_t>(b)].push_back(term);
    }

    SynthCorpus corpus;
    const uint64_t ctx_key = derive_seed(cfg.seed, 1);
    const uint64_t split_key = derive_seed(cfg.seed, 2);
    const int per_domain = cfg.n_examples / n_domains;
    uint64_t counter = 0;
    for (int d = 0; d < n_domains; ++d) {
        const DomainSpec& dom = kDomains[static_cast<size_t>(d)];
        const auto& terms = domain_terms[static_cast<size_t>(d)];
        for (int i = 0; i < per_domain; ++i) {
            const std::string& term = terms[static_cast<size_t>(i) % terms.size()];
            Triplet t;
            t.term = term;
            t.context = make_context(dom, term, ctx_key, counter);
            t.definition = make_definition(dom, term, d);
            t.source = dom.name;
            corpus.all.push_back(t);
            // the first example of each (term, domain) group always trains, so
            // every in-domain sense is seen at least once
            bool force_train = static_cast<size_t>(i) < terms.size();
            double u = rng_uniform(split_key, counter);
            ++counter;
            if (force_train || u < cfg.train_frac)
                corpus.train.push_back(t);
            else if (u < cfg.train_frac + cfg.valid_frac)
                corpus.valid.push_back(t);
            else
                corpus.test.push_back(t);
        }
    }
    if (corpus.valid.empty() || corpus.test.empty())
        throw ValueError("synth_corpus: splits came out empty, increase n_examples");
    return corpus;
}

}  // namespace lmlx
