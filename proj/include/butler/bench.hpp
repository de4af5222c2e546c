#pragma once

#include <string>
#include <vector>

#include "butler/common.hpp"
#include "butler/rng.hpp"

namespace butler {

// Pools for the co-reference retrieval benchmark. Lead i pairs with
// prelude i: both mention the same scenery fillers, so the prelude ties
// back to the location introduced by the lead.
struct BenchPools {
    std::vector<std::string> locations;
    std::vector<std::string> leads;
    std::vector<std::string> preludes;
    std::vector<std::string> philosophical;
    std::vector<std::string> culinary;
    std::vector<std::string> math;
};

struct PoolSizes {
    int locations = 100;
    int lead_pairs = 100;
    int philosophical = 100;
    int culinary = 100;
    int math = 100;
};

struct BenchSample {
    std::string text;       // full rendered sequence
    std::string location;   // the co-referenced name
    size_t first_begin = 0;  // char span of the first occurrence
    size_t first_end = 0;
    std::string prefix;     // text ending exactly before the final occurrence
    uint64_t seed = 0;
};

struct Score {
    int accuracy = 0;      // 1 iff the whole location was produced
    double coverage = 0;   // fraction of location tokens produced in place
};

namespace bench_detail {

inline const std::vector<std::string>& syllables() {
    static const std::vector<std::string> v{"zar", "mel", "vor", "thys", "quin", "bel",
                                            "dra", "fen", "gal", "hyl",  "kor",  "lum",
                                            "myr", "nal", "oss", "pyr",  "rav",  "syl",
                                            "tor", "ven", "wis", "xan",  "yor",  "zen"};
    return v;
}

inline const std::vector<std::string>& suffixes() {
    static const std::vector<std::string> v{"grove", "spire", "haven", "reach", "hollow",
                                            "fall",  "crest", "moor",  "shade", "gate",
                                            "vale",  "wick",  "ford",  "mere",  "strand"};
    return v;
}

inline const std::vector<std::string>& adjectives() {
    static const std::vector<std::string> v{"misty", "pale", "amber", "mossy", "quiet",
                                            "frozen", "gilded", "sunken", "stormy", "silent"};
    return v;
}

inline const std::vector<std::string>& nouns() {
    static const std::vector<std::string> v{"fog",   "dunes", "vines", "reefs", "ruins",
                                            "canals", "cliffs", "caves", "peaks", "marshes"};
    return v;
}

inline const std::vector<std::string>& colors() {
    static const std::vector<std::string> v{"violet", "teal",  "jade",  "golden", "ivory",
                                            "umber",  "russet", "silver", "copper", "pearl"};
    return v;
}

inline const std::vector<std::string>& verbs() {
    static const std::vector<std::string> v{"glows", "hums",  "drifts", "waits", "rises",
                                            "stands", "sleeps", "sings",  "hides", "turns"};
    return v;
}

inline const std::vector<std::string>& abstracts() {
    static const std::vector<std::string> v{"memory", "silence", "change", "desire", "doubt",
                                            "courage", "habit",  "wonder", "sorrow", "truth"};
    return v;
}

inline const std::vector<std::string>& metaphors() {
    static const std::vector<std::string> v{"slow tide",  "worn path",  "folded map",
                                            "long shadow", "buried seed", "quiet river",
                                            "turning wheel", "distant bell", "burning lamp",
                                            "broken mirror"};
    return v;
}

inline const std::vector<std::string>& dishes() {
    static const std::vector<std::string> v{"smoky stew",  "plum tart",   "seared trout",
                                            "spiced broth", "honeyed bread", "pickled figs",
                                            "saffron rice", "braised leeks", "roast squash",
                                            "bean soup"};
    return v;
}

inline const std::vector<std::string>& flavors() {
    static const std::vector<std::string> v{"bitter", "smoky", "tangy", "earthy", "floral",
                                            "briny",  "nutty", "woody", "sharp",  "mellow"};
    return v;
}

template <typename T>
const T& pick(Rng& rng, const std::vector<T>& pool) {
    return pool[size_t(rng.next_below(pool.size()))];
}

inline size_t count_occurrences(const std::string& text, const std::string& needle) {
    size_t n = 0;
    for (size_t pos = text.find(needle); pos != std::string::npos;
         pos = text.find(needle, pos + 1))
        ++n;
    return n;
}

}  // namespace bench_detail

// Deterministic procedural pools (stand-in for externally generated text).
inline BenchPools build_pools(uint64_t seed, const PoolSizes& sizes = {}) {
    using namespace bench_detail;
    if (sizes.locations < 1 || sizes.lead_pairs < 1 || sizes.philosophical < 1 ||
        sizes.culinary < 1 || sizes.math < 1)
        throw ContractError("pool sizes must be >= 1");
    BenchPools pools;
    Rng root(seed);

    Rng lr = root.stream("bench-pools/locations");
    while (int(pools.locations.size()) < sizes.locations) {
        std::string name = pick(lr, syllables());
        name += pick(lr, suffixes());
        bool dup = false;
        for (const auto& existing : pools.locations) dup = dup || existing == name;
        if (!dup) pools.locations.push_back(std::move(name));
    }

    Rng pr = root.stream("bench-pools/leads");
    for (int i = 0; i < sizes.lead_pairs; ++i) {
        const std::string& adj = pick(pr, adjectives());
        const std::string& noun = pick(pr, nouns());
        const std::string& color = pick(pr, colors());
        const std::string& verb = pick(pr, verbs());
        pools.leads.push_back("amid " + adj + " " + noun + " a place " + verb + " in " + color +
                              " light. it is called:");
        pools.preludes.push_back("which place " + verb + " in " + color + " light amid " + adj +
                                 " " + noun + "?:");
    }

    Rng hr = root.stream("bench-pools/philosophical");
    for (int i = 0; i < sizes.philosophical; ++i)
        pools.philosophical.push_back("sages call " + pick(hr, abstracts()) + " a " +
                                      pick(hr, metaphors()) + ".");

    Rng cr = root.stream("bench-pools/culinary");
    for (int i = 0; i < sizes.culinary; ++i)
        pools.culinary.push_back("the " + pick(cr, dishes()) + " has " + pick(cr, flavors()) +
                                 " notes.");

    Rng mr = root.stream("bench-pools/math");
    for (int i = 0; i < sizes.math; ++i) {
        int a = int(mr.next_below(80)) + 10;
        int b = int(mr.next_below(60)) + 5;
        int c = int(mr.next_below(40)) + 1;
        pools.math.push_back(std::to_string(a) + " plus " + std::to_string(b) + " minus " +
                             std::to_string(c) + " makes " + std::to_string(a + b - c) + ".");
    }
    return pools;
}

// One sequence per the template: lead, location, three distractors, prelude,
// location again. The location must appear exactly twice and the rendered
// text must stay under the 512-token cap; otherwise the next sub-seed is
// tried, with bounded retries.
inline BenchSample render_sample(const BenchPools& pools, uint64_t seed, int max_chars = 510) {
    using namespace bench_detail;
    for (int attempt = 0; attempt < 16; ++attempt) {
        Rng rng = Rng(seed).stream("bench-samples", uint64_t(attempt));
        size_t li = size_t(rng.next_below(pools.leads.size()));
        const std::string& loc = pools.locations[size_t(rng.next_below(pools.locations.size()))];
        const std::string& phil =
            pools.philosophical[size_t(rng.next_below(pools.philosophical.size()))];
        const std::string& cul = pools.culinary[size_t(rng.next_below(pools.culinary.size()))];
        const std::string& math = pools.math[size_t(rng.next_below(pools.math.size()))];

        BenchSample s;
        s.seed = seed;
        s.location = loc;
        std::string lead = pools.leads[li];
        s.text = lead + " " + loc + ". " + phil + " " + cul + " " + math + " " +
                 pools.preludes[li] + " " + loc;
        s.first_begin = lead.size() + 1;
        s.first_end = s.first_begin + loc.size();
        size_t last = s.text.rfind(loc);
        s.prefix = s.text.substr(0, last);
        if (count_occurrences(s.text, loc) != 2) continue;
        if (int(s.text.size()) > max_chars) continue;
        return s;
    }
    throw DataError("could not render a valid sample for seed " + std::to_string(seed));
}

// Positional token match of the produced continuation against the expected
// location tokens: coverage counts matching positions, accuracy is all-or-
// nothing.
inline Score score_prediction(const std::vector<int>& expected, const std::vector<int>& produced) {
    if (expected.empty()) throw ContractError("score_prediction needs a non-empty expectation");
    if (produced.size() < expected.size())
        throw ContractError("produced continuation shorter than the expected span");
    size_t hit = 0;
    for (size_t i = 0; i < expected.size(); ++i)
        if (produced[i] == expected[i]) ++hit;
    Score s;
    s.coverage = double(hit) / double(expected.size());
    s.accuracy = hit == expected.size() ? 1 : 0;
    return s;
}

// Training text assembled from the same pools: rendered samples plus a
// gazetteer section so every location name is seen in training.
inline std::string build_corpus(const BenchPools& pools, uint64_t seed, int n_samples) {
    using namespace bench_detail;
    Rng root(seed);
    std::string out;
    Rng gr = root.stream("corpus-gazetteer");
    for (const auto& loc : pools.locations) {
        out += "travelers still speak of " + loc + " beyond the " +
               pick(gr, adjectives()) + " " + pick(gr, nouns()) + ".\n";
    }
    Rng sr = root.stream("corpus-samples");
    for (int i = 0; i < n_samples; ++i) {
        BenchSample s = render_sample(pools, sr.next_u64());
        out += s.text;
        out += "\n";
    }
    return out;
}

}  // namespace butler
