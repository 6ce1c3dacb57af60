#include "monelab/data.hpp"

#include <array>
#include <fstream>

#include "monelab/errors.hpp"
#include "monelab/rng.hpp"

namespace monelab {

std::vector<int32_t> make_repeat_dataset(int64_t period, int64_t total, int64_t vocab_size,
                                         uint64_t seed) {
    if (period < 1 || total < period) throw InputError("repeat dataset needs total >= period >= 1");
    Rng rng = Rng(seed).split(0xDA7A);
    std::vector<int32_t> pattern(static_cast<size_t>(period));
    for (auto& t : pattern) t = static_cast<int32_t>(rng.uniform_int(vocab_size));
    std::vector<int32_t> out(static_cast<size_t>(total));
    for (int64_t i = 0; i < total; ++i)
        out[static_cast<size_t>(i)] = pattern[static_cast<size_t>(i % period)];
    return out;
}

// Markov chain with three successors per state at fixed probabilities
// (0.8 / 0.15 / 0.05): mostly predictable, with an irreducible entropy floor
// so converged cross entropy sits well above zero.
std::vector<int32_t> make_bigram_dataset(int64_t states, int64_t total, int64_t vocab_size,
                                         uint64_t seed) {
    if (states < 4 || states > vocab_size)
        throw InputError("bigram dataset needs 4 <= states <= vocab_size");
    if (total < 1) throw InputError("bigram dataset needs total >= 1");
    Rng rng = Rng(seed).split(0xB16A);

    std::vector<std::array<int32_t, 3>> succ(static_cast<size_t>(states));
    for (int64_t s = 0; s < states; ++s)
        for (int k = 0; k < 3; ++k)
            succ[static_cast<size_t>(s)][static_cast<size_t>(k)] =
                static_cast<int32_t>(rng.uniform_int(states));

    std::vector<int32_t> out(static_cast<size_t>(total));
    int64_t cur = rng.uniform_int(states);
    for (int64_t i = 0; i < total; ++i) {
        out[static_cast<size_t>(i)] = static_cast<int32_t>(cur);
        const double u = rng.uniform();
        const int pick = u < 0.8 ? 0 : (u < 0.95 ? 1 : 2);
        cur = succ[static_cast<size_t>(cur)][static_cast<size_t>(pick)];
    }
    return out;
}

// Order-2 Markov chain: the successor distribution hangs off the (previous,
// current) token pair, so a model needs real context mixing to reach the
// entropy floor. det_pct controls how peaked the chain is (probability of
// the primary successor, in percent; the remainder splits 3:1 over two
// alternates).
std::vector<int32_t> make_markov2_dataset(int64_t states, int64_t total, int64_t vocab_size,
                                          uint64_t seed, int64_t det_pct) {
    if (states < 4 || states > vocab_size)
        throw InputError("markov2 dataset needs 4 <= states <= vocab_size");
    if (total < 2) throw InputError("markov2 dataset needs total >= 2");
    if (det_pct < 1 || det_pct > 99)
        throw InputError("markov2 determinism must lie in [1, 99] percent");
    Rng rng = Rng(seed).split(0x3A2B);

    const int64_t contexts = states * states;
    std::vector<std::array<int32_t, 3>> succ(static_cast<size_t>(contexts));
    for (int64_t c = 0; c < contexts; ++c)
        for (int k = 0; k < 3; ++k)
            succ[static_cast<size_t>(c)][static_cast<size_t>(k)] =
                static_cast<int32_t>(rng.uniform_int(states));

    const double p0 = static_cast<double>(det_pct) / 100.0;
    const double p1 = p0 + (1.0 - p0) * 0.75;
    std::vector<int32_t> out(static_cast<size_t>(total));
    int64_t prev = rng.uniform_int(states);
    int64_t cur = rng.uniform_int(states);
    out[0] = static_cast<int32_t>(prev);
    out[1] = static_cast<int32_t>(cur);
    for (int64_t i = 2; i < total; ++i) {
        const double u = rng.uniform();
        const int pick = u < p0 ? 0 : (u < p1 ? 1 : 2);
        const int64_t next = succ[static_cast<size_t>(prev * states + cur)]
                                 [static_cast<size_t>(pick)];
        out[static_cast<size_t>(i)] = static_cast<int32_t>(next);
        prev = cur;
        cur = next;
    }
    return out;
}

std::vector<int32_t> load_byte_dataset(const std::string& path, int64_t vocab_size) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open data file '" + path + "'");
    std::vector<int32_t> out;
    char c;
    while (in.get(c)) {
        const int32_t tok = static_cast<int32_t>(static_cast<unsigned char>(c));
        if (tok >= vocab_size)
            throw InputError("byte value " + std::to_string(tok) +
                             " exceeds vocab_size=" + std::to_string(vocab_size));
        out.push_back(tok);
    }
    if (out.empty()) throw InputError("data file '" + path + "' is empty");
    return out;
}

namespace {

std::vector<int64_t> parse_fields(const std::string& s) {
    std::vector<int64_t> out;
    size_t pos = 0;
    while (pos < s.size()) {
        size_t colon = s.find(':', pos);
        std::string field = s.substr(pos, colon == std::string::npos ? colon : colon - pos);
        try {
            out.push_back(std::stoll(field));
        } catch (const std::exception&) {
            throw InputError("bad numeric field '" + field + "' in dataset spec");
        }
        if (colon == std::string::npos) break;
        pos = colon + 1;
    }
    return out;
}

}  // namespace

std::vector<int32_t> load_dataset(const std::string& spec, int64_t vocab_size, uint64_t seed) {
    if (spec.rfind("repeat:", 0) == 0) {
        auto f = parse_fields(spec.substr(7));
        if (f.size() != 2) throw InputError("repeat spec is repeat:<period>:<total>");
        return make_repeat_dataset(f[0], f[1], vocab_size, seed);
    }
    if (spec.rfind("bigram:", 0) == 0) {
        auto f = parse_fields(spec.substr(7));
        if (f.size() != 2) throw InputError("bigram spec is bigram:<states>:<total>");
        return make_bigram_dataset(f[0], f[1], vocab_size, seed);
    }
    if (spec.rfind("markov2:", 0) == 0) {
        auto f = parse_fields(spec.substr(8));
        if (f.size() != 2 && f.size() != 3)
            throw InputError("markov2 spec is markov2:<states>:<total>[:<det_pct>]");
        return make_markov2_dataset(f[0], f[1], vocab_size, seed,
                                    f.size() == 3 ? f[2] : 80);
    }
    if (spec.rfind("bytes:", 0) == 0) return load_byte_dataset(spec.substr(6), vocab_size);
    return load_byte_dataset(spec, vocab_size);
}

}  // namespace monelab
