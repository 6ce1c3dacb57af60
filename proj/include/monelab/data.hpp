#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace monelab {

// Synthetic corpora and byte-level files, addressed by spec string:
//   repeat:<period>:<total>          fixed repeating pattern of <period> tokens
//   bigram:<states>:<total>          peaked random bigram chain (entropy floor)
//   markov2:<states>:<total>[:<det>] order-2 chain keyed on the last two tokens;
//                                    det = primary-successor percent (default 80)
//   bytes:<path> (or a bare path)    raw file bytes, needs vocab_size >= 256
// Synthetic data is deterministic in (spec, seed).
std::vector<int32_t> load_dataset(const std::string& spec, int64_t vocab_size, uint64_t seed);

std::vector<int32_t> make_repeat_dataset(int64_t period, int64_t total, int64_t vocab_size,
                                         uint64_t seed);
std::vector<int32_t> make_bigram_dataset(int64_t states, int64_t total, int64_t vocab_size,
                                         uint64_t seed);
std::vector<int32_t> make_markov2_dataset(int64_t states, int64_t total, int64_t vocab_size,
                                          uint64_t seed, int64_t det_pct = 80);
std::vector<int32_t> load_byte_dataset(const std::string& path, int64_t vocab_size);

}  // namespace monelab
