#pragma once

#include <string>

#include "cdlm/io.hpp"

namespace cdlm::tok {

// Fixed special-token layout shared by every component.
constexpr int PAD = 0;
constexpr int MASK = 1;
constexpr int EOT = 2;
constexpr int TASK_COPY = 3;
constexpr int TASK_REVERSE = 4;
constexpr int TASK_MODSUM = 5;
constexpr int TASK_CHAINSUM = 6;
constexpr int TASK_WALK = 7;
constexpr int TASK_ANAGRAM = 8;
constexpr int FIRST_SYMBOL = 9;

constexpr const char* SYMBOL_CHARS = "abcdefghijklmnopqrstuvwxyz0123456789+-*/";

inline int symbol_token(int symbol) { return FIRST_SYMBOL + symbol; }

inline char symbol_char(int symbol) { return SYMBOL_CHARS[symbol]; }

inline std::uint64_t vocab_hash(int vocab_size) {
    return fnv1a("cdlm-vocab-v1:" + std::to_string(vocab_size) + ":" +
                 std::to_string(FIRST_SYMBOL));
}

}  // namespace cdlm::tok
