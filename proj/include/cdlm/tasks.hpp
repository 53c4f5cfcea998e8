#pragma once

#include <algorithm>
#include <cctype>
#include <random>
#include <string>
#include <vector>

#include "cdlm/array.hpp"
#include "cdlm/vocab.hpp"

namespace cdlm {

enum class TaskKind { Copy, Reverse, ModSum, ChainSum, Walk, Anagram };

inline TaskKind task_kind_from_string(const std::string& s) {
    if (s == "copy") return TaskKind::Copy;
    if (s == "reverse") return TaskKind::Reverse;
    if (s == "modsum") return TaskKind::ModSum;
    if (s == "chainsum") return TaskKind::ChainSum;
    if (s == "walk") return TaskKind::Walk;
    if (s == "anagram") return TaskKind::Anagram;
    throw std::invalid_argument("unknown task kind: " + s);
}

inline std::string to_string(TaskKind k) {
    switch (k) {
        case TaskKind::Copy: return "copy";
        case TaskKind::Reverse: return "reverse";
        case TaskKind::ModSum: return "modsum";
        case TaskKind::ChainSum: return "chainsum";
        case TaskKind::Walk: return "walk";
        case TaskKind::Anagram: return "anagram";
    }
    return "?";
}

struct TaskSpec {
    TaskKind kind = TaskKind::Copy;
    int min_len = 4;   // payload symbols per prompt
    int max_len = 12;
    int n_symbols = 20;  // vocabulary subset used for payloads
    int base = 10;       // modsum / chainsum modulus
    int n_train = 400, n_val = 64, n_test = 200;
    std::uint64_t seed = 0;
    int gen_budget = 64;  // answers (plus EOT) must fit here

    void validate() const {
        check(min_len >= 1 && max_len >= min_len, "TaskSpec: bad length range");
        check(n_symbols >= 2 && base >= 2, "TaskSpec: bad alphabet");
        if (kind == TaskKind::Walk || kind == TaskKind::Anagram)
            check(n_symbols >= max_len,
                  "TaskSpec: distinct-symbol payloads need n_symbols >= max_len");
        check(max_answer_len() + 1 <= gen_budget,
              "TaskSpec: answer plus EOT exceeds the generation budget");
    }
    int max_answer_len() const {
        switch (kind) {
            case TaskKind::ModSum: return 1;
            default: return max_len;
        }
    }
};

struct TaskSample {
    std::vector<int> prompt;      // unpadded: task token + payload symbols
    std::vector<int> answer;      // reference answer symbols (no EOT)
    std::string answer_text;
};

inline std::string detokenize(const std::vector<int>& tokens) {
    std::string s;
    for (int t : tokens) {
        if (t == tok::EOT) break;
        if (t == tok::PAD || t == tok::MASK || t < tok::FIRST_SYMBOL) continue;
        s.push_back(tok::symbol_char(t - tok::FIRST_SYMBOL));
    }
    return s;
}

namespace detail {

inline TaskSample make_sample(const TaskSpec& spec, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> len_dist(spec.min_len, spec.max_len);
    const int len = len_dist(rng);
    TaskSample s;
    switch (spec.kind) {
        case TaskKind::Copy: {
            std::uniform_int_distribution<int> sym(0, spec.n_symbols - 1);
            s.prompt.push_back(tok::TASK_COPY);
            for (int i = 0; i < len; ++i) {
                const int v = sym(rng);
                s.prompt.push_back(tok::symbol_token(v));
                s.answer.push_back(tok::symbol_token(v));
            }
            break;
        }
        case TaskKind::Reverse: {
            std::uniform_int_distribution<int> sym(0, spec.n_symbols - 1);
            s.prompt.push_back(tok::TASK_REVERSE);
            std::vector<int> payload;
            for (int i = 0; i < len; ++i) payload.push_back(sym(rng));
            for (int v : payload) s.prompt.push_back(tok::symbol_token(v));
            for (auto it = payload.rbegin(); it != payload.rend(); ++it)
                s.answer.push_back(tok::symbol_token(*it));
            break;
        }
        case TaskKind::ModSum: {
            // digits are symbols 'a'..; answer is their sum mod base
            std::uniform_int_distribution<int> digit(0, spec.base - 1);
            s.prompt.push_back(tok::TASK_MODSUM);
            int sum = 0;
            for (int i = 0; i < len; ++i) {
                const int d = digit(rng);
                sum += d;
                s.prompt.push_back(tok::symbol_token(d));
            }
            s.answer.push_back(tok::symbol_token(sum % spec.base));
            break;
        }
        case TaskKind::ChainSum: {
            // seed digit then deltas; answer_i = (answer_{i-1} + delta_i) mod base
            std::uniform_int_distribution<int> digit(0, spec.base - 1);
            s.prompt.push_back(tok::TASK_CHAINSUM);
            int acc = digit(rng);
            s.prompt.push_back(tok::symbol_token(acc));
            for (int i = 0; i < len; ++i) {
                const int d = digit(rng);
                s.prompt.push_back(tok::symbol_token(d));
                acc = (acc + d) % spec.base;
                s.answer.push_back(tok::symbol_token(acc));
            }
            break;
        }
        case TaskKind::Walk: {
            // prompt lists `len` distinct symbols followed by a start symbol
            // drawn from that list; each answer token is the cyclic successor
            // (in prompt order) of the previous one, for `len` steps
            std::vector<int> pool(spec.n_symbols);
            for (int i = 0; i < spec.n_symbols; ++i) pool[i] = i;
            std::shuffle(pool.begin(), pool.end(), rng);
            s.prompt.push_back(tok::TASK_WALK);
            for (int i = 0; i < len; ++i) s.prompt.push_back(tok::symbol_token(pool[i]));
            std::uniform_int_distribution<int> start(0, len - 1);
            int j = start(rng);
            s.prompt.push_back(tok::symbol_token(pool[j]));
            for (int i = 0; i < len; ++i) {
                j = (j + 1) % len;
                s.answer.push_back(tok::symbol_token(pool[j]));
            }
            break;
        }
        case TaskKind::Anagram: {
            // prompt lists `len` distinct symbols; any permutation of them is a
            // correct answer. The stored reference is one permutation drawn at
            // random, so the learnable per-position signal is "an unused payload
            // symbol", never a specific token.
            std::vector<int> pool(spec.n_symbols);
            for (int i = 0; i < spec.n_symbols; ++i) pool[i] = i;
            std::shuffle(pool.begin(), pool.end(), rng);
            s.prompt.push_back(tok::TASK_ANAGRAM);
            std::vector<int> payload(pool.begin(), pool.begin() + len);
            for (int v : payload) s.prompt.push_back(tok::symbol_token(v));
            std::shuffle(payload.begin(), payload.end(), rng);
            for (int v : payload) s.answer.push_back(tok::symbol_token(v));
            break;
        }
    }
    s.answer_text = detokenize(s.answer);
    return s;
}

}  // namespace detail

struct TaskData {
    std::vector<TaskSample> train, val, test;
};

/// Deterministic given the seed; splits are disjoint by construction
/// (one RNG stream consumed in order).
inline TaskData generate_task_data(const TaskSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed ^ fnv1a("task:" + to_string(spec.kind)));
    TaskData d;
    for (int i = 0; i < spec.n_train; ++i) d.train.push_back(detail::make_sample(spec, rng));
    for (int i = 0; i < spec.n_val; ++i) d.val.push_back(detail::make_sample(spec, rng));
    for (int i = 0; i < spec.n_test; ++i) d.test.push_back(detail::make_sample(spec, rng));
    return d;
}

/// Answer tokens padded with EOT to exactly gen_len (training target form).
inline std::vector<int> padded_answer(const TaskSample& s, int gen_len) {
    check(static_cast<int>(s.answer.size()) < gen_len, "padded_answer: answer does not fit");
    std::vector<int> out = s.answer;
    out.resize(gen_len, tok::EOT);
    return out;
}

inline std::string normalize_text(const std::string& s) {
    std::string out;
    for (char c : s)
        if (!std::isspace(static_cast<unsigned char>(c))) out.push_back(c);
    return out;
}

/// Percentage of outputs exactly matching their reference after EOT
/// truncation and whitespace normalization.
inline double score_exact_match(const std::vector<std::string>& outputs,
                                const std::vector<std::string>& references) {
    check(outputs.size() == references.size(), "score_exact_match: count mismatch");
    if (outputs.empty()) return 0.0;
    int hits = 0;
    for (std::size_t i = 0; i < outputs.size(); ++i)
        if (normalize_text(outputs[i]) == normalize_text(references[i])) ++hits;
    return 100.0 * hits / static_cast<double>(outputs.size());
}

/// Task-aware scoring. Deterministic tasks use exact match; anagram accepts
/// any permutation of the payload (equivalently: the output and the reference
/// answer, a permutation of the payload, must match as sorted strings).
inline double score_task(TaskKind kind, const std::vector<std::string>& outputs,
                         const std::vector<std::string>& references) {
    if (kind != TaskKind::Anagram) return score_exact_match(outputs, references);
    auto canon = [](const std::string& s) {
        std::string t = normalize_text(s);
        std::sort(t.begin(), t.end());
        return t;
    };
    check(outputs.size() == references.size(), "score_task: count mismatch");
    if (outputs.empty()) return 0.0;
    int hits = 0;
    for (std::size_t i = 0; i < outputs.size(); ++i)
        if (canon(outputs[i]) == canon(references[i])) ++hits;
    return 100.0 * hits / static_cast<double>(outputs.size());
}

}  // namespace cdlm
