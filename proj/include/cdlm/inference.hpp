#pragma once

#include <chrono>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cdlm/diffusion.hpp"
#include "cdlm/model.hpp"
#include "cdlm/trajectory.hpp"

namespace cdlm {

enum class DecodeMode { Cdlm, TeacherNaive, TeacherTruncated };

struct DecodeConfig {
    int gen_len = 64;      // L_g
    int block_size = 8;    // B
    int step_budget = 64;  // N; teacher modes spread N over the blocks
    int prompt_budget = 24;
    double tau_conf = 0.9;
    double temperature = 0.0;
    DecodeMode mode = DecodeMode::Cdlm;
    bool early_stop = true;
    bool use_cache = true;  // Cdlm only; disable for the recompute oracle

    void validate() const {
        check(gen_len >= 1 && block_size >= 1 && gen_len % block_size == 0,
              "DecodeConfig: gen_len must be a positive multiple of block_size");
        check(tau_conf > 0.0 && tau_conf <= 1.0, "DecodeConfig: tau_conf outside (0,1]");
        if (mode != DecodeMode::Cdlm) {
            const int n_blocks = gen_len / block_size;
            check(step_budget >= n_blocks && step_budget % n_blocks == 0,
                  "DecodeConfig: step budget does not divide evenly into per-block schedules");
            check(gen_len % step_budget == 0,
                  "DecodeConfig: tokens revealed per step must be a whole number");
        }
    }
};

struct DecodeMetrics {
    int total_steps = 0;        // model forward calls used for refinement
    double latency = 0.0;       // wall seconds of the generation routine
    int generated_length = 0;   // valid tokens before the first EOT
    double tps = 0.0;
};

/// Truncates at the first EOT and derives tokens/second.
inline DecodeMetrics measure(int total_steps, double latency_seconds,
                             const std::vector<int>& gen_tokens) {
    DecodeMetrics m;
    m.total_steps = total_steps;
    m.latency = latency_seconds;
    for (int t : gen_tokens) {
        if (t == tok::EOT) break;
        ++m.generated_length;
    }
    m.tps = (m.generated_length > 0 && latency_seconds > 0.0)
                ? m.generated_length / latency_seconds
                : 0.0;
    return m;
}

struct DecodeResult {
    std::vector<int> gen_tokens;  // generation span, length gen_len
    DecodeMetrics metrics;
};

namespace detail {
inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}
}  // namespace detail

/// Block-wise decoding for the block-causal student: per step, finalize every
/// masked position of the active block whose confidence exceeds tau_conf, or
/// the single most confident one when none qualify. Finalized blocks are
/// committed to the KV cache; decoding stops early once a block containing
/// EOT is fully resolved.
template <class T>
DecodeResult decode_cdlm(const std::vector<int>& prompt, const Model<T>& student,
                         const DecodeConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    check(cfg.mode == DecodeMode::Cdlm, "decode_cdlm: wrong mode");
    const auto t0 = std::chrono::steady_clock::now();

    std::vector<int> padded = left_pad_prompt<T>(prompt, cfg.prompt_budget);
    SequenceState state = SequenceState::fully_masked(padded, cfg.gen_len);
    const auto mode = AttentionMode::block_causal(cfg.block_size, state.prompt_len);
    KVCache<T> cache(student.cfg, cfg.block_size, state.prompt_len);

    const int n_blocks = cfg.gen_len / cfg.block_size;
    int steps = 0;
    bool stopped = false;
    for (int b = 0; b < n_blocks && !stopped; ++b) {
        const int begin = state.prompt_len + b * cfg.block_size;
        const int end = begin + cfg.block_size;
        while (true) {
            int n_masked = 0;
            for (int i = begin; i < end; ++i)
                if (state.tokens[i] == tok::MASK) ++n_masked;
            if (n_masked == 0) break;

            ForwardOutput<T> out;
            if (cfg.use_cache) {
                out = student.forward(state.tokens, mode, cache);
            } else {
                out = student.forward(state.tokens, mode);
            }
            ++steps;
            const int base = out.first_pos;

            std::vector<std::pair<int, Confidence>> cand;
            for (int i = begin; i < end; ++i) {
                if (state.tokens[i] != tok::MASK) continue;
                cand.push_back({i, compute_confidence(out.logits.row(i - base),
                                                      student.cfg.vocab_size, cfg.temperature,
                                                      rng)});
            }
            int finalized = 0;
            for (auto& [pos, c] : cand) {
                if (c.score > cfg.tau_conf) {
                    state.tokens[pos] = c.token;
                    ++finalized;
                }
            }
            if (finalized == 0) {
                // guarantee progress: reveal the single most confident token
                int best = 0;
                for (std::size_t i = 1; i < cand.size(); ++i)
                    if (cand[i].second.score > cand[best].second.score) best = static_cast<int>(i);
                state.tokens[cand[best].first] = cand[best].second.token;
            }
        }
        if (cfg.early_stop) {
            for (int i = begin; i < end; ++i)
                if (state.tokens[i] == tok::EOT) stopped = true;
        }
        if (!stopped && cfg.use_cache && b + 1 < n_blocks)
            student.commit_block(cache, state.tokens, b);
    }
    // positions of skipped blocks stay MASK and are reported unused
    std::vector<int> gen(state.tokens.begin() + state.prompt_len, state.tokens.end());
    DecodeResult res;
    res.metrics = measure(steps, detail::seconds_since(t0), gen);
    res.gen_tokens = std::move(gen);
    return res;
}

/// Bidirectional teacher decoding with full recompute per step.
/// TeacherNaive finalizes one token per step (N = L_g); TeacherTruncated
/// spreads a smaller budget N over the blocks, revealing L_g/N tokens per step.
template <class T>
DecodeResult decode_teacher(const std::vector<int>& prompt, const Model<T>& teacher,
                            const DecodeConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    check(cfg.mode == DecodeMode::TeacherNaive || cfg.mode == DecodeMode::TeacherTruncated,
          "decode_teacher: wrong mode");
    const int budget = cfg.mode == DecodeMode::TeacherNaive ? cfg.gen_len : cfg.step_budget;
    check(cfg.mode != DecodeMode::TeacherNaive || cfg.step_budget == cfg.gen_len,
          "decode_teacher: naive mode requires N == L_g");
    const int n_blocks = cfg.gen_len / cfg.block_size;
    const int steps_per_block = budget / n_blocks;
    const int per_step = cfg.gen_len / budget;  // tokens revealed per step

    const auto t0 = std::chrono::steady_clock::now();
    std::vector<int> padded = left_pad_prompt<T>(prompt, cfg.prompt_budget);
    SequenceState state = SequenceState::fully_masked(padded, cfg.gen_len);
    const auto mode = AttentionMode::bidirectional();

    int steps = 0;
    bool stopped = false;
    for (int b = 0; b < n_blocks && !stopped; ++b) {
        const int begin = state.prompt_len + b * cfg.block_size;
        const int end = begin + cfg.block_size;
        for (int s = 0; s < steps_per_block; ++s) {
            const auto out = teacher.forward(state.tokens, mode);
            ++steps;
            std::vector<std::pair<int, double>> conf;
            std::vector<std::pair<int, int>> chosen;  // position -> token
            for (int i = begin; i < end; ++i) {
                if (state.tokens[i] != tok::MASK) continue;
                const Confidence c = compute_confidence(out.logits.row(i), teacher.cfg.vocab_size,
                                                        cfg.temperature, rng);
                conf.push_back({i, c.score});
                chosen.push_back({i, c.token});
            }
            const int m = std::min<int>(per_step, static_cast<int>(conf.size()));
            if (m == 0) break;
            const auto reveal = select_low_confidence_remask(conf, m);
            for (int pos : reveal)
                for (auto& [p, t] : chosen)
                    if (p == pos) state.tokens[pos] = t;
        }
        if (cfg.early_stop) {
            for (int i = begin; i < end; ++i)
                if (state.tokens[i] == tok::EOT) stopped = true;
        }
    }
    std::vector<int> gen(state.tokens.begin() + state.prompt_len, state.tokens.end());
    DecodeResult res;
    res.metrics = measure(steps, detail::seconds_since(t0), gen);
    res.gen_tokens = std::move(gen);
    return res;
}

}  // namespace cdlm
