#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "cdlm/array.hpp"
#include "cdlm/vocab.hpp"

namespace cdlm {

/// Fixed-length token sequence: prompt span followed by a generation span in
/// which MASK is the only placeholder token.
struct SequenceState {
    std::vector<int> tokens;
    int prompt_len = 0;
    int gen_len = 0;

    int seq_len() const { return prompt_len + gen_len; }

    static SequenceState fully_masked(std::vector<int> prompt, int gen_len) {
        SequenceState s;
        s.prompt_len = static_cast<int>(prompt.size());
        s.gen_len = gen_len;
        s.tokens = std::move(prompt);
        s.tokens.resize(s.tokens.size() + gen_len, tok::MASK);
        return s;
    }

    int masked_count() const {
        int n = 0;
        for (int i = prompt_len; i < seq_len(); ++i)
            if (tokens[i] == tok::MASK) ++n;
        return n;
    }
};

/// Discrete time grid t_k = 1 - k/N.
struct TimeGrid {
    int N;
    explicit TimeGrid(int n) : N(n) { check(n >= 1, "TimeGrid: N must be >= 1"); }
    double t(int k) const {
        check(k >= 0 && k <= N, "TimeGrid: step out of range");
        return 1.0 - static_cast<double>(k) / N;
    }
};

/// Independently replaces each generation-span token with MASK at rate t.
inline SequenceState forward_mask(const SequenceState& clean, double t, std::mt19937_64& rng) {
    check(t >= 0.0 && t <= 1.0, "forward_mask: t outside [0,1]");
    for (int i = clean.prompt_len; i < clean.seq_len(); ++i)
        check(clean.tokens[i] != tok::MASK, "forward_mask: input already masked");
    SequenceState out = clean;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = out.prompt_len; i < out.seq_len(); ++i)
        if (u(rng) < t) out.tokens[i] = tok::MASK;
    return out;
}

/// One-token reverse transition: point mass for an unmasked token; for a
/// masked token, mass s/t on staying MASK and (t-s)/t * q(v) on each token v.
struct ReverseTransition {
    double stay_mask = 0.0;
    std::vector<double> token_probs;  // over the vocabulary

    double total() const {
        double s = stay_mask;
        for (double p : token_probs) s += p;
        return s;
    }
};

inline ReverseTransition reverse_transition_probs(int x_t_token, double s, double t,
                                                  const std::vector<double>& model_dist) {
    check(s >= 0.0 && t <= 1.0, "reverse_transition_probs: (s,t) outside [0,1]");
    check(s < t, "reverse_transition_probs: requires s < t");
    ReverseTransition out;
    out.token_probs.assign(model_dist.size(), 0.0);
    if (x_t_token != tok::MASK) {
        check(x_t_token >= 0 && static_cast<std::size_t>(x_t_token) < model_dist.size(),
              "reverse_transition_probs: token out of range");
        out.token_probs[x_t_token] = 1.0;
        return out;
    }
    out.stay_mask = s / t;
    const double unmask = (t - s) / t;
    for (std::size_t v = 0; v < model_dist.size(); ++v) out.token_probs[v] = unmask * model_dist[v];
    return out;
}

/// Per-position prediction: chosen token plus the model probability backing it.
struct Confidence {
    int token = -1;
    double score = 0.0;  // temperature-1 softmax probability of the chosen token
};

/// temperature == 0 selects the argmax (ties to the lowest token id);
/// temperature > 0 samples from the tempered distribution. Either way the
/// confidence score is the temperature-1 probability of the chosen token.
/// MASK and PAD are never candidates.
template <class T>
Confidence compute_confidence(const T* logits, int vocab_size, double temperature,
                              std::mt19937_64& rng) {
    check(temperature >= 0.0, "compute_confidence: temperature must be >= 0");
    auto allowed = [](int v) { return v != tok::MASK && v != tok::PAD; };

    // temperature-1 probabilities over allowed tokens (max-subtracted)
    double mx = -1e300;
    for (int v = 0; v < vocab_size; ++v)
        if (allowed(v)) mx = std::max(mx, static_cast<double>(logits[v]));
    std::vector<double> p1(vocab_size, 0.0);
    double z1 = 0.0;
    for (int v = 0; v < vocab_size; ++v) {
        if (!allowed(v)) continue;
        p1[v] = std::exp(static_cast<double>(logits[v]) - mx);
        z1 += p1[v];
    }
    for (auto& p : p1) p /= z1;

    Confidence c;
    if (temperature == 0.0) {
        int best = -1;
        for (int v = 0; v < vocab_size; ++v) {
            if (!allowed(v)) continue;
            if (best < 0 || static_cast<double>(logits[v]) > static_cast<double>(logits[best]))
                best = v;
        }
        c.token = best;
    } else {
        std::vector<double> pt(vocab_size, 0.0);
        double zt = 0.0;
        for (int v = 0; v < vocab_size; ++v) {
            if (!allowed(v)) continue;
            pt[v] = std::exp((static_cast<double>(logits[v]) - mx) / temperature);
            zt += pt[v];
        }
        std::uniform_real_distribution<double> u(0.0, 1.0);
        double r = u(rng) * zt;
        int pick = -1;
        for (int v = 0; v < vocab_size; ++v) {
            if (!allowed(v)) continue;
            pick = v;
            r -= pt[v];
            if (r <= 0.0) break;
        }
        c.token = pick;
    }
    c.score = p1[c.token];
    return c;
}

/// Deterministic low-confidence remasking: keep everything masked except the
/// m highest-confidence positions of the active block. Ties break toward the
/// lowest position index.
inline std::vector<int> select_low_confidence_remask(const std::vector<std::pair<int, double>>& conf,
                                                     int m) {
    check(m >= 1, "select_low_confidence_remask: m must be >= 1");
    check(m <= static_cast<int>(conf.size()),
          "select_low_confidence_remask: m exceeds masked positions");
    std::vector<std::pair<int, double>> sorted = conf;
    std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    std::vector<int> out;
    out.reserve(m);
    for (int i = 0; i < m; ++i) out.push_back(sorted[i].first);
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace cdlm
