#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cdlm/diffusion.hpp"
#include "cdlm/io.hpp"
#include "cdlm/model.hpp"
#include "cdlm/vocab.hpp"

namespace cdlm {

struct CollectConfig {
    int gen_len = 64;      // L_g; total steps N == L_g
    int block_size = 8;    // B
    int prompt_budget = 24;
    int max_per_task = 0;  // cap on train prompts used per task (0 = all)

    void validate() const {
        check(gen_len >= 1 && block_size >= 1, "CollectConfig: bad sizes");
        check(gen_len % block_size == 0, "CollectConfig: gen_len not divisible by block_size");
        check(max_per_task >= 0, "CollectConfig: negative max_per_task");
    }
};

/// One teacher finalization: step index (1-based), absolute position, the
/// committed token, and the teacher's last hidden row at that moment.
template <class T>
struct FinalizationEvent {
    int step = 0;
    int position = 0;
    int token = 0;
    std::vector<T> hidden;
};

template <class T>
struct TrajectoryRecord {
    std::vector<int> prompt;        // left-padded to the prompt budget
    std::vector<int> ground_truth;  // reference answer tokens (length gen_len)
    std::vector<FinalizationEvent<T>> events;  // exactly gen_len, in step order
    double temperature = 0.0;
    int gen_len = 0, block_size = 0, total_steps = 0, d_model = 0;

    int prompt_len() const { return static_cast<int>(prompt.size()); }

    /// Hidden-state buffer row for generation-span offset i (0..gen_len-1).
    const std::vector<T>& hidden_for_offset(int i) const {
        for (auto& e : events)
            if (e.position - prompt_len() == i) return e.hidden;
        throw std::invalid_argument("hidden_for_offset: no event for offset " + std::to_string(i));
    }
};

template <class T>
std::vector<int> left_pad_prompt(const std::vector<int>& prompt, int budget) {
    check(static_cast<int>(prompt.size()) <= budget,
          "prompt longer than the configured prompt budget");
    std::vector<int> out(budget - prompt.size(), tok::PAD);
    out.insert(out.end(), prompt.begin(), prompt.end());
    return out;
}

/// Algorithm: run the bidirectional teacher block-wise, finalizing exactly the
/// single top-confidence token per step and recording its hidden row.
template <class T>
TrajectoryRecord<T> collect(const std::vector<int>& prompt, const std::vector<int>& ground_truth,
                            const Model<T>& teacher, const CollectConfig& cfg, double temperature,
                            std::mt19937_64& rng) {
    cfg.validate();
    check(static_cast<int>(ground_truth.size()) == cfg.gen_len,
          "collect: ground truth must span the generation length");
    TrajectoryRecord<T> rec;
    rec.prompt = left_pad_prompt<T>(prompt, cfg.prompt_budget);
    rec.ground_truth = ground_truth;
    rec.temperature = temperature;
    rec.gen_len = cfg.gen_len;
    rec.block_size = cfg.block_size;
    rec.total_steps = cfg.gen_len;  // N = L_g, one finalization per step
    rec.d_model = teacher.cfg.d_model;

    SequenceState state = SequenceState::fully_masked(rec.prompt, cfg.gen_len);
    check(state.seq_len() <= teacher.cfg.max_seq_len, "collect: sequence exceeds max_seq_len");
    const auto mode = AttentionMode::bidirectional();
    const int n_blocks = cfg.gen_len / cfg.block_size;
    int step = 0;
    for (int b = 0; b < n_blocks; ++b) {
        const int block_begin = state.prompt_len + b * cfg.block_size;
        const int block_end = block_begin + cfg.block_size;
        for (int inner = 0; inner < cfg.block_size; ++inner) {
            ++step;
            const auto out = teacher.forward(state.tokens, mode);
            int best_pos = -1;
            Confidence best;
            for (int pos = block_begin; pos < block_end; ++pos) {
                if (state.tokens[pos] != tok::MASK) continue;
                const Confidence c = compute_confidence(out.logits.row(pos),
                                                        teacher.cfg.vocab_size, temperature, rng);
                if (best_pos < 0 || c.score > best.score) {
                    best_pos = pos;
                    best = c;
                }
            }
            state.tokens[best_pos] = best.token;
            FinalizationEvent<T> ev;
            ev.step = step;
            ev.position = best_pos;
            ev.token = best.token;
            const T* h = out.last_hidden.row(best_pos);
            ev.hidden.assign(h, h + teacher.cfg.d_model);
            rec.events.push_back(std::move(ev));
        }
    }
    return rec;
}

/// State after the first k finalization events; all other generation
/// positions remain MASK.
template <class T>
SequenceState reconstruct_state(const TrajectoryRecord<T>& rec, int k) {
    check(k >= 0 && k <= rec.total_steps, "reconstruct_state: k out of range");
    SequenceState s = SequenceState::fully_masked(rec.prompt, rec.gen_len);
    for (int i = 0; i < k; ++i) s.tokens[rec.events[i].position] = rec.events[i].token;
    return s;
}

/// One record per (prompt, temperature) pair.
template <class T>
std::vector<TrajectoryRecord<T>> augment(
    const std::vector<std::pair<std::vector<int>, std::vector<int>>>& prompts,
    const std::vector<double>& temperatures, const Model<T>& teacher, const CollectConfig& cfg,
    std::uint64_t seed) {
    check(!temperatures.empty(), "augment: temperature set must be nonempty");
    std::vector<TrajectoryRecord<T>> out;
    out.reserve(prompts.size() * temperatures.size());
    std::uint64_t stream = 0;
    for (const auto& [prompt, gt] : prompts) {
        for (double tau : temperatures) {
            std::mt19937_64 rng(seed + 0x9E3779B97F4A7C15ull * ++stream);
            out.push_back(collect(prompt, gt, teacher, cfg, tau, rng));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset serialization: header (magic, version, L_g, B, N, d, vocab hash),
// record count, fixed-width event records, trailing CRC32.
// ---------------------------------------------------------------------------

inline constexpr char kTrajMagic[8] = {'C', 'D', 'L', 'M', 'T', 'R', 'A', 'J'};
inline constexpr std::uint32_t kTrajVersion = 1;

template <class T>
void serialize(const std::vector<TrajectoryRecord<T>>& dataset, const std::string& path,
               std::uint64_t vocab_hash) {
    check(!dataset.empty(), "serialize: empty dataset");
    const auto& first = dataset.front();
    ByteWriter w;
    w.raw(kTrajMagic, 8);
    w.u32(kTrajVersion);
    w.u32(static_cast<std::uint32_t>(first.gen_len));
    w.u32(static_cast<std::uint32_t>(first.block_size));
    w.u32(static_cast<std::uint32_t>(first.total_steps));
    w.u32(static_cast<std::uint32_t>(first.d_model));
    w.u64(vocab_hash);
    w.u32(static_cast<std::uint32_t>(dataset.size()));
    for (const auto& rec : dataset) {
        check(rec.gen_len == first.gen_len && rec.block_size == first.block_size &&
                  rec.d_model == first.d_model,
              "serialize: mixed record configurations");
        check(static_cast<int>(rec.events.size()) == rec.gen_len,
              "serialize: record event count mismatch");
        w.u32(static_cast<std::uint32_t>(rec.prompt.size()));
        for (int t : rec.prompt) w.u32(static_cast<std::uint32_t>(t));
        w.u32(static_cast<std::uint32_t>(rec.ground_truth.size()));
        for (int t : rec.ground_truth) w.u32(static_cast<std::uint32_t>(t));
        w.f64(rec.temperature);
        for (const auto& ev : rec.events) {
            w.u32(static_cast<std::uint32_t>(ev.step));
            w.u32(static_cast<std::uint32_t>(ev.position));
            w.u32(static_cast<std::uint32_t>(ev.token));
            for (T h : ev.hidden) w.f32(static_cast<float>(h));
        }
    }
    w.u32(crc32(w.buf.data(), w.buf.size()));
    w.save(path);
}

template <class T>
std::vector<TrajectoryRecord<T>> deserialize(const std::string& path, std::uint64_t vocab_hash) {
    ByteReader r = ByteReader::from_file(path);
    if (r.buf.size() < 12) throw IoError("trajectory file truncated: " + path);
    const std::uint32_t stored = crc32(r.buf.data(), r.buf.size() - 4);
    std::uint32_t trail;
    std::memcpy(&trail, r.buf.data() + r.buf.size() - 4, 4);
    if (stored != trail) throw IoError("trajectory file checksum failure: " + path);
    char magic[8];
    r.raw(magic, 8);
    if (std::string(magic, 8) != std::string(kTrajMagic, 8))
        throw IoError("bad trajectory magic: " + path);
    const auto version = r.u32();
    if (version != kTrajVersion)
        throw IoError("unsupported trajectory version " + std::to_string(version));
    const int gen_len = static_cast<int>(r.u32());
    const int block_size = static_cast<int>(r.u32());
    const int total_steps = static_cast<int>(r.u32());
    const int d_model = static_cast<int>(r.u32());
    const std::uint64_t vh = r.u64();
    if (vh != vocab_hash) throw IoError("trajectory vocabulary hash mismatch");
    const auto n = r.u32();
    std::vector<TrajectoryRecord<T>> out(n);
    for (auto& rec : out) {
        rec.gen_len = gen_len;
        rec.block_size = block_size;
        rec.total_steps = total_steps;
        rec.d_model = d_model;
        rec.prompt.resize(r.u32());
        for (auto& t : rec.prompt) t = static_cast<int>(r.u32());
        rec.ground_truth.resize(r.u32());
        for (auto& t : rec.ground_truth) t = static_cast<int>(r.u32());
        rec.temperature = r.f64();
        rec.events.resize(gen_len);
        for (auto& ev : rec.events) {
            ev.step = static_cast<int>(r.u32());
            ev.position = static_cast<int>(r.u32());
            ev.token = static_cast<int>(r.u32());
            ev.hidden.resize(d_model);
            for (auto& h : ev.hidden) h = static_cast<T>(r.f32());
        }
    }
    return out;
}

/// Exact on-disk size of a dataset file, for storage accounting.
inline std::size_t trajectory_file_size(int n_records, int prompt_len, int gen_len, int d_model) {
    const std::size_t header = 8 + 4 + 4 * 4 + 8 + 4;
    const std::size_t event = 3 * 4 + static_cast<std::size_t>(d_model) * 4;
    const std::size_t record =
        4 + 4 * static_cast<std::size_t>(prompt_len) + 4 +
        4 * static_cast<std::size_t>(gen_len) + 8 + static_cast<std::size_t>(gen_len) * event;
    return header + static_cast<std::size_t>(n_records) * record + 4;
}

}  // namespace cdlm
