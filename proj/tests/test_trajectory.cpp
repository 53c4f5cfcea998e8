#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "cdlm/trajectory.hpp"

using namespace cdlm;

namespace {

ModelConfig tiny_cfg() {
    ModelConfig c;
    c.vocab_size = 15;
    c.d_model = 12;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_ff = 24;
    c.max_seq_len = 16;
    return c;
}

CollectConfig tiny_collect() {
    CollectConfig c;
    c.gen_len = 6;
    c.block_size = 3;
    c.prompt_budget = 4;
    return c;
}

Model<float> tiny_teacher(std::uint64_t seed = 5) {
    Model<float> m(tiny_cfg());
    m.init_params(seed);
    return m;
}

std::vector<int> sample_prompt() { return {tok::TASK_COPY, 8, 9}; }
std::vector<int> sample_gt() { return {8, 9, tok::EOT, tok::EOT, tok::EOT, tok::EOT}; }

bool events_equal(const TrajectoryRecord<float>& a, const TrajectoryRecord<float>& b) {
    if (a.events.size() != b.events.size()) return false;
    for (std::size_t i = 0; i < a.events.size(); ++i) {
        const auto& x = a.events[i];
        const auto& y = b.events[i];
        if (x.step != y.step || x.position != y.position || x.token != y.token) return false;
        if (x.hidden != y.hidden) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("collection invariants") {
    auto teacher = tiny_teacher();
    const auto cfg = tiny_collect();
    std::mt19937_64 rng(1);
    const auto rec = collect(sample_prompt(), sample_gt(), teacher, cfg, 0.0, rng);

    CHECK(rec.prompt.size() == 4);  // left-padded to budget
    CHECK(rec.prompt[0] == tok::PAD);
    CHECK(rec.total_steps == cfg.gen_len);
    REQUIRE(static_cast<int>(rec.events.size()) == cfg.gen_len);

    std::vector<bool> seen(cfg.gen_len, false);
    for (int i = 0; i < cfg.gen_len; ++i) {
        const auto& ev = rec.events[i];
        CHECK(ev.step == i + 1);  // exactly one finalization per step
        const int off = ev.position - rec.prompt_len();
        REQUIRE(off >= 0);
        REQUIRE(off < cfg.gen_len);
        CHECK_FALSE(seen[off]);  // no position finalized twice
        seen[off] = true;
        CHECK(off / cfg.block_size == i / cfg.block_size);  // block-ordered
        CHECK(ev.token != tok::MASK);
        CHECK(static_cast<int>(ev.hidden.size()) == teacher.cfg.d_model);
    }
}

TEST_CASE("greedy collection is deterministic") {
    auto teacher = tiny_teacher();
    const auto cfg = tiny_collect();
    std::mt19937_64 r1(1), r2(99);  // rng unused at temperature 0
    const auto a = collect(sample_prompt(), sample_gt(), teacher, cfg, 0.0, r1);
    const auto b = collect(sample_prompt(), sample_gt(), teacher, cfg, 0.0, r2);
    CHECK(events_equal(a, b));
}

TEST_CASE("stored hiddens reproject to the collection-time logits") {
    auto teacher = tiny_teacher();
    const auto cfg = tiny_collect();
    std::mt19937_64 rng(2);
    const auto rec = collect(sample_prompt(), sample_gt(), teacher, cfg, 0.7, rng);

    const auto mode = AttentionMode::bidirectional();
    for (int k = 0; k < rec.total_steps; ++k) {
        // replay the forward that produced event k
        const auto state = reconstruct_state(rec, k);
        const auto out = teacher.forward(state.tokens, mode);
        const auto& ev = rec.events[k];

        // the buffered hidden row matches, so the head reprojects it exactly
        Array<float> h({1, static_cast<std::size_t>(rec.d_model)});
        std::copy(ev.hidden.begin(), ev.hidden.end(), h.row(0));
        const auto logits = teacher.lm_head(h);
        for (int j = 0; j < teacher.cfg.vocab_size; ++j)
            CHECK(logits.at(0, j) == out.logits.at(ev.position, j));

        // greedy events must pick the most confident masked position of the block
        const int b = k / cfg.block_size;
        CHECK((ev.position - rec.prompt_len()) / cfg.block_size == b);
    }
}

TEST_CASE("state reconstruction induction") {
    auto teacher = tiny_teacher();
    const auto cfg = tiny_collect();
    std::mt19937_64 rng(3);
    const auto rec = collect(sample_prompt(), sample_gt(), teacher, cfg, 1.0, rng);

    auto prev = reconstruct_state(rec, 0);
    CHECK(prev.masked_count() == cfg.gen_len);
    for (int k = 1; k <= rec.total_steps; ++k) {
        const auto cur = reconstruct_state(rec, k);
        int diffs = 0;
        for (int i = 0; i < cur.seq_len(); ++i)
            if (cur.tokens[i] != prev.tokens[i]) ++diffs;
        CHECK(diffs == 1);  // exactly the k-th event applied
        CHECK(cur.tokens[rec.events[k - 1].position] == rec.events[k - 1].token);
        CHECK(cur.masked_count() == cfg.gen_len - k);
        prev = cur;
    }
    CHECK_THROWS(reconstruct_state(rec, rec.total_steps + 1));
}

TEST_CASE("augmentation produces one record per prompt and temperature") {
    auto teacher = tiny_teacher();
    const auto cfg = tiny_collect();
    const std::vector<std::pair<std::vector<int>, std::vector<int>>> prompts = {
        {sample_prompt(), sample_gt()},
        {{tok::TASK_REVERSE, 10, 11}, {11, 10, tok::EOT, tok::EOT, tok::EOT, tok::EOT}},
    };
    const std::vector<double> temps = {0.0, 1.0};
    const auto ds = augment(prompts, temps, teacher, cfg, 42);
    REQUIRE(ds.size() == 4);
    CHECK(ds[0].temperature == 0.0);
    CHECK(ds[1].temperature == 1.0);

    // same seed reproduces the dataset exactly
    const auto ds2 = augment(prompts, temps, teacher, cfg, 42);
    for (std::size_t i = 0; i < ds.size(); ++i) CHECK(events_equal(ds[i], ds2[i]));

    CHECK_THROWS(augment(prompts, {}, teacher, cfg, 42));
}

TEST_CASE("dataset serialization") {
    auto teacher = tiny_teacher();
    const auto cfg = tiny_collect();
    std::mt19937_64 rng(4);
    std::vector<TrajectoryRecord<float>> ds;
    ds.push_back(collect(sample_prompt(), sample_gt(), teacher, cfg, 0.0, rng));
    ds.push_back(collect(sample_prompt(), sample_gt(), teacher, cfg, 0.9, rng));

    const auto dir = std::filesystem::temp_directory_path() / "cdlm_test_traj";
    std::filesystem::create_directories(dir);
    const std::string path = (dir / "ds.bin").string();
    const std::uint64_t vh = tok::vocab_hash(teacher.cfg.vocab_size);
    serialize(ds, path, vh);

    // size accounting is exact
    CHECK(std::filesystem::file_size(path) ==
          trajectory_file_size(2, 4, cfg.gen_len, teacher.cfg.d_model));

    const auto back = deserialize<float>(path, vh);
    REQUIRE(back.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(back[i].prompt == ds[i].prompt);
        CHECK(back[i].ground_truth == ds[i].ground_truth);
        CHECK(back[i].temperature == ds[i].temperature);
        CHECK(events_equal(back[i], ds[i]));  // hiddens round-trip bit exact
    }

    CHECK_THROWS_AS(deserialize<float>(path, vh ^ 1), IoError);  // vocab drift

    // flip one byte in the middle: checksum must reject the file
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekg(120);
        char c;
        f.get(c);
        f.seekp(120);
        f.put(static_cast<char>(c ^ 0x01));
    }
    CHECK_THROWS_AS(deserialize<float>(path, vh), IoError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("prompt budget is enforced") {
    CHECK_THROWS(left_pad_prompt<float>({1, 2, 3, 4, 5}, 4));
    const auto padded = left_pad_prompt<float>({7, 8}, 5);
    CHECK(padded == std::vector<int>{tok::PAD, tok::PAD, tok::PAD, 7, 8});
}
