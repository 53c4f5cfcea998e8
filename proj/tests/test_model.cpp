#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "cdlm/model.hpp"

using namespace cdlm;

namespace {

ModelConfig tiny_cfg() {
    ModelConfig c;
    c.vocab_size = 15;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_ff = 32;
    c.max_seq_len = 24;
    return c;
}

std::vector<int> random_tokens(int prompt_len, int gen_len, int vocab, std::mt19937_64& rng,
                               int n_pad = 0) {
    std::uniform_int_distribution<int> sym(tok::FIRST_SYMBOL, vocab - 1);
    std::vector<int> t;
    for (int i = 0; i < n_pad; ++i) t.push_back(tok::PAD);
    for (int i = n_pad; i < prompt_len; ++i) t.push_back(sym(rng));
    for (int i = 0; i < gen_len; ++i) t.push_back(sym(rng));
    return t;
}

}  // namespace

TEST_CASE("block-causal mask structure") {
    // prompt of 2, two blocks of 2: the reference visibility pattern
    const auto m = build_attention_mask(AttentionMode::block_causal(2, 2), 6);
    const std::vector<std::vector<int>> expect = {
        {1, 1, 0, 0, 0, 0},  // prompt attends prompt only
        {1, 1, 0, 0, 0, 0},
        {1, 1, 1, 1, 0, 0},  // block 0: prompt + itself, bidirectional inside
        {1, 1, 1, 1, 0, 0},
        {1, 1, 1, 1, 1, 1},  // block 1 sees everything before it
        {1, 1, 1, 1, 1, 1},
    };
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j) CHECK(m.at(i, j) == (expect[i][j] != 0));

    const auto bid = build_attention_mask(AttentionMode::bidirectional(), 4);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) CHECK(bid.at(i, j));

    CHECK_THROWS(build_attention_mask(AttentionMode::block_causal(4, 2), 9));  // not aligned
}

TEST_CASE("pad positions are excluded as keys") {
    const std::vector<int> tokens = {tok::PAD, tok::PAD, 7, 8, 9, 10};
    const auto m = build_attention_mask(AttentionMode::block_causal(2, 2), 6, tokens);
    for (int i = 0; i < 6; ++i) {
        CHECK_FALSE(m.at(i, 0));
        CHECK_FALSE(m.at(i, 1));
    }
    CHECK(m.at(2, 2));  // non-PAD visibility unchanged

    const auto bias = mask_bias<float>(m);
    CHECK(bias.at(2, 0) == -1e30f);
    CHECK(bias.at(2, 2) == 0.0f);
}

TEST_CASE("masked attention leaks exactly nothing") {
    // perturbing a future block must leave earlier logits bit-identical
    auto cfg = tiny_cfg();
    Model<float> m(cfg);
    m.init_params(3);
    std::mt19937_64 rng(17);
    const int P = 4, B = 4, LG = 12;
    auto tokens = random_tokens(P, LG, cfg.vocab_size, rng, 2);
    const auto mode = AttentionMode::block_causal(B, P);
    const auto out1 = m.forward(tokens, mode);

    auto perturbed = tokens;
    perturbed[P + 2 * B + 1] = tok::MASK;  // touch block 2
    const auto out2 = m.forward(perturbed, mode);

    for (int i = 0; i < P + 2 * B; ++i)
        for (int j = 0; j < cfg.vocab_size; ++j)
            CHECK(out1.logits.at(i, j) == out2.logits.at(i, j));  // exact

    // and a perturbation inside an earlier block must reach later blocks
    auto earlier = tokens;
    earlier[P + 1] = tok::MASK;
    const auto out3 = m.forward(earlier, mode);
    bool changed = false;
    for (int j = 0; j < cfg.vocab_size; ++j)
        if (out3.logits.at(P + 2 * B, j) != out1.logits.at(P + 2 * B, j)) changed = true;
    CHECK(changed);
}

TEST_CASE("cached forward matches full recompute bit for bit") {
    auto cfg = tiny_cfg();
    Model<float> m(cfg);
    m.init_params(5);
    std::mt19937_64 rng(23);
    const int P = 6, B = 4, LG = 16;
    const auto mode = AttentionMode::block_causal(B, P);

    for (int trial = 0; trial < 20; ++trial) {
        auto tokens = random_tokens(P, LG, cfg.vocab_size, rng, trial % 3);
        // active block 'b' still carries MASK entries, earlier blocks are final
        const int b = trial % (LG / B);
        for (int i = P + b * B; i < P + LG; ++i)
            tokens[i] = (i - P - b * B) % 2 ? tok::MASK : tokens[i];
        for (int i = P + (b + 1) * B; i < P + LG; ++i) tokens[i] = tok::MASK;

        KVCache<float> cache(cfg, B, P);
        ForwardOutput<float> cached;
        for (int bb = 0; bb <= b; ++bb) {
            cached = m.forward(tokens, mode, cache);
            if (bb < b) {
                // resolve the block arbitrarily before committing
                std::vector<int> resolved = tokens;
                for (int i = P + bb * B; i < P + (bb + 1) * B; ++i)
                    if (resolved[i] == tok::MASK) resolved[i] = tok::EOT;
                for (int i = P + bb * B; i < P + (bb + 1) * B; ++i) tokens[i] = resolved[i];
                m.commit_block(cache, tokens, bb);
            }
        }
        const auto full = m.forward(tokens, mode);
        REQUIRE(cached.first_pos == P + b * B);
        for (int i = 0; i < B; ++i)
            for (int j = 0; j < cfg.vocab_size; ++j)
                CHECK(cached.logits.at(i, j) == full.logits.at(cached.first_pos + i, j));
    }
}

TEST_CASE("cache commit discipline") {
    auto cfg = tiny_cfg();
    Model<float> m(cfg);
    m.init_params(5);
    std::mt19937_64 rng(29);
    const int P = 4, B = 4, LG = 8;
    auto tokens = random_tokens(P, LG, cfg.vocab_size, rng);
    const auto mode = AttentionMode::block_causal(B, P);

    KVCache<float> cache(cfg, B, P);
    (void)m.forward(tokens, mode, cache);
    CHECK(cache.committed_blocks() == 0);

    auto masked = tokens;
    masked[P + 1] = tok::MASK;
    CHECK_THROWS(m.commit_block(cache, masked, 0));     // MASK cannot be committed
    CHECK_THROWS(m.commit_block(cache, tokens, 1));     // out of order
    m.commit_block(cache, tokens, 0);
    CHECK(cache.committed_blocks() == 1);
    CHECK_THROWS(m.commit_block(cache, tokens, 0));     // already committed
}

TEST_CASE("graph forward agrees with the plain forward") {
    auto cfg = tiny_cfg();
    Model<float> m(cfg);
    m.init_params(7);
    std::mt19937_64 rng(31);
    auto tokens = random_tokens(4, 8, cfg.vocab_size, rng, 1);
    const auto mode = AttentionMode::block_causal(4, 4);
    const auto mask = build_attention_mask(mode, 12, tokens);

    const auto plain = m.forward(tokens, mode);
    const auto graph = m.forward_graph(tokens, mask);
    for (std::size_t i = 0; i < plain.logits.size(); ++i)
        CHECK(plain.logits.data[i] ==
              doctest::Approx(graph.logits->value.data[i]).epsilon(1e-4));
}

TEST_CASE("weight tying and head projection identity") {
    auto cfg = tiny_cfg();
    Model<float> m(cfg);
    m.init_params(9);
    CHECK(m.head_shares_embedding());
    CHECK(m.head_param().get() == m.token_embedding().get());  // same storage

    std::mt19937_64 rng(3);
    Array<float> hidden = random_normal<float>({5, static_cast<std::size_t>(cfg.d_model)},
                                               1.0f, rng);
    // the graph head and the plain head share kernels, so values match exactly
    auto graph_logits = m.lm_head_graph(constant(hidden));
    const auto plain_logits = m.lm_head(hidden);
    for (std::size_t i = 0; i < plain_logits.size(); ++i)
        CHECK(plain_logits.data[i] == graph_logits->value.data[i]);

    cfg.tied_lm_head = false;
    Model<float> u(cfg);
    u.init_params(9);
    CHECK_FALSE(u.head_shares_embedding());
    CHECK(u.parameters().size() == m.parameters().size() + 1);
}

TEST_CASE("checkpoint round trip and corruption detection") {
    auto cfg = tiny_cfg();
    Model<float> m(cfg);
    m.init_params(13);
    const auto dir = std::filesystem::temp_directory_path() / "cdlm_test_model";
    std::filesystem::create_directories(dir);
    const std::string path = (dir / "m.ckpt").string();
    m.save(path);

    Model<float> r = Model<float>::load(path);
    auto a = m.parameters();
    auto b = r.parameters();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i]->name == b[i]->name);
        CHECK(a[i]->value.data == b[i]->value.data);  // bit identical
    }

    // behavioral equality after reload
    std::mt19937_64 rng(37);
    auto tokens = random_tokens(4, 8, cfg.vocab_size, rng);
    const auto mode = AttentionMode::bidirectional();
    CHECK(m.forward(tokens, mode).logits.data == r.forward(tokens, mode).logits.data);

    // flip one payload byte: the checksum must catch it
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(200);
    char c;
    f.seekg(200);
    f.get(c);
    f.seekp(200);
    f.put(static_cast<char>(c ^ 0x40));
    f.close();
    CHECK_THROWS_AS(Model<float>::load(path), IoError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("config validation") {
    ModelConfig c = tiny_cfg();
    c.d_model = 15;  // not divisible by heads
    CHECK_THROWS(c.validate());
    c = tiny_cfg();
    c.vocab_size = tok::FIRST_SYMBOL;  // no room for payload symbols
    CHECK_THROWS(c.validate());
}
