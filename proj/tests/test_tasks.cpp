#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "cdlm/pipeline.hpp"

using namespace cdlm;

TEST_CASE("task samples follow their definitions") {
    TaskSpec spec;
    spec.n_symbols = 8;
    spec.min_len = 3;
    spec.max_len = 6;
    spec.seed = 11;
    spec.n_train = 50;
    spec.n_val = 5;
    spec.n_test = 5;

    SUBCASE("copy") {
        spec.kind = TaskKind::Copy;
        for (const auto& s : generate_task_data(spec).train) {
            REQUIRE(s.prompt.front() == tok::TASK_COPY);
            CHECK(std::vector<int>(s.prompt.begin() + 1, s.prompt.end()) == s.answer);
            CHECK(static_cast<int>(s.answer.size()) >= spec.min_len);
            CHECK(static_cast<int>(s.answer.size()) <= spec.max_len);
        }
    }
    SUBCASE("reverse") {
        spec.kind = TaskKind::Reverse;
        for (const auto& s : generate_task_data(spec).train) {
            REQUIRE(s.prompt.front() == tok::TASK_REVERSE);
            std::vector<int> payload(s.prompt.begin() + 1, s.prompt.end());
            std::reverse(payload.begin(), payload.end());
            CHECK(payload == s.answer);
        }
    }
    SUBCASE("modsum") {
        spec.kind = TaskKind::ModSum;
        for (const auto& s : generate_task_data(spec).train) {
            REQUIRE(s.prompt.front() == tok::TASK_MODSUM);
            int sum = 0;
            for (std::size_t i = 1; i < s.prompt.size(); ++i)
                sum += s.prompt[i] - tok::FIRST_SYMBOL;
            REQUIRE(s.answer.size() == 1);
            CHECK(s.answer[0] == tok::symbol_token(sum % spec.base));
        }
    }
    SUBCASE("chainsum running prefix sums") {
        spec.kind = TaskKind::ChainSum;
        for (const auto& s : generate_task_data(spec).train) {
            REQUIRE(s.prompt.front() == tok::TASK_CHAINSUM);
            int acc = s.prompt[1] - tok::FIRST_SYMBOL;
            REQUIRE(s.answer.size() + 2 == s.prompt.size());
            for (std::size_t i = 0; i < s.answer.size(); ++i) {
                acc = (acc + s.prompt[i + 2] - tok::FIRST_SYMBOL) % spec.base;
                CHECK(s.answer[i] == tok::symbol_token(acc));
            }
        }
    }
    SUBCASE("walk follows the cyclic successor of the start symbol") {
        spec.kind = TaskKind::Walk;
        for (const auto& s : generate_task_data(spec).train) {
            REQUIRE(s.prompt.front() == tok::TASK_WALK);
            // prompt = task token, `len` distinct symbols, start symbol
            const int len = static_cast<int>(s.prompt.size()) - 2;
            REQUIRE(len >= spec.min_len);
            REQUIRE(len <= spec.max_len);
            std::vector<int> payload(s.prompt.begin() + 1, s.prompt.end() - 1);
            std::vector<int> sorted = payload;
            std::sort(sorted.begin(), sorted.end());
            CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
            const auto pos = std::find(payload.begin(), payload.end(), s.prompt.back());
            REQUIRE(pos != payload.end());
            int j = static_cast<int>(pos - payload.begin());
            REQUIRE(static_cast<int>(s.answer.size()) == len);
            for (int i = 0; i < len; ++i) {
                j = (j + 1) % len;
                CHECK(s.answer[i] == payload[j]);
            }
        }
    }
    SUBCASE("walk requires enough symbols for distinct payloads") {
        spec.kind = TaskKind::Walk;
        spec.n_symbols = spec.max_len - 1;
        CHECK_THROWS(generate_task_data(spec));
    }
    SUBCASE("anagram answers are permutations of a distinct payload") {
        spec.kind = TaskKind::Anagram;
        bool any_reordered = false;
        for (const auto& s : generate_task_data(spec).train) {
            REQUIRE(s.prompt.front() == tok::TASK_ANAGRAM);
            const int len = static_cast<int>(s.prompt.size()) - 1;
            REQUIRE(len >= spec.min_len);
            REQUIRE(len <= spec.max_len);
            std::vector<int> payload(s.prompt.begin() + 1, s.prompt.end());
            REQUIRE(s.answer.size() == payload.size());
            std::vector<int> a = payload, b = s.answer;
            if (a != b) any_reordered = true;
            std::sort(a.begin(), a.end());
            std::sort(b.begin(), b.end());
            CHECK(std::adjacent_find(a.begin(), a.end()) == a.end());  // distinct
            CHECK(a == b);                                             // same multiset
        }
        CHECK(any_reordered);  // references are not just copies of the payload
    }
    SUBCASE("anagram requires enough symbols for distinct payloads") {
        spec.kind = TaskKind::Anagram;
        spec.n_symbols = spec.max_len - 1;
        CHECK_THROWS(generate_task_data(spec));
    }
}

TEST_CASE("task data is deterministic and splits are disjoint streams") {
    TaskSpec spec;
    spec.kind = TaskKind::Copy;
    spec.seed = 7;
    spec.n_train = 20;
    spec.n_val = 10;
    spec.n_test = 10;
    const TaskData a = generate_task_data(spec);
    const TaskData b = generate_task_data(spec);
    REQUIRE(a.train.size() == 20);
    REQUIRE(a.val.size() == 10);
    REQUIRE(a.test.size() == 10);
    for (std::size_t i = 0; i < a.train.size(); ++i)
        CHECK(a.train[i].prompt == b.train[i].prompt);
    for (std::size_t i = 0; i < a.test.size(); ++i) CHECK(a.test[i].prompt == b.test[i].prompt);
    // growing the train split must not change what was already drawn
    TaskSpec wider = spec;
    wider.n_train = 30;
    const TaskData c = generate_task_data(wider);
    for (std::size_t i = 0; i < a.train.size(); ++i)
        CHECK(a.train[i].prompt == c.train[i].prompt);

    spec.seed = 8;
    const TaskData d = generate_task_data(spec);
    bool any_diff = false;
    for (std::size_t i = 0; i < a.train.size(); ++i)
        if (a.train[i].prompt != d.train[i].prompt) any_diff = true;
    CHECK(any_diff);
}

TEST_CASE("detokenization and answer padding") {
    // symbols index into "abcdefghijklmnopqrstuvwxyz0123456789+-*/"
    CHECK(detokenize({tok::symbol_token(0), tok::symbol_token(2), tok::symbol_token(26)}) ==
          "ac0");
    CHECK(detokenize({tok::symbol_token(1), tok::EOT, tok::symbol_token(2)}) == "b");
    CHECK(detokenize({tok::MASK, tok::PAD, tok::symbol_token(3)}) == "d");

    TaskSample s;
    s.answer = {tok::symbol_token(0), tok::symbol_token(1)};
    const auto padded = padded_answer(s, 5);
    CHECK(padded == std::vector<int>{tok::symbol_token(0), tok::symbol_token(1), tok::EOT,
                                     tok::EOT, tok::EOT});
    CHECK_THROWS(padded_answer(s, 2));  // no room for EOT
}

TEST_CASE("exact match scoring") {
    CHECK(score_exact_match({"abc", "de"}, {"abc", "de"}) == doctest::Approx(100.0));
    CHECK(score_exact_match({"abc", "xx"}, {"abc", "de"}) == doctest::Approx(50.0));
    CHECK(score_exact_match({"a b c"}, {"abc"}) == doctest::Approx(100.0));  // whitespace ignored
    CHECK(score_exact_match({"", "", "", "x"}, {"", "", "", "y"}) == doctest::Approx(75.0));
    CHECK_THROWS(score_exact_match({"a"}, {}));

    // task-aware scoring: anagram accepts any permutation, nothing else
    CHECK(score_task(TaskKind::Anagram, {"cab", "bca"}, {"abc", "abc"}) == doctest::Approx(100.0));
    CHECK(score_task(TaskKind::Anagram, {"cab", "abd"}, {"abc", "abc"}) == doctest::Approx(50.0));
    CHECK(score_task(TaskKind::Anagram, {"ab"}, {"abc"}) == doctest::Approx(0.0));   // short
    CHECK(score_task(TaskKind::Anagram, {"abcc"}, {"abc"}) == doctest::Approx(0.0)); // long
    CHECK(score_task(TaskKind::Anagram, {"aab"}, {"abc"}) == doctest::Approx(0.0));  // repeat
    CHECK(score_task(TaskKind::Copy, {"cab"}, {"abc"}) == doctest::Approx(0.0));  // others: exact
    CHECK(score_task(TaskKind::Reverse, {"abc"}, {"abc"}) == doctest::Approx(100.0));
}

TEST_CASE("config parsing") {
    const Config c = Config::parse_string(
        "# top comment\n"
        "[task]\n"
        "kinds = copy, reverse  # inline comment\n"
        "max_len=10\n"
        "\n"
        "[train]\n"
        "lr = 3e-4\n"
        "shuffle = true\n");
    CHECK(c.has("task", "kinds"));
    CHECK_FALSE(c.has("task", "missing"));
    CHECK(c.get_str("task", "kinds", "") == "copy, reverse");
    CHECK(c.get_list("task", "kinds", "") == std::vector<std::string>{"copy", "reverse"});
    CHECK(c.get_int("task", "max_len", 0) == 10);
    CHECK(c.get_int("task", "absent", 42) == 42);
    CHECK(c.get_double("train", "lr", 0.0) == doctest::Approx(3e-4));
    CHECK(c.get_bool("train", "shuffle", false));
    CHECK(c.get_bool("train", "absent", true));

    CHECK_THROWS_AS(c.get_int("task", "kinds", 0), ConfigError);
    CHECK_THROWS_AS(c.get_bool("task", "max_len", false), ConfigError);  // 10 is not a boolean
    CHECK_THROWS_AS(Config::parse_string("[task\nx=1\n"), ConfigError);
    CHECK_THROWS_AS(Config::parse_string("just words\n"), ConfigError);
    CHECK_THROWS_AS(Config::parse_string("= value\n"), ConfigError);
    CHECK_THROWS_AS(Config::parse_file("/nonexistent/config.ini"), ConfigError);

    Config d = c;
    d.set("task", "max_len", "12");
    CHECK(d.get_int("task", "max_len", 0) == 12);
    CHECK(d.to_string().find("task.max_len=12") != std::string::npos);
}

TEST_CASE("experiment parsing applies defaults and validates") {
    const Config c = Config::parse_string(
        "[task]\nkinds=copy\nmax_len=6\n"
        "[model]\nvocab_size=19\nd_model=16\nn_layers=1\nn_heads=2\nd_ff=32\n"
        "[collect]\ngen_len=16\nblock_size=4\nprompt_budget=10\ntemperatures=0,1.0\n"
        "[train]\nseed=5\nepochs=2\n"
        "[decode]\ntau_conf=0.85\ntau_sweep=0.8,0.9\ntruncation_budgets=8,4\n");
    const ExperimentConfig e = parse_experiment(c);
    REQUIRE(e.tasks.size() == 1);
    CHECK(e.tasks[0].kind == TaskKind::Copy);
    CHECK(e.tasks[0].gen_budget == 16);
    CHECK(e.tasks[0].seed == 5);
    CHECK(e.seed == 5);
    CHECK(e.model.max_seq_len == 26);  // derived: prompt budget + generation length
    CHECK(e.decode.gen_len == 16);
    CHECK(e.decode.tau_conf == doctest::Approx(0.85));
    CHECK(e.temperatures == std::vector<double>{0.0, 1.0});
    CHECK(e.tau_sweep == std::vector<double>{0.8, 0.9});
    CHECK(e.truncation_budgets == std::vector<int>{8, 4});
    CHECK(e.distill.epochs == 2);
    CHECK(e.distill.weights.w_distill == doctest::Approx(1.0));
    CHECK(e.distill.weights.w_cons == doctest::Approx(0.5));
    CHECK(e.distill.weights.w_dlm == doctest::Approx(0.01));

    CHECK(e.collect.max_per_task == 0);  // default: collect over every train prompt

    // per-task n_train override and the collection cap
    Config o = c;
    o.set("task", "kinds", "copy,reverse");
    o.set("task", "n_train", "100");
    o.set("task", "n_train_reverse", "250");
    o.set("collect", "max_per_task", "40");
    o.set("task", "min_len_reverse", "3");
    o.set("task", "max_len_reverse", "5");
    o.set("task", "base_reverse", "7");
    const ExperimentConfig eo = parse_experiment(o);
    CHECK(eo.tasks[0].n_train == 100);
    CHECK(eo.tasks[1].n_train == 250);
    CHECK(eo.collect.max_per_task == 40);
    // length and base overrides follow the same <key>_<kind> convention
    CHECK(eo.tasks[0].min_len == 4);
    CHECK(eo.tasks[0].max_len == 6);
    CHECK(eo.tasks[1].min_len == 3);
    CHECK(eo.tasks[1].max_len == 5);
    CHECK(eo.tasks[0].base == 10);
    CHECK(eo.tasks[1].base == 7);

    // prompts (task token + max_len symbols + margin) must fit the prompt budget
    Config bad = c;
    bad.set("task", "max_len", "12");
    CHECK_THROWS(parse_experiment(bad));
    bad = c;
    bad.set("task", "kinds", "copy,unknown");
    CHECK_THROWS(parse_experiment(bad));
    bad = c;
    bad.set("model", "max_seq_len", "20");  // shorter than 10 + 16
    CHECK_THROWS(parse_experiment(bad));
}

TEST_CASE("benchmark report multipliers and serial forms") {
    BenchReport rep;
    EvalSummary naive;
    naive.score = 90.0;
    naive.avg_steps = 64.0;
    naive.avg_latency = 0.8;
    naive.tps = 10.0;
    naive.per_task["copy"] = 90.0;
    EvalSummary fast;
    fast.score = 88.0;
    fast.avg_steps = 16.0;
    fast.avg_latency = 0.2;
    fast.tps = 40.0;
    rep.rows.push_back(make_row("teacher_naive", naive));
    rep.rows.push_back(make_row("cdlm_tau0.90", fast));
    CHECK_THROWS(rep.finalize("missing_row"));
    rep.finalize("teacher_naive");

    const BenchRow* row = rep.find("cdlm_tau0.90");
    REQUIRE(row != nullptr);
    CHECK(row->step_multiplier == doctest::Approx(4.0));
    CHECK(row->latency_multiplier == doctest::Approx(4.0));
    CHECK(rep.find("teacher_naive")->step_multiplier == doctest::Approx(1.0));
    CHECK(rep.find("nope") == nullptr);

    const std::string csv = rep.to_csv();
    CHECK(csv.find("name,score,avg_steps") == 0);
    CHECK(csv.find("cdlm_tau0.90,88.00,16.00") != std::string::npos);
    const auto j = rep.to_json();
    REQUIRE(j.is_array());
    REQUIRE(j.size() == 2);
    CHECK(j[0]["name"] == "teacher_naive");
    CHECK(j[0]["per_task"]["copy"] == doctest::Approx(90.0));
    CHECK(j[1]["step_multiplier"] == doctest::Approx(4.0));
    const std::string md = rep.to_markdown();
    CHECK(md.find("| decoder |") == 0);
    CHECK(md.find("| cdlm_tau0.90 |") != std::string::npos);
}

TEST_CASE("stage cache honors artifact plus hash sidecar") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "cdlm_stage_test";
    fs::create_directories(dir);
    const std::string artifact = (dir / "thing.bin").string();
    fs::remove(artifact);
    fs::remove(artifact + ".hash");

    CHECK_FALSE(stage::cached(artifact, 123));  // no artifact
    std::ofstream(artifact) << "payload";
    CHECK_FALSE(stage::cached(artifact, 123));  // no sidecar
    stage::mark(artifact, 123);
    CHECK(stage::cached(artifact, 123));
    CHECK_FALSE(stage::cached(artifact, 124));  // config moved
    fs::remove_all(dir);
}

TEST_CASE("loss ablation grid covers the objective variants") {
    const LossWeights<float> full{1.0f, 0.5f, 0.01f};
    const auto grid = loss_ablation_grid(full);
    REQUIRE(grid.size() == 4);
    CHECK(grid[0].first == "full");
    CHECK(grid[1].first == "distill_only");
    CHECK(grid[1].second.w_cons == 0.0f);
    CHECK(grid[1].second.w_dlm == 0.0f);
    CHECK(grid[2].first == "distill_cons");
    CHECK(grid[2].second.w_cons == doctest::Approx(0.5f));
    CHECK(grid[3].first == "cons_only");
    CHECK(grid[3].second.w_distill == 0.0f);
}
