#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdlm/config.hpp"
#include "cdlm/inference.hpp"
#include "cdlm/model.hpp"
#include "cdlm/tasks.hpp"
#include "cdlm/trainer.hpp"
#include "cdlm/trajectory.hpp"

namespace cdlm {

struct TeacherTrainConfig {
    int epochs = 30;
    int batch_size = 16;
    float lr = 1e-3f;
    double warmup_frac = 0.05;
};

/// Everything one experiment needs, assembled from the text config.
struct ExperimentConfig {
    std::vector<TaskSpec> tasks;
    ModelConfig model;
    CollectConfig collect;
    std::vector<double> temperatures = {0.0, 0.7, 1.0};
    TeacherTrainConfig teacher;
    TrainConfig<float> distill;
    DecodeConfig decode;
    std::vector<double> tau_sweep = {0.5, 0.7, 0.85, 0.9, 0.95};
    std::vector<int> truncation_budgets = {32, 16, 8};
    int eval_limit = 0;  // 0 = all test prompts
    std::uint64_t seed = 0;
};

inline ExperimentConfig parse_experiment(const Config& c) {
    ExperimentConfig e;
    e.seed = static_cast<std::uint64_t>(c.get_int("train", "seed", 0));

    e.collect.gen_len = static_cast<int>(c.get_int("collect", "gen_len", 32));
    e.collect.block_size = static_cast<int>(c.get_int("collect", "block_size", 8));
    e.collect.prompt_budget = static_cast<int>(c.get_int("collect", "prompt_budget", 16));
    e.collect.max_per_task = static_cast<int>(c.get_int("collect", "max_per_task", 0));
    e.collect.validate();
    e.temperatures.clear();
    for (const std::string& s : c.get_list("collect", "temperatures", "0,0.7,1.0"))
        e.temperatures.push_back(std::stod(s));

    for (const std::string& name : c.get_list("task", "kinds", "copy,reverse,chainsum")) {
        TaskSpec t;
        t.kind = task_kind_from_string(name);
        // per-task overrides (e.g. max_len_chainsum) fall back to the shared key
        auto task_int = [&](const std::string& key, long long def) {
            return static_cast<int>(c.get_int("task", key + "_" + name, c.get_int("task", key, def)));
        };
        t.min_len = task_int("min_len", 4);
        t.max_len = task_int("max_len", 10);
        t.n_symbols = static_cast<int>(c.get_int("task", "n_symbols", 12));
        t.base = task_int("base", 10);
        t.n_train = task_int("n_train", 300);
        t.n_val = static_cast<int>(c.get_int("task", "n_val", 48));
        t.n_test = static_cast<int>(c.get_int("task", "n_test", 100));
        t.seed = e.seed;
        t.gen_budget = e.collect.gen_len;
        t.validate();
        check(t.max_len + 2 <= e.collect.prompt_budget,
              "task prompts do not fit the prompt budget");
        e.tasks.push_back(t);
    }
    check(!e.tasks.empty(), "no tasks configured");

    e.model.vocab_size = static_cast<int>(c.get_int("model", "vocab_size", 47));
    e.model.d_model = static_cast<int>(c.get_int("model", "d_model", 96));
    e.model.n_layers = static_cast<int>(c.get_int("model", "n_layers", 3));
    e.model.n_heads = static_cast<int>(c.get_int("model", "n_heads", 4));
    e.model.d_ff = static_cast<int>(c.get_int("model", "d_ff", 384));
    e.model.max_seq_len = static_cast<int>(
        c.get_int("model", "max_seq_len", e.collect.prompt_budget + e.collect.gen_len));
    e.model.tied_lm_head = c.get_bool("model", "tied_lm_head", true);
    e.model.validate();
    check(e.model.max_seq_len >= e.collect.prompt_budget + e.collect.gen_len,
          "max_seq_len shorter than prompt budget plus generation length");

    e.teacher.epochs = static_cast<int>(c.get_int("train", "teacher_epochs", 30));
    e.teacher.batch_size = static_cast<int>(c.get_int("train", "teacher_batch", 16));
    e.teacher.lr = static_cast<float>(c.get_double("train", "teacher_lr", 1e-3));
    e.teacher.warmup_frac = c.get_double("train", "teacher_warmup_frac", 0.05);

    e.distill.epochs = static_cast<int>(c.get_int("train", "epochs", 10));
    e.distill.batch_size = static_cast<int>(c.get_int("train", "batch", 16));
    e.distill.lr = static_cast<float>(c.get_double("train", "lr", 3e-4));
    e.distill.warmup_frac = c.get_double("train", "warmup_frac", 0.05);
    e.distill.weight_decay = static_cast<float>(c.get_double("train", "weight_decay", 0.0));
    e.distill.weights.w_distill = static_cast<float>(c.get_double("train", "w_distill", 1.0));
    e.distill.weights.w_cons = static_cast<float>(c.get_double("train", "w_cons", 0.5));
    e.distill.weights.w_dlm = static_cast<float>(c.get_double("train", "w_dlm", 0.01));
    e.distill.weights.validate();
    e.distill.seed = e.seed;

    e.decode.gen_len = e.collect.gen_len;
    e.decode.block_size = e.collect.block_size;
    e.decode.prompt_budget = e.collect.prompt_budget;
    e.decode.step_budget = static_cast<int>(c.get_int("decode", "step_budget", e.collect.gen_len));
    e.decode.tau_conf = c.get_double("decode", "tau_conf", 0.9);
    e.decode.temperature = c.get_double("decode", "temperature", 0.0);

    e.tau_sweep.clear();
    for (const std::string& s : c.get_list("decode", "tau_sweep", "0.5,0.7,0.85,0.9,0.95"))
        e.tau_sweep.push_back(std::stod(s));
    e.truncation_budgets.clear();
    for (const std::string& s : c.get_list("decode", "truncation_budgets", "32,16,8"))
        e.truncation_budgets.push_back(static_cast<int>(std::stol(s)));
    e.eval_limit = static_cast<int>(c.get_int("decode", "eval_limit", 0));
    return e;
}

inline void log_line(const std::string& msg) {
    std::fprintf(stderr, "[cdlm] %s\n", msg.c_str());
    std::fflush(stderr);
}

// ---------------------------------------------------------------------------
// Stage artifact caching: each artifact gets a sidecar <name>.hash recording
// the hash of the config slice that produced it. A stage reruns when either
// file is missing or the hash moved.
// ---------------------------------------------------------------------------

namespace stage {

inline bool cached(const std::string& artifact, std::uint64_t hash) {
    namespace fs = std::filesystem;
    if (!fs::exists(artifact)) return false;
    std::ifstream f(artifact + ".hash");
    std::uint64_t stored = 0;
    if (!(f >> stored)) return false;
    return stored == hash;
}

inline void mark(const std::string& artifact, std::uint64_t hash) {
    std::ofstream f(artifact + ".hash");
    f << hash << "\n";
}

}  // namespace stage

struct EvalSummary {
    double score = 0.0;        // exact match, percent
    double avg_steps = 0.0;    // refinement forwards per prompt
    double avg_latency = 0.0;  // seconds per prompt
    double tps = 0.0;
    int n_prompts = 0;
    std::map<std::string, double> per_task;
};

enum class EvalSplit { Val, Test };

/// Decodes one held-out split of every task and scores exact match.
template <class T>
EvalSummary evaluate(const Model<T>& model, const std::vector<TaskSpec>& tasks,
                     const DecodeConfig& decode, std::uint64_t seed, int limit = 0,
                     EvalSplit split = EvalSplit::Test) {
    EvalSummary sum;
    double steps = 0.0, latency = 0.0, tokens = 0.0;
    for (const auto& spec : tasks) {
        const TaskData data = generate_task_data(spec);
        const auto& pool = split == EvalSplit::Test ? data.test : data.val;
        std::vector<std::string> outputs, refs;
        std::mt19937_64 rng(seed ^ fnv1a("eval:" + to_string(spec.kind)));
        int n = static_cast<int>(pool.size());
        if (limit > 0) n = std::min(n, limit);
        for (int i = 0; i < n; ++i) {
            const auto& s = pool[i];
            DecodeResult r = decode.mode == DecodeMode::Cdlm
                                 ? decode_cdlm(s.prompt, model, decode, rng)
                                 : decode_teacher(s.prompt, model, decode, rng);
            outputs.push_back(detokenize(r.gen_tokens));
            refs.push_back(s.answer_text);
            steps += r.metrics.total_steps;
            latency += r.metrics.latency;
            tokens += r.metrics.generated_length;
            ++sum.n_prompts;
        }
        sum.per_task[to_string(spec.kind)] = score_task(spec.kind, outputs, refs);
        sum.score += sum.per_task[to_string(spec.kind)] * outputs.size();
    }
    check(sum.n_prompts > 0, "evaluate: no test prompts");
    sum.score /= sum.n_prompts;
    sum.avg_steps = steps / sum.n_prompts;
    sum.avg_latency = latency / sum.n_prompts;
    sum.tps = latency > 0.0 ? tokens / latency : 0.0;
    return sum;
}

/// Bidirectional masked-denoising pretraining of the teacher on all tasks.
template <class T>
Model<T> train_teacher(const ExperimentConfig& e,
                       const std::function<void(int, double, double)>& on_epoch = {}) {
    std::vector<std::pair<std::vector<int>, std::vector<int>>> pairs;  // padded prompt, target
    for (const auto& spec : e.tasks) {
        const TaskData data = generate_task_data(spec);
        for (const auto& s : data.train)
            pairs.push_back({left_pad_prompt<T>(s.prompt, e.collect.prompt_budget),
                             padded_answer(s, e.collect.gen_len)});
    }
    Model<T> teacher(e.model);
    teacher.init_params(e.seed + 1);
    AdamW<T> opt;
    opt.lr = static_cast<T>(e.teacher.lr);
    const int steps_per_epoch =
        std::max<int>(1, static_cast<int>(pairs.size()) / e.teacher.batch_size);
    opt.warmup_steps = static_cast<std::size_t>(
        e.teacher.warmup_frac * steps_per_epoch * e.teacher.epochs);

    std::mt19937_64 rng(e.seed + 2);
    std::vector<std::size_t> order(pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const auto mode = AttentionMode::bidirectional();
    auto params = teacher.parameters();

    for (int epoch = 1; epoch <= e.teacher.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        int n_steps = 0;
        for (std::size_t off = 0; off + e.teacher.batch_size <= order.size();
             off += e.teacher.batch_size) {
            for (auto& p : params) zero_grad(p);
            double batch_loss = 0.0;
            const T inv = T(1) / static_cast<T>(e.teacher.batch_size);
            for (int i = 0; i < e.teacher.batch_size; ++i) {
                const auto& [prompt, target] = pairs[order[off + i]];
                Node<T> l = pretrain_loss(teacher, prompt, target, mode, rng);
                batch_loss += static_cast<double>(l->value.data[0]);
                backward(mul_scalar(l, inv));
            }
            if (!std::isfinite(batch_loss))
                throw std::runtime_error("teacher training diverged (non-finite loss)");
            opt.step(params);
            epoch_loss += batch_loss / e.teacher.batch_size;
            ++n_steps;
        }
        if (on_epoch) on_epoch(epoch, epoch_loss / std::max(1, n_steps), 0.0);
    }
    return teacher;
}

// ---------------------------------------------------------------------------
// Lab: end-to-end experiment driver with cached stage artifacts.
// ---------------------------------------------------------------------------

template <class T>
class Lab {
  public:
    Lab(ExperimentConfig cfg, std::string out_dir)
        : cfg_(std::move(cfg)), out_dir_(std::move(out_dir)) {
        std::filesystem::create_directories(out_dir_);
    }

    const ExperimentConfig& cfg() const { return cfg_; }
    std::string path(const std::string& name) const { return out_dir_ + "/" + name; }

    std::uint64_t config_hash(const std::string& stage_name) const {
        std::string s = stage_name;
        for (const auto& t : cfg_.tasks)
            s += "|" + to_string(t.kind) + ":" + std::to_string(t.n_train) + ":" +
                 std::to_string(t.max_len) + ":" + std::to_string(t.n_symbols);
        s += "|m" + std::to_string(cfg_.model.d_model) + "." + std::to_string(cfg_.model.n_layers) +
             "." + std::to_string(cfg_.model.n_heads) + "." + std::to_string(cfg_.model.d_ff) +
             "." + std::to_string(cfg_.model.vocab_size);
        s += "|c" + std::to_string(cfg_.collect.gen_len) + "." +
             std::to_string(cfg_.collect.block_size) + "." +
             std::to_string(cfg_.collect.prompt_budget);
        // the collection cap changes the dataset but not the teacher
        if (stage_name.rfind("teach", 0) != 0)
            s += ".cap" + std::to_string(cfg_.collect.max_per_task);
        s += "|t" + std::to_string(cfg_.teacher.epochs) + "." +
             std::to_string(cfg_.teacher.batch_size) + "." + std::to_string(cfg_.teacher.lr);
        s += "|s" + std::to_string(cfg_.seed);
        for (double tau : cfg_.temperatures) s += "," + std::to_string(tau);
        return fnv1a(s);
    }

    std::uint64_t distill_hash(const LossWeights<T>& w, const std::string& tag) const {
        return config_hash("distill:" + tag) ^
               fnv1a(std::to_string(w.w_distill) + "/" + std::to_string(w.w_cons) + "/" +
                     std::to_string(w.w_dlm) + "/" + std::to_string(cfg_.distill.epochs) + "/" +
                     std::to_string(cfg_.distill.batch_size) + "/" +
                     std::to_string(cfg_.distill.lr));
    }

    /// Stage 1: teacher pretraining.
    Model<T> teach() {
        const std::string ckpt = path("teacher.ckpt");
        const std::uint64_t h = config_hash("teach");
        if (stage::cached(ckpt, h)) {
            log_line("teach: using cached " + ckpt);
            return Model<T>::load(ckpt);
        }
        log_line("teach: training teacher on " + std::to_string(cfg_.tasks.size()) + " task(s)");
        Model<T> teacher = train_teacher<T>(cfg_, [](int epoch, double loss, double) {
            log_line("teach: epoch " + std::to_string(epoch) + " loss " + std::to_string(loss));
        });
        teacher.save(ckpt);
        stage::mark(ckpt, h);
        return teacher;
    }

    /// Stage 2: trajectory collection over the train split of every task.
    std::vector<TrajectoryRecord<T>> collect_trajectories(const Model<T>& teacher) {
        const std::string file = path("trajectories.bin");
        const std::uint64_t h = config_hash("collect");
        const std::uint64_t vh = tok::vocab_hash(cfg_.model.vocab_size);
        if (stage::cached(file, h)) {
            log_line("collect: using cached " + file);
            return deserialize<T>(file, vh);
        }
        std::vector<std::pair<std::vector<int>, std::vector<int>>> prompts;
        for (const auto& spec : cfg_.tasks) {
            const TaskData data = generate_task_data(spec);
            int n = static_cast<int>(data.train.size());
            if (cfg_.collect.max_per_task > 0) n = std::min(n, cfg_.collect.max_per_task);
            for (int i = 0; i < n; ++i) {
                const auto& s = data.train[i];
                prompts.push_back({s.prompt, padded_answer(s, cfg_.collect.gen_len)});
            }
        }
        log_line("collect: " + std::to_string(prompts.size()) + " prompts x " +
                 std::to_string(cfg_.temperatures.size()) + " temperatures");
        auto dataset = augment(prompts, cfg_.temperatures, teacher, cfg_.collect, cfg_.seed + 3);
        serialize(dataset, file, vh);
        stage::mark(file, h);
        return dataset;
    }

    /// Stage 3: consistency distillation with the given loss weights.
    Model<T> distill(const Model<T>& teacher, const std::vector<TrajectoryRecord<T>>& dataset,
                     const LossWeights<T>& weights, const std::string& tag) {
        const std::string ckpt = path("student_" + tag + ".ckpt");
        const std::uint64_t h = distill_hash(weights, tag);
        if (stage::cached(ckpt, h)) {
            log_line("distill[" + tag + "]: using cached " + ckpt);
            return Model<T>::load(ckpt);
        }
        TrainConfig<T> tc = cfg_.distill;
        tc.weights = weights;
        DecodeConfig dec = cfg_.decode;
        dec.mode = DecodeMode::Cdlm;
        std::function<double(const Model<T>&)> validate = [&, dec](const Model<T>& m) {
            return evaluate(m, cfg_.tasks, dec, cfg_.seed + 4, cfg_.eval_limit, EvalSplit::Val)
                .score;
        };
        log_line("distill[" + tag + "]: " + std::to_string(dataset.size()) + " trajectories, " +
                 std::to_string(tc.epochs) + " epochs");
        TrainResult<T> res =
            train<T>(dataset, teacher, teacher, tc, validate, [&](const CurveRow<T>& row) {
                log_line("distill[" + tag + "]: epoch " + std::to_string(row.epoch) + " total " +
                         std::to_string(static_cast<double>(row.total)) + " val " +
                         std::to_string(row.val_score));
            });
        log_line("distill[" + tag + "]: best epoch " + std::to_string(res.best_epoch));
        res.best.save(ckpt);
        stage::mark(ckpt, h);
        write_curve(res.curve, path("curve_" + tag + ".csv"));
        return res.best;
    }

  private:
    ExperimentConfig cfg_;
    std::string out_dir_;

    static void write_curve(const std::vector<CurveRow<T>>& curve, const std::string& file) {
        std::ofstream f(file);
        f << "epoch,distill,consistency,dlm,total,val_score\n";
        for (const auto& r : curve)
            f << r.epoch << "," << static_cast<double>(r.distill) << ","
              << static_cast<double>(r.consistency) << "," << static_cast<double>(r.dlm) << ","
              << static_cast<double>(r.total) << "," << r.val_score << "\n";
    }
};

// ---------------------------------------------------------------------------
// Benchmark report
// ---------------------------------------------------------------------------

struct BenchRow {
    std::string name;
    double score = 0.0;
    double avg_steps = 0.0;
    double avg_latency = 0.0;
    double tps = 0.0;
    double step_multiplier = 1.0;     // naive steps / this steps
    double latency_multiplier = 1.0;  // naive latency / this latency
    std::map<std::string, double> per_task;
};

struct BenchReport {
    std::vector<BenchRow> rows;

    const BenchRow* find(const std::string& name) const {
        for (const auto& r : rows)
            if (r.name == name) return &r;
        return nullptr;
    }

    /// Multipliers are relative to the named baseline row.
    void finalize(const std::string& baseline) {
        const BenchRow* base = find(baseline);
        check(base != nullptr, "BenchReport: missing baseline row " + baseline);
        for (auto& r : rows) {
            r.step_multiplier = r.avg_steps > 0 ? base->avg_steps / r.avg_steps : 0.0;
            r.latency_multiplier = r.avg_latency > 0 ? base->avg_latency / r.avg_latency : 0.0;
        }
    }

    std::string to_csv() const {
        std::string s = "name,score,avg_steps,avg_latency,tps,step_multiplier,latency_multiplier\n";
        char line[256];
        for (const auto& r : rows) {
            std::snprintf(line, sizeof line, "%s,%.2f,%.2f,%.6f,%.2f,%.2f,%.2f\n", r.name.c_str(),
                          r.score, r.avg_steps, r.avg_latency, r.tps, r.step_multiplier,
                          r.latency_multiplier);
            s += line;
        }
        return s;
    }

    nlohmann::json to_json() const {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& r : rows) {
            nlohmann::json j = {{"name", r.name},
                                {"score", r.score},
                                {"avg_steps", r.avg_steps},
                                {"avg_latency", r.avg_latency},
                                {"tps", r.tps},
                                {"step_multiplier", r.step_multiplier},
                                {"latency_multiplier", r.latency_multiplier}};
            j["per_task"] = r.per_task;
            arr.push_back(j);
        }
        return arr;
    }

    std::string to_markdown() const {
        std::string s =
            "| decoder | score | steps | latency (s) | tok/s | step x | latency x |\n"
            "|---|---|---|---|---|---|---|\n";
        char line[256];
        for (const auto& r : rows) {
            std::snprintf(line, sizeof line, "| %s | %.2f | %.2f | %.6f | %.2f | %.2f | %.2f |\n",
                          r.name.c_str(), r.score, r.avg_steps, r.avg_latency, r.tps,
                          r.step_multiplier, r.latency_multiplier);
            s += line;
        }
        return s;
    }

    void write(const std::string& stem) const {
        std::ofstream(stem + ".csv") << to_csv();
        std::ofstream(stem + ".json") << to_json().dump(2) << "\n";
        std::ofstream(stem + ".md") << to_markdown();
    }
};

inline BenchRow make_row(const std::string& name, const EvalSummary& s) {
    BenchRow r;
    r.name = name;
    r.score = s.score;
    r.avg_steps = s.avg_steps;
    r.avg_latency = s.avg_latency;
    r.tps = s.tps;
    r.per_task = s.per_task;
    return r;
}

/// Teacher baselines plus the cached student at each confidence threshold.
template <class T>
BenchReport run_bench(const Model<T>& teacher, const Model<T>& student,
                      const ExperimentConfig& e) {
    BenchReport report;

    DecodeConfig naive = e.decode;
    naive.mode = DecodeMode::TeacherNaive;
    naive.step_budget = e.decode.gen_len;
    log_line("bench: teacher_naive");
    report.rows.push_back(make_row("teacher_naive", evaluate(teacher, e.tasks, naive, e.seed + 5,
                                                             e.eval_limit)));

    for (int budget : e.truncation_budgets) {
        DecodeConfig trunc = e.decode;
        trunc.mode = DecodeMode::TeacherTruncated;
        trunc.step_budget = budget;
        log_line("bench: teacher_truncated_N" + std::to_string(budget));
        report.rows.push_back(
            make_row("teacher_truncated_N" + std::to_string(budget),
                     evaluate(teacher, e.tasks, trunc, e.seed + 5, e.eval_limit)));
    }

    for (double tau : e.tau_sweep) {
        DecodeConfig dec = e.decode;
        dec.mode = DecodeMode::Cdlm;
        dec.tau_conf = tau;
        char name[64];
        std::snprintf(name, sizeof name, "cdlm_tau%.2f", tau);
        log_line(std::string("bench: ") + name);
        report.rows.push_back(make_row(name, evaluate(student, e.tasks, dec, e.seed + 5,
                                                      e.eval_limit)));
    }
    report.finalize("teacher_naive");
    return report;
}

/// Loss-weight ablation variants in evaluation order.
template <class T>
std::vector<std::pair<std::string, LossWeights<T>>> loss_ablation_grid(
    const LossWeights<T>& full) {
    return {
        {"full", full},
        {"distill_only", {full.w_distill, T(0), T(0)}},
        {"distill_cons", {full.w_distill, full.w_cons, T(0)}},
        {"cons_only", {T(0), full.w_cons, T(0)}},
    };
}

}  // namespace cdlm
