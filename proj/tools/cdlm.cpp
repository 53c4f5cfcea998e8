// Command-line driver for the consistency-distillation lab.

#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "cdlm/config.hpp"
#include "cdlm/pipeline.hpp"

namespace {

struct CommonOpts {
    std::string config_path;
    std::string out_dir = "out";
    long seed = -1;  // -1 keeps the config value
    int threads = 1;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config_path, "experiment config file");
    cmd->add_option("--out-dir", o.out_dir, "artifact directory");
    cmd->add_option("--seed", o.seed, "override the experiment seed");
    cmd->add_option("--threads", o.threads, "worker threads (this build runs single threaded)");
}

cdlm::ExperimentConfig load_experiment(const CommonOpts& o) {
    cdlm::Config c = o.config_path.empty() ? cdlm::Config()
                                           : cdlm::Config::parse_file(o.config_path);
    if (o.seed >= 0) c.set("train", "seed", std::to_string(o.seed));
    if (o.threads < 1) throw cdlm::ConfigError("--threads must be >= 1");
    return cdlm::parse_experiment(c);
}

using Lab = cdlm::Lab<float>;
using Model = cdlm::Model<float>;

Model student_for(Lab& lab, Model& teacher) {
    auto dataset = lab.collect_trajectories(teacher);
    return lab.distill(teacher, dataset, lab.cfg().distill.weights, "full");
}

void print_summary(const std::string& name, const cdlm::EvalSummary& s) {
    std::printf("%s: score %.2f%% over %d prompts, %.2f steps/prompt, %.2f tok/s\n", name.c_str(),
                s.score, s.n_prompts, s.avg_steps, s.tps);
    for (const auto& [task, score] : s.per_task)
        std::printf("  %-10s %.2f%%\n", task.c_str(), score);
}

int run_ablate(Lab& lab, const std::string& axis) {
    const auto& e = lab.cfg();
    Model teacher = lab.teach();
    cdlm::BenchReport report;

    if (axis == "loss_weights") {
        auto dataset = lab.collect_trajectories(teacher);
        for (const auto& [tag, weights] : cdlm::loss_ablation_grid(e.distill.weights)) {
            Model student = lab.distill(teacher, dataset, weights, tag);
            cdlm::DecodeConfig dec = e.decode;
            dec.mode = cdlm::DecodeMode::Cdlm;
            report.rows.push_back(
                cdlm::make_row(tag, cdlm::evaluate(student, e.tasks, dec, e.seed + 5,
                                                   e.eval_limit)));
        }
        report.finalize("full");
    } else if (axis == "threshold") {
        Model student = student_for(lab, teacher);
        for (double tau : e.tau_sweep) {
            cdlm::DecodeConfig dec = e.decode;
            dec.mode = cdlm::DecodeMode::Cdlm;
            dec.tau_conf = tau;
            char name[64];
            std::snprintf(name, sizeof name, "tau%.2f", tau);
            report.rows.push_back(
                cdlm::make_row(name, cdlm::evaluate(student, e.tasks, dec, e.seed + 5,
                                                    e.eval_limit)));
        }
        report.finalize(report.rows.front().name);
    } else if (axis == "step_truncation") {
        cdlm::DecodeConfig naive = e.decode;
        naive.mode = cdlm::DecodeMode::TeacherNaive;
        naive.step_budget = e.decode.gen_len;
        report.rows.push_back(cdlm::make_row(
            "N" + std::to_string(e.decode.gen_len),
            cdlm::evaluate(teacher, e.tasks, naive, e.seed + 5, e.eval_limit)));
        for (int budget : e.truncation_budgets) {
            cdlm::DecodeConfig trunc = e.decode;
            trunc.mode = cdlm::DecodeMode::TeacherTruncated;
            trunc.step_budget = budget;
            report.rows.push_back(cdlm::make_row(
                "N" + std::to_string(budget),
                cdlm::evaluate(teacher, e.tasks, trunc, e.seed + 5, e.eval_limit)));
        }
        report.finalize(report.rows.front().name);
    } else {
        throw cdlm::ConfigError("unknown ablation axis: " + axis +
                                " (expected loss_weights, threshold, or step_truncation)");
    }

    report.write(lab.path("ablate_" + axis));
    std::printf("%s", report.to_markdown().c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"consistency distillation lab for masked diffusion language models"};
    app.require_subcommand(1);

    CommonOpts opts;
    std::string axis;
    auto* teach = app.add_subcommand("teach", "pretrain the bidirectional teacher");
    auto* collect = app.add_subcommand("collect", "record teacher refinement trajectories");
    auto* distill = app.add_subcommand("distill", "train the student on collected trajectories");
    auto* eval = app.add_subcommand("eval", "score the student on held-out prompts");
    auto* bench = app.add_subcommand("bench", "compare decoders on score, steps and latency");
    auto* ablate = app.add_subcommand("ablate", "sweep one experiment axis");
    ablate->add_option("--axis", axis, "loss_weights | threshold | step_truncation")->required();
    auto* pipeline = app.add_subcommand("pipeline", "run teach, collect, distill and bench");
    for (auto* cmd : {teach, collect, distill, eval, bench, ablate, pipeline})
        add_common(cmd, opts);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        Lab lab(load_experiment(opts), opts.out_dir);
        if (teach->parsed()) {
            lab.teach();
        } else if (collect->parsed()) {
            Model teacher = lab.teach();
            lab.collect_trajectories(teacher);
        } else if (distill->parsed()) {
            Model teacher = lab.teach();
            student_for(lab, teacher);
        } else if (eval->parsed()) {
            Model teacher = lab.teach();
            Model student = student_for(lab, teacher);
            cdlm::DecodeConfig dec = lab.cfg().decode;
            dec.mode = cdlm::DecodeMode::Cdlm;
            print_summary("student", cdlm::evaluate(student, lab.cfg().tasks, dec,
                                                    lab.cfg().seed + 5, lab.cfg().eval_limit));
        } else if (bench->parsed() || pipeline->parsed()) {
            Model teacher = lab.teach();
            Model student = student_for(lab, teacher);
            cdlm::BenchReport report = cdlm::run_bench(teacher, student, lab.cfg());
            report.write(lab.path("report"));
            std::printf("%s", report.to_markdown().c_str());
        } else if (ablate->parsed()) {
            return run_ablate(lab, axis);
        }
    } catch (const cdlm::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "stage failure: %s\n", e.what());
        return 3;
    }
    return 0;
}
