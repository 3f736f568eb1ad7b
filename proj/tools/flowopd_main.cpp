#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "flowopd/commands.hpp"
#include "flowopd/error.hpp"
#include "flowopd/verify.hpp"

using namespace flowopd;

namespace {

constexpr int kExitOk = 0, kExitOther = 1, kExitVerify = 2, kExitDiverged = 3, kExitConfig = 4;

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool deterministic = false;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "experiment config (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--seed", c.seed, "master seed, overrides the config");
    sub->add_option("--out", c.out, "run directory, overrides config.output_dir");
    sub->add_flag("--deterministic", c.deterministic, "single-threaded, bit-reproducible");
}

RunContext make_run(const Common& c) {
    RunContext run;
    if (!c.config.empty()) run.config = load_config(c.config);
    if (c.seed) {
        run.config.seed = *c.seed;
        run.config.apply_master_seed();
    }
    if (!c.out.empty()) run.config.output_dir = c.out;
    run.config.validate();
    run.out = run.config.output_dir;
    run.deterministic = c.deterministic;
    run.log = &std::cerr;
    return run;
}

void print_report(const std::string& label, const EvalReport& r) {
    std::printf("%s", label.c_str());
    for (TaskId t : kAllTasks) std::printf(" %s=%.4f", std::string(task_name(t)).c_str(), r[t]);
    std::printf(" normalized=%.4f\n", r.normalized_average());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Flow-OPD toy: multi-teacher on-policy distillation for flow-matching policies"};
    app.require_subcommand(1);
    Common common;

    auto* pre = app.add_subcommand("pretrain-fm", "flow-matching pretraining on the toy world");
    add_common(pre, common);

    auto* teach = app.add_subcommand("train-teachers", "GRPO teacher per task");
    add_common(teach, common);
    std::string init;
    std::vector<std::string> task_names;
    teach->add_option("--init", init, "initial checkpoint (default: <out>/pretrain.ckpt)");
    teach->add_option("--task", task_names, "train only these tasks (repeatable)");

    auto* cold = app.add_subcommand("coldstart", "student initialization: sft or merge");
    add_common(cold, common);
    std::string cold_mode, teachers_dir;
    cold->add_option("--mode", cold_mode, "sft | merge (default: config)");
    cold->add_option("--teachers", teachers_dir, "directory holding teacher_<task>.ckpt");
    cold->add_option("--init", init, "SFT initial checkpoint (default: <out>/pretrain.ckpt)");

    auto* opd = app.add_subcommand("train-opd", "on-policy distillation from the routed teachers");
    add_common(opd, common);
    std::string cold_path;
    std::optional<double> lambda;
    opd->add_option("--cold", cold_path, "cold-start checkpoint (default: <out>/coldstart_<mode>.ckpt)");
    opd->add_option("--teachers", teachers_dir, "directory holding teacher_<task>.ckpt");
    opd->add_option("--lambda", lambda, "anchor weight, overrides the config");

    auto* mix = app.add_subcommand("baseline-mix", "multi-reward GRPO baseline");
    add_common(mix, common);
    std::string mix_mode;
    mix->add_option("--mode", mix_mode, "scalar-mix | epoch-interleaved (default: config)");
    mix->add_option("--init", init, "initial checkpoint (default: <out>/pretrain.ckpt)");

    auto* ev = app.add_subcommand("eval", "per-task rewards of a checkpoint");
    add_common(ev, common);
    std::string checkpoint;
    ev->add_option("--checkpoint", checkpoint, "model to evaluate")->required()->check(CLI::ExistingFile);

    auto* diag = app.add_subcommand("diag-interference", "cosine between two tasks' policy gradients");
    add_common(diag, common);
    std::string task_a, task_b;
    diag->add_option("--checkpoint", checkpoint, "parameters to probe")->required()->check(CLI::ExistingFile);
    diag->add_option("--task-a", task_a, "default: config.diag.task_a");
    diag->add_option("--task-b", task_b, "default: config.diag.task_b");

    auto* ver = app.add_subcommand("verify", "oracle suite; exit 2 on any failure");
    add_common(ver, common);
    double fault = 0.0;
    ver->add_option("--inject-weight-fault", fault, "scale w(t) by (1 + x) to check the suite notices")
        ->group("");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    }

    try {
        auto run = make_run(common);
        if (pre->parsed()) {
            cmd_pretrain_fm(run);
        } else if (teach->parsed()) {
            std::vector<TaskId> tasks;
            for (auto& n : task_names) tasks.push_back(parse_task(n));
            cmd_train_teachers(run, tasks, init);
        } else if (cold->parsed()) {
            const auto mode = cold_mode.empty() ? run.config.coldstart.mode : parse_coldstart_mode(cold_mode);
            cmd_coldstart(run, mode, teachers_dir, init);
        } else if (opd->parsed()) {
            if (lambda) {
                run.config.opd.lambda = *lambda;
                run.config.validate();
            }
            cmd_train_opd(run, cold_path, teachers_dir);
        } else if (mix->parsed()) {
            const auto mode = mix_mode.empty() ? run.config.mix.mode : parse_mix_mode(mix_mode);
            cmd_baseline_mix(run, mode, init);
        } else if (ev->parsed()) {
            print_report(checkpoint, cmd_eval(run, checkpoint));
        } else if (diag->parsed()) {
            const auto a = task_a.empty() ? run.config.diag.task_a : parse_task(task_a);
            const auto b = task_b.empty() ? run.config.diag.task_b : parse_task(task_b);
            const auto r = cmd_diag_interference(run, checkpoint, a, b);
            std::printf("cosine < 0 in %zu/%zu seeds\n", r.negative, r.seeds.size());
        } else if (ver->parsed()) {
            VerifyOptions opt;
            opt.seed = run.config.seed;
            opt.weight_fault = fault;
            std::filesystem::create_directories(run.out);
            save_config(run.out / "verify.config.json", run.config);
            const auto rep = run_verification(run.config, opt);
            std::ofstream csv(run.out / "verify.csv", std::ios::binary);
            csv << "check,measured,tolerance,passed,detail\n";
            char buf[64];
            for (const auto& c : rep.checks) {
                std::printf("%s\n", format_check(c).c_str());
                std::snprintf(buf, sizeof buf, "%.17g,%.17g", c.measured, c.tolerance);
                csv << c.name << ',' << buf << ',' << (c.passed ? 1 : 0) << ",\"" << c.detail << "\"\n";
            }
            std::printf("%s\n", rep.all_passed() ? "verify: all checks passed" : "verify: FAILED");
            return rep.all_passed() ? kExitOk : kExitVerify;
        }
        return kExitOk;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const DivergenceError& e) {
        std::cerr << "diverged: " << e.what() << '\n';
        return kExitDiverged;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitOther;
    }
}
