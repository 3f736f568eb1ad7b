#include "flowopd/commands.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "flowopd/error.hpp"
#include "flowopd/fm_training.hpp"

namespace flowopd {

using nlohmann::json;

namespace artifact {
std::string teacher(TaskId task) { return "teacher_" + std::string(task_name(task)) + ".ckpt"; }
std::string coldstart(ColdstartMode mode) { return "coldstart_" + std::string(coldstart_mode_name(mode)) + ".ckpt"; }
std::string mix(MixMode mode) { return "mix_" + std::string(mix_mode_name(mode)) + ".ckpt"; }
}  // namespace artifact

namespace {

std::string fmt(double v) {
    if (std::isnan(v)) return "";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

class Csv {
public:
    Csv(const fs::path& path, std::vector<std::string> columns) : path_(path), width_(columns.size()) {
        out_.open(path, std::ios::binary);
        if (!out_) throw std::runtime_error("cannot write " + path.string());
        row(columns);
    }
    void row(const std::vector<std::string>& cells) {
        if (cells.size() != width_) throw std::logic_error("csv row width mismatch in " + path_.string());
        for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
        out_ << '\n';
        if (!out_) throw std::runtime_error("write failed: " + path_.string());
    }

private:
    fs::path path_;
    std::size_t width_;
    std::ofstream out_;
};

std::string brief(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

void say(const RunContext& run, const std::string& line) {
    if (run.log) *run.log << line << '\n' << std::flush;
}

void prepare(const RunContext& run, const char* command) {
    run.config.validate();
    fs::create_directories(run.out);
    save_config(run.path(std::string(command) + ".config.json"), run.config);
    std::ofstream s(run.path(artifact::kSchema), std::ios::binary);
    s << metrics_schema().dump(2) << '\n';
}

void write_new(const fs::path& path, const ParamVector& params) {
    if (fs::exists(path)) throw ArtifactExists(path.string() + " already exists; use a fresh --out directory");
    save_checkpoint(path, params);
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream o(path, std::ios::binary);
    if (!o) throw std::runtime_error("cannot write " + path.string());
    o << j.dump(2) << '\n';
}

ParamVector load_for(const RunContext& run, const fs::path& path) {
    auto p = load_checkpoint(path);
    if (!(p.arch() == run.config.arch()))
        throw ConfigError(path.string() + ": architecture " + describe(p.arch()) + " does not match config " +
                          describe(run.config.arch()));
    return p;
}

fs::path or_default(const fs::path& given, const RunContext& run, const std::string& name) {
    return given.empty() ? run.path(name) : given;
}

std::vector<std::string> task_columns(const std::string& prefix) {
    std::vector<std::string> c;
    for (TaskId t : kAllTasks) c.push_back(prefix + std::string(task_name(t)));
    return c;
}

std::vector<std::string> grpo_columns() {
    std::vector<std::string> c{"phase", "iteration", "loss", "grad_norm"};
    for (auto& s : task_columns("train_")) c.push_back(s);
    for (auto& s : task_columns("eval_")) c.push_back(s);
    c.push_back("eval_normalized");
    return c;
}

std::vector<std::string> eval_cells(const std::optional<EvalReport>& e) {
    std::vector<std::string> c;
    for (TaskId t : kAllTasks) c.push_back(e ? fmt((*e)[t]) : "");
    c.push_back(e ? fmt(e->normalized_average()) : "");
    return c;
}

GrpoCallback grpo_logger(const RunContext& run, Csv& csv, const std::string& phase) {
    return [&run, &csv, phase](const GrpoIterationStats& s) {
        std::vector<std::string> row{phase, std::to_string(s.iteration), fmt(s.loss), fmt(s.grad_norm)};
        for (double r : s.train_reward) row.push_back(fmt(r));
        for (auto& c : eval_cells(s.eval)) row.push_back(c);
        csv.row(row);
        if (s.eval) {
            std::string line = phase + " it " + std::to_string(s.iteration + 1);
            for (TaskId t : kAllTasks) line += " " + std::string(task_name(t)) + "=" + brief((*s.eval)[t]);
            say(run, line);
        }
    };
}

json report_json(const EvalReport& r) {
    json j = json::object();
    for (TaskId t : kAllTasks) j[std::string(task_name(t))] = r[t];
    j["normalized_average"] = r.normalized_average();
    return j;
}

}  // namespace

json metrics_schema() {
    auto cols = [](std::initializer_list<std::pair<const char*, const char*>> l) {
        json j = json::array();
        for (auto& [n, d] : l) j.push_back({{"name", n}, {"description", d}});
        return j;
    };
    json grpo = json::array();
    grpo.push_back({{"name", "phase"}, {"description", "teacher-<task> or mix-<mode>"}});
    grpo.push_back({{"name", "iteration"}, {"description", "0-based optimizer step"}});
    grpo.push_back({{"name", "loss"}, {"description", "negated mean blended reward of the iteration's groups"}});
    grpo.push_back({{"name", "grad_norm"}, {"description", "policy-gradient norm before clipping"}});
    for (TaskId t : kAllTasks)
        grpo.push_back({{"name", "train_" + std::string(task_name(t))},
                        {"description", "mean own-task reward on this iteration's groups; empty if absent"}});
    for (TaskId t : kAllTasks)
        grpo.push_back({{"name", "eval_" + std::string(task_name(t))},
                        {"description", "eval reward (T=40 grid); only on eval iterations"}});
    grpo.push_back({{"name", "eval_normalized"}, {"description", "mean of the four eval rewards"}});

    json opd = json::array();
    for (auto& [n, d] : std::initializer_list<std::pair<const char*, const char*>>{
             {"phase", "opd"},
             {"iteration", "0-based optimizer step"},
             {"opd_loss", "mean w(t)||v - v_teacher||^2 over visited states"},
             {"mar_loss", "anchor penalty before multiplying by lambda"},
             {"grad_norm", "gradient norm before clipping"},
             {"anchor_discrepancy", "E[w(t)||v - v_anchor||^2] on the fixed 512-state probe set; eval rows only"}})
        opd.push_back({{"name", n}, {"description", d}});
    for (TaskId t : kAllTasks)
        opd.push_back({{"name", "eval_" + std::string(task_name(t))}, {"description", "eval reward; eval rows only"}});
    opd.push_back({{"name", "eval_normalized"}, {"description", "mean of the four eval rewards"}});

    json eval = cols({{"phase", "eval"}, {"iteration", "always 0"}, {"checkpoint", "file name of the evaluated model"}});
    for (TaskId t : kAllTasks)
        eval.push_back({{"name", "reward_" + std::string(task_name(t))}, {"description", "mean reward over the eval set"}});
    eval.push_back({{"name", "normalized_average"}, {"description", "mean of the four rewards"}});

    return {{"version", 1},
            {"tables",
             {{"pretrain.csv", cols({{"phase", "pretrain"},
                                     {"iteration", "0-based optimizer step"},
                                     {"loss", "flow-matching loss of the minibatch"},
                                     {"grad_norm", "gradient norm before clipping"}})},
              {"teachers.csv", grpo},
              {"mix_<mode>.csv", grpo},
              {"coldstart_<mode>.csv", cols({{"phase", "coldstart-sft; header only for merge"},
                                      {"iteration", "0-based optimizer step"},
                                      {"loss", "flow-matching loss on teacher samples"},
                                      {"grad_norm", "gradient norm before clipping"}})},
              {"opd.csv", opd},
              {"eval_<checkpoint>.csv", eval},
              {"interference.csv", cols({{"phase", "diag"},
                                         {"iteration", "index into config.seeds"},
                                         {"seed", "probe seed"},
                                         {"task_a", "first task"},
                                         {"task_b", "second task"},
                                         {"inner_product", "<g_a, g_b>"},
                                         {"cosine", "cosine of the two task gradients; empty if one vanishes"},
                                         {"norm_a", "||g_a||"},
                                         {"norm_b", "||g_b||"}})},
              {"verify.csv", cols({{"check", "oracle name"},
                                   {"measured", "worst measured error or statistic"},
                                   {"tolerance", "bound the measurement must not exceed"},
                                   {"passed", "1 or 0"},
                                   {"detail", "what was measured"}})}}}};
}

PretrainResult cmd_pretrain_fm(const RunContext& run) {
    prepare(run, "pretrain-fm");
    const auto& cfg = run.config;
    const auto source = world_data_source(cfg.world);

    Rng hr(phase_seed(cfg.seed, Phase::Pretrain, 0xE1D));
    const auto held = make_fm_batch(source, 1024, cfg.pretrain.t_min, cfg.pretrain.t_max, hr);
    const auto init = init_params(cfg.arch(), phase_seed(cfg.seed, Phase::Pretrain, 1));

    PretrainResult r;
    r.heldout_before = fm_loss_value(init, held);
    {
        Csv csv(run.path("pretrain.csv"), {"phase", "iteration", "loss", "grad_norm"});
        r.params = fit_flow_matching(init, source, cfg.pretrain, [&](std::size_t it, double loss, double gn) {
            csv.row({"pretrain", std::to_string(it), fmt(loss), fmt(gn)});
            if ((it + 1) % 500 == 0) say(run, "pretrain it " + std::to_string(it + 1) + " loss " + fmt(loss));
        });
    }
    r.heldout_after = fm_loss_value(r.params, held);

    // mode coverage of ring-conditioned samples, which are trained on all of p_data
    const auto rings = cfg.world.conditions(TaskId::Ring);
    const std::size_t n = 512, K = cfg.world.components();
    std::vector<std::size_t> hits(K, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto tr = sample_trajectory(r.params, rings[i % rings.size()], cfg.eval.grid, cfg.schedule,
                                          trajectory_seed(phase_seed(cfg.seed, Phase::Pretrain, 2), i));
        std::size_t best = 0;
        double bd = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < K; ++k) {
            const double d = squared_distance(tr.final_sample(), cfg.world.mixture[k].mean);
            if (d < bd) bd = d, best = k;
        }
        ++hits[best];
    }
    for (std::size_t k = 0; k < K; ++k)
        if (static_cast<double>(hits[k]) >= 0.05 * static_cast<double>(n)) ++r.modes_covered;

    write_new(run.path(artifact::kPretrain), r.params);
    write_json(run.path("pretrain_summary.json"), {{"heldout_fm_loss_before", r.heldout_before},
                                                   {"heldout_fm_loss_after", r.heldout_after},
                                                   {"modes_covered", r.modes_covered},
                                                   {"mode_hits", hits}});
    say(run, "pretrain held-out fm_loss " + fmt(r.heldout_before) + " -> " + fmt(r.heldout_after) + ", modes covered " +
                 std::to_string(r.modes_covered) + "/" + std::to_string(K));
    return r;
}

std::map<TaskId, ParamVector> cmd_train_teachers(const RunContext& run, std::span<const TaskId> tasks,
                                                 const fs::path& init_path) {
    prepare(run, "train-teachers");
    const auto& cfg = run.config;
    const auto init = load_for(run, or_default(init_path, run, artifact::kPretrain));
    std::vector<TaskId> todo(tasks.begin(), tasks.end());
    if (todo.empty()) todo.assign(kAllTasks.begin(), kAllTasks.end());

    std::map<TaskId, ParamVector> out;
    json summary = json::object();
    Csv csv(run.path("teachers.csv"), grpo_columns());
    for (TaskId task : todo) {
        GrpoConfig g = cfg.grpo;
        g.seed = phase_seed(cfg.seed, Phase::Teacher, static_cast<std::uint64_t>(task) + 1);
        g.threads = run.threads();
        const std::string phase = "teacher-" + std::string(task_name(task));
        std::optional<EvalReport> last;
        auto log = grpo_logger(run, csv, phase);
        auto p = train_teacher(init, task, g, cfg.context(), [&](const GrpoIterationStats& s) {
            log(s);
            if (s.eval) last = s.eval;
        });
        write_new(run.path(artifact::teacher(task)), p);
        summary[std::string(task_name(task))] = last ? report_json(*last) : json(nullptr);
        out.emplace(task, std::move(p));
    }
    write_json(run.path("teachers_summary.json"), summary);
    return out;
}

TeacherEnsemble load_ensemble(const fs::path& dir) {
    TeacherEnsemble e;
    e.routing = RoutingTable::by_task_name();
    for (TaskId t : kAllTasks) e.experts.emplace(std::string(task_name(t)), load_checkpoint(dir / artifact::teacher(t)));
    e.anchor = e.experts.at(std::string(task_name(TaskId::Quality)));
    return e;
}

ColdstartResult cmd_coldstart(const RunContext& run, ColdstartMode mode, const fs::path& teachers_dir,
                              const fs::path& init_path) {
    prepare(run, "coldstart");
    const auto& cfg = run.config;
    const fs::path tdir = teachers_dir.empty() ? run.out : teachers_dir;
    const auto ens = load_ensemble(tdir);
    ens.validate(cfg.arch());

    ColdstartResult r;
    r.mode = mode;
    const std::string mname(coldstart_mode_name(mode));
    json summary{{"mode", mname}};
    if (mode == ColdstartMode::Merge) {
        std::vector<ParamVector> inputs;
        for (TaskId t : kAllTasks) inputs.push_back(ens.experts.at(std::string(task_name(t))));
        MergeSpec spec = MergeSpec::uniform(std::move(inputs));
        if (!cfg.coldstart.merge_weights.empty()) spec.weights = cfg.coldstart.merge_weights;
        r.params = merge_models(spec);
        summary["weights"] = spec.weights;
        Csv csv(run.path("coldstart_" + mname + ".csv"), {"phase", "iteration", "loss", "grad_norm"});
    } else {
        const auto init = load_for(run, or_default(init_path, run, artifact::kPretrain));
        std::vector<Condition> conds;
        for (TaskId t : kAllTasks)
            for (auto& c : cfg.world.conditions(t)) conds.push_back(c);
        const auto data = build_sft_dataset(ens, conds, cfg.coldstart.per_condition, cfg.grid, cfg.schedule,
                                            phase_seed(cfg.seed, Phase::SftData), run.threads());
        {
            std::ofstream tab(run.path(artifact::kSftTable), std::ios::binary);
            write_sft_dataset(tab, data);
        }
        Csv csv(run.path("coldstart_" + mname + ".csv"), {"phase", "iteration", "loss", "grad_norm"});
        auto res = sft_train(init, data, cfg.coldstart.sft, [&](std::size_t it, double loss, double gn) {
            csv.row({"coldstart-sft", std::to_string(it), fmt(loss), fmt(gn)});
        });
        summary["records"] = data.size();
        summary["heldout_fm_loss_before"] = res.heldout_before;
        summary["heldout_fm_loss_after"] = res.heldout_after;
        r.params = res.params;
        r.sft = std::move(res);
    }
    write_new(run.path(artifact::coldstart(mode)), r.params);
    write_json(run.path("coldstart_" + mname + "_summary.json"), summary);
    say(run, "coldstart mode=" + std::string(coldstart_mode_name(mode)) + " -> " + artifact::coldstart(mode) +
                 (r.sft ? " held-out fm_loss " + fmt(r.sft->heldout_before) + " -> " + fmt(r.sft->heldout_after)
                        : std::string()));
    return r;
}

ParamVector cmd_train_opd(const RunContext& run, const fs::path& cold_path, const fs::path& teachers_dir) {
    prepare(run, "train-opd");
    const auto& cfg = run.config;
    const auto cold = load_for(run, or_default(cold_path, run, artifact::coldstart(cfg.coldstart.mode)));
    const auto ens = load_ensemble(teachers_dir.empty() ? run.out : teachers_dir);
    OpdConfig o = cfg.opd;
    o.threads = run.threads();

    std::vector<std::string> cols{"phase", "iteration", "opd_loss", "mar_loss", "grad_norm", "anchor_discrepancy"};
    for (auto& s : task_columns("eval_")) cols.push_back(s);
    cols.push_back("eval_normalized");
    Csv csv(run.path("opd.csv"), cols);
    json summary = json::object();
    auto p = train_student(cold, ens, o, cfg.context(), [&](const OpdIterationStats& s) {
        std::vector<std::string> row{"opd", std::to_string(s.iteration), fmt(s.opd_loss), fmt(s.mar_loss),
                                     fmt(s.grad_norm), s.anchor_discrepancy ? fmt(*s.anchor_discrepancy) : ""};
        for (auto& c : eval_cells(s.eval)) row.push_back(c);
        csv.row(row);
        if (s.eval) {
            summary["eval"] = report_json(*s.eval);
            if (s.anchor_discrepancy) summary["anchor_discrepancy"] = *s.anchor_discrepancy;
            say(run, "opd it " + std::to_string(s.iteration + 1) + " opd_loss " + brief(s.opd_loss) +
                         " normalized " + brief(s.eval->normalized_average()));
        }
    });
    write_new(run.path(artifact::kStudent), p);
    write_json(run.path("opd_summary.json"), summary);
    return p;
}

ParamVector cmd_baseline_mix(const RunContext& run, MixMode mode, const fs::path& init_path) {
    prepare(run, "baseline-mix");
    const auto& cfg = run.config;
    const auto init = load_for(run, or_default(init_path, run, artifact::kPretrain));
    GrpoConfig g = cfg.grpo;
    g.iterations = cfg.mix_iterations();
    g.seed = phase_seed(cfg.seed, Phase::Mix, static_cast<std::uint64_t>(mode));
    g.threads = run.threads();
    const std::string name = std::string(mix_mode_name(mode));
    Csv csv(run.path("mix_" + name + ".csv"), grpo_columns());
    std::optional<EvalReport> last;
    auto log = grpo_logger(run, csv, "mix-" + name);
    auto p = train_mix(init, g, mode, cfg.mix.ratios, cfg.context(), [&](const GrpoIterationStats& s) {
        log(s);
        if (s.eval) last = s.eval;
    });
    write_new(run.path(artifact::mix(mode)), p);
    write_json(run.path("mix_" + name + "_summary.json"), last ? report_json(*last) : json(nullptr));
    return p;
}

EvalReport cmd_eval(const RunContext& run, const fs::path& checkpoint) {
    prepare(run, "eval");
    const auto& cfg = run.config;
    const auto p = load_for(run, checkpoint);
    const auto r = evaluate(p, cfg.world, cfg.schedule, cfg.eval);
    const std::string stem = checkpoint.stem().string();
    std::vector<std::string> cols{"phase", "iteration", "checkpoint"};
    for (auto& s : task_columns("reward_")) cols.push_back(s);
    cols.push_back("normalized_average");
    Csv csv(run.path("eval_" + stem + ".csv"), cols);
    std::vector<std::string> row{"eval", "0", checkpoint.filename().string()};
    for (TaskId t : kAllTasks) row.push_back(fmt(r[t]));
    row.push_back(fmt(r.normalized_average()));
    csv.row(row);
    return r;
}

DiagResult cmd_diag_interference(const RunContext& run, const fs::path& checkpoint, TaskId a, TaskId b) {
    prepare(run, "diag-interference");
    const auto& cfg = run.config;
    const auto p = load_for(run, checkpoint);
    DiagResult r;
    Csv csv(run.path("interference.csv"),
            {"phase", "iteration", "seed", "task_a", "task_b", "inner_product", "cosine", "norm_a", "norm_b"});
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
        const auto s = cfg.seeds[i];
        const auto rep = gradient_interference(p, a, b, cfg.diag.probe_groups, cfg.diag.group_size, cfg.context(),
                                               phase_seed(s, Phase::Diag));
        if (rep.cosine && *rep.cosine < 0.0) ++r.negative;
        csv.row({"diag", std::to_string(i), std::to_string(s), std::string(task_name(a)), std::string(task_name(b)),
                 fmt(rep.inner_product), rep.cosine ? fmt(*rep.cosine) : "", fmt(rep.norm_a), fmt(rep.norm_b)});
        say(run, "seed " + std::to_string(s) + " cosine " + (rep.cosine ? brief(*rep.cosine) : "n/a"));
        r.seeds.push_back(s);
        r.reports.push_back(rep);
    }
    return r;
}

}  // namespace flowopd
