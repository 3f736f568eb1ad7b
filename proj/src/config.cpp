#include "flowopd/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "flowopd/error.hpp"
#include "flowopd/random.hpp"

namespace flowopd {

using nlohmann::json;

std::string_view coldstart_mode_name(ColdstartMode mode) {
    return mode == ColdstartMode::Sft ? "sft" : "merge";
}

ColdstartMode parse_coldstart_mode(std::string_view name) {
    if (name == "sft") return ColdstartMode::Sft;
    if (name == "merge") return ColdstartMode::Merge;
    throw std::invalid_argument("unknown cold-start mode '" + std::string(name) + "' (sft|merge)");
}

std::uint64_t phase_seed(std::uint64_t master, Phase phase, std::uint64_t sub) {
    return derive_seed(master, static_cast<std::uint64_t>(phase), sub);
}

ExperimentConfig::ExperimentConfig() {
    pretrain.iterations = 3000;
    grpo.iterations = 300;
    grpo.learning_rate = 3e-3;
    grpo.optimizer = OptimizerKind::Adam;
    grpo.eval_every = 50;
    grpo.teacher_rewards[TaskId::Quality] = {{TaskId::Quality, 1.0}, {TaskId::Preference, 1.0}};
    opd.iterations = 300;
    eval.samples_per_task = 1024;
    apply_master_seed();
}

ArchSpec ExperimentConfig::arch() const {
    ArchSpec a;
    a.input_dim = model_input_dim(world.dim(), world.components());
    a.hidden_widths = hidden_widths;
    a.output_dim = world.dim();
    return a;
}

TrainContext ExperimentConfig::context() const { return {world, grid, schedule, eval}; }

void ExperimentConfig::apply_master_seed() {
    pretrain.seed = phase_seed(seed, Phase::Pretrain);
    grpo.seed = phase_seed(seed, Phase::Teacher);
    coldstart.sft.seed = phase_seed(seed, Phase::Sft);
    opd.seed = phase_seed(seed, Phase::Opd);
    grpo.threads = threads;
    opd.threads = threads;
}

void ExperimentConfig::validate() const {
    auto fail = [](const std::string& what) { throw ConfigError(what); };
    try {
        world.validate();
        arch().validate(1);
        grid.validate();
        grpo.validate();
        opd.validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        fail(e.what());
    }
    if (!(schedule.a > 0.0)) fail("schedule.a must be > 0");
    if (eval.samples_per_task == 0) fail("eval.samples_per_task must be > 0");
    eval.grid.validate();
    if (pretrain.batch_size == 0) fail("pretrain.batch_size must be > 0");
    if (!(pretrain.t_min > 0.0 && pretrain.t_min < pretrain.t_max && pretrain.t_max < 1.0))
        fail("pretrain t range must satisfy 0 < t_min < t_max < 1");
    if (seeds.empty()) fail("seeds must not be empty");
    if (threads == 0) fail("threads must be >= 1");
    if (output_dir.empty()) fail("output_dir must not be empty");
    double total = 0.0;
    for (const auto& [t, w] : mix.ratios) {
        if (w < 0.0) fail("mix.ratios must be non-negative");
        total += w;
    }
    if (!(total > 0.0)) fail("mix.ratios must have a positive entry");
    if (!coldstart.merge_weights.empty() && coldstart.merge_weights.size() != kNumTasks)
        fail("coldstart.merge_weights needs one weight per task expert");
    if (coldstart.sft.batch_size == 0) fail("coldstart.sft.batch_size must be > 0");
    if (diag.probe_groups == 0 || diag.group_size < 2) fail("diag needs probe_groups > 0 and group_size >= 2");
}

namespace {

json weights_json(const RewardWeights& w) {
    json j = json::object();
    for (const auto& [t, v] : w) j[std::string(task_name(t))] = v;
    return j;
}

json optimizer_json(const OptimizerConfig& o) {
    return {{"kind", std::string(optimizer_name(o.kind))},
            {"learning_rate", o.learning_rate},
            {"grad_clip", o.grad_clip},
            {"beta1", o.beta1},
            {"beta2", o.beta2},
            {"epsilon", o.epsilon}};
}

// Walks a JSON object, remembering which keys were read so leftovers can be
// reported as unknown.
class Reader {
public:
    Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(where() + " must be an object");
    }
    ~Reader() noexcept(false) {
        if (std::uncaught_exceptions() > 0) return;
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError("unknown key '" + path_ + "." + it.key() + "'");
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            out = it->template get<T>();
        } catch (const json::exception&) {
            throw ConfigError(path_ + "." + key + ": wrong type");
        }
    }

    template <class F>
    void enumeration(const char* key, F&& parse) {
        std::string name;
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        if (!it->is_string()) throw ConfigError(path_ + "." + key + ": expected a string");
        try {
            parse(it->template get<std::string>());
        } catch (const std::invalid_argument& e) {
            throw ConfigError(path_ + "." + key + ": " + e.what());
        }
    }

    const json* child(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    std::string sub(const char* key) const { return path_ + "." + key; }

private:
    std::string where() const { return path_.empty() ? "config" : path_; }
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

RewardWeights read_weights(const json& j, const std::string& path) {
    if (!j.is_object()) throw ConfigError(path + " must be an object of task weights");
    RewardWeights w;
    for (auto it = j.begin(); it != j.end(); ++it) {
        TaskId t;
        try {
            t = parse_task(it.key());
        } catch (const std::invalid_argument& e) {
            throw ConfigError(path + ": " + e.what());
        }
        if (!it->is_number()) throw ConfigError(path + "." + it.key() + ": expected a number");
        w[t] = it->get<double>();
    }
    return w;
}

void read_optimizer(const json& j, const std::string& path, OptimizerConfig& o) {
    Reader r(j, path);
    r.enumeration("kind", [&](const std::string& s) { o.kind = parse_optimizer(s); });
    r.get("learning_rate", o.learning_rate);
    r.get("grad_clip", o.grad_clip);
    r.get("beta1", o.beta1);
    r.get("beta2", o.beta2);
    r.get("epsilon", o.epsilon);
}

void read_grid(const json& j, const std::string& path, TimeGrid& g) {
    Reader r(j, path);
    r.get("steps", g.steps);
    r.get("t_min", g.t_min);
    r.get("t_max", g.t_max);
}

json grid_json(const TimeGrid& g) { return {{"steps", g.steps}, {"t_min", g.t_min}, {"t_max", g.t_max}}; }

}  // namespace

json to_json(const ExperimentConfig& c) {
    json j;
    j["schema"] = kConfigSchema;
    j["version"] = kConfigVersion;
    j["seed"] = c.seed;
    j["seeds"] = c.seeds;
    j["output_dir"] = c.output_dir;
    j["threads"] = c.threads;

    json comps = json::array();
    for (std::size_t k = 0; k < c.world.mixture.size(); ++k) {
        const auto& m = c.world.mixture[k];
        comps.push_back({{"mean", m.mean},
                         {"scale", m.scale},
                         {"weight", m.weight},
                         {"label", k < c.world.region_labels.size() ? c.world.region_labels[k] : ""}});
    }
    j["world"] = {{"components", comps},
                  {"preference_center", c.world.preference_center},
                  {"preference_scale", c.world.preference_scale},
                  {"region_tau", c.world.region_tau},
                  {"ring_radius", c.world.ring_radius},
                  {"ring_tau", c.world.ring_tau}};
    j["arch"] = {{"hidden_widths", c.hidden_widths}, {"activation", "tanh"}};
    j["grid"] = grid_json(c.grid);
    j["schedule"] = {{"a", c.schedule.a}};
    j["eval"] = {{"samples_per_task", c.eval.samples_per_task}, {"grid", grid_json(c.eval.grid)}, {"seed", c.eval.seed}};
    j["pretrain"] = {{"iterations", c.pretrain.iterations},
                     {"batch_size", c.pretrain.batch_size},
                     {"optimizer", optimizer_json(c.pretrain.optimizer)},
                     {"t_min", c.pretrain.t_min},
                     {"t_max", c.pretrain.t_max}};
    json teacher_rewards = json::object();
    for (const auto& [t, w] : c.grpo.teacher_rewards) teacher_rewards[std::string(task_name(t))] = weights_json(w);
    j["grpo"] = {{"group_size", c.grpo.group_size},
                 {"learning_rate", c.grpo.learning_rate},
                 {"iterations", c.grpo.iterations},
                 {"clip_range", c.grpo.clip_range},
                 {"conditions_per_iter", c.grpo.conditions_per_iter},
                 {"optimizer", std::string(optimizer_name(c.grpo.optimizer))},
                 {"grad_clip", c.grpo.grad_clip},
                 {"eval_every", c.grpo.eval_every},
                 {"epoch_length", c.grpo.epoch_length},
                 {"teacher_rewards", teacher_rewards}};
    j["mix"] = {{"mode", std::string(mix_mode_name(c.mix.mode))},
                {"iterations", c.mix.iterations},
                {"ratios", weights_json(c.mix.ratios)}};
    j["coldstart"] = {{"mode", std::string(coldstart_mode_name(c.coldstart.mode))},
                      {"per_condition", c.coldstart.per_condition},
                      {"merge_weights", c.coldstart.merge_weights},
                      {"sft",
                       {{"iterations", c.coldstart.sft.iterations},
                        {"batch_size", c.coldstart.sft.batch_size},
                        {"optimizer", optimizer_json(c.coldstart.sft.optimizer)},
                        {"t_min", c.coldstart.sft.t_min},
                        {"t_max", c.coldstart.sft.t_max},
                        {"holdout_fraction", c.coldstart.sft.holdout_fraction}}}};
    j["opd"] = {{"lambda", c.opd.lambda},
                {"group_size", c.opd.group_size},
                {"conditions_per_iter", c.opd.conditions_per_iter},
                {"learning_rate", c.opd.learning_rate},
                {"optimizer", std::string(optimizer_name(c.opd.optimizer))},
                {"grad_clip", c.opd.grad_clip},
                {"iterations", c.opd.iterations},
                {"anchor_scope", std::string(anchor_scope_name(c.opd.anchor_scope))},
                {"mar_probes", c.opd.mar_probes},
                {"eval_every", c.opd.eval_every}};
    j["diag"] = {{"task_a", std::string(task_name(c.diag.task_a))},
                 {"task_b", std::string(task_name(c.diag.task_b))},
                 {"probe_groups", c.diag.probe_groups},
                 {"group_size", c.diag.group_size}};
    return j;
}

ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig c;
    {
        Reader r(j, "");
        std::string schema = kConfigSchema;
        int version = kConfigVersion;
        r.get("schema", schema);
        r.get("version", version);
        if (schema != kConfigSchema) throw ConfigError("schema must be '" + std::string(kConfigSchema) + "'");
        if (version != kConfigVersion)
            throw ConfigError("unsupported config version " + std::to_string(version) + " (expected " +
                              std::to_string(kConfigVersion) + ")");
        r.get("seed", c.seed);
        r.get("seeds", c.seeds);
        r.get("output_dir", c.output_dir);
        r.get("threads", c.threads);

        if (const json* w = r.child("world")) {
            Reader wr(*w, "world");
            if (const json* comps = wr.child("components")) {
                if (!comps->is_array()) throw ConfigError("world.components must be an array");
                c.world.mixture.clear();
                c.world.region_labels.clear();
                for (std::size_t k = 0; k < comps->size(); ++k) {
                    Reader cr((*comps)[k], "world.components[" + std::to_string(k) + "]");
                    MixtureComponent m;
                    std::string label = "C" + std::to_string(k);
                    cr.get("mean", m.mean);
                    cr.get("scale", m.scale);
                    cr.get("weight", m.weight);
                    cr.get("label", label);
                    c.world.mixture.push_back(std::move(m));
                    c.world.region_labels.push_back(std::move(label));
                }
            }
            wr.get("preference_center", c.world.preference_center);
            wr.get("preference_scale", c.world.preference_scale);
            wr.get("region_tau", c.world.region_tau);
            wr.get("ring_radius", c.world.ring_radius);
            wr.get("ring_tau", c.world.ring_tau);
        }
        if (const json* a = r.child("arch")) {
            Reader ar(*a, "arch");
            ar.get("hidden_widths", c.hidden_widths);
            ar.enumeration("activation", [](const std::string& s) {
                if (s != "tanh") throw std::invalid_argument("only tanh is supported");
            });
        }
        if (const json* g = r.child("grid")) read_grid(*g, "grid", c.grid);
        if (const json* s = r.child("schedule")) {
            Reader sr(*s, "schedule");
            sr.get("a", c.schedule.a);
        }
        if (const json* e = r.child("eval")) {
            Reader er(*e, "eval");
            er.get("samples_per_task", c.eval.samples_per_task);
            if (const json* g = er.child("grid")) read_grid(*g, "eval.grid", c.eval.grid);
            er.get("seed", c.eval.seed);
        }
        if (const json* p = r.child("pretrain")) {
            Reader pr(*p, "pretrain");
            pr.get("iterations", c.pretrain.iterations);
            pr.get("batch_size", c.pretrain.batch_size);
            if (const json* o = pr.child("optimizer")) read_optimizer(*o, "pretrain.optimizer", c.pretrain.optimizer);
            pr.get("t_min", c.pretrain.t_min);
            pr.get("t_max", c.pretrain.t_max);
        }
        if (const json* g = r.child("grpo")) {
            Reader gr(*g, "grpo");
            gr.get("group_size", c.grpo.group_size);
            gr.get("learning_rate", c.grpo.learning_rate);
            gr.get("iterations", c.grpo.iterations);
            gr.get("clip_range", c.grpo.clip_range);
            gr.get("conditions_per_iter", c.grpo.conditions_per_iter);
            gr.enumeration("optimizer", [&](const std::string& s) { c.grpo.optimizer = parse_optimizer(s); });
            gr.get("grad_clip", c.grpo.grad_clip);
            gr.get("eval_every", c.grpo.eval_every);
            gr.get("epoch_length", c.grpo.epoch_length);
            if (const json* tr = gr.child("teacher_rewards")) {
                if (!tr->is_object()) throw ConfigError("grpo.teacher_rewards must be an object");
                c.grpo.teacher_rewards.clear();
                for (auto it = tr->begin(); it != tr->end(); ++it) {
                    TaskId t;
                    try {
                        t = parse_task(it.key());
                    } catch (const std::invalid_argument& e) {
                        throw ConfigError(std::string("grpo.teacher_rewards: ") + e.what());
                    }
                    c.grpo.teacher_rewards[t] = read_weights(*it, "grpo.teacher_rewards." + it.key());
                }
            }
        }
        if (const json* m = r.child("mix")) {
            Reader mr(*m, "mix");
            mr.enumeration("mode", [&](const std::string& s) { c.mix.mode = parse_mix_mode(s); });
            mr.get("iterations", c.mix.iterations);
            if (const json* ratios = mr.child("ratios")) c.mix.ratios = read_weights(*ratios, "mix.ratios");
        }
        if (const json* cs = r.child("coldstart")) {
            Reader cr(*cs, "coldstart");
            cr.enumeration("mode", [&](const std::string& s) { c.coldstart.mode = parse_coldstart_mode(s); });
            cr.get("per_condition", c.coldstart.per_condition);
            cr.get("merge_weights", c.coldstart.merge_weights);
            if (const json* s = cr.child("sft")) {
                Reader sr(*s, "coldstart.sft");
                sr.get("iterations", c.coldstart.sft.iterations);
                sr.get("batch_size", c.coldstart.sft.batch_size);
                if (const json* o = sr.child("optimizer"))
                    read_optimizer(*o, "coldstart.sft.optimizer", c.coldstart.sft.optimizer);
                sr.get("t_min", c.coldstart.sft.t_min);
                sr.get("t_max", c.coldstart.sft.t_max);
                sr.get("holdout_fraction", c.coldstart.sft.holdout_fraction);
            }
        }
        if (const json* o = r.child("opd")) {
            Reader orr(*o, "opd");
            orr.get("lambda", c.opd.lambda);
            orr.get("group_size", c.opd.group_size);
            orr.get("conditions_per_iter", c.opd.conditions_per_iter);
            orr.get("learning_rate", c.opd.learning_rate);
            orr.enumeration("optimizer", [&](const std::string& s) { c.opd.optimizer = parse_optimizer(s); });
            orr.get("grad_clip", c.opd.grad_clip);
            orr.get("iterations", c.opd.iterations);
            orr.enumeration("anchor_scope", [&](const std::string& s) { c.opd.anchor_scope = parse_anchor_scope(s); });
            orr.get("mar_probes", c.opd.mar_probes);
            orr.get("eval_every", c.opd.eval_every);
        }
        if (const json* d = r.child("diag")) {
            Reader dr(*d, "diag");
            dr.enumeration("task_a", [&](const std::string& s) { c.diag.task_a = parse_task(s); });
            dr.enumeration("task_b", [&](const std::string& s) { c.diag.task_b = parse_task(s); });
            dr.get("probe_groups", c.diag.probe_groups);
            dr.get("group_size", c.diag.group_size);
        }
    }
    c.apply_master_seed();
    c.validate();
    return c;
}

std::string serialize_config(const ExperimentConfig& config) { return to_json(config).dump(2) + "\n"; }

ExperimentConfig parse_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    return config_from_json(j);
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return parse_config(ss.str());
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

void save_config(const std::filesystem::path& path, const ExperimentConfig& config) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << serialize_config(config);
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace flowopd
