#include "flowopd/coldstart.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>

#include "flowopd/error.hpp"

namespace flowopd {

MergeSpec MergeSpec::uniform(std::vector<ParamVector> inputs) {
    MergeSpec m;
    const double w = inputs.empty() ? 0.0 : 1.0 / static_cast<double>(inputs.size());
    m.weights.assign(inputs.size(), w);
    m.inputs = std::move(inputs);
    return m;
}

void MergeSpec::validate() const {
    if (inputs.empty()) throw std::invalid_argument("merge: no inputs");
    if (weights.size() != inputs.size()) throw std::invalid_argument("merge: weight count differs from input count");
    double sum = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0)) throw std::invalid_argument("merge: weights must be non-negative");
        sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("merge: weights must sum to 1");
    for (const auto& p : inputs)
        if (!(p.arch() == inputs.front().arch())) throw std::invalid_argument("merge: architecture mismatch");
}

ParamVector merge_models(const MergeSpec& spec) {
    spec.validate();
    const std::size_t ref = static_cast<std::size_t>(
        std::max_element(spec.weights.begin(), spec.weights.end()) - spec.weights.begin());
    ParamVector out = spec.inputs[ref];
    const auto base = spec.inputs[ref].values();
    auto v = out.values();
    for (std::size_t i = 0; i < spec.inputs.size(); ++i) {
        if (i == ref || spec.weights[i] == 0.0) continue;
        const auto x = spec.inputs[i].values();
        for (std::size_t p = 0; p < v.size(); ++p) {
            const double delta = x[p] - base[p];
            if (delta != 0.0) v[p] += spec.weights[i] * delta;
        }
    }
    return out;
}

SftDataset build_sft_dataset(const TeacherEnsemble& ensemble, std::span<const Condition> conditions,
                             std::size_t per_condition, const TimeGrid& grid,
                             const NoiseSchedule& schedule, std::uint64_t seed, std::size_t threads) {
    for (const auto& c : conditions) (void)ensemble.expert_for(c);  // routing errors before any work
    SftDataset data;
    data.records.resize(conditions.size() * per_condition);
    auto work = [&](std::size_t begin, std::size_t stride) {
        for (std::size_t j = begin; j < conditions.size(); j += stride) {
            const auto& teacher = ensemble.expert_for(conditions[j]);
            const auto cseed = derive_seed(seed, j);
            for (std::size_t i = 0; i < per_condition; ++i) {
                auto tr = sample_trajectory(teacher, conditions[j], grid, schedule, trajectory_seed(cseed, i));
                data.records[j * per_condition + i] = {conditions[j], tr.final_sample()};
            }
        }
    };
    threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(conditions.size(), 1));
    if (threads == 1) {
        work(0, 1);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(work, w, threads);
    }
    return data;
}

void write_sft_dataset(std::ostream& os, const SftDataset& data) {
    os << "# task\tparams\tsample\n";
    const auto old = os.precision(17);
    for (const auto& r : data.records) {
        os << task_name(r.condition.task) << '\t';
        for (std::size_t i = 0; i < r.condition.params.size(); ++i)
            os << (i ? "," : "") << r.condition.params[i];
        os << '\t';
        for (std::size_t i = 0; i < r.sample.size(); ++i) os << (i ? "," : "") << r.sample[i];
        os << '\n';
    }
    os.precision(old);
}

namespace {

std::vector<double> parse_list(const std::string& field) {
    std::vector<double> out;
    std::stringstream ss(field);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        out.push_back(std::stod(item, &used));
        if (used != item.size()) throw std::invalid_argument("bad number '" + item + "'");
    }
    return out;
}

}  // namespace

SftDataset read_sft_dataset(std::istream& is) {
    SftDataset data;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::stringstream ss(line);
        std::string task, params, sample;
        if (!std::getline(ss, task, '\t') || !std::getline(ss, params, '\t') || !std::getline(ss, sample))
            throw std::invalid_argument("sft table line " + std::to_string(lineno) + ": expected 3 fields");
        try {
            data.records.push_back({{parse_task(task), parse_list(params)}, parse_list(sample)});
        } catch (const std::exception& e) {
            throw std::invalid_argument("sft table line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return data;
}

SftResult sft_train(const ParamVector& init, const SftDataset& data, const SftConfig& config,
                    const FmCallback& callback) {
    if (data.empty()) throw std::invalid_argument("sft_train: empty dataset");
    if (!(config.holdout_fraction >= 0.0 && config.holdout_fraction < 1.0))
        throw std::invalid_argument("sft_train: holdout_fraction must lie in [0, 1)");

    std::vector<FmDatum> all;
    all.reserve(data.size());
    for (const auto& r : data.records) all.push_back({r.condition, r.sample});
    Rng split_rng(derive_seed(config.seed, 0x5F7));
    for (std::size_t i = all.size(); i > 1; --i) std::swap(all[i - 1], all[split_rng.below(i)]);
    auto n_hold = static_cast<std::size_t>(std::floor(config.holdout_fraction * static_cast<double>(all.size())));
    if (config.holdout_fraction > 0.0 && all.size() > 1) n_hold = std::clamp<std::size_t>(n_hold, 1, all.size() - 1);
    const std::span<const FmDatum> heldout(all.data(), n_hold);
    const std::span<const FmDatum> train(all.data() + n_hold, all.size() - n_hold);

    std::vector<FmExample> held_batch;
    if (!heldout.empty()) {
        Rng hr(derive_seed(config.seed, 0x4E1D));
        held_batch = make_fm_batch(heldout, config.t_min, config.t_max, hr);
    }

    SftResult out{init, 0.0, 0.0, train.size(), heldout.size()};
    if (!held_batch.empty()) out.heldout_before = fm_loss_value(init, held_batch);

    Optimizer opt(config.optimizer, init.size());
    std::vector<FmDatum> batch(std::min(config.batch_size, train.size()));
    for (std::size_t it = 0; it < config.iterations; ++it) {
        Rng rng(derive_seed(config.seed, 0x5F70, it));
        for (auto& b : batch) b = train[rng.below(train.size())];
        const auto examples = make_fm_batch(batch, config.t_min, config.t_max, rng);
        const auto lg = fm_loss(out.params, examples);
        if (!std::isfinite(lg.value) || !lg.grad.all_finite())
            throw DivergenceError("SFT diverged at iteration " + std::to_string(it));
        const double gnorm = opt.step(out.params, lg.grad);
        if (callback) callback(it, lg.value, gnorm);
    }
    if (!held_batch.empty()) out.heldout_after = fm_loss_value(out.params, held_batch);
    return out;
}

}  // namespace flowopd
