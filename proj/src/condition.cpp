#include "flowopd/condition.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "flowopd/random.hpp"

namespace flowopd {

std::string_view task_name(TaskId task) {
    switch (task) {
        case TaskId::Region: return "region";
        case TaskId::Ring: return "ring";
        case TaskId::Preference: return "preference";
        case TaskId::Quality: return "quality";
    }
    return "unknown";
}

TaskId parse_task(std::string_view name) {
    for (TaskId t : kAllTasks)
        if (task_name(t) == name) return t;
    throw std::invalid_argument("unknown task '" + std::string(name) + "'");
}

namespace {

std::vector<double> one_hot(std::size_t index, std::size_t n) {
    if (index >= n) throw std::invalid_argument("one-hot index out of range");
    std::vector<double> v(n, 0.0);
    v[index] = 1.0;
    return v;
}

bool is_one_hot_task(TaskId t) { return t != TaskId::Ring; }

}  // namespace

Condition Condition::region(std::size_t component, std::size_t n_components) {
    return {TaskId::Region, one_hot(component, n_components)};
}

Condition Condition::ring(double radius) { return {TaskId::Ring, {radius}}; }

Condition Condition::preference(std::size_t content, std::size_t n_components) {
    return {TaskId::Preference, one_hot(content, n_components)};
}

Condition Condition::quality(std::size_t content, std::size_t n_components) {
    return {TaskId::Quality, one_hot(content, n_components)};
}

std::size_t Condition::content_index() const {
    if (!is_one_hot_task(task)) throw std::logic_error("content_index: ring conditions have none");
    auto it = std::find(params.begin(), params.end(), 1.0);
    if (it == params.end()) throw std::logic_error("content_index: params are not one-hot");
    return static_cast<std::size_t>(it - params.begin());
}

double Condition::radius() const {
    if (task != TaskId::Ring || params.size() != 1)
        throw std::logic_error("radius: not a ring condition");
    return params[0];
}

void Condition::validate(std::size_t n_components) const {
    if (task == TaskId::Ring) {
        if (params.size() != 1 || !(params[0] > 0.0))
            throw std::invalid_argument("ring condition needs one positive radius");
        return;
    }
    if (params.size() != n_components)
        throw std::invalid_argument("condition params length does not match component count");
    std::size_t hot = 0;
    for (double p : params) {
        if (p == 1.0)
            ++hot;
        else if (p != 0.0)
            throw std::invalid_argument("condition params must be one-hot");
    }
    if (hot != 1) throw std::invalid_argument("condition params must be one-hot");
}

std::string describe(const Condition& c) {
    std::ostringstream os;
    os << task_name(c.task);
    if (c.task == TaskId::Ring)
        os << "(r=" << c.params.at(0) << ")";
    else
        os << "(k=" << c.content_index() << ")";
    return os.str();
}

std::size_t condition_embedding_dim(std::size_t n_components) {
    return kNumTasks + n_components + 1;
}

std::size_t model_input_dim(std::size_t state_dim, std::size_t n_components) {
    return state_dim + 1 + condition_embedding_dim(n_components);
}

std::size_t content_slots(const ArchSpec& arch) {
    const std::size_t fixed = arch.output_dim + 1 + kNumTasks + 1;
    if (arch.input_dim < fixed)
        throw std::invalid_argument("architecture input too narrow for condition embedding");
    return arch.input_dim - fixed;
}

void model_input(const ArchSpec& arch, std::span<const double> x, double t, const Condition& c,
                 std::span<double> out) {
    const std::size_t d = arch.output_dim;
    const std::size_t n = content_slots(arch);
    if (x.size() != d) throw std::invalid_argument("model_input: state dimension mismatch");
    if (out.size() != arch.input_dim) throw std::invalid_argument("model_input: buffer size");
    std::fill(out.begin(), out.end(), 0.0);
    std::copy(x.begin(), x.end(), out.begin());
    out[d] = t;
    out[d + 1 + static_cast<std::size_t>(c.task)] = 1.0;
    const std::size_t content = d + 1 + kNumTasks;
    if (c.task == TaskId::Ring) {
        out[content + n] = c.radius();
    } else {
        if (c.params.size() != n)
            throw std::invalid_argument("model_input: condition does not fit architecture");
        std::copy(c.params.begin(), c.params.end(), out.begin() + static_cast<long>(content));
    }
}

std::vector<double> model_input(const ArchSpec& arch, std::span<const double> x, double t,
                                const Condition& c) {
    std::vector<double> in(arch.input_dim);
    model_input(arch, x, t, c, in);
    return in;
}

State velocity(const ParamVector& params, std::span<const double> x, double t,
               const Condition& c) {
    return forward(params, model_input(params.arch(), x, t, c));
}

std::uint64_t policy_hash(const ParamVector& params) {
    const auto sizes = params.arch().layer_sizes();
    std::uint64_t h = fnv1a({reinterpret_cast<const unsigned char*>(sizes.data()),
                             sizes.size() * sizeof(std::size_t)});
    const auto v = params.values();
    return fnv1a({reinterpret_cast<const unsigned char*>(v.data()), v.size() * sizeof(double)}, h);
}

}  // namespace flowopd
