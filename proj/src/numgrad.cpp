#include "flowopd/numgrad.hpp"

#include <algorithm>
#include <cstdlib>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "flowopd/random.hpp"

namespace flowopd {

std::vector<std::size_t> ArchSpec::layer_sizes() const {
    std::vector<std::size_t> sizes;
    sizes.reserve(hidden_widths.size() + 2);
    sizes.push_back(input_dim);
    sizes.insert(sizes.end(), hidden_widths.begin(), hidden_widths.end());
    sizes.push_back(output_dim);
    return sizes;
}

void ArchSpec::validate(std::size_t min_hidden) const {
    if (input_dim == 0 || output_dim == 0)
        throw std::invalid_argument("ArchSpec: input_dim and output_dim must be positive");
    if (hidden_widths.size() < min_hidden)
        throw std::invalid_argument("ArchSpec: too few hidden layers");
    for (auto w : hidden_widths)
        if (w == 0) throw std::invalid_argument("ArchSpec: hidden width must be positive");
}

std::size_t param_count(const ArchSpec& arch) {
    const auto sizes = arch.layer_sizes();
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) n += sizes[l] * sizes[l + 1] + sizes[l + 1];
    return n;
}

ParamVector::ParamVector(ArchSpec arch) : arch_(std::move(arch)) {
    arch_.validate();
    values_.assign(param_count(arch_), 0.0);
}

ParamVector::ParamVector(ArchSpec arch, std::vector<double> values)
    : arch_(std::move(arch)), values_(std::move(values)) {
    arch_.validate();
    if (values_.size() != param_count(arch_))
        throw std::invalid_argument("ParamVector: length " + std::to_string(values_.size()) +
                                    " does not match param_count " +
                                    std::to_string(param_count(arch_)));
}

bool ParamVector::all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

GradVector& GradVector::operator+=(const GradVector& other) {
    axpy(1.0, other);
    return *this;
}

GradVector& GradVector::operator*=(double s) {
    for (double& v : values) v *= s;
    return *this;
}

void GradVector::axpy(double s, const GradVector& other) {
    if (other.size() != size()) throw std::invalid_argument("GradVector: size mismatch");
    for (std::size_t i = 0; i < values.size(); ++i) values[i] += s * other.values[i];
}

double GradVector::norm() const { return std::sqrt(dot(*this, *this)); }

bool GradVector::all_finite() const {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

double dot(const GradVector& a, const GradVector& b) {
    if (a.size() != b.size()) throw std::invalid_argument("dot: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double relative_l2_error(const GradVector& a, const GradVector& b) {
    if (a.size() != b.size()) throw std::invalid_argument("relative_l2_error: size mismatch");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den += b[i] * b[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

ParamVector init_params(const ArchSpec& arch, std::uint64_t seed) {
    ParamVector p(arch);
    Rng rng(derive_seed(seed, 0x1417));
    const auto sizes = arch.layer_sizes();
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
        const std::size_t fan_in = sizes[l], fan_out = sizes[l + 1];
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        for (std::size_t i = 0; i < fan_in * fan_out; ++i) p[off + i] = rng.uniform(-limit, limit);
        off += fan_in * fan_out + fan_out;  // biases stay zero
    }
    return p;
}

namespace {

void check_input(const ParamVector& params, std::span<const double> input) {
    if (input.size() != params.arch().input_dim)
        throw std::invalid_argument("forward: input length " + std::to_string(input.size()) +
                                    " != input_dim " + std::to_string(params.arch().input_dim));
}

// acts[l] is the input of layer l; acts.back() is the network output.
std::vector<std::vector<double>> run_forward(const ParamVector& params,
                                             std::span<const double> input) {
    check_input(params, input);
    const auto sizes = params.arch().layer_sizes();
    const std::size_t layers = sizes.size() - 1;
    std::vector<std::vector<double>> acts(sizes.size());
    acts[0].assign(input.begin(), input.end());
    const double* w = params.values().data();
    for (std::size_t l = 0; l < layers; ++l) {
        const std::size_t fan_in = sizes[l], fan_out = sizes[l + 1];
        const double* b = w + fan_in * fan_out;
        const auto& in = acts[l];
        auto& out = acts[l + 1];
        out.resize(fan_out);
        for (std::size_t o = 0; o < fan_out; ++o) {
            const double* row = w + o * fan_in;
            double s = b[o];
            for (std::size_t i = 0; i < fan_in; ++i) s += row[i] * in[i];
            out[o] = (l + 1 < layers) ? std::tanh(s) : s;
        }
        w = b + fan_out;
    }
    return acts;
}

}  // namespace

std::vector<double> forward(const ParamVector& params, std::span<const double> input) {
    auto acts = run_forward(params, input);
    return std::move(acts.back());
}

namespace {

std::vector<double> backward_impl(const ParamVector& params, std::span<const double> input,
                                  std::span<const double> upstream, std::span<double> grad_out,
                                  std::vector<double>* input_grad) {
    const auto& arch = params.arch();
    if (upstream.size() != arch.output_dim)
        throw std::invalid_argument("backward: upstream length != output_dim");
    if (grad_out.size() != params.size())
        throw std::invalid_argument("backward: gradient buffer length mismatch");
    auto acts = run_forward(params, input);
    const auto sizes = arch.layer_sizes();
    const std::size_t layers = sizes.size() - 1;

    std::vector<std::size_t> offsets(layers);
    std::size_t off = 0;
    for (std::size_t l = 0; l < layers; ++l) {
        offsets[l] = off;
        off += sizes[l] * sizes[l + 1] + sizes[l + 1];
    }

    std::vector<double> delta(upstream.begin(), upstream.end());
    std::vector<double> prev;
    for (std::size_t l = layers; l-- > 0;) {
        const std::size_t fan_in = sizes[l], fan_out = sizes[l + 1];
        const double* w = params.values().data() + offsets[l];
        double* gw = grad_out.data() + offsets[l];
        double* gb = gw + fan_in * fan_out;
        const auto& in = acts[l];
        prev.assign(fan_in, 0.0);
        for (std::size_t o = 0; o < fan_out; ++o) {
            const double d = delta[o];
            if (d == 0.0) continue;
            gb[o] += d;
            const double* row = w + o * fan_in;
            double* grow = gw + o * fan_in;
            for (std::size_t i = 0; i < fan_in; ++i) {
                grow[i] += d * in[i];
                prev[i] += row[i] * d;
            }
        }
        if (l > 0)
            for (std::size_t i = 0; i < fan_in; ++i) prev[i] *= 1.0 - in[i] * in[i];
        delta.swap(prev);
    }
    if (input_grad) *input_grad = std::move(delta);
    return std::move(acts.back());
}

}  // namespace

std::vector<double> backward_accumulate(const ParamVector& params, std::span<const double> input,
                                        std::span<const double> upstream,
                                        std::span<double> grad_out) {
    return backward_impl(params, input, upstream, grad_out, nullptr);
}

BackwardResult backward(const ParamVector& params, std::span<const double> input,
                        std::span<const double> upstream) {
    BackwardResult r{GradVector(params.size()), {}};
    backward_impl(params, input, upstream, r.params.values, &r.input);
    return r;
}

GradVector finite_diff_grad(const ScalarFn& f, const ParamVector& params, double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_grad: eps must be positive");
    GradVector g(params.size());
    ParamVector probe = params;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + eps;
        const double fp = f(probe);
        probe[i] = orig - eps;
        const double fm = f(probe);
        probe[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw std::domain_error("finite_diff_grad: non-finite function value");
        g[i] = (fp - fm) / (2.0 * eps);
    }
    return g;
}

std::string describe(const ArchSpec& arch) {
    std::ostringstream os;
    os << "in=" << arch.input_dim << " hidden=(";
    for (std::size_t i = 0; i < arch.hidden_widths.size(); ++i)
        os << (i ? "," : "") << arch.hidden_widths[i];
    os << ") out=" << arch.output_dim;
    return os.str();
}

void write_checkpoint(std::ostream& os, const ParamVector& params) {
    const auto& arch = params.arch();
    os << "flowopd-checkpoint " << kCheckpointVersion << "\n";
    os << "activation tanh\n";
    os << "input_dim " << arch.input_dim << "\n";
    os << "hidden " << arch.hidden_widths.size();
    for (auto w : arch.hidden_widths) os << ' ' << w;
    os << "\noutput_dim " << arch.output_dim << "\n";
    os << "count " << params.size() << "\n";
    char buf[64];
    for (double v : params.values()) {
        std::snprintf(buf, sizeof buf, "%a\n", v);
        os << buf;
    }
    os << "end\n";
}

namespace {

void expect_token(std::istream& is, const std::string& want) {
    std::string tok;
    if (!(is >> tok) || tok != want)
        throw std::runtime_error("checkpoint: expected '" + want + "', got '" + tok + "'");
}

}  // namespace

ParamVector read_checkpoint(std::istream& is) {
    expect_token(is, "flowopd-checkpoint");
    int version = 0;
    if (!(is >> version) || version != kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported format version");
    expect_token(is, "activation");
    expect_token(is, "tanh");
    ArchSpec arch;
    std::size_t n_hidden = 0, count = 0;
    expect_token(is, "input_dim");
    is >> arch.input_dim;
    expect_token(is, "hidden");
    is >> n_hidden;
    arch.hidden_widths.resize(n_hidden);
    for (auto& w : arch.hidden_widths) is >> w;
    expect_token(is, "output_dim");
    is >> arch.output_dim;
    expect_token(is, "count");
    is >> count;
    if (!is) throw std::runtime_error("checkpoint: malformed header");
    if (count != param_count(arch))
        throw std::runtime_error("checkpoint: count does not match architecture");
    std::vector<double> values(count);
    std::string tok;
    for (auto& v : values) {
        if (!(is >> tok)) throw std::runtime_error("checkpoint: truncated parameter block");
        char* end = nullptr;
        v = std::strtod(tok.c_str(), &end);
        if (end == tok.c_str() || *end != '\0')
            throw std::runtime_error("checkpoint: bad value '" + tok + "'");
    }
    expect_token(is, "end");
    return ParamVector(std::move(arch), std::move(values));
}

void save_checkpoint(const std::filesystem::path& path, const ParamVector& params) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    write_checkpoint(os, params);
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

ParamVector load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    return read_checkpoint(is);
}

}  // namespace flowopd
