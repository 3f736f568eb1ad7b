#pragma once

// Small multilayer perceptron with flat parameter storage and exact
// reverse-mode gradients. Layout per layer: W (fan_out x fan_in, row-major)
// followed by b (fan_out).

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace flowopd {

enum class Activation { Tanh };

struct ArchSpec {
    std::size_t input_dim = 0;
    std::vector<std::size_t> hidden_widths;
    std::size_t output_dim = 0;
    Activation activation = Activation::Tanh;

    /// Layer widths including input and output.
    std::vector<std::size_t> layer_sizes() const;

    /// Throws std::invalid_argument when the spec cannot describe a network.
    /// `min_hidden` lets training paths insist on at least one hidden layer.
    void validate(std::size_t min_hidden = 0) const;

    friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

std::size_t param_count(const ArchSpec& arch);

class ParamVector {
public:
    ParamVector() = default;
    explicit ParamVector(ArchSpec arch);  // zero-filled
    ParamVector(ArchSpec arch, std::vector<double> values);

    const ArchSpec& arch() const { return arch_; }
    std::span<const double> values() const { return values_; }
    std::span<double> values() { return values_; }
    std::size_t size() const { return values_.size(); }
    double operator[](std::size_t i) const { return values_[i]; }
    double& operator[](std::size_t i) { return values_[i]; }

    bool all_finite() const;

    friend bool operator==(const ParamVector&, const ParamVector&) = default;

private:
    ArchSpec arch_;
    std::vector<double> values_;
};

struct GradVector {
    std::vector<double> values;

    GradVector() = default;
    explicit GradVector(std::size_t n) : values(n, 0.0) {}
    explicit GradVector(std::vector<double> v) : values(std::move(v)) {}

    std::size_t size() const { return values.size(); }
    double operator[](std::size_t i) const { return values[i]; }
    double& operator[](std::size_t i) { return values[i]; }

    GradVector& operator+=(const GradVector& other);
    GradVector& operator*=(double s);
    /// this += s * other
    void axpy(double s, const GradVector& other);
    double norm() const;
    bool all_finite() const;
};

double dot(const GradVector& a, const GradVector& b);
/// ||a - b|| / max(||b||, tiny)
double relative_l2_error(const GradVector& a, const GradVector& b);

ParamVector init_params(const ArchSpec& arch, std::uint64_t seed);

std::vector<double> forward(const ParamVector& params, std::span<const double> input);

struct BackwardResult {
    GradVector params;
    std::vector<double> input;
};

/// Gradient of dot(upstream, forward(params, input)).
BackwardResult backward(const ParamVector& params, std::span<const double> input,
                        std::span<const double> upstream);

/// Accumulating variant for hot loops: grad_out += d(upstream . output)/d params.
/// Returns the forward output computed on the way.
std::vector<double> backward_accumulate(const ParamVector& params, std::span<const double> input,
                                        std::span<const double> upstream,
                                        std::span<double> grad_out);

using ScalarFn = std::function<double(const ParamVector&)>;

/// Central differences per coordinate. Throws std::domain_error on non-finite f.
GradVector finite_diff_grad(const ScalarFn& f, const ParamVector& params, double eps);

// Checkpoint container: versioned text header, explicit count, hex-float
// values so the round trip is bit-exact.
inline constexpr int kCheckpointVersion = 1;

void write_checkpoint(std::ostream& os, const ParamVector& params);
ParamVector read_checkpoint(std::istream& is);
void save_checkpoint(const std::filesystem::path& path, const ParamVector& params);
ParamVector load_checkpoint(const std::filesystem::path& path);

std::string describe(const ArchSpec& arch);

}  // namespace flowopd
