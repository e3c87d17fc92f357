#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mole/random.hpp"

namespace mole {

/// Placement of one affine layer inside an Mlp's flat parameter vector.
/// Weights are stored row-major as out x in.
struct LayerShape {
    std::size_t in = 0;
    std::size_t out = 0;
    std::size_t weight_offset = 0;
    std::size_t bias_offset = 0;
};

/// Fully connected network with rectified-linear hidden activations and a
/// linear output. All parameters live in one contiguous vector so gradients
/// and optimizer moments share its layout.
class Mlp {
public:
    Mlp() = default;
    /// `sizes` = {input, hidden..., output}; parameters start at zero.
    explicit Mlp(std::vector<std::size_t> sizes);

    /// Weights uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero.
    static Mlp glorot(std::vector<std::size_t> sizes, std::uint64_t seed);

    const std::vector<LayerShape>& shapes() const { return shapes_; }
    std::vector<std::size_t> sizes() const;
    std::size_t input_dim() const { return shapes_.front().in; }
    std::size_t output_dim() const { return shapes_.back().out; }
    std::size_t hidden_layers() const { return shapes_.size() - 1; }
    std::size_t parameter_count() const { return params_.size(); }

    std::span<double> params() { return params_; }
    std::span<const double> params() const { return params_; }

    /// 1 for weight entries, 0 for biases.
    std::vector<char> weight_mask() const;

private:
    std::vector<LayerShape> shapes_;
    std::vector<double> params_;
};

/// What backpropagation needs from a forward pass.
struct MlpTrace {
    /// Input of each affine layer (after activation and dropout).
    std::vector<std::vector<double>> inputs;
    /// Per hidden unit: d(layer input)/d(pre-activation), i.e. relu' times the dropout scale.
    std::vector<std::vector<double>> gates;
};

/// Forward pass. With `dropout_rng` non-null, inverted dropout at `dropout`
/// follows every hidden activation.
std::vector<double> mlp_forward(const Mlp& net, std::span<const double> x, double dropout = 0.0,
                                Rng* dropout_rng = nullptr, MlpTrace* trace = nullptr);

/// Accumulates d(loss)/d(params) into `grad` (same layout as net.params())
/// given d(loss)/d(output). Returns d(loss)/d(input).
std::vector<double> mlp_backward(const Mlp& net, const MlpTrace& trace, std::span<const double> grad_output,
                                 std::span<double> grad);

struct AdamOptions {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    /// Decoupled; applied only where the decay mask is set.
    double weight_decay = 0.0;
};

struct AdamMoments {
    std::vector<double> first;
    std::vector<double> second;

    explicit AdamMoments(std::size_t n = 0) : first(n, 0.0), second(n, 0.0) {}
};

/// One bias-corrected Adam update with decoupled weight decay.
/// `step` is 1-based. Throws TrainingError on non-finite gradients.
void adam_update(std::span<double> params, std::span<const double> grads, AdamMoments& moments,
                 const AdamOptions& options, std::size_t step, std::span<const char> decay_mask = {});

}  // namespace mole
