#include "mole/nn.hpp"

#include <cmath>

#include "mole/errors.hpp"

namespace mole {

Mlp::Mlp(std::vector<std::size_t> sizes) {
    if (sizes.size() < 2) throw DomainError("an MLP needs input and output sizes");
    std::size_t offset = 0;
    for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
        if (sizes[i] == 0 || sizes[i + 1] == 0) throw DomainError("MLP layer sizes must be positive");
        LayerShape s;
        s.in = sizes[i];
        s.out = sizes[i + 1];
        s.weight_offset = offset;
        offset += s.in * s.out;
        s.bias_offset = offset;
        offset += s.out;
        shapes_.push_back(s);
    }
    params_.assign(offset, 0.0);
}

Mlp Mlp::glorot(std::vector<std::size_t> sizes, std::uint64_t seed) {
    Mlp net(std::move(sizes));
    Rng rng(seed);
    for (const auto& s : net.shapes_) {
        const double limit = std::sqrt(6.0 / static_cast<double>(s.in + s.out));
        for (std::size_t i = 0; i < s.in * s.out; ++i) net.params_[s.weight_offset + i] = rng.uniform(-limit, limit);
    }
    return net;
}

std::vector<std::size_t> Mlp::sizes() const {
    std::vector<std::size_t> out;
    for (const auto& s : shapes_) out.push_back(s.in);
    out.push_back(shapes_.back().out);
    return out;
}

std::vector<char> Mlp::weight_mask() const {
    std::vector<char> mask(params_.size(), 0);
    for (const auto& s : shapes_)
        for (std::size_t i = 0; i < s.in * s.out; ++i) mask[s.weight_offset + i] = 1;
    return mask;
}

std::vector<double> mlp_forward(const Mlp& net, std::span<const double> x, double dropout, Rng* dropout_rng,
                                MlpTrace* trace) {
    if (x.size() != net.input_dim()) throw ContractError("MLP input has wrong dimension");
    const auto params = net.params();
    const auto& shapes = net.shapes();
    std::vector<double> current(x.begin(), x.end());
    if (trace) {
        trace->inputs.clear();
        trace->gates.clear();
    }
    const bool drop = dropout_rng != nullptr && dropout > 0.0;
    const double keep_scale = drop ? 1.0 / (1.0 - dropout) : 1.0;

    for (std::size_t li = 0; li < shapes.size(); ++li) {
        const auto& s = shapes[li];
        if (trace) trace->inputs.push_back(current);
        std::vector<double> out(s.out);
        for (std::size_t o = 0; o < s.out; ++o) {
            const double* w = params.data() + s.weight_offset + o * s.in;
            double acc = params[s.bias_offset + o];
            for (std::size_t i = 0; i < s.in; ++i) acc += w[i] * current[i];
            out[o] = acc;
        }
        if (li + 1 < shapes.size()) {
            std::vector<double> gate(s.out);
            for (std::size_t o = 0; o < s.out; ++o) {
                double g = out[o] > 0.0 ? 1.0 : 0.0;
                if (drop) g = dropout_rng->uniform() < dropout ? 0.0 : g * keep_scale;
                gate[o] = g;
                out[o] *= g;
            }
            if (trace) trace->gates.push_back(std::move(gate));
        }
        current = std::move(out);
    }
    return current;
}

std::vector<double> mlp_backward(const Mlp& net, const MlpTrace& trace, std::span<const double> grad_output,
                                 std::span<double> grad) {
    const auto params = net.params();
    const auto& shapes = net.shapes();
    if (grad.size() != params.size()) throw ContractError("gradient buffer has wrong size");
    if (grad_output.size() != net.output_dim()) throw ContractError("output gradient has wrong dimension");
    if (trace.inputs.size() != shapes.size()) throw ContractError("trace does not match network");

    std::vector<double> g(grad_output.begin(), grad_output.end());
    for (std::size_t li = shapes.size(); li-- > 0;) {
        const auto& s = shapes[li];
        const auto& input = trace.inputs[li];
        std::vector<double> g_in(s.in, 0.0);
        for (std::size_t o = 0; o < s.out; ++o) {
            const double go = g[o];
            grad[s.bias_offset + o] += go;
            if (go == 0.0) continue;
            double* gw = grad.data() + s.weight_offset + o * s.in;
            const double* w = params.data() + s.weight_offset + o * s.in;
            for (std::size_t i = 0; i < s.in; ++i) {
                gw[i] += go * input[i];
                g_in[i] += go * w[i];
            }
        }
        if (li > 0) {
            const auto& gate = trace.gates[li - 1];
            for (std::size_t i = 0; i < s.in; ++i) g_in[i] *= gate[i];
        }
        g = std::move(g_in);
    }
    return g;
}

void adam_update(std::span<double> params, std::span<const double> grads, AdamMoments& moments,
                 const AdamOptions& options, std::size_t step, std::span<const char> decay_mask) {
    if (step < 1) throw ContractError("Adam step index is 1-based");
    if (grads.size() != params.size() || moments.first.size() != params.size())
        throw ContractError("Adam buffers have mismatched sizes");
    if (!decay_mask.empty() && decay_mask.size() != params.size())
        throw ContractError("decay mask has wrong size");
    for (double g : grads)
        if (!std::isfinite(g)) throw TrainingError("non-finite gradient; aborting training");

    const double t = static_cast<double>(step);
    const double c1 = 1.0 - std::pow(options.beta1, t);
    const double c2 = 1.0 - std::pow(options.beta2, t);
    const double lr = options.learning_rate;
    for (std::size_t i = 0; i < params.size(); ++i) {
        double& m = moments.first[i];
        double& v = moments.second[i];
        m = options.beta1 * m + (1.0 - options.beta1) * grads[i];
        v = options.beta2 * v + (1.0 - options.beta2) * grads[i] * grads[i];
        const double m_hat = m / c1;
        const double v_hat = v / c2;
        double p = params[i];
        if (options.weight_decay != 0.0 && (decay_mask.empty() || decay_mask[i])) p -= lr * options.weight_decay * params[i];
        p -= lr * m_hat / (std::sqrt(v_hat) + options.epsilon);
        params[i] = p;
    }
    for (double p : params)
        if (!std::isfinite(p)) throw TrainingError("non-finite parameter after Adam step");
}

}  // namespace mole
