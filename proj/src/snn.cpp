#include "spikecalib/snn.hpp"

#include <algorithm>
#include <variant>

#include "spikecalib/error.hpp"

namespace spikecalib {

namespace {

bool is_pass_through(const Layer& layer) {
    return std::holds_alternative<AvgPool2dLayer>(layer) || std::holds_alternative<FlattenLayer>(layer);
}


// Channel of input feature i for the affine layer fed by a position with `channels` channels.
std::size_t input_channel(const Layer& affine, std::size_t i, std::size_t channels) {
    const Tensor& w = affine_weights(affine);
    if (std::holds_alternative<Conv2dLayer>(affine)) {
        const auto kk = w.dim(2) * w.dim(3);
        return (i / kk) % w.dim(1);
    }
    const auto block = w.dim(1) / channels;
    return i / block;
}

Tensor scaled_potential(const Tensor& v0, const Tensor& threshold, bool divide) {
    if (v0.empty()) return v0;
    Tensor out = v0;
    const auto channels = v0.dim(0);
    const auto block = v0.size() / channels;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = channel_value(threshold, i / block);
        out[i] = divide ? out[i] / v : out[i] * v;
    }
    return out;
}

}  // namespace

std::string round_mode_name(RoundMode mode) { return mode == RoundMode::floor ? "floor" : "round"; }

RoundMode parse_round_mode(const std::string& name) {
    if (name == "floor") return RoundMode::floor;
    if (name == "round") return RoundMode::round;
    throw UsageError("unknown round mode '" + name + "' (valid: floor, round)");
}

void SpikingConfig::validate(const Network& net) const {
    if (time_steps < 1) throw UsageError("spiking config: time steps must be >= 1, got " + std::to_string(time_steps));
    const auto relus = net.relu_indices();
    if (thresholds.size() != relus.size())
        throw ShapeError("spiking config: " + std::to_string(thresholds.size()) + " thresholds for " +
                         std::to_string(relus.size()) + " spiking layers");
    for (std::size_t k = 0; k < relus.size(); ++k) {
        const auto channels = net.spiking_channels(k);
        const Tensor& v = thresholds[k];
        if (!(v.size() == 1 || v.size() == channels))
            throw ShapeError("spiking config: threshold for position " + std::to_string(k) + " has " +
                             std::to_string(v.size()) + " entries, layer has " + std::to_string(channels) +
                             " channels");
        for (double x : v.storage())
            if (!(x > 0.0))
                throw NumericError("spiking config: non-positive threshold at position " + std::to_string(k));
    }
    if (!initial_potentials.empty()) {
        if (initial_potentials.size() != relus.size())
            throw ShapeError("spiking config: initial potentials do not cover every spiking layer");
        for (std::size_t k = 0; k < relus.size(); ++k) {
            const Tensor& v0 = initial_potentials[k];
            if (!v0.empty() && v0.shape() != net.output_shape(relus[k]))
                throw ShapeError("spiking config: initial potential " + to_string(v0.shape()) + " at position " +
                                 std::to_string(k) + " does not match layer output " +
                                 to_string(net.output_shape(relus[k])));
        }
    }
}

Tensor SimulationTrace::average_output(std::size_t k) const {
    Tensor out = spike_counts.at(k);
    const Tensor& v = thresholds.at(k);
    const auto n = out.dim(0);
    const auto c = out.dim(1);
    const auto block = n && c ? out.size() / (n * c) : 0;
    const double inv_t = 1.0 / static_cast<double>(time_steps);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= channel_value(v, (i / block) % c) * inv_t;
    return out;
}

Tensor propagate_to_next_affine(const Network& net, std::size_t position, const Tensor& activation) {
    const auto relus = net.relu_indices();
    Tensor current = activation;
    for (std::size_t i = relus.at(position) + 1; i < net.size() && is_pass_through(net.layer(i)); ++i)
        current = apply_layer(net.layer(i), current);
    return current;
}

SimulationTrace simulate(const Network& net, const SpikingConfig& cfg, const Tensor& batch,
                         const SimulationOptions& options) {
    if (net.has_batchnorm()) throw ShapeError("simulate: fold batchnorm layers before conversion");
    cfg.validate(net);
    if (batch.rank() != net.input_shape().size() + 1 || batch.sample_shape() != net.input_shape())
        throw ShapeError("simulate: batch " + to_string(batch.shape()) + " does not match input shape " +
                         to_string(net.input_shape()));

    const auto relus = net.relu_indices();
    const auto positions = relus.size();
    SimulationTrace trace;
    trace.time_steps = cfg.time_steps;
    trace.thresholds = cfg.thresholds;
    if (positions == 0) {
        trace.output = predict(net, batch);
        return trace;
    }
    const std::size_t last = std::min(options.last_position.value_or(positions - 1), positions - 1);
    const auto n = batch.dim(0);

    // Everything before the first ReLU sees the same analog input at every step.
    Tensor drive0 = batch;
    for (std::size_t i = 0; i < relus[0]; ++i) drive0 = apply_layer(net.layer(i), drive0);

    std::vector<Tensor> potential(last + 1);
    trace.spike_counts.resize(last + 1);
    trace.spikes.resize(options.record_spikes ? last + 1 : 0);
    for (std::size_t k = 0; k <= last; ++k) {
        Shape shape = net.output_shape(relus[k]);
        shape.insert(shape.begin(), n);
        potential[k] = Tensor(shape);
        trace.spike_counts[k] = Tensor(shape);
        if (!cfg.initial_potentials.empty() && !cfg.initial_potentials[k].empty()) {
            const Tensor& v0 = cfg.initial_potentials[k];
            for (std::size_t s = 0; s < n; ++s)
                std::copy(v0.storage().begin(), v0.storage().end(),
                          potential[k].storage().begin() + static_cast<long>(s * v0.size()));
        }
    }

    for (int t = 0; t < cfg.time_steps; ++t) {
        Tensor spikes;
        for (std::size_t k = 0; k <= last; ++k) {
            Tensor drive;
            if (k == 0) {
                drive = drive0;
            } else {
                drive = std::move(spikes);
                for (std::size_t i = relus[k - 1] + 1; i < relus[k]; ++i) drive = apply_layer(net.layer(i), drive);
            }
            Tensor& v = potential[k];
            Tensor& m = trace.spike_counts[k];
            const Tensor& threshold = cfg.thresholds[k];
            const auto c = v.dim(1);
            const auto block = v.size() / (n * c);
            spikes = Tensor(v.shape());
            for (std::size_t i = 0; i < v.size(); ++i) {
                const double vth = channel_value(threshold, (i / block) % c);
                const double temp = v[i] + drive[i];
                if (temp >= vth) {
                    spikes[i] = vth;
                    m[i] += 1.0;
                    v[i] = temp - vth;
                } else {
                    v[i] = temp;
                }
            }
            if (options.record_spikes) trace.spikes[k].push_back(spikes);
        }
    }

    trace.terminal_potentials = std::move(potential);
    trace.potential_violations.assign(last + 1, 0);
    for (std::size_t k = 0; k <= last; ++k) {
        const Tensor& v = trace.terminal_potentials[k];
        const auto c = v.dim(1);
        const auto block = v.size() / (n * c);
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double vth = channel_value(cfg.thresholds[k], (i / block) % c);
            if (v[i] < 0.0 || v[i] >= vth) ++trace.potential_violations[k];
        }
    }

    if (last == positions - 1) {
        // The layers after the last ReLU are affine, so integrating their input over T and
        // dividing by T equals applying them to the time-averaged spikes.
        Tensor current = trace.average_output(last);
        for (std::size_t i = relus[last] + 1; i < net.size(); ++i) current = apply_layer(net.layer(i), current);
        trace.output = std::move(current);
    }
    return trace;
}

NormalizedSnn normalize_weights(const Network& net, const SpikingConfig& cfg) {
    if (net.has_batchnorm()) throw ShapeError("normalize_weights: fold batchnorm layers first");
    cfg.validate(net);
    const auto relus = net.relu_indices();
    std::vector<Layer> layers = net.layers();
    NormalizedSnn out{net, cfg};

    auto rescale = [&](std::size_t affine_index, const Tensor* upstream, std::size_t upstream_channels,
                       const Tensor* own) {
        Layer& layer = layers[affine_index];
        Tensor w = affine_weights(layer);
        Tensor b = affine_bias(layer);
        const auto outputs = w.dim(0);
        const auto fan_in = w.size() / outputs;
        if (upstream && upstream->size() > 1 && std::holds_alternative<LinearLayer>(layer) &&
            w.dim(1) % upstream_channels != 0)
            throw ShapeError("normalize_weights: per-channel thresholds cannot be absorbed into layer " +
                             std::to_string(affine_index));
        for (std::size_t o = 0; o < outputs; ++o) {
            const double own_v = own ? channel_value(*own, o) : 1.0;
            for (std::size_t i = 0; i < fan_in; ++i) {
                const double up = upstream ? channel_value(*upstream, input_channel(layer, i, upstream_channels)) : 1.0;
                w[o * fan_in + i] *= up / own_v;
            }
            b[o] /= own_v;
        }
        if (auto* l = std::get_if<LinearLayer>(&layer)) {
            l->weights = std::move(w);
            l->bias = std::move(b);
        } else {
            auto& cv = std::get<Conv2dLayer>(layer);
            cv.weights = std::move(w);
            cv.bias = std::move(b);
        }
    };

    for (std::size_t k = 0; k < relus.size(); ++k) {
        const auto affine = net.spiking_affine_index(k);
        const Tensor* upstream = k == 0 ? nullptr : &cfg.thresholds[k - 1];
        const std::size_t upstream_channels = k == 0 ? 1 : net.spiking_channels(k - 1);
        for (std::size_t i = (k == 0 ? 0 : relus[k - 1] + 1); i < affine; ++i)
            if (!is_pass_through(layers[i]))
                throw ShapeError("normalize_weights: layer " + std::to_string(i) + " sits between spiking layers");
        rescale(affine, upstream, upstream_channels, &cfg.thresholds[k]);
        out.config.thresholds[k] = Tensor(cfg.thresholds[k].shape(), 1.0);
        if (!cfg.initial_potentials.empty())
            out.config.initial_potentials[k] = scaled_potential(cfg.initial_potentials[k], cfg.thresholds[k], true);
    }
    if (!relus.empty()) {
        // The first affine layer after the last ReLU receives unit spikes now.
        for (std::size_t i = relus.back() + 1; i < layers.size(); ++i) {
            if (is_affine(layers[i])) {
                rescale(i, &cfg.thresholds.back(), net.spiking_channels(relus.size() - 1), nullptr);
                break;
            }
        }
    }
    out.net = Network(net.input_shape(), std::move(layers));
    return out;
}

Network apply_round_bias_shift(const Network& net, const SpikingConfig& cfg) {
    cfg.validate(net);
    Network out = net;
    const double inv_2t = 1.0 / (2.0 * cfg.time_steps);
    for (std::size_t k = 0; k < cfg.thresholds.size(); ++k) {
        const auto index = net.spiking_affine_index(k);
        Tensor bias = affine_bias(net.layer(index));
        for (std::size_t o = 0; o < bias.size(); ++o) bias[o] += channel_value(cfg.thresholds[k], o) * inv_2t;
        out.set_affine(index, affine_weights(net.layer(index)), std::move(bias));
    }
    return out;
}

std::vector<double> firing_rates(const SimulationTrace& trace) {
    std::vector<double> rates;
    rates.reserve(trace.spike_counts.size());
    for (const Tensor& m : trace.spike_counts) {
        const double neurons = static_cast<double>(m.size());
        rates.push_back(neurons > 0 ? m.sum() / (neurons * trace.time_steps) : 0.0);
    }
    return rates;
}

}  // namespace spikecalib
