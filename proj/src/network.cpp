#include "spikecalib/network.hpp"

#include <algorithm>
#include <cmath>

#include "spikecalib/error.hpp"

namespace spikecalib {

namespace {

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

std::string at_layer(std::size_t i) { return "layer " + std::to_string(i) + ": "; }

Tensor batchnorm_apply(const BatchNormLayer& bn, const Tensor& x) {
    if (x.rank() != 2 && x.rank() != 4) throw ShapeError("batchnorm: unsupported input " + to_string(x.shape()));
    const auto n = x.dim(0);
    const auto c = x.dim(1);
    const auto spatial = (n && c) ? x.size() / (n * c) : 0;
    Tensor out = x;
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double scale = bn.gamma[ch] / bn.stddev[ch];
            const double shift = bn.beta[ch] - bn.mean[ch] * scale;
            double* p = out.storage().data() + (s * c + ch) * spatial;
            for (std::size_t i = 0; i < spatial; ++i) p[i] = p[i] * scale + shift;
        }
    return out;
}

}  // namespace

LayerKind kind_of(const Layer& layer) { return static_cast<LayerKind>(layer.index()); }

std::string kind_name(LayerKind kind) {
    switch (kind) {
        case LayerKind::linear: return "linear";
        case LayerKind::conv2d: return "conv2d";
        case LayerKind::avgpool2d: return "avgpool2d";
        case LayerKind::relu: return "relu";
        case LayerKind::batchnorm: return "batchnorm";
        case LayerKind::flatten: return "flatten";
    }
    return "unknown";
}

LayerKind parse_kind(const std::string& name) {
    for (auto k : {LayerKind::linear, LayerKind::conv2d, LayerKind::avgpool2d, LayerKind::relu,
                   LayerKind::batchnorm, LayerKind::flatten})
        if (kind_name(k) == name) return k;
    if (name == "maxpool2d" || name == "maxpool")
        throw FormatError("max pooling is not supported; replace it with avgpool2d before export");
    if (name == "add" || name == "residual" || name == "concat")
        throw FormatError("layer kind '" + name + "' implies a branching topology; only single chains are supported");
    throw FormatError("unknown layer kind '" + name + "'");
}

bool is_affine(const Layer& layer) {
    return std::holds_alternative<LinearLayer>(layer) || std::holds_alternative<Conv2dLayer>(layer);
}

const Tensor& affine_weights(const Layer& layer) {
    if (const auto* l = std::get_if<LinearLayer>(&layer)) return l->weights;
    if (const auto* c = std::get_if<Conv2dLayer>(&layer)) return c->weights;
    throw ShapeError("layer of kind " + kind_name(kind_of(layer)) + " has no weights");
}

const Tensor& affine_bias(const Layer& layer) {
    if (const auto* l = std::get_if<LinearLayer>(&layer)) return l->bias;
    if (const auto* c = std::get_if<Conv2dLayer>(&layer)) return c->bias;
    throw ShapeError("layer of kind " + kind_name(kind_of(layer)) + " has no bias");
}

Tensor apply_layer(const Layer& layer, const Tensor& input) {
    return std::visit(
        overloaded{
            [&](const LinearLayer& l) { return linear_forward(input, l.weights, &l.bias); },
            [&](const Conv2dLayer& c) { return conv2d_forward(input, c.weights, &c.bias, c.stride, c.padding); },
            [&](const AvgPool2dLayer& p) { return avgpool2d(input, p.window, p.stride); },
            [&](const ReluLayer&) { return relu(input); },
            [&](const BatchNormLayer& bn) { return batchnorm_apply(bn, input); },
            [&](const FlattenLayer&) {
                if (input.rank() < 1) throw ShapeError("flatten: rank-0 input");
                const auto n = input.dim(0);
                return input.reshaped({n, n ? input.size() / n : element_count(input.sample_shape())});
            },
        },
        layer);
}

Network::Network(Shape input_shape, std::vector<Layer> layers)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
    validate();
}

void Network::validate() {
    if (input_shape_.empty() || element_count(input_shape_) == 0)
        throw ShapeError("network: invalid input shape " + to_string(input_shape_));
    if (layers_.empty()) throw ShapeError("network: no layers");
    output_shapes_.clear();
    Shape current = input_shape_;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const Layer& layer = layers_[i];
        Shape next = std::visit(
            overloaded{
                [&](const LinearLayer& l) -> Shape {
                    if (current.size() != 1)
                        throw ShapeError(at_layer(i) + "linear expects a flat input, got " + to_string(current));
                    if (l.weights.rank() != 2 || l.weights.dim(1) != current[0])
                        throw ShapeError(at_layer(i) + "linear weights " + to_string(l.weights.shape()) +
                                         " do not accept input " + to_string(current));
                    if (l.bias.shape() != Shape{l.weights.dim(0)})
                        throw ShapeError(at_layer(i) + "bias " + to_string(l.bias.shape()) + " does not match " +
                                         to_string(l.weights.shape()));
                    return {l.weights.dim(0)};
                },
                [&](const Conv2dLayer& c) -> Shape {
                    if (current.size() != 3)
                        throw ShapeError(at_layer(i) + "conv2d expects C x H x W input, got " + to_string(current));
                    if (c.bias.shape() != Shape{c.weights.rank() ? c.weights.dim(0) : 0})
                        throw ShapeError(at_layer(i) + "bias " + to_string(c.bias.shape()) + " does not match " +
                                         to_string(c.weights.shape()));
                    try {
                        // Geometry check on an empty batch.
                        Tensor empty(Shape{0, current[0], current[1], current[2]});
                        auto out = conv2d_forward(empty, c.weights, &c.bias, c.stride, c.padding);
                        return out.sample_shape();
                    } catch (const ShapeError& e) {
                        throw ShapeError(at_layer(i) + e.what());
                    }
                },
                [&](const AvgPool2dLayer& p) -> Shape {
                    if (current.size() != 3)
                        throw ShapeError(at_layer(i) + "avgpool2d expects C x H x W input, got " + to_string(current));
                    if (p.window < 1 || p.stride < 1)
                        throw ShapeError(at_layer(i) + "avgpool2d window and stride must be positive");
                    const auto w = static_cast<std::size_t>(p.window);
                    if (w > current[1] || w > current[2])
                        throw ShapeError(at_layer(i) + "avgpool2d window " + std::to_string(p.window) +
                                         " larger than spatial extent " + to_string(current));
                    const auto s = static_cast<std::size_t>(p.stride);
                    return {current[0], (current[1] - w) / s + 1, (current[2] - w) / s + 1};
                },
                [&](const ReluLayer&) -> Shape { return current; },
                [&](const BatchNormLayer& bn) -> Shape {
                    const auto c = current[0];
                    for (const Tensor* t : {&bn.mean, &bn.stddev, &bn.gamma, &bn.beta})
                        if (t->shape() != Shape{c})
                            throw ShapeError(at_layer(i) + "batchnorm parameter " + to_string(t->shape()) +
                                             " does not match " + std::to_string(c) + " channels");
                    for (double s : bn.stddev.storage())
                        if (!(s > 0.0)) throw ShapeError(at_layer(i) + "batchnorm stddev must be strictly positive");
                    return current;
                },
                [&](const FlattenLayer&) -> Shape { return {element_count(current)}; },
            },
            layer);
        if (std::holds_alternative<ReluLayer>(layer)) {
            const bool after_affine = i >= 1 && is_affine(layers_[i - 1]);
            const bool after_bn = i >= 2 && std::holds_alternative<BatchNormLayer>(layers_[i - 1]) &&
                                  is_affine(layers_[i - 2]);
            if (!after_affine && !after_bn)
                throw ShapeError(at_layer(i) + "relu must directly follow a linear/conv2d layer (or its batchnorm)");
        }
        output_shapes_.push_back(next);
        current = std::move(next);
    }
}

const Shape& Network::layer_input_shape(std::size_t i) const {
    return i == 0 ? input_shape_ : output_shapes_.at(i - 1);
}

Shape Network::output_shape() const { return output_shapes_.back(); }

bool Network::has_batchnorm() const {
    return std::any_of(layers_.begin(), layers_.end(),
                       [](const Layer& l) { return std::holds_alternative<BatchNormLayer>(l); });
}

std::vector<std::size_t> Network::relu_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < layers_.size(); ++i)
        if (std::holds_alternative<ReluLayer>(layers_[i])) out.push_back(i);
    return out;
}

std::size_t Network::spiking_affine_index(std::size_t k) const {
    const auto relus = relu_indices();
    if (k >= relus.size()) throw ShapeError("network: no spiking position " + std::to_string(k));
    const auto r = relus[k];
    if (!is_affine(layers_[r - 1]))
        throw ShapeError(at_layer(r) + "relu is not directly preceded by an affine layer; fold batchnorm first");
    return r - 1;
}

std::size_t Network::spiking_channels(std::size_t k) const {
    const auto relus = relu_indices();
    if (k >= relus.size()) throw ShapeError("network: no spiking position " + std::to_string(k));
    return output_shapes_[relus[k]][0];
}

void Network::set_affine(std::size_t index, Tensor weights, Tensor bias) {
    Layer& layer = layers_.at(index);
    if (!is_affine(layer)) throw ShapeError(at_layer(index) + "not an affine layer");
    if (weights.shape() != affine_weights(layer).shape() || bias.shape() != affine_bias(layer).shape())
        throw ShapeError(at_layer(index) + "parameter shapes may not change");
    if (auto* l = std::get_if<LinearLayer>(&layer)) {
        l->weights = std::move(weights);
        l->bias = std::move(bias);
    } else {
        auto& c = std::get<Conv2dLayer>(layer);
        c.weights = std::move(weights);
        c.bias = std::move(bias);
    }
}

bool Network::operator==(const Network& other) const {
    if (input_shape_ != other.input_shape_ || layers_.size() != other.layers_.size()) return false;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const Layer& a = layers_[i];
        const Layer& b = other.layers_[i];
        if (a.index() != b.index()) return false;
        const bool same = std::visit(
            overloaded{
                [&](const LinearLayer& x) {
                    const auto& y = std::get<LinearLayer>(b);
                    return x.weights == y.weights && x.bias == y.bias;
                },
                [&](const Conv2dLayer& x) {
                    const auto& y = std::get<Conv2dLayer>(b);
                    return x.weights == y.weights && x.bias == y.bias && x.stride == y.stride &&
                           x.padding == y.padding;
                },
                [&](const AvgPool2dLayer& x) {
                    const auto& y = std::get<AvgPool2dLayer>(b);
                    return x.window == y.window && x.stride == y.stride;
                },
                [&](const ReluLayer&) { return true; },
                [&](const BatchNormLayer& x) {
                    const auto& y = std::get<BatchNormLayer>(b);
                    return x.mean == y.mean && x.stddev == y.stddev && x.gamma == y.gamma && x.beta == y.beta;
                },
                [&](const FlattenLayer&) { return true; },
            },
            a);
        if (!same) return false;
    }
    return true;
}

ActivationTrace forward(const Network& net, const Tensor& batch) {
    if (batch.rank() != net.input_shape().size() + 1 || batch.sample_shape() != net.input_shape())
        throw ShapeError("forward: batch " + to_string(batch.shape()) + " does not match input shape " +
                         to_string(net.input_shape()));
    ActivationTrace trace;
    trace.input = batch;
    trace.outputs.reserve(net.size());
    const Tensor* current = &trace.input;
    for (std::size_t i = 0; i < net.size(); ++i) {
        try {
            trace.outputs.push_back(apply_layer(net.layer(i), *current));
        } catch (const ShapeError& e) {
            throw ShapeError(at_layer(i) + e.what());
        }
        current = &trace.outputs.back();
    }
    return trace;
}

Tensor predict(const Network& net, const Tensor& batch) {
    if (batch.rank() != net.input_shape().size() + 1 || batch.sample_shape() != net.input_shape())
        throw ShapeError("predict: batch " + to_string(batch.shape()) + " does not match input shape " +
                         to_string(net.input_shape()));
    Tensor current = batch;
    for (std::size_t i = 0; i < net.size(); ++i) current = apply_layer(net.layer(i), current);
    return current;
}

Network fold_bn(const Network& net) {
    std::vector<Layer> folded;
    folded.reserve(net.size());
    for (std::size_t i = 0; i < net.size(); ++i) {
        const Layer& layer = net.layer(i);
        const auto* bn = std::get_if<BatchNormLayer>(&layer);
        if (!bn) {
            folded.push_back(layer);
            continue;
        }
        if (folded.empty() || !is_affine(folded.back()))
            throw ShapeError(at_layer(i) + "batchnorm has no preceding linear/conv2d layer to fold into");
        Layer& target = folded.back();
        Tensor weights = affine_weights(target);
        Tensor bias = affine_bias(target);
        const auto out_channels = weights.dim(0);
        const auto per_channel = weights.size() / out_channels;
        for (std::size_t c = 0; c < out_channels; ++c) {
            const double scale = bn->gamma[c] / bn->stddev[c];
            for (std::size_t k = 0; k < per_channel; ++k) weights[c * per_channel + k] *= scale;
            bias[c] = bn->beta[c] + (bias[c] - bn->mean[c]) * scale;
        }
        if (auto* l = std::get_if<LinearLayer>(&target)) {
            l->weights = std::move(weights);
            l->bias = std::move(bias);
        } else {
            auto& c = std::get<Conv2dLayer>(target);
            c.weights = std::move(weights);
            c.bias = std::move(bias);
        }
    }
    return Network(net.input_shape(), std::move(folded));
}

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
    if (logits.rank() != 2) throw ShapeError("argmax: expected N x K logits, got " + to_string(logits.shape()));
    std::vector<std::size_t> out(logits.dim(0));
    const auto k = logits.dim(1);
    for (std::size_t r = 0; r < out.size(); ++r) {
        const double* row = logits.storage().data() + r * k;
        out[r] = static_cast<std::size_t>(std::max_element(row, row + k) - row);
    }
    return out;
}

double accuracy(const Tensor& logits, const std::vector<std::uint32_t>& labels) {
    const auto predicted = argmax_rows(logits);
    if (predicted.size() != labels.size())
        throw ShapeError("accuracy: " + std::to_string(predicted.size()) + " predictions for " +
                         std::to_string(labels.size()) + " labels");
    if (labels.empty()) throw ShapeError("accuracy: empty dataset");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) correct += predicted[i] == labels[i];
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

}  // namespace spikecalib
