#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "spikecalib/tensor.hpp"

namespace spikecalib {

struct LinearLayer {
    Tensor weights;  // out x in
    Tensor bias;     // out
};

struct Conv2dLayer {
    Tensor weights;  // out x in x k x k
    Tensor bias;     // out
    int stride = 1;
    int padding = 0;
};

struct AvgPool2dLayer {
    int window = 2;
    int stride = 2;
};

struct ReluLayer {};

// Per-channel affine normalization; stddev already includes the epsilon term.
struct BatchNormLayer {
    Tensor mean;
    Tensor stddev;
    Tensor gamma;
    Tensor beta;
};

struct FlattenLayer {};

using Layer = std::variant<LinearLayer, Conv2dLayer, AvgPool2dLayer, ReluLayer, BatchNormLayer, FlattenLayer>;

enum class LayerKind { linear, conv2d, avgpool2d, relu, batchnorm, flatten };

LayerKind kind_of(const Layer& layer);
std::string kind_name(LayerKind kind);
LayerKind parse_kind(const std::string& name);  // rejects maxpool and residual kinds with a message
bool is_affine(const Layer& layer);

const Tensor& affine_weights(const Layer& layer);
const Tensor& affine_bias(const Layer& layer);

// Applies one layer to a batch.
Tensor apply_layer(const Layer& layer, const Tensor& input);

// A single-chain feed-forward network. Shapes are validated on construction and on
// every parameter update, so a Network value always composes.
class Network {
public:
    Network() = default;
    Network(Shape input_shape, std::vector<Layer> layers);

    const Shape& input_shape() const noexcept { return input_shape_; }
    const std::vector<Layer>& layers() const noexcept { return layers_; }
    std::size_t size() const noexcept { return layers_.size(); }
    const Layer& layer(std::size_t i) const { return layers_.at(i); }

    // Per-sample output shape of layer i.
    const Shape& output_shape(std::size_t i) const { return output_shapes_.at(i); }
    // Per-sample input shape of layer i.
    const Shape& layer_input_shape(std::size_t i) const;
    Shape output_shape() const;

    bool has_batchnorm() const;

    // Indices of ReLU layers, in order. Each is one spiking position of the converted network.
    std::vector<std::size_t> relu_indices() const;
    // Index of the affine layer feeding ReLU number k (requires a BN-free network).
    std::size_t spiking_affine_index(std::size_t k) const;
    // Channel count at ReLU position k.
    std::size_t spiking_channels(std::size_t k) const;

    // Replace the parameters of an affine layer; shapes must not change.
    void set_affine(std::size_t index, Tensor weights, Tensor bias);

    bool operator==(const Network& other) const;

private:
    void validate();

    Shape input_shape_;
    std::vector<Layer> layers_;
    std::vector<Shape> output_shapes_;
};

// Per-layer intermediate tensors: outputs[i] is the output of layer i for the batch.
// For a ReLU at index r, outputs[r - 1] is its pre-activation and outputs[r] its activation.
struct ActivationTrace {
    Tensor input;
    std::vector<Tensor> outputs;

    const Tensor& final_output() const { return outputs.back(); }
};

ActivationTrace forward(const Network& net, const Tensor& batch);
// Final output only, without keeping intermediates.
Tensor predict(const Network& net, const Tensor& batch);

// Folds every batchnorm into the affine layer before it.
Network fold_bn(const Network& net);

std::vector<std::size_t> argmax_rows(const Tensor& logits);
double accuracy(const Tensor& logits, const std::vector<std::uint32_t>& labels);

}  // namespace spikecalib
