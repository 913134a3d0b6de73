#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spikecalib/datasets.hpp"
#include "spikecalib/network.hpp"

namespace spikecalib {

enum class Architecture { mlp_small, cnn_small };

std::string architecture_name(Architecture arch);
Architecture parse_architecture(const std::string& name);

// Randomly initialized network (He-normal weights, zero biases, identity batchnorm).
// mlp-small: [flatten] fc32 bn relu fc32 bn relu fc<classes>
// cnn-small: c8 bn relu c8 bn relu pool c16 bn relu c16 bn relu pool flatten fc64 bn relu fc<classes>
// (3x3 convolutions with padding 1; the input extent must be divisible by 4).
Network build_architecture(Architecture arch, const Shape& input_shape, std::size_t classes, std::uint64_t seed);

struct TrainConfig {
    Architecture arch = Architecture::mlp_small;
    int epochs = 10;
    double learning_rate = 0.05;
    double momentum = 0.9;
    double weight_decay = 0.0;
    // Cosine decay of the learning rate to zero over all steps; constant when false.
    bool cosine_schedule = false;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
    double bn_decay = 0.9;
    double bn_eps = 1e-5;

    void validate() const;
};

struct TrainResult {
    Network net;
    double train_accuracy = 0.0;
    double validation_accuracy = 0.0;
    std::vector<double> epoch_loss;
};

// SGD with momentum on softmax cross-entropy. During training batchnorm layers normalize with
// the batch statistics; the returned network carries running statistics accumulated by an
// exponential moving average with decay `bn_decay`.
TrainResult train_desk_scale(const TrainConfig& cfg, const Dataset& train, const Dataset& validation);

// Parameter gradients of one layer; empty tensors for parameter-free layers.
struct LayerGradients {
    Tensor weights;  // affine weights, or batchnorm gamma
    Tensor bias;     // affine bias, or batchnorm beta
};

enum class BatchNormMode { running_statistics, batch_statistics };

// Mean cross-entropy of `net` on a labeled batch and its gradients. With batch_statistics the
// batchnorm layers normalize with the batch's own statistics, as in a training step.
// `grads` is resized to net.size() when given.
double loss_and_gradients(const Network& net, const Tensor& batch, const std::vector<std::uint32_t>& labels,
                          std::vector<LayerGradients>* grads,
                          BatchNormMode mode = BatchNormMode::running_statistics);

}  // namespace spikecalib
