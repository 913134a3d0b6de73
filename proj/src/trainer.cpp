#include "spikecalib/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <span>

#include "spikecalib/error.hpp"

namespace spikecalib {

std::string architecture_name(Architecture arch) {
    return arch == Architecture::mlp_small ? "mlp-small" : "cnn-small";
}

Architecture parse_architecture(const std::string& name) {
    if (name == "mlp-small") return Architecture::mlp_small;
    if (name == "cnn-small") return Architecture::cnn_small;
    throw UsageError("unknown architecture '" + name + "' (valid: mlp-small, cnn-small)");
}

namespace {

Tensor he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    Tensor t(std::move(shape));
    for (double& v : t.storage()) v = gauss(rng);
    return t;
}

BatchNormLayer identity_bn(std::size_t channels, double eps) {
    return {Tensor({channels}, 0.0), Tensor({channels}, std::sqrt(1.0 + eps)), Tensor({channels}, 1.0),
            Tensor({channels}, 0.0)};
}

constexpr double kDefaultEps = 1e-5;

}  // namespace

Network build_architecture(Architecture arch, const Shape& input_shape, std::size_t classes, std::uint64_t seed) {
    if (classes < 2) throw UsageError("build_architecture: need at least 2 classes");
    std::mt19937_64 rng(seed);
    std::vector<Layer> layers;
    auto linear = [&](std::size_t in, std::size_t out) {
        layers.push_back(LinearLayer{he_normal({out, in}, in, rng), Tensor({out})});
    };
    auto conv = [&](std::size_t in, std::size_t out) {
        layers.push_back(Conv2dLayer{he_normal({out, in, 3, 3}, in * 9, rng), Tensor({out}), 1, 1});
    };
    auto bn_relu = [&](std::size_t channels) {
        layers.push_back(identity_bn(channels, kDefaultEps));
        layers.push_back(ReluLayer{});
    };

    if (arch == Architecture::mlp_small) {
        if (input_shape.size() > 1) layers.push_back(FlattenLayer{});
        const auto features = element_count(input_shape);
        linear(features, 32);
        bn_relu(32);
        linear(32, 32);
        bn_relu(32);
        linear(32, classes);
    } else {
        if (input_shape.size() != 3 || input_shape[1] % 4 != 0 || input_shape[2] % 4 != 0 || input_shape[1] < 4 ||
            input_shape[2] < 4)
            throw ShapeError("cnn-small needs C x H x W input with H and W divisible by 4, got " +
                             to_string(input_shape));
        conv(input_shape[0], 8);
        bn_relu(8);
        conv(8, 8);
        bn_relu(8);
        layers.push_back(AvgPool2dLayer{2, 2});
        conv(8, 16);
        bn_relu(16);
        conv(16, 16);
        bn_relu(16);
        layers.push_back(AvgPool2dLayer{2, 2});
        layers.push_back(FlattenLayer{});
        const auto flat = 16 * (input_shape[1] / 4) * (input_shape[2] / 4);
        linear(flat, 64);
        bn_relu(64);
        linear(64, classes);
    }
    return Network(input_shape, std::move(layers));
}

void TrainConfig::validate() const {
    if (epochs < 0) throw UsageError("epochs must be >= 0");
    if (!(learning_rate > 0.0)) throw UsageError("learning rate must be > 0");
    if (momentum < 0.0 || momentum >= 1.0) throw UsageError("momentum must lie in [0, 1)");
    if (weight_decay < 0.0) throw UsageError("weight decay must be >= 0");
    if (batch_size == 0) throw UsageError("batch size must be >= 1");
    if (bn_decay < 0.0 || bn_decay >= 1.0) throw UsageError("batchnorm decay must lie in [0, 1)");
    if (!(bn_eps > 0.0)) throw UsageError("batchnorm eps must be > 0");
}

namespace {

// Softmax cross-entropy; returns the mean loss and writes d(loss)/d(logits).
double cross_entropy(const Tensor& logits, std::span<const std::uint32_t> labels, Tensor* grad) {
    const auto n = logits.dim(0);
    const auto k = logits.dim(1);
    if (grad) *grad = Tensor(logits.shape());
    double loss = 0.0;
    std::vector<double> p(k);
    for (std::size_t r = 0; r < n; ++r) {
        const double* row = logits.storage().data() + r * k;
        const double peak = *std::max_element(row, row + k);
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) z += (p[j] = std::exp(row[j] - peak));
        const auto y = labels[r];
        if (y >= k)
            throw FormatError("label " + std::to_string(y) + " out of range for " + std::to_string(k) + " classes");
        loss += std::log(z) - (row[y] - peak);
        if (grad)
            for (std::size_t j = 0; j < k; ++j)
                (*grad)[r * k + j] = (p[j] / z - (j == y ? 1.0 : 0.0)) / static_cast<double>(n);
    }
    return loss / static_cast<double>(n);
}

// Normalized activations and inverse deviations of a batchnorm layer that used batch statistics.
struct BnCache {
    Tensor xhat;
    std::vector<double> inv_std;
};

// Backpropagates `grad` (gradient at the network output) through every layer. A batchnorm
// layer with a non-empty cache entry is differentiated through its batch statistics.
void backward(const std::vector<Layer>& layers, const Tensor& input, const std::vector<Tensor>& outputs,
              const std::vector<BnCache>& caches, Tensor grad, std::vector<LayerGradients>& grads) {
    grads.assign(layers.size(), {});
    for (std::size_t i = layers.size(); i-- > 0;) {
        const Tensor& in = i == 0 ? input : outputs[i - 1];
        const Layer& layer = layers[i];
        if (const auto* l = std::get_if<LinearLayer>(&layer)) {
            auto g = linear_backward(in, l->weights, grad);
            grads[i] = {std::move(g.weights), std::move(g.bias)};
            grad = std::move(g.input);
        } else if (const auto* c = std::get_if<Conv2dLayer>(&layer)) {
            auto g = conv2d_backward(in, c->weights, grad, c->stride, c->padding);
            grads[i] = {std::move(g.weights), std::move(g.bias)};
            grad = std::move(g.input);
        } else if (const auto* p = std::get_if<AvgPool2dLayer>(&layer)) {
            grad = avgpool2d_backward(grad, in.shape(), p->window, p->stride);
        } else if (std::holds_alternative<ReluLayer>(layer)) {
            for (std::size_t k = 0; k < grad.size(); ++k)
                if (!(in[k] > 0.0)) grad[k] = 0.0;
        } else if (const auto* bn = std::get_if<BatchNormLayer>(&layer); bn && !caches[i].inv_std.empty()) {
            const BnCache& cache = caches[i];
            const auto n = in.dim(0);
            const auto ch = in.dim(1);
            const auto spatial = in.size() / (n * ch);
            const auto m = static_cast<double>(n * spatial);
            Tensor dgamma({ch}), dbeta({ch});
            for (std::size_t c2 = 0; c2 < ch; ++c2) {
                double sum_g = 0.0, sum_gx = 0.0;
                for (std::size_t s = 0; s < n; ++s)
                    for (std::size_t k = 0; k < spatial; ++k) {
                        const auto at = (s * ch + c2) * spatial + k;
                        sum_g += grad[at];
                        sum_gx += grad[at] * cache.xhat[at];
                    }
                dgamma[c2] = sum_gx;
                dbeta[c2] = sum_g;
                const double scale = bn->gamma[c2] * cache.inv_std[c2] / m;
                for (std::size_t s = 0; s < n; ++s)
                    for (std::size_t k = 0; k < spatial; ++k) {
                        const auto at = (s * ch + c2) * spatial + k;
                        grad[at] = scale * (m * grad[at] - sum_g - cache.xhat[at] * sum_gx);
                    }
            }
            grads[i] = {std::move(dgamma), std::move(dbeta)};
        } else if (const auto* bn = std::get_if<BatchNormLayer>(&layer)) {
            const auto n = in.dim(0);
            const auto ch = in.dim(1);
            const auto spatial = (n && ch) ? in.size() / (n * ch) : 0;
            Tensor dgamma({ch}), dbeta({ch});
            for (std::size_t s = 0; s < n; ++s)
                for (std::size_t c2 = 0; c2 < ch; ++c2) {
                    const double inv = 1.0 / bn->stddev[c2];
                    const double scale = bn->gamma[c2] * inv;
                    const auto base = (s * ch + c2) * spatial;
                    for (std::size_t k = 0; k < spatial; ++k) {
                        const double g = grad[base + k];
                        dgamma[c2] += g * (in[base + k] - bn->mean[c2]) * inv;
                        dbeta[c2] += g;
                        grad[base + k] = g * scale;
                    }
                }
            grads[i] = {std::move(dgamma), std::move(dbeta)};
        } else {
            grad = grad.reshaped(in.shape());
        }
    }
}

struct BnStats {
    Tensor mean, var;
};

// Normalizes with the batch statistics (biased variance) and, when `stats` is given, folds
// them into the running statistics (unbiased variance) that the returned network uses.
Tensor batchnorm_train(BatchNormLayer& bn, BnStats* stats, const Tensor& x, double decay, double eps,
                       BnCache& cache) {
    const auto n = x.dim(0);
    const auto ch = x.dim(1);
    const auto spatial = x.size() / (n * ch);
    const auto count = static_cast<double>(n * spatial);
    cache.xhat = Tensor(x.shape());
    cache.inv_std.assign(ch, 0.0);
    Tensor out(x.shape());
    for (std::size_t c = 0; c < ch; ++c) {
        double sum = 0.0;
        for (std::size_t s = 0; s < n; ++s)
            for (std::size_t k = 0; k < spatial; ++k) sum += x[(s * ch + c) * spatial + k];
        const double mean = sum / count;
        double sq = 0.0;
        for (std::size_t s = 0; s < n; ++s)
            for (std::size_t k = 0; k < spatial; ++k) {
                const double d = x[(s * ch + c) * spatial + k] - mean;
                sq += d * d;
            }
        const double inv_std = 1.0 / std::sqrt(sq / count + eps);
        cache.inv_std[c] = inv_std;
        for (std::size_t s = 0; s < n; ++s)
            for (std::size_t k = 0; k < spatial; ++k) {
                const auto at = (s * ch + c) * spatial + k;
                cache.xhat[at] = (x[at] - mean) * inv_std;
                out[at] = bn.gamma[c] * cache.xhat[at] + bn.beta[c];
            }
        if (stats) {
            const double unbiased = count > 1 ? sq / (count - 1) : 0.0;
            stats->mean[c] = decay * stats->mean[c] + (1.0 - decay) * mean;
            stats->var[c] = decay * stats->var[c] + (1.0 - decay) * unbiased;
            bn.mean[c] = stats->mean[c];
            bn.stddev[c] = std::sqrt(stats->var[c] + eps);
        }
    }
    return out;
}

// Forward pass that records every layer output; batchnorm layers use batch statistics.
std::vector<Tensor> training_forward(std::vector<Layer>& layers, const Tensor& x, std::vector<BnStats>* stats,
                                     double decay, double eps, std::vector<BnCache>& caches) {
    std::vector<Tensor> outputs;
    outputs.reserve(layers.size());
    caches.assign(layers.size(), {});
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const Tensor& in = i == 0 ? x : outputs.back();
        if (auto* bn = std::get_if<BatchNormLayer>(&layers[i]))
            outputs.push_back(batchnorm_train(*bn, stats ? &(*stats)[i] : nullptr, in, decay, eps, caches[i]));
        else
            outputs.push_back(apply_layer(layers[i], in));
    }
    return outputs;
}

void require_labels(const Dataset& data, const char* what) {
    if (!data.labeled()) throw FormatError(std::string(what) + " dataset has no labels");
    if (data.labels.size() != data.size())
        throw FormatError(std::string(what) + " dataset has " + std::to_string(data.labels.size()) +
                          " labels for " + std::to_string(data.size()) + " samples");
}

double batched_accuracy(const Network& net, const Dataset& data) {
    if (data.size() == 0) return 0.0;
    return accuracy(predict(net, data.samples), data.labels);
}

}  // namespace

double loss_and_gradients(const Network& net, const Tensor& batch, const std::vector<std::uint32_t>& labels,
                          std::vector<LayerGradients>* grads, BatchNormMode mode) {
    if (labels.size() != batch.dim(0)) throw ShapeError("loss_and_gradients: label count does not match batch");
    std::vector<BnCache> caches(net.size());
    std::vector<Tensor> outputs;
    if (mode == BatchNormMode::batch_statistics) {
        std::vector<Layer> layers = net.layers();
        outputs = training_forward(layers, batch, nullptr, 0.0, kDefaultEps, caches);
    } else {
        outputs = forward(net, batch).outputs;
    }
    if (outputs.back().rank() != 2) throw ShapeError("loss_and_gradients: network output is not N x K");
    Tensor grad;
    const double loss = cross_entropy(outputs.back(), labels, grads ? &grad : nullptr);
    if (grads) backward(net.layers(), batch, outputs, caches, std::move(grad), *grads);
    return loss;
}

TrainResult train_desk_scale(const TrainConfig& cfg, const Dataset& train, const Dataset& validation) {
    cfg.validate();
    require_labels(train, "training");
    if (validation.size() > 0) require_labels(validation, "validation");
    if (train.size() == 0) throw FormatError("training dataset is empty");

    const auto classes =
        std::max<std::size_t>(2, *std::max_element(train.labels.begin(), train.labels.end()) + 1);
    const Network init = build_architecture(cfg.arch, train.samples.sample_shape(), classes, cfg.seed);
    std::vector<Layer> layers = init.layers();
    std::vector<BnStats> stats(layers.size());
    std::vector<LayerGradients> velocity(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (auto* bn = std::get_if<BatchNormLayer>(&layers[i])) {
            const auto c = bn->mean.size();
            stats[i] = {Tensor({c}, 0.0), Tensor({c}, 1.0)};
            bn->stddev = Tensor({c}, std::sqrt(1.0 + cfg.bn_eps));
            velocity[i] = {Tensor({c}), Tensor({c})};
        } else if (is_affine(layers[i])) {
            velocity[i] = {Tensor(affine_weights(layers[i]).shape()), Tensor(affine_bias(layers[i]).shape())};
        }
    }

    TrainResult result;
    std::mt19937_64 shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const auto sample_size = element_count(train.samples.sample_shape());
    std::vector<LayerGradients> grads;
    std::vector<BnCache> caches;
    const auto steps_per_epoch = (order.size() + cfg.batch_size - 1) / cfg.batch_size;
    const auto total_steps = static_cast<double>(steps_per_epoch) * cfg.epochs;
    std::size_t global_step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double epoch_loss = 0.0;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const auto count = std::min(cfg.batch_size, order.size() - start);
            Shape shape = train.samples.shape();
            shape[0] = count;
            Tensor x(shape);
            std::vector<std::uint32_t> y(count);
            for (std::size_t r = 0; r < count; ++r) {
                const auto src = order[start + r];
                std::copy_n(train.samples.storage().data() + src * sample_size, sample_size,
                            x.storage().data() + r * sample_size);
                y[r] = train.labels[src];
            }

            const auto outputs = training_forward(layers, x, &stats, cfg.bn_decay, cfg.bn_eps, caches);
            Tensor grad;
            const double loss = cross_entropy(outputs.back(), y, &grad);
            if (!std::isfinite(loss))
                throw NumericError("training diverged: non-finite loss at epoch " + std::to_string(epoch) +
                                   ", step " + std::to_string(steps) + " (try a smaller learning rate)");
            epoch_loss += loss;
            ++steps;
            backward(layers, x, outputs, caches, std::move(grad), grads);
            const double lr = cfg.cosine_schedule
                                  ? 0.5 * cfg.learning_rate *
                                        (1.0 + std::cos(std::numbers::pi * static_cast<double>(global_step) / total_steps))
                                  : cfg.learning_rate;
            ++global_step;

            for (std::size_t i = 0; i < layers.size(); ++i) {
                if (grads[i].weights.empty()) continue;
                auto step = [&](Tensor& param, Tensor& v, const Tensor& g, double decay) {
                    for (std::size_t k = 0; k < param.size(); ++k) {
                        v[k] = cfg.momentum * v[k] + g[k] + decay * param[k];
                        param[k] -= lr * v[k];
                    }
                };
                // Weight decay applies to affine weights only.
                if (auto* l = std::get_if<LinearLayer>(&layers[i])) {
                    step(l->weights, velocity[i].weights, grads[i].weights, cfg.weight_decay);
                    step(l->bias, velocity[i].bias, grads[i].bias, 0.0);
                } else if (auto* c = std::get_if<Conv2dLayer>(&layers[i])) {
                    step(c->weights, velocity[i].weights, grads[i].weights, cfg.weight_decay);
                    step(c->bias, velocity[i].bias, grads[i].bias, 0.0);
                } else if (auto* bn = std::get_if<BatchNormLayer>(&layers[i])) {
                    step(bn->gamma, velocity[i].weights, grads[i].weights, 0.0);
                    step(bn->beta, velocity[i].bias, grads[i].bias, 0.0);
                }
            }
        }
        result.epoch_loss.push_back(epoch_loss / static_cast<double>(std::max<std::size_t>(steps, 1)));
    }

    result.net = cfg.epochs == 0 ? init : Network(init.input_shape(), std::move(layers));
    result.train_accuracy = batched_accuracy(result.net, train);
    result.validation_accuracy = batched_accuracy(result.net, validation);
    return result;
}

}  // namespace spikecalib
