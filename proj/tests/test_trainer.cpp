#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "spikecalib/error.hpp"
#include "spikecalib/trainer.hpp"

using namespace spikecalib;
using namespace testing;

namespace {

double reference_cross_entropy(const Tensor& logits, const std::vector<std::uint32_t>& labels) {
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) z += std::exp(logits[r * k + j]);
        total += std::log(z) - logits[r * k + labels[r]];
    }
    return total / double(n);
}

// Returns the parameter tensor `which` (0 weights/gamma, 1 bias/beta) of layer i, or null.
Tensor* parameter(Layer& layer, int which) {
    if (auto* l = std::get_if<LinearLayer>(&layer)) return which ? &l->bias : &l->weights;
    if (auto* c = std::get_if<Conv2dLayer>(&layer)) return which ? &c->bias : &c->weights;
    if (auto* b = std::get_if<BatchNormLayer>(&layer)) return which ? &b->beta : &b->gamma;
    return nullptr;
}

Network perturbed(const Network& net, std::size_t i, int which, std::size_t e, double delta) {
    std::vector<Layer> layers = net.layers();
    (*parameter(layers[i], which))[e] += delta;
    return Network(net.input_shape(), std::move(layers));
}

std::vector<std::uint32_t> random_labels(std::size_t n, std::size_t k, std::mt19937_64& rng) {
    std::vector<std::uint32_t> y(n);
    for (auto& v : y) v = std::uint32_t(rng() % k);
    return y;
}

void check_gradients(const Network& net, const Tensor& x, const std::vector<std::uint32_t>& y, BatchNormMode mode) {
    std::vector<LayerGradients> grads;
    loss_and_gradients(net, x, y, &grads, mode);
    REQUIRE(grads.size() == net.size());
    const double h = 1e-6;
    double worst = 0.0;
    for (std::size_t i = 0; i < net.size(); ++i) {
        Layer copy = net.layer(i);
        for (int which = 0; which < 2; ++which) {
            const Tensor* p = parameter(copy, which);
            if (!p) {
                CHECK(grads[i].weights.size() == 0);
                continue;
            }
            const Tensor& g = which ? grads[i].bias : grads[i].weights;
            REQUIRE(g.shape() == p->shape());
            for (std::size_t e = 0; e < p->size(); ++e) {
                const double up = loss_and_gradients(perturbed(net, i, which, e, h), x, y, nullptr, mode);
                const double down = loss_and_gradients(perturbed(net, i, which, e, -h), x, y, nullptr, mode);
                worst = std::max(worst, std::abs((up - down) / (2 * h) - g[e]));
            }
        }
    }
    CHECK(worst < 1e-4);
}

}  // namespace

TEST_CASE("architecture names") {
    CHECK(parse_architecture("mlp-small") == Architecture::mlp_small);
    CHECK(parse_architecture("cnn-small") == Architecture::cnn_small);
    CHECK(architecture_name(Architecture::cnn_small) == "cnn-small");
    CHECK_THROWS_WITH_AS(parse_architecture("resnet"), doctest::Contains("mlp-small, cnn-small"), UsageError);
}

TEST_CASE("architectures have the documented layout") {
    const Network mlp = build_architecture(Architecture::mlp_small, {4}, 3, 0);
    CHECK(mlp.size() == 7);
    CHECK(mlp.output_shape() == Shape{3});
    CHECK(mlp.relu_indices().size() == 2);
    const Network mlp_img = build_architecture(Architecture::mlp_small, {1, 16, 16}, 10, 0);
    CHECK(kind_of(mlp_img.layer(0)) == LayerKind::flatten);
    const Network cnn = build_architecture(Architecture::cnn_small, {1, 16, 16}, 10, 0);
    CHECK(cnn.relu_indices().size() == 5);
    CHECK(cnn.output_shape() == Shape{10});
    CHECK(cnn.has_batchnorm());
    CHECK(build_architecture(Architecture::cnn_small, {1, 16, 16}, 10, 0) == cnn);
    CHECK_FALSE(build_architecture(Architecture::cnn_small, {1, 16, 16}, 10, 1) == cnn);
    CHECK_THROWS_AS(build_architecture(Architecture::cnn_small, {1, 10, 10}, 10, 0), ShapeError);
    CHECK_THROWS_AS(build_architecture(Architecture::cnn_small, {16}, 10, 0), ShapeError);
    CHECK_THROWS_AS(build_architecture(Architecture::mlp_small, {4}, 1, 0), UsageError);
}

TEST_CASE("cross-entropy gradients match finite differences") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 6; ++trial) {
        const Network net = random_mlp({4, 6, 5, 3}, rng, trial % 2 == 1);
        const Tensor x = random_tensor({8, 4}, rng);
        const auto y = random_labels(8, 3, rng);
        CHECK(loss_and_gradients(net, x, y, nullptr) == doctest::Approx(reference_cross_entropy(predict(net, x), y)));
        check_gradients(net, x, y, BatchNormMode::running_statistics);
        if (net.has_batchnorm()) check_gradients(net, x, y, BatchNormMode::batch_statistics);
    }
    const Network cnn = random_cnn(rng, true, 1, 4);
    const Tensor x = random_tensor({3, 1, 4, 4}, rng);
    const auto y = random_labels(3, 3, rng);
    check_gradients(cnn, x, y, BatchNormMode::running_statistics);
    check_gradients(cnn, x, y, BatchNormMode::batch_statistics);
}

TEST_CASE("batch-statistics loss normalizes with the batch's own biased variance") {
    std::mt19937_64 rng(12);
    const Network net = random_mlp({3, 5, 2}, rng, true);
    const Tensor x = random_tensor({10, 3}, rng);
    const auto y = random_labels(10, 2, rng);
    const Tensor z = predict(Network({3}, {net.layer(0)}), x);
    std::vector<Layer> layers = net.layers();
    auto& bn = std::get<BatchNormLayer>(layers[1]);
    for (std::size_t c = 0; c < 5; ++c) {
        double m = 0.0, v = 0.0;
        for (std::size_t n = 0; n < 10; ++n) m += z[n * 5 + c] / 10.0;
        for (std::size_t n = 0; n < 10; ++n) v += std::pow(z[n * 5 + c] - m, 2) / 10.0;
        bn.mean[c] = m;
        bn.stddev[c] = std::sqrt(v + 1e-5);
    }
    const Network with_batch_stats({3}, layers);
    CHECK(loss_and_gradients(net, x, y, nullptr, BatchNormMode::batch_statistics) ==
          doctest::Approx(reference_cross_entropy(predict(with_batch_stats, x), y)).epsilon(1e-10));
    CHECK_THROWS_AS(loss_and_gradients(net, x, {0, 1}, nullptr), ShapeError);
}

TEST_CASE("blobs are learned by the small MLP") {
    const Dataset train = make_blobs(2000, 100);
    const Dataset val = make_blobs(500, 200);
    TrainConfig cfg;
    cfg.epochs = 10;
    const TrainResult r = train_desk_scale(cfg, train, val);
    CHECK(r.validation_accuracy >= 0.99);
    CHECK(r.validation_accuracy == accuracy(predict(r.net, val.samples), val.labels));
    REQUIRE(r.epoch_loss.size() == 10);
    CHECK(r.epoch_loss.back() < r.epoch_loss.front());

    const TrainResult again = train_desk_scale(cfg, train, val);
    CHECK(again.net == r.net);
    cfg.seed = 1;
    CHECK_FALSE(train_desk_scale(cfg, train, val).net == r.net);
}

TEST_CASE("zero epochs returns the initialization") {
    const Dataset train = make_blobs(64, 1);
    TrainConfig cfg;
    cfg.epochs = 0;
    cfg.seed = 5;
    const TrainResult r = train_desk_scale(cfg, train, {});
    CHECK(r.epoch_loss.empty());
    CHECK(r.net == build_architecture(Architecture::mlp_small, {4}, 2, 5));
}

TEST_CASE("training input validation") {
    TrainConfig cfg;
    Dataset unlabeled;
    unlabeled.samples = make_blobs(8, 0).samples;
    CHECK_THROWS_AS(train_desk_scale(cfg, unlabeled, {}), FormatError);
    CHECK_THROWS_AS(train_desk_scale(cfg, make_blobs(8, 0), unlabeled), FormatError);
    Dataset empty;
    empty.samples = Tensor({0, 4});
    CHECK_THROWS_AS(train_desk_scale(cfg, empty, {}), FormatError);
    cfg.learning_rate = 0.0;
    CHECK_THROWS_AS(cfg.validate(), UsageError);
    cfg = {};
    cfg.momentum = 1.0;
    CHECK_THROWS_AS(cfg.validate(), UsageError);
    cfg = {};
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), UsageError);
    cfg = {};
    cfg.epochs = -1;
    CHECK_THROWS_AS(cfg.validate(), UsageError);
}
