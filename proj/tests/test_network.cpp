#include <doctest.h>

#include "helpers.hpp"
#include "spikecalib/error.hpp"

using namespace spikecalib;
using namespace testing;

TEST_CASE("fold_bn on a scalar layer") {
    BatchNormLayer bn{Tensor::scalar(0.5), Tensor::scalar(2.0), Tensor::scalar(4.0), Tensor::scalar(0.1)};
    const Network net({1}, {LinearLayer{Tensor({1, 1}, 2.0), Tensor::scalar(1.0)}, bn, ReluLayer{}});
    const Network folded = fold_bn(net);
    REQUIRE(folded.size() == 2);
    CHECK(affine_weights(folded.layer(0))[0] == doctest::Approx(4.0));
    CHECK(affine_bias(folded.layer(0))[0] == doctest::Approx(1.1));
}

TEST_CASE("identity batchnorm leaves parameters unchanged") {
    std::mt19937_64 rng(1);
    const Tensor w = random_tensor({3, 2}, rng), b = random_tensor({3}, rng);
    BatchNormLayer bn{Tensor({3}, 0.0), Tensor({3}, 1.0), Tensor({3}, 1.0), Tensor({3}, 0.0)};
    const Network folded = fold_bn(Network({2}, {LinearLayer{w, b}, bn, ReluLayer{}}));
    CHECK(affine_weights(folded.layer(0)) == w);
    CHECK(affine_bias(folded.layer(0)) == b);
}

TEST_CASE("fold_bn preserves the forward pass on random conv and linear nets") {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const Network net = trial % 2 ? random_cnn(rng, true) : random_mlp({5, 6, 4, 3}, rng, true);
        const Tensor x = random_tensor(trial % 2 ? Shape{4, 2, 8, 8} : Shape{4, 5}, rng);
        const Network folded = fold_bn(net);
        CHECK_FALSE(folded.has_batchnorm());
        const Tensor a = predict(net, x), b = predict(folded, x);
        double scale = 0.0, diff = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            scale = std::max(scale, std::abs(a[i]));
            diff = std::max(diff, std::abs(a[i] - b[i]));
        }
        CHECK(diff <= 1e-8 * std::max(1.0, scale));
    }
}

TEST_CASE("fold_bn is idempotent") {
    std::mt19937_64 rng(3);
    const Network once = fold_bn(random_cnn(rng, true));
    CHECK(fold_bn(once) == once);
}

TEST_CASE("batchnorm without a preceding affine layer is rejected") {
    std::mt19937_64 rng(4);
    const Network net({3}, {random_bn(3, rng), LinearLayer{Tensor({2, 3}, 1.0), Tensor({2}, 0.0)}});
    CHECK_THROWS_AS(fold_bn(net), ShapeError);
}

TEST_CASE("forward is batch-consistent") {
    std::mt19937_64 rng(5);
    const Network net = random_cnn(rng, true);
    const Tensor x = random_tensor({5, 2, 8, 8}, rng);
    const ActivationTrace whole = forward(net, x);
    for (std::size_t n = 0; n < 5; ++n) {
        const ActivationTrace single = forward(net, x.slice_batch(n, n + 1));
        for (std::size_t i = 0; i < net.size(); ++i)
            CHECK(max_abs_diff(single.outputs[i], whole.outputs[i].slice_batch(n, n + 1)) <= 1e-12);
    }
    CHECK(predict(net, x) == whole.final_output());
}

TEST_CASE("forward exposes pre-activations and activations") {
    std::mt19937_64 rng(6);
    const Network net = random_mlp({3, 4, 2}, rng);
    const Tensor x = random_tensor({2, 3}, rng);
    const ActivationTrace t = forward(net, x);
    const auto& l0 = std::get<LinearLayer>(net.layer(0));
    CHECK(max_abs_diff(t.outputs[0], naive_linear(x, l0.weights, l0.bias)) < 1e-12);
    CHECK(t.outputs[1] == relu(t.outputs[0]));
}

TEST_CASE("network validates shapes") {
    CHECK_THROWS_AS(Network({3}, {LinearLayer{Tensor({2, 4}, 1.0), Tensor({2}, 0.0)}}), ShapeError);
    CHECK_THROWS_AS(Network({3}, {}), ShapeError);
    CHECK_THROWS_AS(Network({1, 4, 4}, {AvgPool2dLayer{3, 3}, FlattenLayer{}, ReluLayer{}}), ShapeError);
    CHECK_THROWS_AS(Network({1, 5, 5}, {LinearLayer{Tensor({2, 25}, 1.0), Tensor({2}, 0.0)}}), ShapeError);
    Network ok({2}, {LinearLayer{Tensor({2, 2}, 1.0), Tensor({2}, 0.0)}, ReluLayer{},
                     LinearLayer{Tensor({1, 2}, 1.0), Tensor({1}, 0.0)}});
    CHECK_THROWS_AS(ok.set_affine(0, Tensor({3, 2}, 1.0), Tensor({3}, 0.0)), ShapeError);
    CHECK_THROWS_AS(ok.set_affine(1, Tensor({2, 2}, 1.0), Tensor({2}, 0.0)), ShapeError);
    CHECK_THROWS_AS(predict(ok, Tensor({1, 3})), ShapeError);
}

TEST_CASE("spiking positions") {
    std::mt19937_64 rng(7);
    const Network net = random_cnn(rng, false);
    CHECK(net.relu_indices() == std::vector<std::size_t>{1, 4});
    CHECK(net.spiking_affine_index(0) == 0);
    CHECK(net.spiking_affine_index(1) == 3);
    CHECK(net.spiking_channels(1) == 4);
    CHECK_THROWS_AS(net.spiking_affine_index(2), ShapeError);
    CHECK_THROWS_AS(random_cnn(rng, true).spiking_affine_index(0), ShapeError);
}

TEST_CASE("layer kinds parse and reject unsupported operators") {
    for (auto k : {LayerKind::linear, LayerKind::conv2d, LayerKind::avgpool2d, LayerKind::relu, LayerKind::batchnorm,
                   LayerKind::flatten})
        CHECK(parse_kind(kind_name(k)) == k);
    CHECK_THROWS_WITH_AS(parse_kind("maxpool2d"), doctest::Contains("max pooling"), FormatError);
    CHECK_THROWS_AS(parse_kind("add"), FormatError);
    CHECK_THROWS_AS(parse_kind("bogus"), FormatError);
}

TEST_CASE("argmax and accuracy") {
    const Tensor logits({3, 2}, std::vector<double>{0.1, 0.9, 2.0, -1.0, 0.5, 0.6});
    CHECK(argmax_rows(logits) == std::vector<std::size_t>{1, 0, 1});
    CHECK(accuracy(logits, {1, 0, 0}) == doctest::Approx(2.0 / 3.0));
    CHECK_THROWS_AS(accuracy(logits, {1, 0}), ShapeError);
}
