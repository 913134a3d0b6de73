#pragma once

// Reference implementations and random builders shared by the test suites. The references are
// written as plain loops, independent of the library kernels they check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "spikecalib/network.hpp"
#include "spikecalib/tensor.hpp"

namespace testing {

using namespace spikecalib;

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor t(std::move(shape));
    for (double& v : t.storage()) v = u(rng);
    return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline double max_rel_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a[i] - b[i]) / std::max(1.0, std::max(std::abs(a[i]), std::abs(b[i]))));
    return m;
}

inline Tensor naive_linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    const std::size_t n = x.dim(0), in = w.dim(1), out = w.dim(0);
    Tensor y({n, out});
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t o = 0; o < out; ++o) {
            double acc = b.empty() ? 0.0 : b[o];
            for (std::size_t i = 0; i < in; ++i) acc += w[o * in + i] * x[s * in + i];
            y[s * out + o] = acc;
        }
    return y;
}

inline Tensor naive_conv(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    const long n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const long o = w.dim(0), k = w.dim(2);
    const long oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
    Tensor y({std::size_t(n), std::size_t(o), std::size_t(oh), std::size_t(ow)});
    for (long s = 0; s < n; ++s)
        for (long oc = 0; oc < o; ++oc)
            for (long i = 0; i < oh; ++i)
                for (long j = 0; j < ow; ++j) {
                    double acc = b.empty() ? 0.0 : b[oc];
                    for (long ic = 0; ic < c; ++ic)
                        for (long p = 0; p < k; ++p)
                            for (long q = 0; q < k; ++q) {
                                const long r = i * stride - pad + p, col = j * stride - pad + q;
                                if (r < 0 || r >= h || col < 0 || col >= wd) continue;
                                acc += w[((oc * c + ic) * k + p) * k + q] * x[((s * c + ic) * h + r) * wd + col];
                            }
                    y[((s * o + oc) * oh + i) * ow + j] = acc;
                }
    return y;
}

inline Tensor naive_avgpool(const Tensor& x, int window, int stride) {
    const long n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const long oh = (h - window) / stride + 1, ow = (wd - window) / stride + 1;
    Tensor y({std::size_t(n), std::size_t(c), std::size_t(oh), std::size_t(ow)});
    for (long s = 0; s < n * c; ++s)
        for (long i = 0; i < oh; ++i)
            for (long j = 0; j < ow; ++j) {
                double acc = 0.0;
                for (long p = 0; p < window; ++p)
                    for (long q = 0; q < window; ++q) acc += x[(s * h + i * stride + p) * wd + j * stride + q];
                y[(s * oh + i) * ow + j] = acc / (window * window);
            }
    return y;
}

// Single IF neuron with soft reset driven by a constant input for T steps; returns the spike count.
inline int naive_if_count(double input, double threshold, int time_steps, double v0 = 0.0) {
    double v = v0;
    int count = 0;
    for (int t = 0; t < time_steps; ++t) {
        v += input;
        if (v >= threshold) {
            v -= threshold;
            ++count;
        }
    }
    return count;
}

inline BatchNormLayer random_bn(std::size_t channels, std::mt19937_64& rng) {
    BatchNormLayer bn;
    bn.mean = random_tensor({channels}, rng, -0.5, 0.5);
    bn.stddev = random_tensor({channels}, rng, 0.5, 2.0);
    bn.gamma = random_tensor({channels}, rng, 0.5, 1.5);
    bn.beta = random_tensor({channels}, rng, -0.3, 0.3);
    return bn;
}

// Random MLP: widths[0] inputs, ReLU hidden layers, linear output; BN after each hidden affine
// when with_bn is set.
inline Network random_mlp(const std::vector<std::size_t>& widths, std::mt19937_64& rng, bool with_bn = false) {
    std::vector<Layer> layers;
    for (std::size_t l = 1; l < widths.size(); ++l) {
        const double s = 1.0 / std::sqrt(double(widths[l - 1]));
        layers.push_back(LinearLayer{random_tensor({widths[l], widths[l - 1]}, rng, -2 * s, 2 * s),
                                     random_tensor({widths[l]}, rng, -0.2, 0.2)});
        if (l + 1 < widths.size()) {
            if (with_bn) layers.push_back(random_bn(widths[l], rng));
            layers.push_back(ReluLayer{});
        }
    }
    return Network({widths[0]}, std::move(layers));
}

// Small conv net: conv [bn] relu pool conv [bn] relu flatten linear.
inline Network random_cnn(std::mt19937_64& rng, bool with_bn = false, std::size_t in_channels = 2,
                          std::size_t extent = 8) {
    std::vector<Layer> layers;
    layers.push_back(Conv2dLayer{random_tensor({3, in_channels, 3, 3}, rng, -0.4, 0.4),
                                 random_tensor({3}, rng, -0.1, 0.1), 1, 1});
    if (with_bn) layers.push_back(random_bn(3, rng));
    layers.push_back(ReluLayer{});
    layers.push_back(AvgPool2dLayer{2, 2});
    layers.push_back(Conv2dLayer{random_tensor({4, 3, 3, 3}, rng, -0.4, 0.4), random_tensor({4}, rng, -0.1, 0.1),
                                 1, 1});
    if (with_bn) layers.push_back(random_bn(4, rng));
    layers.push_back(ReluLayer{});
    layers.push_back(FlattenLayer{});
    const std::size_t flat = 4 * (extent / 2) * (extent / 2);
    layers.push_back(LinearLayer{random_tensor({3, flat}, rng, -0.2, 0.2), random_tensor({3}, rng, -0.1, 0.1)});
    return Network({in_channels, extent, extent}, std::move(layers));
}

// Temporary directory removed on scope exit.
struct TempDir {
    std::filesystem::path path;
    TempDir() {
        static int counter = 0;
        path = std::filesystem::temp_directory_path() /
               ("spikecalib_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

}  // namespace testing
