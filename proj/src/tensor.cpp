#include "spikecalib/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <tuple>

#include "spikecalib/error.hpp"
#include "spikecalib/parallel.hpp"

namespace spikecalib {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

void require(bool ok, const std::string& message) {
    if (!ok) throw ShapeError(message);
}

struct ConvGeometry {
    std::size_t channels, height, width;
    std::size_t kernel;
    std::size_t out_height, out_width;
    int stride, padding;

    std::size_t patch() const { return channels * kernel * kernel; }
    std::size_t positions() const { return out_height * out_width; }
};

ConvGeometry conv_geometry(const Shape& input, const Shape& weights, int stride, int padding) {
    require(input.size() == 4, "conv2d: input must be N x C x H x W, got " + to_string(input));
    require(weights.size() == 4, "conv2d: weights must be O x C x k x k, got " + to_string(weights));
    require(weights[2] == weights[3], "conv2d: kernel must be square, got " + to_string(weights));
    if (stride <= 0) throw ShapeError("conv2d: stride must be positive, got " + std::to_string(stride));
    require(padding >= 0, "conv2d: padding must be non-negative");
    require(input[1] == weights[1], "conv2d: channel mismatch between input " + to_string(input) +
                                        " and weights " + to_string(weights));
    const auto k = weights[2];
    const auto padded_h = input[2] + 2 * static_cast<std::size_t>(padding);
    const auto padded_w = input[3] + 2 * static_cast<std::size_t>(padding);
    require(k >= 1 && k <= padded_h && k <= padded_w,
            "conv2d: kernel " + to_string(weights) + " larger than padded input " + to_string(input));
    ConvGeometry g{};
    g.channels = input[1];
    g.height = input[2];
    g.width = input[3];
    g.kernel = k;
    g.stride = stride;
    g.padding = padding;
    g.out_height = (padded_h - k) / static_cast<std::size_t>(stride) + 1;
    g.out_width = (padded_w - k) / static_cast<std::size_t>(stride) + 1;
    return g;
}

// Column matrix (C*k*k) x (Ho*Wo) for one sample.
void im2col(const double* image, const ConvGeometry& g, double* col) {
    const auto positions = g.positions();
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ki = 0; ki < g.kernel; ++ki) {
            for (std::size_t kj = 0; kj < g.kernel; ++kj) {
                double* row = col + ((c * g.kernel + ki) * g.kernel + kj) * positions;
                for (std::size_t oi = 0; oi < g.out_height; ++oi) {
                    const long ii = static_cast<long>(oi) * g.stride + static_cast<long>(ki) - g.padding;
                    for (std::size_t oj = 0; oj < g.out_width; ++oj) {
                        const long jj = static_cast<long>(oj) * g.stride + static_cast<long>(kj) - g.padding;
                        const bool inside = ii >= 0 && jj >= 0 && ii < static_cast<long>(g.height) &&
                                            jj < static_cast<long>(g.width);
                        row[oi * g.out_width + oj] =
                            inside ? image[(c * g.height + static_cast<std::size_t>(ii)) * g.width +
                                           static_cast<std::size_t>(jj)]
                                   : 0.0;
                    }
                }
            }
        }
    }
}

void col2im(const double* col, const ConvGeometry& g, double* image) {
    const auto positions = g.positions();
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ki = 0; ki < g.kernel; ++ki) {
            for (std::size_t kj = 0; kj < g.kernel; ++kj) {
                const double* row = col + ((c * g.kernel + ki) * g.kernel + kj) * positions;
                for (std::size_t oi = 0; oi < g.out_height; ++oi) {
                    const long ii = static_cast<long>(oi) * g.stride + static_cast<long>(ki) - g.padding;
                    if (ii < 0 || ii >= static_cast<long>(g.height)) continue;
                    for (std::size_t oj = 0; oj < g.out_width; ++oj) {
                        const long jj = static_cast<long>(oj) * g.stride + static_cast<long>(kj) - g.padding;
                        if (jj < 0 || jj >= static_cast<long>(g.width)) continue;
                        image[(c * g.height + static_cast<std::size_t>(ii)) * g.width +
                              static_cast<std::size_t>(jj)] += row[oi * g.out_width + oj];
                    }
                }
            }
        }
    }
}

}  // namespace

std::string to_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << 'x';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    require(element_count(shape_) == data_.size(),
            "tensor: shape " + to_string(shape_) + " does not match " + std::to_string(data_.size()) +
                " elements");
}

std::size_t Tensor::flat_index(std::initializer_list<std::size_t> index) const {
    require(index.size() == shape_.size(), "tensor: index rank does not match shape " + to_string(shape_));
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (auto i : index) {
        require(i < shape_[axis], "tensor: index out of range for shape " + to_string(shape_));
        flat = flat * shape_[axis] + i;
        ++axis;
    }
    return flat;
}

double& Tensor::at(std::initializer_list<std::size_t> index) { return data_[flat_index(index)]; }
double Tensor::at(std::initializer_list<std::size_t> index) const { return data_[flat_index(index)]; }

Tensor Tensor::reshaped(Shape shape) const {
    require(element_count(shape) == data_.size(),
            "tensor: cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    return Tensor(std::move(shape), data_);
}

Tensor Tensor::slice_batch(std::size_t begin, std::size_t end) const {
    require(!shape_.empty() && begin <= end && end <= shape_[0],
            "tensor: batch slice out of range for " + to_string(shape_));
    const auto stride = shape_[0] ? data_.size() / shape_[0] : element_count(sample_shape());
    Shape shape = shape_;
    shape[0] = end - begin;
    return Tensor(std::move(shape), std::vector<double>(data_.begin() + static_cast<long>(begin * stride),
                                                        data_.begin() + static_cast<long>(end * stride)));
}

Shape Tensor::sample_shape() const {
    require(!shape_.empty(), "tensor: rank-0 tensor has no batch axis");
    return Shape(shape_.begin() + 1, shape_.end());
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double Tensor::max() const {
    require(!data_.empty(), "tensor: max of empty tensor");
    return *std::max_element(data_.begin(), data_.end());
}

double Tensor::min() const {
    require(!data_.empty(), "tensor: min of empty tensor");
    return *std::min_element(data_.begin(), data_.end());
}

double Tensor::sum() const noexcept { return std::accumulate(data_.begin(), data_.end(), 0.0); }

double Tensor::squared_norm() const noexcept {
    double acc = 0.0;
    for (double v : data_) acc += v * v;
    return acc;
}

Tensor& Tensor::operator+=(const Tensor& other) {
    require(shape_ == other.shape_, "tensor: cannot add " + to_string(other.shape_) + " to " + to_string(shape_));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Tensor& Tensor::operator-=(const Tensor& other) {
    require(shape_ == other.shape_,
            "tensor: cannot subtract " + to_string(other.shape_) + " from " + to_string(shape_));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
}

Tensor& Tensor::operator*=(double scale) noexcept {
    for (double& v : data_) v *= scale;
    return *this;
}

Tensor concat_batch(std::span<const Tensor> parts) {
    require(!parts.empty(), "concat: no tensors");
    Shape shape = parts.front().shape();
    require(!shape.empty(), "concat: rank-0 tensor");
    std::size_t total = 0;
    for (const auto& p : parts) {
        require(p.rank() == shape.size() && std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1),
                "concat: trailing shapes differ, " + to_string(shape) + " vs " + to_string(p.shape()));
        total += p.dim(0);
    }
    shape[0] = total;
    std::vector<double> data;
    data.reserve(element_count(shape));
    for (const auto& p : parts) data.insert(data.end(), p.storage().begin(), p.storage().end());
    return Tensor(std::move(shape), std::move(data));
}

Tensor relu(const Tensor& x) {
    Tensor out = x;
    for (double& v : out.storage()) v = v > 0.0 ? v : 0.0;
    return out;
}

Tensor linear_forward(const Tensor& input, const Tensor& weights, const Tensor* bias) {
    require(input.rank() == 2, "linear: input must be N x I, got " + to_string(input.shape()));
    require(weights.rank() == 2, "linear: weights must be O x I, got " + to_string(weights.shape()));
    require(input.dim(1) == weights.dim(1), "linear: input " + to_string(input.shape()) +
                                                " does not match weights " + to_string(weights.shape()));
    const auto n = input.dim(0);
    const auto in = weights.dim(1);
    const auto out_features = weights.dim(0);
    if (bias) {
        require(bias->size() == out_features, "linear: bias " + to_string(bias->shape()) +
                                                  " does not match weights " + to_string(weights.shape()));
    }
    Tensor out({n, out_features});
    if (n == 0) return out;
    ConstMatrixMap x(input.storage().data(), static_cast<long>(n), static_cast<long>(in));
    ConstMatrixMap w(weights.storage().data(), static_cast<long>(out_features), static_cast<long>(in));
    MatrixMap y(out.storage().data(), static_cast<long>(n), static_cast<long>(out_features));
    y.noalias() = x * w.transpose();
    if (bias) {
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t o = 0; o < out_features; ++o) out[r * out_features + o] += (*bias)[o];
    }
    return out;
}

Tensor conv2d_forward(const Tensor& input, const Tensor& weights, const Tensor* bias, int stride, int padding) {
    const auto g = conv_geometry(input.shape(), weights.shape(), stride, padding);
    const auto n = input.dim(0);
    const auto out_channels = weights.dim(0);
    if (bias) {
        require(bias->size() == out_channels, "conv2d: bias " + to_string(bias->shape()) +
                                                  " does not match weights " + to_string(weights.shape()));
    }
    Tensor out({n, out_channels, g.out_height, g.out_width});
    const auto in_stride = g.channels * g.height * g.width;
    const auto out_stride = out_channels * g.positions();
    ConstMatrixMap w(weights.storage().data(), static_cast<long>(out_channels), static_cast<long>(g.patch()));
    parallel_for(n, [&](std::size_t s) {
        std::vector<double> col(g.patch() * g.positions());
        im2col(input.storage().data() + s * in_stride, g, col.data());
        ConstMatrixMap c(col.data(), static_cast<long>(g.patch()), static_cast<long>(g.positions()));
        MatrixMap y(out.storage().data() + s * out_stride, static_cast<long>(out_channels),
                    static_cast<long>(g.positions()));
        y.noalias() = w * c;
        if (bias) {
            for (std::size_t o = 0; o < out_channels; ++o) y.row(static_cast<long>(o)).array() += (*bias)[o];
        }
    });
    return out;
}

Tensor avgpool2d(const Tensor& input, int window, int stride) {
    require(input.rank() == 4, "avgpool2d: input must be N x C x H x W, got " + to_string(input.shape()));
    require(window >= 1 && stride >= 1, "avgpool2d: window and stride must be positive");
    const auto w = static_cast<std::size_t>(window);
    const auto st = static_cast<std::size_t>(stride);
    const auto [n, c, h, wd] = std::tuple{input.dim(0), input.dim(1), input.dim(2), input.dim(3)};
    require(w <= h && w <= wd, "avgpool2d: window " + std::to_string(window) + " larger than spatial extent of " +
                                   to_string(input.shape()));
    const auto oh = (h - w) / st + 1;
    const auto ow = (wd - w) / st + 1;
    Tensor out({n, c, oh, ow});
    const double inv = 1.0 / static_cast<double>(w * w);
    for (std::size_t plane = 0; plane < n * c; ++plane) {
        const double* src = input.storage().data() + plane * h * wd;
        double* dst = out.storage().data() + plane * oh * ow;
        for (std::size_t i = 0; i < oh; ++i) {
            for (std::size_t j = 0; j < ow; ++j) {
                double acc = 0.0;
                for (std::size_t a = 0; a < w; ++a)
                    for (std::size_t b = 0; b < w; ++b) acc += src[(i * st + a) * wd + j * st + b];
                dst[i * ow + j] = acc * inv;
            }
        }
    }
    return out;
}

Tensor avgpool2d_backward(const Tensor& grad_output, const Shape& input_shape, int window, int stride) {
    const auto w = static_cast<std::size_t>(window);
    const auto st = static_cast<std::size_t>(stride);
    Tensor grad(input_shape);
    const auto h = input_shape[2];
    const auto wd = input_shape[3];
    const auto oh = grad_output.dim(2);
    const auto ow = grad_output.dim(3);
    const double inv = 1.0 / static_cast<double>(w * w);
    for (std::size_t plane = 0; plane < input_shape[0] * input_shape[1]; ++plane) {
        const double* src = grad_output.storage().data() + plane * oh * ow;
        double* dst = grad.storage().data() + plane * h * wd;
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j)
                for (std::size_t a = 0; a < w; ++a)
                    for (std::size_t b = 0; b < w; ++b) dst[(i * st + a) * wd + j * st + b] += src[i * ow + j] * inv;
    }
    return grad;
}

Tensor channel_spatial_mean(const Tensor& x) {
    require(x.rank() == 2 || x.rank() == 4,
            "channel_spatial_mean: expected N x C or N x C x H x W, got " + to_string(x.shape()));
    if (x.empty()) throw ShapeError("channel_spatial_mean: empty tensor " + to_string(x.shape()));
    const auto n = x.dim(0);
    const auto c = x.dim(1);
    const auto spatial = x.size() / (n * c);
    Tensor out({c});
    // Fixed reduction order: per-sample spatial sums, then samples in order.
    for (std::size_t ch = 0; ch < c; ++ch) {
        double total = 0.0;
        for (std::size_t s = 0; s < n; ++s) {
            const double* p = x.storage().data() + (s * c + ch) * spatial;
            double acc = 0.0;
            for (std::size_t k = 0; k < spatial; ++k) acc += p[k];
            total += acc;
        }
        out[ch] = total / static_cast<double>(n * spatial);
    }
    return out;
}

Tensor unfold_patches(const Tensor& input, const Shape& weight_shape, int stride, int padding) {
    const auto g = conv_geometry(input.shape(), weight_shape, stride, padding);
    const auto n = input.dim(0);
    const auto positions = g.positions();
    const auto columns = n * positions;
    Tensor out({g.patch(), columns});
    const auto in_stride = g.channels * g.height * g.width;
    parallel_for(n, [&](std::size_t s) {
        std::vector<double> col(g.patch() * positions);
        im2col(input.storage().data() + s * in_stride, g, col.data());
        for (std::size_t r = 0; r < g.patch(); ++r)
            std::copy_n(col.data() + r * positions, positions, out.storage().data() + r * columns + s * positions);
    });
    return out;
}

AffineGrads linear_backward(const Tensor& input, const Tensor& weights, const Tensor& grad_output) {
    const auto n = input.dim(0);
    const auto in = weights.dim(1);
    const auto out_features = weights.dim(0);
    require(grad_output.rank() == 2 && grad_output.dim(0) == n && grad_output.dim(1) == out_features,
            "linear_backward: gradient " + to_string(grad_output.shape()) + " does not match output");
    AffineGrads g{Tensor(input.shape()), Tensor(weights.shape()), Tensor({out_features})};
    if (n == 0) return g;
    ConstMatrixMap x(input.storage().data(), static_cast<long>(n), static_cast<long>(in));
    ConstMatrixMap w(weights.storage().data(), static_cast<long>(out_features), static_cast<long>(in));
    ConstMatrixMap gy(grad_output.storage().data(), static_cast<long>(n), static_cast<long>(out_features));
    MatrixMap(g.input.storage().data(), static_cast<long>(n), static_cast<long>(in)).noalias() = gy * w;
    MatrixMap(g.weights.storage().data(), static_cast<long>(out_features), static_cast<long>(in)).noalias() =
        gy.transpose() * x;
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t o = 0; o < out_features; ++o) g.bias[o] += grad_output[r * out_features + o];
    return g;
}

AffineGrads conv2d_backward(const Tensor& input, const Tensor& weights, const Tensor& grad_output, int stride,
                            int padding) {
    const auto g = conv_geometry(input.shape(), weights.shape(), stride, padding);
    const auto n = input.dim(0);
    const auto out_channels = weights.dim(0);
    require(grad_output.shape() == Shape{n, out_channels, g.out_height, g.out_width},
            "conv2d_backward: gradient " + to_string(grad_output.shape()) + " does not match output");
    AffineGrads grads{Tensor(input.shape()), Tensor(weights.shape()), Tensor({out_channels})};
    const auto in_stride = g.channels * g.height * g.width;
    const auto out_stride = out_channels * g.positions();
    ConstMatrixMap w(weights.storage().data(), static_cast<long>(out_channels), static_cast<long>(g.patch()));

    // Per-sample weight gradients are reduced in sample order so the result is worker-count independent.
    std::vector<RowMatrix> partial(n);
    parallel_for(n, [&](std::size_t s) {
        std::vector<double> col(g.patch() * g.positions());
        im2col(input.storage().data() + s * in_stride, g, col.data());
        ConstMatrixMap c(col.data(), static_cast<long>(g.patch()), static_cast<long>(g.positions()));
        ConstMatrixMap gy(grad_output.storage().data() + s * out_stride, static_cast<long>(out_channels),
                          static_cast<long>(g.positions()));
        partial[s].noalias() = gy * c.transpose();
        RowMatrix dcol = w.transpose() * gy;
        col2im(dcol.data(), g, grads.input.storage().data() + s * in_stride);
    });
    MatrixMap dw(grads.weights.storage().data(), static_cast<long>(out_channels), static_cast<long>(g.patch()));
    for (std::size_t s = 0; s < n; ++s) dw += partial[s];
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t o = 0; o < out_channels; ++o) {
            const double* p = grad_output.storage().data() + s * out_stride + o * g.positions();
            double acc = 0.0;
            for (std::size_t k = 0; k < g.positions(); ++k) acc += p[k];
            grads.bias[o] += acc;
        }
    return grads;
}

Tensor scale_channels(const Tensor& x, const Tensor& scale) {
    require(x.rank() >= 2, "scale_channels: expected a batched tensor, got " + to_string(x.shape()));
    const auto c = x.dim(1);
    require(scale.size() == 1 || scale.size() == c,
            "scale_channels: " + std::to_string(scale.size()) + " scales for " + std::to_string(c) + " channels");
    Tensor out = x;
    const auto n = x.dim(0);
    const auto spatial = (n && c) ? x.size() / (n * c) : 0;
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double k = channel_value(scale, ch);
            double* p = out.storage().data() + (s * c + ch) * spatial;
            for (std::size_t i = 0; i < spatial; ++i) p[i] *= k;
        }
    return out;
}

double channel_value(const Tensor& per_channel, std::size_t channel) {
    return per_channel.size() == 1 ? per_channel[0] : per_channel[channel];
}

}  // namespace spikecalib
