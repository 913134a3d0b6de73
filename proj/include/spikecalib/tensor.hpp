#pragma once

#include <cstddef>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace spikecalib {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t element_count(const Shape& shape);

// Dense row-major tensor of doubles. Images are N x C x H x W, vectors N x F.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double value) { return Tensor({1}, value); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double>& storage() noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    // Multi-index access; the number of indices must equal rank().
    double& at(std::initializer_list<std::size_t> index);
    double at(std::initializer_list<std::size_t> index) const;

    Tensor reshaped(Shape shape) const;

    // Samples [begin, end) along axis 0.
    Tensor slice_batch(std::size_t begin, std::size_t end) const;
    // Shape without the leading batch axis.
    Shape sample_shape() const;

    bool all_finite() const noexcept;
    double max() const;
    double min() const;
    double sum() const noexcept;
    double squared_norm() const noexcept;

    Tensor& operator+=(const Tensor& other);
    Tensor& operator-=(const Tensor& other);
    Tensor& operator*=(double scale) noexcept;

    friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
    friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
    friend Tensor operator*(Tensor a, double s) { return a *= s; }
    friend Tensor operator*(double s, Tensor a) { return a *= s; }

    bool operator==(const Tensor& other) const = default;

private:
    std::size_t flat_index(std::initializer_list<std::size_t> index) const;

    Shape shape_;
    std::vector<double> data_;
};

// Concatenate along axis 0; all trailing extents must agree.
Tensor concat_batch(std::span<const Tensor> parts);

Tensor relu(const Tensor& x);

// out[n,o] = sum_i W[o,i] * in[n,i] + b[o]
Tensor linear_forward(const Tensor& input, const Tensor& weights, const Tensor* bias = nullptr);

// Cross-correlation with zero padding; weights are O x C x k x k.
Tensor conv2d_forward(const Tensor& input, const Tensor& weights, const Tensor* bias,
                      int stride, int padding);

Tensor avgpool2d(const Tensor& input, int window, int stride);

// Patch matrix of a convolution input for an O x C x k x k kernel: (C*k*k) x (N*positions),
// with the columns of sample n at [n*positions, (n+1)*positions).
Tensor unfold_patches(const Tensor& input, const Shape& weight_shape, int stride, int padding);

// Mean over every axis except axis 1 (batch and spatial axes). Accepts N x C or N x C x H x W.
Tensor channel_spatial_mean(const Tensor& x);

struct AffineGrads {
    Tensor input;
    Tensor weights;
    Tensor bias;
};

AffineGrads linear_backward(const Tensor& input, const Tensor& weights, const Tensor& grad_output);
AffineGrads conv2d_backward(const Tensor& input, const Tensor& weights, const Tensor& grad_output,
                            int stride, int padding);
Tensor avgpool2d_backward(const Tensor& grad_output, const Shape& input_shape, int window, int stride);

// Per-channel scale for axis 1: x[:, c, ...] * scale[c]. scale has one element or C elements.
Tensor scale_channels(const Tensor& x, const Tensor& scale);
// Element `channel` of a per-channel vector, or its single element when layer-wise.
double channel_value(const Tensor& per_channel, std::size_t channel);

}  // namespace spikecalib
