#include "spikecalib/threshold.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "spikecalib/error.hpp"

namespace spikecalib {

namespace {

void check_args(int time_steps, const Tensor& threshold) {
    if (time_steps < 1) throw UsageError("time steps must be >= 1, got " + std::to_string(time_steps));
    if (threshold.empty()) throw ShapeError("empty threshold tensor");
    for (double v : threshold.storage())
        if (!(v > 0.0)) throw NumericError("firing threshold must be strictly positive, got " + std::to_string(v));
}

// Channel index of each element of z, for per-channel thresholds.
std::size_t channel_block(const Tensor& z, const Tensor& threshold) {
    if (threshold.size() == 1) return 0;
    if (z.rank() < 2 || z.dim(1) != threshold.size())
        throw ShapeError("threshold with " + std::to_string(threshold.size()) + " channels does not match " +
                         to_string(z.shape()));
    return z.size() / (z.dim(0) * z.dim(1));
}

template <class Fn>
Tensor map_with_threshold(const Tensor& z, const Tensor& threshold, Fn fn) {
    Tensor out = z;
    if (threshold.size() == 1) {
        const double v = threshold[0];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(z[i], v, i);
        return out;
    }
    const auto spatial = channel_block(z, threshold);
    const auto channels = threshold.size();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(z[i], threshold[(i / spatial) % channels], i);
    return out;
}

double quantize(double level, int time_steps, double threshold) {
    const double t = static_cast<double>(time_steps);
    return threshold / t * std::clamp(level, 0.0, t);
}

}  // namespace

double clip_floor(double z, int time_steps, double threshold) {
    return quantize(std::floor(time_steps * z / threshold), time_steps, threshold);
}

double clip_round(double z, int time_steps, double threshold) {
    return quantize(std::floor(time_steps * z / threshold + 0.5), time_steps, threshold);
}

Tensor clip_floor(const Tensor& z, int time_steps, const Tensor& threshold) {
    check_args(time_steps, threshold);
    return map_with_threshold(z, threshold,
                              [&](double x, double v, std::size_t) { return clip_floor(x, time_steps, v); });
}

Tensor clip_round(const Tensor& z, int time_steps, const Tensor& threshold) {
    check_args(time_steps, threshold);
    return map_with_threshold(z, threshold,
                              [&](double x, double v, std::size_t) { return clip_round(x, time_steps, v); });
}

Tensor clip_round_with_potential(const Tensor& z, int time_steps, const Tensor& threshold,
                                 const Tensor& initial_potential) {
    check_args(time_steps, threshold);
    const auto n = initial_potential.size();
    const auto per_sample = z.rank() >= 1 && z.dim(0) ? z.size() / z.dim(0) : z.size();
    if (!(n == 1 || n == z.size() || n == per_sample))
        throw ShapeError("initial potential " + to_string(initial_potential.shape()) +
                         " is not broadcastable to " + to_string(z.shape()));
    return map_with_threshold(z, threshold, [&](double x, double v, std::size_t i) {
        const double v0 = n == 1 ? initial_potential[0] : initial_potential[i % n];
        return quantize(std::floor(time_steps * x / v + v0 / v + 0.5), time_steps, v);
    });
}

std::string mode_name(ThresholdMode mode) {
    switch (mode) {
        case ThresholdMode::max_act: return "max-act";
        case ThresholdMode::percentile: return "percentile";
        case ThresholdMode::mmse: return "mmse";
        case ThresholdMode::mmse_channel: return "mmse-channel";
    }
    return "unknown";
}

ThresholdMode parse_threshold_mode(const std::string& name) {
    for (auto m : {ThresholdMode::max_act, ThresholdMode::percentile, ThresholdMode::mmse, ThresholdMode::mmse_channel})
        if (mode_name(m) == name) return m;
    throw UsageError("unknown threshold mode '" + name + "' (valid: max-act, percentile, mmse, mmse-channel)");
}

void ThresholdPolicy::validate() const {
    if (grid < 2) throw UsageError("threshold grid size must be >= 2");
    if (!(percentile > 0.0 && percentile <= 100.0)) throw UsageError("percentile must lie in (0, 100]");
}

double percentile_of(std::span<const double> values, double p) {
    if (values.empty()) throw ShapeError("percentile of an empty sample");
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    const double pos = p / 100.0 * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

double quantization_mse(const Tensor& activations, int time_steps, const Tensor& threshold) {
    const Tensor q = clip_round(activations, time_steps, threshold);
    double acc = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) {
        const double d = q[i] - std::max(activations[i], 0.0);
        acc += d * d;
    }
    return activations.empty() ? 0.0 : acc / static_cast<double>(activations.size());
}

namespace {

struct GridChoice {
    double threshold;
    double sse;
    bool degenerate;
};

// Grid points (j/N) * max for j = 1..N; smallest j wins ties.
GridChoice mmse_grid(std::span<const double> values, int time_steps, int grid) {
    double peak = 0.0;
    for (double v : values) peak = std::max(peak, v);
    if (!(peak > 0.0)) return {1.0, 0.0, true};
    std::vector<double> positive;
    positive.reserve(values.size());
    for (double v : values)
        if (v > 0.0) positive.push_back(v);
    // Non-positive activations contribute zero error at any positive threshold.
    GridChoice best{peak, 0.0, false};
    bool first = true;
    for (int j = 1; j <= grid; ++j) {
        const double threshold = static_cast<double>(j) / grid * peak;
        double sse = 0.0;
        for (double v : positive) {
            const double d = clip_round(v, time_steps, threshold) - v;
            sse += d * d;
        }
        if (first || sse < best.sse) {
            best = {threshold, sse, false};
            first = false;
        }
    }
    return best;
}

}  // namespace

ThresholdResult search_threshold(const Tensor& activations, int time_steps, const ThresholdPolicy& policy) {
    policy.validate();
    if (time_steps < 1) throw UsageError("time steps must be >= 1");
    if (activations.empty()) throw ShapeError("search_threshold: empty activation sample");
    ThresholdResult result;
    switch (policy.mode) {
        case ThresholdMode::max_act: {
            const double peak = activations.max();
            result.degenerate = !(peak > 0.0);
            result.threshold = Tensor::scalar(result.degenerate ? 1.0 : peak);
            break;
        }
        case ThresholdMode::percentile: {
            const double p = percentile_of(activations.data(), policy.percentile);
            result.degenerate = !(p > 0.0);
            result.threshold = Tensor::scalar(result.degenerate ? 1.0 : p);
            break;
        }
        case ThresholdMode::mmse: {
            const auto choice = mmse_grid(activations.data(), time_steps, policy.grid);
            result.degenerate = choice.degenerate;
            result.threshold = Tensor::scalar(choice.threshold);
            break;
        }
        case ThresholdMode::mmse_channel: {
            if (activations.rank() < 2)
                throw ShapeError("mmse-channel needs a channel axis, got " + to_string(activations.shape()));
            const auto n = activations.dim(0);
            const auto c = activations.dim(1);
            const auto spatial = activations.size() / (n * c);
            result.threshold = Tensor({c});
            std::vector<double> channel(n * spatial);
            for (std::size_t ch = 0; ch < c; ++ch) {
                for (std::size_t s = 0; s < n; ++s)
                    std::copy_n(activations.storage().data() + (s * c + ch) * spatial, spatial,
                                channel.data() + s * spatial);
                const auto choice = mmse_grid(channel, time_steps, policy.grid);
                result.degenerate = result.degenerate || choice.degenerate;
                result.threshold[ch] = choice.threshold;
            }
            break;
        }
    }
    result.mse = quantization_mse(activations, time_steps, result.threshold);
    return result;
}

}  // namespace spikecalib
