#pragma once

#include <string>

#include "spikecalib/tensor.hpp"

namespace spikecalib {

// Thresholds are tensors with one element (layer-wise) or one element per channel (axis 1).
// Per-channel thresholds require inputs of rank >= 2.

// (V/T) * clip(floor(T*z/V), 0, T)
Tensor clip_floor(const Tensor& z, int time_steps, const Tensor& threshold);
// (V/T) * clip(floor(T*z/V + 1/2), 0, T)
Tensor clip_round(const Tensor& z, int time_steps, const Tensor& threshold);
// (V/T) * clip(floor(T*z/V + v0/V + 1/2), 0, T). v0 has one element, z.size() elements,
// or one sample's worth of elements (broadcast over the batch).
Tensor clip_round_with_potential(const Tensor& z, int time_steps, const Tensor& threshold,
                                 const Tensor& initial_potential);

double clip_floor(double z, int time_steps, double threshold);
double clip_round(double z, int time_steps, double threshold);

enum class ThresholdMode { max_act, percentile, mmse, mmse_channel };

std::string mode_name(ThresholdMode mode);
ThresholdMode parse_threshold_mode(const std::string& name);

struct ThresholdPolicy {
    ThresholdMode mode = ThresholdMode::mmse_channel;
    int grid = 100;
    double percentile = 99.99;

    void validate() const;
};

struct ThresholdResult {
    Tensor threshold;
    // mean((clip_round(a) - relu(a))^2) over all elements with the chosen threshold(s)
    double mse = 0.0;
    // Set when some channel (or the whole layer) had no positive activation.
    bool degenerate = false;
};

// Percentile with linear interpolation between order statistics.
double percentile_of(std::span<const double> values, double p);

// Mean squared ClipRound-vs-ReLU error of `activations` under the given threshold(s).
double quantization_mse(const Tensor& activations, int time_steps, const Tensor& threshold);

// `activations` are pre-activations of one spiking layer, N x C (x H x W).
ThresholdResult search_threshold(const Tensor& activations, int time_steps, const ThresholdPolicy& policy);

}  // namespace spikecalib
