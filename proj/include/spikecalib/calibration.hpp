#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spikecalib/network.hpp"
#include "spikecalib/snn.hpp"
#include "spikecalib/threshold.hpp"

namespace spikecalib {

enum class Pipeline { none, light, advanced };
enum class PotentialMode { elementwise, channel_mean };
// Order of the two advanced steps within one layer.
enum class AdvancedOrder { weights_then_potential, potential_then_weights };

std::string pipeline_name(Pipeline p);
Pipeline parse_pipeline(const std::string& name);
std::string potential_mode_name(PotentialMode m);
PotentialMode parse_potential_mode(const std::string& name);
std::string advanced_order_name(AdvancedOrder o);
AdvancedOrder parse_advanced_order(const std::string& name);

struct WeightCalibrationOptions {
    // In units of 1 / L, where L is the largest curvature of the objective without quantization.
    double step_size = 0.1;
    double momentum = 0.9;
    int iterations = 500;
    // Samples per step; 0 means the full set. Mini-batch runs re-evaluate the full objective
    // every `eval_interval` steps and keep the best full-set iterate.
    std::size_t batch_size = 0;
    int eval_interval = 25;
    std::uint64_t seed = 0;

    void validate() const;
};

struct CalibrationConfig {
    Pipeline pipeline = Pipeline::none;
    std::size_t bias_samples = 128;    // batch for bias and potential corrections
    std::size_t weight_samples = 1024;  // set for weight calibration
    WeightCalibrationOptions weights;
    PotentialMode potential_mode = PotentialMode::elementwise;
    AdvancedOrder order = AdvancedOrder::weights_then_potential;

    void validate() const;
};

// b'[c] = b[c] + mean of e over every axis but the channel axis.
Tensor calibrate_bias(const Tensor& bias, const Tensor& error);

// Initial potential from an N x (feature shape) error batch, shaped like one sample.
Tensor calibrate_potential(const Tensor& error, int time_steps, PotentialMode mode);

struct WeightCalibrationResult {
    Tensor weights;
    Tensor bias;
    double initial_objective = 0.0;
    // Objective of the returned parameters: the best iterate seen, never above the initial one.
    double final_objective = 0.0;
    // Objective of the last iterate, for reference.
    double last_objective = 0.0;
    int iterations = 0;
    bool diverged = false;
};

// mean_n || target_n - clip_round(affine(input_n)) ||^2 for a linear or conv2d layer.
double weight_objective(const Layer& affine, const Tensor& input, const Tensor& target, int time_steps,
                        const Tensor& threshold);

// Straight-through gradient of weight_objective: the rounding passes gradient 1, the clip
// passes it where the rounded level lies in [0, T]. Returns {d/dW, d/db}.
AffineGrads weight_objective_gradient(const Layer& affine, const Tensor& input, const Tensor& target,
                                      int time_steps, const Tensor& threshold);

// Gradient descent with momentum and cosine step decay on weight_objective, updating
// weights and bias together. The bias is the one the ClipRound model sees (no rounding shift).
// If the objective exceeds 10x its initial value the original parameters are returned.
WeightCalibrationResult calibrate_weights(const Layer& affine, const Tensor& input, const Tensor& target,
                                          int time_steps, const Tensor& threshold,
                                          const WeightCalibrationOptions& options);

// A BN-folded network with thresholds, ready for calibration.
struct Conversion {
    Network ann;  // folded network, no rounding shift; reference activations come from here
    Network snn;  // folded network, rounding shift applied in round mode
    SpikingConfig config;
    std::vector<ThresholdResult> thresholds;
};

// Folds batchnorm, searches each spiking layer's threshold on the ANN pre-activations of
// `threshold_set`, and applies the V/2T bias shift when round_mode is round.
Conversion prepare_conversion(const Network& ann, const Tensor& threshold_set, int time_steps,
                              const ThresholdPolicy& policy, RoundMode round_mode);

struct LayerCalibrationLog {
    std::size_t position = 0;
    std::size_t layer = 0;
    Tensor threshold;
    // mean squared error between ANN activation and SNN average output on the bias batch
    double initial_mse = 0.0;
    double final_mse = 0.0;
    double bias_correction_norm = 0.0;
    double potential_norm = 0.0;
    bool weights_calibrated = false;
    std::vector<std::string> rejected;  // corrections reverted because they raised the error
    WeightCalibrationResult weights;  // parameters cleared; objectives only

    std::string to_json() const;
};

struct PipelineResult {
    Network net;
    SpikingConfig config;
    std::vector<LayerCalibrationLog> log;
};

// Greedy front-to-back calibration. For every spiking layer the prefix is re-simulated with
// the corrections made so far, the observed error e = x_ann - s_avg is measured on the first
// bias_samples of `calib`, and the configured corrections are applied. A correction that
// raises the measured error is reverted, so final_mse <= initial_mse. Weight calibration
// uses the first weight_samples of `calib`.
PipelineResult run_pipeline(const Conversion& conversion, const Tensor& calib, const CalibrationConfig& cfg);

}  // namespace spikecalib
