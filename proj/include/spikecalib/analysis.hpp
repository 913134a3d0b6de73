#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "spikecalib/network.hpp"
#include "spikecalib/snn.hpp"
#include "spikecalib/tensor.hpp"

namespace spikecalib {

// ||x - s||^2 / ||x||^2, or nullopt when ||x|| = 0.
std::optional<double> relative_error(const Tensor& x, const Tensor& s);
// The same ratio for every channel (axis 1).
std::vector<std::optional<double>> relative_error_per_channel(const Tensor& x, const Tensor& s);

// Error of one spiking layer split by cause:
//   e_r = ReLU(W x + b) - ReLU(W s + b)      (the inputs differ)
//   e_c = ReLU(W s + b) - Q(W s + b)          (the spiking activation differs)
//   e   = e_r + e_c
// with Q = ClipRound or ClipFloor.
struct ErrorTerms {
    Tensor e;
    Tensor e_r;
    Tensor e_c;
};

ErrorTerms decompose_error(const Layer& affine, const Tensor& ann_input, const Tensor& snn_input, int time_steps,
                           const Tensor& threshold, RoundMode mode = RoundMode::round);

// sum over l = 1..n of 2^(n-l+1) ||e_c^(l)||^2, with n = decomposition.size().
double weighted_local_error(const std::vector<ErrorTerms>& decomposition);

// Widest activation (input included) the dense Hessian tools accept.
inline constexpr std::size_t kHessianWidthLimit = 64;

// Rewrites a BN-free network as Linear layers, each optionally followed by ReLU. Convolutions,
// pooling and flattening between two ReLUs are multiplied into one dense matrix.
Network unroll_to_dense(const Network& net);

// Hessians of L(a) = ||x^(n) - f_l(a)||^2 for a dense chain at one sample, where x^(n) is the ANN
// output and f_l runs the network from layer l onward. Layer l is the l-th Linear layer.
struct HessianStack {
    std::vector<Eigen::MatrixXd> output;        // w.r.t. the layer's output a^(l); the last is 2I
    std::vector<Eigen::MatrixXd> preactivation;  // w.r.t. z^(l): B H_a B
    std::vector<Eigen::VectorXd> masks;          // B: ReLU derivative (1 where z > 0), ones for linear layers
    Eigen::MatrixXd input;                       // w.r.t. the network input
};

HessianStack hessian_stack(const Network& dense, const Tensor& sample);

// Largest relative (Frobenius) difference between the stack and central finite differences of
// L. The step is reduced where needed so no ReLU changes state inside the stencil.
double hessian_fd_discrepancy(const Network& dense, const Tensor& sample, const HessianStack& stack,
                              double step = 1e-3);

// Compares the output error of the spiking chain with the weighted sum of local activation errors.
// The quadratic forms use secant slopes between the ANN and spiking pre-activations, so the
// comparison is exact rather than a second-order approximation. rhs_ann_trace uses the
// stack's ANN-trace Hessians instead, for reference.
struct BoundCheck {
    double lhs = 0.0;
    double rhs = 0.0;
    double rhs_ann_trace = 0.0;
    bool holds = false;
    // Units whose ReLU state differs between the ANN and the spiking chain.
    std::size_t pattern_mismatches = 0;
    std::vector<double> layer_terms;  // 2^(n-l+1) e_c^T G e_c per layer
};

// `thresholds` has one entry per ReLU of `dense`.
BoundCheck check_bound(const Network& dense, const Tensor& sample, int time_steps,
                       const std::vector<Tensor>& thresholds, RoundMode mode = RoundMode::round);

struct BoundTrialOptions {
    std::size_t trials = 100;
    std::size_t min_depth = 2;
    std::size_t max_depth = 4;
    std::size_t max_width = 8;
    std::vector<int> time_steps{2, 4, 8};
    RoundMode round_mode = RoundMode::round;
    std::uint64_t seed = 0;

    void validate() const;
};

struct BoundTrial {
    std::size_t index = 0;
    std::vector<std::size_t> widths;  // input first
    int time_steps = 0;
    BoundCheck result;
    double hessian_fd_error = 0.0;
};

// Random dense chains (ReLU hidden layers, linear output), random thresholds and inputs.
// Trial i depends only on (seed, i).
std::vector<BoundTrial> run_bound_trials(const BoundTrialOptions& options);

// Per-sample energy in arbitrary units. ANN: every MAC costs mul + add. SNN: the first affine layer
// runs its analog MACs every time step; every later synaptic operation is one add per spike and
// target synapse.
struct EnergyEstimate {
    double ann_energy = 0.0;
    double snn_energy = 0.0;
    double ratio = 0.0;
    double first_layer_energy = 0.0;
    double spike_energy = 0.0;
    double spikes_per_sample = 0.0;
    std::vector<double> fanout_adds;  // per position, per sample
};

// Synaptic targets of every neuron at spiking position k in the next affine layer, per-sample shape.
Tensor position_fanout(const Network& net, std::size_t position);
std::size_t affine_macs(const Network& net, std::size_t layer);

EnergyEstimate estimate_energy(const Network& net, const SimulationTrace& trace, const EnergyCosts& costs = {});

struct Summary {
    double p5 = 0.0;
    double p50 = 0.0;
    double p95 = 0.0;
    double mean = 0.0;
    std::size_t count = 0;
    std::size_t not_applicable = 0;
};

Summary summarize(const std::vector<std::optional<double>>& values);

struct LayerDiagnostics {
    std::size_t position = 0;
    std::size_t layer = 0;
    Tensor threshold;
    std::optional<double> relative_error;
    Summary channel_relative_error;
    double mse = 0.0;
    double firing_rate = 0.0;
    double e_norm = 0.0;
    double e_r_norm = 0.0;
    double e_c_norm = 0.0;
};

struct ConversionReport {
    std::vector<LayerDiagnostics> layers;
    std::optional<double> output_relative_error;
    EnergyEstimate energy;
    std::optional<double> ann_accuracy;
    std::optional<double> snn_accuracy;
    std::string provenance;  // JSON object text, embedded as is

    std::string to_json() const;
    std::string to_csv() const;
};

// `ann` is the BN-folded network the SNN was derived from; labels may be empty.
ConversionReport diagnose(const Network& ann, const Network& snn, const SpikingConfig& config, const Tensor& batch,
                          const std::vector<std::uint32_t>& labels = {});

}  // namespace spikecalib
