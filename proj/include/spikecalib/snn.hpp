#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "spikecalib/network.hpp"
#include "spikecalib/tensor.hpp"

namespace spikecalib {

enum class RoundMode { floor, round };

std::string round_mode_name(RoundMode mode);
RoundMode parse_round_mode(const std::string& name);

// Energy per operation in arbitrary units.
struct EnergyCosts {
    double add = 0.9;
    double mul = 4.6;
};

// Spiking parameters for a BN-folded network. Position k refers to the k-th ReLU of the network.
struct SpikingConfig {
    int time_steps = 0;
    std::vector<Tensor> thresholds;          // {1} or {C} per position
    std::vector<Tensor> initial_potentials;  // empty (zero) or the position's per-sample output shape
    // Records whether the rounding shift has been folded into the biases; simulate() itself
    // always runs plain IF dynamics.
    RoundMode round_mode = RoundMode::floor;
    EnergyCosts energy;

    void validate(const Network& net) const;
};

struct SimulationOptions {
    bool record_spikes = false;
    // Stop after this spiking position; the output is then left empty.
    std::optional<std::size_t> last_position;
};

struct SimulationTrace {
    int time_steps = 0;
    std::vector<Tensor> thresholds;
    // spikes[k][t]: spike tensor of position k at step t, values 0 or the channel threshold.
    std::vector<std::vector<Tensor>> spikes;
    // Number of spikes per neuron, N x (per-sample shape).
    std::vector<Tensor> spike_counts;
    std::vector<Tensor> terminal_potentials;
    // Elements whose terminal potential lies outside [0, V_th).
    std::vector<std::size_t> potential_violations;
    // Time-averaged network output.
    Tensor output;

    // Average spike output m * V_th / T at position k.
    Tensor average_output(std::size_t k) const;
    std::size_t positions() const { return spike_counts.size(); }
};

SimulationTrace simulate(const Network& net, const SpikingConfig& cfg, const Tensor& batch,
                         const SimulationOptions& options = {});

// Applies the pass-through layers (avgpool/flatten) between position k and the next affine
// layer to a tensor shaped like position k's output. Linear, so it commutes with time averaging.
Tensor propagate_to_next_affine(const Network& net, std::size_t position, const Tensor& activation);

struct NormalizedSnn {
    Network net;
    SpikingConfig config;
};

// Rescales weights so every threshold becomes 1 while spike counts are preserved.
NormalizedSnn normalize_weights(const Network& net, const SpikingConfig& cfg);

// Adds V_th / 2T to each spiking layer's bias so IF dynamics realize ClipRound.
Network apply_round_bias_shift(const Network& net, const SpikingConfig& cfg);

// Per-position mean firing ratio: spike events / (neurons * T).
std::vector<double> firing_rates(const SimulationTrace& trace);

}  // namespace spikecalib
