#include "spikecalib/calibration.hpp"

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "json.hpp"
#include "spikecalib/error.hpp"

namespace spikecalib {

std::string pipeline_name(Pipeline p) {
    switch (p) {
        case Pipeline::none: return "none";
        case Pipeline::light: return "light";
        case Pipeline::advanced: return "advanced";
    }
    return "unknown";
}

Pipeline parse_pipeline(const std::string& name) {
    for (auto p : {Pipeline::none, Pipeline::light, Pipeline::advanced})
        if (pipeline_name(p) == name) return p;
    throw UsageError("unknown pipeline '" + name + "' (valid: none, light, advanced)");
}

std::string potential_mode_name(PotentialMode m) {
    return m == PotentialMode::elementwise ? "elementwise" : "channel-mean";
}

PotentialMode parse_potential_mode(const std::string& name) {
    if (name == "elementwise") return PotentialMode::elementwise;
    if (name == "channel-mean") return PotentialMode::channel_mean;
    throw UsageError("unknown potential mode '" + name + "' (valid: elementwise, channel-mean)");
}

std::string advanced_order_name(AdvancedOrder o) {
    return o == AdvancedOrder::weights_then_potential ? "weights-then-potential" : "potential-then-weights";
}

AdvancedOrder parse_advanced_order(const std::string& name) {
    if (name == "weights-then-potential") return AdvancedOrder::weights_then_potential;
    if (name == "potential-then-weights") return AdvancedOrder::potential_then_weights;
    throw UsageError("unknown calibration order '" + name +
                     "' (valid: weights-then-potential, potential-then-weights)");
}

void WeightCalibrationOptions::validate() const {
    if (iterations < 0) throw UsageError("weight calibration iterations must be >= 0");
    if (!(step_size > 0.0)) throw UsageError("weight calibration step size must be > 0");
    if (momentum < 0.0 || momentum >= 1.0) throw UsageError("weight calibration momentum must lie in [0, 1)");
    if (eval_interval < 1) throw UsageError("weight calibration eval interval must be >= 1");
}

void CalibrationConfig::validate() const {
    if (bias_samples == 0) throw UsageError("bias/potential sample count must be >= 1");
    if (weight_samples == 0) throw UsageError("weight calibration sample count must be >= 1");
    weights.validate();
}

Tensor calibrate_bias(const Tensor& bias, const Tensor& error) {
    if (error.rank() < 2 || error.dim(1) != bias.size())
        throw ShapeError("calibrate_bias: error " + to_string(error.shape()) + " does not match " +
                         std::to_string(bias.size()) + " channels");
    return bias + channel_spatial_mean(error);
}

Tensor calibrate_potential(const Tensor& error, int time_steps, PotentialMode mode) {
    if (time_steps < 1) throw UsageError("calibrate_potential: time steps must be >= 1");
    if (error.rank() < 2) throw ShapeError("calibrate_potential: expected a batch, got " + to_string(error.shape()));
    const auto n = error.dim(0);
    if (n == 0) throw ShapeError("calibrate_potential: empty error batch");
    Tensor v0(error.sample_shape());
    const auto per_sample = v0.size();
    const double t = static_cast<double>(time_steps);
    if (mode == PotentialMode::elementwise) {
        for (std::size_t i = 0; i < per_sample; ++i) {
            double acc = 0.0;
            for (std::size_t s = 0; s < n; ++s) acc += error[s * per_sample + i];
            v0[i] = t * acc / static_cast<double>(n);
        }
        return v0;
    }
    const Tensor mean = channel_spatial_mean(error);
    const auto block = per_sample / error.dim(1);
    for (std::size_t i = 0; i < per_sample; ++i) v0[i] = t * mean[i / block];
    return v0;
}

namespace {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const Matrix>;

// A linear or conv layer viewed as Z = W X + b with one column per (sample, position).
struct AffineProblem {
    Matrix x;       // fan-in x (N * positions)
    Matrix target;  // O x (N * positions)
    Matrix offset;  // O x (N * positions) added to Z, or empty
    std::vector<double> threshold;  // per output row
    std::size_t samples = 0;
    std::size_t positions = 1;
};

// Output tensor N x O x positions into O x (N * positions).
Matrix to_columns(const Tensor& t, std::size_t samples, std::size_t rows, std::size_t positions) {
    Matrix out(rows, samples * positions);
    for (std::size_t s = 0; s < samples; ++s)
        for (std::size_t o = 0; o < rows; ++o)
            for (std::size_t p = 0; p < positions; ++p)
                out(o, s * positions + p) = t[(s * rows + o) * positions + p];
    return out;
}

AffineProblem make_problem(const Layer& affine, const Tensor& input, const Tensor& target, int time_steps,
                           const Tensor& threshold, const Tensor* potential) {
    if (!is_affine(affine)) throw ShapeError("weight calibration needs a linear or conv2d layer");
    if (time_steps < 1) throw UsageError("weight calibration: time steps must be >= 1");
    const Tensor& w = affine_weights(affine);
    const auto rows = w.dim(0);
    const Tensor z = apply_layer(affine, input);
    if (z.shape() != target.shape())
        throw ShapeError("weight calibration: target " + to_string(target.shape()) + " does not match layer output " +
                         to_string(z.shape()));
    if (!(threshold.size() == 1 || threshold.size() == rows))
        throw ShapeError("weight calibration: threshold has " + std::to_string(threshold.size()) +
                         " entries for " + std::to_string(rows) + " channels");
    AffineProblem p;
    p.samples = input.dim(0);
    if (const auto* c = std::get_if<Conv2dLayer>(&affine)) {
        const Tensor cols = unfold_patches(input, w.shape(), c->stride, c->padding);
        p.positions = z.size() / std::max<std::size_t>(1, p.samples * rows);
        p.x = ConstMap(cols.storage().data(), static_cast<long>(cols.dim(0)), static_cast<long>(cols.dim(1)));
    } else {
        p.positions = 1;
        p.x = ConstMap(input.storage().data(), static_cast<long>(p.samples), static_cast<long>(w.dim(1))).transpose();
    }
    p.target = to_columns(target, p.samples, rows, p.positions);
    if (potential && !potential->empty()) {
        if (potential->size() != rows * p.positions)
            throw ShapeError("weight calibration: initial potential " + to_string(potential->shape()) +
                             " does not match the layer output");
        Tensor broadcast(z.shape());
        for (std::size_t s = 0; s < p.samples; ++s)
            for (std::size_t i = 0; i < potential->size(); ++i)
                broadcast[s * potential->size() + i] = (*potential)[i] / time_steps;
        p.offset = to_columns(broadcast, p.samples, rows, p.positions);
    }
    p.threshold.resize(rows);
    for (std::size_t o = 0; o < rows; ++o) {
        p.threshold[o] = channel_value(threshold, o);
        if (!(p.threshold[o] > 0.0)) throw NumericError("weight calibration: non-positive threshold");
    }
    return p;
}

// Objective over the given columns; fills the straight-through gradient w.r.t. Z when asked.
double evaluate(const Matrix& w, const Eigen::VectorXd& b, const Matrix& x, const Matrix& target,
                const Matrix& offset, const std::vector<double>& threshold, int time_steps, std::size_t samples,
                Matrix* grad_z) {
    Matrix z = w * x;
    z.colwise() += b;
    if (offset.size()) z += offset;
    const double t = static_cast<double>(time_steps);
    const double inv_n = 1.0 / static_cast<double>(std::max<std::size_t>(samples, 1));
    double total = 0.0;
    if (grad_z) grad_z->resize(z.rows(), z.cols());
    for (long o = 0; o < z.rows(); ++o) {
        const double v = threshold[static_cast<std::size_t>(o)];
        double row_total = 0.0;
        for (long m = 0; m < z.cols(); ++m) {
            const double level = std::floor(t * z(o, m) / v + 0.5);
            const double q = v / t * std::clamp(level, 0.0, t);
            const double r = q - target(o, m);
            row_total += r * r;
            if (grad_z) (*grad_z)(o, m) = (level >= 0.0 && level <= t) ? 2.0 * r * inv_n : 0.0;
        }
        total += row_total;
    }
    return total * inv_n;
}

Matrix weight_matrix(const Tensor& w) {
    return ConstMap(w.storage().data(), static_cast<long>(w.dim(0)), static_cast<long>(w.size() / w.dim(0)));
}

Eigen::VectorXd bias_vector(const Tensor& b) {
    return Eigen::Map<const Eigen::VectorXd>(b.storage().data(), static_cast<long>(b.size()));
}

Tensor to_tensor(const Matrix& m, const Shape& shape) {
    return Tensor(shape, std::vector<double>(m.data(), m.data() + m.size()));
}

Tensor to_tensor(const Eigen::VectorXd& v) {
    return Tensor({static_cast<std::size_t>(v.size())}, std::vector<double>(v.data(), v.data() + v.size()));
}

// Columns of the given samples, in order.
Matrix gather(const Matrix& m, const std::vector<std::size_t>& samples, std::size_t positions) {
    if (m.size() == 0) return m;
    Matrix out(m.rows(), static_cast<long>(samples.size() * positions));
    for (std::size_t j = 0; j < samples.size(); ++j)
        out.middleCols(static_cast<long>(j * positions), static_cast<long>(positions)) =
            m.middleCols(static_cast<long>(samples[j] * positions), static_cast<long>(positions));
    return out;
}

// Largest curvature of the unquantized objective in one output row's (w, b):
// 2/N * lambda_max([X; 1] [X; 1]^T).
double surrogate_curvature(const Matrix& x, std::size_t samples) {
    const long k = x.rows();
    Eigen::MatrixXd gram(k + 1, k + 1);
    gram.topLeftCorner(k, k) = x * x.transpose();
    const Eigen::VectorXd sums = x.rowwise().sum();
    gram.topRightCorner(k, 1) = sums;
    gram.bottomLeftCorner(1, k) = sums.transpose();
    gram(k, k) = static_cast<double>(x.cols());
    const double top = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(gram, Eigen::EigenvaluesOnly).eigenvalues().maxCoeff();
    return std::max(2.0 * top / static_cast<double>(std::max<std::size_t>(samples, 1)), 1e-12);
}

WeightCalibrationResult calibrate_impl(const Layer& affine, const Tensor& input, const Tensor& target,
                                       int time_steps, const Tensor& threshold, const Tensor* potential,
                                       const WeightCalibrationOptions& options) {
    options.validate();
    const AffineProblem p = make_problem(affine, input, target, time_steps, threshold, potential);
    const Tensor& w0 = affine_weights(affine);
    const Tensor& b0 = affine_bias(affine);
    Matrix w = weight_matrix(w0);
    Eigen::VectorXd b = bias_vector(b0);

    WeightCalibrationResult result;
    result.weights = w0;
    result.bias = b0;
    auto full_objective = [&](const Matrix& wm, const Eigen::VectorXd& bv) {
        return evaluate(wm, bv, p.x, p.target, p.offset, p.threshold, time_steps, p.samples, nullptr);
    };
    result.initial_objective = full_objective(w, b);
    result.final_objective = result.last_objective = result.initial_objective;
    if (options.iterations == 0 || p.samples == 0) return result;

    const bool full_batch = options.batch_size == 0 || options.batch_size >= p.samples;
    std::mt19937_64 rng(options.seed);
    std::vector<std::size_t> order(p.samples);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = p.samples;

    Matrix best_w = w;
    Eigen::VectorXd best_b = b;
    double best = result.initial_objective;
    Matrix vw = Matrix::Zero(w.rows(), w.cols());
    Eigen::VectorXd vb = Eigen::VectorXd::Zero(b.size());
    Matrix grad_z;
    const double limit = 10.0 * result.initial_objective;
    const double base_lr = options.step_size / surrogate_curvature(p.x, p.samples);

    for (int it = 0; it < options.iterations; ++it) {
        if (full_batch) {
            const double objective = evaluate(w, b, p.x, p.target, p.offset, p.threshold, time_steps, p.samples, &grad_z);
            if (objective < best) {
                best = objective;
                best_w = w;
                best_b = b;
            }
            if (result.initial_objective > 0.0 && objective > limit) {
                result.diverged = true;
                result.iterations = it;
                result.last_objective = objective;
                result.final_objective = result.initial_objective;
                return result;
            }
            const Matrix gw = grad_z * p.x.transpose();
            const Eigen::VectorXd gb = grad_z.rowwise().sum();
            vw = options.momentum * vw + gw;
            vb = options.momentum * vb + gb;
        } else {
            std::vector<std::size_t> pick;
            pick.reserve(options.batch_size);
            while (pick.size() < options.batch_size) {
                if (cursor == p.samples) {
                    std::shuffle(order.begin(), order.end(), rng);
                    cursor = 0;
                }
                pick.push_back(order[cursor++]);
            }
            const Matrix xb = gather(p.x, pick, p.positions);
            evaluate(w, b, xb, gather(p.target, pick, p.positions), gather(p.offset, pick, p.positions),
                     p.threshold, time_steps, pick.size(), &grad_z);
            vw = options.momentum * vw + grad_z * xb.transpose();
            vb = options.momentum * vb + Eigen::VectorXd(grad_z.rowwise().sum());
        }
        const double lr = 0.5 * base_lr *
                          (1.0 + std::cos(std::numbers::pi * static_cast<double>(it) / options.iterations));
        w -= lr * vw;
        b -= lr * vb;
        if (!w.allFinite() || !b.allFinite())
            throw NumericError("weight calibration produced non-finite parameters at iteration " + std::to_string(it));

        if (!full_batch && ((it + 1) % options.eval_interval == 0 || it + 1 == options.iterations)) {
            const double objective = full_objective(w, b);
            if (result.initial_objective > 0.0 && objective > limit) {
                result.diverged = true;
                result.iterations = it + 1;
                result.last_objective = objective;
                result.final_objective = result.initial_objective;
                return result;
            }
            if (objective < best) {
                best = objective;
                best_w = w;
                best_b = b;
            }
        }
    }
    result.iterations = options.iterations;
    result.last_objective = full_objective(w, b);
    if (result.last_objective < best) {
        best = result.last_objective;
        best_w = w;
        best_b = b;
    }
    result.final_objective = best;
    result.weights = to_tensor(best_w, w0.shape());
    result.bias = to_tensor(best_b);
    return result;
}

Layer with_params(const Layer& affine, Tensor weights, Tensor bias) {
    Layer out = affine;
    if (auto* l = std::get_if<LinearLayer>(&out)) {
        l->weights = std::move(weights);
        l->bias = std::move(bias);
    } else {
        auto& c = std::get<Conv2dLayer>(out);
        c.weights = std::move(weights);
        c.bias = std::move(bias);
    }
    return out;
}

}  // namespace

double weight_objective(const Layer& affine, const Tensor& input, const Tensor& target, int time_steps,
                        const Tensor& threshold) {
    const AffineProblem p = make_problem(affine, input, target, time_steps, threshold, nullptr);
    return evaluate(weight_matrix(affine_weights(affine)), bias_vector(affine_bias(affine)), p.x, p.target,
                    p.offset, p.threshold, time_steps, p.samples, nullptr);
}

AffineGrads weight_objective_gradient(const Layer& affine, const Tensor& input, const Tensor& target,
                                      int time_steps, const Tensor& threshold) {
    const AffineProblem p = make_problem(affine, input, target, time_steps, threshold, nullptr);
    Matrix grad_z;
    evaluate(weight_matrix(affine_weights(affine)), bias_vector(affine_bias(affine)), p.x, p.target, p.offset,
             p.threshold, time_steps, p.samples, &grad_z);
    AffineGrads g;
    g.weights = to_tensor(Matrix(grad_z * p.x.transpose()), affine_weights(affine).shape());
    g.bias = to_tensor(Eigen::VectorXd(grad_z.rowwise().sum()));
    return g;
}

WeightCalibrationResult calibrate_weights(const Layer& affine, const Tensor& input, const Tensor& target,
                                          int time_steps, const Tensor& threshold,
                                          const WeightCalibrationOptions& options) {
    return calibrate_impl(affine, input, target, time_steps, threshold, nullptr, options);
}

Conversion prepare_conversion(const Network& ann, const Tensor& threshold_set, int time_steps,
                              const ThresholdPolicy& policy, RoundMode round_mode) {
    if (time_steps < 1) throw UsageError("time steps must be >= 1, got " + std::to_string(time_steps));
    if (threshold_set.rank() == 0 || threshold_set.dim(0) == 0)
        throw ShapeError("threshold search needs at least one calibration sample");
    Conversion out;
    out.ann = fold_bn(ann);
    const auto relus = out.ann.relu_indices();
    const ActivationTrace trace = forward(out.ann, threshold_set);
    out.config.time_steps = time_steps;
    out.config.round_mode = round_mode;
    for (std::size_t k = 0; k < relus.size(); ++k) {
        out.ann.spiking_affine_index(k);  // checks the ReLU follows an affine layer
        try {
            out.thresholds.push_back(search_threshold(trace.outputs[relus[k] - 1], time_steps, policy));
        } catch (const Error& e) {
            throw ShapeError("layer " + std::to_string(relus[k] - 1) + ": " + e.what());
        }
        out.config.thresholds.push_back(out.thresholds.back().threshold);
    }
    out.snn = round_mode == RoundMode::round ? apply_round_bias_shift(out.ann, out.config) : out.ann;
    return out;
}

std::string LayerCalibrationLog::to_json() const {
    nlohmann::json j;
    j["position"] = position;
    j["layer"] = layer;
    j["threshold"] = threshold.storage();
    j["initial_mse"] = initial_mse;
    j["final_mse"] = final_mse;
    j["bias_correction_norm"] = bias_correction_norm;
    j["potential_norm"] = potential_norm;
    j["rejected"] = rejected;
    if (weights_calibrated) {
        j["weights"] = {{"initial_objective", weights.initial_objective},
                        {"final_objective", weights.final_objective},
                        {"last_objective", weights.last_objective},
                        {"iterations", weights.iterations},
                        {"diverged", weights.diverged}};
    }
    return j.dump();
}

namespace {

double mean_square(const Tensor& t) { return t.empty() ? 0.0 : t.squared_norm() / static_cast<double>(t.size()); }

// Bias offset between the IF network and its ClipRound model: IF dynamics with bias b realize
// clip_round(z + b - V/2T), whatever the rounding mode used to build b.
Tensor model_offset(const Tensor& threshold, std::size_t channels, int time_steps) {
    Tensor out({channels});
    for (std::size_t c = 0; c < channels; ++c) out[c] = channel_value(threshold, c) / (2.0 * time_steps);
    return out;
}

}  // namespace

PipelineResult run_pipeline(const Conversion& conversion, const Tensor& calib, const CalibrationConfig& cfg) {
    cfg.validate();
    PipelineResult out{conversion.snn, conversion.config, {}};
    out.config.validate(out.net);
    if (calib.rank() == 0 || calib.dim(0) == 0) throw ShapeError("calibration needs at least one sample");
    const auto relus = out.net.relu_indices();
    const auto positions = relus.size();
    if (out.config.initial_potentials.empty()) out.config.initial_potentials.assign(positions, Tensor());
    const int t = out.config.time_steps;

    const Tensor bias_batch = calib.slice_batch(0, std::min(cfg.bias_samples, calib.dim(0)));
    const ActivationTrace ann_bias = forward(conversion.ann, bias_batch);
    Tensor weight_set;
    ActivationTrace ann_weight;
    if (cfg.pipeline == Pipeline::advanced) {
        weight_set = calib.slice_batch(0, std::min(cfg.weight_samples, calib.dim(0)));
        ann_weight = forward(conversion.ann, weight_set);
    }

    for (std::size_t k = 0; k < positions; ++k) {
        const auto index = out.net.spiking_affine_index(k);
        LayerCalibrationLog log;
        log.position = k;
        log.layer = index;
        log.threshold = out.config.thresholds[k];
        auto observed_error = [&] {
            SimulationOptions options;
            options.last_position = k;
            const SimulationTrace trace = simulate(out.net, out.config, bias_batch, options);
            return ann_bias.outputs[relus[k]] - trace.average_output(k);
        };
        Tensor error = observed_error();
        log.initial_mse = mean_square(error);
        double current = log.initial_mse;
        // Keeps a correction only if it does not raise the measured error; quantization can make
        // a correction that is right on average overshoot.
        auto keep_if_better = [&](const char* step, auto&& apply) {
            const Layer saved_layer = out.net.layer(index);
            const Tensor saved_potential = out.config.initial_potentials[k];
            apply();
            const double mse = mean_square(observed_error());
            if (mse <= current) {
                current = mse;
                return;
            }
            out.net.set_affine(index, affine_weights(saved_layer), affine_bias(saved_layer));
            out.config.initial_potentials[k] = saved_potential;
            log.rejected.emplace_back(step);
        };

        if (cfg.pipeline == Pipeline::light) {
            keep_if_better("bias", [&] {
                const Tensor& bias = affine_bias(out.net.layer(index));
                Tensor corrected = calibrate_bias(bias, error);
                log.bias_correction_norm = std::sqrt((corrected - bias).squared_norm());
                out.net.set_affine(index, affine_weights(out.net.layer(index)), std::move(corrected));
            });
        } else if (cfg.pipeline == Pipeline::advanced) {
            auto calibrate_layer_weights = [&] {
                Tensor input;
                if (k == 0) {
                    input = weight_set;
                    for (std::size_t i = 0; i < index; ++i) input = apply_layer(out.net.layer(i), input);
                } else {
                    SimulationOptions options;
                    options.last_position = k - 1;
                    const SimulationTrace trace = simulate(out.net, out.config, weight_set, options);
                    input = propagate_to_next_affine(out.net, k - 1, trace.average_output(k - 1));
                }
                const Layer& layer = out.net.layer(index);
                const Tensor offset = model_offset(out.config.thresholds[k], affine_bias(layer).size(), t);
                const Layer model = with_params(layer, affine_weights(layer), affine_bias(layer) - offset);
                WeightCalibrationResult result =
                    calibrate_impl(model, input, ann_weight.outputs[relus[k]], t, out.config.thresholds[k],
                                   &out.config.initial_potentials[k], cfg.weights);
                out.net.set_affine(index, std::move(result.weights), result.bias + offset);
                result.weights = Tensor();
                result.bias = Tensor();
                log.weights = std::move(result);
                log.weights_calibrated = true;
            };
            auto calibrate_layer_potential = [&] {
                // Re-measure the error the potential has to absorb, starting from zero potential.
                const Tensor saved = out.config.initial_potentials[k];
                out.config.initial_potentials[k] = Tensor();
                const Tensor e = observed_error();
                out.config.initial_potentials[k] = saved;
                Tensor v0 = calibrate_potential(e, t, cfg.potential_mode);
                log.potential_norm = std::sqrt(v0.squared_norm());
                out.config.initial_potentials[k] = std::move(v0);
            };
            if (cfg.order == AdvancedOrder::weights_then_potential) {
                keep_if_better("weights", calibrate_layer_weights);
                keep_if_better("potential", calibrate_layer_potential);
            } else {
                keep_if_better("potential", calibrate_layer_potential);
                keep_if_better("weights", calibrate_layer_weights);
            }
        }
        log.final_mse = current;
        out.log.push_back(std::move(log));
    }
    return out;
}

}  // namespace spikecalib
