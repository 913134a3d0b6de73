#include "spikecalib/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <sstream>

#include "json.hpp"
#include "spikecalib/error.hpp"
#include "spikecalib/parallel.hpp"
#include "spikecalib/threshold.hpp"

namespace spikecalib {

std::optional<double> relative_error(const Tensor& x, const Tensor& s) {
    if (x.shape() != s.shape())
        throw ShapeError("relative error: " + to_string(x.shape()) + " vs " + to_string(s.shape()));
    const double denominator = x.squared_norm();
    if (denominator == 0.0) return std::nullopt;
    return (x - s).squared_norm() / denominator;
}

std::vector<std::optional<double>> relative_error_per_channel(const Tensor& x, const Tensor& s) {
    if (x.shape() != s.shape())
        throw ShapeError("relative error: " + to_string(x.shape()) + " vs " + to_string(s.shape()));
    if (x.rank() < 2) throw ShapeError("per-channel relative error needs N x C (x H x W), got " + to_string(x.shape()));
    const auto n = x.dim(0);
    const auto channels = x.dim(1);
    const auto inner = channels ? x.size() / std::max<std::size_t>(1, n * channels) : 0;
    std::vector<double> num(channels, 0.0), den(channels, 0.0);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t i = 0; i < inner; ++i) {
                const auto idx = (b * channels + c) * inner + i;
                const double d = x[idx] - s[idx];
                num[c] += d * d;
                den[c] += x[idx] * x[idx];
            }
    std::vector<std::optional<double>> out(channels);
    for (std::size_t c = 0; c < channels; ++c)
        if (den[c] > 0.0) out[c] = num[c] / den[c];
    return out;
}

ErrorTerms decompose_error(const Layer& affine, const Tensor& ann_input, const Tensor& snn_input, int time_steps,
                           const Tensor& threshold, RoundMode mode) {
    if (!is_affine(affine)) throw ShapeError("error decomposition needs a linear or conv2d layer");
    if (ann_input.shape() != snn_input.shape())
        throw ShapeError("error decomposition: ANN input " + to_string(ann_input.shape()) + " vs SNN input " +
                         to_string(snn_input.shape()));
    const Tensor zx = apply_layer(affine, ann_input);
    const Tensor zs = apply_layer(affine, snn_input);
    const Tensor rs = relu(zs);
    const Tensor q = mode == RoundMode::round ? clip_round(zs, time_steps, threshold)
                                              : clip_floor(zs, time_steps, threshold);
    ErrorTerms out;
    out.e_r = relu(zx) - rs;
    out.e_c = rs - q;
    out.e = out.e_r + out.e_c;
    return out;
}

double weighted_local_error(const std::vector<ErrorTerms>& decomposition) {
    const auto n = decomposition.size();
    double total = 0.0;
    for (std::size_t l = 1; l <= n; ++l)
        total += std::ldexp(decomposition[l - 1].e_c.squared_norm(), static_cast<int>(n - l + 1));
    return total;
}

Network unroll_to_dense(const Network& net) {
    if (net.has_batchnorm()) throw ShapeError("unroll_to_dense: fold batchnorm first");
    std::vector<Layer> out;
    std::vector<Layer> group;
    Shape shape;  // per-sample input shape of the current group
    auto flush = [&](bool allow_empty) {
        if (group.empty()) {
            if (allow_empty) return;
            throw ShapeError("unroll_to_dense: ReLU without a preceding linear map");
        }
        const auto d = element_count(shape);
        Shape batch_shape{d + 1};
        batch_shape.insert(batch_shape.end(), shape.begin(), shape.end());
        Tensor probe(batch_shape);
        for (std::size_t i = 0; i < d; ++i) probe[i * d + i] = 1.0;  // row d stays zero
        for (const Layer& l : group) probe = apply_layer(l, probe);
        const auto o = probe.size() / (d + 1);
        Tensor w({o, d}), b({o});
        for (std::size_t j = 0; j < o; ++j) {
            b[j] = probe[d * o + j];
            for (std::size_t i = 0; i < d; ++i) w[j * d + i] = probe[i * o + j] - b[j];
        }
        out.emplace_back(LinearLayer{std::move(w), std::move(b)});
        group.clear();
    };
    for (std::size_t i = 0; i < net.size(); ++i) {
        const Layer& l = net.layer(i);
        if (std::holds_alternative<ReluLayer>(l)) {
            flush(false);
            out.emplace_back(ReluLayer{});
        } else {
            if (group.empty()) shape = net.layer_input_shape(i);
            group.push_back(l);
        }
    }
    flush(true);
    return Network(Shape{element_count(net.input_shape())}, std::move(out));
}

namespace {

struct DenseLayer {
    Eigen::MatrixXd w;
    Eigen::VectorXd b;
    bool relu = false;
};

std::vector<DenseLayer> dense_chain(const Network& net) {
    std::vector<DenseLayer> chain;
    std::size_t width = element_count(net.input_shape());
    if (width > kHessianWidthLimit)
        throw ShapeError("input width " + std::to_string(width) + " exceeds the Hessian limit of " +
                         std::to_string(kHessianWidthLimit));
    for (std::size_t i = 0; i < net.size(); ++i) {
        const Layer& l = net.layer(i);
        if (const auto* lin = std::get_if<LinearLayer>(&l)) {
            DenseLayer d;
            const auto o = lin->weights.dim(0);
            const auto in = lin->weights.dim(1);
            d.w = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                lin->weights.storage().data(), static_cast<long>(o), static_cast<long>(in));
            d.b = Eigen::Map<const Eigen::VectorXd>(lin->bias.storage().data(), static_cast<long>(o));
            if (o > kHessianWidthLimit)
                throw ShapeError("layer " + std::to_string(i) + " width " + std::to_string(o) +
                                 " exceeds the Hessian limit of " + std::to_string(kHessianWidthLimit));
            chain.push_back(std::move(d));
        } else if (std::holds_alternative<ReluLayer>(l)) {
            if (chain.empty() || chain.back().relu)
                throw ShapeError("layer " + std::to_string(i) + ": ReLU must follow a linear layer");
            chain.back().relu = true;
        } else if (!std::holds_alternative<FlattenLayer>(l)) {
            throw ShapeError("layer " + std::to_string(i) + " (" + kind_name(kind_of(l)) +
                             ") is not dense; unroll the network first");
        }
    }
    if (chain.empty()) throw ShapeError("network has no linear layer");
    return chain;
}

Eigen::VectorXd sample_vector(const Tensor& sample, long width) {
    if (static_cast<long>(sample.size()) != width)
        throw ShapeError("sample has " + std::to_string(sample.size()) + " values, network expects " +
                         std::to_string(width));
    return Eigen::Map<const Eigen::VectorXd>(sample.storage().data(), width);
}

Eigen::VectorXd apply_dense(const DenseLayer& d, const Eigen::VectorXd& a) {
    Eigen::VectorXd z = d.w * a + d.b;
    if (d.relu) z = z.cwiseMax(0.0);
    return z;
}

Eigen::VectorXd run_from(const std::vector<DenseLayer>& chain, std::size_t first, Eigen::VectorXd a) {
    for (std::size_t l = first; l < chain.size(); ++l) a = apply_dense(chain[l], a);
    return a;
}

Eigen::MatrixXd fd_hessian(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& at,
                           double h) {
    const long n = at.size();
    Eigen::MatrixXd out(n, n);
    for (long i = 0; i < n; ++i)
        for (long j = i; j < n; ++j) {
            auto eval = [&](double si, double sj) {
                Eigen::VectorXd p = at;
                p(i) += si * h;
                p(j) += sj * h;
                return f(p);
            };
            const double v = (eval(1, 1) - eval(1, -1) - eval(-1, 1) + eval(-1, -1)) / (4.0 * h * h);
            out(i, j) = out(j, i) = v;
        }
    return out;
}

double relative_gap(const Eigen::MatrixXd& approx, const Eigen::MatrixXd& exact) {
    const double scale = std::max(exact.norm(), 1e-12);
    return (approx - exact).norm() / scale;
}

}  // namespace

HessianStack hessian_stack(const Network& dense, const Tensor& sample) {
    const auto chain = dense_chain(dense);
    const auto n = chain.size();
    std::vector<Eigen::VectorXd> pre(n);
    Eigen::VectorXd a = sample_vector(sample, chain.front().w.cols());
    HessianStack stack;
    stack.masks.resize(n);
    for (std::size_t l = 0; l < n; ++l) {
        pre[l] = chain[l].w * a + chain[l].b;
        stack.masks[l] = chain[l].relu ? Eigen::VectorXd((pre[l].array() > 0.0).cast<double>())
                                       : Eigen::VectorXd::Ones(pre[l].size());
        a = chain[l].relu ? Eigen::VectorXd(pre[l].cwiseMax(0.0)) : pre[l];
    }
    stack.output.resize(n);
    stack.preactivation.resize(n);
    stack.output[n - 1] = 2.0 * Eigen::MatrixXd::Identity(a.size(), a.size());
    for (std::size_t l = n; l-- > 0;) {
        const auto& mask = stack.masks[l];
        stack.preactivation[l] = mask.asDiagonal() * stack.output[l] * mask.asDiagonal();
        const Eigen::MatrixXd back = chain[l].w.transpose() * stack.preactivation[l] * chain[l].w;
        if (l > 0)
            stack.output[l - 1] = back;
        else
            stack.input = back;
    }
    return stack;
}

// Largest step that keeps every downstream ReLU on its side when the input of layer `first`
// moves by at most 2h in each coordinate; piecewise-quadratic L is then differenced exactly.
double kink_safe_step(const std::vector<DenseLayer>& chain, std::size_t first, const std::vector<Eigen::VectorXd>& pre,
                      double step) {
    double gain = 2.0;
    double h = step;
    for (std::size_t l = first; l < chain.size(); ++l) {
        gain *= chain[l].w.cwiseAbs().rowwise().sum().maxCoeff();
        if (chain[l].relu && gain > 0.0) h = std::min(h, 0.5 * pre[l].cwiseAbs().minCoeff() / gain);
    }
    return std::max(h, 1e-9);
}

double hessian_fd_discrepancy(const Network& dense, const Tensor& sample, const HessianStack& stack, double step) {
    const auto chain = dense_chain(dense);
    const auto n = chain.size();
    const Eigen::VectorXd x0 = sample_vector(sample, chain.front().w.cols());
    const Eigen::VectorXd target = run_from(chain, 0, x0);
    auto loss = [&](const Eigen::VectorXd& out) { return (target - out).squaredNorm(); };
    std::vector<Eigen::VectorXd> pre(n), post(n);
    Eigen::VectorXd a = x0;
    for (std::size_t l = 0; l < n; ++l) {
        pre[l] = chain[l].w * a + chain[l].b;
        post[l] = a = apply_dense(chain[l], a);
    }

    double worst = relative_gap(fd_hessian([&](const Eigen::VectorXd& v) { return loss(run_from(chain, 0, v)); }, x0,
                                           kink_safe_step(chain, 0, pre, step)),
                                stack.input);
    for (std::size_t l = 0; l < n; ++l) {
        const bool relu = chain[l].relu;
        auto from_pre = [&, l, relu](const Eigen::VectorXd& v) {
            return loss(run_from(chain, l + 1, relu ? Eigen::VectorXd(v.cwiseMax(0.0)) : v));
        };
        auto from_out = [&, l](const Eigen::VectorXd& v) { return loss(run_from(chain, l + 1, v)); };
        const double h_next = kink_safe_step(chain, l + 1, pre, step);
        // Differencing through this layer's own ReLU also needs its units kept on their side.
        const double h_pre = relu ? std::max(std::min(h_next, 0.5 * pre[l].cwiseAbs().minCoeff()), 1e-9) : h_next;
        worst = std::max(worst, relative_gap(fd_hessian(from_pre, pre[l], h_pre), stack.preactivation[l]));
        worst = std::max(worst, relative_gap(fd_hessian(from_out, post[l], h_next), stack.output[l]));
    }
    return worst;
}

BoundCheck check_bound(const Network& dense, const Tensor& sample, int time_steps,
                       const std::vector<Tensor>& thresholds, RoundMode mode) {
    if (time_steps < 1) throw UsageError("time steps must be >= 1");
    const auto chain = dense_chain(dense);
    const auto n = chain.size();
    const auto relus = static_cast<std::size_t>(std::count_if(chain.begin(), chain.end(), [](const DenseLayer& d) { return d.relu; }));
    if (thresholds.size() != relus)
        throw ShapeError("bound check: " + std::to_string(thresholds.size()) + " thresholds for " +
                         std::to_string(relus) + " spiking layers");

    Eigen::VectorXd x = sample_vector(sample, chain.front().w.cols());
    Eigen::VectorXd s = x;
    std::vector<Eigen::VectorXd> slopes(n), local(n);
    BoundCheck out;
    std::size_t position = 0;
    for (std::size_t l = 0; l < n; ++l) {
        const Eigen::VectorXd zx = chain[l].w * x + chain[l].b;
        const Eigen::VectorXd zs = chain[l].w * s + chain[l].b;
        const long w = zx.size();
        slopes[l] = Eigen::VectorXd::Ones(w);
        local[l] = Eigen::VectorXd::Zero(w);
        if (!chain[l].relu) {
            x = zx;
            s = zs;
            continue;
        }
        const Tensor& v = thresholds[position++];
        if (!(v.size() == 1 || static_cast<long>(v.size()) == w))
            throw ShapeError("bound check: threshold of layer " + std::to_string(l) + " has " +
                             std::to_string(v.size()) + " entries for width " + std::to_string(w));
        Eigen::VectorXd q(w);
        for (long i = 0; i < w; ++i) {
            const double vi = channel_value(v, static_cast<std::size_t>(i));
            q(i) = mode == RoundMode::round ? clip_round(zs(i), time_steps, vi) : clip_floor(zs(i), time_steps, vi);
            const double rx = std::max(zx(i), 0.0);
            const double rs = std::max(zs(i), 0.0);
            if ((zx(i) > 0.0) != (zs(i) > 0.0)) ++out.pattern_mismatches;
            slopes[l](i) = zx(i) == zs(i) ? (zx(i) > 0.0 ? 1.0 : 0.0) : (rx - rs) / (zx(i) - zs(i));
            local[l](i) = rs - q(i);
        }
        x = zx.cwiseMax(0.0);
        s = q;
    }
    const Eigen::VectorXd e = x - s;
    out.lhs = 2.0 * e.squaredNorm();

    const HessianStack ann = hessian_stack(dense, sample);
    Eigen::MatrixXd g = 2.0 * Eigen::MatrixXd::Identity(e.size(), e.size());
    out.layer_terms.assign(n, 0.0);
    for (std::size_t l = n; l-- > 0;) {
        const double weight = std::ldexp(1.0, static_cast<int>(n - l));  // 2^(n - l' + 1) with l' = l + 1
        out.layer_terms[l] = weight * local[l].dot(g * local[l]);
        out.rhs += out.layer_terms[l];
        out.rhs_ann_trace += weight * local[l].dot(ann.output[l] * local[l]);
        const Eigen::MatrixXd dw = slopes[l].asDiagonal() * chain[l].w;
        g = dw.transpose() * g * dw;
    }
    out.holds = out.lhs <= out.rhs + 1e-8;
    return out;
}

void BoundTrialOptions::validate() const {
    if (min_depth < 1 || max_depth < min_depth)
        throw UsageError("bound trials: depth range [" + std::to_string(min_depth) + ", " + std::to_string(max_depth) +
                         "] is empty");
    if (max_width < 1 || max_width > kHessianWidthLimit)
        throw UsageError("bound trials: width must be in [1, " + std::to_string(kHessianWidthLimit) + "], got " +
                         std::to_string(max_width));
    if (time_steps.empty()) throw UsageError("bound trials: no time steps given");
    for (int t : time_steps)
        if (t < 1) throw UsageError("bound trials: time steps must be >= 1");
}

std::vector<BoundTrial> run_bound_trials(const BoundTrialOptions& options) {
    options.validate();
    std::vector<BoundTrial> trials(options.trials);
    parallel_for(options.trials, [&](std::size_t index) {
        std::seed_seq seq{static_cast<std::uint32_t>(options.seed), static_cast<std::uint32_t>(options.seed >> 32),
                          static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
        std::mt19937_64 rng(seq);
        std::uniform_int_distribution<std::size_t> depth_dist(options.min_depth, options.max_depth);
        std::uniform_int_distribution<std::size_t> width_dist(1, options.max_width);
        std::uniform_int_distribution<std::size_t> t_dist(0, options.time_steps.size() - 1);
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        std::normal_distribution<double> normal(0.0, 1.0);

        BoundTrial trial;
        trial.index = index;
        const auto depth = depth_dist(rng);
        trial.widths.push_back(width_dist(rng));
        for (std::size_t l = 0; l < depth; ++l) trial.widths.push_back(width_dist(rng));
        trial.time_steps = options.time_steps[t_dist(rng)];

        std::vector<Layer> layers;
        for (std::size_t l = 0; l < depth; ++l) {
            const auto in = trial.widths[l];
            const auto o = trial.widths[l + 1];
            Tensor w({o, in}), b({o});
            for (double& v : w.storage()) v = normal(rng) * 1.5 / std::sqrt(static_cast<double>(in));
            for (double& v : b.storage()) v = 0.2 * normal(rng);
            layers.emplace_back(LinearLayer{std::move(w), std::move(b)});
            if (l + 1 < depth) layers.emplace_back(ReluLayer{});
        }
        const Network net(Shape{trial.widths[0]}, std::move(layers));
        // Inputs with a pre-activation within 1e-3 of a kink are redrawn, keeping finite
        // differences well conditioned.
        Tensor sample({1, trial.widths[0]});
        for (int attempt = 0; attempt < 100; ++attempt) {
            for (double& v : sample.storage()) v = unit(rng);
            const ActivationTrace probe = forward(net, sample);
            bool clear = true;
            for (std::size_t r : net.relu_indices())
                for (double z : probe.outputs[r - 1].storage()) clear = clear && std::abs(z) >= 1e-3;
            if (clear) break;
        }

        // Thresholds scale with the ANN activations so clipping and rounding both occur.
        const ActivationTrace trace = forward(net, sample);
        std::vector<Tensor> thresholds;
        for (std::size_t r : net.relu_indices()) {
            const Tensor& act = trace.outputs[r];
            const double top = std::max(act.max(), 0.1);
            Tensor v = unit(rng) < 0.5 ? Tensor({1}) : Tensor({act.size()});
            for (double& x : v.storage()) x = top * (0.3 + 1.2 * unit(rng));
            thresholds.push_back(std::move(v));
        }
        trial.result = check_bound(net, sample, trial.time_steps, thresholds, options.round_mode);
        trial.hessian_fd_error = hessian_fd_discrepancy(net, sample, hessian_stack(net, sample));
        trials[index] = std::move(trial);
    });
    return trials;
}

std::size_t affine_macs(const Network& net, std::size_t layer) {
    const Layer& l = net.layer(layer);
    if (const auto* lin = std::get_if<LinearLayer>(&l)) return lin->weights.size();
    if (const auto* conv = std::get_if<Conv2dLayer>(&l)) {
        const Shape& out = net.output_shape(layer);
        return conv->weights.size() * out[1] * out[2];
    }
    return 0;
}

Tensor position_fanout(const Network& net, std::size_t position) {
    const auto relus = net.relu_indices();
    const std::size_t r = relus.at(position);
    // Walk forward to the next affine layer, then push its per-input synapse counts back.
    std::size_t next = r + 1;
    while (next < net.size() && !is_affine(net.layer(next))) ++next;
    const Shape& shape = net.output_shape(r);
    if (next == net.size()) return Tensor(shape);

    const Shape& in = net.layer_input_shape(next);
    Shape batch_in{1};
    batch_in.insert(batch_in.end(), in.begin(), in.end());
    Tensor counts;
    if (const auto* lin = std::get_if<LinearLayer>(&net.layer(next))) {
        counts = Tensor(batch_in, static_cast<double>(lin->weights.dim(0)));
    } else {
        const auto& conv = std::get<Conv2dLayer>(net.layer(next));
        const Shape& out = net.output_shape(next);
        Shape batch_out{1};
        batch_out.insert(batch_out.end(), out.begin(), out.end());
        const Tensor ones_w(conv.weights.shape(), 1.0);
        counts = conv2d_backward(Tensor(batch_in), ones_w, Tensor(batch_out, 1.0), conv.stride, conv.padding).input;
    }
    for (std::size_t i = next; i-- > r + 1;) {
        const Layer& l = net.layer(i);
        const Shape& li = net.layer_input_shape(i);
        Shape batch_li{1};
        batch_li.insert(batch_li.end(), li.begin(), li.end());
        if (const auto* pool = std::get_if<AvgPool2dLayer>(&l)) {
            // Each pooled input inherits the targets of every window it belongs to.
            counts = avgpool2d_backward(counts, batch_li, pool->window, pool->stride) *
                     static_cast<double>(pool->window * pool->window);
        } else {
            counts = counts.reshaped(batch_li);
        }
    }
    return counts.reshaped(shape);
}

EnergyEstimate estimate_energy(const Network& net, const SimulationTrace& trace, const EnergyCosts& costs) {
    const auto relus = net.relu_indices();
    if (trace.positions() != relus.size())
        throw ShapeError("energy: trace has " + std::to_string(trace.positions()) + " positions, network has " +
                         std::to_string(relus.size()));
    const double mac = costs.mul + costs.add;
    EnergyEstimate out;
    std::size_t first = net.size();
    for (std::size_t i = 0; i < net.size(); ++i) {
        if (!is_affine(net.layer(i))) continue;
        if (first == net.size()) first = i;
        out.ann_energy += static_cast<double>(affine_macs(net, i)) * mac;
    }
    if (first < net.size())
        out.first_layer_energy = static_cast<double>(affine_macs(net, first)) * trace.time_steps * mac;
    out.fanout_adds.assign(relus.size(), 0.0);
    for (std::size_t k = 0; k < relus.size(); ++k) {
        const Tensor& m = trace.spike_counts[k];
        const auto n = m.rank() ? m.dim(0) : 0;
        if (n == 0) continue;
        const Tensor fan = position_fanout(net, k);
        const auto per = fan.size();
        if (m.size() != n * per) throw ShapeError("energy: spike counts do not match position " + std::to_string(k));
        double adds = 0.0, spikes = 0.0;
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < per; ++i) {
                adds += m[b * per + i] * fan[i];
                spikes += m[b * per + i];
            }
        out.fanout_adds[k] = adds / static_cast<double>(n);
        out.spikes_per_sample += spikes / static_cast<double>(n);
        out.spike_energy += out.fanout_adds[k] * costs.add;
    }
    out.snn_energy = out.first_layer_energy + out.spike_energy;
    out.ratio = out.ann_energy > 0.0 ? out.snn_energy / out.ann_energy : 0.0;
    return out;
}

Summary summarize(const std::vector<std::optional<double>>& values) {
    Summary s;
    std::vector<double> present;
    for (const auto& v : values) {
        if (v)
            present.push_back(*v);
        else
            ++s.not_applicable;
    }
    s.count = present.size();
    if (present.empty()) return s;
    s.p5 = percentile_of(present, 5.0);
    s.p50 = percentile_of(present, 50.0);
    s.p95 = percentile_of(present, 95.0);
    double total = 0.0;
    for (double v : present) total += v;
    s.mean = total / static_cast<double>(present.size());
    return s;
}

namespace {

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

std::string csv_value(const std::optional<double>& v) {
    if (!v) return "NA";
    std::ostringstream os;
    os.precision(17);
    os << *v;
    return os.str();
}

std::string csv_value(double v) { return csv_value(std::optional<double>(v)); }

}  // namespace

std::string ConversionReport::to_json() const {
    nlohmann::json j;
    j["layers"] = nlohmann::json::array();
    for (const auto& l : layers) {
        const auto& s = l.channel_relative_error;
        j["layers"].push_back({{"position", l.position},
                               {"layer", l.layer},
                               {"threshold", l.threshold.storage()},
                               {"relative_error", optional_json(l.relative_error)},
                               {"channel_relative_error",
                                {{"p5", s.p5},
                                 {"p50", s.p50},
                                 {"p95", s.p95},
                                 {"mean", s.mean},
                                 {"count", s.count},
                                 {"not_applicable", s.not_applicable}}},
                               {"mse", l.mse},
                               {"firing_rate", l.firing_rate},
                               {"e_norm", l.e_norm},
                               {"e_r_norm", l.e_r_norm},
                               {"e_c_norm", l.e_c_norm}});
    }
    j["output_relative_error"] = optional_json(output_relative_error);
    j["energy"] = {{"ann", energy.ann_energy},
                   {"snn", energy.snn_energy},
                   {"ratio", energy.ratio},
                   {"first_layer", energy.first_layer_energy},
                   {"spikes", energy.spike_energy},
                   {"spikes_per_sample", energy.spikes_per_sample},
                   {"units", "arbitrary units per sample"}};
    j["ann_accuracy"] = optional_json(ann_accuracy);
    j["snn_accuracy"] = optional_json(snn_accuracy);
    j["provenance"] = provenance.empty() ? nlohmann::json::object() : nlohmann::json::parse(provenance);
    return j.dump(2);
}

std::string ConversionReport::to_csv() const {
    std::ostringstream os;
    os << "position,layer,relative_error,channel_p5,channel_p50,channel_p95,channel_mean,channels_na,mse,firing_rate,"
          "e_norm,e_r_norm,e_c_norm\n";
    for (const auto& l : layers) {
        const auto& s = l.channel_relative_error;
        const bool any = s.count > 0;
        auto stat = [&](double v) { return any ? csv_value(v) : std::string("NA"); };
        os << l.position << ',' << l.layer << ',' << csv_value(l.relative_error) << ',' << stat(s.p5) << ','
           << stat(s.p50) << ',' << stat(s.p95) << ',' << stat(s.mean) << ',' << s.not_applicable << ','
           << csv_value(l.mse) << ',' << csv_value(l.firing_rate) << ',' << csv_value(l.e_norm) << ','
           << csv_value(l.e_r_norm) << ',' << csv_value(l.e_c_norm) << '\n';
    }
    os << "\nmetric,value\n";
    os << "output_relative_error," << csv_value(output_relative_error) << '\n';
    os << "ann_energy," << csv_value(energy.ann_energy) << '\n';
    os << "snn_energy," << csv_value(energy.snn_energy) << '\n';
    os << "energy_ratio," << csv_value(energy.ratio) << '\n';
    os << "ann_accuracy," << csv_value(ann_accuracy) << '\n';
    os << "snn_accuracy," << csv_value(snn_accuracy) << '\n';
    return os.str();
}

ConversionReport diagnose(const Network& ann, const Network& snn, const SpikingConfig& config, const Tensor& batch,
                          const std::vector<std::uint32_t>& labels) {
    if (batch.rank() == 0 || batch.dim(0) == 0) throw FormatError("diagnose: empty dataset");
    config.validate(snn);
    const ActivationTrace ann_trace = forward(ann, batch);
    const SimulationTrace sim = simulate(snn, config, batch);
    const auto relus = ann.relu_indices();
    const auto rates = firing_rates(sim);
    ConversionReport report;
    for (std::size_t k = 0; k < relus.size(); ++k) {
        LayerDiagnostics d;
        d.position = k;
        d.layer = ann.spiking_affine_index(k);
        d.threshold = config.thresholds[k];
        const Tensor& x = ann_trace.outputs[relus[k]];
        const Tensor s = sim.average_output(k);
        d.relative_error = relative_error(x, s);
        d.channel_relative_error = summarize(relative_error_per_channel(x, s));
        d.mse = (x - s).squared_norm() / static_cast<double>(std::max<std::size_t>(x.size(), 1));
        d.firing_rate = rates[k];
        const Tensor& x_in = d.layer == 0 ? ann_trace.input : ann_trace.outputs[d.layer - 1];
        Tensor s_in;
        if (k == 0) {
            s_in = x_in;
        } else {
            s_in = propagate_to_next_affine(snn, k - 1, sim.average_output(k - 1));
        }
        const ErrorTerms terms = decompose_error(ann.layer(d.layer), x_in, s_in, config.time_steps, d.threshold);
        d.e_norm = std::sqrt((x - s).squared_norm());
        d.e_r_norm = std::sqrt(terms.e_r.squared_norm());
        d.e_c_norm = std::sqrt(terms.e_c.squared_norm());
        report.layers.push_back(std::move(d));
    }
    report.output_relative_error = relative_error(ann_trace.final_output(), sim.output);
    report.energy = estimate_energy(snn, sim, config.energy);
    if (!labels.empty()) {
        report.ann_accuracy = accuracy(ann_trace.final_output(), labels);
        report.snn_accuracy = accuracy(sim.output, labels);
    }
    return report;
}

}  // namespace spikecalib
