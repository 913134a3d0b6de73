// Acceptance run: one PASS/FAIL line per criterion. Tolerances and fixture settings are fixed here.
// Usage: acceptance [criterion numbers...]   (default: all)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "cli.hpp"
#include "helpers.hpp"
#include "spikecalib/analysis.hpp"
#include "spikecalib/calibration.hpp"
#include "spikecalib/model_io.hpp"
#include "spikecalib/trainer.hpp"

using namespace spikecalib;
using namespace testing;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

// ---- pinned tolerances
constexpr double kExactTol = 1e-12;
constexpr double kFoldTol = 1e-8;
constexpr double kBoundSlack = 1e-8;
constexpr double kHessianTol = 1e-4;
constexpr double kBoundSeconds = 60.0;
constexpr double kMinValidation = 0.98;
constexpr double kAdvancedGainT8 = 0.01;
constexpr double kAnnGapT32 = 0.02;
constexpr double kFixtureSeconds = 15 * 60.0;

// ---- fixture settings
constexpr int kSeeds = 3;
constexpr std::size_t kTrain = 8000, kVal = 1000, kTest = 2000, kCalib = 1024;
constexpr int kEpochs = 8;
const DigitOptions kDigits{16, 0.2, 1.5};
const std::vector<int> kSteps{8, 16, 32};

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Line {
    bool pass = false;
    std::string detail;
};

std::map<int, Line> results;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
    results[id] = {pass, detail};
    std::printf("%s [%d] %s: %s\n", pass ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
    std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

int cli_run(const std::vector<std::string>& args, std::string* out = nullptr) {
    std::ostringstream o, e;
    const int code = cli::run(args, o, e);
    if (out) *out = o.str();
    if (code != 0) std::fprintf(stderr, "%s", e.str().c_str());
    return code;
}

// ---------------------------------------------------------------- 1

void single_layer_equivalence() {
    std::mt19937_64 rng(1001);
    std::uniform_int_distribution<int> steps(1, 64), width(1, 8);
    double worst_floor = 0.0, worst_round = 0.0;
    std::size_t in_range = 0, total = 0;
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t in = width(rng), out = width(rng);
        const int t = steps(rng);
        const Network net({in}, {LinearLayer{random_tensor({out, in}, rng, -1.0, 1.0), random_tensor({out}, rng, -0.5, 0.5)},
                                 ReluLayer{}, LinearLayer{random_tensor({1, out}, rng), Tensor({1})}});
        SpikingConfig cfg;
        cfg.time_steps = t;
        cfg.thresholds.push_back(trial % 2 ? random_tensor({out}, rng, 0.2, 2.0) : random_tensor({1}, rng, 0.2, 2.0));
        const Tensor x = random_tensor({4, in}, rng, -2.0, 2.0);
        const Layer& fc = net.layer(0);
        const Tensor& w = affine_weights(fc);
        const Tensor& b = affine_bias(fc);
        const auto level = [&](std::size_t n, std::size_t o, double shift) {
            double z = b[o];
            for (std::size_t i = 0; i < in; ++i) z += w[o * in + i] * x[n * in + i];
            const double v = cfg.thresholds[0].size() == 1 ? cfg.thresholds[0][0] : cfg.thresholds[0][o];
            const double q = std::clamp(std::floor(t * z / v + shift), 0.0, double(t));
            return v / t * q;
        };
        const SimulationTrace plain = simulate(net, cfg, x);
        const SimulationTrace shifted = simulate(apply_round_bias_shift(net, cfg), cfg, x);
        const Tensor sf = plain.average_output(0), sr = shifted.average_output(0);
        const Tensor& vterm = plain.terminal_potentials[0];
        for (std::size_t n = 0; n < 4; ++n)
            for (std::size_t o = 0; o < out; ++o) {
                const std::size_t e = n * out + o;
                const double v = cfg.thresholds[0].size() == 1 ? cfg.thresholds[0][0] : cfg.thresholds[0][o];
                ++total;
                if (vterm[e] >= 0.0 && vterm[e] < v) ++in_range;
                worst_floor = std::max(worst_floor, std::abs(sf[e] - level(n, o, 0.0)));
                worst_round = std::max(worst_round, std::abs(sr[e] - level(n, o, 0.5)));
            }
    }
    report(1, "single-layer spike equivalence",
           worst_floor <= kExactTol && worst_round <= kExactTol,
           "500 configs, " + std::to_string(total) + " elements (" + std::to_string(in_range) +
               " with terminal potential in [0, V)); max |s - clip_floor| " + fmt("%.2e", worst_floor) +
               ", max |s - clip_round| " + fmt("%.2e", worst_round) + " (tol 1e-12)");
}

// ---------------------------------------------------------------- 2

void bn_folding() {
    std::mt19937_64 rng(1002);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const Network net = random_cnn(rng, true, 1 + trial % 3, 4 + 4 * (trial % 2));
        const Shape& s = net.input_shape();
        const Tensor x = random_tensor({3, s[0], s[1], s[2]}, rng);
        const Tensor a = predict(net, x), b = predict(fold_bn(net), x);
        double scale = 0.0, diff = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            scale = std::max(scale, std::abs(a[i]));
            diff = std::max(diff, std::abs(a[i] - b[i]));
        }
        worst = std::max(worst, diff / std::max(scale, 1e-300));
    }
    report(2, "batchnorm folding", worst <= kFoldTol, "100 conv+BN nets, max relative difference " + fmt("%.2e", worst) + " (tol 1e-8)");
}

// ---------------------------------------------------------------- 3

void bound_check() {
    const auto start = Clock::now();
    std::string out;
    const int code = cli_run({"bound-check"}, &out);
    const double secs = seconds_since(start);
    std::istringstream lines(out);
    std::string line;
    std::size_t trials = 0, holds = 0;
    double worst_fd = 0.0;
    while (std::getline(lines, line)) {
        const json j = json::parse(line);
        if (j.contains("summary")) continue;
        ++trials;
        holds += j["lhs"].get<double>() <= j["rhs"].get<double>() + kBoundSlack;
        worst_fd = std::max(worst_fd, j["hessian_fd_error"].get<double>());
    }
    const bool pass = code == 0 && trials == 100 && holds == 100 && worst_fd <= kHessianTol && secs < kBoundSeconds;
    report(3, "error bound on random nets", pass,
           std::to_string(holds) + "/" + std::to_string(trials) + " hold, max Hessian FD error " + fmt("%.2e", worst_fd) +
               ", " + fmt("%.1f", secs) + " s (limits 1e-4, 60 s)");
}

// ---------------------------------------------------------------- fixture

struct Fixture {
    Network net;
    double validation = 0.0;
    double ann_test = 0.0;
    Dataset train, test;
    Tensor calib;
};

Fixture make_fixture(int seed) {
    Fixture f;
    f.train = make_digits(kTrain, 100 + seed, kDigits);
    const Dataset val = make_digits(kVal, 200 + seed, kDigits);
    f.test = make_digits(kTest, 300 + seed, kDigits);
    TrainConfig cfg;
    cfg.arch = Architecture::cnn_small;
    cfg.epochs = kEpochs;
    cfg.cosine_schedule = true;
    cfg.seed = std::uint64_t(seed);
    const TrainResult r = train_desk_scale(cfg, f.train, val);
    f.net = r.net;
    f.validation = r.validation_accuracy;
    f.ann_test = accuracy(predict(r.net, f.test.samples), f.test.labels);
    f.calib = f.train.samples.slice_batch(0, kCalib);
    return f;
}

CalibrationConfig fixture_calibration(Pipeline p) {
    CalibrationConfig cc;
    cc.pipeline = p;
    cc.weights.step_size = 0.3;
    cc.weights.batch_size = 128;
    return cc;
}

// Mean per-channel relative error of the last spiking layer.
double last_layer_relative_error(const Conversion& conv, const SimulationTrace& trace, const Tensor& batch) {
    const auto relus = conv.ann.relu_indices();
    const Tensor x = forward(conv.ann, batch).outputs[relus.back()];
    return summarize(relative_error_per_channel(x, trace.average_output(relus.size() - 1))).mean;
}

// ---------------------------------------------------------------- 4

void mmse_dominance(const Fixture& f) {
    const Network folded = fold_bn(f.net);
    const ActivationTrace tr = forward(folded, f.calib);
    bool pass = true;
    std::string worst;
    double worst_margin = -1e300;
    for (int t : kSteps)
        for (std::size_t r : folded.relu_indices()) {
            const Tensor& z = tr.outputs[r - 1];
            const auto search = [&](ThresholdMode m) {
                ThresholdPolicy p;
                p.mode = m;
                return search_threshold(z, t, p).mse;
            };
            const double mmse = search(ThresholdMode::mmse);
            const double other = std::min(search(ThresholdMode::max_act), search(ThresholdMode::percentile));
            pass = pass && mmse <= other;
            if (mmse - other > worst_margin) {
                worst_margin = mmse - other;
                worst = "T=" + std::to_string(t) + " layer " + std::to_string(r - 1);
            }
        }
    report(4, "MMSE threshold dominance", pass,
           "layer-wise MSE vs max-act and p99.99 on " + std::to_string(kCalib) +
               " calibration samples, every layer, T in {8,16,32}; tightest case " + worst + " (mmse - best other " +
               fmt("%.3e", worst_margin) + ")");
}

// ---------------------------------------------------------------- 5, 6, 8, 9

struct SweepResult {
    std::map<int, std::map<Pipeline, double>> accuracy;  // T -> pipeline -> mean accuracy
    std::map<Pipeline, double> relative_error_t16;
    std::map<Pipeline, double> energy_t16;
    std::map<int, double> light_t16_by_samples;
    double validation_min = 1.0;
    double ann_test = 0.0;
    double seconds = 0.0;
};

SweepResult sweep(std::vector<Fixture>& fixtures) {
    SweepResult s;
    const auto start = Clock::now();
    for (int seed = 0; seed < kSeeds; ++seed) {
        fixtures.push_back(make_fixture(seed));
        const Fixture& f = fixtures.back();
        s.validation_min = std::min(s.validation_min, f.validation);
        s.ann_test += f.ann_test / kSeeds;
        std::printf("  seed %d: validation %.4f, ANN test %.4f\n", seed, f.validation, f.ann_test);
        for (int t : kSteps) {
            const Conversion conv = prepare_conversion(f.net, f.calib, t, ThresholdPolicy{}, RoundMode::round);
            std::printf("  seed %d T=%d", seed, t);
            for (Pipeline p : {Pipeline::none, Pipeline::light, Pipeline::advanced}) {
                const PipelineResult res = run_pipeline(conv, f.calib, fixture_calibration(p));
                const SimulationTrace trace = simulate(res.net, res.config, f.test.samples);
                const double acc = accuracy(trace.output, f.test.labels);
                s.accuracy[t][p] += acc / kSeeds;
                std::printf("  %s %.4f", pipeline_name(p).c_str(), acc);
                if (t == 16) {
                    s.relative_error_t16[p] += last_layer_relative_error(conv, trace, f.test.samples) / kSeeds;
                    s.energy_t16[p] += estimate_energy(res.net, trace, res.config.energy).ratio / kSeeds;
                }
            }
            std::printf("\n");
            std::fflush(stdout);
        }
    }
    s.seconds = seconds_since(start);

    // calibration-set size, outside the timed sweep
    for (const Fixture& f : fixtures)
        for (std::size_t n : {std::size_t(32), std::size_t(256)}) {
            const Tensor calib = f.calib.slice_batch(0, n);
            const Conversion conv = prepare_conversion(f.net, calib, 16, ThresholdPolicy{}, RoundMode::round);
            CalibrationConfig cc = fixture_calibration(Pipeline::light);
            cc.bias_samples = n;
            const PipelineResult res = run_pipeline(conv, calib, cc);
            s.light_t16_by_samples[int(n)] +=
                accuracy(simulate(res.net, res.config, f.test.samples).output, f.test.labels) / kSeeds;
        }
    return s;
}

void judge_sweep(const SweepResult& s) {
    using P = Pipeline;
    bool ordered = true;
    std::string table;
    for (int t : kSteps) {
        const auto& a = s.accuracy.at(t);
        ordered = ordered && a.at(P::advanced) >= a.at(P::light) && a.at(P::light) >= a.at(P::none);
        table += " T=" + std::to_string(t) + " none/light/advanced " + fmt("%.2f", 100 * a.at(P::none)) + "/" +
                 fmt("%.2f", 100 * a.at(P::light)) + "/" + fmt("%.2f", 100 * a.at(P::advanced)) + ";";
    }
    const double gain8 = s.accuracy.at(8).at(P::advanced) - s.accuracy.at(8).at(P::none);
    const double gap32 = s.ann_test - s.accuracy.at(32).at(P::advanced);
    const bool pass = ordered && gain8 >= kAdvancedGainT8 && gap32 <= kAnnGapT32 && s.validation_min >= kMinValidation &&
                      s.seconds <= kFixtureSeconds;
    report(5, "calibration monotonicity (3-seed mean)", pass,
           std::string("ordering ") + (ordered ? "holds" : "violated") + ";" + table + " advanced-none at T=8 " +
               fmt("%+.2f", 100 * gain8) + " pp (need >= 1); ANN " + fmt("%.2f", 100 * s.ann_test) +
               " - advanced at T=32 = " + fmt("%.2f", 100 * gap32) + " pp (need <= 2); min validation " +
               fmt("%.4f", s.validation_min) + " (need >= 0.98); " + fmt("%.0f", s.seconds) + " s (limit 900)");

    const auto& re = s.relative_error_t16;
    report(6, "relative error reduction at T=16", re.at(P::light) <= re.at(P::none) && re.at(P::advanced) <= re.at(P::light),
           "mean channel relative error of the last spiking layer on held-out data, 3-seed mean: none " +
               fmt("%.4f", re.at(P::none)) + ", light " + fmt("%.4f", re.at(P::light)) + ", advanced " +
               fmt("%.4f", re.at(P::advanced)));

    const double a32 = s.light_t16_by_samples.at(32), a256 = s.light_t16_by_samples.at(256);
    report(8, "calibration set size trend", a256 >= a32,
           "light pipeline at T=16, 3-seed mean accuracy: 32 samples " + fmt("%.2f", 100 * a32) + ", 256 samples " +
               fmt("%.2f", 100 * a256));
}

// ---------------------------------------------------------------- 7, 10

void cli_runs(const Fixture& f) {
    TempDir dir;
    save_model(f.net, dir / "fixture.scm");
    Dataset calib;
    calib.samples = f.calib;
    save_dataset(calib, dir / "calib.sct");
    const std::string model = (dir / "fixture.scm").string(), data = (dir / "calib.sct").string();

    const int code = cli_run({"convert", "--model", model, "--calib", data, "--out", (dir / "full.scs").string(), "--T", "16",
                              "--pipeline", "advanced", "--wc-batch", "0", "--weight-samples", "256"});
    std::size_t layers = 0, descended = 0;
    if (code == 0) {
        const Bytes log = read_file(dir / "full.log.jsonl");
        std::istringstream lines(std::string(log.begin(), log.end()));
        std::string line;
        while (std::getline(lines, line)) {
            const json j = json::parse(line);
            if (!j.contains("weights")) continue;
            ++layers;
            descended += j["weights"]["final_objective"].get<double>() <= j["weights"]["initial_objective"].get<double>();
        }
    }
    report(7, "weight calibration descent", code == 0 && layers > 0 && descended == layers,
           "convert --pipeline advanced, full batch of 256 samples, T=16: exit " + std::to_string(code) + ", " +
               std::to_string(descended) + "/" + std::to_string(layers) + " calibrated layers with final <= initial objective");

    // Same command twice, each writing out.scs (+ out.scm) into its own directory.
    const auto convert = [&](const std::string& sub) {
        std::filesystem::create_directories(dir / sub);
        return cli_run({"convert", "--model", model, "--calib", data, "--out", (dir / sub / "out.scs").string(), "--T", "8",
                        "--pipeline", "advanced", "--wc-batch", "128", "--wc-iterations", "100", "--seed", "3"});
    };
    const int c1 = convert("r1"), c2 = convert("r2");
    const bool ran = c1 == 0 && c2 == 0;
    const bool same = ran && read_file(dir / "r1" / "out.scs") == read_file(dir / "r2" / "out.scs");
    const bool same_model = ran && read_file(dir / "r1" / "out.scm") == read_file(dir / "r2" / "out.scm");
    report(10, "determinism", same && same_model,
           std::string("two mini-batch advanced converts with seed 3: sidecars ") + (same ? "identical" : "differ") +
               ", derived models " + (same_model ? "identical" : "differ"));
}

// ---------------------------------------------------------------- 9

bool toy_energy(std::string& detail) {
    // 2 -> 2 -> relu -> 3, identity first layer, V = 1, T = 4. Input (0.3, 0): neuron 0 integrates
    // 0.3, 0.6, 0.9, 1.2 and spikes once at the last step; neuron 1 never fires.
    const Network net({2}, {LinearLayer{Tensor({2, 2}, std::vector<double>{1, 0, 0, 1}), Tensor({2})}, ReluLayer{},
                            LinearLayer{Tensor({3, 2}, 1.0), Tensor({3})}});
    SpikingConfig cfg;
    cfg.time_steps = 4;
    cfg.thresholds = {Tensor({1}, 1.0)};
    const SimulationTrace trace = simulate(net, cfg, Tensor({1, 2}, std::vector<double>{0.3, 0.0}));
    const EnergyEstimate e = estimate_energy(net, trace, cfg.energy);
    // ANN: (4 + 6) MACs * (4.6 + 0.9); first layer: 4 MACs * 4 steps * 5.5; spikes: 1 spike * 3 targets * 0.9.
    const double ann = 10 * 5.5, first = 4 * 4 * 5.5, spikes = 1 * 3 * 0.9;
    const bool ok = std::abs(e.ann_energy - ann) <= kExactTol && std::abs(e.first_layer_energy - first) <= kExactTol &&
                    std::abs(e.spike_energy - spikes) <= kExactTol &&
                    std::abs(e.snn_energy - (first + spikes)) <= kExactTol && e.spikes_per_sample == 1.0;
    detail = "toy net ANN " + fmt("%.4g", e.ann_energy) + " (hand 55), first layer " + fmt("%.4g", e.first_layer_energy) +
             " (88), spikes " + fmt("%.4g", e.spike_energy) + " (2.7), SNN " + fmt("%.4g", e.snn_energy) + " (90.7)";
    return ok;
}

void energy(const SweepResult* s) {
    std::string detail;
    const bool toy = toy_energy(detail);
    if (!s) {
        report(9, "energy accounting", false, detail + "; fixture ratio not measured (criterion 5 sweep not run)");
        return;
    }
    const double ratio = s->energy_t16.at(Pipeline::advanced);
    report(9, "energy accounting", toy && ratio < 1.0,
           detail + "; fixture SNN/ANN energy ratio at T=16, 3-seed mean: none " + fmt("%.3f", s->energy_t16.at(Pipeline::none)) +
               ", light " + fmt("%.3f", s->energy_t16.at(Pipeline::light)) + ", advanced " + fmt("%.3f", ratio) + " (need < 1)");
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
    const auto want = [&](std::initializer_list<int> ids) {
        if (wanted.empty()) return true;
        for (int id : ids)
            if (wanted.count(id)) return true;
        return false;
    };

    if (want({1})) single_layer_equivalence();
    if (want({2})) bn_folding();
    if (want({3})) bound_check();

    std::vector<Fixture> fixtures;
    std::optional<SweepResult> sweep_result;
    if (want({5, 6, 8, 9})) {
        std::printf("fixture sweep: cnn-small on digits, %d seeds, %zu test samples\n", kSeeds, kTest);
        sweep_result = sweep(fixtures);
    }
    if (want({4, 7, 10}) && fixtures.empty()) fixtures.push_back(make_fixture(0));
    if (want({4})) mmse_dominance(fixtures.front());
    if (want({5, 6, 8}) && sweep_result) judge_sweep(*sweep_result);
    if (want({7, 10})) cli_runs(fixtures.front());
    if (want({9})) energy(sweep_result ? &*sweep_result : nullptr);

    std::size_t passed = 0;
    for (const auto& [id, line] : results) passed += line.pass;
    std::printf("acceptance: %zu/%zu criteria passed\n", passed, results.size());
    return passed == results.size() ? 0 : 1;
}
