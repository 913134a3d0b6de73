#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <sstream>

#include "json.hpp"
#include "spikecalib/analysis.hpp"
#include "spikecalib/calibration.hpp"
#include "spikecalib/error.hpp"
#include "spikecalib/model_io.hpp"
#include "spikecalib/parallel.hpp"
#include "spikecalib/trainer.hpp"

namespace spikecalib::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kToolVersion = "1";

struct TrainDemoOptions {
    std::string dataset = "blobs";
    std::string arch = "mlp-small";
    std::string out;
    std::string data_dir;
    int epochs = -1;
    double learning_rate = 0.05;
    double momentum = 0.9;
    double weight_decay = 0.0;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
    std::size_t train_count = 0;
    std::size_t val_count = 0;
    std::size_t test_count = 0;
    double noise = DigitOptions{}.noise;
    double jitter = DigitOptions{}.jitter;
    std::size_t classes = 2;
};

struct ConvertOptions {
    std::string model;
    std::string calib;
    std::string out;
    std::string out_model;
    std::string log;
    int time_steps = 16;
    std::string threshold = "mmse-channel";
    int grid = 100;
    double percentile = 99.99;
    std::string round = "round";
    std::string pipeline = "none";
    std::size_t bias_samples = 128;
    std::size_t weight_samples = 1024;
    WeightCalibrationOptions weights;
    std::string potential_mode = "elementwise";
    std::string order = "weights-then-potential";
    std::uint64_t seed = 0;
};

struct EvaluateOptions {
    std::string model;
    std::string data;
    std::vector<std::string> sidecars;
    std::optional<std::size_t> limit;
    std::string out;
};

struct DiagnoseOptions {
    std::string model;
    std::string sidecar;
    std::string data;
    std::size_t limit = 1024;
    std::string format = "json";
    std::string out;
};

struct BoundOptions {
    BoundTrialOptions trials;
    std::vector<int> time_steps{2, 4, 8};
    std::string round = "round";
    std::string out;
};

void emit(std::ostream& out, const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        out << text;
        if (!text.empty() && text.back() != '\n') out << '\n';
    } else {
        write_file_atomic(path, text);
    }
}

void warn(std::ostream& err, const std::string& message) { err << json{{"warning", message}}.dump() << '\n'; }

std::string file_digest(const std::string& path) { return container_digest(read_file(path)); }

// ---------------------------------------------------------------- train-demo

int train_demo(const TrainDemoOptions& o, std::ostream& out) {
    const Architecture arch = parse_architecture(o.arch);
    const bool digits = o.dataset == "digits";
    if (!digits && o.dataset != "blobs")
        throw UsageError("unknown dataset '" + o.dataset + "' (valid: blobs, digits)");
    if (o.out.empty()) throw UsageError("train-demo needs --out");
    const std::size_t train_n = o.train_count ? o.train_count : (digits ? 8000 : 2000);
    const std::size_t val_n = o.val_count ? o.val_count : (digits ? 1000 : 500);
    const std::size_t test_n = o.test_count ? o.test_count : (digits ? 5000 : 500);
    Dataset train, val, test;
    if (digits) {
        const DigitOptions d{16, o.noise, o.jitter};
        train = make_digits(train_n, 100 + o.seed, d);
        val = make_digits(val_n, 200 + o.seed, d);
        test = make_digits(test_n, 300 + o.seed, d);
    } else {
        BlobOptions b;
        b.classes = o.classes;
        train = make_blobs(train_n, 100 + o.seed, b);
        val = make_blobs(val_n, 200 + o.seed, b);
        test = make_blobs(test_n, 300 + o.seed, b);
    }
    TrainConfig cfg;
    cfg.arch = arch;
    cfg.epochs = o.epochs >= 0 ? o.epochs : (digits ? 8 : 10);
    cfg.learning_rate = o.learning_rate;
    cfg.momentum = o.momentum;
    cfg.weight_decay = o.weight_decay;
    cfg.cosine_schedule = true;
    cfg.batch_size = o.batch_size;
    cfg.seed = o.seed;
    const TrainResult r = train_desk_scale(cfg, train, val);

    json meta{{"arch", architecture_name(arch)},
              {"dataset", o.dataset},
              {"seed", o.seed},
              {"epochs", cfg.epochs},
              {"train_accuracy", r.train_accuracy},
              {"validation_accuracy", r.validation_accuracy},
              {"train_samples", train_n},
              {"validation_samples", val_n}};
    save_model(r.net, o.out, meta.dump());
    json report = meta;
    report["model"] = o.out;
    report["model_digest"] = model_digest(r.net);
    if (!o.data_dir.empty()) {
        fs::create_directories(o.data_dir);
        save_dataset(train, fs::path(o.data_dir) / "train.sct");
        save_dataset(val, fs::path(o.data_dir) / "val.sct");
        save_dataset(test, fs::path(o.data_dir) / "test.sct");
        report["data_dir"] = o.data_dir;
    }
    out << report.dump(2) << '\n';
    return 0;
}

// ---------------------------------------------------------------- convert

Tensor round_shift(const Tensor& threshold, std::size_t channels, int time_steps) {
    Tensor out({channels});
    for (std::size_t c = 0; c < channels; ++c) out[c] = channel_value(threshold, c) / (2.0 * time_steps);
    return out;
}

int convert(ConvertOptions o, std::ostream& out, std::ostream& err) {
    if (o.model.empty() || o.calib.empty() || o.out.empty()) throw UsageError("convert needs --model, --calib and --out");
    if (o.time_steps < 1) throw UsageError("--T must be >= 1");
    ThresholdPolicy policy;
    policy.mode = parse_threshold_mode(o.threshold);
    policy.grid = o.grid;
    policy.percentile = o.percentile;
    policy.validate();
    const RoundMode round = parse_round_mode(o.round);
    CalibrationConfig cc;
    cc.pipeline = parse_pipeline(o.pipeline);
    cc.bias_samples = o.bias_samples;
    cc.weight_samples = o.weight_samples;
    cc.weights = o.weights;
    cc.weights.seed = o.seed;
    cc.potential_mode = parse_potential_mode(o.potential_mode);
    cc.order = parse_advanced_order(o.order);
    cc.validate();

    const Bytes model_bytes = read_file(o.model);
    const Network model = decode_model(model_bytes);
    std::string warning;
    const std::size_t needed = std::max(o.bias_samples, o.weight_samples);
    const Dataset calib = load_dataset(o.calib, needed, &warning);
    if (!warning.empty()) warn(err, "calibration set: " + warning);
    if (calib.size() == 0) throw FormatError(o.calib + ": calibration set is empty");

    const Conversion conv = prepare_conversion(model, calib.samples, o.time_steps, policy, round);
    const PipelineResult res = run_pipeline(conv, calib.samples, cc);

    // Every calibrated layer must end no worse than it started.
    std::string log_text;
    for (const auto& l : res.log) {
        if (l.final_mse > l.initial_mse)
            throw NumericError("layer " + std::to_string(l.layer) + ": final MSE " + std::to_string(l.final_mse) +
                               " above initial " + std::to_string(l.initial_mse));
        if (l.weights_calibrated && l.weights.final_objective > l.weights.initial_objective)
            throw NumericError("layer " + std::to_string(l.layer) + ": weight objective rose");
        if (l.weights.diverged) warn(err, "layer " + std::to_string(l.layer) + ": weight calibration diverged, kept originals");
        log_text += l.to_json() + '\n';
    }

    json provenance{{"tool_version", kToolVersion},
                    {"command", "convert"},
                    {"model_digest", model_digest(model)},
                    {"calibration_digest", file_digest(o.calib)},
                    {"calibration_samples", calib.size()},
                    {"time_steps", o.time_steps},
                    {"threshold", {{"mode", o.threshold}, {"grid", o.grid}, {"percentile", o.percentile}}},
                    {"round_mode", o.round},
                    {"pipeline", o.pipeline},
                    {"bias_samples", o.bias_samples},
                    {"weight_samples", o.weight_samples},
                    {"weights",
                     {{"step_size", cc.weights.step_size},
                      {"momentum", cc.weights.momentum},
                      {"iterations", cc.weights.iterations},
                      {"batch_size", cc.weights.batch_size},
                      {"eval_interval", cc.weights.eval_interval}}},
                    {"potential_mode", o.potential_mode},
                    {"order", o.order},
                    {"seed", o.seed}};

    json summary{{"sidecar", o.out}, {"layers", res.log.size()}, {"log_check", "pass"}};
    Sidecar sidecar;
    if (cc.pipeline == Pipeline::advanced) {
        // Weights changed: store them in a new model container. Its spiking biases exclude the
        // rounding shift, which the sidecar carries as before.
        Network base = res.net;
        const auto relus = base.relu_indices();
        for (std::size_t k = 0; k < relus.size(); ++k) {
            if (round != RoundMode::round) break;
            const auto idx = base.spiking_affine_index(k);
            const Tensor& b = affine_bias(base.layer(idx));
            base.set_affine(idx, affine_weights(base.layer(idx)),
                            b - round_shift(res.config.thresholds[k], b.size(), o.time_steps));
        }
        const std::string out_model = o.out_model.empty() ? fs::path(o.out).replace_extension(".scm").string() : o.out_model;
        if (fs::absolute(out_model) == fs::absolute(o.model)) throw UsageError("--out-model would overwrite the input model");
        const json meta{{"derived_from", model_digest(model)}, {"pipeline", o.pipeline}, {"time_steps", o.time_steps}};
        const Bytes derived_bytes = encode_model(base, meta.dump());
        const Network derived = decode_model(derived_bytes);
        Network snn = derived;
        for (std::size_t k = 0; k < relus.size(); ++k) {
            const auto idx = snn.spiking_affine_index(k);
            const Tensor& b = affine_bias(snn.layer(idx));
            const Tensor delta = round == RoundMode::round ? round_shift(res.config.thresholds[k], b.size(), o.time_steps)
                                                           : Tensor({b.size()});
            snn.set_affine(idx, affine_weights(snn.layer(idx)), b + delta);
        }
        provenance["source_model_digest"] = model_digest(model);
        provenance["derived_model"] = fs::path(out_model).filename().string();
        sidecar = make_sidecar(derived, snn, res.config, provenance.dump());
        write_file_atomic(out_model, derived_bytes);
        summary["model"] = out_model;
        summary["model_digest"] = model_digest(derived);
    } else {
        sidecar = make_sidecar(model, res.net, res.config, provenance.dump());
        summary["model_digest"] = model_digest(model);
    }
    const Bytes sidecar_bytes = encode_sidecar(sidecar);
    write_file_atomic(o.out, sidecar_bytes);
    const std::string log_path = o.log.empty() ? fs::path(o.out).replace_extension(".log.jsonl").string() : o.log;
    emit(out, log_path, log_text);
    summary["log"] = log_path;
    summary["sidecar_digest"] = container_digest(sidecar_bytes);
    out << summary.dump(2) << '\n';
    return 0;
}

// ---------------------------------------------------------------- shared loading

struct Loaded {
    Network ann;  // BN-folded input model
    SpikingModel snn;
    Sidecar sidecar;
};

// Binds a sidecar to `model`, or to the derived model it names when weights were calibrated.
Loaded load_spiking(const Network& model, const std::string& sidecar_path) {
    Loaded out;
    out.ann = fold_bn(model);
    out.sidecar = load_sidecar(sidecar_path);
    const std::string digest = model_digest(model);
    if (out.sidecar.model_digest == digest) {
        out.snn = apply_sidecar(model, out.sidecar);
        return out;
    }
    const json prov = json::parse(out.sidecar.provenance);
    if (!prov.contains("derived_model") || prov.value("source_model_digest", std::string()) != digest)
        throw DigestError(sidecar_path + ": sidecar belongs to model " + out.sidecar.model_digest + ", not " + digest);
    const fs::path derived_path = fs::path(sidecar_path).parent_path() / prov["derived_model"].get<std::string>();
    out.snn = apply_sidecar(load_model(derived_path), out.sidecar);
    return out;
}

// ---------------------------------------------------------------- evaluate

int evaluate(const EvaluateOptions& o, std::ostream& out, std::ostream& err) {
    if (o.model.empty() || o.data.empty()) throw UsageError("evaluate needs --model and --data");
    const Network model = load_model(o.model);
    std::string warning;
    const Dataset data = load_labeled_dataset(o.data, o.limit, &warning);
    if (!warning.empty()) warn(err, warning);
    if (data.size() == 0) throw FormatError(o.data + ": no samples to evaluate");
    const Network ann = fold_bn(model);
    json report{{"samples", data.size()},
                {"model_digest", model_digest(model)},
                {"dataset_digest", file_digest(o.data)},
                {"ann_accuracy", accuracy(predict(ann, data.samples), data.labels)}};
    json rows = json::array();
    for (const auto& path : o.sidecars) {
        const Loaded l = load_spiking(model, path);
        const SimulationTrace trace = simulate(l.snn.net, l.snn.config, data.samples);
        rows.push_back({{"sidecar", fs::path(path).filename().string()},
                        {"time_steps", l.snn.config.time_steps},
                        {"snn_accuracy", accuracy(trace.output, data.labels)},
                        {"energy_ratio", estimate_energy(l.snn.net, trace, l.snn.config.energy).ratio}});
    }
    report["snn"] = std::move(rows);
    emit(out, o.out, report.dump(2));
    return 0;
}

// ---------------------------------------------------------------- diagnose

int diagnose_cmd(const DiagnoseOptions& o, std::ostream& out, std::ostream& err) {
    if (o.model.empty() || o.sidecar.empty() || o.data.empty())
        throw UsageError("diagnose needs --model, --sidecar and --data");
    if (o.format != "json" && o.format != "csv") throw UsageError("unknown format '" + o.format + "' (valid: json, csv)");
    const Network model = load_model(o.model);
    std::string warning;
    const Dataset data = load_dataset(o.data, o.limit, &warning);
    if (!warning.empty()) warn(err, warning);
    const Loaded l = load_spiking(model, o.sidecar);
    ConversionReport report = diagnose(l.ann, l.snn.net, l.snn.config, data.samples, data.labels);
    report.provenance = json{{"tool_version", kToolVersion},
                             {"command", "diagnose"},
                             {"model_digest", model_digest(model)},
                             {"sidecar_digest", file_digest(o.sidecar)},
                             {"dataset_digest", file_digest(o.data)},
                             {"samples", data.size()},
                             {"time_steps", l.snn.config.time_steps}}
                            .dump();
    emit(out, o.out, o.format == "json" ? report.to_json() : report.to_csv());
    return 0;
}

// ---------------------------------------------------------------- bound-check

int bound_check(BoundOptions o, std::ostream& out, std::ostream& err) {
    o.trials.time_steps = o.time_steps;
    o.trials.round_mode = parse_round_mode(o.round);
    if (o.trials.trials == 0) warn(err, "zero trials requested; the check passes vacuously");
    const auto trials = run_bound_trials(o.trials);
    std::ostringstream lines;
    std::size_t holds = 0;
    double worst_fd = 0.0;
    for (const auto& t : trials) {
        holds += t.result.holds;
        worst_fd = std::max(worst_fd, t.hessian_fd_error);
        lines << json{{"trial", t.index},
                      {"widths", t.widths},
                      {"time_steps", t.time_steps},
                      {"lhs", t.result.lhs},
                      {"rhs", t.result.rhs},
                      {"rhs_ann_trace", t.result.rhs_ann_trace},
                      {"pattern_mismatches", t.result.pattern_mismatches},
                      {"holds", t.result.holds},
                      {"hessian_fd_error", t.hessian_fd_error}}
                     .dump()
              << '\n';
    }
    const bool pass = holds == trials.size();
    lines << json{{"summary",
                   {{"trials", trials.size()},
                    {"holds", holds},
                    {"max_hessian_fd_error", worst_fd},
                    {"seed", o.trials.seed},
                    {"verdict", pass ? "pass" : "fail"}}}}
                 .dump()
          << '\n';
    emit(out, o.out, lines.str());
    if (!pass)
        throw NumericError("bound violated in " + std::to_string(trials.size() - holds) + " of " +
                           std::to_string(trials.size()) + " trials");
    return 0;
}

void report_error(std::ostream& err, const std::string& kind, const std::string& message, int code) {
    err << json{{"error", {{"kind", kind}, {"message", message}, {"exit_code", code}}}}.dump() << '\n';
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"ANN-to-SNN conversion and calibration toolkit", "spikecalib"};
    app.require_subcommand(1);
    app.fallthrough();  // global options may follow the subcommand
    int threads = 0;
    app.add_option("--threads", threads, "worker threads (default 1, or SPIKECALIB_THREADS)")->check(CLI::NonNegativeNumber);

    TrainDemoOptions td;
    auto* c_train = app.add_subcommand("train-demo", "train a desk-scale fixture model and write it as .scm");
    c_train->add_option("--dataset", td.dataset, "blobs or digits")->capture_default_str();
    c_train->add_option("--arch", td.arch, "mlp-small or cnn-small")->capture_default_str();
    c_train->add_option("--out", td.out, "output .scm path")->required();
    c_train->add_option("--data-dir", td.data_dir, "also write train/val/test .sct files here");
    c_train->add_option("--epochs", td.epochs, "default 10 (blobs) or 8 (digits)");
    c_train->add_option("--lr", td.learning_rate)->capture_default_str();
    c_train->add_option("--momentum", td.momentum)->capture_default_str();
    c_train->add_option("--weight-decay", td.weight_decay)->capture_default_str();
    c_train->add_option("--batch", td.batch_size)->capture_default_str();
    c_train->add_option("--seed", td.seed)->capture_default_str();
    c_train->add_option("--train-count", td.train_count, "default 2000 (blobs) or 8000 (digits)");
    c_train->add_option("--val-count", td.val_count, "default 500 (blobs) or 1000 (digits)");
    c_train->add_option("--test-count", td.test_count, "default 500 (blobs) or 5000 (digits)");
    c_train->add_option("--noise", td.noise, "digits pixel noise")->capture_default_str();
    c_train->add_option("--jitter", td.jitter, "digits geometric jitter scale")->capture_default_str();
    c_train->add_option("--classes", td.classes, "blobs class count")->capture_default_str();

    ConvertOptions cv;
    auto* c_convert = app.add_subcommand("convert", "fold, search thresholds, calibrate; write .scs (+ .scm) and a log");
    c_convert->add_option("--model", cv.model, "input .scm")->required();
    c_convert->add_option("--calib", cv.calib, "calibration .sct")->required();
    c_convert->add_option("--out", cv.out, "output .scs")->required();
    c_convert->add_option("--out-model", cv.out_model, "output .scm for weight-calibrated models");
    c_convert->add_option("--log", cv.log, "JSON-lines calibration log (default <out>.log.jsonl, - for stdout)");
    c_convert->add_option("--T", cv.time_steps, "time steps")->capture_default_str();
    c_convert->add_option("--threshold", cv.threshold, "max-act, percentile, mmse, mmse-channel")->capture_default_str();
    c_convert->add_option("--grid", cv.grid, "MMSE grid size")->capture_default_str();
    c_convert->add_option("--percentile", cv.percentile)->capture_default_str();
    c_convert->add_option("--round", cv.round, "floor or round")->capture_default_str();
    c_convert->add_option("--pipeline", cv.pipeline, "none, light, advanced")->capture_default_str();
    c_convert->add_option("--bias-samples", cv.bias_samples)->capture_default_str();
    c_convert->add_option("--weight-samples", cv.weight_samples, "weight and threshold set size")->capture_default_str();
    c_convert->add_option("--wc-step", cv.weights.step_size, "step size in units of 1/L")->capture_default_str();
    c_convert->add_option("--wc-momentum", cv.weights.momentum)->capture_default_str();
    c_convert->add_option("--wc-iterations", cv.weights.iterations)->capture_default_str();
    c_convert->add_option("--wc-batch", cv.weights.batch_size, "0 for full batch")->capture_default_str();
    c_convert->add_option("--wc-eval-interval", cv.weights.eval_interval)->capture_default_str();
    c_convert->add_option("--potential-mode", cv.potential_mode, "elementwise or channel-mean")->capture_default_str();
    c_convert->add_option("--order", cv.order, "weights-then-potential or potential-then-weights")->capture_default_str();
    c_convert->add_option("--seed", cv.seed)->capture_default_str();

    EvaluateOptions ev;
    std::size_t ev_limit = 0;
    auto* c_eval = app.add_subcommand("evaluate", "ANN accuracy and SNN accuracy for each sidecar");
    c_eval->add_option("--model", ev.model)->required();
    c_eval->add_option("--data", ev.data, "labeled .sct")->required();
    c_eval->add_option("--sidecar", ev.sidecars, "one per T; repeatable");
    auto* ev_limit_opt = c_eval->add_option("--limit", ev_limit, "first N samples");
    c_eval->add_option("--out", ev.out, "report path (default stdout)");

    DiagnoseOptions dg;
    auto* c_diag = app.add_subcommand("diagnose", "per-layer relative errors, error decomposition, firing rates, energy");
    c_diag->add_option("--model", dg.model)->required();
    c_diag->add_option("--sidecar", dg.sidecar)->required();
    c_diag->add_option("--data", dg.data)->required();
    c_diag->add_option("--limit", dg.limit)->capture_default_str();
    c_diag->add_option("--format", dg.format, "json or csv")->capture_default_str();
    c_diag->add_option("--out", dg.out, "report path (default stdout)");

    BoundOptions bo;
    auto* c_bound = app.add_subcommand("bound-check", "check the layer-wise error bound on random tiny networks");
    c_bound->add_option("--trials", bo.trials.trials)->capture_default_str();
    c_bound->add_option("--min-depth", bo.trials.min_depth)->capture_default_str();
    c_bound->add_option("--max-depth", bo.trials.max_depth)->capture_default_str();
    c_bound->add_option("--width", bo.trials.max_width, "largest layer width")->capture_default_str();
    c_bound->add_option("--T", bo.time_steps, "time steps drawn per trial")->capture_default_str();
    c_bound->add_option("--round", bo.round, "floor or round")->capture_default_str();
    c_bound->add_option("--seed", bo.trials.seed)->capture_default_str();
    c_bound->add_option("--out", bo.out, "report path (default stdout)");

    std::vector<const char*> argv{"spikecalib"};
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        report_error(err, "usage", e.what(), 2);
        return 2;
    }

    try {
        if (threads > 0) set_thread_count(threads);
        if (*c_train) return train_demo(td, out);
        if (*c_convert) return convert(cv, out, err);
        if (*c_eval) {
            if (*ev_limit_opt) ev.limit = ev_limit;
            return evaluate(ev, out, err);
        }
        if (*c_diag) return diagnose_cmd(dg, out, err);
        if (*c_bound) return bound_check(bo, out, err);
    } catch (const Error& e) {
        static const char* names[] = {"", "", "usage", "data", "numeric"};
        report_error(err, names[e.exit_code()], e.what(), e.exit_code());
        return e.exit_code();
    } catch (const fs::filesystem_error& e) {
        report_error(err, "data", e.what(), 3);
        return 3;
    } catch (const nlohmann::json::exception& e) {
        report_error(err, "data", e.what(), 3);
        return 3;
    } catch (const std::exception& e) {
        report_error(err, "numeric", e.what(), 4);
        return 4;
    }
    return 2;
}

}  // namespace spikecalib::cli
