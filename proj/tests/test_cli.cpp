#include <doctest.h>

#include <json.hpp>
#include <sstream>

#include "cli.hpp"
#include "helpers.hpp"
#include "spikecalib/model_io.hpp"

using namespace spikecalib;
using namespace testing;
using nlohmann::json;

namespace {

struct Run {
    int code = -1;
    std::string out;
    std::string err;
};

Run run(std::vector<std::string> args) {
    std::ostringstream out, err;
    Run r;
    r.code = cli::run(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

// Trains the blobs demo into `dir` once per directory.
json train_blobs(const TempDir& dir, const std::string& name = "m.scm", int seed = 0) {
    const Run r = run({"train-demo", "--dataset", "blobs", "--out", (dir / name).string(), "--data-dir",
                       (dir / "data").string(), "--seed", std::to_string(seed)});
    REQUIRE(r.code == 0);
    return json::parse(r.out);
}

json error_of(const Run& r) { return json::parse(r.err)["error"]; }

}  // namespace

TEST_CASE("help and usage errors") {
    CHECK(run({"--help"}).code == 0);
    CHECK(run({"--help"}).out.find("bound-check") != std::string::npos);
    const Run none = run({});
    CHECK(none.code == 2);
    const Run bad = run({"frobnicate"});
    CHECK(bad.code == 2);
    CHECK(error_of(bad)["kind"] == "usage");
    CHECK(error_of(bad)["exit_code"] == 2);
}

TEST_CASE("train-demo on blobs") {
    TempDir dir;
    const json report = train_blobs(dir);
    CHECK(report["validation_accuracy"].get<double>() >= 0.99);
    for (const char* f : {"m.scm", "data/train.sct", "data/val.sct", "data/test.sct"})
        CHECK(std::filesystem::exists(dir / f));
    const json meta = json::parse(model_metadata(read_file(dir / "m.scm")));
    CHECK(meta["arch"] == "mlp-small");
    CHECK(meta["validation_accuracy"] == report["validation_accuracy"]);

    // same seed, same model; the thread count does not matter
    const Run again = run({"--threads", "2", "train-demo", "--out", (dir / "m2.scm").string()});
    REQUIRE(again.code == 0);
    CHECK(json::parse(again.out)["model_digest"] == report["model_digest"]);
    CHECK(read_file(dir / "m.scm") == read_file(dir / "m2.scm"));
    const Run other = run({"train-demo", "--out", (dir / "m3.scm").string(), "--seed", "1", "--threads", "1"});
    REQUIRE(other.code == 0);
    CHECK(json::parse(other.out)["model_digest"] != report["model_digest"]);

    const Run arch = run({"train-demo", "--arch", "vgg", "--out", (dir / "x.scm").string()});
    CHECK(arch.code == 2);
    CHECK(error_of(arch)["message"].get<std::string>().find("mlp-small, cnn-small") != std::string::npos);
    CHECK_FALSE(std::filesystem::exists(dir / "x.scm"));
    CHECK(run({"train-demo", "--dataset", "faces", "--out", (dir / "x.scm").string()}).code == 2);
    CHECK(run({"train-demo"}).code == 2);
}

TEST_CASE("convert, evaluate and diagnose") {
    TempDir dir;
    const json trained = train_blobs(dir);
    const std::string model = (dir / "m.scm").string();
    const std::string train = (dir / "data" / "train.sct").string();
    const std::string val = (dir / "data" / "val.sct").string();

    SUBCASE("thresholds only") {
        const Run c = run({"convert", "--model", model, "--calib", train, "--out", (dir / "n.scs").string(), "--T", "32"});
        REQUIRE(c.code == 0);
        const json s = json::parse(c.out);
        CHECK(s["log_check"] == "pass");
        CHECK_FALSE(s.contains("model"));
        CHECK_FALSE(std::filesystem::exists(dir / "n.scm"));
        const Sidecar sc = load_sidecar(dir / "n.scs");
        CHECK(sc.time_steps == 32);
        CHECK(sc.model_digest == trained["model_digest"]);
        CHECK(std::filesystem::exists(dir / "n.log.jsonl"));

        const Run again = run({"convert", "--model", model, "--calib", train, "--out", (dir / "n2.scs").string(), "--T", "32"});
        REQUIRE(again.code == 0);
        CHECK(read_file(dir / "n.scs") == read_file(dir / "n2.scs"));

        const Run e = run({"evaluate", "--model", model, "--data", val, "--sidecar", (dir / "n.scs").string()});
        REQUIRE(e.code == 0);
        const json r = json::parse(e.out);
        CHECK(r["samples"] == 500);
        // stored weights are f32, so allow one flipped sample
        CHECK(std::abs(r["ann_accuracy"].get<double>() - trained["validation_accuracy"].get<double>()) <= 0.002 + 1e-12);
        REQUIRE(r["snn"].size() == 1);
        CHECK(r["snn"][0]["time_steps"] == 32);
        CHECK(r["snn"][0]["snn_accuracy"].get<double>() >= 0.95);
        CHECK(r["snn"][0]["energy_ratio"].get<double>() > 0.0);

        const Run d = run({"diagnose", "--model", model, "--sidecar", (dir / "n.scs").string(), "--data", val, "--format", "csv",
                           "--out", (dir / "d.csv").string()});
        REQUIRE(d.code == 0);
        const Bytes csv = read_file(dir / "d.csv");
        CHECK(std::string(csv.begin(), csv.end()).find("position") != std::string::npos);
        const Run dj = run({"diagnose", "--model", model, "--sidecar", (dir / "n.scs").string(), "--data", val});
        REQUIRE(dj.code == 0);
        CHECK(json::parse(dj.out).contains("provenance"));
        CHECK(run({"diagnose", "--model", model, "--sidecar", (dir / "n.scs").string(), "--data", val, "--format", "xml"})
                  .code == 2);
    }
    SUBCASE("advanced writes a derived model that evaluate finds") {
        const Run c = run({"convert", "--model", model, "--calib", train, "--out", (dir / "a.scs").string(), "--T", "8",
                           "--pipeline", "advanced", "--wc-iterations", "50"});
        REQUIRE(c.code == 0);
        CHECK(std::filesystem::exists(dir / "a.scm"));
        const Run e = run({"evaluate", "--model", model, "--data", val, "--sidecar", (dir / "a.scs").string()});
        REQUIRE(e.code == 0);
        CHECK(json::parse(e.out)["snn"][0]["snn_accuracy"].get<double>() >= 0.9);
        const Run clash = run({"convert", "--model", model, "--calib", train, "--out", (dir / "b.scs").string(), "--pipeline",
                               "advanced", "--out-model", model});
        CHECK(clash.code == 2);
    }
    SUBCASE("data errors") {
        const Run missing = run({"convert", "--model", (dir / "nope.scm").string(), "--calib", train, "--out",
                                 (dir / "x.scs").string()});
        CHECK(missing.code == 3);
        CHECK(error_of(missing)["kind"] == "data");
        CHECK(run({"evaluate", "--model", model, "--data", val, "--limit", "0"}).code == 3);
        const Run big = run({"evaluate", "--model", model, "--data", val, "--limit", "100000"});
        CHECK(big.code == 0);
        CHECK(big.err.find("warning") != std::string::npos);
        // a sidecar for another model is refused
        train_blobs(dir, "other.scm", 7);
        REQUIRE(run({"convert", "--model", (dir / "other.scm").string(), "--calib", train, "--out",
                     (dir / "o.scs").string()})
                    .code == 0);
        CHECK(run({"evaluate", "--model", model, "--data", val, "--sidecar", (dir / "o.scs").string()}).code == 3);
        CHECK(run({"convert", "--model", model, "--calib", train, "--out", (dir / "x.scs").string(), "--T", "0"}).code == 2);
    }
}

TEST_CASE("bound-check") {
    TempDir dir;
    const Run r = run({"bound-check", "--trials", "5", "--out", (dir / "b.jsonl").string()});
    REQUIRE(r.code == 0);
    const Bytes bytes = read_file(dir / "b.jsonl");
    std::istringstream lines(std::string(bytes.begin(), bytes.end()));
    std::string line;
    int rows = 0;
    json last;
    while (std::getline(lines, line)) {
        last = json::parse(line);
        ++rows;
    }
    CHECK(rows == 6);
    CHECK(last["summary"]["verdict"] == "pass");
    CHECK(last["summary"]["holds"] == 5);

    const Run zero = run({"bound-check", "--trials", "0"});
    CHECK(zero.code == 0);
    CHECK(zero.err.find("warning") != std::string::npos);
    CHECK(run({"bound-check", "--round", "ceil"}).code == 2);
}
