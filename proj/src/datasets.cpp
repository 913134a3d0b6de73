#include "spikecalib/datasets.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>

#include "spikecalib/error.hpp"

namespace spikecalib {

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
    Dataset out;
    out.samples = samples.slice_batch(begin, end);
    if (labeled()) out.labels.assign(labels.begin() + static_cast<long>(begin), labels.begin() + static_cast<long>(end));
    return out;
}

Dataset make_blobs(std::size_t count, std::uint64_t seed, const BlobOptions& options) {
    if (options.classes < 2) throw UsageError("make_blobs: need at least 2 classes");
    if (options.features == 0) throw UsageError("make_blobs: need at least 1 feature");
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::uint32_t> pick(0, static_cast<std::uint32_t>(options.classes - 1));
    std::normal_distribution<double> gauss(0.0, options.spread);
    Dataset out;
    out.samples = Tensor({count, options.features});
    out.labels.resize(count);
    for (std::size_t n = 0; n < count; ++n) {
        const auto label = pick(rng);
        out.labels[n] = label;
        for (std::size_t f = 0; f < options.features; ++f) {
            const double centre = f == label % options.features ? options.separation : -options.separation;
            out.samples[n * options.features + f] = centre + gauss(rng);
        }
    }
    return out;
}

namespace {

struct Point {
    double x, y;
};
using Polyline = std::vector<Point>;

// Elliptic arc from a0 to a1 degrees; y grows downwards.
Polyline arc(double cx, double cy, double rx, double ry, double a0, double a1, int n) {
    Polyline out;
    for (int i = 0; i < n; ++i) {
        const double a = (a0 + (a1 - a0) * i / (n - 1)) * std::numbers::pi / 180.0;
        out.push_back({cx + rx * std::cos(a), cy - ry * std::sin(a)});
    }
    return out;
}

Polyline join(Polyline a, const Polyline& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

const std::array<std::vector<Polyline>, 10>& glyphs() {
    static const std::array<std::vector<Polyline>, 10> table = {{
        {arc(.5, .5, .28, .38, 0, 360, 16)},
        {{{.35, .25}, {.55, .1}, {.55, .9}}},
        {join(arc(.5, .32, .26, .22, 160, -30, 8), {{.25, .88}, {.78, .88}})},
        {arc(.48, .3, .24, .2, 150, -90, 8), arc(.48, .68, .26, .22, 90, -150, 8)},
        {{{.62, .1}, {.22, .65}, {.8, .65}}, {{.62, .35}, {.62, .92}}},
        {join({{.75, .12}, {.3, .12}, {.28, .45}}, arc(.48, .65, .26, .24, 130, -150, 9))},
        {arc(.5, .66, .24, .24, 0, 360, 12), {{.68, .12}, {.4, .3}, {.27, .6}}},
        {{{.22, .12}, {.78, .12}, {.4, .9}}},
        {arc(.5, .3, .2, .19, 0, 360, 12), arc(.5, .7, .25, .21, 0, 360, 12)},
        {arc(.5, .34, .24, .24, 0, 360, 12), {{.73, .38}, {.6, .7}, {.35, .9}}},
    }};
    return table;
}

double segment_distance(Point p, Point a, Point b) {
    const double abx = b.x - a.x, aby = b.y - a.y;
    const double apx = p.x - a.x, apy = p.y - a.y;
    const double len2 = std::max(abx * abx + aby * aby, 1e-9);
    const double t = std::clamp((apx * abx + apy * aby) / len2, 0.0, 1.0);
    return std::hypot(apx - t * abx, apy - t * aby);
}

}  // namespace

Dataset make_digits(std::size_t count, std::uint64_t seed, const DigitOptions& options) {
    if (options.size < 4) throw UsageError("make_digits: image size must be >= 4");
    const auto s = options.size;
    const double jit = options.jitter;
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::uint32_t> pick(0, 9);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
    std::normal_distribution<double> gauss(0.0, 1.0);

    Dataset out;
    out.samples = Tensor({count, 1, s, s});
    out.labels.resize(count);
    std::vector<std::pair<Point, Point>> segments;
    for (std::size_t n = 0; n < count; ++n) {
        const auto label = pick(rng);
        out.labels[n] = label;

        const double angle = uniform(-15.0, 15.0) * jit * std::numbers::pi / 180.0;
        const double scale = uniform(0.85, 1.1);
        const double shear = uniform(-0.2, 0.2) * jit;
        const double tx = uniform(-0.08, 0.08) * jit;
        const double ty = uniform(-0.08, 0.08) * jit;
        // rotation * shear, scaled
        const double c = std::cos(angle) * scale, sn = std::sin(angle) * scale;
        const double a00 = c, a01 = c * shear - sn, a10 = sn, a11 = sn * shear + c;
        auto place = [&](Point p) {
            const double x = p.x - 0.5, y = p.y - 0.5;
            return Point{a00 * x + a01 * y + 0.5 + tx + gauss(rng) * 0.025 * jit,
                         a10 * x + a11 * y + 0.5 + ty + gauss(rng) * 0.025 * jit};
        };
        segments.clear();
        for (const Polyline& line : glyphs()[label])
            for (std::size_t i = 0; i + 1 < line.size(); ++i) segments.emplace_back(place(line[i]), place(line[i + 1]));

        const double thickness = uniform(0.045, 0.075);
        double* img = out.samples.storage().data() + n * s * s;
        for (std::size_t r = 0; r < s; ++r)
            for (std::size_t col = 0; col < s; ++col) {
                const Point p{(static_cast<double>(col) + 0.5) / s, (static_cast<double>(r) + 0.5) / s};
                double d = 1e9;
                for (const auto& [a, b] : segments) d = std::min(d, segment_distance(p, a, b));
                const double ink = std::exp(-d * d / (2.0 * thickness * thickness));
                img[r * s + col] = std::clamp(ink + gauss(rng) * options.noise, 0.0, 1.0);
            }
    }
    return out;
}

}  // namespace spikecalib
