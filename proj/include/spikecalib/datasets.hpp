#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "spikecalib/tensor.hpp"

namespace spikecalib {

struct Dataset {
    Tensor samples;                     // N x (sample shape)
    std::vector<std::uint32_t> labels;  // empty when unlabeled

    bool labeled() const noexcept { return !labels.empty(); }
    std::size_t size() const { return samples.rank() ? samples.dim(0) : 0; }
    // Samples [begin, end) with their labels.
    Dataset slice(std::size_t begin, std::size_t end) const;
};

// Two or more isotropic Gaussian clusters in `features` dimensions. Class c is centred at
// +separation on feature (c mod features) and -separation elsewhere, with standard deviation `spread`.
struct BlobOptions {
    std::size_t classes = 2;
    std::size_t features = 4;
    double separation = 2.5;
    double spread = 0.5;
};

Dataset make_blobs(std::size_t count, std::uint64_t seed, const BlobOptions& options = {});

// Handwriting-like digits 0-9 rendered from stroke skeletons with random affine jitter,
// stroke thickness and pixel noise. Samples are 1 x size x size with values in [0, 1].
struct DigitOptions {
    std::size_t size = 16;
    double noise = 0.2;
    double jitter = 1.5;
};

Dataset make_digits(std::size_t count, std::uint64_t seed, const DigitOptions& options = {});

}  // namespace spikecalib
