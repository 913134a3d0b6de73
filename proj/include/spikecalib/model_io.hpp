#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "spikecalib/datasets.hpp"
#include "spikecalib/network.hpp"
#include "spikecalib/snn.hpp"

namespace spikecalib {

// Container layout, shared by .scm, .sct and .scs files:
//   magic     4 bytes: "SCM\0", "SCT\0" or "SCS\0"
//   length    u64 little-endian, manifest byte count
//   manifest  UTF-8 JSON, keys sorted, no whitespace
//   blob      tensors as f32 little-endian, row-major; dataset labels as u32 little-endian
// The manifest records the blob length and its SHA-256; both are checked on load.
inline constexpr int kContainerVersion = 1;

using Bytes = std::vector<std::uint8_t>;

std::string sha256_hex(std::string_view data);
std::string sha256_hex(const Bytes& data);

// f32/u32 little-endian codecs used by every blob.
void append_f32(Bytes& out, double value);
void append_u32(Bytes& out, std::uint32_t value);
float read_f32(const std::uint8_t* p);
std::uint32_t read_u32(const std::uint8_t* p);

// Writes to a temporary file in the target directory, then renames it into place.
void write_file_atomic(const std::filesystem::path& path, const Bytes& bytes);
void write_file_atomic(const std::filesystem::path& path, std::string_view text);
Bytes read_file(const std::filesystem::path& path);

// `metadata` is a JSON object stored in the manifest; it is not part of the digest.
Bytes encode_model(const Network& net, const std::string& metadata = "{}");
Network decode_model(const Bytes& bytes);
// SHA-256 of the model's blob: the identity sidecars refer to.
std::string model_digest(const Network& net);
std::string container_digest(const Bytes& bytes);

void save_model(const Network& net, const std::filesystem::path& path, const std::string& metadata = "{}");
std::string model_metadata(const Bytes& bytes);
Network load_model(const std::filesystem::path& path);

Bytes encode_dataset(const Dataset& data);
// At most `limit` samples, in stored order. Sets `warning` when the limit exceeds the count.
Dataset decode_dataset(const Bytes& bytes, std::optional<std::size_t> limit = std::nullopt,
                       std::string* warning = nullptr);
void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path, std::optional<std::size_t> limit = std::nullopt,
                     std::string* warning = nullptr);
// Same, but a container without labels is an error.
Dataset load_labeled_dataset(const std::filesystem::path& path, std::optional<std::size_t> limit = std::nullopt,
                             std::string* warning = nullptr);

// Calibrated spiking parameters for one T, bound to a model container by digest. Bias deltas are
// relative to the BN-folded model: snn bias = folded bias + delta.
struct Sidecar {
    std::string model_digest;
    int time_steps = 0;
    RoundMode round_mode = RoundMode::round;
    std::vector<std::size_t> layers;          // affine layer index per position
    std::vector<Tensor> thresholds;
    std::vector<Tensor> bias_deltas;
    std::vector<Tensor> initial_potentials;  // empty tensor for zero
    std::string provenance = "{}";           // JSON object text

    bool operator==(const Sidecar& other) const = default;
};

struct SpikingModel {
    Network net;
    SpikingConfig config;
};

// Records the difference between `snn` and fold_bn(model).
Sidecar make_sidecar(const Network& model, const Network& snn, const SpikingConfig& config,
                     const std::string& provenance = "{}");
// Rebuilds the spiking network; the model's digest must match the sidecar.
SpikingModel apply_sidecar(const Network& model, const Sidecar& sidecar);

Bytes encode_sidecar(const Sidecar& sidecar);
Sidecar decode_sidecar(const Bytes& bytes);
void save_sidecar(const Sidecar& sidecar, const std::filesystem::path& path);
Sidecar load_sidecar(const std::filesystem::path& path);

}  // namespace spikecalib
