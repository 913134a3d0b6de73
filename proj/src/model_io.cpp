#include "spikecalib/model_io.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <random>

#include "json.hpp"
#include "spikecalib/error.hpp"

namespace spikecalib {

using nlohmann::json;

std::string sha256_hex(std::string_view data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw Error(ErrorKind::data, "SHA-256 computation failed");
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 15]);
    }
    return out;
}

std::string sha256_hex(const Bytes& data) {
    return sha256_hex(std::string_view(reinterpret_cast<const char*>(data.data()), data.size()));
}

void append_u32(Bytes& out, std::uint32_t value) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

void append_f32(Bytes& out, double value) { append_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(value))); }

std::uint32_t read_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
           static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

float read_f32(const std::uint8_t* p) { return std::bit_cast<float>(read_u32(p)); }

void write_file_atomic(const std::filesystem::path& path, const Bytes& bytes) {
    write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

void write_file_atomic(const std::filesystem::path& path, std::string_view text) {
    const auto dir = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
    std::random_device rd;
    const auto tmp = dir / ("." + path.filename().string() + ".tmp" + std::to_string(rd()));
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot write " + tmp.string());
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        out.flush();
        if (!out) {
            out.close();
            std::filesystem::remove(tmp);
            throw FormatError("write failed for " + path.string());
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        throw FormatError("cannot move output into place at " + path.string() + ": " + ec.message());
    }
}

Bytes read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

namespace {

constexpr std::size_t kHeader = 12;

struct Container {
    json manifest;
    const std::uint8_t* blob = nullptr;
    std::size_t blob_size = 0;
};

Bytes pack(const char (&magic)[4], json manifest, const Bytes& blob) {
    manifest["version"] = kContainerVersion;
    manifest["blob_bytes"] = blob.size();
    manifest["blob_sha256"] = sha256_hex(blob);
    const std::string text = manifest.dump();
    Bytes out(magic, magic + 4);
    const std::uint64_t n = text.size();
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(n >> (8 * i)));
    out.insert(out.end(), text.begin(), text.end());
    out.insert(out.end(), blob.begin(), blob.end());
    return out;
}

Container unpack(const Bytes& bytes, const char (&magic)[4], const char* what) {
    if (bytes.size() < kHeader) throw TruncationError(std::string(what) + ": file shorter than the header");
    if (!std::equal(magic, magic + 4, bytes.begin()))
        throw FormatError(std::string(what) + ": wrong magic bytes, not a " + what + " container");
    std::uint64_t n = 0;
    for (int i = 0; i < 8; ++i) n |= static_cast<std::uint64_t>(bytes[4 + i]) << (8 * i);
    if (n > bytes.size() - kHeader) throw TruncationError(std::string(what) + ": manifest truncated");
    Container c;
    try {
        c.manifest = json::parse(bytes.begin() + kHeader, bytes.begin() + kHeader + static_cast<long>(n));
    } catch (const json::exception& e) {
        throw FormatError(std::string(what) + ": manifest is not valid JSON: " + e.what());
    }
    if (!c.manifest.is_object() || !c.manifest.contains("version") || !c.manifest["version"].is_number_integer())
        throw FormatError(std::string(what) + ": manifest has no version");
    const int version = c.manifest["version"].get<int>();
    if (version != kContainerVersion)
        throw VersionError(std::string(what) + ": format version " + std::to_string(version) + ", expected " +
                           std::to_string(kContainerVersion));
    c.blob = bytes.data() + kHeader + n;
    c.blob_size = bytes.size() - kHeader - n;
    const auto declared = c.manifest.value("blob_bytes", std::uint64_t{0});
    if (c.blob_size < declared)
        throw TruncationError(std::string(what) + ": blob has " + std::to_string(c.blob_size) + " bytes, manifest declares " +
                              std::to_string(declared));
    if (c.blob_size > declared)
        throw FormatError(std::string(what) + ": " + std::to_string(c.blob_size - declared) + " trailing bytes after the blob");
    const std::string digest =
        sha256_hex(std::string_view(reinterpret_cast<const char*>(c.blob), c.blob_size));
    if (digest != c.manifest.value("blob_sha256", std::string()))
        throw DigestError(std::string(what) + ": blob digest " + digest + " does not match the manifest");
    return c;
}

json put_tensor(Bytes& blob, const Tensor& t) {
    json d;
    d["shape"] = t.shape();
    d["offset"] = blob.size();
    d["length"] = t.size() * 4;
    for (double v : t.storage()) append_f32(blob, v);
    return d;
}

// Reads tensors while checking bounds and overlaps.
class TensorReader {
public:
    TensorReader(const Container& c, std::string context) : c_(c), context_(std::move(context)) {}

    Tensor read(const json& d, const std::string& where) {
        try {
            const Shape shape = d.at("shape").get<Shape>();
            const auto offset = d.at("offset").get<std::size_t>();
            const auto length = d.at("length").get<std::size_t>();
            const auto count = element_count(shape);
            if (length != count * 4)
                throw FormatError(where + ": length " + std::to_string(length) + " bytes for " + std::to_string(count) +
                                  " elements");
            if (offset > c_.blob_size || length > c_.blob_size - offset)
                throw TruncationError(where + ": tensor extends past the end of the blob");
            for (const auto& [b, e] : used_)
                if (offset < e && b < offset + length) throw FormatError(where + ": tensor overlaps another tensor");
            used_.emplace_back(offset, offset + length);
            std::vector<double> data(count);
            for (std::size_t i = 0; i < count; ++i) data[i] = read_f32(c_.blob + offset + 4 * i);
            return Tensor(shape, std::move(data));
        } catch (const json::exception& e) {
            throw FormatError(where + ": bad tensor descriptor: " + e.what());
        }
    }

private:
    const Container& c_;
    std::string context_;
    std::vector<std::pair<std::size_t, std::size_t>> used_;
};

constexpr char kModelMagic[4] = {'S', 'C', 'M', '\0'};
constexpr char kDatasetMagic[4] = {'S', 'C', 'T', '\0'};
constexpr char kSidecarMagic[4] = {'S', 'C', 'S', '\0'};

Bytes model_blob(const Network& net, json* layers) {
    Bytes blob;
    json out = json::array();
    for (const Layer& layer : net.layers()) {
        json d;
        d["kind"] = kind_name(kind_of(layer));
        std::visit(
            [&](const auto& l) {
                using T = std::decay_t<decltype(l)>;
                if constexpr (std::is_same_v<T, LinearLayer>) {
                    d["weights"] = put_tensor(blob, l.weights);
                    d["bias"] = put_tensor(blob, l.bias);
                } else if constexpr (std::is_same_v<T, Conv2dLayer>) {
                    d["weights"] = put_tensor(blob, l.weights);
                    d["bias"] = put_tensor(blob, l.bias);
                    d["stride"] = l.stride;
                    d["padding"] = l.padding;
                } else if constexpr (std::is_same_v<T, AvgPool2dLayer>) {
                    d["window"] = l.window;
                    d["stride"] = l.stride;
                } else if constexpr (std::is_same_v<T, BatchNormLayer>) {
                    d["mean"] = put_tensor(blob, l.mean);
                    d["stddev"] = put_tensor(blob, l.stddev);
                    d["gamma"] = put_tensor(blob, l.gamma);
                    d["beta"] = put_tensor(blob, l.beta);
                }
            },
            layer);
        out.push_back(std::move(d));
    }
    if (layers) *layers = std::move(out);
    return blob;
}

}  // namespace

Bytes encode_model(const Network& net, const std::string& metadata) {
    json layers;
    const Bytes blob = model_blob(net, &layers);
    json m;
    try {
        m["metadata"] = json::parse(metadata.empty() ? "{}" : metadata);
    } catch (const json::exception& e) {
        throw UsageError(std::string("model metadata is not JSON: ") + e.what());
    }
    m["format"] = "spikecalib-model";
    m["input_shape"] = net.input_shape();
    m["layers"] = std::move(layers);
    return pack(kModelMagic, std::move(m), blob);
}

std::string model_digest(const Network& net) { return sha256_hex(model_blob(net, nullptr)); }

std::string container_digest(const Bytes& bytes) { return sha256_hex(bytes); }

Network decode_model(const Bytes& bytes) {
    const Container c = unpack(bytes, kModelMagic, "model");
    TensorReader reader(c, "model");
    std::vector<Layer> layers;
    Shape input;
    try {
        input = c.manifest.at("input_shape").get<Shape>();
        const json& list = c.manifest.at("layers");
        for (std::size_t i = 0; i < list.size(); ++i) {
            const json& d = list[i];
            const std::string where = "model layer " + std::to_string(i);
            const LayerKind kind = parse_kind(d.at("kind").get<std::string>());
            switch (kind) {
                case LayerKind::linear:
                    layers.emplace_back(LinearLayer{reader.read(d.at("weights"), where + " weights"),
                                                    reader.read(d.at("bias"), where + " bias")});
                    break;
                case LayerKind::conv2d:
                    layers.emplace_back(Conv2dLayer{reader.read(d.at("weights"), where + " weights"),
                                                    reader.read(d.at("bias"), where + " bias"), d.at("stride").get<int>(),
                                                    d.at("padding").get<int>()});
                    break;
                case LayerKind::avgpool2d:
                    layers.emplace_back(AvgPool2dLayer{d.at("window").get<int>(), d.at("stride").get<int>()});
                    break;
                case LayerKind::relu:
                    layers.emplace_back(ReluLayer{});
                    break;
                case LayerKind::batchnorm:
                    layers.emplace_back(BatchNormLayer{
                        reader.read(d.at("mean"), where + " mean"), reader.read(d.at("stddev"), where + " stddev"),
                        reader.read(d.at("gamma"), where + " gamma"), reader.read(d.at("beta"), where + " beta")});
                    break;
                case LayerKind::flatten:
                    layers.emplace_back(FlattenLayer{});
                    break;
            }
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("model manifest: ") + e.what());
    } catch (const UsageError& e) {
        throw FormatError(std::string("model manifest: ") + e.what());
    }
    try {
        return Network(std::move(input), std::move(layers));
    } catch (const ShapeError& e) {
        throw ShapeError(std::string("model: ") + e.what());
    }
}

void save_model(const Network& net, const std::filesystem::path& path, const std::string& metadata) {
    write_file_atomic(path, encode_model(net, metadata));
}

std::string model_metadata(const Bytes& bytes) {
    const Container c = unpack(bytes, kModelMagic, "model");
    return c.manifest.contains("metadata") ? c.manifest["metadata"].dump() : std::string("{}");
}

Network load_model(const std::filesystem::path& path) {
    return decode_model(read_file(path));
}

Bytes encode_dataset(const Dataset& data) {
    const auto n = data.size();
    if (data.labeled() && data.labels.size() != n)
        throw ShapeError("dataset has " + std::to_string(data.labels.size()) + " labels for " + std::to_string(n) +
                         " samples");
    Bytes blob;
    blob.reserve(data.samples.size() * 4 + data.labels.size() * 4);
    for (double v : data.samples.storage()) append_f32(blob, v);
    for (auto l : data.labels) append_u32(blob, l);
    json m;
    m["format"] = "spikecalib-dataset";
    m["count"] = n;
    m["sample_shape"] = data.samples.rank() ? data.samples.sample_shape() : Shape{};
    m["labels"] = data.labeled();
    return pack(kDatasetMagic, std::move(m), blob);
}

namespace {

Dataset decode_dataset_impl(const Bytes& bytes, std::optional<std::size_t> limit, std::string* warning,
                            bool* labeled_out) {
    const Container c = unpack(bytes, kDatasetMagic, "dataset");
    std::size_t n = 0;
    Shape sample;
    bool labeled = false;
    try {
        n = c.manifest.at("count").get<std::size_t>();
        sample = c.manifest.at("sample_shape").get<Shape>();
        labeled = c.manifest.at("labels").get<bool>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("dataset manifest: ") + e.what());
    }
    const auto per = element_count(sample);
    const std::size_t expected = n * per * 4 + (labeled ? n * 4 : 0);
    if (c.blob_size != expected)
        throw FormatError("dataset: blob has " + std::to_string(c.blob_size) + " bytes, " + std::to_string(n) +
                          " samples need " + std::to_string(expected));
    std::size_t take = n;
    if (limit) {
        if (*limit > n && warning)
            *warning = "requested " + std::to_string(*limit) + " samples, dataset has " + std::to_string(n);
        take = std::min(*limit, n);
    }
    Shape shape{take};
    shape.insert(shape.end(), sample.begin(), sample.end());
    std::vector<double> values(take * per);
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = read_f32(c.blob + 4 * i);
    Dataset out;
    out.samples = Tensor(shape, std::move(values));
    if (labeled) {
        const std::uint8_t* labels = c.blob + n * per * 4;
        out.labels.resize(take);
        for (std::size_t i = 0; i < take; ++i) out.labels[i] = read_u32(labels + 4 * i);
    }
    if (labeled_out) *labeled_out = labeled;
    return out;
}

}  // namespace

Dataset decode_dataset(const Bytes& bytes, std::optional<std::size_t> limit, std::string* warning) {
    return decode_dataset_impl(bytes, limit, warning, nullptr);
}

void save_dataset(const Dataset& data, const std::filesystem::path& path) {
    write_file_atomic(path, encode_dataset(data));
}

Dataset load_dataset(const std::filesystem::path& path, std::optional<std::size_t> limit, std::string* warning) {
    return decode_dataset(read_file(path), limit, warning);
}

Dataset load_labeled_dataset(const std::filesystem::path& path, std::optional<std::size_t> limit,
                             std::string* warning) {
    bool labeled = false;
    Dataset d = decode_dataset_impl(read_file(path), limit, warning, &labeled);
    if (!labeled) throw FormatError(path.string() + ": dataset has no labels");
    return d;
}

Sidecar make_sidecar(const Network& model, const Network& snn, const SpikingConfig& config,
                     const std::string& provenance) {
    const Network folded = fold_bn(model);
    if (folded.size() != snn.size() || folded.input_shape() != snn.input_shape())
        throw ShapeError("sidecar: spiking network does not have the model's structure");
    config.validate(snn);
    Sidecar s;
    s.model_digest = model_digest(model);
    s.time_steps = config.time_steps;
    s.round_mode = config.round_mode;
    s.provenance = provenance;
    const auto positions = snn.relu_indices().size();
    std::vector<bool> spiking(snn.size(), false);
    for (std::size_t k = 0; k < positions; ++k) {
        const auto idx = snn.spiking_affine_index(k);
        spiking[idx] = true;
        s.layers.push_back(idx);
        s.thresholds.push_back(config.thresholds[k]);
        s.bias_deltas.push_back(affine_bias(snn.layer(idx)) - affine_bias(folded.layer(idx)));
        s.initial_potentials.push_back(k < config.initial_potentials.size() ? config.initial_potentials[k] : Tensor());
    }
    for (std::size_t i = 0; i < snn.size(); ++i) {
        if (!is_affine(snn.layer(i))) continue;
        if (affine_weights(snn.layer(i)) != affine_weights(folded.layer(i)) ||
            (!spiking[i] && affine_bias(snn.layer(i)) != affine_bias(folded.layer(i))))
            throw UsageError("sidecar: layer " + std::to_string(i) +
                             " parameters differ from the model beyond spiking-layer biases; save a new model container");
    }
    return s;
}

SpikingModel apply_sidecar(const Network& model, const Sidecar& sidecar) {
    const std::string digest = model_digest(model);
    if (digest != sidecar.model_digest)
        throw DigestError("sidecar belongs to model " + sidecar.model_digest + ", got model " + digest);
    SpikingModel out{fold_bn(model), {}};
    const auto positions = out.net.relu_indices().size();
    if (sidecar.layers.size() != positions)
        throw ShapeError("sidecar has " + std::to_string(sidecar.layers.size()) + " spiking layers, model has " +
                         std::to_string(positions));
    for (std::size_t k = 0; k < positions; ++k) {
        const auto idx = out.net.spiking_affine_index(k);
        if (sidecar.layers[k] != idx)
            throw ShapeError("sidecar position " + std::to_string(k) + " names layer " +
                             std::to_string(sidecar.layers[k]) + ", model has " + std::to_string(idx));
        const Layer& l = out.net.layer(idx);
        if (sidecar.bias_deltas[k].shape() != affine_bias(l).shape())
            throw ShapeError("sidecar position " + std::to_string(k) + ": bias delta " +
                             to_string(sidecar.bias_deltas[k].shape()) + " for bias " + to_string(affine_bias(l).shape()));
        out.net.set_affine(idx, affine_weights(l), affine_bias(l) + sidecar.bias_deltas[k]);
    }
    out.config.time_steps = sidecar.time_steps;
    out.config.round_mode = sidecar.round_mode;
    out.config.thresholds = sidecar.thresholds;
    out.config.initial_potentials = sidecar.initial_potentials;
    out.config.validate(out.net);
    return out;
}

Bytes encode_sidecar(const Sidecar& s) {
    Bytes blob;
    json positions = json::array();
    for (std::size_t k = 0; k < s.layers.size(); ++k) {
        json p;
        p["layer"] = s.layers[k];
        p["threshold"] = put_tensor(blob, s.thresholds.at(k));
        p["bias_delta"] = put_tensor(blob, s.bias_deltas.at(k));
        const Tensor& v0 = s.initial_potentials.at(k);
        p["initial_potential"] = v0.empty() ? json() : put_tensor(blob, v0);
        positions.push_back(std::move(p));
    }
    json m;
    m["format"] = "spikecalib-sidecar";
    m["model_digest"] = s.model_digest;
    m["time_steps"] = s.time_steps;
    m["round_mode"] = round_mode_name(s.round_mode);
    m["positions"] = std::move(positions);
    try {
        m["provenance"] = json::parse(s.provenance.empty() ? "{}" : s.provenance);
    } catch (const json::exception& e) {
        throw UsageError(std::string("sidecar provenance is not JSON: ") + e.what());
    }
    return pack(kSidecarMagic, std::move(m), blob);
}

Sidecar decode_sidecar(const Bytes& bytes) {
    const Container c = unpack(bytes, kSidecarMagic, "sidecar");
    TensorReader reader(c, "sidecar");
    Sidecar s;
    try {
        s.model_digest = c.manifest.at("model_digest").get<std::string>();
        s.time_steps = c.manifest.at("time_steps").get<int>();
        s.round_mode = parse_round_mode(c.manifest.at("round_mode").get<std::string>());
        s.provenance = c.manifest.at("provenance").dump();
        const json& list = c.manifest.at("positions");
        for (std::size_t k = 0; k < list.size(); ++k) {
            const json& p = list[k];
            const std::string where = "sidecar position " + std::to_string(k);
            s.layers.push_back(p.at("layer").get<std::size_t>());
            s.thresholds.push_back(reader.read(p.at("threshold"), where + " threshold"));
            s.bias_deltas.push_back(reader.read(p.at("bias_delta"), where + " bias delta"));
            const json& v0 = p.at("initial_potential");
            s.initial_potentials.push_back(v0.is_null() ? Tensor() : reader.read(v0, where + " initial potential"));
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("sidecar manifest: ") + e.what());
    } catch (const UsageError& e) {
        throw FormatError(std::string("sidecar manifest: ") + e.what());
    }
    if (s.time_steps < 1) throw FormatError("sidecar: time steps must be >= 1");
    return s;
}

void save_sidecar(const Sidecar& sidecar, const std::filesystem::path& path) {
    write_file_atomic(path, encode_sidecar(sidecar));
}

Sidecar load_sidecar(const std::filesystem::path& path) {
    return decode_sidecar(read_file(path));
}

}  // namespace spikecalib
