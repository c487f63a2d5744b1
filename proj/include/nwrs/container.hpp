#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "nwrs/error.hpp"
#include "nwrs/integrity.hpp"
#include "nwrs/model.hpp"
#include "nwrs/resync.hpp"
#include "nwrs/tensor.hpp"
#include "nwrs/watermark.hpp"

// Single-file weight container, version 1, all integers little-endian:
//
//   offset 0   magic            "NWRS"
//   offset 4   version          u32 = 1
//   offset 8   manifest length  u64
//   offset 16  manifest         UTF-8 JSON, space-padded so the blob starts 8-byte aligned
//   ...        blob             float32 LE row-major payloads at 8-byte aligned offsets
//
// The manifest carries the architecture, the metadata and a tensor directory
// {name, dtype:"f32", shape, offset, byteLength} with offsets relative to the blob.

namespace nwrs {

using json = nlohmann::json;

inline constexpr std::uint32_t container_version = 1;
inline constexpr char container_magic[4] = {'N', 'W', 'R', 'S'};
inline constexpr std::size_t container_header_size = 16;

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline std::uint32_t get_u32(const std::uint8_t* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
}
inline std::uint64_t get_u64(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

inline std::uint64_t uint_field(const json& j, const char* key) {
    if (!j.is_object() || !j.contains(key)) throw format_error(std::string("manifest: missing field '") + key + "'");
    const auto& v = j.at(key);
    if (!v.is_number_unsigned()) throw format_error(std::string("manifest: field '") + key + "' must be a non-negative integer");
    return v.get<std::uint64_t>();
}

inline std::size_t size_field(const json& j, const char* key) {
    const auto v = uint_field(j, key);
    if (v > (std::uint64_t{1} << 32)) throw format_error(std::string("manifest: field '") + key + "' is too large");
    return static_cast<std::size_t>(v);
}

inline double double_field(const json& j, const char* key) {
    if (!j.is_object() || !j.contains(key) || !j.at(key).is_number())
        throw format_error(std::string("manifest: field '") + key + "' must be a number");
    return j.at(key).get<double>();
}

inline bool bool_field(const json& j, const char* key) {
    if (!j.is_object() || !j.contains(key) || !j.at(key).is_boolean())
        throw format_error(std::string("manifest: field '") + key + "' must be a boolean");
    return j.at(key).get<bool>();
}

inline std::string string_field(const json& j, const char* key) {
    if (!j.is_object() || !j.contains(key) || !j.at(key).is_string())
        throw format_error(std::string("manifest: field '") + key + "' must be a string");
    return j.at(key).get<std::string>();
}

/// Shape from JSON with an overflow-safe element count.
inline shape_t shape_field(const json& j, const char* key) {
    if (!j.is_object() || !j.contains(key) || !j.at(key).is_array())
        throw format_error(std::string("manifest: field '") + key + "' must be an array");
    shape_t s;
    std::uint64_t total = 1;
    for (const auto& d : j.at(key)) {
        if (!d.is_number_unsigned() || d.get<std::uint64_t>() == 0 || d.get<std::uint64_t>() > (1ULL << 32))
            throw format_error(std::string("manifest: bad dimension in '") + key + "'");
        total *= d.get<std::uint64_t>();
        if (total > (1ULL << 40)) throw format_error(std::string("manifest: shape '") + key + "' is too large");
        s.push_back(static_cast<std::size_t>(d.get<std::uint64_t>()));
    }
    return s;
}

}  // namespace detail

inline json to_json(const LayerSpec& s) {
    json j;
    j["kind"] = s.is_conv() ? "conv2d" : "fc";
    if (s.is_conv()) {
        j["in_channels"] = s.in_channels;
        j["out_channels"] = s.out_channels;
        j["kernel_h"] = s.kernel_h;
        j["kernel_w"] = s.kernel_w;
        j["stride"] = s.stride;
        j["in_h"] = s.in_h;
        j["in_w"] = s.in_w;
    } else {
        j["in_dim"] = s.in_dim;
        j["out_dim"] = s.out_dim;
    }
    j["activation"] = s.activation == Activation::relu ? "relu" : "identity";
    j["has_bias"] = s.has_bias;
    j["has_channel_scale"] = s.has_channel_scale;
    return j;
}

inline LayerSpec layer_spec_from_json(const json& j) {
    using namespace detail;
    LayerSpec s;
    const auto kind = string_field(j, "kind");
    const auto act = string_field(j, "activation");
    if (act != "relu" && act != "identity") throw format_error("manifest: unknown activation '" + act + "'");
    const auto a = act == "relu" ? Activation::relu : Activation::identity;
    if (kind == "fc") {
        s = LayerSpec::fc(size_field(j, "in_dim"), size_field(j, "out_dim"), a);
    } else if (kind == "conv2d") {
        s = LayerSpec::conv(size_field(j, "in_channels"), size_field(j, "out_channels"), size_field(j, "kernel_h"),
                            size_field(j, "kernel_w"), size_field(j, "in_h"), size_field(j, "in_w"), a, true, false,
                            size_field(j, "stride"));
    } else {
        throw format_error("manifest: unknown layer kind '" + kind + "'");
    }
    s.has_bias = bool_field(j, "has_bias");
    s.has_channel_scale = bool_field(j, "has_channel_scale");
    try {
        s.validate();
    } catch (const architecture_error& e) {
        throw format_error(std::string("manifest: ") + e.what());
    }
    return s;
}

inline json to_json(const Metadata& m) {
    json j;
    j["seed"] = m.seed;
    if (m.dataset) {
        const auto& d = *m.dataset;
        j["dataset"] = {{"num_classes", d.num_classes}, {"per_class", d.per_class}, {"dim", d.dim}, {"seed", d.seed}};
    } else {
        j["dataset"] = nullptr;
    }
    if (m.training) {
        const auto& t = *m.training;
        j["training"] = {{"epochs", t.epochs},
                         {"learning_rate", t.learning_rate},
                         {"momentum", t.momentum},
                         {"weight_decay", t.weight_decay},
                         {"batch_size", t.batch_size},
                         {"seed", t.seed}};
    } else {
        j["training"] = nullptr;
    }
    if (m.watermark) {
        const auto& w = *m.watermark;
        j["watermark"] = {{"layer", w.layer},
                          {"bit_count", w.bit_count},
                          {"projection_seed", w.projection_seed},
                          {"lambda", w.lambda}};
    } else {
        j["watermark"] = nullptr;
    }
    return j;
}

inline Metadata metadata_from_json(const json& j) {
    using namespace detail;
    if (!j.is_object()) throw format_error("manifest: metadata must be an object");
    Metadata m;
    m.seed = uint_field(j, "seed");
    if (j.contains("dataset") && !j.at("dataset").is_null()) {
        const auto& d = j.at("dataset");
        m.dataset = DatasetSpec{size_field(d, "num_classes"), size_field(d, "per_class"), size_field(d, "dim"),
                                uint_field(d, "seed")};
    }
    if (j.contains("training") && !j.at("training").is_null()) {
        const auto& t = j.at("training");
        m.training = TrainingRecord{size_field(t, "epochs"),     double_field(t, "learning_rate"),
                                    double_field(t, "momentum"), double_field(t, "weight_decay"),
                                    size_field(t, "batch_size"), uint_field(t, "seed")};
    }
    if (j.contains("watermark") && !j.at("watermark").is_null()) {
        const auto& w = j.at("watermark");
        m.watermark = WatermarkInfo{size_field(w, "layer"), size_field(w, "bit_count"), uint_field(w, "projection_seed"),
                                    double_field(w, "lambda")};
    }
    return m;
}

namespace detail {

struct TensorSlot {
    std::string name;
    const Tensor* tensor;
};

inline std::vector<TensorSlot> tensor_slots(const ModelBundle& m) {
    std::vector<TensorSlot> out;
    for (std::size_t l = 0; l < m.num_layers(); ++l) {
        const auto prefix = "layers." + std::to_string(l) + ".";
        const auto& p = m.params[l];
        out.push_back({prefix + "weight", &p.weight});
        if (p.bias) out.push_back({prefix + "bias", &*p.bias});
        if (p.scale) out.push_back({prefix + "scale", &*p.scale});
        if (p.shift) out.push_back({prefix + "shift", &*p.shift});
    }
    return out;
}

inline std::size_t align8(std::size_t v) { return (v + 7) & ~std::size_t{7}; }

}  // namespace detail

/// Serializes to the container byte layout.
inline std::vector<std::uint8_t> encode_container(const ModelBundle& m) {
    m.validate();
    json manifest;
    manifest["architecture"]["input_shape"] = m.input_shape;
    manifest["architecture"]["layers"] = json::array();
    for (const auto& s : m.layers) manifest["architecture"]["layers"].push_back(to_json(s));
    manifest["metadata"] = to_json(m.metadata);
    manifest["tensors"] = json::array();

    const auto slots = detail::tensor_slots(m);
    std::size_t offset = 0;
    std::vector<std::size_t> offsets;
    for (const auto& s : slots) {
        offset = detail::align8(offset);
        offsets.push_back(offset);
        const std::size_t bytes = s.tensor->size() * 4;
        manifest["tensors"].push_back(
            {{"name", s.name}, {"dtype", "f32"}, {"shape", s.tensor->shape()}, {"offset", offset}, {"byteLength", bytes}});
        offset += bytes;
    }
    const std::size_t blob_size = detail::align8(offset);

    std::string text = manifest.dump();
    text.append(detail::align8(container_header_size + text.size()) - container_header_size - text.size(), ' ');

    std::vector<std::uint8_t> out;
    out.reserve(container_header_size + text.size() + blob_size);
    out.insert(out.end(), std::begin(container_magic), std::end(container_magic));
    detail::put_u32(out, container_version);
    detail::put_u64(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    const std::size_t blob_start = out.size();
    out.resize(blob_start + blob_size, 0);
    for (std::size_t k = 0; k < slots.size(); ++k) {
        std::uint8_t* dst = out.data() + blob_start + offsets[k];
        for (float f : slots[k].tensor->data()) {
            const auto bits = std::bit_cast<std::uint32_t>(f);
            for (int b = 0; b < 4; ++b) *dst++ = static_cast<std::uint8_t>(bits >> (8 * b));
        }
    }
    return out;
}

/// Parses the container byte layout. Every failure is a nwrs::error.
inline ModelBundle decode_container(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < container_header_size) throw format_error("file too short for a container header");
    if (!std::equal(std::begin(container_magic), std::end(container_magic), bytes.begin(),
                    [](char a, std::uint8_t b) { return static_cast<std::uint8_t>(a) == b; }))
        throw format_error("bad magic (not an NWRS container)");
    const auto version = detail::get_u32(bytes.data() + 4);
    if (version != container_version) throw format_error("unsupported version " + std::to_string(version));
    const auto manifest_len = detail::get_u64(bytes.data() + 8);
    if (manifest_len > bytes.size() - container_header_size)
        throw corruption_error("manifest length " + std::to_string(manifest_len) + " exceeds file size");
    const auto blob_start = container_header_size + static_cast<std::size_t>(manifest_len);
    const std::span<const std::uint8_t> blob = bytes.subspan(blob_start);

    const json manifest = json::parse(bytes.begin() + container_header_size, bytes.begin() + blob_start, nullptr, false);
    if (manifest.is_discarded() || !manifest.is_object()) throw format_error("manifest is not a JSON object");

    ModelBundle m;
    try {
        const auto& arch = manifest.at("architecture");
        m.input_shape = detail::shape_field(arch, "input_shape");
        if (!arch.at("layers").is_array() || arch.at("layers").empty())
            throw format_error("manifest: architecture has no layers");
        for (const auto& lj : arch.at("layers")) m.layers.push_back(layer_spec_from_json(lj));
        m.metadata = metadata_from_json(manifest.at("metadata"));
        const auto& dir = manifest.at("tensors");
        if (!dir.is_array()) throw format_error("manifest: tensor directory must be an array");

        struct Entry {
            std::string name;
            shape_t shape;
            std::uint64_t offset;
            std::uint64_t length;
        };
        std::vector<Entry> entries;
        for (const auto& t : dir) {
            Entry e{detail::string_field(t, "name"), detail::shape_field(t, "shape"), detail::uint_field(t, "offset"),
                    detail::uint_field(t, "byteLength")};
            if (detail::string_field(t, "dtype") != "f32") throw format_error("tensor '" + e.name + "' is not f32");
            if (e.length != static_cast<std::uint64_t>(shape_numel(e.shape)) * 4)
                throw corruption_error("tensor '" + e.name + "' byteLength does not match its shape");
            if (e.offset % 8 != 0) throw corruption_error("tensor '" + e.name + "' offset is not 8-byte aligned");
            if (e.offset > blob.size() || e.length > blob.size() - e.offset)
                throw corruption_error("tensor '" + e.name + "' lies outside the blob (offset " + std::to_string(e.offset) +
                                       ", length " + std::to_string(e.length) + ", blob " +
                                       std::to_string(blob.size()) + " bytes)");
            entries.push_back(std::move(e));
        }
        std::vector<const Entry*> by_offset;
        for (const auto& e : entries) by_offset.push_back(&e);
        std::sort(by_offset.begin(), by_offset.end(), [](auto a, auto b) { return a->offset < b->offset; });
        for (std::size_t k = 1; k < by_offset.size(); ++k)
            if (by_offset[k - 1]->offset + by_offset[k - 1]->length > by_offset[k]->offset)
                throw corruption_error("tensors '" + by_offset[k - 1]->name + "' and '" + by_offset[k]->name + "' overlap");

        auto read = [&](const std::string& name, const shape_t& expected) {
            const auto it = std::find_if(entries.begin(), entries.end(), [&](const Entry& e) { return e.name == name; });
            if (it == entries.end()) throw corruption_error("tensor '" + name + "' is missing");
            if (it->shape != expected)
                throw corruption_error("tensor '" + name + "' has shape " + shape_str(it->shape) + ", expected " +
                                       shape_str(expected));
            std::vector<float> data(shape_numel(expected));
            const std::uint8_t* src = blob.data() + it->offset;
            for (auto& f : data) {
                f = std::bit_cast<float>(detail::get_u32(src));
                src += 4;
            }
            return Tensor(expected, std::move(data));
        };

        std::size_t expected_count = 0;
        for (std::size_t l = 0; l < m.layers.size(); ++l) {
            const auto& s = m.layers[l];
            const auto prefix = "layers." + std::to_string(l) + ".";
            LayerParams p;
            p.weight = read(prefix + "weight", s.weight_shape());
            ++expected_count;
            if (s.has_bias) {
                p.bias = read(prefix + "bias", {s.neurons()});
                ++expected_count;
            }
            if (s.has_channel_scale) {
                p.scale = read(prefix + "scale", {s.neurons()});
                p.shift = read(prefix + "shift", {s.neurons()});
                expected_count += 2;
            }
            m.params.push_back(std::move(p));
        }
        if (entries.size() != expected_count) throw corruption_error("manifest lists tensors the architecture does not declare");
        m.validate();
    } catch (const architecture_error& e) {
        throw corruption_error(std::string("inconsistent architecture: ") + e.what());
    } catch (const shape_error& e) {
        throw corruption_error(e.what());
    } catch (const json::exception& e) {
        throw format_error(std::string("manifest: ") + e.what());
    }
    return m;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open '" + path.string() + "' for reading");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw io_error("write to '" + path.string() + "' failed");
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("cannot open '" + path.string() + "' for writing");
    out << text;
    if (!out) throw io_error("write to '" + path.string() + "' failed");
}

inline json read_json(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    auto j = json::parse(bytes.begin(), bytes.end(), nullptr, false);
    if (j.is_discarded()) throw format_error("'" + path.string() + "' is not valid JSON");
    return j;
}

inline void save(const ModelBundle& m, const std::filesystem::path& path) { write_file(path, encode_container(m)); }

inline ModelBundle load(const std::filesystem::path& path) { return decode_container(read_file(path)); }

// ---- permutation files ----

inline json permutation_to_json(std::size_t layer, const Permutation& p, std::optional<std::uint64_t> seed = std::nullopt) {
    json j{{"layer", layer}, {"perm", p.map()}};
    if (seed) j["seed"] = *seed;
    return j;
}

struct PermutationFile {
    std::size_t layer = 0;
    Permutation perm;
    std::optional<std::uint64_t> seed;
};

inline PermutationFile permutation_from_json(const json& j) {
    PermutationFile f;
    try {
        f.layer = detail::size_field(j, "layer");
        if (!j.at("perm").is_array()) throw format_error("permutation: 'perm' must be an array");
        std::vector<std::size_t> map;
        for (const auto& v : j.at("perm")) {
            if (!v.is_number_unsigned()) throw validation_error("permutation entries must be non-negative integers");
            map.push_back(v.get<std::size_t>());
        }
        f.perm = Permutation(std::move(map));
        if (j.contains("seed") && !j.at("seed").is_null()) f.seed = detail::uint_field(j, "seed");
    } catch (const json::exception& e) {
        throw format_error(std::string("permutation: ") + e.what());
    }
    return f;
}

inline void save_permutation(const std::filesystem::path& path, std::size_t layer, const Permutation& p,
                             std::optional<std::uint64_t> seed = std::nullopt) {
    write_text(path, permutation_to_json(layer, p, seed).dump(2) + "\n");
}

inline PermutationFile load_permutation(const std::filesystem::path& path) { return permutation_from_json(read_json(path)); }

// ---- resync reports ----

inline json report_to_json(const ResyncReport& r) {
    json j;
    j["layers"] = json::array();
    for (const auto& l : r.layers) {
        json e{{"layer", l.layer}, {"perm", l.recovered.map()}, {"margin", l.min_margin}, {"ties", l.ties},
               {"duplicates", l.duplicates}};
        e["psi"] = l.psi ? json(*l.psi) : json(nullptr);
        j["layers"].push_back(std::move(e));
    }
    j["overallPsi"] = r.overall_psi ? json(*r.overall_psi) : json(nullptr);
    j["method"] = to_string(r.method);
    return j;
}

inline ResyncReport report_from_json(const json& j) {
    ResyncReport r;
    try {
        for (const auto& e : j.at("layers")) {
            LayerResync l;
            l.layer = detail::size_field(e, "layer");
            l.recovered = permutation_from_json(json{{"layer", l.layer}, {"perm", e.at("perm")}}).perm;
            l.min_margin = detail::double_field(e, "margin");
            l.ties = detail::size_field(e, "ties");
            if (e.contains("duplicates")) l.duplicates = detail::size_field(e, "duplicates");
            if (!e.at("psi").is_null()) l.psi = detail::double_field(e, "psi");
            r.layers.push_back(std::move(l));
        }
        if (!j.at("overallPsi").is_null()) r.overall_psi = detail::double_field(j, "overallPsi");
        r.method = parse_match_method(detail::string_field(j, "method"));
    } catch (const json::exception& e) {
        throw format_error(std::string("report: ") + e.what());
    }
    return r;
}

inline void save_report(const std::filesystem::path& path, const ResyncReport& r) {
    write_text(path, report_to_json(r).dump(2) + "\n");
}

inline ResyncReport load_report(const std::filesystem::path& path) { return report_from_json(read_json(path)); }

// ---- integrity verdicts ----

inline json verdict_to_json(const IntegrityVerdict& v) {
    auto num = [](double x) { return std::isfinite(x) ? json(x) : json(nullptr); };
    json j{{"layer", v.layer},
           {"layerVerdict", to_string(v.layer_verdict)},
           {"thresholds", {{"cosine", v.thresholds.cosine_eps}, {"norm", v.thresholds.norm_eps}}}};
    j["neurons"] = json::array();
    for (const auto& n : v.neurons)
        j["neurons"].push_back({{"index", n.index},
                                {"cosine", num(n.cosine_to_reference)},
                                {"normRatio", num(n.norm_ratio)},
                                {"flag", to_string(n.flag)}});
    return j;
}

// ---- watermark records (verifier side, carries the bits) ----

inline json watermark_to_json(const WatermarkRecord& w) {
    std::string bits;
    for (auto b : w.bits) bits += b ? '1' : '0';
    return {{"layer", w.layer},
            {"bits", bits},
            {"projectionSeed", w.projection_seed},
            {"lambda", w.lambda},
            {"featureDim", w.feature_dim}};
}

inline WatermarkRecord watermark_from_json(const json& j) {
    WatermarkRecord w;
    try {
        w.layer = detail::size_field(j, "layer");
        for (char c : detail::string_field(j, "bits")) {
            if (c != '0' && c != '1') throw format_error("watermark bits must be a string of 0 and 1");
            w.bits.push_back(c == '1' ? 1 : 0);
        }
        w.projection_seed = detail::uint_field(j, "projectionSeed");
        w.lambda = detail::double_field(j, "lambda");
        if (j.contains("featureDim")) w.feature_dim = detail::size_field(j, "featureDim");
    } catch (const json::exception& e) {
        throw format_error(std::string("watermark record: ") + e.what());
    }
    return w;
}

}  // namespace nwrs
