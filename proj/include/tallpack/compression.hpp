#pragma once

// Bit-packed masks, the TLPK single-file archive, per-task reconstruction, and
// storage accounting.
//
// TLPK layout (all integers little-endian):
//   "TLPK" | u32 version |
//   u64 len | manifest JSON |
//   u64 len | pretrained weights (tensor archive bytes) |
//   u64 len | multi-task vector (tensor archive bytes) |
//   u64 len | packed masks, concatenated in task order

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "tallpack/baselines.hpp"
#include "tallpack/error.hpp"
#include "tallpack/merging.hpp"
#include "tallpack/tall_masks.hpp"
#include "tallpack/task_vectors.hpp"
#include "tallpack/tensor_store.hpp"

namespace tallpack {

/// Mask bits for all trainable tensors concatenated in lexicographic tensor
/// order, row-major within a tensor, LSB-first within each byte. The final
/// partial byte is zero-padded.
struct PackedMask {
    std::string task_label;
    std::vector<std::uint8_t> packed_bytes;
    std::uint64_t bit_count = 0;

    bool operator==(const PackedMask&) const = default;
};

constexpr std::uint64_t packed_size(std::uint64_t bits) noexcept { return (bits + 7) / 8; }

inline PackedMask pack_mask(const Mask& mask, const std::vector<std::string>& key_order,
                            std::string label = {}) {
    if (key_order.size() != mask.bits.size())
        throw error(errc::key_order_mismatch, "key order lists " + std::to_string(key_order.size()) +
                                                  " tensors, mask has " + std::to_string(mask.bits.size()));
    for (std::size_t i = 0; i < key_order.size(); ++i) {
        if (!mask.bits.contains(key_order[i]))
            throw error(errc::key_order_mismatch, "mask lacks tensor '" + key_order[i] + "'");
        if (i > 0 && !(key_order[i - 1] < key_order[i]))
            throw error(errc::key_order_mismatch, "key order is not strictly lexicographic");
    }

    PackedMask out;
    out.task_label = std::move(label);
    out.bit_count = mask.bit_count();
    out.packed_bytes.assign(packed_size(out.bit_count), 0);
    std::uint64_t pos = 0;
    for (const auto& name : key_order) {
        for (auto bit : mask.bits.at(name)) {
            if (bit) out.packed_bytes[pos >> 3] |= static_cast<std::uint8_t>(1u << (pos & 7));
            ++pos;
        }
    }
    return out;
}

/// `tensor_shapes` is (name, element count) in packing order.
inline Mask unpack_mask(const PackedMask& packed,
                        const std::vector<std::pair<std::string, std::uint64_t>>& tensor_shapes) {
    std::uint64_t expected = 0;
    for (const auto& [_, n] : tensor_shapes) expected += n;
    if (packed.bit_count != expected)
        throw error(errc::bit_count_mismatch, "mask declares " + std::to_string(packed.bit_count) +
                                                  " bits, layout has " + std::to_string(expected));
    if (packed.packed_bytes.size() != packed_size(expected))
        throw error(errc::bit_count_mismatch, "packed mask has " + std::to_string(packed.packed_bytes.size()) +
                                                  " bytes, expected " + std::to_string(packed_size(expected)));
    if (expected % 8 != 0) {
        const std::uint8_t pad = static_cast<std::uint8_t>(0xffu << (expected % 8));
        if (packed.packed_bytes.back() & pad) throw error(errc::non_zero_padding, "padding bits set");
    }

    Mask m;
    std::uint64_t pos = 0;
    for (const auto& [name, n] : tensor_shapes) {
        auto& bits = m.bits[name];
        bits.resize(n);
        for (std::uint64_t i = 0; i < n; ++i, ++pos) bits[i] = (packed.packed_bytes[pos >> 3] >> (pos & 7)) & 1u;
    }
    return m;
}

inline std::vector<std::pair<std::string, std::uint64_t>> mask_layout(const TensorMap& trainable) {
    std::vector<std::pair<std::string, std::uint64_t>> out;
    for (const auto& [name, t] : trainable) out.emplace_back(name, t.size());
    return out;
}

/// theta_pre + mask o tau_mtl. No merging coefficient is applied unless
/// `alpha` is given.
inline TensorMap reconstruct(const TensorMap& pretrained, const MultiTaskVector& tau_mtl, const Mask& mask,
                             double alpha = 1.0) {
    return masked_apply(pretrained, tau_mtl, mask, alpha);
}

// --- archive ----------------------------------------------------------------

inline constexpr std::uint32_t tallpack_version = 1;
inline constexpr char tallpack_magic[4] = {'T', 'L', 'P', 'K'};

struct ArchiveTask {
    std::string label;
    double lambda = 0.0;
    bool operator==(const ArchiveTask&) const = default;
};

struct ArchiveManifest {
    std::uint32_t version = tallpack_version;
    std::vector<ArchiveTask> tasks;
    double alpha = 1.0;                  // scale applied by default at reconstruction
    std::string merge_method = "task_arithmetic";
    std::string mask_method = "tall";
    TrainableKeySpec keys;

    bool operator==(const ArchiveManifest&) const = default;
};

struct TallpackArchive {
    ArchiveManifest manifest;
    TensorMap pretrained;
    MultiTaskVector mtl_vector;
    std::vector<PackedMask> masks;

    std::uint64_t trainable_count() const { return mtl_vector.tensors.total_elements(); }

    const PackedMask& mask_for(const std::string& label) const {
        for (const auto& m : masks)
            if (m.task_label == label) return m;
        throw error(errc::unknown_task, "no task labelled '" + label + "'");
    }

    Mask unpack(const std::string& label) const { return unpack_mask(mask_for(label), mask_layout(mtl_vector.tensors)); }

    TensorMap reconstruct_task(const std::string& label) const {
        return reconstruct(pretrained, mtl_vector, unpack(label), manifest.alpha);
    }

    MaskSet mask_set() const {
        MaskSet set;
        for (std::size_t t = 0; t < masks.size(); ++t)
            set.add(masks[t].task_label, unpack(masks[t].task_label), manifest.tasks.at(t).lambda);
        return set;
    }

    void validate() const {
        if (masks.empty() || manifest.tasks.empty()) throw error(errc::empty_input, "archive holds no tasks");
        if (masks.size() != manifest.tasks.size())
            throw error(errc::manifest_mismatch, "manifest lists " + std::to_string(manifest.tasks.size()) +
                                                     " tasks but archive holds " + std::to_string(masks.size()) +
                                                     " masks");
        manifest.keys.validate(pretrained);
        std::vector<std::string> mtl_keys = mtl_vector.tensors.keys();
        auto trainable = manifest.keys.trainable;
        std::sort(trainable.begin(), trainable.end());
        if (mtl_keys != trainable)
            throw error(errc::manifest_mismatch, "multi-task vector keys differ from the trainable key set");
        detail::require_subset_layout(mtl_vector.tensors, pretrained);
        const auto bits = trainable_count();
        for (std::size_t t = 0; t < masks.size(); ++t) {
            if (masks[t].task_label != manifest.tasks[t].label)
                throw error(errc::manifest_mismatch, "mask " + std::to_string(t) + " label mismatch");
            if (masks[t].bit_count != bits || masks[t].packed_bytes.size() != packed_size(bits))
                throw error(errc::manifest_mismatch, "mask '" + masks[t].task_label + "' has wrong bit count");
        }
    }

    bool operator==(const TallpackArchive& o) const {
        return manifest == o.manifest && bit_identical(pretrained, o.pretrained) &&
               bit_identical(mtl_vector.tensors, o.mtl_vector.tensors) &&
               mtl_vector.num_source_tasks == o.mtl_vector.num_source_tasks && masks == o.masks;
    }
};

namespace detail {

inline nlohmann::json manifest_json(const TallpackArchive& a) {
    nlohmann::json tasks = nlohmann::json::array();
    for (const auto& t : a.manifest.tasks) tasks.push_back({{"label", t.label}, {"lambda", t.lambda}});
    nlohmann::json tensors = nlohmann::json::object();
    for (const auto& [name, t] : a.pretrained)
        tensors[name] = {{"shape", t.shape}, {"trainable", a.mtl_vector.tensors.contains(name)}};
    return {{"format", "tallpack"},
            {"version", a.manifest.version},
            {"num_tasks", a.manifest.tasks.size()},
            {"tasks", tasks},
            {"alpha", a.manifest.alpha},
            {"merge_method", a.manifest.merge_method},
            {"mask_method", a.manifest.mask_method},
            {"trainable", a.manifest.keys.trainable},
            {"frozen", a.manifest.keys.frozen},
            {"tensors", tensors},
            {"bit_count", a.trainable_count()},
            {"mask_bytes", packed_size(a.trainable_count())}};
}

inline void append_section(std::vector<std::uint8_t>& out, std::span<const std::uint8_t> bytes) {
    append_u64(out, bytes.size());
    out.insert(out.end(), bytes.begin(), bytes.end());
}

class SectionReader {
public:
    explicit SectionReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::span<const std::uint8_t> take(std::size_t n, const char* what) {
        if (n > bytes_.size() - pos_)
            throw error(errc::manifest_mismatch, std::string(what) + " extends past end of file");
        auto s = bytes_.subspan(pos_, n);
        pos_ += n;
        return s;
    }

    std::span<const std::uint8_t> section(const char* what) {
        const auto len_bytes = take(8, what);
        std::uint64_t len;
        std::memcpy(&len, len_bytes.data(), 8);
        if (len > bytes_.size() - pos_)
            throw error(errc::manifest_mismatch, std::string(what) + " length exceeds file size");
        return take(static_cast<std::size_t>(len), what);
    }

    bool done() const { return pos_ == bytes_.size(); }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

template <typename T>
T manifest_field(const nlohmann::json& j, const char* key) {
    if (!j.contains(key)) throw error(errc::manifest_mismatch, std::string("manifest lacks '") + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw error(errc::manifest_mismatch, std::string("manifest field '") + key + "': " + e.what());
    }
}

} // namespace detail

inline std::vector<std::uint8_t> serialize_tallpack(const TallpackArchive& archive) {
    archive.validate();
    std::vector<std::uint8_t> out(tallpack_magic, tallpack_magic + 4);
    const auto* v = reinterpret_cast<const std::uint8_t*>(&archive.manifest.version);
    out.insert(out.end(), v, v + 4);

    const std::string manifest = detail::manifest_json(archive).dump();
    detail::append_section(out, std::span(reinterpret_cast<const std::uint8_t*>(manifest.data()), manifest.size()));
    detail::append_section(out, serialize_archive(archive.pretrained));
    detail::append_section(out, serialize_archive(archive.mtl_vector.tensors));
    std::vector<std::uint8_t> masks;
    for (const auto& m : archive.masks) masks.insert(masks.end(), m.packed_bytes.begin(), m.packed_bytes.end());
    detail::append_section(out, masks);
    return out;
}

inline TallpackArchive parse_tallpack(std::span<const std::uint8_t> bytes) {
    detail::SectionReader reader(bytes);
    const auto magic = reader.take(4, "magic");
    if (std::memcmp(magic.data(), tallpack_magic, 4) != 0) throw error(errc::malformed_header, "not a TLPK archive");
    std::uint32_t version;
    std::memcpy(&version, reader.take(4, "version").data(), 4);
    if (version != tallpack_version)
        throw error(errc::unsupported_version, "TLPK version " + std::to_string(version));

    const auto manifest_bytes = reader.section("manifest");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(manifest_bytes.begin(), manifest_bytes.end());
    } catch (const nlohmann::json::exception& e) {
        throw error(errc::malformed_header, std::string("manifest: ") + e.what());
    }

    TallpackArchive a;
    a.manifest.version = version;
    for (const auto& t : detail::manifest_field<nlohmann::json>(j, "tasks"))
        a.manifest.tasks.push_back({detail::manifest_field<std::string>(t, "label"),
                                    detail::manifest_field<double>(t, "lambda")});
    a.manifest.alpha = detail::manifest_field<double>(j, "alpha");
    a.manifest.merge_method = detail::manifest_field<std::string>(j, "merge_method");
    a.manifest.mask_method = detail::manifest_field<std::string>(j, "mask_method");
    a.manifest.keys.trainable = detail::manifest_field<std::vector<std::string>>(j, "trainable");
    a.manifest.keys.frozen = detail::manifest_field<std::vector<std::string>>(j, "frozen");
    const auto declared_tasks = detail::manifest_field<std::uint64_t>(j, "num_tasks");
    const auto declared_bits = detail::manifest_field<std::uint64_t>(j, "bit_count");
    const auto declared_mask_bytes = detail::manifest_field<std::uint64_t>(j, "mask_bytes");
    if (declared_tasks != a.manifest.tasks.size())
        throw error(errc::manifest_mismatch, "num_tasks disagrees with task list");

    a.pretrained = parse_archive(reader.section("pretrained weights"));
    a.mtl_vector.tensors = parse_archive(reader.section("multi-task vector"));
    a.mtl_vector.num_source_tasks = a.manifest.tasks.size();

    const auto tensors = detail::manifest_field<nlohmann::json>(j, "tensors");
    if (tensors.size() != a.pretrained.size())
        throw error(errc::manifest_mismatch, "manifest tensor table disagrees with payload");
    for (const auto& [name, t] : a.pretrained) {
        if (!tensors.contains(name) || detail::manifest_field<Shape>(tensors.at(name), "shape") != t.shape)
            throw error(errc::manifest_mismatch, "tensor '" + name + "' disagrees with the manifest");
    }

    const auto bits = a.trainable_count();
    if (declared_bits != bits || declared_mask_bytes != packed_size(bits))
        throw error(errc::manifest_mismatch, "declared mask size disagrees with the trainable tensors");
    const auto mask_bytes = reader.section("masks");
    if (mask_bytes.size() != a.manifest.tasks.size() * packed_size(bits))
        throw error(errc::manifest_mismatch, "mask section holds " + std::to_string(mask_bytes.size()) +
                                                 " bytes, manifest implies " +
                                                 std::to_string(a.manifest.tasks.size() * packed_size(bits)));
    if (!reader.done()) throw error(errc::manifest_mismatch, "trailing bytes after the mask section");

    const auto stride = packed_size(bits);
    for (std::size_t t = 0; t < a.manifest.tasks.size(); ++t) {
        PackedMask m;
        m.task_label = a.manifest.tasks[t].label;
        m.bit_count = bits;
        m.packed_bytes.assign(mask_bytes.begin() + static_cast<std::ptrdiff_t>(t * stride),
                              mask_bytes.begin() + static_cast<std::ptrdiff_t>((t + 1) * stride));
        a.masks.push_back(std::move(m));
    }
    a.validate();
    return a;
}

inline void write_tallpack(const TallpackArchive& archive, const fs::path& path) {
    write_file_atomic(path, serialize_tallpack(archive));
}

inline TallpackArchive read_tallpack(const fs::path& path) { return parse_tallpack(read_file(path)); }

// --- compression pipeline ---------------------------------------------------

enum class MaskMethod { tall, magnitude };

struct CompressConfig {
    MergeMethod method = MergeMethod::task_arithmetic; // task_arithmetic or ties
    MaskMethod mask_method = MaskMethod::tall;
    std::vector<double> lambda_grid = default_lambda_grid();
    double ties_trim_fraction = 0.2;
    double magnitude_fraction = default_magnitude_fraction;
    double alpha = 1.0;
};

/// Builds {theta_pre, tau_mtl, per-task masks}. TALL masks are tuned per task
/// against the checkpoint with `scorers[t]` (default: negative L1 distance).
inline TallpackArchive compress_checkpoints(const TensorMap& pretrained,
                                            const std::vector<LabeledCheckpoint>& checkpoints,
                                            const TrainableKeySpec& keys, const CompressConfig& config,
                                            const std::vector<Scorer>& scorers = {}) {
    if (checkpoints.empty()) throw error(errc::empty_input, "no checkpoints to compress");
    if (config.method != MergeMethod::task_arithmetic && config.method != MergeMethod::ties)
        throw error(errc::empty_input, "compression supports task_arithmetic or ties vectors");

    std::vector<TaskVector> vectors(checkpoints.size());
    parallel_for(checkpoints.size(), [&](std::size_t t) {
        vectors[t] = compute_task_vector(checkpoints[t].weights, pretrained, keys, checkpoints[t].label);
    });
    MultiTaskVector tau = config.method == MergeMethod::ties ? ties_merge(vectors, config.ties_trim_fraction)
                                                             : sum_task_vectors(vectors);

    TallpackArchive archive;
    archive.manifest.alpha = config.alpha;
    archive.manifest.merge_method = std::string(method_name(config.method));
    archive.manifest.keys = keys;
    archive.pretrained = pretrained;

    const auto key_order = tau.tensors.keys();
    if (config.mask_method == MaskMethod::tall) {
        archive.manifest.mask_method = "tall";
        const auto set = build_task_masks(pretrained, checkpoints, vectors, tau, config.lambda_grid, scorers);
        for (const auto& e : set.masks) {
            archive.manifest.tasks.push_back({e.label, e.lambda});
            archive.masks.push_back(pack_mask(e.mask, key_order, e.label));
        }
    } else {
        archive.manifest.mask_method = "magnitude";
        for (const auto& v : vectors) {
            archive.manifest.tasks.push_back({v.source_label, 0.0});
            archive.masks.push_back(pack_mask(magnitude_mask(v, config.magnitude_fraction), key_order, v.source_label));
        }
    }
    archive.mtl_vector = std::move(tau);
    archive.validate();
    return archive;
}

// --- storage accounting -----------------------------------------------------

struct StorageRow {
    std::string method;
    std::uint64_t bits = 0;
    bool lower_bound = false; // true where the true cost is strictly greater

    double gigabits() const noexcept { return static_cast<double>(bits) / 1e9; }
};

struct StorageReport {
    std::uint64_t tasks = 0;
    std::uint64_t trainable = 0;
    std::uint64_t frozen = 0;
    std::vector<StorageRow> rows;

    const StorageRow& row(const std::string& method) const {
        for (const auto& r : rows)
            if (r.method == method) return r;
        throw error(errc::empty_input, "no storage row '" + method + "'");
    }

    static std::string format_gb(const StorageRow& r) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%s%.1f", r.lower_bound ? ">" : "", r.gigabits());
        return buf;
    }

    std::string to_csv() const {
        std::ostringstream os;
        os << "method,bits,gb\n";
        for (const auto& r : rows) os << r.method << ',' << r.bits << ',' << format_gb(r) << '\n';
        return os.str();
    }

    nlohmann::json to_json() const {
        nlohmann::json out = {{"T", tasks}, {"p_prime", trainable}, {"frozen", frozen}};
        nlohmann::json list = nlohmann::json::array();
        for (const auto& r : rows)
            list.push_back({{"method", r.method}, {"bits", r.bits}, {"gb", format_gb(r)}, {"lower_bound", r.lower_bound}});
        out["rows"] = list;
        return out;
    }
};

/// Bit costs for T tasks with P' trainable and F frozen f32 parameters.
inline StorageReport storage_report(std::uint64_t tasks, std::uint64_t trainable, std::uint64_t frozen) {
    if (tasks == 0) throw error(errc::empty_input, "T must be >= 1");
    StorageReport r{tasks, trainable, frozen, {}};
    const std::uint64_t single = 32 * (trainable + frozen);
    const std::uint64_t masked = (64 + tasks) * trainable + 32 * frozen;
    r.rows = {
        {"fine_tuned", 32 * (tasks * trainable + frozen), false},
        {"single_model", single, false},
        {"tallpack", masked, false},
        {"magnitude_masking", masked, false},
        {"magnitude_pruning", masked, true},
    };
    return r;
}

} // namespace tallpack
