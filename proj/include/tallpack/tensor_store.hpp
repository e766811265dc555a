#pragma once

// Named-tensor checkpoint archives in the safetensors container layout:
//   u64 LE header length N | N bytes of JSON header | raw little-endian payload
// The header maps tensor name -> {"dtype", "shape", "data_offsets": [begin, end]}
// with offsets relative to the payload start.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "tallpack/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "tallpack serializes by memcpy and assumes a little-endian host");

namespace tallpack {

namespace fs = std::filesystem;

enum class dtype { f32, f16, bf16 };

constexpr std::size_t dtype_size(dtype t) noexcept {
    return t == dtype::f32 ? 4 : 2;
}

constexpr std::string_view dtype_tag(dtype t) noexcept {
    switch (t) {
    case dtype::f32: return "F32";
    case dtype::f16: return "F16";
    case dtype::bf16: return "BF16";
    }
    return "?";
}

using Shape = std::vector<std::uint64_t>;

inline std::uint64_t element_count(const Shape& shape) noexcept {
    std::uint64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

inline std::string shape_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

/// Header entry as it appears on disk.
struct TensorMeta {
    std::string name;
    dtype type = dtype::f32;
    Shape shape;
    std::uint64_t byte_offset = 0;
    std::uint64_t byte_length = 0;
};

struct Tensor {
    Shape shape;
    std::vector<float> data;

    std::size_t size() const noexcept { return data.size(); }
    bool operator==(const Tensor&) const = default;
};

/// Ordered name -> tensor mapping. Iteration order is lexicographic by name,
/// and every cross-tensor flattening in the library follows it.
class TensorMap {
public:
    using container = std::map<std::string, Tensor>;
    using const_iterator = container::const_iterator;

    TensorMap() = default;

    void insert(std::string name, Tensor t) {
        if (name.empty() || name.find('\0') != std::string::npos)
            throw error(errc::malformed_header, "tensor names must be non-empty and NUL-free");
        if (t.data.size() != element_count(t.shape))
            throw error(errc::malformed_header,
                        "tensor '" + name + "' has " + std::to_string(t.data.size()) +
                            " values for shape " + shape_string(t.shape));
        entries_.insert_or_assign(std::move(name), std::move(t));
    }

    void insert(std::string name, Shape shape, std::vector<float> data) {
        insert(std::move(name), Tensor{std::move(shape), std::move(data)});
    }

    bool contains(const std::string& name) const { return entries_.contains(name); }

    const Tensor& at(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw error(errc::incompatible_shapes, "missing tensor '" + name + "'");
        return it->second;
    }

    Tensor& at(const std::string& name) {
        return const_cast<Tensor&>(std::as_const(*this).at(name));
    }

    std::vector<std::string> keys() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& [name, _] : entries_) out.push_back(name);
        return out;
    }

    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }

    std::uint64_t total_elements() const noexcept {
        std::uint64_t n = 0;
        for (const auto& [_, t] : entries_) n += t.size();
        return n;
    }

    const_iterator begin() const noexcept { return entries_.begin(); }
    const_iterator end() const noexcept { return entries_.end(); }

    bool operator==(const TensorMap&) const = default;

private:
    container entries_;
};

/// Bitwise equality of payloads (distinguishes -0.0 from 0.0, unlike operator==).
inline bool bit_identical(const TensorMap& a, const TensorMap& b) {
    if (a.size() != b.size()) return false;
    auto ib = b.begin();
    for (auto ia = a.begin(); ia != a.end(); ++ia, ++ib) {
        if (ia->first != ib->first || ia->second.shape != ib->second.shape) return false;
        const auto& x = ia->second.data;
        const auto& y = ib->second.data;
        if (x.size() != y.size()) return false;
        if (!x.empty() && std::memcmp(x.data(), y.data(), x.size() * sizeof(float)) != 0) return false;
    }
    return true;
}

// --- scalar conversion ------------------------------------------------------

inline float half_to_float(std::uint16_t h) noexcept {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    std::uint32_t exponent = (h >> 10) & 0x1fu;
    std::uint32_t mantissa = h & 0x3ffu;
    std::uint32_t bits;
    if (exponent == 0) {
        if (mantissa == 0) {
            bits = sign;
        } else {
            // subnormal half: renormalize
            exponent = 127 - 15 + 1;
            while ((mantissa & 0x400u) == 0) {
                mantissa <<= 1;
                --exponent;
            }
            mantissa &= 0x3ffu;
            bits = sign | (exponent << 23) | (mantissa << 13);
        }
    } else if (exponent == 0x1f) {
        bits = sign | 0x7f800000u | (mantissa << 13);
    } else {
        bits = sign | ((exponent + 127 - 15) << 23) | (mantissa << 13);
    }
    return std::bit_cast<float>(bits);
}

inline float bf16_to_float(std::uint16_t h) noexcept {
    return std::bit_cast<float>(static_cast<std::uint32_t>(h) << 16);
}

// --- compatibility ----------------------------------------------------------

struct ShapeMismatch {
    std::string name;
    Shape first;
    Shape second;
    bool operator==(const ShapeMismatch&) const = default;
};

struct CompatReport {
    std::vector<std::string> missing_in_first;
    std::vector<std::string> missing_in_second;
    std::vector<ShapeMismatch> shape_mismatches;

    bool compatible() const noexcept {
        return missing_in_first.empty() && missing_in_second.empty() && shape_mismatches.empty();
    }

    std::string summary() const {
        std::string s;
        for (const auto& k : missing_in_first) s += " missing-in-first:" + k;
        for (const auto& k : missing_in_second) s += " missing-in-second:" + k;
        for (const auto& m : shape_mismatches)
            s += " shape:" + m.name + shape_string(m.first) + "vs" + shape_string(m.second);
        return s.empty() ? "compatible" : s.substr(1);
    }
};

inline CompatReport check_compatibility(const TensorMap& a, const TensorMap& b) {
    CompatReport report;
    for (const auto& [name, t] : a) {
        if (!b.contains(name)) {
            report.missing_in_second.push_back(name);
        } else if (b.at(name).shape != t.shape) {
            report.shape_mismatches.push_back({name, t.shape, b.at(name).shape});
        }
    }
    for (const auto& [name, _] : b)
        if (!a.contains(name)) report.missing_in_first.push_back(name);
    return report;
}

inline void require_compatible(const TensorMap& a, const TensorMap& b) {
    auto report = check_compatibility(a, b);
    if (!report.compatible()) throw error(errc::incompatible_shapes, report.summary());
}

// --- byte-level (de)serialization -------------------------------------------

namespace detail {

inline std::uint64_t read_u64(std::span<const std::uint8_t> bytes, std::size_t at) {
    std::uint64_t v;
    std::memcpy(&v, bytes.data() + at, sizeof v);
    return v;
}

inline void append_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof v);
}

inline dtype parse_dtype(const std::string& tag) {
    if (tag == "F32") return dtype::f32;
    if (tag == "F16") return dtype::f16;
    if (tag == "BF16") return dtype::bf16;
    throw error(errc::unsupported_dtype, "dtype '" + tag + "'");
}

inline std::vector<TensorMeta> parse_header(const nlohmann::json& header) {
    if (!header.is_object()) throw error(errc::malformed_header, "header is not a JSON object");
    std::vector<TensorMeta> metas;
    for (const auto& [name, entry] : header.items()) {
        if (name == "__metadata__") continue;
        if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
            !entry.contains("data_offsets"))
            throw error(errc::malformed_header, "entry '" + name + "' lacks dtype/shape/data_offsets");
        const auto& dt = entry["dtype"];
        const auto& shape = entry["shape"];
        const auto& offsets = entry["data_offsets"];
        if (!dt.is_string() || !shape.is_array() || !offsets.is_array() || offsets.size() != 2)
            throw error(errc::malformed_header, "entry '" + name + "' has ill-typed fields");

        TensorMeta meta;
        meta.name = name;
        meta.type = parse_dtype(dt.get<std::string>());
        for (const auto& d : shape) {
            if (!d.is_number_unsigned())
                throw error(errc::malformed_header, "entry '" + name + "' has a non-integer dimension");
            meta.shape.push_back(d.get<std::uint64_t>());
        }
        if (!offsets[0].is_number_unsigned() || !offsets[1].is_number_unsigned())
            throw error(errc::malformed_header, "entry '" + name + "' has bad offsets");
        const auto begin = offsets[0].get<std::uint64_t>();
        const auto end = offsets[1].get<std::uint64_t>();
        if (end < begin) throw error(errc::malformed_header, "entry '" + name + "' has end < begin");
        meta.byte_offset = begin;
        meta.byte_length = end - begin;
        if (meta.byte_length != element_count(meta.shape) * dtype_size(meta.type))
            throw error(errc::malformed_header,
                        "entry '" + name + "' declares " + std::to_string(meta.byte_length) +
                            " bytes for shape " + shape_string(meta.shape));
        if (name.empty() || name.find('\0') != std::string::npos)
            throw error(errc::malformed_header, "invalid tensor name");
        metas.push_back(std::move(meta));
    }
    return metas;
}

inline void decode_tensor(const TensorMeta& meta, std::span<const std::uint8_t> payload,
                          std::vector<float>& out) {
    const auto n = element_count(meta.shape);
    out.resize(n);
    const std::uint8_t* src = payload.data() + meta.byte_offset;
    if (meta.type == dtype::f32) {
        if (n) std::memcpy(out.data(), src, n * 4);
    } else {
        for (std::uint64_t i = 0; i < n; ++i) {
            std::uint16_t h;
            std::memcpy(&h, src + 2 * i, 2);
            out[i] = meta.type == dtype::f16 ? half_to_float(h) : bf16_to_float(h);
        }
    }
    for (std::uint64_t i = 0; i < n; ++i)
        if (!std::isfinite(out[i]))
            throw error(errc::non_finite_value,
                        "tensor '" + meta.name + "' element " + std::to_string(i));
}

} // namespace detail

/// Parses an in-memory archive. All tensors are upcast to f32.
inline TensorMap parse_archive(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8) throw error(errc::truncated_file, "archive shorter than its length prefix");
    const auto header_len = detail::read_u64(bytes, 0);
    if (header_len > bytes.size() - 8) throw error(errc::truncated_file, "header extends past end of file");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
    } catch (const nlohmann::json::exception& e) {
        throw error(errc::malformed_header, e.what());
    }
    auto metas = detail::parse_header(header);
    const auto payload = bytes.subspan(8 + header_len);

    std::vector<const TensorMeta*> by_offset;
    for (const auto& m : metas) by_offset.push_back(&m);
    std::stable_sort(by_offset.begin(), by_offset.end(), [](const auto* a, const auto* b) {
        return std::pair(a->byte_offset, a->byte_length) < std::pair(b->byte_offset, b->byte_length);
    });
    std::uint64_t cursor = 0;
    for (const auto* m : by_offset) {
        if (m->byte_offset != cursor)
            throw error(errc::malformed_header, "tensor '" + m->name + "' offsets are not contiguous");
        cursor += m->byte_length;
    }
    if (cursor > payload.size()) throw error(errc::truncated_file, "payload shorter than declared");
    if (cursor < payload.size()) throw error(errc::malformed_header, "payload has trailing bytes");

    TensorMap map;
    for (const auto& m : metas) {
        Tensor t;
        t.shape = m.shape;
        detail::decode_tensor(m, payload, t.data);
        map.insert(m.name, std::move(t));
    }
    return map;
}

/// Serializes to the container layout; f32 only. The header is space-padded to
/// an 8-byte boundary, which safetensors readers accept.
inline std::vector<std::uint8_t> serialize_archive(const TensorMap& map) {
    nlohmann::json header = nlohmann::json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : map) {
        const std::uint64_t len = t.size() * 4;
        header[name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {offset, offset + len}}};
        offset += len;
    }
    std::string text = header.dump();
    text.append((8 - text.size() % 8) % 8, ' ');

    std::vector<std::uint8_t> out;
    out.reserve(8 + text.size() + offset);
    detail::append_u64(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& [_, t] : map) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(t.data.data());
        out.insert(out.end(), p, p + t.size() * 4);
    }
    return out;
}

inline std::vector<std::uint8_t> read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw error(errc::io_error, "cannot open '" + path.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw error(errc::io_error, "read failed for '" + path.string() + "'");
    return bytes;
}

/// Writes through a sibling temp file and renames it into place.
inline void write_file_atomic(const fs::path& path, std::span<const std::uint8_t> bytes) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw error(errc::io_error, "cannot open '" + tmp.string() + "' for writing");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw error(errc::io_error, "write failed for '" + tmp.string() + "'");
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw error(errc::io_error, "cannot move archive into '" + path.string() + "'");
    }
}

inline TensorMap load_archive(const fs::path& path) {
    const auto bytes = read_file(path);
    return parse_archive(bytes);
}

inline void save_archive(const TensorMap& map, const fs::path& path) {
    if (map.empty()) throw error(errc::empty_input, "refusing to save an empty tensor map");
    write_file_atomic(path, serialize_archive(map));
}

} // namespace tallpack
