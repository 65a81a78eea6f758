#pragma once

// PSEG tensor files.
//
// Layout (all integers little-endian):
//   "PSEG"            4 bytes magic
//   version           u16 (currently 1)
//   dtype             u8  (0 = f32, 1 = f64, 2 = u8)
//   rank              u8
//   dims              rank x u32
//   payload           row-major little-endian elements

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "pseg/tensor.hpp"

namespace pseg {

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { f32 = 0, f64 = 1, u8 = 2 };

inline constexpr std::uint16_t kPsegVersion = 1;

template <class T>
constexpr DType dtype_of() {
    if constexpr (std::is_same_v<T, float>) return DType::f32;
    else if constexpr (std::is_same_v<T, double>) return DType::f64;
    else {
        static_assert(std::is_same_v<T, std::uint8_t>, "PSEG stores f32, f64 or u8");
        return DType::u8;
    }
}

inline const char* dtype_name(DType d) {
    switch (d) {
        case DType::f32: return "f32";
        case DType::f64: return "f64";
        case DType::u8: return "u8";
    }
    return "?";
}

inline std::size_t dtype_size(DType d) {
    switch (d) {
        case DType::f32: return 4;
        case DType::f64: return 8;
        case DType::u8: return 1;
    }
    throw FormatError("unknown dtype");
}

// Raw decoded file: shape plus elements of the declared dtype.
template <class T>
struct TypedArray {
    Shape shape;
    std::vector<T> values;
};

namespace detail {

template <class U>
void put_le(std::vector<char>& out, U v) {
    static_assert(std::is_unsigned_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <class U>
U get_le(const std::vector<char>& in, std::size_t offset) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
        v |= static_cast<U>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
    return v;
}

template <class T>
void put_value(std::vector<char>& out, T v) {
    if constexpr (std::is_same_v<T, float>) put_le(out, std::bit_cast<std::uint32_t>(v));
    else if constexpr (std::is_same_v<T, double>) put_le(out, std::bit_cast<std::uint64_t>(v));
    else out.push_back(static_cast<char>(v));
}

template <class T>
T get_value(const std::vector<char>& in, std::size_t offset) {
    if constexpr (std::is_same_v<T, float>) return std::bit_cast<float>(get_le<std::uint32_t>(in, offset));
    else if constexpr (std::is_same_v<T, double>) return std::bit_cast<double>(get_le<std::uint64_t>(in, offset));
    else return static_cast<T>(static_cast<unsigned char>(in[offset]));
}

inline std::vector<char> slurp(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError(path.string() + ": cannot open for reading");
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace detail

template <class T>
std::vector<char> encode_array(const Shape& shape, std::span<const T> values) {
    if (shape.size() > 255) throw FormatError("rank exceeds 255");
    if (numel(shape) != values.size()) {
        throw FormatError("shape " + shape_str(shape) + " does not match " +
                          std::to_string(values.size()) + " values");
    }
    std::vector<char> out{'P', 'S', 'E', 'G'};
    detail::put_le<std::uint16_t>(out, kPsegVersion);
    out.push_back(static_cast<char>(dtype_of<T>()));
    out.push_back(static_cast<char>(shape.size()));
    for (std::size_t d : shape) {
        if (d > 0xFFFFFFFFu) throw FormatError("dimension exceeds u32");
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    }
    out.reserve(out.size() + values.size() * sizeof(T));
    for (T v : values) detail::put_value(out, v);
    return out;
}

// Decodes a buffer; `where` names the source in diagnostics.
template <class T>
TypedArray<T> decode_array(const std::vector<char>& in, const std::string& where = "buffer") {
    auto fail = [&](std::size_t off, const std::string& msg) -> FormatError {
        return FormatError(where + ": offset " + std::to_string(off) + ": " + msg);
    };
    if (in.size() < 8) throw fail(in.size(), "truncated header (" + std::to_string(in.size()) + " bytes)");
    if (std::memcmp(in.data(), "PSEG", 4) != 0) throw fail(0, "bad magic");
    const auto version = detail::get_le<std::uint16_t>(in, 4);
    if (version != kPsegVersion) throw fail(4, "unsupported version " + std::to_string(version));
    const auto dtype_raw = static_cast<std::uint8_t>(in[6]);
    if (dtype_raw > 2) throw fail(6, "unknown dtype code " + std::to_string(dtype_raw));
    const auto dtype = static_cast<DType>(dtype_raw);
    if (dtype != dtype_of<T>()) {
        throw fail(6, std::string("dtype mismatch: file holds ") + dtype_name(dtype) + ", expected " +
                          dtype_name(dtype_of<T>()));
    }
    const std::size_t rank = static_cast<std::uint8_t>(in[7]);
    std::size_t off = 8;
    if (in.size() < off + 4 * rank) throw fail(in.size(), "truncated dimension list");
    TypedArray<T> out;
    for (std::size_t i = 0; i < rank; ++i, off += 4) out.shape.push_back(detail::get_le<std::uint32_t>(in, off));
    const std::size_t n = numel(out.shape);
    const std::size_t need = off + n * sizeof(T);
    if (in.size() < need) {
        throw fail(in.size(), "truncated payload: need " + std::to_string(need) + " bytes, have " +
                                  std::to_string(in.size()));
    }
    if (in.size() > need) throw fail(need, "trailing bytes after payload");
    out.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) out.values[i] = detail::get_value<T>(in, off + i * sizeof(T));
    return out;
}

template <class T>
void write_array(const std::filesystem::path& path, const Shape& shape, std::span<const T> values) {
    const auto bytes = encode_array<T>(shape, values);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError(path.string() + ": cannot open for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw FormatError(path.string() + ": write failed");
}

template <class T>
TypedArray<T> read_array(const std::filesystem::path& path) {
    return decode_array<T>(detail::slurp(path), path.string());
}

template <class T>
void write_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
    write_array<T>(path, t.shape(), t.data());
}

template <class T>
Tensor<T> read_tensor(const std::filesystem::path& path) {
    auto a = read_array<T>(path);
    return Tensor<T>::constant(std::move(a.shape), std::move(a.values));
}

}  // namespace pseg
