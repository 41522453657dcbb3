#pragma once

#include <cstdio>
#include <fstream>
#include <string>

#include "pvm/tensor.hpp"

namespace pvm {

// PVMT tensor file: magic "PVMT", version byte, dtype code
// (0 = f32, 1 = f64, 2 = u8 mask), u32 LE rank, rank x u32 LE dims,
// row-major little-endian payload.

namespace detail {

inline void write_u32_le(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t read_u32_le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw IoError("PVMT: truncated header");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline void write_header(std::ostream& os, uint8_t dtype, const Dims& dims) {
    os.write("PVMT", 4);
    const unsigned char version = 1;
    os.put(static_cast<char>(version));
    os.put(static_cast<char>(dtype));
    write_u32_le(os, static_cast<uint32_t>(dims.size()));
    for (int d : dims) write_u32_le(os, static_cast<uint32_t>(d));
}

inline Dims read_header(std::istream& is, uint8_t expected_dtype, const std::string& path) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "PVMT")
        throw IoError("PVMT: bad magic in " + path);
    const int version = is.get();
    if (version != 1) throw IoError("PVMT: unsupported version in " + path);
    const int dtype = is.get();
    if (dtype != expected_dtype)
        throw IoError("PVMT: dtype code " + std::to_string(dtype) + " in " + path +
                      ", expected " + std::to_string(expected_dtype));
    const uint32_t rank = read_u32_le(is);
    if (rank > 16) throw IoError("PVMT: implausible rank in " + path);
    Dims dims(rank);
    for (uint32_t i = 0; i < rank; ++i) dims[i] = static_cast<int>(read_u32_le(is));
    return dims;
}

template <typename T>
constexpr uint8_t dtype_code();
template <>
constexpr uint8_t dtype_code<float>() { return 0; }
template <>
constexpr uint8_t dtype_code<double>() { return 1; }

}  // namespace detail

template <typename T>
void write_pvmt(const std::string& path, const Tensor<T>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    detail::write_header(os, detail::dtype_code<T>(), t.dims);
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(T)));
    if (!os) throw IoError("short write: " + path);
}

inline void write_pvmt_mask(const std::string& path, const ValidityMask& m) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    detail::write_header(os, 2, m.dims);
    os.write(reinterpret_cast<const char*>(m.bits.data()),
             static_cast<std::streamsize>(m.bits.size()));
    if (!os) throw IoError("short write: " + path);
}

template <typename T>
Tensor<T> read_pvmt(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    Dims dims = detail::read_header(is, detail::dtype_code<T>(), path);
    Tensor<T> t(dims);
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(T)));
    if (!is) throw IoError("PVMT: truncated payload in " + path);
    return t;
}

inline ValidityMask read_pvmt_mask(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    Dims dims = detail::read_header(is, 2, path);
    std::vector<uint8_t> bits(static_cast<size_t>(dims_numel(dims)));
    is.read(reinterpret_cast<char*>(bits.data()), static_cast<std::streamsize>(bits.size()));
    if (!is) throw IoError("PVMT: truncated payload in " + path);
    return ValidityMask(dims, std::move(bits));
}

/// Binary PGM render of a mask, valid = 255, invalid = 0.
inline void write_mask_pgm(const std::string& path, const ValidityMask& m) {
    if (m.rank() != 2) throw ShapeError("P5 export expects an HxW mask");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    os << "P5\n" << m.dim(1) << " " << m.dim(0) << "\n255\n";
    for (uint8_t b : m.bits) os.put(b ? char(255) : char(0));
    if (!os) throw IoError("short write: " + path);
}

}  // namespace pvm
