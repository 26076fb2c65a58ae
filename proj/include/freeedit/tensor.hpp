#ifndef FREEEDIT_TENSOR_HPP
#define FREEEDIT_TENSOR_HPP

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <vector>

#include "freeedit/errors.hpp"

namespace freeedit {

// Row-major dense tensor, rank <= 4. The scalar type is templated so the
// model can train in f32 or f64; the FTC1 container is always float32.
template <typename T = float>
struct Tensor {
    std::vector<std::size_t> dims;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> d) : dims(std::move(d)) {
        if (dims.size() > 4) throw ContractError("tensor rank > 4");
        data.assign(numel(), T(0));
    }

    std::size_t numel() const {
        if (dims.empty()) return 0;
        return std::accumulate(dims.begin(), dims.end(), std::size_t(1), std::multiplies<>());
    }
    std::size_t rank() const { return dims.size(); }

    T& at(std::size_t i) { return data[i]; }
    const T& at(std::size_t i) const { return data[i]; }

    T& at(std::size_t i, std::size_t j) { return data[i * dims[1] + j]; }
    const T& at(std::size_t i, std::size_t j) const { return data[i * dims[1] + j]; }

    T& at(std::size_t i, std::size_t j, std::size_t k) {
        return data[(i * dims[1] + j) * dims[2] + k];
    }
    const T& at(std::size_t i, std::size_t j, std::size_t k) const {
        return data[(i * dims[1] + j) * dims[2] + k];
    }

    bool same_shape(const Tensor& o) const { return dims == o.dims; }

    Tensor& operator+=(const Tensor& o) {
        for (std::size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
        return *this;
    }
    Tensor& operator-=(const Tensor& o) {
        for (std::size_t i = 0; i < data.size(); ++i) data[i] -= o.data[i];
        return *this;
    }
    Tensor& operator*=(T s) {
        for (auto& v : data) v *= s;
        return *this;
    }
};

namespace detail {

inline void put_u32le(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw FormatError("truncated header");
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
           (std::uint32_t(b[3]) << 24);
}

}  // namespace detail

// FTC1 container: magic "FTC1", u32 LE rank, rank x u32 LE dims,
// row-major float32 LE payload.
template <typename T>
void write_tensor(const Tensor<T>& t, const std::filesystem::path& path) {
    if (t.rank() > 4) throw ContractError("tensor rank > 4");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path.string());
    os.write("FTC1", 4);
    detail::put_u32le(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.dims) detail::put_u32le(os, static_cast<std::uint32_t>(d));
    std::vector<float> payload(t.data.begin(), t.data.end());
    static_assert(sizeof(float) == 4);
    os.write(reinterpret_cast<const char*>(payload.data()),
             static_cast<std::streamsize>(payload.size() * 4));
    if (!os) throw IoError("write failed: " + path.string());
}

template <typename T = float>
Tensor<T> read_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for read: " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "FTC1", 4) != 0) throw FormatError("bad magic tag");
    std::uint32_t rank = detail::get_u32le(is);
    if (rank > 4) throw FormatError("rank > 4");
    std::vector<std::size_t> dims(rank);
    for (auto& d : dims) d = detail::get_u32le(is);
    Tensor<T> t;
    t.dims = dims;
    std::size_t n = t.numel();
    std::vector<float> payload(n);
    is.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(n * 4));
    if (static_cast<std::size_t>(is.gcount()) != n * 4) throw FormatError("truncated payload");
    t.data.assign(payload.begin(), payload.end());
    return t;
}

}  // namespace freeedit

#endif
