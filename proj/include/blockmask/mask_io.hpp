#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "blockmask/mask.hpp"

namespace blockmask {

// Mask file format "BBMK":
//   bytes 0-3   magic "BBMK"
//   byte  4     version (1)
//   bytes 5-12  n as unsigned 64-bit little-endian
//   then ceil(n/8) bytes per row, rows concatenated; within a byte,
//   bit 0 (LSB) is the lowest-numbered column.
// Occupancy sidecar "BBLK" uses the same layout with block_i and block_j
// as two u32 little-endian fields after n; the packed payload covers the
// ceil(n/block_i) x ceil(n/block_j) occupancy matrix.

class MaskIoError : public std::runtime_error {
public:
    enum class Kind {
        io_failure,
        bad_magic,
        bad_version,
        dimension_overflow,
        truncated,
        trailing_data,
    };

    MaskIoError(Kind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}

    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
    for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

inline void put_u32_le(std::string& out, std::uint32_t v) {
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int b = 0; b < 8; ++b) v |= std::uint64_t{p[b]} << (8 * b);
    return v;
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= std::uint32_t{p[b]} << (8 * b);
    return v;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MaskIoError(MaskIoError::Kind::io_failure, "cannot open " + path.string());
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw MaskIoError(MaskIoError::Kind::io_failure, "read failed: " + path.string());
    return data;
}

inline void write_file(const std::filesystem::path& path, const std::string& data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw MaskIoError(MaskIoError::Kind::io_failure, "cannot open " + path.string());
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw MaskIoError(MaskIoError::Kind::io_failure, "write failed: " + path.string());
}

// Pack one row of `n` bits reachable through `get(j)` into ceil(n/8) bytes.
template <typename GetBit>
void pack_row(std::string& out, std::size_t n, GetBit&& get) {
    const std::size_t row_bytes = (n + 7) / 8;
    for (std::size_t b = 0; b < row_bytes; ++b) {
        unsigned byte = 0;
        const std::size_t j0 = b * 8;
        const std::size_t j1 = std::min(j0 + 8, n);
        for (std::size_t j = j0; j < j1; ++j)
            if (get(j)) byte |= 1u << (j - j0);
        out.push_back(static_cast<char>(byte));
    }
}

inline constexpr std::size_t kMaxMaskTokens = std::size_t{1} << 22;

struct Header {
    std::uint64_t n = 0;
    std::size_t payload_offset = 0;
};

inline Header parse_header(const std::string& data, const char* magic, std::size_t extra) {
    if (data.size() < 4 || std::memcmp(data.data(), magic, 4) != 0)
        throw MaskIoError(MaskIoError::Kind::bad_magic,
                          std::string("bad magic, expected ") + magic);
    if (data.size() < 5 + 8 + extra)
        throw MaskIoError(MaskIoError::Kind::truncated, "truncated header");
    if (data[4] != 1)
        throw MaskIoError(MaskIoError::Kind::bad_version,
                          "unsupported version " + std::to_string(int(data[4])));
    Header h;
    h.n = get_u64_le(reinterpret_cast<const unsigned char*>(data.data()) + 5);
    h.payload_offset = 13 + extra;
    if (h.n > kMaxMaskTokens)
        throw MaskIoError(MaskIoError::Kind::dimension_overflow,
                          "mask dimension " + std::to_string(h.n) + " exceeds limit");
    return h;
}

inline void check_payload(const std::string& data, std::size_t offset,
                          std::uint64_t rows, std::uint64_t row_bytes) {
    const std::uint64_t expected = offset + rows * row_bytes;
    if (data.size() < expected)
        throw MaskIoError(MaskIoError::Kind::truncated,
                          "payload truncated: have " + std::to_string(data.size()) +
                              " bytes, expected " + std::to_string(expected));
    if (data.size() > expected)
        throw MaskIoError(MaskIoError::Kind::trailing_data,
                          "unexpected trailing bytes after payload");
}

}  // namespace detail

inline void write_mask(const Mask& mask, const std::filesystem::path& path) {
    std::string out;
    const std::size_t n = mask.size();
    out.reserve(13 + n * ((n + 7) / 8));
    out += "BBMK";
    out.push_back(1);
    detail::put_u64_le(out, n);
    for (std::size_t i = 0; i < n; ++i)
        detail::pack_row(out, n, [&](std::size_t j) { return mask.get(i, j); });
    detail::write_file(path, out);
}

inline Mask read_mask(const std::filesystem::path& path) {
    const std::string data = detail::read_file(path);
    const auto header = detail::parse_header(data, "BBMK", 0);
    const std::size_t n = static_cast<std::size_t>(header.n);
    const std::size_t row_bytes = (n + 7) / 8;
    detail::check_payload(data, header.payload_offset, n, row_bytes);

    Mask mask(n);
    const auto* bytes =
        reinterpret_cast<const unsigned char*>(data.data()) + header.payload_offset;
    for (std::size_t i = 0; i < n; ++i) {
        const unsigned char* row = bytes + i * row_bytes;
        for (std::size_t j = 0; j < n; ++j)
            if ((row[j >> 3] >> (j & 7)) & 1u) mask.set(i, j, true);
    }
    return mask;
}

struct OccupancyFile {
    std::uint64_t n_tokens = 0;
    BlockSpec spec;
    BlockOccupancy occupancy;
};

inline void write_occupancy(const BlockOccupancy& occ, std::size_t n_tokens, BlockSpec spec,
                            const std::filesystem::path& path) {
    std::string out;
    out += "BBLK";
    out.push_back(1);
    detail::put_u64_le(out, n_tokens);
    detail::put_u32_le(out, static_cast<std::uint32_t>(spec.block_i));
    detail::put_u32_le(out, static_cast<std::uint32_t>(spec.block_j));
    for (std::size_t p = 0; p < occ.rows(); ++p)
        detail::pack_row(out, occ.cols(), [&](std::size_t q) { return occ.at(p, q); });
    detail::write_file(path, out);
}

inline OccupancyFile read_occupancy(const std::filesystem::path& path) {
    const std::string data = detail::read_file(path);
    const auto header = detail::parse_header(data, "BBLK", 8);
    const auto* base = reinterpret_cast<const unsigned char*>(data.data());
    OccupancyFile out;
    out.n_tokens = header.n;
    out.spec.block_i = detail::get_u32_le(base + 13);
    out.spec.block_j = detail::get_u32_le(base + 17);
    if (out.spec.block_i == 0 || out.spec.block_j == 0)
        throw MaskIoError(MaskIoError::Kind::dimension_overflow, "zero block size");

    const std::size_t rows = (out.n_tokens + out.spec.block_i - 1) / out.spec.block_i;
    const std::size_t cols = (out.n_tokens + out.spec.block_j - 1) / out.spec.block_j;
    const std::size_t row_bytes = (cols + 7) / 8;
    detail::check_payload(data, header.payload_offset, rows, row_bytes);

    out.occupancy = BlockOccupancy(rows, cols);
    const unsigned char* bytes = base + header.payload_offset;
    for (std::size_t p = 0; p < rows; ++p) {
        const unsigned char* row = bytes + p * row_bytes;
        for (std::size_t q = 0; q < cols; ++q)
            out.occupancy.mark(p, q, (row[q >> 3] >> (q & 7)) & 1u);
    }
    return out;
}

}  // namespace blockmask
