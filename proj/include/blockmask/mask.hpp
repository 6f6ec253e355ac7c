#pragma once

#include <bit>
#include <cstdint>
#include <cstddef>
#include <span>
#include <vector>

#include "blockmask/matrix.hpp"

namespace blockmask {

/// Square binary attention mask, bit-packed row-major. Row index is the
/// query token, column index the key token; bit (i,j) = 1 permits i to
/// attend to j. Bits beyond column n in the last word of a row are kept
/// zero so whole-word comparisons and popcounts are valid.
class Mask {
public:
    Mask() = default;
    explicit Mask(std::size_t n)
        : n_(n), words_per_row_((n + 63) / 64), bits_(n * words_per_row_, 0) {}

    std::size_t size() const { return n_; }
    std::size_t words_per_row() const { return words_per_row_; }

    bool get(std::size_t i, std::size_t j) const {
        return (bits_[i * words_per_row_ + (j >> 6)] >> (j & 63)) & 1u;
    }

    void set(std::size_t i, std::size_t j, bool value) {
        std::uint64_t& w = bits_[i * words_per_row_ + (j >> 6)];
        const std::uint64_t bit = std::uint64_t{1} << (j & 63);
        w = value ? (w | bit) : (w & ~bit);
    }

    std::span<const std::uint64_t> row_words(std::size_t i) const {
        return {bits_.data() + i * words_per_row_, words_per_row_};
    }

    std::uint64_t count_ones() const {
        std::uint64_t total = 0;
        for (std::uint64_t w : bits_) total += std::popcount(w);
        return total;
    }

    friend bool operator==(const Mask& a, const Mask& b) = default;

private:
    std::size_t n_ = 0;
    std::size_t words_per_row_ = 0;
    std::vector<std::uint64_t> bits_;
};

/// Tile shape used both for mask preprocessing and the attention engine.
/// block_i is rows per tile, block_j columns per tile. The token count
/// need not divide evenly; edge tiles cover their true (smaller) extent.
struct BlockSpec {
    std::size_t block_i = 64;
    std::size_t block_j = 64;

    void validate() const {
        require(block_i >= 1 && block_j >= 1, "block sizes must be >= 1");
    }

    friend bool operator==(const BlockSpec&, const BlockSpec&) = default;
};

/// Per-block one-counts over a mask, ceil(n/block_i) x ceil(n/block_j).
/// One pass over the mask serves both the occupancy matrix and the
/// dense-run metadata, which is why counts (not booleans) are kept.
class BlockSums {
public:
    BlockSums() = default;
    BlockSums(std::size_t n_tokens, BlockSpec spec)
        : n_(n_tokens),
          spec_(spec),
          rows_((n_tokens + spec.block_i - 1) / spec.block_i),
          cols_((n_tokens + spec.block_j - 1) / spec.block_j),
          sums_(rows_ * cols_, 0) {}

    std::size_t n_tokens() const { return n_; }
    BlockSpec spec() const { return spec_; }
    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }

    std::uint32_t sum(std::size_t p, std::size_t q) const { return sums_[p * cols_ + q]; }
    std::uint32_t& sum(std::size_t p, std::size_t q) { return sums_[p * cols_ + q]; }

    std::size_t rows_in_block(std::size_t p) const {
        return std::min(spec_.block_i, n_ - p * spec_.block_i);
    }
    std::size_t cols_in_block(std::size_t q) const {
        return std::min(spec_.block_j, n_ - q * spec_.block_j);
    }

    /// True extent of block (p,q); edge blocks are smaller than block_i*block_j.
    std::uint32_t block_area(std::size_t p, std::size_t q) const {
        return static_cast<std::uint32_t>(rows_in_block(p) * cols_in_block(q));
    }

    bool full(std::size_t p, std::size_t q) const { return sum(p, q) == block_area(p, q); }

private:
    std::size_t n_ = 0;
    BlockSpec spec_;
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<std::uint32_t> sums_;
};

/// Binary occupancy per mask block: 1 iff the block holds any set bit.
/// Drives block skipping in the attention engine.
class BlockOccupancy {
public:
    BlockOccupancy() = default;
    BlockOccupancy(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), occupied_(rows * cols, 0) {}

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool at(std::size_t p, std::size_t q) const { return occupied_[p * cols_ + q] != 0; }
    void mark(std::size_t p, std::size_t q, bool value) {
        occupied_[p * cols_ + q] = value ? 1 : 0;
    }

    friend bool operator==(const BlockOccupancy&, const BlockOccupancy&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<std::uint8_t> occupied_;
};

/// Per row-block description of the first maximal run of fully-one mask
/// blocks: `offset[r]` is the column-block where the run starts and
/// `total_ones[r]` its length in blocks. Rows without any fully-one block
/// carry (0, 0). Blocks inside the run are processed without reading the
/// mask. Later runs in the same row fall back to mask reads.
struct DenseRuns {
    std::vector<std::uint32_t> offset;
    std::vector<std::uint32_t> total_ones;

    bool in_run(std::size_t r, std::size_t q) const {
        return q >= offset[r] && q < offset[r] + std::size_t{total_ones[r]};
    }

    std::uint64_t total_run_blocks() const {
        std::uint64_t total = 0;
        for (std::uint32_t t : total_ones) total += t;
        return total;
    }

    friend bool operator==(const DenseRuns&, const DenseRuns&) = default;
};

struct BlockStats {
    std::uint64_t blocks_total = 0;
    std::uint64_t blocks_nonzero = 0;
    std::uint64_t blocks_full = 0;
    double block_density = 0.0;
    double element_density = 0.0;
};

namespace detail {

/// Popcount of bits [c0, c1) in a packed row.
inline std::uint32_t popcount_range(std::span<const std::uint64_t> words,
                                    std::size_t c0, std::size_t c1) {
    if (c0 >= c1) return 0;
    const std::size_t w0 = c0 >> 6;
    const std::size_t w1 = (c1 - 1) >> 6;
    const std::uint64_t first = ~std::uint64_t{0} << (c0 & 63);
    const std::uint64_t last =
        (c1 & 63) ? (~std::uint64_t{0} >> (64 - (c1 & 63))) : ~std::uint64_t{0};
    if (w0 == w1) return std::popcount(words[w0] & first & last);
    std::uint32_t n = std::popcount(words[w0] & first) + std::popcount(words[w1] & last);
    for (std::size_t w = w0 + 1; w < w1; ++w) n += std::popcount(words[w]);
    return n;
}

}  // namespace detail

/// Count the ones inside every mask block in one pass over the packed rows.
inline BlockSums block_sums(const Mask& mask, BlockSpec spec) {
    spec.validate();
    BlockSums out(mask.size(), spec);
    const std::size_t n = mask.size();
    for (std::size_t p = 0; p < out.rows(); ++p) {
        const std::size_t i0 = p * spec.block_i;
        const std::size_t i1 = std::min(i0 + spec.block_i, n);
        for (std::size_t i = i0; i < i1; ++i) {
            const auto words = mask.row_words(i);
            for (std::size_t q = 0; q < out.cols(); ++q) {
                const std::size_t c0 = q * spec.block_j;
                const std::size_t c1 = std::min(c0 + spec.block_j, n);
                out.sum(p, q) += detail::popcount_range(words, c0, c1);
            }
        }
    }
    return out;
}

inline BlockOccupancy build_block_occupancy(const BlockSums& sums) {
    BlockOccupancy occ(sums.rows(), sums.cols());
    for (std::size_t p = 0; p < sums.rows(); ++p)
        for (std::size_t q = 0; q < sums.cols(); ++q)
            occ.mark(p, q, sums.sum(p, q) > 0);
    return occ;
}

/// Find, per row-block, the first maximal run of fully-one blocks. Edge
/// blocks count as fully-one relative to their true area.
inline DenseRuns build_dense_runs(const BlockSums& sums) {
    DenseRuns runs;
    runs.offset.assign(sums.rows(), 0);
    runs.total_ones.assign(sums.rows(), 0);
    for (std::size_t p = 0; p < sums.rows(); ++p) {
        for (std::size_t q = 0; q < sums.cols(); ++q) {
            if (!sums.full(p, q)) continue;
            std::size_t end = q + 1;
            while (end < sums.cols() && sums.full(p, end)) ++end;
            runs.offset[p] = static_cast<std::uint32_t>(q);
            runs.total_ones[p] = static_cast<std::uint32_t>(end - q);
            break;
        }
    }
    return runs;
}

inline BlockStats block_stats(const BlockSums& sums) {
    BlockStats stats;
    stats.blocks_total = sums.rows() * sums.cols();
    std::uint64_t ones = 0;
    for (std::size_t p = 0; p < sums.rows(); ++p) {
        for (std::size_t q = 0; q < sums.cols(); ++q) {
            const std::uint32_t s = sums.sum(p, q);
            ones += s;
            if (s > 0) ++stats.blocks_nonzero;
            if (s == sums.block_area(p, q)) ++stats.blocks_full;
        }
    }
    const double n = static_cast<double>(sums.n_tokens());
    stats.block_density =
        stats.blocks_total ? static_cast<double>(stats.blocks_nonzero) / stats.blocks_total : 0.0;
    stats.element_density = n > 0 ? static_cast<double>(ones) / (n * n) : 0.0;
    return stats;
}

}  // namespace blockmask
