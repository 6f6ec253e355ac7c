#pragma once

#include <cstdint>
#include <random>

#include "blockmask/matrix.hpp"

namespace blockmask {

// mt19937_64 output is pinned by the standard; the mappings below avoid
// std::uniform_real_distribution, whose exact sequence is implementation
// defined. Together they make every seeded artifact reproducible.

/// Uniform double in [0, 1) from one engine draw.
inline double uniform_unit(std::mt19937_64& gen) {
    return static_cast<double>(gen() >> 11) * 0x1.0p-53;
}

/// Uniform double in [-1, 1).
inline double uniform_pm1(std::mt19937_64& gen) {
    return 2.0 * uniform_unit(gen) - 1.0;
}

/// Uniform integer in [0, bound) without modulo bias (bound > 0).
inline std::uint64_t uniform_below(std::mt19937_64& gen, std::uint64_t bound) {
    const std::uint64_t limit = bound * (UINT64_MAX / bound);
    std::uint64_t draw;
    do {
        draw = gen();
    } while (draw >= limit);
    return draw % bound;
}

/// Matrix with entries uniform in [-1, 1), deterministic in `gen` state.
template <typename T>
Matrix<T> random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& gen) {
    Matrix<T> m(rows, cols);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j)
            m(i, j) = static_cast<T>(uniform_pm1(gen));
    return m;
}

}  // namespace blockmask
