#pragma once

#include <cstring>
#include <random>
#include <vector>

#include "blockmask/generators.hpp"
#include "blockmask/mask.hpp"
#include "blockmask/matrix.hpp"
#include "blockmask/rng.hpp"

namespace testutil {

using namespace blockmask;

template <typename T>
struct Problem {
    Matrix<T> q, k, v, d_out;
    double scale = 1.0;
};

template <typename T>
Problem<T> make_problem(std::size_t n, std::size_t d, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    Problem<T> p;
    p.q = random_matrix<T>(n, d, gen);
    p.k = random_matrix<T>(n, d, gen);
    p.v = random_matrix<T>(n, d, gen);
    p.d_out = random_matrix<T>(n, d, gen);
    p.scale = 1.0 / std::sqrt(static_cast<double>(d));
    return p;
}

template <typename T>
Problem<T> narrow_problem(const Problem<double>& p) {
    Problem<T> out;
    const auto narrow = [](const Matrix<double>& m) {
        Matrix<T> r(m.rows(), m.cols());
        for (std::size_t i = 0; i < m.size(); ++i) r.data()[i] = static_cast<T>(m.data()[i]);
        return r;
    };
    out.q = narrow(p.q);
    out.k = narrow(p.k);
    out.v = narrow(p.v);
    out.d_out = narrow(p.d_out);
    out.scale = p.scale;
    return out;
}

template <typename T>
bool bitwise_equal(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    return std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

inline bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) return false;
    return std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

/// Masks covering every generator family at roughly the requested size.
/// Families with an intrinsic size contribute their natural dimension.
inline std::vector<Mask> family_masks(std::size_t n) {
    std::vector<Mask> masks;
    masks.push_back(gen_causal(n));
    masks.push_back(gen_all_ones(n));
    masks.push_back(gen_longformer_windowed(n, std::max<std::size_t>(1, n / 8)));
    masks.push_back(gen_longformer_windowed(n, std::max<std::size_t>(1, n / 8), true));
    masks.push_back(gen_longformer_dilated(n, std::max<std::size_t>(1, n / 16), 2));
    masks.push_back(gen_longformer_global(n, std::max<std::size_t>(1, n / 8),
                                          std::min<std::size_t>(4, n)));
    {
        const std::vector<std::size_t> lengths{n / 2, n - n / 2};
        masks.push_back(gen_packed_sequential(lengths));
    }
    {
        const std::vector<std::pair<std::size_t, std::size_t>> segs{
            {n / 4, n / 4}, {n / 4, n - 3 * (n / 4)}};
        masks.push_back(gen_packed_input_bidirectional(segs));
    }
    masks.push_back(gen_random_sparse(n, 0.05, 17));
    masks.push_back(gen_random_sparse(n, 0.4, 18));
    return masks;
}

}  // namespace testutil
