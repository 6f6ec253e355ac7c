#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "blockmask/reference.hpp"
#include "test_util.hpp"

namespace {

using namespace blockmask;
using testutil::make_problem;

constexpr double kInf = std::numeric_limits<double>::infinity();

// Two-pass softmax attention written as differently from naive_forward as
// possible: materialize the full score matrix, then normalize per row.
Matrix<double> two_pass_attention(const Matrix<double>& q, const Matrix<double>& k,
                                  const Matrix<double>& v, double scale, const Mask& mask) {
    const std::size_t n = mask.size();
    const std::size_t d = q.cols();
    Matrix<double> scores(n, n, -kInf);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (!mask.get(i, j)) continue;
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) s += q(i, c) * k(j, c);
            scores(i, j) = s * scale;
        }
    }
    Matrix<double> out(n, v.cols());
    for (std::size_t i = 0; i < n; ++i) {
        double m = -kInf;
        for (std::size_t j = 0; j < n; ++j) m = std::max(m, scores(i, j));
        if (m == -kInf) continue;
        double denom = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (scores(i, j) == -kInf) continue;
            denom += std::exp(scores(i, j) - m);
        }
        for (std::size_t j = 0; j < n; ++j) {
            if (scores(i, j) == -kInf) continue;
            const double p = std::exp(scores(i, j) - m) / denom;
            for (std::size_t c = 0; c < v.cols(); ++c) out(i, c) += p * v(j, c);
        }
    }
    return out;
}

TEST(Reference, MatchesTwoPassSoftmax) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto p = make_problem<double>(23, 7, seed);
        for (const Mask& mask : testutil::family_masks(23)) {
            const auto got = naive_forward(p.q, p.k, p.v, p.scale, mask);
            const auto want = two_pass_attention(p.q, p.k, p.v, p.scale, mask);
            EXPECT_LE(max_abs_diff(got.out, want), 1e-14);
        }
    }
}

TEST(Reference, SingleTokenIsIdentityOnValues) {
    Matrix<double> q(1, 3), k(1, 3), v(1, 3);
    for (std::size_t c = 0; c < 3; ++c) {
        q(0, c) = 0.5 + static_cast<double>(c);
        k(0, c) = 1.0 - static_cast<double>(c);
        v(0, c) = static_cast<double>(c) * 2.0;
    }
    const auto r = naive_forward(q, k, v, 0.7, gen_all_ones(1));
    EXPECT_EQ(r.out, v);
    EXPECT_EQ(r.row_sum[0], 1.0);
    double s = 0.0;
    for (std::size_t c = 0; c < 3; ++c) s += q(0, c) * k(0, c);
    EXPECT_DOUBLE_EQ(r.row_max[0], 0.7 * s);
}

TEST(Reference, ZeroQueriesAverageVisibleValues) {
    const std::size_t n = 8, d = 4;
    const auto base = make_problem<double>(n, d, 3);
    const Matrix<double> q(n, d);
    const Mask mask = gen_causal(n);
    const auto r = naive_forward(q, base.k, base.v, base.scale, mask);
    for (std::size_t i = 0; i < n; ++i) {
        EXPECT_DOUBLE_EQ(r.row_sum[i], static_cast<double>(i + 1));
        for (std::size_t c = 0; c < d; ++c) {
            double mean = 0.0;
            for (std::size_t j = 0; j <= i; ++j) mean += base.v(j, c);
            mean /= static_cast<double>(i + 1);
            EXPECT_NEAR(r.out(i, c), mean, 1e-15);
        }
    }
}

TEST(Reference, SingleVisibleKeyCopiesItsValueRow) {
    const std::size_t n = 6, d = 3;
    const auto p = make_problem<double>(n, d, 4);
    Mask mask(n);
    for (std::size_t i = 0; i < n; ++i) mask.set(i, (i * 2 + 1) % n, true);
    const auto r = naive_forward(p.q, p.k, p.v, p.scale, mask);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = (i * 2 + 1) % n;
        for (std::size_t c = 0; c < d; ++c) EXPECT_DOUBLE_EQ(r.out(i, c), p.v(j, c));
        EXPECT_EQ(r.row_sum[i], 1.0);
    }
}

TEST(Reference, FullyMaskedRowYieldsZeroOutput) {
    const std::size_t n = 5;
    const auto p = make_problem<double>(n, 4, 5);
    Mask mask = gen_causal(n);
    for (std::size_t j = 0; j < n; ++j) mask.set(2, j, false);
    const auto r = naive_forward(p.q, p.k, p.v, p.scale, mask);
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(r.out(2, c), 0.0);
    EXPECT_EQ(r.row_sum[2], 0.0);
    EXPECT_EQ(r.row_max[2], -kInf);

    const auto g = naive_backward(p.q, p.k, p.v, p.scale, mask, p.d_out);
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(g.dq(2, c), 0.0);
}

TEST(Reference, MaskedValuesCannotInfluenceOutput) {
    const std::size_t n = 12, d = 5;
    const auto p = make_problem<double>(n, d, 6);
    // Keys in the upper half of the sequence are invisible to every query.
    Mask mask(n);
    std::mt19937_64 gen(7);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n / 2; ++j) mask.set(i, j, (gen() & 1) != 0);
        mask.set(i, i % (n / 2), true);
    }
    const auto base = naive_forward(p.q, p.k, p.v, p.scale, mask);

    auto poisoned = p;
    for (std::size_t j = n / 2; j < n; ++j) {
        for (std::size_t c = 0; c < d; ++c) {
            poisoned.k(j, c) = 1e6;
            poisoned.v(j, c) = -1e6;
        }
    }
    const auto r = naive_forward(poisoned.q, poisoned.k, poisoned.v, p.scale, mask);
    EXPECT_EQ(r.out, base.out);
}

TEST(Reference, TokenPermutationEquivariance) {
    const std::size_t n = 16, d = 4;
    const auto p = make_problem<double>(n, d, 8);
    const Mask mask = gen_random_sparse(n, 0.35, 9);
    const auto base = naive_forward(p.q, p.k, p.v, p.scale, mask);

    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    std::mt19937_64 gen(10);
    std::shuffle(perm.begin(), perm.end(), gen);

    Matrix<double> pq(n, d), pk(n, d), pv(n, d);
    Mask pmask(n);
    for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t c = 0; c < d; ++c) {
            pq(a, c) = p.q(perm[a], c);
            pk(a, c) = p.k(perm[a], c);
            pv(a, c) = p.v(perm[a], c);
        }
        for (std::size_t b = 0; b < n; ++b) pmask.set(a, b, mask.get(perm[a], perm[b]));
    }
    const auto permuted = naive_forward(pq, pk, pv, p.scale, pmask);
    double err = 0.0;
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t c = 0; c < d; ++c)
            err = std::max(err, std::abs(permuted.out(a, c) - base.out(perm[a], c)));
    EXPECT_LE(err, 1e-12);
}

double grad_err(const NaiveGrads& a, const NaiveGrads& b) {
    return std::max({max_abs_diff(a.dq, b.dq), max_abs_diff(a.dk, b.dk),
                     max_abs_diff(a.dv, b.dv)});
}

TEST(Reference, BackwardMatchesFiniteDifferences) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const std::size_t n = 4 + seed % 9;
        const std::size_t d = 2 + seed % 3;
        const auto p = make_problem<double>(n, d, seed);
        const Mask mask = gen_random_sparse(n, 0.5, seed + 100);
        const auto analytic = naive_backward(p.q, p.k, p.v, p.scale, mask, p.d_out);
        const auto fd = finite_difference_grads(p.q, p.k, p.v, p.scale, mask, p.d_out, 1e-5);
        EXPECT_LE(grad_err(analytic, fd), 1e-9) << "seed " << seed;
    }
}

TEST(Reference, FiniteDifferenceErrorShrinksQuadratically) {
    const auto p = make_problem<double>(10, 4, 11);
    const Mask mask = gen_causal(10);
    const auto analytic = naive_backward(p.q, p.k, p.v, p.scale, mask, p.d_out);
    const double coarse =
        grad_err(analytic, finite_difference_grads(p.q, p.k, p.v, p.scale, mask, p.d_out, 1e-2));
    const double fine =
        grad_err(analytic, finite_difference_grads(p.q, p.k, p.v, p.scale, mask, p.d_out, 1e-3));
    EXPECT_LT(fine, coarse / 20.0);
}

TEST(Reference, ZeroUpstreamGradientGivesZeroGrads) {
    const auto p = make_problem<double>(9, 3, 12);
    const Matrix<double> zero(9, 3);
    const auto g = naive_backward(p.q, p.k, p.v, p.scale, gen_causal(9), zero);
    EXPECT_EQ(g.dq, zero);
    EXPECT_EQ(g.dk, zero);
    EXPECT_EQ(g.dv, zero);
}

TEST(Reference, ShapeMismatchesRejected) {
    const auto p = make_problem<double>(8, 4, 13);
    const Mask mask = gen_causal(8);
    Matrix<double> bad_k(7, 4);
    EXPECT_THROW(naive_forward(p.q, bad_k, p.v, p.scale, mask), std::invalid_argument);
    Matrix<double> bad_dout(8, 5);
    EXPECT_THROW(naive_backward(p.q, p.k, p.v, p.scale, mask, bad_dout), std::invalid_argument);
    EXPECT_THROW(naive_forward(p.q, p.k, p.v, p.scale, gen_causal(9)), std::invalid_argument);
}

}  // namespace
