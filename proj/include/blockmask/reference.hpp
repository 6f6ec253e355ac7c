#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "blockmask/mask.hpp"
#include "blockmask/matrix.hpp"

// Straight-line attention in double precision, one query row at a time.
// This is the ground truth the blocked engine is checked against, so it
// stays as close to the textbook formulas as possible and shares no code
// with the tiled implementation.

namespace blockmask {

struct NaiveOutput {
    Matrix<double> out;
    std::vector<double> row_max;  // running softmax max per query row
    std::vector<double> row_sum;  // softmax denominator per query row, 0 when fully masked
};

struct NaiveGrads {
    Matrix<double> dq;
    Matrix<double> dk;
    Matrix<double> dv;
};

namespace detail {

inline void check_attention_shapes(const Matrix<double>& q, const Matrix<double>& k,
                                   const Matrix<double>& v, const Mask& mask) {
    require(q.rows() == mask.size() && k.rows() == mask.size() && v.rows() == mask.size(),
            "q/k/v row count must match mask size");
    require(q.cols() == k.cols(), "q and k must share head dimension");
    require(k.rows() == v.rows(), "k and v must share row count");
    require(q.cols() >= 1 && v.cols() >= 1, "head dimensions must be positive");
}

}  // namespace detail

inline NaiveOutput naive_forward(const Matrix<double>& q, const Matrix<double>& k,
                                 const Matrix<double>& v, double scale, const Mask& mask) {
    detail::check_attention_shapes(q, k, v, mask);
    const std::size_t n = mask.size();
    const std::size_t d = q.cols();
    const std::size_t dv = v.cols();

    NaiveOutput res{Matrix<double>(n, dv), std::vector<double>(n), std::vector<double>(n)};
    std::vector<double> scores(n);

    for (std::size_t i = 0; i < n; ++i) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            if (!mask.get(i, j)) continue;
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) s += q(i, c) * k(j, c);
            scores[j] = scale * s;
            m = std::max(m, scores[j]);
        }

        res.row_max[i] = m;
        if (std::isinf(m)) {  // no visible key: zero output by convention
            res.row_sum[i] = 0.0;
            for (std::size_t c = 0; c < dv; ++c) res.out(i, c) = 0.0;
            continue;
        }

        double l = 0.0;
        for (std::size_t c = 0; c < dv; ++c) res.out(i, c) = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (!mask.get(i, j)) continue;
            const double p = std::exp(scores[j] - m);
            l += p;
            for (std::size_t c = 0; c < dv; ++c) res.out(i, c) += p * v(j, c);
        }
        res.row_sum[i] = l;
        for (std::size_t c = 0; c < dv; ++c) res.out(i, c) /= l;
    }
    return res;
}

/// Gradients of L = sum(out * d_out) through softmax(scale * q k^T + mask) v.
inline NaiveGrads naive_backward(const Matrix<double>& q, const Matrix<double>& k,
                                 const Matrix<double>& v, double scale, const Mask& mask,
                                 const Matrix<double>& d_out) {
    detail::check_attention_shapes(q, k, v, mask);
    require(d_out.rows() == q.rows() && d_out.cols() == v.cols(),
            "d_out shape must match the forward output");

    const std::size_t n = mask.size();
    const std::size_t d = q.cols();
    const std::size_t dv = v.cols();

    NaiveGrads g{Matrix<double>(q.rows(), d), Matrix<double>(n, d), Matrix<double>(n, dv)};
    std::vector<double> scores(n);
    std::vector<double> p(n);

    for (std::size_t i = 0; i < n; ++i) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            if (!mask.get(i, j)) continue;
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) s += q(i, c) * k(j, c);
            scores[j] = scale * s;
            m = std::max(m, scores[j]);
        }
        if (std::isinf(m)) continue;  // fully masked row contributes nothing

        double l = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (!mask.get(i, j)) continue;
            p[j] = std::exp(scores[j] - m);
            l += p[j];
        }

        double delta = 0.0;  // sum_j p_j * <d_out_i, v_j>, equals <d_out_i, out_i>
        std::vector<double> dp(n);
        for (std::size_t j = 0; j < n; ++j) {
            if (!mask.get(i, j)) continue;
            p[j] /= l;
            double t = 0.0;
            for (std::size_t c = 0; c < dv; ++c) t += d_out(i, c) * v(j, c);
            dp[j] = t;
            delta += p[j] * t;
        }

        for (std::size_t j = 0; j < n; ++j) {
            if (!mask.get(i, j)) continue;
            const double ds = p[j] * (dp[j] - delta);
            for (std::size_t c = 0; c < d; ++c) {
                g.dq(i, c) += scale * ds * k(j, c);
                g.dk(j, c) += scale * ds * q(i, c);
            }
            for (std::size_t c = 0; c < dv; ++c) g.dv(j, c) += p[j] * d_out(i, c);
        }
    }
    return g;
}

/// Central-difference gradients of the same scalar loss. O(n * d) forward
/// passes per input matrix, so keep shapes tiny.
inline NaiveGrads finite_difference_grads(const Matrix<double>& q, const Matrix<double>& k,
                                          const Matrix<double>& v, double scale, const Mask& mask,
                                          const Matrix<double>& d_out, double h) {
    const auto loss = [&](const Matrix<double>& qq, const Matrix<double>& kk,
                          const Matrix<double>& vv) {
        const NaiveOutput out = naive_forward(qq, kk, vv, scale, mask);
        double acc = 0.0;
        for (std::size_t i = 0; i < out.out.rows(); ++i)
            for (std::size_t c = 0; c < out.out.cols(); ++c) acc += out.out(i, c) * d_out(i, c);
        return acc;
    };

    NaiveGrads g{Matrix<double>(q.rows(), q.cols()), Matrix<double>(k.rows(), k.cols()),
                 Matrix<double>(v.rows(), v.cols())};

    const auto differentiate = [&](const Matrix<double>& base, Matrix<double>& grad, auto eval) {
        Matrix<double> probe = base;
        for (std::size_t i = 0; i < base.rows(); ++i) {
            for (std::size_t c = 0; c < base.cols(); ++c) {
                const double saved = probe(i, c);
                probe(i, c) = saved + h;
                const double up = eval(probe);
                probe(i, c) = saved - h;
                const double down = eval(probe);
                probe(i, c) = saved;
                grad(i, c) = (up - down) / (2.0 * h);
            }
        }
    };

    differentiate(q, g.dq, [&](const Matrix<double>& p) { return loss(p, k, v); });
    differentiate(k, g.dk, [&](const Matrix<double>& p) { return loss(q, p, v); });
    differentiate(v, g.dv, [&](const Matrix<double>& p) { return loss(q, k, p); });
    return g;
}

}  // namespace blockmask
