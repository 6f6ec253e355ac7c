#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "blockmask/mask.hpp"
#include "blockmask/matrix.hpp"

// Tiled attention over a block-structured view of the mask. All four
// variants share the same tile kernels; they differ only in which tiles
// reach those kernels and whether the mask bits are read inside a tile.
// That sharing is what makes the masked variants agree bit for bit.

namespace blockmask {

enum class Variant {
    dense,         // mask-unaware full attention, the speed baseline
    naive_masked,  // reads and applies the mask in every tile
    binblk,        // skips tiles whose mask block holds no ones
    dense_binblk,  // additionally processes runs of fully-one blocks without mask reads
};

inline const char* to_string(Variant v) {
    switch (v) {
        case Variant::dense: return "dense";
        case Variant::naive_masked: return "naive";
        case Variant::binblk: return "binblk";
        case Variant::dense_binblk: return "dense-binblk";
    }
    return "?";
}

inline Variant parse_variant(const std::string& name) {
    if (name == "dense") return Variant::dense;
    if (name == "naive") return Variant::naive_masked;
    if (name == "binblk") return Variant::binblk;
    if (name == "dense-binblk") return Variant::dense_binblk;
    throw std::invalid_argument("unknown variant: '" + name +
                                "' (expected dense, naive, binblk, dense-binblk)");
}

/// Exact per-tile bookkeeping. All counts are deterministic functions of
/// the mask, the block shape and the variant; values never influence them.
struct EngineCounters {
    std::uint64_t blocks_visited = 0;
    std::uint64_t blocks_processed = 0;
    std::uint64_t mask_block_reads = 0;
    std::uint64_t skipped_by_binblk = 0;
    std::uint64_t skipped_mask_reads_by_run = 0;

    EngineCounters& operator+=(const EngineCounters& o) {
        blocks_visited += o.blocks_visited;
        blocks_processed += o.blocks_processed;
        mask_block_reads += o.mask_block_reads;
        skipped_by_binblk += o.skipped_by_binblk;
        skipped_mask_reads_by_run += o.skipped_mask_reads_by_run;
        return *this;
    }

    friend bool operator==(const EngineCounters&, const EngineCounters&) = default;
};

/// Everything derived from a mask ahead of time: per-block one counts,
/// the occupancy bitmap, dense-run metadata and summary stats. Built once
/// and shared across heads, runs and both passes.
struct MaskPrep {
    std::size_t n_tokens = 0;
    BlockSpec spec;
    BlockSums sums;
    BlockOccupancy occupancy;
    DenseRuns runs;
    BlockStats stats;
};

inline MaskPrep preprocess_mask(const Mask& mask, BlockSpec spec) {
    spec.validate();
    require(mask.size() >= 1, "mask must be non-empty");
    MaskPrep prep;
    prep.n_tokens = mask.size();
    prep.spec = spec;
    prep.sums = block_sums(mask, spec);
    prep.occupancy = build_block_occupancy(prep.sums);
    prep.runs = build_dense_runs(prep.sums);
    prep.stats = block_stats(prep.sums);
    return prep;
}

template <typename T>
struct ForwardResult {
    Matrix<T> out;
    std::vector<double> row_max;  // final softmax max per row, -inf when fully masked
    std::vector<double> row_sum;  // softmax denominator per row, 0 when fully masked
    EngineCounters counters;
};

template <typename T>
struct BackwardResult {
    Matrix<T> dq;
    Matrix<T> dk;
    Matrix<T> dv;
    EngineCounters counters;
};

namespace detail {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

enum class TileAction : std::uint8_t { process_masked, process_unmasked, skip };

/// Decide how a variant treats tile (p, q) and account for it. Occupancy
/// and run lookups touch precomputed metadata only; mask_block_reads counts
/// tiles whose actual mask bits are read.
inline TileAction classify_tile(Variant variant, const MaskPrep& prep, std::size_t p,
                                std::size_t q, EngineCounters& c) {
    ++c.blocks_visited;
    switch (variant) {
        case Variant::dense:
            ++c.blocks_processed;
            return TileAction::process_unmasked;
        case Variant::naive_masked:
            ++c.mask_block_reads;
            ++c.blocks_processed;
            return TileAction::process_masked;
        case Variant::binblk:
            if (!prep.occupancy.at(p, q)) {
                ++c.skipped_by_binblk;
                return TileAction::skip;
            }
            ++c.mask_block_reads;
            ++c.blocks_processed;
            return TileAction::process_masked;
        case Variant::dense_binblk:
            if (!prep.occupancy.at(p, q)) {
                ++c.skipped_by_binblk;
                return TileAction::skip;
            }
            ++c.blocks_processed;
            if (prep.runs.in_run(p, q)) {
                // Fully-one block inside the row's dense run: the mask
                // cannot change anything, so it is not read.
                ++c.skipped_mask_reads_by_run;
                return TileAction::process_unmasked;
            }
            ++c.mask_block_reads;
            return TileAction::process_masked;
    }
    return TileAction::skip;
}

/// scores[ii][jj] = scale * <a_row(i0+ii), b_row(j0+jj)>, double precision
/// throughout. Four b rows per pass keeps the a row in registers.
template <typename T>
void score_tile(const Matrix<T>& a, const Matrix<T>& b, double scale, std::size_t i0,
                std::size_t bi, std::size_t j0, std::size_t bj, double* scores) {
    const std::size_t d = a.cols();
    for (std::size_t ii = 0; ii < bi; ++ii) {
        const T* arow = a.row(i0 + ii).data();
        double* srow = scores + ii * bj;
        std::size_t jj = 0;
        for (; jj + 4 <= bj; jj += 4) {
            const T* b0 = b.row(j0 + jj + 0).data();
            const T* b1 = b.row(j0 + jj + 1).data();
            const T* b2 = b.row(j0 + jj + 2).data();
            const T* b3 = b.row(j0 + jj + 3).data();
            double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                const double av = static_cast<double>(arow[c]);
                a0 += av * static_cast<double>(b0[c]);
                a1 += av * static_cast<double>(b1[c]);
                a2 += av * static_cast<double>(b2[c]);
                a3 += av * static_cast<double>(b3[c]);
            }
            srow[jj + 0] = scale * a0;
            srow[jj + 1] = scale * a1;
            srow[jj + 2] = scale * a2;
            srow[jj + 3] = scale * a3;
        }
        for (; jj < bj; ++jj) {
            const T* brow = b.row(j0 + jj).data();
            double acc = 0.0;
            for (std::size_t c = 0; c < d; ++c)
                acc += static_cast<double>(arow[c]) * static_cast<double>(brow[c]);
            srow[jj] = scale * acc;
        }
    }
}

inline void apply_mask_tile(const Mask& mask, std::size_t i0, std::size_t bi, std::size_t j0,
                            std::size_t bj, double* scores) {
    for (std::size_t ii = 0; ii < bi; ++ii) {
        double* srow = scores + ii * bj;
        for (std::size_t jj = 0; jj < bj; ++jj)
            if (!mask.get(i0 + ii, j0 + jj)) srow[jj] = kNegInf;
    }
}

/// Fold one scored tile into the running per-row softmax state. A tile row
/// with no visible key leaves that row's state untouched; that makes the
/// update a no-op on fully masked tiles, which is what lets block skipping
/// preserve results exactly.
template <typename T>
void online_update(const Matrix<T>& v, std::size_t j0, std::size_t bi, std::size_t bj,
                   const double* scores, double* m, double* l, double* acc, double* p) {
    const std::size_t dv = v.cols();
    for (std::size_t ii = 0; ii < bi; ++ii) {
        const double* srow = scores + ii * bj;
        double tile_max = kNegInf;
        for (std::size_t jj = 0; jj < bj; ++jj) tile_max = std::max(tile_max, srow[jj]);
        if (tile_max == kNegInf) continue;

        const double m_new = std::max(m[ii], tile_max);
        const double corr = std::exp(m[ii] - m_new);  // 1.0 when the max is unchanged
        double lsum = 0.0;
        for (std::size_t jj = 0; jj < bj; ++jj) {
            p[jj] = std::exp(srow[jj] - m_new);
            lsum += p[jj];
        }
        l[ii] = l[ii] * corr + lsum;

        double* arow = acc + ii * dv;
        for (std::size_t c = 0; c < dv; ++c) arow[c] *= corr;
        for (std::size_t jj = 0; jj < bj; ++jj) {
            const double pj = p[jj];
            if (pj == 0.0) continue;
            const T* vrow = v.row(j0 + jj).data();
            for (std::size_t c = 0; c < dv; ++c) arow[c] += pj * static_cast<double>(vrow[c]);
        }
        m[ii] = m_new;
    }
}

template <typename T>
void require_finite(const Matrix<T>& m, const char* name) {
    for (std::size_t i = 0; i < m.size(); ++i)
        require(std::isfinite(static_cast<double>(m.data()[i])),
                std::string(name) + " must hold finite values");
}

template <typename T>
void validate_forward_args(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                           double scale, const Mask& mask, const MaskPrep& prep,
                           unsigned threads) {
    require(prep.n_tokens == mask.size(), "mask preprocessing does not match this mask");
    require(q.rows() == mask.size() && k.rows() == mask.size() && v.rows() == mask.size(),
            "q/k/v row count must match mask size");
    require(q.cols() == k.cols() && q.cols() >= 1, "q and k must share a positive head dim");
    require(v.cols() >= 1, "v must have a positive head dim");
    require(std::isfinite(scale), "scale must be finite");
    require(threads >= 1, "thread count must be >= 1");
    require_finite(q, "q");
    require_finite(k, "k");
    require_finite(v, "v");
}

/// Run fn(0) .. fn(count-1), `threads` at a time. Items are handed out in
/// waves so item i always belongs to wave i / threads; together with the
/// callers' merge-in-index-order convention this keeps every result and
/// accumulation order independent of the thread count.
template <typename Fn>
void run_in_waves(std::size_t count, unsigned threads, Fn&& fn) {
    if (threads <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i, 0);
        return;
    }
    for (std::size_t base = 0; base < count; base += threads) {
        const std::size_t batch = std::min<std::size_t>(threads, count - base);
        std::vector<std::thread> pool;
        pool.reserve(batch);
        for (std::size_t t = 0; t < batch; ++t)
            pool.emplace_back([&fn, base, t] { fn(base + t, t); });
        for (auto& th : pool) th.join();
    }
}

}  // namespace detail

template <typename T>
ForwardResult<T> blocked_forward(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                                 double scale, const Mask& mask, const MaskPrep& prep,
                                 Variant variant, unsigned threads = 1) {
    detail::validate_forward_args(q, k, v, scale, mask, prep, threads);

    const std::size_t n = mask.size();
    const std::size_t dv = v.cols();
    const BlockSums& sums = prep.sums;
    const std::size_t row_blocks = sums.rows();
    const std::size_t col_blocks = sums.cols();

    ForwardResult<T> res;
    res.out = Matrix<T>(n, dv);
    res.row_max.assign(n, detail::kNegInf);
    res.row_sum.assign(n, 0.0);

    std::vector<EngineCounters> per_block(row_blocks);

    detail::run_in_waves(row_blocks, threads, [&](std::size_t p, std::size_t) {
        const std::size_t i0 = p * prep.spec.block_i;
        const std::size_t bi = sums.rows_in_block(p);

        std::vector<double> m(bi, detail::kNegInf);
        std::vector<double> l(bi, 0.0);
        std::vector<double> acc(bi * dv, 0.0);
        std::vector<double> scores(bi * prep.spec.block_j);
        std::vector<double> probs(prep.spec.block_j);

        for (std::size_t bq = 0; bq < col_blocks; ++bq) {
            const detail::TileAction action =
                detail::classify_tile(variant, prep, p, bq, per_block[p]);
            if (action == detail::TileAction::skip) continue;

            const std::size_t j0 = bq * prep.spec.block_j;
            const std::size_t bj = sums.cols_in_block(bq);
            detail::score_tile(q, k, scale, i0, bi, j0, bj, scores.data());
            if (action == detail::TileAction::process_masked)
                detail::apply_mask_tile(mask, i0, bi, j0, bj, scores.data());
            detail::online_update(v, j0, bi, bj, scores.data(), m.data(), l.data(), acc.data(),
                                  probs.data());
        }

        for (std::size_t ii = 0; ii < bi; ++ii) {
            const std::size_t i = i0 + ii;
            res.row_max[i] = m[ii];
            res.row_sum[i] = l[ii];
            T* orow = res.out.row(i).data();
            if (l[ii] == 0.0) {
                for (std::size_t c = 0; c < dv; ++c) orow[c] = T{};
            } else {
                for (std::size_t c = 0; c < dv; ++c)
                    orow[c] = static_cast<T>(acc[ii * dv + c] / l[ii]);
            }
        }
    });

    for (const EngineCounters& c : per_block) res.counters += c;
    return res;
}

/// Gradients of L = sum(out * d_out) using the forward pass's saved row
/// statistics. One sweep over the same tiles the forward pass processed,
/// so the counters come out identical to the forward counters.
template <typename T>
BackwardResult<T> blocked_backward(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                                   double scale, const Mask& mask, const MaskPrep& prep,
                                   Variant variant, const ForwardResult<T>& fwd,
                                   const Matrix<T>& d_out, unsigned threads = 1) {
    detail::validate_forward_args(q, k, v, scale, mask, prep, threads);
    const std::size_t n = mask.size();
    const std::size_t d = q.cols();
    const std::size_t dv = v.cols();
    require(fwd.out.rows() == n && fwd.out.cols() == dv, "forward output shape mismatch");
    require(fwd.row_max.size() == n && fwd.row_sum.size() == n, "forward row stats missing");
    require(d_out.rows() == n && d_out.cols() == dv, "d_out shape must match the output");
    detail::require_finite(d_out, "d_out");

    const BlockSums& sums = prep.sums;
    const std::size_t row_blocks = sums.rows();
    const std::size_t col_blocks = sums.cols();

    // delta_i = <d_out_i, out_i>; rows are owned by their row block but the
    // value only depends on i, so computing it upfront is race free.
    std::vector<double> delta(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t c = 0; c < dv; ++c)
            acc += static_cast<double>(d_out(i, c)) * static_cast<double>(fwd.out(i, c));
        delta[i] = acc;
    }

    Matrix<double> dq(n, d);
    Matrix<double> dk(n, d);
    Matrix<double> dv_grad(n, dv);
    std::vector<EngineCounters> per_block(row_blocks);

    // dk/dv contributions land in per-slot buffers and are merged into the
    // global accumulators in ascending row-block order after every wave.
    // The resulting addition sequence per entry is row block 0, 1, 2, ...
    // for any thread count, which keeps results thread-count invariant.
    const unsigned slots = std::max(1u, threads);
    std::vector<Matrix<double>> dk_buf(slots);
    std::vector<Matrix<double>> dv_buf(slots);
    for (unsigned t = 0; t < slots; ++t) {
        dk_buf[t] = Matrix<double>(n, d);
        dv_buf[t] = Matrix<double>(n, dv);
    }

    for (std::size_t base = 0; base < row_blocks; base += slots) {
        const std::size_t batch = std::min<std::size_t>(slots, row_blocks - base);

        detail::run_in_waves(batch, threads, [&](std::size_t offset, std::size_t) {
            const std::size_t p = base + offset;
            const std::size_t i0 = p * prep.spec.block_i;
            const std::size_t bi = sums.rows_in_block(p);
            Matrix<double>& dkb = dk_buf[offset];
            Matrix<double>& dvb = dv_buf[offset];

            std::vector<double> scores(bi * prep.spec.block_j);
            std::vector<double> dprobs(bi * prep.spec.block_j);

            for (std::size_t bq = 0; bq < col_blocks; ++bq) {
                const detail::TileAction action =
                    detail::classify_tile(variant, prep, p, bq, per_block[p]);
                if (action == detail::TileAction::skip) continue;

                const std::size_t j0 = bq * prep.spec.block_j;
                const std::size_t bj = sums.cols_in_block(bq);
                detail::score_tile(q, k, scale, i0, bi, j0, bj, scores.data());
                if (action == detail::TileAction::process_masked)
                    detail::apply_mask_tile(mask, i0, bi, j0, bj, scores.data());
                // dP = d_out V^T, same tile shape as the scores
                detail::score_tile(d_out, v, 1.0, i0, bi, j0, bj, dprobs.data());

                for (std::size_t ii = 0; ii < bi; ++ii) {
                    const std::size_t i = i0 + ii;
                    if (fwd.row_sum[i] == 0.0) continue;  // fully masked row, P row is zero
                    const double inv_l = 1.0 / fwd.row_sum[i];
                    const double* srow = scores.data() + ii * bj;
                    const double* dprow = dprobs.data() + ii * bj;
                    double* dqrow = dq.row(i).data();

                    for (std::size_t jj = 0; jj < bj; ++jj) {
                        const double pj = std::exp(srow[jj] - fwd.row_max[i]) * inv_l;
                        if (pj == 0.0) continue;
                        const std::size_t j = j0 + jj;
                        const double ds = pj * (dprow[jj] - delta[i]);

                        double* dvrow = dvb.row(j).data();
                        const T* dorow = d_out.row(i).data();
                        for (std::size_t c = 0; c < dv; ++c)
                            dvrow[c] += pj * static_cast<double>(dorow[c]);

                        if (ds != 0.0) {
                            const double g = scale * ds;
                            const T* krow = k.row(j).data();
                            const T* qrow = q.row(i).data();
                            double* dkrow = dkb.row(j).data();
                            for (std::size_t c = 0; c < d; ++c) {
                                dqrow[c] += g * static_cast<double>(krow[c]);
                                dkrow[c] += g * static_cast<double>(qrow[c]);
                            }
                        }
                    }
                }
            }
        });

        for (std::size_t offset = 0; offset < batch; ++offset) {
            Matrix<double>& dkb = dk_buf[offset];
            Matrix<double>& dvb = dv_buf[offset];
            for (std::size_t i = 0; i < dk.size(); ++i) dk.data()[i] += dkb.data()[i];
            for (std::size_t i = 0; i < dv_grad.size(); ++i) dv_grad.data()[i] += dvb.data()[i];
            for (std::size_t i = 0; i < dkb.size(); ++i) dkb.data()[i] = 0.0;
            for (std::size_t i = 0; i < dvb.size(); ++i) dvb.data()[i] = 0.0;
        }
    }

    BackwardResult<T> res;
    res.dq = Matrix<T>(n, d);
    res.dk = Matrix<T>(n, d);
    res.dv = Matrix<T>(n, dv);
    for (std::size_t i = 0; i < dq.size(); ++i) res.dq.data()[i] = static_cast<T>(dq.data()[i]);
    for (std::size_t i = 0; i < dk.size(); ++i) res.dk.data()[i] = static_cast<T>(dk.data()[i]);
    for (std::size_t i = 0; i < dv_grad.size(); ++i)
        res.dv.data()[i] = static_cast<T>(dv_grad.data()[i]);
    for (const EngineCounters& c : per_block) res.counters += c;
    return res;
}

/// One (batch, head) slot of a multi-head problem. All slots share the
/// mask and its preprocessing.
template <typename T>
struct SlotInputs {
    Matrix<T> q, k, v;
};

template <typename T>
struct MultiHeadForward {
    std::vector<ForwardResult<T>> slots;
    EngineCounters counters;  // summed over slots
};

/// Forward pass over batch*heads independent slots with one shared mask
/// and one shared preprocessing. Slots run sequentially; parallelism stays
/// inside each attention call.
template <typename T>
MultiHeadForward<T> run_attention(std::span<const SlotInputs<T>> slots, double scale,
                                  const Mask& mask, const MaskPrep& prep, Variant variant,
                                  unsigned threads = 1) {
    require(!slots.empty(), "need at least one batch/head slot");
    for (const SlotInputs<T>& s : slots)
        require(s.q.cols() == slots.front().q.cols() && s.v.cols() == slots.front().v.cols(),
                "all slots must share head dimensions");

    MultiHeadForward<T> res;
    res.slots.reserve(slots.size());
    for (const SlotInputs<T>& s : slots) {
        res.slots.push_back(blocked_forward(s.q, s.k, s.v, scale, mask, prep, variant, threads));
        res.counters += res.slots.back().counters;
    }
    return res;
}

}  // namespace blockmask
