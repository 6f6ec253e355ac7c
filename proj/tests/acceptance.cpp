// End-to-end acceptance checks for the blocked attention engine. Each test
// covers one release criterion and prints a single PASS/FAIL line so the
// binary's output doubles as a checklist. Tolerances are pinned here, next
// to the checks that use them.

#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "blockmask/bench.hpp"
#include "blockmask/engine.hpp"
#include "blockmask/generators.hpp"
#include "blockmask/mask_io.hpp"
#include "blockmask/reference.hpp"
#include "blockmask/reorder.hpp"
#include "test_util.hpp"

namespace {

using namespace blockmask;
using testutil::bitwise_equal;

constexpr double kTolOutDouble = 1e-12;
constexpr double kTolOutSingle = 1e-3;
constexpr double kTolGradDouble = 1e-12;
constexpr double kTolGradRelFd = 1e-5;
constexpr double kTolReorderedOut = 1e-12;

/// Prints "[CRITERION k] name: PASS|FAIL" when the enclosing test scope
/// ends, including early exits through ASSERT failures.
class CriterionReporter {
public:
    CriterionReporter(int id, const char* name) : id_(id), name_(name) {
        timer_start_ = std::chrono::steady_clock::now();
    }
    ~CriterionReporter() {
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - timer_start_).count();
        std::printf("[CRITERION %d] %s: %s (%.1fs)\n", id_, name_,
                    ::testing::Test::HasFailure() ? "FAIL" : "PASS", secs);
        std::fflush(stdout);
    }
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - timer_start_)
            .count();
    }

private:
    int id_;
    const char* name_;
    std::chrono::steady_clock::time_point timer_start_;
};

double linf(const Matrix<double>& m) {
    double v = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) v = std::max(v, std::abs(m.data()[i]));
    return v;
}

TEST(Acceptance, ForwardMatchesReference) {
    CriterionReporter crit(1, "masked forward matches the reference on all mask families");
    const BlockSpec specs[] = {{16, 16}, {32, 16}, {128, 32}};
    const Variant masked[] = {Variant::naive_masked, Variant::binblk, Variant::dense_binblk};
    const std::size_t d = 16;

    std::size_t family_checks = 0;
    const auto check_mask = [&](const Mask& mask, const BlockSpec& spec, std::uint64_t seed) {
        const std::size_t n = mask.size();
        const auto p = testutil::make_problem<double>(n, d, seed);
        const auto pf = testutil::narrow_problem<float>(p);
        const auto oracle = naive_forward(p.q, p.k, p.v, p.scale, mask);
        const auto oracle_f =
            naive_forward(to_double(pf.q), to_double(pf.k), to_double(pf.v), pf.scale, mask);
        const auto prep = preprocess_mask(mask, spec);
        for (Variant v : masked) {
            const auto r = blocked_forward(p.q, p.k, p.v, p.scale, mask, prep, v);
            EXPECT_LE(max_abs_diff(r.out, oracle.out), kTolOutDouble)
                << to_string(v) << " n=" << n << " block " << spec.block_i << "x" << spec.block_j;
            const auto rf = blocked_forward(pf.q, pf.k, pf.v, pf.scale, mask, prep, v);
            EXPECT_LE(max_abs_diff(rf.out, oracle_f.out), kTolOutSingle)
                << to_string(v) << " n=" << n << " single precision";
        }
        ++family_checks;
    };

    for (std::size_t n : {64u, 128u, 256u, 512u}) {
        const auto masks = testutil::family_masks(n);
        for (std::size_t m = 0; m < masks.size(); ++m)
            for (const BlockSpec& spec : specs) check_mask(masks[m], spec, n + m);
    }
    const std::vector<std::size_t> candidates{4, 4, 4, 4};
    for (const BlockSpec& spec : specs) check_mask(gen_medusa(candidates), spec, 340);

    std::size_t random_checks = 0;
    const std::size_t sizes[] = {64, 128, 256, 512};
    const double densities[] = {0.02, 0.05, 0.1, 0.25, 0.5};
    for (std::size_t i = 0; i < 50; ++i) {
        const std::size_t n = sizes[i % 4];
        const Mask mask = gen_random_sparse(n, densities[i % 5], 1000 + i, i % 7 != 0);
        check_mask(mask, specs[i % 3], 2000 + i);
        ++random_checks;
    }

    EXPECT_EQ(family_checks, 4u * 10u * 3u + 3u + 50u);
    EXPECT_EQ(random_checks, 50u);
    EXPECT_LT(crit.seconds(), 300.0);
}

TEST(Acceptance, BackwardMatchesReferenceAndFiniteDifferences) {
    CriterionReporter crit(2, "blocked backward matches the reference and finite differences");
    const Variant masked[] = {Variant::naive_masked, Variant::binblk, Variant::dense_binblk};

    for (std::size_t i = 0; i < 50; ++i) {
        const std::size_t n = 5 + (i * 7) % 28;
        const std::size_t d = 2 + i % 7;
        const auto p = testutil::make_problem<double>(n, d, 300 + i);
        Mask mask;
        switch (i % 4) {
            case 0: mask = gen_random_sparse(n, 0.3 + 0.1 * (i % 5), 400 + i, false); break;
            case 1: mask = gen_causal(n); break;
            case 2: mask = gen_longformer_windowed(n, 1 + i % (n - 1)); break;
            default: mask = gen_random_sparse(n, 0.8, 500 + i); break;
        }
        const auto prep = preprocess_mask(mask, BlockSpec{8, 8});
        const auto want = naive_backward(p.q, p.k, p.v, p.scale, mask, p.d_out);
        const auto fd = finite_difference_grads(p.q, p.k, p.v, p.scale, mask, p.d_out, 1e-5);

        for (Variant v : masked) {
            const auto fwd = blocked_forward(p.q, p.k, p.v, p.scale, mask, prep, v);
            const auto bwd =
                blocked_backward(p.q, p.k, p.v, p.scale, mask, prep, v, fwd, p.d_out);
            EXPECT_LE(max_abs_diff(bwd.dq, want.dq), kTolGradDouble) << "i=" << i << to_string(v);
            EXPECT_LE(max_abs_diff(bwd.dk, want.dk), kTolGradDouble) << "i=" << i << to_string(v);
            EXPECT_LE(max_abs_diff(bwd.dv, want.dv), kTolGradDouble) << "i=" << i << to_string(v);

            // Relative to max(1, largest analytic gradient entry).
            const double scale_q = std::max(1.0, linf(want.dq));
            const double scale_k = std::max(1.0, linf(want.dk));
            const double scale_v = std::max(1.0, linf(want.dv));
            EXPECT_LE(max_abs_diff(bwd.dq, fd.dq) / scale_q, kTolGradRelFd) << "i=" << i;
            EXPECT_LE(max_abs_diff(bwd.dk, fd.dk) / scale_k, kTolGradRelFd) << "i=" << i;
            EXPECT_LE(max_abs_diff(bwd.dv, fd.dv) / scale_v, kTolGradRelFd) << "i=" << i;
        }
    }
    EXPECT_LT(crit.seconds(), 120.0);
}

TEST(Acceptance, TileSkipAccounting) {
    CriterionReporter crit(3, "tile visit/process/read counters match hand counts");

    {
        const Mask mask = gen_causal(256);
        const auto prep = preprocess_mask(mask, BlockSpec{64, 64});
        const auto p = testutil::make_problem<double>(256, 8, 1);
        const auto bb = blocked_forward(p.q, p.k, p.v, p.scale, mask, prep, Variant::binblk);
        EXPECT_EQ(bb.counters.blocks_processed, 10u);
        const auto dense = blocked_forward(p.q, p.k, p.v, p.scale, mask, prep, Variant::dense);
        EXPECT_EQ(dense.counters.blocks_visited, 16u);
    }
    {
        const Mask mask = gen_causal(4);
        const auto prep = preprocess_mask(mask, BlockSpec{2, 2});
        const auto p = testutil::make_problem<double>(4, 4, 2);
        const auto bb = blocked_forward(p.q, p.k, p.v, p.scale, mask, prep, Variant::binblk);
        const auto dbb =
            blocked_forward(p.q, p.k, p.v, p.scale, mask, prep, Variant::dense_binblk);
        EXPECT_EQ(bb.counters.mask_block_reads, 3u);
        EXPECT_EQ(dbb.counters.mask_block_reads, 2u);
    }
    for (const BlockSpec spec : {BlockSpec{64, 64}, BlockSpec{128, 32}}) {
        const Mask mask = gen_all_ones(256);  // divisible by both block shapes
        const auto prep = preprocess_mask(mask, spec);
        const auto p = testutil::make_problem<double>(256, 8, 3);
        const auto dbb =
            blocked_forward(p.q, p.k, p.v, p.scale, mask, prep, Variant::dense_binblk);
        EXPECT_EQ(dbb.counters.mask_block_reads, 0u);
        EXPECT_EQ(dbb.counters.blocks_processed, prep.stats.blocks_total);
    }
    {
        const auto p = testutil::make_problem<double>(96, 8, 4);
        for (const Mask& mask : testutil::family_masks(96)) {
            const auto prep = preprocess_mask(mask, BlockSpec{32, 16});
            const auto bb = blocked_forward(p.q, p.k, p.v, p.scale, mask, prep, Variant::binblk);
            EXPECT_EQ(bb.counters.blocks_processed, prep.stats.blocks_nonzero);
            EXPECT_EQ(bb.counters.blocks_processed + bb.counters.skipped_by_binblk,
                      bb.counters.blocks_visited);
        }
    }
}

TEST(Acceptance, SpeculativeTreeMaskSize) {
    CriterionReporter crit(4, "speculative tree mask size formula matches generated masks");
    const std::vector<std::size_t> reference{4, 4, 4, 4};
    EXPECT_EQ(medusa_size(reference), 340u);
    EXPECT_EQ(gen_medusa(reference).size(), 340u);

    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        std::mt19937_64 gen(seed);
        std::vector<std::size_t> candidates(1 + gen() % 5);
        for (auto& c : candidates) c = 1 + gen() % 5;

        std::size_t expected = 0, layer = 1;
        for (std::size_t c : candidates) {
            layer *= c;
            expected += layer;
        }
        EXPECT_EQ(medusa_size(candidates), expected) << "seed " << seed;
        EXPECT_EQ(gen_medusa(candidates).size(), expected) << "seed " << seed;
    }
}

TEST(Acceptance, ReorderingConcentratesBands) {
    CriterionReporter crit(5, "reordering restores bandwidth and reduces nonzero blocks");

    {
        Mask path(64);
        for (std::size_t i = 0; i + 1 < 64; ++i) path.set(i, i + 1, true);
        std::vector<std::uint32_t> labels(64);
        std::iota(labels.begin(), labels.end(), 0u);
        std::mt19937_64 gen(11);
        std::shuffle(labels.begin(), labels.end(), gen);
        Mask shuffled(64);
        for (std::size_t i = 0; i < 64; ++i)
            for (std::size_t j = 0; j < 64; ++j)
                if (path.get(i, j)) shuffled.set(labels[i], labels[j], true);

        const Permutation perm = rcm_order(build_graph(shuffled));
        EXPECT_EQ(bandwidth(permute_mask(shuffled, perm)), 1u);
    }

    const std::size_t n = 256;
    Mask banded = gen_longformer_windowed(n, 8);
    std::vector<std::uint32_t> labels(n);
    std::iota(labels.begin(), labels.end(), 0u);
    std::mt19937_64 gen(12);
    std::shuffle(labels.begin(), labels.end(), gen);
    Mask shuffled(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (banded.get(i, j)) shuffled.set(labels[i], labels[j], true);

    const BlockSpec spec{16, 16};
    const auto before = block_stats(block_sums(shuffled, spec));
    const Permutation perm = rcm_order(build_graph(shuffled));
    const Mask pmask = permute_mask(shuffled, perm);
    const auto after = block_stats(block_sums(pmask, spec));
    EXPECT_LE(after.blocks_nonzero, before.blocks_nonzero);

    const auto p = testutil::make_problem<double>(n, 16, 13);
    const auto oracle = naive_forward(p.q, p.k, p.v, p.scale, shuffled);
    const auto prep = preprocess_mask(pmask, spec);
    const auto fwd = blocked_forward(permute_rows(p.q, perm), permute_rows(p.k, perm),
                                     permute_rows(p.v, perm), p.scale, pmask, prep,
                                     Variant::binblk);
    EXPECT_LE(max_abs_diff(unpermute_rows(fwd.out, perm), oracle.out), kTolReorderedOut);
}

TEST(Acceptance, WindowedMaskSpeedup) {
    CriterionReporter crit(6, "zero-block skipping halves windowed-mask runtime");
    BenchConfig cfg;
    cfg.mask_spec = "windowed(w=256)";
    cfg.seq_lengths = {4096};
    cfg.block_spec = {64, 64};
    cfg.variants = {Variant::dense, Variant::binblk};
    cfg.batch = 1;
    cfg.heads = 1;
    cfg.runs = 1;
    cfg.warmup = 1;
    cfg.head_dim = 64;
    cfg.precision = Precision::single_precision;

    const auto records = run_bench(cfg);
    ASSERT_EQ(records.size(), 2u);
    const double dense_ms = records[0].total_ms_mean;
    const double binblk_ms = records[1].total_ms_mean;
    EXPECT_GT(dense_ms, 0.0);
    EXPECT_LE(binblk_ms, 0.5 * dense_ms)
        << "dense " << dense_ms << " ms vs binblk " << binblk_ms << " ms";
    EXPECT_LT(crit.seconds(), 120.0);
}

TEST(Acceptance, PreprocessingIsCheaperThanOneForward) {
    CriterionReporter crit(7, "mask preprocessing costs at most two single-head forwards");
    for (std::size_t n : {4096u, 8192u}) {
        BenchConfig cfg;
        cfg.mask_spec = "causal";
        cfg.seq_lengths = {n};
        cfg.variants = {Variant::dense};
        cfg.batch = 1;
        cfg.heads = 1;
        cfg.runs = 1;
        cfg.warmup = 0;
        cfg.head_dim = 64;

        const auto records = run_bench(cfg);
        ASSERT_EQ(records.size(), 1u);
        EXPECT_LE(records[0].prepro_ms, 2.0 * records[0].fwd_ms_mean)
            << "n=" << n << " prepro " << records[0].prepro_ms << " ms vs fwd "
            << records[0].fwd_ms_mean << " ms";
    }
}

TEST(Acceptance, FullMaskOverheadStaysSmall) {
    CriterionReporter crit(8, "run detection keeps dense-mask overhead under 30 percent");
    for (const char* spec : {"all-ones", "causal"}) {
        BenchConfig cfg;
        cfg.mask_spec = spec;
        cfg.seq_lengths = {4096};
        cfg.block_spec = {64, 64};
        cfg.variants = {Variant::dense, Variant::dense_binblk};
        cfg.batch = 1;
        cfg.heads = 1;
        cfg.runs = 1;
        cfg.warmup = 1;
        cfg.head_dim = 64;
        cfg.precision = Precision::single_precision;

        const auto records = run_bench(cfg);
        ASSERT_EQ(records.size(), 2u);
        const double dense_ms = records[0].total_ms_mean;
        const double dbb_ms = records[1].total_ms_mean;
        EXPECT_LE(dbb_ms, 1.3 * dense_ms)
            << spec << ": dense " << dense_ms << " ms vs dense-binblk " << dbb_ms << " ms";
    }
}

TEST(Acceptance, MaskFileRoundTrip) {
    CriterionReporter crit(9, "mask files round-trip and corrupt headers are rejected");
    namespace fs = std::filesystem;
    const fs::path path = fs::path(::testing::TempDir()) / "acceptance_roundtrip.bbmk";

    std::mt19937_64 gen(14);
    for (int i = 0; i < 100; ++i) {
        const std::size_t n = 1 + gen() % 300;
        const Mask mask = gen_random_sparse(n, 0.02 + 0.96 * (i / 99.0), 600 + i, false);
        write_mask(mask, path);
        EXPECT_EQ(read_mask(path), mask) << "n=" << n;
    }

    write_mask(gen_causal(11), path);
    std::ifstream in(path, std::ios::binary);
    std::string good((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();

    const auto expect_kind = [&](std::string data, MaskIoError::Kind want) {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(data.data(), static_cast<std::streamsize>(data.size()));
        out.close();
        try {
            read_mask(path);
            ADD_FAILURE() << "expected MaskIoError kind " << static_cast<int>(want);
        } catch (const MaskIoError& e) {
            EXPECT_EQ(e.kind(), want);
        }
    };

    std::string bad = good;
    bad[0] = 'Q';
    expect_kind(bad, MaskIoError::Kind::bad_magic);
    bad = good;
    bad[4] = 3;
    expect_kind(bad, MaskIoError::Kind::bad_version);
    bad = good;
    bad[12] = 0x40;  // top byte of the token count
    expect_kind(bad, MaskIoError::Kind::dimension_overflow);
    expect_kind(good.substr(0, good.size() - 2), MaskIoError::Kind::truncated);
    expect_kind(good + "x", MaskIoError::Kind::trailing_data);
}

TEST(Acceptance, DeterministicAcrossRunsAndThreads) {
    CriterionReporter crit(10, "same config and seed gives bit-identical results");

    {
        const std::size_t n = 192;
        const auto p = testutil::make_problem<double>(n, 16, 15);
        const Mask mask = gen_random_sparse(n, 0.2, 16);
        const auto prep = preprocess_mask(mask, BlockSpec{64, 64});
        for (Variant v :
             {Variant::dense, Variant::naive_masked, Variant::binblk, Variant::dense_binblk}) {
            const auto fwd1 = blocked_forward(p.q, p.k, p.v, p.scale, mask, prep, v, 1);
            const auto bwd1 =
                blocked_backward(p.q, p.k, p.v, p.scale, mask, prep, v, fwd1, p.d_out, 1);
            for (unsigned threads : {1u, 2u, 5u}) {
                const auto fwd = blocked_forward(p.q, p.k, p.v, p.scale, mask, prep, v, threads);
                const auto bwd = blocked_backward(p.q, p.k, p.v, p.scale, mask, prep, v, fwd,
                                                  p.d_out, threads);
                EXPECT_TRUE(bitwise_equal(fwd.out, fwd1.out)) << to_string(v) << " t=" << threads;
                EXPECT_TRUE(bitwise_equal(fwd.row_max, fwd1.row_max));
                EXPECT_TRUE(bitwise_equal(fwd.row_sum, fwd1.row_sum));
                EXPECT_EQ(fwd.counters, fwd1.counters);
                EXPECT_TRUE(bitwise_equal(bwd.dq, bwd1.dq)) << to_string(v) << " t=" << threads;
                EXPECT_TRUE(bitwise_equal(bwd.dk, bwd1.dk)) << to_string(v) << " t=" << threads;
                EXPECT_TRUE(bitwise_equal(bwd.dv, bwd1.dv)) << to_string(v) << " t=" << threads;
            }
        }
    }

    BenchConfig cfg;
    cfg.mask_spec = "random(p=0.1;seed=4)";
    cfg.seq_lengths = {128};
    cfg.block_spec = {32, 32};
    cfg.batch = 2;
    cfg.heads = 2;
    cfg.runs = 2;
    cfg.warmup = 1;
    cfg.head_dim = 16;
    cfg.verify = true;
    cfg.rcm = true;
    cfg.seed = 17;

    // Timing columns are the only CSV fields allowed to change between runs.
    const auto strip_timing = [](const BenchRecord& r) {
        std::vector<std::string> fields = detail::split(r.csv_row(), ',');
        for (std::size_t idx : {9u, 10u, 11u, 12u, 13u, 14u}) fields[idx].clear();
        std::string joined;
        for (const auto& f : fields) {
            joined += f;
            joined += ',';
        }
        return joined;
    };

    const auto a = run_bench(cfg);
    const auto b = run_bench(cfg);
    BenchConfig threaded = cfg;
    threaded.threads = 3;
    const auto c = run_bench(threaded);

    ASSERT_EQ(a.size(), 8u);
    ASSERT_EQ(b.size(), a.size());
    ASSERT_EQ(c.size(), a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(strip_timing(a[i]), strip_timing(b[i])) << "row " << i;
        EXPECT_EQ(strip_timing(a[i]), strip_timing(c[i])) << "row " << i << " (threads)";
        EXPECT_EQ(a[i].bandwidth_before, c[i].bandwidth_before);
        EXPECT_EQ(a[i].bandwidth_after, c[i].bandwidth_after);
    }
}

}  // namespace
