#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "blockmask/engine.hpp"
#include "blockmask/generators.hpp"
#include "blockmask/mask.hpp"
#include "blockmask/matrix.hpp"
#include "blockmask/reference.hpp"
#include "blockmask/reorder.hpp"
#include "blockmask/rng.hpp"

// Benchmark and verification harness. One BenchRecord per (mask, length,
// variant) combination; counters in a record are exact and reproducible,
// timing columns are the only fields allowed to vary between runs.

namespace blockmask {

enum class Precision { single_precision, double_precision };

inline const char* to_string(Precision p) {
    return p == Precision::single_precision ? "single" : "double";
}

inline Precision parse_precision(const std::string& name) {
    if (name == "single") return Precision::single_precision;
    if (name == "double") return Precision::double_precision;
    throw std::invalid_argument("unknown precision: '" + name + "' (expected single, double)");
}

// Default verification tolerances. Double-precision engine runs and the
// double oracle share arithmetic up to summation order; single precision
// is measured against the same double oracle, hence the wider bounds.
inline constexpr double kVerifyTolOutDouble = 1e-12;
inline constexpr double kVerifyTolOutSingle = 1e-3;
inline constexpr double kVerifyTolGradDouble = 1e-12;
inline constexpr double kVerifyTolGradSingle = 1e-2;

struct BenchConfig {
    std::string mask_spec = "causal";
    std::vector<std::size_t> seq_lengths{1024};
    BlockSpec block_spec{};  // 64x64 unless overridden; 128x32 stays selectable
    std::vector<Variant> variants{Variant::dense, Variant::naive_masked, Variant::binblk,
                                  Variant::dense_binblk};
    std::size_t batch = 4;
    std::size_t heads = 32;
    std::size_t runs = 100;
    std::size_t warmup = 5;
    std::size_t head_dim = 64;
    Precision precision = Precision::double_precision;
    bool rcm = false;
    bool verify = false;
    std::uint64_t seed = 1;
    std::size_t oracle_limit = 2048;    // verification refuses larger problems
    double memory_limit_gb = 4.0;       // refuse configs whose working set exceeds this
    unsigned threads = 1;

    void validate() const {
        block_spec.validate();
        require(runs >= 1, "runs must be >= 1");
        require(batch >= 1 && heads >= 1, "batch and heads must be >= 1");
        require(head_dim >= 1, "head_dim must be >= 1");
        require(!variants.empty(), "need at least one variant");
        require(threads >= 1, "threads must be >= 1");
        require(memory_limit_gb > 0.0, "memory limit must be positive");
        require(!seq_lengths.empty(), "seq_lengths must be non-empty");
    }

    static BenchConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

inline BenchConfig BenchConfig::from_json(const nlohmann::json& j) {
    BenchConfig c;
    for (const auto& [key, val] : j.items()) {
        if (key == "mask_spec") {
            c.mask_spec = val.get<std::string>();
        } else if (key == "seq_lengths") {
            c.seq_lengths = val.get<std::vector<std::size_t>>();
        } else if (key == "block_i") {
            c.block_spec.block_i = val.get<std::size_t>();
        } else if (key == "block_j") {
            c.block_spec.block_j = val.get<std::size_t>();
        } else if (key == "variants") {
            c.variants.clear();
            for (const auto& name : val) c.variants.push_back(parse_variant(name.get<std::string>()));
        } else if (key == "batch") {
            c.batch = val.get<std::size_t>();
        } else if (key == "heads") {
            c.heads = val.get<std::size_t>();
        } else if (key == "runs") {
            c.runs = val.get<std::size_t>();
        } else if (key == "warmup") {
            c.warmup = val.get<std::size_t>();
        } else if (key == "head_dim") {
            c.head_dim = val.get<std::size_t>();
        } else if (key == "precision") {
            c.precision = parse_precision(val.get<std::string>());
        } else if (key == "rcm") {
            c.rcm = val.get<bool>();
        } else if (key == "verify") {
            c.verify = val.get<bool>();
        } else if (key == "seed") {
            c.seed = val.get<std::uint64_t>();
        } else if (key == "oracle_limit") {
            c.oracle_limit = val.get<std::size_t>();
        } else if (key == "memory_limit_gb") {
            c.memory_limit_gb = val.get<double>();
        } else if (key == "threads") {
            c.threads = val.get<unsigned>();
        } else {
            throw std::invalid_argument("unknown config key: '" + key + "'");
        }
    }
    c.validate();
    return c;
}

inline nlohmann::json BenchConfig::to_json() const {
    nlohmann::json j;
    j["mask_spec"] = mask_spec;
    j["seq_lengths"] = seq_lengths;
    j["block_i"] = block_spec.block_i;
    j["block_j"] = block_spec.block_j;
    std::vector<std::string> names;
    for (Variant v : variants) names.emplace_back(to_string(v));
    j["variants"] = names;
    j["batch"] = batch;
    j["heads"] = heads;
    j["runs"] = runs;
    j["warmup"] = warmup;
    j["head_dim"] = head_dim;
    j["precision"] = to_string(precision);
    j["rcm"] = rcm;
    j["verify"] = verify;
    j["seed"] = seed;
    j["oracle_limit"] = oracle_limit;
    j["memory_limit_gb"] = memory_limit_gb;
    j["threads"] = threads;
    return j;
}

namespace detail {

inline double now_ms() {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

struct MeanStd {
    double mean = 0.0;
    double stdev = 0.0;  // sample std; 0 for a single measurement
};

inline MeanStd mean_std(const std::vector<double>& xs) {
    MeanStd r;
    if (xs.empty()) return r;
    double sum = 0.0;
    for (double x : xs) sum += x;
    r.mean = sum / static_cast<double>(xs.size());
    if (xs.size() >= 2) {
        double var = 0.0;
        for (double x : xs) var += (x - r.mean) * (x - r.mean);
        r.stdev = std::sqrt(var / static_cast<double>(xs.size() - 1));
    }
    return r;
}

/// Shortest decimal form that parses back to the same double.
inline std::string fmt_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

}  // namespace detail

struct BenchRecord {
    Variant variant = Variant::dense;
    std::string mask;  // canonical mask spec, "+rcm" suffix after reordering
    std::size_t n = 0;
    std::size_t block_i = 0;
    std::size_t block_j = 0;
    std::size_t batch = 0;
    std::size_t heads = 0;
    std::size_t runs = 0;
    Precision precision = Precision::double_precision;
    double prepro_ms = 0.0;
    double fwd_ms_mean = 0.0;
    double fwd_ms_std = 0.0;
    double bwd_ms_mean = 0.0;
    double bwd_ms_std = 0.0;
    double total_ms_mean = 0.0;
    EngineCounters counters;  // one forward pass, summed over batch*heads slots
    double block_density = 0.0;
    double element_density = 0.0;
    std::optional<double> max_abs_err_vs_oracle;

    // RCM rows carry the bandwidth pair; reported via JSON and logs only,
    // the CSV schema stays fixed.
    std::optional<std::size_t> bandwidth_before;
    std::optional<std::size_t> bandwidth_after;

    static constexpr const char* kCsvHeader =
        "variant,mask,n,block_i,block_j,batch,heads,runs,precision,prepro_ms,fwd_ms_mean,"
        "fwd_ms_std,bwd_ms_mean,bwd_ms_std,total_ms_mean,blocks_visited,blocks_processed,"
        "mask_block_reads,skipped_by_binblk,skipped_mask_reads_by_run,block_density,"
        "element_density,max_abs_err_vs_oracle";

    std::string csv_row() const {
        std::ostringstream os;
        os << to_string(variant) << ',' << mask << ',' << n << ',' << block_i << ',' << block_j
           << ',' << batch << ',' << heads << ',' << runs << ',' << to_string(precision) << ','
           << detail::fmt_double(prepro_ms) << ',' << detail::fmt_double(fwd_ms_mean) << ','
           << detail::fmt_double(fwd_ms_std) << ',' << detail::fmt_double(bwd_ms_mean) << ','
           << detail::fmt_double(bwd_ms_std) << ',' << detail::fmt_double(total_ms_mean) << ','
           << counters.blocks_visited << ',' << counters.blocks_processed << ','
           << counters.mask_block_reads << ',' << counters.skipped_by_binblk << ','
           << counters.skipped_mask_reads_by_run << ',' << detail::fmt_double(block_density)
           << ',' << detail::fmt_double(element_density) << ',';
        if (max_abs_err_vs_oracle) os << detail::fmt_double(*max_abs_err_vs_oracle);
        return os.str();
    }

    static BenchRecord parse_csv_row(const std::string& line);

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["variant"] = to_string(variant);
        j["mask"] = mask;
        j["n"] = n;
        j["block_i"] = block_i;
        j["block_j"] = block_j;
        j["batch"] = batch;
        j["heads"] = heads;
        j["runs"] = runs;
        j["precision"] = to_string(precision);
        j["prepro_ms"] = prepro_ms;
        j["fwd_ms_mean"] = fwd_ms_mean;
        j["fwd_ms_std"] = fwd_ms_std;
        j["bwd_ms_mean"] = bwd_ms_mean;
        j["bwd_ms_std"] = bwd_ms_std;
        j["total_ms_mean"] = total_ms_mean;
        j["blocks_visited"] = counters.blocks_visited;
        j["blocks_processed"] = counters.blocks_processed;
        j["mask_block_reads"] = counters.mask_block_reads;
        j["skipped_by_binblk"] = counters.skipped_by_binblk;
        j["skipped_mask_reads_by_run"] = counters.skipped_mask_reads_by_run;
        j["block_density"] = block_density;
        j["element_density"] = element_density;
        if (max_abs_err_vs_oracle) j["max_abs_err_vs_oracle"] = *max_abs_err_vs_oracle;
        if (bandwidth_before) j["bandwidth_before"] = *bandwidth_before;
        if (bandwidth_after) j["bandwidth_after"] = *bandwidth_after;
        return j;
    }
};

inline BenchRecord BenchRecord::parse_csv_row(const std::string& line) {
    const std::vector<std::string> f = detail::split(line, ',');
    require(f.size() == 23, "expected 23 CSV fields, got " + std::to_string(f.size()));
    BenchRecord r;
    r.variant = parse_variant(f[0]);
    r.mask = f[1];
    r.n = detail::parse_size(f[2]);
    r.block_i = detail::parse_size(f[3]);
    r.block_j = detail::parse_size(f[4]);
    r.batch = detail::parse_size(f[5]);
    r.heads = detail::parse_size(f[6]);
    r.runs = detail::parse_size(f[7]);
    r.precision = parse_precision(f[8]);
    r.prepro_ms = detail::parse_double(f[9]);
    r.fwd_ms_mean = detail::parse_double(f[10]);
    r.fwd_ms_std = detail::parse_double(f[11]);
    r.bwd_ms_mean = detail::parse_double(f[12]);
    r.bwd_ms_std = detail::parse_double(f[13]);
    r.total_ms_mean = detail::parse_double(f[14]);
    r.counters.blocks_visited = detail::parse_size(f[15]);
    r.counters.blocks_processed = detail::parse_size(f[16]);
    r.counters.mask_block_reads = detail::parse_size(f[17]);
    r.counters.skipped_by_binblk = detail::parse_size(f[18]);
    r.counters.skipped_mask_reads_by_run = detail::parse_size(f[19]);
    r.block_density = detail::parse_double(f[20]);
    r.element_density = detail::parse_double(f[21]);
    if (!f[22].empty()) r.max_abs_err_vs_oracle = detail::parse_double(f[22]);
    return r;
}

namespace detail {

/// Rough upper bound on the working set of one bench combination, used to
/// refuse configs that would not fit.
inline double estimated_gb(std::size_t n, std::size_t head_dim, std::size_t slots,
                           Precision prec) {
    const double es = prec == Precision::single_precision ? 4.0 : 8.0;
    const double nd = static_cast<double>(n) * static_cast<double>(head_dim);
    double bytes = static_cast<double>(slots) * (5.0 * nd * es + 2.0 * n * 8.0);
    bytes += 8.0 * nd * 8.0;  // transient double accumulators in the backward pass
    bytes += static_cast<double>(n) * ((n + 63) / 64) * 8.0;  // mask words
    return bytes / (1024.0 * 1024.0 * 1024.0);
}

template <typename T>
struct BenchProblem {
    std::vector<SlotInputs<T>> slots;
    std::vector<Matrix<T>> d_out;
    double scale = 1.0;
};

template <typename T>
BenchProblem<T> make_problem(const BenchConfig& cfg, std::size_t n) {
    std::mt19937_64 gen(cfg.seed);
    BenchProblem<T> p;
    p.scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));
    const std::size_t slots = cfg.batch * cfg.heads;
    p.slots.reserve(slots);
    p.d_out.reserve(slots);
    for (std::size_t s = 0; s < slots; ++s) {
        SlotInputs<T> in;
        in.q = random_matrix<T>(n, cfg.head_dim, gen);
        in.k = random_matrix<T>(n, cfg.head_dim, gen);
        in.v = random_matrix<T>(n, cfg.head_dim, gen);
        p.slots.push_back(std::move(in));
        p.d_out.push_back(random_matrix<T>(n, cfg.head_dim, gen));
    }
    return p;
}

template <typename T>
BenchProblem<T> permute_problem(const BenchProblem<T>& p, const Permutation& perm) {
    BenchProblem<T> out;
    out.scale = p.scale;
    out.slots.reserve(p.slots.size());
    out.d_out.reserve(p.d_out.size());
    for (std::size_t s = 0; s < p.slots.size(); ++s) {
        out.slots.push_back({permute_rows(p.slots[s].q, perm), permute_rows(p.slots[s].k, perm),
                             permute_rows(p.slots[s].v, perm)});
        out.d_out.push_back(permute_rows(p.d_out[s], perm));
    }
    return out;
}

template <typename T>
BenchRecord bench_variant(const BenchConfig& cfg, const BenchProblem<T>& problem,
                          const Mask& mask, const MaskPrep& prep, double prepro_ms,
                          Variant variant, const std::string& label) {
    const std::size_t slot_count = problem.slots.size();
    std::vector<ForwardResult<T>> fwd(slot_count);

    const auto forward_all = [&] {
        for (std::size_t s = 0; s < slot_count; ++s)
            fwd[s] = blocked_forward(problem.slots[s].q, problem.slots[s].k, problem.slots[s].v,
                                     problem.scale, mask, prep, variant, cfg.threads);
    };
    const auto backward_all = [&] {
        for (std::size_t s = 0; s < slot_count; ++s)
            blocked_backward(problem.slots[s].q, problem.slots[s].k, problem.slots[s].v,
                             problem.scale, mask, prep, variant, fwd[s], problem.d_out[s],
                             cfg.threads);
    };

    for (std::size_t w = 0; w < cfg.warmup; ++w) {
        forward_all();
        backward_all();
    }

    std::vector<double> fwd_ms(cfg.runs), bwd_ms(cfg.runs), total_ms(cfg.runs);
    for (std::size_t r = 0; r < cfg.runs; ++r) {
        const double t0 = now_ms();
        forward_all();
        const double t1 = now_ms();
        backward_all();
        const double t2 = now_ms();
        fwd_ms[r] = t1 - t0;
        bwd_ms[r] = t2 - t1;
        total_ms[r] = t2 - t0;
    }

    BenchRecord rec;
    rec.variant = variant;
    rec.mask = label;
    rec.n = mask.size();
    rec.block_i = cfg.block_spec.block_i;
    rec.block_j = cfg.block_spec.block_j;
    rec.batch = cfg.batch;
    rec.heads = cfg.heads;
    rec.runs = cfg.runs;
    rec.precision = cfg.precision;
    rec.prepro_ms = prepro_ms;
    const MeanStd f = mean_std(fwd_ms);
    const MeanStd b = mean_std(bwd_ms);
    rec.fwd_ms_mean = f.mean;
    rec.fwd_ms_std = f.stdev;
    rec.bwd_ms_mean = b.mean;
    rec.bwd_ms_std = b.stdev;
    rec.total_ms_mean = mean_std(total_ms).mean;
    for (const ForwardResult<T>& r : fwd) rec.counters += r.counters;
    rec.block_density = prep.stats.block_density;
    rec.element_density = prep.stats.element_density;

    if (cfg.verify) {
        double worst = 0.0;
        for (std::size_t s = 0; s < slot_count; ++s) {
            const NaiveOutput oracle =
                naive_forward(to_double(problem.slots[s].q), to_double(problem.slots[s].k),
                              to_double(problem.slots[s].v), problem.scale, mask);
            worst = std::max(worst, max_abs_diff(fwd[s].out, oracle.out));
        }
        rec.max_abs_err_vs_oracle = worst;
    }
    return rec;
}

}  // namespace detail

using RecordSink = std::function<void(const BenchRecord&)>;

namespace detail {

template <typename T>
void bench_masks(const BenchConfig& cfg, const Mask& mask, const std::string& label,
                 std::vector<BenchRecord>& records, const RecordSink& sink) {
    const auto emit = [&](BenchRecord rec) {
        if (sink) sink(rec);
        records.push_back(std::move(rec));
    };

    double t0 = now_ms();
    const MaskPrep prep = preprocess_mask(mask, cfg.block_spec);
    const double prepro_ms = now_ms() - t0;

    const BenchProblem<T> problem = make_problem<T>(cfg, mask.size());
    for (Variant v : cfg.variants)
        emit(bench_variant(cfg, problem, mask, prep, prepro_ms, v, label));

    if (!cfg.rcm) return;

    // Reordered pipeline: permutation, permuted mask and its preprocessing
    // all count as preprocessing time for the +rcm rows.
    t0 = now_ms();
    const SparsityGraph graph = build_graph(mask);
    const Permutation perm = rcm_order(graph);
    const Mask pmask = permute_mask(mask, perm);
    const MaskPrep pprep = preprocess_mask(pmask, cfg.block_spec);
    const double rcm_prepro_ms = now_ms() - t0;

    const std::size_t bw_before = bandwidth(mask);
    const std::size_t bw_after = bandwidth(pmask);
    const BenchProblem<T> pproblem = permute_problem(problem, perm);

    for (Variant v : cfg.variants) {
        BenchRecord rec =
            bench_variant(cfg, pproblem, pmask, pprep, rcm_prepro_ms, v, label + "+rcm");
        rec.bandwidth_before = bw_before;
        rec.bandwidth_after = bw_after;
        emit(std::move(rec));
    }
}

}  // namespace detail

inline std::vector<BenchRecord> run_bench(const BenchConfig& cfg, const RecordSink& sink = {}) {
    cfg.validate();
    const MaskSpec spec = MaskSpec::parse(cfg.mask_spec);
    const std::vector<std::size_t> lengths =
        spec.has_free_n() ? cfg.seq_lengths : std::vector<std::size_t>{0};

    std::vector<BenchRecord> records;
    for (std::size_t len : lengths) {
        const MaskSpec sized = spec.has_free_n() ? spec.with_n(len) : spec;
        const Mask mask = generate(sized);
        const std::size_t n = mask.size();

        const double est = detail::estimated_gb(n, cfg.head_dim, cfg.batch * cfg.heads,
                                                cfg.precision);
        require(est <= cfg.memory_limit_gb,
                "estimated working set " + std::to_string(est) + " GiB exceeds limit " +
                    std::to_string(cfg.memory_limit_gb) + " GiB (n=" + std::to_string(n) + ")");
        if (cfg.verify)
            require(n <= cfg.oracle_limit,
                    "verification needs n <= " + std::to_string(cfg.oracle_limit) +
                        ", got " + std::to_string(n));

        const std::string label = sized.to_string();
        if (cfg.precision == Precision::single_precision)
            detail::bench_masks<float>(cfg, mask, label, records, sink);
        else
            detail::bench_masks<double>(cfg, mask, label, records, sink);
    }
    return records;
}

// ---------------------------------------------------------------------------
// Verification against the reference implementation.

struct VerifyEntry {
    Variant variant = Variant::dense;
    std::size_t n = 0;
    double out_err = 0.0;
    double dq_err = 0.0;
    double dk_err = 0.0;
    double dv_err = 0.0;
    bool baseline = false;  // dense rows are informational, never pass/fail
    bool pass = true;
};

struct VerifyReport {
    double tol_out = 0.0;
    double tol_grad = 0.0;
    std::vector<VerifyEntry> entries;
    bool all_pass = true;
};

namespace detail {

template <typename T>
void verify_length(const BenchConfig& cfg, const Mask& mask, VerifyReport& report) {
    const MaskPrep prep = preprocess_mask(mask, cfg.block_spec);
    const BenchProblem<T> problem = make_problem<T>(cfg, mask.size());

    // Oracle once per slot, reused across variants.
    std::vector<NaiveOutput> oracle_out;
    std::vector<NaiveGrads> oracle_grad;
    for (std::size_t s = 0; s < problem.slots.size(); ++s) {
        const Matrix<double> q = to_double(problem.slots[s].q);
        const Matrix<double> k = to_double(problem.slots[s].k);
        const Matrix<double> v = to_double(problem.slots[s].v);
        const Matrix<double> d_out = to_double(problem.d_out[s]);
        oracle_out.push_back(naive_forward(q, k, v, problem.scale, mask));
        oracle_grad.push_back(naive_backward(q, k, v, problem.scale, mask, d_out));
    }

    for (Variant variant : cfg.variants) {
        VerifyEntry e;
        e.variant = variant;
        e.n = mask.size();
        e.baseline = variant == Variant::dense;
        for (std::size_t s = 0; s < problem.slots.size(); ++s) {
            const ForwardResult<T> fwd =
                blocked_forward(problem.slots[s].q, problem.slots[s].k, problem.slots[s].v,
                                problem.scale, mask, prep, variant, cfg.threads);
            const BackwardResult<T> bwd = blocked_backward(
                problem.slots[s].q, problem.slots[s].k, problem.slots[s].v, problem.scale, mask,
                prep, variant, fwd, problem.d_out[s], cfg.threads);
            e.out_err = std::max(e.out_err, max_abs_diff(fwd.out, oracle_out[s].out));
            e.dq_err = std::max(e.dq_err, max_abs_diff(bwd.dq, oracle_grad[s].dq));
            e.dk_err = std::max(e.dk_err, max_abs_diff(bwd.dk, oracle_grad[s].dk));
            e.dv_err = std::max(e.dv_err, max_abs_diff(bwd.dv, oracle_grad[s].dv));
        }
        if (!e.baseline) {
            e.pass = e.out_err <= report.tol_out && e.dq_err <= report.tol_grad &&
                     e.dk_err <= report.tol_grad && e.dv_err <= report.tol_grad;
            report.all_pass = report.all_pass && e.pass;
        }
        report.entries.push_back(e);
    }
}

}  // namespace detail

inline VerifyReport run_verify(const BenchConfig& cfg,
                               std::optional<double> tol_out_override = {},
                               std::optional<double> tol_grad_override = {}) {
    cfg.validate();
    const bool single = cfg.precision == Precision::single_precision;
    VerifyReport report;
    report.tol_out = tol_out_override.value_or(single ? kVerifyTolOutSingle : kVerifyTolOutDouble);
    report.tol_grad =
        tol_grad_override.value_or(single ? kVerifyTolGradSingle : kVerifyTolGradDouble);

    const MaskSpec spec = MaskSpec::parse(cfg.mask_spec);
    const std::vector<std::size_t> lengths =
        spec.has_free_n() ? cfg.seq_lengths : std::vector<std::size_t>{0};
    for (std::size_t len : lengths) {
        const Mask mask = generate(spec.has_free_n() ? spec.with_n(len) : spec);
        require(mask.size() <= cfg.oracle_limit,
                "verification needs n <= " + std::to_string(cfg.oracle_limit) + ", got " +
                    std::to_string(mask.size()));
        if (single)
            detail::verify_length<float>(cfg, mask, report);
        else
            detail::verify_length<double>(cfg, mask, report);
    }
    return report;
}

}  // namespace blockmask
