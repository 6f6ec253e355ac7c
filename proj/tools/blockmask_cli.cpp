// Command-line front end: mask generation, mask statistics, verification
// against the reference implementation, benchmarking, and RCM reordering.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "blockmask/bench.hpp"
#include "blockmask/engine.hpp"
#include "blockmask/generators.hpp"
#include "blockmask/mask_io.hpp"
#include "blockmask/reorder.hpp"

namespace {

using namespace blockmask;

struct GenMaskArgs {
    std::string family;
    std::size_t n = 0;
    std::vector<std::size_t> candidates;
    std::vector<std::size_t> lengths;
    std::vector<std::string> segments;
    std::size_t window = 0;
    std::size_t dilation = 1;
    std::size_t global_count = 0;
    double density = 0.1;
    std::uint64_t seed = 1;
    bool causal_window = false;
    bool no_diagonal = false;
    std::string out_path;
    bool print_stats = false;
    BlockSpec block_spec;

    CLI::Option* opt_n = nullptr;
    CLI::Option* opt_window = nullptr;
};

MaskSpec spec_from_args(const GenMaskArgs& a) {
    const auto need = [&](CLI::Option* opt, const char* what) {
        require(opt != nullptr && opt->count() > 0,
                std::string(what) + " is required for family '" + a.family + "'");
    };
    MaskSpec spec;
    if (a.family == "causal") {
        need(a.opt_n, "--n");
        spec.value = MaskSpec::Causal{a.n};
    } else if (a.family == "all-ones") {
        need(a.opt_n, "--n");
        spec.value = MaskSpec::AllOnes{a.n};
    } else if (a.family == "medusa") {
        require(!a.candidates.empty(), "--candidates is required for family 'medusa'");
        spec.value = MaskSpec::Medusa{a.candidates};
    } else if (a.family == "packed-seq") {
        require(!a.lengths.empty(), "--lengths is required for family 'packed-seq'");
        spec.value = MaskSpec::PackedSequential{a.lengths};
    } else if (a.family == "packed-bidir") {
        require(!a.segments.empty(), "--segments is required for family 'packed-bidir'");
        MaskSpec::PackedInputBidirectional p;
        for (const std::string& s : a.segments) {
            const auto parts = detail::split(s, ':');
            require(parts.size() == 2, "segment must be in:out, got '" + s + "'");
            p.segments.emplace_back(detail::parse_size(parts[0]), detail::parse_size(parts[1]));
        }
        spec.value = std::move(p);
    } else if (a.family == "windowed") {
        need(a.opt_n, "--n");
        need(a.opt_window, "--window");
        spec.value = MaskSpec::Windowed{a.n, a.window, a.causal_window};
    } else if (a.family == "dilated") {
        need(a.opt_n, "--n");
        need(a.opt_window, "--window");
        spec.value = MaskSpec::Dilated{a.n, a.window, a.dilation};
    } else if (a.family == "global") {
        need(a.opt_n, "--n");
        need(a.opt_window, "--window");
        spec.value = MaskSpec::Global{a.n, a.window, a.global_count};
    } else if (a.family == "random") {
        need(a.opt_n, "--n");
        spec.value = MaskSpec::RandomSparse{a.n, a.density, a.seed, !a.no_diagonal};
    } else {
        throw std::invalid_argument("unknown mask family: '" + a.family + "'");
    }
    return spec;
}

void print_block_stats(const Mask& mask, BlockSpec spec, std::ostream& os) {
    const BlockSums sums = block_sums(mask, spec);
    const BlockStats stats = block_stats(sums);
    const DenseRuns runs = build_dense_runs(sums);
    os << "block_spec        " << spec.block_i << "x" << spec.block_j << "\n"
       << "blocks_total      " << stats.blocks_total << "\n"
       << "blocks_nonzero    " << stats.blocks_nonzero << "\n"
       << "blocks_full       " << stats.blocks_full << "\n"
       << "block_density     " << stats.block_density << "\n"
       << "run_blocks        " << runs.total_run_blocks() << "\n";
}

int cmd_gen_mask(const GenMaskArgs& a) {
    const MaskSpec spec = spec_from_args(a);
    const Mask mask = generate(spec);
    write_mask(mask, a.out_path);

    const double element_density =
        static_cast<double>(mask.count_ones()) /
        (static_cast<double>(mask.size()) * static_cast<double>(mask.size()));
    std::cout << "wrote             " << a.out_path << "\n"
              << "mask              " << spec.to_string() << "\n"
              << "n                 " << mask.size() << "\n"
              << "ones              " << mask.count_ones() << "\n"
              << "element_density   " << element_density << "\n";
    if (a.print_stats) print_block_stats(mask, a.block_spec, std::cout);
    return 0;
}

struct StatsArgs {
    std::string mask_path;
    BlockSpec block_spec;
    std::string occupancy_out;
};

int cmd_stats(const StatsArgs& a) {
    const Mask mask = read_mask(a.mask_path);
    const double element_density =
        static_cast<double>(mask.count_ones()) /
        (static_cast<double>(mask.size()) * static_cast<double>(mask.size()));
    std::cout << "n                 " << mask.size() << "\n"
              << "ones              " << mask.count_ones() << "\n"
              << "element_density   " << element_density << "\n"
              << "bandwidth         " << bandwidth(mask) << "\n";
    print_block_stats(mask, a.block_spec, std::cout);
    if (!a.occupancy_out.empty()) {
        const BlockSums sums = block_sums(mask, a.block_spec);
        write_occupancy(build_block_occupancy(sums), mask.size(), a.block_spec, a.occupancy_out);
        std::cout << "wrote occupancy   " << a.occupancy_out << "\n";
    }
    return 0;
}

// Options shared by `bench` and `verify`. A JSON config file provides the
// base values; any flag given on the command line wins over the file.
struct BenchArgs {
    std::string config_path;
    std::string mask_spec;
    std::vector<std::size_t> lengths;
    std::size_t block_i = 0, block_j = 0;
    std::vector<std::string> variants;
    std::size_t batch = 0, heads = 0, runs = 0, warmup = 0, head_dim = 0;
    std::string precision;
    bool rcm = false;
    bool verify = false;
    std::uint64_t seed = 0;
    std::size_t oracle_limit = 0;
    double memory_limit_gb = 0.0;
    unsigned threads = 0;

    CLI::Option *opt_config = nullptr, *opt_mask = nullptr, *opt_n = nullptr;
    CLI::Option *opt_block_i = nullptr, *opt_block_j = nullptr, *opt_variants = nullptr;
    CLI::Option *opt_batch = nullptr, *opt_heads = nullptr, *opt_runs = nullptr;
    CLI::Option *opt_warmup = nullptr, *opt_head_dim = nullptr, *opt_precision = nullptr;
    CLI::Option *opt_rcm = nullptr, *opt_verify = nullptr, *opt_seed = nullptr;
    CLI::Option *opt_oracle_limit = nullptr, *opt_memory = nullptr, *opt_threads = nullptr;
};

void add_bench_options(CLI::App* cmd, BenchArgs& a, bool with_verify_flag) {
    a.opt_config = cmd->add_option("--config", a.config_path, "JSON config file");
    a.opt_mask = cmd->add_option("--mask", a.mask_spec,
                                 "mask spec, e.g. causal, windowed(w=256), medusa[4;4;4;4], "
                                 "file:PATH");
    a.opt_n = cmd->add_option("--n", a.lengths, "sequence lengths")->delimiter(',');
    a.opt_block_i = cmd->add_option("--block-i", a.block_i, "tile rows");
    a.opt_block_j = cmd->add_option("--block-j", a.block_j, "tile columns");
    a.opt_variants =
        cmd->add_option("--variants", a.variants, "dense, naive, binblk, dense-binblk")
            ->delimiter(',');
    a.opt_batch = cmd->add_option("--batch", a.batch, "batch size");
    a.opt_heads = cmd->add_option("--heads", a.heads, "attention heads");
    a.opt_runs = cmd->add_option("--runs", a.runs, "timed iterations");
    a.opt_warmup = cmd->add_option("--warmup", a.warmup, "untimed warmup iterations");
    a.opt_head_dim = cmd->add_option("--head-dim", a.head_dim, "head dimension");
    a.opt_precision = cmd->add_option("--precision", a.precision, "single or double");
    a.opt_rcm = cmd->add_flag("--rcm", a.rcm, "also run the RCM-reordered pipeline");
    if (with_verify_flag)
        a.opt_verify = cmd->add_flag("--verify", a.verify, "compare outputs to the oracle");
    a.opt_seed = cmd->add_option("--seed", a.seed, "input RNG seed");
    a.opt_oracle_limit = cmd->add_option("--oracle-limit", a.oracle_limit,
                                         "largest n the oracle will accept");
    a.opt_memory = cmd->add_option("--memory-limit-gb", a.memory_limit_gb,
                                   "refuse configs estimated beyond this");
    a.opt_threads = cmd->add_option("--threads", a.threads, "worker thread count")
                        ->envname("BLOCKMASK_THREADS");
}

BenchConfig resolve_config(const BenchArgs& a) {
    BenchConfig cfg;
    if (*a.opt_config) {
        std::ifstream in(a.config_path);
        require(bool(in), "cannot open config file: " + a.config_path);
        nlohmann::json j;
        in >> j;
        cfg = BenchConfig::from_json(j);
    }
    if (*a.opt_mask) cfg.mask_spec = a.mask_spec;
    if (*a.opt_n) cfg.seq_lengths = a.lengths;
    if (*a.opt_block_i) cfg.block_spec.block_i = a.block_i;
    if (*a.opt_block_j) cfg.block_spec.block_j = a.block_j;
    if (*a.opt_variants) {
        cfg.variants.clear();
        for (const std::string& v : a.variants) cfg.variants.push_back(parse_variant(v));
    }
    if (*a.opt_batch) cfg.batch = a.batch;
    if (*a.opt_heads) cfg.heads = a.heads;
    if (*a.opt_runs) cfg.runs = a.runs;
    if (*a.opt_warmup) cfg.warmup = a.warmup;
    if (*a.opt_head_dim) cfg.head_dim = a.head_dim;
    if (*a.opt_precision) cfg.precision = parse_precision(a.precision);
    if (*a.opt_rcm) cfg.rcm = a.rcm;
    if (a.opt_verify != nullptr && *a.opt_verify) cfg.verify = a.verify;
    if (*a.opt_seed) cfg.seed = a.seed;
    if (*a.opt_oracle_limit) cfg.oracle_limit = a.oracle_limit;
    if (*a.opt_memory) cfg.memory_limit_gb = a.memory_limit_gb;
    if (*a.opt_threads) cfg.threads = a.threads;
    cfg.validate();
    return cfg;
}

int cmd_bench(const BenchArgs& a, const std::string& out_path, bool as_json) {
    const BenchConfig cfg = resolve_config(a);

    std::ofstream file;
    std::ostream* os = &std::cout;
    if (!out_path.empty()) {
        file.open(out_path, std::ios::trunc);
        require(bool(file), "cannot open output file: " + out_path);
        os = &file;
    }

    if (!as_json) *os << BenchRecord::kCsvHeader << "\n";
    run_bench(cfg, [&](const BenchRecord& rec) {
        *os << (as_json ? rec.to_json().dump() : rec.csv_row()) << "\n";
        os->flush();
        if (rec.bandwidth_before)
            std::cerr << "# " << rec.mask << " n=" << rec.n << " bandwidth "
                      << *rec.bandwidth_before << " -> " << *rec.bandwidth_after << "\n";
    });
    return 0;
}

int cmd_verify(const BenchArgs& a, std::optional<double> tol_out, std::optional<double> tol_grad) {
    BenchConfig cfg = resolve_config(a);
    const VerifyReport report = run_verify(cfg, tol_out, tol_grad);

    std::cout << "tolerances: out " << report.tol_out << ", grads " << report.tol_grad << "\n";
    for (const VerifyEntry& e : report.entries) {
        std::cout << "variant=" << to_string(e.variant) << " n=" << e.n << " out_err=" << e.out_err
                  << " dq_err=" << e.dq_err << " dk_err=" << e.dk_err << " dv_err=" << e.dv_err;
        if (e.baseline)
            std::cout << "  mask-agnostic baseline, expected mismatch\n";
        else
            std::cout << (e.pass ? "  PASS" : "  FAIL") << "\n";
    }
    std::cout << "overall: " << (report.all_pass ? "PASS" : "FAIL") << "\n";
    return report.all_pass ? 0 : 1;
}

struct RcmArgs {
    std::string mask_path;
    std::string perm_out;
    std::string mask_out;
    BlockSpec block_spec;
};

int cmd_rcm(const RcmArgs& a) {
    const Mask mask = read_mask(a.mask_path);
    const SparsityGraph graph = build_graph(mask);
    const Permutation perm = rcm_order(graph);
    const Mask permuted = permute_mask(mask, perm);

    const BlockStats before = block_stats(block_sums(mask, a.block_spec));
    const BlockStats after = block_stats(block_sums(permuted, a.block_spec));
    std::cout << "n                 " << mask.size() << "\n"
              << "bandwidth         " << bandwidth(mask) << " -> " << bandwidth(permuted) << "\n"
              << "blocks_nonzero    " << before.blocks_nonzero << " -> " << after.blocks_nonzero
              << " (of " << before.blocks_total << ", spec " << a.block_spec.block_i << "x"
              << a.block_spec.block_j << ")\n";

    if (!a.perm_out.empty()) {
        const nlohmann::json j = perm.forward;
        std::ofstream out(a.perm_out, std::ios::trunc);
        require(bool(out), "cannot open output file: " + a.perm_out);
        out << j.dump() << "\n";
        std::cout << "wrote permutation " << a.perm_out << "\n";
    }
    if (!a.mask_out.empty()) {
        write_mask(permuted, a.mask_out);
        std::cout << "wrote mask        " << a.mask_out << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Blocked attention with binary block masking"};
    app.require_subcommand(1);

    GenMaskArgs gen;
    CLI::App* gen_cmd = app.add_subcommand("gen-mask", "Generate a mask and write a BBMK file");
    gen_cmd->add_option("family", gen.family,
                        "causal | all-ones | medusa | packed-seq | packed-bidir | windowed | "
                        "dilated | global | random")
        ->required();
    gen.opt_n = gen_cmd->add_option("--n", gen.n, "token count");
    gen_cmd->add_option("--candidates", gen.candidates, "medusa: candidates per tree level")
        ->delimiter(',');
    gen_cmd->add_option("--lengths", gen.lengths, "packed-seq: segment lengths")->delimiter(',');
    gen_cmd->add_option("--segments", gen.segments, "packed-bidir: in:out length pairs")
        ->delimiter(',');
    gen.opt_window = gen_cmd->add_option("--window", gen.window, "windowed/dilated/global width");
    gen_cmd->add_option("--dilation", gen.dilation, "dilated: stride between visible tokens");
    gen_cmd->add_option("--global-count", gen.global_count, "global: fully-connected tokens");
    gen_cmd->add_option("--density", gen.density, "random: probability of a one");
    gen_cmd->add_option("--seed", gen.seed, "random: RNG seed");
    gen_cmd->add_flag("--causal", gen.causal_window, "windowed: keep only j <= i");
    gen_cmd->add_flag("--no-diagonal", gen.no_diagonal, "random: do not force the diagonal");
    gen_cmd->add_option("--out", gen.out_path, "output BBMK path")->required();
    gen_cmd->add_flag("--stats", gen.print_stats, "print block statistics");
    gen_cmd->add_option("--block-i", gen.block_spec.block_i, "tile rows for --stats");
    gen_cmd->add_option("--block-j", gen.block_spec.block_j, "tile columns for --stats");

    StatsArgs stats;
    CLI::App* stats_cmd = app.add_subcommand("stats", "Report statistics of a BBMK mask file");
    stats_cmd->add_option("mask", stats.mask_path, "BBMK file")->required();
    stats_cmd->add_option("--block-i", stats.block_spec.block_i, "tile rows");
    stats_cmd->add_option("--block-j", stats.block_spec.block_j, "tile columns");
    stats_cmd->add_option("--write-occupancy", stats.occupancy_out,
                          "write the BBLK occupancy sidecar here");

    BenchArgs verify_args;
    double tol_out = 0.0, tol_grad = 0.0;
    CLI::App* verify_cmd =
        app.add_subcommand("verify", "Compare engine outputs and gradients to the oracle");
    add_bench_options(verify_cmd, verify_args, false);
    CLI::Option* opt_tol_out =
        verify_cmd->add_option("--tol-out", tol_out, "output tolerance override");
    CLI::Option* opt_tol_grad =
        verify_cmd->add_option("--tol-grad", tol_grad, "gradient tolerance override");

    BenchArgs bench_args;
    std::string bench_out;
    bool bench_json = false;
    CLI::App* bench_cmd = app.add_subcommand("bench", "Time variants and emit one row per combination");
    add_bench_options(bench_cmd, bench_args, true);
    bench_cmd->add_option("--out", bench_out, "write rows here instead of stdout");
    bench_cmd->add_flag("--json", bench_json, "emit JSON lines instead of CSV");

    RcmArgs rcm;
    CLI::App* rcm_cmd =
        app.add_subcommand("rcm", "Reorder a mask with Reverse Cuthill-McKee and report stats");
    rcm_cmd->add_option("mask", rcm.mask_path, "BBMK file")->required();
    rcm_cmd->add_option("--out", rcm.perm_out, "write the permutation as a JSON array");
    rcm_cmd->add_option("--write-mask", rcm.mask_out, "write the permuted mask as BBMK");
    rcm_cmd->add_option("--block-i", rcm.block_spec.block_i, "tile rows for block stats");
    rcm_cmd->add_option("--block-j", rcm.block_spec.block_j, "tile columns for block stats");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen_cmd->parsed()) return cmd_gen_mask(gen);
        if (stats_cmd->parsed()) return cmd_stats(stats);
        if (verify_cmd->parsed())
            return cmd_verify(verify_args,
                              *opt_tol_out ? std::optional<double>(tol_out) : std::nullopt,
                              *opt_tol_grad ? std::optional<double>(tol_grad) : std::nullopt);
        if (bench_cmd->parsed()) return cmd_bench(bench_args, bench_out, bench_json);
        if (rcm_cmd->parsed()) return cmd_rcm(rcm);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
