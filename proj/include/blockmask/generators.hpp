#pragma once

#include <charconv>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "blockmask/mask.hpp"
#include "blockmask/mask_io.hpp"
#include "blockmask/rng.hpp"

namespace blockmask {

/// Token count of a speculative-decoding candidate tree: level k holds
/// prod_{i<=k} s_i nodes, so the total is sum_k prod_{i<=k} s_i.
inline std::size_t medusa_size(std::span<const std::size_t> candidates) {
    require(!candidates.empty(), "medusa candidate list must be non-empty");
    std::size_t total = 0;
    std::size_t level = 1;
    for (std::size_t s : candidates) {
        require(s >= 1, "medusa candidate counts must be positive");
        level *= s;
        total += level;
    }
    return total;
}

/// Lower-triangular tree mask: token i attends to itself and its ancestors.
/// Nodes are laid out level by level; children of a level follow their
/// parents in order, so node t of level k has parent t / s_k in level k-1.
inline Mask gen_medusa(std::span<const std::size_t> candidates) {
    const std::size_t n = medusa_size(candidates);
    Mask mask(n);

    std::vector<std::size_t> parent(n);
    std::size_t level_start = 0;
    std::size_t level_size = candidates[0];
    for (std::size_t t = 0; t < level_size; ++t) parent[t] = t;  // roots point at themselves
    for (std::size_t k = 1; k < candidates.size(); ++k) {
        const std::size_t s = candidates[k];
        const std::size_t next_start = level_start + level_size;
        for (std::size_t t = 0; t < level_size * s; ++t)
            parent[next_start + t] = level_start + t / s;
        level_start = next_start;
        level_size *= s;
    }

    for (std::size_t i = 0; i < n; ++i) {
        mask.set(i, i, true);
        std::size_t node = i;
        while (parent[node] != node) {
            node = parent[node];
            mask.set(i, node, true);
        }
    }
    return mask;
}

inline Mask gen_causal(std::size_t n) {
    require(n >= 1, "n must be positive");
    Mask mask(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) mask.set(i, j, true);
    return mask;
}

inline Mask gen_all_ones(std::size_t n) {
    require(n >= 1, "n must be positive");
    Mask mask(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) mask.set(i, j, true);
    return mask;
}

/// Block-diagonal causal mask for packed training sequences: attention
/// stays within a segment and runs only backwards.
inline Mask gen_packed_sequential(std::span<const std::size_t> lengths) {
    require(!lengths.empty(), "length list must be non-empty");
    std::size_t n = 0;
    for (std::size_t len : lengths) {
        require(len >= 1, "segment lengths must be positive");
        n += len;
    }
    Mask mask(n);
    std::size_t start = 0;
    for (std::size_t len : lengths) {
        for (std::size_t i = start; i < start + len; ++i)
            for (std::size_t j = start; j <= i; ++j) mask.set(i, j, true);
        start += len;
    }
    return mask;
}

/// Packed segments of (input, output) parts: input tokens attend to the
/// whole input part bidirectionally; output tokens attend to the input
/// part and causally to preceding output tokens. No cross-segment ones.
inline Mask gen_packed_input_bidirectional(
    std::span<const std::pair<std::size_t, std::size_t>> segments) {
    require(!segments.empty(), "segment list must be non-empty");
    std::size_t n = 0;
    for (auto [in_len, out_len] : segments) {
        require(in_len + out_len >= 1, "segments must be non-empty");
        n += in_len + out_len;
    }
    Mask mask(n);
    std::size_t start = 0;
    for (auto [in_len, out_len] : segments) {
        const std::size_t out_start = start + in_len;
        for (std::size_t i = start; i < out_start; ++i)
            for (std::size_t j = start; j < out_start; ++j) mask.set(i, j, true);
        for (std::size_t i = out_start; i < out_start + out_len; ++i) {
            for (std::size_t j = start; j < out_start; ++j) mask.set(i, j, true);
            for (std::size_t j = out_start; j <= i; ++j) mask.set(i, j, true);
        }
        start += in_len + out_len;
    }
    return mask;
}

/// Symmetric band: |i - j| <= window. With `causal` set, only j <= i.
inline Mask gen_longformer_windowed(std::size_t n, std::size_t window, bool causal = false) {
    require(n >= 1, "n must be positive");
    require(window < n, "window must be < n");
    Mask mask(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j0 = i >= window ? i - window : 0;
        const std::size_t j1 = causal ? i : std::min(i + window, n - 1);
        for (std::size_t j = j0; j <= j1; ++j) mask.set(i, j, true);
    }
    return mask;
}

/// Dilated band: |i - j| <= window * dilation and (i - j) divisible by
/// dilation.
inline Mask gen_longformer_dilated(std::size_t n, std::size_t window, std::size_t dilation) {
    require(n >= 1, "n must be positive");
    require(window < n, "window must be < n");
    require(dilation >= 1, "dilation must be >= 1");
    Mask mask(n);
    const std::size_t reach = window * dilation;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t step = 0; step <= reach; step += dilation) {
            if (step <= i) mask.set(i, i - step, true);
            if (i + step < n) mask.set(i, i + step, true);
        }
    }
    return mask;
}

/// Windowed band plus full rows and full columns for the first
/// `global_count` tokens.
inline Mask gen_longformer_global(std::size_t n, std::size_t window, std::size_t global_count) {
    require(global_count <= n, "global token count must be <= n");
    Mask mask = gen_longformer_windowed(n, window);
    for (std::size_t g = 0; g < global_count; ++g) {
        for (std::size_t j = 0; j < n; ++j) mask.set(g, j, true);
        for (std::size_t i = 0; i < n; ++i) mask.set(i, g, true);
    }
    return mask;
}

/// Each entry set independently with probability `density`. The diagonal
/// is forced to one by default so no query row is fully masked; degenerate
/// rows are covered by dedicated tests, not random draws.
inline Mask gen_random_sparse(std::size_t n, double density, std::uint64_t seed,
                              bool force_diagonal = true) {
    require(n >= 1, "n must be positive");
    require(density >= 0.0 && density <= 1.0, "density must be in [0, 1]");
    Mask mask(n);
    std::mt19937_64 gen(seed);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (uniform_unit(gen) < density) mask.set(i, j, true);
    if (force_diagonal)
        for (std::size_t i = 0; i < n; ++i) mask.set(i, i, true);
    return mask;
}

// ---------------------------------------------------------------------------
// MaskSpec: a tagged description of a mask family, usable from config files
// and the CLI. Families with a free token count accept with_n(); families
// whose size is intrinsic (tree, packed) ignore it.

struct MaskSpec {
    struct Causal { std::size_t n = 0; };
    struct AllOnes { std::size_t n = 0; };
    struct Medusa { std::vector<std::size_t> candidates; };
    struct PackedSequential { std::vector<std::size_t> lengths; };
    struct PackedInputBidirectional { std::vector<std::pair<std::size_t, std::size_t>> segments; };
    struct Windowed { std::size_t n = 0; std::size_t window = 0; bool causal = false; };
    struct Dilated { std::size_t n = 0; std::size_t window = 0; std::size_t dilation = 1; };
    struct Global { std::size_t n = 0; std::size_t window = 0; std::size_t global_count = 0; };
    struct RandomSparse {
        std::size_t n = 0;
        double density = 0.0;
        std::uint64_t seed = 0;
        bool force_diagonal = true;
    };
    struct File { std::string path; };

    std::variant<Causal, AllOnes, Medusa, PackedSequential, PackedInputBidirectional,
                 Windowed, Dilated, Global, RandomSparse, File>
        value{Causal{}};

    bool has_free_n() const {
        return std::holds_alternative<Causal>(value) || std::holds_alternative<AllOnes>(value) ||
               std::holds_alternative<Windowed>(value) || std::holds_alternative<Dilated>(value) ||
               std::holds_alternative<Global>(value) || std::holds_alternative<RandomSparse>(value);
    }

    MaskSpec with_n(std::size_t n) const {
        MaskSpec out = *this;
        std::visit(
            [n](auto& v) {
                using V = std::decay_t<decltype(v)>;
                if constexpr (requires { v.n; }) v.n = n;
                (void)sizeof(V);
            },
            out.value);
        return out;
    }

    std::string to_string() const;
    static MaskSpec parse(const std::string& text);
};

inline Mask generate(const MaskSpec& spec) {
    return std::visit(
        [](const auto& v) -> Mask {
            using V = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<V, MaskSpec::Causal>) {
                return gen_causal(v.n);
            } else if constexpr (std::is_same_v<V, MaskSpec::AllOnes>) {
                return gen_all_ones(v.n);
            } else if constexpr (std::is_same_v<V, MaskSpec::Medusa>) {
                return gen_medusa(v.candidates);
            } else if constexpr (std::is_same_v<V, MaskSpec::PackedSequential>) {
                return gen_packed_sequential(v.lengths);
            } else if constexpr (std::is_same_v<V, MaskSpec::PackedInputBidirectional>) {
                return gen_packed_input_bidirectional(v.segments);
            } else if constexpr (std::is_same_v<V, MaskSpec::Windowed>) {
                return gen_longformer_windowed(v.n, v.window, v.causal);
            } else if constexpr (std::is_same_v<V, MaskSpec::Dilated>) {
                return gen_longformer_dilated(v.n, v.window, v.dilation);
            } else if constexpr (std::is_same_v<V, MaskSpec::Global>) {
                return gen_longformer_global(v.n, v.window, v.global_count);
            } else if constexpr (std::is_same_v<V, MaskSpec::RandomSparse>) {
                return gen_random_sparse(v.n, v.density, v.seed, v.force_diagonal);
            } else {
                return read_mask(v.path);
            }
        },
        spec.value);
}

namespace detail {

// List separators inside spec strings are semicolons so a spec never
// contains a comma and stays a single CSV field.

inline std::string join_sizes(std::span<const std::size_t> values) {
    std::string out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i) out += ';';
        out += std::to_string(values[i]);
    }
    return out;
}

inline std::vector<std::string> split(const std::string& text, char sep) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = text.find(sep, start);
        if (pos == std::string::npos) {
            parts.push_back(text.substr(start));
            return parts;
        }
        parts.push_back(text.substr(start, pos - start));
        start = pos + 1;
    }
}

inline std::size_t parse_size(const std::string& text) {
    std::size_t value = 0;
    const auto* begin = text.data();
    const auto* end = begin + text.size();
    auto [ptr, ec] = std::from_chars(begin, end, value);
    require(ec == std::errc{} && ptr == end, "bad integer in mask spec: '" + text + "'");
    return value;
}

inline double parse_double(const std::string& text) {
    try {
        std::size_t used = 0;
        const double value = std::stod(text, &used);
        require(used == text.size(), "bad number in mask spec: '" + text + "'");
        return value;
    } catch (const std::invalid_argument&) {
        throw std::invalid_argument("bad number in mask spec: '" + text + "'");
    }
}

// key=value;key=value inside parentheses
inline std::vector<std::pair<std::string, std::string>> parse_kv(const std::string& body) {
    std::vector<std::pair<std::string, std::string>> out;
    if (body.empty()) return out;
    for (const auto& item : split(body, ';')) {
        const std::size_t eq = item.find('=');
        require(eq != std::string::npos, "expected key=value in mask spec: '" + item + "'");
        out.emplace_back(item.substr(0, eq), item.substr(eq + 1));
    }
    return out;
}

}  // namespace detail

inline std::string MaskSpec::to_string() const {
    std::ostringstream out;
    std::visit(
        [&](const auto& v) {
            using V = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<V, Causal>) {
                out << "causal";
            } else if constexpr (std::is_same_v<V, AllOnes>) {
                out << "all-ones";
            } else if constexpr (std::is_same_v<V, Medusa>) {
                out << "medusa[" << detail::join_sizes(v.candidates) << "]";
            } else if constexpr (std::is_same_v<V, PackedSequential>) {
                out << "packed-seq[" << detail::join_sizes(v.lengths) << "]";
            } else if constexpr (std::is_same_v<V, PackedInputBidirectional>) {
                out << "packed-bidir[";
                for (std::size_t i = 0; i < v.segments.size(); ++i) {
                    if (i) out << ';';
                    out << v.segments[i].first << ':' << v.segments[i].second;
                }
                out << "]";
            } else if constexpr (std::is_same_v<V, Windowed>) {
                out << "windowed(w=" << v.window;
                if (v.causal) out << ";causal=1";
                out << ")";
            } else if constexpr (std::is_same_v<V, Dilated>) {
                out << "dilated(w=" << v.window << ";d=" << v.dilation << ")";
            } else if constexpr (std::is_same_v<V, Global>) {
                out << "global(w=" << v.window << ";g=" << v.global_count << ")";
            } else if constexpr (std::is_same_v<V, RandomSparse>) {
                out << "random(p=" << v.density << ";seed=" << v.seed;
                if (!v.force_diagonal) out << ";diag=0";
                out << ")";
            } else {
                out << "file:" << v.path;
            }
        },
        value);
    return out.str();
}

inline MaskSpec MaskSpec::parse(const std::string& text) {
    MaskSpec spec;
    if (text.starts_with("file:")) {
        spec.value = File{text.substr(5)};
        return spec;
    }

    std::string name = text;
    std::string body;
    char close = 0;
    if (const std::size_t open = text.find_first_of("[("); open != std::string::npos) {
        close = text[open] == '[' ? ']' : ')';
        require(text.back() == close, "unbalanced bracket in mask spec: '" + text + "'");
        name = text.substr(0, open);
        body = text.substr(open + 1, text.size() - open - 2);
    }

    if (name == "causal") {
        spec.value = Causal{};
    } else if (name == "all-ones") {
        spec.value = AllOnes{};
    } else if (name == "medusa") {
        Medusa m;
        for (const auto& item : detail::split(body, ';')) m.candidates.push_back(detail::parse_size(item));
        spec.value = std::move(m);
    } else if (name == "packed-seq") {
        PackedSequential p;
        for (const auto& item : detail::split(body, ';')) p.lengths.push_back(detail::parse_size(item));
        spec.value = std::move(p);
    } else if (name == "packed-bidir") {
        PackedInputBidirectional p;
        for (const auto& item : detail::split(body, ';')) {
            const auto parts = detail::split(item, ':');
            require(parts.size() == 2, "expected in:out segment in mask spec: '" + item + "'");
            p.segments.emplace_back(detail::parse_size(parts[0]), detail::parse_size(parts[1]));
        }
        spec.value = std::move(p);
    } else if (name == "windowed") {
        Windowed w;
        for (const auto& [key, val] : detail::parse_kv(body)) {
            if (key == "w") w.window = detail::parse_size(val);
            else if (key == "causal") w.causal = detail::parse_size(val) != 0;
            else throw std::invalid_argument("unknown windowed parameter: " + key);
        }
        spec.value = w;
    } else if (name == "dilated") {
        Dilated d;
        for (const auto& [key, val] : detail::parse_kv(body)) {
            if (key == "w") d.window = detail::parse_size(val);
            else if (key == "d") d.dilation = detail::parse_size(val);
            else throw std::invalid_argument("unknown dilated parameter: " + key);
        }
        spec.value = d;
    } else if (name == "global") {
        Global g;
        for (const auto& [key, val] : detail::parse_kv(body)) {
            if (key == "w") g.window = detail::parse_size(val);
            else if (key == "g") g.global_count = detail::parse_size(val);
            else throw std::invalid_argument("unknown global parameter: " + key);
        }
        spec.value = g;
    } else if (name == "random") {
        RandomSparse r;
        for (const auto& [key, val] : detail::parse_kv(body)) {
            if (key == "p") r.density = detail::parse_double(val);
            else if (key == "seed") r.seed = detail::parse_size(val);
            else if (key == "diag") r.force_diagonal = detail::parse_size(val) != 0;
            else throw std::invalid_argument("unknown random parameter: " + key);
        }
        spec.value = r;
    } else {
        throw std::invalid_argument("unknown mask family: '" + name + "'");
    }
    return spec;
}

}  // namespace blockmask
